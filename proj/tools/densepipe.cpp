#include "densepipe/cli.hpp"
#include "densepipe/runtime.hpp"

int main(int argc, char** argv) {
  densepipe::keep_freed_memory();
  return densepipe::dispatch(argc, argv);
}
