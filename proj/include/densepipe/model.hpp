#pragma once

// Model construction and execution. A model is a DAG of layer nodes stored in
// topological order; dense blocks are expressed with explicit concatenation
// nodes so the connectivity pattern is inspectable.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/kv.hpp"
#include "densepipe/ops.hpp"
#include "densepipe/tensor.hpp"

namespace densepipe {

enum class ModelKind { dense, plain };

inline std::string to_string(ModelKind kind) { return kind == ModelKind::dense ? "dense" : "plain"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "dense") return ModelKind::dense;
  if (s == "plain") return ModelKind::plain;
  throw ConfigError("unknown model kind '" + std::string(s) + "' (expected dense or plain)");
}

struct StemConfig {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t out_channels = 16;  // k0
  bool pool = false;              // BN -> ReLU -> 3x3/2 max pool after the stem conv

  friend bool operator==(const StemConfig&, const StemConfig&) = default;
};

struct HeadConfig {
  std::vector<std::size_t> dense_widths;
  double dropout_rate = 0.5;

  /// Classifier head variants A-D: 1024 / 1024,512 / 1024,512,256 / 1024,512,256,128.
  static HeadConfig preset(char name, double dropout_rate = 0.5) {
    switch (name) {
      case 'A': case 'a': return {{1024}, dropout_rate};
      case 'B': case 'b': return {{1024, 512}, dropout_rate};
      case 'C': case 'c': return {{1024, 512, 256}, dropout_rate};
      case 'D': case 'd': return {{1024, 512, 256, 128}, dropout_rate};
      default: throw ConfigError(std::string("unknown head preset '") + name + "' (expected A, B, C or D)");
    }
  }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

struct DenseNetConfig {
  StemConfig stem;
  std::vector<std::size_t> block_sizes{3, 3};
  std::size_t growth_rate = 12;
  std::size_t bottleneck_multiplier = 4;
  double compression = 0.5;
  HeadConfig head{{64}, 0.5};
  std::size_t num_classes = 2;
  std::size_t input_resolution = 32;
  std::size_t input_channels = 1;
  std::uint64_t seed = 0;

  /// 224x224 DenseNet-121 backbone: 7x7/2 stem + pool, k0 = 64, k = 32.
  static DenseNetConfig densenet121(char head_preset = 'B') {
    DenseNetConfig c;
    c.stem = {7, 2, 64, true};
    c.block_sizes = {6, 12, 24, 16};
    c.growth_rate = 32;
    c.head = HeadConfig::preset(head_preset);
    c.input_resolution = 224;
    c.input_channels = 3;
    return c;
  }

  std::size_t downsampling() const {
    std::size_t f = stem.stride * (stem.pool ? 2 : 1);
    for (std::size_t b = 1; b < block_sizes.size(); ++b) f *= 2;
    return f;
  }

  void validate() const {
    if (block_sizes.empty()) throw ConfigError("block_sizes must not be empty");
    if (growth_rate < 1) throw ConfigError("growth_rate must be at least 1");
    if (bottleneck_multiplier < 1) throw ConfigError("bottleneck_multiplier must be at least 1");
    if (!(compression > 0.0 && compression <= 1.0)) throw ConfigError("compression must lie in (0, 1]");
    if (stem.kernel < 1 || stem.kernel % 2 == 0) throw ConfigError("stem kernel must be odd");
    if (stem.stride < 1 || stem.out_channels < 1) throw ConfigError("stem stride and channels must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    if (input_channels < 1) throw ConfigError("input_channels must be positive");
    if (input_resolution < 1) throw ConfigError("input_resolution must be positive");
    if (!(head.dropout_rate >= 0.0 && head.dropout_rate < 1.0)) throw ConfigError("head dropout must lie in [0, 1)");
    for (std::size_t w : head.dense_widths) {
      if (w < 1) throw ConfigError("head widths must be positive");
    }
    if (input_resolution % downsampling() != 0) {
      throw ConfigError("input resolution " + std::to_string(input_resolution) +
                        " is not divisible by the cumulative downsampling factor " + std::to_string(downsampling()));
    }
  }

  friend bool operator==(const DenseNetConfig&, const DenseNetConfig&) = default;
};

inline std::string to_text(const DenseNetConfig& c) {
  std::string s;
  const auto line = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  line("stem_kernel", std::to_string(c.stem.kernel));
  line("stem_stride", std::to_string(c.stem.stride));
  line("stem_channels", std::to_string(c.stem.out_channels));
  line("stem_pool", c.stem.pool ? "true" : "false");
  line("block_sizes", kv::join(c.block_sizes));
  line("growth_rate", std::to_string(c.growth_rate));
  line("bottleneck_multiplier", std::to_string(c.bottleneck_multiplier));
  line("compression", kv::format_double(c.compression));
  line("head_widths", kv::join(c.head.dense_widths));
  line("dropout_rate", kv::format_double(c.head.dropout_rate));
  line("num_classes", std::to_string(c.num_classes));
  line("resolution", std::to_string(c.input_resolution));
  line("channels", std::to_string(c.input_channels));
  line("seed", std::to_string(c.seed));
  return s;
}

/// Applies one model key; returns false when the key is not a model key.
inline bool apply_model_key(DenseNetConfig& c, const std::string& key, const std::string& value) {
  using kv::to_int;
  if (key == "stem_kernel") c.stem.kernel = to_int<std::size_t>(key, value);
  else if (key == "stem_stride") c.stem.stride = to_int<std::size_t>(key, value);
  else if (key == "stem_channels") c.stem.out_channels = to_int<std::size_t>(key, value);
  else if (key == "stem_pool") c.stem.pool = kv::to_bool(key, value);
  else if (key == "block_sizes") c.block_sizes = kv::to_int_list<std::size_t>(key, value);
  else if (key == "growth_rate") c.growth_rate = to_int<std::size_t>(key, value);
  else if (key == "bottleneck_multiplier") c.bottleneck_multiplier = to_int<std::size_t>(key, value);
  else if (key == "compression") c.compression = kv::to_double(key, value);
  else if (key == "head_widths") c.head.dense_widths = kv::to_int_list<std::size_t>(key, value);
  else if (key == "dropout_rate") c.head.dropout_rate = kv::to_double(key, value);
  else if (key == "num_classes") c.num_classes = to_int<std::size_t>(key, value);
  else if (key == "resolution") c.input_resolution = to_int<std::size_t>(key, value);
  else if (key == "channels") c.input_channels = to_int<std::size_t>(key, value);
  else if (key == "seed") c.seed = to_int<std::uint64_t>(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Graph representation.

enum class LayerOp { input, conv, batch_norm, relu, max_pool, avg_pool, concat, global_pool, dense, dropout };

struct Node {
  std::string name;
  LayerOp op = LayerOp::input;
  std::vector<int> inputs;
  std::size_t channels = 0;  // output channels, or features for (N, F) nodes
  std::size_t kernel = 0, stride = 1, pad = 0;
  double rate = 0.0;
  // Parameter names: conv/dense weight + bias; batch norm gamma + beta.
  std::string weight, bias;
  // Buffer names (batch norm running statistics).
  std::string running_mean, running_var;

  bool has_params() const { return !weight.empty() || !bias.empty(); }
};

struct Graph {
  std::vector<Node> nodes;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  int output = -1;

  int find(std::string_view name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }

  const Node& node(std::string_view name) const {
    const int i = find(name);
    if (i < 0) throw ConfigError("no layer named '" + std::string(name) + "'");
    return nodes[static_cast<std::size_t>(i)];
  }
};

/// One composite layer inside a dense block.
struct DenseLayerInfo {
  std::size_t block = 0;        // 1-based
  std::size_t layer = 0;        // 1-based
  int concat = -1;              // node that assembles this layer's input
  std::size_t in_channels = 0;  // k0 + k (l - 1) for dense connectivity
  int output = -1;              // the layer's 3x3 conv
};

class GraphBuilder {
 public:
  explicit GraphBuilder(Rng init) : rng_(std::move(init)) {}

  int input(const std::string& name, std::size_t channels) {
    Node n;
    n.name = name;
    n.op = LayerOp::input;
    n.channels = channels;
    return push(std::move(n));
  }

  int conv(const std::string& name, int in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
           std::size_t pad, bool bias = false) {
    Node n;
    n.name = name;
    n.op = LayerOp::conv;
    n.inputs = {in};
    n.channels = out_channels;
    n.kernel = kernel;
    n.stride = stride;
    n.pad = pad;
    const std::size_t cin = channels(in);
    n.weight = name + ".weight";
    graph_.params[n.weight] = he_normal({out_channels, cin, kernel, kernel}, cin * kernel * kernel);
    if (bias) {
      n.bias = name + ".bias";
      graph_.params[n.bias] = Tensor({out_channels});
    }
    return push(std::move(n));
  }

  int batch_norm(const std::string& name, int in) {
    Node n;
    n.name = name;
    n.op = LayerOp::batch_norm;
    n.inputs = {in};
    n.channels = channels(in);
    n.weight = name + ".gamma";
    n.bias = name + ".beta";
    n.running_mean = name + ".running_mean";
    n.running_var = name + ".running_var";
    graph_.params[n.weight] = Tensor({n.channels}, 1.0);
    graph_.params[n.bias] = Tensor({n.channels}, 0.0);
    graph_.buffers[n.running_mean] = Tensor({n.channels}, 0.0);
    graph_.buffers[n.running_var] = Tensor({n.channels}, 1.0);
    return push(std::move(n));
  }

  int simple(const std::string& name, LayerOp op, int in) {
    Node n;
    n.name = name;
    n.op = op;
    n.inputs = {in};
    n.channels = channels(in);
    return push(std::move(n));
  }

  int relu(const std::string& name, int in) { return simple(name, LayerOp::relu, in); }
  int global_pool(const std::string& name, int in) { return simple(name, LayerOp::global_pool, in); }

  int avg_pool(const std::string& name, int in) {
    Node n;
    n.name = name;
    n.op = LayerOp::avg_pool;
    n.inputs = {in};
    n.channels = channels(in);
    n.kernel = 2;
    n.stride = 2;
    return push(std::move(n));
  }

  int max_pool(const std::string& name, int in, std::size_t size, std::size_t stride, std::size_t pad) {
    Node n;
    n.name = name;
    n.op = LayerOp::max_pool;
    n.inputs = {in};
    n.channels = channels(in);
    n.kernel = size;
    n.stride = stride;
    n.pad = pad;
    return push(std::move(n));
  }

  int concat(const std::string& name, std::vector<int> inputs) {
    Node n;
    n.name = name;
    n.op = LayerOp::concat;
    for (int i : inputs) n.channels += channels(i);
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }

  int dense(const std::string& name, int in, std::size_t width) {
    Node n;
    n.name = name;
    n.op = LayerOp::dense;
    n.inputs = {in};
    n.channels = width;
    const std::size_t fan_in = channels(in);
    n.weight = name + ".weight";
    n.bias = name + ".bias";
    graph_.params[n.weight] = he_normal({fan_in, width}, fan_in);
    graph_.params[n.bias] = Tensor({width});
    return push(std::move(n));
  }

  int dropout(const std::string& name, int in, double rate) {
    Node n;
    n.name = name;
    n.op = LayerOp::dropout;
    n.inputs = {in};
    n.channels = channels(in);
    n.rate = rate;
    return push(std::move(n));
  }

  std::size_t channels(int node) const { return graph_.nodes.at(static_cast<std::size_t>(node)).channels; }
  std::size_t size() const { return graph_.nodes.size(); }

  Graph finish(int output) && {
    graph_.output = output;
    return std::move(graph_);
  }

 private:
  Tensor he_normal(Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.values()) v = rng_.normal() * std_dev;
    return t;
  }

  int push(Node n) {
    for (const Node& existing : graph_.nodes) {
      if (existing.name == n.name) throw ConfigError("duplicate layer name '" + n.name + "'");
    }
    for (int i : n.inputs) {
      if (i < 0 || static_cast<std::size_t>(i) >= graph_.nodes.size()) {
        throw ConfigError("layer '" + n.name + "' consumes a layer that does not precede it");
      }
    }
    graph_.nodes.push_back(std::move(n));
    return static_cast<int>(graph_.nodes.size() - 1);
  }

  Graph graph_;
  Rng rng_;
};

struct BlockResult {
  int output = -1;
  std::size_t out_channels = 0;
  std::vector<DenseLayerInfo> layers;
};

/// Appends a dense block. Each layer is BN -> ReLU -> 1x1 conv (multiplier*k)
/// -> BN -> ReLU -> 3x3 conv (k). With dense connectivity layer l consumes the
/// concatenation of the block input and all l-1 earlier layer outputs; with
/// plain connectivity it consumes only its predecessor.
inline BlockResult add_dense_block(GraphBuilder& b, int input, std::size_t block_index, std::size_t num_layers,
                                   std::size_t growth, std::size_t multiplier, ModelKind kind,
                                   const std::string& prefix) {
  if (growth < 1 || multiplier < 1) throw ConfigError("growth rate and bottleneck multiplier must be positive");
  BlockResult r;
  std::vector<int> produced;
  for (std::size_t l = 1; l <= num_layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    std::vector<int> sources;
    if (kind == ModelKind::dense) {
      sources.push_back(input);
      sources.insert(sources.end(), produced.begin(), produced.end());
    } else {
      sources.push_back(produced.empty() ? input : produced.back());
    }
    const int cat = b.concat(p + ".concat", sources);
    int x = b.batch_norm(p + ".bn1", cat);
    x = b.relu(p + ".relu1", x);
    x = b.conv(p + ".conv1", x, multiplier * growth, 1, 1, 0);
    x = b.batch_norm(p + ".bn2", x);
    x = b.relu(p + ".relu2", x);
    x = b.conv(p + ".conv2", x, growth, 3, 1, 1);
    r.layers.push_back({block_index, l, cat, b.channels(cat), x});
    produced.push_back(x);
  }
  std::vector<int> outs;
  if (kind == ModelKind::dense || produced.empty()) {
    outs.push_back(input);
    if (kind == ModelKind::dense) outs.insert(outs.end(), produced.begin(), produced.end());
  } else {
    outs.push_back(produced.back());
  }
  r.output = b.concat(prefix + ".out", outs);
  r.out_channels = b.channels(r.output);
  return r;
}

struct TransitionResult {
  int output = -1;
  std::size_t out_channels = 0;
};

/// BN -> ReLU -> 1x1 conv to floor(theta * in) channels -> 2x2 average pool, stride 2.
inline TransitionResult add_transition(GraphBuilder& b, int input, double theta, const std::string& prefix) {
  const std::size_t in = b.channels(input);
  if (!(theta > 0.0 && theta <= 1.0)) throw ConfigError("compression must lie in (0, 1]");
  const auto out = static_cast<std::size_t>(std::floor(theta * static_cast<double>(in) + 1e-9));
  if (out == 0) {
    throw ConfigError("transition '" + prefix + "' would compress " + std::to_string(in) + " channels to zero");
  }
  int x = b.batch_norm(prefix + ".bn", input);
  x = b.relu(prefix + ".relu", x);
  x = b.conv(prefix + ".conv", x, out, 1, 1, 0);
  x = b.avg_pool(prefix + ".pool", x);
  return {x, out};
}

/// Standalone dense block or transition with its own input node (node 0).
struct Subgraph {
  Graph graph;
  std::size_t out_channels = 0;
  std::vector<DenseLayerInfo> layers;
};

inline Subgraph build_dense_block(std::size_t in_channels, std::size_t num_layers, std::size_t growth,
                                  std::size_t multiplier, ModelKind kind = ModelKind::dense,
                                  std::uint64_t seed = 0) {
  if (in_channels < 1) throw ConfigError("dense block needs at least one input channel");
  GraphBuilder b(Rng::stream(seed, "init"));
  const int in = b.input("input", in_channels);
  BlockResult r = add_dense_block(b, in, 1, num_layers, growth, multiplier, kind, "block1");
  Subgraph s;
  s.out_channels = r.out_channels;
  s.layers = std::move(r.layers);
  s.graph = std::move(b).finish(r.output);
  return s;
}

inline Subgraph build_transition(std::size_t in_channels, double theta, std::uint64_t seed = 0) {
  if (in_channels < 1) throw ConfigError("transition needs at least one input channel");
  GraphBuilder b(Rng::stream(seed, "init"));
  const int in = b.input("input", in_channels);
  const TransitionResult r = add_transition(b, in, theta, "transition1");
  Subgraph s;
  s.out_channels = r.out_channels;
  s.graph = std::move(b).finish(r.output);
  return s;
}

// ---------------------------------------------------------------------------

struct ModelGraph {
  DenseNetConfig config;
  ModelKind kind = ModelKind::dense;
  Graph graph;
  std::set<std::string> frozen;          // parameter names excluded from updates
  std::size_t head_start = 0;            // first node of the classifier head
  std::vector<DenseLayerInfo> dense_layers;
  std::vector<int> block_outputs;        // concatenated output of each block
  std::vector<std::size_t> channel_trace;  // k0, block1 out, transition1 out, ...

  int find(std::string_view name) const { return graph.find(name); }

  /// Default explanation target: the last block's features after the final
  /// BN-ReLU, i.e. the map that feeds global pooling.
  std::string default_target_layer() const { return "final.relu"; }

  bool is_head_param(const std::string& name) const {
    for (std::size_t i = head_start; i < graph.nodes.size(); ++i) {
      const Node& n = graph.nodes[i];
      if (n.weight == name || n.bias == name) return true;
    }
    return false;
  }

  std::vector<std::string> backbone_params() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : graph.params) {
      if (!is_head_param(name)) out.push_back(name);
    }
    return out;
  }
};

inline ModelGraph build_model(const DenseNetConfig& config, ModelKind kind = ModelKind::dense) {
  config.validate();
  ModelGraph m;
  m.config = config;
  m.kind = kind;
  GraphBuilder b(Rng::stream(config.seed, "init"));
  int x = b.input("input", config.input_channels);
  x = b.conv("stem.conv", x, config.stem.out_channels, config.stem.kernel, config.stem.stride, config.stem.kernel / 2);
  if (config.stem.pool) {
    x = b.batch_norm("stem.bn", x);
    x = b.relu("stem.relu", x);
    x = b.max_pool("stem.pool", x, 3, 2, 1);
  }
  m.channel_trace.push_back(b.channels(x));
  for (std::size_t i = 0; i < config.block_sizes.size(); ++i) {
    const std::string idx = std::to_string(i + 1);
    BlockResult blk = add_dense_block(b, x, i + 1, config.block_sizes[i], config.growth_rate,
                                      config.bottleneck_multiplier, kind, "block" + idx);
    m.dense_layers.insert(m.dense_layers.end(), blk.layers.begin(), blk.layers.end());
    m.block_outputs.push_back(blk.output);
    m.channel_trace.push_back(blk.out_channels);
    x = blk.output;
    if (i + 1 < config.block_sizes.size()) {
      const TransitionResult t = add_transition(b, x, config.compression, "transition" + idx);
      m.channel_trace.push_back(t.out_channels);
      x = t.output;
    }
  }
  x = b.batch_norm("final.bn", x);
  x = b.relu("final.relu", x);
  x = b.global_pool("pool", x);
  m.head_start = b.size();
  for (std::size_t i = 0; i < config.head.dense_widths.size(); ++i) {
    const std::string p = "head" + std::to_string(i + 1);
    x = b.dense(p + ".dense", x, config.head.dense_widths[i]);
    x = b.relu(p + ".relu", x);
    x = b.dropout(p + ".dropout", x, config.head.dropout_rate);
  }
  x = b.dense("classifier", x, config.num_classes);
  m.graph = std::move(b).finish(x);
  return m;
}

inline std::size_t param_count(const Graph& g) {
  std::size_t total = 0;
  for (const auto& [name, t] : g.params) total += t.size();
  return total;
}

inline std::size_t param_count(const ModelGraph& m) { return param_count(m.graph); }

// ---------------------------------------------------------------------------
// Execution.

struct NodeCache {
  BatchNormCache bn;
  MaxPoolCache pool;
  std::vector<double> dropout_mask;
};

/// Activations of one forward pass: every node output plus what backward needs.
struct ForwardPass {
  std::vector<Tensor> outputs;
  std::vector<NodeCache> caches;
  Mode mode = Mode::eval;
  int output = -1;

  const Tensor& result() const { return outputs.at(static_cast<std::size_t>(output)); }
  const Tensor& logits() const { return result(); }
  const Tensor& activation(const Graph& g, std::string_view name) const {
    const int i = g.find(name);
    if (i < 0) throw ConfigError("no layer named '" + std::string(name) + "'");
    return outputs.at(static_cast<std::size_t>(i));
  }
};

namespace detail {

inline Tensor as_tensor(std::vector<double>&& v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

inline const Tensor& param(const Graph& g, const std::string& name) { return g.params.at(name); }

inline Tensor run_node(const Graph& g, const Node& n, std::size_t index, ForwardPass& pass,
                       std::map<std::string, Tensor>* buffers, Mode mode, Rng* dropout_rng,
                       const std::set<std::string>& frozen) {
  const auto in = [&](std::size_t k) -> const Tensor& {
    return pass.outputs[static_cast<std::size_t>(n.inputs[k])];
  };
  NodeCache& cache = pass.caches[index];
  switch (n.op) {
    case LayerOp::input:
      throw ConfigError("input node evaluated as a layer");
    case LayerOp::conv:
      return conv2d(in(0), param(g, n.weight), n.bias.empty() ? std::span<const double>{} : param(g, n.bias).values(),
                    n.stride, n.pad);
    case LayerOp::batch_norm: {
      // Frozen normalization layers run on their running statistics.
      const bool train = mode == Mode::train && !frozen.contains(n.weight);
      const Tensor& rm_src = buffers ? buffers->at(n.running_mean) : g.buffers.at(n.running_mean);
      const Tensor& rv_src = buffers ? buffers->at(n.running_var) : g.buffers.at(n.running_var);
      std::span<double> rm, rv;
      std::vector<double> scratch_mean, scratch_var;
      if (buffers && train) {
        rm = buffers->at(n.running_mean).values();
        rv = buffers->at(n.running_var).values();
      } else {
        scratch_mean.assign(rm_src.values().begin(), rm_src.values().end());
        scratch_var.assign(rv_src.values().begin(), rv_src.values().end());
        rm = scratch_mean;
        rv = scratch_var;
      }
      const BatchNormRefs refs{param(g, n.weight).values(), param(g, n.bias).values(), rm, rv};
      return batch_norm(in(0), refs, train ? Mode::train : Mode::eval, &cache.bn, buffers != nullptr);
    }
    case LayerOp::relu:
      return relu(in(0));
    case LayerOp::max_pool:
      return max_pool(in(0), n.kernel, n.stride, n.pad, &cache.pool);
    case LayerOp::avg_pool:
      return avg_pool(in(0), n.kernel, n.stride);
    case LayerOp::concat: {
      std::vector<const Tensor*> parts;
      parts.reserve(n.inputs.size());
      for (int i : n.inputs) parts.push_back(&pass.outputs[static_cast<std::size_t>(i)]);
      return concat_channels(std::span<const Tensor* const>(parts));
    }
    case LayerOp::global_pool:
      return global_avg_pool(in(0));
    case LayerOp::dense:
      return dense(in(0), param(g, n.weight), param(g, n.bias).values());
    case LayerOp::dropout: {
      if (mode == Mode::train && n.rate > 0.0 && !dropout_rng) {
        throw ParameterError("train-mode dropout needs a random stream");
      }
      Rng unused(0);
      DropoutResult r = dropout(in(0), n.rate, mode, dropout_rng ? *dropout_rng : unused);
      cache.dropout_mask = std::move(r.mask);
      return std::move(r.output);
    }
  }
  throw ConfigError("unknown layer op");
}

}  // namespace detail

/// Runs the graph on `x`. When `buffers` is non-null, train-mode batch norm
/// updates those running statistics in place.
inline ForwardPass run_forward(const Graph& g, std::map<std::string, Tensor>* buffers, const Tensor& x, Mode mode,
                               Rng* dropout_rng, const std::set<std::string>& frozen = {}) {
  if (g.nodes.empty() || g.nodes.front().op != LayerOp::input) throw ConfigError("graph has no input node");
  ForwardPass pass;
  pass.mode = mode;
  pass.output = g.output;
  pass.outputs.resize(g.nodes.size());
  pass.caches.resize(g.nodes.size());
  if (x.rank() < 2 || x.dim(1) != g.nodes.front().channels) {
    throw ShapeError("channel", "input " + shape_string(x.shape()) + " does not have " +
                                    std::to_string(g.nodes.front().channels) + " channels");
  }
  pass.outputs[0] = x;
  for (std::size_t i = 1; i < g.nodes.size(); ++i) {
    const Node& n = g.nodes[i];
    pass.outputs[i] = detail::run_node(g, n, i, pass, buffers, mode, dropout_rng, frozen);
    if (pass.outputs[i].dim(1) != n.channels) {
      throw ShapeError("channel", "layer '" + n.name + "' produced " + std::to_string(pass.outputs[i].dim(1)) +
                                      " channels, expected " + std::to_string(n.channels));
    }
  }
  return pass;
}

inline void check_input(const ModelGraph& m, const Tensor& batch) {
  if (batch.rank() != 4) throw ShapeError("rank", "model input must be (N, C, S, S), got " + shape_string(batch.shape()));
  if (batch.dim(1) != m.config.input_channels) {
    throw ShapeError("channel", "model expects " + std::to_string(m.config.input_channels) + " input channels, got " +
                                    std::to_string(batch.dim(1)));
  }
  if (batch.dim(2) != m.config.input_resolution) {
    throw ShapeError("height", "model expects resolution " + std::to_string(m.config.input_resolution) + ", got " +
                                   std::to_string(batch.dim(2)));
  }
  if (batch.dim(3) != m.config.input_resolution) {
    throw ShapeError("width", "model expects resolution " + std::to_string(m.config.input_resolution) + ", got " +
                                  std::to_string(batch.dim(3)));
  }
}

inline void check_dense_connectivity(const ModelGraph& m, const ForwardPass& pass) {
  if (m.kind != ModelKind::dense) return;
  for (const DenseLayerInfo& l : m.dense_layers) {
    const Node& cat = m.graph.nodes[static_cast<std::size_t>(l.concat)];
    const std::size_t got = pass.outputs[static_cast<std::size_t>(l.concat)].dim(1);
    const std::size_t k0 = pass.outputs[static_cast<std::size_t>(cat.inputs.front())].dim(1);
    if (got != k0 + m.config.growth_rate * (l.layer - 1) || got != l.in_channels) {
      throw ShapeError("channel", "dense layer " + std::to_string(l.layer) + " of block " + std::to_string(l.block) +
                                      " received " + std::to_string(got) + " channels");
    }
  }
}

/// Forward pass. Train mode updates batch-norm running statistics of
/// non-frozen layers and draws dropout masks from `rng`; eval mode changes nothing.
inline ForwardPass forward(ModelGraph& m, const Tensor& batch, Mode mode, Rng& rng) {
  check_input(m, batch);
  ForwardPass pass = run_forward(m.graph, mode == Mode::train ? &m.graph.buffers : nullptr, batch, mode, &rng, m.frozen);
  check_dense_connectivity(m, pass);
  return pass;
}

inline ForwardPass infer(const ModelGraph& m, const Tensor& batch) {
  check_input(m, batch);
  ForwardPass pass = run_forward(m.graph, nullptr, batch, Mode::eval, nullptr, m.frozen);
  check_dense_connectivity(m, pass);
  return pass;
}

struct BackwardPass {
  std::map<std::string, Tensor> param_grads;
  Tensor captured;  // gradient at the capture node's output, if requested
};

/// Reverse sweep. Gradients are produced for every non-frozen parameter;
/// input gradients are propagated only where something upstream needs them.
inline BackwardPass run_backward(const Graph& g, const ForwardPass& pass, const Tensor& upstream,
                                 const std::set<std::string>& frozen = {}, int capture = -1) {
  const std::size_t count = g.nodes.size();
  const auto trainable = [&](const Node& n) {
    return (!n.weight.empty() && !frozen.contains(n.weight)) || (!n.bias.empty() && !frozen.contains(n.bias));
  };
  std::vector<char> upstream_trainable(count, 0), after_capture(count, 0);
  for (std::size_t i = 0; i < count; ++i) {
    const Node& n = g.nodes[i];
    upstream_trainable[i] = trainable(n);
    after_capture[i] = static_cast<int>(i) == capture;
    for (int j : n.inputs) {
      upstream_trainable[i] |= upstream_trainable[static_cast<std::size_t>(j)];
      after_capture[i] |= after_capture[static_cast<std::size_t>(j)];
    }
  }
  const auto needs_grad = [&](int j) {
    return upstream_trainable[static_cast<std::size_t>(j)] || after_capture[static_cast<std::size_t>(j)];
  };

  BackwardPass out;
  std::vector<Tensor> grads(count);
  grads[static_cast<std::size_t>(g.output)] = upstream;
  const auto accumulate = [&](int j, Tensor&& gj) {
    Tensor& dst = grads[static_cast<std::size_t>(j)];
    if (dst.empty()) {
      dst = std::move(gj);
    } else {
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += gj[k];
    }
  };
  const auto store_param = [&](const std::string& name, Tensor&& t) {
    if (name.empty() || frozen.contains(name)) return;
    auto [it, inserted] = out.param_grads.try_emplace(name, std::move(t));
    if (!inserted) {
      throw ConfigError("parameter '" + name + "' is used by more than one layer");
    }
  };

  for (std::size_t ri = count; ri-- > 1;) {
    const Node& n = g.nodes[ri];
    Tensor& dy = grads[ri];
    if (static_cast<int>(ri) == capture) out.captured = dy.empty() ? Tensor(pass.outputs[ri].shape()) : dy;
    if (dy.empty()) continue;
    const bool want_input = std::any_of(n.inputs.begin(), n.inputs.end(), needs_grad);
    const bool want_params = trainable(n);
    if (!want_input && !want_params) continue;
    const Tensor& x = n.inputs.empty() ? pass.outputs[ri] : pass.outputs[static_cast<std::size_t>(n.inputs[0])];
    const NodeCache& cache = pass.caches[ri];
    switch (n.op) {
      case LayerOp::input:
        break;
      case LayerOp::conv: {
        Conv2dGrads cg = conv2d_backward(x, g.params.at(n.weight), !n.bias.empty(), n.stride, n.pad, dy,
                                         {want_input, want_params});
        if (want_params) {
          store_param(n.weight, std::move(cg.weights));
          if (!n.bias.empty()) store_param(n.bias, detail::as_tensor(std::move(cg.bias)));
        }
        if (want_input) accumulate(n.inputs[0], std::move(cg.input));
        break;
      }
      case LayerOp::batch_norm: {
        BatchNormGrads bg = batch_norm_backward(dy, g.params.at(n.weight).values(), cache.bn, {want_input, want_params});
        if (want_params) {
          store_param(n.weight, detail::as_tensor(std::move(bg.gamma)));
          store_param(n.bias, detail::as_tensor(std::move(bg.beta)));
        }
        if (want_input) accumulate(n.inputs[0], std::move(bg.input));
        break;
      }
      case LayerOp::relu: {
        // dy is not needed after this node, so it is masked in place.
        const double* xv = x.data();
        double* d = dy.data();
        for (std::size_t k = 0; k < dy.size(); ++k) {
          if (!(xv[k] > 0.0)) d[k] = 0.0;
        }
        accumulate(n.inputs[0], std::move(dy));
        break;
      }
      case LayerOp::max_pool:
        accumulate(n.inputs[0], max_pool_backward(x.shape(), dy, cache.pool));
        break;
      case LayerOp::avg_pool:
        accumulate(n.inputs[0], avg_pool_backward(x.shape(), dy, n.kernel));
        break;
      case LayerOp::concat: {
        // Channel slices of dy are added straight into the input gradients.
        const std::size_t batch = dy.dim(0), total = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
        std::size_t first = 0;
        for (int j : n.inputs) {
          const Tensor& part = pass.outputs[static_cast<std::size_t>(j)];
          const std::size_t channels = part.dim(1);
          if (needs_grad(j)) {
            Tensor& dst = grads[static_cast<std::size_t>(j)];
            const bool fresh = dst.empty();
            if (fresh) dst = Tensor(part.shape());
            for (std::size_t b = 0; b < batch; ++b) {
              const double* src = dy.data() + (b * total + first) * plane;
              double* out_ptr = dst.data() + b * channels * plane;
              if (fresh) {
                std::copy_n(src, channels * plane, out_ptr);
              } else {
                for (std::size_t k = 0; k < channels * plane; ++k) out_ptr[k] += src[k];
              }
            }
          }
          first += channels;
        }
        break;
      }
      case LayerOp::global_pool:
        accumulate(n.inputs[0], global_avg_pool_backward(x.shape(), dy));
        break;
      case LayerOp::dense: {
        DenseGrads dg = dense_backward(x, g.params.at(n.weight), dy, {want_input, want_params});
        if (want_params) {
          store_param(n.weight, std::move(dg.weights));
          store_param(n.bias, detail::as_tensor(std::move(dg.bias)));
        }
        if (want_input) accumulate(n.inputs[0], std::move(dg.input));
        break;
      }
      case LayerOp::dropout:
        if (!cache.dropout_mask.empty()) {
          for (std::size_t k = 0; k < dy.size(); ++k) dy[k] *= cache.dropout_mask[k];
        }
        accumulate(n.inputs[0], std::move(dy));
        break;
    }
    // Free the node's gradient once consumed, except where it is captured.
    if (static_cast<int>(ri) != capture) dy = Tensor();
  }
  if (capture == 0) out.captured = grads[0].empty() ? Tensor(pass.outputs[0].shape()) : grads[0];
  return out;
}

inline BackwardPass backward(const ModelGraph& m, const ForwardPass& pass, const Tensor& dlogits, int capture = -1) {
  return run_backward(m.graph, pass, dlogits, m.frozen, capture);
}

}  // namespace densepipe
