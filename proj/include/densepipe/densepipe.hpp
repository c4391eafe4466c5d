#pragma once

#include "densepipe/checkpoint.hpp"
#include "densepipe/cli.hpp"
#include "densepipe/config.hpp"
#include "densepipe/dataset.hpp"
#include "densepipe/error.hpp"
#include "densepipe/grad_check.hpp"
#include "densepipe/gradcam.hpp"
#include "densepipe/image.hpp"
#include "densepipe/kv.hpp"
#include "densepipe/metrics.hpp"
#include "densepipe/model.hpp"
#include "densepipe/ops.hpp"
#include "densepipe/optim.hpp"
#include "densepipe/report.hpp"
#include "densepipe/runtime.hpp"
#include "densepipe/synth.hpp"
#include "densepipe/tensor.hpp"
#include "densepipe/train.hpp"
