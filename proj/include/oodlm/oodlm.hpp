#pragma once

// Umbrella header: the full distillation-based anomaly-detection toolkit.

#include "oodlm/checkpoint.hpp"
#include "oodlm/common.hpp"
#include "oodlm/config.hpp"
#include "oodlm/distill.hpp"
#include "oodlm/gradcheck.hpp"
#include "oodlm/metrics.hpp"
#include "oodlm/model.hpp"
#include "oodlm/ops.hpp"
#include "oodlm/optim.hpp"
#include "oodlm/pipeline.hpp"
#include "oodlm/scoring.hpp"
#include "oodlm/sha256.hpp"
#include "oodlm/tensor.hpp"
#include "oodlm/text.hpp"
