#pragma once

// Umbrella header for the desk-scale dual-level visual knowledge testbed.

#include "lion/adapters.hpp"
#include "lion/aggregator.hpp"
#include "lion/data.hpp"
#include "lion/eval.hpp"
#include "lion/model.hpp"
#include "lion/nn.hpp"
#include "lion/rng.hpp"
#include "lion/tensor.hpp"
#include "lion/training.hpp"
