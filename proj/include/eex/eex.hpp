#pragma once
// Umbrella header.

#include "eex/autograd.hpp"
#include "eex/calibration.hpp"
#include "eex/cost.hpp"
#include "eex/data.hpp"
#include "eex/evaluation.hpp"
#include "eex/inference.hpp"
#include "eex/model.hpp"
#include "eex/ops.hpp"
#include "eex/report.hpp"
#include "eex/run.hpp"
#include "eex/serialize.hpp"
#include "eex/tensor.hpp"
#include "eex/trace.hpp"
#include "eex/training.hpp"
