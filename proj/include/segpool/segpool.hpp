// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "segpool/adam.hpp"
#include "segpool/autodiff.hpp"
#include "segpool/checkpoint.hpp"
#include "segpool/dataset.hpp"
#include "segpool/error.hpp"
#include "segpool/eval.hpp"
#include "segpool/losses.hpp"
#include "segpool/model.hpp"
#include "segpool/netpbm.hpp"
#include "segpool/ops.hpp"
#include "segpool/oracle.hpp"
#include "segpool/rng.hpp"
#include "segpool/scenegen.hpp"
#include "segpool/segmask.hpp"
#include "segpool/tensor.hpp"
#include "segpool/trainer.hpp"
