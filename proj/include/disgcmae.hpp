// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "disgcmae/autodiff.hpp"
#include "disgcmae/checkpoint.hpp"
#include "disgcmae/cli.hpp"
#include "disgcmae/config.hpp"
#include "disgcmae/dataset.hpp"
#include "disgcmae/distill.hpp"
#include "disgcmae/eeg_synth.hpp"
#include "disgcmae/encoders.hpp"
#include "disgcmae/graph.hpp"
#include "disgcmae/numerics.hpp"
#include "disgcmae/optim.hpp"
#include "disgcmae/pretrain.hpp"
#include "disgcmae/rng.hpp"
#include "disgcmae/tensor.hpp"
