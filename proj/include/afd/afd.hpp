#pragma once

#include "afd/checkpoint.hpp"
#include "afd/config.hpp"
#include "afd/freq_decomp.hpp"
#include "afd/gradcheck.hpp"
#include "afd/metrics.hpp"
#include "afd/model.hpp"
#include "afd/optim.hpp"
#include "afd/spectral.hpp"
#include "afd/synth.hpp"
#include "afd/tensor.hpp"
#include "afd/train.hpp"
