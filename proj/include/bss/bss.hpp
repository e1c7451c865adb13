#pragma once

#include "bss/bifpn.hpp"
#include "bss/detect_metrics.hpp"
#include "bss/errors.hpp"
#include "bss/gradcheck.hpp"
#include "bss/ops.hpp"
#include "bss/parallel.hpp"
#include "bss/rng.hpp"
#include "bss/shuffle_attention.hpp"
#include "bss/simam.hpp"
#include "bss/tensor.hpp"
#include "bss/tensor_io.hpp"
