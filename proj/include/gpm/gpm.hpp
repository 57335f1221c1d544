#pragma once

// Everything at once.

#include "gpm/common/error.hpp"
#include "gpm/common/parallel.hpp"
#include "gpm/common/random.hpp"
#include "gpm/config.hpp"
#include "gpm/data_io.hpp"
#include "gpm/downstream.hpp"
#include "gpm/dvae.hpp"
#include "gpm/generation.hpp"
#include "gpm/geometry.hpp"
#include "gpm/gpm_model.hpp"
#include "gpm/nn/checkpoint.hpp"
#include "gpm/nn/gradcheck.hpp"
#include "gpm/nn/layers.hpp"
#include "gpm/nn/ops.hpp"
#include "gpm/nn/optim.hpp"
#include "gpm/schedules.hpp"
#include "gpm/training.hpp"
#include "gpm/gradient_suite.hpp"
