#pragma once

#include "dydit/analysis.hpp"
#include "dydit/checkpoint.hpp"
#include "dydit/dataset.hpp"
#include "dydit/diffusion.hpp"
#include "dydit/dit.hpp"
#include "dydit/error.hpp"
#include "dydit/flops.hpp"
#include "dydit/gradcheck.hpp"
#include "dydit/io.hpp"
#include "dydit/model.hpp"
#include "dydit/primitives.hpp"
#include "dydit/rng.hpp"
#include "dydit/routing.hpp"
#include "dydit/run_config.hpp"
#include "dydit/sampler.hpp"
#include "dydit/schedule.hpp"
#include "dydit/slicing.hpp"
#include "dydit/tensor.hpp"
#include "dydit/train.hpp"
