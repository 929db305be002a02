#pragma once

#include "drmm/actmax.hpp"
#include "drmm/checkpoint.hpp"
#include "drmm/data.hpp"
#include "drmm/deep.hpp"
#include "drmm/edrmm.hpp"
#include "drmm/io.hpp"
#include "drmm/kernels.hpp"
#include "drmm/learning.hpp"
#include "drmm/relax.hpp"
#include "drmm/rmm.hpp"
#include "drmm/rng.hpp"
#include "drmm/tensor.hpp"
