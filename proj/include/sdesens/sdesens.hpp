#pragma once

#include "sdesens/estimators.hpp"
#include "sdesens/extrapolation.hpp"
#include "sdesens/harness.hpp"
#include "sdesens/integrate.hpp"
#include "sdesens/mlmc.hpp"
#include "sdesens/models.hpp"
#include "sdesens/noise.hpp"
#include "sdesens/stats.hpp"
#include "sdesens/vec.hpp"
