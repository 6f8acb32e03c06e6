#ifndef ELVS_ELVS_HPP
#define ELVS_ELVS_HPP

#include "elvs/el_core.hpp"
#include "elvs/errors.hpp"
#include "elvs/estimators.hpp"
#include "elvs/mc.hpp"
#include "elvs/normal.hpp"
#include "elvs/population.hpp"
#include "elvs/ps_fit.hpp"
#include "elvs/rng.hpp"
#include "elvs/smoothing.hpp"
#include "elvs/variance.hpp"

#endif  // ELVS_ELVS_HPP
