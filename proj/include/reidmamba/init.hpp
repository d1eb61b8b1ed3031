#pragma once

#include "reidmamba/autograd.hpp"

#include <random>

namespace reidmamba::init {

Matrix uniform(int rows, int cols, double bound, std::mt19937_64& rng);
Matrix normal(int rows, int cols, double stddev, std::mt19937_64& rng);
/// Uniform in +-1/sqrt(fan_in), the usual default for a dense map fan_in -> fan_out.
Matrix dense(int fan_in, int fan_out, std::mt19937_64& rng);

}  // namespace reidmamba::init
