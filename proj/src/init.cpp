#include "reidmamba/init.hpp"

#include <cmath>

namespace reidmamba {

namespace init {

Matrix uniform(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix dense(int fan_in, int fan_out, std::mt19937_64& rng) {
  return uniform(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace init

}  // namespace reidmamba
