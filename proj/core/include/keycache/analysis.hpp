#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "keycache/attacks.hpp"
#include "keycache/feature_store.hpp"
#include "keycache/model.hpp"

namespace keycache {

/// C x D input-output Jacobian dp/dx; row c is the gradient of p_c.
Eigen::MatrixXd jacobian(const Classifier& model, std::span<const double> x);

/// Central differences, one coordinate at a time.
Eigen::MatrixXd finite_difference_jacobian(const Classifier& model, std::span<const double> x,
                                           double step = 1e-4);

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending. Stops when the off-diagonal Frobenius mass drops below
/// max(tolerance, 1e-15 * ||A||_F); throws ConvergenceFailure after
/// `max_sweeps` sweeps.
std::vector<double> jacobi_eigenvalues(Eigen::MatrixXd a, double tolerance = 1e-12,
                                       std::size_t max_sweeps = 100);

/// Singular values of J (non-increasing, min(rows, cols) of them) from the
/// eigenvalues of the smaller Gram matrix.
std::vector<double> singular_values(const Eigen::MatrixXd& j);

struct JacobianReport {
  std::vector<std::string> models;
  std::vector<std::size_t> points;                       // test-set rows used
  std::vector<std::vector<double>> norms;                // [model][point], Frobenius
  std::vector<std::vector<double>> singular_values;      // [model][point * k + i]
  std::vector<double> mean_norm;                         // [model]
  std::vector<std::vector<double>> mean_singular_values; // [model][i]

  std::string norms_csv() const;     // one column per model
  std::string spectrum_csv() const;  // rank, then one column per model
  std::string to_json() const;
};

struct JacobianStudyConfig {
  std::size_t points = 200;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Jacobians of every model at the same seeded sample of test points.
JacobianReport jacobian_study(std::span<const NamedModel> models, const FeatureSet& test,
                              const JacobianStudyConfig& config);

}  // namespace keycache
