#include "keycache/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "keycache/error.hpp"
#include "keycache/format.hpp"
#include "keycache/parallel.hpp"
#include "keycache/rng.hpp"

namespace keycache {

Eigen::MatrixXd jacobian(const Classifier& model, std::span<const double> x) {
  const auto c = model.n_classes();
  Eigen::MatrixXd j(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(x.size()));
  std::vector<double> v(c, 0.0);
  for (std::uint32_t k = 0; k < c; ++k) {
    std::fill(v.begin(), v.end(), 0.0);
    v[k] = 1.0;
    const auto row = model.vjp(x, v);
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (!std::isfinite(row[i])) fail(ErrorCode::NonFiniteGradient, "Jacobian entry not finite");
      j(k, static_cast<Eigen::Index>(i)) = row[i];
    }
  }
  return j;
}

Eigen::MatrixXd finite_difference_jacobian(const Classifier& model, std::span<const double> x,
                                           double step) {
  Eigen::MatrixXd j(static_cast<Eigen::Index>(model.n_classes()),
                    static_cast<Eigen::Index>(x.size()));
  std::vector<double> probe(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const auto plus = model.predict(probe);
    probe[i] = x[i] - step;
    const auto minus = model.predict(probe);
    probe[i] = x[i];
    for (std::uint32_t k = 0; k < model.n_classes(); ++k) {
      j(k, static_cast<Eigen::Index>(i)) = (plus[k] - minus[k]) / (2.0 * step);
    }
  }
  return j;
}

std::vector<double> jacobi_eigenvalues(Eigen::MatrixXd a, double tolerance,
                                       std::size_t max_sweeps) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) fail(ErrorCode::ShapeMismatch, "Jacobi eigenvalues need a square matrix");
  if (!a.allFinite()) fail(ErrorCode::NonFiniteValue, "matrix has non-finite entries");
  const double threshold = std::max(tolerance, 1e-15 * a.norm());

  auto off_diagonal = [&] {
    double s = 0.0;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = 0; q < n; ++q) {
        if (p != q) s += a(p, q) * a(p, q);
      }
    }
    return std::sqrt(s);
  };

  std::size_t sweep = 0;
  while (off_diagonal() >= threshold) {
    if (sweep++ == max_sweeps) {
      fail(ErrorCode::ConvergenceFailure,
           "Jacobi iteration did not converge in " + std::to_string(max_sweeps) + " sweeps");
    }
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Rotation angle zeroing a(p, q); t is the smaller root of
        // t^2 + 2 t zeta - 1 = 0.
        const double zeta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
  }

  std::vector<double> values(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) values[static_cast<std::size_t>(i)] = a(i, i);
  std::sort(values.begin(), values.end(), std::greater<>());
  return values;
}

std::vector<double> singular_values(const Eigen::MatrixXd& j) {
  if (!j.allFinite()) fail(ErrorCode::NonFiniteValue, "Jacobian has non-finite entries");
  const bool wide = j.rows() <= j.cols();
  const Eigen::MatrixXd gram = wide ? Eigen::MatrixXd(j * j.transpose())
                                    : Eigen::MatrixXd(j.transpose() * j);
  auto values = jacobi_eigenvalues(gram);
  for (double& v : values) v = std::sqrt(std::max(v, 0.0));
  return values;
}

// ---- study ---------------------------------------------------------------

std::string JacobianReport::norms_csv() const {
  std::ostringstream out;
  out << "point";
  for (const auto& m : models) out << ',' << csv_escape(m);
  out << '\n';
  for (std::size_t p = 0; p < points.size(); ++p) {
    out << points[p];
    for (std::size_t m = 0; m < models.size(); ++m) out << ',' << format_number(norms[m][p]);
    out << '\n';
  }
  return out.str();
}

std::string JacobianReport::spectrum_csv() const {
  std::ostringstream out;
  out << "rank";
  for (const auto& m : models) out << ',' << csv_escape(m);
  out << '\n';
  const std::size_t k = mean_singular_values.empty() ? 0 : mean_singular_values.front().size();
  for (std::size_t i = 0; i < k; ++i) {
    out << i + 1;
    for (std::size_t m = 0; m < models.size(); ++m) {
      out << ',' << format_number(mean_singular_values[m][i]);
    }
    out << '\n';
  }
  return out.str();
}

std::string JacobianReport::to_json() const {
  using nlohmann::json;
  json j;
  j["norm"] = "frobenius";
  j["n_points"] = points.size();
  j["models"] = json::object();
  for (std::size_t m = 0; m < models.size(); ++m) {
    j["models"][models[m]] = {{"mean_jacobian_norm", mean_norm[m]},
                              {"mean_singular_values", mean_singular_values[m]}};
  }
  return j.dump(2) + "\n";
}

JacobianReport jacobian_study(std::span<const NamedModel> models, const FeatureSet& test,
                              const JacobianStudyConfig& config) {
  if (models.empty()) fail(ErrorCode::InvalidArgument, "Jacobian study needs a model");
  const FloatMatrix& inputs = test.layer("input").values;
  const std::size_t dim = static_cast<std::size_t>(inputs.cols());
  for (const auto& m : models) {
    if (!m.model || m.model->input_dim() != dim ||
        m.model->n_classes() != models.front().model->n_classes()) {
      fail(ErrorCode::ShapeMismatch, "models must share input and class spaces");
    }
  }

  JacobianReport report;
  Rng rng(config.seed);
  auto order = rng.permutation(test.n_items());
  order.resize(std::min(config.points, order.size()));
  std::sort(order.begin(), order.end());
  report.points = order;

  const std::size_t k = std::min<std::size_t>(models.front().model->n_classes(), dim);
  for (const auto& m : models) {
    report.models.push_back(m.name);
    std::vector<double> norms(order.size());
    std::vector<double> spectra(order.size() * k);
    parallel_for(order.size(), config.threads, [&](std::size_t p) {
      std::vector<double> x(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        x[i] = inputs(static_cast<Eigen::Index>(order[p]), static_cast<Eigen::Index>(i));
      }
      const Eigen::MatrixXd j = jacobian(*m.model, x);
      norms[p] = j.norm();
      const auto sv = singular_values(j);
      std::copy(sv.begin(), sv.begin() + static_cast<std::ptrdiff_t>(k), spectra.begin() + static_cast<std::ptrdiff_t>(p * k));
    });
    double total = 0.0;
    for (double n : norms) total += n;
    std::vector<double> mean_sv(k, 0.0);
    for (std::size_t p = 0; p < order.size(); ++p) {
      for (std::size_t i = 0; i < k; ++i) mean_sv[i] += spectra[p * k + i];
    }
    const double count = std::max<double>(1.0, static_cast<double>(order.size()));
    for (double& v : mean_sv) v /= count;
    report.mean_norm.push_back(total / count);
    report.mean_singular_values.push_back(std::move(mean_sv));
    report.norms.push_back(std::move(norms));
    report.singular_values.push_back(std::move(spectra));
  }
  return report;
}

}  // namespace keycache
