#include "keycache/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "keycache/error.hpp"
#include "keycache/format.hpp"
#include "keycache/parallel.hpp"
#include "keycache/rng.hpp"

namespace keycache {

std::string_view to_string(AttackKind kind) noexcept {
  switch (kind) {
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::IFGSM: return "ifgsm";
    case AttackKind::SinglePixel: return "sp";
    case AttackKind::GaussianBlur: return "gb";
  }
  return "fgsm";
}

AttackKind parse_attack_kind(std::string_view name) {
  if (name == "fgsm") return AttackKind::FGSM;
  if (name == "ifgsm" || name == "i-fgsm") return AttackKind::IFGSM;
  if (name == "sp" || name == "single-pixel") return AttackKind::SinglePixel;
  if (name == "gb" || name == "blur") return AttackKind::GaussianBlur;
  fail(ErrorCode::InvalidArgument, "unknown attack '" + std::string(name) + "'");
}

std::vector<double> linear_schedule(double max_value, std::size_t steps) {
  if (steps == 0 || !(max_value > 0.0)) {
    fail(ErrorCode::InvalidArgument, "schedule needs positive steps and maximum");
  }
  std::vector<double> out(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    out[i] = max_value * static_cast<double>(i + 1) / static_cast<double>(steps);
  }
  return out;
}

void AttackConfig::validate() const {
  if (!(bounds.lower < bounds.upper)) fail(ErrorCode::InvalidArgument, "pixel bounds unordered");
  if (kind == AttackKind::IFGSM && iterations == 0) {
    fail(ErrorCode::InvalidArgument, "I-FGSM needs at least one iteration");
  }
}

std::vector<double> AttackConfig::schedule(const ImageShape& shape) const {
  switch (kind) {
    case AttackKind::FGSM:
    case AttackKind::IFGSM: return linear_schedule(max_epsilon, schedule_steps);
    case AttackKind::GaussianBlur:
      return linear_schedule(static_cast<double>(std::max(shape.width, shape.height)),
                             schedule_steps);
    case AttackKind::SinglePixel: return {};
  }
  return {};
}

double rho_adv(std::span<const double> x, std::span<const double> x_adv) {
  if (x.size() != x_adv.size()) fail(ErrorCode::LengthMismatch, "x and x_adv differ in length");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x_adv[i] - x[i]) * (x_adv[i] - x[i]);
    den += x[i] * x[i];
  }
  if (!(den > 0.0)) fail(ErrorCode::ZeroVector, "clean input has zero norm");
  return std::sqrt(num) / std::sqrt(den);
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void finish(AttackOutcome& out, std::span<const double> x, std::vector<double> x_adv,
            std::uint32_t label) {
  out.success = true;
  out.adversarial_label = label;
  out.rho_adv = rho_adv(x, x_adv);
  out.x_adv = std::move(x_adv);
}

}  // namespace

AttackOutcome fgsm(const Classifier& model, std::span<const double> x,
                   std::span<const double> schedule, PixelBounds bounds) {
  AttackOutcome out;
  out.clean_label = model.predict_label(x);
  const auto grad = model.input_gradient(x, out.clean_label);
  std::vector<double> candidate(x.size());
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    const double eps = schedule[s];
    for (std::size_t i = 0; i < x.size(); ++i) {
      candidate[i] = std::clamp(x[i] + eps * sign(grad[i]), bounds.lower, bounds.upper);
    }
    const std::uint32_t label = model.predict_label(candidate);
    if (label != out.clean_label) {
      out.epsilon = eps;
      out.schedule_index = s;
      finish(out, x, candidate, label);
      return out;
    }
  }
  return out;
}

AttackOutcome ifgsm(const Classifier& model, std::span<const double> x,
                    std::span<const double> schedule, std::size_t iterations, PixelBounds bounds) {
  if (iterations == 0) fail(ErrorCode::InvalidArgument, "I-FGSM needs at least one iteration");
  AttackOutcome out;
  out.clean_label = model.predict_label(x);
  std::vector<double> candidate(x.size());
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    const double eps = schedule[s];
    const double step = eps / static_cast<double>(iterations);
    std::copy(x.begin(), x.end(), candidate.begin());
    for (std::size_t it = 0; it < iterations; ++it) {
      const auto grad = model.input_gradient(candidate, out.clean_label);
      for (std::size_t i = 0; i < x.size(); ++i) {
        candidate[i] = std::clamp(candidate[i] + step * sign(grad[i]), bounds.lower, bounds.upper);
      }
    }
    const std::uint32_t label = model.predict_label(candidate);
    if (label != out.clean_label) {
      out.epsilon = eps;
      out.schedule_index = s;
      finish(out, x, candidate, label);
      return out;
    }
  }
  return out;
}

AttackOutcome single_pixel(const Classifier& model, std::span<const double> x,
                           const ImageShape& shape) {
  if (x.size() != shape.size()) fail(ErrorCode::ShapeMismatch, "input does not match image shape");
  AttackOutcome out;
  out.clean_label = model.predict_label(x);
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double extremes[2] = {*hi_it, *lo_it};
  std::vector<double> candidate(x.begin(), x.end());
  const std::size_t pixels = static_cast<std::size_t>(shape.width) * shape.height;
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::size_t base = p * shape.channels;
    for (double value : extremes) {
      for (std::size_t ch = 0; ch < shape.channels; ++ch) candidate[base + ch] = value;
      const std::uint32_t label = model.predict_label(candidate);
      if (label != out.clean_label) {
        out.pixel = p;
        out.epsilon = value;
        finish(out, x, candidate, label);
        return out;
      }
    }
    for (std::size_t ch = 0; ch < shape.channels; ++ch) candidate[base + ch] = x[base + ch];
  }
  return out;
}

namespace {

std::size_t mirror_index(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

}  // namespace

std::vector<double> gaussian_blur_image(std::span<const double> x, const ImageShape& shape,
                                        double sigma) {
  if (x.size() != shape.size()) fail(ErrorCode::ShapeMismatch, "input does not match image shape");
  if (!(sigma > 0.0)) return std::vector<double>(x.begin(), x.end());
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    const double w = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;

  const long width = shape.width, height = shape.height;
  const std::size_t ch = shape.channels;
  auto at = [&](long r, long c, std::size_t k) {
    return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(c)) * ch + k;
  };
  std::vector<double> rows(x.size()), out(x.size());
  for (long r = 0; r < height; ++r) {
    for (long c = 0; c < width; ++c) {
      for (std::size_t k = 0; k < ch; ++k) {
        double acc = 0.0;
        for (long i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 x[at(r, static_cast<long>(mirror_index(c + i, width)), k)];
        }
        rows[at(r, c, k)] = acc;
      }
    }
  }
  for (long r = 0; r < height; ++r) {
    for (long c = 0; c < width; ++c) {
      for (std::size_t k = 0; k < ch; ++k) {
        double acc = 0.0;
        for (long i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 rows[at(static_cast<long>(mirror_index(r + i, height)), c, k)];
        }
        out[at(r, c, k)] = acc;
      }
    }
  }
  return out;
}

AttackOutcome gaussian_blur(const Classifier& model, std::span<const double> x,
                            const ImageShape& shape, std::span<const double> schedule) {
  AttackOutcome out;
  out.clean_label = model.predict_label(x);
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    auto blurred = gaussian_blur_image(x, shape, schedule[s]);
    const std::uint32_t label = model.predict_label(blurred);
    if (label != out.clean_label) {
      out.epsilon = schedule[s];
      out.schedule_index = s;
      finish(out, x, std::move(blurred), label);
      return out;
    }
  }
  return out;
}

AttackOutcome run_attack(const Classifier& model, std::span<const double> x,
                         const ImageShape& shape, const AttackConfig& config) {
  config.validate();
  const auto schedule = config.schedule(shape);
  switch (config.kind) {
    case AttackKind::FGSM: return fgsm(model, x, schedule, config.bounds);
    case AttackKind::IFGSM: return ifgsm(model, x, schedule, config.iterations, config.bounds);
    case AttackKind::SinglePixel: return single_pixel(model, x, shape);
    case AttackKind::GaussianBlur: return gaussian_blur(model, x, shape, schedule);
  }
  return {};
}

// ---- campaigns -----------------------------------------------------------

std::string CampaignResult::to_csv() const {
  std::ostringstream out;
  out << "attack,attacked_model,eval_model,n_attacked,n_success,n_discarded,mean_rho_adv,"
         "eval_accuracy\n";
  for (const auto& r : rows) {
    out << csv_escape(r.attack) << ',' << csv_escape(r.attacked_model) << ','
        << csv_escape(r.eval_model) << ',' << r.n_attacked << ',' << r.n_success << ','
        << r.n_discarded << ',' << format_number(r.mean_rho_adv) << ','
        << format_number(r.eval_accuracy) << '\n';
  }
  return out.str();
}

std::string CampaignResult::to_jsonl() const {
  using nlohmann::json;
  std::string out;
  for (const auto& rec : images) {
    json j{{"attack", rec.attack},
           {"image", rec.image},
           {"label", rec.label},
           {"clean_prediction", rec.outcome.clean_label},
           {"success", rec.outcome.success}};
    if (rec.outcome.success) {
      j["adversarial_prediction"] = rec.outcome.adversarial_label;
      j["epsilon"] = rec.outcome.epsilon;
      j["rho_adv"] = rec.outcome.rho_adv;
      if (rec.attack == "sp") j["pixel"] = rec.outcome.pixel;
      json evals = json::object();
      for (std::size_t m = 0; m < rec.eval_predictions.size(); ++m) {
        evals[eval_names[m]] = rec.eval_predictions[m];
      }
      j["eval_predictions"] = std::move(evals);
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

FloatMatrix CampaignResult::adversarials(std::string_view attack) const {
  std::vector<const ImageRecord*> hits;
  for (const auto& rec : images) {
    if (rec.attack == attack && rec.outcome.success) hits.push_back(&rec);
  }
  const Eigen::Index dim = hits.empty() ? 0 : static_cast<Eigen::Index>(hits.front()->outcome.x_adv.size());
  FloatMatrix m(static_cast<Eigen::Index>(hits.size()), dim);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) {
      m(static_cast<Eigen::Index>(i), j) = static_cast<float>(hits[i]->outcome.x_adv[static_cast<std::size_t>(j)]);
    }
  }
  return m;
}

CampaignResult attack_campaign(const NamedModel& attacked, std::span<const NamedModel> eval_models,
                               const FeatureSet& test, const ImageShape& shape,
                               const CampaignConfig& config) {
  if (!attacked.model) fail(ErrorCode::InvalidArgument, "attacked model missing");
  const FloatMatrix& inputs = test.layer("input").values;
  if (static_cast<std::size_t>(inputs.cols()) != shape.size() ||
      attacked.model->input_dim() != shape.size()) {
    fail(ErrorCode::ShapeMismatch, "test inputs, image shape and model disagree");
  }
  for (const auto& m : eval_models) {
    if (!m.model || m.model->input_dim() != shape.size() ||
        m.model->n_classes() != attacked.model->n_classes()) {
      fail(ErrorCode::ShapeMismatch, "eval model '" + m.name + "' has a different input/class space");
    }
  }

  auto row_of = [&](std::size_t i) {
    std::vector<double> x(static_cast<std::size_t>(inputs.cols()));
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return x;
  };

  // Seeded order over the test set, keeping images the attacked model gets right.
  Rng rng(config.seed);
  std::vector<std::size_t> chosen;
  for (std::size_t i : rng.permutation(test.n_items())) {
    if (chosen.size() == config.samples) break;
    if (attacked.model->predict_label(row_of(i)) == test.labels()[i]) chosen.push_back(i);
  }
  std::sort(chosen.begin(), chosen.end());

  CampaignResult result;
  for (const auto& m : eval_models) result.eval_names.push_back(m.name);

  for (const auto& attack : config.attacks) {
    attack.validate();
    const std::string name(to_string(attack.kind));
    std::vector<ImageRecord> records(chosen.size());
    parallel_for(chosen.size(), config.threads, [&](std::size_t n) {
      const std::size_t i = chosen[n];
      const auto x = row_of(i);
      ImageRecord rec;
      rec.attack = name;
      rec.image = i;
      rec.label = test.labels()[i];
      rec.outcome = run_attack(*attacked.model, x, shape, attack);
      if (rec.outcome.success) {
        for (const auto& m : eval_models) {
          rec.eval_predictions.push_back(m.model->predict_label(rec.outcome.x_adv));
        }
      }
      records[n] = std::move(rec);
    });

    std::size_t successes = 0;
    double rho_total = 0.0;
    for (const auto& rec : records) {
      if (!rec.outcome.success) continue;
      ++successes;
      rho_total += rec.outcome.rho_adv;
    }
    if (successes == 0 && !config.allow_empty) {
      fail(ErrorCode::NoSuccessfulAttacks, name + " produced no adversarial images against '" +
                                               attacked.name + "'");
    }
    for (std::size_t m = 0; m < eval_models.size(); ++m) {
      CampaignRow row;
      row.attack = name;
      row.attacked_model = attacked.name;
      row.eval_model = eval_models[m].name;
      row.n_attacked = records.size();
      row.n_success = successes;
      row.n_discarded = records.size() - successes;
      if (successes > 0) {
        row.mean_rho_adv = rho_total / static_cast<double>(successes);
        std::size_t correct = 0;
        for (const auto& rec : records) {
          if (rec.outcome.success && rec.eval_predictions[m] == rec.label) ++correct;
        }
        row.eval_accuracy = static_cast<double>(correct) / static_cast<double>(successes);
      }
      result.rows.push_back(std::move(row));
    }
    result.images.insert(result.images.end(), std::make_move_iterator(records.begin()),
                         std::make_move_iterator(records.end()));
  }
  return result;
}

}  // namespace keycache
