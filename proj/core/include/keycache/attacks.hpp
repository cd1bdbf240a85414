#pragma once

// Minimal-perturbation attacks. Each attack walks an increasing schedule
// and stops at the first perturbation that changes the attacked model's
// predicted label; images with no such perturbation are discarded.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keycache/feature_store.hpp"
#include "keycache/model.hpp"

namespace keycache {

enum class AttackKind { FGSM, IFGSM, SinglePixel, GaussianBlur };

std::string_view to_string(AttackKind kind) noexcept;
AttackKind parse_attack_kind(std::string_view name);  // fgsm | ifgsm | sp | gb

struct PixelBounds {
  double lower = 0.0;
  double upper = 1.0;
};

struct AttackConfig {
  AttackKind kind = AttackKind::FGSM;
  std::size_t schedule_steps = 100;
  double max_epsilon = 0.5;  // gradient attacks; blur uses max(w, h)
  std::size_t iterations = 10;
  PixelBounds bounds;

  /// Strictly increasing: max * i / steps for i = 1..steps. Empty for SP.
  std::vector<double> schedule(const ImageShape& shape) const;
  void validate() const;
};

std::vector<double> linear_schedule(double max_value, std::size_t steps);

struct AttackOutcome {
  bool success = false;
  std::uint32_t clean_label = 0;        // attacked model's prediction on x
  std::uint32_t adversarial_label = 0;  // prediction on x_adv (if success)
  std::vector<double> x_adv;            // empty on discard
  double epsilon = std::numeric_limits<double>::quiet_NaN();
  std::size_t schedule_index = 0;       // position of epsilon in the schedule
  std::size_t pixel = 0;                // SP only: flattened pixel position
  double rho_adv = std::numeric_limits<double>::quiet_NaN();
};

/// ||x_adv - x||_2 / ||x||_2; throws ZeroVector when ||x|| is zero.
double rho_adv(std::span<const double> x, std::span<const double> x_adv);

AttackOutcome fgsm(const Classifier& model, std::span<const double> x,
                   std::span<const double> schedule, PixelBounds bounds = {});

AttackOutcome ifgsm(const Classifier& model, std::span<const double> x,
                    std::span<const double> schedule, std::size_t iterations = 10,
                    PixelBounds bounds = {});

AttackOutcome single_pixel(const Classifier& model, std::span<const double> x,
                           const ImageShape& shape);

/// Separable Gaussian filter per channel, radius ceil(3 sigma), mirror
/// padding that repeats the edge pixel (d c b a | a b c d | d c b a).
std::vector<double> gaussian_blur_image(std::span<const double> x, const ImageShape& shape,
                                        double sigma);

AttackOutcome gaussian_blur(const Classifier& model, std::span<const double> x,
                            const ImageShape& shape, std::span<const double> schedule);

AttackOutcome run_attack(const Classifier& model, std::span<const double> x,
                         const ImageShape& shape, const AttackConfig& config);

// ---- campaigns -----------------------------------------------------------

struct NamedModel {
  std::string name;
  const Classifier* model = nullptr;
};

struct CampaignConfig {
  std::vector<AttackConfig> attacks;
  std::size_t samples = 250;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// When false an attack with zero successful adversarials raises
  /// NoSuccessfulAttacks; when true the row is reported with n_success = 0.
  bool allow_empty = false;
};

struct CampaignRow {
  std::string attack;
  std::string attacked_model;
  std::string eval_model;
  std::size_t n_attacked = 0;
  std::size_t n_success = 0;
  std::size_t n_discarded = 0;
  double mean_rho_adv = std::numeric_limits<double>::quiet_NaN();
  double eval_accuracy = std::numeric_limits<double>::quiet_NaN();  // on successes
};

struct ImageRecord {
  std::string attack;
  std::size_t image = 0;  // row in the test set
  std::uint32_t label = 0;
  AttackOutcome outcome;
  std::vector<std::uint32_t> eval_predictions;  // per eval model, successes only
};

struct CampaignResult {
  std::vector<CampaignRow> rows;
  std::vector<ImageRecord> images;  // sorted by (attack order, image)
  std::vector<std::string> eval_names;

  std::string to_csv() const;
  std::string to_jsonl() const;
  /// Successful adversarials of one attack as an N x D float matrix.
  FloatMatrix adversarials(std::string_view attack) const;
};

/// Picks `samples` test images (seeded order) that the attacked model
/// classifies correctly, runs every configured attack against it and
/// reports, per eval model, its accuracy on the successful adversarials.
CampaignResult attack_campaign(const NamedModel& attacked, std::span<const NamedModel> eval_models,
                               const FeatureSet& test, const ImageShape& shape,
                               const CampaignConfig& config);

}  // namespace keycache
