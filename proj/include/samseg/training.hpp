#pragma once

#include "samseg/clicker.hpp"
#include "samseg/data.hpp"
#include "samseg/nets.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace samseg {

enum class FreezeScenario { md_only, ie_and_md, whole };

std::string to_string(FreezeScenario s);
/// Accepts "MD_only", "IE_and_MD", "Whole" (case-insensitive).
FreezeScenario freeze_scenario_from_string(const std::string& s);

struct FreezePolicy {
    FreezeScenario scenario = FreezeScenario::md_only;
    bool trains(Component c) const;
};

struct TrainConfig {
    double initial_lr = 5e-4;
    std::vector<int> lr_drop_epochs{20, 25};
    double lr_drop_factor = 10.0;
    int total_epochs = 30;
    double focal_gamma = 2.0;
    int max_train_clicks_per_sample = 3;
    std::uint64_t rng_seed = 0;
    int batch_size = 8;
    bool augment_flips = true;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Piecewise-constant schedule; throws ArgumentError outside [0, total_epochs).
double lr_at_epoch(int epoch, const TrainConfig& cfg);

/// -sum w log p_t / sum w with w = (1 - p_t)^gamma; the normalizer is a
/// constant with respect to the gradient. `logits` holds H*W values
/// (shape [1, H, W] or [H, W]) matching `gt`.
ag::Var normalized_focal_loss(const ag::Var& logits, const Mask& gt, double gamma);
double normalized_focal_loss(const Logits& logits, const Mask& gt, double gamma);

/// A patch prepared for training at the model's low resolution: the image
/// resized and normalized to the encoder input, the ground truth
/// area-downsampled to the logit grid (4x the embedding side).
struct TrainSample {
    std::string id;
    ag::Var image;  // [3, S, S], constant
    Mask gt;        // [L, L]
};

TrainSample make_train_sample(const Patch& patch, const ModelConfig& cfg);
/// Box-filter downsampling of a mask followed by a >= 0.5 threshold.
Mask area_downsample(const Mask& m, Index side);

struct StepResult {
    double loss = 0.0;  // mean over used samples
    std::size_t used = 0;
    std::size_t skipped = 0;
    std::vector<double> sample_losses;
    std::vector<std::vector<Click>> clicks;
};

struct FitOptions {
    std::ostream* log = nullptr;  // line-delimited JSON per step
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints
    std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct FitResult {
    std::vector<double> epoch_loss;
    std::size_t steps = 0;
    std::size_t skipped = 0;
    std::vector<std::filesystem::path> checkpoints;
};

/// Owns the optimizer state and drives iterative click-guided training.
/// Frozen parameters have gradient tracking switched off on construction and
/// are never written.
class Trainer {
  public:
    Trainer(SamModel& model, FreezePolicy policy, TrainConfig cfg);

    /// One optimizer step over `batch`. Per sample: k clicks are simulated
    /// (intermediate passes without gradient, feeding their logits back as
    /// the mask prompt), then the last pass is scored with the focal loss.
    StepResult step(std::span<const TrainSample> batch, double lr);

    FitResult fit(const std::vector<TrainSample>& samples, const FitOptions& opts = {});

    const std::vector<NamedParameter>& trainable() const { return trainable_; }
    std::size_t steps_taken() const { return t_; }

  private:
    double sample_loss(const TrainSample& sample, StepResult& result);

    SamModel& model_;
    FreezePolicy policy_;
    TrainConfig cfg_;
    std::mt19937_64 rng_;
    std::vector<NamedParameter> trainable_;
    std::map<std::string, std::pair<ag::Vector, ag::Vector>> moments_;
    std::size_t t_ = 0;
};

}  // namespace samseg
