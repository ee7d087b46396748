#pragma once

#include "samseg/bench.hpp"
#include "samseg/training.hpp"

#include <filesystem>
#include <iosfwd>

namespace samseg {

/// Desk-scale fine-tuning experiment on a synthetic corpus: fine-tune the
/// decoder, benchmark it against a zero-initialized decoder, and time the
/// decoder across click ordinals.
struct StudyConfig {
    std::size_t patches = 500;
    std::uint64_t seed = 7;
    Index patch_size = 400;
    double test_fraction = 0.2;
    ModelConfig model = ModelConfig::toy();
    FreezeScenario scenario = FreezeScenario::md_only;
    TrainConfig train;
    EvalConfig eval;
    /// Timing sweep: this many test patches, clicked up to eval.max_clicks
    /// times regardless of the IoU reached.
    std::size_t timing_patches = 20;
    /// Empty: nothing written.
    std::filesystem::path out_dir;
};

struct StudyResult {
    MetricsReport baseline;
    MetricsReport finetuned;
    FitResult fit;
    std::vector<double> decode_seconds_by_ordinal;
    std::vector<std::size_t> timing_samples_by_ordinal;
    std::size_t train_patches = 0;
    std::size_t test_patches = 0;
    double wall_seconds = 0.0;

    /// max_k |t_k - mean| / mean over ordinals with at least `min_samples`.
    double timing_spread(std::size_t min_samples = 5) const;
    nlohmann::json to_json() const;
};

/// Sets every mask-decoder parameter to zero.
void zero_mask_decoder(SamModel& model);

/// Per-ordinal mean decode seconds, clicking each patch up to `max_clicks`
/// times with the evaluation clicker. One warm-up decode runs first.
std::pair<std::vector<double>, std::vector<std::size_t>> decode_time_by_ordinal(const std::vector<Patch>& patches,
                                                                                Segmenter& model, int max_clicks);

StudyResult run_desk_study(const StudyConfig& cfg, std::ostream* progress = nullptr);

}  // namespace samseg
