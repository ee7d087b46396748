#pragma once

#include "samseg/clicker.hpp"
#include "samseg/data.hpp"
#include "samseg/segmenter.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace samseg {

struct EvalConfig {
    std::vector<double> target_ious{0.80, 0.85, 0.90};
    int max_clicks = 20;
    /// Monotonic seconds; replaceable so tests can script timings.
    std::function<double()> timer = [] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
    };

    void validate() const;
};

/// Short label for a target, e.g. 0.85 -> "0.85", used as a JSON key.
std::string target_key(double t);
/// Column label, e.g. 0.85 -> "NoC@85".
std::string target_percent(double t);

struct BenchmarkRecord {
    std::string patch_id;
    std::vector<Click> clicks;
    std::vector<double> per_click_iou;
    std::vector<double> per_click_seconds;
    /// Aligned with EvalConfig::target_ious; nullopt means FAIL.
    std::vector<std::optional<int>> reached_at;
    double encode_seconds = 0.0;
    /// Non-empty when the session was aborted by a model failure.
    std::string error;
};

/// Ordinal at which `per_click_iou` first reaches `target`, or nullopt.
std::optional<int> first_reaching(const std::vector<double>& per_click_iou, double target);

nlohmann::json to_json(const BenchmarkRecord& r, const EvalConfig& cfg, bool include_timing = true);

BenchmarkRecord run_session(const Patch& patch, Segmenter& model, const EvalConfig& cfg);

/// Runs every patch; `jobs` > 1 spreads sessions over worker threads.
/// Records come back in patch order regardless of scheduling.
std::vector<BenchmarkRecord> run_benchmark(const std::vector<Patch>& patches, Segmenter& model, const EvalConfig& cfg,
                                           int jobs = 1);

struct MetricsReport {
    std::string method;
    std::vector<double> targets;
    int max_clicks = 20;
    std::size_t n = 0;
    std::vector<double> noc;
    std::vector<int> nof;
    std::vector<double> nof_ratio;
    double spc = 0.0;
    double mean_encode_seconds = 0.0;
    std::size_t total_clicks = 0;
    std::size_t aborted = 0;
    /// Mean IoU at click ordinals 1..max_clicks.
    std::vector<double> miou_curve;
    bool concurrent = false;

    /// Index of `target` in `targets`; throws ArgumentError when absent.
    std::size_t target_index(double target) const;
};

MetricsReport aggregate(const std::vector<BenchmarkRecord>& records, const EvalConfig& cfg,
                        const std::string& method = "model");

nlohmann::json to_json(const MetricsReport& r, bool include_timing = true);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

enum class ReportFormat { table, curve_csv };
ReportFormat report_format_from_string(const std::string& s);

/// Table in the NoC@.. | SPC(s) | NoF/n@.. layout. With a baseline, NoC
/// cells carry the signed difference, e.g. "3.74(-2.51)".
std::string render_table(const MetricsReport& r, const MetricsReport* baseline = nullptr);
/// Header "click,miou" then one row per click ordinal.
std::string render_curve_csv(const MetricsReport& r);

/// Writes report.txt (table) or curve.csv into `out_dir`; returns the path.
std::filesystem::path emit_report(const MetricsReport& r, ReportFormat format, const std::filesystem::path& out_dir,
                                  const MetricsReport* baseline = nullptr);

/// Writes report.json, report.txt, curve.csv and records.jsonl.
void write_bench_outputs(const MetricsReport& r, const std::vector<BenchmarkRecord>& records, const EvalConfig& cfg,
                         const std::filesystem::path& out_dir, const MetricsReport* baseline = nullptr);

/// Re-runs a recorded click sequence (encode once, decode per prefix with
/// feedback) and returns the IoU after each click.
std::vector<double> replay_trajectory(const Patch& patch, Segmenter& model, const std::vector<Click>& clicks);

}  // namespace samseg
