#include "samseg/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace samseg {

void EvalConfig::validate() const {
    if (max_clicks < 1) throw ArgumentError("max_clicks must be at least 1");
    if (target_ious.empty()) throw ArgumentError("at least one target IoU is required");
    for (std::size_t i = 0; i < target_ious.size(); ++i) {
        const double t = target_ious[i];
        if (!(t > 0.0 && t < 1.0)) throw ArgumentError("target IoU " + std::to_string(t) + " not in (0, 1)");
        if (i > 0 && !(t > target_ious[i - 1])) throw ArgumentError("target IoUs must be strictly ascending");
    }
    if (!timer) throw ArgumentError("EvalConfig needs a timer");
}

std::string target_key(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", t);
    return buf;
}

std::string target_percent(double t) { return std::to_string(std::lround(t * 100.0)); }

std::optional<int> first_reaching(const std::vector<double>& per_click_iou, double target) {
    for (std::size_t i = 0; i < per_click_iou.size(); ++i)
        if (per_click_iou[i] >= target) return static_cast<int>(i + 1);
    return std::nullopt;
}

nlohmann::json to_json(const BenchmarkRecord& r, const EvalConfig& cfg, bool include_timing) {
    nlohmann::json reached = nlohmann::json::object();
    for (std::size_t i = 0; i < cfg.target_ious.size() && i < r.reached_at.size(); ++i) {
        const auto key = target_key(cfg.target_ious[i]);
        if (r.reached_at[i])
            reached[key] = *r.reached_at[i];
        else
            reached[key] = "FAIL";
    }
    nlohmann::json clicks = nlohmann::json::array();
    for (const auto& c : r.clicks) clicks.push_back(to_json(c));
    nlohmann::json j{{"patch_id", r.patch_id}, {"clicks", clicks}, {"per_click_iou", r.per_click_iou},
                     {"reached_at", reached}};
    if (!r.error.empty()) j["error"] = r.error;
    if (include_timing) {
        j["per_click_seconds"] = r.per_click_seconds;
        j["encode_seconds"] = r.encode_seconds;
    }
    return j;
}

BenchmarkRecord run_session(const Patch& patch, Segmenter& model, const EvalConfig& cfg) {
    cfg.validate();
    BenchmarkRecord rec;
    rec.patch_id = patch.patch_id;
    InteractionState state;
    state.patch_id = patch.patch_id;
    const double top = cfg.target_ious.back();
    try {
        const double t0 = cfg.timer();
        const auto encoded = model.encode(patch.image);
        rec.encode_seconds = cfg.timer() - t0;
        std::mt19937_64 unused_rng(0);
        for (int k = 0; k < cfg.max_clicks; ++k) {
            const auto click = next_click(state, patch.gt, ClickPolicy::eval(), unused_rng);
            if (!click) break;
            state.push_click(click->row, click->col, click->polarity);
            const Logits* feedback = state.prev_logits ? &*state.prev_logits : nullptr;
            const double t1 = cfg.timer();
            Decoded out = model.decode(*encoded, state.clicks, feedback);
            const double dt = cfg.timer() - t1;
            require_same_shape(out.logits, patch.gt, "segmenter output");
            Mask pred = binarize(out.logits);
            const double score = iou(pred, patch.gt);
            state.prev_prediction = std::move(pred);
            if (out.feedback.size() > 0)
                state.prev_logits = std::move(out.feedback);
            else
                state.prev_logits.reset();
            rec.clicks.push_back(state.clicks.back());
            rec.per_click_iou.push_back(score);
            rec.per_click_seconds.push_back(dt);
            if (score >= top) break;
        }
    } catch (const std::exception& ex) {
        rec.error = ex.what();
    }
    for (double t : cfg.target_ious)
        rec.reached_at.push_back(rec.error.empty() ? first_reaching(rec.per_click_iou, t) : std::nullopt);
    return rec;
}

std::vector<BenchmarkRecord> run_benchmark(const std::vector<Patch>& patches, Segmenter& model, const EvalConfig& cfg,
                                           int jobs) {
    std::vector<BenchmarkRecord> out(patches.size());
    if (jobs <= 1 || patches.size() <= 1) {
        for (std::size_t i = 0; i < patches.size(); ++i) out[i] = run_session(patches[i], model, cfg);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), patches.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < patches.size(); i = next++) out[i] = run_session(patches[i], model, cfg);
        });
    }
    for (auto& t : workers) t.join();
    return out;
}

std::size_t MetricsReport::target_index(double target) const {
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (std::abs(targets[i] - target) < 1e-12) return i;
    throw ArgumentError("report has no target " + target_key(target));
}

MetricsReport aggregate(const std::vector<BenchmarkRecord>& records, const EvalConfig& cfg, const std::string& method) {
    cfg.validate();
    if (records.empty()) throw ArgumentError("aggregate: no records");
    MetricsReport r;
    r.method = method;
    r.targets = cfg.target_ious;
    r.max_clicks = cfg.max_clicks;
    r.n = records.size();
    const auto n = static_cast<double>(records.size());
    double total_seconds = 0.0, total_encode = 0.0;
    for (std::size_t t = 0; t < cfg.target_ious.size(); ++t) {
        double sum = 0.0;
        int fails = 0;
        for (const auto& rec : records) {
            if (rec.reached_at.size() != cfg.target_ious.size())
                throw ArgumentError("aggregate: record " + rec.patch_id + " has mismatched targets");
            const auto& reached = rec.reached_at[t];
            sum += reached ? *reached : cfg.max_clicks;
            if (!reached) ++fails;
        }
        r.noc.push_back(sum / n);
        r.nof.push_back(fails);
        r.nof_ratio.push_back(fails / n);
    }
    for (const auto& rec : records) {
        r.total_clicks += rec.per_click_iou.size();
        for (double s : rec.per_click_seconds) total_seconds += s;
        total_encode += rec.encode_seconds;
        if (!rec.error.empty()) ++r.aborted;
    }
    r.spc = r.total_clicks > 0 ? total_seconds / static_cast<double>(r.total_clicks) : 0.0;
    r.mean_encode_seconds = total_encode / n;
    for (int k = 1; k <= cfg.max_clicks; ++k) {
        double sum = 0.0;
        for (const auto& rec : records) {
            const auto& ious = rec.per_click_iou;
            if (!ious.empty()) sum += ious[std::min<std::size_t>(static_cast<std::size_t>(k), ious.size()) - 1];
        }
        r.miou_curve.push_back(sum / n);
    }
    return r;
}

nlohmann::json to_json(const MetricsReport& r, bool include_timing) {
    nlohmann::json noc = nlohmann::json::object(), nof = nlohmann::json::object(), ratio = nlohmann::json::object();
    for (std::size_t i = 0; i < r.targets.size(); ++i) {
        const auto key = target_key(r.targets[i]);
        noc[key] = r.noc[i];
        nof[key] = r.nof[i];
        ratio[key] = r.nof_ratio[i];
    }
    nlohmann::json j{{"method", r.method},
                     {"n", r.n},
                     {"max_clicks", r.max_clicks},
                     {"targets", r.targets},
                     {"noc", noc},
                     {"nof", nof},
                     {"nof_ratio", ratio},
                     {"total_clicks", r.total_clicks},
                     {"aborted", r.aborted},
                     {"miou_curve", r.miou_curve},
                     {"concurrent", r.concurrent},
                     {"spc_scope", "decode only; encode reported separately"}};
    if (include_timing) {
        j["spc"] = r.spc;
        j["mean_encode_seconds"] = r.mean_encode_seconds;
    }
    return j;
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    r.n = j.at("n").get<std::size_t>();
    r.max_clicks = j.at("max_clicks").get<int>();
    r.targets = j.at("targets").get<std::vector<double>>();
    for (double t : r.targets) {
        const auto key = target_key(t);
        r.noc.push_back(j.at("noc").at(key).get<double>());
        r.nof.push_back(j.at("nof").at(key).get<int>());
        r.nof_ratio.push_back(j.at("nof_ratio").at(key).get<double>());
    }
    r.total_clicks = j.value("total_clicks", std::size_t{0});
    r.aborted = j.value("aborted", std::size_t{0});
    r.miou_curve = j.value("miou_curve", std::vector<double>{});
    r.concurrent = j.value("concurrent", false);
    r.spc = j.value("spc", 0.0);
    r.mean_encode_seconds = j.value("mean_encode_seconds", 0.0);
    return r;
}

ReportFormat report_format_from_string(const std::string& s) {
    if (s == "table") return ReportFormat::table;
    if (s == "curve_csv") return ReportFormat::curve_csv;
    throw ArgumentError("unknown report format '" + s + "' (expected table or curve_csv)");
}

namespace {

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string signed_fixed(double v, int digits) {
    std::string s = fixed(v, digits);
    if (s.front() != '-') s.insert(s.begin(), '+');
    return s;
}

std::string pad(const std::string& s, std::size_t width) {
    return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string render_table(const MetricsReport& r, const MetricsReport* baseline) {
    // NoF/n is reported for every target above the lowest one.
    const std::size_t nof_begin = r.targets.size() > 1 ? 1 : 0;
    const std::size_t method_w = std::max<std::size_t>(12, r.method.size() + 2);
    const std::size_t noc_w = baseline ? 14 : 9;
    const std::size_t spc_w = 9, nof_w = 10;

    std::string noc_head, noc_row;
    for (std::size_t i = 0; i < r.targets.size(); ++i) {
        noc_head += pad("NoC@" + target_percent(r.targets[i]), noc_w);
        std::string cell = fixed(r.noc[i], 2);
        if (baseline) {
            try {
                const auto b = baseline->target_index(r.targets[i]);
                cell += "(" + signed_fixed(r.noc[i] - baseline->noc[b], 2) + ")";
            } catch (const ArgumentError&) {
            }
        }
        noc_row += pad(cell, noc_w);
    }
    std::string nof_head, nof_row;
    for (std::size_t i = nof_begin; i < r.targets.size(); ++i) {
        nof_head += pad("NoF/n@" + target_percent(r.targets[i]), nof_w);
        nof_row += pad(fixed(r.nof_ratio[i], 3), nof_w);
    }
    std::ostringstream os;
    const std::string line1 = pad("Method", method_w) + "| " + noc_head + "| " + pad("SPC(s)", spc_w) + "| " + nof_head;
    const std::string line2 =
        pad(r.method, method_w) + "| " + noc_row + "| " + pad(fixed(r.spc, 4), spc_w) + "| " + nof_row;
    auto rstrip = [](std::string s) {
        while (!s.empty() && s.back() == ' ') s.pop_back();
        return s;
    };
    os << rstrip(line1) << '\n' << std::string(rstrip(line1).size(), '-') << '\n' << rstrip(line2) << '\n';
    if (baseline) os << "(differences vs " << baseline->method << ")\n";
    os << "n=" << r.n << "  max_clicks=" << r.max_clicks << "  encode(s)=" << fixed(r.mean_encode_seconds, 4)
       << (r.concurrent ? "  sessions ran concurrently" : "") << '\n';
    return os.str();
}

std::string render_curve_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "click,miou\n";
    os << std::setprecision(10);
    for (std::size_t k = 0; k < r.miou_curve.size(); ++k) os << (k + 1) << ',' << r.miou_curve[k] << '\n';
    return os.str();
}

std::filesystem::path emit_report(const MetricsReport& r, ReportFormat format, const std::filesystem::path& out_dir,
                                  const MetricsReport* baseline) {
    std::filesystem::create_directories(out_dir);
    const auto path = out_dir / (format == ReportFormat::table ? "report.txt" : "curve.csv");
    std::ofstream os(path);
    if (!os) throw ArgumentError("cannot write " + path.string());
    os << (format == ReportFormat::table ? render_table(r, baseline) : render_curve_csv(r));
    return path;
}

void write_bench_outputs(const MetricsReport& r, const std::vector<BenchmarkRecord>& records, const EvalConfig& cfg,
                         const std::filesystem::path& out_dir, const MetricsReport* baseline) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream os(out_dir / "report.json");
        nlohmann::json j = to_json(r);
        if (baseline) j["baseline"] = to_json(*baseline);
        os << j.dump(2) << '\n';
    }
    emit_report(r, ReportFormat::table, out_dir, baseline);
    emit_report(r, ReportFormat::curve_csv, out_dir);
    std::ofstream os(out_dir / "records.jsonl");
    for (const auto& rec : records) os << to_json(rec, cfg).dump() << '\n';
}

std::vector<double> replay_trajectory(const Patch& patch, Segmenter& model, const std::vector<Click>& clicks) {
    const auto encoded = model.encode(patch.image);
    std::vector<Click> prefix;
    std::optional<Logits> feedback;
    std::vector<double> ious;
    for (const auto& c : clicks) {
        prefix.push_back(c);
        Decoded out = model.decode(*encoded, prefix, feedback ? &*feedback : nullptr);
        ious.push_back(iou(binarize(out.logits), patch.gt));
        if (out.feedback.size() > 0)
            feedback = std::move(out.feedback);
        else
            feedback.reset();
    }
    return ious;
}

}  // namespace samseg
