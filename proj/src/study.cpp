#include "samseg/study.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

namespace samseg {

double StudyResult::timing_spread(std::size_t min_samples) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < decode_seconds_by_ordinal.size(); ++k) {
        if (timing_samples_by_ordinal[k] < min_samples) continue;
        sum += decode_seconds_by_ordinal[k];
        ++n;
    }
    if (n == 0) return 0.0;
    const double mean = sum / static_cast<double>(n);
    double worst = 0.0;
    for (std::size_t k = 0; k < decode_seconds_by_ordinal.size(); ++k) {
        if (timing_samples_by_ordinal[k] < min_samples) continue;
        worst = std::max(worst, std::abs(decode_seconds_by_ordinal[k] - mean) / mean);
    }
    return worst;
}

nlohmann::json StudyResult::to_json() const {
    return {{"baseline", samseg::to_json(baseline)},
            {"finetuned", samseg::to_json(finetuned)},
            {"epoch_loss", fit.epoch_loss},
            {"train_steps", fit.steps},
            {"decode_seconds_by_ordinal", decode_seconds_by_ordinal},
            {"timing_samples_by_ordinal", timing_samples_by_ordinal},
            {"timing_spread", timing_spread()},
            {"train_patches", train_patches},
            {"test_patches", test_patches},
            {"wall_seconds", wall_seconds}};
}

void zero_mask_decoder(SamModel& model) {
    for (auto& p : model.parameters())
        if (p.component == Component::mask_decoder) p.var.mutable_value().setZero();
}

std::pair<std::vector<double>, std::vector<std::size_t>> decode_time_by_ordinal(const std::vector<Patch>& patches,
                                                                                Segmenter& model, int max_clicks) {
    std::vector<double> total(static_cast<std::size_t>(max_clicks), 0.0);
    std::vector<std::size_t> samples(static_cast<std::size_t>(max_clicks), 0);
    bool warmed = false;
    for (const auto& patch : patches) {
        const auto encoded = model.encode(patch.image);
        InteractionState state;
        state.patch_id = patch.patch_id;
        if (!warmed) {
            const auto first = next_click(state, patch.gt, ClickPolicy::eval());
            model.decode(*encoded, std::span<const Click>(&*first, 1), nullptr);
            warmed = true;
        }
        for (int k = 0; k < max_clicks; ++k) {
            const auto click = next_click(state, patch.gt, ClickPolicy::eval());
            if (!click) break;
            state.push_click(click->row, click->col, click->polarity);
            const Logits* feedback = state.prev_logits ? &*state.prev_logits : nullptr;
            const auto t0 = std::chrono::steady_clock::now();
            Decoded out = model.decode(*encoded, state.clicks, feedback);
            const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            total[static_cast<std::size_t>(k)] += dt;
            ++samples[static_cast<std::size_t>(k)];
            state.prev_prediction = binarize(out.logits);
            state.prev_logits = std::move(out.feedback);
        }
    }
    for (std::size_t k = 0; k < total.size(); ++k)
        if (samples[k] > 0) total[k] /= static_cast<double>(samples[k]);
    return {total, samples};
}

StudyResult run_desk_study(const StudyConfig& cfg, std::ostream* progress) {
    const auto start = std::chrono::steady_clock::now();
    auto say = [&](const std::string& msg) {
        if (progress) {
            const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            *progress << "[" << std::lround(t) << "s] " << msg << std::endl;
        }
    };
    StudyResult result;

    say("generating " + std::to_string(cfg.patches) + " synthetic patches");
    std::vector<Patch> all = synth_patches(cfg.patches, cfg.seed, cfg.patch_size);
    const auto n_test = static_cast<std::size_t>(std::lround(cfg.test_fraction * static_cast<double>(all.size())));
    if (n_test == 0 || n_test >= all.size()) throw ArgumentError("study: test split must be a proper subset");
    std::vector<Patch> test(all.end() - static_cast<std::ptrdiff_t>(n_test), all.end());
    all.resize(all.size() - n_test);
    result.train_patches = all.size();
    result.test_patches = test.size();

    SamModel initial(cfg.model);

    auto baseline_model = std::make_shared<SamModel>(clone(initial));
    zero_mask_decoder(*baseline_model);
    SamSegmenter baseline(baseline_model, "zero-init decoder");
    say("benchmarking zero-init decoder on " + std::to_string(test.size()) + " test patches");
    result.baseline = aggregate(run_benchmark(test, baseline, cfg.eval), cfg.eval, baseline.name());

    auto tuned = std::make_shared<SamModel>(clone(initial));
    std::vector<TrainSample> samples;
    samples.reserve(all.size());
    for (const auto& p : all) samples.push_back(make_train_sample(p, cfg.model));
    all.clear();
    {
        Trainer trainer(*tuned, FreezePolicy{cfg.scenario}, cfg.train);
        FitOptions opts;
        std::ofstream log;
        if (!cfg.out_dir.empty()) {
            std::filesystem::create_directories(cfg.out_dir);
            log.open(cfg.out_dir / "train_log.jsonl");
            opts.log = &log;
        }
        opts.on_epoch = [&](int epoch, double loss) {
            say("epoch " + std::to_string(epoch) + " loss " + std::to_string(loss));
        };
        say("fine-tuning (" + to_string(cfg.scenario) + ") on " + std::to_string(samples.size()) + " patches");
        result.fit = trainer.fit(samples, opts);
    }
    for (auto& p : tuned->parameters()) p.var.set_requires_grad(false);
    SamSegmenter finetuned(tuned, "fine-tuned decoder");
    say("benchmarking fine-tuned decoder");
    const auto records = run_benchmark(test, finetuned, cfg.eval);
    result.finetuned = aggregate(records, cfg.eval, finetuned.name());

    say("timing decode across click ordinals");
    std::vector<Patch> timing(test.begin(),
                              test.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.timing_patches, test.size())));
    std::tie(result.decode_seconds_by_ordinal, result.timing_samples_by_ordinal) =
        decode_time_by_ordinal(timing, finetuned, cfg.eval.max_clicks);

    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!cfg.out_dir.empty()) {
        write_bench_outputs(result.finetuned, records, cfg.eval, cfg.out_dir / "finetuned", &result.baseline);
        emit_report(result.baseline, ReportFormat::table, cfg.out_dir / "baseline");
        emit_report(result.baseline, ReportFormat::curve_csv, cfg.out_dir / "baseline");
        tuned->save(cfg.out_dir / "checkpoint");
        std::ofstream(cfg.out_dir / "study.json") << result.to_json().dump(2) << '\n';
    }
    say("done");
    return result;
}

}  // namespace samseg
