// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if
// any criterion fails.

#include "samseg/bench.hpp"
#include "samseg/clicker.hpp"
#include "samseg/data.hpp"
#include "samseg/study.hpp"
#include "samseg/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace samseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome clicker_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2024);
    int matched = 0, total = 0;
    while (total < 200) {
        const Index h = 1 + static_cast<Index>(rng() % 32), w = 1 + static_cast<Index>(rng() % 32);
        Mask gt = oracles::random_blobby(rng, h, w);
        if (count(gt) == 0) gt(static_cast<Index>(rng() % static_cast<std::uint64_t>(h)), 0) = 1;
        const Mask pred = oracles::random_blobby(rng, h, w);
        InteractionState s;
        if (total % 4 != 0) {
            if ((pred == gt).all()) continue;
            s.push_click(0, 0, Polarity::positive);
            s.prev_prediction = pred;
        }
        const auto c = next_click(s, gt, ClickPolicy::eval());
        matched += (c && *c == oracles::oracle_eval_click(s, gt)) ? 1 : 0;
        ++total;
    }
    const double secs = seconds_since(t0);
    return {matched == total && secs < 10.0,
            std::to_string(matched) + "/" + std::to_string(total) + " match, " + fmt("%.2f s", secs)};
}

BenchmarkRecord record_from_ious(std::vector<double> ious, const EvalConfig& cfg) {
    BenchmarkRecord r;
    r.per_click_iou = std::move(ious);
    for (double t : cfg.target_ious) r.reached_at.push_back(first_reaching(r.per_click_iou, t));
    return r;
}

Outcome metrics_oracle() {
    const EvalConfig cfg;
    std::vector<double> a(3, 0.1), b(5, 0.1), c(20, 0.5);
    a.back() = b.back() = 0.95;
    const auto fixture = aggregate({record_from_ious(a, cfg), record_from_ious(b, cfg), record_from_ious(c, cfg)}, cfg);
    const bool fixture_ok = std::abs(fixture.noc[2] - 28.0 / 3.0) < 1e-12 && fixture.nof[2] == 1 &&
                            std::abs(fixture.nof_ratio[2] - 1.0 / 3.0) < 1e-12;

    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    bool brute_ok = true, monotone = true;
    int reports = 0;
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<std::vector<double>> logs;
        std::vector<BenchmarkRecord> records;
        for (int i = 0; i < 100; ++i) {
            std::vector<double> ious;
            const int len = 1 + static_cast<int>(rng() % 20);
            for (int k = 0; k < len; ++k) ious.push_back(u(rng));
            logs.push_back(ious);
            records.push_back(record_from_ious(ious, cfg));
        }
        const auto r = aggregate(records, cfg);
        const auto o = oracles::recount(logs, cfg.target_ious, cfg.max_clicks);
        for (std::size_t t = 0; t < 3; ++t) brute_ok = brute_ok && std::abs(r.noc[t] - o.noc[t]) < 1e-12 && r.nof[t] == o.nof[t];
        monotone = monotone && r.noc[0] <= r.noc[1] && r.noc[1] <= r.noc[2];
        ++reports;
    }
    return {fixture_ok && brute_ok && monotone,
            "fixture NoC@90=" + fmt("%.2f", fixture.noc[2]) + " NoF/n=" + fmt("%.3f", fixture.nof_ratio[2]) +
                ", brute-force " + (brute_ok ? "equal" : "MISMATCH") + " on " + std::to_string(reports) +
                "x100 logs, monotone " + (monotone ? "yes" : "NO")};
}

Outcome decoder_correctness() {
    // Gradients on the default toy configuration.
    std::mt19937_64 rng(5);
    SamModel model(ModelConfig::toy());
    ImageEmbedding e;
    {
        ag::NoGradGuard guard;
        e = model.embed(testing::random_image(rng, 128));
    }
    const std::vector<Click> clicks{{30, 40, Polarity::positive, 1}, {90, 100, Polarity::negative, 2}};
    Logits feedback;
    {
        ag::NoGradGuard guard;
        feedback = to_logits(model.decode(e, clicks, nullptr));
    }
    const auto grad = testing::check_decoder_gradients(model, e, clicks, &feedback, 3, 2);
    const bool grad_ok = grad.max_rel_error < 1e-4 && grad.entries > 100;

    // Shape ladder at full width: 256@64x64 -> 128@128 -> 64@256 -> 32@256 -> 1@256.
    DecoderConfig dc;
    dc.embed_channels = 256;
    dc.attention_heads = DecoderConfig::default_heads(256);
    dc.mlp_dim = 512;
    Initializer init(1);
    const MaskDecoder decoder(dc, init);
    bool ladder_ok = decoder.blocks().size() == 3 &&
                     dc.upsample_stages() == std::vector<std::string>{"UpConvBlock", "UpConvBlock", "ConvBlock"};
    std::ostringstream ladder;
    {
        ag::NoGradGuard guard;
        ag::Var x = ag::Var::constant({256, 64, 64}, testing::random_vector(rng, 256 * 64 * 64) * 0.1);
        ladder << x.dim(0) << "@" << x.dim(1);
        const std::vector<ag::Shape> expected{{128, 128, 128}, {64, 256, 256}, {32, 256, 256}};
        for (std::size_t i = 0; i < decoder.blocks().size() && ladder_ok; ++i) {
            x = decoder.blocks()[i](x);
            ladder << " -> " << x.dim(0) << "@" << x.dim(1);
            ladder_ok = ladder_ok && x.shape() == expected[i];
        }
    }
    const auto names = decoder.parameters();
    const auto head = std::find_if(names.begin(), names.end(), [](const auto& p) { return p.name == "mask_decoder.head.weight"; });
    ladder_ok = ladder_ok && head != names.end() && head->var.shape() == ag::Shape{1, 32, 1, 1};
    ladder << " -> 1@256";

    bool no_dot_product = true;
    for (const auto& p : model.parameters())
        if (p.name.find("hypernetwork") != std::string::npos || p.name.find("output_upscaling") != std::string::npos)
            no_dot_product = false;
    const SamModel original(ModelConfig::toy(32, 128, DecoderVariant::original));
    bool original_has = false;
    for (const auto& p : original.parameters()) original_has |= p.name.find("hypernetwork") != std::string::npos;

    return {grad_ok && ladder_ok && no_dot_product && original_has,
            "max rel grad error " + fmt("%.2e", grad.max_rel_error) + " over " + std::to_string(grad.entries) +
                " entries; ladder " + ladder.str() + (ladder_ok ? "" : " (WRONG)") + "; token dot-product params " +
                (no_dot_product ? "absent" : "PRESENT")};
}

Outcome loss_criterion() {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(0.0, 5.0);
    std::bernoulli_distribution coin(0.3);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const Index h = 1 + static_cast<Index>(rng() % 16), w = 1 + static_cast<Index>(rng() % 16);
        Logits x(h, w);
        Mask y(h, w);
        for (Index i = 0; i < x.size(); ++i) {
            x.data()[i] = g(rng);
            y.data()[i] = coin(rng) ? 1 : 0;
        }
        const auto v = ag::Var::constant({h, w}, Eigen::Map<const ag::Vector>(x.data(), x.size()));
        worst = std::max(worst, std::abs(normalized_focal_loss(v, y, 0.0).item() - oracles::mean_bce(x, y)));
    }
    Logits x(1, 2);
    x << 0.0, std::log(9.0);
    const double hand = (0.25 * std::log(2.0) + 0.01 * std::log(10.0 / 9.0)) / 0.26;
    const auto v = ag::Var::constant({1, 2}, Eigen::Map<const ag::Vector>(x.data(), 2));
    const double got = normalized_focal_loss(v, Mask::Ones(1, 2), 2.0).item();
    return {worst < 1e-9 && std::abs(got - hand) < 1e-9,
            "max |NFL(0) - BCE| " + fmt("%.2e", worst) + " on 1000 grids; hand value " + fmt("%.12f", got) +
                " vs " + fmt("%.12f", hand)};
}

Outcome freeze_criterion() {
    const auto mcfg = ModelConfig::toy();
    std::vector<TrainSample> samples;
    for (const auto& p : synth_patches(16, 77, 128)) samples.push_back(make_train_sample(p, mcfg));
    bool ok = true;
    std::ostringstream detail;
    for (auto scenario : {FreezeScenario::md_only, FreezeScenario::ie_and_md, FreezeScenario::whole}) {
        SamModel model(mcfg);
        const FreezePolicy policy{scenario};
        std::map<Component, std::uint64_t> before;
        for (auto c : {Component::image_encoder, Component::prompt_encoder, Component::mask_decoder})
            before[c] = parameter_checksum(model, c);
        TrainConfig cfg;
        Trainer trainer(model, policy, cfg);
        for (int step = 0; step < 50; ++step) {
            const std::size_t begin = static_cast<std::size_t>(step % 2) * 8;
            trainer.step(std::span(samples).subspan(begin, 8), cfg.initial_lr);
        }
        detail << to_string(scenario) << "[";
        for (auto c : {Component::image_encoder, Component::prompt_encoder, Component::mask_decoder}) {
            const bool changed = parameter_checksum(model, c) != before[c];
            ok = ok && changed == policy.trains(c);
            detail << (c == Component::image_encoder ? "IE" : c == Component::prompt_encoder ? " PE" : " MD") << "="
                   << (changed ? "changed" : "frozen");
        }
        detail << "] ";
    }
    return {ok, "50 steps each: " + detail.str()};
}

Outcome desk_study(const fs::path& out, std::size_t patches, int epochs) {
    StudyConfig cfg;
    cfg.patches = patches;
    cfg.out_dir = out / "desk_study";
    if (epochs != cfg.train.total_epochs) {
        cfg.train.total_epochs = epochs;
        cfg.train.lr_drop_epochs = {epochs * 2 / 3, epochs * 5 / 6};
    }
    const auto r = run_desk_study(cfg, &std::cerr);
    const auto i80 = r.finetuned.target_index(0.8);
    const bool a = r.finetuned.noc[i80] < r.baseline.noc[i80];
    const double spread = r.timing_spread();
    const bool b = spread <= 0.2;
    const auto& curve = r.finetuned.miou_curve;
    double mean_step = 0.0;
    bool stepwise = true;
    for (std::size_t k = 1; k < 5; ++k) {
        mean_step += (curve[k] - curve[k - 1]) / 4.0;
        stepwise = stepwise && curve[k] >= curve[k - 1];
    }
    const bool c = fs::exists(cfg.out_dir / "finetuned" / "curve.csv") && mean_step >= 0.0;
    std::ostringstream d;
    d << "(a) NoC@80 " << fmt("%.2f", r.finetuned.noc[i80]) << " vs zero-init " << fmt("%.2f", r.baseline.noc[i80])
      << (a ? " ok" : " NOT LOWER") << "; (b) decode-time spread " << fmt("%.1f%%", 100 * spread)
      << (b ? " ok" : " OVER 20%") << "; (c) mIoU@1..5";
    for (std::size_t k = 0; k < 5; ++k) d << " " << fmt("%.4f", curve[k]);
    d << ", mean step " << fmt("%+.4f", mean_step) << (stepwise ? " (every step non-decreasing)" : " (not every step)")
      << (c ? " ok" : " DECREASING") << "; " << r.train_patches << "/" << r.test_patches << " train/test, "
      << fmt("%.0f s", r.wall_seconds);
    return {a && b && c, d.str()};
}

Outcome bench_determinism(const fs::path& out) {
    const auto patches = synth_patches(12, 31, 64);
    // Scripted fake: grows a square around the clicks, independent of timing.
    auto run = [&](const fs::path& dir) {
        FunctionSegmenter fake("scripted", [](const RgbImage& img, std::span<const Click> clicks, const Logits*) {
            Mask m = Mask::Zero(img.height(), img.width());
            for (const auto& c : clicks) {
                const Index rad = 3 + static_cast<Index>(clicks.size());
                const Index r0 = std::max<Index>(0, c.row - rad), c0 = std::max<Index>(0, c.col - rad);
                const Index r1 = std::min(img.height(), c.row + rad + 1), c1 = std::min(img.width(), c.col + rad + 1);
                m.block(r0, c0, r1 - r0, c1 - c0).setConstant(c.polarity == Polarity::positive ? 1 : 0);
            }
            return mask_to_logits(m);
        });
        const EvalConfig cfg;
        const auto records = run_benchmark(patches, fake, cfg, 2);
        const auto report = aggregate(records, cfg, fake.name());
        fs::create_directories(dir);
        std::ofstream os(dir / "masked.jsonl");
        os << to_json(report, false).dump() << '\n';
        for (const auto& rec : records) os << to_json(rec, cfg, false).dump() << '\n';
        os.close();
        std::ifstream is(dir / "masked.jsonl", std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    const auto a = run(out / "determinism_a"), b = run(out / "determinism_b");
    return {a == b && !a.empty(), std::to_string(a.size()) + " bytes per run, " + (a == b ? "identical" : "DIFFERENT")};
}

Outcome data_pipeline(const fs::path& out) {
    auto fill = [](Mask& gt, Index r0, Index c0, Index pixels) {
        for (Index i = 0; i < pixels; ++i) gt(r0 + i / 400, c0 + i % 400) = 1;
    };
    RgbImage slide(800, 800);
    Mask gt = Mask::Zero(800, 800);
    fill(gt, 0, 0, 32000);       // 20%
    fill(gt, 0, 400, 16000);     // 10%
    fill(gt, 400, 0, 80000);     // 50%
    fill(gt, 400, 400, 128000);  // 80%
    const bool tiles = tile_and_filter(slide, gt, 400, FractionBounds{0.0, 1.0}).size() == 4;
    const auto kept = tile_and_filter(slide, gt);
    const bool bounds = kept.size() == 3 && kept[0].patch_id == "slide_r0_c0" && kept[1].patch_id == "slide_r400_c0" &&
                        kept[2].patch_id == "slide_r400_c400";

    const auto dir = out / "corpus";
    fs::remove_all(dir);
    const auto patches = synth_patches(10, 8, 64);
    const auto written = write_corpus(patches, dir);
    const auto loaded = load_manifest(dir);
    bool round_trip = loaded.entries.size() == written.entries.size() && validate_manifest(loaded).ok();
    for (std::size_t i = 0; round_trip && i < patches.size(); ++i) {
        round_trip = to_json(loaded.entries[i]) == to_json(written.entries[i]);
        const auto p = load_patch(loaded, loaded.entries[i]);
        round_trip = round_trip && p.image == patches[i].image && (p.gt == patches[i].gt).all();
    }
    return {tiles && bounds && round_trip, std::string("800x800 -> 4 tiles ") + (tiles ? "ok" : "WRONG") +
                                               "; 20%/80% kept, 10% dropped, 50% kept " + (bounds ? "ok" : "WRONG") +
                                               "; manifest round trip " + (round_trip ? "ok" : "WRONG")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    fs::path out = fs::temp_directory_path() / "samseg_acceptance";
    std::size_t patches = 500;
    int epochs = 30;
    app.add_option("--out", out, "Scratch and report directory");
    app.add_option("--patches", patches, "Synthetic corpus size for the desk study");
    app.add_option("--epochs", epochs, "Fine-tuning epochs for the desk study");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(out);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"clicker oracle equivalence", clicker_oracle},
        {"metrics oracle", metrics_oracle},
        {"decoder correctness", decoder_correctness},
        {"loss", loss_criterion},
        {"freeze scenarios", freeze_criterion},
        {"desk-scale study", [&] { return desk_study(out, patches, epochs); }},
        {"benchmark determinism", [&] { return bench_determinism(out); }},
        {"data pipeline", [&] { return data_pipeline(out); }},
    };
    int failed = 0;
    std::ofstream summary(out / "acceptance.txt");
    for (const auto& [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        const std::string line = std::string(o.pass ? "PASS" : "FAIL") + "  " + name + ": " + o.detail;
        std::cout << line << std::endl;
        summary << line << '\n';
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
