#include "samseg/bench.hpp"
#include "samseg/data.hpp"
#include "samseg/image_io.hpp"
#include "samseg/service.hpp"
#include "samseg/study.hpp"
#include "samseg/training.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace samseg;

namespace {

std::shared_ptr<Segmenter> load_segmenter(const std::string& spec) {
    if (spec.rfind("adapter:", 0) == 0) return make_builtin_adapter(spec.substr(8));
    auto model = std::make_shared<SamModel>(SamModel::load(spec));
    return std::make_shared<SamSegmenter>(model, std::filesystem::path(spec).filename().string());
}

std::vector<double> parse_targets(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"samseg: interactive segmentation workbench"};
    app.require_subcommand(1);

    // bench ---------------------------------------------------------------
    auto* bench = app.add_subcommand("bench", "Automatic click-simulation benchmark");
    bench->require_subcommand(1);

    std::string model_spec, data_path, out_dir, baseline_path, split_name = "test";
    std::string targets = "0.8,0.85,0.9";
    int max_clicks = 20, jobs = 1;
    std::size_t limit = 0;
    auto* bench_run = bench->add_subcommand("run", "Benchmark a checkpoint or adapter on a manifest split");
    bench_run->add_option("--model", model_spec, "Checkpoint directory or adapter:<name>")->required();
    bench_run->add_option("--data", data_path, "Manifest file or directory")->required();
    bench_run->add_option("--split", split_name, "train, val or test");
    bench_run->add_option("--targets", targets, "Comma-separated target IoUs");
    bench_run->add_option("--max-clicks", max_clicks, "Click cap per patch");
    bench_run->add_option("--out", out_dir, "Output directory")->required();
    bench_run->add_option("--baseline", baseline_path, "report.json of a baseline for delta cells");
    bench_run->add_option("--jobs", jobs, "Parallel sessions");
    bench_run->add_option("--limit", limit, "Use only the first N patches (0 = all)");

    std::string trajectory_path, patch_id;
    auto* bench_replay = bench->add_subcommand("replay", "Replay an exported trajectory and print per-click IoU");
    bench_replay->add_option("--model", model_spec)->required();
    bench_replay->add_option("--data", data_path)->required();
    bench_replay->add_option("--patch-id", patch_id)->required();
    bench_replay->add_option("--trajectory", trajectory_path, "Line-delimited click export")->required();

    // data ----------------------------------------------------------------
    auto* data = app.add_subcommand("data", "Corpus construction");
    data->require_subcommand(1);

    std::string slide_path, mask_path, slide_id = "slide";
    Index tile = 400;
    int magnification = 5;
    FractionBounds bounds;
    auto* data_tile = data->add_subcommand("tile", "Tile a large image and mask and filter by tumor fraction");
    data_tile->add_option("--slide", slide_path)->required();
    data_tile->add_option("--mask", mask_path)->required();
    data_tile->add_option("--out", out_dir)->required();
    data_tile->add_option("--tile", tile);
    data_tile->add_option("--min-fraction", bounds.min);
    data_tile->add_option("--max-fraction", bounds.max);
    data_tile->add_option("--slide-id", slide_id);
    data_tile->add_option("--magnification", magnification)->check(CLI::IsMember({5, 10}));

    std::size_t n = 500;
    std::uint64_t seed = 7;
    Index size = 400;
    auto* data_synth = data->add_subcommand("synth", "Generate a synthetic corpus");
    data_synth->add_option("--n", n);
    data_synth->add_option("--seed", seed);
    data_synth->add_option("--size", size);
    data_synth->add_option("--out", out_dir)->required();

    auto* data_validate = data->add_subcommand("validate", "Check every manifest entry");
    data_validate->add_option("--manifest", data_path)->required();

    // model ---------------------------------------------------------------
    auto* model_cmd = app.add_subcommand("model", "Checkpoint utilities");
    model_cmd->require_subcommand(1);
    std::string decoder = "modified";
    Index channels = 32, input = 128;
    std::uint64_t init_seed = 0;
    bool no_global = false;
    auto* model_init = model_cmd->add_subcommand("init", "Write a freshly initialized checkpoint");
    model_init->add_option("--out", out_dir)->required();
    model_init->add_option("--decoder", decoder)->check(CLI::IsMember({"modified", "original"}));
    model_init->add_option("--channels", channels);
    model_init->add_option("--input", input, "Encoder input side");
    model_init->add_option("--seed", init_seed);
    model_init->add_flag("--no-global-attention", no_global);

    // train ---------------------------------------------------------------
    std::string config_path, init_path, scenario = "MD_only";
    int epochs = 0;
    auto* train = app.add_subcommand("train", "Fine-tune a checkpoint on the train split");
    train->add_option("--data", data_path)->required();
    train->add_option("--out", out_dir)->required();
    train->add_option("--init", init_path, "Starting checkpoint (default: fresh toy model)");
    train->add_option("--config", config_path, "Training config JSON");
    train->add_option("--scenario", scenario, "MD_only, IE_and_MD or Whole");
    train->add_option("--epochs", epochs, "Override total epochs");
    train->add_option("--decoder", decoder)->check(CLI::IsMember({"modified", "original"}));
    train->add_option("--channels", channels);
    train->add_option("--input", input);

    // serve ---------------------------------------------------------------
    std::vector<std::string> model_specs;
    std::string db_path = "sessions.db", static_dir;
    ServerOptions server_opts;
    auto* serve = app.add_subcommand("serve", "Run the session HTTP service");
    serve->add_option("--model", model_specs, "id=<checkpoint|adapter:name>, repeatable")->required();
    serve->add_option("--data", data_path, "Manifest whose patches sessions may reference");
    serve->add_option("--db", db_path, "SQLite session store");
    serve->add_option("--host", server_opts.host);
    serve->add_option("--port", server_opts.port);
    serve->add_option("--static", static_dir, "Directory of UI assets served at /");

    // study ---------------------------------------------------------------
    StudyConfig study_cfg;
    auto* study = app.add_subcommand("study", "Desk-scale fine-tuning study on a synthetic corpus");
    study->add_option("--out", out_dir)->required();
    study->add_option("--patches", study_cfg.patches);
    study->add_option("--seed", study_cfg.seed);
    study->add_option("--epochs", epochs);

    CLI11_PARSE(app, argc, argv);

    try {
        if (bench_run->parsed()) {
            EvalConfig cfg;
            cfg.target_ious = parse_targets(targets);
            cfg.max_clicks = max_clicks;
            cfg.validate();
            const auto manifest = load_manifest(data_path);
            auto patches = load_split(manifest, split_from_string(split_name));
            if (limit > 0 && patches.size() > limit) patches.resize(limit);
            if (patches.empty()) throw ArgumentError("no patches in split " + split_name);
            auto model = load_segmenter(model_spec);
            const auto records = run_benchmark(patches, *model, cfg, jobs);
            auto report = aggregate(records, cfg, model->name());
            report.concurrent = jobs > 1;
            std::optional<MetricsReport> baseline;
            if (!baseline_path.empty()) {
                std::ifstream is(baseline_path);
                if (!is) throw ArgumentError("cannot open " + baseline_path);
                baseline = metrics_report_from_json(nlohmann::json::parse(is));
            }
            write_bench_outputs(report, records, cfg, out_dir, baseline ? &*baseline : nullptr);
            std::cout << render_table(report, baseline ? &*baseline : nullptr);
            std::cout << "encoder calls: " << model->encode_calls() << " for " << patches.size() << " patches\n";
        } else if (bench_replay->parsed()) {
            const auto manifest = load_manifest(data_path);
            std::optional<Patch> patch = manifest_lookup(manifest)(patch_id);
            if (!patch) throw ArgumentError("unknown patch " + patch_id);
            std::ifstream is(trajectory_path);
            if (!is) throw ArgumentError("cannot open " + trajectory_path);
            const auto entries = read_trajectory(is);
            std::vector<Click> clicks;
            for (const auto& e : entries) clicks.push_back(e.click);
            auto model = load_segmenter(model_spec);
            const auto ious = replay_trajectory(*patch, *model, clicks);
            bool identical = true;
            for (std::size_t i = 0; i < ious.size(); ++i) {
                std::cout << "click " << (i + 1) << " iou " << ious[i];
                if (entries[i].iou) {
                    std::cout << " recorded " << *entries[i].iou;
                    identical = identical && *entries[i].iou == ious[i];
                }
                std::cout << '\n';
            }
            std::cout << (identical ? "replay matches recorded IoUs\n" : "replay differs from recorded IoUs\n");
            return identical ? 0 : 1;
        } else if (data_tile->parsed()) {
            const auto slide = read_png_rgb(slide_path);
            const auto mask = read_mask_png(mask_path);
            const auto patches = tile_and_filter(slide, mask, tile, bounds, slide_id, magnification);
            const auto m = write_corpus(patches, out_dir, {0.0, 0.0}, bounds);
            std::cout << "kept " << patches.size() << " of " << (mask.rows() / tile) * (mask.cols() / tile)
                      << " tiles -> " << m.manifest_path().string() << '\n';
        } else if (data_synth->parsed()) {
            const auto m = synth_corpus(n, seed, out_dir, size);
            const auto counts = m.counts();
            std::cout << "wrote " << m.entries.size() << " patches (train " << counts.at(Split::train) << ", val "
                      << counts.at(Split::val) << ", test " << counts.at(Split::test) << ") -> "
                      << m.manifest_path().string() << '\n';
        } else if (data_validate->parsed()) {
            const auto report = validate_manifest(load_manifest(data_path));
            for (const auto& f : report.failures) std::cout << "FAIL " << f << '\n';
            std::cout << report.checked << " entries checked, " << report.failures.size() << " failures\n";
            return report.ok() ? 0 : 1;
        } else if (model_init->parsed()) {
            auto cfg = ModelConfig::toy(channels, input, decoder_variant_from_string(decoder));
            cfg.init_seed = init_seed;
            cfg.decoder.global_attention = !no_global;
            SamModel(cfg).save(out_dir);
            std::cout << "wrote " << out_dir << '\n';
        } else if (train->parsed()) {
            TrainConfig cfg;
            if (!config_path.empty()) {
                std::ifstream is(config_path);
                if (!is) throw ArgumentError("cannot open " + config_path);
                cfg = TrainConfig::from_json(nlohmann::json::parse(is));
            }
            if (epochs > 0) {
                cfg.total_epochs = epochs;
                std::erase_if(cfg.lr_drop_epochs, [&](int e) { return e >= epochs; });
            }
            SamModel model = init_path.empty()
                                 ? SamModel(ModelConfig::toy(channels, input, decoder_variant_from_string(decoder)))
                                 : SamModel::load(init_path);
            const auto manifest = load_manifest(data_path);
            std::vector<TrainSample> samples;
            for (const auto& p : load_split(manifest, Split::train))
                samples.push_back(make_train_sample(p, model.config()));
            std::filesystem::create_directories(out_dir);
            std::ofstream log(std::filesystem::path(out_dir) / "train_log.jsonl");
            std::ofstream(std::filesystem::path(out_dir) / "train_config.json") << cfg.to_json().dump(2) << '\n';
            Trainer trainer(model, FreezePolicy{freeze_scenario_from_string(scenario)}, cfg);
            FitOptions opts;
            opts.log = &log;
            opts.checkpoint_dir = out_dir;
            opts.on_epoch = [](int epoch, double loss) {
                std::cout << "epoch " << epoch << " loss " << loss << std::endl;
            };
            const auto result = trainer.fit(samples, opts);
            std::cout << result.steps << " steps; checkpoints:";
            for (const auto& c : result.checkpoints) std::cout << ' ' << c.string();
            std::cout << '\n';
        } else if (serve->parsed()) {
            auto registry = std::make_shared<ModelRegistry>();
            for (const auto& spec : model_specs) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos) throw ArgumentError("--model expects id=<checkpoint|adapter:name>");
                registry->add(spec.substr(0, eq), load_segmenter(spec.substr(eq + 1)), spec.substr(eq + 1));
            }
            PatchLookup lookup;
            if (!data_path.empty()) lookup = manifest_lookup(load_manifest(data_path));
            auto store = std::make_shared<SessionStore>(db_path);
            SessionManager sessions(registry, lookup, store);
            const auto restored = sessions.restore();
            server_opts.static_dir = static_dir;
            HttpServer server(sessions, *registry, server_opts);
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "restored " << restored << " sessions; listening on " << server_opts.host << ":"
                      << server_opts.port << std::endl;
            server.run();
            g_server = nullptr;
        } else if (study->parsed()) {
            if (epochs > 0) {
                study_cfg.train.total_epochs = epochs;
                std::erase_if(study_cfg.train.lr_drop_epochs, [&](int e) { return e >= epochs; });
            }
            study_cfg.out_dir = out_dir;
            const auto result = run_desk_study(study_cfg, &std::cout);
            std::cout << render_table(result.finetuned, &result.baseline);
            std::cout << "decode-time spread across ordinals: " << result.timing_spread() << '\n';
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 2;
    }
    return 0;
}
