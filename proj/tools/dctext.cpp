#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dctext/ablate.hpp"
#include "dctext/config.hpp"
#include "dctext/io.hpp"
#include "dctext/pipeline.hpp"
#include "dctext/synth.hpp"

namespace fs = std::filesystem;
using namespace dctext;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

json load_config_json(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("JSON parse failure: ") + e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    return j;
}

json trace_to_json(const Trace& trace) {
    json steps = json::array();
    for (const auto& s : trace.steps)
        steps.push_back({{"k", s.k},
                         {"stage", to_string(s.stage)},
                         {"t_from", s.t_from},
                         {"t_to", s.t_to},
                         {"mask", s.mask},
                         {"flops", s.flops}});
    return steps;
}

json make_manifest(const RunConfig& cfg, const RunResult& res) {
    json manifest;
    manifest["seed"] = cfg.seed;
    manifest["grid"] = {{"h", cfg.grid_h}, {"w", cfg.grid_w}, {"channels", cfg.channels}};
    manifest["schedule"] = {{"T", cfg.T},           {"T_init", cfg.T_init},
                            {"T_focus", cfg.T_focus}, {"T_expn", cfg.T_expn},
                            {"alpha", cfg.alpha},     {"guidance", cfg.guidance}};
    manifest["model"] = cfg.model_checkpoint;
    manifest["n_regions"] = cfg.textual.size();
    json masks = json::array();
    for (const auto& s : res.trace.steps) masks.push_back(s.mask);
    manifest["mask_per_step"] = masks;
    json stages = json::array();
    for (int len : res.trace.stage_lengths()) stages.push_back(len);
    manifest["stage_lengths"] = stages;
    manifest["flops_total"] = res.trace.total_flops();
    manifest["outputs"] = {{"image", "final.pgm"}, {"latent", "final.dclat"}};
    return manifest;
}

int run_command(const std::string& config_path, const std::vector<std::string>& overrides,
                bool dump_masks, bool write_trace) {
    const json j = load_config_json(config_path, overrides);
    const RunConfig cfg = parse_config(j);

    const auto t0 = std::chrono::steady_clock::now();
    const ToyDenoiser model = model_from_config(cfg);
    const PipelineInput input = config_to_pipeline_input(cfg);
    const RunResult res = run_dctext(model, input);
    const auto t1 = std::chrono::steady_clock::now();

    fs::create_directories(cfg.output_dir);
    const fs::path dir(cfg.output_dir);
    save_pgm(res.final, (dir / "final.pgm").string());
    save_latent(res.final, (dir / "final.dclat").string());
    for (const auto& [stage, z] : res.snapshots)
        save_latent(z, (dir / ("snapshot_" + stage + ".dclat")).string());

    if (dump_masks) {
        const MembershipVectors mv = membership_vectors(res.layout);
        save_mask(isolation_mask(mv), (dir / "mask_isolation.dcmask").string());
        save_mask(focus_mask(mv, input.opts.drop), (dir / "mask_focus.dcmask").string());
        save_mask(expansion_mask(mv), (dir / "mask_expansion.dcmask").string());
    }
    if (write_trace) {
        std::ofstream tf(dir / "trace.json");
        tf << trace_to_json(res.trace).dump(2) << '\n';
    }

    // Wall time goes to stdout only: the manifest file stays bit-reproducible
    // for identical seed+config.
    std::ofstream mf(dir / "manifest.json");
    mf << make_manifest(cfg, res).dump(2) << '\n';
    if (!mf) throw Error("failed writing manifest");

    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    std::cout << "run complete: " << cfg.output_dir << "/final.pgm"
              << "  steps=" << res.trace.steps.size() << "  flops=" << res.trace.total_flops()
              << "  wall_ms=" << ms << '\n';
    return 0;
}

int ablate_command(const std::string& config_path, const std::vector<std::string>& overrides,
                   const std::string& sweep_name, const std::vector<int>& values,
                   const std::string& out_path) {
    const json j = load_config_json(config_path, overrides);
    const RunConfig cfg = parse_config(j);
    const SweepKind kind = parse_sweep(sweep_name);
    const ToyDenoiser model = model_from_config(cfg);
    const std::vector<AblateRow> rows = ablate(model, cfg, kind, values);
    const std::string csv = ablate_csv(rows);
    std::cout << csv;
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        f << csv;
        if (!f) throw Error("failed writing " + out_path);
    }
    return 0;
}

int train_command(const std::string& out_path, int samples, int max_regions, int steps, double lr,
                  uint64_t seed, int grid, int batch, double crop_prob,
                  const std::string& curve_path, const std::string& dataset_path) {
    DenoiserConfig mc;
    mc.grid_h = mc.grid_w = grid;
    mc.vocab = std::max(mc.vocab, synth_vocab(grid, grid));
    ToyDenoiser model = ToyDenoiser::random_init(mc, seed);
    const std::vector<Sample> ds = gen_dataset(samples, max_regions, grid, grid, seed + 1);
    if (!dataset_path.empty()) save_dataset(ds, dataset_path);

    TrainOptions opt;
    opt.batch = batch;
    opt.crop_prob = crop_prob;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult tr = train_toy(model, ds, steps, lr, seed + 2, opt);
    const auto t1 = std::chrono::steady_clock::now();

    save_checkpoint(model, out_path);
    if (!curve_path.empty()) {
        std::ofstream f(curve_path);
        f << "step,loss\n";
        for (size_t i = 0; i < tr.loss_curve.size(); ++i) f << i + 1 << ',' << tr.loss_curve[i] << '\n';
    }
    std::cout << "trained " << steps << " steps on " << samples << " samples: first-window loss "
              << tr.window_mean(true) << " -> last-window loss " << tr.window_mean(false)
              << "  wall_s="
              << std::chrono::duration<double>(t1 - t0).count() << "\n"
              << "checkpoint: " << out_path << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"region-scheduled attention-mask denoising pipeline"};
    app.require_subcommand(1);

    std::string config_path, sweep_name = "drop", ablate_out, train_out = "model.ckpt";
    std::string curve_path, dataset_path;
    std::vector<std::string> overrides;
    std::vector<int> sweep_values;
    bool dump_masks = false, write_trace = false;
    int samples = 512, max_regions = 3, steps = 2000, grid = 12, batch = 8;
    double lr = 3e-3, crop_prob = 0.7;
    uint64_t seed = 1;

    CLI::App* run = app.add_subcommand("run", "execute the pipeline for a config");
    run->add_option("--config", config_path, "config JSON path")->required();
    run->add_option("--override", overrides, "dotted-path override KEY=VALUE");
    run->add_flag("--dump-masks", dump_masks, "write mask bitmap dumps");
    run->add_flag("--trace", write_trace, "write per-step trace JSON");

    CLI::App* abl = app.add_subcommand("ablate", "run an ablation sweep for a config");
    abl->add_option("--config", config_path, "config JSON path")->required();
    abl->add_option("--override", overrides, "dotted-path override KEY=VALUE");
    abl->add_option("--sweep", sweep_name, "drop | T_init | T_focus | T_expn");
    abl->add_option("--values", sweep_values, "explicit sweep grid");
    abl->add_option("--out", ablate_out, "also write the CSV table here");

    CLI::App* trn = app.add_subcommand("train", "train a toy checkpoint on the glyph task");
    trn->add_option("--out", train_out, "checkpoint output path");
    trn->add_option("--samples", samples, "dataset size");
    trn->add_option("--max-regions", max_regions, "max regions per sample");
    trn->add_option("--steps", steps, "training steps");
    trn->add_option("--lr", lr, "Adam learning rate");
    trn->add_option("--seed", seed, "seed");
    trn->add_option("--grid", grid, "square grid side");
    trn->add_option("--batch", batch, "batch size");
    trn->add_option("--crop-prob", crop_prob, "fraction of views drawn as region crops");
    trn->add_option("--loss-curve", curve_path, "write per-step loss CSV");
    trn->add_option("--dataset-out", dataset_path, "also dump the training dataset");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_command(config_path, overrides, dump_masks, write_trace);
        if (abl->parsed())
            return ablate_command(config_path, overrides, sweep_name, sweep_values, ablate_out);
        if (trn->parsed())
            return train_command(train_out, samples, max_regions, steps, lr, seed, grid, batch,
                                 crop_prob, curve_path, dataset_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DegenerateBox& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const OverlappingRegions& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const InvalidArity& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const ScheduleOverflow& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const InfeasiblePacking& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const UnknownPartialMask& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const InvalidArgument& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
