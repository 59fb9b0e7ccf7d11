#include "sgdfuse/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

#include "sgdfuse/dataset.hpp"
#include "sgdfuse/errors.hpp"
#include "sgdfuse/metrics.hpp"
#include "sgdfuse/png_io.hpp"
#include "sgdfuse/sha256.hpp"
#include "sgdfuse/trainer.hpp"

namespace sgdfuse::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

RunConfig load_cfg(const std::string& config_path, std::vector<std::string> overrides,
                   const std::string& workdir) {
    for (std::string& ov : overrides)
        if (ov.find('.') == std::string::npos || ov.find('.') > ov.find('='))
            ov = "run." + ov; // bare keys (seed=7) address the [run] table
    RunConfig cfg = load_config(config_path, overrides);
    if (!workdir.empty()) cfg.workdir = workdir;
    return cfg;
}

void write_manifest(const fs::path& path, json manifest, double wall_s) {
    manifest["wall_time_s"] = wall_s;
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    out << manifest.dump(2) << "\n";
}

json manifest_base(const char* subcommand, const RunConfig& cfg) {
    json j;
    j["subcommand"] = subcommand;
    j["config_digest"] = config_digest(cfg);
    j["seed"] = cfg.seed;
    return j;
}

int run_train(const char* name, int stage, const std::string& config_path,
              const std::vector<std::string>& overrides, const std::string& workdir,
              std::string stage1_ckpt, const std::string& resume) {
    Timer timer;
    RunConfig cfg = load_cfg(config_path, overrides, workdir);
    if (stage == 2 && stage1_ckpt.empty())
        stage1_ckpt = checkpoint_path(cfg, 1, "best").string();
    TrainResult res = (stage == 1)
                          ? train_stage1(cfg, std::cout, resume)
                          : train_stage2(cfg, stage1_ckpt, std::cout, resume);
    json j = manifest_base(name, cfg);
    j["checkpoints"] = {{"best", {{"path", res.best_path.string()},
                                  {"sha256", sha256_file_hex(res.best_path)}}},
                        {"last", {{"path", res.last_path.string()},
                                  {"sha256", sha256_file_hex(res.last_path)}}}};
    if (!res.loss_history.empty()) {
        j["steps"] = res.loss_history.size();
        j["first_loss"] = res.loss_history.front();
        j["final_loss"] = res.loss_history.back();
    }
    write_manifest(res.last_path.parent_path() / (std::string(name) + "-manifest.json"), j,
                   timer.seconds());
    return 0;
}

} // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"SGDFuse: two-stage infrared/visible image fusion"};
    app.require_subcommand(1);

    std::string config_path, workdir, resume, stage1_ckpt, stage2_ckpt;
    std::vector<std::string> overrides;
    bool verbose = false;

    auto add_common = [&](CLI::App* sub, bool needs_config = true) {
        auto* opt = sub->add_option("--config", config_path, "TOML run configuration");
        if (needs_config) opt->required();
        sub->add_option("--override", overrides, "dotted-key=value config override");
        sub->add_option("--workdir", workdir, "base directory for relative paths");
        sub->add_flag("-v,--verbose", verbose, "print the resolved config digest");
    };

    auto* t1 = app.add_subcommand("train-stage1", "train the Stage-I fusion network");
    add_common(t1);
    t1->add_option("--resume", resume, "checkpoint to resume from");

    auto* t2 = app.add_subcommand("train-stage2", "train the Stage-II diffusion refiner");
    add_common(t2);
    t2->add_option("--stage1-ckpt", stage1_ckpt, "frozen Stage-I checkpoint");
    t2->add_option("--resume", resume, "checkpoint to resume from");

    auto* fu = app.add_subcommand("fuse", "fuse a dataset or a single pair");
    add_common(fu);
    std::string fuse_out = "fused", one_ir, one_vis, one_mir, one_mvis;
    fu->add_option("--stage1-ckpt", stage1_ckpt, "Stage-I checkpoint");
    fu->add_option("--stage2-ckpt", stage2_ckpt, "Stage-II checkpoint");
    fu->add_option("--out", fuse_out, "output directory for fused PNGs");
    fu->add_option("--ir", one_ir, "single-pair mode: infrared PNG");
    fu->add_option("--vis", one_vis, "single-pair mode: visible PNG");
    fu->add_option("--mask-ir", one_mir, "optional IR mask PNG (single-pair mode)");
    fu->add_option("--mask-vis", one_mvis, "optional VIS mask PNG (single-pair mode)");

    auto* ev = app.add_subcommand("eval", "compute the seven fusion metrics");
    std::string eval_data, eval_fused, eval_out = "report.csv";
    int eval_jobs = 1;
    ev->add_option("--data", eval_data, "dataset root (ir/, vis/)")->required();
    ev->add_option("--fused", eval_fused, "directory with fused <id>.png files")->required();
    ev->add_option("--out", eval_out, "CSV report path");
    ev->add_option("--jobs", eval_jobs, "parallel metric workers");
    ev->add_option("--workdir", workdir, "base directory for relative paths");

    auto* mk = app.add_subcommand("masks", "generate masks for a dataset");
    std::string masks_data, masks_source = "synthetic", masks_out, masks_endpoint;
    double masks_qir = 0.85, masks_qvis = 0.85, masks_fraction = 0.25, masks_timeout = 5.0;
    std::uint64_t masks_seed = 0;
    mk->add_option("--data", masks_data, "dataset root")->required();
    mk->add_option("--source", masks_source, "synthetic | random_patch | remote");
    mk->add_option("--q-ir", masks_qir, "IR intensity quantile");
    mk->add_option("--q-vis", masks_qvis, "VIS gradient quantile");
    mk->add_option("--fraction", masks_fraction, "random patch area fraction");
    mk->add_option("--seed", masks_seed, "random patch seed");
    mk->add_option("--endpoint", masks_endpoint, "remote mask service endpoint");
    mk->add_option("--timeout", masks_timeout, "remote timeout seconds");
    mk->add_option("--out-root", masks_out, "write masks under this root (default --data)");
    mk->add_option("--workdir", workdir, "base directory for relative paths");

    auto* in = app.add_subcommand("info", "print parameter counts and config digest");
    add_common(in);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (verbose && !config_path.empty()) {
            RunConfig cfg = load_cfg(config_path, overrides, workdir);
            std::cerr << "config digest " << config_digest(cfg) << ", seed " << cfg.seed << "\n";
        }
        if (t1->parsed())
            return run_train("train-stage1", 1, config_path, overrides, workdir, "", resume);
        if (t2->parsed())
            return run_train("train-stage2", 2, config_path, overrides, workdir, stage1_ckpt,
                             resume);

        if (fu->parsed()) {
            Timer timer;
            RunConfig cfg = load_cfg(config_path, overrides, workdir);
            if (stage1_ckpt.empty()) stage1_ckpt = checkpoint_path(cfg, 1, "best").string();
            if (stage2_ckpt.empty()) stage2_ckpt = checkpoint_path(cfg, 2, "best").string();
            fs::path out_dir = fs::path(cfg.workdir) / fuse_out;
            fs::create_directories(out_dir);
            json outputs = json::object();

            Stage1Bundle s1;
            if (!cfg.ablation.no_stage1) {
                s1 = build_stage1(cfg);
                Checkpoint ck = load_checkpoint(stage1_ckpt);
                if (ck.stage != 1) throw CheckpointError("expected a stage-1 checkpoint");
                restore_params(ck, s1.ps);
            }
            Stage2Bundle s2;
            if (!cfg.ablation.no_stage2) {
                s2 = build_stage2(cfg);
                Checkpoint ck = load_checkpoint(stage2_ckpt);
                if (ck.stage != 2) throw CheckpointError("expected a stage-2 checkpoint");
                restore_params(ck, s2.ps);
            }
            auto run_one = [&](const ImagePair& pair, const MaskPair* masks) {
                FusedImage fused = fuse(cfg, cfg.ablation.no_stage1 ? nullptr : &s1,
                                        cfg.ablation.no_stage2 ? nullptr : &s2, pair, masks);
                fs::path out_path = out_dir / (pair.id + ".png");
                write_png(out_path, Image(fused.data, ValueRange::Unit));
                outputs[pair.id] = sha256_file_hex(out_path);
            };

            if (!one_ir.empty() || !one_vis.empty()) {
                if (one_ir.empty() || one_vis.empty())
                    throw ConfigError("single-pair mode needs both --ir and --vis");
                Image ir = read_png(one_ir);
                Image vis = read_png(one_vis);
                ImagePair pair(std::move(ir), std::move(vis),
                               fs::path(one_ir).stem().string());
                std::optional<MaskPair> masks;
                if (!one_mir.empty() && !one_mvis.empty())
                    masks.emplace(read_png(one_mir), read_png(one_mvis), MaskProvenance::File);
                run_one(pair, masks ? &*masks : nullptr);
            } else {
                DatasetIndex index = scan_dataset(fs::path(cfg.workdir) / cfg.data_root,
                                                  cfg.masks.kind ==
                                                      MaskSourceConfig::Kind::File);
                for (std::size_t i = 0; i < index.size(); ++i) {
                    ImagePair pair = load_pair(index.at(i));
                    if (cfg.masks.kind == MaskSourceConfig::Kind::File &&
                        !cfg.ablation.no_stage2 && !cfg.ablation.no_sam) {
                        MaskPair masks = masks_from_files(index.at(i), pair);
                        run_one(pair, &masks);
                    } else {
                        run_one(pair, nullptr);
                    }
                }
            }
            json j = manifest_base("fuse", cfg);
            j["outputs"] = outputs;
            j["checkpoints"] = {{"stage1", cfg.ablation.no_stage1 ? "" : sha256_file_hex(stage1_ckpt)},
                                {"stage2", cfg.ablation.no_stage2 ? "" : sha256_file_hex(stage2_ckpt)}};
            write_manifest(out_dir / "fuse-manifest.json", j, timer.seconds());
            return 0;
        }

        if (ev->parsed()) {
            Timer timer;
            fs::path base = workdir.empty() ? fs::path(".") : fs::path(workdir);
            DatasetIndex index = scan_dataset(base / eval_data);
            auto warn = [](const std::string& m) { std::cerr << "warning: " << m << "\n"; };
            metrics::MetricReport report =
                metrics::evaluate_all(index, base / eval_fused, eval_jobs, warn);
            metrics::write_csv(report, base / eval_out);
            json j;
            j["subcommand"] = "eval";
            j["report"] = (base / eval_out).string();
            j["report_sha256"] = sha256_file_hex(base / eval_out);
            j["evaluated"] = report.rows.size();
            j["missing"] = report.missing;
            write_manifest(base / (eval_out + ".manifest.json"), j, timer.seconds());
            if (!report.missing.empty()) {
                std::cerr << "missing fused images for " << report.missing.size() << " ids\n";
                return 2;
            }
            std::cout << "evaluated " << report.rows.size() << " images -> " << eval_out << "\n";
            return 0;
        }

        if (mk->parsed()) {
            Timer timer;
            fs::path base = workdir.empty() ? fs::path(".") : fs::path(workdir);
            DatasetIndex index = scan_dataset(base / masks_data);
            MaskSourceConfig mcfg;
            mcfg.kind = MaskSourceConfig::parse_kind(masks_source);
            mcfg.q_ir = masks_qir;
            mcfg.q_vis = masks_qvis;
            mcfg.fraction = masks_fraction;
            mcfg.seed = masks_seed;
            mcfg.endpoint = masks_endpoint;
            mcfg.timeout_s = masks_timeout;
            fs::path out_root = masks_out.empty() ? (base / masks_data) : (base / masks_out);
            fs::create_directories(out_root / "masks_ir");
            fs::create_directories(out_root / "masks_vis");
            auto warn = [](const std::string& m) { std::cerr << "warning: " << m << "\n"; };
            int count = 0;
            for (std::size_t i = 0; i < index.size(); ++i) {
                ImagePair pair = load_pair(index.at(i));
                MaskPair masks =
                    provide_masks(mcfg, index.at(i), pair, hash_str64(pair.id), warn);
                write_png(out_root / "masks_ir" / (pair.id + ".png"), masks.m_ir);
                write_png(out_root / "masks_vis" / (pair.id + ".png"), masks.m_vis);
                ++count;
            }
            json j;
            j["subcommand"] = "masks";
            j["source"] = masks_source;
            j["count"] = count;
            write_manifest(out_root / "masks-manifest.json", j, timer.seconds());
            std::cout << "wrote " << count << " mask pairs under " << out_root << "\n";
            return 0;
        }

        if (in->parsed()) {
            RunConfig cfg = load_cfg(config_path, overrides, workdir);
            Stage1Bundle s1 = build_stage1(cfg);
            Stage2Bundle s2 = build_stage2(cfg);
            std::cout << "config digest: " << config_digest(cfg) << "\n";
            std::cout << "stage1 parameters: " << s1.ps.scalar_count() << "\n";
            std::cout << "stage2 parameters: " << s2.ps.scalar_count() << " (unet+hfah)\n";
            std::cout << "spatial multiple: " << cfg.spatial_multiple() << "\n";
            std::cout << "feature timesteps:";
            for (int t : cfg.resolved_feature_timesteps()) std::cout << " " << t;
            std::cout << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

} // namespace sgdfuse::cli
