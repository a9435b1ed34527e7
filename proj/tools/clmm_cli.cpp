// clmm: synthetic data, contrastive pretraining, collaborative fine-tuning,
// evaluation and checkpoint inspection.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "clmm/config.hpp"
#include "clmm/log.hpp"
#include "clmm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace clmm;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;
    bool print_config = false;

    RunConfig load() const {
        auto sets = overrides;
        if (seed >= 0) sets.push_back("seed=" + std::to_string(seed));
        return load_run_config(config_path, sets);
    }
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Seed (overrides the config)");
    cmd->add_option("--set", c.overrides, "Override a config value, e.g. pretrain.epochs=3");
    cmd->add_flag("--print-config", c.print_config, "Print the effective configuration and exit");
}

fs::path manifest_path(const std::string& data) {
    fs::path p(data);
    return fs::is_directory(p) ? p / "manifest.json" : p;
}

// Windows tagged with `split`; untagged datasets contribute every window.
std::vector<MultimodalWindow> windows_in(const Dataset& ds, const std::string& split) {
    std::vector<MultimodalWindow> out;
    bool tagged = false;
    for (const auto& w : ds.windows) tagged = tagged || !w.split.empty();
    for (const auto& w : ds.windows)
        if (!tagged || w.split == split) out.push_back(w);
    return out;
}

std::vector<MultimodalWindow> labeled_only(std::vector<MultimodalWindow> ws) {
    std::erase_if(ws, [](const MultimodalWindow& w) { return !w.label; });
    return ws;
}

std::ofstream open_log(const fs::path& path, const char* header) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << header << '\n';
    out << std::setprecision(17);
    return out;
}

void require_classes(const Checkpoint& ckpt, const Dataset& ds) {
    const std::size_t k = checkpoint_classes(ckpt);
    if (k != ds.manifest.classes.size()) {
        throw ConfigError("class mismatch: checkpoint has " + std::to_string(k) + " classes, dataset has " +
                          std::to_string(ds.manifest.classes.size()));
    }
}

void need(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

// ------------------------------------------------------------------ commands

int cmd_synth(const RunConfig& cfg, const fs::path& out) {
    Rng rng = Rng::derive(cfg.seed, 7);
    auto data = synth_generate(cfg.synth, rng);
    auto parts = split(data.windows, cfg.split, rng);
    std::vector<MultimodalWindow> all;
    for (auto* part : {&parts.unlabeled, &parts.train, &parts.test}) {
        const char* tag = part == &parts.unlabeled ? "unlabeled" : part == &parts.train ? "train" : "test";
        for (auto& w : *part) {
            w.split = tag;
            all.push_back(std::move(w));
        }
    }
    save_dataset(out, data.manifest, all);
    std::cout << "wrote " << all.size() << " windows (" << parts.unlabeled.size() << " unlabeled, "
              << parts.train.size() << " train, " << parts.test.size() << " test) to " << out.string() << '\n';
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& data, const fs::path& out, fs::path loss_log) {
    const auto ds = load_dataset(manifest_path(data));
    auto unlabeled = windows_in(ds, "unlabeled");
    std::vector<MultimodalWindow> fit;
    for (const auto& w : ds.windows)
        if (w.split != "test") fit.push_back(w);
    const auto norm = ChannelNormalizer::fit(fit);
    norm.apply(unlabeled);

    const auto enc = cfg.encoder.bind(ds.manifest.modality_specs());
    Rng init_rng = Rng::derive(cfg.seed, stream::init);
    auto model = PretrainModel::init(enc, init_rng);
    if (loss_log.empty()) loss_log = out.string() + ".loss.csv";
    auto csv = open_log(loss_log, "epoch,loss");
    pretrain(model, unlabeled, cfg.pretrain, cfg.augmentation, cfg.seed, [&](std::size_t epoch, double loss) {
        csv << epoch + 1 << ',' << loss << '\n';
    });
    save_checkpoint(out, stage1_checkpoint(model, norm));
    std::cout << "stage-1 checkpoint " << out.string() << " (" << unlabeled.size() << " windows, "
              << cfg.pretrain.epochs << " epochs)\n";
    return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& data, const std::string& stage1, const std::string& resume,
                 const fs::path& out, fs::path loss_log, std::size_t max_steps) {
    const auto ds = load_dataset(manifest_path(data));
    const auto enc = cfg.encoder.bind(ds.manifest.modality_specs());
    DualBranchConfig head = cfg.finetune.head;
    head.num_classes = ds.manifest.classes.size();

    ChannelNormalizer norm;
    CollabState state;
    if (!resume.empty()) {
        const auto ckpt = load_checkpoint(resume);
        if (ckpt.stage != 2) throw IntegrityError("--resume expects a stage-2 checkpoint, got stage " + std::to_string(ckpt.stage));
        require_classes(ckpt, ds);
        Rng rng = Rng::derive(cfg.seed, stream::init + 1);
        state = CollabState::from(FinetuneModel::init(enc, head, rng), cfg.finetune.collab());
        restore_stage2(ckpt, state);
        norm = get_normalizer(ckpt, enc.num_modalities());
    } else {
        if (stage1.empty()) throw ConfigError("finetune needs --checkpoint (stage 1) or --resume (stage 2)");
        const auto ckpt = load_checkpoint(stage1);
        Rng init_rng = Rng::derive(cfg.seed, stream::init);
        auto pre = PretrainModel::init(enc, init_rng);
        restore_stage1(ckpt, pre);
        norm = get_normalizer(ckpt, enc.num_modalities());
        auto unlabeled = windows_in(ds, "unlabeled");
        norm.apply(unlabeled);
        Rng head_rng = Rng::derive(cfg.seed, stream::init + 1);
        auto model = finetune_model_from(pre, head, head_rng);
        model.qom = estimate_qom(pre, unlabeled);
        state = CollabState::from(model, cfg.finetune.collab());
    }

    auto train = labeled_only(windows_in(ds, "train"));
    if (train.empty()) throw LoadError("dataset has no labeled training windows");
    norm.apply(train);
    std::size_t total = cfg.finetune.epochs * steps_per_epoch(train.size(), cfg.finetune.batch_size);
    if (max_steps > 0) total = std::min(total, max_steps);

    if (loss_log.empty()) loss_log = out.string() + ".loss.csv";
    auto csv = open_log(loss_log, "step,ce,distill,total,alpha");
    finetune(state, train, cfg.finetune, cfg.augmentation, cfg.seed, total, [&](std::size_t t, const StepReport& r) {
        csv << t + 1 << ',' << r.ce << ',' << r.distill << ',' << r.total << ',' << r.alpha << '\n';
    });
    save_checkpoint(out, stage2_checkpoint(state, norm));
    std::cout << "stage-2 checkpoint " << out.string() << " (step " << state.step << ", " << train.size()
              << " labeled windows)\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& data, const std::string& checkpoint, const std::string& split_name,
             bool weighted, bool json) {
    const auto ds = load_dataset(manifest_path(data));
    const auto ckpt = load_checkpoint(checkpoint);
    if (ckpt.stage != 2) throw IntegrityError("eval expects a stage-2 checkpoint, got stage " + std::to_string(ckpt.stage));
    require_classes(ckpt, ds);
    const auto enc = cfg.encoder.bind(ds.manifest.modality_specs());
    DualBranchConfig head = cfg.finetune.head;
    head.num_classes = ds.manifest.classes.size();
    Rng rng(0);
    auto model = FinetuneModel::init(enc, head, rng);
    auto params = named_parameters(model);
    restore_params(ckpt, params, "ema/");
    const auto& q = ckpt.get("state/qom");
    model.qom.assign(q.values().begin(), q.values().end());

    auto windows = split_name == "all" ? ds.windows : windows_in(ds, split_name);
    windows = labeled_only(std::move(windows));
    if (windows.empty()) throw LoadError("no labeled windows in split '" + split_name + "'");
    get_normalizer(ckpt, enc.num_modalities()).apply(windows);
    const auto report = make_report(evaluate(model, windows), weighted);
    if (json) {
        std::cout << report_json(report, ds.manifest.classes).dump(2) << '\n';
    } else {
        std::cout << report_table(report, ds.manifest.classes);
    }
    return 0;
}

int cmd_inspect(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto ckpt = decode_checkpoint(bytes);
    std::uint32_t crc = 0;
    for (int i = 3; i >= 0; --i) crc = (crc << 8) | bytes[bytes.size() - 4 + static_cast<std::size_t>(i)];

    // Stage-2 files hold θ, θ_EMA and optimizer state; one model's worth is counted.
    const std::string counted = ckpt.stage == 2 ? "aux/" : "";
    std::size_t params = 0;
    std::ostringstream rows;
    for (const auto& [name, t] : ckpt.tensors) {
        rows << "  " << std::left << std::setw(44) << name << ' ' << std::setw(16) << shape_str(t.shape()) << ' '
             << t.numel() << '\n';
        const bool bookkeeping = name.starts_with("norm/") || name.starts_with("state/");
        if (!bookkeeping && name.starts_with(counted)) params += t.numel();
    }
    char crc_hex[16];
    std::snprintf(crc_hex, sizeof crc_hex, "%08x", crc);
    std::cout << "file: " << path << '\n'
              << "stage: " << ckpt.stage << '\n'
              << "version: " << kCheckpointVersion << '\n'
              << "crc: ok (" << crc_hex << ")\n"
              << "tensors: " << ckpt.tensors.size() << '\n'
              << "parameters: " << params << '\n'
              << rows.str();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrastive multimodal pretraining and collaborative fine-tuning for activity recognition"};
    app.require_subcommand(1);

    Common synth_c, pre_c, ft_c, eval_c;
    std::string out, data, checkpoint, resume, loss_log, split_name = "test";
    bool weighted = false, json = false;
    std::size_t max_steps = 0;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic multimodal dataset");
    add_common(synth, synth_c);
    synth->add_option("--out", out, "Output directory");

    auto* pre = app.add_subcommand("pretrain", "Stage 1: contrastive pretraining on unlabeled windows");
    add_common(pre, pre_c);
    pre->add_option("--data", data, "Dataset directory or manifest");
    pre->add_option("--out", out, "Stage-1 checkpoint path");
    pre->add_option("--log", loss_log, "Loss CSV (default <out>.loss.csv)");

    auto* ft = app.add_subcommand("finetune", "Stage 2: collaborative fine-tuning on labeled windows");
    add_common(ft, ft_c);
    ft->add_option("--data", data, "Dataset directory or manifest");
    ft->add_option("--checkpoint", checkpoint, "Stage-1 checkpoint");
    ft->add_option("--resume", resume, "Stage-2 checkpoint to continue from");
    ft->add_option("--out", out, "Stage-2 checkpoint path");
    ft->add_option("--log", loss_log, "Loss CSV (default <out>.loss.csv)");
    ft->add_option("--max-steps", max_steps, "Stop once this many total steps have run");

    auto* ev = app.add_subcommand("eval", "Evaluate a stage-2 checkpoint");
    add_common(ev, eval_c);
    ev->add_option("--data", data, "Dataset directory or manifest");
    ev->add_option("--checkpoint", checkpoint, "Stage-2 checkpoint");
    ev->add_option("--split", split_name, "test, train, unlabeled or all");
    ev->add_flag("--weighted-f1", weighted, "Also report support-weighted F1");
    ev->add_flag("--json", json, "Print the report as JSON");

    auto* inspect = app.add_subcommand("inspect", "List the contents of a checkpoint");
    inspect->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << '\n';
        return 2;
    }

    try {
        auto run = [&](const Common& c, auto&& body) {
            const RunConfig cfg = c.load();
            if (c.print_config) {
                std::cout << to_json(cfg).dump(2) << '\n';
                return 0;
            }
            return body(cfg);
        };
        if (*synth) {
            return run(synth_c, [&](const RunConfig& cfg) {
                need(out, "--out");
                return cmd_synth(cfg, out);
            });
        }
        if (*pre) {
            return run(pre_c, [&](const RunConfig& cfg) {
                need(data, "--data");
                need(out, "--out");
                return cmd_pretrain(cfg, data, out, loss_log);
            });
        }
        if (*ft) {
            return run(ft_c, [&](const RunConfig& cfg) {
                need(data, "--data");
                need(out, "--out");
                return cmd_finetune(cfg, data, checkpoint, resume, out, loss_log, max_steps);
            });
        }
        if (*ev) {
            return run(eval_c, [&](const RunConfig& cfg) {
                need(data, "--data");
                need(checkpoint, "--checkpoint");
                return cmd_eval(cfg, data, checkpoint, split_name, weighted, json);
            });
        }
        if (*inspect) return cmd_inspect(checkpoint);
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
