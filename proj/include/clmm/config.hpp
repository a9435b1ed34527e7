#pragma once

// Run configuration: JSON with a strict schema. Unknown keys are rejected,
// overrides use dotted paths ("pretrain.epochs=3").

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "clmm/pipeline.hpp"

namespace clmm {

struct RunConfig {
    std::uint64_t seed = 1;
    ArchitectureConfig encoder;
    PretrainConfig pretrain;
    FinetuneConfig finetune;
    AugmentationConfig augmentation;
    SyntheticSpec synth;
    SplitConfig split;

    void validate() const {
        pretrain.validate();
        finetune.validate();
        if (finetune.head.gru_hidden == 0 || finetune.head.mlp_hidden == 0) {
            throw ConfigError("finetune.gru_hidden and finetune.mlp_hidden must be positive");
        }
        if (!(finetune.head.lambda_mix >= 0.0 && finetune.head.lambda_mix <= 1.0)) {
            throw ConfigError("finetune.lambda_mix must lie in [0,1]");
        }
        if (!(pretrain.learning_rate > 0.0) || !(finetune.learning_rate > 0.0)) {
            throw ConfigError("learning rates must be positive");
        }
        if (pretrain.momentum < 0.0 || pretrain.momentum >= 1.0 || finetune.momentum < 0.0 || finetune.momentum >= 1.0) {
            throw ConfigError("momentum must lie in [0,1)");
        }
        augmentation.validate();
        synth.validate();
        if (!(split.labeled_fraction > 0.0 && split.labeled_fraction < 1.0)) {
            throw ConfigError("split.labeled_fraction must lie in (0,1)");
        }
        if (split.test_fraction < 0.0 || split.labeled_fraction + split.test_fraction > 1.0) {
            throw ConfigError("split fractions must sum to at most 1");
        }
        if (encoder.cnn_channels.empty() || encoder.cnn_channels.back() != encoder.feature_dim) {
            throw ConfigError("encoder.cnn_channels must end with encoder.feature_dim");
        }
        if (encoder.heads == 0 || encoder.feature_dim % encoder.heads != 0) {
            throw ConfigError("encoder.feature_dim must be divisible by encoder.heads");
        }
        if (!(encoder.lambda_init > 0.0 && encoder.lambda_init < 1.0)) {
            throw ConfigError("encoder.lambda_init must lie in (0,1)");
        }
        if (encoder.kernel == 0 || encoder.stride == 0 || encoder.depth == 0 || encoder.proj_hidden == 0 ||
            encoder.proj_dim == 0) {
            throw ConfigError("encoder sizes must be positive");
        }
    }
};

namespace detail {

// Reads fields out of one JSON object and remembers which keys were used.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + "expected an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        used_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(where() + key + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
        }
    }

    void range(const char* key, double& lo, double& hi) {
        std::vector<double> r{lo, hi};
        read(key, r);
        if (r.size() != 2) throw ConfigError(where() + key + ": expected [lo, hi]");
        lo = r[0];
        hi = r[1];
    }

    void range(const char* key, std::size_t& lo, std::size_t& hi) {
        std::vector<std::size_t> r{lo, hi};
        read(key, r);
        if (r.size() != 2) throw ConfigError(where() + key + ": expected [lo, hi]");
        lo = r[0];
        hi = r[1];
    }

    Section child(const char* key) {
        used_.insert(key);
        static const nlohmann::json empty = nlohmann::json::object();
        return Section(j_.contains(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
    }

    void finish() const {
        for (const auto& [key, _] : j_.items()) {
            if (!used_.count(key)) throw ConfigError("unknown key '" + (path_.empty() ? key : path_ + "." + key) + "'");
        }
    }

private:
    std::string where() const { return path_.empty() ? "" : path_ + "."; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> used_;
};

} // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    const auto& e = c.encoder;
    const auto& p = c.pretrain;
    const auto& f = c.finetune;
    const auto& a = c.augmentation;
    const auto& s = c.synth;
    return {
        {"seed", c.seed},
        {"encoder",
         {{"cnn_channels", e.cnn_channels},
          {"kernel", e.kernel},
          {"stride", e.stride},
          {"feature_dim", e.feature_dim},
          {"heads", e.heads},
          {"lambda_init", e.lambda_init},
          {"depth", e.depth},
          {"proj_hidden", e.proj_hidden},
          {"proj_dim", e.proj_dim}}},
        {"pretrain",
         {{"learning_rate", p.learning_rate},
          {"momentum", p.momentum},
          {"batch_size", p.batch_size},
          {"epochs", p.epochs},
          {"views", p.fusion.views},
          {"weight_range", {p.fusion.weight_lo, p.fusion.weight_hi}},
          {"temperature", p.fusion.temperature},
          {"hard_ratio", p.fusion.hard_ratio},
          {"hard_weight", p.fusion.hard_weight}}},
        {"finetune",
         {{"learning_rate", f.learning_rate},
          {"momentum", f.momentum},
          {"batch_size", f.batch_size},
          {"epochs", f.epochs},
          {"ema_cap", f.ema_cap},
          {"distill_weight", f.distill_weight},
          {"collaborative", f.collaborative},
          {"lambda_mix", f.head.lambda_mix},
          {"gru_hidden", f.head.gru_hidden},
          {"mlp_hidden", f.head.mlp_hidden}}},
        {"augmentation",
         {{"method", to_string(a.method)},
          {"warp_knots", a.warp_knots},
          {"warp_range", {a.warp_lo, a.warp_hi}},
          {"crop_fraction", a.crop_fraction},
          {"shift_fraction", a.shift_fraction},
          {"scale_range", {a.scale_lo, a.scale_hi}},
          {"smooth_width", a.smooth_width},
          {"noise_std", a.noise_std}}},
        {"synth",
         {{"num_classes", s.num_classes},
          {"channels", s.channels},
          {"window_len", s.window_len},
          {"rate_hz", s.rate_hz},
          {"latent_dim", s.latent_dim},
          {"class_freqs", s.class_freqs},
          {"amplitude_jitter", s.amplitude_jitter},
          {"modality_lag", s.modality_lag},
          {"noise_std", s.noise_std},
          {"distractor_amplitude", s.distractor_amplitude},
          {"distractor_freq_range", {s.distractor_freq_lo, s.distractor_freq_hi}},
          {"identical_mixing", s.identical_mixing},
          {"samples_per_class", s.samples_per_class}}},
        {"split", {{"labeled_fraction", c.split.labeled_fraction}, {"test_fraction", c.split.test_fraction}}},
    };
}

// Strict parse on top of the defaults; missing keys keep their default.
inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig c;
    detail::Section root(j, "");
    root.read("seed", c.seed);
    {
        auto s = root.child("encoder");
        auto& e = c.encoder;
        s.read("cnn_channels", e.cnn_channels);
        s.read("kernel", e.kernel);
        s.read("stride", e.stride);
        s.read("feature_dim", e.feature_dim);
        s.read("heads", e.heads);
        s.read("lambda_init", e.lambda_init);
        s.read("depth", e.depth);
        s.read("proj_hidden", e.proj_hidden);
        s.read("proj_dim", e.proj_dim);
        s.finish();
    }
    {
        auto s = root.child("pretrain");
        auto& p = c.pretrain;
        s.read("learning_rate", p.learning_rate);
        s.read("momentum", p.momentum);
        s.read("batch_size", p.batch_size);
        s.read("epochs", p.epochs);
        s.read("views", p.fusion.views);
        s.range("weight_range", p.fusion.weight_lo, p.fusion.weight_hi);
        s.read("temperature", p.fusion.temperature);
        s.read("hard_ratio", p.fusion.hard_ratio);
        s.read("hard_weight", p.fusion.hard_weight);
        s.finish();
    }
    {
        auto s = root.child("finetune");
        auto& f = c.finetune;
        s.read("learning_rate", f.learning_rate);
        s.read("momentum", f.momentum);
        s.read("batch_size", f.batch_size);
        s.read("epochs", f.epochs);
        s.read("ema_cap", f.ema_cap);
        s.read("distill_weight", f.distill_weight);
        s.read("collaborative", f.collaborative);
        s.read("lambda_mix", f.head.lambda_mix);
        s.read("gru_hidden", f.head.gru_hidden);
        s.read("mlp_hidden", f.head.mlp_hidden);
        s.finish();
    }
    {
        auto s = root.child("augmentation");
        auto& a = c.augmentation;
        std::string method = to_string(a.method);
        s.read("method", method);
        a.method = parse_augment_method(method);
        s.read("warp_knots", a.warp_knots);
        s.range("warp_range", a.warp_lo, a.warp_hi);
        s.read("crop_fraction", a.crop_fraction);
        s.read("shift_fraction", a.shift_fraction);
        s.range("scale_range", a.scale_lo, a.scale_hi);
        s.read("smooth_width", a.smooth_width);
        s.read("noise_std", a.noise_std);
        s.finish();
    }
    {
        auto s = root.child("synth");
        auto& y = c.synth;
        s.read("num_classes", y.num_classes);
        s.read("channels", y.channels);
        s.read("window_len", y.window_len);
        s.read("rate_hz", y.rate_hz);
        s.read("latent_dim", y.latent_dim);
        s.read("class_freqs", y.class_freqs);
        s.read("amplitude_jitter", y.amplitude_jitter);
        s.read("modality_lag", y.modality_lag);
        s.read("noise_std", y.noise_std);
        s.read("distractor_amplitude", y.distractor_amplitude);
        s.range("distractor_freq_range", y.distractor_freq_lo, y.distractor_freq_hi);
        s.read("identical_mixing", y.identical_mixing);
        s.read("samples_per_class", y.samples_per_class);
        s.finish();
    }
    {
        auto s = root.child("split");
        s.read("labeled_fraction", c.split.labeled_fraction);
        s.read("test_fraction", c.split.test_fraction);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
}

// Applies "a.b.c=value"; the value is parsed as JSON, falling back to a
// plain string so `--set augmentation.method=random_crop` works unquoted.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    std::string pointer = "/" + assignment.substr(0, eq);
    for (auto& ch : pointer)
        if (ch == '.') ch = '/';
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;
    }
    j[nlohmann::json::json_pointer(pointer)] = std::move(value);
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = path.empty() ? nlohmann::json::object() : read_json_file(path);
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& o : overrides) apply_override(j, o);
    return parse_run_config(j);
}

} // namespace clmm
