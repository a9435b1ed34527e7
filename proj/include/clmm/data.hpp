#pragma once

// Multimodal windows, manifest-driven CSV ingestion, per-channel
// normalization, cross-modality-consistent augmentation, a synthetic
// generator with shared cross-modal structure, and stratified splitting.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clmm/encoder.hpp"
#include "clmm/random.hpp"

namespace clmm {

// Row-major [channels x length] samples of one modality.
struct Signal {
    std::size_t channels = 0;
    std::size_t length = 0;
    std::vector<double> values;

    Signal() = default;
    Signal(std::size_t c, std::size_t t) : channels(c), length(t), values(c * t, 0.0) {}

    double& at(std::size_t c, std::size_t t) { return values[c * length + t]; }
    double at(std::size_t c, std::size_t t) const { return values[c * length + t]; }
    Tensor to_tensor() const { return Tensor({channels, length}, values); }
};

struct MultimodalWindow {
    std::string id;
    std::vector<Signal> modalities;
    std::optional<std::size_t> label;
    std::optional<int> subject;
    std::string split;  // "", "unlabeled", "train" or "test"

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& s : modalities) out.push_back(s.to_tensor());
        return out;
    }
};

// Linear interpolation of every channel onto `new_len` evenly spaced points
// spanning the same duration.
inline Signal resample_linear(const Signal& in, std::size_t new_len) {
    if (new_len == in.length) return in;
    Signal out(in.channels, new_len);
    for (std::size_t t = 0; t < new_len; ++t) {
        const double pos = new_len == 1 || in.length == 1
                               ? 0.0
                               : static_cast<double>(t) * static_cast<double>(in.length - 1) / static_cast<double>(new_len - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, in.length - 1);
        const double frac = pos - static_cast<double>(lo);
        for (std::size_t c = 0; c < in.channels; ++c) out.at(c, t) = (1.0 - frac) * in.at(c, lo) + frac * in.at(c, hi);
    }
    return out;
}

// Samples `in` at fractional source positions given in normalized time [0,1].
inline Signal sample_at(const Signal& in, const std::vector<double>& source_time) {
    Signal out(in.channels, source_time.size());
    const double span = static_cast<double>(in.length - 1);
    for (std::size_t t = 0; t < source_time.size(); ++t) {
        const double pos = std::clamp(source_time[t], 0.0, 1.0) * span;
        const auto lo = std::min(static_cast<std::size_t>(std::floor(pos)), in.length - 1);
        const std::size_t hi = std::min(lo + 1, in.length - 1);
        const double frac = pos - static_cast<double>(lo);
        for (std::size_t c = 0; c < in.channels; ++c) out.at(c, t) = (1.0 - frac) * in.at(c, lo) + frac * in.at(c, hi);
    }
    return out;
}

inline double normalized_time(std::size_t t, std::size_t length) {
    return length <= 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(length - 1);
}

// ------------------------------------------------------------------ manifest

struct ModalityManifest {
    std::string name;
    std::size_t channels = 0;
    double rate_hz = 0.0;
    std::size_t window_len = 0;
};

struct SampleEntry {
    std::string id;
    std::vector<std::string> files;  // one per modality, relative to the manifest
    std::optional<std::string> label;
    std::optional<int> subject;
    std::optional<std::string> split;
};

struct DatasetManifest {
    std::vector<ModalityManifest> modalities;
    std::vector<std::string> classes;
    std::vector<SampleEntry> samples;
    std::optional<std::string> labels_file;  // optional CSV "id,class"

    std::vector<ModalitySpec> modality_specs() const {
        std::vector<ModalitySpec> out;
        for (const auto& m : modalities) out.push_back({m.name, m.channels, m.window_len});
        return out;
    }
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
    j = nlohmann::json::object();
    j["modalities"] = nlohmann::json::array();
    for (const auto& mod : m.modalities) {
        j["modalities"].push_back(
            {{"name", mod.name}, {"channels", mod.channels}, {"rate_hz", mod.rate_hz}, {"window_len", mod.window_len}});
    }
    j["classes"] = m.classes;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : m.samples) {
        nlohmann::json e{{"id", s.id}, {"files_per_modality", s.files}};
        if (s.label) e["label"] = *s.label;
        if (s.subject) e["subject"] = *s.subject;
        if (s.split) e["split"] = *s.split;
        j["samples"].push_back(std::move(e));
    }
    if (m.labels_file) j["labels_file"] = *m.labels_file;
}

inline DatasetManifest parse_manifest(const nlohmann::json& j, const std::string& origin) {
    auto fail = [&](const std::string& why) -> LoadError { return LoadError(origin + ": " + why); };
    DatasetManifest m;
    try {
        for (const auto& mod : j.at("modalities")) {
            ModalityManifest mm{mod.at("name").get<std::string>(), mod.at("channels").get<std::size_t>(),
                                mod.at("rate_hz").get<double>(), mod.at("window_len").get<std::size_t>()};
            if (mm.channels == 0 || mm.window_len < 2 || !(mm.rate_hz > 0.0)) {
                throw fail("modality '" + mm.name + "' needs channels > 0, window_len >= 2, rate_hz > 0");
            }
            m.modalities.push_back(std::move(mm));
        }
        m.classes = j.at("classes").get<std::vector<std::string>>();
        for (const auto& s : j.at("samples")) {
            SampleEntry e;
            e.id = s.at("id").get<std::string>();
            e.files = s.at("files_per_modality").get<std::vector<std::string>>();
            if (s.contains("label") && !s["label"].is_null()) e.label = s["label"].get<std::string>();
            if (s.contains("subject")) e.subject = s["subject"].get<int>();
            if (s.contains("split")) e.split = s["split"].get<std::string>();
            m.samples.push_back(std::move(e));
        }
        if (j.contains("labels_file")) m.labels_file = j["labels_file"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("malformed manifest: ") + e.what());
    }
    if (m.modalities.empty()) throw fail("manifest lists no modalities");
    return m;
}

// Header row of channel names, then one row of decimals per timestep.
inline Signal read_modality_csv(const std::filesystem::path& path, std::size_t channels) {
    std::ifstream in(path);
    if (!in) throw LoadError("missing file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) throw LoadError(path.string() + ":1: empty file");
    ++lineno;
    const auto header_cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (header_cols != channels) {
        throw LoadError(path.string() + ":1: header has " + std::to_string(header_cols) + " columns, manifest declares " +
                        std::to_string(channels));
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            const std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end == cell.c_str() || *end != '\0' || !std::isfinite(v)) {
                throw LoadError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
            row.push_back(v);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (row.size() != channels) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": ragged row with " +
                            std::to_string(row.size()) + " columns, expected " + std::to_string(channels));
        }
        rows.push_back(std::move(row));
    }
    if (rows.size() < 2) throw LoadError(path.string() + ": need at least 2 timesteps");
    Signal s(channels, rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t)
        for (std::size_t c = 0; c < channels; ++c) s.at(c, t) = rows[t][c];
    return s;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_modality_csv(const std::filesystem::path& path, const Signal& s, const std::string& prefix) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    for (std::size_t c = 0; c < s.channels; ++c) out << (c ? "," : "") << prefix << c;
    out << '\n';
    for (std::size_t t = 0; t < s.length; ++t) {
        for (std::size_t c = 0; c < s.channels; ++c) out << (c ? "," : "") << format_double(s.at(c, t));
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

struct Dataset {
    DatasetManifest manifest;
    std::vector<MultimodalWindow> windows;
};

// Loads every sample listed in the manifest, resampling each modality to its
// declared window length. Values are left unnormalized; see ChannelNormalizer.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw LoadError("missing file " + manifest_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(manifest_path.string() + ": invalid JSON: " + e.what());
    }
    Dataset ds;
    ds.manifest = parse_manifest(j, manifest_path.string());
    const auto root = manifest_path.parent_path();
    const auto& mf = ds.manifest;

    std::map<std::string, std::size_t> class_index;
    for (std::size_t c = 0; c < mf.classes.size(); ++c) class_index[mf.classes[c]] = c;
    auto resolve_label = [&](const std::string& name, const std::string& where) {
        auto it = class_index.find(name);
        if (it == class_index.end()) throw LoadError(where + ": unknown class '" + name + "'");
        return it->second;
    };

    std::set<std::string> ids;
    for (const auto& e : mf.samples) {
        if (!ids.insert(e.id).second) throw LoadError(manifest_path.string() + ": duplicate sample id '" + e.id + "'");
        if (e.files.size() != mf.modalities.size()) {
            throw LoadError(manifest_path.string() + ": sample '" + e.id + "' lists " + std::to_string(e.files.size()) +
                            " files for " + std::to_string(mf.modalities.size()) + " modalities");
        }
        MultimodalWindow w;
        w.id = e.id;
        w.subject = e.subject;
        w.split = e.split.value_or("");
        if (e.label) w.label = resolve_label(*e.label, manifest_path.string() + " sample '" + e.id + "'");
        double duration0 = 0.0;
        for (std::size_t m = 0; m < mf.modalities.size(); ++m) {
            const auto& mod = mf.modalities[m];
            Signal raw = read_modality_csv(root / e.files[m], mod.channels);
            const double duration = static_cast<double>(raw.length) / mod.rate_hz;
            if (m == 0) {
                duration0 = duration;
            } else {
                const double slack = 1.0 / mod.rate_hz + 1.0 / mf.modalities[0].rate_hz;
                if (std::abs(duration - duration0) > slack) {
                    throw LoadError("sample '" + e.id + "': modality '" + mod.name + "' covers " +
                                    std::to_string(duration) + " s, modality '" + mf.modalities[0].name + "' covers " +
                                    std::to_string(duration0) + " s");
                }
            }
            w.modalities.push_back(resample_linear(raw, mod.window_len));
        }
        ds.windows.push_back(std::move(w));
    }

    if (mf.labels_file) {
        const auto path = root / *mf.labels_file;
        std::ifstream lf(path);
        if (!lf) throw LoadError("missing file " + path.string());
        std::map<std::string, std::size_t> by_id;
        for (std::size_t i = 0; i < ds.windows.size(); ++i) by_id[ds.windows[i].id] = i;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(lf, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || (lineno == 1 && line == "id,class")) continue;
            const auto comma = line.find(',');
            const std::string where = path.string() + ":" + std::to_string(lineno);
            if (comma == std::string::npos) throw LoadError(where + ": expected 'id,class'");
            const std::string id = line.substr(0, comma);
            auto it = by_id.find(id);
            if (it == by_id.end()) throw LoadError(where + ": unknown sample id '" + id + "'");
            ds.windows[it->second].label = resolve_label(line.substr(comma + 1), where);
        }
    }
    return ds;
}

// Writes manifest.json plus one CSV per sample and modality into `dir`.
inline void save_dataset(const std::filesystem::path& dir, const DatasetManifest& meta,
                         const std::vector<MultimodalWindow>& windows) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    DatasetManifest mf = meta;
    mf.samples.clear();
    mf.labels_file.reset();
    for (const auto& w : windows) {
        SampleEntry e;
        e.id = w.id;
        for (std::size_t m = 0; m < w.modalities.size(); ++m) {
            const std::string file = w.id + "_" + mf.modalities[m].name + ".csv";
            write_modality_csv(dir / file, w.modalities[m], mf.modalities[m].name + "_ch");
            e.files.push_back(file);
        }
        if (w.label) e.label = mf.classes.at(*w.label);
        e.subject = w.subject;
        if (!w.split.empty()) e.split = w.split;
        mf.samples.push_back(std::move(e));
    }
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << nlohmann::json(mf).dump(2) << '\n';
    if (!out) throw IoError("write failed for " + (dir / "manifest.json").string());
}

// ------------------------------------------------------------- normalization

// Per-modality, per-channel z-score statistics fitted on a training split.
struct ChannelNormalizer {
    std::vector<std::vector<double>> mean;  // [modality][channel]
    std::vector<std::vector<double>> stddev;

    static ChannelNormalizer fit(const std::vector<MultimodalWindow>& windows) {
        if (windows.empty()) throw ContractError("cannot fit normalization statistics on an empty set");
        ChannelNormalizer n;
        const std::size_t m = windows[0].modalities.size();
        n.mean.resize(m);
        n.stddev.resize(m);
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t c = windows[0].modalities[j].channels;
            std::vector<double> sum(c, 0.0), sq(c, 0.0);
            double count = 0.0;
            for (const auto& w : windows) {
                const auto& s = w.modalities[j];
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t t = 0; t < s.length; ++t) sum[ch] += s.at(ch, t);
                count += static_cast<double>(s.length);
            }
            n.mean[j].resize(c);
            n.stddev[j].resize(c);
            for (std::size_t ch = 0; ch < c; ++ch) n.mean[j][ch] = sum[ch] / count;
            for (const auto& w : windows) {
                const auto& s = w.modalities[j];
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t t = 0; t < s.length; ++t) {
                        const double d = s.at(ch, t) - n.mean[j][ch];
                        sq[ch] += d * d;
                    }
            }
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double sd = std::sqrt(sq[ch] / count);
                n.stddev[j][ch] = sd > 1e-12 ? sd : 1.0;
            }
        }
        return n;
    }

    void apply(MultimodalWindow& w) const {
        for (std::size_t j = 0; j < w.modalities.size(); ++j) {
            auto& s = w.modalities[j];
            for (std::size_t ch = 0; ch < s.channels; ++ch)
                for (std::size_t t = 0; t < s.length; ++t) s.at(ch, t) = (s.at(ch, t) - mean[j][ch]) / stddev[j][ch];
        }
    }

    void apply(std::vector<MultimodalWindow>& ws) const {
        for (auto& w : ws) apply(w);
    }
};

// -------------------------------------------------------------- augmentation

enum class AugmentMethod { none, time_warp, random_crop, time_shift, channel_scale, smoothing, noise };

inline std::string to_string(AugmentMethod m) {
    switch (m) {
        case AugmentMethod::none: return "none";
        case AugmentMethod::time_warp: return "time_warp";
        case AugmentMethod::random_crop: return "random_crop";
        case AugmentMethod::time_shift: return "time_shift";
        case AugmentMethod::channel_scale: return "channel_scale";
        case AugmentMethod::smoothing: return "smoothing";
        case AugmentMethod::noise: return "noise";
    }
    return "none";
}

inline AugmentMethod parse_augment_method(const std::string& s) {
    for (auto m : {AugmentMethod::none, AugmentMethod::time_warp, AugmentMethod::random_crop, AugmentMethod::time_shift,
                   AugmentMethod::channel_scale, AugmentMethod::smoothing, AugmentMethod::noise}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown augmentation method '" + s + "'");
}

struct AugmentationConfig {
    AugmentMethod method = AugmentMethod::time_warp;
    std::size_t warp_knots = 4;  // interior knots; knots + 1 segments
    double warp_lo = 0.8;
    double warp_hi = 1.2;
    double crop_fraction = 0.9;
    // Augmentations that hurt accuracy in the original study; available but off by default.
    double shift_fraction = 0.1;
    double scale_lo = 0.9;
    double scale_hi = 1.1;
    std::size_t smooth_width = 3;
    double noise_std = 0.05;

    void validate() const {
        if (!(warp_lo <= 1.0 && warp_hi >= 1.0 && warp_lo > 0.0)) throw ConfigError("warp range must straddle 1");
        if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) {
            throw ConfigError("crop fraction must lie in (0,1], got " + std::to_string(crop_fraction));
        }
        if (shift_fraction < 0.0 || shift_fraction >= 1.0) throw ConfigError("shift fraction must lie in [0,1)");
        if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) throw ConfigError("bad channel scale range");
        if (smooth_width == 0) throw ConfigError("smoothing width must be >= 1");
        if (noise_std < 0.0) throw ConfigError("noise std must be >= 0");
    }
};

// Parameters of one transform draw, recorded per modality when a trace is
// supplied so callers can verify every modality saw the same draw.
struct AugmentTrace {
    std::vector<std::vector<double>> per_modality;
};

// Piecewise-linear monotone map from output time to source time on [0,1].
// Source segment k = [k/n, (k+1)/n] occupies output duration f_k / Σf.
inline std::vector<double> warp_source_times(const std::vector<double>& factors, std::size_t length) {
    const std::size_t n = factors.size();
    double total = 0.0;
    for (double f : factors) total += f;
    std::vector<double> breaks(n + 1, 0.0);
    for (std::size_t k = 0; k < n; ++k) breaks[k + 1] = breaks[k] + factors[k] / total;
    breaks[n] = 1.0;
    std::vector<double> src(length);
    std::size_t k = 0;
    for (std::size_t t = 0; t < length; ++t) {
        const double tau = normalized_time(t, length);
        while (k + 1 < n && tau > breaks[k + 1]) ++k;
        const double dk = breaks[k + 1] - breaks[k];
        src[t] = (static_cast<double>(k) + (tau - breaks[k]) / dk) / static_cast<double>(n);
    }
    return src;
}

inline MultimodalWindow apply_time_warp(const MultimodalWindow& w, const std::vector<double>& factors,
                                        AugmentTrace* trace = nullptr) {
    MultimodalWindow out = w;
    for (std::size_t j = 0; j < w.modalities.size(); ++j) {
        out.modalities[j] = sample_at(w.modalities[j], warp_source_times(factors, w.modalities[j].length));
        if (trace) trace->per_modality.push_back(factors);
    }
    return out;
}

// Same relative crop [offset, offset + fraction] on every modality, resampled
// back to full length.
inline MultimodalWindow apply_random_crop(const MultimodalWindow& w, double offset, double fraction,
                                          AugmentTrace* trace = nullptr) {
    MultimodalWindow out = w;
    for (std::size_t j = 0; j < w.modalities.size(); ++j) {
        const std::size_t len = w.modalities[j].length;
        std::vector<double> src(len);
        for (std::size_t t = 0; t < len; ++t) src[t] = offset + fraction * normalized_time(t, len);
        out.modalities[j] = sample_at(w.modalities[j], src);
        if (trace) trace->per_modality.push_back({offset, fraction});
    }
    return out;
}

inline MultimodalWindow time_warp(const MultimodalWindow& w, const AugmentationConfig& cfg, Rng& rng,
                                  AugmentTrace* trace = nullptr) {
    cfg.validate();
    std::vector<double> factors(cfg.warp_knots + 1);
    for (double& f : factors) f = cfg.warp_lo == cfg.warp_hi ? cfg.warp_lo : rng.uniform(cfg.warp_lo, cfg.warp_hi);
    return apply_time_warp(w, factors, trace);
}

inline MultimodalWindow random_crop(const MultimodalWindow& w, const AugmentationConfig& cfg, Rng& rng,
                                    AugmentTrace* trace = nullptr) {
    cfg.validate();
    const double offset = cfg.crop_fraction >= 1.0 ? 0.0 : rng.uniform(0.0, 1.0 - cfg.crop_fraction);
    return apply_random_crop(w, offset, cfg.crop_fraction, trace);
}

inline MultimodalWindow augment(const MultimodalWindow& w, const AugmentationConfig& cfg, Rng& rng,
                                AugmentTrace* trace = nullptr) {
    switch (cfg.method) {
        case AugmentMethod::none: return w;
        case AugmentMethod::time_warp: return time_warp(w, cfg, rng, trace);
        case AugmentMethod::random_crop: return random_crop(w, cfg, rng, trace);
        default: break;
    }
    cfg.validate();
    MultimodalWindow out = w;
    if (cfg.method == AugmentMethod::time_shift) {
        const double shift = rng.uniform(-cfg.shift_fraction, cfg.shift_fraction);
        for (std::size_t j = 0; j < out.modalities.size(); ++j) {
            auto& s = out.modalities[j];
            const auto len = static_cast<long>(s.length);
            const long k = std::lround(shift * static_cast<double>(len));
            for (std::size_t c = 0; c < s.channels; ++c)
                for (long t = 0; t < len; ++t) s.at(c, t) = w.modalities[j].at(c, static_cast<std::size_t>(((t - k) % len + len) % len));
            if (trace) trace->per_modality.push_back({shift});
        }
    } else if (cfg.method == AugmentMethod::channel_scale) {
        for (auto& s : out.modalities)
            for (std::size_t c = 0; c < s.channels; ++c) {
                const double f = rng.uniform(cfg.scale_lo, cfg.scale_hi);
                for (std::size_t t = 0; t < s.length; ++t) s.at(c, t) *= f;
            }
    } else if (cfg.method == AugmentMethod::smoothing) {
        const auto half = static_cast<long>(cfg.smooth_width / 2);
        for (std::size_t j = 0; j < out.modalities.size(); ++j) {
            auto& s = out.modalities[j];
            const auto& src = w.modalities[j];
            for (std::size_t c = 0; c < s.channels; ++c)
                for (long t = 0; t < static_cast<long>(s.length); ++t) {
                    double acc = 0.0;
                    int cnt = 0;
                    for (long d = -half; d <= half; ++d) {
                        const long u = t + d;
                        if (u < 0 || u >= static_cast<long>(s.length)) continue;
                        acc += src.at(c, static_cast<std::size_t>(u));
                        ++cnt;
                    }
                    s.at(c, static_cast<std::size_t>(t)) = acc / cnt;
                }
        }
    } else if (cfg.method == AugmentMethod::noise) {
        for (auto& s : out.modalities)
            for (double& v : s.values) v += rng.normal(0.0, cfg.noise_std);
    }
    return out;
}

// ----------------------------------------------------------------- synthetic

// Classes differ by the frequency of a shared latent oscillation; each
// modality sees it through its own mixing matrix, with its own phase lag,
// plus a modality-private distractor oscillation and white noise.
struct SyntheticSpec {
    std::size_t num_classes = 5;
    std::vector<std::size_t> channels{3, 3, 3};  // one entry per modality
    std::size_t window_len = 64;
    double rate_hz = 50.0;
    std::size_t latent_dim = 2;
    std::vector<double> class_freqs{3, 5, 7, 9, 11};  // cycles per window
    double amplitude_jitter = 0.2;
    double modality_lag = M_PI;  // per-modality phase lag drawn from [-lag, lag]
    double noise_std = 0.3;
    double distractor_amplitude = 1.0;
    std::size_t distractor_freq_lo = 2;
    std::size_t distractor_freq_hi = 12;
    bool identical_mixing = false;
    std::size_t samples_per_class = 20;

    std::size_t num_modalities() const { return channels.size(); }

    void validate() const {
        if (num_classes < 2) throw ConfigError("synthetic data needs >= 2 classes");
        if (class_freqs.size() != num_classes) throw ConfigError("need one latent frequency per class");
        if (channels.size() < 2) throw ConfigError("synthetic data needs >= 2 modalities");
        for (std::size_t c : channels)
            if (c < latent_dim) throw ConfigError("each modality needs at least latent_dim channels for a full-rank mixing");
        if (noise_std < 0.0) throw ConfigError("noise std must be >= 0");
        if (modality_lag < 0.0) throw ConfigError("modality lag must be >= 0");
        if (window_len < 8) throw ConfigError("synthetic window too short");
        if (distractor_freq_lo > distractor_freq_hi) throw ConfigError("bad distractor frequency range");
    }

    DatasetManifest manifest() const {
        DatasetManifest m;
        for (std::size_t j = 0; j < channels.size(); ++j) {
            m.modalities.push_back({"mod" + std::to_string(j), channels[j], rate_hz, window_len});
        }
        for (std::size_t c = 0; c < num_classes; ++c) m.classes.push_back("class" + std::to_string(c));
        return m;
    }
};

// Rank of a small dense matrix via Gaussian elimination.
inline std::size_t matrix_rank(std::vector<double> a, std::size_t rows, std::size_t cols, double tol = 1e-9) {
    std::size_t rank = 0;
    for (std::size_t col = 0; col < cols && rank < rows; ++col) {
        std::size_t piv = rank;
        for (std::size_t r = rank; r < rows; ++r)
            if (std::abs(a[r * cols + col]) > std::abs(a[piv * cols + col])) piv = r;
        if (std::abs(a[piv * cols + col]) < tol) continue;
        for (std::size_t c = 0; c < cols; ++c) std::swap(a[rank * cols + c], a[piv * cols + c]);
        for (std::size_t r = 0; r < rows; ++r) {
            if (r == rank) continue;
            const double f = a[r * cols + col] / a[rank * cols + col];
            for (std::size_t c = 0; c < cols; ++c) a[r * cols + c] -= f * a[rank * cols + c];
        }
        ++rank;
    }
    return rank;
}

struct SyntheticData {
    DatasetManifest manifest;
    std::vector<std::vector<double>> mixing;  // per modality [C_j x latent_dim]
    std::vector<MultimodalWindow> windows;    // all labeled; split() strips labels
};

inline SyntheticData synth_generate(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    SyntheticData out;
    out.manifest = spec.manifest();
    const std::size_t m = spec.num_modalities(), l = spec.latent_dim, len = spec.window_len;
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t c = spec.channels[j];
        std::vector<double> mix(c * l);
        do {
            for (double& v : mix) v = rng.normal();
        } while (matrix_rank(mix, c, l) < l);
        if (spec.identical_mixing && j > 0) mix = out.mixing[0];
        out.mixing.push_back(std::move(mix));
    }
    const double two_pi = 2.0 * M_PI;
    std::size_t counter = 0;
    for (std::size_t rep = 0; rep < spec.samples_per_class; ++rep) {
        for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
            MultimodalWindow w;
            char id[32];
            std::snprintf(id, sizeof id, "s%05zu", counter++);
            w.id = id;
            w.label = cls;
            const double phase = rng.uniform(0.0, two_pi);
            std::vector<double> amp(l);
            for (double& a : amp) a = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter);
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t c = spec.channels[j];
                Signal s(c, len);
                const auto& mix = out.mixing[j];
                const double lag = spec.modality_lag > 0.0 ? rng.uniform(-spec.modality_lag, spec.modality_lag) : 0.0;
                std::vector<double> latent(l * len);
                for (std::size_t k = 0; k < l; ++k)
                    for (std::size_t t = 0; t < len; ++t) {
                        const double tau = static_cast<double>(t) / static_cast<double>(len);
                        latent[k * len + t] = amp[k] * std::sin(two_pi * spec.class_freqs[cls] * tau + phase + lag +
                                                                static_cast<double>(k) * M_PI / 2.0);
                    }
                const double dfreq = static_cast<double>(spec.distractor_freq_lo +
                                                         rng.index(spec.distractor_freq_hi - spec.distractor_freq_lo + 1));
                const double dphase = rng.uniform(0.0, two_pi);
                std::vector<double> ddir(c);
                double dn = 0.0;
                for (double& v : ddir) {
                    v = rng.normal();
                    dn += v * v;
                }
                dn = std::sqrt(dn);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t t = 0; t < len; ++t) {
                        double v = 0.0;
                        for (std::size_t k = 0; k < l; ++k) v += mix[ch * l + k] * latent[k * len + t];
                        const double tau = static_cast<double>(t) / static_cast<double>(len);
                        if (spec.distractor_amplitude > 0.0) {
                            v += spec.distractor_amplitude * (ddir[ch] / dn) * std::sin(two_pi * dfreq * tau + dphase);
                        }
                        if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
                        s.at(ch, t) = v;
                    }
                w.modalities.push_back(std::move(s));
            }
            out.windows.push_back(std::move(w));
        }
    }
    return out;
}

// ------------------------------------------------------------------- split

struct SplitConfig {
    double labeled_fraction = 0.05;
    double test_fraction = 0.2;
};

struct SplitResult {
    std::vector<MultimodalWindow> unlabeled;
    std::vector<MultimodalWindow> train;
    std::vector<MultimodalWindow> test;
};

// Stratified by class: per class, round(fraction·n_c) labeled training
// samples and round(test_fraction·n_c) test samples; the rest lose their
// labels. Unlabeled inputs always go to the unlabeled set.
inline SplitResult split(const std::vector<MultimodalWindow>& windows, const SplitConfig& cfg, Rng& rng) {
    if (!(cfg.labeled_fraction > 0.0 && cfg.labeled_fraction < 1.0)) {
        throw ConfigError("labeled fraction must lie in (0,1)");
    }
    if (cfg.test_fraction < 0.0 || cfg.labeled_fraction + cfg.test_fraction > 1.0) {
        throw ConfigError("test fraction must lie in [0, 1 - labeled fraction]");
    }
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    SplitResult out;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i].label) by_class[*windows[i].label].push_back(i);
        else {
            out.unlabeled.push_back(windows[i]);
            out.unlabeled.back().split = "unlabeled";
        }
    }
    for (auto& [cls, idx] : by_class) {
        const double n = static_cast<double>(idx.size());
        const auto n_lab = static_cast<std::size_t>(std::llround(cfg.labeled_fraction * n));
        const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * n));
        if (n_lab < 1) {
            throw ConfigError("labeled fraction " + std::to_string(cfg.labeled_fraction) + " leaves class " +
                              std::to_string(cls) + " (" + std::to_string(idx.size()) + " samples) without a labeled sample");
        }
        if (n_lab + n_test > idx.size()) throw ConfigError("too few samples in class " + std::to_string(cls) + " to stratify");
        rng.shuffle(idx.begin(), idx.end());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            MultimodalWindow w = windows[idx[r]];
            if (r < n_lab) {
                w.split = "train";
                out.train.push_back(std::move(w));
            } else if (r < n_lab + n_test) {
                w.split = "test";
                out.test.push_back(std::move(w));
            } else {
                w.label.reset();
                w.split = "unlabeled";
                out.unlabeled.push_back(std::move(w));
            }
        }
    }
    auto by_id = [](const MultimodalWindow& a, const MultimodalWindow& b) { return a.id < b.id; };
    std::sort(out.unlabeled.begin(), out.unlabeled.end(), by_id);
    std::sort(out.train.begin(), out.train.end(), by_id);
    std::sort(out.test.begin(), out.test.end(), by_id);
    return out;
}

} // namespace clmm
