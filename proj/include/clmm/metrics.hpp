#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clmm/error.hpp"
#include "clmm/log.hpp"

namespace clmm {

// K x K counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {}

    ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts) : k_(classes), counts_(std::move(counts)) {
        if (counts_.size() != k_ * k_) throw DimensionError("confusion matrix needs K*K counts");
    }

    void add(std::size_t truth, std::size_t predicted) {
        if (truth >= k_ || predicted >= k_) throw DimensionError("confusion matrix: class index out of range");
        ++counts_[truth * k_ + predicted];
    }

    std::size_t classes() const { return k_; }
    std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }
    std::uint64_t row_sum(std::size_t r) const {
        std::uint64_t s = 0;
        for (std::size_t c = 0; c < k_; ++c) s += at(r, c);
        return s;
    }
    std::uint64_t col_sum(std::size_t c) const {
        std::uint64_t s = 0;
        for (std::size_t r = 0; r < k_; ++r) s += at(r, c);
        return s;
    }
    const std::vector<std::uint64_t>& counts() const { return counts_; }

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

inline void require_nonempty(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ContractError("metrics on an empty confusion matrix");
}

inline double accuracy(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < cm.classes(); ++c) diag += cm.at(c, c);
    return static_cast<double>(diag) / static_cast<double>(cm.total());
}

// F1 per class; a class with zero support and zero predictions scores 0.
inline std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
    std::vector<double> f1(cm.classes(), 0.0);
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        const double denom = static_cast<double>(cm.row_sum(c) + cm.col_sum(c));
        f1[c] = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    }
    return f1;
}

// Unweighted mean of per-class F1.
inline double macro_f1(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    const auto f1 = per_class_f1(cm);
    double s = 0.0;
    for (double v : f1) s += v;
    return s / static_cast<double>(f1.size());
}

// Support-weighted mean of per-class F1.
inline double weighted_f1(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    const auto f1 = per_class_f1(cm);
    double s = 0.0;
    for (std::size_t c = 0; c < f1.size(); ++c) s += f1[c] * static_cast<double>(cm.row_sum(c));
    return s / static_cast<double>(cm.total());
}

// (p_o − p_e) / (1 − p_e); defined as 0 when p_e = 1.
inline double cohen_kappa(const ConfusionMatrix& cm) {
    const double po = accuracy(cm);
    const double n = static_cast<double>(cm.total());
    double pe = 0.0;
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        pe += (static_cast<double>(cm.row_sum(c)) / n) * (static_cast<double>(cm.col_sum(c)) / n);
    }
    if (std::abs(1.0 - pe) < 1e-15) {
        log::warn("cohen_kappa: chance agreement is 1, kappa defined as 0");
        return 0.0;
    }
    return (po - pe) / (1.0 - pe);
}

struct MetricsReport {
    double accuracy = 0.0;
    double f1 = 0.0;
    double kappa = 0.0;
    bool weighted = false;
    ConfusionMatrix confusion{1};
};

inline MetricsReport make_report(const ConfusionMatrix& cm, bool weighted = false) {
    return {accuracy(cm), weighted ? weighted_f1(cm) : macro_f1(cm), cohen_kappa(cm), weighted, cm};
}

inline nlohmann::json report_json(const MetricsReport& r, const std::vector<std::string>& class_names = {}) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j[r.weighted ? "weighted_f1" : "macro_f1"] = r.f1;
    j["kappa"] = r.kappa;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t = 0; t < r.confusion.classes(); ++t) {
        std::vector<std::uint64_t> row;
        for (std::size_t p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion.at(t, p));
        rows.push_back(row);
    }
    j["confusion"] = rows;
    if (!class_names.empty()) j["classes"] = class_names;
    j["samples"] = r.confusion.total();
    return j;
}

// Aligned plain-text confusion table followed by the three metrics.
inline std::string report_table(const MetricsReport& r, const std::vector<std::string>& class_names = {}) {
    const std::size_t k = r.confusion.classes();
    auto name = [&](std::size_t c) { return c < class_names.size() ? class_names[c] : std::to_string(c); };
    std::size_t width = 6;
    for (std::size_t c = 0; c < k; ++c) width = std::max(width, name(c).size() + 1);
    std::ostringstream oss;
    oss << std::setw(static_cast<int>(width)) << "true\\pred";
    for (std::size_t c = 0; c < k; ++c) oss << ' ' << std::setw(static_cast<int>(width)) << name(c);
    oss << '\n';
    for (std::size_t t = 0; t < k; ++t) {
        oss << std::setw(static_cast<int>(width)) << name(t);
        for (std::size_t p = 0; p < k; ++p) oss << ' ' << std::setw(static_cast<int>(width)) << r.confusion.at(t, p);
        oss << '\n';
    }
    oss << std::fixed << std::setprecision(4);
    oss << "accuracy    " << r.accuracy << '\n';
    oss << (r.weighted ? "weighted_f1 " : "macro_f1    ") << r.f1 << '\n';
    oss << "kappa       " << r.kappa << '\n';
    return oss.str();
}

} // namespace clmm
