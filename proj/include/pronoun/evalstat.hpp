#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "pronoun/error.hpp"
#include "pronoun/severity.hpp"

namespace pronoun {

// ---------------------------------------------------------------------------
// Descriptive helpers

inline double mean(std::span<const double> v) {
    if (v.empty()) throw UndefinedStatisticError("mean of empty sample");
    // Compensated summation.
    double sum = 0.0, c = 0.0;
    for (double x : v) {
        const double y = x - c;
        const double t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    return sum / static_cast<double>(v.size());
}

// Unbiased (n-1) variance.
inline double sample_variance(std::span<const double> v) {
    if (v.size() < 2) throw UndefinedStatisticError("variance needs at least two values");
    if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); })) return 0.0;
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return ss / static_cast<double>(v.size() - 1);
}

// Even counts average the two middle values.
inline std::optional<double> median(std::vector<double> v) {
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Special functions

namespace detail {

// Modified Lentz evaluation of the incomplete beta continued fraction.
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 1000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw NumericalError("incomplete beta continued fraction did not converge", -1);
}

} // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw ConfigError("incomplete_beta requires a, b > 0");
    if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("incomplete_beta requires x in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
    if (!(df > 0.0)) throw ConfigError("degrees of freedom must be positive");
    if (std::isinf(t)) return 0.0;
    if (t == 0.0) return 1.0;
    return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

inline double student_t_cdf(double t, double df) {
    const double tail = 0.5 * student_t_two_sided_p(t, df);
    return t < 0.0 ? tail : 1.0 - tail;
}

inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

// ---------------------------------------------------------------------------
// Classification metrics

struct MetricsReport {
    double f1_macro = 0.0;
    double f1_positive = 0.0;
    double f1_negative = 0.0;
    double accuracy = 0.0;
    double precision_positive = 0.0;
    double recall_positive = 0.0;
    std::optional<double> auroc; // absent when one class is missing
    std::optional<double> auprc; // absent without positives
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    double threshold = 0.5;
};

namespace detail {

inline void check_binary(std::span<const int> labels) {
    for (int y : labels)
        if (y != 0 && y != 1) throw DataQualityError("labels must be 0 or 1");
}

inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

// Indices sorted by descending score.
inline std::vector<std::size_t> order_descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

} // namespace detail

// Mann-Whitney AUROC: (concordant + ties / 2) / (n_pos * n_neg).
inline double auroc(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) throw DataQualityError("auroc: labels and scores differ in length");
    detail::check_binary(labels);
    const auto order = detail::order_descending(scores);
    // Walk tie groups from the top; negatives below a positive are concordant.
    double n_pos_total = 0, n_neg_total = 0;
    for (int y : labels) (y ? n_pos_total : n_neg_total) += 1;
    if (n_pos_total == 0 || n_neg_total == 0) throw UndefinedStatisticError("auroc requires both classes");
    double pos_above = 0;
    double twice_credit = 0; // integer-valued, exact in double for realistic n
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        double pos = 0, neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? pos : neg) += 1;
            ++j;
        }
        twice_credit += 2.0 * pos_above * neg + pos * neg;
        pos_above += pos;
        i = j;
    }
    return twice_credit / (2.0 * n_pos_total * n_neg_total);
}

// Average precision with tied scores forming a single threshold step.
inline double auprc(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) throw DataQualityError("auprc: labels and scores differ in length");
    detail::check_binary(labels);
    const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    if (n_pos == 0) throw UndefinedStatisticError("auprc requires at least one positive");
    const auto order = detail::order_descending(scores);
    double tp = 0, fp = 0, prev_recall = 0, ap = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? tp : fp) += 1;
            ++j;
        }
        const double recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
        i = j;
    }
    return ap;
}

// Predicted positive iff probability >= threshold. Per-class F1 uses 0/0 -> 0.
inline MetricsReport classification_metrics(std::span<const int> labels, std::span<const double> probabilities,
                                            double threshold = 0.5) {
    if (labels.empty()) throw DataQualityError("classification_metrics: empty input");
    if (labels.size() != probabilities.size())
        throw DataQualityError("classification_metrics: labels and probabilities differ in length");
    detail::check_binary(labels);
    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool pred = probabilities[i] >= threshold;
        if (labels[i]) (pred ? tp : fn) += 1;
        else (pred ? fp : tn) += 1;
    }
    MetricsReport r;
    r.threshold = threshold;
    r.n_pos = static_cast<std::size_t>(tp + fn);
    r.n_neg = static_cast<std::size_t>(tn + fp);
    r.f1_positive = detail::safe_ratio(2 * tp, 2 * tp + fp + fn);
    r.f1_negative = detail::safe_ratio(2 * tn, 2 * tn + fn + fp);
    r.f1_macro = 0.5 * (r.f1_positive + r.f1_negative);
    r.accuracy = (tp + tn) / static_cast<double>(labels.size());
    r.precision_positive = detail::safe_ratio(tp, tp + fp);
    r.recall_positive = detail::safe_ratio(tp, tp + fn);
    if (r.n_pos > 0 && r.n_neg > 0) r.auroc = auroc(labels, probabilities);
    if (r.n_pos > 0) r.auprc = auprc(labels, probabilities);
    return r;
}

// ---------------------------------------------------------------------------
// Kendall rank correlation

enum class TauVariant { A, B };

struct KendallResult {
    double tau = 0.0;
    double p_value = 1.0;
    std::int64_t concordant_minus_discordant = 0;
    std::size_t n = 0;
};

namespace detail {

// Sizes of runs of equal values in an already sorted sequence.
inline std::vector<std::int64_t> tie_groups(const std::vector<double>& sorted) {
    std::vector<std::int64_t> groups;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        if (j - i > 1) groups.push_back(static_cast<std::int64_t>(j - i));
        i = j;
    }
    return groups;
}

// Counts strict inversions while sorting v ascending.
inline std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::int64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            swaps += static_cast<std::int64_t>(mid - i);
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return swaps;
}

inline std::int64_t pairs(std::int64_t t) { return t * (t - 1) / 2; }

} // namespace detail

// O(n log n) Kendall tau (Knight's algorithm) with the tie-corrected normal
// approximation for the two-sided p-value.
inline KendallResult kendall_tau(std::span<const double> x, std::span<const double> y,
                                 TauVariant variant = TauVariant::B) {
    if (x.size() != y.size()) throw DataQualityError("kendall_tau: x and y differ in length");
    const std::size_t n = x.size();
    if (n < 2) throw UndefinedStatisticError("kendall_tau requires n >= 2");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
    });

    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        xs[i] = x[idx[i]];
        ys[i] = y[idx[i]];
    }

    const auto x_groups = detail::tie_groups(xs);
    std::int64_t joint_ties = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && xs[j] == xs[i] && ys[j] == ys[i]) ++j;
        joint_ties += detail::pairs(static_cast<std::int64_t>(j - i));
        i = j;
    }

    std::vector<double> buf(n);
    const std::int64_t discordant = detail::merge_count(ys, buf, 0, n);
    const auto y_groups = detail::tie_groups(ys);

    const auto nn = static_cast<std::int64_t>(n);
    const std::int64_t n0 = detail::pairs(nn);
    std::int64_t n1 = 0, n2 = 0;
    for (auto t : x_groups) n1 += detail::pairs(t);
    for (auto u : y_groups) n2 += detail::pairs(u);
    if (n1 == n0 || n2 == n0) throw UndefinedStatisticError("kendall_tau undefined: all values tied");

    KendallResult r;
    r.n = n;
    r.concordant_minus_discordant = n0 - n1 - n2 + joint_ties - 2 * discordant;
    const double s = static_cast<double>(r.concordant_minus_discordant);
    if (variant == TauVariant::B)
        r.tau = s / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
    else
        r.tau = s / static_cast<double>(n0);
    r.tau = std::clamp(r.tau, -1.0, 1.0);

    auto sum_poly = [](const std::vector<std::int64_t>& g, auto f) {
        double acc = 0.0;
        for (auto t : g) acc += f(static_cast<double>(t));
        return acc;
    };
    const double dn = static_cast<double>(n);
    const double v0 = dn * (dn - 1) * (2 * dn + 5);
    const double vt = sum_poly(x_groups, [](double t) { return t * (t - 1) * (2 * t + 5); });
    const double vu = sum_poly(y_groups, [](double u) { return u * (u - 1) * (2 * u + 5); });
    const double t1 = sum_poly(x_groups, [](double t) { return t * (t - 1); });
    const double u1 = sum_poly(y_groups, [](double u) { return u * (u - 1); });
    const double t2 = sum_poly(x_groups, [](double t) { return t * (t - 1) * (t - 2); });
    const double u2 = sum_poly(y_groups, [](double u) { return u * (u - 1) * (u - 2); });
    double var = (v0 - vt - vu) / 18.0 + (t1 * u1) / (2.0 * dn * (dn - 1));
    if (n > 2) var += (t2 * u2) / (9.0 * dn * (dn - 1) * (dn - 2));
    r.p_value = var > 0.0 ? std::min(1.0, normal_two_sided_p(s / std::sqrt(var))) : 1.0;
    return r;
}

// ---------------------------------------------------------------------------
// t-tests

struct TTestResult {
    double t = 0.0;
    double df = 0.0;
    double p_two_sided = 1.0;
};

inline TTestResult paired_t(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DataQualityError("paired_t: samples differ in length");
    if (a.size() < 2) throw UndefinedStatisticError("paired_t requires n >= 2");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double var = sample_variance(d);
    if (!(var > 0.0)) throw UndefinedStatisticError("paired_t undefined: differences have zero variance");
    const double n = static_cast<double>(d.size());
    TTestResult r;
    r.t = mean(d) / std::sqrt(var / n);
    r.df = n - 1;
    r.p_two_sided = student_t_two_sided_p(r.t, r.df);
    return r;
}

// Welch's unequal-variance test, t = (mean(a) - mean(b)) / se.
inline TTestResult welch_t(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw UndefinedStatisticError("welch_t requires n >= 2 in each group");
    const double va = sample_variance(a) / static_cast<double>(a.size());
    const double vb = sample_variance(b) / static_cast<double>(b.size());
    const double se2 = va + vb;
    if (!(se2 > 0.0)) throw UndefinedStatisticError("welch_t undefined: both groups have zero variance");
    TTestResult r;
    r.t = (mean(a) - mean(b)) / std::sqrt(se2);
    r.df = se2 * se2 /
           (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    r.p_two_sided = student_t_two_sided_p(r.t, r.df);
    return r;
}

// ---------------------------------------------------------------------------
// Group summaries

struct MedianSplit {
    std::optional<double> mean_low;  // paired score < cut
    std::optional<double> mean_high; // paired score >= cut
    std::size_t n_low = 0;
    std::size_t n_high = 0;
    std::optional<TTestResult> difference; // Welch test, when both sides allow it
};

inline MedianSplit median_split(std::span<const double> values, std::span<const double> paired_scores, double cut) {
    if (values.size() != paired_scores.size()) throw DataQualityError("median_split: inputs differ in length");
    std::vector<double> low, high;
    for (std::size_t i = 0; i < values.size(); ++i) (paired_scores[i] < cut ? low : high).push_back(values[i]);
    MedianSplit r;
    r.n_low = low.size();
    r.n_high = high.size();
    if (!low.empty()) r.mean_low = mean(low);
    if (!high.empty()) r.mean_high = mean(high);
    if (low.size() >= 2 && high.size() >= 2) {
        try {
            r.difference = welch_t(low, high);
        } catch (const UndefinedStatisticError&) {
        }
    }
    return r;
}

struct BinSummary {
    SeverityLevel level{};
    std::optional<double> mean;
    std::optional<double> sem; // needs n >= 2
    std::size_t n = 0;
};

inline std::vector<BinSummary> bin_means(std::span<const int> phq_totals, std::span<const double> values) {
    if (phq_totals.size() != values.size()) throw DataQualityError("bin_means: inputs differ in length");
    std::vector<std::vector<double>> groups(kSeverityLevels.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        groups[static_cast<std::size_t>(bin_severity(phq_totals[i]))].push_back(values[i]);
    std::vector<BinSummary> out;
    for (std::size_t k = 0; k < kSeverityLevels.size(); ++k) {
        BinSummary s;
        s.level = kSeverityLevels[k];
        s.n = groups[k].size();
        if (s.n > 0) s.mean = mean(groups[k]);
        if (s.n > 1) s.sem = std::sqrt(sample_variance(groups[k]) / static_cast<double>(s.n));
        out.push_back(s);
    }
    return out;
}

} // namespace pronoun
