#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pronoun/error.hpp"
#include "pronoun/tokenizer.hpp"

namespace pronoun {

struct LexiconCategory {
    std::string name;
    std::set<std::string> words;
};

inline constexpr std::string_view kFirstPersonCategory = "i";
inline constexpr std::string_view kWordCountColumn = "wc";

// Lowercase word runs: letters, digits, and apostrophes (U+2019 is read as ').
inline std::vector<std::string> lexicon_words(std::string_view text) {
    std::vector<std::string> out;
    std::u32string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(detail::to_utf8(cur));
        cur.clear();
    };
    for (char32_t c : normalize_text(text)) {
        if (c == U'’') c = U'\'';
        const auto uc = static_cast<UChar32>(c);
        if (c == U'\'' || u_isalpha(uc) || u_isdigit(uc) || u_charType(uc) == U_NON_SPACING_MARK)
            cur.push_back(c);
        else
            flush();
    }
    flush();
    return out;
}

class Lexicon {
public:
    Lexicon() = default;

    explicit Lexicon(std::vector<LexiconCategory> categories) {
        std::set<std::string> names;
        for (auto& c : categories) {
            if (c.name.empty()) throw FormatError("lexicon category with empty name");
            if (c.name == kWordCountColumn) throw FormatError("lexicon category name 'wc' is reserved");
            if (!names.insert(c.name).second) throw FormatError("duplicate lexicon category '" + c.name + "'");
            std::set<std::string> folded;
            for (const auto& w : c.words) {
                auto parts = lexicon_words(w);
                if (parts.size() != 1)
                    throw FormatError("lexicon entry '" + w + "' in category '" + c.name + "' is not a single word");
                folded.insert(parts.front());
            }
            c.words = std::move(folded);
        }
        categories_ = std::move(categories);
    }

    static Lexicon default_lexicon() {
        return Lexicon({{std::string(kFirstPersonCategory),
                         {"i", "i'm", "i've", "i'll", "i'd", "me", "my", "myself", "mine"}}});
    }

    // {category: [words...]}, file order kept. The default "i" category is
    // prepended when the file lacks one.
    static Lexicon load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw FormatError("cannot open lexicon " + path.string());
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("lexicon " + path.string() + ": " + e.what());
        }
        if (!j.is_object()) throw FormatError("lexicon must be a JSON object");
        std::vector<LexiconCategory> cats;
        for (const auto& [name, list] : j.items()) {
            if (!list.is_array()) throw FormatError("lexicon category '" + name + "' must be an array");
            LexiconCategory c{name, {}};
            for (const auto& w : list) c.words.insert(w.get<std::string>());
            cats.push_back(std::move(c));
        }
        bool has_i = false;
        for (const auto& c : cats) has_i |= c.name == kFirstPersonCategory;
        if (!has_i) cats.insert(cats.begin(), default_lexicon().categories_.front());
        return Lexicon(std::move(cats));
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        for (const auto& c : categories_) j[c.name] = std::vector<std::string>(c.words.begin(), c.words.end());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot write " + path.string());
        out << j.dump(2) << '\n';
    }

    const std::vector<LexiconCategory>& categories() const { return categories_; }

    std::optional<std::size_t> index_of(std::string_view name) const {
        for (std::size_t k = 0; k < categories_.size(); ++k)
            if (categories_[k].name == name) return k;
        return std::nullopt;
    }

    // Category columns followed by the word count.
    std::vector<std::string> column_names() const {
        std::vector<std::string> out;
        for (const auto& c : categories_) out.push_back(c.name);
        out.emplace_back(kWordCountColumn);
        return out;
    }

private:
    std::vector<LexiconCategory> categories_;
};

// One value per category (percent of words) followed by the raw word count.
inline std::vector<double> extract_features(std::string_view text, const Lexicon& lexicon) {
    const auto words = lexicon_words(text);
    const auto& cats = lexicon.categories();
    std::vector<double> row(cats.size() + 1, 0.0);
    if (words.empty()) return row;
    for (std::size_t k = 0; k < cats.size(); ++k) {
        std::size_t hits = 0;
        for (const auto& w : words) hits += cats[k].words.contains(w);
        row[k] = 100.0 * static_cast<double>(hits) / static_cast<double>(words.size());
    }
    row.back() = static_cast<double>(words.size());
    return row;
}

enum class FeatureSet { IOnly, All };

// Column indices used by each baseline configuration.
inline std::vector<std::size_t> feature_columns(const Lexicon& lexicon, FeatureSet set) {
    if (set == FeatureSet::IOnly) {
        const auto k = lexicon.index_of(kFirstPersonCategory);
        if (!k) throw ConfigError("lexicon has no 'i' category");
        return {*k};
    }
    std::vector<std::size_t> all(lexicon.categories().size() + 1);
    for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
    return all;
}

using FeatureMatrix = Eigen::MatrixXd;

inline FeatureMatrix feature_matrix(std::span<const std::vector<double>> rows, std::span<const std::size_t> columns) {
    FeatureMatrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (columns[j] >= rows[i].size()) throw UsageError("feature column out of range");
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][columns[j]];
        }
    return x;
}

struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd stddev; // population deviation
    std::vector<bool> constant;

    FeatureMatrix apply(const FeatureMatrix& x) const {
        if (x.cols() != mean.size()) throw UsageError("standardizer column count mismatch");
        FeatureMatrix z(x.rows(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            if (constant[static_cast<std::size_t>(j)])
                z.col(j).setZero();
            else
                z.col(j) = (x.col(j).array() - mean(j)) / stddev(j);
        }
        return z;
    }
};

inline Standardizer fit_standardizer(const FeatureMatrix& x) {
    if (x.rows() == 0) throw DataQualityError("standardizer needs at least one training row");
    Standardizer s;
    const double n = static_cast<double>(x.rows());
    s.mean = x.colwise().sum().transpose() / n;
    s.stddev.resize(x.cols());
    s.constant.resize(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const auto centered = x.col(j).array() - s.mean(j);
        const bool flat = (x.col(j).array() == x(0, j)).all();
        s.stddev(j) = flat ? 0.0 : std::sqrt(centered.square().sum() / n);
        s.constant[static_cast<std::size_t>(j)] = flat || s.stddev(j) == 0.0;
    }
    return s;
}

struct LogisticModel {
    Eigen::VectorXd weights;
    double bias = 0.0;
    double lambda = 1.0;
    bool converged = false;
    int iterations = 0;
    double objective = 0.0;
    double grad_inf_norm = 0.0;
};

struct LogRegOptions {
    double lambda = 1.0;
    double tolerance = 1e-6;
    int max_iterations = 1000;
    std::optional<Eigen::VectorXd> initial_weights;
    double initial_bias = 0.0;
};

namespace detail {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// (1/n) sum CE + (lambda / 2n) |w|^2
inline double logreg_objective(const FeatureMatrix& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double b,
                               double lambda) {
    const Eigen::VectorXd z = (x * w).array() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z(i)) - y(i) * z(i);
    const double n = static_cast<double>(x.rows());
    return loss / n + lambda / (2.0 * n) * w.squaredNorm();
}

} // namespace detail

// Gradient of the objective, weights first and the bias last.
inline Eigen::VectorXd logreg_gradient(const FeatureMatrix& x, std::span<const int> labels, const Eigen::VectorXd& w,
                                       double b, double lambda) {
    const double n = static_cast<double>(x.rows());
    Eigen::VectorXd r(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        r(i) = detail::sigmoid(x.row(i).dot(w) + b) - labels[static_cast<std::size_t>(i)];
    Eigen::VectorXd g(w.size() + 1);
    g.head(w.size()) = x.transpose() * r / n + lambda / n * w;
    g(w.size()) = r.sum() / n;
    return g;
}

// Damped Newton with Armijo backtracking. The objective is strictly convex in
// the weights for lambda > 0, so the iterates converge to the unique optimum.
inline LogisticModel fit_logreg(const FeatureMatrix& x, std::span<const int> labels, const LogRegOptions& opt = {}) {
    if (static_cast<std::size_t>(x.rows()) != labels.size()) throw UsageError("feature/label row mismatch");
    bool has0 = false, has1 = false;
    for (int l : labels) {
        if (l != 0 && l != 1) throw DataQualityError("labels must be 0 or 1");
        (l ? has1 : has0) = true;
    }
    if (!has0 || !has1) throw DataQualityError("logistic regression needs both classes");
    if (!(opt.lambda >= 0.0)) throw ConfigError("lambda must be non-negative");

    const Eigen::Index d = x.cols();
    const double n = static_cast<double>(x.rows());
    Eigen::VectorXd y(x.rows());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = labels[static_cast<std::size_t>(i)];

    Eigen::MatrixXd xa(x.rows(), d + 1);
    xa.leftCols(d) = x;
    xa.col(d).setOnes();

    Eigen::VectorXd theta(d + 1);
    theta.head(d) = opt.initial_weights ? *opt.initial_weights : Eigen::VectorXd::Zero(d);
    if (theta.head(d).size() != d) throw UsageError("initial weight size mismatch");
    theta(d) = opt.initial_bias;

    auto objective = [&](const Eigen::VectorXd& t) {
        return detail::logreg_objective(x, y, t.head(d), t(d), opt.lambda);
    };

    LogisticModel m;
    m.lambda = opt.lambda;
    double f = objective(theta);
    Eigen::VectorXd best = theta;
    double best_f = f, best_g = INFINITY;
    for (int it = 0;; ++it) {
        const Eigen::VectorXd g = logreg_gradient(x, labels, theta.head(d), theta(d), opt.lambda);
        const double gnorm = g.lpNorm<Eigen::Infinity>();
        if (f < best_f || (f == best_f && gnorm < best_g)) {
            best = theta;
            best_f = f;
            best_g = gnorm;
        }
        m.iterations = it;
        if (gnorm <= opt.tolerance) {
            best = theta;
            best_f = f;
            best_g = gnorm;
            m.converged = true;
            break;
        }
        if (it >= opt.max_iterations) break;

        Eigen::VectorXd wdiag(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double p = detail::sigmoid(xa.row(i).dot(theta));
            wdiag(i) = p * (1.0 - p);
        }
        Eigen::MatrixXd h = xa.transpose() * wdiag.asDiagonal() * xa / n;
        h.diagonal().head(d).array() += opt.lambda / n;
        h.diagonal().array() += 1e-12;
        Eigen::VectorXd step = -h.ldlt().solve(g);
        if (!step.allFinite() || g.dot(step) >= 0) step = -g;

        double t = 1.0;
        const double slope = g.dot(step);
        Eigen::VectorXd next = theta + step;
        double fn = objective(next);
        while (!(fn <= f + 1e-4 * t * slope) && t > 1e-12) {
            t *= 0.5;
            next = theta + t * step;
            fn = objective(next);
        }
        if (!(fn <= f)) break; // no further descent at machine precision
        theta = next;
        f = fn;
    }
    m.weights = best.head(d);
    m.bias = best(d);
    m.objective = best_f;
    m.grad_inf_norm = best_g;
    if (!m.weights.allFinite() || !std::isfinite(m.bias)) throw NumericalError("logistic regression diverged", -1);
    return m;
}

inline std::vector<double> predict_logreg(const LogisticModel& m, const FeatureMatrix& x) {
    if (x.cols() != m.weights.size()) throw UsageError("feature column count does not match the model");
    std::vector<double> p(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        p[static_cast<std::size_t>(i)] = detail::sigmoid(x.row(i).dot(m.weights) + m.bias);
    return p;
}

} // namespace pronoun
