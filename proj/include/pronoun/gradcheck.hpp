#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pronoun/autodiff.hpp"
#include "pronoun/encoder.hpp"
#include "pronoun/model.hpp"
#include "pronoun/rng.hpp"

namespace pronoun {

struct GradCheckEntry {
    std::string tensor;
    Eigen::Index row = 0, col = 0;
    double analytic = 0.0, numeric = 0.0, rel_error = 0.0;
};

struct GradCheckReport {
    bool passed = false;
    double max_rel_error = 0.0;
    std::size_t n_checked = 0;
    std::size_t tensors_covered = 0;
    std::size_t tensors_total = 0;
    std::vector<GradCheckEntry> worst; // descending by relative error
};

struct GradCheckOptions {
    double step = 1e-3;
    double tolerance = 1e-4;
    std::size_t coords_per_tensor = 8;
    std::size_t min_coords = 200;
    std::uint64_t seed = 7;
    std::size_t report_worst = 10;
    // Shifts one weight after the analytic pass, so the two gradients refer to
    // different points. Used to confirm that mismatches are caught.
    std::optional<double> perturb_after_analytic;
};

inline double relative_error(double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); }

// A coordinate to probe: tensor and flat index.
struct ProbeSite {
    Parameter* tensor;
    Eigen::Index index;
};

// Compares analytic gradients (already in Parameter::grad) to central
// differences of `loss` at each site.
inline GradCheckReport compare_gradients(const std::vector<ProbeSite>& sites, const std::function<double()>& loss,
                                         const GradCheckOptions& opt) {
    GradCheckReport r;
    std::vector<GradCheckEntry> all;
    std::set<const Parameter*> covered;
    for (const auto& s : sites) {
        double& w = s.tensor->value.data()[s.index];
        const double orig = w;
        w = orig + opt.step;
        const double up = loss();
        w = orig - opt.step;
        const double down = loss();
        w = orig;
        GradCheckEntry e;
        e.tensor = s.tensor->name;
        e.row = s.index / s.tensor->value.cols();
        e.col = s.index % s.tensor->value.cols();
        e.analytic = s.tensor->grad.size() ? s.tensor->grad.data()[s.index] : 0.0;
        e.numeric = (up - down) / (2 * opt.step);
        e.rel_error = relative_error(e.analytic, e.numeric);
        r.max_rel_error = std::max(r.max_rel_error, e.rel_error);
        all.push_back(e);
        covered.insert(s.tensor);
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
    all.resize(std::min(all.size(), opt.report_worst));
    r.worst = std::move(all);
    r.n_checked = sites.size();
    r.tensors_covered = covered.size();
    r.passed = r.max_rel_error < opt.tolerance && r.n_checked >= opt.min_coords;
    return r;
}

inline EncoderConfig tiny_encoder_config() {
    EncoderConfig c;
    c.vocab_size = 24;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = 32;
    c.dropout_p = 0.0;
    c.init_seed = 3;
    return c;
}

// Tiny encoder + head. The loss averages cross-entropy over three sequences
// pooled three ways, one of them padded, so every op and mask path is on the
// gradient path. Parameters are drawn at O(1) scale so no role has a
// vanishing gradient.
inline GradCheckReport grad_check(EncoderConfig cfg = tiny_encoder_config(), const GradCheckOptions& opt = {}) {
    cfg.dropout_p = 0.0;
    EncoderParams enc = shape_encoder(cfg);
    Head head = shape_head(cfg.d_model);
    Rng rng(opt.seed);
    auto fill = [&](Parameter& p) {
        const bool gain = p.name.ends_with("LayerNorm.weight");
        for (Eigen::Index i = 0; i < p.value.size(); ++i)
            p.value.data()[i] = gain ? 1.0 + 0.2 * rng.normal() : 0.4 * rng.normal();
    };
    enc.for_each(fill);
    fill(head.weight);
    fill(head.bias);

    const auto V = static_cast<TokenId>(cfg.vocab_size);
    auto seq = [&](std::size_t n) {
        std::vector<TokenId> s(n);
        for (auto& t : s) t = static_cast<TokenId>(1 + rng.below(static_cast<std::uint64_t>(V - 1)));
        return s;
    };
    const std::vector<TokenId> a = seq(12), c = seq(10), b = [&] {
        auto s = seq(9);
        s.resize(12, 0);
        return s;
    }();
    std::vector<bool> pad_b(12, false);
    for (std::size_t i = 9; i < 12; ++i) pad_b[i] = true;
    const std::vector<bool> mask_a{false, true, false, false, true, false, true, false, false, false, false, false};
    const std::vector<bool> mask_c{false, false, false, true, false, false, false, false, false, false};
    const std::vector<int> labels{1, 0, 1};

    auto build = [&](Tape& t) {
        const EncoderVars ev = bind(t, enc);
        const HeadVars hv = bind(t, head);
        std::vector<Var> pooled{pool(forward(cfg, ev, a, {}), mask_a, PoolingMode::PronounFive),
                                pool(forward(cfg, ev, b, pad_b), {}, PoolingMode::Cls),
                                pool(forward(cfg, ev, c, {}), mask_c, PoolingMode::PronounI)};
        return softmax_cross_entropy_mean(classify(stack_rows(pooled), hv), labels);
    };
    auto loss = [&] {
        Tape t(false);
        return build(t).value()(0, 0);
    };

    enc.zero_grad();
    head.weight.zero_grad();
    head.bias.zero_grad();
    {
        Tape t;
        t.backward(build(t));
    }

    // Embedding tables only receive gradient in the rows the inputs touch.
    std::set<Eigen::Index> used_tokens;
    for (const auto* s : {&a, &b, &c})
        for (auto id : *s) used_tokens.insert(id);
    std::vector<Parameter*> tensors = enc.tensors();
    tensors.push_back(&head.weight);
    tensors.push_back(&head.bias);
    std::vector<ProbeSite> sites;
    for (Parameter* p : tensors) {
        std::vector<Eigen::Index> rows;
        if (p == &enc.word) rows.assign(used_tokens.begin(), used_tokens.end());
        else if (p == &enc.position) for (Eigen::Index r = 0; r < 12; ++r) rows.push_back(r);
        else if (p == &enc.segment) rows = {0};
        else for (Eigen::Index r = 0; r < p->value.rows(); ++r) rows.push_back(r);
        const std::size_t k = std::min<std::size_t>(opt.coords_per_tensor, rows.size() * static_cast<std::size_t>(p->value.cols()));
        std::set<Eigen::Index> chosen;
        while (chosen.size() < k) {
            const auto r = rows[rng.below(rows.size())];
            const auto col = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p->value.cols())));
            chosen.insert(r * p->value.cols() + col);
        }
        for (auto idx : chosen) sites.push_back({p, idx});
    }
    if (opt.perturb_after_analytic) enc.layers[0].q_w.value(0, 0) += *opt.perturb_after_analytic;
    GradCheckReport r = compare_gradients(sites, loss, opt);
    r.tensors_total = tensors.size();
    r.passed = r.passed && r.tensors_covered == r.tensors_total;
    return r;
}

} // namespace pronoun
