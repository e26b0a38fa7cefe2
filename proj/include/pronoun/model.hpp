#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pronoun/autodiff.hpp"
#include "pronoun/encoder.hpp"
#include "pronoun/error.hpp"
#include "pronoun/evalstat.hpp"
#include "pronoun/rng.hpp"
#include "pronoun/tokenizer.hpp"

namespace pronoun {

enum class PoolingMode { Cls, PronounI, PronounFive };

inline std::string to_string(PoolingMode m) {
    switch (m) {
    case PoolingMode::Cls: return "cls";
    case PoolingMode::PronounI: return "pronoun-i";
    case PoolingMode::PronounFive: return "pronoun-five";
    }
    return "cls";
}

inline PoolingMode parse_pooling(std::string_view s) {
    if (s == "cls") return PoolingMode::Cls;
    if (s == "pronoun-i") return PoolingMode::PronounI;
    if (s == "pronoun-five") return PoolingMode::PronounFive;
    throw ConfigError("unknown pooling mode '" + std::string(s) + "'");
}

// A wrapped chunk ready for the encoder, carrying its parent sample's label.
struct ChunkExample {
    std::vector<TokenId> ids;
    std::vector<bool> mask_i;
    std::vector<bool> mask_five;
    int label = 0;

    const std::vector<bool>& mask(PoolingMode m) const { return m == PoolingMode::PronounI ? mask_i : mask_five; }
};

namespace detail {

inline std::vector<Eigen::Index> masked_rows(const std::vector<bool>& mask, Eigen::Index rows) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) idx.push_back(static_cast<Eigen::Index>(i));
    if (idx.empty()) throw InvariantError("pronoun pooling over an empty mask");
    if (idx.back() >= rows) throw UsageError("pronoun mask longer than the sequence");
    return idx;
}

} // namespace detail

// CLS takes row 0 and ignores the mask; pronoun modes average masked rows.
inline Var pool(Var hidden, const std::vector<bool>& mask, PoolingMode mode) {
    if (mode == PoolingMode::Cls) return mean_rows(hidden, {0});
    return mean_rows(hidden, detail::masked_rows(mask, hidden.rows()));
}

inline Eigen::RowVectorXd pool(const Mat& hidden, const std::vector<bool>& mask, PoolingMode mode) {
    if (mode == PoolingMode::Cls) return hidden.row(0);
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(hidden.cols());
    const auto idx = detail::masked_rows(mask, hidden.rows());
    for (auto r : idx) acc += hidden.row(r);
    return acc / static_cast<double>(idx.size());
}

// Fully connected 2-way head: logits = x * W^T + b.
struct Head {
    Parameter weight; // 2 x d
    Parameter bias;   // [2]

    std::vector<Parameter*> tensors() { return {&weight, &bias}; }
    std::vector<const Parameter*> tensors() const { return {&weight, &bias}; }
};

inline Head shape_head(std::size_t d) {
    Head h;
    h.weight = detail::make_param("classifier.weight", 2, static_cast<Eigen::Index>(d), false);
    h.bias = detail::make_param("classifier.bias", 1, 2, true);
    return h;
}

inline Head init_head(std::size_t d, std::uint64_t seed, double std = 0.02) {
    Head h = shape_head(d);
    Rng rng(seed);
    detail::fill_truncated(h.weight, std, rng);
    return h;
}

struct HeadVars {
    Var weight, bias;
};

inline HeadVars bind(Tape& t, Head& h) { return {t.param(h.weight), t.param(h.bias)}; }

inline Var classify(Var pooled, const HeadVars& h) { return add_row(matmul_nt(pooled, h.weight), h.bias); }

struct Classification {
    Eigen::Vector2d logits;
    double p_positive = 0.5;
};

inline Classification classify(const Eigen::RowVectorXd& pooled, const Head& h) {
    Classification c;
    c.logits = h.weight.value * pooled.transpose() + h.bias.value.row(0).transpose();
    // softmax over two logits, written as a logistic of their difference
    const double z = c.logits(1) - c.logits(0);
    c.p_positive = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    return c;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double peak_learning_rate = 1e-5;
    double warmup_proportion = 0.1;
    std::size_t max_epochs = 10;
    std::optional<std::size_t> early_stop_patience_epochs = 4;
    std::size_t batch_size = 16;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double weight_decay = 0.0;
    bool freeze_encoder = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(warmup_proportion >= 0.0 && warmup_proportion <= 1.0))
            throw ConfigError("warmup_proportion must be in [0, 1]");
        if (!(peak_learning_rate > 0.0)) throw ConfigError("peak_learning_rate must be positive");
        if (max_epochs == 0 || batch_size == 0) throw ConfigError("max_epochs and batch_size must be positive");
        if (early_stop_patience_epochs && *early_stop_patience_epochs == 0)
            throw ConfigError("early_stop_patience_epochs must be positive or null");
        if (weight_decay != 0.0) throw ConfigError("weight_decay other than 0 is not supported");
    }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j = {{"peak_learning_rate", c.peak_learning_rate},
                                {"warmup_proportion", c.warmup_proportion},
                                {"max_epochs", c.max_epochs},
                                {"early_stop_patience_epochs", nullptr},
                                {"batch_size", c.batch_size},
                                {"adam_beta1", c.adam_beta1},
                                {"adam_beta2", c.adam_beta2},
                                {"adam_epsilon", c.adam_epsilon},
                                {"weight_decay", c.weight_decay},
                                {"freeze_encoder", c.freeze_encoder},
                                {"seed", c.seed}};
    if (c.early_stop_patience_epochs) j["early_stop_patience_epochs"] = *c.early_stop_patience_epochs;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    if (!j.is_object()) throw ConfigError("train config must be an object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "peak_learning_rate") c.peak_learning_rate = v.get<double>();
            else if (k == "warmup_proportion") c.warmup_proportion = v.get<double>();
            else if (k == "max_epochs") c.max_epochs = v.get<std::size_t>();
            else if (k == "early_stop_patience_epochs") {
                if (v.is_null()) c.early_stop_patience_epochs.reset();
                else c.early_stop_patience_epochs = v.get<std::size_t>();
            } else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (k == "adam_beta1") c.adam_beta1 = v.get<double>();
            else if (k == "adam_beta2") c.adam_beta2 = v.get<double>();
            else if (k == "adam_epsilon") c.adam_epsilon = v.get<double>();
            else if (k == "weight_decay") c.weight_decay = v.get<double>();
            else if (k == "freeze_encoder") c.freeze_encoder = v.get<bool>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else throw ConfigError("unknown train config key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    return c;
}

inline std::size_t warmup_steps(std::size_t total_steps, double proportion) {
    return static_cast<std::size_t>(std::floor(proportion * static_cast<double>(total_steps)));
}

// Linear warmup from 0 to peak over `warmup` steps, then linear decay to 0 at
// `total`. Update k (0-based) uses lr_at(k).
inline double lr_at(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return 0.0;
    return peak * static_cast<double>(total - step) / static_cast<double>(std::max<std::size_t>(1, total - warmup));
}

struct AdamState {
    std::vector<Mat> m, v;
    std::size_t t = 0;
};

// One bias-corrected Adam update of every trainable tensor, using its grad.
inline void adam_step(std::span<Parameter* const> params, AdamState& s, double lr, const TrainConfig& c) {
    if (s.m.empty()) {
        for (const Parameter* p : params) {
            s.m.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
            s.v.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (s.m.size() != params.size()) throw UsageError("Adam state does not match the parameter list");
    ++s.t;
    const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(s.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        if (!p.trainable) continue;
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
        s.m[k] = c.adam_beta1 * s.m[k] + (1.0 - c.adam_beta1) * p.grad;
        s.v[k] = c.adam_beta2 * s.v[k] + (1.0 - c.adam_beta2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= lr * (s.m[k].array() / bc1) / ((s.v[k].array() / bc2).sqrt() + c.adam_epsilon);
    }
}

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_f1_macro = 0.0;
    bool improved = false;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    std::vector<double> lr_trace;
    std::vector<std::string> warnings;
    bool dropout_active = false;
    std::size_t total_steps = 0;
    std::size_t warmup_steps = 0;
    std::size_t stopped_after_epoch = 0;
};

inline nlohmann::ordered_json to_json(const TrainingLog& l) {
    nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
    for (const auto& e : l.epochs)
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_f1_macro", e.val_f1_macro},
                          {"improved", e.improved}});
    return {{"epochs", epochs},
            {"lr_trace", l.lr_trace},
            {"warnings", l.warnings},
            {"dropout_active", l.dropout_active},
            {"total_steps", l.total_steps},
            {"warmup_steps", l.warmup_steps},
            {"stopped_after_epoch", l.stopped_after_epoch}};
}

// Early-stopping bookkeeping. A tie with the best score is not an improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::optional<std::size_t> patience) : patience_(patience) {}

    // Returns true when this epoch's score becomes the new best.
    bool update(std::size_t epoch, double score) {
        if (best_epoch_ == 0 || score > best_score_) {
            best_epoch_ = epoch;
            best_score_ = score;
            since_ = 0;
            return true;
        }
        ++since_;
        return false;
    }

    bool should_stop() const { return patience_ && since_ >= *patience_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_score() const { return best_score_; }

private:
    std::optional<std::size_t> patience_;
    std::size_t best_epoch_ = 0; // 0 until the first update
    double best_score_ = -INFINITY;
    std::size_t since_ = 0;
};

struct TrainedModel {
    EncoderParams encoder;
    Head head;
    PoolingMode pooling = PoolingMode::Cls;
    bool frozen = true;
    std::size_t best_epoch = 0;
    double best_val_f1_macro = 0.0;
    TrainConfig config;
    TrainingLog log;
};

// Mean cross-entropy of the head over fixed features; gradients land in the
// head's Parameter::grad.
inline double head_loss_and_grad(Head& head, const Mat& features, std::span<const int> labels) {
    head.weight.zero_grad();
    head.bias.zero_grad();
    Tape t;
    const HeadVars hv = bind(t, head);
    const Var loss = softmax_cross_entropy_mean(classify(t.constant(features), hv), labels);
    t.backward(loss);
    return loss.value()(0, 0);
}

inline std::vector<double> head_predict(const Head& head, const Mat& features) {
    std::vector<double> p(static_cast<std::size_t>(features.rows()));
    for (Eigen::Index i = 0; i < features.rows(); ++i)
        p[static_cast<std::size_t>(i)] = classify(Eigen::RowVectorXd(features.row(i)), head).p_positive;
    return p;
}

// Pooled vectors for every mode from a single evaluation-mode forward per
// chunk. Rows align with the input chunks.
struct PooledFeatures {
    Mat cls, pronoun_i, pronoun_five;

    const Mat& get(PoolingMode m) const {
        return m == PoolingMode::Cls ? cls : m == PoolingMode::PronounI ? pronoun_i : pronoun_five;
    }
};

inline PooledFeatures pool_features(const EncoderParams& enc, std::span<const ChunkExample> chunks) {
    const auto d = static_cast<Eigen::Index>(enc.config.d_model);
    const auto n = static_cast<Eigen::Index>(chunks.size());
    PooledFeatures f{Mat(n, d), Mat(n, d), Mat(n, d)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& c = chunks[static_cast<std::size_t>(i)];
        const Mat h = encode(enc, c.ids);
        f.cls.row(i) = pool(h, c.mask_five, PoolingMode::Cls);
        f.pronoun_i.row(i) = pool(h, c.mask_i, PoolingMode::PronounI);
        f.pronoun_five.row(i) = pool(h, c.mask_five, PoolingMode::PronounFive);
    }
    return f;
}

namespace detail {

inline void check_train_inputs(std::span<const int> train_labels, std::size_t n_val, TrainingLog& log) {
    if (train_labels.empty()) throw DataQualityError("empty training set");
    if (n_val == 0) throw DataQualityError("empty validation set");
    const bool any0 = std::find(train_labels.begin(), train_labels.end(), 0) != train_labels.end();
    const bool any1 = std::find(train_labels.begin(), train_labels.end(), 1) != train_labels.end();
    if (!any0 || !any1) log.warnings.push_back("training set contains a single class");
}

inline double val_macro_f1(std::span<const int> labels, const std::vector<double>& probs) {
    return classification_metrics(labels, probs, 0.5).f1_macro;
}

} // namespace detail

// Head-only training on fixed pooled features (the frozen-encoder regime).
inline TrainedModel train_head(const Mat& train_x, std::span<const int> train_y, const Mat& val_x,
                               std::span<const int> val_y, Head head, const TrainConfig& cfg) {
    cfg.validate();
    TrainedModel m;
    m.config = cfg;
    m.frozen = true;
    detail::check_train_inputs(train_y, val_y.size(), m.log);
    if (static_cast<std::size_t>(train_x.rows()) != train_y.size() ||
        static_cast<std::size_t>(val_x.rows()) != val_y.size())
        throw UsageError("feature/label row mismatch");

    const std::size_t n = train_y.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    m.log.total_steps = cfg.max_epochs * steps_per_epoch;
    m.log.warmup_steps = warmup_steps(m.log.total_steps, cfg.warmup_proportion);

    Rng rng(cfg.seed ^ 0x5bd1e995ULL);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    AdamState adam;
    EarlyStopping stop(cfg.early_stop_patience_epochs);
    Head best = head;
    std::size_t step = 0;
    const auto params = head.tensors();
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < n; b += cfg.batch_size) {
            const std::size_t e = std::min(n, b + cfg.batch_size);
            Mat xb(static_cast<Eigen::Index>(e - b), train_x.cols());
            std::vector<int> yb;
            for (std::size_t k = b; k < e; ++k) {
                xb.row(static_cast<Eigen::Index>(k - b)) = train_x.row(static_cast<Eigen::Index>(order[k]));
                yb.push_back(train_y[order[k]]);
            }
            loss_sum += head_loss_and_grad(head, xb, yb);
            const double lr = lr_at(step++, m.log.total_steps, m.log.warmup_steps, cfg.peak_learning_rate);
            m.log.lr_trace.push_back(lr);
            adam_step(params, adam, lr, cfg);
        }
        const double f1 = detail::val_macro_f1(val_y, head_predict(head, val_x));
        const bool improved = stop.update(epoch, f1);
        if (improved) best = head;
        m.log.epochs.push_back({epoch, loss_sum / static_cast<double>(steps_per_epoch), f1, improved});
        m.log.stopped_after_epoch = epoch;
        if (stop.should_stop()) break;
    }
    m.head = std::move(best);
    m.best_epoch = stop.best_epoch();
    m.best_val_f1_macro = stop.best_score();
    return m;
}

inline std::vector<double> predict(const TrainedModel& m, std::span<const ChunkExample> chunks) {
    std::vector<double> p;
    p.reserve(chunks.size());
    for (const auto& c : chunks)
        p.push_back(classify(pool(encode(m.encoder, c.ids), c.mask(m.pooling), m.pooling), m.head).p_positive);
    return p;
}

// Mean cross-entropy over a batch of chunks through encoder and head, with
// gradients accumulated into trainable parameters.
inline double batch_loss_and_grad(EncoderParams& enc, Head& head, std::span<const ChunkExample* const> batch,
                                  PoolingMode mode, const ForwardOptions& opt) {
    Tape t;
    const EncoderVars ev = bind(t, enc);
    const HeadVars hv = bind(t, head);
    std::vector<Var> pooled;
    std::vector<int> labels;
    for (const ChunkExample* c : batch) {
        const Var h = forward(enc.config, ev, c->ids, {}, opt);
        pooled.push_back(pool(h, c->mask(mode), mode));
        labels.push_back(c->label);
    }
    const Var loss = softmax_cross_entropy_mean(classify(stack_rows(pooled), hv), labels);
    t.backward(loss);
    return loss.value()(0, 0);
}

// Full training. Frozen: pooled features are computed once with dropout off
// and only the head is updated. Fine-tune: encoder and head are updated with
// dropout active.
inline TrainedModel train(std::span<const ChunkExample> train_set, std::span<const ChunkExample> val_set,
                          const EncoderParams& encoder, PoolingMode mode, const TrainConfig& cfg) {
    cfg.validate();
    std::vector<int> ty, vy;
    for (const auto& c : train_set) ty.push_back(c.label);
    for (const auto& c : val_set) vy.push_back(c.label);
    const Head head0 = init_head(encoder.config.d_model, cfg.seed);

    if (cfg.freeze_encoder) {
        if (train_set.empty()) throw DataQualityError("empty training set");
        if (val_set.empty()) throw DataQualityError("empty validation set");
        const auto ft = pool_features(encoder, train_set);
        const auto fv = pool_features(encoder, val_set);
        TrainedModel m = train_head(ft.get(mode), ty, fv.get(mode), vy, head0, cfg);
        m.encoder = encoder;
        m.pooling = mode;
        return m;
    }

    TrainedModel m;
    m.config = cfg;
    m.frozen = false;
    m.pooling = mode;
    m.log.dropout_active = encoder.config.dropout_p > 0.0;
    detail::check_train_inputs(ty, vy.size(), m.log);

    EncoderParams enc = encoder;
    enc.set_trainable(true);
    Head head = head0;
    const std::size_t n = train_set.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    m.log.total_steps = cfg.max_epochs * steps_per_epoch;
    m.log.warmup_steps = warmup_steps(m.log.total_steps, cfg.warmup_proportion);

    std::vector<Parameter*> params = enc.tensors();
    for (auto* p : head.tensors()) params.push_back(p);

    Rng order_rng(cfg.seed ^ 0x5bd1e995ULL);
    Rng drop_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const ForwardOptions opt{true, &drop_rng};
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    AdamState adam;
    EarlyStopping stop(cfg.early_stop_patience_epochs);
    EncoderParams best_enc = enc;
    Head best_head = head;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < n; b += cfg.batch_size) {
            std::vector<const ChunkExample*> batch;
            for (std::size_t k = b; k < std::min(n, b + cfg.batch_size); ++k) batch.push_back(&train_set[order[k]]);
            for (auto* p : params) p->zero_grad();
            loss_sum += batch_loss_and_grad(enc, head, batch, mode, opt);
            const double lr = lr_at(step++, m.log.total_steps, m.log.warmup_steps, cfg.peak_learning_rate);
            m.log.lr_trace.push_back(lr);
            adam_step(params, adam, lr, cfg);
        }
        TrainedModel probe;
        probe.encoder = enc;
        probe.head = head;
        probe.pooling = mode;
        const double f1 = detail::val_macro_f1(vy, predict(probe, val_set));
        const bool improved = stop.update(epoch, f1);
        if (improved) {
            best_enc = enc;
            best_head = head;
        }
        m.log.epochs.push_back({epoch, loss_sum / static_cast<double>(steps_per_epoch), f1, improved});
        m.log.stopped_after_epoch = epoch;
        if (stop.should_stop()) break;
    }
    m.encoder = std::move(best_enc);
    m.head = std::move(best_head);
    m.best_epoch = stop.best_epoch();
    m.best_val_f1_macro = stop.best_score();
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: model.json + model.bin (encoder then head tensors), meta.json
// (configs, pooling, best epoch), log.json (training log).

inline void save_checkpoint(const TrainedModel& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<const Parameter*> tensors = m.encoder.tensors();
    for (const auto* p : m.head.tensors()) tensors.push_back(p);
    write_tensor_file(dir / "model.json", dir / "model.bin", pack_tensors(tensors));
    const nlohmann::ordered_json meta = {{"encoder_config", to_json(m.encoder.config)},
                                         {"train_config", to_json(m.config)},
                                         {"pooling", to_string(m.pooling)},
                                         {"frozen", m.frozen},
                                         {"best_epoch", m.best_epoch},
                                         {"best_val_f1_macro", m.best_val_f1_macro}};
    std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump(2) << '\n';
    std::ofstream(dir / "log.json", std::ios::binary) << to_json(m.log).dump(2) << '\n';
}

inline TrainedModel load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw FormatError("missing checkpoint metadata in " + dir.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint metadata: " + std::string(e.what()));
    }
    TrainedModel m;
    m.encoder = shape_encoder(encoder_config_from_json(meta.at("encoder_config")));
    m.config = train_config_from_json(meta.at("train_config"));
    m.pooling = parse_pooling(meta.at("pooling").get<std::string>());
    m.frozen = meta.at("frozen").get<bool>();
    m.best_epoch = meta.at("best_epoch").get<std::size_t>();
    m.best_val_f1_macro = meta.at("best_val_f1_macro").get<double>();
    m.head = shape_head(m.encoder.config.d_model);
    std::vector<Parameter*> tensors = m.encoder.tensors();
    for (auto* p : m.head.tensors()) tensors.push_back(p);
    unpack_tensors(read_tensor_file(dir / "model.json", dir / "model.bin"), tensors);
    return m;
}

} // namespace pronoun
