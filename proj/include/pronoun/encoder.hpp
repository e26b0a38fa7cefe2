#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pronoun/autodiff.hpp"
#include "pronoun/error.hpp"
#include "pronoun/rng.hpp"
#include "pronoun/tokenizer.hpp"

namespace pronoun {

enum class ProjectionInit {
    Bert,  // truncated normal, std 0.02
    Lecun, // truncated normal, std 1/sqrt(fan_in)
};

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ff = 256;
    std::size_t max_positions = 512;
    std::size_t type_vocab_size = 2;
    double dropout_p = 0.1;
    double layernorm_epsilon = 1e-12;
    std::uint64_t init_seed = 0;
    ProjectionInit projection_init = ProjectionInit::Lecun;
    double embedding_init_std = 0.02;
    // 0 means the last layer; k in 1..n_layers selects that layer's output.
    std::size_t output_layer = 0;

    void validate() const {
        if (vocab_size == 0) throw ConfigError("encoder vocab_size must be positive");
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("d_model must be a positive multiple of n_heads");
        if (n_layers == 0 || d_ff == 0) throw ConfigError("n_layers and d_ff must be positive");
        if (max_positions < kMaxUnsplitContent + 2)
            throw ConfigError("max_positions must cover the longest wrapped sequence (512)");
        if (type_vocab_size == 0) throw ConfigError("type_vocab_size must be positive");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must be in [0, 1)");
        if (!(layernorm_epsilon > 0.0)) throw ConfigError("layernorm_epsilon must be positive");
        if (output_layer > n_layers) throw ConfigError("output_layer exceeds n_layers");
    }

    std::size_t head_dim() const { return d_model / n_heads; }
};

inline nlohmann::ordered_json to_json(const EncoderConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"n_layers", c.n_layers},
            {"d_ff", c.d_ff},
            {"max_positions", c.max_positions},
            {"type_vocab_size", c.type_vocab_size},
            {"dropout_p", c.dropout_p},
            {"layernorm_epsilon", c.layernorm_epsilon},
            {"init_seed", c.init_seed},
            {"projection_init", c.projection_init == ProjectionInit::Bert ? "bert" : "lecun"},
            {"embedding_init_std", c.embedding_init_std},
            {"output_layer", c.output_layer}};
}

// Reads known keys over the provided defaults; unknown keys are rejected.
inline EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig c = {}) {
    if (!j.is_object()) throw ConfigError("encoder config must be an object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
            else if (k == "d_model") c.d_model = v.get<std::size_t>();
            else if (k == "n_heads") c.n_heads = v.get<std::size_t>();
            else if (k == "n_layers") c.n_layers = v.get<std::size_t>();
            else if (k == "d_ff") c.d_ff = v.get<std::size_t>();
            else if (k == "max_positions") c.max_positions = v.get<std::size_t>();
            else if (k == "type_vocab_size") c.type_vocab_size = v.get<std::size_t>();
            else if (k == "dropout_p") c.dropout_p = v.get<double>();
            else if (k == "layernorm_epsilon") c.layernorm_epsilon = v.get<double>();
            else if (k == "init_seed") c.init_seed = v.get<std::uint64_t>();
            else if (k == "embedding_init_std") c.embedding_init_std = v.get<double>();
            else if (k == "output_layer") c.output_layer = v.get<std::size_t>();
            else if (k == "projection_init") {
                const auto s = v.get<std::string>();
                if (s == "bert") c.projection_init = ProjectionInit::Bert;
                else if (s == "lecun") c.projection_init = ProjectionInit::Lecun;
                else throw ConfigError("projection_init must be 'bert' or 'lecun'");
            } else
                throw ConfigError("unknown encoder config key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("encoder config: ") + e.what());
    }
    return c;
}

struct LayerParams {
    Parameter q_w, q_b, k_w, k_b, v_w, v_b;
    Parameter attn_out_w, attn_out_b, attn_ln_g, attn_ln_b;
    Parameter ff_in_w, ff_in_b, ff_out_w, ff_out_b, ff_ln_g, ff_ln_b;

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        for (auto* p : {&self.q_w, &self.q_b, &self.k_w, &self.k_b, &self.v_w, &self.v_b, &self.attn_out_w,
                        &self.attn_out_b, &self.attn_ln_g, &self.attn_ln_b, &self.ff_in_w, &self.ff_in_b,
                        &self.ff_out_w, &self.ff_out_b, &self.ff_ln_g, &self.ff_ln_b})
            f(*p);
    }
};

struct EncoderParams {
    EncoderConfig config;
    Parameter word, position, segment, emb_ln_g, emb_ln_b;
    std::vector<LayerParams> layers;

    template <class F>
    void for_each(F&& f) {
        for (auto* p : {&word, &position, &segment, &emb_ln_g, &emb_ln_b}) f(*p);
        for (auto& l : layers) LayerParams::visit(l, f);
    }
    template <class F>
    void for_each(F&& f) const {
        for (auto* p : {&word, &position, &segment, &emb_ln_g, &emb_ln_b}) f(*p);
        for (const auto& l : layers) LayerParams::visit(l, f);
    }

    std::vector<Parameter*> tensors() {
        std::vector<Parameter*> out;
        for_each([&](Parameter& p) { out.push_back(&p); });
        return out;
    }
    std::vector<const Parameter*> tensors() const {
        std::vector<const Parameter*> out;
        for_each([&](const Parameter& p) { out.push_back(&p); });
        return out;
    }

    void set_trainable(bool on) {
        for_each([&](Parameter& p) { p.trainable = on; });
    }
    void zero_grad() {
        for_each([](Parameter& p) { p.zero_grad(); });
    }
};

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline Parameter make_param(std::string name, Eigen::Index rows, Eigen::Index cols, bool is_vector) {
    Parameter p;
    p.name = std::move(name);
    p.value = Mat::Zero(rows, cols);
    p.is_vector = is_vector;
    return p;
}

inline void fill_truncated(Parameter& p, double std, Rng& rng) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = to_f32(rng.truncated_normal(std));
}

} // namespace detail

// Allocates tensors with the conventional names and shapes: dense weights
// are (out, in) and are applied as x * W^T.
inline EncoderParams shape_encoder(const EncoderConfig& cfg) {
    cfg.validate();
    using detail::make_param;
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto ff = static_cast<Eigen::Index>(cfg.d_ff);
    EncoderParams p;
    p.config = cfg;
    p.word = make_param("embeddings.word_embeddings.weight", static_cast<Eigen::Index>(cfg.vocab_size), d, false);
    p.position =
        make_param("embeddings.position_embeddings.weight", static_cast<Eigen::Index>(cfg.max_positions), d, false);
    p.segment = make_param("embeddings.token_type_embeddings.weight",
                           static_cast<Eigen::Index>(cfg.type_vocab_size), d, false);
    p.emb_ln_g = make_param("embeddings.LayerNorm.weight", 1, d, true);
    p.emb_ln_b = make_param("embeddings.LayerNorm.bias", 1, d, true);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string pre = "encoder.layer." + std::to_string(i) + ".";
        LayerParams l;
        l.q_w = make_param(pre + "attention.self.query.weight", d, d, false);
        l.q_b = make_param(pre + "attention.self.query.bias", 1, d, true);
        l.k_w = make_param(pre + "attention.self.key.weight", d, d, false);
        l.k_b = make_param(pre + "attention.self.key.bias", 1, d, true);
        l.v_w = make_param(pre + "attention.self.value.weight", d, d, false);
        l.v_b = make_param(pre + "attention.self.value.bias", 1, d, true);
        l.attn_out_w = make_param(pre + "attention.output.dense.weight", d, d, false);
        l.attn_out_b = make_param(pre + "attention.output.dense.bias", 1, d, true);
        l.attn_ln_g = make_param(pre + "attention.output.LayerNorm.weight", 1, d, true);
        l.attn_ln_b = make_param(pre + "attention.output.LayerNorm.bias", 1, d, true);
        l.ff_in_w = make_param(pre + "intermediate.dense.weight", ff, d, false);
        l.ff_in_b = make_param(pre + "intermediate.dense.bias", 1, ff, true);
        l.ff_out_w = make_param(pre + "output.dense.weight", d, ff, false);
        l.ff_out_b = make_param(pre + "output.dense.bias", 1, d, true);
        l.ff_ln_g = make_param(pre + "output.LayerNorm.weight", 1, d, true);
        l.ff_ln_b = make_param(pre + "output.LayerNorm.bias", 1, d, true);
        p.layers.push_back(std::move(l));
    }
    return p;
}

// Embeddings: truncated normal (embedding_init_std). Dense weights: truncated
// normal per projection_init. LayerNorm gain 1, all biases 0. Values are
// rounded to float so export/import round-trips exactly.
inline EncoderParams init_encoder(const EncoderConfig& cfg) {
    EncoderParams p = shape_encoder(cfg);
    Rng rng(cfg.init_seed);
    auto dense_std = [&](const Parameter& w) {
        return cfg.projection_init == ProjectionInit::Bert ? 0.02 : 1.0 / std::sqrt(static_cast<double>(w.value.cols()));
    };
    detail::fill_truncated(p.word, cfg.embedding_init_std, rng);
    detail::fill_truncated(p.position, cfg.embedding_init_std, rng);
    detail::fill_truncated(p.segment, cfg.embedding_init_std, rng);
    p.emb_ln_g.value.setOnes();
    for (auto& l : p.layers) {
        for (auto* w : {&l.q_w, &l.k_w, &l.v_w, &l.attn_out_w, &l.ff_in_w, &l.ff_out_w})
            detail::fill_truncated(*w, dense_std(*w), rng);
        l.attn_ln_g.value.setOnes();
        l.ff_ln_g.value.setOnes();
    }
    return p;
}

struct ForwardOptions {
    bool training = false; // enables dropout
    Rng* rng = nullptr;    // required when training with dropout_p > 0
};

// Parameter leaves bound to one tape, so repeated forwards on that tape share
// gradient buffers.
struct EncoderVars {
    Var word, position, segment, emb_ln_g, emb_ln_b;
    struct Layer {
        Var q_w, q_b, k_w, k_b, v_w, v_b, attn_out_w, attn_out_b, attn_ln_g, attn_ln_b;
        Var ff_in_w, ff_in_b, ff_out_w, ff_out_b, ff_ln_g, ff_ln_b;
    };
    std::vector<Layer> layers;
};

inline EncoderVars bind(Tape& t, EncoderParams& p) {
    EncoderVars v{t.param(p.word), t.param(p.position), t.param(p.segment), t.param(p.emb_ln_g),
                  t.param(p.emb_ln_b), {}};
    for (auto& l : p.layers) {
        v.layers.push_back({t.param(l.q_w), t.param(l.q_b), t.param(l.k_w), t.param(l.k_b), t.param(l.v_w),
                            t.param(l.v_b), t.param(l.attn_out_w), t.param(l.attn_out_b), t.param(l.attn_ln_g),
                            t.param(l.attn_ln_b), t.param(l.ff_in_w), t.param(l.ff_in_b), t.param(l.ff_out_w),
                            t.param(l.ff_out_b), t.param(l.ff_ln_g), t.param(l.ff_ln_b)});
    }
    return v;
}

namespace detail {

// Layer 0 is the embedding block, layers 1..n the transformer layers.
inline void check_finite(Var x, int layer) {
    if (!x.value().allFinite())
        throw NumericalError("non-finite activation at layer " + std::to_string(layer), layer);
}

inline Var dense(Var x, Var w, Var b) { return add_row(matmul_nt(x, w), b); }

} // namespace detail

// Post-LayerNorm BERT encoder over one sequence. pad[i] == true marks a pad
// position, which is excluded as an attention key. Returns L x d_model.
inline Var forward(const EncoderConfig& cfg, const EncoderVars& v, std::span<const TokenId> ids,
                   const std::vector<bool>& pad, const ForwardOptions& opt = {}) {
    const auto L = ids.size();
    if (L == 0) throw UsageError("forward over an empty sequence");
    if (L > cfg.max_positions) throw UsageError("sequence longer than max_positions");
    if (!pad.empty() && pad.size() != L) throw UsageError("pad mask length mismatch");
    const double p_drop = opt.training ? cfg.dropout_p : 0.0;
    if (p_drop > 0.0 && !opt.rng) throw UsageError("training forward needs an RNG for dropout");
    Rng* rng = opt.rng;
    auto drop = [&](Var x) { return p_drop > 0.0 ? dropout(x, p_drop, *rng) : x; };

    std::vector<Eigen::Index> tok(L), pos(L), seg(L, 0);
    std::vector<bool> key_valid(L, true);
    for (std::size_t i = 0; i < L; ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg.vocab_size)
            throw UsageError("token id out of vocabulary range");
        tok[i] = ids[i];
        pos[i] = static_cast<Eigen::Index>(i);
        if (!pad.empty()) key_valid[i] = !pad[i];
    }
    Var x = add(add(gather_rows(v.word, tok), gather_rows(v.position, pos)), gather_rows(v.segment, seg));
    x = drop(layer_norm(x, v.emb_ln_g, v.emb_ln_b, cfg.layernorm_epsilon));
    detail::check_finite(x, 0);

    const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t last = cfg.output_layer == 0 ? cfg.n_layers : cfg.output_layer;
    for (std::size_t li = 0; li < last; ++li) {
        const auto& l = v.layers[li];
        const Var q = detail::dense(x, l.q_w, l.q_b);
        const Var k = detail::dense(x, l.k_w, l.k_b);
        const Var val = detail::dense(x, l.v_w, l.v_b);
        std::vector<Var> heads;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * dh;
            const Var s = scale(matmul_nt(cols(q, off, dh), cols(k, off, dh)), inv_sqrt);
            const Var pr = drop(masked_softmax_rows(s, key_valid));
            heads.push_back(matmul(pr, cols(val, off, dh)));
        }
        const Var attn = drop(detail::dense(concat_cols(heads), l.attn_out_w, l.attn_out_b));
        x = layer_norm(add(x, attn), l.attn_ln_g, l.attn_ln_b, cfg.layernorm_epsilon);
        const Var ff = drop(detail::dense(gelu(detail::dense(x, l.ff_in_w, l.ff_in_b)), l.ff_out_w, l.ff_out_b));
        x = layer_norm(add(x, ff), l.ff_ln_g, l.ff_ln_b, cfg.layernorm_epsilon);
        detail::check_finite(x, static_cast<int>(li) + 1);
    }
    return x;
}

// Evaluation-mode hidden states on a private tape.
inline Mat encode(const EncoderParams& params, std::span<const TokenId> ids, const std::vector<bool>& pad = {}) {
    Tape t(false);
    auto& mut = const_cast<EncoderParams&>(params); // a non-recording tape only reads the values
    const EncoderVars v = bind(t, mut);
    return forward(params.config, v, ids, pad).value();
}

// Pads to the longest sequence with pad_id, encodes each row with its pad
// mask, and returns per-sequence hidden states trimmed to the true length.
inline std::vector<Mat> encode_batch(const EncoderParams& params, const std::vector<std::vector<TokenId>>& batch,
                                     TokenId pad_id) {
    std::size_t width = 0;
    for (const auto& s : batch) width = std::max(width, s.size());
    std::vector<Mat> out;
    for (const auto& s : batch) {
        std::vector<TokenId> ids(s);
        ids.resize(width, pad_id);
        std::vector<bool> pad(width, false);
        for (std::size_t i = s.size(); i < width; ++i) pad[i] = true;
        out.push_back(encode(params, ids, pad).topRows(static_cast<Eigen::Index>(s.size())));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Named-tensor files: a JSON manifest listing {name, shape, dtype, byte_offset}
// and a little-endian float32 blob.

namespace detail {

inline std::vector<std::size_t> tensor_shape(const Parameter& p) {
    if (p.is_vector) return {static_cast<std::size_t>(p.value.size())};
    return {static_cast<std::size_t>(p.value.rows()), static_cast<std::size_t>(p.value.cols())};
}

inline void put_f32(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
}

inline float get_f32(const unsigned char* b) {
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return std::bit_cast<float>(bits);
}

} // namespace detail

struct TensorFile {
    nlohmann::ordered_json manifest;
    std::string blob;
};

inline TensorFile pack_tensors(std::span<const Parameter* const> tensors) {
    TensorFile f;
    f.manifest = nlohmann::ordered_json::array();
    for (const Parameter* p : tensors) {
        f.manifest.push_back({{"name", p->name},
                              {"shape", detail::tensor_shape(*p)},
                              {"dtype", "f32"},
                              {"byte_offset", f.blob.size()}});
        for (Eigen::Index i = 0; i < p->value.size(); ++i) detail::put_f32(f.blob, p->value.data()[i]);
    }
    return f;
}

inline std::string encoder_bytes(const EncoderParams& p) {
    const auto t = p.tensors();
    return pack_tensors(t).blob;
}

// Fills each expected tensor from the file by name. Shapes must match; every
// manifest entry must be expected; the blob must be fully consumed.
inline void unpack_tensors(const TensorFile& f, std::span<Parameter* const> expected) {
    if (!f.manifest.is_array()) throw FormatError("tensor manifest must be a JSON array");
    std::map<std::string, const nlohmann::ordered_json*> entries;
    for (const auto& e : f.manifest) {
        if (!e.is_object() || !e.contains("name") || !e.contains("shape") || !e.contains("byte_offset"))
            throw FormatError("malformed tensor manifest entry");
        if (e.value("dtype", std::string("f32")) != "f32")
            throw FormatError("tensor " + e["name"].get<std::string>() + " has unsupported dtype");
        if (!entries.emplace(e["name"].get<std::string>(), &e).second)
            throw FormatError("duplicate tensor " + e["name"].get<std::string>());
    }
    std::size_t end = 0;
    for (Parameter* p : expected) {
        const auto it = entries.find(p->name);
        if (it == entries.end()) throw FormatError("missing tensor " + p->name);
        const auto& e = *it->second;
        const auto shape = e["shape"].get<std::vector<std::size_t>>();
        if (shape != detail::tensor_shape(*p)) {
            std::string want, got;
            for (auto s : detail::tensor_shape(*p)) want += (want.empty() ? "" : ",") + std::to_string(s);
            for (auto s : shape) got += (got.empty() ? "" : ",") + std::to_string(s);
            throw FormatError("shape mismatch for " + p->name + ": expected [" + want + "], got [" + got + "]");
        }
        const auto off = e["byte_offset"].get<std::size_t>();
        const auto bytes = static_cast<std::size_t>(p->value.size()) * 4;
        if (off > f.blob.size() || f.blob.size() - off < bytes)
            throw FormatError("tensor blob truncated while reading " + p->name);
        const auto* data = reinterpret_cast<const unsigned char*>(f.blob.data()) + off;
        for (Eigen::Index i = 0; i < p->value.size(); ++i)
            p->value.data()[i] = static_cast<double>(detail::get_f32(data + 4 * i));
        end = std::max(end, off + bytes);
        entries.erase(it);
    }
    if (!entries.empty()) throw FormatError("unexpected tensor " + entries.begin()->first + " in manifest");
    if (end != f.blob.size())
        throw FormatError("tensor blob has " + std::to_string(f.blob.size() - end) + " trailing bytes");
}

inline void write_tensor_file(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path,
                              const TensorFile& f) {
    std::ofstream m(manifest_path, std::ios::binary);
    std::ofstream b(blob_path, std::ios::binary);
    if (!m || !b) throw FormatError("cannot write tensor file " + manifest_path.string());
    m << f.manifest.dump(1) << '\n';
    b.write(f.blob.data(), static_cast<std::streamsize>(f.blob.size()));
}

inline TensorFile read_tensor_file(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path) {
    std::ifstream m(manifest_path);
    if (!m) throw FormatError("cannot open " + manifest_path.string());
    std::ifstream b(blob_path, std::ios::binary);
    if (!b) throw FormatError("cannot open " + blob_path.string());
    TensorFile f;
    try {
        f.manifest = nlohmann::ordered_json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    f.blob.assign(std::istreambuf_iterator<char>(b), std::istreambuf_iterator<char>());
    return f;
}

inline void export_weights(const EncoderParams& p, const std::filesystem::path& manifest_path,
                           const std::filesystem::path& blob_path) {
    const auto t = p.tensors();
    write_tensor_file(manifest_path, blob_path, pack_tensors(t));
}

inline EncoderParams import_weights(const EncoderConfig& cfg, const std::filesystem::path& manifest_path,
                                    const std::filesystem::path& blob_path) {
    EncoderParams p = shape_encoder(cfg);
    const auto t = p.tensors();
    unpack_tensors(read_tensor_file(manifest_path, blob_path), t);
    return p;
}

} // namespace pronoun
