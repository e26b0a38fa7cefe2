#pragma once

#include <algorithm>
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

#include <nlohmann/json.hpp>

#include "pronoun/corpus.hpp"
#include "pronoun/encoder.hpp"
#include "pronoun/error.hpp"
#include "pronoun/evalstat.hpp"
#include "pronoun/lexicon.hpp"
#include "pronoun/model.hpp"
#include "pronoun/rng.hpp"
#include "pronoun/severity.hpp"
#include "pronoun/synth.hpp"
#include "pronoun/tokenizer.hpp"

namespace pronoun {

// ---------------------------------------------------------------------------
// Configuration

// Head-only schedule for the frozen regime.
inline TrainConfig frozen_head_defaults() {
    TrainConfig t;
    t.peak_learning_rate = 3e-2;
    t.max_epochs = 30;
    return t;
}

// Everything a pipeline run depends on. All seeds are derived from `seed`.
struct PipelineConfig {
    std::uint64_t seed = 42;
    std::size_t n_folds = 5;
    std::size_t runs = 5;
    double lexicon_lambda = 1.0;
    SynthConfig synth;
    EncoderConfig encoder;
    TrainConfig train = frozen_head_defaults(); // frozen encoder, head only
    TrainConfig finetune; // encoder and head

    void validate() const {
        if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
        if (runs < 1 || runs > n_folds) throw ConfigError("runs must lie in [1, n_folds]");
        if (!(lexicon_lambda >= 0.0)) throw ConfigError("lexicon_lambda must be non-negative");
        train.validate();
        finetune.validate();
    }
};

enum class SeedStream : std::uint64_t { Synth = 1, Split = 2, Encoder = 3, Train = 4 };

inline std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream, std::uint64_t index = 0) {
    std::uint64_t x = seed ^ (static_cast<std::uint64_t>(stream) * 0xa0761d6478bd642fULL) ^ (index * 0xe7037ed1a0b428dbULL);
    return Rng::splitmix64(x);
}

inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
    nlohmann::ordered_json synth = to_json(c.synth);
    synth.erase("seed");
    nlohmann::ordered_json enc = to_json(c.encoder);
    enc.erase("vocab_size");
    enc.erase("init_seed");
    auto train_json = [](TrainConfig t) {
        nlohmann::ordered_json j = to_json(t);
        j.erase("seed");
        j.erase("freeze_encoder");
        return j;
    };
    return {{"seed", c.seed},
            {"n_folds", c.n_folds},
            {"runs", c.runs},
            {"lexicon_lambda", c.lexicon_lambda},
            {"synth", synth},
            {"encoder", enc},
            {"train", train_json(c.train)},
            {"finetune", train_json(c.finetune)}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig c = {}) {
    if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "n_folds") c.n_folds = v.get<std::size_t>();
            else if (k == "runs") c.runs = v.get<std::size_t>();
            else if (k == "lexicon_lambda") c.lexicon_lambda = v.get<double>();
            else if (k == "synth") {
                nlohmann::json s = to_json(c.synth);
                for (const auto& [sk, sv] : v.items()) {
                    if (sk == "seed") throw ConfigError("synth.seed is derived from the pipeline seed");
                    s[sk] = sv;
                }
                c.synth = synth_config_from_json(s);
            } else if (k == "encoder") {
                for (const auto& [ek, ev] : v.items()) {
                    (void)ev;
                    if (ek == "vocab_size" || ek == "init_seed")
                        throw ConfigError("encoder." + ek + " is set by the pipeline");
                }
                c.encoder = encoder_config_from_json(v, c.encoder);
            } else if (k == "train" || k == "finetune") {
                if (v.contains("seed")) throw ConfigError(k + ".seed is derived from the pipeline seed");
                if (v.contains("freeze_encoder")) throw ConfigError(k + ".freeze_encoder is set by the section");
                TrainConfig& t = k == "train" ? c.train : c.finetune;
                t = train_config_from_json(v, t);
            } else
                throw ConfigError("unknown pipeline config key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pipeline config: ") + e.what());
    }
    c.validate();
    return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path, PipelineConfig c = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return pipeline_config_from_json(j, c);
}

inline SynthConfig synth_config_for(const PipelineConfig& c) {
    SynthConfig s = c.synth;
    s.seed = derive_seed(c.seed, SeedStream::Synth);
    return s;
}

inline EncoderConfig encoder_config_for(const PipelineConfig& c, std::size_t vocab_size) {
    EncoderConfig e = c.encoder;
    e.vocab_size = vocab_size;
    e.init_seed = derive_seed(c.seed, SeedStream::Encoder);
    e.validate();
    return e;
}

// Run k (1-based) validates on fold k.
inline TrainConfig train_config_for(const PipelineConfig& c, std::size_t run, bool frozen) {
    TrainConfig t = frozen ? c.train : c.finetune;
    t.freeze_encoder = frozen;
    t.seed = derive_seed(c.seed, SeedStream::Train, run);
    return t;
}

// ---------------------------------------------------------------------------
// Prepared data

struct PreparedSample {
    AggregatedSample sample;
    SplitTag split;
    std::vector<ChunkExample> chunks;
};

struct PreparedData {
    std::vector<PreparedSample> samples;
    nlohmann::ordered_json meta;
};

// Inserts "i" once per sample, chunks, then re-inserts per chunk where a later
// chunk lost it, so pronoun pooling is always defined.
inline std::vector<ChunkExample> make_chunks(std::span<const TokenId> content, int label, const Vocab& vocab) {
    const auto with_i = ensure_pronoun(std::vector<TokenId>(content.begin(), content.end()), vocab);
    std::vector<ChunkExample> out;
    for (const auto& seq : chunk(with_i, vocab)) {
        const std::vector<TokenId> body(seq.ids.begin() + 1, seq.ids.end() - 1);
        const auto wrapped = wrap_sequence(ensure_pronoun(body, vocab), vocab);
        ChunkExample c;
        c.ids = wrapped.ids;
        c.mask_i = locate_pronouns(c.ids, PronounMode::IOnly, vocab);
        c.mask_five = locate_pronouns(c.ids, PronounMode::FirstPersonFive, vocab);
        c.label = label;
        out.push_back(std::move(c));
    }
    return out;
}

inline PreparedData prepare(std::span<const MessageRecord> messages, std::span<const PhqRecord> phq,
                            const Tokenizer& tokenizer, const SplitConfig& split_cfg) {
    if (messages.empty()) throw DataQualityError("prepare: no messages");
    if (phq.empty()) throw DataQualityError("prepare: no PHQ-9 records");
    const auto windows = build_all_windows(std::vector<PhqRecord>(phq.begin(), phq.end()));
    const auto aggregated = aggregate(messages, windows, tokenizer);
    const auto retained = filter_participants(aggregated);
    std::vector<AggregatedSample> kept;
    for (const auto& s : aggregated)
        if (retained.count(s.participant_id)) kept.push_back(s);
    if (kept.empty()) throw DataQualityError("prepare: no participant has enough scored windows");
    const SplitResult sr = split(kept, split_cfg);

    PreparedData d;
    std::set<std::string> all_pids;
    for (const auto& r : phq) all_pids.insert(r.participant_id);
    std::vector<std::string> excluded;
    for (const auto& p : all_pids)
        if (!retained.count(p)) excluded.push_back(p);
    std::size_t n_chunks = 0, n_test = 0, n_unused = 0;
    std::vector<std::size_t> per_fold(split_cfg.n_folds, 0);
    for (std::size_t i = 0; i < kept.size(); ++i) {
        PreparedSample ps{kept[i], sr.tags[i], make_chunks(kept[i].content_ids, static_cast<int>(kept[i].label), tokenizer.vocab())};
        n_chunks += ps.chunks.size();
        if (ps.split.role == SplitRole::Test) ++n_test;
        else if (ps.split.role == SplitRole::Unused) ++n_unused;
        else ++per_fold[ps.split.fold - 1];
        d.samples.push_back(std::move(ps));
    }
    d.meta = {{"n_messages", messages.size()},
              {"n_phq_records", phq.size()},
              {"n_windows", windows.size()},
              {"n_aggregated", aggregated.size()},
              {"n_below_token_floor_or_empty", windows.size() - aggregated.size()},
              {"min_content_tokens", kMinContentTokens},
              {"participants_total", all_pids.size()},
              {"participants_retained", retained.size()},
              {"participants_excluded", excluded},
              {"participant_filter", "applied after aggregation: windows dropped by the token floor do not count"},
              {"n_samples", d.samples.size()},
              {"n_test", n_test},
              {"n_unused", n_unused},
              {"fold_sizes", per_fold},
              {"n_chunks", n_chunks},
              {"n_folds", split_cfg.n_folds},
              {"split_seed", split_cfg.seed},
              {"vocab_size", tokenizer.vocab().size()}};
    return d;
}

namespace detail {

inline std::vector<std::size_t> positions(const std::vector<bool>& m) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) out.push_back(i);
    return out;
}

inline std::vector<bool> mask_from(const nlohmann::json& pos, std::size_t n) {
    std::vector<bool> m(n, false);
    for (const auto& p : pos) {
        const auto k = p.get<std::size_t>();
        if (k >= n) throw FormatError("prepared data: mask position out of range");
        m[k] = true;
    }
    return m;
}

} // namespace detail

inline nlohmann::ordered_json to_json(const PreparedSample& p) {
    nlohmann::ordered_json chunks = nlohmann::ordered_json::array();
    for (const auto& c : p.chunks)
        chunks.push_back({{"ids", c.ids},
                          {"i_positions", detail::positions(c.mask_i)},
                          {"five_positions", detail::positions(c.mask_five)}});
    const auto& s = p.sample;
    return {{"id", s.id()},
            {"participant_id", s.participant_id},
            {"anchor_ordinal", s.window.anchor_ordinal},
            {"window_start", format_rfc3339(s.window.start)},
            {"window_end", format_rfc3339(s.window.end)},
            {"phq_total", s.phq_total},
            {"label", static_cast<int>(s.label)},
            {"content_token_count", s.content_token_count},
            {"split", p.split.to_string()},
            {"text", s.text},
            {"chunks", chunks}};
}

inline PreparedSample prepared_sample_from_json(const nlohmann::json& j) {
    PreparedSample p;
    auto& s = p.sample;
    s.participant_id = j.at("participant_id").get<std::string>();
    s.window.anchor_ordinal = j.at("anchor_ordinal").get<std::size_t>();
    s.window.start = parse_rfc3339(j.at("window_start").get<std::string>());
    s.window.end = parse_rfc3339(j.at("window_end").get<std::string>());
    s.phq_total = j.at("phq_total").get<int>();
    s.label = label_for(s.phq_total);
    if (static_cast<int>(s.label) != j.at("label").get<int>())
        throw FormatError("prepared sample " + s.id() + ": label disagrees with phq_total");
    s.window.anchor = {s.participant_id, s.window.end, s.phq_total};
    s.content_token_count = j.at("content_token_count").get<std::size_t>();
    s.text = j.at("text").get<std::string>();
    p.split = SplitTag::parse(j.at("split").get<std::string>());
    for (const auto& c : j.at("chunks")) {
        ChunkExample e;
        e.ids = c.at("ids").get<std::vector<TokenId>>();
        e.mask_i = detail::mask_from(c.at("i_positions"), e.ids.size());
        e.mask_five = detail::mask_from(c.at("five_positions"), e.ids.size());
        e.label = static_cast<int>(s.label);
        p.chunks.push_back(std::move(e));
    }
    return p;
}

inline void write_prepared(const PreparedData& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "prepared.jsonl", std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + (dir / "prepared.jsonl").string());
    for (const auto& s : d.samples) out << to_json(s).dump() << '\n';
    std::ofstream(dir / "prepared_meta.json", std::ios::binary) << d.meta.dump(2) << '\n';
}

inline PreparedData read_prepared(const std::filesystem::path& dir) {
    PreparedData d;
    std::ifstream in(dir / "prepared.jsonl");
    if (!in) throw DataQualityError("missing " + (dir / "prepared.jsonl").string() + "; run prepare first");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            d.samples.push_back(prepared_sample_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("prepared.jsonl line " + std::to_string(n) + ": " + e.what());
        }
    }
    if (d.samples.empty()) throw DataQualityError("prepared.jsonl is empty");
    std::ifstream m(dir / "prepared_meta.json");
    if (!m) throw DataQualityError("missing " + (dir / "prepared_meta.json").string());
    d.meta = nlohmann::ordered_json::parse(m);
    return d;
}

// Flat views of the prepared chunks, in sample order.
struct ChunkRef {
    std::size_t sample = 0;
    std::size_t index = 0; // within the sample
};

inline std::vector<ChunkRef> chunks_where(const PreparedData& d, const std::function<bool(const SplitTag&)>& keep) {
    std::vector<ChunkRef> out;
    for (std::size_t s = 0; s < d.samples.size(); ++s)
        if (keep(d.samples[s].split))
            for (std::size_t k = 0; k < d.samples[s].chunks.size(); ++k) out.push_back({s, k});
    return out;
}

inline std::vector<std::size_t> samples_where(const PreparedData& d, const std::function<bool(const SplitTag&)>& keep) {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < d.samples.size(); ++s)
        if (keep(d.samples[s].split)) out.push_back(s);
    return out;
}

inline bool is_test(const SplitTag& t) { return t.role == SplitRole::Test; }
inline bool is_fold(const SplitTag& t) { return t.role == SplitRole::Fold; }

inline std::vector<ChunkExample> gather(const PreparedData& d, std::span<const ChunkRef> refs) {
    std::vector<ChunkExample> out;
    out.reserve(refs.size());
    for (const auto& r : refs) out.push_back(d.samples[r.sample].chunks[r.index]);
    return out;
}

// ---------------------------------------------------------------------------
// Lexicon features

inline std::vector<std::vector<double>> lexicon_rows(const PreparedData& d, const Lexicon& lex) {
    std::vector<std::vector<double>> rows;
    rows.reserve(d.samples.size());
    for (const auto& s : d.samples) rows.push_back(extract_features(s.sample.text, lex));
    return rows;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline void write_features_csv(const PreparedData& d, const Lexicon& lex, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + path.string());
    out << "sample_id,split,label,phq_total";
    for (const auto& c : lex.column_names()) out << ',' << c;
    out << '\n';
    const auto rows = lexicon_rows(d, lex);
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        const auto& s = d.samples[i];
        out << s.sample.id() << ',' << s.split.to_string() << ',' << static_cast<int>(s.sample.label) << ','
            << s.sample.phq_total;
        for (double v : rows[i]) out << ',' << format_double(v);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Training

struct ModelSpec {
    PoolingMode pooling = PoolingMode::Cls;
    bool frozen = true;

    std::string name() const { return to_string(pooling) + (frozen ? "_frozen" : "_finetune"); }
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct TrainedFamily {
    ModelSpec spec;
    std::vector<TrainedModel> runs; // run k at index k-1
};

// Encoder outputs pooled every way for a set of chunks; frozen-mode training
// and evaluation of all pooling modes share one forward pass per chunk.
struct FeatureCache {
    std::vector<ChunkRef> refs;
    PooledFeatures features;
    std::map<std::pair<std::size_t, std::size_t>, Eigen::Index> row_of;

    Mat rows(std::span<const ChunkRef> which, PoolingMode mode) const {
        const Mat& src = features.get(mode);
        Mat out(static_cast<Eigen::Index>(which.size()), src.cols());
        for (std::size_t i = 0; i < which.size(); ++i)
            out.row(static_cast<Eigen::Index>(i)) = src.row(row_of.at({which[i].sample, which[i].index}));
        return out;
    }
};

inline FeatureCache build_feature_cache(const PreparedData& d, const EncoderParams& enc, std::vector<ChunkRef> refs) {
    FeatureCache c;
    c.refs = std::move(refs);
    c.features = pool_features(enc, gather(d, c.refs));
    for (std::size_t i = 0; i < c.refs.size(); ++i)
        c.row_of[{c.refs[i].sample, c.refs[i].index}] = static_cast<Eigen::Index>(i);
    return c;
}

inline std::vector<int> labels_of(const PreparedData& d, std::span<const ChunkRef> refs) {
    std::vector<int> y;
    for (const auto& r : refs) y.push_back(d.samples[r.sample].chunks[r.index].label);
    return y;
}

inline std::vector<ChunkRef> run_train_chunks(const PreparedData& d, std::size_t run) {
    return chunks_where(d, [&](const SplitTag& t) { return is_fold(t) && t.fold != run; });
}

inline std::vector<ChunkRef> run_val_chunks(const PreparedData& d, std::size_t run) {
    return chunks_where(d, [&](const SplitTag& t) { return is_fold(t) && t.fold == run; });
}

// Frozen families reuse `cache` (built over the fold chunks when absent).
// Each frozen run is exactly what `train` computes in frozen mode: the head
// starts from init_head(d, seed) and sees the same pooled rows.
inline std::vector<TrainedFamily> train_families(const PreparedData& d, const EncoderParams& encoder,
                                                 std::span<const ModelSpec> specs, const PipelineConfig& cfg,
                                                 const FeatureCache* cache = nullptr) {
    cfg.validate();
    std::optional<FeatureCache> own;
    const bool any_frozen = std::any_of(specs.begin(), specs.end(), [](const ModelSpec& s) { return s.frozen; });
    if (any_frozen && !cache) {
        own = build_feature_cache(d, encoder, chunks_where(d, is_fold));
        cache = &*own;
    }
    std::vector<TrainedFamily> out;
    for (const auto& spec : specs) {
        TrainedFamily fam{spec, {}};
        for (std::size_t run = 1; run <= cfg.runs; ++run) {
            const auto tr = run_train_chunks(d, run);
            const auto va = run_val_chunks(d, run);
            if (tr.empty() || va.empty())
                throw DataQualityError("run " + std::to_string(run) + " has an empty training or validation fold");
            const TrainConfig tc = train_config_for(cfg, run, spec.frozen);
            if (spec.frozen) {
                const auto ty = labels_of(d, tr), vy = labels_of(d, va);
                TrainedModel m = train_head(cache->rows(tr, spec.pooling), ty, cache->rows(va, spec.pooling), vy,
                                            init_head(encoder.config.d_model, tc.seed), tc);
                m.encoder = encoder;
                m.pooling = spec.pooling;
                fam.runs.push_back(std::move(m));
            } else {
                fam.runs.push_back(train(gather(d, tr), gather(d, va), encoder, spec.pooling, tc));
            }
        }
        out.push_back(std::move(fam));
    }
    return out;
}

inline std::filesystem::path run_dir(const std::filesystem::path& out, const ModelSpec& spec, std::size_t run) {
    return out / "models" / spec.name() / ("run_" + std::to_string(run));
}

inline void save_family(const TrainedFamily& f, const std::filesystem::path& out) {
    for (std::size_t k = 0; k < f.runs.size(); ++k) save_checkpoint(f.runs[k], run_dir(out, f.spec, k + 1));
}

inline std::vector<TrainedFamily> load_families(const std::filesystem::path& out, std::size_t runs) {
    std::vector<TrainedFamily> fams;
    const auto root = out / "models";
    if (!std::filesystem::exists(root)) throw DataQualityError("no trained models under " + root.string());
    for (PoolingMode p : {PoolingMode::Cls, PoolingMode::PronounI, PoolingMode::PronounFive})
        for (bool frozen : {true, false}) {
            const ModelSpec spec{p, frozen};
            if (!std::filesystem::exists(root / spec.name())) continue;
            TrainedFamily f{spec, {}};
            for (std::size_t k = 1; k <= runs; ++k) {
                const auto dir = run_dir(out, spec, k);
                if (!std::filesystem::exists(dir / "meta.json"))
                    throw DataQualityError("missing checkpoint " + dir.string());
                f.runs.push_back(load_checkpoint(dir));
            }
            fams.push_back(std::move(f));
        }
    if (fams.empty()) throw DataQualityError("no trained models under " + root.string());
    return fams;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Predictions {
    std::string model;
    bool chunk_level = true;
    std::vector<ChunkRef> rows; // chunk-level rows; sample-level rows use index 0
    std::vector<int> labels;
    std::vector<std::vector<double>> per_run; // per_run[k][row]
};

struct LexiconBaseline {
    std::string name;
    FeatureSet set;
};

inline const std::vector<LexiconBaseline>& lexicon_baselines() {
    static const std::vector<LexiconBaseline> b = {{"liwc_i", FeatureSet::IOnly}, {"liwc_all", FeatureSet::All}};
    return b;
}

// Test-chunk features keyed by encoder bytes, so frozen models sharing an
// encoder are encoded once.
class TestFeatureStore {
  public:
    const FeatureCache& get(const PreparedData& d, const EncoderParams& enc) {
        std::string key = encoder_bytes(enc);
        for (const auto& [k, c] : entries_)
            if (k == key) return c;
        entries_.emplace_back(std::move(key), build_feature_cache(d, enc, chunks_where(d, is_test)));
        return entries_.back().second;
    }

  private:
    std::vector<std::pair<std::string, FeatureCache>> entries_;
};

inline Predictions predict_family(const PreparedData& d, const TrainedFamily& f, TestFeatureStore& store) {
    Predictions p;
    p.model = f.spec.name();
    p.rows = chunks_where(d, is_test);
    if (p.rows.empty()) throw DataQualityError("empty test set");
    p.labels = labels_of(d, p.rows);
    for (const auto& m : f.runs) {
        if (m.frozen) p.per_run.push_back(head_predict(m.head, store.get(d, m.encoder).rows(p.rows, m.pooling)));
        else p.per_run.push_back(predict(m, gather(d, p.rows)));
    }
    return p;
}

// Lexicon logistic regression per run, fitted on the run's training folds and
// scored on test samples.
inline Predictions predict_lexicon(const PreparedData& d, const Lexicon& lex, const LexiconBaseline& b,
                                   const PipelineConfig& cfg) {
    const auto rows = lexicon_rows(d, lex);
    const auto cols = feature_columns(lex, b.set);
    Predictions p;
    p.model = b.name;
    p.chunk_level = false;
    const auto test = samples_where(d, is_test);
    if (test.empty()) throw DataQualityError("empty test set");
    auto matrix = [&](const std::vector<std::size_t>& idx) {
        std::vector<std::vector<double>> r;
        for (auto i : idx) r.push_back(rows[i]);
        return feature_matrix(r, cols);
    };
    for (auto i : test) {
        p.rows.push_back({i, 0});
        p.labels.push_back(static_cast<int>(d.samples[i].sample.label));
    }
    const FeatureMatrix xt_raw = matrix(test);
    for (std::size_t run = 1; run <= cfg.runs; ++run) {
        const auto tr = samples_where(d, [&](const SplitTag& t) { return is_fold(t) && t.fold != run; });
        std::vector<int> y;
        for (auto i : tr) y.push_back(static_cast<int>(d.samples[i].sample.label));
        const FeatureMatrix x = matrix(tr);
        const Standardizer st = fit_standardizer(x);
        LogRegOptions opt;
        opt.lambda = cfg.lexicon_lambda;
        const LogisticModel m = fit_logreg(st.apply(x), y, opt);
        p.per_run.push_back(predict_logreg(m, st.apply(xt_raw)));
    }
    return p;
}

inline nlohmann::ordered_json to_json(const MetricsReport& m) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
    return {{"f1_macro", m.f1_macro},   {"f1_positive", m.f1_positive}, {"f1_negative", m.f1_negative},
            {"accuracy", m.accuracy},   {"precision_positive", m.precision_positive},
            {"recall_positive", m.recall_positive},
            {"auroc", opt(m.auroc)},    {"auprc", opt(m.auprc)},       {"n_pos", m.n_pos},
            {"n_neg", m.n_neg},         {"threshold", m.threshold}};
}

inline const std::vector<std::string>& reported_metrics() {
    static const std::vector<std::string> k = {"f1_macro", "f1_positive", "accuracy", "auroc", "auprc"};
    return k;
}

inline std::optional<double> metric_value(const MetricsReport& m, const std::string& k) {
    if (k == "f1_macro") return m.f1_macro;
    if (k == "f1_positive") return m.f1_positive;
    if (k == "accuracy") return m.accuracy;
    if (k == "auroc") return m.auroc;
    if (k == "auprc") return m.auprc;
    throw UsageError("unknown metric " + k);
}

struct ModelEvaluation {
    Predictions predictions;
    std::vector<MetricsReport> runs;

    std::optional<double> mean(const std::string& metric) const {
        std::vector<double> v;
        for (const auto& r : runs) {
            const auto x = metric_value(r, metric);
            if (!x) return std::nullopt;
            v.push_back(*x);
        }
        return pronoun::mean(v);
    }

    std::vector<double> series(const std::string& metric) const {
        std::vector<double> v;
        for (const auto& r : runs) v.push_back(metric_value(r, metric).value_or(NAN));
        return v;
    }
};

inline ModelEvaluation evaluate(Predictions p) {
    ModelEvaluation e;
    for (const auto& probs : p.per_run) e.runs.push_back(classification_metrics(p.labels, probs, 0.5));
    e.predictions = std::move(p);
    return e;
}

// The comparison baseline for a model: CLS pooling in the same regime for
// encoder models, frozen CLS for lexicon baselines.
inline std::optional<std::string> baseline_for(const std::string& model) {
    if (model.starts_with("cls_")) return std::nullopt;
    if (model.starts_with("liwc_")) return std::string("cls_frozen");
    return "cls" + model.substr(model.find('_'));
}

inline nlohmann::ordered_json build_report(const PreparedData& d, std::span<const ModelEvaluation> evals,
                                           const PipelineConfig& cfg) {
    std::map<std::string, const ModelEvaluation*> by_name;
    for (const auto& e : evals) by_name[e.predictions.model] = &e;
    const auto test_chunks = chunks_where(d, is_test);
    const auto test_samples = samples_where(d, is_test);
    std::size_t pos_chunks = 0, pos_samples = 0;
    for (const auto& r : test_chunks) pos_chunks += d.samples[r.sample].chunks[r.index].label == 1;
    for (auto i : test_samples) pos_samples += d.samples[i].sample.label == Label::Positive;

    nlohmann::ordered_json models = nlohmann::ordered_json::array();
    for (const auto& e : evals) {
        const std::string& name = e.predictions.model;
        nlohmann::ordered_json per_run = nlohmann::ordered_json::array();
        for (std::size_t k = 0; k < e.runs.size(); ++k) {
            auto j = to_json(e.runs[k]);
            j["run"] = k + 1;
            per_run.push_back(j);
        }
        nlohmann::ordered_json means = nlohmann::ordered_json::object();
        for (const auto& m : reported_metrics()) {
            const auto v = e.mean(m);
            means[m] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
        }
        nlohmann::ordered_json cmp = nullptr;
        if (const auto base = baseline_for(name); base && by_name.count(*base)) {
            cmp = {{"baseline", *base}};
            for (const auto& m : reported_metrics()) {
                const auto a = e.series(m), b = by_name.at(*base)->series(m);
                const bool finite = std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); }) &&
                                    std::all_of(b.begin(), b.end(), [](double x) { return std::isfinite(x); });
                if (!finite || a.size() != b.size()) {
                    cmp[m] = {{"undefined", "metric missing in some run"}};
                    continue;
                }
                try {
                    const TTestResult t = paired_t(a, b);
                    cmp[m] = {{"mean_difference", pronoun::mean(a) - pronoun::mean(b)},
                              {"t", t.t},
                              {"df", t.df},
                              {"p_two_sided", t.p_two_sided}};
                } catch (const UndefinedStatisticError& ex) {
                    cmp[m] = {{"undefined", ex.what()}};
                }
            }
        }
        models.push_back({{"name", name},
                          {"unit", e.predictions.chunk_level ? "chunk" : "sample"},
                          {"n_test_rows", e.predictions.rows.size()},
                          {"mean", means},
                          {"vs_baseline", cmp},
                          {"runs", per_run}});
    }
    return {{"runs", cfg.runs},
            {"threshold", 0.5},
            {"test_set",
             {{"samples", test_samples.size()},
              {"positive_samples", pos_samples},
              {"chunks", test_chunks.size()},
              {"positive_chunks", pos_chunks}}},
            {"models", models}};
}

inline void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// One row per (model, run, test row).
inline void write_predictions_csv(const PreparedData& d, std::span<const ModelEvaluation> evals,
                                  const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + path.string());
    out << "model,unit,run,sample_id,chunk,phq_total,label,p_positive\n";
    for (const auto& e : evals) {
        const auto& p = e.predictions;
        for (std::size_t k = 0; k < p.per_run.size(); ++k)
            for (std::size_t i = 0; i < p.rows.size(); ++i) {
                const auto& s = d.samples[p.rows[i].sample].sample;
                out << p.model << ',' << (p.chunk_level ? "chunk" : "sample") << ',' << k + 1 << ',' << s.id() << ','
                    << p.rows[i].index << ',' << s.phq_total << ',' << p.labels[i] << ','
                    << format_double(p.per_run[k][i]) << '\n';
            }
    }
}

struct PredictionRow {
    std::string model, unit, sample_id;
    std::size_t run = 0, chunk = 0;
    int phq_total = 0, label = 0;
    double p_positive = 0.0;
};

inline std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataQualityError("missing " + path.string() + "; run eval first");
    std::vector<PredictionRow> rows;
    std::string line;
    std::getline(in, line);
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 8) throw FormatError(path.string() + " line " + std::to_string(n) + ": expected 8 fields");
        try {
            rows.push_back({f[0], f[1], f[3], std::stoul(f[2]), std::stoul(f[4]), std::stoi(f[5]), std::stoi(f[6]),
                            std::stod(f[7])});
        } catch (const std::exception&) {
            throw FormatError(path.string() + " line " + std::to_string(n) + ": malformed field");
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Correlations and severity bins

// Per-measure values on test samples: each model's positive probability
// averaged over runs and chunks, and the raw first-person percentage.
struct SampleMeasures {
    std::vector<std::string> names;
    std::map<std::string, std::map<std::string, double>> values; // measure -> sample id -> value
};

inline SampleMeasures sample_measures(const PreparedData& d, std::span<const PredictionRow> preds) {
    SampleMeasures m;
    std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> acc;
    for (const auto& r : preds) {
        if (!acc.count(r.model)) m.names.push_back(r.model);
        auto& a = acc[r.model][r.sample_id];
        a.first += r.p_positive;
        ++a.second;
    }
    for (const auto& [model, per] : acc)
        for (const auto& [id, a] : per) m.values[model][id] = a.first / static_cast<double>(a.second);
    const Lexicon lex = Lexicon::default_lexicon();
    m.names.emplace_back("liwc_i_percent");
    for (auto i : samples_where(d, is_test))
        m.values["liwc_i_percent"][d.samples[i].sample.id()] = extract_features(d.samples[i].sample.text, lex)[0];
    return m;
}

inline double population_median(std::span<const EmaResponse> ema, EmaQuestion q) {
    std::vector<double> v;
    for (const auto& r : ema)
        if (r.question == q) v.push_back(r.value);
    const auto m = median(v);
    if (!m) throw DataQualityError("no EMA responses for " + std::string(to_string(q)));
    return *m;
}

inline void write_correlations_csv(const PreparedData& d, std::span<const PredictionRow> preds,
                                   std::span<const EmaResponse> ema, const std::filesystem::path& path) {
    const SampleMeasures measures = sample_measures(d, preds);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + path.string());
    out << "measure,question,n,tau_b,p_value,median_cut,n_low,mean_low,n_high,mean_high,group_t,group_df,group_p,note\n";
    for (const auto& name : measures.names)
        for (EmaQuestion q : kEmaQuestions) {
            std::vector<double> x, y;
            for (auto i : samples_where(d, is_test)) {
                const auto& s = d.samples[i].sample;
                const auto it = measures.values.at(name).find(s.id());
                if (it == measures.values.at(name).end()) continue;
                const auto med = ema_median(ema, s.window, q);
                if (!med) continue;
                x.push_back(it->second);
                y.push_back(*med);
            }
            std::string note;
            std::optional<KendallResult> tau;
            if (x.size() >= 2) {
                try {
                    tau = kendall_tau(x, y);
                } catch (const UndefinedStatisticError& e) {
                    note = e.what();
                }
            } else {
                note = "fewer than two windows with EMA responses";
            }
            const double cut = population_median(ema, q);
            const MedianSplit ms = median_split(x, y, cut);
            out << name << ',' << to_string(q) << ',' << x.size() << ','
                << (tau ? format_double(tau->tau) : "") << ',' << (tau ? format_double(tau->p_value) : "") << ','
                << format_double(cut) << ',' << ms.n_low << ',' << format_optional(ms.mean_low) << ',' << ms.n_high
                << ',' << format_optional(ms.mean_high) << ','
                << (ms.difference ? format_double(ms.difference->t) : "") << ','
                << (ms.difference ? format_double(ms.difference->df) : "") << ','
                << (ms.difference ? format_double(ms.difference->p_two_sided) : "") << ',' << note << '\n';
        }
}

// Model measures are binned per test chunk (averaged over runs), the lexicon
// percentage per test sample.
inline void write_bins_csv(const PreparedData& d, std::span<const PredictionRow> preds, const std::filesystem::path& path) {
    std::map<std::string, std::map<std::pair<std::string, std::size_t>, std::pair<double, std::size_t>>> acc;
    std::map<std::pair<std::string, std::size_t>, int> totals;
    std::vector<std::string> order;
    for (const auto& r : preds) {
        if (!acc.count(r.model)) order.push_back(r.model);
        auto& a = acc[r.model][{r.sample_id, r.chunk}];
        a.first += r.p_positive;
        ++a.second;
        totals[{r.sample_id, r.chunk}] = r.phq_total;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + path.string());
    out << "measure,level,n,mean,sem\n";
    auto emit = [&](const std::string& name, const std::vector<int>& t, const std::vector<double>& v) {
        for (const auto& b : bin_means(t, v))
            out << name << ',' << to_string(b.level) << ',' << b.n << ',' << format_optional(b.mean) << ','
                << format_optional(b.sem) << '\n';
    };
    for (const auto& name : order) {
        std::vector<int> t;
        std::vector<double> v;
        for (const auto& [key, a] : acc.at(name)) {
            t.push_back(totals.at(key));
            v.push_back(a.first / static_cast<double>(a.second));
        }
        emit(name, t, v);
    }
    const Lexicon lex = Lexicon::default_lexicon();
    std::vector<int> t;
    std::vector<double> v;
    for (auto i : samples_where(d, is_test)) {
        t.push_back(d.samples[i].sample.phq_total);
        v.push_back(extract_features(d.samples[i].sample.text, lex)[0]);
    }
    emit("liwc_i_percent", t, v);
}

} // namespace pronoun
