#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "pronoun/gradcheck.hpp"
#include "pronoun/pipeline.hpp"

namespace pronoun {

// ---------------------------------------------------------------------------
// Digests and run manifests

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 digest failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += kHex[md[i] >> 4];
        out += kHex[md[i] & 15];
    }
    return out;
}

inline std::string file_sha256(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataQualityError("cannot read " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return sha256_hex(s.str());
}

struct ArtifactDigest {
    std::string path; // "<root>:<relative path>"
    std::string sha256;
};

struct RunManifest {
    std::string command;
    nlohmann::ordered_json config;
    nlohmann::ordered_json seeds = nlohmann::ordered_json::object();
    std::vector<ArtifactDigest> inputs, outputs;
    nlohmann::ordered_json timings = nlohmann::ordered_json::object();

    static ArtifactDigest digest(const std::string& root_name, const std::filesystem::path& root,
                                 const std::filesystem::path& file) {
        return {root_name + ":" + std::filesystem::relative(file, root).generic_string(), file_sha256(file)};
    }

    void input(const std::string& root_name, const std::filesystem::path& root, const std::filesystem::path& f) {
        inputs.push_back(digest(root_name, root, f));
    }
    void output(const std::string& root_name, const std::filesystem::path& root, const std::filesystem::path& f) {
        outputs.push_back(digest(root_name, root, f));
    }
    // Every regular file below `dir`, in sorted order.
    void output_tree(const std::string& root_name, const std::filesystem::path& root, const std::filesystem::path& dir) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) output(root_name, root, f);
    }
};

inline nlohmann::ordered_json to_json(const RunManifest& m) {
    auto list = [](const std::vector<ArtifactDigest>& v) {
        nlohmann::ordered_json a = nlohmann::ordered_json::array();
        for (const auto& d : v) a.push_back({{"path", d.path}, {"sha256", d.sha256}});
        return a;
    };
    return {{"command", m.command},
            {"config", m.config},
            {"seeds", m.seeds},
            {"inputs", list(m.inputs)},
            {"outputs", list(m.outputs)},
            {"timings_seconds", m.timings}};
}

// ---------------------------------------------------------------------------
// Commands

struct CliOptions {
    std::optional<std::uint64_t> seed;
    std::filesystem::path data_dir = "data";
    std::filesystem::path out_dir = "out";
    std::vector<std::string> pooling = {"cls", "pronoun-i", "pronoun-five"};
    bool frozen = true;
    std::optional<std::size_t> folds;
    std::optional<std::size_t> runs;
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> encoder_weights; // tensor manifest; blob beside it with .bin
};

inline PipelineConfig resolve_config(const CliOptions& o) {
    PipelineConfig c;
    if (o.config) c = load_pipeline_config(*o.config);
    if (o.seed) c.seed = *o.seed;
    if (o.folds) c.n_folds = *o.folds;
    if (o.runs) c.runs = *o.runs;
    c.validate();
    return c;
}

class CommandClock {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void write_manifest(RunManifest& m, const CliOptions& o, const CommandClock& clock) {
    m.timings["total"] = clock.seconds();
    const auto dir = o.out_dir / "manifests";
    std::filesystem::create_directories(dir);
    write_json(to_json(m), dir / (m.command + ".json"));
}

inline RunManifest start_manifest(const std::string& command, const PipelineConfig& c) {
    RunManifest m;
    m.command = command;
    m.config = to_json(c);
    m.seeds = {{"pipeline", c.seed},
               {"synth", derive_seed(c.seed, SeedStream::Synth)},
               {"split", derive_seed(c.seed, SeedStream::Split)},
               {"encoder_init", derive_seed(c.seed, SeedStream::Encoder)}};
    nlohmann::ordered_json runs = nlohmann::ordered_json::array();
    for (std::size_t k = 1; k <= c.runs; ++k) runs.push_back(derive_seed(c.seed, SeedStream::Train, k));
    m.seeds["train_runs"] = runs;
    return m;
}

inline void require_file(const std::filesystem::path& p) {
    if (!std::filesystem::is_regular_file(p)) throw DataQualityError("missing input file " + p.string());
}

inline Lexicon load_lexicon_or_default(const std::filesystem::path& data_dir) {
    const auto p = data_dir / "lexicon.json";
    return std::filesystem::exists(p) ? Lexicon::load(p) : Lexicon::default_lexicon();
}

inline int cmd_synth(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    const SynthCorpus corpus = generate(synth_config_for(c));
    write_corpus(corpus, o.data_dir);
    const FrequencyAudit audit = audit_pronoun_rates(corpus.messages, corpus.phq);
    RunManifest m = start_manifest("synth", c);
    for (const char* f : {"messages.jsonl", "phq.jsonl", "ema.jsonl", "vocab.txt", "lexicon.json", "synth_config.json"})
        m.output("data", o.data_dir, o.data_dir / f);
    write_manifest(m, o, clock);
    log << "synth: " << corpus.messages.size() << " messages, " << corpus.phq.size() << " PHQ-9 records, "
        << corpus.vocab.size() << " vocab entries; pronoun rate gap " << audit.gap_pp() << " pp\n";
    return 0;
}

inline int cmd_prepare(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    for (const char* f : {"messages.jsonl", "phq.jsonl", "vocab.txt"}) require_file(o.data_dir / f);
    const auto messages = read_messages(o.data_dir / "messages.jsonl");
    const auto phq = read_phq(o.data_dir / "phq.jsonl");
    const Tokenizer tok(Vocab::load(o.data_dir / "vocab.txt"));
    PreparedData d = prepare(messages, phq, tok, SplitConfig{c.n_folds, derive_seed(c.seed, SeedStream::Split)});
    d.meta["pipeline_seed"] = c.seed;
    const Lexicon lex = load_lexicon_or_default(o.data_dir);
    write_prepared(d, o.out_dir);
    write_features_csv(d, lex, o.out_dir / "features.csv");
    RunManifest m = start_manifest("prepare", c);
    for (const char* f : {"messages.jsonl", "phq.jsonl", "vocab.txt"}) m.input("data", o.data_dir, o.data_dir / f);
    if (std::filesystem::exists(o.data_dir / "lexicon.json")) m.input("data", o.data_dir, o.data_dir / "lexicon.json");
    for (const char* f : {"prepared.jsonl", "prepared_meta.json", "features.csv"}) m.output("out", o.out_dir, o.out_dir / f);
    write_manifest(m, o, clock);
    log << "prepare: " << d.samples.size() << " samples, " << d.meta["n_chunks"] << " chunks, "
        << d.meta["participants_retained"] << " participants retained\n";
    return 0;
}

// The prepared split must come from the same seed and fold count.
inline void check_prepared_matches(const PreparedData& d, const PipelineConfig& c) {
    if (d.meta.value("pipeline_seed", c.seed) != c.seed)
        throw ConfigError("prepared data was built with seed " + d.meta["pipeline_seed"].dump() + ", not " +
                          std::to_string(c.seed));
    if (d.meta.at("n_folds").get<std::size_t>() != c.n_folds)
        throw ConfigError("prepared data has " + d.meta["n_folds"].dump() + " folds, config asks for " +
                          std::to_string(c.n_folds));
}

inline int cmd_train(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    const PreparedData d = read_prepared(o.out_dir);
    check_prepared_matches(d, c);
    const EncoderConfig ec = encoder_config_for(c, d.meta.at("vocab_size").get<std::size_t>());
    EncoderParams enc;
    if (o.encoder_weights) {
        const auto manifest = *o.encoder_weights;
        auto blob = manifest;
        blob.replace_extension(".bin");
        enc = import_weights(ec, manifest, blob);
    } else {
        enc = init_encoder(ec);
    }
    std::vector<ModelSpec> specs;
    for (const auto& p : o.pooling) specs.push_back({parse_pooling(p), o.frozen});
    if (specs.empty()) throw ConfigError("no pooling mode selected");
    const auto fams = train_families(d, enc, specs, c);
    RunManifest m = start_manifest("train", c);
    m.input("out", o.out_dir, o.out_dir / "prepared.jsonl");
    if (o.encoder_weights) m.input("weights", o.encoder_weights->parent_path(), *o.encoder_weights);
    for (const auto& f : fams) {
        const auto dir = o.out_dir / "models" / f.spec.name();
        std::filesystem::remove_all(dir);
        save_family(f, o.out_dir);
        m.output_tree("out", o.out_dir, dir);
        for (std::size_t k = 0; k < f.runs.size(); ++k)
            log << "train: " << f.spec.name() << " run " << k + 1 << " best epoch " << f.runs[k].best_epoch
                << " val macro-F1 " << f.runs[k].best_val_f1_macro << '\n';
    }
    write_manifest(m, o, clock);
    return 0;
}

inline int cmd_eval(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    const PreparedData d = read_prepared(o.out_dir);
    check_prepared_matches(d, c);
    const auto fams = load_families(o.out_dir, c.runs);
    const Lexicon lex = load_lexicon_or_default(o.data_dir);
    TestFeatureStore store;
    std::vector<ModelEvaluation> evals;
    for (const auto& f : fams) evals.push_back(evaluate(predict_family(d, f, store)));
    for (const auto& b : lexicon_baselines()) evals.push_back(evaluate(predict_lexicon(d, lex, b, c)));
    write_json(build_report(d, evals, c), o.out_dir / "report.json");
    write_predictions_csv(d, evals, o.out_dir / "predictions.csv");
    RunManifest m = start_manifest("eval", c);
    m.input("out", o.out_dir, o.out_dir / "prepared.jsonl");
    for (const auto& f : fams)
        for (std::size_t k = 1; k <= f.runs.size(); ++k) {
            const auto dir = run_dir(o.out_dir, f.spec, k);
            m.input("out", o.out_dir, dir / "model.bin");
            m.input("out", o.out_dir, dir / "meta.json");
        }
    if (std::filesystem::exists(o.data_dir / "lexicon.json")) m.input("data", o.data_dir, o.data_dir / "lexicon.json");
    m.output("out", o.out_dir, o.out_dir / "report.json");
    m.output("out", o.out_dir, o.out_dir / "predictions.csv");
    write_manifest(m, o, clock);
    for (const auto& e : evals) {
        const auto auroc = e.mean("auroc");
        log << "eval: " << e.predictions.model << " mean macro-F1 " << *e.mean("f1_macro") << " mean AUROC "
            << (auroc ? std::to_string(*auroc) : std::string("n/a")) << '\n';
    }
    return 0;
}

inline int cmd_correlate(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    require_file(o.data_dir / "ema.jsonl");
    const PreparedData d = read_prepared(o.out_dir);
    const auto preds = read_predictions_csv(o.out_dir / "predictions.csv");
    const auto ema = read_ema(o.data_dir / "ema.jsonl");
    write_correlations_csv(d, preds, ema, o.out_dir / "correlations.csv");
    RunManifest m = start_manifest("correlate", c);
    m.input("out", o.out_dir, o.out_dir / "prepared.jsonl");
    m.input("out", o.out_dir, o.out_dir / "predictions.csv");
    m.input("data", o.data_dir, o.data_dir / "ema.jsonl");
    m.output("out", o.out_dir, o.out_dir / "correlations.csv");
    write_manifest(m, o, clock);
    log << "correlate: wrote " << (o.out_dir / "correlations.csv").string() << '\n';
    return 0;
}

inline int cmd_bins(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    const PreparedData d = read_prepared(o.out_dir);
    const auto preds = read_predictions_csv(o.out_dir / "predictions.csv");
    write_bins_csv(d, preds, o.out_dir / "bins.csv");
    RunManifest m = start_manifest("bins", c);
    m.input("out", o.out_dir, o.out_dir / "prepared.jsonl");
    m.input("out", o.out_dir, o.out_dir / "predictions.csv");
    m.output("out", o.out_dir, o.out_dir / "bins.csv");
    write_manifest(m, o, clock);
    log << "bins: wrote " << (o.out_dir / "bins.csv").string() << '\n';
    return 0;
}

inline nlohmann::ordered_json to_json(const GradCheckReport& r) {
    nlohmann::ordered_json worst = nlohmann::ordered_json::array();
    for (const auto& e : r.worst)
        worst.push_back({{"tensor", e.tensor},
                         {"row", e.row},
                         {"col", e.col},
                         {"analytic", e.analytic},
                         {"numeric", e.numeric},
                         {"rel_error", e.rel_error}});
    return {{"passed", r.passed},
            {"max_rel_error", r.max_rel_error},
            {"n_checked", r.n_checked},
            {"tensors_covered", r.tensors_covered},
            {"tensors_total", r.tensors_total},
            {"worst", worst}};
}

inline int cmd_grad_check(const CliOptions& o, std::ostream& log) {
    const CommandClock clock;
    const PipelineConfig c = resolve_config(o);
    GradCheckOptions opt;
    opt.seed = c.seed;
    const GradCheckReport r = grad_check(tiny_encoder_config(), opt);
    std::filesystem::create_directories(o.out_dir);
    write_json(to_json(r), o.out_dir / "grad_check.json");
    RunManifest m = start_manifest("grad-check", c);
    m.output("out", o.out_dir, o.out_dir / "grad_check.json");
    write_manifest(m, o, clock);
    log << "grad-check: " << (r.passed ? "PASS" : "FAIL") << " max relative error " << r.max_rel_error << " over "
        << r.n_checked << " coordinates in " << r.tensors_covered << "/" << r.tensors_total << " tensors\n";
    return r.passed ? 0 : 1;
}

// Runs one subcommand; library errors become exit code 1 with a message.
inline int run_command(const std::string& name, const CliOptions& o, std::ostream& log = std::cout,
                       std::ostream& err = std::cerr) {
    try {
        if (name == "synth") return cmd_synth(o, log);
        if (name == "prepare") return cmd_prepare(o, log);
        if (name == "train") return cmd_train(o, log);
        if (name == "eval") return cmd_eval(o, log);
        if (name == "correlate") return cmd_correlate(o, log);
        if (name == "bins") return cmd_bins(o, log);
        if (name == "grad-check") return cmd_grad_check(o, log);
        err << "error: unknown command '" << name << "'\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed JSON input: " << e.what() << '\n';
        return 1;
    }
}

} // namespace pronoun
