#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pronoun/cli.hpp"

using namespace pronoun;
namespace fs = std::filesystem;

namespace {

Vocab toy_vocab() {
    std::vector<std::string> t = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "i", "me", "my", "myself", "mine"};
    for (int k = 0; k < 20; ++k) t.push_back("w" + std::to_string(k));
    return Vocab::from_tokens(t);
}

PipelineConfig small_config(std::uint64_t seed = 42) {
    PipelineConfig c;
    c.seed = seed;
    c.n_folds = 3;
    c.runs = 2;
    c.synth.n_participants = 15;
    c.synth.weeks = 4;
    c.encoder.d_model = 16;
    c.encoder.n_heads = 2;
    c.encoder.n_layers = 1;
    c.encoder.d_ff = 32;
    c.train.peak_learning_rate = 1e-2;
    c.train.max_epochs = 3;
    c.finetune.max_epochs = 1;
    c.finetune.peak_learning_rate = 1e-3;
    return c;
}

PreparedData small_prepared(const PipelineConfig& c, Vocab* vocab_out = nullptr) {
    const auto corpus = generate(synth_config_for(c));
    if (vocab_out) *vocab_out = corpus.vocab;
    const Tokenizer tok(corpus.vocab);
    return prepare(corpus.messages, corpus.phq, tok, SplitConfig{c.n_folds, derive_seed(c.seed, SeedStream::Split)});
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("pronoun_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_config(const PipelineConfig& c, const fs::path& p) {
    nlohmann::ordered_json j = to_json(c);
    j.erase("seed");
    write_json(j, p);
}

} // namespace

TEST(MakeChunks, LongInputWithoutPronoun) {
    const Vocab v = toy_vocab();
    std::vector<TokenId> content(800, *v.find("w3"));
    const auto chunks = make_chunks(content, 1, v);
    ASSERT_EQ(chunks.size(), 3u);
    // one "i" prepended to the sample, then one per chunk that lost it
    EXPECT_EQ(chunks[0].ids.size(), 302u);
    EXPECT_EQ(chunks[1].ids.size(), 303u);
    EXPECT_EQ(chunks[2].ids.size(), 204u);
    for (const auto& c : chunks) {
        EXPECT_EQ(c.label, 1);
        EXPECT_EQ(c.ids.front(), v.cls_id());
        EXPECT_EQ(c.ids.back(), v.sep_id());
        EXPECT_EQ(c.ids[1], v.i_id());
        EXPECT_EQ(std::count(c.mask_i.begin(), c.mask_i.end(), true), 1);
        EXPECT_EQ(c.mask_i, c.mask_five);
    }
}

TEST(MakeChunks, ShortInputKeepsExistingPronoun) {
    const Vocab v = toy_vocab();
    std::vector<TokenId> content = {*v.find("w1"), *v.find("my"), *v.find("w2"), *v.find("i")};
    const auto chunks = make_chunks(content, 0, v);
    ASSERT_EQ(chunks.size(), 1u);
    EXPECT_EQ(chunks[0].ids.size(), 6u);
    EXPECT_EQ(chunks[0].mask_i, (std::vector<bool>{false, false, false, false, true, false}));
    EXPECT_EQ(chunks[0].mask_five, (std::vector<bool>{false, false, true, false, true, false}));
    EXPECT_EQ(chunks[0].label, 0);
}

TEST(Prepare, SplitAndMeta) {
    const auto c = small_config();
    const auto d = small_prepared(c);
    std::map<std::string, std::vector<const PreparedSample*>> by_p;
    for (const auto& s : d.samples) by_p[s.sample.participant_id].push_back(&s);
    EXPECT_EQ(d.meta["participants_retained"].get<std::size_t>(), by_p.size());
    std::size_t n_test = 0;
    for (auto& [pid, v] : by_p) {
        std::sort(v.begin(), v.end(), [](auto a, auto b) { return a->sample.window.end < b->sample.window.end; });
        EXPECT_EQ(v.back()->split.role, SplitRole::Test) << pid;
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(v[k]->split.role, SplitRole::Fold);
        for (std::size_t k = 3; k + 1 < v.size(); ++k) EXPECT_EQ(v[k]->split.role, SplitRole::Unused);
        ++n_test;
    }
    EXPECT_EQ(d.meta["n_test"].get<std::size_t>(), n_test);
    std::size_t chunks = 0;
    for (const auto& s : d.samples) {
        chunks += s.chunks.size();
        for (const auto& ch : s.chunks) {
            EXPECT_EQ(ch.label, static_cast<int>(s.sample.label));
            EXPECT_TRUE(std::find(ch.mask_i.begin(), ch.mask_i.end(), true) != ch.mask_i.end());
        }
    }
    EXPECT_EQ(d.meta["n_chunks"].get<std::size_t>(), chunks);
    const auto sizes = d.meta["fold_sizes"].get<std::vector<std::size_t>>();
    EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()), 1u);
}

TEST(Prepare, EmptyInputsRejected) {
    const Tokenizer tok(toy_vocab());
    std::vector<MessageRecord> m;
    std::vector<PhqRecord> p = {{"p1", Timestamp{}, 5}};
    EXPECT_THROW(prepare(m, p, tok, {}), DataQualityError);
    m.push_back({"p1", Timestamp{}, "hello"});
    EXPECT_THROW(prepare(m, {}, tok, {}), DataQualityError);
}

TEST(Prepared, FileRoundTrip) {
    const auto c = small_config();
    const auto d = small_prepared(c);
    const auto dir = scratch("roundtrip");
    write_prepared(d, dir);
    const auto e = read_prepared(dir);
    ASSERT_EQ(e.samples.size(), d.samples.size());
    EXPECT_EQ(e.meta.dump(), d.meta.dump());
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        EXPECT_EQ(to_json(e.samples[i]).dump(), to_json(d.samples[i]).dump());
        ASSERT_EQ(e.samples[i].chunks.size(), d.samples[i].chunks.size());
        for (std::size_t k = 0; k < d.samples[i].chunks.size(); ++k) {
            EXPECT_EQ(e.samples[i].chunks[k].ids, d.samples[i].chunks[k].ids);
            EXPECT_EQ(e.samples[i].chunks[k].mask_five, d.samples[i].chunks[k].mask_five);
            EXPECT_EQ(e.samples[i].chunks[k].label, d.samples[i].chunks[k].label);
        }
    }
}

TEST(PipelineConfig, JsonRoundTripAndRejections) {
    auto c = small_config(7);
    c.lexicon_lambda = 0.25;
    const auto back = pipeline_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
    const auto bad = [&](const char* text) {
        EXPECT_THROW(pipeline_config_from_json(nlohmann::json::parse(text)), ConfigError) << text;
    };
    bad(R"({"bogus": 1})");
    bad(R"({"synth": {"seed": 3}})");
    bad(R"({"encoder": {"vocab_size": 30}})");
    bad(R"({"train": {"seed": 1}})");
    bad(R"({"finetune": {"freeze_encoder": true}})");
    bad(R"({"runs": 6, "n_folds": 5})");
    bad(R"({"runs": 0})");
    bad(R"({"seed": "x"})");
    bad(R"([1, 2])");
}

TEST(PipelineConfig, CommittedDeskConfigLoads) {
    const auto c = load_pipeline_config(fs::path(PRONOUN_CONFIG_DIR) / "desk.json");
    EXPECT_EQ(c.n_folds, 5u);
    EXPECT_EQ(c.runs, 5u);
    EXPECT_DOUBLE_EQ(c.synth.signal_strength, 0.8);
    // the committed file spells out the built-in defaults
    EXPECT_EQ(to_json(c).dump(), to_json(PipelineConfig{}).dump());
}

TEST(Seeds, DerivedStreamsDiffer) {
    std::set<std::uint64_t> seen;
    for (auto s : {SeedStream::Synth, SeedStream::Split, SeedStream::Encoder})
        EXPECT_TRUE(seen.insert(derive_seed(42, s)).second);
    for (std::uint64_t k = 1; k <= 5; ++k) EXPECT_TRUE(seen.insert(derive_seed(42, SeedStream::Train, k)).second);
    EXPECT_EQ(derive_seed(42, SeedStream::Split), derive_seed(42, SeedStream::Split));
    EXPECT_NE(derive_seed(42, SeedStream::Split), derive_seed(43, SeedStream::Split));
    const auto c = small_config();
    EXPECT_TRUE(train_config_for(c, 2, true).freeze_encoder);
    EXPECT_FALSE(train_config_for(c, 2, false).freeze_encoder);
    EXPECT_EQ(train_config_for(c, 2, false).max_epochs, c.finetune.max_epochs);
}

TEST(TrainFamilies, FrozenRunMatchesTrain) {
    const auto c = small_config();
    const auto d = small_prepared(c);
    const auto enc = init_encoder(encoder_config_for(c, d.meta["vocab_size"].get<std::size_t>()));
    const auto before = encoder_bytes(enc);
    const std::vector<ModelSpec> specs = {{PoolingMode::PronounFive, true}};
    const auto fams = train_families(d, enc, specs, c);
    ASSERT_EQ(fams.size(), 1u);
    ASSERT_EQ(fams[0].runs.size(), c.runs);
    for (std::size_t run = 1; run <= c.runs; ++run) {
        const auto tr = gather(d, run_train_chunks(d, run));
        const auto va = gather(d, run_val_chunks(d, run));
        const auto ref = train(tr, va, enc, PoolingMode::PronounFive, train_config_for(c, run, true));
        const auto& got = fams[0].runs[run - 1];
        EXPECT_LT((ref.head.weight.value - got.head.weight.value).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((ref.head.bias.value - got.head.bias.value).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_EQ(ref.best_epoch, got.best_epoch);
        EXPECT_EQ(encoder_bytes(got.encoder), before);
    }
    EXPECT_EQ(encoder_bytes(enc), before);
}

TEST(TrainFamilies, FoldsAreDisjointPerRun) {
    const auto d = small_prepared(small_config());
    for (std::size_t run = 1; run <= 3; ++run) {
        std::set<std::size_t> tr, va;
        for (const auto& r : run_train_chunks(d, run)) tr.insert(r.sample);
        for (const auto& r : run_val_chunks(d, run)) va.insert(r.sample);
        for (auto s : va) {
            EXPECT_EQ(tr.count(s), 0u);
            EXPECT_EQ(d.samples[s].split.fold, run);
        }
        for (auto s : tr) EXPECT_EQ(d.samples[s].split.role, SplitRole::Fold);
    }
}

TEST(Report, BaselineMapping) {
    EXPECT_EQ(baseline_for("pronoun-five_frozen"), "cls_frozen");
    EXPECT_EQ(baseline_for("pronoun-i_finetune"), "cls_finetune");
    EXPECT_EQ(baseline_for("liwc_i"), "cls_frozen");
    EXPECT_EQ(baseline_for("cls_frozen"), std::nullopt);
    EXPECT_EQ(ModelSpec({PoolingMode::Cls, false}).name(), "cls_finetune");
}

TEST(Report, MetricsAndPredictionsCsv) {
    const auto c = small_config();
    Vocab vocab;
    const auto d = small_prepared(c, &vocab);
    const auto enc = init_encoder(encoder_config_for(c, vocab.size()));
    const std::vector<ModelSpec> specs = {{PoolingMode::Cls, true}, {PoolingMode::PronounFive, true}};
    const auto fams = train_families(d, enc, specs, c);
    TestFeatureStore store;
    std::vector<ModelEvaluation> ev;
    for (const auto& f : fams) ev.push_back(evaluate(predict_family(d, f, store)));
    ev.push_back(evaluate(predict_lexicon(d, synth_lexicon(), lexicon_baselines()[0], c)));
    for (const auto& e : ev) {
        ASSERT_EQ(e.runs.size(), c.runs);
        for (const auto& p : e.predictions.per_run) {
            ASSERT_EQ(p.size(), e.predictions.labels.size());
            for (double v : p) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
        }
    }
    const auto report = build_report(d, ev, c);
    ASSERT_EQ(report["models"].size(), 3u);
    EXPECT_EQ(report["models"][1]["name"], "pronoun-five_frozen");
    EXPECT_TRUE(report["models"][1]["vs_baseline"].contains("baseline"));

    const auto dir = scratch("pred");
    write_predictions_csv(d, ev, dir / "predictions.csv");
    const auto rows = read_predictions_csv(dir / "predictions.csv");
    std::size_t expected = 0;
    for (const auto& e : ev) expected += e.predictions.labels.size() * c.runs;
    EXPECT_EQ(rows.size(), expected);

    const auto ema = generate(synth_config_for(c)).ema;
    write_correlations_csv(d, rows, ema, dir / "correlations.csv");
    std::ifstream in(dir / "correlations.csv");
    std::string line;
    std::size_t n_lines = 0;
    while (std::getline(in, line)) ++n_lines;
    // header plus 4 questions for each model measure and the LIWC "i" percentage
    EXPECT_EQ(n_lines, 1 + 4 * (ev.size() + 1));
}

TEST(Digest, Sha256KnownVectors) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Cli, ErrorsGiveNonzeroExit) {
    const auto root = scratch("cli_err");
    CliOptions o;
    o.data_dir = root / "data";
    o.out_dir = root / "out";
    std::ostringstream log, err;
    EXPECT_EQ(run_command("prepare", o, log, err), 1);
    EXPECT_NE(err.str().find("missing input"), std::string::npos);
    fs::create_directories(o.data_dir);
    std::ofstream(o.data_dir / "messages.jsonl").close();
    std::ofstream(o.data_dir / "phq.jsonl") << R"({"participant_id":"p1","administered_at":"2024-01-01T00:00:00Z","total":5})" << '\n';
    write_corpus(generate(synth_config_for(small_config())), root / "full");
    fs::copy_file(root / "full" / "vocab.txt", o.data_dir / "vocab.txt");
    EXPECT_NE(run_command("prepare", o, log, err), 0);
    EXPECT_EQ(run_command("train", o, log, err), 1);
    EXPECT_EQ(run_command("eval", o, log, err), 1);
    EXPECT_EQ(run_command("bogus", o, log, err), 2);
}

TEST(Cli, SeedMismatchRejectedAtTrain) {
    const auto root = scratch("cli_seed");
    const auto cfg_path = root / "small.json";
    write_config(small_config(), cfg_path);
    CliOptions o;
    o.data_dir = root / "data";
    o.out_dir = root / "out";
    o.config = cfg_path;
    o.seed = 5;
    std::ostringstream log, err;
    ASSERT_EQ(run_command("synth", o, log, err), 0) << err.str();
    ASSERT_EQ(run_command("prepare", o, log, err), 0) << err.str();
    o.seed = 6;
    EXPECT_EQ(run_command("train", o, log, err), 1);
    EXPECT_NE(err.str().find("seed"), std::string::npos);
    o.seed = 5;
    o.folds = 4;
    EXPECT_EQ(run_command("train", o, log, err), 1);
}

TEST(Cli, ShortPipelineIsDeterministic) {
    const auto root = scratch("cli_det");
    const auto cfg_path = root / "small.json";
    write_config(small_config(), cfg_path);
    std::vector<std::map<std::string, std::string>> digests;
    for (const char* tag : {"a", "b"}) {
        CliOptions o;
        o.data_dir = root / tag / "data";
        o.out_dir = root / tag / "out";
        o.config = cfg_path;
        o.seed = 9;
        o.pooling = {"cls", "pronoun-five"};
        std::ostringstream log, err;
        for (const char* cmd : {"synth", "prepare", "train", "eval", "correlate", "bins"})
            ASSERT_EQ(run_command(cmd, o, log, err), 0) << cmd << ": " << err.str();
        std::map<std::string, std::string> d;
        for (const char* f : {"report.json", "predictions.csv", "correlations.csv", "bins.csv", "prepared.jsonl",
                              "features.csv"})
            d[f] = file_sha256(o.out_dir / f);
        d["messages"] = file_sha256(o.data_dir / "messages.jsonl");
        const auto manifest = nlohmann::json::parse(slurp(o.out_dir / "manifests" / "eval.json"));
        EXPECT_FALSE(manifest["outputs"].empty());
        EXPECT_EQ(manifest["seeds"]["pipeline"], 9);
        digests.push_back(d);
    }
    EXPECT_EQ(digests[0], digests[1]);
}
