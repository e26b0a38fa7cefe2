#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "pronoun/corpus.hpp"
#include "pronoun/evalstat.hpp"
#include "pronoun/lexicon.hpp"
#include "pronoun/rng.hpp"
#include "pronoun/synth.hpp"
#include "pronoun/tokenizer.hpp"

using namespace pronoun;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

class SynthFiles : public ::testing::Test {
protected:
    std::filesystem::path dir = std::filesystem::temp_directory_path() / "pronoun_synth_test";
    void SetUp() override { std::filesystem::create_directories(dir); }
    void TearDown() override { std::filesystem::remove_all(dir); }
};

SynthConfig small(std::uint64_t seed) {
    SynthConfig c;
    c.n_participants = 12;
    c.seed = seed;
    return c;
}

bool is_pronoun(const std::string& w) {
    for (auto p : kFirstPersonPronouns)
        if (w == p) return true;
    return false;
}

} // namespace

TEST_F(SynthFiles, SameSeedIsByteIdentical) {
    const char* files[] = {"messages.jsonl", "phq.jsonl", "ema.jsonl", "vocab.txt", "lexicon.json", "synth_config.json"};
    write_corpus(generate(small(5)), dir / "a");
    write_corpus(generate(small(5)), dir / "b");
    write_corpus(generate(small(6)), dir / "c");
    for (const char* f : files) {
        ASSERT_TRUE(std::filesystem::exists(dir / "a" / f)) << f;
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
    EXPECT_NE(slurp(dir / "a" / "messages.jsonl"), slurp(dir / "c" / "messages.jsonl"));
}

TEST_F(SynthFiles, OutputsParseWithCorpusReaders) {
    const SynthCorpus c = generate(small(9));
    write_corpus(c, dir);
    EXPECT_EQ(read_messages(dir / "messages.jsonl").size(), c.messages.size());
    EXPECT_EQ(read_phq(dir / "phq.jsonl").size(), c.phq.size());
    EXPECT_EQ(read_ema(dir / "ema.jsonl").size(), c.ema.size());
    EXPECT_EQ(Vocab::load(dir / "vocab.txt").tokens(), c.vocab.tokens());
    const Lexicon lex = Lexicon::load(dir / "lexicon.json");
    EXPECT_EQ(lex.column_names(), c.lexicon.column_names());
    std::ifstream cfg(dir / "synth_config.json");
    EXPECT_EQ(synth_config_from_json(nlohmann::json::parse(cfg)).seed, 9u);
}

TEST(Synth, FrequencyAuditAtDefaults) {
    for (std::uint64_t seed : {41, 42, 43, 44, 45}) {
        SynthConfig cfg;
        cfg.seed = seed;
        const SynthCorpus c = generate(cfg);
        const FrequencyAudit a = audit_pronoun_rates(c.messages, c.phq);
        ASSERT_GT(a.words_negative, 0u);
        ASSERT_GT(a.words_positive, 0u);
        EXPECT_LT(a.gap_pp(), 0.5) << "seed " << seed;
        EXPECT_NEAR(a.rate_negative, cfg.pronoun_rate, 0.01);
        EXPECT_NEAR(a.rate_positive, cfg.pronoun_rate, 0.01);
    }
}

TEST(Synth, PhqRangeAndCohortSurvivesFiltering) {
    SynthConfig cfg;
    cfg.seed = 3;
    const SynthCorpus c = generate(cfg);
    std::map<std::string, int> per;
    std::set<int> labels;
    for (const auto& r : c.phq) {
        EXPECT_GE(r.total, 0);
        EXPECT_LE(r.total, 27);
        ++per[r.participant_id];
        labels.insert(static_cast<int>(label_for(r.total)));
    }
    EXPECT_EQ(per.size(), cfg.n_participants);
    for (const auto& [pid, n] : per) EXPECT_GE(n, static_cast<int>(kMinPhqScores)) << pid;
    EXPECT_EQ(labels.size(), 2u);

    const Tokenizer tok(c.vocab);
    const auto samples = aggregate(c.messages, build_all_windows(c.phq), tok);
    EXPECT_EQ(samples.size(), c.phq.size());
    EXPECT_EQ(filter_participants(samples).size(), cfg.n_participants);
    for (const auto& m : c.messages)
        for (auto id : tok.encode(m.text)) ASSERT_NE(id, c.vocab.unk_id()) << m.text;
}

TEST(Synth, PoolsDisjointAndLexiconLabelFree) {
    const SynthConfig cfg;
    const SynthPools p = synth_pools(cfg);
    EXPECT_EQ(p.distress.size(), cfg.signal_pool_size);
    EXPECT_EQ(p.pleasant.size(), cfg.signal_pool_size);
    EXPECT_EQ(p.neutral.size(), cfg.neutral_pool_size);
    std::set<std::string> all;
    for (const auto* pool : {&p.distress, &p.pleasant, &p.neutral})
        for (const auto& w : *pool) EXPECT_TRUE(all.insert(w).second) << w;
    for (auto w : kFirstPersonPronouns) EXPECT_EQ(all.count(std::string(w)), 0u);
    const std::set<std::string> signal(detail::kDistressWords.begin(), detail::kDistressWords.end());
    for (const auto& cat : synth_lexicon().categories())
        for (const auto& w : cat.words) {
            EXPECT_EQ(signal.count(w), 0u) << w;
            EXPECT_EQ(std::find(p.pleasant.begin(), p.pleasant.end(), w), p.pleasant.end()) << w;
        }
}

// Signal words only ever follow a pronoun, come from the pool of the week's
// label, and occupy the follower slot at rate close to signal_strength.
TEST(Synth, SignalPlacement) {
    SynthConfig cfg = small(17);
    const SynthCorpus c = generate(cfg);
    const SynthPools p = synth_pools(cfg);
    const std::set<std::string> distress(p.distress.begin(), p.distress.end());
    const std::set<std::string> pleasant(p.pleasant.begin(), p.pleasant.end());
    std::map<std::string, std::vector<Window>> windows;
    for (const auto& w : build_all_windows(c.phq)) windows[w.anchor.participant_id].push_back(w);

    std::size_t followers = 0, signal = 0;
    for (const auto& m : c.messages) {
        Label label = Label::Negative;
        for (const auto& w : windows.at(m.participant_id))
            if (w.start < m.sent_at && m.sent_at <= w.end) label = label_for(w.anchor.total);
        const auto words = lexicon_words(m.text);
        for (std::size_t i = 0; i < words.size(); ++i) {
            const bool d = distress.count(words[i]) > 0, pl = pleasant.count(words[i]) > 0;
            if (d || pl) {
                ASSERT_GT(i, 0u);
                EXPECT_TRUE(is_pronoun(words[i - 1])) << m.text;
                EXPECT_EQ(d, label == Label::Positive);
            }
            if (i > 0 && is_pronoun(words[i - 1])) {
                ++followers;
                signal += d || pl;
            }
        }
    }
    ASSERT_GT(followers, 200u);
    const double rate = static_cast<double>(signal) / static_cast<double>(followers);
    const double se = std::sqrt(cfg.signal_strength * (1 - cfg.signal_strength) / static_cast<double>(followers));
    EXPECT_NEAR(rate, cfg.signal_strength, 4 * se);
}

TEST(Synth, ZeroSignalStrengthPlantsNoSignalWords) {
    SynthConfig cfg = small(4);
    cfg.signal_strength = 0.0;
    const SynthCorpus c = generate(cfg);
    const SynthPools p = synth_pools(cfg);
    std::set<std::string> signal(p.distress.begin(), p.distress.end());
    signal.insert(p.pleasant.begin(), p.pleasant.end());
    for (const auto& m : c.messages)
        for (const auto& w : lexicon_words(m.text)) ASSERT_EQ(signal.count(w), 0u) << m.text;
}

TEST(Synth, MessageShapeWithinRanges) {
    const SynthConfig cfg = small(8);
    const SynthCorpus c = generate(cfg);
    const auto windows = build_all_windows(c.phq);
    for (const auto& m : c.messages) {
        const auto n = static_cast<int>(lexicon_words(m.text).size());
        EXPECT_GE(n, cfg.words_per_message.lo);
        EXPECT_LE(n, cfg.words_per_message.hi);
        const auto k = std::count_if(windows.begin(), windows.end(), [&](const Window& w) {
            return w.anchor.participant_id == m.participant_id && w.start < m.sent_at && m.sent_at <= w.end;
        });
        ASSERT_EQ(k, 1) << "each message falls in exactly one window";
    }
    for (const auto& w : windows) {
        const auto k = std::count_if(c.messages.begin(), c.messages.end(), [&](const MessageRecord& m) {
            return m.participant_id == w.anchor.participant_id && w.start < m.sent_at && m.sent_at <= w.end;
        });
        EXPECT_GE(k, cfg.messages_per_week.lo);
        EXPECT_LE(k, cfg.messages_per_week.hi);
    }
}

TEST(Synth, EmaTracksSeverity) {
    SynthConfig cfg;
    cfg.seed = 11;
    const SynthCorpus c = generate(cfg);
    std::vector<double> sev_sleep, sleep, sev_joy, joy;
    for (const auto& w : build_all_windows(c.phq)) {
        const auto s = ema_median(c.ema, w, EmaQuestion::SleepDifficulty);
        const auto e = ema_median(c.ema, w, EmaQuestion::Enjoyment);
        if (s) {
            sev_sleep.push_back(w.anchor.total);
            sleep.push_back(*s);
        }
        if (e) {
            sev_joy.push_back(w.anchor.total);
            joy.push_back(*e);
        }
    }
    EXPECT_GT(kendall_tau(sev_sleep, sleep).tau, 0.2);
    EXPECT_LT(kendall_tau(sev_joy, joy).tau, -0.2);
    for (const auto& r : c.ema) {
        const auto [lo, hi] = ema_range(r.question);
        EXPECT_GE(r.value, lo);
        EXPECT_LE(r.value, hi);
    }
}

TEST(Synth, PronounSlotsProperty) {
    Rng rng(1);
    for (int trial = 0; trial < 2000; ++trial) {
        const auto n = static_cast<std::size_t>(rng.between(2, 150));
        const auto k = static_cast<std::size_t>(rng.between(0, static_cast<std::int64_t>(n / 2)));
        const auto s = detail::pronoun_slots(n, k, rng);
        ASSERT_EQ(s.size(), k);
        for (std::size_t i = 0; i < k; ++i) {
            ASSERT_LE(s[i], n - 2);
            ASSERT_TRUE(i == 0 || s[i] >= s[i - 1] + 2);
        }
    }
}

TEST(Synth, InfeasibleConfigsRejected) {
    auto rejects = [](auto mutate) {
        SynthConfig c;
        mutate(c);
        EXPECT_THROW(generate(c), ConfigError);
    };
    rejects([](SynthConfig& c) { c.weeks = 3; });
    rejects([](SynthConfig& c) { c.n_participants = 0; });
    rejects([](SynthConfig& c) { c.messages_per_week = {5, 2}; });
    rejects([](SynthConfig& c) { c.messages_per_week = {0, 2}; });
    rejects([](SynthConfig& c) { c.words_per_message = {120, 20}; });
    rejects([](SynthConfig& c) { c.messages_per_week = {1, 6}; });
    rejects([](SynthConfig& c) { c.pronoun_rate = 0.3; });
    rejects([](SynthConfig& c) { c.pronoun_rate = -0.01; });
    rejects([](SynthConfig& c) { c.signal_strength = 1.5; });
    rejects([](SynthConfig& c) { c.signal_strength = std::nan(""); });
    rejects([](SynthConfig& c) { c.phq_noise = -1; });
    rejects([](SynthConfig& c) { c.signal_pool_size = 0; });
    SynthConfig edge;
    edge.messages_per_week = {1, 1};
    edge.words_per_message = {30, 30};
    edge.n_participants = 2;
    EXPECT_NO_THROW(generate(edge));
}

TEST(Synth, ConfigJsonRoundTrip) {
    SynthConfig c;
    c.seed = 99;
    c.signal_strength = 0.25;
    c.words_per_message = {25, 40};
    const SynthConfig r = synth_config_from_json(nlohmann::json::parse(to_json(c).dump()));
    EXPECT_EQ(to_json(r).dump(), to_json(c).dump());
    EXPECT_THROW(synth_config_from_json(nlohmann::json{{"sigma", 1}}), ConfigError);
    EXPECT_THROW(synth_config_from_json(nlohmann::json{{"weeks", 2}}), ConfigError);
    EXPECT_THROW(synth_config_from_json(nlohmann::json{{"messages_per_week", {1, 2, 3}}}), ConfigError);
}
