#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pronoun/corpus.hpp"
#include "pronoun/error.hpp"
#include "pronoun/lexicon.hpp"
#include "pronoun/rng.hpp"
#include "pronoun/timestamp.hpp"
#include "pronoun/tokenizer.hpp"

namespace pronoun {

struct IntRange {
    int lo = 0, hi = 0;

    friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct SynthConfig {
    std::size_t n_participants = 60;
    int weeks = 6;
    IntRange messages_per_week{2, 6};
    IntRange words_per_message{20, 120};
    double pronoun_rate = 0.09;
    double signal_strength = 0.8;
    // Standard deviation of the weekly AR(1) shock on latent severity.
    double phq_noise = 2.0;
    std::size_t signal_pool_size = 5;
    std::size_t neutral_pool_size = 1200;
    std::uint64_t seed = 0;

    void validate() const {
        auto bad = [](const std::string& m) { throw ConfigError("synth: " + m); };
        if (n_participants < 1) bad("n_participants must be positive");
        if (weeks < static_cast<int>(kMinPhqScores))
            bad("weeks must be at least " + std::to_string(kMinPhqScores) + " so every participant keeps enough PHQ scores");
        if (messages_per_week.lo < 1 || messages_per_week.lo > messages_per_week.hi)
            bad("messages_per_week must satisfy 1 <= lo <= hi");
        if (words_per_message.lo < 2 || words_per_message.lo > words_per_message.hi)
            bad("words_per_message must satisfy 2 <= lo <= hi");
        if (messages_per_week.lo * words_per_message.lo < static_cast<int>(kMinContentTokens))
            bad("the smallest possible week has fewer than " + std::to_string(kMinContentTokens) + " words");
        if (!(pronoun_rate >= 0.0 && pronoun_rate <= 0.25)) bad("pronoun_rate must lie in [0, 0.25]");
        if (!(signal_strength >= 0.0 && signal_strength <= 1.0)) bad("signal_strength must lie in [0, 1]");
        if (!(phq_noise >= 0.0) || !std::isfinite(phq_noise)) bad("phq_noise must be non-negative");
        if (signal_pool_size < 1 || signal_pool_size > 12) bad("signal_pool_size must lie in [1, 12]");
        if (neutral_pool_size < 100 || neutral_pool_size > 4000) bad("neutral_pool_size must lie in [100, 4000]");
    }
};

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
    return {{"n_participants", c.n_participants},
            {"weeks", c.weeks},
            {"messages_per_week", {c.messages_per_week.lo, c.messages_per_week.hi}},
            {"words_per_message", {c.words_per_message.lo, c.words_per_message.hi}},
            {"pronoun_rate", c.pronoun_rate},
            {"signal_strength", c.signal_strength},
            {"phq_noise", c.phq_noise},
            {"signal_pool_size", c.signal_pool_size},
            {"neutral_pool_size", c.neutral_pool_size},
            {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
    SynthConfig c;
    auto range = [](const nlohmann::json& v, const std::string& key) {
        if (!v.is_array() || v.size() != 2) throw ConfigError("synth config: " + key + " must be [lo, hi]");
        return IntRange{v[0].get<int>(), v[1].get<int>()};
    };
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "n_participants") c.n_participants = v.get<std::size_t>();
            else if (k == "weeks") c.weeks = v.get<int>();
            else if (k == "messages_per_week") c.messages_per_week = range(v, k);
            else if (k == "words_per_message") c.words_per_message = range(v, k);
            else if (k == "pronoun_rate") c.pronoun_rate = v.get<double>();
            else if (k == "signal_strength") c.signal_strength = v.get<double>();
            else if (k == "phq_noise") c.phq_noise = v.get<double>();
            else if (k == "signal_pool_size") c.signal_pool_size = v.get<std::size_t>();
            else if (k == "neutral_pool_size") c.neutral_pool_size = v.get<std::size_t>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else throw ConfigError("synth config: unknown key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace detail {

inline constexpr std::array<std::string_view, 12> kDistressWords = {
    "exhausted", "hopeless", "worthless", "numb", "alone", "empty",
    "drained", "guilty", "trapped", "broken", "useless", "heavy"};

inline constexpr std::array<std::string_view, 12> kPleasantWords = {
    "grateful", "excited", "relaxed", "proud", "hopeful", "cheerful",
    "rested", "lucky", "energized", "calm", "thrilled", "content"};

inline constexpr std::array<std::string_view, 24> kSocialWords = {
    "friend", "friends", "family", "mom", "dad", "sister", "brother", "people", "talk", "talked", "call", "called",
    "visit", "party", "team", "neighbor", "together", "group", "coworker", "partner", "kids", "son", "daughter", "wife"};

inline constexpr std::array<std::string_view, 12> kWorkWords = {
    "work", "job", "office", "boss", "meeting", "project", "shift", "email", "deadline", "class", "school", "exam"};

inline constexpr std::array<std::string_view, 12> kTimeWords = {
    "today", "yesterday", "tomorrow", "week", "weekend", "morning", "night", "evening", "monday", "friday", "hour",
    "later"};

inline constexpr std::array<std::string_view, 12> kLeisureWords = {
    "movie", "game", "music", "walk", "park", "dinner", "lunch", "coffee", "book", "show", "beach", "garden"};

inline constexpr std::array<std::string_view, 60> kFunctionWords = {
    "the", "a", "and", "to", "of", "it", "was", "is", "that", "in", "so", "but", "just", "we", "they", "you", "on",
    "for", "with", "at", "this", "had", "have", "be", "not", "went", "got", "then", "there", "about", "some", "out",
    "up", "really", "like", "know", "think", "going", "get", "back", "still", "what", "when", "all", "more", "did",
    "much", "lot", "been", "after", "before", "again", "very", "too", "also", "well", "pretty", "maybe", "kind", "thing"};

template <std::size_t N>
std::vector<std::string> words_of(const std::array<std::string_view, N>& a, std::size_t n = N) {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < std::min(n, N); ++k) out.emplace_back(a[k]);
    return out;
}

// Deterministic pronounceable pseudo-words, independent of the corpus seed.
inline std::vector<std::string> pseudo_words(std::size_t n, const std::set<std::string>& taken) {
    static constexpr std::string_view kOnsets = "bdfgklmnprstvz";
    static constexpr std::string_view kVowels = "aeiou";
    Rng rng(0x51a7e5eedULL);
    std::set<std::string> seen = taken;
    std::vector<std::string> out;
    while (out.size() < n) {
        const int syllables = 2 + static_cast<int>(rng.below(2));
        std::string w;
        for (int s = 0; s < syllables; ++s) {
            w += kOnsets[rng.below(kOnsets.size())];
            w += kVowels[rng.below(kVowels.size())];
        }
        if (rng.bernoulli(0.3)) w += kOnsets[rng.below(kOnsets.size())];
        if (seen.insert(w).second) out.push_back(std::move(w));
    }
    return out;
}

// Inverse-CDF sampling over a Zipf-shaped weight table.
class ZipfSampler {
  public:
    explicit ZipfSampler(std::size_t n, double exponent = 0.9) : cdf_(n) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) cdf_[r] = acc += 1.0 / std::pow(static_cast<double>(r) + 2.0, exponent);
        for (auto& c : cdf_) c /= acc;
    }

    std::size_t operator()(Rng& rng) const {
        const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), rng.uniform());
        return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
    }

  private:
    std::vector<double> cdf_;
};

// k positions in [0, n-2], pairwise non-adjacent, so each pronoun has a
// following word that is not itself a pronoun.
inline std::vector<std::size_t> pronoun_slots(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> pool(n - k);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    std::vector<std::size_t> out(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.begin(), out.end());
    for (std::size_t i = 0; i < k; ++i) out[i] += i;
    return out;
}

inline int clamp_round(double x, int lo, int hi) { return std::clamp(static_cast<int>(std::lround(x)), lo, hi); }

} // namespace detail

struct SynthPools {
    std::vector<std::string> distress, pleasant, neutral;
};

inline SynthPools synth_pools(const SynthConfig& cfg) {
    SynthPools p;
    p.distress = detail::words_of(detail::kDistressWords, cfg.signal_pool_size);
    p.pleasant = detail::words_of(detail::kPleasantWords, cfg.signal_pool_size);
    std::set<std::string> taken;
    for (auto w : kFirstPersonPronouns) taken.emplace(w);
    for (auto w : detail::kDistressWords) taken.emplace(w);
    for (auto w : detail::kPleasantWords) taken.emplace(w);
    auto add_all = [&](const std::vector<std::string>& ws) {
        for (const auto& w : ws)
            if (p.neutral.size() < cfg.neutral_pool_size && taken.insert(w).second) p.neutral.push_back(w);
    };
    add_all(detail::words_of(detail::kFunctionWords));
    add_all(detail::words_of(detail::kSocialWords));
    add_all(detail::words_of(detail::kWorkWords));
    add_all(detail::words_of(detail::kTimeWords));
    add_all(detail::words_of(detail::kLeisureWords));
    if (p.neutral.size() < cfg.neutral_pool_size) add_all(detail::pseudo_words(cfg.neutral_pool_size - p.neutral.size(), taken));
    return p;
}

// Categories built from neutral words only, so no category tracks the label.
inline Lexicon synth_lexicon() {
    return Lexicon({LexiconCategory{std::string(kFirstPersonCategory), {"i", "me", "my", "myself", "mine"}},
                    LexiconCategory{"social", {detail::kSocialWords.begin(), detail::kSocialWords.end()}},
                    LexiconCategory{"work", {detail::kWorkWords.begin(), detail::kWorkWords.end()}},
                    LexiconCategory{"time", {detail::kTimeWords.begin(), detail::kTimeWords.end()}},
                    LexiconCategory{"leisure", {detail::kLeisureWords.begin(), detail::kLeisureWords.end()}}});
}

struct SynthCorpus {
    SynthConfig config;
    std::vector<MessageRecord> messages;
    std::vector<PhqRecord> phq;
    std::vector<EmaResponse> ema;
    Vocab vocab;
    Lexicon lexicon;
};

inline constexpr Timestamp kSynthEpoch{1704067200}; // 2024-01-01T00:00:00Z

inline SynthCorpus generate(const SynthConfig& cfg) {
    cfg.validate();
    const SynthPools pools = synth_pools(cfg);
    const detail::ZipfSampler neutral_index(pools.neutral.size());
    static constexpr std::array<std::string_view, 5> kPronouns = {"I", "me", "my", "myself", "mine"};
    static constexpr std::array<double, 5> kPronounCdf = {0.50, 0.65, 0.90, 0.95, 1.00};

    SynthCorpus out;
    out.config = cfg;
    Rng root(cfg.seed);
    constexpr std::int64_t day = kSecondsPerDay;
    for (std::size_t p = 0; p < cfg.n_participants; ++p) {
        Rng rng = root.fork(p);
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "p%03zu", p + 1);
        const std::string pid = idbuf;
        const Timestamp start = kSynthEpoch + static_cast<std::int64_t>(rng.below(28)) * day;

        const double base = 10.0 + 5.5 * rng.normal();
        const double slope = 0.6 * rng.normal();
        double shock = 0.0;
        std::vector<std::pair<Timestamp, MessageRecord>> msgs;
        for (int k = 1; k <= cfg.weeks; ++k) {
            shock = 0.6 * shock + cfg.phq_noise * rng.normal();
            const int total = detail::clamp_round(base + slope * k + shock, 0, 27);
            const Timestamp anchor = start + k * 7 * day + rng.between(-6 * 3600, 6 * 3600);
            out.phq.push_back({pid, anchor, total});
            const bool positive = label_for(total) == Label::Positive;
            const auto& signal = positive ? pools.distress : pools.pleasant;

            const int n_msgs = static_cast<int>(rng.between(cfg.messages_per_week.lo, cfg.messages_per_week.hi));
            for (int m = 0; m < n_msgs; ++m) {
                const auto n = static_cast<std::size_t>(rng.between(cfg.words_per_message.lo, cfg.words_per_message.hi));
                const auto k_pron = static_cast<std::size_t>(std::lround(cfg.pronoun_rate * static_cast<double>(n)));
                std::vector<std::string> words(n);
                std::vector<bool> fixed(n, false);
                for (std::size_t slot : detail::pronoun_slots(n, k_pron, rng)) {
                    const double u = rng.uniform();
                    std::size_t which = 0;
                    while (which + 1 < kPronouns.size() && u >= kPronounCdf[which]) ++which;
                    words[slot] = kPronouns[which];
                    fixed[slot] = true;
                    if (rng.bernoulli(cfg.signal_strength)) {
                        words[slot + 1] = signal[rng.below(signal.size())];
                        fixed[slot + 1] = true;
                    }
                }
                for (std::size_t i = 0; i < n; ++i)
                    if (!fixed[i]) words[i] = pools.neutral[neutral_index(rng)];
                if (words[0] != "I") words[0][0] = static_cast<char>(std::toupper(static_cast<unsigned char>(words[0][0])));
                std::string text;
                for (std::size_t i = 0; i < n; ++i) {
                    if (i) text += ' ';
                    text += words[i];
                }
                text += '.';
                const Timestamp sent = anchor - 6 * day + rng.between(0, 6 * day - 3600);
                msgs.push_back({sent, MessageRecord{pid, sent, std::move(text)}});
            }

            const double sev = static_cast<double>(total) / 27.0;
            for (int d = 0; d < 6; ++d) {
                if (!rng.bernoulli(0.6)) continue;
                const Timestamp at = anchor - 6 * day + d * day + rng.between(0, day - 3600);
                const int values[4] = {
                    detail::clamp_round(0.5 + 3.0 * sev + 0.7 * rng.normal(), 0, 4),
                    detail::clamp_round(1.3 - 0.8 * sev + 0.6 * rng.normal(), 0, 2),
                    rng.bernoulli(0.6 - 0.3 * sev) ? 1 : 0,
                    detail::clamp_round(3.5 - 3.0 * sev + 0.7 * rng.normal(), 0, 4)};
                for (std::size_t q = 0; q < kEmaQuestions.size(); ++q)
                    out.ema.push_back({pid, at, kEmaQuestions[q], values[q]});
            }
        }
        std::stable_sort(msgs.begin(), msgs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        for (auto& [t, m] : msgs) out.messages.push_back(std::move(m));
    }

    std::map<std::string, std::size_t> counts;
    for (const auto& m : out.messages)
        for (const auto& w : split_words(normalize_text(m.text))) ++counts[detail::to_utf8(w)];
    VocabBuildOptions vopt;
    vopt.max_size = std::max<std::size_t>(vopt.max_size, counts.size() + 128);
    out.vocab = build_vocab(counts, vopt);
    out.lexicon = synth_lexicon();
    return out;
}

inline void write_corpus(const SynthCorpus& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_jsonl<MessageRecord>(dir / "messages.jsonl", c.messages);
    write_jsonl<PhqRecord>(dir / "phq.jsonl", c.phq);
    write_jsonl<EmaResponse>(dir / "ema.jsonl", c.ema);
    c.vocab.save(dir / "vocab.txt");
    c.lexicon.save(dir / "lexicon.json");
    std::ofstream out(dir / "synth_config.json", std::ios::binary);
    if (!out) throw ConfigError("cannot write " + (dir / "synth_config.json").string());
    out << to_json(c.config).dump(2) << '\n';
}

// Measured first-person pronoun share of words per class, where each message
// takes the label of the PHQ window that contains it.
struct FrequencyAudit {
    double rate_negative = 0.0, rate_positive = 0.0;
    std::size_t words_negative = 0, words_positive = 0;

    double gap_pp() const { return 100.0 * std::abs(rate_positive - rate_negative); }
};

inline FrequencyAudit audit_pronoun_rates(std::span<const MessageRecord> messages, std::span<const PhqRecord> phq) {
    std::map<std::string, std::vector<Window>> by_pid;
    for (auto& w : build_all_windows(std::vector<PhqRecord>(phq.begin(), phq.end())))
        by_pid[w.anchor.participant_id].push_back(w);

    const std::set<std::string> pronouns(kFirstPersonPronouns.begin(), kFirstPersonPronouns.end());
    std::size_t hits[2] = {0, 0}, words[2] = {0, 0};
    for (const auto& m : messages) {
        const auto it = by_pid.find(m.participant_id);
        if (it == by_pid.end()) continue;
        for (const auto& w : it->second) {
            if (!(w.start < m.sent_at && m.sent_at <= w.end)) continue;
            const auto c = static_cast<std::size_t>(label_for(w.anchor.total));
            for (const auto& word : lexicon_words(m.text)) {
                ++words[c];
                hits[c] += pronouns.count(word);
            }
            break;
        }
    }
    FrequencyAudit a;
    a.words_negative = words[0];
    a.words_positive = words[1];
    if (words[0]) a.rate_negative = static_cast<double>(hits[0]) / static_cast<double>(words[0]);
    if (words[1]) a.rate_positive = static_cast<double>(hits[1]) / static_cast<double>(words[1]);
    return a;
}

} // namespace pronoun
