#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pronoun/error.hpp"
#include "pronoun/evalstat.hpp"
#include "pronoun/rng.hpp"
#include "pronoun/severity.hpp"
#include "pronoun/timestamp.hpp"
#include "pronoun/tokenizer.hpp"

namespace pronoun {

inline constexpr std::int64_t kWindowSeconds = 7 * kSecondsPerDay;
inline constexpr std::size_t kMinContentTokens = 30;
inline constexpr std::size_t kMinPhqScores = 4;
inline constexpr std::size_t kTrainingScores = 3;

struct MessageRecord {
    std::string participant_id;
    Timestamp sent_at;
    std::string text;
};

struct PhqRecord {
    std::string participant_id;
    Timestamp administered_at;
    int total = 0;
};

enum class EmaQuestion { SleepDifficulty, ActivityLevel, Social, Enjoyment };

inline constexpr std::array<EmaQuestion, 4> kEmaQuestions = {EmaQuestion::SleepDifficulty,
                                                             EmaQuestion::ActivityLevel, EmaQuestion::Social,
                                                             EmaQuestion::Enjoyment};

constexpr std::string_view to_string(EmaQuestion q) {
    switch (q) {
    case EmaQuestion::SleepDifficulty: return "sleep_difficulty";
    case EmaQuestion::ActivityLevel: return "activity_level";
    case EmaQuestion::Social: return "social";
    case EmaQuestion::Enjoyment: return "enjoyment";
    }
    return "unknown";
}

inline EmaQuestion parse_ema_question(std::string_view s) {
    for (auto q : kEmaQuestions)
        if (to_string(q) == s) return q;
    throw DataQualityError("unknown EMA question '" + std::string(s) + "'");
}

// Inclusive response range.
constexpr std::pair<int, int> ema_range(EmaQuestion q) {
    switch (q) {
    case EmaQuestion::SleepDifficulty: return {0, 4};
    case EmaQuestion::ActivityLevel: return {0, 2};
    case EmaQuestion::Social: return {0, 1};
    case EmaQuestion::Enjoyment: return {0, 4};
    }
    return {0, 0};
}

struct EmaResponse {
    std::string participant_id;
    Timestamp answered_at;
    EmaQuestion question{};
    int value = 0;
};

enum class Label { Negative = 0, Positive = 1 };

constexpr Label label_for(int phq_total) { return phq_total >= kPhqCutoff ? Label::Positive : Label::Negative; }

// Messages with start < sent_at <= end belong to the window.
struct Window {
    Timestamp start;
    Timestamp end;
    PhqRecord anchor;
    std::size_t anchor_ordinal = 0; // position of the anchor among the participant's records
};

struct AggregatedSample {
    std::string participant_id;
    Window window;
    std::string text;
    int phq_total = 0;
    Label label = Label::Negative;
    std::size_t content_token_count = 0;
    std::vector<TokenId> content_ids;

    std::string id() const { return participant_id + "/" + std::to_string(window.anchor_ordinal); }
};

// Window i ends at t_i and starts at max(t_i - 7 days, t_{i-1}).
inline std::vector<Window> build_windows(std::span<const PhqRecord> records) {
    std::vector<Window> out;
    out.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (i > 0) {
            if (r.participant_id != records[i - 1].participant_id)
                throw DataQualityError("build_windows: records span several participants");
            if (r.administered_at == records[i - 1].administered_at)
                throw DataQualityError("duplicate PHQ-9 timestamp " + format_rfc3339(r.administered_at) +
                                       " for participant " + r.participant_id);
            if (r.administered_at < records[i - 1].administered_at)
                throw DataQualityError("build_windows: records not sorted for participant " + r.participant_id);
        }
        Timestamp start = r.administered_at - kWindowSeconds;
        if (i > 0) start = std::max(start, records[i - 1].administered_at);
        out.push_back({start, r.administered_at, r, i});
    }
    return out;
}

// Sorts each participant's records and builds their windows, in canonical
// (participant_id, anchor time) order.
inline std::vector<Window> build_all_windows(std::vector<PhqRecord> records) {
    std::stable_sort(records.begin(), records.end(), [](const PhqRecord& a, const PhqRecord& b) {
        return a.participant_id != b.participant_id ? a.participant_id < b.participant_id
                                                    : a.administered_at < b.administered_at;
    });
    std::vector<Window> out;
    for (std::size_t i = 0; i < records.size();) {
        std::size_t j = i;
        while (j < records.size() && records[j].participant_id == records[i].participant_id) ++j;
        auto w = build_windows(std::span<const PhqRecord>(records).subspan(i, j - i));
        out.insert(out.end(), w.begin(), w.end());
        i = j;
    }
    return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n\f\v";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

} // namespace detail

// Joins each window's messages chronologically with single spaces and keeps
// windows whose content token count reaches the floor.
inline std::vector<AggregatedSample> aggregate(std::span<const MessageRecord> messages, std::span<const Window> windows,
                                               const Tokenizer& tokenizer,
                                               std::size_t min_tokens = kMinContentTokens) {
    std::map<std::string, std::vector<const MessageRecord*>> by_participant;
    for (const auto& m : messages) by_participant[m.participant_id].push_back(&m);
    for (auto& [pid, list] : by_participant)
        std::stable_sort(list.begin(), list.end(),
                         [](const MessageRecord* a, const MessageRecord* b) { return a->sent_at < b->sent_at; });

    std::vector<const Window*> ordered;
    for (const auto& w : windows) ordered.push_back(&w);
    std::stable_sort(ordered.begin(), ordered.end(), [](const Window* a, const Window* b) {
        return a->anchor.participant_id != b->anchor.participant_id
                   ? a->anchor.participant_id < b->anchor.participant_id
                   : a->end < b->end;
    });

    std::vector<AggregatedSample> out;
    for (const Window* w : ordered) {
        const auto it = by_participant.find(w->anchor.participant_id);
        if (it == by_participant.end()) continue;
        const auto& list = it->second;
        auto lo = std::upper_bound(list.begin(), list.end(), w->start,
                                   [](Timestamp t, const MessageRecord* m) { return t < m->sent_at; });
        auto hi = std::upper_bound(list.begin(), list.end(), w->end,
                                   [](Timestamp t, const MessageRecord* m) { return t < m->sent_at; });
        if (lo == hi) continue;
        std::string text;
        for (auto m = lo; m != hi; ++m) {
            if (!text.empty()) text += ' ';
            text += detail::trim((*m)->text);
        }
        auto ids = tokenizer.encode(text);
        if (ids.size() < min_tokens) continue;
        AggregatedSample s;
        s.participant_id = w->anchor.participant_id;
        s.window = *w;
        s.text = std::move(text);
        s.phq_total = w->anchor.total;
        s.label = label_for(s.phq_total);
        s.content_token_count = ids.size();
        s.content_ids = std::move(ids);
        out.push_back(std::move(s));
    }
    return out;
}

// Counts surviving anchors per participant, i.e. after the token floor.
inline std::set<std::string> filter_participants(std::span<const AggregatedSample> samples,
                                                 std::size_t min_scores = kMinPhqScores) {
    std::map<std::string, std::set<std::size_t>> anchors;
    for (const auto& s : samples) anchors[s.participant_id].insert(s.window.anchor_ordinal);
    std::set<std::string> kept;
    for (const auto& [pid, a] : anchors)
        if (a.size() >= min_scores) kept.insert(pid);
    return kept;
}

struct SplitConfig {
    std::size_t n_folds = 5;
    std::uint64_t seed = 0;
};

enum class SplitRole { Test, Fold, Unused };

struct SplitTag {
    SplitRole role = SplitRole::Unused;
    std::size_t fold = 0; // 1-based when role == Fold

    std::string to_string() const {
        switch (role) {
        case SplitRole::Test: return "test";
        case SplitRole::Fold: return "fold_" + std::to_string(fold);
        case SplitRole::Unused: return "unused";
        }
        return "unused";
    }

    static SplitTag parse(std::string_view s) {
        if (s == "test") return {SplitRole::Test, 0};
        if (s == "unused") return {SplitRole::Unused, 0};
        if (s.starts_with("fold_")) {
            const auto k = std::stoul(std::string(s.substr(5)));
            if (k == 0) throw FormatError("fold index must be >= 1");
            return {SplitRole::Fold, k};
        }
        throw FormatError("unknown split tag '" + std::string(s) + "'");
    }

    friend bool operator==(const SplitTag&, const SplitTag&) = default;
};

struct SplitResult {
    std::vector<SplitTag> tags; // aligned with the input samples
    std::vector<std::size_t> test;
    std::vector<std::vector<std::size_t>> folds;
    std::vector<std::size_t> unused;
};

// Shuffles with the seeded generator and deals round-robin, so fold sizes
// differ by at most one. Each fold comes back sorted.
inline std::vector<std::vector<std::size_t>> assign_folds(std::vector<std::size_t> pool, std::size_t n_folds,
                                                          std::uint64_t seed) {
    if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
    Rng rng(seed);
    rng.shuffle(pool);
    std::vector<std::vector<std::size_t>> folds(n_folds);
    for (std::size_t k = 0; k < pool.size(); ++k) folds[k % n_folds].push_back(pool[k]);
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

// Per participant: the last anchor goes to test, the first three to the fold
// pool, anything in between is unused. The pool is shuffled with the seeded
// generator and dealt round-robin, so fold sizes differ by at most one.
inline SplitResult split(std::span<const AggregatedSample> samples, const SplitConfig& cfg) {
    if (cfg.n_folds < 2) throw ConfigError("n_folds must be >= 2");
    std::map<std::string, std::vector<std::size_t>> by_participant;
    for (std::size_t i = 0; i < samples.size(); ++i) by_participant[samples[i].participant_id].push_back(i);

    SplitResult r;
    r.tags.resize(samples.size());
    std::vector<std::size_t> pool;
    for (auto& [pid, idx] : by_participant) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return samples[a].window.end < samples[b].window.end;
        });
        for (std::size_t k = 1; k < idx.size(); ++k)
            if (samples[idx[k]].window.anchor_ordinal == samples[idx[k - 1]].window.anchor_ordinal)
                throw InvariantError("participant " + pid + " has two samples for one PHQ-9 record");
        if (idx.size() < kMinPhqScores)
            throw InvariantError("participant " + pid + " reached split with fewer than 4 PHQ-9 scores");
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (k < kTrainingScores) {
                pool.push_back(idx[k]);
            } else if (k + 1 == idx.size()) {
                r.tags[idx[k]] = {SplitRole::Test, 0};
                r.test.push_back(idx[k]);
            } else {
                r.tags[idx[k]] = {SplitRole::Unused, 0};
                r.unused.push_back(idx[k]);
            }
        }
    }
    r.folds = assign_folds(std::move(pool), cfg.n_folds, cfg.seed);
    for (std::size_t f = 0; f < r.folds.size(); ++f)
        for (auto i : r.folds[f]) r.tags[i] = {SplitRole::Fold, f + 1};
    std::sort(r.test.begin(), r.test.end());
    std::sort(r.unused.begin(), r.unused.end());
    return r;
}

// Median of one participant's responses to one question inside the window.
inline std::optional<double> ema_median(std::span<const EmaResponse> responses, const Window& window,
                                        EmaQuestion question) {
    std::vector<double> values;
    for (const auto& r : responses) {
        if (r.question != question || r.participant_id != window.anchor.participant_id) continue;
        if (r.answered_at > window.start && r.answered_at <= window.end) values.push_back(r.value);
    }
    return median(std::move(values));
}

// ---------------------------------------------------------------------------
// JSONL input

namespace detail {

template <class Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw DataQualityError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataQualityError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        try {
            fn(j);
        } catch (const nlohmann::json::exception& e) {
            throw DataQualityError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataQualityError& e) {
            throw DataQualityError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

} // namespace detail

inline std::vector<MessageRecord> read_messages(const std::filesystem::path& path) {
    std::vector<MessageRecord> out;
    detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
        MessageRecord m{j.at("participant_id").get<std::string>(),
                        parse_rfc3339(j.at("sent_at").get<std::string>()), j.at("text").get<std::string>()};
        if (detail::trim(m.text).empty()) throw DataQualityError("message text is empty");
        out.push_back(std::move(m));
    });
    return out;
}

inline std::vector<PhqRecord> read_phq(const std::filesystem::path& path) {
    std::vector<PhqRecord> out;
    detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
        PhqRecord r{j.at("participant_id").get<std::string>(),
                    parse_rfc3339(j.at("administered_at").get<std::string>()), j.at("total").get<int>()};
        if (r.total < 0 || r.total > kPhqMax) throw DataQualityError("PHQ-9 total out of range");
        out.push_back(std::move(r));
    });
    return out;
}

inline std::vector<EmaResponse> read_ema(const std::filesystem::path& path) {
    std::vector<EmaResponse> out;
    detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
        EmaResponse r{j.at("participant_id").get<std::string>(), parse_rfc3339(j.at("answered_at").get<std::string>()),
                      parse_ema_question(j.at("question").get<std::string>()), j.at("value").get<int>()};
        const auto [lo, hi] = ema_range(r.question);
        if (r.value < lo || r.value > hi)
            throw DataQualityError("EMA value out of range for " + std::string(to_string(r.question)));
        out.push_back(std::move(r));
    });
    return out;
}

inline nlohmann::ordered_json to_json(const MessageRecord& m) {
    return {{"participant_id", m.participant_id}, {"sent_at", format_rfc3339(m.sent_at)}, {"text", m.text}};
}

inline nlohmann::ordered_json to_json(const PhqRecord& r) {
    return {{"participant_id", r.participant_id},
            {"administered_at", format_rfc3339(r.administered_at)},
            {"total", r.total}};
}

inline nlohmann::ordered_json to_json(const EmaResponse& r) {
    return {{"participant_id", r.participant_id},
            {"answered_at", format_rfc3339(r.answered_at)},
            {"question", to_string(r.question)},
            {"value", r.value}};
}

template <class Record>
void write_jsonl(const std::filesystem::path& path, std::span<const Record> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataQualityError("cannot write " + path.string());
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

} // namespace pronoun
