#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "pronoun/error.hpp"

namespace pronoun {

using TokenId = std::int32_t;

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kMaskToken = "[MASK]";
inline constexpr std::string_view kContinuationPrefix = "##";

inline constexpr std::array<std::string_view, 5> kFirstPersonPronouns = {"i", "me", "my", "myself", "mine"};

inline constexpr std::size_t kMaxWordChars = 100;
inline constexpr std::size_t kMaxUnsplitContent = 510;
inline constexpr std::size_t kChunkContent = 300;

enum class PronounMode { IOnly, FirstPersonFive };

class Vocab {
  public:
    Vocab() = default;

    static Vocab from_tokens(std::vector<std::string> tokens) {
        Vocab v;
        v.tokens_ = std::move(tokens);
        for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
            const auto& t = v.tokens_[i];
            if (t.empty()) throw FormatError("vocab: empty token at line " + std::to_string(i + 1));
            if (!v.ids_.emplace(t, static_cast<TokenId>(i)).second)
                throw FormatError("vocab: duplicate token '" + t + "'");
        }
        auto required = [&](std::string_view t) {
            const auto id = v.find(t);
            if (!id) throw FormatError("vocab: missing required token '" + std::string(t) + "'");
            return *id;
        };
        v.pad_ = required(kPadToken);
        v.unk_ = required(kUnkToken);
        v.cls_ = required(kClsToken);
        v.sep_ = required(kSepToken);
        v.mask_ = required(kMaskToken);
        for (std::size_t k = 0; k < kFirstPersonPronouns.size(); ++k) v.pronoun_ids_[k] = required(kFirstPersonPronouns[k]);
        return v;
    }

    // UTF-8, one token per line, line number is the id.
    static Vocab load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw FormatError("cannot open vocab file " + path.string());
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            tokens.push_back(line);
        }
        return from_tokens(std::move(tokens));
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot write vocab file " + path.string());
        for (const auto& t : tokens_) out << t << '\n';
    }

    std::optional<TokenId> find(std::string_view token) const {
        const auto it = ids_.find(std::string(token));
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw FormatError("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    TokenId pad_id() const noexcept { return pad_; }
    TokenId unk_id() const noexcept { return unk_; }
    TokenId cls_id() const noexcept { return cls_; }
    TokenId sep_id() const noexcept { return sep_; }
    TokenId mask_id() const noexcept { return mask_; }
    TokenId i_id() const noexcept { return pronoun_ids_[0]; }
    const std::array<TokenId, 5>& pronoun_ids() const noexcept { return pronoun_ids_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
    TokenId pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0, mask_ = 0;
    std::array<TokenId, 5> pronoun_ids_{};
};

namespace detail {

inline void append_utf8(std::string& out, char32_t c) {
    if (c < 0x80) {
        out += static_cast<char>(c);
    } else if (c < 0x800) {
        out += static_cast<char>(0xC0 | (c >> 6));
        out += static_cast<char>(0x80 | (c & 0x3F));
    } else if (c < 0x10000) {
        out += static_cast<char>(0xE0 | (c >> 12));
        out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (c & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (c >> 18));
        out += static_cast<char>(0x80 | ((c >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (c & 0x3F));
    }
}

inline std::string to_utf8(std::u32string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char32_t c : s) append_utf8(out, c);
    return out;
}

inline bool is_punctuation(char32_t c) {
    if ((c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126)) return true;
    return u_ispunct(static_cast<UChar32>(c));
}

inline bool is_whitespace(char32_t c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || u_isUWhiteSpace(static_cast<UChar32>(c));
}

inline bool is_control(char32_t c) {
    if (c == '\t' || c == '\n' || c == '\r') return false;
    const auto type = u_charType(static_cast<UChar32>(c));
    return type == U_CONTROL_CHAR || type == U_FORMAT_CHAR;
}

inline const icu::Normalizer2& nfc() {
    UErrorCode err = U_ZERO_ERROR;
    const icu::Normalizer2* n = icu::Normalizer2::getNFCInstance(err);
    if (U_FAILURE(err) || n == nullptr) throw Error("ICU NFC normalizer unavailable");
    return *n;
}

} // namespace detail

// NFC, then simple (per code point) case folding, then NFC again. Control
// characters and U+FFFD are dropped.
inline std::u32string normalize_text(std::string_view utf8) {
    UErrorCode err = U_ZERO_ERROR;
    const auto& norm = detail::nfc();
    icu::UnicodeString s =
        norm.normalize(icu::UnicodeString::fromUTF8(icu::StringPiece(utf8.data(), static_cast<int32_t>(utf8.size()))), err);
    if (U_FAILURE(err)) throw FormatError("normalization failed");
    icu::UnicodeString folded;
    for (int32_t i = 0; i < s.length();) {
        const UChar32 c = s.char32At(i);
        i += U16_LENGTH(c);
        if (c == 0 || c == 0xFFFD || detail::is_control(static_cast<char32_t>(c))) continue;
        folded.append(u_foldCase(c, U_FOLD_CASE_DEFAULT));
    }
    folded = norm.normalize(folded, err);
    if (U_FAILURE(err)) throw FormatError("normalization failed");
    std::u32string out;
    out.reserve(static_cast<std::size_t>(folded.length()));
    for (int32_t i = 0; i < folded.length();) {
        const UChar32 c = folded.char32At(i);
        i += U16_LENGTH(c);
        out.push_back(static_cast<char32_t>(c));
    }
    return out;
}

// Whitespace split, then every punctuation character becomes its own word.
inline std::vector<std::u32string> split_words(std::u32string_view text) {
    std::vector<std::u32string> words;
    std::u32string cur;
    auto flush = [&] {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
    };
    for (char32_t c : text) {
        if (detail::is_whitespace(c)) {
            flush();
        } else if (detail::is_punctuation(c)) {
            flush();
            words.emplace_back(1, c);
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return words;
}

// Uncased WordPiece: greedy longest-match-first with "##" continuations.
class Tokenizer {
  public:
    explicit Tokenizer(Vocab vocab) : vocab_(std::move(vocab)) {}

    const Vocab& vocab() const noexcept { return vocab_; }

    std::vector<std::string> tokenize(std::string_view text) const {
        std::vector<std::string> out;
        for (const auto& word : split_words(normalize_text(text))) wordpiece(word, [&](TokenId id) {
                out.push_back(vocab_.token(id));
            });
        return out;
    }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> out;
        for (const auto& word : split_words(normalize_text(text))) wordpiece(word, [&](TokenId id) {
                out.push_back(id);
            });
        return out;
    }

    std::size_t count_tokens(std::string_view text) const { return encode(text).size(); }

  private:
    template <class Emit>
    void wordpiece(const std::u32string& word, Emit&& emit) const {
        if (word.size() > kMaxWordChars) {
            emit(vocab_.unk_id());
            return;
        }
        std::vector<TokenId> pieces;
        std::size_t start = 0;
        while (start < word.size()) {
            std::optional<TokenId> match;
            std::size_t end = word.size();
            for (; end > start; --end) {
                std::string candidate = start > 0 ? std::string(kContinuationPrefix) : std::string();
                candidate += detail::to_utf8(std::u32string_view(word).substr(start, end - start));
                if ((match = vocab_.find(candidate))) break;
            }
            if (!match) {
                emit(vocab_.unk_id());
                return;
            }
            pieces.push_back(*match);
            start = end;
        }
        for (auto id : pieces) emit(id);
    }

    Vocab vocab_;
};

struct TokenSequence {
    std::vector<TokenId> ids; // [CLS] content... [SEP]

    std::size_t content_len() const noexcept { return ids.size() >= 2 ? ids.size() - 2 : 0; }
};

inline TokenSequence wrap_sequence(std::span<const TokenId> content, const Vocab& vocab) {
    TokenSequence seq;
    seq.ids.reserve(content.size() + 2);
    seq.ids.push_back(vocab.cls_id());
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    seq.ids.push_back(vocab.sep_id());
    return seq;
}

// At most 510 content tokens stay whole; longer inputs become consecutive
// 300-token chunks with the remainder last.
inline std::vector<TokenSequence> chunk(std::span<const TokenId> content, const Vocab& vocab) {
    std::vector<TokenSequence> out;
    if (content.size() <= kMaxUnsplitContent) {
        out.push_back(wrap_sequence(content, vocab));
        return out;
    }
    for (std::size_t start = 0; start < content.size(); start += kChunkContent) {
        const std::size_t len = std::min(kChunkContent, content.size() - start);
        out.push_back(wrap_sequence(content.subspan(start, len), vocab));
    }
    return out;
}

inline bool is_pronoun(TokenId id, PronounMode mode, const Vocab& vocab) {
    if (mode == PronounMode::IOnly) return id == vocab.i_id();
    const auto& p = vocab.pronoun_ids();
    return std::find(p.begin(), p.end(), id) != p.end();
}

// True at whole-word pronoun entries. Continuation pieces have distinct ids
// ("##my" is not "my"), so they never match; specials never match either.
inline std::vector<bool> locate_pronouns(std::span<const TokenId> ids, PronounMode mode, const Vocab& vocab) {
    std::vector<bool> mask(ids.size(), false);
    for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = is_pronoun(ids[i], mode, vocab);
    return mask;
}

inline std::vector<TokenId> ensure_pronoun(std::vector<TokenId> content, const Vocab& vocab) {
    if (std::find(content.begin(), content.end(), vocab.i_id()) == content.end())
        content.insert(content.begin(), vocab.i_id());
    return content;
}

inline std::string detokenize(std::span<const std::string> pieces) {
    std::string out;
    for (const auto& p : pieces) {
        if (p.starts_with(kContinuationPrefix)) {
            out += p.substr(kContinuationPrefix.size());
        } else {
            if (!out.empty()) out += ' ';
            out += p;
        }
    }
    return out;
}

// Frequency-ordered vocabulary: specials, pronouns, single-character pieces
// (whole and continuation) for fallback, then words by descending count.
struct VocabBuildOptions {
    std::size_t min_count = 1;
    std::size_t max_size = 5000;
    std::string fallback_chars = "abcdefghijklmnopqrstuvwxyz0123456789";
    std::string punctuation = ".,!?;:'\"()-";
};

inline Vocab build_vocab(const std::map<std::string, std::size_t>& word_counts, const VocabBuildOptions& opt = {}) {
    std::vector<std::string> tokens = {std::string(kPadToken), std::string(kUnkToken), std::string(kClsToken),
                                       std::string(kSepToken), std::string(kMaskToken)};
    std::unordered_set<std::string> seen(tokens.begin(), tokens.end());
    auto add = [&](const std::string& t) {
        if (tokens.size() < opt.max_size && seen.insert(t).second) tokens.push_back(t);
    };
    for (auto p : kFirstPersonPronouns) add(std::string(p));
    for (char c : opt.punctuation) add(std::string(1, c));
    for (char c : opt.fallback_chars) add(std::string(1, c));
    for (char c : opt.fallback_chars) add(std::string(kContinuationPrefix) + c);

    std::vector<std::pair<std::string, std::size_t>> words;
    for (const auto& [w, n] : word_counts) {
        if (n < opt.min_count) continue;
        const auto split = split_words(normalize_text(w));
        if (split.size() != 1) continue;
        words.emplace_back(detail::to_utf8(split.front()), n);
    }
    std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [w, n] : words) add(w);
    return Vocab::from_tokens(std::move(tokens));
}

} // namespace pronoun
