#pragma once

#include <compare>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "pronoun/error.hpp"

namespace pronoun {

// Seconds since the Unix epoch, UTC.
struct Timestamp {
    std::int64_t seconds = 0;

    friend auto operator<=>(const Timestamp&, const Timestamp&) = default;
};

inline constexpr std::int64_t kSecondsPerDay = 86400;

constexpr Timestamp operator+(Timestamp t, std::int64_t s) { return {t.seconds + s}; }
constexpr Timestamp operator-(Timestamp t, std::int64_t s) { return {t.seconds - s}; }
constexpr std::int64_t operator-(Timestamp a, Timestamp b) { return a.seconds - b.seconds; }

namespace detail {

// Howard Hinnant's civil calendar algorithms.
constexpr std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) noexcept {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const auto yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

struct Civil {
    std::int64_t year;
    unsigned month;
    unsigned day;
};

constexpr Civil civil_from_days(std::int64_t z) noexcept {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const auto doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp < 10 ? mp + 3 : mp - 9;
    return {y + (m <= 2), m, d};
}

inline int parse_digits(std::string_view s, std::size_t pos, std::size_t n, std::string_view whole) {
    if (pos + n > s.size()) throw DataQualityError("truncated timestamp: " + std::string(whole));
    int v = 0;
    for (std::size_t i = pos; i < pos + n; ++i) {
        if (s[i] < '0' || s[i] > '9') throw DataQualityError("bad digit in timestamp: " + std::string(whole));
        v = v * 10 + (s[i] - '0');
    }
    return v;
}

inline void expect_char(std::string_view s, std::size_t pos, char c, std::string_view whole) {
    if (pos >= s.size() || s[pos] != c) throw DataQualityError("malformed timestamp: " + std::string(whole));
}

} // namespace detail

// RFC 3339 date-time. A timezone designator is mandatory; fractional seconds
// are accepted and truncated toward the earlier second.
inline Timestamp parse_rfc3339(std::string_view s) {
    using namespace detail;
    const int year = parse_digits(s, 0, 4, s);
    expect_char(s, 4, '-', s);
    const int month = parse_digits(s, 5, 2, s);
    expect_char(s, 7, '-', s);
    const int day = parse_digits(s, 8, 2, s);
    if (s.size() <= 10 || (s[10] != 'T' && s[10] != 't' && s[10] != ' '))
        throw DataQualityError("malformed timestamp: " + std::string(s));
    const int hour = parse_digits(s, 11, 2, s);
    expect_char(s, 13, ':', s);
    const int minute = parse_digits(s, 14, 2, s);
    expect_char(s, 16, ':', s);
    const int second = parse_digits(s, 17, 2, s);
    std::size_t pos = 19;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        const std::size_t start = pos;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
        if (pos == start) throw DataQualityError("empty fraction in timestamp: " + std::string(s));
    }
    if (pos >= s.size()) throw DataQualityError("timestamp lacks timezone: " + std::string(s));
    std::int64_t offset = 0;
    if (s[pos] == 'Z' || s[pos] == 'z') {
        ++pos;
    } else if (s[pos] == '+' || s[pos] == '-') {
        const int sign = s[pos] == '+' ? 1 : -1;
        const int oh = parse_digits(s, pos + 1, 2, s);
        expect_char(s, pos + 3, ':', s);
        const int om = parse_digits(s, pos + 4, 2, s);
        if (oh > 23 || om > 59) throw DataQualityError("bad timezone offset: " + std::string(s));
        offset = sign * (oh * 3600 + om * 60);
        pos += 6;
    } else {
        throw DataQualityError("timestamp lacks timezone: " + std::string(s));
    }
    if (pos != s.size()) throw DataQualityError("trailing characters in timestamp: " + std::string(s));

    if (month < 1 || month > 12 || day < 1 || day > 31 || hour > 23 || minute > 59 || second > 60)
        throw DataQualityError("timestamp field out of range: " + std::string(s));
    const std::int64_t days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
    if (civil_from_days(days).day != static_cast<unsigned>(day))
        throw DataQualityError("invalid calendar date: " + std::string(s));
    return {days * kSecondsPerDay + hour * 3600 + minute * 60 + second - offset};
}

inline std::string format_rfc3339(Timestamp t) {
    std::int64_t days = t.seconds / kSecondsPerDay;
    std::int64_t rem = t.seconds % kSecondsPerDay;
    if (rem < 0) {
        rem += kSecondsPerDay;
        --days;
    }
    const auto c = detail::civil_from_days(days);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lldZ", static_cast<long long>(c.year), c.month,
                  c.day, static_cast<long long>(rem / 3600), static_cast<long long>(rem / 60 % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

} // namespace pronoun
