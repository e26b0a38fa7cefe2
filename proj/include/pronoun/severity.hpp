#pragma once

#include <array>
#include <string_view>

#include "pronoun/error.hpp"

namespace pronoun {

// PHQ-9 severity bands: [0,5) [5,10) [10,15) [15,20) [20,27].
enum class SeverityLevel { NoneMinimal, Mild, Moderate, ModeratelySevere, Severe };

inline constexpr std::array<SeverityLevel, 5> kSeverityLevels = {
    SeverityLevel::NoneMinimal, SeverityLevel::Mild, SeverityLevel::Moderate, SeverityLevel::ModeratelySevere,
    SeverityLevel::Severe};

inline constexpr int kPhqMax = 27;
inline constexpr int kPhqCutoff = 10;

inline SeverityLevel bin_severity(int phq_total) {
    if (phq_total < 0 || phq_total > kPhqMax)
        throw DataQualityError("PHQ-9 total out of range [0,27]: " + std::to_string(phq_total));
    if (phq_total < 5) return SeverityLevel::NoneMinimal;
    if (phq_total < 10) return SeverityLevel::Mild;
    if (phq_total < 15) return SeverityLevel::Moderate;
    if (phq_total < 20) return SeverityLevel::ModeratelySevere;
    return SeverityLevel::Severe;
}

constexpr std::string_view to_string(SeverityLevel level) {
    switch (level) {
    case SeverityLevel::NoneMinimal: return "none_minimal";
    case SeverityLevel::Mild: return "mild";
    case SeverityLevel::Moderate: return "moderate";
    case SeverityLevel::ModeratelySevere: return "moderately_severe";
    case SeverityLevel::Severe: return "severe";
    }
    return "unknown";
}

} // namespace pronoun
