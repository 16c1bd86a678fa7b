#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

namespace orthodiff {

enum class Sex : std::uint8_t { kMale = 0, kFemale = 1, kUnknown = 2 };
enum class PatientType : std::uint8_t { kAthlete = 0, kNonAthlete = 1, kUnknown = 2 };
enum class InjuryEvent : std::uint8_t {
  kOveruse = 0,
  kTraffic = 1,
  kDuty = 2,
  kDailyLife = 3,
  kSports = 4,
  kSpontaneous = 5,
  kActor = 6,
  kOther = 7,
  kUnknown = 8,
};

inline constexpr int kNumInjuryEvents = 8;

// Structured clinical attributes of one patient. Categorical fields always hold a
// value; missing entries are the explicit kUnknown state.
struct EHRRecord {
  std::optional<double> age;     // years
  std::optional<double> height;  // cm
  std::optional<double> weight;  // kg
  Sex sex = Sex::kUnknown;
  PatientType patient_type = PatientType::kUnknown;
  InjuryEvent event = InjuryEvent::kUnknown;

  friend bool operator==(const EHRRecord&, const EHRRecord&) = default;
};

std::string_view to_string(Sex s);
std::string_view to_string(PatientType p);
std::string_view to_string(InjuryEvent e);
// Empty or unrecognised text maps to the kUnknown state.
Sex sex_from_string(std::string_view s);
PatientType patient_type_from_string(std::string_view s);
InjuryEvent injury_event_from_string(std::string_view s);

}  // namespace orthodiff
