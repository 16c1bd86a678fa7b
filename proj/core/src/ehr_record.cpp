#include "orthodiff/ehr_record.hpp"

#include <array>

namespace orthodiff {

namespace {

constexpr std::array<std::string_view, 9> kEventNames = {
    "overuse", "traffic", "duty", "daily_life", "sports", "spontaneous", "actor", "other", "UNK"};

}  // namespace

std::string_view to_string(Sex s) {
  switch (s) {
    case Sex::kMale: return "male";
    case Sex::kFemale: return "female";
    case Sex::kUnknown: return "UNK";
  }
  return "UNK";
}

std::string_view to_string(PatientType p) {
  switch (p) {
    case PatientType::kAthlete: return "athlete";
    case PatientType::kNonAthlete: return "non_athlete";
    case PatientType::kUnknown: return "UNK";
  }
  return "UNK";
}

std::string_view to_string(InjuryEvent e) { return kEventNames[static_cast<std::size_t>(e)]; }

Sex sex_from_string(std::string_view s) {
  if (s == "male") return Sex::kMale;
  if (s == "female") return Sex::kFemale;
  return Sex::kUnknown;
}

PatientType patient_type_from_string(std::string_view s) {
  if (s == "athlete") return PatientType::kAthlete;
  if (s == "non_athlete") return PatientType::kNonAthlete;
  return PatientType::kUnknown;
}

InjuryEvent injury_event_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kNumInjuryEvents; ++i) {
    if (kEventNames[i] == s) return static_cast<InjuryEvent>(i);
  }
  return InjuryEvent::kUnknown;
}

}  // namespace orthodiff
