#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace orthodiff {

enum class Orientation : std::uint8_t { kSagittal = 0, kCoronal = 1, kAxial = 2 };

inline constexpr std::array<Orientation, 3> kOrientations = {
    Orientation::kSagittal, Orientation::kCoronal, Orientation::kAxial};

std::string_view to_string(Orientation o);
Orientation orientation_from_string(std::string_view name);

inline constexpr std::size_t index_of(Orientation o) { return static_cast<std::size_t>(o); }

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

std::string_view to_string(Split s);
Split split_from_string(std::string_view name);

// Spatial extent of a single-channel volume, slices first.
struct Resolution {
  std::int64_t depth = 8;
  std::int64_t height = 32;
  std::int64_t width = 32;

  friend bool operator==(const Resolution&, const Resolution&) = default;
};

inline constexpr Resolution kDeskResolution{8, 32, 32};
inline constexpr Resolution kPaperResolution{16, 256, 256};

}  // namespace orthodiff
