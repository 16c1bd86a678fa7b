#include "orthodiff/types.hpp"

#include <string>

#include "orthodiff/errors.hpp"

namespace orthodiff {

std::string_view to_string(Orientation o) {
  switch (o) {
    case Orientation::kSagittal: return "sagittal";
    case Orientation::kCoronal: return "coronal";
    case Orientation::kAxial: return "axial";
  }
  return "sagittal";
}

Orientation orientation_from_string(std::string_view name) {
  if (name == "sagittal" || name == "sag") return Orientation::kSagittal;
  if (name == "coronal" || name == "cor") return Orientation::kCoronal;
  if (name == "axial" || name == "ax") return Orientation::kAxial;
  throw ValidationError("unknown orientation '" + std::string(name) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ValidationError("unknown split '" + std::string(name) + "'");
}

}  // namespace orthodiff
