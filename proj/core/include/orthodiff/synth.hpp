#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "orthodiff/ehr_record.hpp"
#include "orthodiff/types.hpp"

namespace orthodiff {

// Single-channel volume of shape (1, D, H, W) in [-1, 1].
struct VolumeTensor {
  torch::Tensor data;
  Orientation orientation = Orientation::kSagittal;
  std::string study_id;
  std::string scan_id;
};

// Integer class map of shape (D, H, W); 0 is background, structures are 1..S.
struct SegMask {
  torch::Tensor classes;  // kUInt8
  int num_structures = 0;
};

struct Scan {
  VolumeTensor volume;
  std::optional<SegMask> mask;

  const std::string& id() const { return volume.scan_id; }
};

struct StudyRecord {
  std::string patient_id;
  std::map<Orientation, std::vector<Scan>> scans;
  std::vector<std::uint8_t> labels;
  std::optional<EHRRecord> ehr;

  std::vector<std::string> scan_ids(Orientation o) const;
  const std::vector<Scan>& scans_in(Orientation o) const;
  const Scan& find_scan(const std::string& scan_id) const;
  bool has_all_orientations() const;
};

struct PhantomSpec {
  std::int64_t n_patients = 64;
  Resolution resolution = kDeskResolution;
  int n_labels = 4;
  int n_structures = 4;
  double label_effect_strength = 0.5;
  double noise_floor = 0.05;
  double multi_scan_fraction = 0.1;
  std::uint64_t seed = 0;
  double label_prevalence = 0.4;
  // Slices generated beyond resolution.depth; preprocessing keeps the central window.
  int extra_raw_slices = 4;

  // Throws ValidationError when an invariant does not hold.
  void validate() const;
};

// Geometry of one synthetic lesion in the shared anatomical frame [-1, 1]^3.
struct LesionSite {
  std::array<double, 3> center;  // (x, y, z) before per-patient jitter
  double radius;                 // Gaussian sigma
  // Orientation whose slab contains the lesion; ignored when visible_everywhere.
  Orientation preferred;
  bool visible_everywhere;
};

LesionSite lesion_site(int label);

std::vector<std::uint8_t> draw_labels(const PhantomSpec& spec, const std::string& patient_id);

StudyRecord generate_phantom_study(const PhantomSpec& spec, const std::string& patient_id);
// Same as above with an explicit label vector (length must equal spec.n_labels).
StudyRecord generate_phantom_study(const PhantomSpec& spec, const std::string& patient_id,
                                   const std::vector<std::uint8_t>& labels);

// Boolean (D, H, W) map of voxels within one lesion radius of lesion `label`'s
// centre for the given patient, scan and orientation; matches the preprocessed grid.
torch::Tensor lesion_region(const PhantomSpec& spec, const std::string& patient_id,
                            int label, Orientation o, int scan_index = 0);

// Raw input: (1, D_raw, H_raw, W_raw) real tensor.
VolumeTensor preprocess_volume(const torch::Tensor& raw, const Resolution& profile,
                               Orientation o = Orientation::kSagittal,
                               std::string study_id = {}, std::string scan_id = {});

// Tracks which splits have been materialised through a DatasetIndex. Shared by
// copies of an index so leakage checks survive pass-by-value.
class SplitAccessLog {
 public:
  void record(Split s) { counts_[static_cast<std::size_t>(s)].fetch_add(1); }
  std::uint64_t count(Split s) const { return counts_[static_cast<std::size_t>(s)].load(); }
  void reset() {
    for (auto& c : counts_) c.store(0);
  }

 private:
  std::array<std::atomic<std::uint64_t>, 3> counts_{};
};

class DatasetIndex {
 public:
  DatasetIndex() = default;
  DatasetIndex(std::map<Split, std::vector<std::string>> splits,
               std::map<std::string, StudyRecord> records, std::uint64_t seed);

  // Patient ids of a split. Not tracked: ids alone carry no image data.
  const std::vector<std::string>& patient_ids(Split s) const;
  // Records of a split; every call is recorded in the access log.
  std::vector<const StudyRecord*> records_in(Split s) const;
  const StudyRecord& record(const std::string& patient_id) const;
  // Untracked lookup of the owning split.
  Split split_of(const std::string& patient_id) const;

  const std::map<std::string, StudyRecord>& all_records() const { return records_; }
  const std::map<Split, std::vector<std::string>>& splits() const { return splits_; }
  std::uint64_t seed() const { return seed_; }
  int n_labels() const;

  const SplitAccessLog& access_log() const { return *log_; }
  void reset_access_log() const { log_->reset(); }

  // Throws ValidationError if splits overlap or do not cover every record.
  void validate() const;

 private:
  std::map<Split, std::vector<std::string>> splits_;
  std::map<std::string, StudyRecord> records_;
  std::uint64_t seed_ = 0;
  std::shared_ptr<SplitAccessLog> log_ = std::make_shared<SplitAccessLog>();
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

DatasetIndex split_by_patient(std::vector<StudyRecord> records, SplitFractions fractions,
                              std::uint64_t seed);

DatasetIndex generate_dataset(const PhantomSpec& spec, SplitFractions fractions = {});

struct FusionSample {
  std::string sagittal;
  std::string coronal;
  std::string axial;
  double weight = 1.0;
};

// Cartesian product of per-orientation scans, each weighted 1/(tuple count).
// Returns nullopt when some orientation has no scan (patient is excluded).
std::optional<std::vector<FusionSample>> enumerate_fusion_samples(const StudyRecord& record);

}  // namespace orthodiff
