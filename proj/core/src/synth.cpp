#include "orthodiff/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "orthodiff/errors.hpp"
#include "orthodiff/hashing.hpp"

namespace orthodiff {

namespace F = torch::nn::functional;

namespace {

// Half thickness of the slab covered by the central slices of every orientation.
constexpr double kSlabHalfWidth = 0.3;
constexpr double kLesionSigma = 0.1;
constexpr std::array<double, 4> kShellIntensity = {0.4, 0.7, 1.2, 0.3};

std::string_view short_name(Orientation o) {
  switch (o) {
    case Orientation::kSagittal: return "sag";
    case Orientation::kCoronal: return "cor";
    case Orientation::kAxial: return "ax";
  }
  return "sag";
}

std::mt19937_64 rng_for(std::uint64_t seed, const std::string& patient_id, std::string_view stream) {
  return std::mt19937_64(mix_seed(mix_seed(seed, fnv1a(patient_id)), fnv1a(stream)));
}

// Per-patient draws shared by every scan of the study.
struct Anatomy {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  std::vector<double> intensity;
  double grad_x = 0.0;
  double grad_y = 0.0;
  std::vector<std::array<double, 3>> lesion_centers;
};

Anatomy draw_anatomy(const PhantomSpec& spec, const std::string& patient_id) {
  auto rng = rng_for(spec.seed, patient_id, "anatomy");
  std::normal_distribution<double> jitter(0.0, 0.04);
  std::uniform_real_distribution<double> radius(0.8, 0.95);
  std::uniform_real_distribution<double> scale(0.9, 1.1);
  std::normal_distribution<double> offset(0.0, 0.03);
  std::normal_distribution<double> unit(0.0, 1.0);

  Anatomy a;
  for (auto& c : a.center) c = jitter(rng);
  for (auto& r : a.radii) r = radius(rng);
  const double s = scale(rng);
  for (int i = 0; i < spec.n_structures; ++i) {
    a.intensity.push_back(kShellIntensity[static_cast<std::size_t>(i) % kShellIntensity.size()] * s +
                          offset(rng));
  }
  a.grad_x = unit(rng);
  a.grad_y = unit(rng);
  for (int k = 0; k < spec.n_labels; ++k) {
    auto site = lesion_site(k).center;
    for (auto& v : site) v += jitter(rng);
    a.lesion_centers.push_back(site);
  }
  return a;
}

double shell_boundary(int s, int n_structures) {
  if (n_structures == 1) return 0.95;
  return 0.35 + 0.6 * static_cast<double>(s) / static_cast<double>(n_structures - 1);
}

// World coordinates (x, y, z) of an (n, H, W) slab for one orientation.
std::array<torch::Tensor, 3> slab_coordinates(Orientation o, std::int64_t n_slices,
                                              const Resolution& res) {
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const double spacing = res.depth > 1 ? 2.0 * kSlabHalfWidth / static_cast<double>(res.depth - 1) : 0.0;
  auto d = (torch::arange(n_slices, opts) - static_cast<double>(n_slices - 1) / 2.0) * spacing;
  auto h = torch::linspace(-1.0, 1.0, res.height, opts);
  auto w = torch::linspace(-1.0, 1.0, res.width, opts);
  auto grids = torch::meshgrid({d, h, w}, "ij");
  const auto& gd = grids[0];
  const auto& gh = grids[1];
  const auto& gw = grids[2];
  switch (o) {
    case Orientation::kSagittal: return {gd, gw, gh};
    case Orientation::kCoronal: return {gw, gd, gh};
    case Orientation::kAxial: return {gw, gh, gd};
  }
  return {gd, gw, gh};
}

torch::Tensor ellipsoid_radius(const std::array<torch::Tensor, 3>& xyz, const Anatomy& a) {
  auto r2 = torch::zeros_like(xyz[0]);
  for (std::size_t i = 0; i < 3; ++i) r2 = r2 + ((xyz[i] - a.center[i]) / a.radii[i]).square();
  return r2.sqrt();
}

torch::Tensor gaussian_bump(const std::array<torch::Tensor, 3>& xyz, const std::array<double, 3>& c) {
  auto d2 = (xyz[0] - c[0]).square() + (xyz[1] - c[1]).square() + (xyz[2] - c[2]).square();
  return torch::exp(-d2 / (2.0 * kLesionSigma * kLesionSigma));
}

torch::Tensor structure_mask(const std::array<torch::Tensor, 3>& xyz, const Anatomy& a, int n_structures) {
  auto r = ellipsoid_radius(xyz, a);
  auto mask = torch::zeros(r.sizes(), torch::TensorOptions().dtype(torch::kUInt8));
  double lo = 0.0;
  for (int s = 0; s < n_structures; ++s) {
    const double hi = shell_boundary(s, n_structures);
    mask.masked_fill_((r >= lo).logical_and(r < hi), s + 1);
    lo = hi;
  }
  return mask;
}

// Raw (1, D + extra, H, W) intensities for one scan.
torch::Tensor raw_scan(const PhantomSpec& spec, const Anatomy& a, const std::vector<std::uint8_t>& labels,
                       Orientation o, std::uint64_t noise_seed) {
  const auto n = spec.resolution.depth + spec.extra_raw_slices;
  auto xyz = slab_coordinates(o, n, spec.resolution);
  auto r = ellipsoid_radius(xyz, a);
  auto vol = torch::zeros_like(r);
  double lo = 0.0;
  for (int s = 0; s < spec.n_structures; ++s) {
    const double hi = shell_boundary(s, spec.n_structures);
    vol.masked_fill_((r >= lo).logical_and(r < hi), a.intensity[static_cast<std::size_t>(s)]);
    lo = hi;
  }
  vol = vol + 0.1 * a.grad_x * xyz[0] + 0.1 * a.grad_y * xyz[1];
  for (int k = 0; k < spec.n_labels; ++k) {
    if (labels[static_cast<std::size_t>(k)] != 0) {
      vol = vol + spec.label_effect_strength * gaussian_bump(xyz, a.lesion_centers[static_cast<std::size_t>(k)]);
    }
  }
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> eps(static_cast<std::size_t>(vol.numel()));
  for (auto& e : eps) e = noise(rng);
  vol = vol + spec.noise_floor * torch::from_blob(eps.data(), vol.sizes(), torch::kFloat64).clone();
  return vol.unsqueeze(0);
}

std::uint64_t scan_noise_seed(const PhantomSpec& spec, const std::string& patient_id, Orientation o,
                              int scan_index) {
  return mix_seed(mix_seed(spec.seed, fnv1a(patient_id)),
                  fnv1a(std::string("noise:") + std::string(short_name(o)) + ":" + std::to_string(scan_index)));
}

std::string patient_name(std::int64_t i, std::int64_t n) {
  const int width = std::max(4, static_cast<int>(std::to_string(n > 0 ? n - 1 : 0).size()));
  auto digits = std::to_string(i);
  return "P" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') + digits;
}

EHRRecord draw_ehr(const PhantomSpec& spec, const std::string& patient_id,
                   const std::vector<std::uint8_t>& labels) {
  auto rng = rng_for(spec.seed, patient_id, "ehr");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> unit(0.0, 1.0);
  const int positives = static_cast<int>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  EHRRecord e;
  const double age = 35.0 + 4.0 * positives + 10.0 * unit(rng);
  const double height = 170.0 + 9.0 * unit(rng);
  const double weight = 70.0 + 12.0 * unit(rng);
  if (u(rng) > 0.1) e.age = age;
  if (u(rng) > 0.1) e.height = height;
  if (u(rng) > 0.1) e.weight = weight;
  const double sex = u(rng);
  e.sex = sex < 0.05 ? Sex::kUnknown : (sex < 0.55 ? Sex::kMale : Sex::kFemale);
  const bool sporty = !labels.empty() && labels[0] != 0;
  const double type = u(rng);
  const double athlete_p = sporty ? 0.6 : 0.2;
  e.patient_type = type < 0.05 ? PatientType::kUnknown
                               : (type < 0.05 + athlete_p ? PatientType::kAthlete : PatientType::kNonAthlete);
  const double ev = u(rng);
  if (ev < 0.05) {
    e.event = InjuryEvent::kUnknown;
  } else if (sporty && ev < 0.5) {
    e.event = InjuryEvent::kSports;
  } else {
    e.event = static_cast<InjuryEvent>(std::min(kNumInjuryEvents - 1, static_cast<int>(u(rng) * kNumInjuryEvents)));
  }
  return e;
}

}  // namespace

void PhantomSpec::validate() const {
  if (n_patients <= 0) throw ValidationError("n_patients must be positive");
  if (resolution.depth <= 0 || resolution.height <= 0 || resolution.width <= 0) {
    throw ValidationError("resolution extents must be positive");
  }
  if (n_labels <= 0) throw ValidationError("n_labels must be positive");
  if (n_structures <= 0 || n_structures > 255) throw ValidationError("n_structures must be in [1, 255]");
  if (!(label_effect_strength > 0.0)) throw ValidationError("label_effect_strength must be > 0");
  if (!(noise_floor >= 0.0)) throw ValidationError("noise_floor must be >= 0");
  if (!(multi_scan_fraction >= 0.0 && multi_scan_fraction < 0.5)) {
    throw ValidationError("multi_scan_fraction must lie in [0, 0.5)");
  }
  if (!(label_prevalence > 0.0 && label_prevalence < 1.0)) {
    throw ValidationError("label_prevalence must lie in (0, 1)");
  }
  if (extra_raw_slices < 0) throw ValidationError("extra_raw_slices must be >= 0");
}

LesionSite lesion_site(int label) {
  if (label < 0) throw ValidationError("label index must be non-negative");
  switch (label) {
    case 0: return {{0.0, 0.5, -0.5}, kLesionSigma, Orientation::kSagittal, false};
    case 1: return {{0.5, 0.0, 0.5}, kLesionSigma, Orientation::kCoronal, false};
    case 2: return {{-0.5, -0.5, 0.0}, kLesionSigma, Orientation::kAxial, false};
    case 3: return {{0.1, -0.1, 0.1}, kLesionSigma, Orientation::kSagittal, true};
    default: break;
  }
  // Further labels go on a ring inside the slab of one orientation.
  const auto o = kOrientations[static_cast<std::size_t>(label) % 3];
  const double theta = std::numbers::pi / 4.0 + std::numbers::pi / 2.0 * static_cast<double>((label / 3) % 4);
  const double u = 0.65 * std::cos(theta);
  const double v = 0.65 * std::sin(theta);
  std::array<double, 3> c{};
  switch (o) {
    case Orientation::kSagittal: c = {0.0, u, v}; break;
    case Orientation::kCoronal: c = {u, 0.0, v}; break;
    case Orientation::kAxial: c = {u, v, 0.0}; break;
  }
  return {c, kLesionSigma, o, false};
}

std::vector<std::uint8_t> draw_labels(const PhantomSpec& spec, const std::string& patient_id) {
  auto rng = rng_for(spec.seed, patient_id, "labels");
  std::bernoulli_distribution positive(spec.label_prevalence);
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(spec.n_labels));
  for (auto& l : labels) l = positive(rng) ? 1 : 0;
  return labels;
}

StudyRecord generate_phantom_study(const PhantomSpec& spec, const std::string& patient_id) {
  spec.validate();
  return generate_phantom_study(spec, patient_id, draw_labels(spec, patient_id));
}

StudyRecord generate_phantom_study(const PhantomSpec& spec, const std::string& patient_id,
                                   const std::vector<std::uint8_t>& labels) {
  spec.validate();
  if (patient_id.empty()) throw ValidationError("patient_id must be non-empty");
  if (labels.size() != static_cast<std::size_t>(spec.n_labels)) {
    throw ValidationError("label vector length must equal n_labels");
  }
  const auto anatomy = draw_anatomy(spec, patient_id);

  std::array<int, 3> n_scans = {1, 1, 1};
  auto rng = rng_for(spec.seed, patient_id, "scans");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < spec.multi_scan_fraction) {
    n_scans[std::min<std::size_t>(2, static_cast<std::size_t>(u(rng) * 3.0))] += 1;
  }

  StudyRecord record;
  record.patient_id = patient_id;
  record.labels = labels;
  record.ehr = draw_ehr(spec, patient_id, labels);
  for (auto o : kOrientations) {
    auto xyz = slab_coordinates(o, spec.resolution.depth, spec.resolution);
    std::optional<SegMask> mask;
    if (o != Orientation::kAxial) {
      mask = SegMask{structure_mask(xyz, anatomy, spec.n_structures), spec.n_structures};
    }
    auto& scans = record.scans[o];
    for (int i = 0; i < n_scans[index_of(o)]; ++i) {
      const std::string scan_id = patient_id + "_" + std::string(short_name(o)) + "_" + std::to_string(i);
      auto raw = raw_scan(spec, anatomy, labels, o, scan_noise_seed(spec, patient_id, o, i));
      Scan scan{preprocess_volume(raw, spec.resolution, o, patient_id, scan_id), mask};
      scans.push_back(std::move(scan));
    }
  }
  return record;
}

torch::Tensor lesion_region(const PhantomSpec& spec, const std::string& patient_id, int label,
                            Orientation o, int scan_index) {
  spec.validate();
  if (label < 0 || label >= spec.n_labels) throw ValidationError("label index out of range");
  if (scan_index < 0) throw ValidationError("scan index must be non-negative");
  const auto anatomy = draw_anatomy(spec, patient_id);
  auto xyz = slab_coordinates(o, spec.resolution.depth, spec.resolution);
  const auto& c = anatomy.lesion_centers[static_cast<std::size_t>(label)];
  auto d2 = (xyz[0] - c[0]).square() + (xyz[1] - c[1]).square() + (xyz[2] - c[2]).square();
  return d2 <= kLesionSigma * kLesionSigma;
}

VolumeTensor preprocess_volume(const torch::Tensor& raw, const Resolution& profile, Orientation o,
                               std::string study_id, std::string scan_id) {
  if (raw.dim() != 4 || raw.size(0) != 1) throw ShapeError("raw volume must have shape (1, D, H, W)");
  if (raw.size(1) < profile.depth) {
    throw ShapeError("raw volume has " + std::to_string(raw.size(1)) + " slices, profile needs " +
                     std::to_string(profile.depth));
  }
  if (!raw.is_floating_point()) throw ValidationError("raw volume must be real-valued");
  if (!torch::isfinite(raw).all().item<bool>()) throw NumericError("raw volume contains NaN or Inf");

  const auto offset = (raw.size(1) - profile.depth) / 2;
  auto x = raw.to(torch::kFloat64).narrow(1, offset, profile.depth);
  if (x.size(2) != profile.height || x.size(3) != profile.width) {
    // Slices become the batch axis of a 2D bilinear resize.
    x = F::interpolate(x.transpose(0, 1),
                       F::InterpolateFuncOptions()
                           .size(std::vector<std::int64_t>{profile.height, profile.width})
                           .mode(torch::kBilinear)
                           .align_corners(false))
            .transpose(0, 1);
  }
  const double lo = x.min().item<double>();
  const double hi = x.max().item<double>();
  torch::Tensor out;
  if (hi - lo > 0.0) {
    out = ((x - lo) / (hi - lo) * 2.0 - 1.0).clamp(-1.0, 1.0);
  } else {
    out = torch::zeros_like(x);
  }
  return VolumeTensor{out.to(torch::kFloat32).contiguous(), o, std::move(study_id), std::move(scan_id)};
}

std::vector<std::string> StudyRecord::scan_ids(Orientation o) const {
  std::vector<std::string> ids;
  if (auto it = scans.find(o); it != scans.end()) {
    for (const auto& s : it->second) ids.push_back(s.id());
  }
  return ids;
}

const std::vector<Scan>& StudyRecord::scans_in(Orientation o) const {
  static const std::vector<Scan> kEmpty;
  auto it = scans.find(o);
  return it == scans.end() ? kEmpty : it->second;
}

const Scan& StudyRecord::find_scan(const std::string& scan_id) const {
  for (const auto& [o, list] : scans) {
    for (const auto& s : list) {
      if (s.id() == scan_id) return s;
    }
  }
  throw ValidationError("scan '" + scan_id + "' not found in study " + patient_id);
}

bool StudyRecord::has_all_orientations() const {
  return std::all_of(kOrientations.begin(), kOrientations.end(),
                     [&](Orientation o) { return !scans_in(o).empty(); });
}

DatasetIndex::DatasetIndex(std::map<Split, std::vector<std::string>> splits,
                           std::map<std::string, StudyRecord> records, std::uint64_t seed)
    : splits_(std::move(splits)), records_(std::move(records)), seed_(seed) {
  for (auto s : {Split::kTrain, Split::kVal, Split::kTest}) splits_[s];
  validate();
}

const std::vector<std::string>& DatasetIndex::patient_ids(Split s) const {
  static const std::vector<std::string> kEmpty;
  auto it = splits_.find(s);
  return it == splits_.end() ? kEmpty : it->second;
}

std::vector<const StudyRecord*> DatasetIndex::records_in(Split s) const {
  log_->record(s);
  std::vector<const StudyRecord*> out;
  for (const auto& id : patient_ids(s)) out.push_back(&records_.at(id));
  return out;
}

const StudyRecord& DatasetIndex::record(const std::string& patient_id) const {
  auto it = records_.find(patient_id);
  if (it == records_.end()) throw ValidationError("unknown patient '" + patient_id + "'");
  return it->second;
}

Split DatasetIndex::split_of(const std::string& patient_id) const {
  for (const auto& [s, ids] : splits_) {
    if (std::find(ids.begin(), ids.end(), patient_id) != ids.end()) return s;
  }
  throw ValidationError("patient '" + patient_id + "' is in no split");
}

int DatasetIndex::n_labels() const {
  return records_.empty() ? 0 : static_cast<int>(records_.begin()->second.labels.size());
}

void DatasetIndex::validate() const {
  std::set<std::string> seen;
  for (const auto& [s, ids] : splits_) {
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw ValidationError("patient '" + id + "' appears in two splits");
      if (!records_.contains(id)) throw ValidationError("split references unknown patient '" + id + "'");
    }
  }
  if (seen.size() != records_.size()) throw ValidationError("splits do not cover every record");
  const auto k = n_labels();
  for (const auto& [id, r] : records_) {
    if (r.patient_id != id) throw ValidationError("record key does not match patient_id '" + id + "'");
    if (static_cast<int>(r.labels.size()) != k) throw ValidationError("inconsistent label length for " + id);
  }
}

DatasetIndex split_by_patient(std::vector<StudyRecord> records, SplitFractions fractions,
                              std::uint64_t seed) {
  if (records.empty()) throw ValidationError("cannot split an empty record list");
  if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0 ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  std::sort(records.begin(), records.end(),
            [](const StudyRecord& a, const StudyRecord& b) { return a.patient_id < b.patient_id; });
  std::vector<std::string> ids;
  std::map<std::string, StudyRecord> by_id;
  for (auto& r : records) {
    ids.push_back(r.patient_id);
    if (!by_id.emplace(r.patient_id, std::move(r)).second) {
      throw ValidationError("duplicate patient_id '" + ids.back() + "'");
    }
  }
  std::mt19937_64 rng(mix_seed(seed, fnv1a("split")));
  std::shuffle(ids.begin(), ids.end(), rng);

  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * n));
  const auto n_val = std::min(ids.size() - n_train, static_cast<std::size_t>(std::llround(fractions.val * n)));
  std::map<Split, std::vector<std::string>> splits;
  splits[Split::kTrain].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  splits[Split::kVal].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                             ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  splits[Split::kTest].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  for (auto& [s, list] : splits) std::sort(list.begin(), list.end());
  return DatasetIndex(std::move(splits), std::move(by_id), seed);
}

DatasetIndex generate_dataset(const PhantomSpec& spec, SplitFractions fractions) {
  spec.validate();
  std::vector<StudyRecord> records;
  records.reserve(static_cast<std::size_t>(spec.n_patients));
  for (std::int64_t i = 0; i < spec.n_patients; ++i) {
    records.push_back(generate_phantom_study(spec, patient_name(i, spec.n_patients)));
  }
  return split_by_patient(std::move(records), fractions, spec.seed);
}

std::optional<std::vector<FusionSample>> enumerate_fusion_samples(const StudyRecord& record) {
  if (!record.has_all_orientations()) return std::nullopt;
  const auto& sag = record.scans_in(Orientation::kSagittal);
  const auto& cor = record.scans_in(Orientation::kCoronal);
  const auto& ax = record.scans_in(Orientation::kAxial);
  const double weight = 1.0 / static_cast<double>(sag.size() * cor.size() * ax.size());
  std::vector<FusionSample> out;
  out.reserve(sag.size() * cor.size() * ax.size());
  for (const auto& s : sag) {
    for (const auto& c : cor) {
      for (const auto& a : ax) out.push_back({s.id(), c.id(), a.id(), weight});
    }
  }
  return out;
}

}  // namespace orthodiff
