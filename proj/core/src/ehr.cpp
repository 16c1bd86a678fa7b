#include "orthodiff/ehr.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "orthodiff/errors.hpp"

namespace orthodiff {

namespace {

constexpr const char* kEhrHeader = "patient_id,age,height,weight,sex,patient_type,event";

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(cell);
  return cells;
}

std::optional<double> parse_number(const std::string& cell, const std::string& field) {
  if (cell.empty()) return std::nullopt;
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(value)) {
    throw ValidationError("bad " + field + " value '" + cell + "'");
  }
  return value;
}

std::string format_number(const std::optional<double>& v) {
  if (!v) return {};
  std::ostringstream out;
  out << std::setprecision(17) << *v;
  return out.str();
}

}  // namespace

EhrStats EhrStats::fit(const std::vector<EHRRecord>& training_records) {
  EhrStats stats;
  for (std::size_t f = 0; f < 3; ++f) {
    double sum = 0.0;
    double sq = 0.0;
    std::size_t n = 0;
    for (const auto& r : training_records) {
      const auto& v = f == 0 ? r.age : (f == 1 ? r.height : r.weight);
      if (!v) continue;
      sum += *v;
      sq += *v * *v;
      ++n;
    }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
    stats.mean[f] = mean;
    stats.stddev[f] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

EhrFixedFeatures encode_ehr_fixed(const EHRRecord& rec, const EhrStats& stats) {
  EhrFixedFeatures out;
  const std::array<const std::optional<double>*, 3> cont = {&rec.age, &rec.height, &rec.weight};
  for (std::size_t f = 0; f < 3; ++f) {
    if (*cont[f]) out.dense[f] = static_cast<float>((**cont[f] - stats.mean[f]) / stats.stddev[f]);
  }
  out.dense[3 + static_cast<std::size_t>(rec.sex)] = 1.0F;
  out.dense[6 + static_cast<std::size_t>(rec.patient_type)] = 1.0F;
  out.event_index = static_cast<std::int64_t>(rec.event);
  return out;
}

EhrModelImpl::EhrModelImpl(std::int64_t n_labels, double dropout_p) : n_labels_(n_labels) {
  if (n_labels <= 0) throw ConfigError("EHR head needs at least one label");
  event_table = register_module("event_table", torch::nn::Embedding(kNumInjuryEvents + 1, kEventEmbeddingDim));
  {
    torch::NoGradGuard no_grad;
    event_table->weight.normal_(0.0, 1.0).mul_(0.1);
  }
  fc1 = register_module("fc1", torch::nn::Linear(kEhrFeatureDim, kEhrHiddenUnits));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({kEhrHiddenUnits})));
  dropout = register_module("dropout", torch::nn::Dropout(dropout_p));
  fc2 = register_module("fc2", torch::nn::Linear(kEhrHiddenUnits, n_labels));
}

torch::Tensor EhrModelImpl::encode(const torch::Tensor& dense, const torch::Tensor& events) {
  if (dense.dim() != 2 || dense.size(1) != 9) throw ShapeError("dense EHR block must be (B, 9)");
  if (events.dim() != 1 || events.size(0) != dense.size(0)) throw ShapeError("one event index per record");
  return torch::cat({dense, event_table->forward(events)}, 1);
}

torch::Tensor EhrModelImpl::head(const torch::Tensor& features) {
  if (features.size(-1) != kEhrFeatureDim) throw ConfigError("EHR head expects 17-wide features");
  auto h = torch::relu(fc1->forward(features));
  return fc2->forward(dropout->forward(norm->forward(h)));
}

torch::Tensor encode_ehr(const EHRRecord& rec, const EhrStats& stats, EhrModel& model) {
  auto fixed = encode_ehr_fixed(rec, stats);
  auto dense = torch::from_blob(fixed.dense.data(), {1, 9}, torch::kFloat32).clone();
  auto events = torch::tensor({fixed.event_index}, torch::kInt64);
  return model->encode(dense.to(model->fc1->weight.scalar_type()), events).squeeze(0);
}

torch::Tensor ehr_head(const torch::Tensor& feature, EhrModel& model) { return model->head(feature); }

LateFusionImpl::LateFusionImpl(std::int64_t n_labels) {
  if (n_labels <= 0) throw ConfigError("late fusion needs at least one label");
  w = register_parameter("w", torch::zeros({n_labels}));
}

torch::Tensor LateFusionImpl::forward(const torch::Tensor& z_mri, const torch::Tensor& z_ehr) {
  return late_fuse(z_mri, z_ehr, w);
}

torch::Tensor late_fuse(const torch::Tensor& z_mri, const torch::Tensor& z_ehr, const torch::Tensor& w) {
  if (z_mri.sizes() != z_ehr.sizes()) throw ShapeError("MRI and EHR logits must have the same shape");
  if (w.dim() != 1 || z_mri.size(-1) != w.size(0)) throw ShapeError("gamma length must equal label count");
  auto gamma = torch::sigmoid(w);
  return gamma * z_mri + (1.0 - gamma) * z_ehr;
}

std::map<std::string, EHRRecord> read_ehr_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("EHR CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kEhrHeader) throw ValidationError("EHR CSV header must be '" + std::string(kEhrHeader) + "'");
  std::map<std::string, EHRRecord> out;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 7) throw ValidationError("EHR CSV row needs 7 cells: '" + line + "'");
    if (cells[0].empty()) throw ValidationError("EHR CSV row without patient_id");
    EHRRecord rec;
    rec.age = parse_number(cells[1], "age");
    rec.height = parse_number(cells[2], "height");
    rec.weight = parse_number(cells[3], "weight");
    rec.sex = sex_from_string(cells[4]);
    rec.patient_type = patient_type_from_string(cells[5]);
    rec.event = injury_event_from_string(cells[6]);
    if (!out.emplace(cells[0], rec).second) throw ValidationError("duplicate EHR row for " + cells[0]);
  }
  return out;
}

std::string write_ehr_csv(const std::map<std::string, EHRRecord>& records) {
  std::ostringstream out;
  out << kEhrHeader << '\n';
  for (const auto& [id, r] : records) {
    out << id << ',' << format_number(r.age) << ',' << format_number(r.height) << ',' << format_number(r.weight)
        << ',' << to_string(r.sex) << ',' << to_string(r.patient_type) << ',' << to_string(r.event) << '\n';
  }
  return out.str();
}

}  // namespace orthodiff
