#include "orthodiff/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "orthodiff/errors.hpp"
#include "orthodiff/hashing.hpp"

namespace orthodiff {

namespace {

using torch::optim::Adam;
using torch::optim::AdamOptions;
using torch::optim::OptimizerParamGroup;

// Shuffled minibatches over n examples for a fixed number of steps, with a
// cosine-annealed learning rate applied to every parameter group.
class StepLoop {
 public:
  StepLoop(std::int64_t n, std::int64_t batch, std::int64_t total_steps, std::uint64_t seed)
      : n_(n), batch_(batch), total_(total_steps), gen_(at::make_generator<at::CPUGeneratorImpl>(seed)) {
    if (n <= 0) throw ValidationError("no training examples");
  }

  bool next(torch::Tensor& idx) {
    if (step_ >= total_) return false;
    if (!perm_.defined() || pos_ >= n_) {
      perm_ = torch::randperm(n_, gen_, torch::kInt64);
      pos_ = 0;
      ++epoch_;
    }
    const auto len = std::min(batch_, n_ - pos_);
    idx = perm_.narrow(0, pos_, len);
    pos_ += len;
    ++step_;
    return true;
  }

  void anneal(Adam& opt, const std::vector<double>& base_lrs) const {
    const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step_ - 1) / static_cast<double>(total_)));
    for (std::size_t g = 0; g < opt.param_groups().size(); ++g) {
      static_cast<AdamOptions&>(opt.param_groups()[g].options()).lr(base_lrs[g] * f);
    }
  }

  std::int64_t epoch() const { return epoch_; }
  bool epoch_done() const { return pos_ >= n_ || step_ >= total_; }

 private:
  std::int64_t n_, batch_, total_;
  at::Generator gen_;
  torch::Tensor perm_;
  std::int64_t pos_ = 0;
  std::int64_t step_ = 0;
  std::int64_t epoch_ = 0;
};

// Accumulates per-epoch mean losses.
struct EpochMeter {
  double sum = 0.0;
  std::int64_t count = 0;
  std::vector<double> means;

  void add(double v) {
    sum += v;
    ++count;
  }
  void close() {
    if (count > 0) means.push_back(sum / static_cast<double>(count));
    sum = 0.0;
    count = 0;
  }
};

std::vector<const StudyRecord*> filter_records(std::vector<const StudyRecord*> records,
                                               const std::vector<std::string>* subset) {
  if (subset == nullptr) return records;
  std::set<std::string> keep(subset->begin(), subset->end());
  std::vector<const StudyRecord*> out;
  for (const auto* r : records) {
    if (keep.contains(r->patient_id)) out.push_back(r);
  }
  if (out.size() != keep.size()) throw ValidationError("label subset references patients outside the training split");
  return out;
}

torch::Tensor labels_of(const std::vector<const StudyRecord*>& records) {
  if (records.empty()) return torch::zeros({0, 0});
  const auto k = static_cast<std::int64_t>(records.front()->labels.size());
  auto out = torch::zeros({static_cast<std::int64_t>(records.size()), k});
  auto acc = out.accessor<float, 2>();
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::int64_t j = 0; j < k; ++j) acc[static_cast<std::int64_t>(i)][j] = records[i]->labels[static_cast<std::size_t>(j)];
  }
  return out;
}

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
}

struct Probe {
  PoolingModule pooling{nullptr};
  torch::nn::Linear head{nullptr};
  std::vector<double> epoch_losses;
};

// Pooling + linear head trained on precomputed (N, C, d, h, w) features.
Probe fit_probe(const torch::Tensor& features, const torch::Tensor& labels, const TrainPlan& plan,
                std::uint64_t seed) {
  torch::manual_seed(seed);
  Probe p;
  p.pooling = PoolingModule(plan.pooling, features.size(1));
  p.pooling->fit_standardization(features);
  p.head = torch::nn::Linear(p.pooling->out_dim(), labels.size(1));
  std::vector<torch::Tensor> params = p.pooling->parameters();
  for (auto& t : p.head->parameters()) params.push_back(t);
  Adam opt(params, AdamOptions(plan.lr).weight_decay(plan.weight_decay));
  StepLoop loop(features.size(0), plan.batch_size, plan.total_steps(features.size(0)), mix_seed(seed, 1));
  EpochMeter meter;
  torch::Tensor idx;
  while (loop.next(idx)) {
    loop.anneal(opt, {plan.lr});
    auto logits = p.head->forward(p.pooling->forward(features.index_select(0, idx)));
    auto loss = torch::binary_cross_entropy_with_logits(logits, labels.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
    meter.add(loss.item<double>());
    if (loop.epoch_done()) meter.close();
  }
  meter.close();
  p.epoch_losses = meter.means;
  freeze(*p.pooling);
  freeze(*p.head);
  return p;
}

std::string combined_checksum(std::initializer_list<torch::nn::Module*> modules) {
  Fnv1a h;
  for (auto* m : modules) {
    if (m != nullptr) h.update(parameter_checksum(*m));
  }
  return h.hex();
}

metrics::MultiLabelScores patient_scores(const std::vector<std::string>& row_patient, const torch::Tensor& probs,
                                         const torch::Tensor& row_weight,
                                         const std::vector<const StudyRecord*>& records) {
  const auto k = probs.size(1);
  std::map<std::string, std::size_t> slot;
  std::vector<const StudyRecord*> kept;
  for (const auto* r : records) {
    if (std::find(row_patient.begin(), row_patient.end(), r->patient_id) != row_patient.end()) {
      slot.emplace(r->patient_id, kept.size());
      kept.push_back(r);
    }
  }
  metrics::MultiLabelScores out;
  out.n = kept.size();
  out.k = static_cast<std::size_t>(k);
  out.scores.assign(out.n * out.k, 0.0);
  std::vector<double> wsum(out.n, 0.0);
  auto p = probs.to(torch::kFloat64).contiguous();
  auto w = row_weight.to(torch::kFloat64).contiguous();
  auto pa = p.accessor<double, 2>();
  auto wa = w.accessor<double, 1>();
  for (std::size_t i = 0; i < row_patient.size(); ++i) {
    const auto s = slot.at(row_patient[i]);
    const auto ii = static_cast<std::int64_t>(i);
    wsum[s] += wa[ii];
    for (std::int64_t j = 0; j < k; ++j) out.scores[s * out.k + static_cast<std::size_t>(j)] += wa[ii] * pa[ii][j];
  }
  for (std::size_t s = 0; s < out.n; ++s) {
    for (std::size_t j = 0; j < out.k; ++j) out.scores[s * out.k + j] /= wsum[s];
    for (std::size_t j = 0; j < out.k; ++j) out.truth.push_back(kept[s]->labels[j]);
  }
  return out;
}

}  // namespace

std::string_view to_string(ProbeSetting s) { return s == ProbeSetting::kLinearProbe ? "lp" : "ft"; }

ProbeSetting probe_setting_from_string(std::string_view name) {
  if (name == "lp" || name == "LP" || name == "linear_probe") return ProbeSetting::kLinearProbe;
  if (name == "ft" || name == "FT" || name == "fine_tune") return ProbeSetting::kFineTune;
  throw ValidationError("unknown probe setting '" + std::string(name) + "'");
}

void TrainPlan::validate() const {
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(backbone_lr >= 0.0)) throw ConfigError("backbone_lr must be non-negative");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("label_fraction must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (min_steps < 0) throw ConfigError("min_steps must be non-negative");
}

std::int64_t TrainPlan::total_steps(std::int64_t n_examples) const {
  const auto per_epoch = (n_examples + batch_size - 1) / batch_size;
  return std::max(epochs * per_epoch, min_steps);
}

UNet3D clone_denoiser(UNet3D& source) {
  UNet3D copy(source->config());
  copy->to(source->parameters().front().scalar_type());
  torch::NoGradGuard no_grad;
  auto dst = copy->named_parameters();
  for (const auto& p : source->named_parameters()) dst[p.key()].copy_(p.value());
  auto dst_buf = copy->named_buffers();
  for (const auto& b : source->named_buffers()) dst_buf[b.key()].copy_(b.value());
  copy->eval();
  return copy;
}

std::vector<std::string> nested_subset(const std::vector<std::string>& train_ids, double fraction,
                                       std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("label fraction must lie in (0, 1]");
  if (train_ids.empty()) throw ValidationError("no training patients to subsample");
  auto ids = train_ids;
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(mix_seed(seed, fnv1a("label-subset")));
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size()) - 1e-9));
  ids.resize(std::max<std::size_t>(1, n));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------- stage 1

ScanBatch collect_scans(const std::vector<const StudyRecord*>& records, Orientation o, std::uint64_t noise_seed) {
  ScanBatch batch;
  std::vector<torch::Tensor> vols, noise;
  std::vector<const StudyRecord*> owners;
  for (const auto* r : records) {
    for (const auto& scan : r->scans_in(o)) {
      batch.patient_ids.push_back(r->patient_id);
      batch.scan_ids.push_back(scan.id());
      vols.push_back(scan.volume.data);
      noise.push_back(tap_noise(scan.volume.data, noise_seed, scan.id()));
      owners.push_back(r);
    }
  }
  if (vols.empty()) throw ValidationError("no scans in orientation " + std::string(to_string(o)));
  batch.volumes = torch::stack(vols);
  batch.noise = torch::stack(noise);
  batch.labels = labels_of(owners);
  return batch;
}

torch::Tensor frozen_features(UNet3D& backbone, const ScanBatch& scans, const TapPoint& tap,
                              const NoiseSchedule& sched, std::int64_t chunk) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  const auto n = scans.volumes.size(0);
  for (std::int64_t i = 0; i < n; i += chunk) {
    const auto len = std::min(chunk, n - i);
    out.push_back(tap_batch(backbone, scans.volumes.narrow(0, i, len), scans.noise.narrow(0, i, len), tap, sched));
  }
  return torch::cat(out);
}

Stage1Artifacts train_stage1(const DatasetIndex& dataset, Orientation o, const TapPoint& tap, ProbeSetting setting,
                             const TrainPlan& plan, UNet3D& pretrained, const NoiseSchedule& sched,
                             const std::vector<std::string>* patient_subset) {
  plan.validate();
  auto records = filter_records(dataset.records_in(Split::kTrain), patient_subset);
  auto scans = collect_scans(records, o, plan.noise_seed);

  Stage1Artifacts a;
  a.orientation = o;
  a.tap = tap;
  a.setting = setting;
  a.backbone = clone_denoiser(pretrained);
  a.backbone_checksum_before = parameter_checksum(*a.backbone);
  auto initial = frozen_features(a.backbone, scans, tap, sched);

  if (setting == ProbeSetting::kLinearProbe) {
    freeze(*a.backbone);
    auto probe = fit_probe(initial, scans.labels, plan, plan.seed);
    a.pooling = probe.pooling;
    a.head = probe.head;
    a.epoch_losses = probe.epoch_losses;
    a.backbone_checksum_after = parameter_checksum(*a.backbone);
    return a;
  }

  torch::manual_seed(plan.seed);
  a.pooling = PoolingModule(plan.pooling, initial.size(1));
  a.pooling->fit_standardization(initial);
  a.head = torch::nn::Linear(a.pooling->out_dim(), scans.labels.size(1));

  std::vector<torch::Tensor> backbone_params;
  for (auto& p : a.backbone->named_parameters()) {
    const bool trainable = !UNet3DImpl::is_decoder_parameter(p.key());
    p.value().set_requires_grad(trainable);
    if (trainable) backbone_params.push_back(p.value());
  }
  std::vector<torch::Tensor> head_params = a.pooling->parameters();
  for (auto& t : a.head->parameters()) head_params.push_back(t);
  std::vector<OptimizerParamGroup> groups;
  groups.emplace_back(head_params, std::make_unique<AdamOptions>(AdamOptions(plan.lr).weight_decay(plan.weight_decay)));
  groups.emplace_back(backbone_params,
                      std::make_unique<AdamOptions>(AdamOptions(plan.backbone_lr).weight_decay(plan.weight_decay)));
  Adam opt(std::move(groups), AdamOptions(plan.lr));

  const auto n = scans.volumes.size(0);
  StepLoop loop(n, plan.batch_size, plan.total_steps(n), mix_seed(plan.seed, 1));
  EpochMeter meter;
  torch::Tensor idx;
  while (loop.next(idx)) {
    loop.anneal(opt, {plan.lr, plan.backbone_lr});
    auto feats = tap_batch(a.backbone, scans.volumes.index_select(0, idx), scans.noise.index_select(0, idx), tap, sched);
    auto logits = a.head->forward(a.pooling->forward(feats));
    auto loss = torch::binary_cross_entropy_with_logits(logits, scans.labels.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
    meter.add(loss.item<double>());
    if (loop.epoch_done()) meter.close();
  }
  meter.close();
  a.epoch_losses = meter.means;
  freeze(*a.backbone);
  freeze(*a.pooling);
  freeze(*a.head);
  a.backbone_checksum_after = parameter_checksum(*a.backbone);
  return a;
}

torch::Tensor stage1_embeddings(Stage1Artifacts& a, const ScanBatch& scans, const NoiseSchedule& sched) {
  torch::NoGradGuard no_grad;
  return a.pooling->forward(frozen_features(a.backbone, scans, a.tap, sched));
}

torch::Tensor stage1_logits(Stage1Artifacts& a, const ScanBatch& scans, const NoiseSchedule& sched) {
  torch::NoGradGuard no_grad;
  return a.head->forward(stage1_embeddings(a, scans, sched));
}

metrics::MultiLabelScores predict_stage1(Stage1Artifacts& a, const std::vector<const StudyRecord*>& records,
                                         const NoiseSchedule& sched, std::uint64_t noise_seed) {
  auto scans = collect_scans(records, a.orientation, noise_seed);
  auto probs = torch::sigmoid(stage1_logits(a, scans, sched));
  return patient_scores(scans.patient_ids, probs, torch::ones({probs.size(0)}), records);
}

// ---------------------------------------------------------------- stage 2

torch::Tensor weighted_bce(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& weights,
                           const std::vector<std::string>* patient_of) {
  if (logits.sizes() != targets.sizes() || logits.dim() != 2) throw ShapeError("logits and targets must be (M, K)");
  if (weights.dim() != 1 || weights.size(0) != logits.size(0)) throw ShapeError("one weight per tuple expected");
  if (patient_of != nullptr) {
    if (patient_of->size() != static_cast<std::size_t>(weights.size(0))) {
      throw ShapeError("one patient id per tuple expected");
    }
    std::map<std::string, double> sums;
    auto w = weights.detach().to(torch::kFloat64).contiguous();
    auto acc = w.accessor<double, 1>();
    for (std::size_t i = 0; i < patient_of->size(); ++i) sums[(*patient_of)[i]] += acc[static_cast<std::int64_t>(i)];
    for (const auto& [id, s] : sums) {
      if (std::abs(s - 1.0) > 1e-9) throw ValidationError("tuple weights of patient " + id + " do not sum to 1");
    }
  }
  auto per_tuple =
      torch::binary_cross_entropy_with_logits(logits, targets, {}, {}, torch::Reduction::None).mean(1);
  return (weights.to(per_tuple.scalar_type()) * per_tuple).sum();
}

EmbeddingTable embed_orientation(Stage1Artifacts& a, const std::vector<const StudyRecord*>& records,
                                 const NoiseSchedule& sched, std::uint64_t noise_seed) {
  auto scans = collect_scans(records, a.orientation, noise_seed);
  EmbeddingTable t;
  {
    torch::NoGradGuard no_grad;
    t.embeddings = stage1_embeddings(a, scans, sched);
    t.logits = a.head->forward(t.embeddings);
  }
  for (std::size_t i = 0; i < scans.scan_ids.size(); ++i) t.row_of_scan[scans.scan_ids[i]] = static_cast<std::int64_t>(i);
  return t;
}

TupleSet enumerate_tuples(const std::vector<const StudyRecord*>& records, const std::array<EmbeddingTable, 3>& tables) {
  TupleSet ts;
  std::vector<double> weights;
  std::vector<const StudyRecord*> owners;
  for (const auto* r : records) {
    auto samples = enumerate_fusion_samples(*r);
    if (!samples) {
      ts.excluded.push_back(r->patient_id);
      continue;
    }
    for (const auto& s : *samples) {
      ts.patient_ids.push_back(r->patient_id);
      ts.scan_rows[0].push_back(tables[0].row_of_scan.at(s.sagittal));
      ts.scan_rows[1].push_back(tables[1].row_of_scan.at(s.coronal));
      ts.scan_rows[2].push_back(tables[2].row_of_scan.at(s.axial));
      weights.push_back(s.weight);
      owners.push_back(r);
    }
  }
  if (owners.empty()) throw ValidationError("no patient has scans in all three orientations");
  ts.weights = torch::tensor(weights, torch::kFloat64).to(torch::kFloat32);
  ts.labels = labels_of(owners);
  return ts;
}

std::string stage1_checksum(Stage1Artifacts& a) {
  return combined_checksum({a.backbone.ptr().get(), a.pooling.ptr().get(), a.head.ptr().get()});
}

std::array<EmbeddingTable, 3> cross_validated_expert_logits(std::array<Stage1Artifacts, 3>& stage1,
                                                            const std::vector<const StudyRecord*>& records,
                                                            const TrainPlan& plan, const NoiseSchedule& sched,
                                                            int folds) {
  if (folds < 2) throw ConfigError("cross-validation needs at least two folds");
  std::vector<std::string> ids;
  for (const auto* r : records) ids.push_back(r->patient_id);
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(mix_seed(plan.seed, fnv1a("cv-folds")));
  std::shuffle(ids.begin(), ids.end(), rng);
  std::map<std::string, int> fold_of;
  for (std::size_t i = 0; i < ids.size(); ++i) fold_of[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));

  std::array<EmbeddingTable, 3> tables;
  for (std::size_t o = 0; o < 3; ++o) {
    auto& a = stage1[o];
    auto scans = collect_scans(records, a.orientation, plan.noise_seed);
    auto features = frozen_features(a.backbone, scans, a.tap, sched);
    auto logits = torch::zeros({features.size(0), scans.labels.size(1)});
    for (int f = 0; f < folds; ++f) {
      std::vector<std::int64_t> train_rows, held_rows;
      for (std::size_t i = 0; i < scans.patient_ids.size(); ++i) {
        (fold_of.at(scans.patient_ids[i]) == f ? held_rows : train_rows).push_back(static_cast<std::int64_t>(i));
      }
      if (held_rows.empty()) continue;
      if (train_rows.empty()) throw ValidationError("a cross-validation fold has no training scans");
      auto tr = torch::tensor(train_rows, torch::kInt64);
      auto ho = torch::tensor(held_rows, torch::kInt64);
      auto probe = fit_probe(features.index_select(0, tr), scans.labels.index_select(0, tr), plan,
                             mix_seed(plan.seed, static_cast<std::uint64_t>(f + 1)));
      torch::NoGradGuard no_grad;
      logits.index_copy_(0, ho, probe.head->forward(probe.pooling->forward(features.index_select(0, ho))));
    }
    {
      torch::NoGradGuard no_grad;
      tables[o].embeddings = a.pooling->forward(features);
    }
    tables[o].logits = logits;
    for (std::size_t i = 0; i < scans.scan_ids.size(); ++i) tables[o].row_of_scan[scans.scan_ids[i]] = static_cast<std::int64_t>(i);
  }
  return tables;
}

namespace {

torch::Tensor gather_rows(const torch::Tensor& table, const std::vector<std::int64_t>& rows, const torch::Tensor& idx) {
  return table.index_select(0, torch::tensor(rows, torch::kInt64).index_select(0, idx));
}

torch::Tensor stacked_expert_logits(const std::array<EmbeddingTable, 3>& tables, const TupleSet& ts,
                                    const torch::Tensor& idx) {
  return torch::stack({gather_rows(tables[0].logits, ts.scan_rows[0], idx),
                       gather_rows(tables[1].logits, ts.scan_rows[1], idx),
                       gather_rows(tables[2].logits, ts.scan_rows[2], idx)},
                      1);
}

torch::Tensor fused_logits(Stage2Artifacts& s2, const std::array<EmbeddingTable, 3>& tables, const TupleSet& ts,
                           const torch::Tensor& idx, torch::Tensor* alpha = nullptr) {
  if (s2.strategy == FusionStrategy::kMpae) {
    ExpertLogits z{stacked_expert_logits(tables, ts, idx), {}};
    auto g = mpae_gate(z, s2.gate);
    if (alpha != nullptr) *alpha = g.alpha;
    return mpae_fuse(z, g);
  }
  auto e0 = gather_rows(tables[0].embeddings, ts.scan_rows[0], idx);
  auto e1 = gather_rows(tables[1].embeddings, ts.scan_rows[1], idx);
  auto e2 = gather_rows(tables[2].embeddings, ts.scan_rows[2], idx);
  return s2.head->forward(s2.fusion->forward(e0, e1, e2));
}

}  // namespace

Stage2Artifacts train_stage2_fusion(const DatasetIndex& dataset, std::array<Stage1Artifacts, 3>& stage1,
                                    FusionStrategy strategy, const TrainPlan& plan, const NoiseSchedule& sched,
                                    const std::vector<std::string>* patient_subset) {
  plan.validate();
  for (std::size_t o = 0; o < 3; ++o) {
    if (stage1[o].orientation != kOrientations[o]) throw ValidationError("stage-1 artifacts must be in sag/cor/ax order");
  }
  auto records = filter_records(dataset.records_in(Split::kTrain), patient_subset);

  Stage2Artifacts s2;
  s2.strategy = strategy;
  for (std::size_t o = 0; o < 3; ++o) s2.stage1_checksums_before[o] = stage1_checksum(stage1[o]);

  std::array<EmbeddingTable, 3> tables;
  if (strategy == FusionStrategy::kMpae) {
    tables = cross_validated_expert_logits(stage1, records, plan, sched);
  } else {
    for (std::size_t o = 0; o < 3; ++o) tables[o] = embed_orientation(stage1[o], records, sched, plan.noise_seed);
  }
  auto ts = enumerate_tuples(records, tables);
  s2.excluded_patients = ts.excluded;
  const auto k = ts.labels.size(1);

  torch::manual_seed(plan.seed);
  std::vector<torch::Tensor> params;
  if (strategy == FusionStrategy::kMpae) {
    s2.gate = MpaeGate(k);
    params = s2.gate->parameters();
    s2.gate->train();
  } else {
    const auto c = tables[0].embeddings.size(1);
    s2.fusion = FusionModule(strategy, c, c);
    s2.head = torch::nn::Linear(s2.fusion->out_dim(), k);
    params = s2.fusion->parameters();
    for (auto& t : s2.head->parameters()) params.push_back(t);
  }
  Adam opt(params, AdamOptions(plan.lr).weight_decay(plan.weight_decay));

  // Minibatches are drawn over patients so each carries all of its tuples.
  std::vector<std::string> patients;
  std::map<std::string, std::vector<std::int64_t>> rows_of;
  for (std::size_t i = 0; i < ts.patient_ids.size(); ++i) {
    auto [it, fresh] = rows_of.try_emplace(ts.patient_ids[i]);
    if (fresh) patients.push_back(ts.patient_ids[i]);
    it->second.push_back(static_cast<std::int64_t>(i));
  }
  const auto n = static_cast<std::int64_t>(patients.size());
  StepLoop loop(n, plan.batch_size, plan.total_steps(n), mix_seed(plan.seed, 2));
  EpochMeter meter;
  torch::Tensor pidx;
  while (loop.next(pidx)) {
    loop.anneal(opt, {plan.lr});
    std::vector<std::int64_t> rows;
    std::vector<std::string> owner;
    auto pacc = pidx.accessor<std::int64_t, 1>();
    for (std::int64_t j = 0; j < pidx.size(0); ++j) {
      const auto& id = patients[static_cast<std::size_t>(pacc[j])];
      for (auto r : rows_of.at(id)) {
        rows.push_back(r);
        owner.push_back(id);
      }
    }
    auto idx = torch::tensor(rows, torch::kInt64);
    auto w = ts.weights.index_select(0, idx);
    auto logits = fused_logits(s2, tables, ts, idx);
    auto loss = weighted_bce(logits, ts.labels.index_select(0, idx), w, &owner) / static_cast<double>(pidx.size(0));
    opt.zero_grad();
    loss.backward();
    opt.step();
    meter.add(loss.item<double>());
    if (loop.epoch_done()) meter.close();
  }
  meter.close();
  s2.epoch_losses = meter.means;
  if (s2.gate) {
    s2.gate->eval();
    freeze(*s2.gate);
  } else {
    freeze(*s2.fusion);
    freeze(*s2.head);
  }
  for (std::size_t o = 0; o < 3; ++o) s2.stage1_checksums_after[o] = stage1_checksum(stage1[o]);
  return s2;
}

FusedPrediction predict_fused(std::array<Stage1Artifacts, 3>& stage1, Stage2Artifacts& stage2,
                              const std::vector<const StudyRecord*>& records, const NoiseSchedule& sched,
                              std::uint64_t noise_seed) {
  std::array<EmbeddingTable, 3> tables;
  for (std::size_t o = 0; o < 3; ++o) tables[o] = embed_orientation(stage1[o], records, sched, noise_seed);
  auto ts = enumerate_tuples(records, tables);
  torch::NoGradGuard no_grad;
  if (stage2.gate) stage2.gate->eval();
  auto all = torch::arange(static_cast<std::int64_t>(ts.patient_ids.size()), torch::kInt64);
  torch::Tensor alpha;
  auto logits = fused_logits(stage2, tables, ts, all, &alpha);

  FusedPrediction out;
  out.scores = patient_scores(ts.patient_ids, torch::sigmoid(logits), ts.weights, records);
  for (const auto* r : records) {
    if (std::find(ts.excluded.begin(), ts.excluded.end(), r->patient_id) == ts.excluded.end()) {
      out.patient_ids.push_back(r->patient_id);
    }
  }
  const auto p = static_cast<std::int64_t>(out.patient_ids.size());
  std::map<std::string, std::int64_t> slot;
  for (std::int64_t i = 0; i < p; ++i) slot[out.patient_ids[static_cast<std::size_t>(i)]] = i;
  auto owner = torch::empty({static_cast<std::int64_t>(ts.patient_ids.size())}, torch::kInt64);
  for (std::size_t i = 0; i < ts.patient_ids.size(); ++i) owner[static_cast<std::int64_t>(i)] = slot.at(ts.patient_ids[i]);
  auto w = ts.weights.unsqueeze(1);
  out.patient_logits = torch::zeros({p, logits.size(1)}).index_add_(0, owner, w * logits);
  if (alpha.defined()) {
    out.gate_alpha = torch::zeros({p, 3, logits.size(1)}).index_add_(0, owner, w.unsqueeze(2) * alpha);
  }
  return out;
}

// ---------------------------------------------------------------- EHR

namespace {

std::pair<torch::Tensor, torch::Tensor> ehr_inputs(const std::vector<const StudyRecord*>& records,
                                                   const EhrStats& stats) {
  auto dense = torch::zeros({static_cast<std::int64_t>(records.size()), 9});
  auto events = torch::zeros({static_cast<std::int64_t>(records.size())}, torch::kInt64);
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto f = encode_ehr_fixed(records[i]->ehr.value_or(EHRRecord{}), stats);
    for (std::size_t j = 0; j < 9; ++j) dense[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(j)] = f.dense[j];
    events[static_cast<std::int64_t>(i)] = f.event_index;
  }
  return {dense, events};
}

}  // namespace

EhrFusionArtifacts train_ehr_fusion(const std::vector<const StudyRecord*>& train_records,
                                    const torch::Tensor& train_mri_logits, const TrainPlan& plan) {
  plan.validate();
  if (train_mri_logits.dim() != 2 || train_mri_logits.size(0) != static_cast<std::int64_t>(train_records.size())) {
    throw ShapeError("one MRI logit row per training record expected");
  }
  std::vector<EHRRecord> ehr;
  for (const auto* r : train_records) ehr.push_back(r->ehr.value_or(EHRRecord{}));
  EhrFusionArtifacts a;
  a.stats = EhrStats::fit(ehr);
  torch::manual_seed(plan.seed);
  const auto k = train_mri_logits.size(1);
  a.model = EhrModel(k);
  a.late = LateFusion(k);
  auto [dense, events] = ehr_inputs(train_records, a.stats);
  auto labels = labels_of(train_records);
  auto z_mri = train_mri_logits.detach().to(torch::kFloat32);

  auto params = a.model->parameters();
  for (auto& t : a.late->parameters()) params.push_back(t);
  Adam opt(params, AdamOptions(plan.lr).weight_decay(plan.weight_decay));
  const auto n = dense.size(0);
  StepLoop loop(n, plan.batch_size, plan.total_steps(n), mix_seed(plan.seed, 3));
  a.model->train();
  torch::Tensor idx;
  while (loop.next(idx)) {
    loop.anneal(opt, {plan.lr});
    auto z_ehr = a.model->forward(dense.index_select(0, idx), events.index_select(0, idx));
    auto fused = a.late->forward(z_mri.index_select(0, idx), z_ehr);
    auto loss = torch::binary_cross_entropy_with_logits(fused, labels.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  a.model->eval();
  freeze(*a.model);
  freeze(*a.late);
  return a;
}

torch::Tensor predict_ehr_fusion(EhrFusionArtifacts& a, const std::vector<const StudyRecord*>& records,
                                 const torch::Tensor& mri_logits) {
  torch::NoGradGuard no_grad;
  a.model->eval();
  auto [dense, events] = ehr_inputs(records, a.stats);
  return a.late->forward(mri_logits.to(torch::kFloat32), a.model->forward(dense, events));
}

// ---------------------------------------------------------------- segmentation

SegHeadImpl::SegHeadImpl(std::int64_t in_channels, std::int64_t n_classes, Resolution output) : output_(output) {
  conv_ = register_module("conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_channels, in_channels, 3).padding(1)));
  classifier_ = register_module("classifier", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_channels, n_classes, 1)));
}

torch::Tensor SegHeadImpl::forward(const torch::Tensor& bottleneck) {
  auto h = torch::relu(conv_->forward(bottleneck));
  h = torch::nn::functional::interpolate(
      h, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<std::int64_t>{output_.depth, output_.height, output_.width})
             .mode(torch::kTrilinear)
             .align_corners(false));
  return classifier_->forward(h);
}

torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target_onehot) {
  if (probs.sizes() != target_onehot.sizes() || probs.dim() < 3) throw ShapeError("probabilities and targets differ");
  std::vector<std::int64_t> dims = {0};
  for (std::int64_t d = 2; d < probs.dim(); ++d) dims.push_back(d);
  auto fg_p = probs.narrow(1, 1, probs.size(1) - 1);
  auto fg_g = target_onehot.narrow(1, 1, probs.size(1) - 1);
  auto inter = (fg_p * fg_g).sum(dims);
  auto denom = fg_p.sum(dims) + fg_g.sum(dims);
  return 1.0 - ((2.0 * inter + 1.0) / (denom + 1.0)).mean();
}

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  const auto c = logits.size(1);
  auto onehot = torch::one_hot(target.to(torch::kInt64), c).permute({0, 4, 1, 2, 3}).to(logits.scalar_type());
  return torch::cross_entropy_loss(logits, target.to(torch::kInt64)) + soft_dice_loss(torch::softmax(logits, 1), onehot);
}

namespace {

struct MaskedScans {
  ScanBatch scans;
  torch::Tensor masks;  // (N, D, H, W) int64
  int n_structures = 0;
};

MaskedScans collect_masked(const std::vector<const StudyRecord*>& records, Orientation o, std::uint64_t noise_seed) {
  std::vector<const StudyRecord*> with_masks;
  for (const auto* r : records) {
    const auto& list = r->scans_in(o);
    if (!list.empty() && std::all_of(list.begin(), list.end(), [](const Scan& s) { return s.mask.has_value(); })) {
      with_masks.push_back(r);
    }
  }
  if (with_masks.empty()) throw ValidationError("no segmentation masks in orientation " + std::string(to_string(o)));
  MaskedScans m;
  m.scans = collect_scans(with_masks, o, noise_seed);
  std::vector<torch::Tensor> masks;
  for (const auto* r : with_masks) {
    for (const auto& s : r->scans_in(o)) {
      masks.push_back(s.mask->classes.to(torch::kInt64));
      m.n_structures = s.mask->num_structures;
    }
  }
  m.masks = torch::stack(masks);
  return m;
}

}  // namespace

SegArtifacts train_segmentation(const DatasetIndex& dataset, Orientation o, const TapPoint& tap, const TrainPlan& plan,
                                UNet3D& init_backbone, const NoiseSchedule& sched,
                                const std::vector<std::string>* patient_subset) {
  plan.validate();
  auto records = filter_records(dataset.records_in(Split::kTrain), patient_subset);
  auto data = collect_masked(records, o, plan.noise_seed);

  SegArtifacts a;
  a.orientation = o;
  a.tap = tap;
  a.backbone = clone_denoiser(init_backbone);
  torch::manual_seed(plan.seed);
  const auto& cfg = a.backbone->config();
  a.head = SegHead(cfg.bottleneck_channels(), data.n_structures + 1, cfg.input);

  std::vector<torch::Tensor> backbone_params;
  for (auto& p : a.backbone->named_parameters()) {
    const bool trainable = !UNet3DImpl::is_decoder_parameter(p.key());
    p.value().set_requires_grad(trainable);
    if (trainable) backbone_params.push_back(p.value());
  }
  std::vector<OptimizerParamGroup> groups;
  groups.emplace_back(a.head->parameters(),
                      std::make_unique<AdamOptions>(AdamOptions(plan.lr).weight_decay(plan.weight_decay)));
  groups.emplace_back(backbone_params,
                      std::make_unique<AdamOptions>(AdamOptions(plan.backbone_lr).weight_decay(plan.weight_decay)));
  Adam opt(std::move(groups), AdamOptions(plan.lr));

  const auto n = data.scans.volumes.size(0);
  StepLoop loop(n, plan.batch_size, plan.total_steps(n), mix_seed(plan.seed, 4));
  EpochMeter meter;
  torch::Tensor idx;
  while (loop.next(idx)) {
    loop.anneal(opt, {plan.lr, plan.backbone_lr});
    auto feats = tap_batch(a.backbone, data.scans.volumes.index_select(0, idx), data.scans.noise.index_select(0, idx),
                           tap, sched);
    auto loss = segmentation_loss(a.head->forward(feats), data.masks.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
    meter.add(loss.item<double>());
    if (loop.epoch_done()) meter.close();
  }
  meter.close();
  a.epoch_losses = meter.means;
  freeze(*a.backbone);
  freeze(*a.head);
  return a;
}

std::map<int, double> evaluate_segmentation(SegArtifacts& a, const std::vector<const StudyRecord*>& records,
                                            const NoiseSchedule& sched, std::uint64_t noise_seed) {
  auto data = collect_masked(records, a.orientation, noise_seed);
  torch::Tensor pred;
  {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    const auto n = data.scans.volumes.size(0);
    for (std::int64_t i = 0; i < n; i += 32) {
      const auto len = std::min<std::int64_t>(32, n - i);
      auto feats = tap_batch(a.backbone, data.scans.volumes.narrow(0, i, len), data.scans.noise.narrow(0, i, len), a.tap,
                             sched);
      parts.push_back(a.head->forward(feats).argmax(1));
    }
    pred = torch::cat(parts).to(torch::kUInt8).contiguous();
  }
  auto gt = data.masks.to(torch::kUInt8).contiguous();
  const auto n = pred.size(0);
  const auto voxels = static_cast<std::size_t>(pred[0].numel());
  std::map<int, double> out;
  for (int c = 1; c <= data.n_structures; ++c) {
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      std::span<const std::uint8_t> p(pred[i].data_ptr<std::uint8_t>(), voxels);
      std::span<const std::uint8_t> g(gt[i].data_ptr<std::uint8_t>(), voxels);
      sum += metrics::dice(p, g, static_cast<std::uint8_t>(c));
    }
    out[c] = sum / static_cast<double>(n);
  }
  return out;
}

// ---------------------------------------------------------------- selection

ConfigSelection select_config(const GridResults& grid, const CandidateEvaluator& evaluate, ProbeSetting setting,
                              std::size_t top_k) {
  if (top_k == 0) throw ValidationError("top_k must be positive");
  ConfigSelection sel;
  sel.setting = setting;
  for (auto o : kOrientations) {
    auto it = grid.find(o);
    if (it == grid.end() || it->second.size() < top_k) {
      throw ValidationError("grid needs at least " + std::to_string(top_k) + " taps for " + std::string(to_string(o)));
    }
    std::vector<std::pair<TapPoint, double>> ranked(it->second.begin(), it->second.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    for (std::size_t i = 0; i < top_k; ++i) sel.candidates[index_of(o)].push_back(ranked[i].first);
  }
  auto less = [](const std::array<TapPoint, 3>& a, const std::array<TapPoint, 3>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
  };
  bool have = false;
  for (const auto& s : sel.candidates[0]) {
    for (const auto& c : sel.candidates[1]) {
      for (const auto& x : sel.candidates[2]) {
        const std::array<TapPoint, 3> combo = {s, c, x};
        const double score = evaluate(combo);
        ++sel.evaluated_combinations;
        if (!have || score > sel.validation_score || (score == sel.validation_score && less(combo, sel.taps))) {
          sel.taps = combo;
          sel.validation_score = score;
          have = true;
        }
      }
    }
  }
  return sel;
}

// ---------------------------------------------------------------- label efficiency

std::vector<CurvePoint> label_efficiency_run(const DatasetIndex& dataset, const std::vector<double>& fractions,
                                             std::uint64_t subset_seed, const FractionTrainer& train_and_evaluate) {
  if (fractions.empty()) throw ValidationError("no label fractions given");
  const auto& train_ids = dataset.patient_ids(Split::kTrain);
  std::vector<CurvePoint> curve;
  for (double f : fractions) {
    auto subset = nested_subset(train_ids, f, subset_seed);
    auto point = train_and_evaluate(f, subset);
    point.fraction = f;
    curve.push_back(std::move(point));
  }
  return curve;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream out;
  out << "fraction,metric,value,arm\n" << std::setprecision(17);
  for (const auto& p : curve) out << p.fraction << ',' << p.metric << ',' << p.value << ',' << p.arm << '\n';
  return out.str();
}

}  // namespace orthodiff
