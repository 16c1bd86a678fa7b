#include "orthodiff/dataset_io.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "orthodiff/checkpoint.hpp"
#include "orthodiff/ehr.hpp"
#include "orthodiff/errors.hpp"
#include "orthodiff/hashing.hpp"

namespace orthodiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

ordered_json spec_json(const PhantomSpec& s) {
  return ordered_json{{"n_patients", s.n_patients},
                      {"resolution", {s.resolution.depth, s.resolution.height, s.resolution.width}},
                      {"n_labels", s.n_labels},
                      {"n_structures", s.n_structures},
                      {"label_effect_strength", s.label_effect_strength},
                      {"noise_floor", s.noise_floor},
                      {"multi_scan_fraction", s.multi_scan_fraction},
                      {"seed", s.seed},
                      {"label_prevalence", s.label_prevalence},
                      {"extra_raw_slices", s.extra_raw_slices}};
}

ordered_json index_document(const DatasetIndex& index, const PhantomSpec* spec) {
  ordered_json doc;
  doc["format"] = "orthodiff-dataset";
  doc["seed"] = index.seed();
  doc["n_labels"] = index.n_labels();
  if (spec != nullptr) doc["spec"] = spec_json(*spec);
  ordered_json splits = ordered_json::object();
  for (auto s : {Split::kTrain, Split::kVal, Split::kTest}) splits[std::string(to_string(s))] = index.patient_ids(s);
  doc["splits"] = splits;
  ordered_json records = ordered_json::object();
  for (const auto& [id, r] : index.all_records()) {
    ordered_json rec;
    std::vector<int> labels(r.labels.begin(), r.labels.end());
    rec["labels"] = labels;
    ordered_json scans = ordered_json::object();
    for (auto o : kOrientations) {
      ordered_json list = ordered_json::array();
      for (const auto& scan : r.scans_in(o)) {
        const auto& v = scan.volume.data;
        list.push_back({{"scan_id", scan.id()},
                        {"shape", {v.size(1), v.size(2), v.size(3)}},
                        {"mask", scan.mask ? scan.mask->num_structures : 0}});
      }
      scans[std::string(to_string(o))] = list;
    }
    rec["scans"] = scans;
    rec["has_ehr"] = r.ehr.has_value();
    records[id] = rec;
  }
  doc["records"] = records;
  return doc;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string index_json(const DatasetIndex& index, const PhantomSpec* spec) {
  return index_document(index, spec).dump(2) + "\n";
}

std::string dataset_hash(const DatasetIndex& index) {
  Fnv1a h;
  h.update(index_json(index));
  for (const auto& [id, r] : index.all_records()) {
    for (auto o : kOrientations) {
      for (const auto& scan : r.scans_in(o)) {
        auto v = scan.volume.data.contiguous();
        h.update(std::as_bytes(std::span<const char>(static_cast<const char*>(v.data_ptr()), v.nbytes())));
        if (scan.mask) {
          auto m = scan.mask->classes.contiguous();
          h.update(std::as_bytes(std::span<const char>(static_cast<const char*>(m.data_ptr()), m.nbytes())));
        }
      }
    }
  }
  return h.hex();
}

void write_dataset(const DatasetIndex& index, const fs::path& root, const PhantomSpec* spec) {
  fs::create_directories(root);
  std::map<std::string, EHRRecord> ehr;
  for (const auto& [id, r] : index.all_records()) {
    const auto dir = root / id;
    fs::create_directories(dir);
    for (auto o : kOrientations) {
      for (const auto& scan : r.scans_in(o)) {
        write_f32le(dir / (scan.id() + ".f32"), scan.volume.data);
        if (scan.mask) write_u8(dir / (scan.id() + ".mask.u8"), scan.mask->classes);
      }
    }
    if (r.ehr) ehr.emplace(id, *r.ehr);
  }
  {
    std::ofstream out(root / "ehr.csv", std::ios::trunc);
    out << write_ehr_csv(ehr);
  }
  std::ofstream out(root / "index.json", std::ios::trunc);
  out << index_json(index, spec);
  if (!out) throw Error("failed to write " + (root / "index.json").string());
}

DatasetIndex read_dataset(const fs::path& root) {
  if (!fs::exists(root / "index.json")) throw Error("no index.json under " + root.string());
  const auto doc = ordered_json::parse(read_text(root / "index.json"));
  if (doc.value("format", "") != "orthodiff-dataset") throw ValidationError("not an orthodiff dataset index");
  std::map<std::string, EHRRecord> ehr;
  if (fs::exists(root / "ehr.csv")) ehr = read_ehr_csv(read_text(root / "ehr.csv"));

  std::map<std::string, StudyRecord> records;
  for (const auto& [id, rec] : doc.at("records").items()) {
    StudyRecord r;
    r.patient_id = id;
    for (int l : rec.at("labels").get<std::vector<int>>()) r.labels.push_back(static_cast<std::uint8_t>(l));
    for (auto o : kOrientations) {
      for (const auto& s : rec.at("scans").at(std::string(to_string(o)))) {
        const auto scan_id = s.at("scan_id").get<std::string>();
        const auto shape = s.at("shape").get<std::vector<std::int64_t>>();
        Scan scan;
        scan.volume = VolumeTensor{read_f32le(root / id / (scan_id + ".f32"), {1, shape[0], shape[1], shape[2]}), o,
                                   id, scan_id};
        const int structures = s.at("mask").get<int>();
        if (structures > 0) {
          scan.mask = SegMask{read_u8(root / id / (scan_id + ".mask.u8"), {shape[0], shape[1], shape[2]}), structures};
        }
        r.scans[o].push_back(std::move(scan));
      }
    }
    if (rec.value("has_ehr", false)) {
      auto it = ehr.find(id);
      if (it == ehr.end()) throw ValidationError("ehr.csv lacks a row for " + id);
      r.ehr = it->second;
    }
    records.emplace(id, std::move(r));
  }
  std::map<Split, std::vector<std::string>> splits;
  for (const auto& [name, ids] : doc.at("splits").items()) {
    splits[split_from_string(name)] = ids.get<std::vector<std::string>>();
  }
  return DatasetIndex(std::move(splits), std::move(records), doc.at("seed").get<std::uint64_t>());
}

}  // namespace orthodiff
