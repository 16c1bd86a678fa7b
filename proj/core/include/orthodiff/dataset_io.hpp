#pragma once

#include <filesystem>

#include "orthodiff/synth.hpp"

namespace orthodiff {

// One directory per patient holding `<scan_id>.f32` volumes and `<scan_id>.mask.u8`
// masks, each with a `.json` sidecar, plus `ehr.csv` and a top-level `index.json`.
void write_dataset(const DatasetIndex& index, const std::filesystem::path& root,
                   const PhantomSpec* spec = nullptr);
DatasetIndex read_dataset(const std::filesystem::path& root);

// Canonical JSON of the index (splits, labels, scan ids); stable across runs.
std::string index_json(const DatasetIndex& index, const PhantomSpec* spec = nullptr);
std::string dataset_hash(const DatasetIndex& index);

}  // namespace orthodiff
