#pragma once

#include <array>
#include <filesystem>

#include "orthodiff/training.hpp"

namespace orthodiff::cli {

void save_stage1(Stage1Artifacts& a, const NoiseSchedule& sched, const std::filesystem::path& dir);
Stage1Artifacts load_stage1(const std::filesystem::path& dir);

void save_stage2(Stage2Artifacts& a, const std::filesystem::path& dir);
Stage2Artifacts load_stage2(const std::filesystem::path& dir);

void save_ehr(EhrFusionArtifacts& a, const std::filesystem::path& dir);
EhrFusionArtifacts load_ehr(const std::filesystem::path& dir);

void save_segmentation(SegArtifacts& a, const NoiseSchedule& sched, const std::filesystem::path& dir);
SegArtifacts load_segmentation(const std::filesystem::path& dir);

}  // namespace orthodiff::cli
