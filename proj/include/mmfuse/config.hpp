#pragma once

// Experiment configuration: one strict JSON file drives every command.
// Unknown keys are rejected and the echoed form materializes every
// resolved default, so a run can be reproduced from its own report.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/data.hpp"
#include "mmfuse/distill.hpp"
#include "mmfuse/model.hpp"

namespace mmfuse::config {

struct ModelHyper {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t teacher_mstt_layers = 4;
    std::size_t student_mstt_layers = 1;
    std::size_t tmt_layers = 2;
    std::size_t fusion_tokens = 4;
};

struct KdSection {
    double temperature = 4.0;
    double w_cs = 0.5;
    std::optional<std::vector<double>> w_spatial;   // absent: split evenly
    std::optional<std::vector<double>> w_temporal;  // absent: split evenly
    bool temperature_squared = true;
    bool teacher_led_kl = false;
};

struct ExperimentConfig {
    std::filesystem::path dataset;
    std::filesystem::path output_dir = "runs";
    std::uint64_t seed = 0;
    data::ProtocolSpec protocol;
    std::map<std::string, std::size_t> window;          // empty/missing entries: ~0.5 s default
    std::map<std::string, std::size_t> target_patches;  // empty/missing entries: median patch count
    ModelHyper model;
    distill::TrainOptions train;  // seed mirrors the top-level seed
    KdSection kd;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& file);

// Per-modality window/target maps validated against the manifest.
data::EncodingSettings encoding_settings(const ExperimentConfig& cfg, const data::DatasetManifest& manifest);

model::ModelConfig model_config(const ExperimentConfig& cfg, const data::EncodedDataset& dataset);

distill::KDConfig kd_config(const ExperimentConfig& cfg, std::size_t modality_count);

// The fully resolved configuration echo.
nlohmann::json echo_config(const ExperimentConfig& cfg, const data::EncodedDataset& dataset);

// Synthetic dataset spec file for gen-data.
data::SyntheticSpec load_synthetic_spec(const std::filesystem::path& file);

std::string hash_hex(const nlohmann::json& content);

}  // namespace mmfuse::config
