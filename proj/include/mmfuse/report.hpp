#pragma once

// Report serialization: report.json (metrics + echoed config, timing in
// its own non-compared field) and the CSV matrices/tables.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/distill.hpp"

namespace mmfuse::report {

nlohmann::json metrics_json(const distill::EvalMetrics& metrics);

nlohmann::json train_report_json(const std::string& command, const std::string& model_kind,
                                 const nlohmann::json& echoed_config, const distill::TrainReport& report);

void write_json(const std::filesystem::path& file, const nlohmann::json& j);

void write_confusion_csv(const std::filesystem::path& file,
                         const std::vector<std::vector<std::int64_t>>& confusion,
                         const std::vector<std::string>& classes);

// One row per entry: first column from `row_labels`, then the
// per-modality combined accuracies, then overall accuracy and macro F1.
void write_metrics_csv(const std::filesystem::path& file, const std::vector<std::string>& row_labels,
                       const std::vector<distill::EvalMetrics>& rows, const std::string& label_header);

}  // namespace mmfuse::report
