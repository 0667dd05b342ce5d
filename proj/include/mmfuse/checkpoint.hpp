#pragma once

// Model persistence. A checkpoint is a directory holding manifest.json
// (model kind, full model configuration, an optional extra blob, and the
// slot table of name/shape/dtype/byte offset in sorted-name order) plus
// params.bin, the little-endian float32 slot payloads concatenated in
// table order. Save -> load -> forward is bit-exact.

#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "mmfuse/model.hpp"

namespace mmfuse::checkpoint {

nlohmann::json model_config_to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

void save_teacher(const std::filesystem::path& dir, model::TeacherModel& m,
                  const nlohmann::json& extra = nlohmann::json::object());
void save_student(const std::filesystem::path& dir, model::StudentModel& m,
                  const nlohmann::json& extra = nlohmann::json::object());

struct LoadedModel {
    std::string kind;  // "teacher" or "student"
    model::ModelConfig config;
    nlohmann::json extra;
    std::unique_ptr<model::TeacherModel> teacher;  // set when kind == "teacher"
    std::unique_ptr<model::StudentModel> student;  // set when kind == "student"

    std::size_t parameter_count() {
        return teacher ? teacher->parameter_count() : student->parameter_count();
    }
};

LoadedModel load(const std::filesystem::path& dir);

}  // namespace mmfuse::checkpoint
