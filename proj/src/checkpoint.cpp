#include "mmfuse/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "mmfuse/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as little-endian float32");

namespace mmfuse::checkpoint {

using nlohmann::json;

json model_config_to_json(const model::ModelConfig& cfg) {
    json j;
    j["classes"] = cfg.classes;
    j["d_model"] = cfg.d_model;
    j["heads"] = cfg.heads;
    j["teacher_mstt_layers"] = cfg.teacher_mstt_layers;
    j["student_mstt_layers"] = cfg.student_mstt_layers;
    j["tmt_layers"] = cfg.tmt_layers;
    j["fusion_tokens"] = cfg.fusion_tokens;
    j["modalities"] = json::array();
    for (const auto& m : cfg.modalities)
        j["modalities"].push_back({{"name", m.name}, {"patches", m.patches}, {"dim", m.dim}});
    return j;
}

model::ModelConfig model_config_from_json(const json& j) {
    try {
        model::ModelConfig cfg;
        cfg.classes = j.at("classes").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.heads = j.at("heads").get<std::size_t>();
        cfg.teacher_mstt_layers = j.at("teacher_mstt_layers").get<std::size_t>();
        cfg.student_mstt_layers = j.at("student_mstt_layers").get<std::size_t>();
        cfg.tmt_layers = j.at("tmt_layers").get<std::size_t>();
        cfg.fusion_tokens = j.at("fusion_tokens").get<std::size_t>();
        for (const auto& jm : j.at("modalities"))
            cfg.modalities.push_back({jm.at("name").get<std::string>(), jm.at("patches").get<std::size_t>(),
                                      jm.at("dim").get<std::size_t>()});
        return cfg;
    } catch (const json::exception& e) {
        throw IoError(std::string("invalid model configuration in checkpoint: ") + e.what());
    }
}

namespace {

struct Slot {
    std::string name;
    Tensor* tensor;
};

void save_impl(const std::filesystem::path& dir, const std::string& kind, const model::ModelConfig& cfg,
               std::vector<Slot> slots, const json& extra) {
    std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.name < b.name; });

    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    json manifest;
    manifest["format"] = "mmfuse-checkpoint";
    manifest["version"] = 1;
    manifest["kind"] = kind;
    manifest["model"] = model_config_to_json(cfg);
    manifest["extra"] = extra;
    manifest["slots"] = json::array();

    std::ofstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write " + (dir / "params.bin").string());
    std::size_t offset = 0;
    for (const Slot& slot : slots) {
        json js;
        js["name"] = slot.name;
        js["shape"] = slot.tensor->shape();
        js["dtype"] = "float32";
        js["offset"] = offset;
        manifest["slots"].push_back(js);
        const auto& values = slot.tensor->values();
        bin.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(float)));
        offset += values.size() * sizeof(float);
    }
    if (!bin) throw IoError("short write to " + (dir / "params.bin").string());
    bin.close();

    std::ofstream meta(dir / "manifest.json", std::ios::binary);
    if (!meta) throw IoError("cannot write " + (dir / "manifest.json").string());
    meta << manifest.dump(2) << "\n";
}

}  // namespace

void save_teacher(const std::filesystem::path& dir, model::TeacherModel& m, const json& extra) {
    std::vector<Slot> slots;
    for (auto& [name, t] : m.named_parameters()) slots.push_back({name, t});
    save_impl(dir, "teacher", m.config(), std::move(slots), extra);
}

void save_student(const std::filesystem::path& dir, model::StudentModel& m, const json& extra) {
    std::vector<Slot> slots;
    for (auto& [name, t] : m.named_parameters()) slots.push_back({name, t});
    save_impl(dir, "student", m.config(), std::move(slots), extra);
}

LoadedModel load(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "manifest.json");
    if (!meta) throw IoError("cannot open checkpoint manifest " + (dir / "manifest.json").string());
    json manifest;
    try {
        meta >> manifest;
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "mmfuse-checkpoint")
        throw IoError(dir.string() + " is not a model checkpoint");

    LoadedModel out;
    out.kind = manifest.value("kind", "");
    out.config = model_config_from_json(manifest.at("model"));
    out.extra = manifest.value("extra", json::object());

    std::vector<std::pair<std::string, Tensor*>> params;
    if (out.kind == "teacher") {
        out.teacher = std::make_unique<model::TeacherModel>(out.config, 0);
        params = out.teacher->named_parameters();
    } else if (out.kind == "student") {
        out.student = std::make_unique<model::StudentModel>(out.config, 0);
        params = out.student->named_parameters();
    } else {
        throw IoError("checkpoint kind \"" + out.kind + "\" is neither teacher nor student");
    }

    std::ifstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot open " + (dir / "params.bin").string());

    std::size_t filled = 0;
    for (const auto& js : manifest.at("slots")) {
        const std::string name = js.at("name").get<std::string>();
        const Shape shape = js.at("shape").get<Shape>();
        const std::size_t offset = js.at("offset").get<std::size_t>();
        if (js.at("dtype").get<std::string>() != "float32")
            throw IoError("checkpoint slot " + name + " has unsupported dtype");

        Tensor* target = nullptr;
        for (auto& [pname, t] : params)
            if (pname == name) target = t;
        if (!target) throw ConfigError("checkpoint slot \"" + name + "\" does not exist in this model");
        if (target->shape() != shape)
            throw ConfigError("checkpoint slot \"" + name + "\" has shape " + shape_str(shape) +
                              ", model expects " + shape_str(target->shape()));

        bin.seekg(static_cast<std::streamoff>(offset));
        bin.read(reinterpret_cast<char*>(target->values().data()),
                 static_cast<std::streamsize>(target->size() * sizeof(float)));
        if (!bin) throw IoError("checkpoint payload truncated at slot " + name);
        ++filled;
    }
    if (filled != params.size())
        throw ConfigError("checkpoint fills " + std::to_string(filled) + " of " +
                          std::to_string(params.size()) + " model slots");
    return out;
}

}  // namespace mmfuse::checkpoint
