#include "mmfuse/config.hpp"

#include <algorithm>
#include <fstream>

#include "mmfuse/errors.hpp"

namespace mmfuse::config {

using nlohmann::json;

namespace {

json read_json(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + file.string() + ": " + e.what());
    }
    return j;
}

void require_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
    }
}

// "window": 16 applies to every modality; "window": {"imu": 16} per modality.
std::map<std::string, std::size_t> size_map(const json& j, const std::string& where) {
    std::map<std::string, std::size_t> out;
    if (j.is_number_unsigned() || j.is_number_integer()) {
        out["*"] = j.get<std::size_t>();
    } else if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<std::size_t>();
    } else {
        throw ConfigError(where + ": expected an integer or an object of integers");
    }
    return out;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::filesystem::path& file) {
    json j = read_json(file);
    try {
        require_keys(j, {"dataset", "output_dir", "seed", "protocol", "encoding", "model", "train", "kd"},
                     file.string());
        ExperimentConfig cfg;
        if (!j.contains("dataset")) throw ConfigError(file.string() + ": missing \"dataset\"");
        cfg.dataset = j.at("dataset").get<std::string>();
        cfg.output_dir = j.value("output_dir", std::string("runs"));
        cfg.seed = j.value("seed", std::uint64_t(0));
        cfg.train.seed = cfg.seed;

        if (j.contains("protocol")) {
            const json& jp = j.at("protocol");
            require_keys(jp, {"name", "held_out_subject", "train_fraction"}, "protocol");
            cfg.protocol.kind = data::protocol_from_name(jp.at("name").get<std::string>());
            cfg.protocol.held_out_subject = jp.value("held_out_subject", 1);
            cfg.protocol.train_fraction = jp.value("train_fraction", 0.8);
        }
        if (j.contains("encoding")) {
            const json& je = j.at("encoding");
            require_keys(je, {"window", "target_patches"}, "encoding");
            if (je.contains("window")) cfg.window = size_map(je.at("window"), "encoding.window");
            if (je.contains("target_patches"))
                cfg.target_patches = size_map(je.at("target_patches"), "encoding.target_patches");
        }
        if (j.contains("model")) {
            const json& jm = j.at("model");
            require_keys(jm,
                         {"d_model", "heads", "teacher_mstt_layers", "student_mstt_layers", "tmt_layers",
                          "fusion_tokens"},
                         "model");
            cfg.model.d_model = jm.value("d_model", cfg.model.d_model);
            cfg.model.heads = jm.value("heads", cfg.model.heads);
            cfg.model.teacher_mstt_layers = jm.value("teacher_mstt_layers", cfg.model.teacher_mstt_layers);
            cfg.model.student_mstt_layers = jm.value("student_mstt_layers", cfg.model.student_mstt_layers);
            cfg.model.tmt_layers = jm.value("tmt_layers", cfg.model.tmt_layers);
            cfg.model.fusion_tokens = jm.value("fusion_tokens", cfg.model.fusion_tokens);
        }
        if (j.contains("train")) {
            const json& jt = j.at("train");
            require_keys(jt, {"epochs", "batch_size", "learning_rate"}, "train");
            cfg.train.epochs = jt.value("epochs", cfg.train.epochs);
            cfg.train.batch_size = jt.value("batch_size", cfg.train.batch_size);
            cfg.train.learning_rate = jt.value("learning_rate", cfg.train.learning_rate);
        }
        if (j.contains("kd")) {
            const json& jk = j.at("kd");
            require_keys(jk,
                         {"temperature", "w_cs", "w_spatial", "w_temporal", "temperature_squared",
                          "teacher_led_kl"},
                         "kd");
            cfg.kd.temperature = jk.value("temperature", cfg.kd.temperature);
            cfg.kd.w_cs = jk.value("w_cs", cfg.kd.w_cs);
            if (jk.contains("w_spatial")) cfg.kd.w_spatial = jk.at("w_spatial").get<std::vector<double>>();
            if (jk.contains("w_temporal")) cfg.kd.w_temporal = jk.at("w_temporal").get<std::vector<double>>();
            cfg.kd.temperature_squared = jk.value("temperature_squared", cfg.kd.temperature_squared);
            cfg.kd.teacher_led_kl = jk.value("teacher_led_kl", cfg.kd.teacher_led_kl);
        }
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError("invalid experiment config " + file.string() + ": " + e.what());
    }
}

data::EncodingSettings encoding_settings(const ExperimentConfig& cfg, const data::DatasetManifest& manifest) {
    auto resolve = [&](const std::map<std::string, std::size_t>& requested, const char* what) {
        std::map<std::string, std::size_t> out;
        for (const auto& [name, value] : requested) {
            if (name == "*") continue;
            bool known = false;
            for (const auto& m : manifest.modalities) known = known || m.name == name;
            if (!known)
                throw ConfigError(std::string(what) + ": modality \"" + name + "\" not in the dataset");
            out[name] = value;
        }
        auto star = requested.find("*");
        if (star != requested.end())
            for (const auto& m : manifest.modalities)
                if (!out.count(m.name)) out[m.name] = star->second;
        return out;
    };
    data::EncodingSettings settings;
    settings.window = resolve(cfg.window, "encoding.window");
    settings.target_patches = resolve(cfg.target_patches, "encoding.target_patches");
    return settings;
}

model::ModelConfig model_config(const ExperimentConfig& cfg, const data::EncodedDataset& dataset) {
    model::ModelConfig mc;
    for (std::size_t m = 0; m < dataset.modalities.size(); ++m)
        mc.modalities.push_back(
            {dataset.modalities[m].name, dataset.patch_counts[m], dataset.modalities[m].channels});
    mc.classes = dataset.classes.size();
    mc.d_model = cfg.model.d_model;
    mc.heads = cfg.model.heads;
    mc.teacher_mstt_layers = cfg.model.teacher_mstt_layers;
    mc.student_mstt_layers = cfg.model.student_mstt_layers;
    mc.tmt_layers = cfg.model.tmt_layers;
    mc.fusion_tokens = cfg.model.fusion_tokens;
    return mc;
}

distill::KDConfig kd_config(const ExperimentConfig& cfg, std::size_t modality_count) {
    distill::KDConfig kd = distill::KDConfig::balanced(modality_count, cfg.kd.temperature, cfg.kd.w_cs);
    if (cfg.kd.w_spatial) kd.w_spatial = *cfg.kd.w_spatial;
    if (cfg.kd.w_temporal) kd.w_temporal = *cfg.kd.w_temporal;
    kd.temperature_squared = cfg.kd.temperature_squared;
    kd.teacher_led_kl = cfg.kd.teacher_led_kl;
    kd.validate(modality_count);
    return kd;
}

json echo_config(const ExperimentConfig& cfg, const data::EncodedDataset& dataset) {
    json j;
    j["dataset"] = cfg.dataset.string();
    j["output_dir"] = cfg.output_dir.string();
    j["seed"] = cfg.seed;
    j["protocol"] = {{"name", data::protocol_name(cfg.protocol.kind)},
                     {"held_out_subject", cfg.protocol.held_out_subject},
                     {"train_fraction", cfg.protocol.train_fraction}};
    json window = json::object(), target = json::object();
    for (std::size_t m = 0; m < dataset.modalities.size(); ++m) {
        window[dataset.modalities[m].name] = dataset.windows[m];
        target[dataset.modalities[m].name] = dataset.patch_counts[m];
    }
    j["encoding"] = {{"window", window}, {"target_patches", target}};
    j["model"] = {{"d_model", cfg.model.d_model},
                  {"heads", cfg.model.heads},
                  {"teacher_mstt_layers", cfg.model.teacher_mstt_layers},
                  {"student_mstt_layers", cfg.model.student_mstt_layers},
                  {"tmt_layers", cfg.model.tmt_layers},
                  {"fusion_tokens", cfg.model.fusion_tokens}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"learning_rate", cfg.train.learning_rate}};
    auto kd = kd_config(cfg, dataset.modalities.size());
    j["kd"] = {{"temperature", kd.temperature},
               {"w_cs", kd.w_cs},
               {"w_spatial", kd.w_spatial},
               {"w_temporal", kd.w_temporal},
               {"temperature_squared", kd.temperature_squared},
               {"teacher_led_kl", kd.teacher_led_kl}};
    return j;
}

data::SyntheticSpec load_synthetic_spec(const std::filesystem::path& file) {
    json j = read_json(file);
    try {
        require_keys(j,
                     {"classes", "subjects", "sessions", "trials", "duration_seconds", "subject_bias",
                      "seed", "modalities"},
                     file.string());
        data::SyntheticSpec spec;
        spec.classes = j.value("classes", spec.classes);
        spec.subjects = j.value("subjects", spec.subjects);
        spec.sessions = j.value("sessions", spec.sessions);
        spec.trials = j.value("trials", spec.trials);
        spec.duration_seconds = j.value("duration_seconds", spec.duration_seconds);
        spec.subject_bias = j.value("subject_bias", spec.subject_bias);
        spec.seed = j.value("seed", spec.seed);
        if (j.contains("modalities")) {
            spec.modalities.clear();
            for (const auto& jm : j.at("modalities")) {
                require_keys(jm, {"name", "channels", "rate", "noise_sigma"}, "modality entry");
                data::SyntheticModality m;
                m.name = jm.at("name").get<std::string>();
                m.channels = jm.value("channels", m.channels);
                m.rate = jm.value("rate", m.rate);
                m.noise_sigma = jm.value("noise_sigma", m.noise_sigma);
                spec.modalities.push_back(m);
            }
        } else {
            spec.modalities = {{"inertial", 6, 32.0, 0.1}, {"skeleton", 4, 16.0, 0.1}, {"vision", 8, 16.0, 0.1}};
        }
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw ConfigError("invalid dataset spec " + file.string() + ": " + e.what());
    }
}

std::string hash_hex(const json& content) {
    const std::string text = content.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace mmfuse::config
