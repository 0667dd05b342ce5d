// mmfuse command line: synthetic data generation, teacher/student
// training, distillation, evaluation and the fusion-token ablation.
// Exit codes: 0 success, 2 configuration/validation, 3 I/O, 4 numeric.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmfuse/checkpoint.hpp"
#include "mmfuse/config.hpp"
#include "mmfuse/data.hpp"
#include "mmfuse/distill.hpp"
#include "mmfuse/errors.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmfuse;

namespace {

std::size_t thread_cap() {
    const char* env = std::getenv("MMFUSE_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    return v < 1 ? 1 : static_cast<std::size_t>(v);
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min(thread_cap(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// Content-addressed run directory; refuses to reuse one unless --force.
fs::path prepare_out_dir(const fs::path& base, const std::string& command, const json& identity,
                         bool force) {
    const fs::path dir = base / (command + "-" + config::hash_hex(identity));
    if (fs::exists(dir)) {
        if (!force)
            throw ConfigError("output directory " + dir.string() +
                              " already exists for this configuration; pass --force to replace it");
        fs::remove_all(dir);
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

struct LoadedExperiment {
    config::ExperimentConfig cfg;
    data::DatasetManifest manifest;
    data::EncodedDataset dataset;
    data::SplitSpec split;
    json echoed;
};

LoadedExperiment load_experiment(const fs::path& config_path) {
    LoadedExperiment ex;
    ex.cfg = config::load_experiment_config(config_path);
    ex.manifest = data::load_manifest(ex.cfg.dataset);
    ex.dataset = data::load_encoded(ex.cfg.dataset, ex.manifest, config::encoding_settings(ex.cfg, ex.manifest));
    ex.split = data::make_split(ex.manifest, ex.cfg.protocol);
    ex.echoed = config::echo_config(ex.cfg, ex.dataset);
    return ex;
}

json encoding_extra(const data::EncodedDataset& dataset) {
    json window = json::object(), target = json::object();
    for (std::size_t m = 0; m < dataset.modalities.size(); ++m) {
        window[dataset.modalities[m].name] = dataset.windows[m];
        target[dataset.modalities[m].name] = dataset.patch_counts[m];
    }
    return {{"encoding", {{"window", window}, {"target_patches", target}}}};
}

data::EncodingSettings settings_from_checkpoint(const json& extra) {
    data::EncodingSettings settings;
    if (!extra.contains("encoding")) return settings;
    const json& je = extra.at("encoding");
    for (auto it = je.at("window").begin(); it != je.at("window").end(); ++it)
        settings.window[it.key()] = it.value().get<std::size_t>();
    for (auto it = je.at("target_patches").begin(); it != je.at("target_patches").end(); ++it)
        settings.target_patches[it.key()] = it.value().get<std::size_t>();
    return settings;
}

void check_model_matches_dataset(const model::ModelConfig& mc, const data::EncodedDataset& dataset) {
    if (mc.classes != dataset.classes.size())
        throw ConfigError("checkpoint expects " + std::to_string(mc.classes) + " classes, dataset has " +
                          std::to_string(dataset.classes.size()));
    if (mc.modalities.size() != dataset.modalities.size())
        throw ConfigError("checkpoint expects " + std::to_string(mc.modalities.size()) +
                          " modalities, dataset has " + std::to_string(dataset.modalities.size()));
    for (std::size_t m = 0; m < mc.modalities.size(); ++m) {
        const auto& want = mc.modalities[m];
        if (want.name != dataset.modalities[m].name)
            throw ConfigError("checkpoint modality \"" + want.name + "\" does not match dataset modality \"" +
                              dataset.modalities[m].name + "\"");
        if (want.patches != dataset.patch_counts[m] || want.dim != dataset.modalities[m].channels)
            throw ConfigError("modality \"" + want.name + "\": checkpoint expects " +
                              std::to_string(want.patches) + "x" + std::to_string(want.dim) +
                              " features, dataset encodes " + std::to_string(dataset.patch_counts[m]) + "x" +
                              std::to_string(dataset.modalities[m].channels));
    }
}

void print_metrics(const std::string& tag, const distill::EvalMetrics& m) {
    std::cout << tag << ": accuracy " << m.accuracy << ", macro-F1 " << m.macro_f1 << " on "
              << m.sample_count << " samples\n";
}

// ==================== commands ====================

int cmd_gen_data(const fs::path& spec_path, const fs::path& out_dir, bool force) {
    auto spec = config::load_synthetic_spec(spec_path);
    if (fs::exists(out_dir / "meta.json") && !force)
        throw ConfigError("dataset already exists at " + out_dir.string() + "; pass --force to replace it");
    auto manifest = data::generate_synthetic(spec, out_dir);
    std::cout << "wrote " << manifest.samples.size() << " samples, " << manifest.modalities.size()
              << " modalities, " << manifest.classes.size() << " classes to " << out_dir.string() << "\n";
    return 0;
}

int cmd_train(const fs::path& config_path, const std::string& kind, bool force) {
    auto ex = load_experiment(config_path);
    auto mc = config::model_config(ex.cfg, ex.dataset);

    const json identity = {{"command", "train"}, {"model", kind}, {"config", ex.echoed}};
    const fs::path out = prepare_out_dir(ex.cfg.output_dir, "train-" + kind, identity, force);

    distill::TrainReport rep;
    if (kind == "teacher") {
        if (mc.modalities.size() < 2)
            throw ConfigError("the teacher's temporal mid-fusion needs at least 2 modalities; this dataset has " +
                              std::to_string(mc.modalities.size()));
        model::TeacherModel m(mc, ex.cfg.seed);
        rep = distill::train_teacher(m, ex.dataset, ex.split, ex.cfg.train);
        checkpoint::save_teacher(out / "checkpoint", m, encoding_extra(ex.dataset));
    } else {
        model::StudentModel m(mc, ex.cfg.seed);
        rep = distill::train_student(m, ex.dataset, ex.split, ex.cfg.train);
        checkpoint::save_student(out / "checkpoint", m, encoding_extra(ex.dataset));
    }
    report::write_json(out / "report.json", report::train_report_json("train", kind, ex.echoed, rep));
    report::write_confusion_csv(out / "confusion_matrix.csv", rep.final_metrics.confusion,
                                ex.dataset.classes);
    print_metrics(kind, rep.final_metrics);
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_distill(const fs::path& config_path, const fs::path& teacher_ckpt, bool compare_raw, bool force) {
    auto cfg = config::load_experiment_config(config_path);
    auto loaded = checkpoint::load(teacher_ckpt);
    if (loaded.kind != "teacher")
        throw ConfigError("distillation needs a teacher checkpoint, got \"" + loaded.kind + "\"");

    auto manifest = data::load_manifest(cfg.dataset);
    auto dataset = data::load_encoded(cfg.dataset, manifest, settings_from_checkpoint(loaded.extra));
    check_model_matches_dataset(loaded.config, dataset);
    auto split = data::make_split(manifest, cfg.protocol);
    const json echoed = config::echo_config(cfg, dataset);

    auto mc = config::model_config(cfg, dataset);
    auto kd = config::kd_config(cfg, mc.modalities.size());

    const json identity = {{"command", "distill"},
                           {"teacher", teacher_ckpt.string()},
                           {"compare_raw", compare_raw},
                           {"config", echoed}};
    const fs::path out = prepare_out_dir(cfg.output_dir, "distill", identity, force);

    model::StudentModel student(mc, cfg.seed);
    auto rep = distill::train_distilled(student, *loaded.teacher, dataset, split, cfg.train, kd);
    checkpoint::save_student(out / "checkpoint", student, encoding_extra(dataset));

    json report_json = report::train_report_json("distill", "student_kd", echoed, rep);
    report_json["teacher_checkpoint"] = teacher_ckpt.string();
    report_json["teacher_parameter_count"] = loaded.teacher->parameter_count();

    if (compare_raw) {
        model::StudentModel raw(mc, cfg.seed);
        auto raw_rep = distill::train_student(raw, dataset, split, cfg.train);
        auto teacher_metrics =
            distill::evaluate(*loaded.teacher, dataset, split.test_ids, cfg.train.batch_size);
        report_json["comparison"] = {{"teacher", report::metrics_json(teacher_metrics)},
                                     {"student", report::metrics_json(raw_rep.final_metrics)},
                                     {"student_kd", report::metrics_json(rep.final_metrics)}};
        report::write_metrics_csv(out / "comparison.csv", {"teacher", "student", "student_kd"},
                                  {teacher_metrics, raw_rep.final_metrics, rep.final_metrics}, "model");
        print_metrics("teacher", teacher_metrics);
        print_metrics("student", raw_rep.final_metrics);
    }

    report::write_json(out / "report.json", report_json);
    report::write_confusion_csv(out / "confusion_matrix.csv", rep.final_metrics.confusion, dataset.classes);
    print_metrics("student_kd", rep.final_metrics);
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& dataset_path, const std::string& protocol_name,
             int held_out_subject, double train_fraction, std::size_t batch_size, const fs::path& out_base,
             bool force) {
    auto loaded = checkpoint::load(ckpt_path);
    auto manifest = data::load_manifest(dataset_path);
    auto dataset = data::load_encoded(dataset_path, manifest, settings_from_checkpoint(loaded.extra));
    check_model_matches_dataset(loaded.config, dataset);

    data::ProtocolSpec protocol;
    protocol.kind = data::protocol_from_name(protocol_name);
    protocol.held_out_subject = held_out_subject;
    protocol.train_fraction = train_fraction;

    auto eval_split = [&](const data::SplitSpec& split) {
        return loaded.teacher
                   ? distill::evaluate(*loaded.teacher, dataset, split.test_ids, batch_size)
                   : distill::evaluate(*loaded.student, dataset, split.test_ids, batch_size);
    };

    std::vector<std::string> row_labels;
    std::vector<distill::EvalMetrics> rows;
    if (protocol.kind == data::Protocol::Loso) {
        const auto subjects = manifest.subject_ids();
        rows.resize(subjects.size());
        parallel_for(subjects.size(), [&](std::size_t i) {
            data::ProtocolSpec fold = protocol;
            fold.held_out_subject = subjects[i];
            rows[i] = eval_split(data::make_split(manifest, fold));
        });
        for (int s : subjects) row_labels.push_back("subject_" + std::to_string(s));

        distill::EvalMetrics mean;
        mean.per_modality = rows[0].per_modality;
        for (auto& m : mean.per_modality) m.spatial_accuracy = m.temporal_accuracy = m.combined_accuracy = 0;
        for (const auto& r : rows) {
            mean.accuracy += r.accuracy;
            mean.macro_f1 += r.macro_f1;
            mean.sample_count += r.sample_count;
            for (std::size_t m = 0; m < mean.per_modality.size(); ++m) {
                mean.per_modality[m].spatial_accuracy += r.per_modality[m].spatial_accuracy;
                mean.per_modality[m].temporal_accuracy += r.per_modality[m].temporal_accuracy;
                mean.per_modality[m].combined_accuracy += r.per_modality[m].combined_accuracy;
            }
        }
        const double n = static_cast<double>(rows.size());
        mean.accuracy /= n;
        mean.macro_f1 /= n;
        for (auto& m : mean.per_modality) {
            m.spatial_accuracy /= n;
            m.temporal_accuracy /= n;
            m.combined_accuracy /= n;
        }
        rows.push_back(mean);
        row_labels.push_back("mean");
    } else {
        rows.push_back(eval_split(data::make_split(manifest, protocol)));
        row_labels.push_back(data::protocol_name(protocol.kind));
    }

    const json identity = {{"command", "eval"},
                           {"checkpoint", ckpt_path.string()},
                           {"dataset", dataset_path.string()},
                           {"protocol",
                            {{"name", protocol_name},
                             {"held_out_subject", held_out_subject},
                             {"train_fraction", train_fraction}}},
                           {"batch_size", batch_size}};
    const fs::path out = prepare_out_dir(out_base, "eval", identity, force);

    json rows_json = json::array();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        json jr = report::metrics_json(rows[r]);
        jr["split"] = row_labels[r];
        rows_json.push_back(jr);
    }
    report::write_json(out / "eval.json", json{{"command", "eval"},
                                               {"checkpoint", ckpt_path.string()},
                                               {"dataset", dataset_path.string()},
                                               {"model_kind", loaded.kind},
                                               {"protocol", identity.at("protocol")},
                                               {"rows", rows_json}});
    report::write_metrics_csv(out / "eval.csv", row_labels, rows, "split");
    for (std::size_t r = 0; r < rows.size(); ++r) print_metrics(row_labels[r], rows[r]);
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_ablate_tokens(const fs::path& config_path, std::vector<std::size_t> tokens, bool force) {
    if (tokens.empty()) throw ConfigError("ablate-tokens: empty token list");
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    for (std::size_t f : tokens)
        if (f < 1) throw ConfigError("ablate-tokens: token counts must be >= 1");

    auto ex = load_experiment(config_path);
    auto base_mc = config::model_config(ex.cfg, ex.dataset);
    if (base_mc.modalities.size() < 2)
        throw ConfigError("the teacher's temporal mid-fusion needs at least 2 modalities");

    const json identity = {{"command", "ablate-tokens"}, {"tokens", tokens}, {"config", ex.echoed}};
    const fs::path out = prepare_out_dir(ex.cfg.output_dir, "ablate-tokens", identity, force);

    std::vector<distill::EvalMetrics> rows(tokens.size());
    std::vector<json> row_configs(tokens.size());
    parallel_for(tokens.size(), [&](std::size_t i) {
        model::ModelConfig mc = base_mc;
        mc.fusion_tokens = tokens[i];
        model::TeacherModel m(mc, ex.cfg.seed);
        auto rep = distill::train_teacher(m, ex.dataset, ex.split, ex.cfg.train);
        rows[i] = rep.final_metrics;
        json echoed = ex.echoed;
        echoed["model"]["fusion_tokens"] = tokens[i];
        row_configs[i] = std::move(echoed);
    });

    std::vector<std::string> labels;
    json rows_json = json::array();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        labels.push_back(std::to_string(tokens[i]));
        json jr = report::metrics_json(rows[i]);
        jr["fusion_tokens"] = tokens[i];
        jr["config"] = row_configs[i];
        rows_json.push_back(jr);
        std::cout << "fusion_tokens=" << tokens[i] << " accuracy " << rows[i].accuracy << "\n";
    }
    report::write_json(out / "ablation.json",
                       json{{"command", "ablate-tokens"}, {"config", ex.echoed}, {"rows", rows_json}});
    report::write_metrics_csv(out / "ablation.csv", labels, rows, "fusion_tokens");
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-modal activity recognition: mid-fusion transformer training and distillation"};
    app.require_subcommand(1);

    std::string spec_path, config_path, model_kind = "teacher", ckpt_path, dataset_path;
    std::string protocol_name = "loso", out_base = "runs", tokens_csv = "2,4,8,16";
    int held_out_subject = 1;
    double train_fraction = 0.8;
    std::size_t batch_size = 32;
    bool force = false, compare_raw = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-modal dataset");
    gen->add_option("--spec", spec_path, "dataset spec JSON")->required();
    gen->add_option("--out", dataset_path, "output dataset directory")->required();
    gen->add_flag("--force", force, "replace an existing dataset");

    auto* train = app.add_subcommand("train", "train a teacher or raw student");
    train->add_option("--config", config_path, "experiment config JSON")->required();
    train->add_option("--model", model_kind, "teacher or student")
        ->check(CLI::IsMember({"teacher", "student"}));
    train->add_flag("--force", force, "replace an existing run directory");

    auto* dist = app.add_subcommand("distill", "train a student against a frozen teacher");
    dist->add_option("--config", config_path, "experiment config JSON")->required();
    dist->add_option("--teacher-ckpt", ckpt_path, "teacher checkpoint directory")->required();
    dist->add_flag("--compare-raw", compare_raw, "also train a raw student and report all three");
    dist->add_flag("--force", force, "replace an existing run directory");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint under a protocol");
    ev->add_option("--ckpt", ckpt_path, "checkpoint directory")->required();
    ev->add_option("--dataset", dataset_path, "dataset directory")->required();
    ev->add_option("--protocol", protocol_name, "fifty_fifty, loso, cross_subject or cross_session");
    ev->add_option("--held-out-subject", held_out_subject, "loso: subject to hold out");
    ev->add_option("--train-fraction", train_fraction, "cross_subject/cross_session fraction");
    ev->add_option("--batch-size", batch_size, "evaluation batch size");
    ev->add_option("--out", out_base, "output base directory");
    ev->add_flag("--force", force, "replace an existing run directory");

    auto* ab = app.add_subcommand("ablate-tokens", "train one teacher per fusion-token count");
    ab->add_option("--config", config_path, "experiment config JSON")->required();
    ab->add_option("--tokens", tokens_csv, "comma-separated token counts");
    ab->add_flag("--force", force, "replace an existing run directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(spec_path, dataset_path, force);
        if (train->parsed()) return cmd_train(config_path, model_kind, force);
        if (dist->parsed()) return cmd_distill(config_path, ckpt_path, compare_raw, force);
        if (ev->parsed())
            return cmd_eval(ckpt_path, dataset_path, protocol_name, held_out_subject, train_fraction,
                            batch_size, out_base, force);
        if (ab->parsed()) {
            std::vector<std::size_t> tokens;
            std::stringstream ss(tokens_csv);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) tokens.push_back(static_cast<std::size_t>(std::stoul(item)));
            return cmd_ablate_tokens(config_path, tokens, force);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const BoundsError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
