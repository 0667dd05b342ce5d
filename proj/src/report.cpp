#include "mmfuse/report.hpp"

#include <fstream>

#include "mmfuse/errors.hpp"

namespace mmfuse::report {

using nlohmann::json;

json metrics_json(const distill::EvalMetrics& metrics) {
    json j;
    j["accuracy"] = metrics.accuracy;
    j["macro_f1"] = metrics.macro_f1;
    j["test_samples"] = metrics.sample_count;
    json per_modality = json::object();
    for (const auto& m : metrics.per_modality)
        per_modality[m.name] = {{"spatial", m.spatial_accuracy},
                                {"temporal", m.temporal_accuracy},
                                {"combined", m.combined_accuracy}};
    j["per_modality"] = per_modality;
    return j;
}

json train_report_json(const std::string& command, const std::string& model_kind,
                       const json& echoed_config, const distill::TrainReport& report) {
    json j;
    j["command"] = command;
    j["model_kind"] = model_kind;
    j["config"] = echoed_config;
    j["parameter_count"] = report.parameter_count;
    j["epochs"] = json::array();
    json epoch_seconds = json::array();
    for (std::size_t e = 0; e < report.epochs.size(); ++e) {
        const auto& stats = report.epochs[e];
        j["epochs"].push_back({{"epoch", e + 1},
                               {"train_loss", stats.train_loss},
                               {"test_accuracy", stats.test_accuracy},
                               {"test_macro_f1", stats.test_macro_f1}});
        epoch_seconds.push_back(stats.seconds);
    }
    j["final"] = metrics_json(report.final_metrics);
    j["timing"] = {{"epoch_seconds", epoch_seconds}, {"total_seconds", report.total_seconds}};
    return j;
}

void write_json(const std::filesystem::path& file, const json& j) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out << j.dump(2) << "\n";
}

void write_confusion_csv(const std::filesystem::path& file,
                         const std::vector<std::vector<std::int64_t>>& confusion,
                         const std::vector<std::string>& classes) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out << "label";
    for (const auto& c : classes) out << ',' << c;
    out << '\n';
    for (std::size_t i = 0; i < confusion.size(); ++i) {
        out << classes[i];
        for (std::size_t jx = 0; jx < confusion[i].size(); ++jx) out << ',' << confusion[i][jx];
        out << '\n';
    }
}

void write_metrics_csv(const std::filesystem::path& file, const std::vector<std::string>& row_labels,
                       const std::vector<distill::EvalMetrics>& rows, const std::string& label_header) {
    if (row_labels.size() != rows.size()) throw ContractError("write_metrics_csv: row count mismatch");
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out << label_header;
    if (!rows.empty())
        for (const auto& m : rows[0].per_modality) out << ',' << m.name;
    out << ",overall_accuracy,macro_f1\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out << row_labels[r];
        for (const auto& m : rows[r].per_modality) out << ',' << m.combined_accuracy;
        out << ',' << rows[r].accuracy << ',' << rows[r].macro_f1 << '\n';
    }
}

}  // namespace mmfuse::report
