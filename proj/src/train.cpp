#include <chrono>
#include <cmath>

#include "mmfuse/distill.hpp"

namespace mmfuse::distill {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename Forward>
EvalMetrics evaluate_impl(const data::EncodedDataset& dataset, const std::vector<std::size_t>& ids,
                          std::size_t batch_size, std::size_t modality_count, Forward forward) {
    NoGradGuard no_grad;
    const std::size_t classes = dataset.classes.size();

    std::vector<int> labels;
    std::vector<int> ensemble_pred;
    std::vector<std::vector<int>> spatial_pred(modality_count), temporal_pred(modality_count),
        combined_pred(modality_count);

    data::BatchStream stream(dataset, ids, batch_size, 0, false);
    stream.start_epoch();
    data::EncodedBatch batch;
    while (stream.next(batch)) {
        auto result = forward(batch.features);
        labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
        ensemble_pred.insert(ensemble_pred.end(), result.predicted_labels.begin(),
                             result.predicted_labels.end());
        for (std::size_t m = 0; m < modality_count; ++m) {
            auto sp = model::argmax_rows(result.per_modality[m].spatial_probs);
            auto tp = model::argmax_rows(result.per_modality[m].temporal_probs);
            auto cp = model::argmax_rows(result.per_modality[m].combined);
            spatial_pred[m].insert(spatial_pred[m].end(), sp.begin(), sp.end());
            temporal_pred[m].insert(temporal_pred[m].end(), tp.begin(), tp.end());
            combined_pred[m].insert(combined_pred[m].end(), cp.begin(), cp.end());
        }
    }

    EvalMetrics metrics;
    metrics.sample_count = labels.size();
    metrics.confusion = confusion_matrix(labels, ensemble_pred, classes);
    metrics.accuracy = accuracy_from_confusion(metrics.confusion);
    metrics.macro_f1 = macro_f1_from_confusion(metrics.confusion);
    auto plain_accuracy = [&](const std::vector<int>& pred) {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == pred[i]) ++hit;
        return static_cast<double>(hit) / static_cast<double>(labels.size());
    };
    for (std::size_t m = 0; m < modality_count; ++m) {
        ModalityMetrics mm;
        mm.name = dataset.modalities[m].name;
        mm.spatial_accuracy = plain_accuracy(spatial_pred[m]);
        mm.temporal_accuracy = plain_accuracy(temporal_pred[m]);
        mm.combined_accuracy = plain_accuracy(combined_pred[m]);
        metrics.per_modality.push_back(mm);
    }
    return metrics;
}

// Shared epoch loop. `loss_fn(features, labels)` must run the forward
// pass under the active record and return the scalar objective.
template <typename Model, typename LossFn, typename EvalFn>
TrainReport train_impl(Model& m, const data::EncodedDataset& dataset, const data::SplitSpec& split,
                       const TrainOptions& opts, LossFn loss_fn, EvalFn eval_fn) {
    if (opts.epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(opts.learning_rate > 0)) throw ConfigError("train: learning rate must be > 0");

    auto params = m.named_parameters();
    std::vector<Tensor*> tensors;
    for (auto& [name, t] : params) tensors.push_back(t);
    AdamT<float> adam(tensors, opts.learning_rate);

    data::BatchStream stream(dataset, split.train_ids, opts.batch_size, opts.seed, true);

    TrainReport report;
    report.parameter_count = m.parameter_count();
    const auto run_start = std::chrono::steady_clock::now();
    for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        stream.start_epoch();
        double loss_sum = 0;
        std::size_t batches = 0;
        data::EncodedBatch batch;
        while (stream.next(batch)) {
            Tape tape;
            auto loss = loss_fn(batch.features, batch.labels);
            const float value = loss.item();
            if (!std::isfinite(value))
                throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batches + 1));
            backward(loss);
            adam.step();
            m.zero_grad();
            loss_sum += static_cast<double>(value);
            ++batches;
        }

        EpochStats stats;
        stats.train_loss = loss_sum / static_cast<double>(batches);
        auto test_metrics = eval_fn(split.test_ids);
        stats.test_accuracy = test_metrics.accuracy;
        stats.test_macro_f1 = test_metrics.macro_f1;
        stats.seconds = seconds_since(epoch_start);
        report.epochs.push_back(stats);
    }
    report.final_metrics = eval_fn(split.test_ids);
    report.total_seconds = seconds_since(run_start);
    return report;
}

}  // namespace

std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<int>& labels,
                                                        const std::vector<int>& predictions,
                                                        std::size_t classes) {
    if (labels.size() != predictions.size())
        throw DimensionError("confusion_matrix: label and prediction counts differ");
    std::vector<std::vector<std::int64_t>> m(classes, std::vector<std::int64_t>(classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes || predictions[i] < 0 ||
            static_cast<std::size_t>(predictions[i]) >= classes)
            throw BoundsError("confusion_matrix: class index out of range");
        ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
    }
    return m;
}

double accuracy_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion) {
    std::int64_t diag = 0, total = 0;
    for (std::size_t i = 0; i < confusion.size(); ++i)
        for (std::size_t j = 0; j < confusion.size(); ++j) {
            total += confusion[i][j];
            if (i == j) diag += confusion[i][j];
        }
    return total == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(total);
}

double macro_f1_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion) {
    const std::size_t classes = confusion.size();
    double sum = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::int64_t tp = confusion[c][c], fp = 0, fn = 0;
        for (std::size_t o = 0; o < classes; ++o) {
            if (o == c) continue;
            fp += confusion[o][c];
            fn += confusion[c][o];
        }
        const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        sum += precision + recall == 0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    }
    return sum / static_cast<double>(classes);
}

EvalMetrics evaluate(const model::TeacherModel& m, const data::EncodedDataset& dataset,
                     const std::vector<std::size_t>& ids, std::size_t batch_size) {
    return evaluate_impl(dataset, ids, batch_size, m.config().modalities.size(),
                         [&](const std::vector<Tensor>& features) { return model::teacher_forward(m, features); });
}

EvalMetrics evaluate(const model::StudentModel& m, const data::EncodedDataset& dataset,
                     const std::vector<std::size_t>& ids, std::size_t batch_size) {
    return evaluate_impl(dataset, ids, batch_size, m.config().modalities.size(),
                         [&](const std::vector<Tensor>& features) { return model::student_forward(m, features); });
}

TrainReport train_teacher(model::TeacherModel& m, const data::EncodedDataset& dataset,
                          const data::SplitSpec& split, const TrainOptions& opts) {
    return train_impl(
        m, dataset, split, opts,
        [&](const std::vector<Tensor>& features, const std::vector<int>& labels) {
            return teacher_loss(model::teacher_forward(m, features), labels);
        },
        [&](const std::vector<std::size_t>& ids) { return evaluate(m, dataset, ids, opts.batch_size); });
}

TrainReport train_student(model::StudentModel& m, const data::EncodedDataset& dataset,
                          const data::SplitSpec& split, const TrainOptions& opts) {
    return train_impl(
        m, dataset, split, opts,
        [&](const std::vector<Tensor>& features, const std::vector<int>& labels) {
            return teacher_loss(model::student_forward(m, features), labels);
        },
        [&](const std::vector<std::size_t>& ids) { return evaluate(m, dataset, ids, opts.batch_size); });
}

TrainReport train_distilled(model::StudentModel& m, const model::TeacherModel& teacher,
                            const data::EncodedDataset& dataset, const data::SplitSpec& split,
                            const TrainOptions& opts, const KDConfig& kd) {
    kd.validate(m.config().modalities.size());
    if (teacher.config().modalities.size() != m.config().modalities.size())
        throw ConfigError("train_distilled: teacher and student modality counts differ");
    return train_impl(
        m, dataset, split, opts,
        [&](const std::vector<Tensor>& features, const std::vector<int>& labels) {
            model::ForwardResultT<float> teacher_out;
            {
                NoGradGuard frozen;
                teacher_out = model::teacher_forward(teacher, features);
            }
            return student_loss(model::student_forward(m, features), teacher_out, labels, kd);
        },
        [&](const std::vector<std::size_t>& ids) { return evaluate(m, dataset, ids, opts.batch_size); });
}

}  // namespace mmfuse::distill
