#pragma once

// Optimization and knowledge transfer: temperature-softened
// probabilities, the per-stream divergence losses, the weighted student
// objective, Adam, and the training/evaluation loops.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mmfuse/data.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse::distill {

// softmax(logits / temperature) rowwise.
template <typename S>
TensorT<S> soft_probs(const TensorT<S>& logits, double temperature) {
    if (!(temperature > 0.0))
        throw ConfigError("soft_probs: temperature must be > 0, got " + std::to_string(temperature));
    return softmax_lastdim(scale(logits, 1.0 / temperature));
}

// Batch mean of sum_c p_led,c * log(p_led,c / p_ref,c). Gradients flow
// through both arguments; pass the reference side as an untracked tensor
// to treat it as a constant.
template <typename S>
TensorT<S> kl_div(const TensorT<S>& p_led, const TensorT<S>& p_ref) {
    if (p_led.shape() != p_ref.shape())
        throw DimensionError("kl_div: shape mismatch: " + shape_str(p_led.shape()) + " vs " +
                             shape_str(p_ref.shape()));
    if (p_led.rank() != 2) throw DimensionError("kl_div: expected [batch, classes] inputs");
    const std::size_t batch = p_led.extent(0);
    auto diff = sub(log_eps(p_led), log_eps(p_ref));
    return scale(sum_all(mul(p_led, diff)), 1.0 / static_cast<double>(batch));
}

// -(1/B) sum_b log(probs[b, label_b]) on already-normalized rows.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2) throw DimensionError("cross_entropy: expected [batch, classes]");
    const std::size_t batch = probs.extent(0);
    const std::size_t classes = probs.extent(1);
    if (labels.size() != batch)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(batch));
    std::vector<S> onehot(batch * classes, S(0));
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
            throw BoundsError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                              std::to_string(classes) + ")");
        onehot[b * classes + static_cast<std::size_t>(labels[b])] = S(1);
    }
    TensorT<S> mask({batch, classes}, std::move(onehot));
    return scale(sum_all(mul(log_eps(probs), mask)), -1.0 / static_cast<double>(batch));
}

// ==================== the weighted student objective ====================

struct KDConfig {
    double temperature = 4.0;
    double w_cs = 0.5;                  // hard cross-entropy weight
    std::vector<double> w_spatial;      // per modality
    std::vector<double> w_temporal;     // per modality
    bool temperature_squared = true;    // scale soft terms by temperature^2
    bool teacher_led_kl = false;        // flip to the conventional orientation

    // Everything after the hard weight split evenly across the 2M soft terms.
    static KDConfig balanced(std::size_t modalities, double temperature = 4.0, double w_cs = 0.5) {
        KDConfig cfg;
        cfg.temperature = temperature;
        cfg.w_cs = w_cs;
        const double rest = (1.0 - w_cs) / (2.0 * static_cast<double>(modalities));
        cfg.w_spatial.assign(modalities, rest);
        cfg.w_temporal.assign(modalities, rest);
        return cfg;
    }

    void validate(std::size_t modalities) const {
        if (!(temperature > 0.0)) throw ConfigError("kd config: temperature must be > 0");
        if (w_spatial.size() != modalities || w_temporal.size() != modalities)
            throw ConfigError("kd config: expected one spatial and one temporal weight per modality");
        double total = w_cs;
        for (double w : w_spatial) {
            if (w < 0) throw ConfigError("kd config: weights must be >= 0");
            total += w;
        }
        for (double w : w_temporal) {
            if (w < 0) throw ConfigError("kd config: weights must be >= 0");
            total += w;
        }
        if (w_cs < 0) throw ConfigError("kd config: weights must be >= 0");
        if (std::abs(total - 1.0) > 1e-9)
            throw ConfigError("kd config: weights must sum to 1, got " + std::to_string(total));
    }
};

template <typename S>
TensorT<S> teacher_loss(const model::ForwardResultT<S>& outputs, const std::vector<int>& labels) {
    return cross_entropy(outputs.ensemble, labels);
}

// Hard cross entropy on the student ensemble plus the weighted softened
// divergences per modality and stream. Teacher outputs are expected to be
// untracked (a frozen forward), so no gradient reaches the teacher.
template <typename S>
TensorT<S> student_loss(const model::ForwardResultT<S>& student, const model::ForwardResultT<S>& teacher,
                        const std::vector<int>& labels, const KDConfig& cfg) {
    const std::size_t modalities = student.per_modality.size();
    cfg.validate(modalities);
    if (teacher.per_modality.size() != modalities)
        throw ConfigError("student_loss: teacher and student modality counts differ");

    const double soft_scale =
        cfg.temperature_squared ? cfg.temperature * cfg.temperature : 1.0;
    TensorT<S> loss;
    auto accumulate = [&](TensorT<S> term) { loss = loss.defined() ? add(loss, term) : std::move(term); };

    if (cfg.w_cs > 0) accumulate(scale(cross_entropy(student.ensemble, labels), cfg.w_cs));
    for (std::size_t m = 0; m < modalities; ++m) {
        auto soft_term = [&](const TensorT<S>& student_logits, const TensorT<S>& teacher_logits, double w) {
            auto p_student = soft_probs(student_logits, cfg.temperature);
            auto p_teacher = soft_probs(teacher_logits, cfg.temperature);
            auto kl = cfg.teacher_led_kl ? kl_div(p_teacher, p_student) : kl_div(p_student, p_teacher);
            accumulate(scale(kl, w * soft_scale));
        };
        if (cfg.w_spatial[m] > 0)
            soft_term(student.per_modality[m].spatial_logits, teacher.per_modality[m].spatial_logits,
                      cfg.w_spatial[m]);
        if (cfg.w_temporal[m] > 0)
            soft_term(student.per_modality[m].temporal_logits, teacher.per_modality[m].temporal_logits,
                      cfg.w_temporal[m]);
    }
    return loss;
}

// ==================== Adam ====================

template <typename S>
class AdamT {
public:
    AdamT(std::vector<TensorT<S>*> params, double learning_rate)
        : params_(std::move(params)), lr_(learning_rate) {
        for (auto* p : params_) state_.push_back({std::vector<S>(p->size(), S(0)),
                                                  std::vector<S>(p->size(), S(0))});
    }

    void step() {
        ++t_;
        const double corr1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double corr2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            TensorT<S>& p = *params_[i];
            const std::vector<S>& g = p.grad();
            auto& m = state_[i].first;
            auto& v = state_[i].second;
            auto& x = p.values();
            for (std::size_t j = 0; j < x.size(); ++j) {
                m[j] = static_cast<S>(kBeta1) * m[j] + static_cast<S>(1.0 - kBeta1) * g[j];
                v[j] = static_cast<S>(kBeta2) * v[j] + static_cast<S>(1.0 - kBeta2) * g[j] * g[j];
                const double mhat = static_cast<double>(m[j]) / corr1;
                const double vhat = static_cast<double>(v[j]) / corr2;
                x[j] -= static_cast<S>(lr_ * mhat / (std::sqrt(vhat) + kEpsilon));
            }
        }
    }

    long step_count() const { return t_; }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEpsilon = 1e-8;

private:
    std::vector<TensorT<S>*> params_;
    std::vector<std::pair<std::vector<S>, std::vector<S>>> state_;  // first/second moments
    double lr_;
    long t_ = 0;
};

// ==================== metrics ====================

struct ModalityMetrics {
    std::string name;
    double spatial_accuracy = 0;
    double temporal_accuracy = 0;
    double combined_accuracy = 0;
};

struct EvalMetrics {
    double accuracy = 0;
    double macro_f1 = 0;
    std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
    std::vector<ModalityMetrics> per_modality;
    std::size_t sample_count = 0;
};

std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<int>& labels,
                                                        const std::vector<int>& predictions,
                                                        std::size_t classes);
double accuracy_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion);
// Unweighted mean of per-class F1; classes absent from the test side count 0.
double macro_f1_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion);

// ==================== training ====================

struct TrainOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

struct EpochStats {
    double train_loss = 0;
    double test_accuracy = 0;
    double test_macro_f1 = 0;
    double seconds = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    EvalMetrics final_metrics;
    std::size_t parameter_count = 0;
    double total_seconds = 0;
};

EvalMetrics evaluate(const model::TeacherModel& m, const data::EncodedDataset& dataset,
                     const std::vector<std::size_t>& ids, std::size_t batch_size);
EvalMetrics evaluate(const model::StudentModel& m, const data::EncodedDataset& dataset,
                     const std::vector<std::size_t>& ids, std::size_t batch_size);

TrainReport train_teacher(model::TeacherModel& m, const data::EncodedDataset& dataset,
                          const data::SplitSpec& split, const TrainOptions& opts);
// Plain cross-entropy student, no teacher involved.
TrainReport train_student(model::StudentModel& m, const data::EncodedDataset& dataset,
                          const data::SplitSpec& split, const TrainOptions& opts);
// Weighted distillation against a frozen teacher.
TrainReport train_distilled(model::StudentModel& m, const model::TeacherModel& teacher,
                            const data::EncodedDataset& dataset, const data::SplitSpec& split,
                            const TrainOptions& opts, const KDConfig& kd);

}  // namespace mmfuse::distill
