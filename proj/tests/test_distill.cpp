#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "mmfuse/distill.hpp"
#include "support/testutil.hpp"

namespace fs = std::filesystem;
namespace data = mmfuse::data;
namespace model = mmfuse::model;
namespace distill = mmfuse::distill;
using mmfuse::Shape;
using mmfuse::Tensor;
using mmfuse::TensorT;
using D = TensorT<double>;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

model::ModelConfig micro_config() {
    model::ModelConfig cfg;
    cfg.modalities = {{"alpha", 3, 4}, {"beta", 3, 4}};  // P=3, D=4
    cfg.classes = 3;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.teacher_mstt_layers = 1;
    cfg.student_mstt_layers = 1;
    cfg.tmt_layers = 1;
    cfg.fusion_tokens = 2;
    return cfg;
}

struct TrainFixture {
    fs::path dir;
    data::DatasetManifest manifest;
    data::EncodedDataset dataset;
    data::SplitSpec split;
    model::ModelConfig cfg;

    explicit TrainFixture(std::uint64_t seed) {
        dir = fs::temp_directory_path() / ("mmfuse_distill_" + std::to_string(seed));
        fs::remove_all(dir);
        data::SyntheticSpec spec;
        spec.classes = 3;
        spec.subjects = 4;
        spec.sessions = 1;
        spec.trials = 2;
        spec.duration_seconds = 1.0;
        spec.seed = seed;
        spec.modalities = {{"imu", 3, 16.0, 0.08}, {"pose", 2, 8.0, 0.08}};
        manifest = data::generate_synthetic(spec, dir);
        data::EncodingSettings settings;
        settings.window["imu"] = 2;
        settings.window["pose"] = 1;
        dataset = data::load_encoded(dir, manifest, settings);
        split = data::make_split(manifest, {data::Protocol::Loso, 4, 0.0});

        cfg.modalities.clear();
        for (std::size_t m = 0; m < dataset.modalities.size(); ++m)
            cfg.modalities.push_back({dataset.modalities[m].name, dataset.patch_counts[m],
                                      dataset.modalities[m].channels});
        cfg.classes = dataset.classes.size();
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.teacher_mstt_layers = 2;
        cfg.student_mstt_layers = 1;
        cfg.tmt_layers = 1;
        cfg.fusion_tokens = 2;
    }

    ~TrainFixture() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("softened probabilities: unit temperature, flat limit, hand value") {
    std::mt19937 rng(1);
    auto logits = random_tensor<double>({4, 5}, rng, -3, 3);
    auto plain = mmfuse::softmax_lastdim(logits);
    auto softened = distill::soft_probs(logits, 1.0);
    CHECK(softened.values() == plain.values());

    D x({1, 3}, {3, 1, -2});
    auto flat = distill::soft_probs(x, 1e6);
    for (double v : flat.values()) CHECK(std::abs(v - 1.0 / 3.0) < 1e-5);

    D two({1, 2}, {2, 0});
    auto p = distill::soft_probs(two, 2.0);
    const double z = std::exp(1.0) + std::exp(0.0);
    CHECK(p.at({0, 0}) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
    CHECK(p.at({0, 0}) == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(p.at({0, 1}) == doctest::Approx(0.2689).epsilon(1e-4));

    CHECK_THROWS_AS(distill::soft_probs(two, 0.0), mmfuse::ConfigError);
    CHECK_THROWS_AS(distill::soft_probs(two, -1.0), mmfuse::ConfigError);
}

TEST_CASE("divergence: zero at identity, nonnegative, hand value") {
    std::mt19937 rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
        auto a = distill::soft_probs(random_tensor<double>({2, 4}, rng, -4, 4), 1.0);
        auto b = distill::soft_probs(random_tensor<double>({2, 4}, rng, -4, 4), 1.0);
        CHECK(distill::kl_div(a, b).item() >= 0.0);
        CHECK(distill::kl_div(a, a).item() == 0.0);
    }

    D ps({1, 2}, {0.5, 0.5});
    D pt({1, 2}, {0.9, 0.1});
    const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    CHECK(distill::kl_div(ps, pt).item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(distill::kl_div(ps, pt).item() == doctest::Approx(0.5108).epsilon(1e-4));

    D narrow({1, 3}, {0.2, 0.3, 0.5});
    CHECK_THROWS_AS(distill::kl_div(ps, narrow), mmfuse::DimensionError);
}

TEST_CASE("cross entropy closed forms") {
    D perfect({2, 3}, {1, 0, 0, 0, 0, 1});
    CHECK(distill::teacher_loss(model::ForwardResultT<double>{{}, perfect, {}}, {0, 2}).item() < 1e-6);

    D uniform = TensorT<double>::full({4, 5}, 0.2);
    auto loss = distill::cross_entropy(uniform, {0, 1, 2, 3});
    CHECK(loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-9));

    CHECK_THROWS_AS(distill::cross_entropy(uniform, {0, 1}), mmfuse::DimensionError);
    CHECK_THROWS_AS(distill::cross_entropy(uniform, {0, 1, 2, 9}), mmfuse::BoundsError);
}

TEST_CASE("kd config: balanced defaults validate, bad sums rejected") {
    auto cfg = distill::KDConfig::balanced(3);
    cfg.validate(3);
    CHECK(cfg.w_spatial.size() == 3);
    CHECK(cfg.w_spatial[0] == doctest::Approx((1.0 - 0.5) / 6.0));

    auto bad = cfg;
    bad.w_cs = 0.9;  // sum now exceeds 1
    CHECK_THROWS_AS(bad.validate(3), mmfuse::ConfigError);
    auto negative = cfg;
    negative.w_spatial[0] = -negative.w_spatial[0];
    CHECK_THROWS_AS(negative.validate(3), mmfuse::ConfigError);
    CHECK_THROWS_AS(cfg.validate(2), mmfuse::ConfigError);
}

TEST_CASE("student objective degenerates to plain cross entropy at w_cs = 1") {
    std::mt19937 rng(3);
    auto cfg = micro_config();
    model::StudentModelT<double> student(cfg, 5);
    model::TeacherModelT<double> teacher(cfg, 7);
    std::vector<D> inputs = {random_tensor<double>({2, 3, 4}, rng), random_tensor<double>({2, 3, 4}, rng)};
    std::vector<int> labels = {0, 2};

    auto s_out = model::student_forward(student, inputs);
    auto t_out = model::teacher_forward(teacher, inputs);

    distill::KDConfig hard;
    hard.w_cs = 1.0;
    hard.w_spatial = {0, 0};
    hard.w_temporal = {0, 0};
    const double plain = distill::cross_entropy(s_out.ensemble, labels).item();
    CHECK(distill::student_loss(s_out, t_out, labels, hard).item() == plain);

    // teacher outputs equal to the student's: every soft term vanishes
    auto kd = distill::KDConfig::balanced(2, 1.0, 0.5);
    kd.temperature_squared = false;
    CHECK(distill::student_loss(s_out, s_out, labels, kd).item() == doctest::Approx(0.5 * plain).epsilon(1e-12));
}

TEST_CASE("student objective gradient matches finite differences on a micro model") {
    std::mt19937 rng(4);
    auto cfg = micro_config();
    model::StudentModelT<double> student(cfg, 11);
    model::TeacherModelT<double> teacher(cfg, 13);
    std::vector<D> inputs = {random_tensor<double>({2, 3, 4}, rng), random_tensor<double>({2, 3, 4}, rng)};
    std::vector<int> labels = {1, 2};

    model::ForwardResultT<double> teacher_out;
    {
        mmfuse::NoGradGuard frozen;
        teacher_out = model::teacher_forward(teacher, inputs);
    }

    auto kd = distill::KDConfig::balanced(2, 3.0, 0.4);
    std::vector<D*> leaves;
    for (auto& [name, t] : student.named_parameters()) leaves.push_back(t);
    double err = grad_check(leaves, [&] {
        return distill::student_loss(model::student_forward(student, inputs), teacher_out, labels, kd);
    });
    CHECK(err < 1e-3);
}

TEST_CASE("teacher objective gradient matches finite differences on a micro model") {
    std::mt19937 rng(5);
    auto cfg = micro_config();
    model::TeacherModelT<double> teacher(cfg, 17);
    std::vector<D> inputs = {random_tensor<double>({2, 3, 4}, rng), random_tensor<double>({2, 3, 4}, rng)};
    std::vector<int> labels = {0, 1};
    std::vector<D*> leaves;
    for (auto& [name, t] : teacher.named_parameters()) leaves.push_back(t);
    double err = grad_check(leaves, [&] {
        return distill::teacher_loss(model::teacher_forward(teacher, inputs), labels);
    });
    CHECK(err < 1e-3);
}

TEST_CASE("adam: first-step direction, zero-gradient fixpoint") {
    auto apply_grad = [](D& param, double g) {
        mmfuse::TapeT<double> tape;
        mmfuse::backward(mmfuse::sum_all(mmfuse::scale(param, g)));
    };

    D param({1}, {1.5}, true);
    distill::AdamT<double> adam({&param}, 0.01);
    apply_grad(param, 0.37);
    adam.step();
    param.zero_grad();
    CHECK(param.values()[0] == doctest::Approx(1.5 - 0.01).epsilon(1e-6));  // -lr * sign(g)

    apply_grad(param, -2.4);
    adam = distill::AdamT<double>({&param}, 0.01);
    const double before = param.values()[0];
    adam.step();
    param.zero_grad();
    CHECK(param.values()[0] == doctest::Approx(before + 0.01).epsilon(1e-6));

    // zero gradient into a fresh optimizer moves nothing
    D still({3}, {1, 2, 3}, true);
    distill::AdamT<double> fresh({&still}, 0.5);
    apply_grad(still, 0.0);
    fresh.step();
    still.zero_grad();
    CHECK(still.values() == std::vector<double>{1, 2, 3});
}

TEST_CASE("adam matches a hand-rolled scalar trace") {
    D param({1}, {0.8}, true);
    distill::AdamT<double> adam({&param}, 0.05);

    double x = 0.8, m = 0, v = 0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int t = 1; t <= 10; ++t) {
        const double g = std::sin(static_cast<double>(t)) + 0.3;
        {
            mmfuse::TapeT<double> tape;
            mmfuse::backward(mmfuse::scale(param, g));
        }
        adam.step();
        param.zero_grad();

        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        x -= 0.05 * mhat / (std::sqrt(vhat) + eps);
        CHECK(std::abs(param.values()[0] - x) < 1e-10);
    }
}

TEST_CASE("confusion-derived metrics against a brute-force count") {
    // two classes; class 0 collects one hit and one false positive
    auto confusion = distill::confusion_matrix({0, 1}, {0, 0}, 2);
    CHECK(confusion[0][0] == 1);
    CHECK(confusion[1][0] == 1);
    CHECK(distill::accuracy_from_confusion(confusion) == doctest::Approx(0.5));

    // brute-force per-class oracle
    const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 2, 0};
    const std::vector<int> preds = {0, 2, 2, 1, 1, 2, 0, 0};
    auto big = distill::confusion_matrix(labels, preds, 3);
    double expected_f1 = 0;
    for (int c = 0; c < 3; ++c) {
        int tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (preds[i] == c && labels[i] == c) ++tp;
            if (preds[i] == c && labels[i] != c) ++fp;
            if (preds[i] != c && labels[i] == c) ++fn;
        }
        const double p = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double r = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
        expected_f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    expected_f1 /= 3.0;
    CHECK(distill::macro_f1_from_confusion(big) == doctest::Approx(expected_f1).epsilon(1e-12));

    int hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == preds[i];
    CHECK(distill::accuracy_from_confusion(big) ==
          doctest::Approx(static_cast<double>(hits) / labels.size()).epsilon(1e-12));

    // perfect predictions: both metrics saturate, matrix is diagonal
    auto perfect = distill::confusion_matrix(labels, labels, 3);
    CHECK(distill::accuracy_from_confusion(perfect) == 1.0);
    CHECK(distill::macro_f1_from_confusion(perfect) == 1.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (i != j) CHECK(perfect[i][j] == 0);
}

TEST_CASE("training reduces the loss and is trace-deterministic") {
    TrainFixture fx(101);
    distill::TrainOptions opts;
    opts.epochs = 5;
    opts.batch_size = 6;
    opts.learning_rate = 2e-3;
    opts.seed = 9;

    model::StudentModel student(fx.cfg, 42);
    auto report = distill::train_student(student, fx.dataset, fx.split, opts);
    CHECK(report.epochs.size() == 5);
    CHECK(report.epochs.back().train_loss < report.epochs.front().train_loss);
    CHECK(report.final_metrics.accuracy >= 0.0);
    CHECK(report.final_metrics.accuracy <= 1.0);
    CHECK(report.final_metrics.per_modality.size() == 2);

    model::StudentModel again(fx.cfg, 42);
    auto rerun = distill::train_student(again, fx.dataset, fx.split, opts);
    for (std::size_t e = 0; e < 5; ++e) {
        CHECK(rerun.epochs[e].train_loss == report.epochs[e].train_loss);
        CHECK(rerun.epochs[e].test_accuracy == report.epochs[e].test_accuracy);
    }
}

TEST_CASE("distillation freezes the teacher and matches raw training at w_cs = 1") {
    TrainFixture fx(202);
    distill::TrainOptions opts;
    opts.epochs = 3;
    opts.batch_size = 6;
    opts.learning_rate = 2e-3;
    opts.seed = 31;

    model::TeacherModel teacher(fx.cfg, 7);
    distill::train_teacher(teacher, fx.dataset, fx.split, opts);

    std::vector<std::vector<float>> teacher_before;
    for (auto& [name, t] : teacher.named_parameters()) teacher_before.push_back(t->values());

    // hard-only distillation = plain student training, bit for bit
    model::StudentModel raw(fx.cfg, 55);
    auto raw_report = distill::train_student(raw, fx.dataset, fx.split, opts);

    model::StudentModel kd_student(fx.cfg, 55);
    distill::KDConfig hard;
    hard.w_cs = 1.0;
    hard.w_spatial = {0, 0};
    hard.w_temporal = {0, 0};
    auto kd_report = distill::train_distilled(kd_student, teacher, fx.dataset, fx.split, opts, hard);

    for (std::size_t e = 0; e < opts.epochs; ++e)
        CHECK(kd_report.epochs[e].train_loss == raw_report.epochs[e].train_loss);
    auto raw_params = raw.named_parameters();
    auto kd_params = kd_student.named_parameters();
    for (std::size_t i = 0; i < raw_params.size(); ++i)
        CHECK(raw_params[i].second->values() == kd_params[i].second->values());

    // a real distillation run leaves the teacher untouched
    model::StudentModel kd2(fx.cfg, 56);
    distill::train_distilled(kd2, teacher, fx.dataset, fx.split, opts, distill::KDConfig::balanced(2));
    std::size_t i = 0;
    for (auto& [name, t] : teacher.named_parameters()) CHECK(t->values() == teacher_before[i++]);
}

TEST_CASE("non-finite losses abort with context") {
    TrainFixture fx(303);
    distill::TrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 6;
    opts.learning_rate = 1e9;  // guaranteed divergence
    opts.seed = 3;
    model::StudentModel student(fx.cfg, 1);
    CHECK_THROWS_AS(distill::train_student(student, fx.dataset, fx.split, opts), mmfuse::NumericError);
}
