#include "mmfuse/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mmfuse/errors.hpp"

namespace mmfuse::data {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
    }
}

std::string format_float(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

float parse_float(std::string_view text, const std::filesystem::path& file) {
    float v = 0.0f;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size())
        throw IoError("malformed number \"" + std::string(text) + "\" in " + file.string());
    return v;
}

// splitmix64; keyed sub-streams keep generation order-independent.
std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::mt19937 stream_rng(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = mix64(seed ^ mix64(tag));
    h = mix64(h ^ mix64(a));
    h = mix64(h ^ mix64(b));
    return std::mt19937(static_cast<std::uint32_t>(h ^ (h >> 32)));
}

std::string zero_pad(std::size_t v, int width) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%0*zu", width, v);
    return buf;
}

}  // namespace

// ==================== manifest ====================

int DatasetManifest::class_index(const std::string& label) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == label) return static_cast<int>(i);
    throw ConfigError("unknown class label \"" + label + "\"");
}

std::vector<int> DatasetManifest::subject_ids() const {
    std::set<int> ids;
    for (const auto& s : samples) ids.insert(s.subject);
    return {ids.begin(), ids.end()};
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
    const auto path = root / "meta.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }

    try {
        require_keys(j, {"modalities", "classes", "samples"}, path.string());
        DatasetManifest m;
        for (const auto& jm : j.at("modalities")) {
            require_keys(jm, {"name", "channels", "rate"}, "modality entry");
            m.modalities.push_back({jm.at("name").get<std::string>(), jm.at("channels").get<std::size_t>(),
                                    jm.at("rate").get<double>()});
        }
        m.classes = j.at("classes").get<std::vector<std::string>>();
        for (const auto& js : j.at("samples")) {
            require_keys(js, {"id", "subject", "session", "label", "files"}, "sample entry");
            SampleMeta s;
            s.id = js.at("id").get<std::string>();
            s.subject = js.at("subject").get<int>();
            s.session = js.at("session").get<int>();
            s.label = js.at("label").get<std::string>();
            for (auto it = js.at("files").begin(); it != js.at("files").end(); ++it)
                s.files[it.key()] = it.value().get<std::string>();
            m.samples.push_back(std::move(s));
        }

        for (const auto& s : m.samples) {
            if (s.subject < 1 || s.session < 1)
                throw ConfigError("sample " + s.id + ": subject and session ids must be positive");
            m.class_index(s.label);
            if (s.files.size() != m.modalities.size())
                throw ConfigError("sample " + s.id + ": expected one file per declared modality");
            for (const auto& mod : m.modalities)
                if (!s.files.count(mod.name))
                    throw ConfigError("sample " + s.id + ": missing modality \"" + mod.name + "\"");
        }
        return m;
    } catch (const json::exception& e) {
        throw IoError("invalid manifest " + path.string() + ": " + e.what());
    }
}

void write_manifest(const std::filesystem::path& root, const DatasetManifest& manifest) {
    json j;
    j["modalities"] = json::array();
    for (const auto& m : manifest.modalities)
        j["modalities"].push_back({{"name", m.name}, {"channels", m.channels}, {"rate", m.rate}});
    j["classes"] = manifest.classes;
    j["samples"] = json::array();
    for (const auto& s : manifest.samples) {
        json files = json::object();
        for (const auto& [mod, path] : s.files) files[mod] = path;
        j["samples"].push_back({{"id", s.id},
                                {"subject", s.subject},
                                {"session", s.session},
                                {"label", s.label},
                                {"files", files}});
    }
    std::ofstream out(root / "meta.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (root / "meta.json").string());
    out << j.dump(2) << "\n";
}

// ==================== CSV series ====================

ModalityRecord read_series_csv(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    ModalityRecord rec;
    std::string line;
    std::size_t channels = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t count = 0;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            std::size_t comma = line.find(',', pos);
            if (comma == std::string::npos) comma = line.size();
            rec.series.push_back(parse_float(std::string_view(line).substr(pos, comma - pos), file));
            ++count;
            pos = comma + 1;
        }
        if (channels == 0)
            channels = count;
        else if (count != channels)
            throw IoError("ragged row in " + file.string());
    }
    if (channels == 0) throw IoError("empty series file " + file.string());
    rec.channels = channels;
    return rec;
}

void write_series_csv(const std::filesystem::path& file, const std::vector<float>& series,
                      std::size_t channels) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    const std::size_t steps = series.size() / channels;
    std::string line;
    for (std::size_t t = 0; t < steps; ++t) {
        line.clear();
        for (std::size_t c = 0; c < channels; ++c) {
            if (c) line += ',';
            line += format_float(series[t * channels + c]);
        }
        line += '\n';
        out << line;
    }
}

// ==================== synthetic generation ====================

void SyntheticSpec::validate() const {
    if (classes < 1) throw ConfigError("synthetic spec: \"classes\" must be >= 1");
    if (subjects < 1) throw ConfigError("synthetic spec: \"subjects\" must be >= 1");
    if (sessions < 1) throw ConfigError("synthetic spec: \"sessions\" must be >= 1");
    if (trials < 1) throw ConfigError("synthetic spec: \"trials\" must be >= 1");
    if (duration_seconds <= 0) throw ConfigError("synthetic spec: \"duration_seconds\" must be > 0");
    if (subject_bias < 0) throw ConfigError("synthetic spec: \"subject_bias\" must be >= 0");
    if (modalities.empty()) throw ConfigError("synthetic spec: \"modalities\" must be non-empty");
    std::set<std::string> names;
    for (const auto& m : modalities) {
        if (m.name.empty()) throw ConfigError("synthetic spec: modality \"name\" must be non-empty");
        if (!names.insert(m.name).second)
            throw ConfigError("synthetic spec: duplicate modality \"" + m.name + "\"");
        if (m.channels < 1) throw ConfigError("synthetic spec: \"channels\" must be >= 1");
        if (m.rate <= 0) throw ConfigError("synthetic spec: \"rate\" must be > 0");
        if (m.noise_sigma < 0) throw ConfigError("synthetic spec: \"noise_sigma\" must be >= 0");
    }
}

namespace {

constexpr std::size_t kLatentDim = 8;
constexpr int kHarmonics = 3;

struct Prototype {
    // per latent channel: kHarmonics (amplitude, frequency, phase) triples
    std::vector<double> amp, freq, phase;
};

Prototype make_prototype(std::uint64_t seed, std::size_t cls) {
    auto rng = stream_rng(seed, 0xC1A55, cls);
    std::uniform_real_distribution<double> amp_d(0.5, 1.5), freq_d(0.5, 3.0), phase_d(0.0, 6.2831853);
    Prototype p;
    for (std::size_t j = 0; j < kLatentDim * kHarmonics; ++j) {
        p.amp.push_back(amp_d(rng));
        p.freq.push_back(freq_d(rng));
        p.phase.push_back(phase_d(rng));
    }
    return p;
}

double latent_value(const Prototype& p, std::size_t channel, double t) {
    double v = 0.0;
    for (int h = 0; h < kHarmonics; ++h) {
        const std::size_t i = channel * kHarmonics + h;
        v += p.amp[i] * std::sin(6.2831853071795865 * p.freq[i] * t + p.phase[i]);
    }
    return v;
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_root) {
    spec.validate();

    std::vector<Prototype> prototypes;
    for (std::size_t k = 0; k < spec.classes; ++k) prototypes.push_back(make_prototype(spec.seed, k));

    // Per-modality projection of the latent signal. Each modality gets a
    // round-robin share of the latent channels emphasized so modalities
    // complement rather than duplicate one another.
    const std::size_t M = spec.modalities.size();
    std::vector<std::vector<double>> projections(M);
    for (std::size_t m = 0; m < M; ++m) {
        auto rng = stream_rng(spec.seed, 0x9807, m);
        std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(kLatentDim)));
        auto& proj = projections[m];
        proj.resize(spec.modalities[m].channels * kLatentDim);
        for (std::size_t c = 0; c < spec.modalities[m].channels; ++c)
            for (std::size_t j = 0; j < kLatentDim; ++j)
                proj[c * kLatentDim + j] = n(rng) * (j % M == m ? 1.0 : 0.35);
    }

    std::vector<std::vector<std::vector<double>>> offsets(spec.subjects);  // [subject][modality][channel]
    std::vector<double> timescale(spec.subjects);
    for (std::size_t s = 0; s < spec.subjects; ++s) {
        auto scale_rng = stream_rng(spec.seed, 0x5CA1E, s);
        timescale[s] = std::uniform_real_distribution<double>(0.9, 1.1)(scale_rng);
        offsets[s].resize(M);
        for (std::size_t m = 0; m < M; ++m) {
            auto rng = stream_rng(spec.seed, 0x0FF5, s, m);
            std::normal_distribution<double> n(0.0, spec.subject_bias);
            offsets[s][m].resize(spec.modalities[m].channels);
            for (auto& o : offsets[s][m]) o = n(rng);
        }
    }

    DatasetManifest manifest;
    for (const auto& m : spec.modalities) manifest.modalities.push_back({m.name, m.channels, m.rate});
    for (std::size_t k = 0; k < spec.classes; ++k) manifest.classes.push_back("activity_" + zero_pad(k, 2));

    std::error_code ec;
    std::filesystem::create_directories(out_root / "samples", ec);
    if (ec) throw IoError("cannot create output directory " + out_root.string() + ": " + ec.message());

    std::size_t sample_index = 0;
    for (std::size_t k = 0; k < spec.classes; ++k)
        for (std::size_t s = 0; s < spec.subjects; ++s)
            for (std::size_t e = 0; e < spec.sessions; ++e)
                for (std::size_t r = 0; r < spec.trials; ++r, ++sample_index) {
                    SampleMeta meta;
                    meta.id = "act" + zero_pad(k, 2) + "_sub" + zero_pad(s + 1, 2) + "_ses" +
                              zero_pad(e + 1, 2) + "_tr" + zero_pad(r + 1, 2);
                    meta.subject = static_cast<int>(s + 1);
                    meta.session = static_cast<int>(e + 1);
                    meta.label = manifest.classes[k];

                    const auto sample_dir = out_root / "samples" / meta.id;
                    std::filesystem::create_directories(sample_dir, ec);
                    if (ec) throw IoError("cannot create " + sample_dir.string() + ": " + ec.message());

                    for (std::size_t m = 0; m < M; ++m) {
                        const auto& mod = spec.modalities[m];
                        auto rng = stream_rng(spec.seed, 0x7A1A, sample_index, m);
                        std::uniform_real_distribution<double> shift_d(0.0, 0.5), amp_d(0.85, 1.15);
                        std::normal_distribution<double> noise(0.0, mod.noise_sigma);
                        const double shift = shift_d(rng);
                        const double amp = amp_d(rng);

                        const std::size_t steps =
                            static_cast<std::size_t>(std::llround(spec.duration_seconds * mod.rate));
                        std::vector<float> series(steps * mod.channels);
                        for (std::size_t t = 0; t < steps; ++t) {
                            const double time = timescale[s] * (static_cast<double>(t) / mod.rate + shift);
                            double latents[kLatentDim];
                            for (std::size_t j = 0; j < kLatentDim; ++j)
                                latents[j] = latent_value(prototypes[k], j, time);
                            for (std::size_t c = 0; c < mod.channels; ++c) {
                                double v = 0.0;
                                for (std::size_t j = 0; j < kLatentDim; ++j)
                                    v += projections[m][c * kLatentDim + j] * latents[j];
                                v = amp * v + offsets[s][m][c] + noise(rng);
                                series[t * mod.channels + c] = static_cast<float>(v);
                            }
                        }
                        const std::string rel = "samples/" + meta.id + "/" + mod.name + ".csv";
                        write_series_csv(out_root / rel, series, mod.channels);
                        meta.files[mod.name] = rel;
                    }
                    manifest.samples.push_back(std::move(meta));
                }

    write_manifest(out_root, manifest);
    return manifest;
}

// ==================== encoding ====================

PatchMatrix segment_and_pool(const ModalityRecord& rec, std::size_t window) {
    if (window < 1) throw ConfigError("segment_and_pool: window must be >= 1");
    const std::size_t steps = rec.steps();
    if (steps < window)
        throw IngestionError("series of " + std::to_string(steps) + " steps is shorter than window " +
                             std::to_string(window));
    PatchMatrix out;
    out.patches = steps / window;
    out.channels = rec.channels;
    out.values.assign(out.patches * out.channels, 0.0f);
    for (std::size_t p = 0; p < out.patches; ++p) {
        for (std::size_t t = 0; t < window; ++t) {
            const float* row = rec.series.data() + (p * window + t) * rec.channels;
            for (std::size_t c = 0; c < rec.channels; ++c) out.values[p * out.channels + c] += row[c];
        }
        const float inv = 1.0f / static_cast<float>(window);
        for (std::size_t c = 0; c < rec.channels; ++c) out.values[p * out.channels + c] *= inv;
    }
    return out;
}

PatchMatrix temporal_align(const PatchMatrix& patches, std::size_t target_patches) {
    if (target_patches < 1) throw ConfigError("temporal_align: target patch count must be >= 1");
    if (patches.patches == target_patches) return patches;

    PatchMatrix out;
    out.patches = target_patches;
    out.channels = patches.channels;
    out.values.resize(target_patches * patches.channels);
    if (patches.patches > target_patches) {
        // uniform subsampling, order preserving
        for (std::size_t j = 0; j < target_patches; ++j) {
            const std::size_t src =
                target_patches == 1
                    ? 0
                    : static_cast<std::size_t>(std::llround(static_cast<double>(j) *
                                                            static_cast<double>(patches.patches - 1) /
                                                            static_cast<double>(target_patches - 1)));
            std::copy_n(patches.values.data() + src * patches.channels, patches.channels,
                        out.values.data() + j * patches.channels);
        }
    } else {
        std::copy(patches.values.begin(), patches.values.end(), out.values.begin());
        const float* last = patches.values.data() + (patches.patches - 1) * patches.channels;
        for (std::size_t j = patches.patches; j < target_patches; ++j)
            std::copy_n(last, patches.channels, out.values.data() + j * patches.channels);
    }
    return out;
}

EncodedDataset load_encoded(const std::filesystem::path& root, const DatasetManifest& manifest,
                            const EncodingSettings& settings) {
    EncodedDataset ds;
    ds.modalities = manifest.modalities;
    ds.classes = manifest.classes;

    const std::size_t M = manifest.modalities.size();
    ds.windows.resize(M);
    for (std::size_t m = 0; m < M; ++m) {
        const auto& mod = manifest.modalities[m];
        auto it = settings.window.find(mod.name);
        std::size_t w = (it != settings.window.end()) ? it->second : 0;
        if (w == 0) w = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.5 * mod.rate)));
        ds.windows[m] = w;
    }

    // first pass: pool every series, collecting patch counts per modality
    std::vector<std::vector<PatchMatrix>> pooled(manifest.samples.size());
    std::vector<std::vector<std::size_t>> patch_counts(M);
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
        const auto& sample = manifest.samples[i];
        pooled[i].resize(M);
        for (std::size_t m = 0; m < M; ++m) {
            const auto& mod = manifest.modalities[m];
            const auto file = root / sample.files.at(mod.name);
            ModalityRecord rec;
            try {
                rec = read_series_csv(file);
            } catch (const IoError& e) {
                throw IngestionError("sample " + sample.id + ": " + e.what());
            }
            if (rec.channels != mod.channels)
                throw IngestionError("sample " + sample.id + ": modality \"" + mod.name + "\" has " +
                                     std::to_string(rec.channels) + " channels, manifest declares " +
                                     std::to_string(mod.channels));
            rec.modality_id = mod.name;
            rec.sample_rate = mod.rate;
            try {
                pooled[i][m] = segment_and_pool(rec, ds.windows[m]);
            } catch (const IngestionError& e) {
                throw IngestionError("sample " + sample.id + ": " + e.what());
            }
            patch_counts[m].push_back(pooled[i][m].patches);
        }
    }

    ds.patch_counts.resize(M);
    for (std::size_t m = 0; m < M; ++m) {
        auto it = settings.target_patches.find(manifest.modalities[m].name);
        std::size_t target = (it != settings.target_patches.end()) ? it->second : 0;
        if (target == 0) {
            auto counts = patch_counts[m];
            std::sort(counts.begin(), counts.end());
            target = counts[(counts.size() - 1) / 2];
        }
        ds.patch_counts[m] = target;
    }

    for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
        const auto& sample = manifest.samples[i];
        std::vector<Tensor> feats;
        feats.reserve(M);
        for (std::size_t m = 0; m < M; ++m) {
            PatchMatrix aligned = temporal_align(pooled[i][m], ds.patch_counts[m]);
            feats.emplace_back(Shape{aligned.patches, aligned.channels}, std::move(aligned.values));
        }
        ds.features.push_back(std::move(feats));
        ds.ids.push_back(sample.id);
        ds.labels.push_back(manifest.class_index(sample.label));
        ds.subjects.push_back(sample.subject);
        ds.sessions.push_back(sample.session);
    }
    return ds;
}

// ==================== splits ====================

Protocol protocol_from_name(const std::string& name) {
    if (name == "fifty_fifty") return Protocol::FiftyFifty;
    if (name == "loso") return Protocol::Loso;
    if (name == "cross_subject") return Protocol::CrossSubject;
    if (name == "cross_session") return Protocol::CrossSession;
    throw ConfigError("unknown protocol \"" + name +
                      "\" (expected fifty_fifty, loso, cross_subject or cross_session)");
}

std::string protocol_name(Protocol p) {
    switch (p) {
        case Protocol::FiftyFifty: return "fifty_fifty";
        case Protocol::Loso: return "loso";
        case Protocol::CrossSubject: return "cross_subject";
        case Protocol::CrossSession: return "cross_session";
    }
    return "?";
}

namespace {

void verify_split(const DatasetManifest& manifest, const SplitSpec& split) {
    if (split.train_ids.size() + split.test_ids.size() != manifest.samples.size())
        throw ContractError("split does not cover the dataset");
    std::set<std::size_t> seen(split.train_ids.begin(), split.train_ids.end());
    for (std::size_t id : split.test_ids)
        if (!seen.insert(id).second) throw ContractError("split sides overlap");

    const bool subject_independent = split.protocol.kind == Protocol::FiftyFifty ||
                                     split.protocol.kind == Protocol::Loso ||
                                     split.protocol.kind == Protocol::CrossSubject;
    if (subject_independent) {
        std::set<int> train_subjects, test_subjects;
        for (std::size_t id : split.train_ids) train_subjects.insert(manifest.samples[id].subject);
        for (std::size_t id : split.test_ids) test_subjects.insert(manifest.samples[id].subject);
        for (int s : test_subjects)
            if (train_subjects.count(s))
                throw ContractError("subject " + std::to_string(s) + " appears on both split sides");
    }
}

}  // namespace

SplitSpec make_split(const DatasetManifest& manifest, const ProtocolSpec& protocol) {
    SplitSpec split;
    split.protocol = protocol;
    const auto subjects = manifest.subject_ids();

    auto assign_by_subject = [&](auto train_pred) {
        for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
            if (train_pred(manifest.samples[i].subject))
                split.train_ids.push_back(i);
            else
                split.test_ids.push_back(i);
        }
    };

    switch (protocol.kind) {
        case Protocol::FiftyFifty:
            assign_by_subject([](int s) { return s % 2 == 1; });
            break;
        case Protocol::Loso: {
            if (std::find(subjects.begin(), subjects.end(), protocol.held_out_subject) == subjects.end())
                throw ConfigError("loso: subject " + std::to_string(protocol.held_out_subject) +
                                  " not present in the dataset");
            assign_by_subject([&](int s) { return s != protocol.held_out_subject; });
            break;
        }
        case Protocol::CrossSubject: {
            if (protocol.train_fraction <= 0.0 || protocol.train_fraction > 1.0)
                throw ConfigError("cross_subject: train_fraction must be in (0, 1]");
            const std::size_t n_train = static_cast<std::size_t>(
                std::ceil(protocol.train_fraction * static_cast<double>(subjects.size())));
            std::set<int> train_subjects(subjects.begin(),
                                         subjects.begin() + std::min(n_train, subjects.size()));
            assign_by_subject([&](int s) { return train_subjects.count(s) > 0; });
            break;
        }
        case Protocol::CrossSession: {
            if (protocol.train_fraction <= 0.0 || protocol.train_fraction > 1.0)
                throw ConfigError("cross_session: train_fraction must be in (0, 1]");
            std::map<int, std::vector<int>> sessions_by_subject;
            for (const auto& s : manifest.samples) sessions_by_subject[s.subject].push_back(s.session);
            std::map<int, int> cutoff;  // subject -> last train session (inclusive)
            for (auto& [subject, sessions] : sessions_by_subject) {
                std::sort(sessions.begin(), sessions.end());
                sessions.erase(std::unique(sessions.begin(), sessions.end()), sessions.end());
                const std::size_t n_train = static_cast<std::size_t>(
                    std::ceil(protocol.train_fraction * static_cast<double>(sessions.size())));
                cutoff[subject] = sessions[std::min(n_train, sessions.size()) - 1];
            }
            for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
                const auto& s = manifest.samples[i];
                if (s.session <= cutoff[s.subject])
                    split.train_ids.push_back(i);
                else
                    split.test_ids.push_back(i);
            }
            break;
        }
    }

    verify_split(manifest, split);
    return split;
}

// ==================== batching ====================

BatchStream::BatchStream(const EncodedDataset& dataset, std::vector<std::size_t> ids,
                         std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : dataset_(dataset),
      ids_(std::move(ids)),
      batch_size_(batch_size),
      shuffle_(shuffle),
      rng_(static_cast<std::uint32_t>(mix64(seed))) {
    if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
    if (ids_.empty()) throw ConfigError("empty split side: nothing to iterate");
    for (std::size_t id : ids_)
        if (id >= dataset_.size()) throw BoundsError("batch stream: sample index out of range");
    cursor_ = ids_.size();  // start_epoch required before first next()
}

void BatchStream::start_epoch() {
    if (shuffle_) std::shuffle(ids_.begin(), ids_.end(), rng_);
    cursor_ = 0;
}

std::size_t BatchStream::batches_per_epoch() const {
    return (ids_.size() + batch_size_ - 1) / batch_size_;
}

bool BatchStream::next(EncodedBatch& out) {
    if (cursor_ >= ids_.size()) return false;
    const std::size_t n = std::min(batch_size_, ids_.size() - cursor_);
    out.indices.assign(ids_.begin() + cursor_, ids_.begin() + cursor_ + n);
    cursor_ += n;

    const std::size_t M = dataset_.modalities.size();
    out.features.clear();
    out.features.reserve(M);
    out.labels.clear();
    for (std::size_t id : out.indices) out.labels.push_back(dataset_.labels[id]);
    for (std::size_t m = 0; m < M; ++m) {
        const std::size_t per = dataset_.patch_counts[m] * dataset_.modalities[m].channels;
        std::vector<float> block(n * per);
        for (std::size_t b = 0; b < n; ++b) {
            const auto& src = dataset_.features[out.indices[b]][m].values();
            std::copy(src.begin(), src.end(), block.begin() + b * per);
        }
        out.features.emplace_back(Shape{n, dataset_.patch_counts[m], dataset_.modalities[m].channels},
                                  std::move(block));
    }
    return true;
}

}  // namespace mmfuse::data
