#pragma once

// Dataset layer: synthetic multi-modal generation, on-disk layout
// (meta.json + per-sample CSV series), the window/pool/align encoding
// pipeline and the train/test split protocols.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse::data {

struct ModalityInfo {
    std::string name;
    std::size_t channels = 0;
    double rate = 0.0;  // Hz
};

struct SampleMeta {
    std::string id;
    int subject = 0;
    int session = 0;
    std::string label;
    std::map<std::string, std::string> files;  // modality -> path relative to the dataset root
};

struct DatasetManifest {
    std::vector<ModalityInfo> modalities;
    std::vector<std::string> classes;
    std::vector<SampleMeta> samples;

    int class_index(const std::string& label) const;
    std::vector<int> subject_ids() const;  // sorted, distinct
};

DatasetManifest load_manifest(const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& root, const DatasetManifest& manifest);

// One raw time series: steps x channels, row-major.
struct ModalityRecord {
    std::string modality_id;
    std::size_t channels = 0;
    double sample_rate = 0.0;
    std::vector<float> series;

    std::size_t steps() const { return channels ? series.size() / channels : 0; }
};

ModalityRecord read_series_csv(const std::filesystem::path& file);
void write_series_csv(const std::filesystem::path& file, const std::vector<float>& series,
                      std::size_t channels);

// ==================== synthetic generation ====================

struct SyntheticModality {
    std::string name;
    std::size_t channels = 6;
    double rate = 32.0;
    double noise_sigma = 0.1;
};

struct SyntheticSpec {
    std::size_t classes = 6;
    std::size_t subjects = 8;
    std::size_t sessions = 2;
    std::size_t trials = 2;
    double duration_seconds = 2.0;
    double subject_bias = 0.3;  // sigma of the persistent per-subject channel offsets
    std::uint64_t seed = 0;
    std::vector<SyntheticModality> modalities;

    void validate() const;  // throws ConfigError naming the bad field
};

// Writes meta.json plus one CSV per sample per modality under out_root.
// Each class is a smooth latent multi-sine prototype; each modality sees
// its own linear projection of it (distinct per modality, so no single
// modality carries the whole class signal); each subject contributes a
// persistent channel offset and a global time scale, which is what makes
// subject-independent splits harder than subject-dependent ones.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_root);

// ==================== encoding ====================

struct PatchMatrix {
    std::size_t patches = 0;
    std::size_t channels = 0;
    std::vector<float> values;  // patches x channels
};

// Non-overlapping windows, channel-wise mean per window; a trailing
// remainder shorter than the window is dropped.
PatchMatrix segment_and_pool(const ModalityRecord& rec, std::size_t window);

// Uniform subsampling down to target_patches, or right-padding by
// repeating the final patch.
PatchMatrix temporal_align(const PatchMatrix& patches, std::size_t target_patches);

// Per-modality settings; 0 means "resolve the default" (window: ~0.5 s of
// samples, target patches: the median patch count over the dataset).
struct EncodingSettings {
    std::map<std::string, std::size_t> window;
    std::map<std::string, std::size_t> target_patches;
};

struct EncodedDataset {
    std::vector<ModalityInfo> modalities;
    std::vector<std::string> classes;
    std::vector<std::size_t> windows;        // resolved, per modality
    std::vector<std::size_t> patch_counts;   // resolved target patches, per modality
    std::vector<std::string> ids;
    std::vector<int> labels;
    std::vector<int> subjects;
    std::vector<int> sessions;
    std::vector<std::vector<Tensor>> features;  // [sample][modality], each [P_m, C_m]

    std::size_t size() const { return labels.size(); }
};

EncodedDataset load_encoded(const std::filesystem::path& root, const DatasetManifest& manifest,
                            const EncodingSettings& settings);

// ==================== split protocols ====================

enum class Protocol { FiftyFifty, Loso, CrossSubject, CrossSession };

Protocol protocol_from_name(const std::string& name);
std::string protocol_name(Protocol p);

struct ProtocolSpec {
    Protocol kind = Protocol::Loso;
    int held_out_subject = 1;     // loso
    double train_fraction = 0.8;  // cross_subject / cross_session
};

struct SplitSpec {
    ProtocolSpec protocol;
    std::vector<std::size_t> train_ids;  // indices into manifest.samples
    std::vector<std::size_t> test_ids;
};

SplitSpec make_split(const DatasetManifest& manifest, const ProtocolSpec& protocol);

// ==================== batching ====================

struct EncodedBatch {
    std::vector<Tensor> features;  // per modality [B, P_m, C_m]
    std::vector<int> labels;
    std::vector<std::size_t> indices;  // dataset indices in batch order
};

// Deterministic batch iteration: the train side reshuffles from a seeded
// generator at every start_epoch(); test iteration keeps dataset order.
class BatchStream {
public:
    BatchStream(const EncodedDataset& dataset, std::vector<std::size_t> ids, std::size_t batch_size,
                std::uint64_t seed, bool shuffle);

    void start_epoch();
    bool next(EncodedBatch& out);
    std::size_t batches_per_epoch() const;

private:
    const EncodedDataset& dataset_;
    std::vector<std::size_t> ids_;
    std::size_t batch_size_;
    bool shuffle_;
    std::mt19937 rng_;
    std::size_t cursor_ = 0;
};

}  // namespace mmfuse::data
