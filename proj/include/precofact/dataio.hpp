#pragma once

// On-disk formats. All integers and floats are little-endian; floats are
// IEEE-754 binary32. Every file ends with a CRC-32 (zlib polynomial) of all
// preceding bytes, so any corruption is reported instead of read silently.
//
// PCF1 embedding dataset
//   "PCF1" | u32 version=1 | u32 text_width | u32 image_width
//   | u64 sample_count | u8 labeled | u32 class_count
//   | class_count x (u32 len | bytes)
//   | sample_count x record | u32 crc
//   record = u32 id_len | id bytes | u8 label (0-4, 0xFF when unlabeled)
//            | 4 x (u32 token_count | token_count*width f32)
//            in order claim_image, claim_text, doc_image, doc_text
//
// PCFM checkpoint container
//   "PCFM" | u32 version=1 | u32 config_len | config bytes (JSON)
//   | u32 record_count | record_count x record | u32 crc
//   record = u32 name_len | name bytes | u32 rank | rank x u32 dim | f32 data
//
// PCFP prediction set
//   "PCFP" | u32 version=1 | u32 tag_len | tag bytes | u32 class_count=5
//   | u64 sample_count | sample_count x (u32 id_len | id | 5 x f32) | u32 crc

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "precofact/errors.hpp"
#include "precofact/model.hpp"
#include "precofact/types.hpp"

namespace precofact {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kUnlabeled = 0xFF;
inline constexpr std::uint32_t kMaxNameBytes = 1u << 16;

class NotFoundError : public Error {
public:
    explicit NotFoundError(const std::string& detail) : Error("data-not-found", detail) {}
};

struct DatasetHeader {
    std::uint32_t version = kFormatVersion;
    std::uint32_t text_width = 768;
    std::uint32_t image_width = 768;
    std::uint64_t sample_count = 0;
    bool labeled = true;
    std::vector<std::string> class_names{kClassNames.begin(), kClassNames.end()};

    std::uint32_t width(Source s) const { return is_text(s) ? text_width : image_width; }
};

struct Dataset {
    DatasetHeader header;
    std::vector<SampleEmbeddings> samples;
};

// Streams records one at a time; memory use is bounded by one record.
// The checksum is verified once the last record has been read.
class DatasetReader {
public:
    explicit DatasetReader(const std::filesystem::path& path);
    explicit DatasetReader(std::unique_ptr<std::istream> in, std::string name = "<stream>");
    ~DatasetReader();
    DatasetReader(DatasetReader&&) noexcept;
    DatasetReader& operator=(DatasetReader&&) noexcept;

    const DatasetHeader& header() const;
    // Next record, or nullopt once all declared records have been read.
    std::optional<SampleEmbeddings> next();
    std::uint64_t records_read() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Streaming writer. The header's sample_count is a promise: close() fails
// unless exactly that many records were written.
class DatasetWriter {
public:
    DatasetWriter(const std::filesystem::path& path, DatasetHeader header);
    DatasetWriter(std::ostream& out, DatasetHeader header);
    ~DatasetWriter();

    void write(const SampleEmbeddings& sample);
    void close();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

Dataset read_dataset(const std::filesystem::path& path);
Dataset read_dataset_bytes(const std::string& bytes);
// header.sample_count is taken from samples.size().
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
std::string write_dataset_bytes(const Dataset& dataset);

// Dataset header for `samples` with widths taken from the first sample.
DatasetHeader header_for(const std::vector<SampleEmbeddings>& samples, bool labeled);

struct Checkpoint {
    std::uint32_t version = kFormatVersion;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor<float>>> records;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
std::string encode_checkpoint(const Checkpoint& ckpt);

template <typename T>
struct LoadedModel {
    ModelConfig config;
    ModelParams<T> params;
};

// Model checkpoint: config JSON {"format": "precofact-model", "config": ...,
// "class_names": [...]} plus one record per named parameter.
template <typename T>
Checkpoint model_checkpoint(const ModelParams<T>& params, const ModelConfig& config);
template <typename T>
LoadedModel<T> model_from_checkpoint(const Checkpoint& ckpt);
template <typename T>
void save_model(const std::filesystem::path& path, const ModelParams<T>& params, const ModelConfig& config);
template <typename T>
LoadedModel<T> load_model(const std::filesystem::path& path);

PredictionSet read_predictions(const std::filesystem::path& path);
PredictionSet decode_predictions(const std::string& bytes);
void write_predictions(const std::filesystem::path& path, const PredictionSet& preds);
std::string encode_predictions(const PredictionSet& preds);

struct DatasetStats {
    std::uint64_t samples = 0;
    bool labeled = false;
    std::array<std::uint64_t, kNumClasses> class_counts{};
    struct Lengths {
        std::size_t min = 0;
        double mean = 0.0;
        std::size_t max = 0;
    };
    std::array<Lengths, kNumSources> token_lengths{};
    // Histogram of token counts per source: count -> samples.
    std::array<std::map<std::size_t, std::uint64_t>, kNumSources> length_histogram;
};

DatasetStats dataset_stats(const std::vector<SampleEmbeddings>& samples, bool labeled);
// Streaming variant over a file.
DatasetStats dataset_stats(const std::filesystem::path& path);
nlohmann::json to_json(const DatasetStats& stats);

// Class-conditional Gaussian token clouds: every token of class c, source s
// is mu[c][s] + noise * N(0, I), with mu[c][s] a random direction scaled to
// `separation`. Sample i has class i % 5.
struct SyntheticSpec {
    std::size_t samples_per_class = 4;
    std::size_t text_width = 16;
    std::size_t image_width = 16;
    std::size_t min_tokens = 2;
    std::size_t max_tokens = 4;
    double separation = 5.0;
    double noise = 1.0;
    std::uint64_t seed = 42;
    bool labeled = true;
};

class SyntheticGenerator {
public:
    explicit SyntheticGenerator(const SyntheticSpec& spec);
    std::size_t total() const;
    // nullopt after total() samples.
    std::optional<SampleEmbeddings> next();
    DatasetHeader header() const;

private:
    SyntheticSpec spec_;
    Rng rng_;
    std::size_t produced_ = 0;
    // [class][source] mean vectors
    std::vector<std::array<std::vector<float>, kNumSources>> means_;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

// Token-matching task whose labels need cross-modal evidence. Each token is
// a key (first width - payload_width dims) plus a payload (last
// payload_width dims). The claim image and claim text each hold an anchor
// key. Document tokens carry a payload sign +/-u; a document token repeating
// an anchor key carries the agreement bit:
//   t: claim-text anchor found in document text
//   i: claim-image anchor found in document image
//   x: claim-image anchor found in document text
// Label: x < 0 -> Refute; otherwise (t, i) = (+,+) 0, (+,-) 1, (-,+) 2,
// (-,-) 3. Sample i has class i % 5.
struct AgreementSpec {
    std::size_t samples_per_class = 40;
    std::size_t width = 16;
    std::size_t payload_width = 4;
    std::size_t min_tokens = 3;
    std::size_t max_tokens = 5;
    double key_scale = 3.0;
    double payload_scale = 2.0;
    double noise = 0.05;
    // Keys are drawn from this many fixed directions (anchors distinct,
    // fillers never repeat an anchor); 0 draws a fresh direction per token.
    std::size_t key_vocabulary = 0;
    // Payload direction and key vocabulary; share it between a training
    // set and its held-out set.
    std::uint64_t structure_seed = 1;
    // Sample draws.
    std::uint64_t seed = 7;
};

Dataset generate_agreement_task(const AgreementSpec& spec);

} // namespace precofact
