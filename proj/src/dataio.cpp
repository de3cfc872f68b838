#include "precofact/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>

#include <zlib.h>

namespace precofact {

static_assert(std::numeric_limits<float>::is_iec559, "binary32 floats required");

namespace {

constexpr char kDatasetMagic[4] = {'P', 'C', 'F', '1'};
constexpr char kCheckpointMagic[4] = {'P', 'C', 'F', 'M'};
constexpr char kPredictionMagic[4] = {'P', 'C', 'F', 'P'};

std::uint32_t crc_update(std::uint32_t crc, const void* data, std::size_t n) {
    return static_cast<std::uint32_t>(::crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

// Little-endian writer that tracks the running CRC.
class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out, std::string name) : out_(out), name_(std::move(name)) {}

    void bytes(const void* data, std::size_t n) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out_) throw FormatError("io", "write failed: " + name_);
        crc_ = crc_update(crc_, data, n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 8);
    }
    void f32s(std::span<const float> values) {
        std::vector<unsigned char> buf(values.size() * 4);
        for (std::size_t k = 0; k < values.size(); ++k) {
            const auto bits = std::bit_cast<std::uint32_t>(values[k]);
            for (int i = 0; i < 4; ++i) buf[k * 4 + i] = static_cast<unsigned char>(bits >> (8 * i));
        }
        bytes(buf.data(), buf.size());
    }
    void str(const std::string& s) {
        if (s.size() > kMaxNameBytes) throw FormatError("bad-record", "string too long in " + name_);
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void trailer() {
        const std::uint32_t crc = crc_;
        u32(crc);
        out_.flush();
        if (!out_) throw FormatError("io", "write failed: " + name_);
    }

private:
    std::ostream& out_;
    std::string name_;
    std::uint32_t crc_ = crc_update(0, nullptr, 0);
};

// Bounds-checked little-endian reader. Never requests more bytes than the
// stream holds, so corrupted lengths surface as truncation, not allocation.
class ByteReader {
public:
    ByteReader(std::istream& in, std::string name) : in_(in), name_(std::move(name)) {
        const auto start = in_.tellg();
        in_.seekg(0, std::ios::end);
        const auto end = in_.tellg();
        in_.seekg(start);
        if (start < 0 || end < start) throw FormatError("io", "cannot determine size of " + name_);
        remaining_ = static_cast<std::uint64_t>(end - start);
    }

    std::uint64_t remaining() const { return remaining_; }

    // `where` names the truncated structure for the diagnostic.
    void bytes(void* out, std::uint64_t n, const std::string& category, const std::string& where) {
        if (n > remaining_)
            throw FormatError(category, name_ + ": " + where + ": needs " + std::to_string(n) + " bytes, " +
                                            std::to_string(remaining_) + " left");
        in_.read(static_cast<char*>(out), static_cast<std::streamsize>(n));
        if (static_cast<std::uint64_t>(in_.gcount()) != n)
            throw FormatError(category, name_ + ": " + where + ": short read");
        remaining_ -= n;
        crc_ = crc_update(crc_, out, static_cast<std::size_t>(n));
    }
    std::uint8_t u8(const std::string& cat, const std::string& where) {
        std::uint8_t v;
        bytes(&v, 1, cat, where);
        return v;
    }
    std::uint32_t u32(const std::string& cat, const std::string& where) {
        unsigned char b[4];
        bytes(b, 4, cat, where);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const std::string& cat, const std::string& where) {
        unsigned char b[8];
        bytes(b, 8, cat, where);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    // Reads `count` floats; rejects non-finite values.
    std::vector<float> f32s(std::uint64_t count, const std::string& cat, const std::string& where) {
        if (count > remaining_ / 4)
            throw FormatError(cat, name_ + ": " + where + ": needs " + std::to_string(count) + " floats, " +
                                       std::to_string(remaining_) + " bytes left");
        std::vector<unsigned char> buf(count * 4);
        bytes(buf.data(), buf.size(), cat, where);
        std::vector<float> out(count);
        for (std::size_t k = 0; k < count; ++k) {
            std::uint32_t bits = 0;
            for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(buf[k * 4 + i]) << (8 * i);
            out[k] = std::bit_cast<float>(bits);
            if (!std::isfinite(out[k]))
                throw FormatError("non-finite-value", name_ + ": " + where + ": non-finite float");
        }
        return out;
    }
    std::string str(const std::string& cat, const std::string& where) {
        const auto len = u32(cat, where);
        if (len > kMaxNameBytes)
            throw FormatError("bad-record", name_ + ": " + where + ": string length " + std::to_string(len));
        std::string s(len, '\0');
        bytes(s.data(), len, cat, where);
        return s;
    }
    void magic(const char (&expected)[4], const char* format) {
        char m[4];
        bytes(m, 4, "bad-magic", "magic");
        if (std::memcmp(m, expected, 4) != 0)
            throw FormatError("bad-magic", name_ + ": not a " + format + " file");
    }
    void version() {
        const auto v = u32("truncated-header", "version");
        if (v != kFormatVersion)
            throw FormatError("bad-version", name_ + ": unsupported format version " + std::to_string(v));
    }
    // Verifies the CRC trailer and that nothing follows it.
    void finish() {
        const std::uint32_t expected = crc_;
        unsigned char b[4];
        if (remaining_ < 4)
            throw FormatError("truncated-trailer", name_ + ": checksum trailer missing");
        in_.read(reinterpret_cast<char*>(b), 4);
        if (in_.gcount() != 4) throw FormatError("truncated-trailer", name_ + ": short read on checksum");
        remaining_ -= 4;
        std::uint32_t stored = 0;
        for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        if (stored != expected) throw FormatError("checksum", name_ + ": checksum mismatch");
        if (remaining_ != 0)
            throw FormatError("trailing-bytes", name_ + ": " + std::to_string(remaining_) + " bytes after trailer");
    }

private:
    std::istream& in_;
    std::string name_;
    std::uint64_t remaining_ = 0;
    std::uint32_t crc_ = crc_update(0, nullptr, 0);
};

std::unique_ptr<std::ifstream> open_input(const std::filesystem::path& path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) throw NotFoundError("no such file: " + path.string());
    auto in = std::make_unique<std::ifstream>(path, std::ios::binary);
    if (!*in) throw FormatError("io", "cannot open " + path.string());
    return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("io", "cannot open " + path.string() + " for writing");
    return out;
}

void check_sample_for_header(const SampleEmbeddings& sample, const DatasetHeader& header, std::uint64_t index) {
    const std::string where = "sample " + std::to_string(index) + " ('" + sample.id + "')";
    if (header.labeled) {
        if (!sample.label || *sample.label < 0 || *sample.label >= static_cast<int>(kNumClasses))
            throw FormatError("bad-label", where + ": labeled dataset needs a label in 0-4");
    } else if (sample.label) {
        throw FormatError("bad-label", where + ": unlabeled dataset cannot carry labels");
    }
    for (std::size_t s = 0; s < kNumSources; ++s) {
        const auto source = static_cast<Source>(s);
        const auto& t = sample.sources[s];
        if (t.empty() || t.rank() != 2)
            throw FormatError("token-count", where + " " + std::string(kSourceNames[s]) + ": no tokens");
        if (t.cols() != header.width(source))
            throw FormatError("width-mismatch", where + " " + std::string(kSourceNames[s]) + ": width " +
                                                    std::to_string(t.cols()) + ", header declares " +
                                                    std::to_string(header.width(source)));
        if (is_text(source) && t.rows() > kMaxTextTokens)
            throw FormatError("token-count", where + " " + std::string(kSourceNames[s]) + ": " +
                                                 std::to_string(t.rows()) + " tokens exceeds 512");
        if (t.rows() > std::numeric_limits<std::uint32_t>::max())
            throw FormatError("token-count", where + ": too many tokens");
        if (!t.all_finite())
            throw FormatError("non-finite-value", where + " " + std::string(kSourceNames[s]) + ": non-finite value");
    }
}

} // namespace

// ---------------------------------------------------------------- PCF1 read

struct DatasetReader::Impl {
    std::unique_ptr<std::istream> in;
    std::optional<ByteReader> reader;
    DatasetHeader header;
    std::uint64_t read = 0;
    bool finished = false;
};

DatasetReader::DatasetReader(const std::filesystem::path& path) : DatasetReader(open_input(path), path.string()) {}

DatasetReader::DatasetReader(std::unique_ptr<std::istream> in, std::string name) : impl_(std::make_unique<Impl>()) {
    impl_->in = std::move(in);
    impl_->reader.emplace(*impl_->in, std::move(name));
    auto& r = *impl_->reader;
    auto& h = impl_->header;
    r.magic(kDatasetMagic, "PCF1 dataset");
    r.version();
    h.text_width = r.u32("truncated-header", "header");
    h.image_width = r.u32("truncated-header", "header");
    h.sample_count = r.u64("truncated-header", "header");
    const auto labeled = r.u8("truncated-header", "header");
    if (labeled > 1) throw FormatError("bad-header", "label flag must be 0 or 1");
    h.labeled = labeled == 1;
    if (h.text_width == 0 || h.image_width == 0) throw FormatError("bad-header", "embedding widths must be positive");
    const auto classes = r.u32("truncated-header", "class table");
    if (classes != kNumClasses)
        throw FormatError("bad-header", "class table has " + std::to_string(classes) + " entries, expected 5");
    h.class_names.clear();
    for (std::uint32_t c = 0; c < classes; ++c) h.class_names.push_back(r.str("truncated-header", "class table"));
}

DatasetReader::~DatasetReader() = default;
DatasetReader::DatasetReader(DatasetReader&&) noexcept = default;
DatasetReader& DatasetReader::operator=(DatasetReader&&) noexcept = default;

const DatasetHeader& DatasetReader::header() const { return impl_->header; }
std::uint64_t DatasetReader::records_read() const { return impl_->read; }

std::optional<SampleEmbeddings> DatasetReader::next() {
    auto& im = *impl_;
    if (im.finished) return std::nullopt;
    auto& r = *im.reader;
    const auto& h = im.header;
    if (im.read == h.sample_count) {
        r.finish();
        im.finished = true;
        return std::nullopt;
    }
    const std::string where = "sample " + std::to_string(im.read);
    const std::string cat = "truncated-record";

    SampleEmbeddings sample;
    sample.id = r.str(cat, where + " id");
    const auto label = r.u8(cat, where + " label");
    if (h.labeled) {
        if (label >= kNumClasses)
            throw FormatError("bad-label", where + ": label byte " + std::to_string(label) + " outside 0-4");
        sample.label = label;
    } else if (label != kUnlabeled) {
        throw FormatError("bad-label", where + ": unlabeled dataset has label byte " + std::to_string(label));
    }
    for (std::size_t s = 0; s < kNumSources; ++s) {
        const auto source = static_cast<Source>(s);
        const std::string src = where + " " + std::string(kSourceNames[s]);
        const auto count = r.u32(cat, src + " token count");
        if (count == 0) throw FormatError("token-count", src + ": zero tokens");
        if (is_text(source) && count > kMaxTextTokens)
            throw FormatError("token-count", src + ": " + std::to_string(count) + " tokens exceeds 512");
        const std::uint64_t width = h.width(source);
        if (count > r.remaining() / (width * 4))
            throw FormatError(cat, src + ": " + std::to_string(count) + " tokens of width " + std::to_string(width) +
                                       " exceed the " + std::to_string(r.remaining()) + " bytes left");
        auto values = r.f32s(static_cast<std::uint64_t>(count) * width, cat, src);
        sample.sources[s] = Tensor<float>({count, static_cast<std::size_t>(width)}, std::move(values));
    }
    ++im.read;
    return sample;
}

// --------------------------------------------------------------- PCF1 write

struct DatasetWriter::Impl {
    std::ofstream file;
    std::ostream* out = nullptr;
    std::optional<ByteWriter> writer;
    DatasetHeader header;
    std::uint64_t written = 0;
    bool closed = false;
};

namespace {

void write_header(ByteWriter& w, const DatasetHeader& h) {
    if (h.text_width == 0 || h.image_width == 0) throw FormatError("bad-header", "embedding widths must be positive");
    if (h.class_names.size() != kNumClasses) throw FormatError("bad-header", "class table must have 5 entries");
    w.bytes(kDatasetMagic, 4);
    w.u32(h.version);
    w.u32(h.text_width);
    w.u32(h.image_width);
    w.u64(h.sample_count);
    w.u8(h.labeled ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(h.class_names.size()));
    for (const auto& name : h.class_names) w.str(name);
}

} // namespace

DatasetWriter::DatasetWriter(const std::filesystem::path& path, DatasetHeader header)
    : impl_(std::make_unique<Impl>()) {
    impl_->file = open_output(path);
    impl_->out = &impl_->file;
    impl_->header = std::move(header);
    impl_->writer.emplace(*impl_->out, path.string());
    write_header(*impl_->writer, impl_->header);
}

DatasetWriter::DatasetWriter(std::ostream& out, DatasetHeader header) : impl_(std::make_unique<Impl>()) {
    impl_->out = &out;
    impl_->header = std::move(header);
    impl_->writer.emplace(out, "<stream>");
    write_header(*impl_->writer, impl_->header);
}

DatasetWriter::~DatasetWriter() = default;

void DatasetWriter::write(const SampleEmbeddings& sample) {
    auto& im = *impl_;
    if (im.closed) throw ContractError("write after close");
    if (im.written == im.header.sample_count)
        throw FormatError("bad-header", "more records than the declared " + std::to_string(im.header.sample_count));
    check_sample_for_header(sample, im.header, im.written);
    auto& w = *im.writer;
    w.str(sample.id);
    w.u8(sample.label ? static_cast<std::uint8_t>(*sample.label) : kUnlabeled);
    for (const auto& t : sample.sources) {
        w.u32(static_cast<std::uint32_t>(t.rows()));
        w.f32s(t.data());
    }
    ++im.written;
}

void DatasetWriter::close() {
    auto& im = *impl_;
    if (im.closed) return;
    if (im.written != im.header.sample_count)
        throw FormatError("bad-header", "wrote " + std::to_string(im.written) + " records, header declares " +
                                            std::to_string(im.header.sample_count));
    im.writer->trailer();
    im.closed = true;
    if (im.file.is_open()) im.file.close();
}

DatasetHeader header_for(const std::vector<SampleEmbeddings>& samples, bool labeled) {
    DatasetHeader h;
    h.labeled = labeled;
    h.sample_count = samples.size();
    if (!samples.empty()) {
        h.text_width = static_cast<std::uint32_t>(samples.front()[Source::claim_text].cols());
        h.image_width = static_cast<std::uint32_t>(samples.front()[Source::claim_image].cols());
    }
    return h;
}

namespace {

Dataset read_all(DatasetReader& reader) {
    Dataset ds;
    ds.header = reader.header();
    while (auto s = reader.next()) ds.samples.push_back(std::move(*s));
    return ds;
}

void write_all(DatasetWriter& writer, const Dataset& dataset) {
    for (const auto& s : dataset.samples) writer.write(s);
    writer.close();
}

DatasetHeader counted(const Dataset& dataset) {
    auto h = dataset.header;
    h.sample_count = dataset.samples.size();
    return h;
}

} // namespace

Dataset read_dataset(const std::filesystem::path& path) {
    DatasetReader reader(path);
    return read_all(reader);
}

Dataset read_dataset_bytes(const std::string& bytes) {
    DatasetReader reader(std::make_unique<std::istringstream>(bytes), "<bytes>");
    return read_all(reader);
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
    DatasetWriter writer(path, counted(dataset));
    write_all(writer, dataset);
}

std::string write_dataset_bytes(const Dataset& dataset) {
    std::ostringstream os;
    DatasetWriter writer(os, counted(dataset));
    write_all(writer, dataset);
    return os.str();
}

// --------------------------------------------------------------- checkpoint

namespace {

void encode_checkpoint_to(std::ostream& out, const std::string& name, const Checkpoint& ckpt) {
    ByteWriter w(out, name);
    w.bytes(kCheckpointMagic, 4);
    w.u32(ckpt.version);
    if (ckpt.config_text.size() > std::numeric_limits<std::uint32_t>::max())
        throw FormatError("bad-header", "config block too large");
    w.u32(static_cast<std::uint32_t>(ckpt.config_text.size()));
    w.bytes(ckpt.config_text.data(), ckpt.config_text.size());
    w.u32(static_cast<std::uint32_t>(ckpt.records.size()));
    for (const auto& [rec_name, t] : ckpt.records) {
        w.str(rec_name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
        w.f32s(t.data());
    }
    w.trailer();
}

Checkpoint decode_checkpoint_from(std::istream& in, const std::string& name) {
    ByteReader r(in, name);
    r.magic(kCheckpointMagic, "PCFM checkpoint");
    r.version();
    Checkpoint ckpt;
    const auto config_len = r.u32("truncated-header", "config block");
    ckpt.config_text.resize(std::min<std::uint64_t>(config_len, r.remaining()));
    if (config_len > r.remaining())
        throw FormatError("truncated-header", name + ": config block of " + std::to_string(config_len) +
                                                  " bytes exceeds file");
    r.bytes(ckpt.config_text.data(), config_len, "truncated-header", "config block");
    const auto count = r.u32("truncated-header", "record count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string where = "record " + std::to_string(i);
        auto rec_name = r.str("truncated-record", where + " name");
        const auto rank = r.u32("truncated-record", where + " rank");
        if (rank != 1 && rank != 2)
            throw FormatError("bad-record", name + ": " + where + ": rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t volume = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto dim = r.u32("truncated-record", where + " dims");
            if (dim == 0) throw FormatError("bad-record", name + ": " + where + ": zero dimension");
            shape.push_back(dim);
            volume *= dim;
        }
        auto values = r.f32s(volume, "truncated-record", where + " ('" + rec_name + "')");
        ckpt.records.emplace_back(std::move(rec_name), Tensor<float>(std::move(shape), std::move(values)));
    }
    r.finish();
    return ckpt;
}

} // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
    std::ostringstream os;
    encode_checkpoint_to(os, "<bytes>", ckpt);
    return os.str();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    std::istringstream is(bytes);
    return decode_checkpoint_from(is, "<bytes>");
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    auto out = open_output(path);
    encode_checkpoint_to(out, path.string(), ckpt);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    auto in = open_input(path);
    return decode_checkpoint_from(*in, path.string());
}

template <typename T>
Checkpoint model_checkpoint(const ModelParams<T>& params, const ModelConfig& config) {
    Checkpoint ckpt;
    nlohmann::json meta{{"format", "precofact-model"}, {"config", config}, {"class_names", kClassNames}};
    ckpt.config_text = meta.dump();
    for (const auto& p : params.named()) ckpt.records.emplace_back(p.name, p.var.value().template cast<float>());
    return ckpt;
}

template <typename T>
LoadedModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(ckpt.config_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad-config", std::string("checkpoint config block is not valid JSON: ") + e.what());
    }
    if (!meta.is_object() || meta.value("format", "") != "precofact-model" || !meta.contains("config"))
        throw FormatError("bad-config", "checkpoint does not hold a precofact model");
    ModelConfig config;
    try {
        config = meta.at("config").get<ModelConfig>();
        config.validate();
    } catch (const Error& e) {
        throw FormatError("bad-config", std::string("checkpoint model config: ") + e.what());
    }
    auto params = init_params<T>(config, 0);
    auto named = params.named();
    if (named.size() != ckpt.records.size())
        throw FormatError("bad-record", "checkpoint has " + std::to_string(ckpt.records.size()) +
                                            " parameter records, config implies " + std::to_string(named.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [name, t] = ckpt.records[i];
        if (name != named[i].name)
            throw FormatError("bad-record", "record " + std::to_string(i) + " is '" + name + "', expected '" +
                                                named[i].name + "'");
        if (t.shape() != named[i].var.shape())
            throw FormatError("bad-record", "record '" + name + "' has shape " + shape_string(t.shape()) +
                                                ", expected " + shape_string(named[i].var.shape()));
        named[i].var.mutable_value() = t.template cast<T>();
    }
    return {config, std::move(params)};
}

template <typename T>
void save_model(const std::filesystem::path& path, const ModelParams<T>& params, const ModelConfig& config) {
    write_checkpoint(path, model_checkpoint(params, config));
}

template <typename T>
LoadedModel<T> load_model(const std::filesystem::path& path) {
    return model_from_checkpoint<T>(read_checkpoint(path));
}

template Checkpoint model_checkpoint<float>(const ModelParams<float>&, const ModelConfig&);
template Checkpoint model_checkpoint<double>(const ModelParams<double>&, const ModelConfig&);
template LoadedModel<float> model_from_checkpoint<float>(const Checkpoint&);
template LoadedModel<double> model_from_checkpoint<double>(const Checkpoint&);
template void save_model<float>(const std::filesystem::path&, const ModelParams<float>&, const ModelConfig&);
template void save_model<double>(const std::filesystem::path&, const ModelParams<double>&, const ModelConfig&);
template LoadedModel<float> load_model<float>(const std::filesystem::path&);
template LoadedModel<double> load_model<double>(const std::filesystem::path&);

// -------------------------------------------------------------- predictions

namespace {

void encode_predictions_to(std::ostream& out, const std::string& name, const PredictionSet& preds) {
    if (preds.scores.size() != preds.sample_ids.size())
        throw ContractError("prediction set has " + std::to_string(preds.sample_ids.size()) + " ids and " +
                            std::to_string(preds.scores.size()) + " score rows");
    ByteWriter w(out, name);
    w.bytes(kPredictionMagic, 4);
    w.u32(kFormatVersion);
    w.str(preds.model_tag);
    w.u32(static_cast<std::uint32_t>(kNumClasses));
    w.u64(preds.sample_ids.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        w.str(preds.sample_ids[i]);
        std::array<float, kNumClasses> row{};
        for (std::size_t c = 0; c < kNumClasses; ++c) row[c] = static_cast<float>(preds.scores[i][c]);
        w.f32s(row);
    }
    w.trailer();
}

PredictionSet decode_predictions_from(std::istream& in, const std::string& name) {
    ByteReader r(in, name);
    r.magic(kPredictionMagic, "PCFP prediction");
    r.version();
    PredictionSet preds;
    preds.model_tag = r.str("truncated-header", "model tag");
    const auto classes = r.u32("truncated-header", "class count");
    if (classes != kNumClasses)
        throw FormatError("bad-header", name + ": class count " + std::to_string(classes) + ", expected 5");
    const auto count = r.u64("truncated-header", "sample count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string where = "sample " + std::to_string(i);
        preds.sample_ids.push_back(r.str("truncated-record", where + " id"));
        const auto values = r.f32s(kNumClasses, "truncated-record", where + " scores");
        std::array<double, kNumClasses> row{};
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            if (values[c] < 0.0f) throw FormatError("bad-record", name + ": " + where + ": negative score");
            row[c] = values[c];
        }
        preds.scores.push_back(row);
    }
    r.finish();
    return preds;
}

} // namespace

std::string encode_predictions(const PredictionSet& preds) {
    std::ostringstream os;
    encode_predictions_to(os, "<bytes>", preds);
    return os.str();
}

PredictionSet decode_predictions(const std::string& bytes) {
    std::istringstream is(bytes);
    return decode_predictions_from(is, "<bytes>");
}

void write_predictions(const std::filesystem::path& path, const PredictionSet& preds) {
    auto out = open_output(path);
    encode_predictions_to(out, path.string(), preds);
}

PredictionSet read_predictions(const std::filesystem::path& path) {
    auto in = open_input(path);
    return decode_predictions_from(*in, path.string());
}

// -------------------------------------------------------------------- stats

namespace {

class StatsAccumulator {
public:
    explicit StatsAccumulator(bool labeled) { stats_.labeled = labeled; }

    void add(const SampleEmbeddings& s) {
        ++stats_.samples;
        if (stats_.labeled && s.label) ++stats_.class_counts[*s.label];
        for (std::size_t k = 0; k < kNumSources; ++k) {
            const std::size_t n = s.sources[k].rows();
            auto& l = stats_.token_lengths[k];
            l.min = stats_.samples == 1 ? n : std::min(l.min, n);
            l.max = std::max(l.max, n);
            sums_[k] += static_cast<double>(n);
            ++stats_.length_histogram[k][n];
        }
    }

    DatasetStats finish() {
        for (std::size_t k = 0; k < kNumSources; ++k)
            stats_.token_lengths[k].mean = stats_.samples ? sums_[k] / static_cast<double>(stats_.samples) : 0.0;
        return stats_;
    }

private:
    DatasetStats stats_;
    std::array<double, kNumSources> sums_{};
};

} // namespace

DatasetStats dataset_stats(const std::vector<SampleEmbeddings>& samples, bool labeled) {
    StatsAccumulator acc(labeled);
    for (const auto& s : samples) acc.add(s);
    return acc.finish();
}

DatasetStats dataset_stats(const std::filesystem::path& path) {
    DatasetReader reader(path);
    StatsAccumulator acc(reader.header().labeled);
    while (auto s = reader.next()) acc.add(*s);
    return acc.finish();
}

nlohmann::json to_json(const DatasetStats& stats) {
    nlohmann::json j;
    j["samples"] = stats.samples;
    if (stats.labeled) {
        nlohmann::json counts = nlohmann::json::object();
        for (std::size_t c = 0; c < kNumClasses; ++c) counts[std::string(kClassNames[c])] = stats.class_counts[c];
        j["class_counts"] = counts;
    } else {
        j["class_counts"] = nullptr;
    }
    nlohmann::json lengths = nlohmann::json::object();
    for (std::size_t k = 0; k < kNumSources; ++k) {
        nlohmann::json hist = nlohmann::json::object();
        for (const auto& [n, c] : stats.length_histogram[k]) hist[std::to_string(n)] = c;
        lengths[std::string(kSourceNames[k])] = {{"min", stats.token_lengths[k].min},
                                                 {"mean", stats.token_lengths[k].mean},
                                                 {"max", stats.token_lengths[k].max},
                                                 {"histogram", hist}};
    }
    j["token_lengths"] = lengths;
    return j;
}

// ---------------------------------------------------------------- synthetic

namespace {

std::vector<float> random_direction(std::size_t width, double scale, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(width);
    double norm = 0.0;
    for (auto& x : v) {
        x = normal(rng);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    std::vector<float> out(width);
    for (std::size_t i = 0; i < width; ++i) out[i] = static_cast<float>(norm > 0.0 ? scale * v[i] / norm : 0.0);
    return out;
}

std::string sample_id(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, i);
    return buf;
}

} // namespace

SyntheticGenerator::SyntheticGenerator(const SyntheticSpec& spec) : spec_(spec), rng_(spec.seed) {
    if (spec_.samples_per_class == 0 || spec_.text_width == 0 || spec_.image_width == 0 || spec_.min_tokens == 0 ||
        spec_.max_tokens < spec_.min_tokens)
        throw ContractError("synthetic spec needs positive counts, widths and min_tokens <= max_tokens");
    if (spec_.max_tokens > kMaxTextTokens) throw ContractError("synthetic token count exceeds 512");
    means_.resize(kNumClasses);
    for (auto& per_class : means_)
        for (std::size_t s = 0; s < kNumSources; ++s) {
            const auto width = is_text(static_cast<Source>(s)) ? spec_.text_width : spec_.image_width;
            per_class[s] = random_direction(width, spec_.separation, rng_);
        }
}

std::size_t SyntheticGenerator::total() const { return spec_.samples_per_class * kNumClasses; }

DatasetHeader SyntheticGenerator::header() const {
    DatasetHeader h;
    h.text_width = static_cast<std::uint32_t>(spec_.text_width);
    h.image_width = static_cast<std::uint32_t>(spec_.image_width);
    h.sample_count = total();
    h.labeled = spec_.labeled;
    return h;
}

std::optional<SampleEmbeddings> SyntheticGenerator::next() {
    if (produced_ == total()) return std::nullopt;
    const std::size_t i = produced_++;
    const int label = static_cast<int>(i % kNumClasses);
    std::uniform_int_distribution<std::size_t> tokens(spec_.min_tokens, spec_.max_tokens);
    std::normal_distribution<double> normal(0.0, 1.0);
    SampleEmbeddings sample;
    sample.id = sample_id("syn", i);
    if (spec_.labeled) sample.label = label;
    for (std::size_t s = 0; s < kNumSources; ++s) {
        const auto& mean = means_[label][s];
        const std::size_t n = tokens(rng_);
        Tensor<float> t({n, mean.size()});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < mean.size(); ++c)
                t.at(r, c) = mean[c] + static_cast<float>(spec_.noise * normal(rng_));
        sample.sources[s] = std::move(t);
    }
    return sample;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    SyntheticGenerator gen(spec);
    Dataset ds;
    ds.header = gen.header();
    ds.samples.reserve(gen.total());
    while (auto s = gen.next()) ds.samples.push_back(std::move(*s));
    return ds;
}

Dataset generate_agreement_task(const AgreementSpec& spec) {
    if (spec.samples_per_class == 0 || spec.payload_width == 0 || spec.width <= spec.payload_width ||
        spec.min_tokens < 3 || spec.max_tokens < spec.min_tokens || spec.max_tokens > kMaxTextTokens ||
        spec.key_vocabulary == 1 || spec.key_vocabulary == 2)
        throw ContractError(
            "agreement spec needs width > payload_width, 3 <= min_tokens <= max_tokens and no 1- or 2-key vocabulary");
    Rng structure_rng(spec.structure_seed);
    Rng rng(spec.seed);
    const std::size_t key_width = spec.width - spec.payload_width;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> token_count(spec.min_tokens, spec.max_tokens);
    std::bernoulli_distribution coin(0.5);
    const auto payload = random_direction(spec.payload_width, spec.payload_scale, structure_rng);

    std::vector<std::vector<float>> vocabulary;
    for (std::size_t v = 0; v < spec.key_vocabulary; ++v)
        vocabulary.push_back(random_direction(key_width, spec.key_scale, structure_rng));
    std::uniform_int_distribution<std::size_t> pick(0, spec.key_vocabulary ? spec.key_vocabulary - 1 : 0);
    // A fresh key, or a vocabulary key other than the excluded ones.
    auto key = [&](std::initializer_list<const std::vector<float>*> exclude = {}) {
        if (vocabulary.empty()) return random_direction(key_width, spec.key_scale, rng);
        for (;;) {
            const auto& k = vocabulary[pick(rng)];
            if (std::none_of(exclude.begin(), exclude.end(), [&](const auto* e) { return *e == k; })) return k;
        }
    };
    auto make_token = [&](const std::vector<float>& k, int sign) {
        std::vector<float> tok(spec.width);
        for (std::size_t c = 0; c < key_width; ++c) tok[c] = k[c];
        for (std::size_t c = 0; c < spec.payload_width; ++c) tok[key_width + c] = static_cast<float>(sign) * payload[c];
        for (auto& v : tok) v += static_cast<float>(spec.noise * normal(rng));
        return tok;
    };
    auto to_tensor = [&](std::vector<std::vector<float>> rows) {
        std::shuffle(rows.begin(), rows.end(), rng);
        std::vector<float> data;
        for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
        return Tensor<float>({rows.size(), spec.width}, std::move(data));
    };
    auto random_sign = [&] { return coin(rng) ? 1 : -1; };

    Dataset ds;
    ds.header.text_width = static_cast<std::uint32_t>(spec.width);
    ds.header.image_width = static_cast<std::uint32_t>(spec.width);
    ds.header.labeled = true;
    const std::size_t total = spec.samples_per_class * kNumClasses;
    for (std::size_t i = 0; i < total; ++i) {
        const int label = static_cast<int>(i % kNumClasses);
        int t, img, x;
        if (label == 4) {
            x = -1;
            t = random_sign();
            img = random_sign();
        } else {
            x = 1;
            t = (label == 0 || label == 1) ? 1 : -1;
            img = (label == 0 || label == 2) ? 1 : -1;
        }
        const auto ci_anchor = key();
        const auto ct_anchor = key({&ci_anchor});

        std::vector<std::vector<float>> ci{make_token(ci_anchor, 0)}, ct{make_token(ct_anchor, 0)};
        std::vector<std::vector<float>> di{make_token(ci_anchor, img)};
        std::vector<std::vector<float>> dt{make_token(ct_anchor, t), make_token(ci_anchor, x)};
        const std::size_t n_ci = token_count(rng), n_ct = token_count(rng), n_di = token_count(rng),
                          n_dt = token_count(rng);
        while (ci.size() < n_ci) ci.push_back(make_token(key({&ci_anchor, &ct_anchor}), 0));
        while (ct.size() < n_ct) ct.push_back(make_token(key({&ci_anchor, &ct_anchor}), 0));
        while (di.size() < n_di) di.push_back(make_token(key({&ci_anchor, &ct_anchor}), random_sign()));
        while (dt.size() < n_dt) dt.push_back(make_token(key({&ci_anchor, &ct_anchor}), random_sign()));

        SampleEmbeddings s;
        s.id = sample_id("agr", i);
        s.label = label;
        s[Source::claim_image] = to_tensor(std::move(ci));
        s[Source::claim_text] = to_tensor(std::move(ct));
        s[Source::doc_image] = to_tensor(std::move(di));
        s[Source::doc_text] = to_tensor(std::move(dt));
        ds.samples.push_back(std::move(s));
    }
    ds.header.sample_count = ds.samples.size();
    return ds;
}

} // namespace precofact
