#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <fstream>
#include <sstream>

#include "precofact/dataio.hpp"
#include "precofact/errors.hpp"
#include "precofact/metrics.hpp"
#include "precofact/training.hpp"
#include "support/support.hpp"

using namespace precofact;
using testing::TempDir;

namespace {

SyntheticSpec small_spec(std::uint64_t seed = 42) {
    SyntheticSpec s;
    s.samples_per_class = 3;
    s.text_width = 6;
    s.image_width = 5;
    s.min_tokens = 1;
    s.max_tokens = 3;
    s.seed = seed;
    return s;
}

bool samples_equal(const SampleEmbeddings& a, const SampleEmbeddings& b) {
    if (a.id != b.id || a.label != b.label) return false;
    for (std::size_t k = 0; k < kNumSources; ++k)
        if (!(a.sources[k] == b.sources[k])) return false;
    return true;
}

// Little-endian builder for hand-crafted PCF1 bytes. No trailer: every
// defect below is detected before the checksum would be read.
struct Bytes {
    std::string s;
    Bytes& raw(const std::string& v) {
        s += v;
        return *this;
    }
    Bytes& u8(std::uint8_t v) {
        s.push_back(static_cast<char>(v));
        return *this;
    }
    Bytes& u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        return *this;
    }
    Bytes& u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        return *this;
    }
    Bytes& f32(float v) {
        std::uint32_t b;
        std::memcpy(&b, &v, 4);
        return u32(b);
    }
    Bytes& str(const std::string& v) { return u32(static_cast<std::uint32_t>(v.size())).raw(v); }
    Bytes& header(std::uint32_t text_width, std::uint32_t image_width, std::uint64_t count) {
        raw("PCF1").u32(1).u32(text_width).u32(image_width).u64(count).u8(1).u32(5);
        for (auto name : kClassNames) str(std::string(name));
        return *this;
    }
    Bytes& tokens(std::uint32_t count, std::uint32_t width, float value = 0.5f) {
        u32(count);
        for (std::uint32_t i = 0; i < count * width; ++i) f32(value);
        return *this;
    }
};

std::string category_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.category();
    }
    return "";
}

std::string message_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

std::size_t rss_kib() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line))
        if (line.rfind("VmRSS:", 0) == 0) return std::stoul(line.substr(6));
    return 0;
}

} // namespace

TEST_SUITE("pcf1") {
    TEST_CASE("round trip is structural and byte-identical") {
        TempDir dir("pcf1");
        const auto ds = generate_synthetic(small_spec());
        write_dataset(dir / "a.pcf1", ds);
        const auto back = read_dataset(dir / "a.pcf1");
        CHECK(back.header.text_width == 6);
        CHECK(back.header.image_width == 5);
        CHECK(back.header.sample_count == 15);
        CHECK(back.header.class_names == ds.header.class_names);
        REQUIRE(back.samples.size() == ds.samples.size());
        for (std::size_t i = 0; i < ds.samples.size(); ++i) CHECK(samples_equal(back.samples[i], ds.samples[i]));
        write_dataset(dir / "b.pcf1", back);
        CHECK(testing::read_bytes(dir / "a.pcf1") == testing::read_bytes(dir / "b.pcf1"));
        CHECK(write_dataset_bytes(back) == testing::read_bytes(dir / "a.pcf1"));
    }

    TEST_CASE("layout of a hand-built file") {
        Dataset ds;
        ds.header.text_width = 1;
        ds.header.image_width = 2;
        SampleEmbeddings s;
        s.id = "x";
        s.label = 3;
        s[Source::claim_image] = Tensor<float>::matrix(1, 2, {1.0f, 2.0f});
        s[Source::claim_text] = Tensor<float>::matrix(2, 1, {3.0f, 4.0f});
        s[Source::doc_image] = Tensor<float>::matrix(1, 2, {5.0f, 6.0f});
        s[Source::doc_text] = Tensor<float>::matrix(1, 1, {7.0f});
        ds.samples.push_back(s);
        Bytes expected;
        expected.header(1, 2, 1).str("x").u8(3);
        expected.u32(1).f32(1).f32(2).u32(2).f32(3).f32(4).u32(1).f32(5).f32(6).u32(1).f32(7);
        const auto bytes = write_dataset_bytes(ds);
        REQUIRE(bytes.size() == expected.s.size() + 4);
        CHECK(bytes.substr(0, expected.s.size()) == expected.s);
    }

    TEST_CASE("empty dataset is header only") {
        Dataset ds;
        ds.header.text_width = 4;
        ds.header.image_width = 4;
        const auto bytes = write_dataset_bytes(ds);
        const auto back = read_dataset_bytes(bytes);
        CHECK(back.samples.empty());
        CHECK(back.header.sample_count == 0);
        CHECK(write_dataset_bytes(back) == bytes);
    }

    TEST_CASE("truncation names the sample index") {
        const auto ds = generate_synthetic(small_spec());
        const auto bytes = write_dataset_bytes(ds);
        Dataset first;
        first.header = ds.header;
        first.samples.assign(ds.samples.begin(), ds.samples.begin() + 7);
        // The first 7 records end at the same offset in both files.
        const auto prefix = write_dataset_bytes(first).size() - 4;
        const auto cut = bytes.substr(0, prefix + 10);
        try {
            read_dataset_bytes(cut);
            FAIL("expected truncation");
        } catch (const FormatError& e) {
            CHECK(e.category() == "truncated-record");
            CHECK(std::string(e.what()).find("sample 7") != std::string::npos);
        }
        CHECK(category_of([&] { read_dataset_bytes(bytes.substr(0, bytes.size() - 2)); }) == "truncated-trailer");
        CHECK(category_of([&] { read_dataset_bytes(bytes.substr(0, 10)); }) == "truncated-header");
    }

    TEST_CASE("distinct diagnostics") {
        CHECK(category_of([] { read_dataset_bytes("PCF2" + std::string(40, '\0')); }) == "bad-magic");
        CHECK(category_of([] {
                  Bytes b;
                  b.raw("PCF1").u32(9).u32(1).u32(1).u64(0).u8(1).u32(5);
                  read_dataset_bytes(b.s);
              }) == "bad-version");
        CHECK(category_of([] {
                  Bytes b;
                  b.header(1, 1, 1).str("x").u8(0).tokens(0, 1);
                  read_dataset_bytes(b.s);
              }) == "token-count");
        const auto too_many = message_of([] {
            Bytes b;
            b.header(1, 1, 1).str("x").u8(0).tokens(1, 1).tokens(513, 1);
            read_dataset_bytes(b.s);
        });
        CHECK(too_many.find("claim_text") != std::string::npos);
        CHECK(too_many.find("513") != std::string::npos);
        CHECK(category_of([] {
                  Bytes b;
                  b.header(1, 1, 1).str("x").u8(0).tokens(1, 1).tokens(513, 1);
                  read_dataset_bytes(b.s);
              }) == "token-count");
        CHECK(category_of([] {
                  Bytes b;
                  b.header(1, 1, 1).str("x").u8(9);
                  read_dataset_bytes(b.s);
              }) == "bad-label");
        CHECK(category_of([] {
                  Bytes b;
                  b.header(1, 1, 1).str("x").u8(0).tokens(1, 1, std::numeric_limits<float>::infinity());
                  read_dataset_bytes(b.s);
              }) == "non-finite-value");
        // Image sequences may exceed 512 tokens.
        CHECK(category_of([] {
                  Bytes b;
                  b.header(1, 1, 1).str("x").u8(0).tokens(600, 1).tokens(1, 1).tokens(1, 1).tokens(1, 1);
                  read_dataset_bytes(b.s);
              }) == "truncated-trailer");
    }

    TEST_CASE("checksum and trailing bytes") {
        const auto bytes = write_dataset_bytes(generate_synthetic(small_spec()));
        auto flipped = bytes;
        flipped[bytes.size() - 20] ^= 0x01;
        CHECK(category_of([&] { read_dataset_bytes(flipped); }) == "checksum");
        CHECK(category_of([&] { read_dataset_bytes(bytes + "x"); }) == "trailing-bytes");
    }

    TEST_CASE("writer validation") {
        TempDir dir("writer");
        auto ds = generate_synthetic(small_spec());
        auto bad = ds;
        bad.samples[2][Source::doc_text] = Tensor<float>({2, 7});
        CHECK(category_of([&] { write_dataset_bytes(bad); }) == "width-mismatch");
        bad = ds;
        bad.samples[1][Source::claim_text] = Tensor<float>({513, 6});
        CHECK(category_of([&] { write_dataset_bytes(bad); }) == "token-count");
        bad = ds;
        bad.samples[0].label.reset();
        CHECK(category_of([&] { write_dataset_bytes(bad); }) == "bad-label");

        auto header = ds.header;
        header.sample_count = 3;
        DatasetWriter w(dir / "short.pcf1", header);
        w.write(ds.samples[0]);
        CHECK_THROWS_AS(w.close(), FormatError);
    }

    TEST_CASE("missing file is data-not-found") {
        CHECK(category_of([] { read_dataset("/nonexistent/precofact.pcf1"); }) == "data-not-found");
    }

    TEST_CASE("unlabeled files load without labels and are rejected by training") {
        auto spec = small_spec();
        spec.labeled = false;
        const auto ds = read_dataset_bytes(write_dataset_bytes(generate_synthetic(spec)));
        CHECK_FALSE(ds.header.labeled);
        for (const auto& s : ds.samples) CHECK_FALSE(s.label.has_value());
        const auto stats = dataset_stats(ds.samples, ds.header.labeled);
        CHECK(to_json(stats).at("class_counts").is_null());
        auto c = testing::toy_config();
        TrainConfig t;
        t.epochs = 1;
        CHECK_THROWS_AS(train<float>(ds.samples, {}, c, t), InvalidInputError);
    }

    TEST_CASE("35000 records stream in bounded memory") {
        TempDir dir("stream");
        SyntheticSpec spec;
        spec.samples_per_class = 7000;
        spec.text_width = 64;
        spec.image_width = 64;
        spec.min_tokens = 2;
        spec.max_tokens = 2;
        SyntheticGenerator gen(spec);
        {
            DatasetWriter w(dir / "big.pcf1", gen.header());
            while (auto s = gen.next()) w.write(*s);
            w.close();
        }
        const auto file_kib = std::filesystem::file_size(dir / "big.pcf1") / 1024;
        REQUIRE(file_kib > 30000);
        const auto before = rss_kib();
        DatasetReader reader(dir / "big.pcf1");
        std::size_t n = 0, peak = before;
        while (auto s = reader.next()) {
            ++n;
            if (n % 1000 == 0) peak = std::max(peak, rss_kib());
        }
        CHECK(n == 35000);
        CHECK(reader.records_read() == 35000);
        MESSAGE("file " << file_kib << " KiB, rss growth " << (peak - before) << " KiB");
        CHECK(peak - before < file_kib / 10);
        const auto stats = dataset_stats(dir / "big.pcf1");
        for (auto count : stats.class_counts) CHECK(count == 7000);
    }
}

TEST_SUITE("synthetic") {
    TEST_CASE("counts and class balance") {
        auto spec = small_spec();
        spec.samples_per_class = 4;
        const auto ds = generate_synthetic(spec);
        CHECK(ds.samples.size() == 20);
        const auto stats = dataset_stats(ds.samples, true);
        for (auto c : stats.class_counts) CHECK(c == 4);
        spec.samples_per_class = 100;
        const auto big = dataset_stats(generate_synthetic(spec).samples, true);
        for (auto c : big.class_counts) CHECK(c == 100);
        CHECK(big.samples == 500);
        const auto j = to_json(big);
        CHECK(j.at("class_counts").size() == kNumClasses);
    }

    TEST_CASE("token lengths stay in range") {
        const auto ds = generate_synthetic(small_spec());
        const auto stats = dataset_stats(ds.samples, true);
        for (const auto& l : stats.token_lengths) {
            CHECK(l.min >= 1);
            CHECK(l.max <= 3);
            CHECK(l.mean >= l.min);
            CHECK(l.mean <= l.max);
        }
    }

    TEST_CASE("same seed gives a byte-identical file") {
        const auto a = write_dataset_bytes(generate_synthetic(small_spec(3)));
        const auto b = write_dataset_bytes(generate_synthetic(small_spec(3)));
        const auto c = write_dataset_bytes(generate_synthetic(small_spec(4)));
        CHECK(a == b);
        CHECK(a != c);
    }

    TEST_CASE("streaming generator matches the batch generator") {
        SyntheticGenerator g(small_spec());
        const auto batch = generate_synthetic(small_spec());
        std::size_t i = 0;
        while (auto s = g.next()) CHECK(samples_equal(*s, batch.samples[i++]));
        CHECK(i == g.total());
    }

    TEST_CASE("without separation a classifier stays near chance") {
        auto spec = small_spec(11);
        spec.samples_per_class = 40;
        spec.separation = 0.0;
        const auto train_set = generate_synthetic(spec);
        spec.seed = 12;
        const auto held_out = generate_synthetic(spec);
        auto c = testing::toy_config();
        TrainConfig t;
        t.epochs = 20;
        t.batch_size = 8;
        t.learning_rate = 1e-2;
        const auto r = train<float>(train_set.samples, {}, c, t);
        const auto preds = predict<float>(held_out.samples, r.params, c, "m", 1);
        std::vector<int> labels;
        for (const auto& s : held_out.samples) labels.push_back(*s.label);
        const auto acc = evaluate(argmax_predict(preds.scores), labels).accuracy;
        MESSAGE("held-out accuracy " << acc);
        // 200 samples: chance is 0.2 with standard deviation about 0.03.
        CHECK(acc < 0.32);
    }

    TEST_CASE("agreement task labels follow the anchor signs") {
        AgreementSpec spec;
        spec.samples_per_class = 20;
        const auto ds = generate_agreement_task(spec);
        CHECK(ds.samples.size() == 100);
        const auto stats = dataset_stats(ds.samples, true);
        for (auto c : stats.class_counts) CHECK(c == 20);
        CHECK(write_dataset_bytes(ds) == write_dataset_bytes(generate_agreement_task(spec)));

        const std::size_t key_width = spec.width - spec.payload_width;
        auto key_distance = [&](const Tensor<float>& a, std::size_t i, const Tensor<float>& b, std::size_t j) {
            double d = 0.0;
            for (std::size_t c = 0; c < key_width; ++c) d += std::pow(a.at(i, c) - b.at(j, c), 2);
            return d;
        };
        // Payload of the document token whose key is closest to any query token.
        auto matched_payload = [&](const Tensor<float>& query, const Tensor<float>& doc) {
            std::size_t best_j = 0;
            double best = 1e300;
            for (std::size_t i = 0; i < query.rows(); ++i)
                for (std::size_t j = 0; j < doc.rows(); ++j)
                    if (key_distance(query, i, doc, j) < best) {
                        best = key_distance(query, i, doc, j);
                        best_j = j;
                    }
            std::vector<double> p;
            for (std::size_t c = key_width; c < spec.width; ++c) p.push_back(doc.at(best_j, c));
            return p;
        };
        // Sample 0 has class 0, so every matched payload is +u.
        const auto u = matched_payload(ds.samples[0][Source::claim_image], ds.samples[0][Source::doc_image]);
        auto sign = [&](const std::vector<double>& p) {
            return std::inner_product(p.begin(), p.end(), u.begin(), 0.0) > 0 ? 1 : -1;
        };
        for (const auto& s : ds.samples) {
            const int x = sign(matched_payload(s[Source::claim_image], s[Source::doc_text]));
            const int t = sign(matched_payload(s[Source::claim_text], s[Source::doc_text]));
            const int i = sign(matched_payload(s[Source::claim_image], s[Source::doc_image]));
            const int expected = x < 0 ? 4 : (t > 0 ? 0 : 2) + (i > 0 ? 0 : 1);
            CHECK(*s.label == expected);
        }

        // Held-out sets share the payload direction through structure_seed.
        auto other = spec;
        other.seed = spec.seed + 1;
        const auto held = generate_agreement_task(other);
        const auto u2 = matched_payload(held.samples[0][Source::claim_image], held.samples[0][Source::doc_image]);
        for (std::size_t c = 0; c < u.size(); ++c) CHECK(std::abs(u[c] - u2[c]) < 0.5);
    }
}

TEST_SUITE("checkpoint") {
    TEST_CASE("container round trip") {
        Checkpoint c;
        c.config_text = R"({"k":1})";
        c.records.emplace_back("a", Tensor<float>::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
        c.records.emplace_back("b", Tensor<float>({4}));
        const auto bytes = encode_checkpoint(c);
        CHECK(bytes.substr(0, 4) == "PCFM");
        const auto back = decode_checkpoint(bytes);
        CHECK(back.config_text == c.config_text);
        REQUIRE(back.records.size() == 2);
        CHECK(back.records[0].first == "a");
        CHECK(back.records[0].second == c.records[0].second);
        CHECK(back.records[1].second.shape() == Shape{4});
        CHECK(encode_checkpoint(back) == bytes);
    }

    TEST_CASE("model checkpoint round trip is byte-identical") {
        TempDir dir("ckpt");
        const auto c = testing::toy_config();
        const auto p = init_params<float>(c, 5);
        save_model(dir / "a.pcfm", p, c);
        const auto loaded = load_model<float>(dir / "a.pcfm");
        save_model(dir / "b.pcfm", loaded.params, loaded.config);
        CHECK(testing::read_bytes(dir / "a.pcfm") == testing::read_bytes(dir / "b.pcfm"));
        const auto meta = nlohmann::json::parse(read_checkpoint(dir / "a.pcfm").config_text);
        CHECK(meta.at("format") == "precofact-model");
    }

    TEST_CASE("model records must match the config by name and shape") {
        const auto c = testing::toy_config();
        const auto p = init_params<float>(c, 6);
        auto ckpt = model_checkpoint(p, c);
        auto renamed = ckpt;
        renamed.records[3].first = "emb.bogus.weight";
        CHECK_THROWS_AS(model_from_checkpoint<float>(renamed), FormatError);
        auto reshaped = ckpt;
        reshaped.records[0].second = Tensor<float>({1, 1});
        CHECK_THROWS_AS(model_from_checkpoint<float>(reshaped), FormatError);
        auto missing = ckpt;
        missing.records.pop_back();
        CHECK_THROWS_AS(model_from_checkpoint<float>(missing), FormatError);
        auto bad_meta = ckpt;
        bad_meta.config_text = "{";
        CHECK_THROWS_AS(model_from_checkpoint<float>(bad_meta), FormatError);
    }
}

TEST_SUITE("predictions") {
    TEST_CASE("round trip") {
        PredictionSet p;
        p.model_tag = "deit+deberta";
        p.sample_ids = {"a", "b"};
        p.scores = {{0.5, 0.25, 0.125, 0.0625, 0.0625}, {0, 0, 0, 0, 1}};
        const auto bytes = encode_predictions(p);
        const auto back = decode_predictions(bytes);
        CHECK(back.model_tag == p.model_tag);
        CHECK(back.sample_ids == p.sample_ids);
        CHECK(back.scores == p.scores);
        CHECK(encode_predictions(back) == bytes);
        p.scores[0][0] = -1.0;
        CHECK(category_of([&] { decode_predictions(encode_predictions(p)); }) == "bad-record");
    }
}

TEST_SUITE("fuzz") {
    TEST_CASE("corrupted inputs always raise a categorized error") {
        const auto pcf1 = write_dataset_bytes(generate_synthetic(small_spec()));
        const auto pcfm = encode_checkpoint(model_checkpoint(init_params<float>(testing::toy_config(), 1),
                                                             testing::toy_config()));
        PredictionSet preds;
        preds.model_tag = "m";
        for (int i = 0; i < 10; ++i) {
            preds.sample_ids.push_back("s" + std::to_string(i));
            preds.scores.push_back({0.2, 0.2, 0.2, 0.2, 0.2});
        }
        const auto pcfp = encode_predictions(preds);

        Rng rng(99);
        std::size_t errors = 0;
        for (int iter = 0; iter < 1000; ++iter) {
            const int kind = iter % 3;
            std::string bytes = kind == 0 ? pcf1 : kind == 1 ? pcfm : pcfp;
            std::uniform_int_distribution<int> mode(0, 2);
            std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
            switch (mode(rng)) {
            case 0:
                bytes.resize(pos(rng));
                break;
            case 1: {
                const auto flips = 1 + pos(rng) % 4;
                for (std::size_t f = 0; f < flips; ++f) bytes[pos(rng)] ^= static_cast<char>(1 + rng() % 255);
                break;
            }
            default:
                bytes.insert(pos(rng), 1 + rng() % 8, static_cast<char>(rng()));
            }
            try {
                if (kind == 0) read_dataset_bytes(bytes);
                if (kind == 1) model_from_checkpoint<float>(decode_checkpoint(bytes));
                if (kind == 2) decode_predictions(bytes);
            } catch (const Error& e) {
                CHECK_FALSE(e.category().empty());
                ++errors;
                continue;
            }
            FAIL("corruption accepted at iteration " << iter);
        }
        CHECK(errors == 1000);
    }
}
