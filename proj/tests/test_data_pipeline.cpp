#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lynx/data_pipeline.hpp"
#include "lynx/encoders.hpp"

using namespace lynx;
using namespace lynx::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

Image flat_image(uint8_t r, uint8_t g, uint8_t b, int64_t side = 16) {
    Image img = Image::filled(side, side, 3, 0);
    for (int64_t y = 0; y < side; ++y)
        for (int64_t x = 0; x < side; ++x) {
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
    return img;
}

void write_manifest(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    for (const auto& l : lines) out << l << "\n";
}

// embedder keyed on the red channel of the top-left pixel
ImageEmbedder keyed_embedder(std::function<std::vector<double>(uint8_t)> fn) {
    return [fn](const Image& img) { return fn(img.at(0, 0, 0)); };
}

}  // namespace

TEST_CASE("manifest loads records and preserves unknown fields") {
    TempDir dir("lynx_manifest_ok");
    save_png(dir.file("c0.png"), flat_image(10, 0, 0));
    save_png(dir.file("t0.png"), flat_image(10, 0, 0));
    write_manifest(dir.file("m.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"c0.png","target":"t0.png","caption":"a","note":"keepme"})",
                    R"({"pair_type":"multi_scene","condition_image":"c0.png","target":"t0.png","caption":"b"})",
                    R"({"pair_type":"augmented_single_scene","condition_image":"c0.png","target":"t0.png","caption":"c"})"});

    auto records = load_manifest(dir.file("m.jsonl"));
    REQUIRE(records.size() == 3);
    CHECK(records[0].pair_type == PairType::single_scene);
    CHECK(records[1].pair_type == PairType::multi_scene);
    CHECK(records[2].pair_type == PairType::augmented_single_scene);
    CHECK(records[0].caption == "a");
    CHECK(records[0].extra["note"] == "keepme");

    // unknown fields survive a save/load round trip
    save_manifest(dir.file("copy.jsonl"), records);
    auto again = load_manifest(dir.file("copy.jsonl"));
    CHECK(again[0].extra["note"] == "keepme");
}

TEST_CASE("manifest errors carry line numbers and field names") {
    TempDir dir("lynx_manifest_bad");
    save_png(dir.file("c.png"), flat_image(1, 2, 3));
    save_png(dir.file("t.png"), flat_image(1, 2, 3));

    write_manifest(dir.file("badtype.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"c.png","target":"t.png","caption":"x"})",
                    R"({"pair_type":"movie","condition_image":"c.png","target":"t.png","caption":"y"})"});
    CHECK_THROWS_WITH(load_manifest(dir.file("badtype.jsonl")),
                      Catch::Matchers::ContainsSubstring("line 2") &&
                          Catch::Matchers::ContainsSubstring("movie"));

    write_manifest(dir.file("missing.jsonl"),
                   {R"({"pair_type":"single_scene","target":"t.png","caption":"x"})"});
    CHECK_THROWS_WITH(load_manifest(dir.file("missing.jsonl")),
                      Catch::Matchers::ContainsSubstring("condition_image"));

    write_manifest(dir.file("badjson.jsonl"), {"{not json"});
    CHECK_THROWS_WITH(load_manifest(dir.file("badjson.jsonl")),
                      Catch::Matchers::ContainsSubstring("line 1"));

    write_manifest(dir.file("absent.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"nope.png","target":"t.png","caption":"x"})"});
    CHECK_THROWS_WITH(load_manifest(dir.file("absent.jsonl")),
                      Catch::Matchers::ContainsSubstring("nope.png"));
}

TEST_CASE("empty manifest loads as an empty list") {
    TempDir dir("lynx_manifest_empty");
    write_manifest(dir.file("empty.jsonl"), {});
    CHECK(load_manifest(dir.file("empty.jsonl")).empty());
}

TEST_CASE("identity filter keeps records by cosine threshold") {
    TempDir dir("lynx_filter");
    // three records with prescribed cosines 0.9, 0.6, 0.3
    const double cosines[3] = {0.9, 0.6, 0.3};
    std::vector<std::string> lines;
    for (int i = 0; i < 3; ++i) {
        save_png(dir.file("c" + std::to_string(i) + ".png"),
                 flat_image(uint8_t(10 + i), 0, 0));
        save_png(dir.file("t" + std::to_string(i) + ".png"),
                 flat_image(uint8_t(100 + i), 0, 0));
        lines.push_back(R"({"pair_type":"single_scene","condition_image":"c)" +
                        std::to_string(i) + R"(.png","target":"t)" + std::to_string(i) +
                        R"(.png","caption":"p"})");
    }
    write_manifest(dir.file("m.jsonl"), lines);
    auto records = load_manifest(dir.file("m.jsonl"));

    ImageEmbedder embedder = keyed_embedder([&](uint8_t key) -> std::vector<double> {
        if (key >= 100) {
            const double c = cosines[key - 100];
            return {c, std::sqrt(1.0 - c * c)};
        }
        return {1.0, 0.0};
    });

    FilterResult res = identity_filter(records, embedder, 0.5);
    CHECK(res.kept.size() == 2);
    CHECK(res.dropped.size() == 1);
    CHECK(res.kept.size() + res.dropped.size() == records.size());
    CHECK(*res.kept[0].resemblance == Catch::Approx(0.9));
    CHECK(*res.kept[1].resemblance == Catch::Approx(0.6));
    CHECK_THAT(res.dropped[0].reason, Catch::Matchers::ContainsSubstring("below threshold"));

    // every kept record satisfies the threshold
    for (const auto& r : res.kept) CHECK(*r.resemblance >= 0.5);
}

TEST_CASE("identity filter: identical media scores one, orthogonal scores zero") {
    TempDir dir("lynx_filter_edge");
    save_png(dir.file("same.png"), flat_image(42, 7, 7));
    write_manifest(dir.file("m.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"same.png","target":"same.png","caption":"p"})"});
    auto records = load_manifest(dir.file("m.jsonl"));

    ImageEmbedder real = [](const Image& img) { return stub_face_embedding(img, 16); };
    FilterResult res = identity_filter(records, real, 1.0);
    REQUIRE(res.kept.size() == 1);
    CHECK(*res.kept[0].resemblance == Catch::Approx(1.0));

    ImageEmbedder orth = keyed_embedder([](uint8_t) -> std::vector<double> {
        static int flip = 0;
        return (flip++ % 2 == 0) ? std::vector<double>{1.0, 0.0}
                                 : std::vector<double>{0.0, 1.0};
    });
    FilterResult res2 = identity_filter(records, orth, 0.5);
    CHECK(res2.kept.empty());
    CHECK(res2.dropped.size() == 1);
}

TEST_CASE("identity filter routes unreadable media to dropped") {
    TempDir dir("lynx_filter_bad");
    save_png(dir.file("c.png"), flat_image(5, 5, 5));
    {
        std::ofstream bad(dir.file("broken.png"), std::ios::binary);
        bad << "this is not a png";
    }
    write_manifest(dir.file("m.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"c.png","target":"broken.png","caption":"p"})"});
    auto records = load_manifest(dir.file("m.jsonl"));
    ImageEmbedder real = [](const Image& img) { return stub_face_embedding(img, 16); };
    FilterResult res = identity_filter(records, real, 0.5);
    CHECK(res.kept.empty());
    REQUIRE(res.dropped.size() == 1);
    CHECK_THAT(res.dropped[0].reason, Catch::Matchers::ContainsSubstring("unreadable media"));
}

TEST_CASE("weighted sampler honors weights, seeds, and empty-type errors") {
    TempDir dir("lynx_sampler");
    save_png(dir.file("c.png"), flat_image(1, 1, 1));
    save_png(dir.file("t.png"), flat_image(1, 1, 1));
    auto rec = [&](PairType ty) {
        PairRecord r;
        r.pair_type = ty;
        r.condition_image = dir.file("c.png");
        r.target = dir.file("t.png");
        r.caption = "x";
        return r;
    };
    std::vector<PairRecord> records{rec(PairType::single_scene), rec(PairType::single_scene),
                                    rec(PairType::multi_scene)};

    // weight only on single_scene: nothing else is ever drawn
    WeightedSampler only_single(records, SamplingWeights{1, 0, 0}, 7);
    for (uint64_t n = 0; n < 500; ++n)
        CHECK(only_single.draw(n).pair_type == PairType::single_scene);

    // two active types converge to their weights
    WeightedSampler two(records, SamplingWeights{1, 1, 0}, 7);
    int64_t singles = 0;
    const int64_t draws = 20000;
    for (uint64_t n = 0; n < uint64_t(draws); ++n)
        if (two.draw(n).pair_type == PairType::single_scene) ++singles;
    CHECK(std::abs(double(singles) / double(draws) - 0.5) < 0.025);

    // same seed replays the same stream
    WeightedSampler a(records, SamplingWeights{1, 1, 0}, 42);
    WeightedSampler b(records, SamplingWeights{1, 1, 0}, 42);
    for (uint64_t n = 0; n < 1000; ++n) CHECK(a.draw_index(n) == b.draw_index(n));

    // positive weight on an empty type
    CHECK_THROWS_AS(WeightedSampler(records, SamplingWeights{1, 1, 1}, 7), Error);
    CHECK_THROWS_AS(WeightedSampler(records, SamplingWeights{0, 0, 0}, 7), Error);
}

TEST_CASE("relight stub with gamma 1 is a byte-identical no-op") {
    TempDir dir("lynx_aug_gamma");
    Image src = flat_image(200, 100, 50);
    src.at(3, 4, 0) = 17;  // non-flat so the face detector sees it
    save_png(dir.file("c.png"), src);
    save_png(dir.file("t.png"), src);
    write_manifest(dir.file("m.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"c.png","target":"t.png","caption":"p"})"});
    auto records = load_manifest(dir.file("m.jsonl"));

    Rng rng(1);
    PairRecord out = apply_augmenter(records[0], make_relight_augmenter(1.0), rng,
                                     (dir.path / "out").string());
    CHECK(out.pair_type == PairType::augmented_single_scene);
    CHECK(out.condition_image != records[0].condition_image);
    CHECK(load_png(out.condition_image).px == src.px);
    // the source record is untouched
    CHECK(records[0].pair_type == PairType::single_scene);
}

TEST_CASE("augmenter stubs preserve spatial dims") {
    Rng rng(2);
    Image src = flat_image(30, 60, 90, 24);
    src.at(1, 1, 0) = 250;
    for (const Augmenter& aug : {make_relight_augmenter(0.7), make_expression_augmenter(2.5),
                                 make_background_augmenter()}) {
        Image out = aug.transform(src, rng);
        CHECK(out.w == src.w);
        CHECK(out.h == src.h);
        CHECK(out.c == src.c);
    }
}

TEST_CASE("augmentation is limited to single-scene records") {
    TempDir dir("lynx_aug_type");
    save_png(dir.file("c.png"), flat_image(9, 9, 9));
    PairRecord rec;
    rec.pair_type = PairType::multi_scene;
    rec.condition_image = dir.file("c.png");
    rec.target = dir.file("c.png");
    rec.caption = "x";
    Rng rng(3);
    CHECK_THROWS_AS(apply_augmenter(rec, make_relight_augmenter(0.8), rng,
                                    (dir.path / "out").string()),
                    Error);
}

TEST_CASE("augment-then-filter drops identity-destroying transforms") {
    TempDir dir("lynx_aug_destroy");
    Image src = flat_image(120, 60, 30);
    src.at(2, 2, 1) = 99;
    save_png(dir.file("c.png"), src);
    save_png(dir.file("t.png"), src);
    write_manifest(dir.file("m.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"c.png","target":"t.png","caption":"p"})"});
    auto records = load_manifest(dir.file("m.jsonl"));

    // a custom hook that destroys identity: replaces the image with noise
    Augmenter destroyer;
    destroyer.kind = Augmenter::Kind::expression;
    destroyer.transform = [](const Image& img, Rng& rng) {
        Image out = img;
        for (auto& p : out.px) p = uint8_t(rng.below(256));
        return out;
    };
    Rng rng(4);
    PairRecord aug = apply_augmenter(records[0], destroyer, rng, (dir.path / "out").string());

    // embedder: original content maps to e0, anything else to e1 (orthogonal)
    ImageEmbedder embedder = [&src](const Image& img) -> std::vector<double> {
        return img.px == src.px ? std::vector<double>{1.0, 0.0}
                                : std::vector<double>{0.0, 1.0};
    };
    FilterResult res = identity_filter({aug}, embedder, 0.5);
    CHECK(res.kept.empty());
    REQUIRE(res.dropped.size() == 1);

    // while the untouched original passes
    FilterResult ok = identity_filter({records[0]}, embedder, 0.5);
    CHECK(ok.kept.size() == 1);
}

TEST_CASE("embedding sidecars round-trip with a length prefix") {
    TempDir dir("lynx_sidecar");
    const std::vector<double> v{0.25, -0.5, 0.125, 1.0};
    write_embedding_sidecar(dir.file("e.bin"), v);
    CHECK(read_embedding_sidecar(dir.file("e.bin")) == v);

    // 8-byte prefix + 4 float32 payloads
    CHECK(fs::file_size(dir.file("e.bin")) == 8 + 4 * 4);
}

TEST_CASE("pipeline purity: filtering does not touch the input manifest") {
    TempDir dir("lynx_purity");
    save_png(dir.file("c.png"), flat_image(7, 7, 7));
    write_manifest(dir.file("m.jsonl"),
                   {R"({"pair_type":"single_scene","condition_image":"c.png","target":"c.png","caption":"p"})"});
    std::ifstream before_in(dir.file("m.jsonl"));
    const std::string before((std::istreambuf_iterator<char>(before_in)),
                             std::istreambuf_iterator<char>());

    auto records = load_manifest(dir.file("m.jsonl"));
    ImageEmbedder real = [](const Image& img) { return stub_face_embedding(img, 16); };
    identity_filter(records, real, 0.5);

    std::ifstream after_in(dir.file("m.jsonl"));
    const std::string after((std::istreambuf_iterator<char>(after_in)),
                            std::istreambuf_iterator<char>());
    CHECK(before == after);
}
