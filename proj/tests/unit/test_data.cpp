#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "l2aed/data.hpp"
#include "l2aed/errors.hpp"
#include "oracles.hpp"

using namespace l2aed;

namespace {

Tensor img(std::size_t h, std::size_t w, std::vector<double> v) { return Tensor(Shape{1, h, w}, std::move(v)); }

Dataset named_classes(std::size_t n, std::size_t side = 2) {
    Dataset ds;
    ds.channels = 1;
    ds.height = ds.width = side;
    for (std::size_t i = 0; i < n; ++i) {
        ClassData c;
        c.name = "c" + std::to_string(i);
        Tensor t(Shape{1, side, side});
        for (std::size_t k = 0; k < t.numel(); ++k) t[k] = static_cast<double>((i * 7 + k) % 11) / 10.0;
        c.examples.push_back(t);
        c.outlier.push_back(0);
        ds.classes.push_back(std::move(c));
    }
    return ds;
}

}  // namespace

TEST_CASE("bilinear resize examples") {
    const Tensor constant = resize_bilinear(Tensor(Shape{2, 5, 3}, 0.37), 4, 7);
    for (double v : constant.data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
    const Tensor single = resize_bilinear(img(1, 1, {0.6}), 3, 2);
    for (double v : single.data()) CHECK(v == 0.6);

    const Tensor x = resize_bilinear(img(2, 2, {0, 1, 1, 0}), 3, 3);
    CHECK(x.at({0, 1, 1}) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(x.at({0, 0, 0}) == 0.0);  // source coordinate -1/6 clamps to 0

    // 4x4 ramp v = 4i + j halved: each output samples the centre of a 2x2 block.
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = i;
    const Tensor half = resize_bilinear(img(4, 4, ramp), 2, 2);
    CHECK(half == img(2, 2, {2.5, 4.5, 10.5, 12.5}));

    // 4x4 checkerboard of single pixels averages to 0.5 everywhere.
    const Tensor board = resize_bilinear(img(4, 4, {0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0}), 2, 2);
    for (double v : board.data()) CHECK(v == 0.5);

    Rng rng(1);
    const Tensor r = oracle::random_tensor({1, 6, 6}, rng);
    CHECK(resize_bilinear(r, 6, 6) == r);
    CHECK_THROWS(resize_bilinear(r, 0, 3));
}

TEST_CASE("resize and rotation match their oracles") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t ih = 1 + rng.below(12), iw = 1 + rng.below(12), oh = 1 + rng.below(12), ow = 1 + rng.below(12);
        const Tensor x = oracle::random_tensor({1 + rng.below(3), ih, iw}, rng);
        CHECK(max_rel_diff(resize_bilinear(x, oh, ow), oracle::resize(x, oh, ow), 1e-12) < 1e-10);
        const std::size_t n = 1 + rng.below(9);
        const Tensor sq = oracle::random_tensor({1 + rng.below(3), n, n}, rng);
        CHECK(rotate90(sq, 1) == oracle::rotate_ccw(sq));
    }
}

TEST_CASE("rotation examples") {
    const Tensor a = img(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    // One counter-clockwise quarter turn.
    CHECK(rotate90(a, 1) == img(3, 3, {3, 6, 9, 2, 5, 8, 1, 4, 7}));
    CHECK(rotate90(rotate90(rotate90(rotate90(a, 1), 1), 1), 1) == a);
    CHECK(rotate90(a, 4) == a);
    CHECK(rotate90(a, 2) == rotate90(rotate90(a, 1), 1));
    std::vector<double> before(a.data().begin(), a.data().end()), after;
    const Tensor r = rotate90(a, 3);
    after.assign(r.data().begin(), r.data().end());
    std::sort(before.begin(), before.end());
    std::sort(after.begin(), after.end());
    CHECK(before == after);
    CHECK_THROWS_AS(rotate90(Tensor(Shape{1, 2, 3}), 1), ShapeError);
}

TEST_CASE("rotation augmentation makes new classes") {
    Dataset ds = named_classes(1200);
    for (std::size_t i = 0; i < ds.classes.size(); ++i) ds.classes[i].split = i % 2 ? Split::Test : Split::Train;
    const Dataset aug = augment_rotations(ds);
    CHECK(aug.classes.size() == 4800);
    std::set<std::string> names;
    for (const auto& c : aug.classes) names.insert(c.name);
    CHECK(names.size() == 4800);
    for (std::size_t i = 0; i < 1200; ++i) {
        for (int t = 0; t < 4; ++t) {
            const ClassData& c = aug.classes[i * 4 + static_cast<std::size_t>(t)];
            CHECK(c.split == ds.classes[i].split);
            CHECK(c.examples[0] == rotate90(ds.classes[i].examples[0], t));
        }
    }
    Dataset bad = named_classes(1);
    bad.height = 3;
    bad.classes[0].examples[0] = Tensor(Shape{1, 3, 2});
    CHECK_THROWS(augment_rotations(bad));
}

TEST_CASE("class splits") {
    const Dataset ds = named_classes(1623);
    Rng a(5), b(5);
    const Dataset s = split_classes(ds, SplitCounts{1200, 100, 323}, a);
    CHECK(s.class_ids(Split::Train).size() == 1200);
    CHECK(s.class_ids(Split::Validation).size() == 100);
    CHECK(s.class_ids(Split::Test).size() == 323);
    std::set<std::size_t> all;
    for (Split sp : {Split::Train, Split::Validation, Split::Test})
        for (std::size_t id : s.class_ids(sp)) CHECK(all.insert(id).second);
    CHECK(all.size() == 1623);

    const Dataset t = split_classes(ds, SplitCounts{1200, 100, 323}, b);
    for (std::size_t i = 0; i < ds.classes.size(); ++i) CHECK(s.classes[i].split == t.classes[i].split);

    Rng c(6);
    const Dataset only = split_classes(ds, SplitCounts{1623, 0, 0}, c);
    CHECK(only.class_ids(Split::Train).size() == 1623);
    CHECK_THROWS_AS(split_classes(ds, SplitCounts{1200, 100, 300}, c), ParameterError);
}

TEST_CASE("synthetic dataset") {
    SynthParams p;
    p.num_classes = 6;
    p.per_class = 5;
    p.noise_sd = 0.0;
    p.seed = 3;
    SUBCASE("noise-free examples of a class are identical") {
        const Dataset ds = synth_dataset(p);
        for (std::size_t c = 0; c < 6; ++c) {
            for (const auto& e : ds.classes[c].examples) CHECK(e == ds.classes[c].examples[0]);
            CHECK(ds.classes[c].examples[0] == synth_pattern(p, c));
        }
        for (std::size_t c = 1; c < 6; ++c) CHECK_FALSE(ds.classes[c].examples[0] == ds.classes[0].examples[0]);
    }
    SUBCASE("planted outliers follow the binomial rate") {
        p.num_classes = 50;
        p.per_class = 20;
        p.noise_sd = 0.1;
        p.outlier_rate = 0.2;
        const Dataset ds = synth_dataset(p);
        std::size_t planted = 0;
        for (const auto& c : ds.classes)
            for (auto f : c.outlier) planted += f;
        CHECK(planted >= 175);
        CHECK(planted <= 225);
        // Planted examples are rendered from another class: their noise-free
        // pattern is never the class's own.
        SynthParams clean = p;
        clean.noise_sd = 0.0;
        clean.outlier_rate = 0.0;
        const Dataset reference = synth_dataset(clean);
        SynthParams quiet = p;
        quiet.noise_sd = 0.0;
        const Dataset q = synth_dataset(quiet);
        for (std::size_t c = 0; c < q.classes.size(); ++c)
            for (std::size_t e = 0; e < q.classes[c].examples.size(); ++e)
                CHECK((q.classes[c].examples[e] == reference.classes[c].examples[0]) == (q.classes[c].outlier[e] == 0));
    }
    SUBCASE("pixels lie in [0, 1] and generation is deterministic") {
        p.noise_sd = 0.5;
        p.outlier_rate = 0.1;
        const Dataset a = synth_dataset(p), b = synth_dataset(p);
        for (const auto& c : a.classes)
            for (const auto& e : c.examples)
                for (double v : e.data()) CHECK((v >= 0.0 && v <= 1.0));
        const auto dir = testing::scratch_dir("synth");
        save_dataset(dir / "a.bin", a);
        save_dataset(dir / "b.bin", b);
        CHECK(testing::read_file(dir / "a.bin") == testing::read_file(dir / "b.bin"));
        const Dataset back = load_dataset(dir / "a.bin");
        REQUIRE(back.classes.size() == a.classes.size());
        for (std::size_t c = 0; c < a.classes.size(); ++c) {
            CHECK(back.classes[c].name == a.classes[c].name);
            CHECK(back.classes[c].outlier == a.classes[c].outlier);
            for (std::size_t e = 0; e < a.classes[c].examples.size(); ++e)
                CHECK(back.classes[c].examples[e] == a.classes[c].examples[e]);
        }
    }
    SUBCASE("parameter checks") {
        p.outlier_rate = 1.0;
        CHECK_THROWS_AS(synth_dataset(p), ParameterError);
        p.outlier_rate = 0.0;
        p.per_class = 0;
        CHECK_THROWS_AS(synth_dataset(p), ParameterError);
    }
}

TEST_CASE("image folder loading") {
    const auto root = testing::scratch_dir("images");
    Rng rng(9);
    std::vector<Tensor> sources;
    for (const char* cls : {"beta", "alpha"}) {
        std::filesystem::create_directories(root / cls);
        for (int i = 0; i < 3; ++i) {
            Tensor t(Shape{1, 105, 105});
            for (double& v : t.data()) v = static_cast<double>(rng.below(256)) / 255.0;
            write_png(root / cls / ("img" + std::to_string(i) + ".png"), t);
            sources.push_back(t);
        }
    }
    LoadStats st;
    const Dataset ds = load_image_dataset(root, 28, true, false, &st);
    CHECK(ds.classes.size() == 2);
    CHECK(ds.classes[0].name == "alpha");
    CHECK(ds.classes[1].name == "beta");
    CHECK(st.loaded == 6);
    CHECK(st.skipped == 0);
    for (const auto& c : ds.classes) {
        CHECK(c.examples.size() == 3);
        for (const auto& e : c.examples) {
            CHECK(e.shape() == Shape{1, 28, 28});
            for (double v : e.data()) CHECK((v >= 0.0 && v <= 1.0));
        }
    }

    SUBCASE("identity resize keeps pixels") {
        const Dataset same = load_image_dataset(root, 105, true);
        // alpha holds the second batch of sources.
        CHECK(max_abs_diff(same.classes[0].examples[1], sources[4]) < 1e-15);
        CHECK(max_abs_diff(same.classes[1].examples[0], sources[0]) < 1e-15);
        const Dataset inv = load_image_dataset(root, 105, true, true);
        CHECK(inv.classes[1].examples[0][0] == doctest::Approx(1.0 - same.classes[1].examples[0][0]));
    }
    SUBCASE("colour sources collapse to luminance") {
        const auto croot = testing::scratch_dir("colour");
        std::filesystem::create_directories(croot / "rgb");
        Tensor rgb(Shape{3, 1, 3});
        rgb.at({0, 0, 0}) = 1.0;  // red
        rgb.at({1, 0, 1}) = 1.0;  // green
        rgb.at({2, 0, 2}) = 1.0;  // blue
        write_png(croot / "rgb" / "p.png", rgb);
        const Dataset g = load_image_dataset(croot, 3, true);
        CHECK(g.classes[0].examples[0].shape() == Shape{1, 3, 3});
        const Dataset full = load_image_dataset(croot, 3, false);
        CHECK(full.channels == 3);
        const Tensor native = resize_bilinear(Tensor(Shape{1, 1, 3}, {0.299, 0.587, 0.114}), 3, 3);
        CHECK(max_abs_diff(g.classes[0].examples[0], native) < 1e-12);
    }
    SUBCASE("undecodable files are skipped and counted") {
        testing::write_file(root / "alpha" / "broken.png", "definitely not a png");
        LoadStats s2;
        const Dataset d2 = load_image_dataset(root, 28, true, false, &s2);
        CHECK(s2.skipped == 1);
        CHECK(s2.warnings.size() == 1);
        CHECK(d2.classes[0].examples.size() == 3);
        std::filesystem::create_directories(root / "empty");
        testing::write_file(root / "empty" / "junk.png", "nope");
        CHECK_THROWS_AS(load_image_dataset(root, 28, true), DataError);
    }
    CHECK_THROWS_AS(load_image_dataset(root / "missing", 28, true), DataError);
}
