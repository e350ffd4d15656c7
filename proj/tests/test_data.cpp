#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sblab/data.hpp"
#include "sblab/teacher.hpp"

using namespace sblab;

namespace {

DatasetSpec small_spec() {
    DatasetSpec s;
    s.num_actions = 8;
    s.num_scenes = 2;
    s.frames = 2;
    s.height = 8;
    s.width = 8;
    s.count = 10000;
    s.seed = 99;
    return s;
}

int mask_count(const Clip& c, int t) {
    int n = 0;
    for (int y = 0; y < c.height; ++y)
        for (int x = 0; x < c.width; ++x) n += c.actor_mask[c.idx(t, y, x)];
    return n;
}

}  // namespace

TEST_CASE("stripes alternate 0.3/0.7 with width scene+1") {
    DatasetSpec spec;
    Clip c = render_clip(0, 0, 8, 8, spec);
    // scene 0: width-1 stripes; row 0 is sprite-free (action 0 moves along row 8).
    for (int x = 0; x < spec.width; ++x) {
        double want = (x % 2 == 0) ? static_cast<double>(0.3f) : static_cast<double>(0.7f);
        CHECK(c.px(0, 0, x) == want);
    }
    Clip c2 = render_clip(0, 2, 8, 8, spec);  // width-3 stripes
    CHECK(c2.px(0, 0, 0) == static_cast<double>(0.3f));
    CHECK(c2.px(0, 0, 2) == static_cast<double>(0.3f));
    CHECK(c2.px(0, 0, 3) == static_cast<double>(0.7f));
    CHECK(c2.px(0, 0, 5) == static_cast<double>(0.7f));
    CHECK(c2.px(0, 0, 6) == static_cast<double>(0.3f));
}

TEST_CASE("sprite center follows start + t*v with wrap") {
    DatasetSpec spec;
    // action 0 is velocity (0,1) in the cardinal family
    Clip c = render_clip(0, 0, 4, 4, spec);
    // at t=3 the center is (4,7); footprint rows 3..5, cols 6..8
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            CHECK(c.actor_mask[c.idx(3, 4 + dy, 7 + dx)] == 1);
            CHECK(c.px(3, 4 + dy, 7 + dx) == 1.0);
        }
    for (int t = 0; t < spec.frames; ++t) CHECK(mask_count(c, t) == 9);

    // toroidal wrap: start near the corner keeps a full 9-cell footprint
    Clip w = render_clip(0, 0, 0, 15, spec);
    for (int t = 0; t < spec.frames; ++t) CHECK(mask_count(w, t) == 9);
    CHECK(w.actor_mask[w.idx(1, 0, 0)] == 1);  // center (0,0) at t=1
    CHECK(w.actor_mask[w.idx(1, 15, 15)] == 1);
}

TEST_CASE("diagonal family rotates the velocity assignment") {
    DatasetSpec spec;
    spec.family = ActionFamily::Diagonal;
    CHECK(action_velocity(ActionFamily::Diagonal, 0) == action_velocity(ActionFamily::Cardinal, 1));
    CHECK(action_velocity(ActionFamily::Diagonal, 7) == action_velocity(ActionFamily::Cardinal, 0));
    Clip c = render_clip(7, 0, 4, 4, spec);  // diagonal action 7 -> velocity (0,1)
    CHECK(c.actor_mask[c.idx(3, 4, 7)] == 1);
}

TEST_CASE("render_clip is deterministic") {
    DatasetSpec spec;
    Clip a = render_clip(3, 2, 5, 9, spec);
    Clip b = render_clip(3, 2, 5, 9, spec);
    CHECK(a.pixels == b.pixels);
    CHECK(a.actor_mask == b.actor_mask);
}

TEST_CASE("render_clip validates its arguments") {
    DatasetSpec spec;
    CHECK_THROWS_AS(render_clip(8, 0, 0, 0, spec), ContractError);
    CHECK_THROWS_AS(render_clip(0, 4, 0, 0, spec), ContractError);
    CHECK_THROWS_AS(render_clip(0, 0, 16, 0, spec), ContractError);
}

TEST_CASE("bias knob: beta=1 is exact, beta=0 and 0.9 within 3 sigma") {
    DatasetSpec s = small_spec();

    s.bias = 1.0;
    DatasetSplit exact = generate_dataset(s, Role::Train);
    for (const Clip& c : exact.clips) CHECK(c.scene == c.action % s.num_scenes);

    auto check_rate = [&](double beta, int m) {
        DatasetSpec spec = small_spec();
        spec.bias = beta;
        spec.num_scenes = m;
        DatasetSplit split = generate_dataset(spec, Role::Train);
        double p = beta + (1.0 - beta) / m;
        double sigma = std::sqrt(p * (1.0 - p) / spec.count);
        double got = empirical_bias_rate(split);
        CHECK(std::abs(got - p) <= 3.0 * sigma);
    };
    check_rate(0.0, 2);
    check_rate(0.9, 2);
}

TEST_CASE("beta=0.9 with M=4 lands near 0.925") {
    DatasetSpec s;
    s.num_scenes = 4;
    s.frames = 2;
    s.bias = 0.9;
    s.count = 10000;
    s.seed = 5;
    DatasetSplit split = generate_dataset(s, Role::Train);
    double p = 0.9 + 0.1 / 4;  // 0.925
    double sigma = std::sqrt(p * (1.0 - p) / s.count);
    CHECK(std::abs(empirical_bias_rate(split) - p) <= 3.0 * sigma);
}

TEST_CASE("generation is order-independent and role-sensitive") {
    DatasetSpec s = small_spec();
    s.count = 50;
    DatasetSplit split = generate_dataset(s, Role::Train);
    Clip lone = generate_clip(s, Role::Train, 17);
    CHECK(split.clips[17].pixels == lone.pixels);
    CHECK(split.clips[17].action == lone.action);
    CHECK(split.clips[17].scene == lone.scene);

    DatasetSplit val = generate_dataset(s, Role::Val);
    bool all_same = true;
    for (int i = 0; i < s.count; ++i)
        if (val.clips[static_cast<size_t>(i)].pixels != split.clips[static_cast<size_t>(i)].pixels)
            all_same = false;
    CHECK_FALSE(all_same);
}

TEST_CASE("mask_actor replaces actor cells with the frame mean") {
    DatasetSpec s;
    s.num_actions = 8;
    s.num_scenes = 1;
    s.frames = 1;
    s.height = 4;
    s.width = 4;
    Clip c = render_clip(0, 0, 1, 1, s);
    CHECK(mask_count(c, 0) == 9);
    double sum = 0.0;
    for (double v : c.pixels) sum += v;
    double mean = static_cast<double>(static_cast<float>(sum / 16.0));

    Clip masked = mask_actor(c);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            if (c.actor_mask[c.idx(0, y, x)])
                CHECK(masked.px(0, y, x) == mean);
            else
                CHECK(masked.px(0, y, x) == c.px(0, y, x));
        }
    // labels and mask carry over; source clip untouched
    CHECK(masked.action == c.action);
    CHECK(masked.actor_mask == c.actor_mask);
    CHECK(c.px(0, 1, 1) == 1.0);
}

TEST_CASE("mask_actor with an empty mask is the identity") {
    DatasetSpec s;
    Clip c = render_clip(2, 1, 3, 3, s);
    std::fill(c.actor_mask.begin(), c.actor_mask.end(), 0);
    Clip masked = mask_actor(c);
    CHECK(masked.pixels == c.pixels);
}

TEST_CASE("mask_actor keeps a uniform frame uniform") {
    DatasetSpec s;
    Clip c = render_clip(0, 0, 4, 4, s);
    std::fill(c.pixels.begin(), c.pixels.end(), 0.25);
    Clip masked = mask_actor(c);
    for (double v : masked.pixels) CHECK(v == 0.25);
}

TEST_CASE("mask_actor re-application changes nothing beyond 1e-12") {
    DatasetSpec s;
    Clip c = render_clip(5, 3, 7, 2, s);
    Clip once = mask_actor(c);
    Clip twice = mask_actor(once);
    for (size_t i = 0; i < once.pixels.size(); ++i)
        CHECK(std::abs(once.pixels[i] - twice.pixels[i]) <= 1e-12);
}

TEST_CASE("pixels stay in [0,1] before and after masking") {
    DatasetSpec s;
    s.count = 20;
    DatasetSplit split = generate_dataset(s, Role::Test);
    for (const Clip& c : split.clips) {
        for (double v : c.pixels) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        Clip m = mask_actor(c);
        for (double v : m.pixels) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("SBD1 round trip is bit-exact and the size matches the format") {
    DatasetSpec s;
    s.count = 3;
    s.seed = 1234;
    DatasetSplit split = generate_dataset(s, Role::Val);
    std::string path = "test_roundtrip.sbd";
    write_dataset(path, split);

    size_t px = static_cast<size_t>(s.frames) * s.height * s.width;
    size_t expected = 38 + static_cast<size_t>(s.count) * (4 + px * 4 + (px + 7) / 8);
    CHECK(std::filesystem::file_size(path) == expected);

    DatasetSplit back = read_dataset(path);
    CHECK(back.spec.num_actions == s.num_actions);
    CHECK(back.role == Role::Val);
    CHECK(back.spec.seed == s.seed);
    REQUIRE(back.clips.size() == split.clips.size());
    for (size_t i = 0; i < back.clips.size(); ++i) {
        CHECK(back.clips[i].pixels == split.clips[i].pixels);
        CHECK(back.clips[i].actor_mask == split.clips[i].actor_mask);
        CHECK(back.clips[i].action == split.clips[i].action);
        CHECK(back.clips[i].scene == split.clips[i].scene);
    }
    std::filesystem::remove(path);
}

TEST_CASE("masked clips also survive the f32 file round trip bit-exactly") {
    DatasetSpec s;
    s.count = 2;
    DatasetSplit split = generate_dataset(s, Role::Train);
    for (Clip& c : split.clips) c = mask_actor(c);
    std::string path = "test_masked_roundtrip.sbd";
    write_dataset(path, split);
    DatasetSplit back = read_dataset(path);
    for (size_t i = 0; i < back.clips.size(); ++i)
        CHECK(back.clips[i].pixels == split.clips[i].pixels);
    std::filesystem::remove(path);
}

TEST_CASE("dataset reader rejects corrupt magic with the offending offset") {
    std::string path = "test_corrupt.sbd";
    {
        std::ofstream out(path, std::ios::binary);
        out << "XXXXgarbage";
    }
    CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("offset 0"), DataFormatError);
    std::filesystem::remove(path);
}

TEST_CASE("spec validation") {
    DatasetSpec s;
    s.num_actions = 9;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = DatasetSpec{};
    s.bias = 1.2;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = DatasetSpec{};
    s.num_scenes = 5;  // 5*5 > 16
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("pseudo labels: HARD is one-hot, SOFT sums to one") {
    DatasetSpec s;
    s.count = 4;
    DatasetSplit split = generate_dataset(s, Role::Train);
    TeacherConfig tc;
    tc.num_scenes = s.num_scenes;
    TeacherModel teacher = init_teacher(tc, 7);

    PseudoSceneLabel hard = pseudo_label(teacher, split.clips[0], PseudoMode::Hard);
    int ones = 0;
    for (double v : hard.dist) {
        CHECK((v == 0.0 || v == 1.0));
        if (v == 1.0) ++ones;
    }
    CHECK(ones == 1);

    PseudoSceneLabel soft = pseudo_label(teacher, split.clips[0], PseudoMode::Soft);
    double sum = 0.0;
    for (double v : soft.dist) {
        CHECK(v >= 0.0);
        sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
}

TEST_CASE("teacher training is seed-deterministic") {
    DatasetSpec s;
    s.count = 60;
    DatasetSplit split = generate_dataset(s, Role::Train);
    TeacherTrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 11;
    TeacherModel a = train_teacher(split, cfg);
    TeacherModel b = train_teacher(split, cfg);
    CHECK(a.conv_w.tensor.data == b.conv_w.tensor.data);
    CHECK(a.head_w.tensor.data == b.head_w.tensor.data);
    CHECK(a.digest == b.digest);
}
