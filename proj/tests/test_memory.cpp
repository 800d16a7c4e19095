#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "memseg/memory.hpp"
#include "support/synthetic.hpp"

using namespace memseg;
using namespace memseg::testsupport;

namespace {

FeatureMap make_feature(int frame_index, const Eigen::MatrixXd& vectors, int grid_w = 1,
                        int grid_h = 1) {
    FeatureMap fm;
    fm.grid_w = grid_w;
    fm.grid_h = grid_h;
    fm.vectors = vectors;
    fm.frame_index = frame_index;
    return fm;
}

MemoryEntry make_entry(int frame_index, const Eigen::MatrixXd& vectors,
                       const Eigen::MatrixXd& value, int grid_w = 1, int grid_h = 1) {
    MemoryEntry e;
    e.key = make_feature(frame_index, vectors, grid_w, grid_h);
    e.value = value;
    e.frame_index = frame_index;
    return e;
}

std::vector<int> stm_indices(const MemoryBank& bank) {
    std::vector<int> out;
    for (const auto& e : bank.stm) out.push_back(e.frame_index);
    return out;
}

std::vector<int> ltm_indices(const MemoryBank& bank) {
    std::vector<int> out;
    for (const auto& e : bank.ltm) out.push_back(e.frame_index);
    return out;
}

/// Loop-by-definition attention oracle over the deduplicated slot list.
AttentionRead attention_oracle(const FeatureMap& query, const MemoryBank& bank) {
    std::map<int, const MemoryEntry*> by_frame;
    for (const auto& e : bank.stm) by_frame.emplace(e.frame_index, &e);
    for (const auto& e : bank.ltm) by_frame.emplace(e.frame_index, &e);
    std::vector<const MemoryEntry*> entries;
    for (const auto& [idx, e] : by_frame) entries.push_back(e);

    const int n = static_cast<int>(query.vectors.rows());
    const int d = static_cast<int>(query.vectors.cols());
    const int per = static_cast<int>(entries.front()->key.vectors.rows());
    const int slots = static_cast<int>(entries.size()) * per;
    const int channels = static_cast<int>(entries.front()->value.cols());

    AttentionRead read;
    read.grid_w = query.grid_w;
    read.grid_h = query.grid_h;
    read.scores.resize(n, slots);
    read.weights.resize(n, slots);
    read.reads = Eigen::MatrixXd::Zero(n, channels);
    for (int i = 0; i < n; ++i) {
        for (int s = 0; s < slots; ++s) {
            const auto& e = *entries[s / per];
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += query.vectors(i, k) * e.key.vectors(s % per, k);
            read.scores(i, s) = dot / std::sqrt(static_cast<double>(d));
        }
        const double m = read.scores.row(i).maxCoeff();
        double z = 0.0;
        for (int s = 0; s < slots; ++s) z += std::exp(read.scores(i, s) - m);
        for (int s = 0; s < slots; ++s)
            read.weights(i, s) = std::exp(read.scores(i, s) - m) / z;
        for (int s = 0; s < slots; ++s)
            for (int c = 0; c < channels; ++c)
                read.reads(i, c) += read.weights(i, s) * entries[s / per]->value(s % per, c);
    }
    return read;
}

}  // namespace

TEST_CASE("feature extraction pads to the patch grid", "[memory]") {
    const SegmenterConfig cfg;
    const SegmenterWeights w = init_weights(cfg, 3, 2);
    Frame f = Frame::filled(20, 9, 10, 20, 30);
    f.at(3, 4, 1) = 200;
    const FeatureMap fm = extract_features(f, w);
    CHECK(fm.grid_w == 3);
    CHECK(fm.grid_h == 2);
    CHECK(fm.vectors.rows() == 6);
    CHECK(fm.vectors.cols() == cfg.embed_dim);
    const FeatureMap again = extract_features(f, w);
    CHECK(fm.vectors == again.vectors);
}

TEST_CASE("seeding an empty bank fills both stores", "[memory]") {
    MemoryBank bank;
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(1, 4, 1.0);
    const Eigen::MatrixXd value = Eigen::MatrixXd::Constant(1, 3, 1.0 / 3.0);
    seed(bank, 7, make_feature(7, key), value);
    REQUIRE(bank.stm.size() == 1);
    REQUIRE(bank.ltm.size() == 1);
    CHECK(bank.stm.front().pinned);
    CHECK(bank.ltm.front().frame_index == 7);
}

TEST_CASE("seeding the same frame index replaces the entry", "[memory]") {
    MemoryBank bank;
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(1, 4, 1.0);
    seed(bank, 3, make_feature(3, key), Eigen::MatrixXd::Constant(1, 3, 0.0));
    seed(bank, 3, make_feature(3, key), Eigen::MatrixXd::Constant(1, 3, 9.0));
    REQUIRE(bank.stm.size() == 1);
    REQUIRE(bank.ltm.size() == 1);
    CHECK(bank.stm.front().value(0, 0) == 9.0);
    CHECK(bank.ltm.front().value(0, 0) == 9.0);
}

TEST_CASE("short-term store keeps only the newest entries", "[memory]") {
    MemoryBank bank;
    bank.n_stm = 5;
    bank.ltm_stride = 100;
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(1, 4, 1.0);
    const Eigen::MatrixXd value = Eigen::MatrixXd::Constant(1, 3, 0.5);
    for (int t = 0; t < 8; ++t) insert(bank, make_entry(t, key, value));
    CHECK(stm_indices(bank) == std::vector<int>{3, 4, 5, 6, 7});
}

TEST_CASE("long-term store samples stride-aligned frames", "[memory]") {
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(1, 4, 1.0);
    const Eigen::MatrixXd value = Eigen::MatrixXd::Constant(1, 3, 0.5);

    MemoryBank every;
    every.ltm_stride = 1;
    for (int t = 0; t < 6; ++t) insert(every, make_entry(t, key, value));
    CHECK(ltm_indices(every) == std::vector<int>{0, 1, 2, 3, 4, 5});

    MemoryBank strided;
    strided.ltm_stride = 5;
    for (int t = 0; t < 10; ++t) insert(strided, make_entry(t, key, value));
    CHECK(ltm_indices(strided) == std::vector<int>{0, 5});
}

TEST_CASE("long-term eviction drops the oldest unpinned entry", "[memory]") {
    MemoryBank bank;
    bank.ltm_stride = 1;
    bank.cap_ltm = 4;
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(1, 4, 1.0);
    const Eigen::MatrixXd value = Eigen::MatrixXd::Constant(1, 3, 0.5);
    seed(bank, 0, make_feature(0, key), value);
    for (int t = 1; t < 10; ++t) insert(bank, make_entry(t, key, value));
    CHECK(ltm_indices(bank) == std::vector<int>{0, 7, 8, 9});
    CHECK(bank.ltm.front().pinned);
}

TEST_CASE("a single slot is read back exactly", "[memory]") {
    MemoryBank bank;
    Eigen::MatrixXd key(1, 4);
    key << 0.3, -1.2, 4.0, 0.01;
    Eigen::MatrixXd value(1, 3);
    value << 0.2, 0.5, 0.3;
    insert(bank, make_entry(0, key, value));

    Eigen::MatrixXd q(1, 4);
    q << 5.0, 5.0, -2.0, 0.0;
    const AttentionRead read = attention_read(make_feature(1, q), bank);
    REQUIRE(read.weights.cols() == 1);
    CHECK(read.weights(0, 0) == 1.0);
    CHECK(read.reads(0, 0) == 0.2);
    CHECK(read.reads(0, 1) == 0.5);
    CHECK(read.reads(0, 2) == 0.3);
}

TEST_CASE("identical keys average their values", "[memory]") {
    MemoryBank bank;
    Eigen::MatrixXd key(1, 4);
    key << 1.0, 2.0, 3.0, 4.0;
    Eigen::MatrixXd v1(1, 3), v2(1, 3);
    v1 << 1.0, 0.0, 0.0;
    v2 << 0.0, 0.0, 1.0;
    insert(bank, make_entry(0, key, v1));
    insert(bank, make_entry(1, key, v2));

    Eigen::MatrixXd q(1, 4);
    q << -0.5, 0.25, 8.0, 1.0;
    const AttentionRead read = attention_read(make_feature(2, q), bank);
    for (int c = 0; c < 3; ++c)
        CHECK(read.reads(0, c) == Catch::Approx((v1(0, c) + v2(0, c)) / 2.0).margin(1e-15));
}

TEST_CASE("a unit score gap weighs slots e to one", "[memory]") {
    // scores: dot(q,k)/sqrt(d) with d=4, q=(2,0,0,0) -> k1 scores 1, k2 scores 0
    MemoryBank bank;
    Eigen::MatrixXd k1 = Eigen::MatrixXd::Zero(1, 4), k2 = Eigen::MatrixXd::Zero(1, 4);
    k1(0, 0) = 1.0;
    Eigen::MatrixXd v(1, 2);
    v << 1.0, 0.0;
    insert(bank, make_entry(0, k1, v));
    insert(bank, make_entry(1, k2, v));

    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(1, 4);
    q(0, 0) = 2.0;
    const AttentionRead read = attention_read(make_feature(2, q), bank);
    const double e = std::exp(1.0);
    CHECK(read.scores(0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(read.scores(0, 1) == Catch::Approx(0.0).margin(1e-12));
    CHECK(read.weights(0, 0) == Catch::Approx(e / (e + 1.0)).margin(1e-9));
    CHECK(read.weights(0, 0) == Catch::Approx(0.7311).margin(1e-4));
}

TEST_CASE("attention matches a by-definition oracle on random banks", "[memory]") {
    std::mt19937_64 rng(404);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int trial = 0; trial < 40; ++trial) {
        const int d = 1 + static_cast<int>(rng() % 16);
        const int per = 1 + static_cast<int>(rng() % 4);
        const int n_entries = 1 + static_cast<int>(rng() % 6);
        const int channels = 2 + static_cast<int>(rng() % 3);
        MemoryBank bank;
        bank.n_stm = 3;
        bank.ltm_stride = 2;
        for (int t = 0; t < n_entries; ++t) {
            Eigen::MatrixXd key(per, d), value(per, channels);
            for (int i = 0; i < per; ++i) {
                for (int k = 0; k < d; ++k) key(i, k) = gauss(rng);
                double z = 0.0;
                for (int c = 0; c < channels; ++c) {
                    value(i, c) = unit(rng) + 1e-3;
                    z += value(i, c);
                }
                value.row(i) /= z;
            }
            insert(bank, make_entry(t, key, value, per, 1));
        }
        Eigen::MatrixXd q(per, d);
        for (int i = 0; i < per; ++i)
            for (int k = 0; k < d; ++k) q(i, k) = gauss(rng);
        const FeatureMap query = make_feature(n_entries, q, per, 1);

        const AttentionRead got = attention_read(query, bank);
        const AttentionRead want = attention_oracle(query, bank);
        REQUIRE(got.scores.cols() == want.scores.cols());
        CHECK((got.scores - want.scores).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((got.weights - want.weights).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((got.reads - want.reads).cwiseAbs().maxCoeff() < 1e-12);

        for (int i = 0; i < per; ++i) {
            CHECK(got.weights.row(i).minCoeff() >= 0.0);
            CHECK(got.weights.row(i).sum() == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("reads stay inside the slot value range", "[memory]") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        MemoryBank bank;
        const int n_entries = 2 + static_cast<int>(rng() % 5);
        Eigen::MatrixXd all_values(n_entries, 3);
        for (int t = 0; t < n_entries; ++t) {
            Eigen::MatrixXd key(1, 6), value(1, 3);
            for (int k = 0; k < 6; ++k) key(0, k) = gauss(rng);
            for (int c = 0; c < 3; ++c) value(0, c) = gauss(rng);
            all_values.row(t) = value.row(0);
            insert(bank, make_entry(t, key, value));
        }
        Eigen::MatrixXd q(1, 6);
        for (int k = 0; k < 6; ++k) q(0, k) = gauss(rng);
        const AttentionRead read = attention_read(make_feature(n_entries, q), bank);
        for (int c = 0; c < 3; ++c) {
            CHECK(read.reads(0, c) >= all_values.col(c).minCoeff() - 1e-12);
            CHECK(read.reads(0, c) <= all_values.col(c).maxCoeff() + 1e-12);
        }
    }
}

TEST_CASE("shifting every score by a constant leaves weights alone", "[memory]") {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int d = 8;
    Eigen::MatrixXd q(1, d);
    for (int k = 0; k < d; ++k) q(0, k) = gauss(rng);
    const double qnorm2 = q.row(0).squaredNorm();

    MemoryBank plain, shifted;
    const double c = 3.7;
    // adding c*sqrt(d)*q/|q|^2 to a key adds exactly c to its score
    const Eigen::RowVectorXd delta = c * std::sqrt(static_cast<double>(d)) * q.row(0) / qnorm2;
    for (int t = 0; t < 6; ++t) {
        Eigen::MatrixXd key(1, d), value(1, 2);
        for (int k = 0; k < d; ++k) key(0, k) = gauss(rng);
        value << gauss(rng), gauss(rng);
        insert(plain, make_entry(t, key, value));
        Eigen::MatrixXd moved = key;
        moved.row(0) += delta;
        insert(shifted, make_entry(t, moved, value));
    }
    const FeatureMap query = make_feature(6, q);
    const AttentionRead a = attention_read(query, plain);
    const AttentionRead b = attention_read(query, shifted);
    CHECK((b.scores - a.scores - Eigen::MatrixXd::Constant(1, a.scores.cols(), c))
              .cwiseAbs()
              .maxCoeff() < 1e-9);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("stores sharing a frame index contribute one slot", "[memory]") {
    MemoryBank bank;
    bank.ltm_stride = 1;
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(1, 4, 1.0);
    const Eigen::MatrixXd value = Eigen::MatrixXd::Constant(1, 2, 0.5);
    seed(bank, 0, make_feature(0, key), value);  // in both stores
    insert(bank, make_entry(1, key, value));     // also in both (stride 1)
    REQUIRE(bank.stm.size() == 2);
    REQUIRE(bank.ltm.size() == 2);
    const AttentionRead read = attention_read(make_feature(2, key), bank);
    CHECK(read.weights.cols() == 2);
}

TEST_CASE("reading an empty bank fails", "[memory]") {
    MemoryBank bank;
    const Eigen::MatrixXd q = Eigen::MatrixXd::Zero(1, 4);
    CHECK_THROWS_AS(attention_read(make_feature(0, q), bank), ValueError);
}

TEST_CASE("mismatched grids are rejected", "[memory]") {
    MemoryBank bank;
    const Eigen::MatrixXd key = Eigen::MatrixXd::Constant(2, 4, 1.0);
    const Eigen::MatrixXd value = Eigen::MatrixXd::Constant(2, 2, 0.5);
    insert(bank, make_entry(0, key, value, 2, 1));

    const Eigen::MatrixXd q = Eigen::MatrixXd::Zero(1, 4);
    CHECK_THROWS_AS(attention_read(make_feature(1, q), bank), DimensionError);

    const MemoryEntry bad =
        make_entry(1, Eigen::MatrixXd::Zero(1, 4), Eigen::MatrixXd::Zero(1, 2));
    CHECK_THROWS_AS(insert(bank, bad), DimensionError);

    MemoryEntry torn = make_entry(2, key, Eigen::MatrixXd::Zero(1, 2), 2, 1);
    CHECK_THROWS_AS(insert(bank, torn), DimensionError);
}

TEST_CASE("read distributions decode like segmenter outputs", "[memory]") {
    AttentionRead read;
    read.grid_w = 2;
    read.grid_h = 1;
    read.reads.resize(2, 3);
    read.reads << 0.1, 0.8, 0.1, 0.2, 0.2, 0.6;
    const auto [probs, mask] = decode_read(read, 8, 4, 4);
    CHECK(mask.at(0, 0) == 1);
    CHECK(mask.at(3, 3) == 1);
    CHECK(mask.at(4, 0) == 2);
    CHECK(probs.at(1, 2, 1) == 0.8);
    CHECK(probs.at(6, 1, 2) == 0.6);
}

TEST_CASE("propagating a single seeded frame returns the seed", "[memory]") {
    const SegmenterConfig cfg;
    const SegmenterWeights w = init_weights(cfg, 2, 1);
    const std::vector<Frame> frames{make_split_frame(10, 6)};
    MaskMap seed_mask = make_split_mask(10, 6);
    seed_mask.at(7, 3) = 1;  // off the patch grid, so quantization would lose it
    const std::map<int, MaskMap> seeds{{0, seed_mask}};
    const std::vector<MaskMap> out = propagate(frames, seeds, w);
    REQUIRE(out.size() == 1);
    CHECK(out[0] == seed_mask);
}

TEST_CASE("a static scene propagates the quantized seed forever", "[memory]") {
    SegmenterConfig cfg;
    cfg.classes = 2;
    const SegmenterWeights w = make_color_probe_weights(cfg, 2, 1);
    const std::vector<Frame> frames(12, make_split_frame(16, 8));
    const MaskMap quantized = make_split_mask(16, 8);
    MaskMap seed_mask = quantized;
    seed_mask.at(8, 0) = 1;  // minority pixel inside the right patch
    const std::map<int, MaskMap> seeds{{0, seed_mask}};

    std::vector<double> ms;
    const std::vector<MaskMap> out = propagate(frames, seeds, w, {}, &ms);
    REQUIRE(out.size() == 12);
    REQUIRE(ms.size() == 12);
    CHECK(out[0] == seed_mask);
    for (int t = 1; t < 12; ++t) CHECK(out[t] == quantized);
    for (double v : ms) CHECK(v >= 0.0);
}

TEST_CASE("propagation is deterministic", "[memory]") {
    SegmenterConfig cfg;
    cfg.classes = 2;
    cfg.seed = 5;
    const SegmenterWeights w = init_weights(cfg, 2, 2);
    std::vector<Frame> frames;
    std::mt19937_64 rng(9);
    for (int t = 0; t < 8; ++t) {
        Frame f = Frame::filled(16, 16, 0, 0, 0);
        for (auto& b : f.data) b = static_cast<std::uint8_t>(rng() % 256);
        frames.push_back(std::move(f));
    }
    const std::map<int, MaskMap> seeds{{0, make_split_mask(16, 16)}};
    const std::vector<MaskMap> a = propagate(frames, seeds, w);
    const std::vector<MaskMap> b = propagate(frames, seeds, w);
    REQUIRE(a.size() == b.size());
    for (size_t t = 0; t < a.size(); ++t) CHECK(a[t] == b[t]);
}

TEST_CASE("propagation validates its inputs", "[memory]") {
    const SegmenterConfig cfg;
    const SegmenterWeights w = init_weights(cfg, 2, 1);
    const std::vector<Frame> frames{make_split_frame(16, 8), make_split_frame(16, 8)};

    CHECK_THROWS_AS(propagate(frames, {}, w), ValueError);
    CHECK_THROWS_AS(propagate(frames, {{5, make_split_mask(16, 8)}}, w), ValueError);
    CHECK_THROWS_AS(propagate(frames, {{0, make_split_mask(8, 8)}}, w), DimensionError);

    std::vector<Frame> torn = frames;
    torn.push_back(make_split_frame(8, 8));
    CHECK_THROWS_AS(propagate(torn, {{0, make_split_mask(16, 8)}}, w), DimensionError);
}

TEST_CASE("tracking follows a moving square", "[memory]") {
    SegmenterConfig cfg;
    cfg.patch_size = 4;
    cfg.classes = 1;
    const MovingSquareScene scene = make_moving_square_scene(32, 32, 15, 16);
    const SegmenterWeights w = make_color_probe_weights(cfg, 8, 8);
    const std::map<int, MaskMap> seeds{{0, scene.truths[0]}};
    const std::vector<MaskMap> out = propagate(scene.frames, seeds, w);

    for (int t = 0; t < 15; ++t) {
        int inter = 0, uni = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const bool p = out[t].at(x, y) == 1, g = scene.truths[t].at(x, y) == 1;
                inter += p && g;
                uni += p || g;
            }
        REQUIRE(uni > 0);
        CHECK(static_cast<double>(inter) / uni >= 0.8);
    }
}
