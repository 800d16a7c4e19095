#include <catch2/catch_amalgamated.hpp>

#include "memseg/metrics.hpp"
#include <vector>
#include "support/gradcheck.hpp"

using namespace memseg;

TEST_CASE("analytic gradients match central finite differences", "[gradients]") {
    for (std::uint64_t seed : {1ull, 7ull, 42ull}) {
        const testsupport::GradCheckResult r = testsupport::gradient_check(seed);
        INFO("seed " << seed << ", worst gap " << r.worst_gap);
        CHECK(r.checked > 1000);  // every tensor, every element
        CHECK(r.failed == 0);
    }
}

TEST_CASE("gradients of a loss plateau are numerically flat", "[gradients]") {
    // all-zero weights: logits are constant in the patch projection inputs,
    // so only class_bias and downstream tensors receive signal
    SegmenterConfig cfg;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.classes = 2;
    const SegmenterWeights w = detail::make_weight_shell(cfg, 2, 2);
    const Frame f = Frame::filled(8, 8, 128, 64, 32);
    const MaskMap gt = MaskMap::filled(8, 8, 1);
    SegmenterWeights grads;
    training_gradients(w, f, gt, grads);
    // uniform distribution vs one-hot target: d logits = (1/3 - onehot)/N
    CHECK(grads.class_bias(0) == Catch::Approx(1.0 / 3.0).margin(1e-12));
    CHECK(grads.class_bias(1) == Catch::Approx(1.0 / 3.0 - 1.0).margin(1e-12));
    CHECK(grads.class_bias(2) == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("train steps descend the training loss", "[gradients]") {
    SegmenterConfig cfg;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.classes = 2;
    cfg.seed = 5;
    SegmenterWeights w = init_weights(cfg, 2, 2);
    std::mt19937_64 gen(17);
    Frame f;
    f.width = 8;
    f.height = 8;
    f.data.resize(8 * 8 * 3);
    for (auto& b : f.data) b = static_cast<std::uint8_t>(gen() & 0xff);
    MaskMap gt = MaskMap::filled(8, 8, 0);
    for (int x = 0; x < 4; ++x)
        for (int y = 0; y < 8; ++y) gt.at(x, y) = 2;

    TrainState state = init_train_state(w, 200);
    state.base_lr = 0.05;
    const double first = training_loss(w, f, gt);
    double last = first;
    for (int i = 0; i < 200; ++i) last = train_step(w, state, f, gt);
    CHECK(state.iter == 200);
    CHECK(last < first * 0.5);
}

TEST_CASE("training improves segmentation of the training set", "[gradients]") {
    SegmenterConfig cfg;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.classes = 2;
    cfg.seed = 12;
    const SegmenterWeights untrained = init_weights(cfg, 4, 4);

    // two color-coded layouts: vertical and horizontal splits
    std::vector<Frame> frames;
    std::vector<MaskMap> truths;
    for (int variant = 0; variant < 2; ++variant) {
        Frame f = Frame::filled(16, 16, 0, 0, 0);
        MaskMap m = MaskMap::filled(16, 16, 0);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const bool first = variant == 0 ? x < 8 : y < 8;
                f.at(x, y, 0) = first ? 210 : 10;
                f.at(x, y, 1) = first ? 10 : 210;
                f.at(x, y, 2) = 60;
                m.at(x, y) = first ? 1 : 2;
            }
        frames.push_back(std::move(f));
        truths.push_back(std::move(m));
    }

    const auto mean_iou = [&](const SegmenterWeights& w) {
        double total = 0.0;
        for (std::size_t i = 0; i < frames.size(); ++i)
            total += miou(confusion(segment(frames[i], w).second, truths[i], 3));
        return total / static_cast<double>(frames.size());
    };

    SegmenterWeights w = untrained;
    TrainState state = init_train_state(w, 400);
    state.base_lr = 0.02;
    for (int i = 0; i < 400; ++i)
        train_step(w, state, frames[i % 2], truths[i % 2]);

    const double before = mean_iou(untrained);
    const double after = mean_iou(w);
    CHECK(after > before);
    CHECK(after > 0.9);
}
