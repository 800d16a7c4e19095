#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "memseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace memseg;

namespace {

struct RunFlags {
    std::string config_path;
    RunConfig values;
    CLI::Option *scene = nullptr, *out = nullptr, *weights = nullptr, *k = nullptr,
                *threshold = nullptr, *patch = nullptr, *n_stm = nullptr, *stride = nullptr,
                *cap = nullptr, *seed = nullptr;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--config", f.config_path, "key = value config file");
    f.scene = cmd->add_option("--scene", f.values.scene, "directory of .ppm frames");
    f.out = cmd->add_option("--out", f.values.out, "output directory");
    f.weights = cmd->add_option("--weights", f.values.weights, "segmenter weight file");
    f.k = cmd->add_option("-k,--k", f.values.k, "number of seed masks");
    f.threshold = cmd->add_option("--hamming-threshold", f.values.hamming_threshold,
                                  "keyframe dedup distance");
    f.patch = cmd->add_option("--patch-size", f.values.patch_size, "patch size");
    f.n_stm = cmd->add_option("--n-stm", f.values.n_stm, "short-term memory capacity");
    f.stride = cmd->add_option("--ltm-stride", f.values.ltm_stride, "long-term sampling stride");
    f.cap = cmd->add_option("--ltm-cap", f.values.cap_ltm, "long-term memory capacity");
    f.seed = cmd->add_option("--seed", f.values.seed, "run seed");
}

RunConfig resolve(const RunFlags& f) {
    RunConfig cfg = f.config_path.empty() ? RunConfig{} : parse_config(f.config_path);
    if (f.scene->count()) cfg.scene = f.values.scene;
    if (f.out->count()) cfg.out = f.values.out;
    if (f.weights->count()) cfg.weights = f.values.weights;
    if (f.k->count()) cfg.k = f.values.k;
    if (f.threshold->count()) cfg.hamming_threshold = f.values.hamming_threshold;
    if (f.patch->count()) cfg.patch_size = f.values.patch_size;
    if (f.n_stm->count()) cfg.n_stm = f.values.n_stm;
    if (f.stride->count()) cfg.ltm_stride = f.values.ltm_stride;
    if (f.cap->count()) cfg.cap_ltm = f.values.cap_ltm;
    if (f.seed->count()) cfg.seed = f.values.seed;
    cfg.validate();
    return cfg;
}

std::vector<fs::path> files_with(const std::string& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw ValueError("not a directory: " + dir);
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ext)
            out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"keyframe-seeded video mask propagation"};
    app.require_subcommand(1);

    auto* cmd_segment = app.add_subcommand("segment", "segment a scene and propagate masks");
    RunFlags seg_flags;
    add_run_flags(cmd_segment, seg_flags);
    cmd_segment->callback([&] {
        const RunConfig cfg = resolve(seg_flags);
        if (cfg.scene.empty() || cfg.out.empty() || cfg.weights.empty())
            throw ValueError("segment needs --scene, --out, and --weights");
        const SegmentResult result = run_segment(cfg);
        std::printf("wrote %zu masks to %s (seeds:", result.masks.size(), cfg.out.c_str());
        for (int idx : result.seed_indices) std::printf(" %d", idx);
        std::printf(")\n");
    });

    auto* cmd_eval = app.add_subcommand("eval", "score predicted masks against ground truth");
    std::string pred_dir, gt_dir, report_path;
    bool binary_ap = false;
    cmd_eval->add_option("--pred", pred_dir, "prediction root")->required();
    cmd_eval->add_option("--gt", gt_dir, "ground-truth root")->required();
    cmd_eval->add_option("--out", report_path, "report csv path");
    cmd_eval->add_flag("--binary-ap", binary_ap, "score AP as binary mask precision");
    cmd_eval->callback([&] {
        const MetricReport report = run_eval(pred_dir, gt_dir, report_path, binary_ap);
        std::fputs(render_report(report).c_str(), stdout);
    });

    auto* cmd_ablate = app.add_subcommand("ablate", "sweep seed-mask counts 1,3,6,9");
    RunFlags abl_flags;
    std::string abl_gt;
    add_run_flags(cmd_ablate, abl_flags);
    cmd_ablate->add_option("--gt", abl_gt, "ground-truth root")->required();
    cmd_ablate->callback([&] {
        const RunConfig cfg = resolve(abl_flags);
        if (cfg.scene.empty() || cfg.out.empty() || cfg.weights.empty())
            throw ValueError("ablate needs --scene, --out, and --weights");
        const auto rows = run_ablation(cfg, abl_gt);
        for (const auto& row : rows)
            std::printf("k=%d wall_ms=%.3f miou=%s\n", row.k, row.wall_ms,
                        detail::format_metric(row.metrics.miou).c_str());
    });

    auto* cmd_keyframes = app.add_subcommand("keyframes", "list kept keyframes of a scene");
    std::string kf_scene;
    int kf_threshold = 12;
    cmd_keyframes->add_option("--scene", kf_scene, "directory of .ppm frames")->required();
    cmd_keyframes->add_option("--hamming-threshold", kf_threshold, "dedup distance");
    cmd_keyframes->callback([&] {
        if (kf_threshold < 0 || kf_threshold > 64)
            throw ValueError("hamming_threshold must lie in [0, 64]");
        const auto files = files_with(kf_scene, ".ppm");
        if (files.empty()) throw ValueError("empty scene: no .ppm frames in " + kf_scene);
        std::vector<Frame> frames;
        for (const auto& f : files) frames.push_back(load_frame(f.string()));
        const KeyframeSelection kept = dedup(frames, kf_threshold);
        for (int idx : kept.kept)
            std::printf("%d,%s\n", idx, files[idx].filename().string().c_str());
    });

    SegmenterConfig shape;
    const auto add_shape_flags = [&shape](CLI::App* cmd) {
        cmd->add_option("--patch-size", shape.patch_size, "patch size");
        cmd->add_option("--embed-dim", shape.embed_dim, "embedding width");
        cmd->add_option("--layers", shape.layers, "encoder depth");
        cmd->add_option("--heads", shape.heads, "attention heads");
        cmd->add_option("--classes", shape.classes, "food classes (background excluded)");
        cmd->add_option("--mlp-ratio", shape.mlp_ratio, "mlp widening factor");
        cmd->add_option("--seed", shape.seed, "init seed");
    };

    auto* cmd_init = app.add_subcommand("weights-init", "write freshly initialized weights");
    std::string init_out;
    int grid_w = 8, grid_h = 8;
    cmd_init->add_option("--out", init_out, "weight file path")->required();
    add_shape_flags(cmd_init);
    cmd_init->add_option("--grid-w", grid_w, "positional grid width");
    cmd_init->add_option("--grid-h", grid_h, "positional grid height");
    cmd_init->callback([&] { save_weights(init_weights(shape, grid_w, grid_h), init_out); });

    auto* cmd_train = app.add_subcommand("train", "fit weights on frame/mask pairs");
    std::string train_scene, train_gt, train_out;
    int iters = 100;
    double base_lr = 1e-3;
    cmd_train->add_option("--scene", train_scene, "directory of .ppm frames")->required();
    cmd_train->add_option("--gt", train_gt, "directory of .pgm masks")->required();
    cmd_train->add_option("--weights", train_out, "output weight file")->required();
    cmd_train->add_option("--iters", iters, "training iterations");
    cmd_train->add_option("--lr", base_lr, "base learning rate");
    add_shape_flags(cmd_train);
    cmd_train->callback([&] {
        if (iters < 1) throw ValueError("iters must be at least 1");
        const auto frame_files = files_with(train_scene, ".ppm");
        if (frame_files.empty())
            throw ValueError("empty scene: no .ppm frames in " + train_scene);
        std::vector<Frame> frames;
        std::vector<MaskMap> masks;
        for (const auto& f : frame_files) {
            frames.push_back(load_frame(f.string()));
            fs::path mask_file = fs::path(train_gt) / f.filename();
            mask_file.replace_extension(".pgm");
            if (!fs::exists(mask_file))
                throw ValueError("no ground-truth mask for " + f.filename().string());
            masks.push_back(load_mask(mask_file.string()));
        }
        const int p = shape.patch_size;
        const int gw = (frames.front().width + p - 1) / p;
        const int gh = (frames.front().height + p - 1) / p;
        SegmenterWeights w = init_weights(shape, gw, gh);
        TrainState state = init_train_state(w, iters);
        state.base_lr = base_lr;
        double first = 0.0, last = 0.0;
        for (int i = 0; i < iters; ++i) {
            const std::size_t pick = static_cast<std::size_t>(i) % frames.size();
            last = train_step(w, state, frames[pick], masks[pick]);
            if (i == 0) first = last;
        }
        save_weights(w, train_out);
        std::printf("trained %d iterations, loss %.6f -> %.6f\n", iters, first, last);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
