#pragma once

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "memseg/errors.hpp"
#include "memseg/keyframes.hpp"
#include "memseg/memory.hpp"
#include "memseg/metrics.hpp"
#include "memseg/raster.hpp"
#include "memseg/segmenter.hpp"

namespace memseg {

struct RunConfig {
    std::string scene;
    std::string out;
    std::string weights;
    int k = 1;
    int hamming_threshold = 12;
    int patch_size = 8;
    int n_stm = 5;
    int ltm_stride = 5;
    int cap_ltm = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (k < 1) throw ValueError("k must be at least 1");
        if (hamming_threshold < 0 || hamming_threshold > 64)
            throw ValueError("hamming_threshold must lie in [0, 64]");
        if (patch_size < 1) throw ValueError("patch_size must be positive");
        if (n_stm < 1) throw ValueError("n_stm must be at least 1");
        if (ltm_stride < 1) throw ValueError("ltm_stride must be at least 1");
        if (cap_ltm < 1) throw ValueError("ltm_cap must be at least 1");
    }
};

struct TimingReport {
    double dedup_ms = 0.0;
    double seed_segmentation_ms = 0.0;
    double propagation_ms = 0.0;
    std::vector<double> frame_ms;
    int frames = 0;
    int seeds = 0;
};

struct SegmentResult {
    std::vector<std::string> frame_names;  // sorted input order, mask names share stems
    std::vector<MaskMap> masks;
    std::vector<int> seed_indices;
    TimingReport timing;
};

namespace detail {

inline std::vector<std::filesystem::path> list_files(const std::string& dir,
                                                     const std::string& ext) {
    if (!std::filesystem::is_directory(dir)) throw ValueError("not a directory: " + dir);
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ext)
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    return files;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since)
        .count();
}

}  // namespace detail

/// K seed positions uniformly spaced over the kept keyframes; duplicates
/// collapse when fewer keyframes than K exist.
inline std::vector<int> select_seed_frames(const KeyframeSelection& keyframes, int k) {
    if (keyframes.kept.empty()) throw ValueError("no keyframes to select from");
    if (k < 1) throw ValueError("k must be at least 1");
    const int m = static_cast<int>(keyframes.kept.size());
    std::vector<int> out;
    if (k == 1) {
        out.push_back(keyframes.kept.front());
        return out;
    }
    for (int j = 0; j < k; ++j) {
        const double pos = static_cast<double>(j) * (m - 1) / (k - 1);
        const int idx = keyframes.kept[static_cast<int>(std::llround(pos))];
        if (out.empty() || out.back() != idx) out.push_back(idx);
    }
    return out;
}

inline void write_timing(const TimingReport& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValueError("cannot write timing report: " + path);
    char buf[64];
    out << "stage,id,ms\n";
    std::snprintf(buf, sizeof buf, "dedup,,%.3f\n", t.dedup_ms);
    out << buf;
    std::snprintf(buf, sizeof buf, "seed_segmentation,,%.3f\n", t.seed_segmentation_ms);
    out << buf;
    std::snprintf(buf, sizeof buf, "propagation,,%.3f\n", t.propagation_ms);
    out << buf;
    for (std::size_t i = 0; i < t.frame_ms.size(); ++i) {
        std::snprintf(buf, sizeof buf, "frame,%zu,%.3f\n", i, t.frame_ms[i]);
        out << buf;
    }
}

/// Two-phase run: dedup gates which frames may carry seeds, the segmenter
/// masks those seeds, and memory propagation covers every frame. Mask bytes
/// are deterministic for a fixed config; timing values are measurements.
inline SegmentResult run_segment(const RunConfig& cfg) {
    cfg.validate();
    SegmenterWeights weights = load_weights(cfg.weights);
    if (weights.config.patch_size != cfg.patch_size)
        throw ValueError("weights use patch size " + std::to_string(weights.config.patch_size) +
                         " but the run requests " + std::to_string(cfg.patch_size));

    const auto files = detail::list_files(cfg.scene, ".ppm");
    if (files.empty()) throw ValueError("empty scene: no .ppm frames in " + cfg.scene);
    SegmentResult result;
    std::vector<Frame> frames;
    for (const auto& f : files) {
        frames.push_back(load_frame(f.string()));
        result.frame_names.push_back(f.filename().string());
    }

    const int p = weights.config.patch_size;
    const int grid_w = (frames.front().width + p - 1) / p;
    const int grid_h = (frames.front().height + p - 1) / p;
    weights = interpolate_pos(weights, grid_w, grid_h);

    auto t0 = std::chrono::steady_clock::now();
    const KeyframeSelection kept = dedup(frames, cfg.hamming_threshold);
    result.timing.dedup_ms = detail::elapsed_ms(t0);

    result.seed_indices = select_seed_frames(kept, cfg.k);
    t0 = std::chrono::steady_clock::now();
    std::map<int, MaskMap> seeds;
    for (int idx : result.seed_indices) seeds.emplace(idx, segment(frames[idx], weights).second);
    result.timing.seed_segmentation_ms = detail::elapsed_ms(t0);
    result.timing.seeds = static_cast<int>(seeds.size());

    MemoryParams params;
    params.n_stm = cfg.n_stm;
    params.ltm_stride = cfg.ltm_stride;
    params.cap_ltm = cfg.cap_ltm;
    t0 = std::chrono::steady_clock::now();
    result.masks = propagate(frames, seeds, weights, params, &result.timing.frame_ms);
    result.timing.propagation_ms = detail::elapsed_ms(t0);
    result.timing.frames = static_cast<int>(frames.size());

    if (!cfg.out.empty()) {
        const std::filesystem::path out_dir(cfg.out);
        std::filesystem::create_directories(out_dir / "masks");
        for (std::size_t i = 0; i < result.masks.size(); ++i) {
            std::filesystem::path name(result.frame_names[i]);
            name.replace_extension(".pgm");
            save_mask(result.masks[i], (out_dir / "masks" / name).string());
        }
        write_timing(result.timing, (out_dir / "timing.csv").string());
    }
    return result;
}

namespace detail {

/// A root is either one scene (a masks/ dir or loose .pgm files) or a
/// directory of scene subdirectories each holding masks/.
inline std::vector<std::pair<std::string, std::vector<std::string>>> discover_scenes(
    const std::string& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw ValueError("not a directory: " + root);
    std::vector<std::pair<std::string, std::vector<std::string>>> scenes;
    const auto names_in = [](const fs::path& dir) {
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().extension() == ".pgm")
                names.push_back(entry.path().filename().string());
        std::sort(names.begin(), names.end());
        return names;
    };
    if (fs::is_directory(fs::path(root) / "masks")) {
        scenes.emplace_back(".", names_in(fs::path(root) / "masks"));
        return scenes;
    }
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory() && fs::is_directory(entry.path() / "masks"))
            scenes.emplace_back(entry.path().filename().string(),
                                names_in(entry.path() / "masks"));
    if (!scenes.empty()) {
        std::sort(scenes.begin(), scenes.end());
        return scenes;
    }
    auto loose = names_in(root);
    if (!loose.empty()) {
        scenes.emplace_back(".", std::move(loose));
        return scenes;
    }
    throw ValueError("no mask files found under " + root);
}

inline std::string mask_path(const std::string& root, const std::string& scene,
                             const std::string& name) {
    namespace fs = std::filesystem;
    fs::path base(root);
    if (scene != ".") base /= scene;
    if (fs::is_directory(base / "masks")) base /= "masks";
    return (base / name).string();
}

}  // namespace detail

/// Pairs prediction and ground-truth masks by scene and file name, scores
/// each pair, and aggregates scene means into an overall mean.
inline MetricReport run_eval(const std::string& pred_root, const std::string& gt_root,
                             const std::string& report_path = "",
                             bool binary_ap_mode = false) {
    const auto pred_scenes = detail::discover_scenes(pred_root);
    const auto gt_scenes = detail::discover_scenes(gt_root);

    std::string unpaired;
    const auto note = [&unpaired](const std::string& side, const std::string& scene,
                                  const std::string& name) {
        if (!unpaired.empty()) unpaired += ", ";
        unpaired += side + " " + (scene == "." ? name : scene + "/" + name);
    };
    std::map<std::string, std::vector<std::string>> gt_by_scene;
    for (const auto& [scene, names] : gt_scenes) gt_by_scene[scene] = names;
    std::map<std::string, std::vector<std::string>> pred_by_scene;
    for (const auto& [scene, names] : pred_scenes) pred_by_scene[scene] = names;
    for (const auto& [scene, names] : pred_scenes) {
        const auto it = gt_by_scene.find(scene);
        for (const auto& name : names)
            if (it == gt_by_scene.end() ||
                !std::binary_search(it->second.begin(), it->second.end(), name))
                note("prediction", scene, name);
    }
    for (const auto& [scene, names] : gt_scenes) {
        const auto it = pred_by_scene.find(scene);
        for (const auto& name : names)
            if (it == pred_by_scene.end() ||
                !std::binary_search(it->second.begin(), it->second.end(), name))
                note("ground truth", scene, name);
    }
    if (!unpaired.empty()) throw ValueError("unpaired mask files: " + unpaired);

    std::vector<std::pair<MaskMap, MaskMap>> pairs;
    std::vector<std::pair<std::string, std::string>> labels;  // scene, image id
    int n_classes = 2;
    for (const auto& [scene, names] : pred_scenes)
        for (const auto& name : names) {
            MaskMap pred = load_mask(detail::mask_path(pred_root, scene, name));
            MaskMap gt = load_mask(detail::mask_path(gt_root, scene, name));
            for (auto v : pred.data) n_classes = std::max(n_classes, v + 1);
            for (auto v : gt.data) n_classes = std::max(n_classes, v + 1);
            labels.emplace_back(scene, scene == "." ? name : scene + "/" + name);
            pairs.emplace_back(std::move(pred), std::move(gt));
        }

    std::vector<SceneScore> scenes;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (scenes.empty() || scenes.back().id != labels[i].first) {
            scenes.emplace_back();
            scenes.back().id = labels[i].first;
        }
        scenes.back().images.push_back(score_image(labels[i].second, pairs[i].first,
                                                   pairs[i].second, n_classes,
                                                   binary_ap_mode));
    }
    const MetricReport report = aggregate(scenes, n_classes);
    if (!report_path.empty()) emit_report(report, report_path);
    return report;
}

struct AblationRow {
    int k = 0;
    MetricValues metrics;
    double wall_ms = 0.0;
};

/// One run_segment + run_eval per K, each under <out>/k<K>, summarized in
/// <out>/ablation.csv.
inline std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::string& gt_root,
                                             const std::vector<int>& k_list = {1, 3, 6, 9}) {
    cfg.validate();
    if (k_list.empty()) throw ValueError("empty k list");
    std::vector<AblationRow> rows;
    for (int k : k_list) {
        RunConfig sub = cfg;
        sub.k = k;
        sub.out = (std::filesystem::path(cfg.out) / ("k" + std::to_string(k))).string();
        const auto t0 = std::chrono::steady_clock::now();
        run_segment(sub);
        AblationRow row;
        row.k = k;
        row.wall_ms = detail::elapsed_ms(t0);
        row.metrics = run_eval(sub.out, gt_root).overall;
        rows.push_back(row);
    }
    std::filesystem::create_directories(cfg.out);
    const std::string table_path = (std::filesystem::path(cfg.out) / "ablation.csv").string();
    std::ofstream out(table_path, std::ios::binary);
    if (!out) throw ValueError("cannot write ablation table: " + table_path);
    out << "k,map,recall,miou,macc,wall_ms\n";
    for (const auto& row : rows) {
        char buf[64];
        out << row.k << "," << detail::format_metric(row.metrics.map) << ","
            << detail::format_metric(row.metrics.recall) << ","
            << detail::format_metric(row.metrics.miou) << ","
            << detail::format_metric(row.metrics.macc) << ",";
        std::snprintf(buf, sizeof buf, "%.3f\n", row.wall_ms);
        out << buf;
    }
    return rows;
}

/// `key = value` lines with # comments; every key is a RunConfig field.
/// Unknown keys are rejected so typos cannot silently fall back to defaults.
inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValueError("cannot read config: " + path);
    RunConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(line_no) + " has no '='");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw FormatError("config line " + std::to_string(line_no) + " is incomplete");
        const auto as_int = [&](int lo, int hi) {
            std::size_t used = 0;
            long long v = 0;
            try {
                v = std::stoll(value, &used);
            } catch (const std::exception&) {
                throw FormatError("config value for " + key + " is not an integer: " + value);
            }
            if (used != value.size())
                throw FormatError("config value for " + key + " is not an integer: " + value);
            if (v < lo || v > hi)
                throw ValueError("config value for " + key + " is out of range: " + value);
            return static_cast<int>(v);
        };
        if (key == "scene") {
            cfg.scene = value;
        } else if (key == "out") {
            cfg.out = value;
        } else if (key == "weights") {
            cfg.weights = value;
        } else if (key == "k") {
            cfg.k = as_int(INT_MIN, INT_MAX);
        } else if (key == "hamming_threshold") {
            cfg.hamming_threshold = as_int(INT_MIN, INT_MAX);
        } else if (key == "patch_size") {
            cfg.patch_size = as_int(INT_MIN, INT_MAX);
        } else if (key == "n_stm") {
            cfg.n_stm = as_int(INT_MIN, INT_MAX);
        } else if (key == "ltm_stride") {
            cfg.ltm_stride = as_int(INT_MIN, INT_MAX);
        } else if (key == "ltm_cap") {
            cfg.cap_ltm = as_int(INT_MIN, INT_MAX);
        } else if (key == "seed") {
            try {
                std::size_t used = 0;
                cfg.seed = std::stoull(value, &used);
                if (used != value.size()) throw std::invalid_argument(value);
            } catch (const std::exception&) {
                throw FormatError("config value for seed is not an integer: " + value);
            }
        } else {
            throw ValueError("unknown config key: " + key);
        }
    }
    cfg.validate();
    return cfg;
}

}  // namespace memseg
