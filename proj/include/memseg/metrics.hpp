#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "memseg/errors.hpp"
#include "memseg/raster.hpp"

namespace memseg {

struct ConfusionCounts {
    std::vector<long long> tp, fp, fn;
    int classes() const { return static_cast<int>(tp.size()); }
    long long gt_pixels(int c) const { return tp[c] + fn[c]; }
};

struct ImageScore {
    std::string id;
    std::optional<double> map, recall, miou, macc;
};

struct MetricValues {
    std::optional<double> map, recall, miou, macc;
};

struct SceneScore {
    std::string id;
    MetricValues mean;
    std::vector<ImageScore> images;
};

struct MetricReport {
    std::vector<SceneScore> scenes;
    MetricValues overall;
    int n_classes = 0;
};

inline ConfusionCounts confusion(const MaskMap& pred, const MaskMap& gt, int n_classes) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw DimensionError("confusion: mask dims differ");
    if (n_classes < 1) throw ValueError("confusion: need at least one class");
    ConfusionCounts counts;
    counts.tp.assign(n_classes, 0);
    counts.fp.assign(n_classes, 0);
    counts.fn.assign(n_classes, 0);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const int p = pred.data[i], g = gt.data[i];
        if (p >= n_classes || g >= n_classes)
            throw ValueError("confusion: label outside the class set");
        if (p == g) {
            ++counts.tp[p];
        } else {
            ++counts.fp[p];
            ++counts.fn[g];
        }
    }
    return counts;
}

/// Undefined (empty union) classes are excluded from means, never counted as 0.
inline std::vector<std::optional<double>> iou_per_class(const ConfusionCounts& c) {
    std::vector<std::optional<double>> out(c.classes());
    for (int i = 0; i < c.classes(); ++i) {
        const long long uni = c.tp[i] + c.fp[i] + c.fn[i];
        if (uni > 0) out[i] = static_cast<double>(c.tp[i]) / static_cast<double>(uni);
    }
    return out;
}

inline std::vector<std::optional<double>> acc_per_class(const ConfusionCounts& c) {
    std::vector<std::optional<double>> out(c.classes());
    for (int i = 0; i < c.classes(); ++i)
        if (c.gt_pixels(i) > 0)
            out[i] = static_cast<double>(c.tp[i]) / static_cast<double>(c.gt_pixels(i));
    return out;
}

namespace detail {

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& values) {
    double sum = 0.0;
    int n = 0;
    for (const auto& v : values)
        if (v) {
            sum += *v;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / n;
}

}  // namespace detail

inline double miou(const ConfusionCounts& c) {
    const auto m = detail::mean_defined(iou_per_class(c));
    if (!m) throw ValueError("miou: no class present in either mask");
    return *m;
}

inline double macc(const ConfusionCounts& c) {
    const auto m = detail::mean_defined(acc_per_class(c));
    if (!m) throw ValueError("macc: no ground-truth pixels");
    return *m;
}

/// Micro-averaged over the food classes; background (class 0) never counts.
inline double recall(const ConfusionCounts& c) {
    long long tp = 0, fn = 0;
    for (int i = 1; i < c.classes(); ++i) {
        tp += c.tp[i];
        fn += c.fn[i];
    }
    if (tp + fn == 0) throw ValueError("recall: no food pixels in ground truth");
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

/// All-point interpolation: rank pixels by class probability (raster order on
/// ties), accumulate precision at each positive rank.
inline std::optional<double> average_precision(const ProbMap& prob, const MaskMap& gt,
                                               int cls) {
    if (prob.width != gt.width || prob.height != gt.height)
        throw DimensionError("average_precision: dims differ");
    if (cls < 0 || cls >= prob.classes)
        throw ValueError("average_precision: class outside the probability map");
    const int n = prob.width * prob.height;
    long long positives = 0;
    for (int i = 0; i < n; ++i) positives += gt.data[i] == cls;
    if (positives == 0) return std::nullopt;

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = prob.data[a * prob.classes + cls];
        const double sb = prob.data[b * prob.classes + cls];
        if (sa != sb) return sa > sb;
        return a < b;
    });

    double ap = 0.0;
    long long hits = 0;
    for (int k = 0; k < n; ++k)
        if (gt.data[order[k]] == cls) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    return ap / static_cast<double>(positives);
}

inline double map_score(const ProbMap& prob, const MaskMap& gt) {
    std::vector<std::optional<double>> aps(prob.classes);
    for (int c = 0; c < prob.classes; ++c) aps[c] = average_precision(prob, gt, c);
    const auto m = detail::mean_defined(aps);
    if (!m) throw ValueError("map: no class has ground-truth pixels");
    return *m;
}

namespace detail {

inline ProbMap one_hot_probs(const MaskMap& mask, int n_classes) {
    ProbMap prob;
    prob.width = mask.width;
    prob.height = mask.height;
    prob.classes = n_classes;
    prob.data.assign(static_cast<std::size_t>(mask.width) * mask.height * n_classes, 0.0);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (mask.data[i] >= n_classes) throw ValueError("mask label outside the class set");
        prob.data[i * n_classes + mask.data[i]] = 1.0;
    }
    return prob;
}

/// Mask-only fallback: AP collapses to the prediction's precision (0 when the
/// class is never predicted).
inline std::optional<double> binary_ap(const ConfusionCounts& c, int cls) {
    if (c.gt_pixels(cls) == 0) return std::nullopt;
    const long long predicted = c.tp[cls] + c.fp[cls];
    if (predicted == 0) return 0.0;
    return static_cast<double>(c.tp[cls]) / static_cast<double>(predicted);
}

}  // namespace detail

inline ImageScore score_image(const std::string& id, const ProbMap& prob, const MaskMap& pred,
                              const MaskMap& gt, bool binary_ap_mode = false) {
    const ConfusionCounts c = confusion(pred, gt, prob.classes);
    ImageScore score;
    score.id = id;
    score.miou = detail::mean_defined(iou_per_class(c));
    score.macc = detail::mean_defined(acc_per_class(c));
    long long food_tp = 0, food_fn = 0;
    for (int i = 1; i < c.classes(); ++i) {
        food_tp += c.tp[i];
        food_fn += c.fn[i];
    }
    if (food_tp + food_fn > 0)
        score.recall = static_cast<double>(food_tp) / static_cast<double>(food_tp + food_fn);
    std::vector<std::optional<double>> aps(prob.classes);
    for (int cls = 0; cls < prob.classes; ++cls)
        aps[cls] = binary_ap_mode ? detail::binary_ap(c, cls) : average_precision(prob, gt, cls);
    score.map = detail::mean_defined(aps);
    return score;
}

inline ImageScore score_image(const std::string& id, const MaskMap& pred, const MaskMap& gt,
                              int n_classes, bool binary_ap_mode = false) {
    return score_image(id, detail::one_hot_probs(pred, n_classes), pred, gt, binary_ap_mode);
}

namespace detail {

/// Sorted before summing so image and scene order cannot perturb a mean.
inline std::optional<double> order_free_mean(std::vector<double> values) {
    if (values.empty()) return std::nullopt;
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}

template <class Getter>
std::optional<double> mean_over(const std::vector<ImageScore>& images, Getter get) {
    std::vector<double> defined;
    for (const auto& s : images)
        if (get(s)) defined.push_back(*get(s));
    return order_free_mean(std::move(defined));
}

}  // namespace detail

/// Scene mean over defined per-image values, then an unweighted mean of scene
/// means; a scene with many images weighs the same as one with a single image.
inline MetricReport aggregate(const std::vector<SceneScore>& scenes, int n_classes = 0) {
    if (scenes.empty()) throw ValueError("aggregate: no scenes");
    MetricReport report;
    report.n_classes = n_classes;
    report.scenes = scenes;
    std::vector<double> maps, recalls, mious, maccs;
    for (auto& scene : report.scenes) {
        scene.mean.map = detail::mean_over(scene.images, [](const ImageScore& s) { return s.map; });
        scene.mean.recall =
            detail::mean_over(scene.images, [](const ImageScore& s) { return s.recall; });
        scene.mean.miou =
            detail::mean_over(scene.images, [](const ImageScore& s) { return s.miou; });
        scene.mean.macc =
            detail::mean_over(scene.images, [](const ImageScore& s) { return s.macc; });
        if (scene.mean.map) maps.push_back(*scene.mean.map);
        if (scene.mean.recall) recalls.push_back(*scene.mean.recall);
        if (scene.mean.miou) mious.push_back(*scene.mean.miou);
        if (scene.mean.macc) maccs.push_back(*scene.mean.macc);
    }
    report.overall.map = detail::order_free_mean(std::move(maps));
    report.overall.recall = detail::order_free_mean(std::move(recalls));
    report.overall.miou = detail::order_free_mean(std::move(mious));
    report.overall.macc = detail::order_free_mean(std::move(maccs));
    return report;
}

namespace detail {

inline std::string format_metric(const std::optional<double>& v) {
    if (!v) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return buf;
}

inline std::string metric_row(const std::string& level, const std::string& id,
                              const std::optional<double>& map,
                              const std::optional<double>& recall,
                              const std::optional<double>& miou,
                              const std::optional<double>& macc) {
    return level + "," + id + "," + format_metric(map) + "," + format_metric(recall) + "," +
           format_metric(miou) + "," + format_metric(macc) + "\n";
}

}  // namespace detail

inline std::string render_report(const MetricReport& report) {
    std::string out = "level,id,map,recall,miou,macc\n";
    for (const auto& scene : report.scenes) {
        for (const auto& img : scene.images)
            out += detail::metric_row("image", img.id, img.map, img.recall, img.miou, img.macc);
        out += detail::metric_row("scene", scene.id, scene.mean.map, scene.mean.recall,
                                  scene.mean.miou, scene.mean.macc);
    }
    out += detail::metric_row("overall", "", report.overall.map, report.overall.recall,
                              report.overall.miou, report.overall.macc);
    return out;
}

inline void emit_report(const MetricReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValueError("cannot write report: " + path);
    out << render_report(report);
    if (!out) throw ValueError("cannot write report: " + path);
}

}  // namespace memseg
