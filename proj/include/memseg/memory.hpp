#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <utility>
#include <vector>

#include "memseg/errors.hpp"
#include "memseg/raster.hpp"
#include "memseg/segmenter.hpp"

namespace memseg {

/// Per-location key features of one frame at patch-grid resolution.
struct FeatureMap {
    int grid_w = 0, grid_h = 0;
    Eigen::MatrixXd vectors;  // (grid_w*grid_h) x D
    int frame_index = -1;
};

struct MemoryEntry {
    FeatureMap key;
    Eigen::MatrixXd value;  // (grid_w*grid_h) x channels, rows are distributions
    int frame_index = -1;
    bool pinned = false;  // seeds survive long-term eviction
};

/// Short-term ring of recent entries plus a stride-sampled long-term store.
/// Both stay sorted by frame index; one entry per frame index per store.
struct MemoryBank {
    int n_stm = 5;
    int ltm_stride = 5;
    int cap_ltm = 64;
    std::deque<MemoryEntry> stm;
    std::vector<MemoryEntry> ltm;
};

struct AttentionRead {
    int grid_w = 0, grid_h = 0;
    Eigen::MatrixXd scores;   // N_query x slots, dot(query, key)/sqrt(D)
    Eigen::MatrixXd weights;  // N_query x slots, softmax rows
    Eigen::MatrixXd reads;    // N_query x channels, convex combinations
};

/// The propagation feature extractor: pad -> partition -> embed. Keys live at
/// the patch-embedding stage, which keeps per-frame tracking cost well under a
/// full encoder pass while sharing the segmenter's learned projection.
inline FeatureMap extract_features(const Frame& frame, const SegmenterWeights& w) {
    const int p = w.config.patch_size;
    const Frame padded =
        pad_replicate(frame, (frame.width + p - 1) / p * p, (frame.height + p - 1) / p * p);
    const PatchSequence z0 = embed(partition(padded, p), w);
    FeatureMap fm;
    fm.grid_w = z0.grid_w;
    fm.grid_h = z0.grid_h;
    fm.vectors = z0.tokens;
    if (!fm.vectors.allFinite()) throw ValueError("non-finite feature map");
    return fm;
}

namespace detail {

template <class Store>
void replace_or_insert_sorted(Store& store, const MemoryEntry& entry) {
    for (auto& e : store) {
        if (e.frame_index == entry.frame_index) {
            e = entry;
            return;
        }
    }
    auto it = store.begin();
    while (it != store.end() && it->frame_index < entry.frame_index) ++it;
    store.insert(it, entry);
}

inline void check_entry_grid(const MemoryBank& bank, const MemoryEntry& entry) {
    if (entry.key.vectors.rows() != entry.value.rows())
        throw DimensionError("memory entry key/value grids differ");
    const MemoryEntry* existing =
        !bank.stm.empty() ? &bank.stm.front() : (!bank.ltm.empty() ? &bank.ltm.front() : nullptr);
    if (existing && (existing->key.grid_w != entry.key.grid_w ||
                     existing->key.grid_h != entry.key.grid_h ||
                     existing->value.cols() != entry.value.cols()))
        throw DimensionError("memory entry grid does not match the bank");
}

}  // namespace detail

/// Pins a seed entry into both stores, bypassing the long-term stride. A seed
/// at an already-stored frame index replaces that entry.
inline void seed(MemoryBank& bank, int frame_index, const FeatureMap& key,
                 const Eigen::MatrixXd& value) {
    MemoryEntry entry;
    entry.key = key;
    entry.key.frame_index = frame_index;
    entry.value = value;
    entry.frame_index = frame_index;
    entry.pinned = true;
    detail::check_entry_grid(bank, entry);
    detail::replace_or_insert_sorted(bank.stm, entry);
    while (static_cast<int>(bank.stm.size()) > bank.n_stm) bank.stm.pop_front();
    detail::replace_or_insert_sorted(bank.ltm, entry);
    // pins may not be evicted; capacity only sheds unpinned entries
    auto unpinned = std::find_if(bank.ltm.begin(), bank.ltm.end(),
                                 [](const MemoryEntry& e) { return !e.pinned; });
    while (static_cast<int>(bank.ltm.size()) > bank.cap_ltm && unpinned != bank.ltm.end()) {
        bank.ltm.erase(unpinned);
        unpinned = std::find_if(bank.ltm.begin(), bank.ltm.end(),
                                [](const MemoryEntry& e) { return !e.pinned; });
    }
}

/// Short-term store always takes the entry (oldest drops beyond capacity);
/// long-term takes it only on stride-aligned frame indices.
inline void insert(MemoryBank& bank, const MemoryEntry& entry) {
    detail::check_entry_grid(bank, entry);
    detail::replace_or_insert_sorted(bank.stm, entry);
    while (static_cast<int>(bank.stm.size()) > bank.n_stm) bank.stm.pop_front();
    if (bank.ltm_stride > 0 && entry.frame_index % bank.ltm_stride == 0) {
        const bool present =
            std::any_of(bank.ltm.begin(), bank.ltm.end(), [&](const MemoryEntry& e) {
                return e.frame_index == entry.frame_index;
            });
        if (!present) {
            detail::replace_or_insert_sorted(bank.ltm, entry);
            auto unpinned = std::find_if(bank.ltm.begin(), bank.ltm.end(),
                                         [](const MemoryEntry& e) { return !e.pinned; });
            while (static_cast<int>(bank.ltm.size()) > bank.cap_ltm &&
                   unpinned != bank.ltm.end()) {
                bank.ltm.erase(unpinned);
                unpinned = std::find_if(bank.ltm.begin(), bank.ltm.end(),
                                        [](const MemoryEntry& e) { return !e.pinned; });
            }
        }
    }
}

/// Softmax attention over every (entry, location) slot of STM and LTM, one
/// entry per frame index. Scores are scaled dot products; reads are convex
/// combinations of slot values.
inline AttentionRead attention_read(const FeatureMap& query, const MemoryBank& bank) {
    if (bank.stm.empty() && bank.ltm.empty()) throw ValueError("empty memory bank");

    std::map<int, const MemoryEntry*> by_frame;
    for (const auto& e : bank.stm) by_frame.emplace(e.frame_index, &e);
    for (const auto& e : bank.ltm) by_frame.emplace(e.frame_index, &e);

    const Eigen::Index n_loc = query.vectors.rows();
    const Eigen::Index d = query.vectors.cols();
    const Eigen::Index channels = by_frame.begin()->second->value.cols();
    const Eigen::Index slots = static_cast<Eigen::Index>(by_frame.size()) * n_loc;

    Eigen::MatrixXd keys(slots, d);
    Eigen::MatrixXd values(slots, channels);
    Eigen::Index row = 0;
    for (const auto& [idx, entry] : by_frame) {
        if (entry->key.grid_w != query.grid_w || entry->key.grid_h != query.grid_h)
            throw DimensionError("memory entry grid does not match the query");
        keys.middleRows(row, n_loc) = entry->key.vectors;
        values.middleRows(row, n_loc) = entry->value;
        row += n_loc;
    }

    AttentionRead read;
    read.grid_w = query.grid_w;
    read.grid_h = query.grid_h;
    read.scores = query.vectors * keys.transpose() / std::sqrt(static_cast<double>(d));
    read.weights = read.scores;
    detail::softmax_rows(read.weights);
    read.reads = read.weights * values;
    return read;
}

/// Reads are already class distributions; reuse the patch upsampler.
inline std::pair<ProbMap, MaskMap> decode_read(const AttentionRead& read, int frame_w,
                                               int frame_h, int patch_size) {
    PatchSequence dists;
    dists.grid_w = read.grid_w;
    dists.grid_h = read.grid_h;
    dists.tokens = read.reads;
    return upsample_to_maps(dists, frame_w, frame_h, patch_size);
}

struct MemoryParams {
    int n_stm = 5;
    int ltm_stride = 5;
    int cap_ltm = 64;
};

namespace detail {

/// One-hot patch-grid distribution of a mask's per-patch majority class.
inline Eigen::MatrixXd quantize_mask(const MaskMap& mask, int patch_size, int grid_w,
                                     int grid_h, int channels) {
    const Eigen::VectorXi targets = patch_targets(mask, patch_size, grid_w, grid_h, channels);
    Eigen::MatrixXd value = Eigen::MatrixXd::Zero(targets.size(), channels);
    for (Eigen::Index i = 0; i < targets.size(); ++i) value(i, targets(i)) = 1.0;
    return value;
}

}  // namespace detail

/// Algorithm: pin all seeds, then walk frames in order; non-seeded frames are
/// read from memory and their reads become new entries. Seeded frames emit
/// the supplied mask unchanged and refresh their entry's short-term recency.
inline std::vector<MaskMap> propagate(const std::vector<Frame>& frames,
                                      const std::map<int, MaskMap>& seeds,
                                      const SegmenterWeights& weights,
                                      const MemoryParams& params = {},
                                      std::vector<double>* frame_ms = nullptr) {
    if (frames.empty()) throw ValueError("no frames to propagate over");
    if (seeds.empty()) throw ValueError("no seed masks");
    const int w = frames.front().width, h = frames.front().height;
    for (const auto& f : frames)
        if (f.width != w || f.height != h)
            throw DimensionError("inconsistent frame dims across the sequence");
    for (const auto& [idx, mask] : seeds) {
        if (idx < 0 || idx >= static_cast<int>(frames.size()))
            throw ValueError("seed frame index " + std::to_string(idx) + " out of range");
        if (mask.width != w || mask.height != h)
            throw DimensionError("seed mask dims do not match frames");
    }

    const int p = weights.config.patch_size;
    const int channels = weights.config.class_channels();
    MemoryBank bank;
    bank.n_stm = params.n_stm;
    bank.ltm_stride = params.ltm_stride;
    bank.cap_ltm = params.cap_ltm;

    std::map<int, MemoryEntry> seed_entries;
    for (const auto& [idx, mask] : seeds) {
        FeatureMap key = extract_features(frames[idx], weights);
        key.frame_index = idx;
        const Eigen::MatrixXd value =
            detail::quantize_mask(mask, p, key.grid_w, key.grid_h, channels);
        seed(bank, idx, key, value);
        MemoryEntry entry;
        entry.key = std::move(key);
        entry.value = value;
        entry.frame_index = idx;
        entry.pinned = true;
        seed_entries.emplace(idx, std::move(entry));
    }

    std::vector<MaskMap> out(frames.size());
    if (frame_ms) frame_ms->assign(frames.size(), 0.0);
    for (int t = 0; t < static_cast<int>(frames.size()); ++t) {
        const auto start = std::chrono::steady_clock::now();
        if (auto it = seeds.find(t); it != seeds.end()) {
            out[t] = it->second;
            insert(bank, seed_entries.at(t));
        } else {
            FeatureMap fm = extract_features(frames[t], weights);
            fm.frame_index = t;
            const AttentionRead read = attention_read(fm, bank);
            out[t] = decode_read(read, w, h, p).second;
            MemoryEntry entry;
            entry.key = std::move(fm);
            entry.value = read.reads;
            entry.frame_index = t;
            insert(bank, entry);
        }
        if (static_cast<int>(bank.stm.size()) > bank.n_stm)
            throw Error("short-term memory exceeded its capacity");
        if (frame_ms)
            (*frame_ms)[t] = std::chrono::duration<double, std::milli>(
                                 std::chrono::steady_clock::now() - start)
                                 .count();
    }
    return out;
}

}  // namespace memseg
