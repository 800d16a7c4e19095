#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "memseg/errors.hpp"

namespace memseg {

/// 8-bit RGB image, row-major, interleaved channels.
struct Frame {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // width * height * 3

    static Frame filled(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        Frame f;
        f.width = w;
        f.height = h;
        f.data.resize(static_cast<std::size_t>(w) * h * 3);
        for (std::size_t i = 0; i < f.data.size(); i += 3) {
            f.data[i] = r;
            f.data[i + 1] = g;
            f.data[i + 2] = b;
        }
        return f;
    }

    std::uint8_t& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
};

/// Single-channel raster of doubles in [0, 255].
struct GrayRaster {
    int width = 0;
    int height = 0;
    std::vector<double> data;  // width * height

    double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Per-pixel class indices. 0 is background, 1..C are food classes.
struct MaskMap {
    int width = 0;
    int height = 0;
    std::vector<std::uint16_t> data;  // width * height

    static MaskMap filled(int w, int h, std::uint16_t cls) {
        MaskMap m;
        m.width = w;
        m.height = h;
        m.data.assign(static_cast<std::size_t>(w) * h, cls);
        return m;
    }

    std::uint16_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint16_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const MaskMap& o) const {
        return width == o.width && height == o.height && data == o.data;
    }
};

/// Per-pixel class probability vectors, contiguous per pixel.
struct ProbMap {
    int width = 0;
    int height = 0;
    int classes = 0;  // vector length per pixel (background included)
    std::vector<double> data;  // width * height * classes

    double& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * classes + c];
    }
    double at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * classes + c];
    }
};

namespace detail {

// Reads one header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& in) {
    std::string tok;
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    while (ch != EOF && !std::isspace(static_cast<unsigned char>(ch)) && ch != '#') {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    if (ch != EOF) in.unget();  // leave the terminator for the separator check
    return tok;
}

inline int pnm_int(std::istream& in, const char* what) {
    const std::string tok = pnm_token(in);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
        throw FormatError(std::string("malformed netpbm header: bad ") + what);
    long v = 0;
    try {
        v = std::stol(tok);
    } catch (const std::exception&) {
        throw FormatError(std::string("malformed netpbm header: bad ") + what);
    }
    if (v <= 0 || v > 1 << 20)
        throw FormatError(std::string("malformed netpbm header: bad ") + what);
    return static_cast<int>(v);
}

// Parses "P5"/"P6" + dims + maxval and positions the stream at the payload.
inline void pnm_header(std::istream& in, const char* magic, int& w, int& h) {
    char m[2] = {0, 0};
    in.read(m, 2);
    if (!in || m[0] != magic[0] || m[1] != magic[1])
        throw FormatError(std::string("not a ") + magic + " file");
    w = pnm_int(in, "width");
    h = pnm_int(in, "height");
    const int maxval = pnm_int(in, "maxval");
    if (maxval != 255)
        throw ValueError("unsupported netpbm maxval " + std::to_string(maxval) + " (expected 255)");
    // exactly one whitespace byte separates the header from the payload
    const int sep = in.get();
    if (sep == EOF || !std::isspace(static_cast<unsigned char>(sep)))
        throw FormatError("malformed netpbm header: missing payload separator");
}

}  // namespace detail

inline Frame load_frame(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    Frame f;
    detail::pnm_header(in, "P6", f.width, f.height);
    const std::size_t n = static_cast<std::size_t>(f.width) * f.height * 3;
    f.data.resize(n);
    in.read(reinterpret_cast<char*>(f.data.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw TruncationError("truncated P6 payload in " + path.string());
    return f;
}

inline void save_frame(const Frame& f, const std::filesystem::path& path) {
    if (f.width < 1 || f.height < 1 ||
        f.data.size() != static_cast<std::size_t>(f.width) * f.height * 3)
        throw DimensionError("frame dims inconsistent with data length");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << "P6\n" << f.width << " " << f.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(f.data.data()),
              static_cast<std::streamsize>(f.data.size()));
    if (!out) throw Error("write failed: " + path.string());
}

inline MaskMap load_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    MaskMap m;
    detail::pnm_header(in, "P5", m.width, m.height);
    const std::size_t n = static_cast<std::size_t>(m.width) * m.height;
    std::vector<std::uint8_t> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw TruncationError("truncated P5 payload in " + path.string());
    m.data.assign(raw.begin(), raw.end());
    return m;
}

inline void save_mask(const MaskMap& m, const std::filesystem::path& path) {
    if (m.width < 1 || m.height < 1 ||
        m.data.size() != static_cast<std::size_t>(m.width) * m.height)
        throw DimensionError("mask dims inconsistent with data length");
    std::vector<std::uint8_t> raw(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (m.data[i] > 255)
            throw ValueError("class index " + std::to_string(m.data[i]) +
                             " exceeds the 8-bit mask format");
        raw[i] = static_cast<std::uint8_t>(m.data[i]);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << "P5\n" << m.width << " " << m.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
    if (!out) throw Error("write failed: " + path.string());
}

/// ITU-R BT.601 luma.
inline GrayRaster to_grayscale(const Frame& f) {
    GrayRaster g;
    g.width = f.width;
    g.height = f.height;
    g.data.resize(static_cast<std::size_t>(f.width) * f.height);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
        const std::uint8_t* px = &f.data[i * 3];
        g.data[i] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    }
    return g;
}

/// Area-weighted mean resampling: each output pixel averages the source
/// rectangle its footprint back-projects onto.
inline GrayRaster resize_area(const GrayRaster& g, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw DimensionError("resize_area: output dims must be >= 1");
    GrayRaster out;
    out.width = out_w;
    out.height = out_h;
    out.data.resize(static_cast<std::size_t>(out_w) * out_h);

    const double sx = static_cast<double>(g.width) / out_w;
    const double sy = static_cast<double>(g.height) / out_h;
    for (int oy = 0; oy < out_h; ++oy) {
        const double fy0 = oy * sy, fy1 = (oy + 1) * sy;
        const int iy0 = static_cast<int>(fy0);
        const int iy1 = std::min(g.height - 1, static_cast<int>(std::ceil(fy1)) - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            const double fx0 = ox * sx, fx1 = (ox + 1) * sx;
            const int ix0 = static_cast<int>(fx0);
            const int ix1 = std::min(g.width - 1, static_cast<int>(std::ceil(fx1)) - 1);
            double acc = 0.0, area = 0.0;
            double lo = g.at(ix0, iy0), hi = lo;
            for (int iy = iy0; iy <= iy1; ++iy) {
                const double wy = std::min<double>(iy + 1, fy1) - std::max<double>(iy, fy0);
                for (int ix = ix0; ix <= ix1; ++ix) {
                    const double wx = std::min<double>(ix + 1, fx1) - std::max<double>(ix, fx0);
                    const double v = g.at(ix, iy);
                    acc += wx * wy * v;
                    area += wx * wy;
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
            }
            // a weighted mean lies inside the footprint range; rounding must not
            // push it out (flat regions stay exactly flat)
            out.at(ox, oy) = std::clamp(acc / area, lo, hi);
        }
    }
    return out;
}

/// Grows a frame by copying the nearest edge pixel; interior is untouched.
inline Frame pad_replicate(const Frame& f, int target_w, int target_h) {
    if (target_w < f.width || target_h < f.height)
        throw DimensionError("pad_replicate: target dims smaller than source");
    if (target_w == f.width && target_h == f.height) return f;
    Frame out;
    out.width = target_w;
    out.height = target_h;
    out.data.resize(static_cast<std::size_t>(target_w) * target_h * 3);
    for (int y = 0; y < target_h; ++y) {
        const int sy = std::min(y, f.height - 1);
        for (int x = 0; x < target_w; ++x) {
            const int sx = std::min(x, f.width - 1);
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = f.at(sx, sy, c);
        }
    }
    return out;
}

/// Same edge-replication for masks (used when patch grids extend past the image).
inline MaskMap pad_replicate(const MaskMap& m, int target_w, int target_h) {
    if (target_w < m.width || target_h < m.height)
        throw DimensionError("pad_replicate: target dims smaller than source");
    if (target_w == m.width && target_h == m.height) return m;
    MaskMap out;
    out.width = target_w;
    out.height = target_h;
    out.data.resize(static_cast<std::size_t>(target_w) * target_h);
    for (int y = 0; y < target_h; ++y) {
        const int sy = std::min(y, m.height - 1);
        for (int x = 0; x < target_w; ++x) {
            out.at(x, y) = m.at(std::min(x, m.width - 1), sy);
        }
    }
    return out;
}

}  // namespace memseg
