#include "flowsr/ppm.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <vector>

#include "flowsr/errors.hpp"

namespace flowsr {

namespace {

// Skips whitespace and '#'-to-end-of-line comments, then reads one
// unsigned decimal token.
int64_t read_header_int(std::istream& is, const std::string& path) {
    for (;;) {
        const int c = is.peek();
        if (c == EOF) throw IoError("ppm '" + path + "': truncated header");
        if (c == '#') {
            std::string dummy;
            std::getline(is, dummy);
            continue;
        }
        if (std::isspace(c)) {
            is.get();
            continue;
        }
        break;
    }
    int64_t v = -1;
    if (!(is >> v) || v < 0) throw IoError("ppm '" + path + "': malformed header number");
    return v;
}

}  // namespace

unsigned char quantize8(double v) {
    const double q = std::lround(v * 255.0);
    return static_cast<unsigned char>(q < 0.0 ? 0.0 : (q > 255.0 ? 255.0 : q));
}

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image '" + path + "'");
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '6')
        throw IoError("ppm '" + path + "': not a P6 file");
    const int64_t w = read_header_int(f, path);
    const int64_t h = read_header_int(f, path);
    const int64_t maxval = read_header_int(f, path);
    if (w < 1 || h < 1) throw IoError("ppm '" + path + "': bad dimensions");
    if (maxval != 255)
        throw IoError("ppm '" + path + "': only maxval 255 is supported, got " +
                      std::to_string(maxval));
    f.get();  // the single whitespace byte after maxval
    std::vector<unsigned char> raw(size_t(3 * w * h));
    f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (f.gcount() != std::streamsize(raw.size()))
        throw IoError("ppm '" + path + "': truncated pixel data");

    Tensor img({1, 3, h, w});
    size_t i = 0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                img.at4(0, c, y, x) = double(raw[i++]) / 255.0;
    return img;
}

void write_ppm(const std::string& path, const Tensor& img) {
    if (img.ndim() != 4 || img.dim(0) != 1 || img.dim(1) != 3)
        throw ShapeError("write_ppm: expected [1,3,H,W], got " + shape_str(img.shape()));
    const int64_t h = img.dim(2), w = img.dim(3);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write image '" + path + "'");
    f << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> raw;
    raw.reserve(size_t(3 * w * h));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                raw.push_back(quantize8(img.at4(0, c, y, x)));
    f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

}  // namespace flowsr
