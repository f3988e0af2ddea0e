#include "lidit/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace lidit {

void write_ppm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw IoError("short write: " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("not a P6 ppm: " + path);
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported ppm header: " + path);
    f.get();  // single whitespace after header
    Image img(w, h);
    f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw IoError("truncated ppm payload: " + path);
    return img;
}

std::vector<float> image_to_unit(const Image& img) {
    size_t hw = static_cast<size_t>(img.w) * img.h;
    std::vector<float> out(hw * 3);
    for (size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
            out[static_cast<size_t>(c) * hw + p] = static_cast<float>(img.rgb[p * 3 + c]) / 127.5f - 1.0f;
    return out;
}

Image unit_to_image(const std::vector<float>& chw, int w, int h) {
    Image img(w, h);
    size_t hw = static_cast<size_t>(w) * h;
    for (size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) {
            float v = (chw[static_cast<size_t>(c) * hw + p] + 1.0f) * 127.5f;
            v = std::min(255.0f, std::max(0.0f, std::round(v)));
            img.rgb[p * 3 + c] = static_cast<uint8_t>(v);
        }
    return img;
}

}  // namespace lidit
