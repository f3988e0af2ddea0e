#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidit {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 8-bit RGB, row-major
struct Image {
    int w = 0, h = 0;
    std::vector<uint8_t> rgb;

    Image() = default;
    Image(int width, int height, uint8_t r = 0, uint8_t g = 0, uint8_t b = 0)
        : w(width), h(height), rgb(static_cast<size_t>(width) * height * 3) {
        for (size_t i = 0; i < rgb.size(); i += 3) {
            rgb[i] = r;
            rgb[i + 1] = g;
            rgb[i + 2] = b;
        }
    }

    uint8_t* px(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const uint8_t* px(int x, int y) const { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
};

void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

// [-1, 1] float latents <-> 8-bit pixels
std::vector<float> image_to_unit(const Image& img);          // [3*H*W], channel-major
Image unit_to_image(const std::vector<float>& chw, int w, int h);

}  // namespace lidit
