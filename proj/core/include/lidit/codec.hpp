#pragma once

#include "lidit/image.hpp"
#include "lidit/tensor.hpp"

namespace lidit {

// Pixel/latent bridge. The shipped codec is the identity (pixel-space
// diffusion); a trained VAE would implement the same surface.
struct LatentCodec {
    virtual ~LatentCodec() = default;
    virtual int64_t channels() const = 0;
    virtual int64_t latent_extent(int64_t image_extent) const = 0;
    virtual Tensor<float> encode_image(const Image& img) const = 0;   // [C, H', W']
    virtual Image decode_latent(const Tensor<float>& latent) const = 0;
};

struct IdentityCodec final : LatentCodec {
    int64_t channels() const override { return 3; }
    int64_t latent_extent(int64_t image_extent) const override { return image_extent; }

    Tensor<float> encode_image(const Image& img) const override {
        return Tensor<float>::from_data({3, img.h, img.w}, image_to_unit(img));
    }

    Image decode_latent(const Tensor<float>& latent) const override {
        int64_t h = latent.dim(1), w = latent.dim(2);
        std::vector<float> chw(latent.data(), latent.data() + latent.numel());
        return unit_to_image(chw, static_cast<int>(w), static_cast<int>(h));
    }
};

}  // namespace lidit
