#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffice/tensor.hpp"

namespace diffice {

// 7:9 aspect, one eighth of 224 x 288 per side.
inline constexpr int kHeight = 28;
inline constexpr int kWidth = 36;
inline constexpr int kPixels = kHeight * kWidth;

/// Row-major grayscale image, values nominally in [-1, 1].
using Image = std::vector<float>;

/// Stacks images into a [N, 1, H, W] tensor.
template <class T>
ad::Tensor<T> stack_images(std::span<const Image> images) {
    std::vector<T> data;
    data.reserve(images.size() * kPixels);
    for (const auto& im : images) {
        if (im.size() != static_cast<std::size_t>(kPixels)) {
            throw ad::ShapeError("stack_images: image has " + std::to_string(im.size()) + " pixels, expected " +
                                 std::to_string(kPixels));
        }
        data.insert(data.end(), im.begin(), im.end());
    }
    return ad::Tensor<T>::from_data({static_cast<std::int64_t>(images.size()), 1, kHeight, kWidth}, std::move(data));
}

template <class T>
ad::Tensor<T> image_tensor(const Image& im) {
    return stack_images<T>(std::span<const Image>(&im, 1));
}

/// Batch element `n` of a [N, 1, H, W] tensor.
template <class T>
Image unstack_image(const ad::Tensor<T>& batch, std::int64_t n) {
    if (batch.numel() < (n + 1) * kPixels) throw ad::ShapeError("unstack_image: index out of range");
    auto d = batch.data().subspan(static_cast<std::size_t>(n * kPixels), kPixels);
    return Image(d.begin(), d.end());
}

inline void check_image_shape(const ad::Shape& s, const char* op) {
    if (s.size() != 4 || s[1] != 1 || s[2] != kHeight || s[3] != kWidth) {
        throw ad::ShapeError(std::string(op) + ": expected [N,1," + std::to_string(kHeight) + "," +
                             std::to_string(kWidth) + "] image batch, got " + ad::to_string(s));
    }
}

}  // namespace diffice
