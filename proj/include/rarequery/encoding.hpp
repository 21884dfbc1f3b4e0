#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace rarequery {

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// 8-bit grayscale (channels == 1) or RGB (channels == 3) PNG.
std::string encode_png(std::span<const std::uint8_t> pixels, std::size_t width, std::size_t height,
                       std::size_t channels);

}  // namespace rarequery
