#pragma once

#include <string>

#include "neuroencode/encoder.hpp"

namespace neuroencode {

// Encoder weights and adapter sets in the shared container format.

void save_encoder(const std::string& path, const EncoderWeights& w);
EncoderWeights load_encoder(const std::string& path);

void save_adapters(const std::string& path, const LoraAdapterSet& ad);
LoraAdapterSet load_adapters(const std::string& path);

}  // namespace neuroencode
