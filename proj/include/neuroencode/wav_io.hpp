#pragma once

#include <string>
#include <vector>

namespace neuroencode {

struct Waveform {
    std::vector<double> samples;
    double sample_rate = 0.0;

    double duration() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

// Mono 16-bit PCM RIFF/WAVE. Samples are clamped to [-1, 1] on write and map
// back through the same 32767 full-scale factor on read.
void write_wav(const std::string& path, const Waveform& w);
Waveform read_wav(const std::string& path);

}  // namespace neuroencode
