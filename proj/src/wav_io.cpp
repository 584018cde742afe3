#include "neuroencode/wav_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace neuroencode {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::runtime_error("wav '" + path + "': " + what);
}

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T take(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
    if (w.sample_rate <= 0.0) throw std::invalid_argument("wav write: sample_rate must be > 0");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(path, "cannot open for writing");

    const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
    const std::uint32_t data_bytes = n * 2;
    const std::uint32_t rate = static_cast<std::uint32_t>(std::llround(w.sample_rate));

    out.write("RIFF", 4);
    put<std::uint32_t>(out, 36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put<std::uint32_t>(out, 16);
    put<std::uint16_t>(out, 1);  // PCM
    put<std::uint16_t>(out, 1);  // mono
    put<std::uint32_t>(out, rate);
    put<std::uint32_t>(out, rate * 2);
    put<std::uint16_t>(out, 2);
    put<std::uint16_t>(out, 16);
    out.write("data", 4);
    put<std::uint32_t>(out, data_bytes);
    for (double x : w.samples) {
        const double clamped = std::clamp(x, -1.0, 1.0);
        put<std::int16_t>(out, static_cast<std::int16_t>(std::lround(clamped * 32767.0)));
    }
    if (!out) fail(path, "write failed");
}

Waveform read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    char tag[4];
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "RIFF", 4) != 0) fail(path, "not a RIFF file");
    take<std::uint32_t>(in);
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "WAVE", 4) != 0) fail(path, "not a WAVE file");

    Waveform w;
    std::uint16_t channels = 0, bits = 0;
    bool have_fmt = false;
    while (in.read(tag, 4)) {
        const std::uint32_t size = take<std::uint32_t>(in);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            const std::uint16_t format = take<std::uint16_t>(in);
            channels = take<std::uint16_t>(in);
            w.sample_rate = take<std::uint32_t>(in);
            take<std::uint32_t>(in);
            take<std::uint16_t>(in);
            bits = take<std::uint16_t>(in);
            if (format != 1) fail(path, "only PCM supported");
            if (channels != 1) fail(path, "only mono supported");
            if (bits != 16) fail(path, "only 16-bit supported");
            in.ignore(size > 16 ? size - 16 : 0);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) fail(path, "data chunk before fmt chunk");
            const std::uint32_t n = size / 2;
            w.samples.resize(n);
            for (std::uint32_t i = 0; i < n; ++i)
                w.samples[i] = take<std::int16_t>(in) / 32767.0;
            if (!in) fail(path, "truncated data chunk");
            return w;
        } else {
            in.ignore(size);
        }
    }
    fail(path, "no data chunk");
}

}  // namespace neuroencode
