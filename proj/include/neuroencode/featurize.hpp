#pragma once

#include <vector>

#include "neuroencode/encoder.hpp"
#include "neuroencode/types.hpp"
#include "neuroencode/wav_io.hpp"

namespace neuroencode {

// Sliding-window extraction grid. Window k covers samples
// [k*stride, k*stride + win); its timestamp is the window end time, since the
// readout summarizes audio up to that instant.
struct SlidePlan {
    int win_samples = 0;
    int stride_samples = 0;
    int count = 0;
    Vector times;  // end times, seconds
};

SlidePlan slide_windows(const Waveform& w, double win_s = 2.0, double stride_s = 0.1);
std::vector<double> window_samples(const Waveform& w, const SlidePlan& plan, int k);

struct WindowedFeatures {
    Vector times;  // strictly increasing, constant stride
    Matrix m;      // n_windows x P
};

struct VolumeFeatures {
    double tr = 2.0;
    Vector times;
    Matrix m;  // T x P
};

// Readout of `layer` for every window. The window stride must be an integer
// multiple of the encoder frame stride so windows share one frame grid.
WindowedFeatures extract_features(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                  const Waveform& wav, int layer, double win_s = 2.0,
                                  double stride_s = 0.1);

// One WindowedFeatures per layer 0..n_layers, sharing a single forward pass.
std::vector<WindowedFeatures> extract_all_layers(const EncoderWeights& w,
                                                 const LoraAdapterSet* adapters,
                                                 const Waveform& wav, double win_s = 2.0,
                                                 double stride_s = 0.1);

// Volume capture times: volume j is acquired at (j+1)*tr, so the first volume
// sees a full window of audio and the last lands on the story end.
Vector volume_times(int n_volumes, double tr);

// Lanczos windowed-sinc weights from source grid to target times, each row
// renormalized to sum 1. Targets must lie within the source support.
Matrix lanczos_matrix(const Vector& source_times, const Vector& target_times, double cutoff_hz,
                      int a = 3);

VolumeFeatures lanczos_resample(const WindowedFeatures& f, const Vector& target_times,
                                double tr, double cutoff_hz, int a = 3);

// Column blocks are copies of v shifted down by delay/tr rows, zero-filled at
// the top, ordered by increasing delay.
Matrix delay_stack(const Matrix& v, const std::vector<double>& delays_s, double tr);

// Per-column z-score with population variance; constant columns become zero.
void zscore_columns(Matrix& m);

inline std::vector<double> default_delays() { return {2.0, 4.0, 6.0, 8.0}; }

}  // namespace neuroencode
