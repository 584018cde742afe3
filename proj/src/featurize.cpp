#include "neuroencode/featurize.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace neuroencode {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

int round_samples(double seconds, double rate, const char* what) {
    const double raw = seconds * rate;
    const int n = static_cast<int>(std::llround(raw));
    require(std::abs(raw - n) < 1e-6 && n >= 1,
            std::string(what) + " must be a positive whole number of samples");
    return n;
}

struct StackPlan {
    Matrix frames;
    int wf = 0;
    int step = 0;
};

StackPlan frame_plan(const EncoderWeights& w, const Waveform& wav, const SlidePlan& plan) {
    const EncoderConfig& cfg = w.config;
    require(plan.stride_samples % cfg.frame_stride == 0,
            "extract: window stride must be a multiple of the encoder frame stride");
    require(plan.win_samples >= cfg.frame_size, "extract: window shorter than one frame");
    StackPlan sp;
    sp.step = plan.stride_samples / cfg.frame_stride;
    sp.wf = (plan.win_samples - cfg.frame_size) / cfg.frame_stride + 1;
    sp.frames = frame_stack(wav.samples, cfg.frame_size, cfg.frame_stride);
    return sp;
}

double lanczos_kernel(double x, int a) {
    if (x == 0.0) return 1.0;
    if (std::abs(x) >= a) return 0.0;
    const double px = M_PI * x;
    return (std::sin(px) / px) * (std::sin(px / a) / (px / a));
}

}  // namespace

SlidePlan slide_windows(const Waveform& w, double win_s, double stride_s) {
    require(w.sample_rate > 0.0, "slide: waveform sample rate must be positive");
    SlidePlan plan;
    plan.win_samples = round_samples(win_s, w.sample_rate, "window size");
    plan.stride_samples = round_samples(stride_s, w.sample_rate, "window stride");
    const int n = static_cast<int>(w.samples.size());
    require(n >= plan.win_samples, "slide: waveform shorter than one window");
    plan.count = (n - plan.win_samples) / plan.stride_samples + 1;
    plan.times.resize(plan.count);
    for (int k = 0; k < plan.count; ++k)
        plan.times(k) =
            (static_cast<double>(k) * plan.stride_samples + plan.win_samples) / w.sample_rate;
    return plan;
}

std::vector<double> window_samples(const Waveform& w, const SlidePlan& plan, int k) {
    require(k >= 0 && k < plan.count, "window index out of range");
    const std::size_t start = static_cast<std::size_t>(k) * plan.stride_samples;
    return {w.samples.begin() + static_cast<std::ptrdiff_t>(start),
            w.samples.begin() + static_cast<std::ptrdiff_t>(start + plan.win_samples)};
}

WindowedFeatures extract_features(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                  const Waveform& wav, int layer, double win_s,
                                  double stride_s) {
    const SlidePlan plan = slide_windows(wav, win_s, stride_s);
    const StackPlan sp = frame_plan(w, wav, plan);
    const auto outs =
        stacked_readouts(w, adapters, sp.frames, sp.wf, sp.step, plan.count, layer);
    WindowedFeatures f;
    f.times = plan.times;
    f.m = outs[static_cast<std::size_t>(layer)];
    return f;
}

std::vector<WindowedFeatures> extract_all_layers(const EncoderWeights& w,
                                                 const LoraAdapterSet* adapters,
                                                 const Waveform& wav, double win_s,
                                                 double stride_s) {
    const SlidePlan plan = slide_windows(wav, win_s, stride_s);
    const StackPlan sp = frame_plan(w, wav, plan);
    const auto outs =
        stacked_readouts(w, adapters, sp.frames, sp.wf, sp.step, plan.count, w.config.n_layers);
    std::vector<WindowedFeatures> all;
    all.reserve(outs.size());
    for (const Matrix& m : outs) all.push_back({plan.times, m});
    return all;
}

Vector volume_times(int n_volumes, double tr) {
    require(n_volumes >= 1 && tr > 0.0, "volume grid: degenerate parameters");
    Vector t(n_volumes);
    for (int j = 0; j < n_volumes; ++j) t(j) = (j + 1) * tr;
    return t;
}

Matrix lanczos_matrix(const Vector& source_times, const Vector& target_times, double cutoff_hz,
                      int a) {
    require(source_times.size() >= 2, "lanczos: need at least two source samples");
    require(cutoff_hz > 0.0 && a >= 1, "lanczos: invalid cutoff or lobe count");
    const double lo = source_times(0);
    const double hi = source_times(source_times.size() - 1);
    Matrix weights = Matrix::Zero(target_times.size(), source_times.size());
    for (Index i = 0; i < target_times.size(); ++i) {
        const double t = target_times(i);
        require(t >= lo - 1e-9 && t <= hi + 1e-9,
                "lanczos: target time outside the source support");
        double sum = 0.0;
        for (Index j = 0; j < source_times.size(); ++j) {
            const double v = lanczos_kernel(cutoff_hz * (t - source_times(j)), a);
            weights(i, j) = v;
            sum += v;
        }
        require(std::abs(sum) > 1e-12, "lanczos: degenerate weight row");
        weights.row(i) /= sum;
    }
    return weights;
}

VolumeFeatures lanczos_resample(const WindowedFeatures& f, const Vector& target_times,
                                double tr, double cutoff_hz, int a) {
    VolumeFeatures v;
    v.tr = tr;
    v.times = target_times;
    v.m = lanczos_matrix(f.times, target_times, cutoff_hz, a) * f.m;
    return v;
}

Matrix delay_stack(const Matrix& v, const std::vector<double>& delays_s, double tr) {
    require(!delays_s.empty() && tr > 0.0, "delay_stack: degenerate parameters");
    const Index t = v.rows();
    const Index p = v.cols();
    Matrix out = Matrix::Zero(t, p * static_cast<Index>(delays_s.size()));
    for (std::size_t d = 0; d < delays_s.size(); ++d) {
        const double raw = delays_s[d] / tr;
        const Index shift = static_cast<Index>(std::llround(raw));
        require(std::abs(raw - static_cast<double>(shift)) < 1e-9 && shift >= 0,
                "delay_stack: delay must be a nonnegative multiple of tr");
        if (shift < t)
            out.block(shift, static_cast<Index>(d) * p, t - shift, p) =
                v.topRows(t - shift);
    }
    return out;
}

void zscore_columns(Matrix& m) {
    for (Index v = 0; v < m.cols(); ++v) {
        const double mu = m.col(v).mean();
        const double sd =
            std::sqrt((m.col(v).array() - mu).square().sum() / double(m.rows()));
        if (sd == 0.0)
            m.col(v).setZero();
        else
            m.col(v) = ((m.col(v).array() - mu) / sd).matrix();
    }
}

}  // namespace neuroencode
