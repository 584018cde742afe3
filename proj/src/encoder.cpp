#include "neuroencode/encoder.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "neuroencode/hash.hpp"
#include "neuroencode/parallel.hpp"
#include "neuroencode/rng.hpp"

namespace neuroencode {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

constexpr double kLnEps = grad::kLayerNormEps;

Matrix ln_rows(const Matrix& x, const Matrix& gain, const Matrix& bias) {
    const Index n = x.cols();
    Matrix out(x.rows(), n);
    for (Index r = 0; r < x.rows(); ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        out.row(r) =
            (((x.row(r).array() - mu) * inv) * gain.row(0).array()).matrix() + bias.row(0);
    }
    return out;
}

double gelu_scalar(double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); }

Matrix gelu_mat(const Matrix& x) { return x.unaryExpr(&gelu_scalar); }

// Effective attention projection; skips the product entirely for an all-zero
// B so a fresh adapter set reproduces the base model bit-for-bit.
Matrix effective(const Matrix& w, const LoraAdapter* ad, double scaling) {
    if (!ad || ad->b.isZero(0.0)) return w;
    Matrix out = w;
    out.noalias() += scaling * (ad->b * ad->a);
    return out;
}

// Block-diagonal multi-head attention over stacked windows; writes are
// per-window and disjoint, so the window loop parallelizes deterministically.
Matrix windowed_attention_plain(const Matrix& q, const Matrix& k, const Matrix& v, int n_heads,
                                int wf) {
    const Index d = q.cols();
    const Index dh = d / n_heads;
    const int nw = static_cast<int>(q.rows() / wf);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out(q.rows(), d);
    parallel_for(nw, [&](int w) {
        const Index r0 = static_cast<Index>(w) * wf;
        for (int h = 0; h < n_heads; ++h) {
            const Index c0 = static_cast<Index>(h) * dh;
            const auto qb = q.block(r0, c0, wf, dh);
            const auto kb = k.block(r0, c0, wf, dh);
            Matrix s(wf, wf);
            s.noalias() = qb * kb.transpose() * inv_sqrt;
            for (Index r = 0; r < wf; ++r) {
                const double m = s.row(r).maxCoeff();
                s.row(r) = (s.row(r).array() - m).exp().matrix();
                s.row(r) /= s.row(r).sum();
            }
            out.block(r0, c0, wf, dh).noalias() = s * v.block(r0, c0, wf, dh);
        }
    });
    return out;
}

// Stacked per-window frame rows: output row w*wf + p = frames.row(w*step + p).
Matrix stack_windows(const Matrix& frames, int wf, int step, int nw) {
    require(nw >= 1, "stacked forward: need at least one window");
    require(static_cast<Index>(nw - 1) * step + wf <= frames.rows(),
            "stacked forward: window range exceeds frame grid");
    Matrix x(static_cast<Index>(nw) * wf, frames.cols());
    for (int w = 0; w < nw; ++w)
        x.middleRows(static_cast<Index>(w) * wf, wf) =
            frames.middleRows(static_cast<Index>(w) * step, wf);
    return x;
}

// Full stacked hidden sequences for layers 0..up_to_layer.
std::vector<Matrix> stacked_states(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                   const Matrix& frames, int wf, int step, int nw,
                                   int up_to_layer) {
    const EncoderConfig& cfg = w.config;
    require(up_to_layer >= 0 && up_to_layer <= cfg.n_layers, "layer index out of range");
    require(frames.cols() == cfg.frame_size, "frame width does not match the encoder");
    if (adapters)
        require(static_cast<int>(adapters->layers.size()) == cfg.n_layers,
                "adapter layer count does not match the encoder");

    const Matrix x = stack_windows(frames, wf, step, nw);
    Matrix h(x.rows(), cfg.d_model);
    h.noalias() = x * w.frame_proj;
    h.rowwise() += w.frame_bias.row(0);
    const Matrix pe = positional_encoding(wf, cfg.d_model);
    for (int win = 0; win < nw; ++win) h.middleRows(static_cast<Index>(win) * wf, wf) += pe;

    std::vector<Matrix> states;
    states.reserve(static_cast<std::size_t>(up_to_layer) + 1);
    states.push_back(h);
    const double scaling = adapters ? adapters->scaling() : 1.0;
    for (int l = 0; l < up_to_layer; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        const auto* ad = adapters ? &(*adapters).layers[static_cast<std::size_t>(l)] : nullptr;
        const Matrix u = ln_rows(h, lw.ln1_g, lw.ln1_b);
        Matrix q(u.rows(), cfg.d_model), k(u.rows(), cfg.d_model), v(u.rows(), cfg.d_model);
        q.noalias() = u * effective(lw.wq, ad ? &(*ad)[0] : nullptr, scaling);
        k.noalias() = u * effective(lw.wk, ad ? &(*ad)[1] : nullptr, scaling);
        v.noalias() = u * effective(lw.wv, ad ? &(*ad)[2] : nullptr, scaling);
        const Matrix attn = windowed_attention_plain(q, k, v, cfg.n_heads, wf);
        h.noalias() += attn * lw.wo;
        const Matrix u2 = ln_rows(h, lw.ln2_g, lw.ln2_b);
        Matrix f(u2.rows(), cfg.d_ff);
        f.noalias() = u2 * lw.ff1;
        f.rowwise() += lw.ff1_b.row(0);
        f = gelu_mat(f);
        h.noalias() += f * lw.ff2;
        h.rowwise() += lw.ff2_b.row(0);
        states.push_back(h);
    }
    return states;
}

}  // namespace

void EncoderConfig::validate() const {
    require(n_layers >= 1, "encoder: n_layers must be >= 1");
    require(d_model >= 2 && n_heads >= 1 && d_ff >= 1, "encoder: degenerate dimensions");
    require(d_model % n_heads == 0, "encoder: d_model must be divisible by n_heads");
    require(frame_size >= 1 && frame_stride >= 1, "encoder: invalid framing");
    require(readout_layer >= 0 && readout_layer <= n_layers,
            "encoder: readout_layer must be within 0..n_layers");
}

EncoderWeights init_encoder(const EncoderConfig& config) {
    config.validate();
    EncoderWeights w;
    w.config = config;
    const double d_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double ff_std = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
    // Residual-branch outputs (wo, ff2) are additionally shrunk by
    // 1/sqrt(2*n_layers) so the stream variance stays near its input scale at
    // any depth.
    const double branch = 1.0 / std::sqrt(2.0 * config.n_layers);
    std::uint64_t salt = 0;
    auto draw = [&](Index rows, Index cols, double stddev) {
        Rng rng(mix_seed(config.seed, salt++));
        return rng.gaussian_matrix(rows, cols, stddev);
    };
    w.frame_proj = draw(config.frame_size, config.d_model,
                        1.0 / std::sqrt(static_cast<double>(config.frame_size)));
    w.frame_bias = Matrix::Zero(1, config.d_model);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = draw(config.d_model, config.d_model, d_std);
        lw.wk = draw(config.d_model, config.d_model, d_std);
        lw.wv = draw(config.d_model, config.d_model, d_std);
        lw.wo = draw(config.d_model, config.d_model, d_std * branch);
        lw.ff1 = draw(config.d_model, config.d_ff, d_std);
        lw.ff2 = draw(config.d_ff, config.d_model, ff_std * branch);
        lw.ff1_b = Matrix::Zero(1, config.d_ff);
        lw.ff2_b = Matrix::Zero(1, config.d_model);
        lw.ln1_g = Matrix::Ones(1, config.d_model);
        lw.ln1_b = Matrix::Zero(1, config.d_model);
        lw.ln2_g = Matrix::Ones(1, config.d_model);
        lw.ln2_b = Matrix::Zero(1, config.d_model);
        w.layers.push_back(std::move(lw));
    }
    return w;
}

std::uint64_t EncoderWeights::checksum() const {
    std::uint64_t h = hash_matrix(frame_proj);
    h = hash_matrix(frame_bias, h);
    for (const LayerWeights& lw : layers) {
        for (const Matrix* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.ff1, &lw.ff2, &lw.ff1_b,
                                &lw.ff2_b, &lw.ln1_g, &lw.ln1_b, &lw.ln2_g, &lw.ln2_b})
            h = hash_matrix(*m, h);
    }
    return h;
}

std::int64_t LoraAdapterSet::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& layer : layers)
        for (const LoraAdapter& ad : layer) n += ad.a.size() + ad.b.size();
    return n;
}

LoraAdapterSet init_adapters(const EncoderConfig& config, int rank, double alpha,
                             std::uint64_t seed) {
    config.validate();
    require(rank >= 1, "lora: rank must be >= 1");
    LoraAdapterSet set;
    set.rank = rank;
    set.alpha = alpha;
    std::uint64_t salt = 0;
    for (int l = 0; l < config.n_layers; ++l) {
        std::array<LoraAdapter, 3> layer;
        for (auto& ad : layer) {
            Rng rng(mix_seed(seed, salt++));
            ad.a = rng.gaussian_matrix(rank, config.d_model, 0.02);
            ad.b = Matrix::Zero(config.d_model, rank);
        }
        set.layers.push_back(std::move(layer));
    }
    return set;
}

EncoderWeights merge_lora(const EncoderWeights& w, const LoraAdapterSet& adapters) {
    require(static_cast<int>(adapters.layers.size()) == w.config.n_layers,
            "merge: adapter layer count mismatch");
    EncoderWeights out = w;
    const double scaling = adapters.scaling();
    for (std::size_t l = 0; l < adapters.layers.size(); ++l) {
        const auto& ad = adapters.layers[l];
        require(ad[0].a.cols() == w.config.d_model && ad[0].b.rows() == w.config.d_model,
                "merge: adapter dimensions mismatch");
        out.layers[l].wq.noalias() += scaling * (ad[0].b * ad[0].a);
        out.layers[l].wk.noalias() += scaling * (ad[1].b * ad[1].a);
        out.layers[l].wv.noalias() += scaling * (ad[2].b * ad[2].a);
    }
    return out;
}

BottleneckHead init_head(Index p, Index k, Index n_voxels, std::uint64_t seed) {
    require(k >= 1 && p >= 1 && n_voxels >= 1, "head: degenerate dimensions");
    require(k <= std::min(p, n_voxels), "head: bottleneck rank must be <= min(P, voxels)");
    Rng rng(mix_seed(seed, 0x48454144ULL));
    BottleneckHead head;
    head.down = rng.gaussian_matrix(p, k, 1.0 / std::sqrt(static_cast<double>(p)));
    head.up = rng.gaussian_matrix(k, n_voxels, 1.0 / std::sqrt(static_cast<double>(k)));
    return head;
}

Matrix head_predict(const BottleneckHead& head, const Matrix& features) {
    require(features.cols() == head.down.rows(), "head: feature width mismatch");
    return (features * head.down) * head.up;
}

Matrix positional_encoding(int positions, int d_model) {
    Matrix pe(positions, d_model);
    for (int p = 0; p < positions; ++p) {
        for (int i = 0; i < d_model; i += 2) {
            const double rate = std::pow(10000.0, -static_cast<double>(i) / d_model);
            pe(p, i) = std::sin(p * rate);
            if (i + 1 < d_model) pe(p, i + 1) = std::cos(p * rate);
        }
    }
    return pe;
}

Matrix frame_stack(const std::vector<double>& samples, int frame_size, int frame_stride) {
    require(frame_size >= 1 && frame_stride >= 1, "framing: invalid sizes");
    require(static_cast<int>(samples.size()) >= frame_size,
            "framing: fewer samples than one frame");
    const int n = (static_cast<int>(samples.size()) - frame_size) / frame_stride + 1;
    Matrix frames(n, frame_size);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < frame_size; ++j)
            frames(i, j) = samples[static_cast<std::size_t>(i) * frame_stride +
                                   static_cast<std::size_t>(j)];
    return frames;
}

std::vector<Matrix> forward_window(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                   const std::vector<double>& window_samples) {
    const Matrix frames =
        frame_stack(window_samples, w.config.frame_size, w.config.frame_stride);
    return stacked_states(w, adapters, frames, static_cast<int>(frames.rows()), 1, 1,
                          w.config.n_layers);
}

Matrix readout(const std::vector<Matrix>& states, int layer) {
    require(layer >= 0 && layer < static_cast<int>(states.size()), "readout: layer out of range");
    return states[static_cast<std::size_t>(layer)].row(
        states[static_cast<std::size_t>(layer)].rows() - 1);
}

std::vector<Matrix> stacked_readouts(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                     const Matrix& frames, int win_frames, int step,
                                     int n_windows, int up_to_layer) {
    const std::vector<Matrix> states =
        stacked_states(w, adapters, frames, win_frames, step, n_windows, up_to_layer);
    std::vector<Matrix> outs;
    outs.reserve(states.size());
    for (const Matrix& s : states) {
        Matrix r(n_windows, s.cols());
        for (int win = 0; win < n_windows; ++win)
            r.row(win) = s.row(static_cast<Index>(win) * win_frames + win_frames - 1);
        outs.push_back(std::move(r));
    }
    return outs;
}

namespace enc_graph {

namespace gr = neuroencode::grad;

BoundEncoder bind_lora(gr::Graph& g, const EncoderWeights& w, const LoraAdapterSet& adapters) {
    require(static_cast<int>(adapters.layers.size()) == w.config.n_layers,
            "bind: adapter layer count mismatch");
    BoundEncoder enc;
    enc.lora_scaling = adapters.scaling();
    enc.frame_proj = g.constant(w.frame_proj);
    enc.frame_bias = g.constant(w.frame_bias);
    for (std::size_t l = 0; l < adapters.layers.size(); ++l) {
        const LayerWeights& lw = w.layers[l];
        std::array<BoundAdapter, 3> bound;
        for (int t = 0; t < 3; ++t) {
            bound[static_cast<std::size_t>(t)].a =
                g.leaf(adapters.layers[l][static_cast<std::size_t>(t)].a, true);
            bound[static_cast<std::size_t>(t)].b =
                g.leaf(adapters.layers[l][static_cast<std::size_t>(t)].b, true);
        }
        auto eff = [&](const Matrix& base, const BoundAdapter& ad) {
            return gr::add(g.constant(base),
                           gr::scale(gr::matmul(ad.b, ad.a), enc.lora_scaling));
        };
        BoundLayer bl;
        bl.wq = eff(lw.wq, bound[0]);
        bl.wk = eff(lw.wk, bound[1]);
        bl.wv = eff(lw.wv, bound[2]);
        bl.wo = g.constant(lw.wo);
        bl.ff1 = g.constant(lw.ff1);
        bl.ff2 = g.constant(lw.ff2);
        bl.ff1_b = g.constant(lw.ff1_b);
        bl.ff2_b = g.constant(lw.ff2_b);
        bl.ln1_g = g.constant(lw.ln1_g);
        bl.ln1_b = g.constant(lw.ln1_b);
        bl.ln2_g = g.constant(lw.ln2_g);
        bl.ln2_b = g.constant(lw.ln2_b);
        enc.layers.push_back(bl);
        enc.adapters.push_back(bound);
    }
    return enc;
}

BoundEncoder bind_full(gr::Graph& g, const EncoderWeights& w) {
    BoundEncoder enc;
    enc.frame_proj = g.leaf(w.frame_proj, true);
    enc.frame_bias = g.leaf(w.frame_bias, true);
    for (const LayerWeights& lw : w.layers) {
        BoundLayer bl;
        bl.wq = g.leaf(lw.wq, true);
        bl.wk = g.leaf(lw.wk, true);
        bl.wv = g.leaf(lw.wv, true);
        bl.wo = g.leaf(lw.wo, true);
        bl.ff1 = g.leaf(lw.ff1, true);
        bl.ff2 = g.leaf(lw.ff2, true);
        bl.ff1_b = g.leaf(lw.ff1_b, true);
        bl.ff2_b = g.leaf(lw.ff2_b, true);
        bl.ln1_g = g.leaf(lw.ln1_g, true);
        bl.ln1_b = g.leaf(lw.ln1_b, true);
        bl.ln2_g = g.leaf(lw.ln2_g, true);
        bl.ln2_b = g.leaf(lw.ln2_b, true);
        enc.layers.push_back(bl);
    }
    return enc;
}

gr::Var windowed_attention(gr::Graph& g, gr::Var q, gr::Var k, gr::Var v, int n_heads,
                           int win_frames) {
    require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols() &&
                q.cols() == v.cols(),
            "windowed_attention: operand shapes differ");
    require(q.rows() % win_frames == 0, "windowed_attention: rows not a multiple of win_frames");
    require(q.cols() % n_heads == 0, "windowed_attention: cols not divisible by heads");
    const Index wf = win_frames;
    const Index d = q.cols();
    const Index dh = d / n_heads;
    const int nw = static_cast<int>(q.rows() / wf);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // Softmax blocks are kept for the backward pass: one wf x wf matrix per
    // (window, head), indexed w * n_heads + h.
    auto probs = std::make_shared<std::vector<Matrix>>(
        static_cast<std::size_t>(nw) * static_cast<std::size_t>(n_heads));
    Matrix out(q.rows(), d);
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    parallel_for(nw, [&](int w) {
        const Index r0 = static_cast<Index>(w) * wf;
        for (int h = 0; h < n_heads; ++h) {
            const Index c0 = static_cast<Index>(h) * dh;
            Matrix s(wf, wf);
            s.noalias() = qv.block(r0, c0, wf, dh) * kv.block(r0, c0, wf, dh).transpose() *
                          inv_sqrt;
            for (Index r = 0; r < wf; ++r) {
                const double m = s.row(r).maxCoeff();
                s.row(r) = (s.row(r).array() - m).exp().matrix();
                s.row(r) /= s.row(r).sum();
            }
            out.block(r0, c0, wf, dh).noalias() = s * vv.block(r0, c0, wf, dh);
            (*probs)[static_cast<std::size_t>(w) * n_heads + static_cast<std::size_t>(h)] =
                std::move(s);
        }
    });

    const int iq = q.index(), ik = k.index(), iv = v.index();
    const gr::Var parents[] = {q, k, v};
    return g.add_op(std::move(out), parents,
                    [iq, ik, iv, probs, wf, dh, n_heads, nw, inv_sqrt](gr::Graph& gg, int self) {
        const Matrix& go = gg.grad_of(self);
        const Matrix& qv = gg.value(iq);
        const Matrix& kv = gg.value(ik);
        const Matrix& vv = gg.value(iv);
        Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
        Matrix dk = Matrix::Zero(qv.rows(), qv.cols());
        Matrix dv = Matrix::Zero(qv.rows(), qv.cols());
        parallel_for(nw, [&](int w) {
            const Index r0 = static_cast<Index>(w) * wf;
            for (int h = 0; h < n_heads; ++h) {
                const Index c0 = static_cast<Index>(h) * dh;
                const Matrix& p =
                    (*probs)[static_cast<std::size_t>(w) * n_heads + static_cast<std::size_t>(h)];
                const auto dout = go.block(r0, c0, wf, dh);
                dv.block(r0, c0, wf, dh).noalias() = p.transpose() * dout;
                Matrix dp(wf, wf);
                dp.noalias() = dout * vv.block(r0, c0, wf, dh).transpose();
                Matrix ds(wf, wf);
                for (Index r = 0; r < wf; ++r) {
                    const double dot = dp.row(r).dot(p.row(r));
                    ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
                }
                dq.block(r0, c0, wf, dh).noalias() = ds * kv.block(r0, c0, wf, dh) * inv_sqrt;
                dk.block(r0, c0, wf, dh).noalias() =
                    ds.transpose() * qv.block(r0, c0, wf, dh) * inv_sqrt;
            }
        });
        gg.accumulate(iq, dq);
        gg.accumulate(ik, dk);
        gg.accumulate(iv, dv);
    });
}

gr::Var rows_every(gr::Graph& g, gr::Var a, Index stride, Index offset) {
    require(stride >= 1 && offset >= 0 && offset < a.rows(), "rows_every: bad stride/offset");
    const Index n = (a.rows() - offset - 1) / stride + 1;
    const Index rows = a.rows(), cols = a.cols();
    Matrix out(n, cols);
    for (Index i = 0; i < n; ++i) out.row(i) = a.value().row(offset + i * stride);
    const int ia = a.index();
    const gr::Var parents[] = {a};
    return g.add_op(std::move(out), parents,
                    [ia, stride, offset, n, rows, cols](gr::Graph& gg, int self) {
        const Matrix& go = gg.grad_of(self);
        Matrix dx = Matrix::Zero(rows, cols);
        for (Index i = 0; i < n; ++i) dx.row(offset + i * stride) = go.row(i);
        gg.accumulate(ia, dx);
    });
}

gr::Var stacked_readout(gr::Graph& g, const BoundEncoder& enc, const EncoderConfig& config,
                        const Matrix& frames, int win_frames, int step, int n_windows,
                        int layer) {
    require(layer >= 0 && layer <= static_cast<int>(enc.layers.size()),
            "stacked_readout: layer out of range");
    const Matrix x = stack_windows(frames, win_frames, step, n_windows);
    const Matrix pe_one = positional_encoding(win_frames, config.d_model);
    Matrix pe(x.rows(), config.d_model);
    for (int w = 0; w < n_windows; ++w)
        pe.middleRows(static_cast<Index>(w) * win_frames, win_frames) = pe_one;

    gr::Var h = gr::add(gr::add_rows(gr::matmul(g.constant(x), enc.frame_proj), enc.frame_bias),
                        g.constant(pe));
    for (int l = 0; l < layer; ++l) {
        const BoundLayer& bl = enc.layers[static_cast<std::size_t>(l)];
        gr::Var u = gr::layer_norm(h, bl.ln1_g, bl.ln1_b);
        gr::Var attn = windowed_attention(g, gr::matmul(u, bl.wq), gr::matmul(u, bl.wk),
                                          gr::matmul(u, bl.wv), config.n_heads, win_frames);
        h = gr::add(h, gr::matmul(attn, bl.wo));
        gr::Var u2 = gr::layer_norm(h, bl.ln2_g, bl.ln2_b);
        gr::Var f = gr::gelu(gr::add_rows(gr::matmul(u2, bl.ff1), bl.ff1_b));
        h = gr::add(h, gr::add_rows(gr::matmul(f, bl.ff2), bl.ff2_b));
    }
    return rows_every(g, h, win_frames, win_frames - 1);
}

}  // namespace enc_graph

}  // namespace neuroencode
