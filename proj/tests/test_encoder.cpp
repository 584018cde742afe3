#include <cmath>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "neuroencode/encoder.hpp"
#include "neuroencode/rng.hpp"

using namespace neuroencode;
using netest::fd_max_rel_err;
using netest::uniform_pm1;
namespace gr = neuroencode::grad;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.frame_size = 16;
    cfg.frame_stride = 8;
    cfg.readout_layer = 2;
    cfg.seed = 21;
    return cfg;
}

std::vector<double> gaussian_samples(std::uint64_t seed, int n, double stddev = 1.0) {
    Rng rng(seed);
    std::vector<double> s(static_cast<std::size_t>(n));
    for (double& v : s) v = rng.gaussian(stddev);
    return s;
}

LoraAdapterSet random_adapters(const EncoderConfig& cfg, int rank, double alpha,
                               std::uint64_t seed) {
    LoraAdapterSet set = init_adapters(cfg, rank, alpha, seed);
    Rng rng(mix_seed(seed, 777));
    for (auto& layer : set.layers)
        for (LoraAdapter& ad : layer) ad.b = rng.gaussian_matrix(ad.b.rows(), ad.b.cols(), 0.05);
    return set;
}

int matrix_rank(const Matrix& m, double tol = 1e-9) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
    int r = 0;
    for (Index i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()(i) > tol * svd.singularValues()(0)) ++r;
    return r;
}

}  // namespace

TEST_CASE("encoder init is seed-deterministic") {
    const EncoderConfig cfg = tiny_config();
    CHECK(init_encoder(cfg).checksum() == init_encoder(cfg).checksum());
    EncoderConfig other = cfg;
    other.seed = 22;
    CHECK(init_encoder(cfg).checksum() != init_encoder(other).checksum());
}

TEST_CASE("encoder config validation rejects bad dimension combinations") {
    EncoderConfig cfg = tiny_config();
    cfg.d_model = 10;
    cfg.n_heads = 4;
    CHECK_THROWS_AS(init_encoder(cfg), std::invalid_argument);
    cfg = tiny_config();
    cfg.readout_layer = 3;
    CHECK_THROWS_AS(init_encoder(cfg), std::invalid_argument);
}

TEST_CASE("forward activations stay at sane scale through the default depth") {
    EncoderConfig cfg;  // default 9 layers
    const EncoderWeights w = init_encoder(cfg);
    const auto samples = gaussian_samples(31, 800);
    const auto states = forward_window(w, nullptr, samples);
    REQUIRE(static_cast<int>(states.size()) == cfg.n_layers + 1);
    for (const Matrix& s : states) {
        const double mean = s.mean();
        const double var = (s.array() - mean).square().mean();
        CHECK(var > 0.1);
        CHECK(var < 10.0);
    }
}

TEST_CASE("fresh adapters leave the forward pass bit-identical") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const LoraAdapterSet zero = init_adapters(cfg, 4, 4.0, 9);
    const auto samples = gaussian_samples(32, 96);
    const auto base = forward_window(w, nullptr, samples);
    const auto adapted = forward_window(w, &zero, samples);
    REQUIRE(base.size() == adapted.size());
    for (std::size_t l = 0; l < base.size(); ++l)
        CHECK(base[l].isApprox(adapted[l], 0.0));
}

TEST_CASE("single layer single head forward matches a hand-rolled attention oracle") {
    EncoderConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.d_ff = 3;
    cfg.frame_size = 4;
    cfg.frame_stride = 2;
    cfg.readout_layer = 1;
    cfg.seed = 5;
    const EncoderWeights w = init_encoder(cfg);
    const auto samples = gaussian_samples(33, 8);  // 3 frames of 4 samples, stride 2
    const auto states = forward_window(w, nullptr, samples);
    REQUIRE(states.size() == 2);
    REQUIRE(states[0].rows() == 3);

    // Everything below recomputes the forward pass from first principles.
    Matrix frames(3, 4);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) frames(i, j) = samples[static_cast<std::size_t>(2 * i + j)];
    Matrix e = frames * w.frame_proj;
    for (int p = 0; p < 3; ++p) {
        e(p, 0) += w.frame_bias(0, 0) + std::sin(static_cast<double>(p));
        e(p, 1) += w.frame_bias(0, 1) + std::cos(static_cast<double>(p));
    }
    CHECK((states[0] - e).cwiseAbs().maxCoeff() < 1e-10);

    auto norm_rows = [](const Matrix& x, const Matrix& g, const Matrix& b) {
        Matrix out(x.rows(), x.cols());
        for (Index r = 0; r < x.rows(); ++r) {
            const double mu = x.row(r).mean();
            const double var = (x.row(r).array() - mu).square().mean();
            out.row(r) = (((x.row(r).array() - mu) / std::sqrt(var + 1e-5)) * g.row(0).array())
                             .matrix() +
                         b.row(0);
        }
        return out;
    };
    const LayerWeights& lw = w.layers[0];
    const Matrix u = norm_rows(e, lw.ln1_g, lw.ln1_b);
    const Matrix q = u * lw.wq;
    const Matrix k = u * lw.wk;
    const Matrix v = u * lw.wv;
    Matrix scores = q * k.transpose() / std::sqrt(2.0);
    Matrix p(3, 3);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) p(r, c) = std::exp(scores(r, c));
        p.row(r) /= p.row(r).sum();
    }
    Matrix h = e + (p * v) * lw.wo;
    const Matrix u2 = norm_rows(h, lw.ln2_g, lw.ln2_b);
    Matrix f = u2 * lw.ff1;
    f.rowwise() += lw.ff1_b.row(0);
    for (Index r = 0; r < f.rows(); ++r)
        for (Index c = 0; c < f.cols(); ++c)
            f(r, c) = 0.5 * f(r, c) * (1.0 + std::erf(f(r, c) / std::sqrt(2.0)));
    Matrix h2 = h + f * lw.ff2;
    h2.rowwise() += lw.ff2_b.row(0);
    CHECK((states[1] - h2).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("doubling alpha changes outputs only when B is nonzero") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const auto samples = gaussian_samples(34, 96);

    LoraAdapterSet zero_lo = init_adapters(cfg, 4, 4.0, 11);
    LoraAdapterSet zero_hi = zero_lo;
    zero_hi.alpha = 8.0;
    CHECK(forward_window(w, &zero_lo, samples).back().isApprox(
        forward_window(w, &zero_hi, samples).back(), 0.0));

    LoraAdapterSet live_lo = random_adapters(cfg, 4, 4.0, 11);
    LoraAdapterSet live_hi = live_lo;
    live_hi.alpha = 8.0;
    CHECK((forward_window(w, &live_lo, samples).back() -
           forward_window(w, &live_hi, samples).back())
              .cwiseAbs()
              .maxCoeff() > 1e-8);
}

TEST_CASE("readout returns the final frame of the requested layer") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);

    const auto single = forward_window(w, nullptr, gaussian_samples(35, cfg.frame_size));
    REQUIRE(single[0].rows() == 1);
    CHECK(readout(single, 2).isApprox(single[2].row(0), 0.0));

    const auto states = forward_window(w, nullptr, gaussian_samples(36, 96));
    CHECK(readout(states, 1).isApprox(states[1].row(states[1].rows() - 1), 0.0));
    CHECK_THROWS_AS(readout(states, 3), std::invalid_argument);

    CHECK(EncoderConfig{}.readout_layer == 9);
}

TEST_CASE("merging zero adapters reproduces the base weights exactly") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const LoraAdapterSet zero = init_adapters(cfg, 4, 4.0, 12);
    CHECK(merge_lora(w, zero).checksum() == w.checksum());
}

TEST_CASE("merged weights agree with dynamic adapter application") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const LoraAdapterSet live = random_adapters(cfg, 4, 4.0, 13);
    const EncoderWeights merged = merge_lora(w, live);
    const auto samples = gaussian_samples(37, 96);
    const auto dynamic = forward_window(w, &live, samples);
    const auto folded = forward_window(merged, nullptr, samples);
    for (std::size_t l = 0; l < dynamic.size(); ++l)
        CHECK((dynamic[l] - folded[l]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("merged-minus-base difference has rank at most the adapter rank") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const LoraAdapterSet live = random_adapters(cfg, 4, 4.0, 14);
    const EncoderWeights merged = merge_lora(w, live);
    for (int l = 0; l < cfg.n_layers; ++l) {
        CHECK(matrix_rank(merged.layers[l].wq - w.layers[l].wq) <= 4);
        CHECK(matrix_rank(merged.layers[l].wk - w.layers[l].wk) <= 4);
        CHECK(matrix_rank(merged.layers[l].wv - w.layers[l].wv) <= 4);
    }
}

TEST_CASE("lora parameter count follows the layers*targets*2*rank*d formula") {
    const EncoderConfig cfg = tiny_config();
    const LoraAdapterSet set = init_adapters(cfg, 4, 4.0, 15);
    CHECK(set.parameter_count() ==
          static_cast<std::int64_t>(cfg.n_layers) * 3 * 2 * 4 * cfg.d_model);
}

TEST_CASE("identity head blocks pass features through unchanged") {
    BottleneckHead head;
    head.down = Matrix::Identity(6, 6);
    head.up = Matrix::Identity(6, 6);
    Rng rng(16);
    const Matrix f = rng.gaussian_matrix(9, 6, 1.0);
    CHECK(head_predict(head, f).isApprox(f, 0.0));
}

TEST_CASE("head prediction map has rank at most the bottleneck") {
    const BottleneckHead head = init_head(10, 3, 14, 17);
    CHECK(matrix_rank(head.down * head.up) <= 3);
    CHECK_THROWS_AS(init_head(10, 12, 14, 17), std::invalid_argument);
}

TEST_CASE("stacked extraction matches the per-window reference") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const LoraAdapterSet live = random_adapters(cfg, 4, 4.0, 18);
    const auto samples = gaussian_samples(38, 400);
    const Matrix frames = frame_stack(samples, cfg.frame_size, cfg.frame_stride);

    const int wf = 6;  // frames per window
    const int nw = static_cast<int>(frames.rows()) - wf + 1;
    const auto stacked = stacked_readouts(w, &live, frames, wf, 1, nw, cfg.n_layers);
    REQUIRE(static_cast<int>(stacked.size()) == cfg.n_layers + 1);
    REQUIRE(stacked[0].rows() == nw);

    const int win_samples = cfg.frame_size + (wf - 1) * cfg.frame_stride;
    for (int k = 0; k < nw; k += 7) {
        std::vector<double> window(samples.begin() + k * cfg.frame_stride,
                                   samples.begin() + k * cfg.frame_stride + win_samples);
        const auto ref = forward_window(w, &live, window);
        for (int l = 0; l <= cfg.n_layers; ++l)
            CHECK((stacked[static_cast<std::size_t>(l)].row(k) -
                   readout(ref, l)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("graph forward agrees with the plain stacked forward") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = init_encoder(cfg);
    const LoraAdapterSet live = random_adapters(cfg, 4, 4.0, 19);
    const auto samples = gaussian_samples(39, 240);
    const Matrix frames = frame_stack(samples, cfg.frame_size, cfg.frame_stride);
    const int wf = 5;
    const int nw = static_cast<int>(frames.rows()) - wf + 1;

    const auto plain = stacked_readouts(w, &live, frames, wf, 1, nw, cfg.n_layers);
    gr::Graph g;
    const auto bound = enc_graph::bind_lora(g, w, live);
    const gr::Var out =
        enc_graph::stacked_readout(g, bound, cfg, frames, wf, 1, nw, cfg.n_layers);
    CHECK((out.value() - plain.back()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("fused attention and row-gather gradients match finite differences") {
    netest::Rng rng(61);
    const int wf = 3, heads = 2;
    std::vector<Matrix> inputs = {uniform_pm1(rng, 6, 4), uniform_pm1(rng, 6, 4),
                                  uniform_pm1(rng, 6, 4)};
    const double err =
        fd_max_rel_err(inputs, [&](gr::Graph& g, const std::vector<gr::Var>& in) {
            gr::Var attn = enc_graph::windowed_attention(g, in[0], in[1], in[2], heads, wf);
            gr::Var last = enc_graph::rows_every(g, attn, wf, wf - 1);
            return gr::sum(gr::mul(last, last));
        });
    CHECK(err < 1e-6);
}

TEST_CASE("adapter gradients through the stacked graph match finite differences") {
    EncoderConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.d_ff = 6;
    cfg.frame_size = 8;
    cfg.frame_stride = 4;
    cfg.readout_layer = 1;
    cfg.seed = 23;
    const EncoderWeights w = init_encoder(cfg);
    LoraAdapterSet live = random_adapters(cfg, 2, 2.0, 24);
    const auto samples = gaussian_samples(40, 48);
    const Matrix frames = frame_stack(samples, cfg.frame_size, cfg.frame_stride);
    const int wf = 4;
    const int nw = static_cast<int>(frames.rows()) - wf + 1;

    // Gradients through the full bound graph, then finite differences on the
    // master adapter matrices via rebuilt graphs.
    auto loss_of = [&](const LoraAdapterSet& set) {
        gr::Graph g;
        const auto bound = enc_graph::bind_lora(g, w, set);
        const gr::Var out = enc_graph::stacked_readout(g, bound, cfg, frames, wf, 1, nw, 1);
        return gr::mean(gr::mul(out, out)).value()(0, 0);
    };
    gr::Graph g;
    const auto bound = enc_graph::bind_lora(g, w, live);
    const gr::Var out = enc_graph::stacked_readout(g, bound, cfg, frames, wf, 1, nw, 1);
    g.backward(gr::mean(gr::mul(out, out)));

    const double h = 1e-5;
    double worst = 0.0;
    for (int t = 0; t < 3; ++t) {
        const Matrix ga = g.gradient(bound.adapters[0][static_cast<std::size_t>(t)].a);
        const Matrix gb = g.gradient(bound.adapters[0][static_cast<std::size_t>(t)].b);
        for (Index r = 0; r < 2; ++r) {
            LoraAdapterSet probe = live;
            probe.layers[0][static_cast<std::size_t>(t)].a(r, 1) += h;
            const double up = loss_of(probe);
            probe.layers[0][static_cast<std::size_t>(t)].a(r, 1) -= 2 * h;
            const double dn = loss_of(probe);
            const double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(fd - ga(r, 1)) /
                                        std::max(std::abs(fd) + std::abs(ga(r, 1)), 1e-6));

            probe = live;
            probe.layers[0][static_cast<std::size_t>(t)].b(1, r) += h;
            const double up2 = loss_of(probe);
            probe.layers[0][static_cast<std::size_t>(t)].b(1, r) -= 2 * h;
            const double dn2 = loss_of(probe);
            const double fd2 = (up2 - dn2) / (2 * h);
            worst = std::max(worst, std::abs(fd2 - gb(1, r)) /
                                        std::max(std::abs(fd2) + std::abs(gb(1, r)), 1e-6));
        }
    }
    CHECK(worst < 1e-6);
}
