#include "neuroencode/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "neuroencode/model_io.hpp"
#include "neuroencode/rng.hpp"

namespace fs = std::filesystem;
namespace gr = neuroencode::grad;

namespace neuroencode {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

constexpr int kLanczosLobes = 3;

struct RowStats {
    double na = 0.0, nb = 0.0, rho = 0.0;
    bool degenerate = false;
};

// Scalar accumulation in a fixed order so repeated evaluations agree bitwise.
SpatialLoss corr_forward(const Matrix& r_hat, const Matrix& r,
                         std::vector<RowStats>* stats) {
    require(r_hat.rows() == r.rows() && r_hat.cols() == r.cols(),
            "spatial loss: shape mismatch");
    require(r.rows() >= 1 && r.cols() >= 2,
            "spatial loss: need at least one row and two columns");
    const Index t = r.rows();
    const Index v = r.cols();
    if (stats) stats->assign(static_cast<std::size_t>(t), RowStats{});
    SpatialLoss out;
    double sum = 0.0;
    for (Index i = 0; i < t; ++i) {
        double ma = 0.0, mb = 0.0;
        for (Index j = 0; j < v; ++j) {
            ma += r_hat(i, j);
            mb += r(i, j);
        }
        ma /= static_cast<double>(v);
        mb /= static_cast<double>(v);
        double saa = 0.0, sbb = 0.0, sab = 0.0;
        for (Index j = 0; j < v; ++j) {
            const double da = r_hat(i, j) - ma;
            const double db = r(i, j) - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        RowStats s;
        s.na = std::sqrt(saa);
        s.nb = std::sqrt(sbb);
        if (s.na == 0.0 || s.nb == 0.0) {
            s.degenerate = true;
            ++out.n_degenerate;
        } else {
            s.rho = sab / (s.na * s.nb);
            sum += s.rho;
        }
        if (stats) (*stats)[static_cast<std::size_t>(i)] = s;
    }
    out.value = -sum / static_cast<double>(t);
    return out;
}

}  // namespace

SpatialLoss spatial_corr_loss(const Matrix& r_hat, const Matrix& r) {
    return corr_forward(r_hat, r, nullptr);
}

gr::Var spatial_corr_loss_op(gr::Graph& g, gr::Var r_hat, const Matrix& r,
                             long* n_degenerate) {
    require(r_hat.valid() && r_hat.graph() == &g, "spatial loss: prediction not on this graph");
    auto stats = std::make_shared<std::vector<RowStats>>();
    const SpatialLoss l = corr_forward(r_hat.value(), r, stats.get());
    if (g.check_finite() && !std::isfinite(l.value))
        throw std::runtime_error("non-finite values produced by op 'spatial_corr_loss'");
    if (n_degenerate) *n_degenerate = l.n_degenerate;
    Matrix val(1, 1);
    val(0, 0) = l.value;
    const int pi = r_hat.index();
    const gr::Var parents[] = {r_hat};
    return g.add_op(std::move(val), parents,
                    [pi, stats, target = Matrix(r)](gr::Graph& gg, int self) {
        const double gl = gg.grad_of(self)(0, 0);
        const Matrix& rh = gg.value(pi);
        const Index t = rh.rows();
        const Index v = rh.cols();
        const double c = -gl / static_cast<double>(t);
        Matrix grad = Matrix::Zero(t, v);
        for (Index i = 0; i < t; ++i) {
            const RowStats& s = (*stats)[static_cast<std::size_t>(i)];
            if (s.degenerate) continue;
            double ma = 0.0, mb = 0.0;
            for (Index j = 0; j < v; ++j) {
                ma += rh(i, j);
                mb += target(i, j);
            }
            ma /= static_cast<double>(v);
            mb /= static_cast<double>(v);
            // d rho / d a_j for the centered prediction row a, then projected
            // through the centering map (subtract the row mean).
            double psum = 0.0;
            for (Index j = 0; j < v; ++j) {
                const double da = rh(i, j) - ma;
                const double db = target(i, j) - mb;
                const double p = db / (s.na * s.nb) - s.rho * da / (s.na * s.na);
                grad(i, j) = p;
                psum += p;
            }
            const double pmean = psum / static_cast<double>(v);
            for (Index j = 0; j < v; ++j) grad(i, j) = c * (grad(i, j) - pmean);
        }
        gg.accumulate(pi, grad);
    });
}

void AdamState::init(const std::vector<Matrix*>& params) {
    step = 0;
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Matrix* p : params) {
        m.push_back(Matrix::Zero(p->rows(), p->cols()));
        v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
}

void AdamState::apply(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                      double lr) {
    require(params.size() == m.size() && grads.size() == m.size(),
            "adam: parameter registry changed since init");
    require(std::isfinite(lr) && lr >= 0.0, "adam: bad learning rate");
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(grads[i].rows() == m[i].rows() && grads[i].cols() == m[i].cols(),
                "adam: gradient shape mismatch");
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i].array() = beta2 * v[i].array() + (1.0 - beta2) * grads[i].array().square();
        if (lr == 0.0) continue;  // keep parameters bitwise untouched
        params[i]->array() -=
            (lr / bc1) * m[i].array() / ((v[i].array() / bc2).sqrt() + eps);
    }
}

void TrainConfig::validate() const {
    require(std::isfinite(learning_rate) && learning_rate >= 0.0,
            "train config: bad learning rate");
    require(epochs >= 0, "train config: negative epoch count");
    require(batch_trs >= 1, "train config: batch must cover at least one volume");
    require(lora_rank >= 1, "train config: adapter rank must be positive");
    require(std::isfinite(lora_alpha) && lora_alpha > 0.0, "train config: bad lora alpha");
    require(head_rank >= 1, "train config: head rank must be positive");
    require(eval_every >= 1, "train config: eval cadence must be positive");
    eval_cv.validate();
}

double cosine_lr(double base_lr, int epoch, int total_epochs) {
    require(epoch >= 1 && epoch <= total_epochs, "cosine schedule: epoch out of range");
    return base_lr * 0.5 *
           (1.0 + std::cos(M_PI * static_cast<double>(epoch - 1) /
                           static_cast<double>(total_epochs)));
}

SubjectData load_subject_data(const Dataset& ds, int subject_id) {
    const SubjectSpec* subj = nullptr;
    for (const SubjectSpec& s : ds.subjects)
        if (s.id == subject_id) subj = &s;
    require(subj != nullptr, "unknown subject id " + std::to_string(subject_id));
    SubjectData d;
    d.tr = ds.cfg.tr;
    d.split = ds.split;
    d.rois = subj->rois;
    int max_id = 0;
    for (const StorySpec& s : ds.stories) max_id = std::max(max_id, s.id);
    d.waves.resize(static_cast<std::size_t>(max_id) + 1);
    d.responses.resize(static_cast<std::size_t>(max_id) + 1);
    for (const StorySpec& s : ds.stories) {
        d.waves[static_cast<std::size_t>(s.id)] = dataset_story_wave(ds, s.id);
        d.responses[static_cast<std::size_t>(s.id)] = dataset_responses(ds, subject_id, s.id);
    }
    return d;
}

Matrix build_teacher_targets(const Matrix& teacher_feats) {
    require(teacher_feats.rows() >= 2 && teacher_feats.cols() >= 2,
            "teacher targets: feature matrix too small");
    Matrix t = teacher_feats;
    zscore_columns(t);
    return t;
}

void use_teacher_targets(SubjectData& data, Dataset& ds) {
    require(!ds.stories.empty(), "teacher targets: dataset has no stories");
    Index width = -1;
    for (const StorySpec& s : ds.stories) {
        const std::size_t id = static_cast<std::size_t>(s.id);
        require(id < data.responses.size(), "teacher targets: story missing from subject data");
        Matrix t = build_teacher_targets(dataset_teacher_features(ds, s.id));
        require(t.rows() == data.responses[id].rows(),
                "teacher targets: feature rows misaligned with response volumes");
        require(width < 0 || t.cols() == width, "teacher targets: inconsistent width");
        width = t.cols();
        data.responses[id] = std::move(t);
    }
    data.rois.ac.assign(static_cast<std::size_t>(width), 0);
    data.rois.left.assign(static_cast<std::size_t>(width), 0);
}

std::vector<Index> roi_indices(const RoiLabels& rois, const std::string& roi) {
    require(rois.ac.size() == rois.left.size(), "roi: label lengths differ");
    const Index n = static_cast<Index>(rois.ac.size());
    std::vector<Index> out;
    for (Index v = 0; v < n; ++v) {
        const bool ac = rois.ac[static_cast<std::size_t>(v)] != 0;
        const bool left = rois.left[static_cast<std::size_t>(v)] != 0;
        bool keep = false;
        if (roi == "all")
            keep = true;
        else if (roi == "ac")
            keep = ac;
        else if (roi == "non_ac")
            keep = !ac;
        else if (roi == "left")
            keep = left;
        else if (roi == "right")
            keep = !left;
        else
            throw std::invalid_argument("unknown roi scope '" + roi + "'");
        if (keep) out.push_back(v);
    }
    return out;
}

Matrix story_design(const EncoderWeights& w, const LoraAdapterSet* adapters,
                    const Waveform& wav, int layer, double tr,
                    const std::vector<double>& delays) {
    require(tr > 0.0, "story design: tr must be positive");
    const double raw = wav.duration() / tr;
    const int n_volumes = static_cast<int>(std::llround(raw));
    require(n_volumes >= 1 && std::abs(raw - n_volumes) < 1e-6,
            "story design: duration is not a whole number of volumes");
    const WindowedFeatures ex = extract_features(w, adapters, wav, layer);
    const VolumeFeatures vf =
        lanczos_resample(ex, volume_times(n_volumes, tr), tr, 1.0 / tr, kLanczosLobes);
    Matrix z = vf.m;
    zscore_columns(z);
    return delay_stack(z, delays, tr);
}

namespace {

Matrix vstack(const std::vector<Matrix>& parts) {
    require(!parts.empty(), "vstack: nothing to stack");
    Index rows = 0;
    for (const Matrix& p : parts) {
        require(p.cols() == parts.front().cols(), "vstack: column mismatch");
        rows += p.rows();
    }
    Matrix out(rows, parts.front().cols());
    Index r = 0;
    for (const Matrix& p : parts) {
        out.middleRows(r, p.rows()) = p;
        r += p.rows();
    }
    return out;
}

const Waveform& story_wave(const SubjectData& data, int id) {
    require(id >= 0 && static_cast<std::size_t>(id) < data.waves.size() &&
                !data.waves[static_cast<std::size_t>(id)].samples.empty(),
            "missing waveform for story " + std::to_string(id));
    return data.waves[static_cast<std::size_t>(id)];
}

const Matrix& story_response(const SubjectData& data, int id) {
    require(id >= 0 && static_cast<std::size_t>(id) < data.responses.size() &&
                data.responses[static_cast<std::size_t>(id)].size() > 0,
            "missing responses for story " + std::to_string(id));
    return data.responses[static_cast<std::size_t>(id)];
}

}  // namespace

EncodingEval encoding_eval(const EncoderWeights& w, const LoraAdapterSet* adapters,
                           const SubjectData& data, const CvConfig& cv) {
    require(!data.split.train.empty() && !data.split.val.empty(),
            "eval: split needs training and validation stories");
    const int layer = w.config.readout_layer;
    auto collect = [&](const std::vector<int>& ids, std::vector<Matrix>& xs,
                       std::vector<Matrix>& ys) {
        for (int id : ids) {
            Matrix x = story_design(w, adapters, story_wave(data, id), layer, data.tr);
            const Matrix& y = story_response(data, id);
            require(x.rows() == y.rows(),
                    "eval: design rows disagree with response volumes for story " +
                        std::to_string(id));
            xs.push_back(std::move(x));
            ys.push_back(y);
        }
    };
    std::vector<Matrix> xtr, ytr, xv, yv;
    collect(data.split.train, xtr, ytr);
    collect(data.split.val, xv, yv);
    const Matrix x_train = vstack(xtr);
    const Matrix y_train = vstack(ytr);
    const CvSelection sel = cv_select_alpha(x_train, y_train, cv);
    const RidgeFit fit = fit_ridge(x_train, y_train, sel.alpha);
    const TemporalScore sc = score_temporal(vstack(yv), predict(fit, vstack(xv)));
    EncodingEval ev;
    ev.rho = sc.rho;
    ev.mean_rho = sc.rho.mean();
    ev.alpha = sel.alpha;
    ev.n_zero_variance = sc.n_zero_variance;
    return ev;
}

namespace {

// Canonical trainable-parameter order; gradients are collected to match.
// LoRA: per layer, per projection (q, k, v), A then B. Full: frame projection
// and bias, then per layer wq, wk, wv, wo, ff1, ff2, ff1_b, ff2_b, ln1_g,
// ln1_b, ln2_g, ln2_b. The head (down, up) always comes last.
std::vector<Matrix*> trainable_params(TrainState& st) {
    std::vector<Matrix*> ps;
    if (st.use_lora) {
        for (auto& layer : st.adapters.layers)
            for (auto& ad : layer) {
                ps.push_back(&ad.a);
                ps.push_back(&ad.b);
            }
    } else {
        ps.push_back(&st.weights.frame_proj);
        ps.push_back(&st.weights.frame_bias);
        for (LayerWeights& lw : st.weights.layers) {
            ps.push_back(&lw.wq);
            ps.push_back(&lw.wk);
            ps.push_back(&lw.wv);
            ps.push_back(&lw.wo);
            ps.push_back(&lw.ff1);
            ps.push_back(&lw.ff2);
            ps.push_back(&lw.ff1_b);
            ps.push_back(&lw.ff2_b);
            ps.push_back(&lw.ln1_g);
            ps.push_back(&lw.ln1_b);
            ps.push_back(&lw.ln2_g);
            ps.push_back(&lw.ln2_b);
        }
    }
    ps.push_back(&st.head.down);
    ps.push_back(&st.head.up);
    return ps;
}

std::vector<Matrix> collect_grads(const gr::Graph& g, const enc_graph::BoundEncoder& enc,
                                  bool use_lora, const std::vector<gr::Var>& down_blocks,
                                  gr::Var up) {
    std::vector<Matrix> gs;
    if (use_lora) {
        for (const auto& layer : enc.adapters)
            for (const enc_graph::BoundAdapter& ad : layer) {
                gs.push_back(g.gradient(ad.a));
                gs.push_back(g.gradient(ad.b));
            }
    } else {
        gs.push_back(g.gradient(enc.frame_proj));
        gs.push_back(g.gradient(enc.frame_bias));
        for (const enc_graph::BoundLayer& bl : enc.layers) {
            gs.push_back(g.gradient(bl.wq));
            gs.push_back(g.gradient(bl.wk));
            gs.push_back(g.gradient(bl.wv));
            gs.push_back(g.gradient(bl.wo));
            gs.push_back(g.gradient(bl.ff1));
            gs.push_back(g.gradient(bl.ff2));
            gs.push_back(g.gradient(bl.ff1_b));
            gs.push_back(g.gradient(bl.ff2_b));
            gs.push_back(g.gradient(bl.ln1_g));
            gs.push_back(g.gradient(bl.ln1_b));
            gs.push_back(g.gradient(bl.ln2_g));
            gs.push_back(g.gradient(bl.ln2_b));
        }
    }
    std::vector<Matrix> blocks;
    Index rows = 0;
    for (gr::Var v : down_blocks) {
        blocks.push_back(g.gradient(v));
        rows += blocks.back().rows();
    }
    Matrix gd(rows, blocks.front().cols());
    Index off = 0;
    for (const Matrix& b : blocks) {
        gd.middleRows(off, b.rows()) = b;
        off += b.rows();
    }
    gs.push_back(std::move(gd));
    gs.push_back(g.gradient(up));
    return gs;
}

// FIR delay shifts in whole volumes, matching the refit design's delay stack.
std::vector<Index> delay_shifts(double tr) {
    std::vector<Index> out;
    for (double d : default_delays())
        out.push_back(static_cast<Index>(std::llround(d / tr)));
    return out;
}

// Rank-k factorization of the least-squares readout, so training starts from
// the head's best linear fit of the initial features.
BottleneckHead ls_head_init(const Matrix& f, const Matrix& y, Index k) {
    Eigen::BDCSVD<Matrix> sf(f, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Matrix beta = sf.solve(y);
    Eigen::BDCSVD<Matrix> sb(beta, Eigen::ComputeThinU | Eigen::ComputeThinV);
    k = std::min(k, std::min(beta.rows(), beta.cols()));
    BottleneckHead h;
    h.down = sb.matrixU().leftCols(k);
    h.up = sb.singularValues().head(k).asDiagonal() *
           sb.matrixV().leftCols(k).transpose();
    return h;
}

struct BatchSpec {
    int story = 0;
    Index lo = 0, hi = 0;
};

std::vector<BatchSpec> canonical_batches(const TrainState& st, const SubjectData& data,
                                         const TrainConfig& cfg) {
    std::vector<BatchSpec> batches;
    for (int id : data.split.train) {
        const Index t = st.caches[static_cast<std::size_t>(id)].targets.rows();
        for (Index lo = 0; lo < t; lo += cfg.batch_trs)
            batches.push_back({id, lo, std::min<Index>(lo + cfg.batch_trs, t)});
    }
    return batches;
}

// Forward (and optionally backward + Adam step) for one contiguous batch.
// Only the window span whose Lanczos weights can reach the batch volumes is
// pushed through the encoder.
double run_batch(const TrainState& st, const StoryCache& c, Index lo, Index hi, double tr,
                 TrainState* upd, double lr, long* n_degenerate) {
    gr::Graph g;
    const enc_graph::BoundEncoder enc = st.use_lora
                                            ? enc_graph::bind_lora(g, st.weights, st.adapters)
                                            : enc_graph::bind_full(g, st.weights);
    const double cutoff = 1.0 / tr;
    const double support = static_cast<double>(kLanczosLobes) / cutoff;
    const std::vector<Index> shifts = delay_shifts(tr);
    const Index max_shift = *std::max_element(shifts.begin(), shifts.end());
    // The head reads the same FIR-delayed design the refit evaluation uses, so
    // the feature span extends back far enough to cover the largest delay.
    const Index span_lo = std::max<Index>(0, lo - max_shift);
    const double* tb = c.win_times.data();
    const double* te = tb + c.win_times.size();
    const Index w_lo = std::lower_bound(tb, te, c.vol_times(span_lo) - support - 1e-9) - tb;
    const Index w_hi = std::upper_bound(tb, te, c.vol_times(hi - 1) + support + 1e-9) - tb;
    const Index n_win = w_hi - w_lo;
    require(n_win >= 2, "batch: too few analysis windows in range");

    const Matrix frames_slice = c.frames.middleRows(
        w_lo * c.step, (n_win - 1) * c.step + c.win_frames);
    const gr::Var x =
        enc_graph::stacked_readout(g, enc, st.weights.config, frames_slice, c.win_frames,
                                   c.step, static_cast<int>(n_win),
                                   st.weights.config.readout_layer);
    Matrix l = lanczos_matrix(c.win_times.segment(w_lo, n_win),
                              c.vol_times.segment(span_lo, hi - span_lo), cutoff,
                              kLanczosLobes);
    const gr::Var feats = gr::matmul(g.constant(std::move(l)), x);
    const Index nb = hi - lo;
    const Index ns = hi - span_lo;
    const Index p = st.head.down.rows() / static_cast<Index>(shifts.size());
    std::vector<gr::Var> down_blocks;
    gr::Var acc;
    for (std::size_t d = 0; d < shifts.size(); ++d) {
        Matrix gather = Matrix::Zero(nb, ns);
        for (Index i = 0; i < nb; ++i) {
            const Index src = lo + i - shifts[d];
            if (src >= 0) gather(i, src - span_lo) = 1.0;
        }
        const gr::Var block = gr::matmul(g.constant(std::move(gather)), feats);
        const gr::Var dn =
            g.leaf(st.head.down.middleRows(static_cast<Index>(d) * p, p), true);
        down_blocks.push_back(dn);
        const gr::Var term = gr::matmul(block, dn);
        acc = d == 0 ? term : gr::add(acc, term);
    }
    const gr::Var up = g.leaf(st.head.up, true);
    const gr::Var pred = gr::matmul(acc, up);
    const Matrix tgt = c.targets.middleRows(lo, hi - lo);
    const gr::Var loss = spatial_corr_loss_op(g, pred, tgt, n_degenerate);
    if (upd) {
        g.backward(loss);
        const std::vector<Matrix> grads =
            collect_grads(g, enc, st.use_lora, down_blocks, up);
        upd->adam.apply(trainable_params(*upd), grads, lr);
    }
    return loss.value()(0, 0);
}

}  // namespace

TrainState init_train_state(const EncoderWeights& base, const SubjectData& data,
                            const TrainConfig& cfg) {
    cfg.validate();
    require(!data.split.train.empty(), "train: no training stories in split");
    require(data.tr > 0.0, "train: tr must be positive");
    const EncoderConfig& ec = base.config;

    TrainState st;
    st.weights = base;
    st.use_lora = cfg.use_lora;
    if (cfg.use_lora)
        st.adapters = init_adapters(ec, cfg.lora_rank, cfg.lora_alpha, mix_seed(cfg.seed, 11));

    const Index n_targets = story_response(data, data.split.train.front()).cols();
    if (cfg.roi_mask.empty()) {
        st.mask.resize(static_cast<std::size_t>(n_targets));
        std::iota(st.mask.begin(), st.mask.end(), Index{0});
    } else {
        std::vector<char> seen(static_cast<std::size_t>(n_targets), 0);
        for (Index v : cfg.roi_mask) {
            require(v >= 0 && v < n_targets, "train: roi mask index out of range");
            require(!seen[static_cast<std::size_t>(v)], "train: duplicate roi mask index");
            seen[static_cast<std::size_t>(v)] = 1;
        }
        st.mask = cfg.roi_mask;
    }
    require(st.mask.size() >= 2, "train: spatial loss needs at least two target columns");

    int max_id = 0;
    for (int id : data.split.train) max_id = std::max(max_id, id);
    st.caches.resize(static_cast<std::size_t>(max_id) + 1);
    for (int id : data.split.train) {
        const Waveform& wav = story_wave(data, id);
        const Matrix& resp = story_response(data, id);
        require(resp.cols() == n_targets, "train: story target widths differ");
        StoryCache c;
        const SlidePlan plan = slide_windows(wav);
        require(plan.stride_samples % ec.frame_stride == 0,
                "train: window stride must be a multiple of the encoder frame stride");
        require(plan.win_samples >= ec.frame_size, "train: window shorter than one frame");
        c.step = plan.stride_samples / ec.frame_stride;
        c.win_frames = (plan.win_samples - ec.frame_size) / ec.frame_stride + 1;
        c.frames = frame_stack(wav.samples, ec.frame_size, ec.frame_stride);
        c.win_times = plan.times;
        c.n_windows = plan.count;
        c.vol_times = volume_times(static_cast<int>(resp.rows()), data.tr);
        require(c.vol_times(0) >= c.win_times(0) - 1e-9 &&
                    c.vol_times(resp.rows() - 1) <= c.win_times(plan.count - 1) + 1e-9,
                "train: volume grid extends past the analysis windows of story " +
                    std::to_string(id));
        c.targets.resize(resp.rows(), static_cast<Index>(st.mask.size()));
        for (std::size_t j = 0; j < st.mask.size(); ++j)
            c.targets.col(static_cast<Index>(j)) = resp.col(st.mask[j]);
        st.caches[static_cast<std::size_t>(id)] = std::move(c);
    }

    std::vector<Matrix> f_parts, y_parts;
    for (int id : data.split.train) {
        const StoryCache& c = st.caches[static_cast<std::size_t>(id)];
        const WindowedFeatures ex =
            extract_features(st.weights, st.use_lora ? &st.adapters : nullptr,
                             story_wave(data, id), ec.readout_layer);
        f_parts.push_back(delay_stack(
            lanczos_resample(ex, c.vol_times, data.tr, 1.0 / data.tr, kLanczosLobes).m,
            default_delays(), data.tr));
        y_parts.push_back(c.targets);
    }
    const Index k = std::min<Index>(
        {static_cast<Index>(cfg.head_rank), static_cast<Index>(ec.d_model),
         static_cast<Index>(st.mask.size())});
    st.head = ls_head_init(vstack(f_parts), vstack(y_parts), k);
    st.adam.init(trainable_params(st));
    return st;
}

double train_epoch(TrainState& st, const SubjectData& data, const TrainConfig& cfg,
                   int epoch, double lr, long* n_degenerate) {
    const std::vector<BatchSpec> batches = canonical_batches(st, data, cfg);
    require(!batches.empty(), "train: no batches");
    std::vector<int> order(batches.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg.seed, 7000 + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    std::vector<double> losses(batches.size(), 0.0);
    std::vector<long> degs(batches.size(), 0);
    for (int idx : order) {
        const BatchSpec& b = batches[static_cast<std::size_t>(idx)];
        const StoryCache& c = st.caches[static_cast<std::size_t>(b.story)];
        try {
            losses[static_cast<std::size_t>(idx)] =
                run_batch(st, c, b.lo, b.hi, data.tr, &st, lr,
                          &degs[static_cast<std::size_t>(idx)]);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(
                "training aborted at epoch " + std::to_string(epoch) + ", story " +
                std::to_string(b.story) + ", volumes [" + std::to_string(b.lo) + ", " +
                std::to_string(b.hi) + "): " + e.what());
        }
    }
    // Volume-weighted mean, reduced in canonical batch order so the result
    // does not depend on the visit order.
    double loss_sum = 0.0;
    Index rows = 0;
    long deg = 0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        const Index n = batches[i].hi - batches[i].lo;
        loss_sum += losses[i] * static_cast<double>(n);
        rows += n;
        deg += degs[i];
    }
    if (n_degenerate) *n_degenerate = deg;
    return loss_sum / static_cast<double>(rows);
}

double epoch_loss(const TrainState& st, const SubjectData& data, const TrainConfig& cfg,
                  long* n_degenerate) {
    const std::vector<BatchSpec> batches = canonical_batches(st, data, cfg);
    require(!batches.empty(), "train: no batches");
    double loss_sum = 0.0;
    Index rows = 0;
    long deg = 0;
    for (const BatchSpec& b : batches) {
        const StoryCache& c = st.caches[static_cast<std::size_t>(b.story)];
        long d = 0;
        const double l = run_batch(st, c, b.lo, b.hi, data.tr, nullptr, 0.0, &d);
        loss_sum += l * static_cast<double>(b.hi - b.lo);
        rows += b.hi - b.lo;
        deg += d;
    }
    if (n_degenerate) *n_degenerate = deg;
    return loss_sum / static_cast<double>(rows);
}

int select_best_epoch(const std::vector<EpochReport>& reports) {
    int best = -1;
    double best_rho = 0.0;
    for (const EpochReport& r : reports) {
        if (!r.evaluated || !std::isfinite(r.val_rho)) continue;
        if (best < 0 || r.val_rho > best_rho) {
            best = r.epoch;
            best_rho = r.val_rho;
        }
    }
    require(best >= 0, "epoch selection: no evaluated epochs");
    return best;
}

namespace {

nlohmann::json report_json(const EpochReport& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["mean_loss"] = std::isfinite(r.mean_loss) ? nlohmann::json(r.mean_loss)
                                                : nlohmann::json();
    j["val_rho"] =
        r.evaluated && std::isfinite(r.val_rho) ? nlohmann::json(r.val_rho) : nlohmann::json();
    j["evaluated"] = r.evaluated;
    j["n_degenerate"] = r.n_degenerate;
    j["wall_s"] = r.wall_s;
    return j;
}

}  // namespace

FinetuneResult finetune(const EncoderWeights& base, const SubjectData& data,
                        const TrainConfig& cfg, const std::string& out_dir) {
    using clock = std::chrono::steady_clock;
    TrainState st = init_train_state(base, data, cfg);

    const bool writing = !out_dir.empty();
    std::ofstream log;
    fs::path ckpt_dir;
    if (writing) {
        ckpt_dir = fs::path(out_dir) / "checkpoints";
        fs::create_directories(ckpt_dir);
        log.open(fs::path(out_dir) / "epoch_log.jsonl", std::ios::trunc);
        require(log.good(), "finetune: cannot write epoch log in " + out_dir);
    }

    FinetuneResult res;
    std::vector<LoraAdapterSet> adapter_snaps;
    std::vector<EncoderWeights> weight_snaps;
    auto snapshot = [&](int epoch) {
        if (st.use_lora)
            adapter_snaps.push_back(st.adapters);
        else
            weight_snaps.push_back(st.weights);
        if (writing) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03d.bin", epoch);
            const std::string path = (ckpt_dir / name).string();
            if (st.use_lora)
                save_adapters(path, st.adapters);
            else
                save_encoder(path, st.weights);
        }
    };
    auto evaluate = [&]() {
        return encoding_eval(st.weights, st.use_lora ? &st.adapters : nullptr, data,
                             cfg.eval_cv);
    };
    auto record = [&](const EpochReport& r, Vector rho) {
        res.reports.push_back(r);
        res.epoch_rho.push_back(std::move(rho));
        if (writing) log << report_json(r).dump() << '\n';
    };

    {
        const auto t0 = clock::now();
        const EncodingEval ev = evaluate();
        EpochReport r;
        r.epoch = 0;
        r.val_rho = ev.mean_rho;
        r.evaluated = true;
        r.wall_s = std::chrono::duration<double>(clock::now() - t0).count();
        snapshot(0);
        record(r, ev.rho);
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = cfg.use_lora ? cfg.learning_rate
                                       : cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        const auto t0 = clock::now();
        EpochReport r;
        r.epoch = epoch;
        r.mean_loss = train_epoch(st, data, cfg, epoch, lr, &r.n_degenerate);
        Vector rho;
        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            const EncodingEval ev = evaluate();
            r.val_rho = ev.mean_rho;
            r.evaluated = true;
            rho = ev.rho;
        }
        r.wall_s = std::chrono::duration<double>(clock::now() - t0).count();
        snapshot(epoch);
        record(r, std::move(rho));
    }

    res.best_epoch = select_best_epoch(res.reports);
    if (st.use_lora) {
        res.best_weights = base;
        res.best_adapters = adapter_snaps[static_cast<std::size_t>(res.best_epoch)];
    } else {
        res.best_weights = weight_snaps[static_cast<std::size_t>(res.best_epoch)];
    }
    res.head = st.head;
    if (writing) {
        nlohmann::json best;
        best["best_epoch"] = res.best_epoch;
        best["val_rho"] = res.reports[static_cast<std::size_t>(res.best_epoch)].val_rho;
        std::ofstream out(fs::path(out_dir) / "best.json", std::ios::trunc);
        require(out.good(), "finetune: cannot write best.json in " + out_dir);
        out << best.dump(2) << '\n';
    }
    return res;
}

}  // namespace neuroencode
