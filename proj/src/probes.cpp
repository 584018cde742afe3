#include "neuroencode/probes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "neuroencode/rng.hpp"

namespace neuroencode {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

Index nearest_row(const Vector& times, double q) {
    const double* b = times.data();
    const double* e = b + times.size();
    const double* it = std::lower_bound(b, e, q);
    if (it == b) return 0;
    if (it == e) return times.size() - 1;
    const Index hi = it - b;
    const Index lo = hi - 1;
    return (q - times(lo) <= times(hi) - q) ? lo : hi;
}

double anchor_time(const WordMark& w, AlignAnchor anchor) {
    switch (anchor) {
        case AlignAnchor::onset: return w.onset;
        case AlignAnchor::midpoint: return 0.5 * (w.onset + w.offset);
        case AlignAnchor::offset: break;
    }
    return w.offset;
}

Matrix take_rows(const Matrix& m, const std::vector<Index>& rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
}

Matrix vstack(const std::vector<Matrix>& parts) {
    require(!parts.empty(), "probe: nothing to stack");
    Index rows = 0;
    for (const Matrix& p : parts) {
        require(p.cols() == parts.front().cols(), "probe: column mismatch");
        rows += p.rows();
    }
    require(rows > 0, "probe: no rows to fit");
    Matrix out(rows, parts.front().cols());
    Index r = 0;
    for (const Matrix& p : parts) {
        out.middleRows(r, p.rows()) = p;
        r += p.rows();
    }
    return out;
}

}  // namespace

void FilterbankConfig::validate() const {
    require(n_mels >= 2, "filterbank: need at least two filters");
    require(frame >= 4, "filterbank: frame too short");
    require(hop >= 1, "filterbank: hop must be positive");
    require(std::isfinite(log_floor) && log_floor > 0.0, "filterbank: bad log floor");
}

MelFilterbank build_mel_filterbank(int n_mels, int n_fft, double sample_rate) {
    require(n_mels >= 2 && n_fft >= 4 && sample_rate > 0.0, "mel filterbank: bad parameters");
    const int n_bins = n_fft / 2 + 1;
    const double mel_hi = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edge_hz(static_cast<std::size_t>(n_mels) + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        edge_hz[static_cast<std::size_t>(i)] =
            mel_to_hz(mel_hi * static_cast<double>(i) / static_cast<double>(n_mels + 1));

    MelFilterbank fb;
    fb.weights = Matrix::Zero(n_mels, n_bins);
    fb.center_hz.resize(n_mels);
    for (int m = 0; m < n_mels; ++m) {
        const double lo = edge_hz[static_cast<std::size_t>(m)];
        const double mid = edge_hz[static_cast<std::size_t>(m) + 1];
        const double hi = edge_hz[static_cast<std::size_t>(m) + 2];
        fb.center_hz(m) = mid;
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
            const double rise = (f - lo) / (mid - lo);
            const double fall = (hi - f) / (hi - mid);
            fb.weights(m, k) = std::max(0.0, std::min(rise, fall));
        }
    }
    return fb;
}

FilterbankFeatures compute_filterbank(const Waveform& w, const FilterbankConfig& cfg) {
    cfg.validate();
    require(w.sample_rate > 0.0, "filterbank: bad sample rate");
    require(static_cast<int>(w.samples.size()) >= cfg.frame,
            "filterbank: frame longer than waveform");

    Matrix frames = frame_stack(w.samples, cfg.frame, cfg.hop);
    for (Index i = 0; i < frames.cols(); ++i) {
        const double win =
            0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) /
                                 static_cast<double>(cfg.frame - 1));
        frames.col(i) *= win;
    }

    const int n_bins = cfg.frame / 2 + 1;
    Matrix cosm(n_bins, cfg.frame), sinm(n_bins, cfg.frame);
    for (int k = 0; k < n_bins; ++k) {
        for (int i = 0; i < cfg.frame; ++i) {
            const double a = 2.0 * M_PI * static_cast<double>(k) * static_cast<double>(i) /
                             static_cast<double>(cfg.frame);
            cosm(k, i) = std::cos(a);
            sinm(k, i) = -std::sin(a);
        }
    }
    const Matrix re = frames * cosm.transpose();
    const Matrix im = frames * sinm.transpose();
    const Matrix power = re.array().square().matrix() + im.array().square().matrix();

    const MelFilterbank mel = build_mel_filterbank(cfg.n_mels, cfg.frame, w.sample_rate);
    FilterbankFeatures out;
    out.m = (power * mel.weights.transpose()).array().max(cfg.log_floor).log().matrix();
    out.times.resize(frames.rows());
    for (Index k = 0; k < frames.rows(); ++k)
        out.times(k) = (static_cast<double>(k) * cfg.hop + cfg.frame) / w.sample_rate;
    return out;
}

void validate_alignment(const WordAlignment& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i].offset > a[i].onset, "alignment: word span must be positive");
        if (i > 0) {
            require(a[i].onset > a[i - 1].onset, "alignment: onsets must increase");
            require(a[i].onset >= a[i - 1].offset, "alignment: words overlap");
        }
    }
}

WordAlignment story_words(const StorySpec& s, double token_dur) {
    require(token_dur > 0.0, "alignment: token duration must be positive");
    WordAlignment a;
    a.reserve(s.tokens.size());
    for (const TokenEvent& t : s.tokens) a.push_back({t.token, t.time, t.time + token_dur});
    validate_alignment(a);
    return a;
}

std::vector<Index> align_features_to_words(const Vector& times, const WordAlignment& a,
                                           AlignAnchor anchor) {
    require(times.size() >= 1, "alignment: no feature rows");
    std::vector<Index> rows;
    rows.reserve(a.size());
    for (const WordMark& w : a) {
        const double q = anchor_time(w, anchor);
        require(q >= times(0) - 1e-9 && q <= times(times.size() - 1) + 1e-9,
                "alignment: word outside the feature time support");
        rows.push_back(nearest_row(times, q));
    }
    return rows;
}

WordAlignment words_in_support(const Vector& times, const WordAlignment& a,
                               AlignAnchor anchor) {
    require(times.size() >= 1, "alignment: no feature rows");
    WordAlignment kept;
    for (const WordMark& w : a) {
        const double q = anchor_time(w, anchor);
        if (q >= times(0) - 1e-9 && q <= times(times.size() - 1) + 1e-9) kept.push_back(w);
    }
    return kept;
}

Matrix embedding_table(int vocab_size, std::uint64_t seed) {
    require(vocab_size >= 1, "embedding table: empty vocabulary");
    Rng rng(seed);
    return rng.gaussian_matrix(vocab_size, kEmbeddingDim, 1.0);
}

R2Score r2_score(const Matrix& y, const Matrix& y_hat) {
    require(y.rows() == y_hat.rows() && y.cols() == y_hat.cols(), "r2: shape mismatch");
    require(y.rows() >= 2, "r2: need at least two rows");
    R2Score s;
    s.per_dim.resize(y.cols());
    for (Index d = 0; d < y.cols(); ++d) {
        const double ym = y.col(d).mean();
        const double sst = (y.col(d).array() - ym).square().sum();
        const double sse = (y.col(d) - y_hat.col(d)).squaredNorm();
        if (sst == 0.0) {
            s.per_dim(d) = 0.0;
            ++s.n_degenerate;
        } else {
            s.per_dim(d) = 1.0 - sse / sst;
        }
    }
    s.mean = s.per_dim.mean();
    return s;
}

ProbeResult fit_probe(const Matrix& x_train, const Matrix& y_train, const Matrix& x_test,
                      const Matrix& y_test, const CvConfig& cv) {
    require(x_train.rows() == y_train.rows(), "probe: training rows disagree");
    require(x_test.rows() == y_test.rows(), "probe: test rows disagree");
    require(x_train.cols() == x_test.cols(), "probe: feature widths disagree");
    require(y_train.cols() == y_test.cols(), "probe: target widths disagree");
    const CvSelection sel = cv_select_alpha(x_train, y_train, cv);
    ProbeResult r;
    r.fit = fit_ridge(x_train, y_train, sel.alpha);
    const R2Score test = r2_score(y_test, predict(r.fit, x_test));
    const R2Score train = r2_score(y_train, predict(r.fit, x_train));
    r.r2 = test.mean;
    r.r2_per_dim = test.per_dim;
    r.r2_train = train.mean;
    r.r2_train_per_dim = train.per_dim;
    return r;
}

ProbeStories probe_stories(const Dataset& ds) {
    ProbeStories ps;
    ps.train = ds.split.train;
    ps.test = ds.split.test;
    ps.vocab_size = ds.cfg.waveform.vocab_size;
    int max_id = 0;
    for (const StorySpec& s : ds.stories) max_id = std::max(max_id, s.id);
    ps.waves.resize(static_cast<std::size_t>(max_id) + 1);
    ps.words.resize(static_cast<std::size_t>(max_id) + 1);
    for (const StorySpec& s : ds.stories) {
        ps.waves[static_cast<std::size_t>(s.id)] = dataset_story_wave(ds, s.id);
        ps.words[static_cast<std::size_t>(s.id)] =
            story_words(s, ds.cfg.waveform.token_dur);
    }
    return ps;
}

namespace {

struct StoryTargets {
    Vector win_times;
    Matrix y_filterbank;           // one row per analysis window
    std::vector<Index> word_rows;  // feature row per in-support word
    Matrix y_embedding;            // one row per in-support word
};

StoryTargets build_targets(const Waveform& wav, const WordAlignment& words,
                           const Matrix& embeddings, const ProbeConfig& cfg) {
    StoryTargets t;
    t.win_times = slide_windows(wav).times;
    const FilterbankFeatures fb = compute_filterbank(wav, cfg.filterbank);
    t.y_filterbank.resize(t.win_times.size(), fb.m.cols());
    for (Index k = 0; k < t.win_times.size(); ++k)
        t.y_filterbank.row(k) = fb.m.row(nearest_row(fb.times, t.win_times(k)));
    const WordAlignment kept = words_in_support(t.win_times, words, cfg.anchor);
    t.word_rows = align_features_to_words(t.win_times, kept, cfg.anchor);
    t.y_embedding.resize(static_cast<Index>(kept.size()), embeddings.cols());
    for (std::size_t i = 0; i < kept.size(); ++i) {
        const int w = kept[i].word;
        require(w >= 0 && w < embeddings.rows(), "probe: word id outside the vocabulary");
        t.y_embedding.row(static_cast<Index>(i)) = embeddings.row(w);
    }
    return t;
}

}  // namespace

std::vector<ProbeCell> probe_sweep(const std::vector<ProbeModel>& models,
                                   const ProbeStories& stories, const ProbeConfig& cfg) {
    require(!models.empty(), "probe sweep: no models");
    require(!stories.train.empty() && !stories.test.empty(),
            "probe sweep: need training and test stories");
    const EncoderConfig& c0 = models.front().weights.config;
    for (const ProbeModel& m : models) {
        const EncoderConfig& c = m.weights.config;
        require(c.frame_size == c0.frame_size && c.frame_stride == c0.frame_stride &&
                    c.n_layers == c0.n_layers && c.d_model == c0.d_model &&
                    c.readout_layer == c0.readout_layer,
                "probe sweep: models must share the featurization config");
    }

    const Matrix embeddings = embedding_table(stories.vocab_size, cfg.embed_seed);
    std::vector<int> ids = stories.train;
    ids.insert(ids.end(), stories.test.begin(), stories.test.end());

    auto story_of = [&](int id) -> const Waveform& {
        require(id >= 0 && static_cast<std::size_t>(id) < stories.waves.size() &&
                    !stories.waves[static_cast<std::size_t>(id)].samples.empty(),
                "probe sweep: missing waveform for story " + std::to_string(id));
        return stories.waves[static_cast<std::size_t>(id)];
    };

    std::vector<StoryTargets> targets(stories.waves.size());
    for (int id : ids)
        targets[static_cast<std::size_t>(id)] =
            build_targets(story_of(id), stories.words[static_cast<std::size_t>(id)],
                          embeddings, cfg);

    const int n_layers_swept = c0.readout_layer + 1;
    std::vector<ProbeCell> cells;
    std::vector<double> base_r2(static_cast<std::size_t>(n_layers_swept) * 2, 0.0);

    for (std::size_t mi = 0; mi < models.size(); ++mi) {
        const ProbeModel& model = models[mi];
        std::vector<std::vector<WindowedFeatures>> feats(stories.waves.size());
        for (int id : ids)
            feats[static_cast<std::size_t>(id)] = extract_all_layers(
                model.weights, model.adapters ? &*model.adapters : nullptr, story_of(id));

        for (int layer = 0; layer < n_layers_swept; ++layer) {
            for (int kind = 0; kind < 2; ++kind) {
                std::vector<Matrix> xtr, ytr, xte, yte;
                for (int id : ids) {
                    const Matrix& f = feats[static_cast<std::size_t>(id)]
                                           [static_cast<std::size_t>(layer)].m;
                    const StoryTargets& t = targets[static_cast<std::size_t>(id)];
                    const bool is_train =
                        std::find(stories.train.begin(), stories.train.end(), id) !=
                        stories.train.end();
                    Matrix x = kind == 0 ? f : take_rows(f, t.word_rows);
                    const Matrix& y = kind == 0 ? t.y_filterbank : t.y_embedding;
                    (is_train ? xtr : xte).push_back(std::move(x));
                    (is_train ? ytr : yte).push_back(y);
                }
                const ProbeResult r = fit_probe(vstack(xtr), vstack(ytr), vstack(xte),
                                                vstack(yte), cfg.cv);
                ProbeCell cell;
                cell.model_id = model.id;
                cell.layer = layer;
                cell.kind = kind == 0 ? "filterbank" : "embedding";
                cell.r2 = r.r2;
                const std::size_t slot =
                    static_cast<std::size_t>(layer) * 2 + static_cast<std::size_t>(kind);
                if (mi == 0) base_r2[slot] = r.r2;
                cell.r2_minus_pretrained = r.r2 - base_r2[slot];
                cells.push_back(std::move(cell));
            }
        }
    }
    return cells;
}

}  // namespace neuroencode
