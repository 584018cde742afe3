#include "neuroencode/probes.hpp"

#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "neuroencode/hash.hpp"
#include "neuroencode/rng.hpp"

using namespace neuroencode;

namespace {

EncoderConfig tiny_encoder() {
    EncoderConfig ec;
    ec.n_layers = 2;
    ec.d_model = 8;
    ec.n_heads = 2;
    ec.d_ff = 16;
    ec.frame_size = 16;
    ec.frame_stride = 8;
    ec.readout_layer = 2;
    ec.seed = 3;
    return ec;
}

Waveform noise_wave(double duration, double rate, std::uint64_t seed) {
    Waveform w;
    w.sample_rate = rate;
    w.samples.resize(static_cast<std::size_t>(duration * rate));
    Rng rng(seed);
    for (double& s : w.samples) s = rng.gaussian(0.3);
    return w;
}

Waveform tone_wave(double hz, double duration, double rate) {
    Waveform w;
    w.sample_rate = rate;
    w.samples.resize(static_cast<std::size_t>(duration * rate));
    for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = 0.5 * std::sin(2.0 * M_PI * hz * static_cast<double>(i) / rate);
    return w;
}

CvConfig tiny_cv() {
    CvConfig cv;
    cv.alpha_grid = {1.0, 100.0};
    cv.n_folds = 2;
    cv.chunk_length = 2;
    return cv;
}

Vector vec3(double a, double b, double c) {
    Vector v(3);
    v << a, b, c;
    return v;
}

WordMark word_at(double onset, double offset, int id = 0) {
    WordMark w;
    w.word = id;
    w.onset = onset;
    w.offset = offset;
    return w;
}

}  // namespace

TEST_CASE("silence hits the log floor everywhere") {
    Waveform w;
    w.sample_rate = 400.0;
    w.samples.assign(4000, 0.0);
    const FilterbankFeatures fb = compute_filterbank(w);
    CHECK(fb.m.rows() == (4000 - 128) / 40 + 1);
    CHECK(fb.m.cols() == 24);
    CHECK((fb.m.array() == std::log(1e-10)).all());
}

TEST_CASE("filterbank frame times use the end convention") {
    const FilterbankFeatures fb = compute_filterbank(noise_wave(8.0, 400.0, 1));
    CHECK(fb.times.size() == fb.m.rows());
    CHECK(fb.times(0) == doctest::Approx(128.0 / 400.0).epsilon(1e-12));
    CHECK(fb.times(1) == doctest::Approx(168.0 / 400.0).epsilon(1e-12));
}

TEST_CASE("a tone at a filter center peaks in that filter") {
    const MelFilterbank mel = build_mel_filterbank(24, 128, 400.0);
    for (int target : {6, 12, 18}) {
        const FilterbankFeatures fb =
            compute_filterbank(tone_wave(mel.center_hz(target), 8.0, 400.0));
        const Vector e = fb.m.colwise().mean();
        Index peak = 0;
        e.maxCoeff(&peak);
        CHECK(peak == target);
        for (Index m = 0; m < e.size(); ++m)
            if (std::abs(static_cast<int>(m) - target) >= 2) CHECK(e(target) > e(m) + 1.0);
    }
}

TEST_CASE("doubling the amplitude adds log 4 to every energy") {
    Waveform w1 = noise_wave(2.0, 400.0, 2);
    Waveform w2 = w1;
    for (double& s : w2.samples) s *= 2.0;
    FilterbankConfig cfg;
    cfg.log_floor = 1e-300;
    const FilterbankFeatures f1 = compute_filterbank(w1, cfg);
    const FilterbankFeatures f2 = compute_filterbank(w2, cfg);
    CHECK(((f2.m - f1.m).array() - std::log(4.0)).abs().maxCoeff() < 1e-9);
}

TEST_CASE("polarity flip leaves the energies bit-identical") {
    Waveform w1 = noise_wave(2.0, 400.0, 3);
    Waveform w2 = w1;
    for (double& s : w2.samples) s = -s;
    const FilterbankFeatures f1 = compute_filterbank(w1);
    const FilterbankFeatures f2 = compute_filterbank(w2);
    CHECK(hash_matrix(f1.m) == hash_matrix(f2.m));
}

TEST_CASE("filterbank rejects bad inputs") {
    Waveform shorty;
    shorty.sample_rate = 400.0;
    shorty.samples.assign(100, 0.1);
    CHECK_THROWS_AS(compute_filterbank(shorty), std::invalid_argument);

    FilterbankConfig bad;
    bad.hop = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = FilterbankConfig{};
    bad.n_mels = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = FilterbankConfig{};
    bad.log_floor = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    CHECK_THROWS_AS(build_mel_filterbank(24, 128, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(build_mel_filterbank(1, 128, 400.0), std::invalid_argument);
}

TEST_CASE("mel filters are triangular and ordered") {
    const MelFilterbank mel = build_mel_filterbank(24, 128, 400.0);
    CHECK(mel.weights.rows() == 24);
    CHECK(mel.weights.cols() == 65);
    CHECK((mel.weights.array() >= 0.0).all());
    for (Index m = 0; m < 24; ++m) {
        CHECK(mel.weights.row(m).maxCoeff() > 0.0);
        if (m > 0) CHECK(mel.center_hz(m) > mel.center_hz(m - 1));
    }
    CHECK(mel.center_hz(23) < 200.0);
}

TEST_CASE("alignment picks the nearest row, earlier on ties") {
    const Vector times = vec3(1.0, 2.0, 3.0);

    WordAlignment a = {word_at(1.8, 2.0)};
    CHECK(align_features_to_words(times, a)[0] == 1);

    a = {word_at(1.0, 1.5)};
    CHECK(align_features_to_words(times, a)[0] == 0);

    a = {word_at(2.9, 3.0000000005)};
    CHECK(align_features_to_words(times, a)[0] == 2);

    a = {word_at(0.3, 0.5)};
    CHECK_THROWS_AS(align_features_to_words(times, a), std::invalid_argument);
    a = {word_at(3.0, 3.2)};
    CHECK_THROWS_AS(align_features_to_words(times, a), std::invalid_argument);
}

TEST_CASE("anchor choice moves the aligned row") {
    const Vector times = vec3(1.0, 2.0, 3.0);
    const WordAlignment a = {word_at(1.9, 3.0)};
    CHECK(align_features_to_words(times, a, AlignAnchor::offset)[0] == 2);
    CHECK(align_features_to_words(times, a, AlignAnchor::onset)[0] == 1);
    CHECK(align_features_to_words(times, a, AlignAnchor::midpoint)[0] == 1);
}

TEST_CASE("support filter drops only out-of-range words") {
    const Vector times = vec3(1.0, 2.0, 3.0);
    const WordAlignment a = {word_at(0.3, 0.5, 7), word_at(1.8, 2.0, 8),
                             word_at(3.3, 3.5, 9)};
    const WordAlignment kept = words_in_support(times, a);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].word == 8);
    CHECK(words_in_support(times, a, AlignAnchor::onset).size() == 1);
}

TEST_CASE("story words mirror the planted tokens") {
    const StorySpec spec = make_story_spec(0, 10.0, 3);
    const WordAlignment a = story_words(spec, 0.25);
    REQUIRE(a.size() == spec.tokens.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].word == spec.tokens[i].token);
        CHECK(a[i].onset == spec.tokens[i].time);
        CHECK(a[i].offset == spec.tokens[i].time + 0.25);
    }
    CHECK_THROWS_AS(story_words(spec, 0.0), std::invalid_argument);
}

TEST_CASE("alignment validation flags malformed word lists") {
    WordAlignment a = {word_at(0.0, 1.0), word_at(0.5, 1.5)};
    CHECK_THROWS_AS(validate_alignment(a), std::invalid_argument);
    a = {word_at(1.0, 1.5), word_at(0.5, 0.8)};
    CHECK_THROWS_AS(validate_alignment(a), std::invalid_argument);
    a = {word_at(1.0, 1.0)};
    CHECK_THROWS_AS(validate_alignment(a), std::invalid_argument);
    a = {word_at(0.0, 1.0), word_at(1.0, 2.0)};
    CHECK_NOTHROW(validate_alignment(a));
}

TEST_CASE("embedding table is seeded and fixed width") {
    const Matrix e1 = embedding_table(32, 41);
    const Matrix e2 = embedding_table(32, 41);
    const Matrix e3 = embedding_table(32, 42);
    CHECK(e1.rows() == 32);
    CHECK(e1.cols() == kEmbeddingDim);
    CHECK(hash_matrix(e1) == hash_matrix(e2));
    CHECK(hash_matrix(e1) != hash_matrix(e3));
    CHECK_THROWS_AS(embedding_table(0, 1), std::invalid_argument);
}

TEST_CASE("r2 matches its definition at the anchors") {
    Rng rng(5);
    const Matrix y = rng.gaussian_matrix(10, 3, 1.0);

    const R2Score perfect = r2_score(y, y);
    CHECK(perfect.mean == 1.0);
    CHECK((perfect.per_dim.array() == 1.0).all());
    CHECK(perfect.n_degenerate == 0);

    Matrix mean_pred(10, 3);
    for (Index d = 0; d < 3; ++d) mean_pred.col(d).setConstant(y.col(d).mean());
    const R2Score zero = r2_score(y, mean_pred);
    CHECK(zero.mean == 0.0);

    const R2Score worse = r2_score(y, (mean_pred.array() + 5.0).matrix());
    CHECK(worse.mean < -1.0);

    Matrix yc = y;
    yc.col(1).setConstant(2.0);
    const R2Score degen = r2_score(yc, y);
    CHECK(degen.n_degenerate == 1);
    CHECK(degen.per_dim(1) == 0.0);
    CHECK(degen.per_dim(0) == 1.0);

    CHECK_THROWS_AS(r2_score(y, y.topRows(5)), std::invalid_argument);
    CHECK_THROWS_AS(r2_score(y.topRows(1), y.topRows(1)), std::invalid_argument);
}

TEST_CASE("probes recover a linear map and ignore noise") {
    Rng rng(6);
    const Matrix b = rng.gaussian_matrix(5, 3, 1.0);
    const Matrix xtr = rng.gaussian_matrix(120, 5, 1.0);
    const Matrix xte = rng.gaussian_matrix(40, 5, 1.0);
    CvConfig cv;
    cv.alpha_grid = {1e-6, 1.0, 100.0};
    cv.n_folds = 2;
    cv.chunk_length = 10;

    const ProbeResult hit = fit_probe(xtr, xtr * b, xte, xte * b, cv);
    CHECK(hit.r2 > 0.999);
    CHECK(hit.r2_train > 0.999);
    CHECK(hit.r2_per_dim.size() == 3);

    const ProbeResult miss = fit_probe(xtr, rng.gaussian_matrix(120, 3, 1.0), xte,
                                       rng.gaussian_matrix(40, 3, 1.0), cv);
    CHECK(miss.r2 <= 0.05);
    CHECK(miss.r2_train > miss.r2);

    CHECK_THROWS_AS(fit_probe(xtr, xtr * b, xte, (xte * b).topRows(10), cv),
                    std::invalid_argument);
}

namespace {

Dataset probe_dataset() {
    DatasetConfig dc;
    dc.n_stories = 4;
    dc.duration = 14.0;
    dc.n_subjects = 1;
    dc.n_voxels = 8;
    dc.n_ac = 2;
    dc.teacher.base = tiny_encoder();
    dc.teacher.layers = {0, 1};
    dc.seed = 21;
    return build_dataset(dc);
}

std::vector<ProbeModel> probe_models() {
    std::vector<ProbeModel> models(2);
    models[0].id = "pretrained";
    models[0].weights = init_encoder(tiny_encoder());
    models[1].id = "finetuned";
    models[1].weights = models[0].weights;
    LoraAdapterSet ad = init_adapters(tiny_encoder(), 4, 4.0, 11);
    Rng rng(12);
    for (auto& layer : ad.layers)
        for (auto& proj : layer) proj.b = rng.gaussian_matrix(proj.b.rows(), 4, 0.05);
    models[1].adapters = std::move(ad);
    return models;
}

}  // namespace

TEST_CASE("probe stories carry waves, words and the split") {
    const Dataset ds = probe_dataset();
    const ProbeStories ps = probe_stories(ds);
    CHECK(ps.train == ds.split.train);
    CHECK(ps.test == ds.split.test);
    CHECK(ps.vocab_size == 32);
    REQUIRE(ps.waves.size() == 4);
    for (int id = 0; id < 4; ++id) {
        CHECK(ps.waves[static_cast<std::size_t>(id)].samples.size() == 5600);
        CHECK(ps.words[static_cast<std::size_t>(id)].size() ==
              ds.stories[static_cast<std::size_t>(id)].tokens.size());
    }
}

TEST_CASE("probe sweep covers the full grid against the first model") {
    const Dataset ds = probe_dataset();
    const ProbeStories ps = probe_stories(ds);
    ProbeConfig pc;
    pc.cv = tiny_cv();
    const std::vector<ProbeModel> models = probe_models();

    const std::vector<ProbeCell> cells = probe_sweep(models, ps, pc);
    REQUIRE(cells.size() == 12);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const ProbeCell& c = cells[i];
        CHECK(c.model_id == (i < 6 ? "pretrained" : "finetuned"));
        CHECK(c.layer == static_cast<int>(i / 2) % 3);
        CHECK(c.kind == (i % 2 == 0 ? "filterbank" : "embedding"));
        CHECK(std::isfinite(c.r2));
    }

    for (std::size_t i = 0; i < 6; ++i) CHECK(cells[i].r2_minus_pretrained == 0.0);
    for (std::size_t i = 6; i < 12; ++i)
        CHECK(cells[i].r2_minus_pretrained == cells[i].r2 - cells[i - 6].r2);

    // The adapters sit on the attention projections, so the frame encoder
    // readout is untouched and deeper layers move.
    CHECK(cells[6].r2 == cells[0].r2);
    CHECK(cells[7].r2 == cells[1].r2);
    bool moved = false;
    for (std::size_t i = 8; i < 12; ++i) moved = moved || cells[i].r2 != cells[i - 6].r2;
    CHECK(moved);

    const std::vector<ProbeCell> again = probe_sweep(models, ps, pc);
    for (std::size_t i = 0; i < cells.size(); ++i) CHECK(cells[i].r2 == again[i].r2);
}

TEST_CASE("probe sweep rejects mismatched featurization") {
    const Dataset ds = probe_dataset();
    const ProbeStories ps = probe_stories(ds);
    ProbeConfig pc;
    pc.cv = tiny_cv();

    std::vector<ProbeModel> models = probe_models();
    EncoderConfig other = tiny_encoder();
    other.d_model = 16;
    models.push_back({"wide", init_encoder(other), std::nullopt});
    CHECK_THROWS_AS(probe_sweep(models, ps, pc), std::invalid_argument);

    CHECK_THROWS_AS(probe_sweep({}, ps, pc), std::invalid_argument);

    ProbeStories empty = ps;
    empty.train.clear();
    CHECK_THROWS_AS(probe_sweep(probe_models(), empty, pc), std::invalid_argument);
}
