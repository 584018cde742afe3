#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "neuroencode/encoder.hpp"
#include "neuroencode/featurize.hpp"
#include "neuroencode/ridge.hpp"
#include "neuroencode/synthdata.hpp"

namespace neuroencode {

// Linear probes that quantify acoustic and word-level content per encoder
// layer: ridge models predict filterbank energies or token embeddings from
// window features, scored by held-out variance explained.

// ---- filterbank ----------------------------------------------------------

struct FilterbankConfig {
    int n_mels = 24;
    int frame = 128;  // samples per analysis frame
    int hop = 40;     // samples between frames
    double log_floor = 1e-10;

    void validate() const;
};

struct MelFilterbank {
    Matrix weights;    // n_mels x n_bins, triangular, nonnegative
    Vector center_hz;  // peak frequency per filter
};

MelFilterbank build_mel_filterbank(int n_mels, int n_fft, double sample_rate);

struct FilterbankFeatures {
    Vector times;  // frame end times, seconds
    Matrix m;      // frames x n_mels, log power
};

// Hann-windowed DFT power spectrum pooled through mel-spaced triangular
// filters, log-compressed with a floor.
FilterbankFeatures compute_filterbank(const Waveform& w, const FilterbankConfig& cfg = {});

// ---- word alignment -------------------------------------------------------

struct WordMark {
    int word = 0;
    double onset = 0.0;
    double offset = 0.0;
};

using WordAlignment = std::vector<WordMark>;

// Words must be non-overlapping with increasing onsets and positive spans.
void validate_alignment(const WordAlignment& a);

// Planted token events as the story transcript.
WordAlignment story_words(const StorySpec& s, double token_dur);

enum class AlignAnchor { offset, onset, midpoint };

// Feature row whose timestamp is nearest each word's anchor time (ties take
// the earlier row). Anchors outside [times.first, times.last] are an error.
std::vector<Index> align_features_to_words(const Vector& times, const WordAlignment& a,
                                           AlignAnchor anchor = AlignAnchor::offset);

// Words whose anchor falls inside the feature time support; the early-story
// words a 2 s analysis window cannot cover are dropped here, not errored.
WordAlignment words_in_support(const Vector& times, const WordAlignment& a,
                               AlignAnchor anchor = AlignAnchor::offset);

// ---- embeddings -----------------------------------------------------------

// Stand-in for a pretrained word-vector table: a seeded Gaussian row per
// vocabulary entry, fixed at 300 dimensions.
inline constexpr int kEmbeddingDim = 300;

Matrix embedding_table(int vocab_size, std::uint64_t seed);

// ---- probe fits -----------------------------------------------------------

struct R2Score {
    double mean = 0.0;
    Vector per_dim;
    int n_degenerate = 0;  // constant target dimensions, scored 0
};

// 1 - SSE/SST per dimension, SST around the evaluated set's own mean.
R2Score r2_score(const Matrix& y, const Matrix& y_hat);

struct ProbeResult {
    RidgeFit fit;
    double r2 = 0.0;  // held-out, mean over target dimensions
    Vector r2_per_dim;
    double r2_train = 0.0;
    Vector r2_train_per_dim;
};

ProbeResult fit_probe(const Matrix& x_train, const Matrix& y_train, const Matrix& x_test,
                      const Matrix& y_test, const CvConfig& cv = CvConfig());

// ---- layer sweep ----------------------------------------------------------

struct ProbeModel {
    std::string id;
    EncoderWeights weights;
    std::optional<LoraAdapterSet> adapters;
};

struct ProbeConfig {
    FilterbankConfig filterbank;
    std::uint64_t embed_seed = 41;
    AlignAnchor anchor = AlignAnchor::offset;
    CvConfig cv;
};

struct ProbeCell {
    std::string model_id;
    int layer = 0;
    std::string kind;  // "filterbank" or "embedding"
    double r2 = 0.0;
    double r2_minus_pretrained = 0.0;
};

struct ProbeStories {
    std::vector<int> train, test;        // story ids
    std::vector<Waveform> waves;         // by story id
    std::vector<WordAlignment> words;    // by story id
    int vocab_size = 0;
};

// Probe data from a dataset: probes train on the encoding-model training
// stories and are scored on the held-out test stories.
ProbeStories probe_stories(const Dataset& ds);

// R2 for every (model, layer 0..readout, kind) cell. models.front() is the
// pretrained baseline that the improvement column is measured against; all
// models must share the featurization config.
std::vector<ProbeCell> probe_sweep(const std::vector<ProbeModel>& models,
                                   const ProbeStories& stories, const ProbeConfig& cfg);

}  // namespace neuroencode
