#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuroencode/encoder.hpp"
#include "neuroencode/types.hpp"
#include "neuroencode/wav_io.hpp"

namespace neuroencode {

// Synthetic stimuli, subjects, and responses with planted ground truth. A
// "teacher" encoder (base weights plus a low-rank perturbation of the
// attention projections) defines the features that actually drive the
// responses, so recovery claims are checkable against W_true.

struct TokenEvent {
    double time = 0.0;
    int token = 0;
};

struct StorySpec {
    int id = 0;
    double duration = 120.0;
    std::uint64_t seed = 0;
    std::vector<TokenEvent> tokens;

    // Stories must cover one analysis window plus the largest FIR delay.
    void validate(double window_s = 2.0, double max_delay_s = 8.0) const;
};

struct WaveformParams {
    double sample_rate = 400.0;
    double token_dur = 0.25;
    double background_amp = 0.55;  // bound on the summed background amplitude
    double token_amp = 0.35;       // bound on one token signature
    int n_background = 24;
    int vocab_size = 32;
    std::uint64_t vocab_seed = 77;
};

// Token times are jittered inside equal slots, so signatures never overlap
// and the waveform stays inside [-1, 1] without clipping.
StorySpec make_story_spec(int id, double duration, std::uint64_t seed,
                          double tokens_per_second = 2.0, int vocab_size = 32);

// Band-limited sinusoid background plus Hann-enveloped 3-harmonic token
// signatures. Output is quantized through the PCM16 grid so an in-memory
// waveform is bit-identical to one written to disk and read back.
Waveform gen_waveform(const StorySpec& s, const WaveformParams& p = {});

struct RoiLabels {
    std::vector<char> ac;    // auditory-cortex flag per voxel
    std::vector<char> left;  // hemisphere flag per voxel
};

struct SubjectSpec {
    int id = 0;
    Index n_voxels = 0;
    RoiLabels rois;
    Matrix w_true;  // teacher-feature dim x n_voxels
    Vector sigma;   // noise std per voxel
    std::uint64_t seed = 0;

    void validate() const;
};

struct TeacherSpec {
    EncoderConfig base;
    int rank = 2;
    double magnitude = 0.6;       // perturbation scale relative to base weights
    std::vector<int> layers = {1, 2};  // blocks carrying the planted adapters
    int early_layer = 1;          // feature block driving AC voxels
    int deep_layer = 0;           // 0 = base.readout_layer; drives non-AC voxels
    double lag_s = 4.0;           // hemodynamic-style response lag, multiple of tr
    std::uint64_t seed = 5;

    int resolved_deep() const { return deep_layer > 0 ? deep_layer : base.readout_layer; }
    void validate() const;
};

EncoderWeights teacher_weights(const TeacherSpec& ts);

// Volume-aligned teacher features [early block | deep block], width 2*d_model,
// z-scored per column, then shifted down by lag_s/tr rows so responses trail
// the stimulus like fMRI does.
Matrix teacher_feature_matrix(const EncoderWeights& tw, const TeacherSpec& ts,
                              const Waveform& wav, double tr);

// R = zscore_per_column(g * W_true + sigma_v * noise), noise seeded by
// (subject.seed, story_id).
Matrix gen_responses(const SubjectSpec& subject, const Matrix& teacher_feats,
                     int story_id);

struct SplitSpec {
    std::vector<int> test, val, train;
};

// Sorted ids: first is the test story, next two validate, the rest train.
SplitSpec default_split(std::vector<int> story_ids);

struct DatasetConfig {
    int n_stories = 12;
    double duration = 120.0;
    double tr = 2.0;
    int n_subjects = 3;
    int n_voxels = 200;
    int n_ac = 40;
    double sigma = 1.35;
    double tokens_per_second = 2.0;
    // Per-subject log-normal emphasis over teacher dimensions; distinguishes
    // subjects while keeping the shared teacher structure transferable.
    double subject_emphasis = 0.35;
    std::uint64_t seed = 1;
    WaveformParams waveform;
    TeacherSpec teacher;

    DatasetConfig();
    void validate() const;
};

struct Dataset {
    DatasetConfig cfg;
    std::vector<StorySpec> stories;
    std::vector<SubjectSpec> subjects;
    SplitSpec split;
    std::string dir;  // empty for an in-memory dataset

    // Cached per-story teacher features, populated by build_dataset.
    std::vector<Matrix> teacher_feats;
};

Dataset build_dataset(const DatasetConfig& cfg);
void write_dataset(Dataset& ds, const std::string& dir);
Dataset make_dataset(const DatasetConfig& cfg, const std::string& dir);
Dataset load_dataset(const std::string& dir);

Waveform dataset_story_wave(const Dataset& ds, int story_id);
Matrix dataset_responses(const Dataset& ds, int subject_id, int story_id);
const Matrix& dataset_teacher_features(Dataset& ds, int story_id);

}  // namespace neuroencode
