#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "neuroencode/encoder.hpp"
#include "neuroencode/featurize.hpp"
#include "neuroencode/ridge.hpp"
#include "neuroencode/synthdata.hpp"

namespace neuroencode {

// Fine-tuning of the audio encoder against voxel responses. The trainable
// pieces are either LoRA adapters on the attention projections (base frozen)
// or every encoder weight, plus a rank-bottlenecked linear head that maps
// readout features to target columns. The head exists only to carry gradient
// during training; evaluation always discards it and re-fits ridge models on
// freshly extracted features.

// ---- spatial correlation loss ----------------------------------------------

struct SpatialLoss {
    double value = 0.0;
    long n_degenerate = 0;  // rows where either side had zero variance
};

// Mean over rows (time points) of the negative Pearson correlation across
// columns (voxels) between prediction and target. Degenerate rows contribute
// zero to the average and are counted. Requires at least two columns.
SpatialLoss spatial_corr_loss(const Matrix& r_hat, const Matrix& r);

// Tape version; the gradient flows to r_hat.
grad::Var spatial_corr_loss_op(grad::Graph& g, grad::Var r_hat, const Matrix& r,
                               long* n_degenerate = nullptr);

// ---- optimizer ---------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Matrix> m, v;

    void init(const std::vector<Matrix*>& params);
    void apply(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               double lr);
};

// ---- configuration -----------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-4;
    int epochs = 20;
    int batch_trs = 50;           // contiguous volumes per batch; tails kept
    std::vector<Index> roi_mask;  // target columns trained on; empty = all
    bool use_lora = true;         // false trains every encoder weight
    int lora_rank = 4;
    double lora_alpha = 4.0;
    int head_rank = 12;           // clamped to min(d_model, n targets)
    int eval_every = 1;           // refit evaluation cadence in epochs
    std::uint64_t seed = 1;
    CvConfig eval_cv;             // ridge selection used by refit evaluation

    void validate() const;
};

// Cosine decay from base_lr at epoch 1 toward zero; epochs are 1-based.
double cosine_lr(double base_lr, int epoch, int total_epochs);

// ---- subject data ------------------------------------------------------------

struct SubjectData {
    double tr = 2.0;
    SplitSpec split;
    RoiLabels rois;
    std::vector<Waveform> waves;    // indexed by story id
    std::vector<Matrix> responses;  // indexed by story id, volumes x voxels
};

SubjectData load_subject_data(const Dataset& ds, int subject_id);

// Z-scored teacher features as pseudo-voxel targets.
Matrix build_teacher_targets(const Matrix& teacher_feats);

// Swap a subject's responses for teacher targets (feature distillation
// baseline); ROI labels are cleared since pseudo-voxels have no anatomy.
void use_teacher_targets(SubjectData& data, Dataset& ds);

// Voxel indices for a scope name: all, ac, non_ac, left, right.
std::vector<Index> roi_indices(const RoiLabels& rois, const std::string& roi);

// ---- refit evaluation --------------------------------------------------------

// Extraction -> Lanczos to the volume grid -> per-story z-score -> FIR delays.
Matrix story_design(const EncoderWeights& w, const LoraAdapterSet* adapters,
                    const Waveform& wav, int layer, double tr,
                    const std::vector<double>& delays = default_delays());

struct EncodingEval {
    Vector rho;  // per voxel, over the concatenated validation stories
    double mean_rho = 0.0;
    Vector alpha;  // CV-selected ridge penalty per voxel
    int n_zero_variance = 0;
};

// Ridge models fit on the training stories, scored on the validation stories.
// Always covers every voxel regardless of any training-time ROI mask.
EncodingEval encoding_eval(const EncoderWeights& w, const LoraAdapterSet* adapters,
                           const SubjectData& data, const CvConfig& cv = CvConfig());

// ---- training ----------------------------------------------------------------

struct EpochReport {
    int epoch = 0;
    double mean_loss = std::numeric_limits<double>::quiet_NaN();
    double val_rho = std::numeric_limits<double>::quiet_NaN();
    bool evaluated = false;
    long n_degenerate = 0;
    double wall_s = 0.0;
};

// Highest validation score among evaluated epochs; ties go to the earliest.
int select_best_epoch(const std::vector<EpochReport>& reports);

// Per-story constants reused across epochs.
struct StoryCache {
    Matrix frames;  // shared frame grid for all windows
    Vector win_times;
    int win_frames = 0;
    int step = 0;       // frame rows between consecutive windows
    int n_windows = 0;
    Vector vol_times;
    Matrix targets;  // response columns selected by the mask
};

struct TrainState {
    EncoderWeights weights;
    LoraAdapterSet adapters;
    bool use_lora = true;
    BottleneckHead head;       // (n_delays * d_model) x k, k x mask size
    std::vector<Index> mask;   // target columns, in training order
    AdamState adam;
    std::vector<StoryCache> caches;  // indexed by story id; train stories only
};

// Copies the base weights, initializes fresh adapters (LoRA mode), resolves
// the mask, caches per-story grids and masked targets, and starts the head at
// the best rank-k least-squares readout of the initial features.
TrainState init_train_state(const EncoderWeights& base, const SubjectData& data,
                            const TrainConfig& cfg);

// One pass over the training stories in shuffled contiguous batches, with an
// Adam step per batch. Returns the volume-weighted mean batch loss. Batch
// order depends on (cfg.seed, epoch); the reduction is over a fixed batch
// indexing, so lr == 0 reproduces epoch_loss bitwise.
double train_epoch(TrainState& st, const SubjectData& data, const TrainConfig& cfg,
                   int epoch, double lr, long* n_degenerate = nullptr);

// Forward-only loss over the same batches in canonical order.
double epoch_loss(const TrainState& st, const SubjectData& data, const TrainConfig& cfg,
                  long* n_degenerate = nullptr);

// ---- orchestration -----------------------------------------------------------

struct FinetuneResult {
    std::vector<EpochReport> reports;  // entry 0 is the untrained baseline
    std::vector<Vector> epoch_rho;     // per report; empty when not evaluated
    int best_epoch = 0;
    EncoderWeights best_weights;   // base copy in LoRA mode
    LoraAdapterSet best_adapters;  // empty in full mode
    BottleneckHead head;           // final training head (diagnostic only)
};

// Runs the full schedule: epoch-0 refit baseline, per-epoch training with
// refit evaluation every cfg.eval_every epochs (the last epoch always), best
// epoch selection, and checkpoint rewind. Full mode decays the learning rate
// on a cosine schedule. When out_dir is nonempty, writes epoch_log.jsonl,
// checkpoints/epoch_NNN.bin, and best.json.
FinetuneResult finetune(const EncoderWeights& base, const SubjectData& data,
                        const TrainConfig& cfg, const std::string& out_dir = "");

}  // namespace neuroencode
