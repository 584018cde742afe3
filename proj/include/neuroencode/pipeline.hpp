#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "neuroencode/finetune.hpp"
#include "neuroencode/probes.hpp"

namespace neuroencode {

// Orchestration of the full experimental protocol: dataset generation,
// feature extraction, baseline fits, fine-tuning, evaluation, cross-subject
// transfer, probes, and consolidated CSV reports. Every command reads and
// writes documented artifacts under one output directory and returns a
// machine-readable JSON summary.

struct RunConfig {
    std::string dataset_dir = "dataset";
    std::string out_dir = "runs";
    std::string roi = "all";                 // voxel scope used for training
    std::vector<int> train_subjects;         // empty = every dataset subject
    std::vector<int> test_subjects;          // empty = every dataset subject
    EncoderConfig encoder;                   // the pretrained base model
    DatasetConfig dataset;
    TrainConfig train;
    CvConfig eval_cv;                        // ridge selection for baselines/eval
    ProbeConfig probe;

    void validate() const;
};

RunConfig load_run_config(const std::string& path);

struct RunOverrides {
    std::optional<std::string> roi;
    std::optional<int> subject;  // restricts both subject lists
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;  // overrides dataset and training seeds
};

void apply_overrides(RunConfig& cfg, const RunOverrides& ov);

// ---- shared evaluation pieces --------------------------------------------

using DesignMap = std::map<int, Matrix>;

// Design matrix per story id, built with the given model.
DesignMap build_designs(const EncoderWeights& w, const LoraAdapterSet* adapters,
                        const std::vector<Waveform>& waves, const std::vector<int>& ids,
                        double tr);

// Ridge fit on the fit stories, per-voxel temporal correlation on the score
// stories; both concatenated in list order.
Vector design_scores(const DesignMap& designs, const SubjectData& data,
                     const std::vector<int>& fit_stories,
                     const std::vector<int>& score_stories, const CvConfig& cv);

Vector story_scores(const EncoderWeights& w, const LoraAdapterSet* adapters,
                    const SubjectData& data, const std::vector<int>& fit_stories,
                    const std::vector<int>& score_stories, const CvConfig& cv);

struct ScopeImprovement {
    std::string scope;
    double rho_pre = 0.0;  // voxel-mean baseline correlation in scope
    double rho_ft = 0.0;
    double pct = 0.0;  // 100 * (rho_ft - rho_pre) / rho_pre
};

// Voxel means first, percent change second. A near-zero baseline mean leaves
// the percentage NaN rather than exploding.
std::vector<ScopeImprovement> scope_table(const Vector& rho_pre, const Vector& rho_ft,
                                          const RoiLabels& rois,
                                          const std::vector<std::string>& scopes);

// Best checkpoint of a fine-tuning run directory, resolved through best.json.
struct BestModel {
    int best_epoch = 0;
    double val_rho = 0.0;
    EncoderWeights weights;
    std::optional<LoraAdapterSet> adapters;  // empty for full fine-tuning runs
};

BestModel load_best_model(const std::string& run_dir, const EncoderWeights& base);

// ---- CSV ------------------------------------------------------------------

// Fixed 6-decimal formatting; non-finite values become empty cells.
std::string csv_number(double v);

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// ---- commands ---------------------------------------------------------------

nlohmann::json cmd_gen(const RunConfig& cfg);
nlohmann::json cmd_features(const RunConfig& cfg);
nlohmann::json cmd_fit(const RunConfig& cfg);
nlohmann::json cmd_finetune(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);
nlohmann::json cmd_transfer(const RunConfig& cfg);
nlohmann::json cmd_probe(const RunConfig& cfg);
nlohmann::json cmd_report(const RunConfig& cfg);

// Dispatch by subcommand name; throws on unknown names.
nlohmann::json run_command(const std::string& name, const RunConfig& cfg);

}  // namespace neuroencode
