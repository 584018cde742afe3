#pragma once

#include "neuroencode/finetune.hpp"
#include "neuroencode/pipeline.hpp"
#include "neuroencode/probes.hpp"
#include "neuroencode/ridge.hpp"
#include "neuroencode/synthdata.hpp"

#include "json.hpp"

// JSON adapters for config structs, shared by dataset manifests and the CLI.

namespace neuroencode {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, n_layers, d_model,
                                                n_heads, d_ff, frame_size,
                                                frame_stride, readout_layer, seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WaveformParams, sample_rate,
                                                token_dur, background_amp,
                                                token_amp, n_background,
                                                vocab_size, vocab_seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TeacherSpec, base, rank, magnitude,
                                                layers, early_layer, deep_layer,
                                                lag_s, seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, n_stories, duration,
                                                tr, n_subjects, n_voxels, n_ac,
                                                sigma, tokens_per_second,
                                                subject_emphasis, seed, waveform,
                                                teacher)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CvConfig, alpha_grid, n_folds,
                                                chunk_length)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, learning_rate, epochs,
                                                batch_trs, roi_mask, use_lora,
                                                lora_rank, lora_alpha, head_rank,
                                                eval_every, seed, eval_cv)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FilterbankConfig, n_mels, frame, hop,
                                                log_floor)

NLOHMANN_JSON_SERIALIZE_ENUM(AlignAnchor, {{AlignAnchor::offset, "offset"},
                                           {AlignAnchor::onset, "onset"},
                                           {AlignAnchor::midpoint, "midpoint"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeConfig, filterbank, embed_seed,
                                                anchor, cv)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, dataset_dir, out_dir, roi,
                                                train_subjects, test_subjects,
                                                encoder, dataset, train, eval_cv,
                                                probe)

}  // namespace neuroencode
