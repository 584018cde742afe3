#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "neuroencode/graph.hpp"
#include "neuroencode/types.hpp"

namespace neuroencode {

// Transformer stand-in for a frozen speech model: a strided linear frame
// projection with sinusoidal positions, then pre-norm attention/feed-forward
// blocks. Layer 0 denotes the frame-encoder output; layers 1..n_layers the
// transformer block outputs.
struct EncoderConfig {
    int n_layers = 9;
    int d_model = 16;
    int n_heads = 4;
    int d_ff = 32;
    int frame_size = 64;   // samples per frame
    int frame_stride = 40; // samples between frame starts
    int readout_layer = 9;
    std::uint64_t seed = 1;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;   // d_model x d_model
    Matrix ff1, ff2;         // d_model x d_ff, d_ff x d_model
    Matrix ff1_b, ff2_b;     // 1 x d_ff, 1 x d_model
    Matrix ln1_g, ln1_b;     // 1 x d_model
    Matrix ln2_g, ln2_b;     // 1 x d_model
};

struct EncoderWeights {
    EncoderConfig config;
    Matrix frame_proj;  // frame_size x d_model
    Matrix frame_bias;  // 1 x d_model
    std::vector<LayerWeights> layers;

    std::uint64_t checksum() const;
};

EncoderWeights init_encoder(const EncoderConfig& config);

// Low-rank updates on the attention projections: effective weight is
// W + (alpha/rank) * B * A per adapted matrix.
struct LoraAdapter {
    Matrix a;  // rank x d_model
    Matrix b;  // d_model x rank
};

struct LoraAdapterSet {
    int rank = 4;
    double alpha = 4.0;
    std::vector<std::array<LoraAdapter, 3>> layers;  // per layer: q, k, v

    double scaling() const { return alpha / static_cast<double>(rank); }
    std::int64_t parameter_count() const;
};

// A from N(0, 0.02^2), B zeroed so a fresh adapter set is a no-op.
LoraAdapterSet init_adapters(const EncoderConfig& config, int rank, double alpha,
                             std::uint64_t seed);

EncoderWeights merge_lora(const EncoderWeights& w, const LoraAdapterSet& adapters);

// Rank-bottlenecked linear prediction head: features * down * up.
struct BottleneckHead {
    Matrix down;  // P x k
    Matrix up;    // k x n_voxels
};

BottleneckHead init_head(Index p, Index k, Index n_voxels, std::uint64_t seed);
Matrix head_predict(const BottleneckHead& head, const Matrix& features);

Matrix positional_encoding(int positions, int d_model);

// Frame the sample stream: row i holds samples [i*stride, i*stride + size).
Matrix frame_stack(const std::vector<double>& samples, int frame_size, int frame_stride);

// Reference single-window forward. Returns n_layers + 1 matrices of shape
// frames x d_model; index 0 is the frame-encoder output.
std::vector<Matrix> forward_window(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                   const std::vector<double>& window_samples);

// Final-frame hidden state of the given layer, as a 1 x d_model row.
Matrix readout(const std::vector<Matrix>& states, int layer);

// Batched forward over many windows sharing one frame grid. `frames` holds
// the story's frame rows; window k attends over frame rows [k*step, k*step +
// win_frames). Returns, per layer 0..n_layers, the n_windows x d_model matrix
// of final-frame states. Attention is block-diagonal per window, so results
// match forward_window up to floating-point reassociation.
std::vector<Matrix> stacked_readouts(const EncoderWeights& w, const LoraAdapterSet* adapters,
                                     const Matrix& frames, int win_frames, int step,
                                     int n_windows, int up_to_layer);

namespace enc_graph {

// Trainable bindings of the encoder inside a Graph. Exactly one of the two
// modes applies: LoRA (A/B leaves per layer and target, base weights
// constant) or full (every weight matrix is a leaf).
struct BoundAdapter {
    grad::Var a, b;
};

struct BoundLayer {
    grad::Var wq, wk, wv;   // effective projections (with adapters folded in)
    grad::Var wo, ff1, ff2, ff1_b, ff2_b, ln1_g, ln1_b, ln2_g, ln2_b;
};

struct BoundEncoder {
    grad::Var frame_proj, frame_bias;
    std::vector<BoundLayer> layers;
    std::vector<std::array<BoundAdapter, 3>> adapters;  // empty when full mode
    double lora_scaling = 1.0;
};

BoundEncoder bind_lora(grad::Graph& g, const EncoderWeights& w, const LoraAdapterSet& adapters);
BoundEncoder bind_full(grad::Graph& g, const EncoderWeights& w);

// Stacked-window forward through the tape; returns the n_windows x d_model
// readout of `layer` built from the same block-diagonal attention as
// stacked_readouts.
grad::Var stacked_readout(grad::Graph& g, const BoundEncoder& enc, const EncoderConfig& config,
                          const Matrix& frames, int win_frames, int step, int n_windows,
                          int layer);

// Block-diagonal multi-head attention over stacked windows (fused op).
// q, k, v are (n_windows * win_frames) x d_model.
grad::Var windowed_attention(grad::Graph& g, grad::Var q, grad::Var k, grad::Var v, int n_heads,
                             int win_frames);

// Rows offset, offset + stride, ... of a (fused gather with scatter gradient).
grad::Var rows_every(grad::Graph& g, grad::Var a, Index stride, Index offset);

}  // namespace enc_graph

}  // namespace neuroencode
