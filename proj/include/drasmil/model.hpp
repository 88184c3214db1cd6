#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drasmil/rng.hpp"
#include "drasmil/types.hpp"

namespace drasmil {

struct HeadLayer {
  Mat weight;  // out x in
  Vec bias;    // out
};

// Gated-attention parameters plus the classifier head. The same struct doubles
// as the gradient container since every field is shape-matched.
struct ModelParams {
  Mat attn_V;  // L x M, tanh branch
  Mat attn_U;  // L x M, sigmoid gate
  Vec attn_w;  // L
  std::vector<HeadLayer> head;  // final layer has 2 outputs

  Index attention_dim() const { return attn_V.rows(); }
  Index embedding_dim() const { return attn_V.cols(); }
};

// Glorot-uniform initialization; biases start at zero. `hidden` lists the
// widths of the head's hidden layers (empty means a single linear M -> 2).
ModelParams make_model(Index embedding_dim, Index attention_dim,
                       const std::vector<Index>& hidden, std::uint64_t seed);

// Default head per the smallest useful configuration: one hidden layer of
// width max(M/2, 1) with ReLU, then 2 logits.
ModelParams make_model(Index embedding_dim, Index attention_dim, std::uint64_t seed);

// Throws std::invalid_argument if shapes are inconsistent or entries are
// non-finite.
void validate(const ModelParams& params);

struct AttentionResult {
  Vec scores;         // K softmax attention weights, sum to 1
  Vec logits;         // K pre-softmax gated scores
  Vec bag_embedding;  // M, attention-weighted sum of feature rows
};

// Numerically stable softmax (max subtraction).
Vec softmax(const Vec& logits);

// Per-patch gated score w' (tanh(V h) .* sigmoid(U h)), softmaxed over the
// bag, and the resulting score-weighted bag embedding.
AttentionResult attention_forward(const ModelParams& params, const Mat& features);

// Inverted-dropout scale factors for the head's hidden activations:
// 0 with probability p, else 1/(1-p).
struct DropoutMask {
  std::vector<Vec> scale;  // one entry per hidden head layer
};
DropoutMask draw_dropout_mask(const ModelParams& params, double p, Rng& rng);

// Head forward: affine + ReLU stacks, last layer linear to 2 logits. A null
// mask means dropout off (deterministic).
Vec classify(const ModelParams& params, const Vec& bag_embedding,
             const DropoutMask* mask = nullptr);

// Full forward with dropout off: attention, aggregation, head.
Vec bag_logits(const ModelParams& params, const Mat& features);

enum class LossMode { cross_entropy, balanced_cross_entropy };

// Per-class loss weights: 1 for plain cross-entropy; inverse class frequency
// N / (2 * count_c) for balanced mode, so weights average to 1 over samples.
struct ClassWeights {
  double w0 = 1.0;
  double w1 = 1.0;
  double at(int label) const { return label == 0 ? w0 : w1; }
};
ClassWeights class_weights(LossMode mode, Index count0, Index count1);

// Cross-entropy of softmax(logits) at `label`, scaled by the class weight.
double loss(const Vec& logits, int label, const ClassWeights& weights);
double loss(const Vec& logits, int label, LossMode mode, Index count0, Index count1);

struct GradientResult {
  ModelParams grads;
  Mat feature_grads;  // K x M, filled only when requested
  double loss_value = 0.0;
};

// Exact analytic gradient of the weighted cross-entropy loss with respect to
// every parameter entry. Pass the dropout mask used in the forward pass, or
// null for dropout off.
GradientResult gradients(const ModelParams& params, const Mat& features, int label,
                         const ClassWeights& weights, const DropoutMask* mask = nullptr,
                         bool with_feature_grads = false);

// Flat parameter vector in serialization order: attn_V, attn_U, attn_w, then
// each head layer's weight and bias, matrices row-major.
Vec flatten(const ModelParams& params);
void unflatten(const Vec& flat, ModelParams& params);

struct AdamState {
  Vec m;  // first moment
  Vec v;  // second moment
  std::int64_t t = 0;
};
AdamState make_adam_state(const ModelParams& params);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) with decoupled weight decay.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
               double learning_rate, double weight_decay);

struct TrainConfig {
  double learning_rate = 0.0038;
  double weight_decay = 0.00079;
  double dropout = 0.020;
  LossMode loss_mode = LossMode::cross_entropy;
  int max_epochs = 100;
  int patience = 20;  // early stop after this many epochs without val improvement
  std::uint64_t seed = 0;
  Index attention_dim = 256;
  Index head_hidden = 0;  // 0 = default M/2
};

struct TrainLogEntry {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  ModelParams params;  // parameters with the lowest validation loss seen
  std::vector<TrainLogEntry> log;
  int best_epoch = -1;
  double best_val_loss = 0.0;
};

// Forward declaration; bags live in slide.hpp.
struct Bag;

// One optimizer step per training bag per epoch, bag order reshuffled each
// epoch from the config seed. Fully deterministic given (bags, config).
TrainResult train(const std::vector<Bag>& train_bags, const std::vector<Bag>& val_bags,
                  const TrainConfig& config);

// Model checkpoint. Layout (little-endian): magic "DRASMIL1", then as u64:
// L, M, head layer count, each head layer's output width; then the flattened
// parameters as f64; then a u64-length-prefixed UTF-8 JSON metadata blob.
void checkpoint_write(const ModelParams& params, const std::string& metadata_json,
                      const std::string& path);
struct Checkpoint {
  ModelParams params;
  std::string metadata_json;
};
Checkpoint checkpoint_read(const std::string& path);

}  // namespace drasmil
