#include "drasmil/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "drasmil/slide.hpp"

namespace drasmil {

namespace {

double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void glorot_fill(Mat& m, Index fan_in, Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = uniform_real(rng, -bound, bound);
}

}  // namespace

ModelParams make_model(Index embedding_dim, Index attention_dim,
                       const std::vector<Index>& hidden, std::uint64_t seed) {
  if (embedding_dim < 1 || attention_dim < 1)
    throw std::invalid_argument("model dims must be positive");
  Rng rng(seed);
  ModelParams p;
  p.attn_V.resize(attention_dim, embedding_dim);
  p.attn_U.resize(attention_dim, embedding_dim);
  glorot_fill(p.attn_V, embedding_dim, attention_dim, rng);
  glorot_fill(p.attn_U, embedding_dim, attention_dim, rng);
  {
    Mat w(attention_dim, 1);
    glorot_fill(w, attention_dim, 1, rng);
    p.attn_w = w.col(0);
  }
  Index in = embedding_dim;
  std::vector<Index> widths = hidden;
  widths.push_back(2);
  for (Index out : widths) {
    if (out < 1) throw std::invalid_argument("head layer width must be positive");
    HeadLayer layer;
    layer.weight.resize(out, in);
    glorot_fill(layer.weight, in, out, rng);
    layer.bias = Vec::Zero(out);
    p.head.push_back(std::move(layer));
    in = out;
  }
  return p;
}

ModelParams make_model(Index embedding_dim, Index attention_dim, std::uint64_t seed) {
  return make_model(embedding_dim, attention_dim, {std::max<Index>(embedding_dim / 2, 1)}, seed);
}

void validate(const ModelParams& p) {
  if (p.attn_V.rows() != p.attn_U.rows() || p.attn_V.cols() != p.attn_U.cols())
    throw std::invalid_argument("attn_V and attn_U must share shape");
  if (p.attn_w.size() != p.attn_V.rows())
    throw std::invalid_argument("attn_w length must equal the attention dim");
  if (p.head.empty()) throw std::invalid_argument("head must have at least one layer");
  if (p.head.front().weight.cols() != p.attn_V.cols())
    throw std::invalid_argument("head input width must equal the embedding dim");
  if (p.head.back().weight.rows() != 2)
    throw std::invalid_argument("head must end in 2 logits");
  Index in = p.attn_V.cols();
  for (const auto& layer : p.head) {
    if (layer.weight.cols() != in || layer.bias.size() != layer.weight.rows())
      throw std::invalid_argument("head layer shapes are inconsistent");
    in = layer.weight.rows();
    if (!layer.weight.allFinite() || !layer.bias.allFinite())
      throw std::domain_error("non-finite head parameters");
  }
  if (!p.attn_V.allFinite() || !p.attn_U.allFinite() || !p.attn_w.allFinite())
    throw std::domain_error("non-finite attention parameters");
}

Vec softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp();
  return e / e.sum();
}

AttentionResult attention_forward(const ModelParams& params, const Mat& features) {
  if (features.rows() < 1) throw std::invalid_argument("bag must contain at least one patch");
  if (features.cols() != params.embedding_dim())
    throw std::invalid_argument("feature width does not match the embedding dim");
  if (!features.allFinite()) throw std::domain_error("non-finite features");

  Mat pre_t = params.attn_V * features.transpose();  // L x K
  Mat pre_s = params.attn_U * features.transpose();
  Mat gate = pre_t.array().tanh() * pre_s.unaryExpr([](double x) { return sigmoid_stable(x); }).array();

  AttentionResult r;
  r.logits = gate.transpose() * params.attn_w;  // K
  r.scores = softmax(r.logits);
  r.bag_embedding = features.transpose() * r.scores;  // M
  return r;
}

DropoutMask draw_dropout_mask(const ModelParams& params, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  DropoutMask mask;
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i + 1 < params.head.size(); ++i) {
    Vec scale(params.head[i].weight.rows());
    for (Index j = 0; j < scale.size(); ++j)
      scale[j] = uniform01(rng) < p ? 0.0 : keep_scale;
    mask.scale.push_back(std::move(scale));
  }
  return mask;
}

Vec classify(const ModelParams& params, const Vec& bag_embedding, const DropoutMask* mask) {
  if (bag_embedding.size() != params.embedding_dim())
    throw std::invalid_argument("embedding length does not match the model");
  if (mask && mask->scale.size() + 1 != params.head.size())
    throw std::invalid_argument("dropout mask does not match the head");
  Vec x = bag_embedding;
  for (std::size_t i = 0; i < params.head.size(); ++i) {
    Vec y = params.head[i].weight * x + params.head[i].bias;
    if (i + 1 == params.head.size()) return y;
    x = y.cwiseMax(0.0);
    if (mask) x = x.cwiseProduct(mask->scale[i]);
  }
  return x;  // unreachable, head is never empty
}

Vec bag_logits(const ModelParams& params, const Mat& features) {
  return classify(params, attention_forward(params, features).bag_embedding);
}

ClassWeights class_weights(LossMode mode, Index count0, Index count1) {
  if (mode == LossMode::cross_entropy) return {1.0, 1.0};
  if (count0 < 1 || count1 < 1)
    throw std::invalid_argument("balanced loss needs positive counts for both classes");
  const double n = double(count0 + count1);
  return {n / (2.0 * double(count0)), n / (2.0 * double(count1))};
}

double loss(const Vec& logits, int label, const ClassWeights& weights) {
  if (logits.size() != 2) throw std::invalid_argument("expected 2 logits");
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log(std::exp(logits[0] - mx) + std::exp(logits[1] - mx));
  return weights.at(label) * (lse - logits[label]);
}

double loss(const Vec& logits, int label, LossMode mode, Index count0, Index count1) {
  return loss(logits, label, class_weights(mode, count0, count1));
}

GradientResult gradients(const ModelParams& params, const Mat& features, int label,
                         const ClassWeights& weights, const DropoutMask* mask,
                         bool with_feature_grads) {
  validate(params);
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  if (features.rows() < 1) throw std::invalid_argument("bag must contain at least one patch");
  if (features.cols() != params.embedding_dim())
    throw std::invalid_argument("feature width does not match the embedding dim");
  if (!features.allFinite()) throw std::domain_error("non-finite features");
  if (mask && mask->scale.size() + 1 != params.head.size())
    throw std::invalid_argument("dropout mask does not match the head");

  // Attention forward, keeping intermediates.
  Mat pre_t = params.attn_V * features.transpose();  // L x K
  Mat pre_s = params.attn_U * features.transpose();
  Mat tanh_t = pre_t.array().tanh();
  Mat sig_s = pre_s.unaryExpr([](double x) { return sigmoid_stable(x); });
  Mat gate = tanh_t.cwiseProduct(sig_s);
  Vec attn_logits = gate.transpose() * params.attn_w;
  Vec scores = softmax(attn_logits);
  Vec embedding = features.transpose() * scores;

  // Head forward, keeping pre-activations and (masked) activations.
  const std::size_t n_layers = params.head.size();
  std::vector<Vec> inputs(n_layers);   // input to each layer
  std::vector<Vec> preacts(n_layers);  // affine outputs
  Vec x = embedding;
  for (std::size_t i = 0; i < n_layers; ++i) {
    inputs[i] = x;
    preacts[i] = params.head[i].weight * x + params.head[i].bias;
    if (i + 1 < n_layers) {
      x = preacts[i].cwiseMax(0.0);
      if (mask) x = x.cwiseProduct(mask->scale[i]);
    }
  }
  const Vec& logits = preacts.back();

  GradientResult result;
  result.loss_value = loss(logits, label, weights);

  // Backward through the head.
  Vec p = softmax(logits);
  Vec dy = p;
  dy[label] -= 1.0;
  dy *= weights.at(label);

  ModelParams& g = result.grads;
  g.head.resize(n_layers);
  for (std::size_t ii = n_layers; ii-- > 0;) {
    g.head[ii].weight = dy * inputs[ii].transpose();
    g.head[ii].bias = dy;
    if (ii == 0) {
      dy = params.head[ii].weight.transpose() * dy;
      break;
    }
    Vec dx = params.head[ii].weight.transpose() * dy;
    if (mask) dx = dx.cwiseProduct(mask->scale[ii - 1]);
    dy = dx.cwiseProduct((preacts[ii - 1].array() > 0.0).cast<double>().matrix());
  }
  Vec d_embedding = dy;  // M

  // Backward through aggregation and softmax.
  Vec d_scores = features * d_embedding;  // K
  const double dot = scores.dot(d_scores);
  Vec d_attn_logits = (scores.array() * (d_scores.array() - dot)).matrix();

  // Backward through the gated scoring.
  g.attn_w = gate * d_attn_logits;                       // L
  Mat d_gate = params.attn_w * d_attn_logits.transpose();  // L x K
  Mat d_pre_t = d_gate.cwiseProduct(sig_s).cwiseProduct(
      (1.0 - tanh_t.array().square()).matrix());
  Mat d_pre_s = d_gate.cwiseProduct(tanh_t)
                    .cwiseProduct(sig_s.cwiseProduct((1.0 - sig_s.array()).matrix()));
  g.attn_V = d_pre_t * features;  // L x M
  g.attn_U = d_pre_s * features;

  if (with_feature_grads) {
    result.feature_grads = scores * d_embedding.transpose();  // K x M
    result.feature_grads.noalias() += d_pre_t.transpose() * params.attn_V;
    result.feature_grads.noalias() += d_pre_s.transpose() * params.attn_U;
  }
  return result;
}

Vec flatten(const ModelParams& params) {
  Index total = params.attn_V.size() + params.attn_U.size() + params.attn_w.size();
  for (const auto& layer : params.head) total += layer.weight.size() + layer.bias.size();
  Vec flat(total);
  Index pos = 0;
  auto put_mat = [&](const Mat& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) flat[pos++] = m(i, j);
  };
  put_mat(params.attn_V);
  put_mat(params.attn_U);
  for (Index i = 0; i < params.attn_w.size(); ++i) flat[pos++] = params.attn_w[i];
  for (const auto& layer : params.head) {
    put_mat(layer.weight);
    for (Index i = 0; i < layer.bias.size(); ++i) flat[pos++] = layer.bias[i];
  }
  return flat;
}

void unflatten(const Vec& flat, ModelParams& params) {
  Index pos = 0;
  auto take_mat = [&](Mat& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = flat[pos++];
  };
  take_mat(params.attn_V);
  take_mat(params.attn_U);
  for (Index i = 0; i < params.attn_w.size(); ++i) params.attn_w[i] = flat[pos++];
  for (auto& layer : params.head) {
    take_mat(layer.weight);
    for (Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = flat[pos++];
  }
  if (pos != flat.size()) throw std::invalid_argument("flat vector does not match parameter shapes");
}

AdamState make_adam_state(const ModelParams& params) {
  AdamState s;
  const Index n = flatten(params).size();
  s.m = Vec::Zero(n);
  s.v = Vec::Zero(n);
  return s;
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
               double learning_rate, double weight_decay) {
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;

  Vec p = flatten(params);
  Vec g = flatten(grads);
  if (p.size() != g.size() || p.size() != state.m.size())
    throw std::invalid_argument("parameter, gradient and state sizes disagree");

  state.t += 1;
  state.m = beta1 * state.m + (1.0 - beta1) * g;
  state.v = beta2 * state.v + (1.0 - beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(beta2, double(state.t));
  Vec update = (state.m / bc1).array() / ((state.v / bc2).array().sqrt() + eps);
  p -= learning_rate * update + (learning_rate * weight_decay) * p;
  unflatten(p, params);
}

TrainResult train(const std::vector<Bag>& train_bags, const std::vector<Bag>& val_bags,
                  const TrainConfig& config) {
  if (config.learning_rate < 0.0)
    throw std::invalid_argument("learning rate must be nonnegative");
  if (config.dropout < 0.0 || config.dropout >= 1.0)
    throw std::invalid_argument("dropout must be in [0, 1)");
  if (train_bags.empty() || val_bags.empty())
    throw std::invalid_argument("training and validation sets must be nonempty");

  Index count0 = 0, count1 = 0;
  for (const auto& b : train_bags) (b.label == 0 ? count0 : count1) += 1;
  if (count0 == 0 || count1 == 0)
    throw std::invalid_argument("training set must contain both classes");

  const Index M = train_bags.front().dim();
  for (const auto& b : train_bags)
    if (b.dim() != M) throw std::invalid_argument("bags disagree on feature dim");
  for (const auto& b : val_bags)
    if (b.dim() != M) throw std::invalid_argument("bags disagree on feature dim");

  const Index hidden = config.head_hidden > 0 ? config.head_hidden : std::max<Index>(M / 2, 1);
  ModelParams params = make_model(M, config.attention_dim, {hidden},
                                  derive_seed(config.seed, "model-init"));
  const ClassWeights weights =
      config.loss_mode == LossMode::balanced_cross_entropy
          ? class_weights(LossMode::balanced_cross_entropy, count0, count1)
          : ClassWeights{};

  AdamState adam = make_adam_state(params);
  Rng rng(derive_seed(config.seed, "train-loop"));

  auto validation_loss = [&](const ModelParams& p) {
    double total = 0.0;
    for (const auto& b : val_bags) total += loss(bag_logits(p, b.features), b.label, weights);
    return total / double(val_bags.size());
  };

  TrainResult result;
  result.params = params;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), 0);

  int epochs_since_best = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[uniform_below(rng, i)]);

    double train_loss = 0.0;
    for (std::size_t idx : order) {
      const Bag& bag = train_bags[idx];
      GradientResult grad;
      if (config.dropout > 0.0) {
        DropoutMask m = draw_dropout_mask(params, config.dropout, rng);
        grad = gradients(params, bag.features, bag.label, weights, &m);
      } else {
        grad = gradients(params, bag.features, bag.label, weights);
      }
      adam_step(params, grad.grads, adam, config.learning_rate, config.weight_decay);
      train_loss += grad.loss_value;
    }
    train_loss /= double(train_bags.size());

    const double val_loss = validation_loss(params);
    result.log.push_back({epoch, train_loss, val_loss});

    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.params = params;
      epochs_since_best = 0;
    } else if (++epochs_since_best >= config.patience) {
      break;
    }
  }
  return result;
}

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& path) {
  char buf[sizeof(T)];
  in.read(buf, sizeof(T));
  if (in.gcount() != sizeof(T)) throw std::runtime_error(path + ": truncated checkpoint");
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

constexpr char kCheckpointMagic[8] = {'D', 'R', 'A', 'S', 'M', 'I', 'L', '1'};

}  // namespace

void checkpoint_write(const ModelParams& params, const std::string& metadata_json,
                      const std::string& path) {
  validate(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.attention_dim()));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.embedding_dim()));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.head.size()));
  for (const auto& layer : params.head)
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(layer.weight.rows()));
  const Vec flat = flatten(params);
  for (Index i = 0; i < flat.size(); ++i) put_le<double>(out, flat[i]);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(metadata_json.size()));
  out.write(metadata_json.data(), static_cast<std::streamsize>(metadata_json.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint checkpoint_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path + ": not a model checkpoint");

  const auto L = static_cast<Index>(get_le<std::uint64_t>(in, path));
  const auto M = static_cast<Index>(get_le<std::uint64_t>(in, path));
  const auto n_layers = get_le<std::uint64_t>(in, path);
  if (L < 1 || M < 1 || n_layers < 1) throw std::runtime_error(path + ": bad checkpoint dims");

  Checkpoint ckpt;
  ckpt.params.attn_V.resize(L, M);
  ckpt.params.attn_U.resize(L, M);
  ckpt.params.attn_w.resize(L);
  Index in_width = M;
  for (std::uint64_t i = 0; i < n_layers; ++i) {
    const auto out_width = static_cast<Index>(get_le<std::uint64_t>(in, path));
    if (out_width < 1) throw std::runtime_error(path + ": bad head layer width");
    HeadLayer layer;
    layer.weight.resize(out_width, in_width);
    layer.bias.resize(out_width);
    ckpt.params.head.push_back(std::move(layer));
    in_width = out_width;
  }

  Vec flat(flatten(ckpt.params).size());
  for (Index i = 0; i < flat.size(); ++i) flat[i] = get_le<double>(in, path);
  unflatten(flat, ckpt.params);
  validate(ckpt.params);

  const auto json_len = get_le<std::uint64_t>(in, path);
  ckpt.metadata_json.resize(json_len);
  in.read(ckpt.metadata_json.data(), static_cast<std::streamsize>(json_len));
  if (in.gcount() != static_cast<std::streamsize>(json_len))
    throw std::runtime_error(path + ": truncated checkpoint metadata");
  return ckpt;
}

}  // namespace drasmil
