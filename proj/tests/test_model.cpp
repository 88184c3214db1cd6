#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "drasmil/model.hpp"
#include "drasmil/slide.hpp"
#include "test_support.hpp"

using namespace drasmil;

namespace {

ModelParams tiny_head_model() {
  // M = 2, L = 1, single linear head layer with fixed weights.
  ModelParams p;
  p.attn_V = Mat::Zero(1, 2);
  p.attn_U = Mat::Zero(1, 2);
  p.attn_w = Vec::Zero(1);
  HeadLayer layer;
  layer.weight.resize(2, 2);
  layer.weight << 1.0, 2.0, 3.0, 4.0;
  layer.bias.resize(2);
  layer.bias << 0.5, -0.5;
  p.head.push_back(layer);
  return p;
}

double forward_loss(const ModelParams& params, const Mat& features, int label,
                    const ClassWeights& weights, const DropoutMask* mask) {
  const AttentionResult att = attention_forward(params, features);
  return loss(classify(params, att.bag_embedding, mask), label, weights);
}

}  // namespace

TEST_CASE("softmax basics") {
  Vec one(1);
  one << 3.7;
  CHECK(softmax(one)[0] == 1.0);

  Vec equal = Vec::Constant(3, -1.25);
  const Vec s = softmax(equal);
  for (int i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(s.sum() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("softmax is shift invariant and overflow safe") {
  Vec v(4);
  v << 0.3, -1.2, 2.0, 0.0;
  const Vec a = softmax(v);
  const Vec b = softmax((v.array() + 123.456).matrix());
  for (int i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

  Vec huge(2);
  huge << 1000.0, 1000.5;
  const Vec h = softmax(huge);
  CHECK(std::isfinite(h[0]));
  CHECK(h.sum() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("attention over identical patches is uniform") {
  const ModelParams params = make_model(4, 3, 7);
  Mat features(3, 4);
  features.row(0) << 0.3, -0.7, 1.1, 0.2;
  features.row(1) = features.row(0);
  features.row(2) = features.row(0);
  const AttentionResult att = attention_forward(params, features);
  for (int i = 0; i < 3; ++i)
    CHECK(att.scores[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(att.bag_embedding.isApprox(features.row(0).transpose(), 1e-12));
}

TEST_CASE("attention scores sum to one") {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const Index k = 1 + static_cast<Index>(uniform_below(rng, 12));
    const ModelParams params = make_model(5, 4, rng());
    Mat features(k, 5);
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < 5; ++j) features(i, j) = normal(rng);
    const AttentionResult att = attention_forward(params, features);
    CHECK(std::abs(att.scores.sum() - 1.0) < 1e-12);
    CHECK(att.scores.minCoeff() >= 0.0);
  }
}

TEST_CASE("classify computes the fixed affine head") {
  const ModelParams params = tiny_head_model();
  Vec x(2);
  x << 1.0, -1.0;
  const Vec logits = classify(params, x);
  CHECK(logits[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(logits[1] == doctest::Approx(-1.5).epsilon(1e-15));
  Vec wrong(3);
  CHECK_THROWS_AS(classify(params, wrong), std::invalid_argument);
}

TEST_CASE("loss of symmetric logits is ln 2") {
  Vec logits = Vec::Zero(2);
  CHECK(loss(logits, 0, ClassWeights{}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(loss(logits, 1, ClassWeights{}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Vec bad(3);
  CHECK_THROWS_AS(loss(bad, 0, ClassWeights{}), std::invalid_argument);
  CHECK_THROWS_AS(loss(logits, 2, ClassWeights{}), std::invalid_argument);
}

TEST_CASE("class weights balance inverse frequencies") {
  const ClassWeights plain = class_weights(LossMode::cross_entropy, 75, 25);
  CHECK(plain.w0 == 1.0);
  CHECK(plain.w1 == 1.0);

  const ClassWeights balanced = class_weights(LossMode::balanced_cross_entropy, 75, 25);
  CHECK(balanced.w0 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(balanced.w1 == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(balanced.w1 / balanced.w0 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK_THROWS_AS(class_weights(LossMode::balanced_cross_entropy, 0, 5),
                  std::invalid_argument);
}

TEST_CASE("analytic gradients match finite differences") {
  Rng rng(23);
  for (int t = 0; t < 8; ++t) {
    const Index k = 2 + static_cast<Index>(uniform_below(rng, 5));
    const Index m = 2 + static_cast<Index>(uniform_below(rng, 4));
    const Index l = 1 + static_cast<Index>(uniform_below(rng, 3));
    const std::vector<Index> hidden =
        t % 2 == 0 ? std::vector<Index>{} : std::vector<Index>{2};
    ModelParams params = make_model(m, l, hidden, rng());
    Mat features(k, m);
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < m; ++j) features(i, j) = 1.3 * normal(rng);
    const int label = static_cast<int>(uniform_below(rng, 2));
    const ClassWeights weights =
        t % 3 == 0 ? class_weights(LossMode::balanced_cross_entropy, 3, 7)
                   : ClassWeights{};
    DropoutMask mask;
    const DropoutMask* mask_ptr = nullptr;
    if (t % 4 == 1 && !hidden.empty()) {
      mask = draw_dropout_mask(params, 0.3, rng);
      mask_ptr = &mask;
    }

    const GradientResult analytic =
        gradients(params, features, label, weights, mask_ptr, true);

    const double h = 1e-6;
    Vec flat = flatten(params);
    const Vec analytic_flat = flatten(analytic.grads);
    double worst = 0.0;
    for (Index i = 0; i < flat.size(); ++i) {
      const double keep = flat[i];
      flat[i] = keep + h;
      unflatten(flat, params);
      const double up = forward_loss(params, features, label, weights, mask_ptr);
      flat[i] = keep - h;
      unflatten(flat, params);
      const double down = forward_loss(params, features, label, weights, mask_ptr);
      flat[i] = keep;
      unflatten(flat, params);
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(analytic_flat[i]), 1e-3});
      worst = std::max(worst, std::abs(fd - analytic_flat[i]) / denom);
    }
    CHECK(worst < 1e-5);

    // Feature gradients against the same finite differences.
    double worst_feat = 0.0;
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < m; ++j) {
        const double keep = features(i, j);
        features(i, j) = keep + h;
        const double up = forward_loss(params, features, label, weights, mask_ptr);
        features(i, j) = keep - h;
        const double down = forward_loss(params, features, label, weights, mask_ptr);
        features(i, j) = keep;
        const double fd = (up - down) / (2.0 * h);
        const double denom =
            std::max({std::abs(fd), std::abs(analytic.feature_grads(i, j)), 1e-3});
        worst_feat = std::max(worst_feat, std::abs(fd - analytic.feature_grads(i, j)) / denom);
      }
    }
    CHECK(worst_feat < 1e-5);
  }
}

TEST_CASE("dropout mask is deterministic and scaled") {
  const ModelParams params = make_model(6, 4, 5);  // one hidden layer of width 3
  REQUIRE(params.head.size() == 2);

  Rng rng_a(42), rng_b(42);
  const DropoutMask a = draw_dropout_mask(params, 0.5, rng_a);
  const DropoutMask b = draw_dropout_mask(params, 0.5, rng_b);
  REQUIRE(a.scale.size() == 1);
  CHECK(testsupport::same_values(a.scale[0], b.scale[0]));
  for (Index i = 0; i < a.scale[0].size(); ++i)
    CHECK((a.scale[0][i] == 0.0 || a.scale[0][i] == 2.0));

  Rng rng_c(1);
  const DropoutMask none = draw_dropout_mask(params, 0.0, rng_c);
  CHECK(none.scale[0].isApprox(Vec::Ones(none.scale[0].size())));

  Rng rng_d(1);
  CHECK_THROWS_AS(draw_dropout_mask(params, 1.0, rng_d), std::invalid_argument);
}

TEST_CASE("flatten and unflatten round trip") {
  const ModelParams params = make_model(5, 3, {4, 2}, 99);
  const Vec flat = flatten(params);
  ModelParams copy = params;
  Vec scrambled = flat;
  scrambled.setLinSpaced(flat.size(), 0.0, 1.0);
  unflatten(scrambled, copy);
  unflatten(flat, copy);
  CHECK(testsupport::same_values(flatten(copy), flat));

  Vec short_vec(flat.size() - 1);
  short_vec.setZero();
  CHECK_THROWS(unflatten(short_vec, copy));
}

TEST_CASE("adam step matches the hand-computed update") {
  ModelParams params = make_model(2, 2, {}, 0);
  const Index n = flatten(params).size();
  unflatten(Vec::Ones(n), params);
  ModelParams grads = params;
  unflatten(Vec::Ones(n), grads);

  AdamState state = make_adam_state(params);
  adam_step(params, grads, state, 0.1, 0.01);

  // With g = 1 everywhere: m_hat = 1, v_hat = 1, so the Adam step is
  // lr / (1 + eps) and decay subtracts lr * wd * theta.
  const double expected = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.01;
  const Vec after = flatten(params);
  for (Index i = 0; i < n; ++i) CHECK(after[i] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(state.t == 1);
}

TEST_CASE("make_model is seeded and validates") {
  const ModelParams a = make_model(8, 4, 123);
  const ModelParams b = make_model(8, 4, 123);
  const ModelParams c = make_model(8, 4, 124);
  CHECK(testsupport::same_values(flatten(a), flatten(b)));
  CHECK(!testsupport::same_values(flatten(a), flatten(c)));
  CHECK(a.attention_dim() == 4);
  CHECK(a.embedding_dim() == 8);
  CHECK(a.head.size() == 2);
  CHECK(a.head.front().weight.rows() == 4);  // default hidden width M / 2
  CHECK(a.head.back().weight.rows() == 2);
  CHECK_NOTHROW(validate(a));

  ModelParams broken = a;
  broken.attn_w.resize(5);
  broken.attn_w.setZero();
  CHECK_THROWS_AS(validate(broken), std::invalid_argument);
  CHECK_THROWS_AS(make_model(0, 4, 1), std::invalid_argument);
}

TEST_CASE("training reduces validation loss on separable bags") {
  std::vector<Bag> train_bags, val_bags;
  for (int b = 0; b < 22; ++b) {
    SynthSpec spec;
    spec.grid_width = 6;
    spec.grid_height = 5;
    spec.region_fraction = 0.2;
    spec.signal_shift = 2.5;
    spec.feature_dim = 8;
    spec.label = b % 2;
    spec.slide_id = "s" + std::to_string(b);
    spec.patient_id = "p" + std::to_string(b);
    spec.seed = derive_seed(5, "train-test", static_cast<std::uint64_t>(b));
    Bag bag = generate_synthetic(spec).bag;
    (b < 16 ? train_bags : val_bags).push_back(std::move(bag));
  }

  TrainConfig config;
  config.learning_rate = 0.01;
  config.weight_decay = 1e-4;
  config.dropout = 0.1;
  config.max_epochs = 30;
  config.patience = 30;
  config.attention_dim = 8;
  config.seed = 3;

  const TrainResult result = train(train_bags, val_bags, config);
  REQUIRE(!result.log.empty());
  CHECK(result.best_epoch >= 1);
  CHECK(result.best_val_loss < result.log.front().val_loss);
  CHECK(result.best_val_loss < std::log(2.0));  // better than the uninformed model
  CHECK(static_cast<int>(result.log.size()) <= config.max_epochs);

  const TrainResult again = train(train_bags, val_bags, config);
  CHECK(testsupport::same_values(flatten(result.params), flatten(again.params)));
  CHECK(result.best_epoch == again.best_epoch);

  TrainConfig impatient = config;
  impatient.patience = 2;
  const TrainResult stopped = train(train_bags, val_bags, impatient);
  CHECK(static_cast<int>(stopped.log.size()) <= stopped.best_epoch + impatient.patience);

  CHECK_THROWS_AS(train({}, val_bags, config), std::invalid_argument);
}

TEST_CASE("checkpoint round trips parameters and metadata") {
  testsupport::TempDir dir("ckpt");
  const ModelParams params = make_model(6, 3, {4}, 77);
  const std::string meta = "{\"epoch\": 12}";
  const std::string path = dir.file("model.ckpt");
  checkpoint_write(params, meta, path);

  const Checkpoint loaded = checkpoint_read(path);
  CHECK(testsupport::same_values(flatten(loaded.params), flatten(params)));
  CHECK(loaded.metadata_json == meta);
  CHECK(loaded.params.head.size() == params.head.size());

  testsupport::spit(dir.file("junk.ckpt"), "not a checkpoint at all");
  CHECK_THROWS_AS(checkpoint_read(dir.file("junk.ckpt")), std::runtime_error);
  CHECK_THROWS_AS(checkpoint_read(dir.file("missing.ckpt")), std::runtime_error);
}
