#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vibiknet/fusion_model.hpp"

using namespace vibik;

namespace {

Vector random_vector(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

// Sketch of vec(x q^T) with the pair hash (h_x(i) + h_q(j)) mod d and sign
// s_x(i) s_q(j), accumulated term by term.
Vector outer_product_sketch(const FusionLayer& layer, const Vector& x, const Vector& q) {
  const auto& sx = layer.visual_sketch;
  const auto& sq = layer.question_sketch;
  const Index d = sx.output_dim;
  Vector out = Vector::Zero(d);
  for (Index i = 0; i < x.size(); ++i)
    for (Index j = 0; j < q.size(); ++j)
      out((sx.hash[i] + sq.hash[j]) % d) += sx.sign[i] * sq.sign[j] * x(i) * q(j);
  return out;
}

VqaModel tiny_model(FusionOp op, std::uint64_t seed) {
  Vocabulary vocab({"<pad>", "<unk>", "what", "is", "red"});
  AnswerVocabulary answers({"yes", "no", "red", "2"});
  ModelConfig config;
  config.embedding_dim = 5;
  config.hidden_size = 3;
  config.num_answers = 4;
  config.fusion.op = op;
  config.fusion.mcb_dim = 16;
  config.seed = seed;
  return make_model(vocab, answers, 7, config);
}

}  // namespace

TEST(AnswerVocabulary, MostFrequentFirstAndIgnore) {
  const auto v = build_answer_vocabulary({"yes", "no", " Yes", "2", "no", "yes", "blue"}, 3);
  ASSERT_EQ(v.size(), 3);
  EXPECT_EQ(v.answer(0), "yes");
  EXPECT_EQ(v.answer(1), "no");
  EXPECT_EQ(v.answer(2), "2");  // tie with "blue" broken lexicographically
  EXPECT_EQ(v.lookup("YES "), 0);
  EXPECT_EQ(v.lookup("blue"), AnswerVocabulary::kIgnore);
  EXPECT_THROW(v.answer(3), IndexError);
  EXPECT_THROW(build_answer_vocabulary({}, 3), InsufficientData);
}

TEST(FusionOpNames, RoundTrip) {
  for (auto op : {FusionOp::kSum, FusionOp::kConcat, FusionOp::kMcb}) {
    EXPECT_EQ(parse_fusion_op(to_string(op)), op);
  }
  EXPECT_THROW(parse_fusion_op("product"), InvalidValue);
}

TEST(VisualEmbed, SelectorAndZero) {
  std::mt19937_64 rng(1);
  Matrix w(4, 3);
  for (Index j = 0; j < 3; ++j) w.col(j) = random_vector(4, rng);
  EXPECT_EQ(visual_embed(w, Vector::Unit(3, 1)), Vector(w.col(1)));
  EXPECT_TRUE(visual_embed(Matrix::Zero(4, 3), Vector::Ones(3)).isZero(0.0));
  const Vector phi = random_vector(3, rng);
  const Vector got = visual_embed(w, phi);
  for (Index i = 0; i < 4; ++i) {
    double dot = 0.0;
    for (Index j = 0; j < 3; ++j) dot += w(i, j) * phi(j);
    EXPECT_NEAR(got(i), dot, 1e-12);
  }
  EXPECT_THROW(visual_embed(w, Vector::Ones(2)), DimensionError);
}

TEST(CountSketch, BasisVectorAndZero) {
  std::mt19937_64 rng(2);
  const auto p = make_count_sketch(10, 6, rng);
  for (Index j = 0; j < 10; ++j) {
    const Vector s = count_sketch(p, Vector::Unit(10, j));
    EXPECT_EQ(s(p.hash[j]), p.sign[j]);
    EXPECT_EQ(s.cwiseAbs().sum(), 1.0);
  }
  EXPECT_TRUE(count_sketch(p, Vector::Zero(10)).isZero(0.0));
}

TEST(CountSketch, AdjointIdentity) {
  std::mt19937_64 rng(3);
  const auto p = make_count_sketch(20, 7, rng);
  const Vector x = random_vector(20, rng), g = random_vector(7, rng);
  EXPECT_NEAR(g.dot(count_sketch(p, x)), x.dot(count_sketch_adjoint(p, g)), 1e-12);
}

TEST(CountSketch, InnerProductUnbiased) {
  std::mt19937_64 rng(4);
  // Correlated pair, so the 5% band is wide compared with the Monte-Carlo
  // standard error (about 0.3 here).
  const Vector x = random_vector(64, rng);
  const Vector y = x + random_vector(64, rng);
  double mean = 0.0;
  const int draws = 500;
  for (int i = 0; i < draws; ++i) {
    const auto p = make_count_sketch(64, 256, rng);
    mean += count_sketch(p, x).dot(count_sketch(p, y)) / draws;
  }
  EXPECT_NEAR(mean, x.dot(y), 0.05 * std::abs(x.dot(y)));
}

TEST(Fuse, SumAndConcat) {
  Vector x(2), q(2);
  x << 1, 2;
  q << 3, 4;
  FusionConfig sum{FusionOp::kSum, 0, 0};
  EXPECT_EQ(fuse(sum, Vector::Zero(2), q), q);
  FusionConfig concat{FusionOp::kConcat, 0, 0};
  Vector expected(4);
  expected << 1, 2, 3, 4;
  EXPECT_EQ(fuse(concat, x, q), expected);
  EXPECT_THROW(fuse(sum, x, Vector::Zero(3)), DimensionError);
}

TEST(Fuse, McbMatchesOuterProductSketch) {
  std::mt19937_64 rng(5);
  FusionConfig cfg{FusionOp::kMcb, 64, 77};
  const auto layer = make_fusion_layer(cfg, 16);
  for (int trial = 0; trial < 5; ++trial) {
    const Vector x = random_vector(16, rng), q = random_vector(16, rng);
    McbTrace trace;
    const Vector fused = fuse(layer, x, q, &trace);
    const Vector oracle = outer_product_sketch(layer, x, q);
    EXPECT_LT((trace.bilinear - oracle).cwiseAbs().maxCoeff(), 1e-8);
    Vector rooted = oracle.unaryExpr([](double z) { return std::copysign(std::sqrt(std::abs(z)), z); });
    rooted /= rooted.norm();
    EXPECT_LT((fused - rooted).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(fused.norm(), 1.0, 1e-12);
  }
}

TEST(Fuse, McbBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto layer = make_fusion_layer({FusionOp::kMcb, 24, 3}, 8);
  const Vector x = random_vector(8, rng), q = random_vector(8, rng), w = random_vector(24, rng);
  McbTrace trace;
  const Vector fused = fuse(layer, x, q, &trace);
  Vector gx, gq;
  fuse_backward(layer, x, q, fused, trace, w, gx, gq);
  const double eps = 1e-6;
  for (Index i = 0; i < 8; ++i) {
    Vector xp = x, xm = x, qp = q, qm = q;
    xp(i) += eps;
    xm(i) -= eps;
    qp(i) += eps;
    qm(i) -= eps;
    EXPECT_NEAR(gx(i), (w.dot(fuse(layer, xp, q)) - w.dot(fuse(layer, xm, q))) / (2 * eps), 1e-6);
    EXPECT_NEAR(gq(i), (w.dot(fuse(layer, x, qp)) - w.dot(fuse(layer, x, qm))) / (2 * eps), 1e-6);
  }
}

TEST(Classify, UniformAndBiasDominance) {
  auto model = tiny_model(FusionOp::kSum, 1);
  model.params.classifier.setZero();
  model.params.classifier_bias.setZero();
  const Vector fused = Vector::Ones(model.fusion_dim());
  EXPECT_LT((classify(model, fused).array() - 0.25).abs().maxCoeff(), 1e-15);
  model.params.classifier_bias(0) = 10.0;
  EXPECT_GT(classify(model, fused)(0), 0.99);
}

TEST(Classify, MatchesAffineSoftmaxOracle) {
  const auto model = tiny_model(FusionOp::kConcat, 2);
  std::mt19937_64 rng(7);
  const Vector fused = random_vector(model.fusion_dim(), rng);
  Vector z = model.params.classifier_bias;
  for (Index k = 0; k < z.size(); ++k)
    for (Index i = 0; i < fused.size(); ++i) z(k) += model.params.classifier(i, k) * fused(i);
  Vector p = z.array().exp();
  p /= p.sum();
  EXPECT_LT((classify(model, fused) - p).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PredictAnswer, InputIndependentHead) {
  auto model = tiny_model(FusionOp::kMcb, 3);
  model.params.classifier.setZero();
  model.params.classifier_bias.setZero();
  model.params.classifier_bias(2) = 3.0;
  std::mt19937_64 rng(8);
  for (int t = 0; t < 5; ++t) {
    const ImageEmbedding img{"i", random_vector(7, rng)};
    EXPECT_EQ(predict_answer(model, img, std::vector<int>{2, 3, 4}).answer, "red");
  }
}

TEST(PredictAnswer, ShiftingLogitsKeepsAnswer) {
  auto model = tiny_model(FusionOp::kSum, 4);
  std::mt19937_64 rng(9);
  const ImageEmbedding img{"i", random_vector(7, rng)};
  const std::vector<int> tokens = {2, 4};
  const auto before = predict_answer(model, img, tokens);
  model.params.classifier_bias.array() += 123.0;
  const auto after = predict_answer(model, img, tokens);
  EXPECT_EQ(before.answer, after.answer);
  EXPECT_NEAR(before.prob, after.prob, 1e-12);
}

TEST(PredictAnswer, EqualsCompositionOfPublicOps) {
  for (auto op : {FusionOp::kSum, FusionOp::kConcat, FusionOp::kMcb}) {
    const auto model = tiny_model(op, 5);
    std::mt19937_64 rng(10);
    const ImageEmbedding img{"i", random_vector(7, rng)};
    const std::vector<int> tokens = {3, 2, 4};
    const Vector q = encode_question(model.params.embedding, model.params.forward,
                                     model.params.backward, tokens);
    const Vector x = visual_embed(model.params.visual, img.phi);
    const Vector probs = classify(model, fuse(model.fusion, x, q));
    const auto p = predict_answer(model, img, tokens);
    EXPECT_EQ(p.class_index, argmax(probs));
    EXPECT_EQ(p.prob, probs(argmax(probs)));
    EXPECT_EQ(p.answer, model.answers.answer(p.class_index));
  }
}

TEST(FinalizeModel, RejectsBadShapes) {
  auto model = tiny_model(FusionOp::kConcat, 6);
  EXPECT_NO_THROW(finalize_model(model));
  model.params.classifier = Matrix::Zero(3, 4);
  EXPECT_THROW(finalize_model(model), DimensionError);
}
