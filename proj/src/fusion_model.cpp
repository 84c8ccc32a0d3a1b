#include "vibiknet/fusion_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>

namespace vibik {

std::string normalize_answer(std::string_view answer) {
  auto first = answer.begin();
  auto last = answer.end();
  while (first != last && std::isspace(static_cast<unsigned char>(*first))) ++first;
  while (last != first && std::isspace(static_cast<unsigned char>(*(last - 1)))) --last;
  std::string out(first, last);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

AnswerVocabulary::AnswerVocabulary(std::vector<std::string> answers) : answers_(std::move(answers)) {
  for (std::size_t i = 0; i < answers_.size(); ++i) {
    if (!index_.emplace(answers_[i], static_cast<int>(i)).second) {
      throw InvalidValue("duplicate answer class '" + answers_[i] + "'");
    }
  }
}

int AnswerVocabulary::lookup(std::string_view answer) const {
  const auto it = index_.find(normalize_answer(answer));
  return it == index_.end() ? kIgnore : it->second;
}

const std::string& AnswerVocabulary::answer(int index) const {
  if (index < 0 || index >= size()) {
    throw IndexError("answer index " + std::to_string(index) + " outside " +
                     std::to_string(size()) + " classes");
  }
  return answers_[static_cast<std::size_t>(index)];
}

AnswerVocabulary build_answer_vocabulary(const std::vector<std::string>& answers,
                                         std::size_t max_answers) {
  std::map<std::string, std::size_t> counts;
  for (const auto& a : answers) {
    auto norm = normalize_answer(a);
    if (!norm.empty()) ++counts[norm];
  }
  if (counts.empty()) throw InsufficientData("build_answer_vocabulary: no answers");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_answers) ranked.resize(max_answers);
  std::vector<std::string> out;
  out.reserve(ranked.size());
  for (auto& [answer, count] : ranked) out.push_back(answer);
  return AnswerVocabulary(std::move(out));
}

std::string to_string(FusionOp op) {
  switch (op) {
    case FusionOp::kSum: return "sum";
    case FusionOp::kConcat: return "concat";
    case FusionOp::kMcb: return "mcb";
  }
  return "unknown";
}

FusionOp parse_fusion_op(std::string_view name) {
  const auto norm = normalize_answer(name);
  if (norm == "sum") return FusionOp::kSum;
  if (norm == "concat" || norm == "cat") return FusionOp::kConcat;
  if (norm == "mcb") return FusionOp::kMcb;
  throw InvalidValue("unknown fusion operator '" + std::string(name) + "'");
}

CountSketchParams make_count_sketch(Index input_dim, Index output_dim, std::mt19937_64& rng) {
  if (output_dim < 1) throw InvalidValue("count sketch output dimension must be positive");
  std::uniform_int_distribution<Index> bucket(0, output_dim - 1);
  std::bernoulli_distribution coin(0.5);
  CountSketchParams p;
  p.output_dim = output_dim;
  p.hash.resize(input_dim);
  p.sign.resize(input_dim);
  for (Index j = 0; j < input_dim; ++j) {
    p.hash[j] = bucket(rng);
    p.sign[j] = coin(rng) ? 1.0 : -1.0;
  }
  return p;
}

Vector count_sketch(const CountSketchParams& params, const Vector& x) {
  detail::require_same_length(x.size(), params.input_dim(), "count_sketch");
  Vector out = Vector::Zero(params.output_dim);
  for (Index j = 0; j < x.size(); ++j) out(params.hash[j]) += params.sign[j] * x(j);
  return out;
}

Vector count_sketch_adjoint(const CountSketchParams& params, const Vector& g) {
  detail::require_same_length(g.size(), params.output_dim, "count_sketch_adjoint");
  Vector out(params.input_dim());
  for (Index j = 0; j < out.size(); ++j) out(j) = params.sign[j] * g(params.hash[j]);
  return out;
}

Index FusionLayer::output_dim() const {
  switch (config.op) {
    case FusionOp::kSum: return input_dim;
    case FusionOp::kConcat: return 2 * input_dim;
    case FusionOp::kMcb: return config.mcb_dim;
  }
  return 0;
}

FusionLayer make_fusion_layer(const FusionConfig& config, Index input_dim) {
  FusionLayer layer;
  layer.config = config;
  layer.input_dim = input_dim;
  if (config.op == FusionOp::kMcb) {
    if (config.mcb_dim < 1) throw InvalidValue("mcb_dim must be positive");
    std::mt19937_64 rng(config.mcb_seed);
    layer.visual_sketch = make_count_sketch(input_dim, config.mcb_dim, rng);
    layer.question_sketch = make_count_sketch(input_dim, config.mcb_dim, rng);
  }
  return layer;
}

Vector fuse(const FusionLayer& layer, const Vector& x_emb, const Vector& q_enc, McbTrace* trace) {
  switch (layer.config.op) {
    case FusionOp::kSum:
      detail::require_same_length(x_emb.size(), q_enc.size(), "sum fusion");
      return x_emb + q_enc;
    case FusionOp::kConcat: {
      Vector out(x_emb.size() + q_enc.size());
      out << x_emb, q_enc;
      return out;
    }
    case FusionOp::kMcb: {
      McbTrace local;
      McbTrace& t = trace ? *trace : local;
      t.sketch_x = count_sketch(layer.visual_sketch, x_emb);
      t.sketch_q = count_sketch(layer.question_sketch, q_enc);
      t.bilinear = circular_convolve(t.sketch_x, t.sketch_q);
      // Entries no pair of sketch buckets reaches are exactly zero, but the FFT
      // leaves rounding noise there that the square root would amplify to
      // ~1e-8 with an unbounded derivative. Anything below the transform's
      // rounding level is snapped back to zero.
      const double noise = 4.0 * static_cast<double>(t.bilinear.size()) *
                           std::numeric_limits<double>::epsilon() * t.sketch_x.norm() *
                           t.sketch_q.norm();
      t.bilinear = t.bilinear.unaryExpr([noise](double z) { return std::abs(z) <= noise ? 0.0 : z; });
      t.rooted = t.bilinear.unaryExpr([](double z) { return std::copysign(std::sqrt(std::abs(z)), z); });
      t.norm = t.rooted.norm();
      return t.norm > 0.0 ? Vector(t.rooted / t.norm) : t.rooted;
    }
  }
  throw InvalidValue("unknown fusion operator");
}

Vector fuse(const FusionConfig& config, const Vector& x_emb, const Vector& q_enc) {
  return fuse(make_fusion_layer(config, x_emb.size()), x_emb, q_enc);
}

void fuse_backward(const FusionLayer& layer, const Vector& x_emb, const Vector& q_enc,
                   const Vector& fused, const McbTrace& trace, const Vector& grad_fused,
                   Vector& grad_x, Vector& grad_q) {
  switch (layer.config.op) {
    case FusionOp::kSum:
      grad_x = grad_fused;
      grad_q = grad_fused;
      return;
    case FusionOp::kConcat:
      grad_x = grad_fused.head(x_emb.size());
      grad_q = grad_fused.tail(q_enc.size());
      return;
    case FusionOp::kMcb: {
      if (trace.norm <= 0.0) {
        grad_x = Vector::Zero(x_emb.size());
        grad_q = Vector::Zero(q_enc.size());
        return;
      }
      // L2 normalization, then the signed square root (derivative 1/(2 sqrt|y|), zero at 0).
      const Vector grad_rooted = (grad_fused - fused * fused.dot(grad_fused)) / trace.norm;
      Vector grad_bilinear(grad_rooted.size());
      for (Index i = 0; i < grad_rooted.size(); ++i) {
        const double mag = std::abs(trace.bilinear(i));
        grad_bilinear(i) = mag > 0.0 ? grad_rooted(i) * 0.5 / std::sqrt(mag) : 0.0;
      }
      grad_x = count_sketch_adjoint(layer.visual_sketch, circular_correlate(grad_bilinear, trace.sketch_q));
      grad_q = count_sketch_adjoint(layer.question_sketch, circular_correlate(grad_bilinear, trace.sketch_x));
      return;
    }
  }
}

VqaParams VqaParams::zeros_like() const {
  VqaParams z;
  z.embedding.weights = Matrix::Zero(embedding.weights.rows(), embedding.weights.cols());
  z.embedding.trainable = embedding.trainable;
  auto zero_lstm = [](const LstmParams& p) {
    LstmParams out;
    out.input_weights = Matrix::Zero(p.input_weights.rows(), p.input_weights.cols());
    out.recurrent_weights = Matrix::Zero(p.recurrent_weights.rows(), p.recurrent_weights.cols());
    out.bias = Vector::Zero(p.bias.size());
    return out;
  };
  z.forward = zero_lstm(forward);
  z.backward = zero_lstm(backward);
  z.visual = Matrix::Zero(visual.rows(), visual.cols());
  z.classifier = Matrix::Zero(classifier.rows(), classifier.cols());
  z.classifier_bias = Vector::Zero(classifier_bias.size());
  return z;
}

namespace {

void expect_shape(const char* what, Index rows, Index cols, Index want_rows, Index want_cols) {
  if (rows != want_rows || cols != want_cols) {
    throw DimensionError(std::string(what) + " is " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", expected " + std::to_string(want_rows) + "x" +
                         std::to_string(want_cols));
  }
}

void check_lstm(const char* what, const LstmParams& p, Index input, Index hidden) {
  const std::string name(what);
  expect_shape((name + ".input_weights").c_str(), p.input_weights.rows(), p.input_weights.cols(),
               4 * hidden, input);
  expect_shape((name + ".recurrent_weights").c_str(), p.recurrent_weights.rows(),
               p.recurrent_weights.cols(), 4 * hidden, hidden);
  expect_shape((name + ".bias").c_str(), p.bias.rows(), 1, 4 * hidden, 1);
}

}  // namespace

void finalize_model(VqaModel& model) {
  const ModelConfig& cfg = model.config;
  const Index m = cfg.hidden_size;
  const VqaParams& p = model.params;
  if (m < 1 || cfg.embedding_dim < 1) throw InvalidValue("model dimensions must be positive");
  if (model.answers.size() < 1) throw InsufficientData("model has no answer classes");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw InvalidValue("dropout must lie in [0, 1)");
  expect_shape("embedding", p.embedding.rows(), p.embedding.dim(), model.vocab.size(), cfg.embedding_dim);
  check_lstm("forward", p.forward, cfg.embedding_dim, m);
  check_lstm("backward", p.backward, cfg.embedding_dim, m);
  if (p.visual.rows() != 2 * m || p.visual.cols() < 1) {
    throw DimensionError("visual embedding must have 2m = " + std::to_string(2 * m) + " rows");
  }
  model.fusion = make_fusion_layer(cfg.fusion, 2 * m);
  expect_shape("classifier", p.classifier.rows(), p.classifier.cols(), model.fusion.output_dim(),
               model.answers.size());
  expect_shape("classifier_bias", p.classifier_bias.rows(), 1, model.answers.size(), 1);
  model.params.embedding.trainable = cfg.train_embeddings;
}

VqaModel make_model(Vocabulary vocab, AnswerVocabulary answers, Index image_dim,
                    const ModelConfig& config, const PretrainedTable& pretrained) {
  VqaModel model;
  model.vocab = std::move(vocab);
  model.answers = std::move(answers);
  model.config = config;
  model.config.num_answers = model.answers.size();

  std::mt19937_64 rng(config.seed);
  const Index m = config.hidden_size;
  model.params.embedding = init_embeddings(model.vocab, pretrained, config.embedding_dim, rng());
  model.params.forward = init_lstm(config.embedding_dim, m, rng);
  model.params.backward = init_lstm(config.embedding_dim, m, rng);

  std::uniform_real_distribution<double> uniform(-0.08, 0.08);
  auto draw = [&](Index rows, Index cols) {
    Matrix w(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) w(i, j) = uniform(rng);
    return w;
  };
  model.params.visual = draw(2 * m, image_dim);
  const Index fusion_dim = make_fusion_layer(config.fusion, 2 * m).output_dim();
  model.params.classifier = draw(fusion_dim, model.answers.size());
  model.params.classifier_bias = Vector::Zero(model.answers.size());
  finalize_model(model);
  return model;
}

Vector visual_embed(const Matrix& visual, const Vector& phi) {
  detail::require_same_length(phi.size(), visual.cols(), "visual_embed");
  return visual * phi;
}

Vector logits(const VqaModel& model, const Vector& fused) {
  detail::require_same_length(fused.size(), model.params.classifier.rows(), "classify");
  return model.params.classifier.transpose() * fused + model.params.classifier_bias;
}

Vector classify(const VqaModel& model, const Vector& fused) { return softmax(logits(model, fused)); }

Vector fused_representation(const VqaModel& model, const Vector& phi, std::span<const int> tokens) {
  const Vector q = encode_question(model.params.embedding, model.params.forward,
                                   model.params.backward, tokens);
  return fuse(model.fusion, visual_embed(model.params.visual, phi), q);
}

Prediction predict_answer(const VqaModel& model, const ImageEmbedding& image,
                          std::span<const int> tokens) {
  const Vector probs = classify(model, fused_representation(model, image.phi, tokens));
  Prediction p;
  p.class_index = static_cast<int>(argmax(probs));
  p.prob = probs(p.class_index);
  p.answer = model.answers.answer(p.class_index);
  return p;
}

}  // namespace vibik
