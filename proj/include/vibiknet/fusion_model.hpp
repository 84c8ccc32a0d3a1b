#pragma once

// Visual embedding, multimodal fusion and answer classification. A VqaModel
// bundles every trainable parameter together with the vocabularies needed to
// go from (image embedding, question) to an answer string.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "vibiknet/fisher_encoder.hpp"
#include "vibiknet/question_encoder.hpp"

namespace vibik {

/// Lowercased answer with surrounding whitespace removed.
std::string normalize_answer(std::string_view answer);

/// Answer classes, most frequent first.
class AnswerVocabulary {
 public:
  static constexpr int kIgnore = -1;

  AnswerVocabulary() = default;
  explicit AnswerVocabulary(std::vector<std::string> answers);

  int size() const { return static_cast<int>(answers_.size()); }
  /// Class index of the normalized answer, or kIgnore when it is not a class.
  int lookup(std::string_view answer) const;
  const std::string& answer(int index) const;
  const std::vector<std::string>& answers() const { return answers_; }

  friend bool operator==(const AnswerVocabulary& a, const AnswerVocabulary& b) {
    return a.answers_ == b.answers_;
  }

 private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, int> index_;
};

/// Keeps the `max_answers` most frequent (normalized) answers; ties are broken
/// lexicographically.
AnswerVocabulary build_answer_vocabulary(const std::vector<std::string>& answers,
                                         std::size_t max_answers);

enum class FusionOp { kSum, kConcat, kMcb };

std::string to_string(FusionOp op);
FusionOp parse_fusion_op(std::string_view name);

struct FusionConfig {
  FusionOp op = FusionOp::kSum;
  Index mcb_dim = 1024;
  std::uint64_t mcb_seed = 0;

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

struct CountSketchParams {
  Index output_dim = 0;
  std::vector<Index> hash;  // input index -> output bucket
  std::vector<double> sign;  // input index -> +-1

  Index input_dim() const { return static_cast<Index>(hash.size()); }
};

CountSketchParams make_count_sketch(Index input_dim, Index output_dim, std::mt19937_64& rng);

/// out[hash[j]] += sign[j] * x[j]
Vector count_sketch(const CountSketchParams& params, const Vector& x);

/// Transpose of the sketch: g -> (sign[j] * g[hash[j]])_j.
Vector count_sketch_adjoint(const CountSketchParams& params, const Vector& g);

/// A fusion operator bound to its input size; for MCB it owns the two count
/// sketches generated from `config.mcb_seed` (visual first, then question).
struct FusionLayer {
  FusionConfig config;
  Index input_dim = 0;
  CountSketchParams visual_sketch;
  CountSketchParams question_sketch;

  Index output_dim() const;
};

FusionLayer make_fusion_layer(const FusionConfig& config, Index input_dim);

/// Intermediate values of an MCB fusion, kept for backpropagation.
struct McbTrace {
  Vector sketch_x, sketch_q;
  Vector bilinear;  // circular convolution of the two sketches
  Vector rooted;    // signed square root of `bilinear`
  double norm = 0.0;
};

Vector fuse(const FusionLayer& layer, const Vector& x_emb, const Vector& q_enc,
            McbTrace* trace = nullptr);
Vector fuse(const FusionConfig& config, const Vector& x_emb, const Vector& q_enc);

/// Gradients of a fusion output with respect to both inputs.
void fuse_backward(const FusionLayer& layer, const Vector& x_emb, const Vector& q_enc,
                   const Vector& fused, const McbTrace& trace, const Vector& grad_fused,
                   Vector& grad_x, Vector& grad_q);

/// All trainable parameters. Also used as the gradient and optimizer-moment
/// container, so every member is a dense array with the parameter's shape.
struct VqaParams {
  EmbeddingTable embedding;  // |V| x R
  LstmParams forward;
  LstmParams backward;
  Matrix visual;            // 2m x l
  Matrix classifier;        // fusion_dim x K
  Vector classifier_bias;   // K

  VqaParams zeros_like() const;

  friend bool operator==(const VqaParams&, const VqaParams&) = default;
};

/// Calls f(name, Eigen::Map<Vector>) for every parameter array of `params`
/// in a fixed order.
template <typename Params, typename F>
void for_each_parameter(Params& params, F&& f) {
  auto flat = [](auto& m) {
    return Eigen::Map<std::conditional_t<std::is_const_v<Params>, const Vector, Vector>>(
        m.data(), m.size());
  };
  f("embedding", flat(params.embedding.weights));
  f("forward.input_weights", flat(params.forward.input_weights));
  f("forward.recurrent_weights", flat(params.forward.recurrent_weights));
  f("forward.bias", flat(params.forward.bias));
  f("backward.input_weights", flat(params.backward.input_weights));
  f("backward.recurrent_weights", flat(params.backward.recurrent_weights));
  f("backward.bias", flat(params.backward.bias));
  f("visual", flat(params.visual));
  f("classifier", flat(params.classifier));
  f("classifier_bias", flat(params.classifier_bias));
}

struct ModelConfig {
  Index embedding_dim = 300;
  Index hidden_size = 250;
  Index num_answers = 2000;
  FusionConfig fusion;
  double dropout = 0.5;
  bool train_embeddings = true;
  std::uint64_t seed = 0;
};

struct VqaModel {
  Vocabulary vocab;
  AnswerVocabulary answers;
  ModelConfig config;
  VqaParams params;
  FusionLayer fusion;  // derived from config.fusion by finalize_model

  Index hidden_size() const { return params.forward.hidden_size(); }
  Index image_dim() const { return params.visual.cols(); }
  Index fusion_dim() const { return fusion.output_dim(); }
  Index num_answers() const { return answers.size(); }
};

/// Validates every parameter shape against the configuration and rebuilds the
/// fusion layer.
void finalize_model(VqaModel& model);

/// Fresh model with seeded random weights; embeddings initialised from
/// `pretrained` where available.
VqaModel make_model(Vocabulary vocab, AnswerVocabulary answers, Index image_dim,
                    const ModelConfig& config, const PretrainedTable& pretrained = {});

/// W_m * phi
Vector visual_embed(const Matrix& visual, const Vector& phi);

Vector logits(const VqaModel& model, const Vector& fused);
Vector classify(const VqaModel& model, const Vector& fused);

/// Fused multimodal vector of one example (inference mode).
Vector fused_representation(const VqaModel& model, const Vector& phi, std::span<const int> tokens);

struct Prediction {
  std::string answer;
  double prob = 0.0;
  int class_index = 0;
};

Prediction predict_answer(const VqaModel& model, const ImageEmbedding& image,
                          std::span<const int> tokens);

}  // namespace vibik
