#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vibiknet/data_io.hpp"
#include "vibiknet/fusion_model.hpp"

namespace vibik {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Index batch_size = 128;
  int epochs = 10;
  double dropout = 0.5;
  std::uint64_t seed = 0;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
  double lr_decay = 1.0;   // per-epoch multiplicative factor, 1 keeps lr constant
};

void validate(const TrainConfig& config);

/// One supervised example: fixed image embedding, question indices and the
/// target class (AnswerVocabulary::kIgnore when the answer is not a class).
struct Example {
  Vector phi;
  std::vector<int> tokens;
  int target = AnswerVocabulary::kIgnore;
};

/// Builds examples for `records`. The target is the majority human answer.
std::vector<Example> make_examples(const VqaModel& model, const std::vector<QaRecord>& records,
                                   const EmbeddingMap& embeddings);

/// Mean cross-entropy over non-ignored examples, dropout disabled.
double loss(const VqaModel& model, std::span<const Example> batch);

struct BackwardOptions {
  double dropout = 0.0;
  std::uint64_t seed = 0;  // dropout masks are drawn from this seed, in batch order
};

struct BackwardResult {
  double loss = 0.0;
  Index counted = 0;  // non-ignored examples
  Index correct = 0;  // argmax hits under the same (possibly dropped-out) forward pass
  VqaParams grads;
};

/// Exact gradients of the mean cross-entropy with respect to every parameter.
/// The padding row of the embedding gradient is always zero; the whole
/// embedding gradient is zero when embeddings are frozen.
BackwardResult backward(const VqaModel& model, std::span<const Example> batch,
                        const BackwardOptions& options = {});

struct AdamState {
  VqaParams first_moment;
  VqaParams second_moment;
  std::int64_t step = 0;
};

AdamState make_adam_state(const VqaParams& params);

/// Bias-corrected Adam update of every parameter group. Frozen embeddings are
/// left untouched.
void adam_step(AdamState& state, VqaParams& params, const VqaParams& grads,
               const TrainConfig& config, double learning_rate);
inline void adam_step(AdamState& state, VqaParams& params, const VqaParams& grads,
                      const TrainConfig& config) {
  adam_step(state, params, grads, config, config.learning_rate);
}

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;  // percent, inference mode, after the epoch
  double seconds = 0.0;         // optimisation wall-clock only
  std::optional<double> eval_accuracy;

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainLog {
  std::string fusion;
  std::vector<EpochLog> epochs;
};

/// One JSON object per epoch: {"fusion", "epoch", "loss", "train_accuracy",
/// "seconds"[, "eval_accuracy"]}.
std::string format_train_log(const TrainLog& log);
TrainLog parse_train_log(std::istream& in);
TrainLog load_train_log(const std::string& path);

/// Percentage of non-ignored examples whose argmax equals the target.
double classification_accuracy(const VqaModel& model, std::span<const Example> examples);

using EpochCallback = std::function<void(const VqaModel&, EpochLog&)>;

/// Mini-batch Adam training with per-epoch seeded shuffling. Variable-length
/// questions are run at their true length, so each direction's last hidden
/// state sits at the sequence boundary and padding never reaches the gradient.
TrainLog train(VqaModel& model, std::span<const Example> examples, const TrainConfig& config,
               const EpochCallback& on_epoch = {});

TrainLog train(VqaModel& model, const std::vector<QaRecord>& records,
               const EmbeddingMap& embeddings, const TrainConfig& config,
               const EpochCallback& on_epoch = {});

struct GradCheckGroup {
  std::string name;
  double max_relative_error = 0.0;
  Index size = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double worst() const;
};

/// Elementwise |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central-difference check of `analytic` against `f` around `theta`.
double check_gradient(const std::function<double(const Vector&)>& f, const Vector& theta,
                      const Vector& analytic, double epsilon);

/// Compares `analytic` with central differences of loss(model, batch).
GradCheckReport compare_gradients(const VqaModel& model, std::span<const Example> batch,
                                  const VqaParams& analytic, double epsilon);

/// compare_gradients against backward() with dropout disabled.
GradCheckReport grad_check(const VqaModel& model, std::span<const Example> batch, double epsilon);

}  // namespace vibik
