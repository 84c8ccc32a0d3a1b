#include "vibiknet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace vibik {
namespace {

// Everything the backward pass needs from one example's forward pass.
struct ExampleTrace {
  std::vector<LstmStepTrace> forward_steps;
  std::vector<LstmStepTrace> backward_steps;
  Vector question;
  Vector visual;
  Vector fused;
  McbTrace mcb;
  Vector mask;  // inverted-dropout scale per fused unit; empty when dropout is off
  Vector dropped;
  Vector probs;
};

ExampleTrace forward_example(const VqaModel& model, const Example& ex, double dropout,
                             std::mt19937_64* rng) {
  const VqaParams& p = model.params;
  const Index m = model.hidden_size();
  ExampleTrace t;
  t.forward_steps = lstm_run(p.embedding, p.forward, ex.tokens, false);
  t.backward_steps = lstm_run(p.embedding, p.backward, ex.tokens, true);
  t.question.resize(2 * m);
  t.question.head(m) = t.forward_steps.back().h;
  t.question.tail(m) = t.backward_steps.back().h;
  t.visual = visual_embed(p.visual, ex.phi);
  t.fused = fuse(model.fusion, t.visual, t.question, &t.mcb);
  if (dropout > 0.0 && rng) {
    std::bernoulli_distribution keep(1.0 - dropout);
    t.mask.resize(t.fused.size());
    for (Index i = 0; i < t.mask.size(); ++i) t.mask(i) = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
    t.dropped = t.fused.cwiseProduct(t.mask);
  } else {
    t.dropped = t.fused;
  }
  t.probs = classify(model, t.dropped);
  return t;
}

// Backpropagation through one LSTM direction. `grad_h` is the gradient on the
// final hidden state.
void lstm_backward(const LstmParams& params, const std::vector<LstmStepTrace>& steps,
                   std::span<const int> tokens, bool reverse, Vector grad_h, LstmParams& grads,
                   Matrix& embedding_grad) {
  const Index m = params.hidden_size();
  Vector grad_c = Vector::Zero(m);
  Vector grad_pre(4 * m);
  const auto n = steps.size();
  for (std::size_t s = n; s-- > 0;) {
    const LstmStepTrace& t = steps[s];
    const Eigen::ArrayXd tanh_c = t.c.array().tanh();
    const Eigen::ArrayXd dh = grad_h.array();
    const Eigen::ArrayXd dc = grad_c.array() + dh * t.output * (1.0 - tanh_c.square());

    grad_pre.segment(kInputGate * m, m) = (dc * t.candidate * t.input * (1.0 - t.input)).matrix();
    grad_pre.segment(kForgetGate * m, m) = (dc * t.c_prev.array() * t.forget * (1.0 - t.forget)).matrix();
    grad_pre.segment(kOutputGate * m, m) = (dh * tanh_c * t.output * (1.0 - t.output)).matrix();
    grad_pre.segment(kCandidate * m, m) = (dc * t.input * (1.0 - t.candidate.square())).matrix();

    grads.input_weights.noalias() += grad_pre * t.x.transpose();
    grads.recurrent_weights.noalias() += grad_pre * t.h_prev.transpose();
    grads.bias += grad_pre;

    const int token = tokens[reverse ? n - 1 - s : s];
    embedding_grad.row(token).noalias() += (params.input_weights.transpose() * grad_pre).transpose();
    grad_h = params.recurrent_weights.transpose() * grad_pre;
    grad_c = (dc * t.forget).matrix();
  }
}

void check_target(const VqaModel& model, int target) {
  if (target != AnswerVocabulary::kIgnore && (target < 0 || target >= model.num_answers())) {
    throw IndexError("target class " + std::to_string(target) + " outside " +
                     std::to_string(model.num_answers()) + " classes");
  }
}

double global_norm(const VqaParams& grads) {
  double sq = 0.0;
  for_each_parameter(grads, [&](const char*, const auto& g) { sq += g.squaredNorm(); });
  return std::sqrt(sq);
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.learning_rate >= 0.0)) throw InvalidValue("learning_rate must be non-negative");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw InvalidValue("dropout must lie in [0, 1)");
  if (c.batch_size < 1) throw InvalidValue("batch_size must be at least 1");
  if (c.epochs < 0) throw InvalidValue("epochs must be non-negative");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw InvalidValue("adam betas must lie in [0, 1)");
  }
  if (!(c.epsilon > 0.0)) throw InvalidValue("adam epsilon must be positive");
}

std::vector<Example> make_examples(const VqaModel& model, const std::vector<QaRecord>& records,
                                   const EmbeddingMap& embeddings) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    const auto it = embeddings.find(rec.image_id);
    if (it == embeddings.end()) throw MissingImage(rec.image_id);
    Example ex;
    ex.phi = it->second.phi;
    ex.tokens = model.vocab.encode(rec.tokens);
    ex.target = model.answers.lookup(majority_answer(rec));
    out.push_back(std::move(ex));
  }
  return out;
}

double loss(const VqaModel& model, std::span<const Example> batch) {
  double total = 0.0;
  Index counted = 0;
  for (const auto& ex : batch) {
    check_target(model, ex.target);
    if (ex.target == AnswerVocabulary::kIgnore) continue;
    const Vector probs = classify(model, fused_representation(model, ex.phi, ex.tokens));
    total -= std::log(probs(ex.target));
    ++counted;
  }
  if (counted == 0) throw InsufficientData("loss: every example in the batch is ignored");
  return total / static_cast<double>(counted);
}

BackwardResult backward(const VqaModel& model, std::span<const Example> batch,
                        const BackwardOptions& options) {
  BackwardResult result;
  result.grads = model.params.zeros_like();
  VqaParams& g = result.grads;
  std::mt19937_64 rng(options.seed);

  for (const auto& ex : batch) {
    check_target(model, ex.target);
    if (ex.target != AnswerVocabulary::kIgnore) ++result.counted;
  }
  if (result.counted == 0) throw InsufficientData("backward: every example in the batch is ignored");
  const double scale = 1.0 / static_cast<double>(result.counted);
  const Index m = model.hidden_size();

  for (const auto& ex : batch) {
    if (ex.target == AnswerVocabulary::kIgnore) continue;
    const ExampleTrace t = forward_example(model, ex, options.dropout, &rng);
    result.loss -= std::log(t.probs(ex.target)) * scale;
    if (argmax(t.probs) == ex.target) ++result.correct;

    Vector grad_logits = t.probs * scale;
    grad_logits(ex.target) -= scale;
    g.classifier.noalias() += t.dropped * grad_logits.transpose();
    g.classifier_bias += grad_logits;

    Vector grad_fused = model.params.classifier * grad_logits;
    if (t.mask.size() > 0) grad_fused.array() *= t.mask.array();

    Vector grad_visual, grad_question;
    fuse_backward(model.fusion, t.visual, t.question, t.fused, t.mcb, grad_fused, grad_visual,
                  grad_question);
    g.visual.noalias() += grad_visual * ex.phi.transpose();

    lstm_backward(model.params.forward, t.forward_steps, ex.tokens, false, grad_question.head(m),
                  g.forward, g.embedding.weights);
    lstm_backward(model.params.backward, t.backward_steps, ex.tokens, true, grad_question.tail(m),
                  g.backward, g.embedding.weights);
  }

  if (model.params.embedding.trainable) {
    g.embedding.weights.row(Vocabulary::kPad).setZero();
  } else {
    g.embedding.weights.setZero();
  }
  return result;
}

AdamState make_adam_state(const VqaParams& params) {
  AdamState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  return s;
}

void adam_step(AdamState& state, VqaParams& params, const VqaParams& grads,
               const TrainConfig& config, double learning_rate) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  const bool update_embedding = params.embedding.trainable;

  // Zip the four parameter sets by visiting them in the same fixed order.
  std::vector<Eigen::Map<Vector>> p_maps, m_maps, v_maps;
  std::vector<Eigen::Map<const Vector>> g_maps;
  std::vector<std::string> names;
  for_each_parameter(params, [&](const char* name, Eigen::Map<Vector> v) {
    p_maps.push_back(v);
    names.emplace_back(name);
  });
  for_each_parameter(state.first_moment, [&](const char*, Eigen::Map<Vector> v) { m_maps.push_back(v); });
  for_each_parameter(state.second_moment, [&](const char*, Eigen::Map<Vector> v) { v_maps.push_back(v); });
  for_each_parameter(grads, [&](const char*, Eigen::Map<const Vector> v) { g_maps.push_back(v); });

  for (std::size_t i = 0; i < p_maps.size(); ++i) {
    if (p_maps[i].size() != g_maps[i].size() || m_maps[i].size() != g_maps[i].size()) {
      throw DimensionError("adam_step: shape mismatch in " + names[i]);
    }
    if (names[i] == "embedding" && !update_embedding) continue;
    m_maps[i] = config.beta1 * m_maps[i] + (1.0 - config.beta1) * g_maps[i];
    v_maps[i] = config.beta2 * v_maps[i] + (1.0 - config.beta2) * g_maps[i].cwiseAbs2();
    p_maps[i].array() -= learning_rate * (m_maps[i].array() / correction1) /
                         ((v_maps[i].array() / correction2).sqrt() + config.epsilon);
  }
}

double classification_accuracy(const VqaModel& model, std::span<const Example> examples) {
  Index counted = 0;
  Index correct = 0;
  for (const auto& ex : examples) {
    if (ex.target == AnswerVocabulary::kIgnore) continue;
    ++counted;
    // Same decision rule as predict_answer.
    const Vector probs = classify(model, fused_representation(model, ex.phi, ex.tokens));
    if (argmax(probs) == ex.target) ++correct;
  }
  return counted == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(counted);
}

TrainLog train(VqaModel& model, std::span<const Example> examples, const TrainConfig& config,
               const EpochCallback& on_epoch) {
  validate(config);
  TrainLog log;
  log.fusion = to_string(model.config.fusion.op);
  model.config.dropout = config.dropout;

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    check_target(model, examples[i].target);
    if (examples[i].target != AnswerVocabulary::kIgnore) usable.push_back(i);
  }
  if (usable.empty()) throw InsufficientData("train: no example has an in-vocabulary answer");

  std::mt19937_64 rng(config.seed);
  AdamState adam = make_adam_state(model.params);
  std::vector<Example> batch;
  const auto batch_size = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(usable.begin(), usable.end(), rng);
    const double lr = config.learning_rate * std::pow(config.lr_decay, epoch - 1);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < usable.size(); first += batch_size) {
      const std::size_t last = std::min(first + batch_size, usable.size());
      batch.clear();
      for (std::size_t i = first; i < last; ++i) batch.push_back(examples[usable[i]]);
      BackwardResult r = backward(model, batch, {config.dropout, rng()});
      if (!std::isfinite(r.loss)) throw NumericalFailure("non-finite training loss", epoch);
      loss_sum += r.loss * static_cast<double>(r.counted);
      if (config.clip_norm > 0.0) {
        const double norm = global_norm(r.grads);
        if (norm > config.clip_norm) {
          const double s = config.clip_norm / norm;
          for_each_parameter(r.grads, [&](const char*, Eigen::Map<Vector> g) { g *= s; });
        }
      }
      adam_step(adam, model.params, r.grads, config, lr);
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    entry.loss = loss_sum / static_cast<double>(usable.size());
    entry.train_accuracy = classification_accuracy(model, examples);
    if (on_epoch) on_epoch(model, entry);
    log.epochs.push_back(entry);
  }
  return log;
}

TrainLog train(VqaModel& model, const std::vector<QaRecord>& records,
               const EmbeddingMap& embeddings, const TrainConfig& config,
               const EpochCallback& on_epoch) {
  const auto examples = make_examples(model, records, embeddings);
  return train(model, std::span<const Example>(examples), config, on_epoch);
}

std::string format_train_log(const TrainLog& log) {
  std::string out;
  for (const auto& e : log.epochs) {
    nlohmann::ordered_json j;
    j["fusion"] = log.fusion;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["train_accuracy"] = e.train_accuracy;
    j["seconds"] = e.seconds;
    if (e.eval_accuracy) j["eval_accuracy"] = *e.eval_accuracy;
    out += j.dump();
    out += '\n';
  }
  return out;
}

TrainLog parse_train_log(std::istream& in) {
  TrainLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto fusion = j.at("fusion").get<std::string>();
      if (log.epochs.empty()) {
        log.fusion = fusion;
      } else if (fusion != log.fusion) {
        throw ValidationError("log mixes fusion variants '" + log.fusion + "' and '" + fusion + "'", line_no);
      }
      EpochLog e;
      e.epoch = j.at("epoch").get<int>();
      e.loss = j.at("loss").get<double>();
      e.train_accuracy = j.at("train_accuracy").get<double>();
      e.seconds = j.at("seconds").get<double>();
      if (j.contains("eval_accuracy")) e.eval_accuracy = j.at("eval_accuracy").get<double>();
      log.epochs.push_back(e);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("bad train log entry: ") + e.what(), line_no);
    }
  }
  if (log.epochs.empty()) throw ValidationError("train log has no epochs", 0);
  return log;
}

TrainLog load_train_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open train log '" + path + "'");
  return parse_train_log(in);
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& g : groups) w = std::max(w, g.max_relative_error);
  return w;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double check_gradient(const std::function<double(const Vector&)>& f, const Vector& theta,
                      const Vector& analytic, double epsilon) {
  detail::require_same_length(theta.size(), analytic.size(), "check_gradient");
  double worst = 0.0;
  Vector probe = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    probe(i) = theta(i) + epsilon;
    const double up = f(probe);
    probe(i) = theta(i) - epsilon;
    const double down = f(probe);
    probe(i) = theta(i);
    worst = std::max(worst, relative_error(analytic(i), (up - down) / (2.0 * epsilon)));
  }
  return worst;
}

GradCheckReport compare_gradients(const VqaModel& model, std::span<const Example> batch,
                                  const VqaParams& analytic, double epsilon) {
  GradCheckReport report;
  VqaModel probe = model;

  std::vector<Eigen::Map<const Vector>> analytic_maps;
  for_each_parameter(analytic, [&](const char*, Eigen::Map<const Vector> v) { analytic_maps.push_back(v); });

  std::size_t group = 0;
  for_each_parameter(probe.params, [&](const char* name, Eigen::Map<Vector> values) {
    const auto& a = analytic_maps.at(group++);
    detail::require_same_length(values.size(), a.size(), name);
    // Frozen embeddings are not trainable parameters.
    if (std::string_view(name) == "embedding" && !model.params.embedding.trainable) return;
    GradCheckGroup g{name, 0.0, values.size()};
    for (Index i = 0; i < values.size(); ++i) {
      const double saved = values(i);
      values(i) = saved + epsilon;
      const double up = loss(probe, batch);
      values(i) = saved - epsilon;
      const double down = loss(probe, batch);
      values(i) = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      g.max_relative_error = std::max(g.max_relative_error, relative_error(a(i), numeric));
    }
    report.groups.push_back(g);
  });
  return report;
}

GradCheckReport grad_check(const VqaModel& model, std::span<const Example> batch, double epsilon) {
  const BackwardResult r = backward(model, batch, {0.0, 0});
  return compare_gradients(model, batch, r.grads, epsilon);
}

}  // namespace vibik
