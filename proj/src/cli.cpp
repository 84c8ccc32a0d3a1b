#include "vibiknet/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>

#include "CLI11.hpp"
#include "json.hpp"
#include "vibiknet/evaluation.hpp"
#include "vibiknet/synth.hpp"

namespace vibik {
namespace {

using nlohmann::json;

template <typename T>
void read_field(const json& obj, const char* key, T& field) {
  if (const auto it = obj.find(key); it != obj.end()) {
    try {
      field = it->template get<T>();
    } catch (const json::exception&) {
      throw ValidationError(std::string("config field '") + key + "' has the wrong type", 0);
    }
  }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const char* where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ValidationError(std::string("unknown ") + where + " field '" + key + "'", 0);
    }
  }
}

std::optional<std::uint64_t> seed_from_env() {
  const char* value = std::getenv("VIBIKNET_SEED");
  if (value == nullptr || *value == '\0') return std::nullopt;
  std::uint64_t seed = 0;
  const char* end = value + std::char_traits<char>::length(value);
  const auto [ptr, ec] = std::from_chars(value, end, seed);
  if (ec != std::errc() || ptr != end) {
    throw InvalidValue(std::string("VIBIKNET_SEED is not an unsigned integer: ") + value);
  }
  return seed;
}

std::vector<QaRecord> filter_split(std::vector<QaRecord> records, const std::string& split) {
  if (split.empty()) return records;
  std::erase_if(records, [&](const QaRecord& r) { return r.split != split; });
  return records;
}

EmbeddingMap encode_all(const FisherEncoder& encoder, const DescriptorMap& descriptors) {
  EmbeddingMap out;
  for (const auto& [id, set] : descriptors) out.emplace(id, encode_image(encoder, set));
  return out;
}

/// Embeddings either from a precomputed file or by encoding descriptors.
EmbeddingMap image_embeddings(const std::string& embeddings_path,
                              const std::string& descriptors_path, const FisherEncoder& encoder) {
  if (!embeddings_path.empty()) return load_embeddings(embeddings_path);
  return encode_all(encoder, load_descriptors(descriptors_path));
}

void write_text(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty() || path == "-") {
    fallback << text;
    return;
  }
  write_file(path, text);
}

std::vector<std::vector<std::string>> token_corpus(const std::vector<QaRecord>& records) {
  std::vector<std::vector<std::string>> corpus;
  corpus.reserve(records.size());
  for (const auto& r : records) corpus.push_back(r.tokens);
  return corpus;
}

struct Options {
  // shared
  std::uint64_t seed = 0;
  std::string descriptors, embeddings, encoder, dataset, model, out, log, config;
  std::string split = "train";
  // fit-encoder
  EncoderConfig encoder_config;
  // train
  std::string eval_split, fusion, pretrained;
  int epochs = -1;
  // synth
  SynthSpec synth;
  std::string out_dataset;
  // evaluate
  std::string json_out;
  // report
  std::vector<std::string> logs;
  // gradcheck
  std::string fusions = "all";
  double tolerance = 1e-4;
};

int cmd_synth(Options& o, std::ostream& out) {
  const auto corpus = synth_generate(o.seed, o.synth);
  synth_write(corpus, o.out, o.out_dataset);
  out << "wrote " << corpus.descriptors.size() << " images to " << o.out << " and "
      << corpus.records.size() << " questions to " << o.out_dataset << "\n";
  return 0;
}

int cmd_fit_encoder(Options& o, std::ostream& out) {
  auto descriptors = load_descriptors(o.descriptors);
  std::vector<RegionDescriptorSet> sets;
  if (!o.dataset.empty()) {
    // Restrict fitting to the images referenced by the chosen split.
    std::map<std::string, bool> wanted;
    for (const auto& r : filter_split(load_dataset(o.dataset), o.split)) wanted[r.image_id] = true;
    for (const auto& [id, _] : wanted) {
      const auto it = descriptors.find(id);
      if (it == descriptors.end()) throw MissingImage(id);
      sets.push_back(it->second);
    }
  } else {
    for (auto& [id, set] : descriptors) sets.push_back(std::move(set));
  }
  o.encoder_config.seed = o.seed;
  const auto encoder = fit_encoder(sets, o.encoder_config);
  save_encoder(o.out, encoder);
  out << "encoder: " << encoder.descriptor_dim() << " -> " << encoder.gmm.dim() << " x "
      << encoder.gmm.components() << " -> " << encoder.embedding_dim() << " from " << sets.size()
      << " images\n";
  return 0;
}

int cmd_encode(Options& o, std::ostream& out) {
  const auto encoder = load_encoder(o.encoder);
  const auto embeddings = encode_all(encoder, load_descriptors(o.descriptors));
  save_embeddings(o.out, embeddings);
  out << "encoded " << embeddings.size() << " images\n";
  return 0;
}

int cmd_train(Options& o, std::ostream& out) {
  TrainingSetup setup;
  if (!o.config.empty()) setup = parse_training_config(read_file(o.config));
  if (auto env = seed_from_env()) {
    setup.train.seed = *env;
    setup.model.seed = *env;
  }
  if (!o.fusion.empty()) setup.model.fusion.op = parse_fusion_op(o.fusion);
  if (o.epochs >= 0) setup.train.epochs = o.epochs;
  setup.model.dropout = setup.train.dropout;

  const auto all_records = load_dataset(o.dataset);
  const auto train_records = filter_split(all_records, o.split);
  if (train_records.empty()) throw InsufficientData("no records in split '" + o.split + "'");
  const auto encoder = load_encoder(o.encoder);
  const auto embeddings = image_embeddings(o.embeddings, o.descriptors, encoder);

  std::vector<std::string> majority;
  for (const auto& r : train_records) majority.push_back(majority_answer(r));
  auto answers = build_answer_vocabulary(majority, static_cast<std::size_t>(setup.model.num_answers));
  auto vocab = build_vocabulary(token_corpus(train_records));
  PretrainedTable pretrained;
  if (!o.pretrained.empty()) pretrained = load_pretrained(o.pretrained);
  VqaModel model = make_model(std::move(vocab), std::move(answers), encoder.embedding_dim(),
                              setup.model, pretrained);

  std::vector<QaRecord> eval_records;
  if (!o.eval_split.empty()) eval_records = filter_split(all_records, o.eval_split);
  EpochCallback on_epoch;
  if (!eval_records.empty()) {
    on_epoch = [&](const VqaModel& m, EpochLog& entry) {
      entry.eval_accuracy = evaluate_split(m, embeddings, eval_records).all.accuracy;
    };
  }
  const TrainLog log = train(model, train_records, embeddings, setup.train, on_epoch);
  save_model(model, encoder, o.out);
  if (!o.log.empty()) write_file(o.log, format_train_log(log));

  double seconds = 0.0;
  for (const auto& e : log.epochs) seconds += e.seconds;
  if (!log.epochs.empty()) {
    const auto& last = log.epochs.back();
    char line[160];
    std::snprintf(line, sizeof(line), "fusion %s: %zu epochs, loss %.4f, train accuracy %.1f%%\n",
                  log.fusion.c_str(), log.epochs.size(), last.loss, last.train_accuracy);
    out << line;
  }
  if (!eval_records.empty()) {
    AccuracyReport report = evaluate_split(model, embeddings, eval_records);
    if (!log.epochs.empty()) report.seconds_per_epoch = seconds / static_cast<double>(log.epochs.size());
    out << report_table(report);
  }
  return 0;
}

int cmd_predict(Options& o, std::ostream& out) {
  const auto archive = load_model(o.model);
  const auto embeddings = image_embeddings(o.embeddings, o.descriptors, archive.encoder);
  const auto records = filter_split(load_dataset(o.dataset), o.split);
  std::string text;
  for (const auto& r : records) {
    const auto it = embeddings.find(r.image_id);
    if (it == embeddings.end()) throw MissingImage(r.image_id);
    const auto p = predict_answer(archive.model, it->second, archive.model.vocab.encode(r.tokens));
    nlohmann::ordered_json j;
    j["image_id"] = r.image_id;
    j["question"] = r.question;
    j["answer"] = p.answer;
    j["prob"] = p.prob;
    text += j.dump() + "\n";
  }
  write_text(o.out, text, out);
  return 0;
}

int cmd_evaluate(Options& o, std::ostream& out) {
  const auto archive = load_model(o.model);
  const auto embeddings = image_embeddings(o.embeddings, o.descriptors, archive.encoder);
  const auto records = filter_split(load_dataset(o.dataset), o.split);
  if (records.empty()) throw InsufficientData("no records to evaluate");
  const auto report = evaluate_split(archive.model, embeddings, records);
  out << report_table(report);
  if (!o.json_out.empty()) write_text(o.json_out, report_json(report) + "\n", out);
  return 0;
}

int cmd_report(Options& o, std::ostream& out) {
  std::vector<TrainLog> logs;
  for (const auto& path : o.logs) logs.push_back(load_train_log(path));
  out << comparison_table(logs);
  return 0;
}

int cmd_gradcheck(Options& o, std::ostream& out) {
  std::vector<FusionOp> ops;
  if (o.fusions == "all") {
    ops = {FusionOp::kSum, FusionOp::kConcat, FusionOp::kMcb};
  } else {
    ops = {parse_fusion_op(o.fusions)};
  }
  double worst = 0.0;
  for (const auto op : ops) {
    const auto report = tiny_grad_check(op, o.seed);
    for (const auto& g : report.groups) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-7s %-27s %6ld  %.3e\n", to_string(op).c_str(),
                    g.name.c_str(), static_cast<long>(g.size), g.max_relative_error);
      out << line;
    }
    worst = std::max(worst, report.worst());
  }
  char line[96];
  std::snprintf(line, sizeof(line), "worst relative error %.3e (tolerance %.1e)\n", worst, o.tolerance);
  out << line;
  if (!(worst < o.tolerance)) throw NumericalFailure("gradient check exceeded tolerance", 0);
  return 0;
}

}  // namespace

TrainingSetup parse_training_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what(), 0);
  }
  if (!j.is_object()) throw ValidationError("config must be a JSON object", 0);
  reject_unknown(j,
                 {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "epochs", "dropout",
                  "seed", "clip_norm", "lr_decay", "embedding_dim", "hidden_size", "num_answers",
                  "train_embeddings", "fusion"},
                 "config");
  TrainingSetup s;
  read_field(j, "learning_rate", s.train.learning_rate);
  read_field(j, "beta1", s.train.beta1);
  read_field(j, "beta2", s.train.beta2);
  read_field(j, "epsilon", s.train.epsilon);
  read_field(j, "batch_size", s.train.batch_size);
  read_field(j, "epochs", s.train.epochs);
  read_field(j, "dropout", s.train.dropout);
  read_field(j, "seed", s.train.seed);
  read_field(j, "clip_norm", s.train.clip_norm);
  read_field(j, "lr_decay", s.train.lr_decay);
  read_field(j, "embedding_dim", s.model.embedding_dim);
  read_field(j, "hidden_size", s.model.hidden_size);
  read_field(j, "num_answers", s.model.num_answers);
  read_field(j, "train_embeddings", s.model.train_embeddings);
  s.model.seed = s.train.seed;
  s.model.dropout = s.train.dropout;
  if (const auto it = j.find("fusion"); it != j.end()) {
    if (it->is_string()) {
      s.model.fusion.op = parse_fusion_op(it->get<std::string>());
    } else if (it->is_object()) {
      reject_unknown(*it, {"op", "mcb_dim", "mcb_seed"}, "fusion");
      std::string op = to_string(s.model.fusion.op);
      read_field(*it, "op", op);
      s.model.fusion.op = parse_fusion_op(op);
      read_field(*it, "mcb_dim", s.model.fusion.mcb_dim);
      read_field(*it, "mcb_seed", s.model.fusion.mcb_seed);
    } else {
      throw ValidationError("config field 'fusion' must be a string or an object", 0);
    }
  }
  validate(s.train);
  return s;
}

std::string comparison_table(const std::vector<TrainLog>& logs) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-8s %7s %10s %10s %10s\n", "fusion", "epochs", "train[%]",
                "eval[%]", "sec/epoch");
  out += line;
  for (const auto& log : logs) {
    if (log.epochs.empty()) {
      std::snprintf(line, sizeof(line), "%-8s %7d %10s %10s %10s\n", log.fusion.c_str(), 0, "-",
                    "-", "-");
      out += line;
      continue;
    }
    double seconds = 0.0;
    for (const auto& e : log.epochs) seconds += e.seconds;
    const auto& last = log.epochs.back();
    char eval[32] = "-";
    if (last.eval_accuracy) std::snprintf(eval, sizeof(eval), "%.1f", *last.eval_accuracy);
    std::snprintf(line, sizeof(line), "%-8s %7zu %10.1f %10s %10.3f\n", log.fusion.c_str(),
                  log.epochs.size(), last.train_accuracy, eval,
                  seconds / static_cast<double>(log.epochs.size()));
    out += line;
  }
  return out;
}

GradCheckReport tiny_grad_check(FusionOp op, std::uint64_t seed, const TinyCheckSpec& spec) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::string> words = {Vocabulary::kPadToken, Vocabulary::kUnkToken, "what", "color", "is", "the", "cat", "how", "many"};
  Vocabulary vocab(words);
  std::vector<std::string> answer_list;
  for (Index k = 0; k < spec.num_answers; ++k) answer_list.push_back("a" + std::to_string(k));
  AnswerVocabulary answers(answer_list);

  ModelConfig config;
  config.embedding_dim = spec.embedding_dim;
  config.hidden_size = spec.hidden_size;
  config.num_answers = spec.num_answers;
  config.fusion.op = op;
  config.fusion.mcb_dim = spec.mcb_dim;
  config.fusion.mcb_seed = seed + 1;
  config.seed = seed;
  VqaModel model = make_model(vocab, answers, spec.image_dim, config);
  // Larger weights than the training initialisation keep every gate away from
  // its linear regime, so the check exercises the full nonlinearity.
  for_each_parameter(model.params, [&](const char*, Eigen::Map<Vector> p) {
    for (Index i = 0; i < p.size(); ++i) p(i) = 0.5 * normal(rng);
  });
  model.params.embedding.weights.row(Vocabulary::kPad).setZero();

  std::vector<Example> batch;
  std::uniform_int_distribution<int> token(2, vocab.size() - 1);
  for (Index b = 0; b < spec.batch; ++b) {
    Example ex;
    ex.phi = Vector(spec.image_dim);
    for (Index i = 0; i < spec.image_dim; ++i) ex.phi(i) = normal(rng);
    ex.phi.normalize();
    const int length = 2 + static_cast<int>(b);
    for (int t = 0; t < length; ++t) ex.tokens.push_back(token(rng));
    ex.target = static_cast<int>(b % spec.num_answers);
    batch.push_back(std::move(ex));
  }
  return grad_check(model, batch, spec.epsilon);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"VQA pipeline: Fisher-vector image encoding, bidirectional LSTM questions, fusion classifier",
               "vibiknet"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic descriptor set and dataset");
  synth->add_option("--seed", o.seed, "Random seed");
  synth->add_option("--out-descriptors", o.out, "Descriptor file to write")->required();
  synth->add_option("--out-dataset", o.out_dataset, "Dataset file (JSON lines) to write")->required();
  synth->add_option("--images", o.synth.images)->capture_default_str();
  synth->add_option("--regions", o.synth.regions)->capture_default_str();
  synth->add_option("--dim", o.synth.dim)->capture_default_str();
  synth->add_option("--questions-per-image", o.synth.questions_per_image)->capture_default_str();
  synth->add_option("--vocab-size", o.synth.vocab_size)->capture_default_str();
  synth->add_option("--answers", o.synth.answers)->capture_default_str();
  synth->add_option("--concepts", o.synth.concepts)->capture_default_str();
  synth->add_option("--test-fraction", o.synth.test_fraction)->capture_default_str();

  auto* fit = app.add_subcommand("fit-encoder", "Fit PCA, GMM and output projection on descriptors");
  fit->add_option("--descriptors", o.descriptors, "Descriptor file")->required();
  fit->add_option("--out", o.out, "Encoder file to write")->required();
  fit->add_option("--dataset", o.dataset, "Only use images referenced by this dataset");
  fit->add_option("--split", o.split, "Dataset split to take images from");
  fit->add_option("--seed", o.seed);
  fit->add_option("--pca-dim", o.encoder_config.pca_dim)->capture_default_str();
  fit->add_option("--components", o.encoder_config.components)->capture_default_str();
  fit->add_option("--embedding-dim", o.encoder_config.embedding_dim)->capture_default_str();
  fit->add_option("--gmm-iters", o.encoder_config.gmm_max_iters)->capture_default_str();
  fit->add_option("--gmm-tol", o.encoder_config.gmm_tol)->capture_default_str();
  fit->add_flag("--whiten-pre", o.encoder_config.whiten_pre);
  fit->add_flag("--whiten-post", o.encoder_config.whiten_post);

  auto* encode = app.add_subcommand("encode", "Encode descriptors into image embeddings");
  encode->add_option("--descriptors", o.descriptors)->required();
  encode->add_option("--encoder", o.encoder)->required();
  encode->add_option("--out", o.out, "Embedding file to write")->required();

  auto* train_cmd = app.add_subcommand("train", "Train the question-answering model");
  train_cmd->add_option("--dataset", o.dataset)->required();
  train_cmd->add_option("--encoder", o.encoder)->required();
  auto* emb_opt = train_cmd->add_option("--embeddings", o.embeddings);
  auto* desc_opt = train_cmd->add_option("--descriptors", o.descriptors);
  emb_opt->excludes(desc_opt);
  train_cmd->add_option("--config", o.config, "JSON training configuration");
  train_cmd->add_option("--out", o.out, "Model archive to write")->required();
  train_cmd->add_option("--log", o.log, "Training log (JSON lines) to write");
  train_cmd->add_option("--split", o.split, "Training split")->capture_default_str();
  train_cmd->add_option("--eval-split", o.eval_split, "Split evaluated after every epoch");
  train_cmd->add_option("--fusion", o.fusion, "Override the fusion operator: sum, concat or mcb");
  train_cmd->add_option("--epochs", o.epochs, "Override the number of epochs");
  train_cmd->add_option("--pretrained", o.pretrained, "Pretrained word vectors (text format)");

  auto* predict = app.add_subcommand("predict", "Answer questions with a trained model");
  predict->add_option("--model", o.model)->required();
  predict->add_option("--dataset", o.dataset)->required();
  auto* p_emb = predict->add_option("--embeddings", o.embeddings);
  auto* p_desc = predict->add_option("--descriptors", o.descriptors);
  p_emb->excludes(p_desc);
  predict->add_option("--split", o.split);
  predict->add_option("--out", o.out, "Prediction file (JSON lines), '-' for stdout");

  auto* evaluate = app.add_subcommand("evaluate", "Score a model on a dataset");
  evaluate->add_option("--model", o.model)->required();
  evaluate->add_option("--dataset", o.dataset)->required();
  auto* e_emb = evaluate->add_option("--embeddings", o.embeddings);
  auto* e_desc = evaluate->add_option("--descriptors", o.descriptors);
  e_emb->excludes(e_desc);
  evaluate->add_option("--split", o.split);
  evaluate->add_option("--json", o.json_out, "Write the report as JSON ('-' for stdout)");

  auto* report = app.add_subcommand("report", "Compare training logs of several fusion variants");
  report->add_option("logs", o.logs, "Training logs")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Verify gradients on a tiny random model");
  gradcheck->add_option("--seed", o.seed);
  gradcheck->add_option("--fusion", o.fusions, "sum, concat, mcb or all")->capture_default_str();
  gradcheck->add_option("--tolerance", o.tolerance)->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? static_cast<int>(ExitCode::kOk) : static_cast<int>(ExitCode::kUsage);
  }

  const auto* selected = app.get_subcommands().front();
  const std::string name = selected->get_name();
  try {
    if (name != "train") {
      if (auto env = seed_from_env()) o.seed = *env;
    }
    // Embedding-consuming commands need exactly one image source.
    if ((name == "train" || name == "predict" || name == "evaluate") && o.embeddings.empty() &&
        o.descriptors.empty()) {
      err << selected->help() << "vibiknet " << name
          << ": error: one of --embeddings or --descriptors is required\n";
      return static_cast<int>(ExitCode::kUsage);
    }
    if ((name == "predict" || name == "evaluate") && selected->count("--split") == 0) o.split.clear();
    if (name == "fit-encoder" && selected->count("--split") == 0) o.split.clear();

    if (name == "synth") return cmd_synth(o, out);
    if (name == "fit-encoder") return cmd_fit_encoder(o, out);
    if (name == "encode") return cmd_encode(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "predict") return cmd_predict(o, out);
    if (name == "evaluate") return cmd_evaluate(o, out);
    if (name == "report") return cmd_report(o, out);
    if (name == "gradcheck") return cmd_gradcheck(o, out);
  } catch (const Error& e) {
    err << "vibiknet " << name << ": error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    err << "vibiknet " << name << ": error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kDataError);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace vibik
