// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "vibiknet/cli.hpp"
#include "vibiknet/data_io.hpp"
#include "vibiknet/evaluation.hpp"
#include "vibiknet/synth.hpp"

using namespace vibik;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// Ground-truth mixture used for the EM and Fisher-vector checks.
GmmModel planted_mixture() {
  GmmModel m;
  m.weights = Vector(3);
  m.weights << 0.25, 0.45, 0.3;
  m.means = Matrix(3, 2);
  m.means << -3.0, 0.5, 0.5, 2.0, 2.5, -1.5;
  m.variances = Matrix(3, 2);
  m.variances << 0.6, 1.1, 0.9, 0.4, 1.3, 0.7;
  return m;
}

GmmModel fit_planted(std::vector<double>* trace) {
  std::mt19937_64 rng(2024);
  const Matrix x = gmm_sample(planted_mixture(), 1500, rng);
  GmmOptions opt;
  opt.components = 3;
  opt.max_iters = 100;
  opt.tol = -std::numeric_limits<double>::infinity();
  opt.seed = 1;
  return gmm_fit(x, opt, trace);
}

// Term-by-term sketch of the outer product x q^T.
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

Vector gaussian(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

Outcome grad_check_all() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (auto op : {FusionOp::kSum, FusionOp::kConcat, FusionOp::kMcb}) {
    for (const auto& g : tiny_grad_check(op, 0).groups) {
      if (g.max_relative_error > worst) {
        worst = g.max_relative_error;
        worst_name = to_string(op) + "/" + g.name;
      }
    }
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-4 && elapsed < 60.0,
          "worst relative error " + fmt("%.2e", worst) + " at " + worst_name + ", " +
              fmt("%.2f s", elapsed) + " (need < 1e-4, < 60 s)"};
}

Outcome em_monotone() {
  std::vector<double> trace;
  fit_planted(&trace);
  double worst_drop = 0.0;
  for (std::size_t i = 1; i < trace.size(); ++i) worst_drop = std::max(worst_drop, trace[i - 1] - trace[i]);
  const bool ok = trace.size() == 101 && worst_drop <= 1e-8;
  return {ok, fmt("%.0f EM iterations, largest decrease %.2e (need <= 1e-8)",
                  static_cast<double>(trace.size()) - 1.0, worst_drop)};
}

Outcome fv_scaling() {
  const auto gmm = fit_planted(nullptr);
  double small = 0.0, large = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    small += fisher_vector(gmm, gmm_sample(gmm, 100, rng)).norm() / 10.0;
    large += fisher_vector(gmm, gmm_sample(gmm, 10000, rng)).norm() / 10.0;
  }
  const double ratio = small / large;
  return {ratio >= 5.0, fmt("mean norm T=100 %.4f, T=10000 %.5f, ratio %.2f (need >= 5)", small, large, ratio)};
}

Outcome mcb_oracle() {
  std::mt19937_64 rng(31);
  double worst = 0.0;
  const std::pair<Index, Index> shapes[] = {{16, 64}, {64, 256}};
  for (const auto& [n, d] : shapes) {
    const auto layer = make_fusion_layer({FusionOp::kMcb, d, 5}, n);
    for (int trial = 0; trial < 10; ++trial) {
      const Vector x = gaussian(n, rng), q = gaussian(n, rng);
      McbTrace trace;
      fuse(layer, x, q, &trace);
      worst = std::max(worst, (trace.bilinear - outer_product_sketch(layer, x, q)).cwiseAbs().maxCoeff());
    }
  }
  return {worst <= 1e-8, fmt("max abs difference %.2e over 16->64 and 64->256 (need <= 1e-8)", worst)};
}

Outcome metric_exact() {
  const double expected[11] = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
  std::string got;
  bool ok = true;
  for (int m = 0; m <= 10; ++m) {
    std::vector<std::string> answers;
    for (int i = 0; i < 10; ++i) answers.push_back(i < m ? "two" : "other" + std::to_string(i));
    const double a = vqa_accuracy("two", answers);
    ok = ok && a == expected[m];
    got += fmt(m ? " %.4f" : "%.4f", a);
  }
  return {ok, "match counts 0..10 -> " + got};
}

// Shared CLI pipeline for criteria 6, 7 and 8.
struct Pipeline {
  std::filesystem::path dir;
  double seconds = 0.0;
  std::string failure;
  std::string report_output;

  std::string p(const std::string& name) const { return (dir / name).string(); }

  bool cli(const std::vector<std::string>& args, std::string* out = nullptr) {
    if (!failure.empty()) return false;
    std::ostringstream o, e;
    const int code = run(args, o, e);
    if (code != 0) {
      failure = args.front() + " exited " + std::to_string(code) + ": " + e.str();
      return false;
    }
    if (out) *out = o.str();
    return true;
  }

  bool train(const std::string& fusion, const std::string& tag) {
    return cli({"train", "--dataset", p("q.jsonl"), "--embeddings", p("emb.bin"), "--encoder",
                p("enc.bin"), "--config", p("config.json"), "--fusion", fusion, "--out",
                p(tag + ".model"), "--log", p(tag + ".jsonl"), "--eval-split", "test"});
  }

  void execute() {
    dir = std::filesystem::temp_directory_path() / "vibiknet_acceptance";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    write_file(p("config.json"),
               R"({"embedding_dim": 32, "hidden_size": 32, "epochs": 100, "batch_size": 32,
                   "learning_rate": 0.005, "dropout": 0.2, "seed": 7,
                   "fusion": {"op": "sum", "mcb_dim": 1024, "mcb_seed": 7}})");
    const auto start = Clock::now();
    cli({"synth", "--seed", "7", "--out-descriptors", p("d.bin"), "--out-dataset", p("q.jsonl")});
    cli({"fit-encoder", "--descriptors", p("d.bin"), "--dataset", p("q.jsonl"), "--split", "train",
         "--out", p("enc.bin"), "--pca-dim", "16", "--components", "8", "--embedding-dim", "48",
         "--seed", "7"});
    cli({"encode", "--descriptors", p("d.bin"), "--encoder", p("enc.bin"), "--out", p("emb.bin")});
    train("sum", "sum");
    train("concat", "concat");
    train("mcb", "mcb");
    cli({"report", p("sum.jsonl"), p("concat.jsonl"), p("mcb.jsonl")}, &report_output);
    seconds = seconds_since(start);
  }
};

Pipeline& pipeline() {
  static Pipeline instance = [] {
    Pipeline pl;
    pl.execute();
    return pl;
  }();
  return instance;
}

Outcome learnability() {
  auto& pl = pipeline();
  if (!pl.failure.empty()) return {false, pl.failure};
  const auto records = load_dataset(pl.p("q.jsonl"));
  std::size_t train_count = 0;
  for (const auto& r : records) train_count += r.split == "train";
  const auto model = load_model(pl.p("sum.model")).model;

  const auto log = load_train_log(pl.p("sum.jsonl"));
  int reached = 0;
  for (const auto& e : log.epochs) {
    if (e.train_accuracy >= 95.0) {
      reached = e.epoch;
      break;
    }
  }
  std::vector<QaRecord> test;
  for (const auto& r : records)
    if (r.split == "test") test.push_back(r);
  const auto held_out = evaluate_split(model, load_embeddings(pl.p("emb.bin")), test).all.accuracy;
  const double chance3 = 300.0 / static_cast<double>(model.answers.size());
  const bool ok = train_count >= 256 && model.answers.size() == 8 && reached > 0 && reached <= 200 &&
                  held_out >= chance3 && pl.seconds < 300.0;
  return {ok, std::to_string(train_count) + " train questions, K=" + std::to_string(model.answers.size()) +
                  ", train accuracy >= 95% at epoch " + std::to_string(reached) +
                  fmt(", held-out %.1f%% (need >= %.1f%%), pipeline %.1f s (need < 300 s)", held_out,
                      chance3, pl.seconds)};
}

Outcome fusion_harness() {
  auto& pl = pipeline();
  if (!pl.failure.empty()) return {false, pl.failure};
  const auto sum = load_train_log(pl.p("sum.jsonl")).epochs.back();
  const auto concat = load_train_log(pl.p("concat.jsonl")).epochs.back();
  bool rows = true;
  for (const char* name : {"\nsum ", "\nconcat ", "\nmcb "}) rows = rows && pl.report_output.find(name) != std::string::npos;
  const double gap = std::abs(*sum.eval_accuracy - *concat.eval_accuracy);
  std::printf("%s", pl.report_output.c_str());
  return {rows && gap < 5.0,
          fmt("final held-out sum %.1f%%, concat %.1f%%, gap %.1f pp (need < 5)", *sum.eval_accuracy,
              *concat.eval_accuracy, gap)};
}

bool logs_match(const TrainLog& a, const TrainLog& b) {
  if (a.fusion != b.fusion || a.epochs.size() != b.epochs.size()) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    EpochLog x = a.epochs[i], y = b.epochs[i];
    x.seconds = y.seconds = 0.0;  // wall-clock
    if (!(x == y)) return false;
  }
  return true;
}

Outcome reproducibility() {
  auto& pl = pipeline();
  if (!pl.failure.empty()) return {false, pl.failure};
  // Save -> load -> predict through the in-memory model and the CLI.
  const auto loaded = load_model(pl.p("mcb.model"));
  const auto reloaded = parse_model(serialize_model(loaded.model, loaded.encoder));
  const auto embeddings = load_embeddings(pl.p("emb.bin"));
  std::size_t compared = 0, differing = 0;
  for (const auto& r : load_dataset(pl.p("q.jsonl"))) {
    const auto tokens = loaded.model.vocab.encode(r.tokens);
    const auto a = predict_answer(loaded.model, embeddings.at(r.image_id), tokens);
    const auto b = predict_answer(reloaded.model, embeddings.at(r.image_id), tokens);
    ++compared;
    differing += a.answer != b.answer || a.prob != b.prob;
  }
  pl.cli({"predict", "--model", pl.p("mcb.model"), "--dataset", pl.p("q.jsonl"), "--descriptors",
          pl.p("d.bin"), "--split", "test", "--out", pl.p("pred_a.jsonl")});
  pl.cli({"predict", "--model", pl.p("mcb.model"), "--dataset", pl.p("q.jsonl"), "--embeddings",
          pl.p("emb.bin"), "--split", "test", "--out", pl.p("pred_b.jsonl")});
  pl.train("mcb", "mcb_repeat");
  if (!pl.failure.empty()) return {false, pl.failure};
  const bool predictions_equal = read_file(pl.p("pred_a.jsonl")) == read_file(pl.p("pred_b.jsonl"));
  const bool models_equal = read_file(pl.p("mcb.model")) == read_file(pl.p("mcb_repeat.model"));
  const bool logs_equal =
      logs_match(load_train_log(pl.p("mcb.jsonl")), load_train_log(pl.p("mcb_repeat.jsonl")));
  const bool ok = differing == 0 && predictions_equal && models_equal && logs_equal;
  return {ok, std::to_string(differing) + "/" + std::to_string(compared) +
                  " reloaded predictions differ; CLI predictions " +
                  (predictions_equal ? "identical" : "differ") + "; same-seed model bytes " +
                  (models_equal ? "identical" : "differ") + "; TrainLogs (excluding wall-clock) " +
                  (logs_equal ? "identical" : "differ")};
}

Outcome encoder_invariants() {
  SynthSpec spec;
  spec.images = 60;
  const auto corpus = synth_generate(13, spec);
  EncoderConfig config;
  config.pca_dim = 16;
  config.components = 8;
  config.embedding_dim = 48;
  config.seed = 13;
  const auto encoder = fit_encoder(corpus.descriptors, config);
  std::mt19937_64 rng(13);
  double norm_err = 0.0, self_err = 0.0;
  std::size_t permutation_mismatch = 0;
  for (const auto& set : corpus.descriptors) {
    const auto e = encode_image(encoder, set);
    norm_err = std::max(norm_err, std::abs(e.phi.norm() - 1.0));
    self_err = std::max(self_err, std::abs(kernel_similarity(e, e) - 1.0));
    std::vector<Index> order(static_cast<std::size_t>(set.descriptors.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    RegionDescriptorSet permuted = set;
    for (std::size_t i = 0; i < order.size(); ++i)
      permuted.descriptors.row(static_cast<Index>(i)) = set.descriptors.row(order[i]);
    permutation_mismatch += !(encode_image(encoder, permuted).phi == e.phi);
  }
  const bool ok = norm_err <= 1e-10 && self_err <= 1e-10 && permutation_mismatch == 0;
  return {ok, fmt("max | |phi| - 1 | %.1e, max |k(a,a) - 1| %.1e, ", norm_err, self_err) +
                  std::to_string(permutation_mismatch) + "/" + std::to_string(corpus.descriptors.size()) +
                  " permuted images differ"};
}

}  // namespace

int main() {
  report(1, "gradient check", grad_check_all);
  report(2, "EM monotonicity", em_monotone);
  report(3, "Fisher vector 1/sqrt(T) at the fitted model", fv_scaling);
  report(4, "MCB equals outer-product sketch", mcb_oracle);
  report(5, "VQA accuracy exhaustive", metric_exact);
  report(6, "end-to-end learnability", learnability);
  report(7, "fusion comparison report", fusion_harness);
  report(8, "reproducibility", reproducibility);
  report(9, "encoder invariants", encoder_invariants);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
