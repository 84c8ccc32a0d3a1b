#include "vibiknet/question_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace vibik {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (const char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (!std::ispunct(ch)) {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{kPadToken, kUnkToken}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_[kPad] != kPadToken || tokens_[kUnk] != kUnkToken) {
    throw InvalidValue("vocabulary must start with the reserved padding and unknown tokens");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw InvalidValue("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

int Vocabulary::lookup(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int index) const {
  if (index < 0 || index >= size()) {
    throw IndexError("token index " + std::to_string(index) + " outside vocabulary of size " +
                     std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(index)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(lookup(t));
  return out;
}

Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus) {
  std::map<std::string, std::size_t> counts;
  for (const auto& question : corpus) {
    for (const auto& token : question) {
      if (token == Vocabulary::kPadToken || token == Vocabulary::kUnkToken) continue;
      ++counts[token];
    }
  }
  if (counts.empty()) throw InsufficientData("build_vocabulary: empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{Vocabulary::kPadToken, Vocabulary::kUnkToken};
  for (auto& [token, count] : ranked) tokens.push_back(token);
  return Vocabulary(std::move(tokens));
}

PretrainedTable read_pretrained(std::istream& in) {
  PretrainedTable table;
  Index dim = -1;
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    values.clear();
    std::string field;
    while (fields >> field) {
      double v = 0.0;
      const auto [end, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || end != field.data() + field.size() || !std::isfinite(v)) {
        throw ValidationError("bad embedding value '" + field + "'", line_no);
      }
      values.push_back(v);
    }
    if (values.empty()) throw ValidationError("token '" + token + "' has no values", line_no);
    if (dim < 0) dim = static_cast<Index>(values.size());
    if (static_cast<Index>(values.size()) != dim) {
      throw ValidationError("expected " + std::to_string(dim) + " values, got " +
                                std::to_string(values.size()),
                            line_no);
    }
    table[token] = Eigen::Map<const Vector>(values.data(), dim);
  }
  return table;
}

PretrainedTable load_pretrained(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open pretrained embedding file '" + path + "'");
  return read_pretrained(in);
}

EmbeddingTable init_embeddings(const Vocabulary& vocab, const PretrainedTable& pretrained,
                               Index dim, std::uint64_t seed) {
  for (const auto& [token, vec] : pretrained) {
    if (vec.size() != dim) {
      throw DimensionError("pretrained vector for '" + token + "' has dim " +
                           std::to_string(vec.size()) + ", expected " + std::to_string(dim));
    }
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-0.1, 0.1);
  EmbeddingTable table;
  table.weights = Matrix::Zero(vocab.size(), dim);
  for (int i = 0; i < vocab.size(); ++i) {
    // Draw for every row so a row's value does not depend on which other
    // tokens happen to be pretrained.
    Vector random(dim);
    for (Index j = 0; j < dim; ++j) random(j) = uniform(rng);
    if (i == Vocabulary::kPad) continue;
    const auto it = pretrained.find(vocab.token(i));
    table.weights.row(i) = (it != pretrained.end() ? it->second : random).transpose();
  }
  return table;
}

LstmParams init_lstm(Index input_size, Index hidden_size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(-0.08, 0.08);
  auto draw = [&](Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = uniform(rng);
    return m;
  };
  LstmParams p;
  p.input_weights = draw(4 * hidden_size, input_size);
  p.recurrent_weights = draw(4 * hidden_size, hidden_size);
  p.bias = Vector::Zero(4 * hidden_size);
  p.bias.segment(kForgetGate * hidden_size, hidden_size).setOnes();
  return p;
}

LstmStepTrace lstm_step_traced(const LstmParams& params, const Vector& x, const Vector& h_prev,
                               const Vector& c_prev) {
  const Index m = params.hidden_size();
  if (params.input_weights.rows() != 4 * m || params.bias.size() != 4 * m) {
    throw DimensionError("lstm_step: inconsistent parameter shapes");
  }
  detail::require_same_length(x.size(), params.input_size(), "lstm_step input");
  detail::require_same_length(h_prev.size(), m, "lstm_step hidden state");
  detail::require_same_length(c_prev.size(), m, "lstm_step cell state");

  LstmStepTrace t;
  t.x = x;
  t.h_prev = h_prev;
  t.c_prev = c_prev;
  const Vector pre = params.input_weights * x + params.recurrent_weights * h_prev + params.bias;
  t.input = pre.segment(kInputGate * m, m).unaryExpr(&sigmoid).array();
  t.forget = pre.segment(kForgetGate * m, m).unaryExpr(&sigmoid).array();
  t.output = pre.segment(kOutputGate * m, m).unaryExpr(&sigmoid).array();
  t.candidate = pre.segment(kCandidate * m, m).array().tanh();
  t.c = (t.forget * c_prev.array() + t.input * t.candidate).matrix();
  t.h = (t.output * t.c.array().tanh()).matrix();
  return t;
}

LstmState lstm_step(const LstmParams& params, const Vector& x, const Vector& h_prev,
                    const Vector& c_prev) {
  LstmStepTrace t = lstm_step_traced(params, x, h_prev, c_prev);
  return {std::move(t.h), std::move(t.c)};
}

namespace {

void check_tokens(const EmbeddingTable& embeds, std::span<const int> tokens) {
  if (tokens.empty()) throw InsufficientData("encode_question: empty token sequence");
  for (const int t : tokens) {
    if (t < 0 || t >= embeds.rows()) {
      throw IndexError("token index " + std::to_string(t) + " outside embedding table of " +
                       std::to_string(embeds.rows()) + " rows");
    }
  }
}

}  // namespace

std::vector<LstmStepTrace> lstm_run(const EmbeddingTable& embeds, const LstmParams& params,
                                    std::span<const int> tokens, bool reverse) {
  check_tokens(embeds, tokens);
  const Index m = params.hidden_size();
  const auto n = tokens.size();
  std::vector<LstmStepTrace> steps;
  steps.reserve(n);
  Vector h = Vector::Zero(m);
  Vector c = Vector::Zero(m);
  for (std::size_t s = 0; s < n; ++s) {
    const int token = tokens[reverse ? n - 1 - s : s];
    steps.push_back(lstm_step_traced(params, embeds.weights.row(token).transpose(), h, c));
    h = steps.back().h;
    c = steps.back().c;
  }
  return steps;
}

Vector encode_question(const EmbeddingTable& embeds, const LstmParams& fwd, const LstmParams& bwd,
                       std::span<const int> tokens) {
  check_tokens(embeds, tokens);
  detail::require_same_length(fwd.hidden_size(), bwd.hidden_size(), "encode_question hidden");
  const Index m = fwd.hidden_size();
  Vector out(2 * m);
  out.head(m) = lstm_run(embeds, fwd, tokens, false).back().h;
  out.tail(m) = lstm_run(embeds, bwd, tokens, true).back().h;
  return out;
}

}  // namespace vibik
