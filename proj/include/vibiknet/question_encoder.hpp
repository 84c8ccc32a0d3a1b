#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vibiknet/numerics.hpp"

namespace vibik {

/// Lowercases, drops punctuation and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

/// Question-token vocabulary. Index 0 is padding, index 1 the unknown token.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocabulary();
  /// Builds from an explicit ordered token list that starts with the reserved
  /// entries. Duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  /// Index of `token`, or kUnk if absent.
  int lookup(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int index) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// One index per distinct token, most frequent first, ties lexicographic.
Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus);

struct EmbeddingTable {
  Matrix weights;  // |V| x R, row 0 is padding and always zero
  bool trainable = true;

  Index dim() const { return weights.cols(); }
  Index rows() const { return weights.rows(); }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

using PretrainedTable = std::unordered_map<std::string, Vector>;

/// Reads the plain-text "token v1 ... vR" format. All rows must share one
/// dimension; blank lines are skipped.
PretrainedTable read_pretrained(std::istream& in);
PretrainedTable load_pretrained(const std::string& path);

/// Rows come from `pretrained` when the token is present, otherwise uniform in
/// [-0.1, 0.1] from a generator seeded with `seed`.
EmbeddingTable init_embeddings(const Vocabulary& vocab, const PretrainedTable& pretrained,
                               Index dim, std::uint64_t seed);

/// Single-layer LSTM. Gate blocks are stacked in the order input, forget,
/// output, candidate along the rows of every parameter.
struct LstmParams {
  Matrix input_weights;      // 4m x R
  Matrix recurrent_weights;  // 4m x m
  Vector bias;               // 4m

  Index hidden_size() const { return recurrent_weights.cols(); }
  Index input_size() const { return input_weights.cols(); }

  friend bool operator==(const LstmParams&, const LstmParams&) = default;
};

enum LstmGate : Index { kInputGate = 0, kForgetGate = 1, kOutputGate = 2, kCandidate = 3 };

/// Uniform [-0.08, 0.08] weights, zero biases except the forget gate at 1.
LstmParams init_lstm(Index input_size, Index hidden_size, std::mt19937_64& rng);

struct LstmState {
  Vector h;
  Vector c;
};

LstmState lstm_step(const LstmParams& params, const Vector& x, const Vector& h_prev,
                    const Vector& c_prev);

/// One step with every intermediate kept for backpropagation through time.
struct LstmStepTrace {
  Vector x, h_prev, c_prev;
  Eigen::ArrayXd input, forget, output, candidate;
  Vector c, h;
};

LstmStepTrace lstm_step_traced(const LstmParams& params, const Vector& x, const Vector& h_prev,
                               const Vector& c_prev);

/// Runs one direction over `tokens` from a zero state, keeping all step traces.
std::vector<LstmStepTrace> lstm_run(const EmbeddingTable& embeds, const LstmParams& params,
                                    std::span<const int> tokens, bool reverse);

/// Concatenation of the last forward hidden state (left-to-right pass) and the
/// last backward hidden state (right-to-left pass), length 2m.
Vector encode_question(const EmbeddingTable& embeds, const LstmParams& fwd, const LstmParams& bwd,
                       std::span<const int> tokens);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace vibik
