#pragma once

// Kernelized image encoding: per-region descriptors are PCA-reduced, modelled
// with a diagonal GMM, aggregated into an improved Fisher vector, reduced again
// and normalized to a unit-length image embedding. The inner product of two
// embeddings is the image kernel.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vibiknet/numerics.hpp"

namespace vibik {

/// All descriptors of one image, one row per region x rotation.
struct RegionDescriptorSet {
  std::string image_id;
  Matrix descriptors;  // n x D

  friend bool operator==(const RegionDescriptorSet&, const RegionDescriptorSet&) = default;
};

/// Diagonal-covariance Gaussian mixture.
struct GmmModel {
  Vector weights;    // K, sums to one
  Matrix means;      // K x d
  Matrix variances;  // K x d, each >= the variance floor

  Index components() const { return weights.size(); }
  Index dim() const { return means.cols(); }

  friend bool operator==(const GmmModel&, const GmmModel&) = default;
};

struct GmmOptions {
  Index components = 128;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;  // stop once the mean log-likelihood improves by less than this
  double variance_floor = 1e-6;
};

/// Fits a GMM by EM, initialised with k-means++ seeding and one Lloyd pass.
/// When `trace` is non-null it receives the mean log-likelihood of the initial
/// model followed by one entry per EM iteration.
GmmModel gmm_fit(const Matrix& samples, const GmmOptions& options,
                 std::vector<double>* trace = nullptr);

/// log(pi_k) + log N(x_i; mu_k, diag var_k) for every row i and component k.
Matrix gmm_log_joint(const GmmModel& model, const Matrix& samples);

/// Mean per-sample log-likelihood.
double gmm_log_likelihood(const GmmModel& model, const Matrix& samples);

/// Component responsibilities for one sample, computed in log space.
Vector gmm_posteriors(const GmmModel& model, const Vector& x);

/// Posterior matrix (N x K) for a batch of samples.
Matrix gmm_posteriors_rows(const GmmModel& model, const Matrix& samples);

/// Draws `count` i.i.d. samples from the mixture.
Matrix gmm_sample(const GmmModel& model, Index count, std::mt19937_64& rng);

/// Improved Fisher vector: for each component k, the normalized gradient with
/// respect to the mean (d values) followed by the gradient with respect to the
/// standard deviation (d values). Length 2Kd. Descriptors are accumulated in a
/// canonical order so the result is exactly independent of row order.
Vector fisher_vector(const GmmModel& model, const Matrix& descriptors);

/// Signed square root followed by L2 normalization. A zero vector stays zero.
Vector normalize_fv(const Vector& fv);

struct EncoderConfig {
  Index pca_dim = 128;
  Index components = 128;
  Index embedding_dim = 1024;
  std::uint64_t seed = 0;
  int gmm_max_iters = 100;
  double gmm_tol = 1e-6;
  bool whiten_pre = false;
  bool whiten_post = false;
  double pca_epsilon = 1e-9;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct FisherEncoder {
  EncoderConfig config;
  PcaModel<double> pre_pca;
  GmmModel gmm;
  PcaModel<double> post_pca;

  Index descriptor_dim() const { return pre_pca.input_dim(); }
  Index fisher_dim() const { return 2 * gmm.components() * gmm.dim(); }
  Index embedding_dim() const { return post_pca.output_dim(); }

  friend bool operator==(const FisherEncoder&, const FisherEncoder&) = default;
};

struct ImageEmbedding {
  std::string image_id;
  Vector phi;  // unit L2 norm
};

FisherEncoder fit_encoder(const std::vector<RegionDescriptorSet>& training_sets,
                          const EncoderConfig& config);

/// Normalized Fisher vector of one image before the output projection.
Vector encode_fisher(const FisherEncoder& encoder, const RegionDescriptorSet& regions);

ImageEmbedding encode_image(const FisherEncoder& encoder, const RegionDescriptorSet& regions);

double kernel_similarity(const ImageEmbedding& a, const ImageEmbedding& b);

/// Copy of `rows` sorted lexicographically; fixes the accumulation order.
Matrix canonical_row_order(const Matrix& rows);

}  // namespace vibik
