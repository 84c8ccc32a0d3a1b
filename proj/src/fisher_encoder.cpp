#include "vibiknet/fisher_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace vibik {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

// Row-wise log-sum-exp with max subtraction.
Vector logsumexp_rows(const Matrix& m) {
  Vector out(m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    const double peak = m.row(i).maxCoeff();
    out(i) = peak + std::log((m.row(i).array() - peak).exp().sum());
  }
  return out;
}

double squared_distance(const Matrix& samples, Index row, const Vector& center) {
  return (samples.row(row).transpose() - center).squaredNorm();
}

// k-means++ seeding followed by a single Lloyd pass. Returns the centers and
// the hard assignment of every sample.
void kmeans_init(const Matrix& samples, Index k, std::mt19937_64& rng, Matrix& centers,
                 std::vector<Index>& assignment) {
  const Index n = samples.rows();
  centers.resize(k, samples.cols());
  std::uniform_int_distribution<Index> pick_any(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Vector nearest = Vector::Constant(n, std::numeric_limits<double>::infinity());
  centers.row(0) = samples.row(pick_any(rng));
  for (Index c = 1; c < k; ++c) {
    for (Index i = 0; i < n; ++i) {
      nearest(i) = std::min(nearest(i), squared_distance(samples, i, centers.row(c - 1).transpose()));
    }
    const double total = nearest.sum();
    Index chosen = 0;
    if (total > 0.0) {
      double target = unit(rng) * total;
      chosen = n - 1;
      for (Index i = 0; i < n; ++i) {
        target -= nearest(i);
        if (target < 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick_any(rng);
    }
    centers.row(c) = samples.row(chosen);
  }

  assignment.assign(n, 0);
  for (Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Index c = 0; c < k; ++c) {
      const double d = squared_distance(samples, i, centers.row(c).transpose());
      if (d < best) {
        best = d;
        assignment[i] = c;
      }
    }
  }
  Matrix sums = Matrix::Zero(k, samples.cols());
  std::vector<Index> counts(k, 0);
  for (Index i = 0; i < n; ++i) {
    sums.row(assignment[i]) += samples.row(i);
    ++counts[assignment[i]];
  }
  for (Index c = 0; c < k; ++c) {
    if (counts[c] > 0) centers.row(c) = sums.row(c) / static_cast<double>(counts[c]);
  }
}

void check_dim(const GmmModel& model, Index dim, const char* what) {
  if (dim != model.dim()) {
    throw DimensionError(std::string(what) + ": descriptor dim " + std::to_string(dim) +
                         " vs model dim " + std::to_string(model.dim()));
  }
}

}  // namespace

Matrix gmm_log_joint(const GmmModel& model, const Matrix& samples) {
  check_dim(model, samples.cols(), "gmm_log_joint");
  const Index k_count = model.components();
  Matrix out(samples.rows(), k_count);
  for (Index k = 0; k < k_count; ++k) {
    const Eigen::ArrayXd var = model.variances.row(k).transpose().array();
    const double constant =
        std::log(model.weights(k)) - 0.5 * (var.log().sum() + kLog2Pi * static_cast<double>(var.size()));
    const Eigen::ArrayXXd diff = (samples.rowwise() - model.means.row(k)).array();
    out.col(k) = ((diff.square().rowwise() / var.transpose()).rowwise().sum() * -0.5 + constant).matrix();
  }
  return out;
}

double gmm_log_likelihood(const GmmModel& model, const Matrix& samples) {
  return logsumexp_rows(gmm_log_joint(model, samples)).mean();
}

Matrix gmm_posteriors_rows(const GmmModel& model, const Matrix& samples) {
  Matrix joint = gmm_log_joint(model, samples);
  for (Index i = 0; i < joint.rows(); ++i) {
    joint.row(i) = (joint.row(i).array() - joint.row(i).maxCoeff()).exp();
    joint.row(i) /= joint.row(i).sum();
  }
  return joint;
}

Vector gmm_posteriors(const GmmModel& model, const Vector& x) {
  check_dim(model, x.size(), "gmm_posteriors");
  return gmm_posteriors_rows(model, x.transpose()).row(0).transpose();
}

GmmModel gmm_fit(const Matrix& samples, const GmmOptions& options, std::vector<double>* trace) {
  const Index n = samples.rows();
  const Index k_count = options.components;
  const Index dim = samples.cols();
  if (k_count < 1) throw InvalidValue("gmm_fit: components must be positive");
  if (dim < 1) throw DimensionError("gmm_fit: descriptor dimension must be positive");
  if (n < k_count) {
    throw InsufficientData("gmm_fit: " + std::to_string(n) + " samples for " +
                           std::to_string(k_count) + " components");
  }
  if (!samples.allFinite()) throw InvalidValue("gmm_fit: non-finite sample value");

  std::mt19937_64 rng(options.seed);
  Matrix centers;
  std::vector<Index> assignment;
  kmeans_init(samples, k_count, rng, centers, assignment);

  const Eigen::RowVectorXd global_var =
      ((samples.rowwise() - samples.colwise().mean()).array().square().colwise().sum() /
       static_cast<double>(n))
          .max(options.variance_floor);

  GmmModel model;
  model.means = centers;
  model.weights = Vector::Zero(k_count);
  model.variances = Matrix::Zero(k_count, dim);
  {
    Matrix sq = Matrix::Zero(k_count, dim);
    for (Index i = 0; i < n; ++i) {
      const Index c = assignment[i];
      model.weights(c) += 1.0;
      sq.row(c) += (samples.row(i) - centers.row(c)).array().square().matrix();
    }
    for (Index c = 0; c < k_count; ++c) {
      if (model.weights(c) >= 2.0) {
        model.variances.row(c) =
            (sq.row(c).array() / model.weights(c)).max(options.variance_floor).matrix();
      } else {
        model.variances.row(c) = global_var;
      }
      model.weights(c) = std::max(model.weights(c), 1.0);
    }
    model.weights /= model.weights.sum();
  }

  auto e_step = [&](Matrix& resp, int iteration) {
    resp = gmm_log_joint(model, samples);
    const Vector lse = logsumexp_rows(resp);
    const double ll = lse.mean();
    if (!std::isfinite(ll)) throw NumericalFailure("non-finite log-likelihood in EM", iteration);
    resp = (resp.colwise() - lse).array().exp().matrix();
    return ll;
  };

  Matrix resp;
  double ll = e_step(resp, 0);
  if (trace) trace->assign(1, ll);

  for (int it = 1; it <= options.max_iters; ++it) {
    const Vector nk = resp.colwise().sum().transpose();
    for (Index k = 0; k < k_count; ++k) {
      const double mass = nk(k);
      if (mass <= std::numeric_limits<double>::min()) continue;  // collapsed: keep previous
      model.means.row(k) = (resp.col(k).transpose() * samples) / mass;
      const Eigen::ArrayXXd diff = (samples.rowwise() - model.means.row(k)).array();
      const Eigen::RowVectorXd var = (resp.col(k).transpose() * diff.square().matrix()) / mass;
      model.variances.row(k) = var.array().max(options.variance_floor).matrix();
    }
    model.weights = nk.array().max(1e-12 * static_cast<double>(n)).matrix();
    model.weights /= model.weights.sum();
    if (!model.means.allFinite() || !model.variances.allFinite()) {
      throw NumericalFailure("non-finite parameters after M-step", it);
    }

    const double next = e_step(resp, it);
    if (trace) trace->push_back(next);
    const double improvement = next - ll;
    ll = next;
    if (improvement < options.tol) break;
  }
  return model;
}

Matrix gmm_sample(const GmmModel& model, Index count, std::mt19937_64& rng) {
  std::discrete_distribution<Index> pick(model.weights.data(),
                                         model.weights.data() + model.weights.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(count, model.dim());
  for (Index i = 0; i < count; ++i) {
    const Index k = pick(rng);
    for (Index j = 0; j < model.dim(); ++j) {
      out(i, j) = model.means(k, j) + std::sqrt(model.variances(k, j)) * normal(rng);
    }
  }
  return out;
}

Matrix canonical_row_order(const Matrix& rows) {
  std::vector<Index> order(rows.rows());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    for (Index j = 0; j < rows.cols(); ++j) {
      if (rows(a, j) != rows(b, j)) return rows(a, j) < rows(b, j);
    }
    return false;
  });
  Matrix out(rows.rows(), rows.cols());
  for (Index i = 0; i < rows.rows(); ++i) out.row(i) = rows.row(order[i]);
  return out;
}

Vector fisher_vector(const GmmModel& model, const Matrix& descriptors) {
  if (descriptors.rows() == 0) throw InsufficientData("fisher_vector of an empty descriptor set");
  check_dim(model, descriptors.cols(), "fisher_vector");

  const Matrix x = canonical_row_order(descriptors);
  const Matrix gamma = gmm_posteriors_rows(model, x);
  const double t = static_cast<double>(x.rows());
  const Index dim = model.dim();

  Vector fv(2 * model.components() * dim);
  for (Index k = 0; k < model.components(); ++k) {
    const Eigen::RowVectorXd sigma = model.variances.row(k).array().sqrt();
    const Eigen::ArrayXXd z = ((x.rowwise() - model.means.row(k)).array().rowwise() / sigma.array());
    const Vector g_mean = (gamma.col(k).transpose() * z.matrix()).transpose();
    const Vector g_sigma = (gamma.col(k).transpose() * (z.square() - 1.0).matrix()).transpose();
    fv.segment(2 * k * dim, dim) = g_mean / (t * std::sqrt(model.weights(k)));
    fv.segment((2 * k + 1) * dim, dim) = g_sigma / (t * std::sqrt(2.0 * model.weights(k)));
  }
  return fv;
}

Vector normalize_fv(const Vector& fv) {
  Vector out = fv.unaryExpr([](double z) { return std::copysign(std::sqrt(std::abs(z)), z); });
  const double norm = out.norm();
  if (norm > 0.0) out /= norm;
  return out;
}

FisherEncoder fit_encoder(const std::vector<RegionDescriptorSet>& training_sets,
                          const EncoderConfig& config) {
  if (training_sets.empty()) throw InsufficientData("fit_encoder: no training images");
  const Index dim = training_sets.front().descriptors.cols();
  Index total = 0;
  for (const auto& set : training_sets) {
    if (set.descriptors.rows() == 0) {
      throw InsufficientData("fit_encoder: image '" + set.image_id + "' has no descriptors");
    }
    if (set.descriptors.cols() != dim) {
      throw DimensionError("fit_encoder: image '" + set.image_id + "' has descriptor dim " +
                           std::to_string(set.descriptors.cols()) + ", expected " +
                           std::to_string(dim));
    }
    total += set.descriptors.rows();
  }

  Matrix pooled(total, dim);
  Index offset = 0;
  for (const auto& set : training_sets) {
    pooled.middleRows(offset, set.descriptors.rows()) = set.descriptors;
    offset += set.descriptors.rows();
  }

  FisherEncoder encoder;
  encoder.config = config;
  encoder.pre_pca = pca_fit(pooled, config.pca_dim, config.pca_epsilon, config.whiten_pre);

  GmmOptions gmm_options;
  gmm_options.components = config.components;
  gmm_options.seed = config.seed;
  gmm_options.max_iters = config.gmm_max_iters;
  gmm_options.tol = config.gmm_tol;
  encoder.gmm = gmm_fit(pca_transform_rows(encoder.pre_pca, pooled), gmm_options);

  // The output projection is fitted on the same normalized Fisher vectors that
  // encode_image feeds into it.
  Matrix fisher(static_cast<Index>(training_sets.size()), encoder.fisher_dim());
  for (std::size_t i = 0; i < training_sets.size(); ++i) {
    fisher.row(static_cast<Index>(i)) = encode_fisher(encoder, training_sets[i]).transpose();
  }
  encoder.post_pca = pca_fit(fisher, config.embedding_dim, config.pca_epsilon, config.whiten_post);
  return encoder;
}

Vector encode_fisher(const FisherEncoder& encoder, const RegionDescriptorSet& regions) {
  if (regions.descriptors.rows() == 0) {
    throw InsufficientData("image '" + regions.image_id + "' has no descriptors");
  }
  if (regions.descriptors.cols() != encoder.descriptor_dim()) {
    throw DimensionError("image '" + regions.image_id + "': descriptor dim " +
                         std::to_string(regions.descriptors.cols()) + ", encoder expects " +
                         std::to_string(encoder.descriptor_dim()));
  }
  const Matrix reduced =
      pca_transform_rows(encoder.pre_pca, canonical_row_order(regions.descriptors));
  return normalize_fv(fisher_vector(encoder.gmm, reduced));
}

ImageEmbedding encode_image(const FisherEncoder& encoder, const RegionDescriptorSet& regions) {
  ImageEmbedding out;
  out.image_id = regions.image_id;
  out.phi = pca_transform(encoder.post_pca, encode_fisher(encoder, regions));
  const double norm = out.phi.norm();
  if (norm > 0.0) out.phi /= norm;
  return out;
}

double kernel_similarity(const ImageEmbedding& a, const ImageEmbedding& b) {
  detail::require_same_length(a.phi.size(), b.phi.size(), "kernel_similarity");
  return a.phi.dot(b.phi);
}

}  // namespace vibik
