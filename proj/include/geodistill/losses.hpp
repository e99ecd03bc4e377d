#pragma once

// Distillation objective: sparse matching (SmoothAP), relative depth
// (intra-view ordinal + inter-view bounded delta), dense cost-volume
// alignment, the absolute-depth ablation, and their weighted sum.

#include <Eigen/Core>

#include <array>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geodistill/autodiff.hpp"
#include "geodistill/model.hpp"
#include "geodistill/scene.hpp"

namespace geodistill::losses {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct LossWeights {
  double match = 1.0;
  double depth = 1.0;
  double cost = 1.0;

  void validate() const;
};

/// Linear annealing tau(step) = start + (end - start) * min(step / total_steps, 1).
struct TemperatureSchedule {
  double tau_start = 1.0;
  double tau_end = 0.5;
  long total_steps = 1;

  double at(long step) const;
  void validate() const;
};

/// Negatives of query i: other correspondence targets farther than
/// `exclusion_radius` pixels from i's true match, optionally capped to the
/// nearest `max_negatives`.
struct NegativePolicy {
  /// Pixels; one patch width when unset.
  std::optional<double> exclusion_radius;
  std::optional<int> max_negatives;
};

/// K x K 0/1 matrix; entry (i, j) marks j as a negative of query i.
/// `default_radius` applies when the policy leaves the radius unset.
Matrix negative_mask(const Eigen::MatrixX2d& target_pixels, const NegativePolicy& policy,
                     double default_radius = 0.0);

struct SmoothApOptions {
  /// sigma(x / temperature); values << 1 sharpen toward a step function.
  double temperature = 1.0;
  /// L2-normalize features before the similarity terms.
  bool normalize = false;
};

/// Per-query terms (1 + s(D_ii)) / (1 + s(D_ii) + sum_{j in N(i)} s(D_ij)) with
/// D_ij = q_i . t_j - q_i . q_i. Rows of `query` and `target` are index-aligned matches.
ad::Var smooth_ap_terms(ad::Var query, ad::Var target, const Matrix& negatives, const SmoothApOptions& options = {});
/// Mean of smooth_ap_terms, in (0, 1]. Throws EmptyInputError for zero matches.
ad::Var smooth_ap(ad::Var query, ad::Var target, const Matrix& negatives, const SmoothApOptions& options = {});

/// 1 - (SmoothAP(v1 -> v2) + SmoothAP(v2 -> v1)) / 2 over index-aligned match features.
ad::Var match_loss(ad::Var feats_v1, ad::Var feats_v2, const Eigen::MatrixX2d& pixels_v1,
                   const Eigen::MatrixX2d& pixels_v2, const NegativePolicy& policy,
                   const SmoothApOptions& options = {});

/// +1 when d_x > d_y, -1 when d_x < d_y; TieError on equality.
int sign_label(double d_x, double d_y);

/// Depth differences below this are treated as ties and never sampled.
inline constexpr double kDepthTieTolerance = 1e-9;

struct OrdinalPair {
  Eigen::Index x = 0;
  Eigen::Index y = 0;
  int label = 0;  // sign(d_x - d_y)
};

/// Ordered, non-tied pairs among `patches` (visible patches when empty).
/// Returns all pairs when there are at most `budget`, else a uniform sample without replacement.
std::vector<OrdinalPair> sample_ordinal_pairs(const scene::ViewBundle& view, int budget, std::mt19937_64& rng,
                                              std::span<const int> patches = {});

/// Mean of log(1 + exp(-s_xy * score_xy)); `features` are the view's final features.
ad::Var intra_depth_loss(const model::BoundParameters& bound, ad::Var features, std::span<const OrdinalPair> pairs);
/// Same loss from precomputed scores (M x 1) and labels.
ad::Var ordinal_logistic_loss(ad::Var scores, std::span<const int> labels);

/// tanh((d_v1 - d_v2) / scale), elementwise.
Vector inter_delta_targets(const Vector& depth_v1, const Vector& depth_v2, double scale = 1.0);
/// Mean |predicted - target|.
ad::Var inter_depth_loss(ad::Var predicted, const Vector& targets);

/// Cosine-similarity matrix between the rows of h_v1 and h_v2.
ad::Var cost_volume(ad::Var h_v1, ad::Var h_v2);
/// Row softmax of cost / tau with masked rows zeroed.
ad::Var cost_distribution(ad::Var cost, double tau, const std::vector<bool>& row_mask);

enum class Divergence { ForwardKl, JensenShannon };

/// Divergence of `student` rows from `teacher` rows, averaged over the teacher's active rows.
ad::Var row_divergence(const scene::CostDistribution& teacher, ad::Var student, const std::vector<bool>& student_mask,
                       Divergence kind = Divergence::ForwardKl);
/// (D(T12 || P12) + D(T21 || P21)) / 2. ContractError when masks disagree.
ad::Var cost_alignment_loss(const scene::CostDistribution& teacher_12, const scene::CostDistribution& teacher_21,
                            ad::Var student_12, ad::Var student_21, const std::vector<bool>& mask_12,
                            const std::vector<bool>& mask_21, Divergence kind = Divergence::ForwardKl);

/// mean |pred - s * teacher| with s = max(pred) / max(teacher).
ad::Var abs_depth_loss(ad::Var predicted, const Vector& teacher_depths);

// ---------------------------------------------------------------------------
// Full objective on one two-view sample

struct LossConfig {
  LossWeights weights;
  NegativePolicy negatives;
  int pair_budget = 256;
  /// Teacher bandwidth in pixels; one patch width when unset.
  std::optional<double> teacher_bandwidth;
  bool normalize_match_features = false;
  /// SmoothAP sigmoid temperature.
  double match_temperature = 1.0;
  Divergence divergence = Divergence::ForwardKl;
  /// Replace the relative depth terms by the absolute-depth loss.
  bool abs_depth = false;
};

/// Deterministic supervision derived from one scene.
struct PairTargets {
  scene::CorrespondenceSet correspondences;
  Matrix negatives_12;  // queries in view 1, targets in view 2
  Matrix negatives_21;
  scene::CostDistribution teacher_12;
  scene::CostDistribution teacher_21;
  Vector inter_targets_12;
  Vector inter_targets_21;
  /// Median visible depth across both views; divides depths inside the inter-view tanh.
  double depth_scale = 1.0;
};

PairTargets build_targets(const scene::SceneSample& sample, const LossConfig& config);

/// One training example: a scene, its targets and this step's sampled ordinal pairs.
struct PreparedPair {
  const scene::SceneSample* sample = nullptr;
  const PairTargets* targets = nullptr;
  std::array<std::vector<OrdinalPair>, 2> ordinal_pairs;
};

PreparedPair prepare_pair(const scene::SceneSample& sample, const PairTargets& targets, const LossConfig& config,
                          std::mt19937_64& rng);

/// Component values before weighting. Unset components were not evaluated.
struct LossDiagnostics {
  std::optional<double> match;
  std::optional<double> depth_intra;
  std::optional<double> depth_inter;
  std::optional<double> abs_depth;
  std::optional<double> cost;
  double total = 0.0;
  /// Views whose intra term was skipped for lack of usable pairs.
  int skipped_intra_views = 0;

  std::optional<double> depth() const;
};

struct LossOutput {
  ad::Var total;
  LossDiagnostics diagnostics;
};

/// lambda_match L_match + lambda_depth L_depth + lambda_cost L_cost. Branches
/// with zero weight are not evaluated, so they contribute no gradient.
LossOutput total_loss(ad::Tape& tape, const model::Model& model, const model::BoundParameters& bound,
                      const PreparedPair& pair, const LossConfig& config, double tau);

}  // namespace geodistill::losses
