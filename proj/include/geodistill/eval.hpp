#pragma once

// Correspondence and depth metrics, the exact-AP oracle, joint PCA export and
// baseline-versus-distilled comparison reports.

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "geodistill/losses.hpp"
#include "geodistill/model.hpp"
#include "geodistill/scene.hpp"

namespace geodistill::eval {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Json = nlohmann::json;

/// alpha -> fraction of correct transfers.
using PckTable = std::map<double, double>;

/// Nearest-neighbour (cosine) transfer of every view-1 keypoint onto the view-2
/// patches; correct when the chosen patch centre lies within alpha * max(H, W)
/// pixels of the true match. Ties pick the lowest patch index.
PckTable pck(const Matrix& feats_v1, const Matrix& feats_v2, const scene::CorrespondenceSet& correspondences,
             std::span<const double> alphas, const Eigen::MatrixX2d& patch_centers_v2, int image_height,
             int image_width);

struct OrdinalResult {
  double accuracy = 0.0;
  std::size_t num_pairs = 0;
  std::size_t num_correct = 0;
};

/// Fraction of `pairs` whose predicted score sign matches the label; a zero score counts as wrong.
OrdinalResult ordinal_accuracy(const Matrix& features, const model::DepthRankHead& head,
                               std::span<const losses::OrdinalPair> pairs);
/// Same, ranking pairs by a per-patch depth prediction: score(x, y) = depth(x) - depth(y).
OrdinalResult ordinal_accuracy(const Vector& predicted_depth, std::span<const losses::OrdinalPair> pairs);
/// Same, on pairs sampled from `view` with `seed` (budget 0 = all pairs).
OrdinalResult ordinal_accuracy(const scene::ViewBundle& view, const Matrix& features,
                               const model::DepthRankHead& head, int budget, std::uint64_t seed);

/// Exact AP: mean over queries of 1 / rank of the positive, where rank counts the
/// candidates scoring >= the positive (pessimistic ties). Row i of
/// `similarities` scores query i against every candidate; `positives[i]` is its
/// positive column. When `candidates` is given, only its nonzero entries (plus
/// the positive) take part in the ranking.
double brute_force_ap(const Matrix& similarities, std::span<const Eigen::Index> positives,
                      const Matrix* candidates = nullptr);

struct PcaResult {
  /// One (patches x components) block per input view.
  std::vector<Matrix> projections;
  Vector explained_variance_ratio;
  Matrix components;  // d x components, unit columns
  Vector mean;
  /// Components with non-negligible variance; the rest are zero-padded.
  int effective_components = 0;
  std::string warning;
};

/// Joint PCA over the rows of every view. Each component's largest-magnitude
/// loading is made positive.
PcaResult pca_features(std::span<const Matrix> views, int components = 3);

/// Columns view, patch_row, patch_col, pc1..pcK.
void write_pca_csv(std::ostream& out, const PcaResult& pca, const scene::PatchGrid& grid);

struct EvalOptions {
  std::vector<double> alphas{0.05, 0.10};
  std::uint64_t pair_seed = 7;
  int pair_budget = 1000;
  /// Temperature of the student cost distribution.
  double tau = 0.5;
  losses::LossConfig loss;
  /// Rank pairs with the absolute-depth head instead of the ranking head.
  bool abs_depth_readout = false;
};

struct SceneReport {
  std::uint64_t scene_seed = 0;
  PckTable pck;
  double ordinal_accuracy = 0.0;
  double cost_kl = 0.0;
  double inter_delta_mae = 0.0;
};

struct EvalReport {
  PckTable pck;
  double ordinal_accuracy = 0.0;
  double mean_cost_kl = 0.0;
  double inter_delta_mae = 0.0;
  std::vector<SceneReport> scenes;
};

/// Read-only evaluation of `params` on top of `model`'s frozen encoder.
EvalReport evaluate(const model::Model& model, const model::TrainableParameters& params,
                    std::span<const scene::SceneSample> scenes, const EvalOptions& options);

/// `params` with every adapter B set to zero, i.e. the frozen encoder.
model::TrainableParameters adapter_disabled(const model::TrainableParameters& params);

struct DeltaReport {
  PckTable pck;
  double ordinal_accuracy = 0.0;
  double mean_cost_kl = 0.0;
  double inter_delta_mae = 0.0;
  std::vector<SceneReport> scenes;
};

/// distilled - baseline for every metric. ContractError when the scene sets or alpha grids differ.
DeltaReport compare_runs(const EvalReport& baseline, const EvalReport& distilled);

Json to_json(const EvalReport& report);
Json to_json(const DeltaReport& report);

}  // namespace geodistill::eval
