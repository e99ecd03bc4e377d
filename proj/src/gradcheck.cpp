#include "geodistill/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "geodistill/autodiff.hpp"
#include "geodistill/errors.hpp"
#include "geodistill/model.hpp"
#include "geodistill/scene.hpp"

namespace geodistill::gradcheck {

namespace {

constexpr std::array<std::pair<LossFamily, std::string_view>, 6> kNames{{{LossFamily::Match, "match"},
                                                                          {LossFamily::Intra, "intra"},
                                                                          {LossFamily::Inter, "inter"},
                                                                          {LossFamily::Cost, "cost"},
                                                                          {LossFamily::Abs, "abs"},
                                                                          {LossFamily::Total, "total"}}};

struct Instance {
  model::Model model;
  scene::SceneSample sample;
  losses::PairTargets targets;
  std::vector<Eigen::Index> kp_v1;
  std::vector<Eigen::Index> kp_v2;
  Eigen::MatrixX2d pixels_v1;
  Eigen::MatrixX2d pixels_v2;
  Eigen::VectorXd inter_12;
  Eigen::VectorXd inter_21;
  std::vector<int> visible_subset;
  std::vector<losses::OrdinalPair> ordinal;
  losses::PreparedPair prepared;
  double tau = 1.0;
  int grid = 0;
  int dim = 0;
};

constexpr double kKinkMargin = 1e-3;

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Instance make_instance(std::uint64_t seed, int keypoints, const losses::LossConfig& loss) {
  std::mt19937_64 rng(seed);
  Instance in;
  in.dim = uniform_int(rng, 8, 32);
  in.grid = uniform_int(rng, 4, 8);
  const int k_target = keypoints > 0 ? keypoints : uniform_int(rng, 3, 16);

  scene::SceneConfig sc;
  sc.descriptor_dim = in.dim;
  sc.grid_rows = sc.grid_cols = in.grid;
  sc.image_height = sc.image_width = 8 * in.grid;
  sc.num_points = 2 * in.grid * in.grid;
  sc.nuisance_rank = std::min(4, in.dim / 4);
  sc.seed = rng();
  in.sample = scene::make_sample(sc);

  model::ModelConfig mc;
  mc.input_dim = in.dim;
  mc.hidden_dim = in.dim;
  mc.seed = rng();
  in.model = model::Model::initialize(mc);
  // Random non-zero adapters and heads, scaled by fan-in so no score saturates;
  // saturated terms leave gradients at round-off level.
  for (Eigen::MatrixXd* p : model::parameter_list(in.model.params)) {
    std::normal_distribution<double> gauss(0.0, 0.5 / std::sqrt(static_cast<double>(p->rows())));
    for (Eigen::Index i = 0; i < p->size(); ++i) p->data()[i] = gauss(rng);
  }

  in.targets = losses::build_targets(in.sample, loss);
  const auto& pairs = in.targets.correspondences.pairs;
  if (pairs.size() < 2) throw ContractError("gradcheck: degenerate instance without correspondences");
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k_target)));
  std::sort(idx.begin(), idx.end());
  in.pixels_v1.resize(static_cast<Eigen::Index>(idx.size()), 2);
  in.pixels_v2.resize(static_cast<Eigen::Index>(idx.size()), 2);
  Eigen::VectorXd d1(static_cast<Eigen::Index>(idx.size()));
  Eigen::VectorXd d2(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const scene::Correspondence& c = pairs[idx[i]];
    const auto r = static_cast<Eigen::Index>(i);
    in.kp_v1.push_back(c.patch_v1);
    in.kp_v2.push_back(c.patch_v2);
    in.pixels_v1.row(r) = c.pixel_v1.transpose();
    in.pixels_v2.row(r) = c.pixel_v2.transpose();
    d1(r) = in.sample.views[0].depth(c.patch_v1);
    d2(r) = in.sample.views[1].depth(c.patch_v2);
    in.visible_subset.push_back(c.patch_v1);
  }
  in.inter_12 = losses::inter_delta_targets(d1, d2, in.targets.depth_scale);
  in.inter_21 = losses::inter_delta_targets(d2, d1, in.targets.depth_scale);
  in.ordinal = losses::sample_ordinal_pairs(in.sample.views[0], 0, rng, in.visible_subset);
  // Callers re-point the prepared pair at the instance once it has its final address.
  in.prepared = losses::prepare_pair(in.sample, in.targets, loss, rng);
  in.tau = std::uniform_real_distribution<double>(0.5, 1.0)(rng);
  return in;
}

ad::Var family_loss(LossFamily family, ad::Tape& tape, const Instance& in, const model::BoundParameters& bound,
                    const losses::LossConfig& loss) {
  if (family == LossFamily::Total) {
    return losses::total_loss(tape, in.model, bound, in.prepared, loss, in.tau).total;
  }
  const model::EncodedView e1 = model::encode(tape, in.model, bound, in.sample.views[0].descriptors, 0);
  const model::EncodedView e2 = model::encode(tape, in.model, bound, in.sample.views[1].descriptors, 1);
  ad::Var f1 = e1.final.features;
  ad::Var f2 = e2.final.features;
  switch (family) {
    case LossFamily::Match: {
      losses::NegativePolicy policy = loss.negatives;
      if (!policy.exclusion_radius) policy.exclusion_radius = in.sample.views[1].grid.patch_width();
      const losses::SmoothApOptions opts{loss.match_temperature, loss.normalize_match_features};
      return losses::match_loss(ad::gather_rows(f1, in.kp_v1), ad::gather_rows(f2, in.kp_v2), in.pixels_v1,
                                in.pixels_v2, policy, opts);
    }
    case LossFamily::Intra:
      return losses::intra_depth_loss(bound, f1, in.ordinal);
    case LossFamily::Inter: {
      ad::Var q1 = ad::gather_rows(f1, in.kp_v1);
      ad::Var q2 = ad::gather_rows(f2, in.kp_v2);
      return ad::add(losses::inter_depth_loss(model::inter_delta(bound, q1, q2), in.inter_12),
                     losses::inter_depth_loss(model::inter_delta(bound, q2, q1), in.inter_21));
    }
    case LossFamily::Cost: {
      ad::Var c12 = losses::cost_volume(e1.intermediate.features, e2.intermediate.features);
      const auto& t12 = in.targets.teacher_12;
      const auto& t21 = in.targets.teacher_21;
      return losses::cost_alignment_loss(t12, t21, losses::cost_distribution(c12, in.tau, t12.row_mask),
                                         losses::cost_distribution(ad::transpose(c12), in.tau, t21.row_mask),
                                         t12.row_mask, t21.row_mask, loss.divergence);
    }
    case LossFamily::Abs: {
      Eigen::VectorXd gt(static_cast<Eigen::Index>(in.kp_v1.size()));
      for (std::size_t i = 0; i < in.kp_v1.size(); ++i) {
        gt(static_cast<Eigen::Index>(i)) = in.sample.views[0].depth(in.kp_v1[i]);
      }
      return losses::abs_depth_loss(ad::gather_rows(model::abs_depth_prediction(bound, f1), in.kp_v1), gt);
    }
    case LossFamily::Total:
      break;
  }
  throw ContractError("gradcheck: unknown loss family");
}

// Smallest |predicted - target| over every inter-view L1 residual the family touches.
double inter_kink_margin(const Instance& in) {
  ad::Tape tape;
  const model::BoundParameters bound = model::bind(tape, in.model.params, false);
  ad::Var f1 = model::encode(tape, in.model, bound, in.sample.views[0].descriptors, 0).final.features;
  ad::Var f2 = model::encode(tape, in.model, bound, in.sample.views[1].descriptors, 1).final.features;
  double margin = std::numeric_limits<double>::infinity();
  const auto probe = [&](const std::vector<Eigen::Index>& a, const std::vector<Eigen::Index>& b,
                         const Eigen::VectorXd& t12, const Eigen::VectorXd& t21) {
    ad::Var q1 = ad::gather_rows(f1, a);
    ad::Var q2 = ad::gather_rows(f2, b);
    margin = std::min(margin, (model::inter_delta(bound, q1, q2).value().col(0) - t12).cwiseAbs().minCoeff());
    margin = std::min(margin, (model::inter_delta(bound, q2, q1).value().col(0) - t21).cwiseAbs().minCoeff());
  };
  probe(in.kp_v1, in.kp_v2, in.inter_12, in.inter_21);
  std::vector<Eigen::Index> all1, all2;
  for (const scene::Correspondence& c : in.targets.correspondences.pairs) {
    all1.push_back(c.patch_v1);
    all2.push_back(c.patch_v2);
  }
  probe(all1, all2, in.targets.inter_targets_12, in.targets.inter_targets_21);
  return margin;
}

}  // namespace

std::string_view family_name(LossFamily family) {
  for (const auto& [f, name] : kNames) {
    if (f == family) return name;
  }
  return "unknown";
}

std::optional<LossFamily> parse_family(std::string_view name) {
  for (const auto& [f, n] : kNames) {
    if (n == name) return f;
  }
  return std::nullopt;
}

std::vector<LossFamily> all_families() {
  std::vector<LossFamily> out;
  for (const auto& [f, name] : kNames) out.push_back(f);
  return out;
}

std::vector<Row> run(const Options& options) {
  if (options.keypoints != 0 && (options.keypoints < 2 || options.keypoints > 64)) {
    throw ParameterError("gradcheck: keypoints must lie in [2, 64]");
  }
  std::vector<Row> rows;
  for (LossFamily family : options.families) {
    const auto stream = static_cast<std::uint64_t>(family);
    // Central differences straddling the L1 kink of the inter term are meaningless; redraw.
    const bool has_l1 = family == LossFamily::Inter || family == LossFamily::Total;
    std::uint64_t seed = scene::derive_seed(options.seed, stream);
    Instance in = make_instance(seed, options.keypoints, options.loss);
    for (int attempt = 1; has_l1 && attempt < 64 && inter_kink_margin(in) < kKinkMargin; ++attempt) {
      in = make_instance(scene::derive_seed(seed, static_cast<std::uint64_t>(attempt)), options.keypoints, options.loss);
    }
    in.prepared.sample = &in.sample;
    in.prepared.targets = &in.targets;
    losses::LossConfig loss = options.loss;
    loss.abs_depth = false;

    const ad::ScalarFunction f = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
      model::TrainableParameters params = in.model.params;
      model::unflatten(params, theta);
      ad::Tape tape;
      const model::BoundParameters bound = model::bind(tape, params);
      ad::Var l = family_loss(family, tape, in, bound, loss);
      if (grad != nullptr) {
        tape.backward(l);
        *grad = bound.gradient();
      }
      return l.scalar();
    };
    const Eigen::VectorXd theta = model::flatten(in.model.params);
    const ad::GradCheckResult result = ad::finite_diff_check(f, theta, options.step);

    Row row;
    row.family = family;
    row.feature_dim = in.dim;
    row.grid = in.grid;
    row.keypoints = static_cast<int>(in.kp_v1.size());
    row.num_params = static_cast<std::size_t>(theta.size());
    row.loss_value = f(theta, nullptr);
    row.max_relative_error = result.max_relative_error;
    row.worst_index = static_cast<long>(result.worst_index);
    row.analytic = result.analytic;
    row.numeric = result.numeric;
    {
      const auto names = model::parameter_names(in.model.params);
      const auto list = model::parameter_list(in.model.params);
      Eigen::Index offset = 0;
      for (std::size_t k = 0; k < list.size(); ++k) {
        if (result.worst_index < offset + list[k]->size()) {
          row.worst_parameter = names[k];
          break;
        }
        offset += list[k]->size();
      }
    }
    row.passed = result.max_relative_error < options.threshold;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace geodistill::gradcheck
