#include "geodistill/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "geodistill/errors.hpp"

namespace geodistill::losses {

namespace {

constexpr double kProbabilityFloor = 1e-30;

Matrix row_mask_matrix(const std::vector<bool>& mask, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(mask.size()), cols);
  for (std::size_t i = 0; i < mask.size(); ++i) m.row(static_cast<Eigen::Index>(i)).setConstant(mask[i] ? 1.0 : 0.0);
  return m;
}

bool all_true(const std::vector<bool>& mask) {
  return std::all_of(mask.begin(), mask.end(), [](bool b) { return b; });
}

// sum_ij t log t with 0 log 0 = 0
double negative_entropy(const Matrix& t) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double v = t.data()[i];
    if (v > 0.0) acc += v * std::log(v);
  }
  return acc;
}

double median(std::vector<double> v) {
  if (v.empty()) return 1.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

ad::Var match_loss_from_masks(ad::Var q1, ad::Var q2, const Matrix& neg_12, const Matrix& neg_21,
                              const SmoothApOptions& options) {
  ad::Var ap_12 = smooth_ap(q1, q2, neg_12, options);
  ad::Var ap_21 = smooth_ap(q2, q1, neg_21, options);
  return 1.0 + ad::scale(ad::add(ap_12, ap_21), -0.5);
}

}  // namespace

void LossWeights::validate() const {
  if (!(match >= 0.0) || !(depth >= 0.0) || !(cost >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

double TemperatureSchedule::at(long step) const {
  const double progress =
      total_steps > 0 ? std::min(static_cast<double>(step) / static_cast<double>(total_steps), 1.0) : 1.0;
  return tau_start + (tau_end - tau_start) * progress;
}

void TemperatureSchedule::validate() const {
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ConfigError("temperatures must be positive");
  if (total_steps < 0) throw ConfigError("schedule total_steps must be non-negative");
}

// ---------------------------------------------------------------------------
// Sparse matching

Matrix negative_mask(const Eigen::MatrixX2d& target_pixels, const NegativePolicy& policy, double default_radius) {
  const Eigen::Index k = target_pixels.rows();
  const double radius = policy.exclusion_radius.value_or(default_radius);
  Matrix mask = Matrix::Zero(k, k);
  std::vector<std::pair<double, Eigen::Index>> candidates;
  for (Eigen::Index i = 0; i < k; ++i) {
    candidates.clear();
    for (Eigen::Index j = 0; j < k; ++j) {
      if (j == i) continue;
      const double dist = (target_pixels.row(j) - target_pixels.row(i)).norm();
      if (dist > radius) candidates.emplace_back(dist, j);
    }
    if (policy.max_negatives && static_cast<int>(candidates.size()) > *policy.max_negatives) {
      std::sort(candidates.begin(), candidates.end());
      candidates.resize(static_cast<std::size_t>(std::max(0, *policy.max_negatives)));
    }
    for (const auto& [dist, j] : candidates) mask(i, j) = 1.0;
  }
  return mask;
}

ad::Var smooth_ap_terms(ad::Var query, ad::Var target, const Matrix& negatives, const SmoothApOptions& options) {
  const Eigen::Index k = query.rows();
  if (k == 0) throw EmptyInputError("smooth_ap: empty correspondence set");
  if (target.rows() != k || target.cols() != query.cols()) throw DimensionError("smooth_ap: query/target shape mismatch");
  if (negatives.rows() != k || negatives.cols() != k) throw DimensionError("smooth_ap: negative mask must be K x K");
  if (!(options.temperature > 0.0)) throw ParameterError("smooth_ap: temperature must be > 0");

  ad::Tape& tape = *query.tape();
  ad::Var q = options.normalize ? ad::l2_normalize_rows(query) : query;
  ad::Var t = options.normalize ? ad::l2_normalize_rows(target) : target;

  ad::Var sim = ad::matmul(q, ad::transpose(t));                // q_i . t_j
  ad::Var self = ad::sum(ad::mul(q, q), ad::Axis::Cols);          // q_i . q_i
  ad::Var offset = ad::matmul(self, tape.constant(Matrix::Ones(1, k)));
  ad::Var d = ad::sub(sim, offset);
  ad::Var s = ad::sigmoid(ad::scale(d, 1.0 / options.temperature));

  ad::Var positive = ad::sum(ad::mul(s, tape.constant(Matrix::Identity(k, k))), ad::Axis::Cols);
  ad::Var negative = ad::sum(ad::mul(s, tape.constant(negatives)), ad::Axis::Cols);
  ad::Var numerator = 1.0 + positive;
  return ad::div(numerator, ad::add(numerator, negative));
}

ad::Var smooth_ap(ad::Var query, ad::Var target, const Matrix& negatives, const SmoothApOptions& options) {
  return ad::mean(smooth_ap_terms(query, target, negatives, options));
}

ad::Var match_loss(ad::Var feats_v1, ad::Var feats_v2, const Eigen::MatrixX2d& pixels_v1,
                   const Eigen::MatrixX2d& pixels_v2, const NegativePolicy& policy, const SmoothApOptions& options) {
  return match_loss_from_masks(feats_v1, feats_v2, negative_mask(pixels_v2, policy), negative_mask(pixels_v1, policy),
                               options);
}

// ---------------------------------------------------------------------------
// Relative depth

int sign_label(double d_x, double d_y) {
  if (d_x > d_y) return 1;
  if (d_x < d_y) return -1;
  throw TieError("sign_label: tied depths must be filtered before labelling");
}

std::vector<OrdinalPair> sample_ordinal_pairs(const scene::ViewBundle& view, int budget, std::mt19937_64& rng,
                                              std::span<const int> patches) {
  std::vector<int> pool = patches.empty() ? view.visible_patches() : std::vector<int>(patches.begin(), patches.end());
  std::vector<OrdinalPair> all;
  for (int a : pool) {
    for (int b : pool) {
      if (a == b) continue;
      const double da = view.depth(a);
      const double db = view.depth(b);
      if (std::abs(da - db) < kDepthTieTolerance) continue;
      all.push_back({a, b, sign_label(da, db)});
    }
  }
  if (budget <= 0 || all.size() <= static_cast<std::size_t>(budget)) return all;

  // Partial Fisher-Yates: the first `budget` slots become a uniform sample.
  for (std::size_t i = 0; i < static_cast<std::size_t>(budget); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(static_cast<std::size_t>(budget));
  return all;
}

ad::Var ordinal_logistic_loss(ad::Var scores, std::span<const int> labels) {
  if (labels.empty()) throw EmptyInputError("ordinal loss: no pairs");
  if (scores.rows() != static_cast<Eigen::Index>(labels.size()) || scores.cols() != 1) {
    throw DimensionError("ordinal loss: scores must be M x 1");
  }
  Matrix neg_labels(static_cast<Eigen::Index>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) neg_labels(static_cast<Eigen::Index>(i), 0) = -labels[i];
  ad::Var margin = ad::mul(scores.tape()->constant(neg_labels), scores);
  return ad::mean(ad::log(1.0 + ad::exp(margin)));
}

ad::Var intra_depth_loss(const model::BoundParameters& bound, ad::Var features, std::span<const OrdinalPair> pairs) {
  if (pairs.empty()) throw EmptyInputError("intra_depth_loss: no usable pairs");
  std::vector<Eigen::Index> xs;
  std::vector<Eigen::Index> ys;
  std::vector<int> labels;
  for (const OrdinalPair& p : pairs) {
    xs.push_back(p.x);
    ys.push_back(p.y);
    labels.push_back(p.label);
  }
  return ordinal_logistic_loss(model::rank_scores(bound, features, xs, ys), labels);
}

Vector inter_delta_targets(const Vector& depth_v1, const Vector& depth_v2, double scale) {
  if (depth_v1.size() != depth_v2.size()) throw DimensionError("inter_delta_targets: length mismatch");
  if (!(scale > 0.0)) throw ParameterError("inter_delta_targets: scale must be > 0");
  return ((depth_v1 - depth_v2).array() / scale).tanh().matrix();
}

ad::Var inter_depth_loss(ad::Var predicted, const Vector& targets) {
  if (targets.size() == 0) throw EmptyInputError("inter_depth_loss: empty correspondence set");
  if (predicted.rows() != targets.size() || predicted.cols() != 1) {
    throw DimensionError("inter_depth_loss: predictions must be K x 1");
  }
  return ad::mean(ad::abs(ad::sub(predicted, predicted.tape()->constant(Matrix(targets)))));
}

// ---------------------------------------------------------------------------
// Dense cost volume

ad::Var cost_volume(ad::Var h_v1, ad::Var h_v2) {
  if (h_v1.cols() != h_v2.cols()) throw DimensionError("cost_volume: feature dims differ");
  return ad::matmul(ad::l2_normalize_rows(h_v1), ad::transpose(ad::l2_normalize_rows(h_v2)));
}

ad::Var cost_distribution(ad::Var cost, double tau, const std::vector<bool>& row_mask) {
  if (!(tau > 0.0)) throw ParameterError("cost_distribution: tau must be > 0");
  if (static_cast<Eigen::Index>(row_mask.size()) != cost.rows()) throw DimensionError("cost_distribution: mask size");
  ad::Var p = ad::softmax_rows(cost, tau);
  if (all_true(row_mask)) return p;
  return ad::mul(p, cost.tape()->constant(row_mask_matrix(row_mask, cost.cols())));
}

ad::Var row_divergence(const scene::CostDistribution& teacher, ad::Var student, const std::vector<bool>& student_mask,
                       Divergence kind) {
  if (teacher.row_mask != student_mask) throw ContractError("row_divergence: teacher and student masks differ");
  if (student.rows() != teacher.rows.rows() || student.cols() != teacher.rows.cols()) {
    throw DimensionError("row_divergence: teacher/student shape mismatch");
  }
  ad::Tape& tape = *student.tape();
  const int active = teacher.num_active();
  if (active == 0) return tape.constant(0.0);
  const double inv = 1.0 / active;

  ad::Var t = tape.constant(teacher.rows);
  ad::Var p = all_true(student_mask) ? student
                                     : ad::mul(student, tape.constant(row_mask_matrix(student_mask, student.cols())));
  const double t_log_t = negative_entropy(teacher.rows);

  if (kind == Divergence::ForwardKl) {
    ad::Var cross = ad::sum(ad::mul(t, ad::log(ad::clamp_min(p, kProbabilityFloor))));
    return ad::shift(ad::scale(cross, -inv), t_log_t * inv);
  }

  ad::Var m = ad::scale(ad::add(t, p), 0.5);
  ad::Var log_m = ad::log(ad::clamp_min(m, kProbabilityFloor));
  ad::Var kl_tm = ad::shift(-ad::sum(ad::mul(t, log_m)), t_log_t);
  ad::Var kl_pm = ad::sum(ad::mul(p, ad::sub(ad::log(ad::clamp_min(p, kProbabilityFloor)), log_m)));
  return ad::scale(ad::add(kl_tm, kl_pm), 0.5 * inv);
}

ad::Var cost_alignment_loss(const scene::CostDistribution& teacher_12, const scene::CostDistribution& teacher_21,
                            ad::Var student_12, ad::Var student_21, const std::vector<bool>& mask_12,
                            const std::vector<bool>& mask_21, Divergence kind) {
  ad::Var d12 = row_divergence(teacher_12, student_12, mask_12, kind);
  ad::Var d21 = row_divergence(teacher_21, student_21, mask_21, kind);
  return ad::scale(ad::add(d12, d21), 0.5);
}

// ---------------------------------------------------------------------------
// Absolute-depth ablation

ad::Var abs_depth_loss(ad::Var predicted, const Vector& teacher_depths) {
  if (teacher_depths.size() == 0) throw EmptyInputError("abs_depth_loss: no keypoints");
  if (predicted.rows() != teacher_depths.size() || predicted.cols() != 1) {
    throw DimensionError("abs_depth_loss: predictions must be K x 1");
  }
  const double gt_max = teacher_depths.maxCoeff();
  if (!(gt_max > 0.0)) throw DomainError("abs_depth_loss: degenerate scale, max teacher depth must be > 0");
  ad::Tape& tape = *predicted.tape();
  ad::Var s = ad::scale(ad::max(predicted), 1.0 / gt_max);
  ad::Var scaled_teacher = ad::mul(s, tape.constant(Matrix(teacher_depths)));
  return ad::mean(ad::abs(ad::sub(predicted, scaled_teacher)));
}

// ---------------------------------------------------------------------------
// Full objective

std::optional<double> LossDiagnostics::depth() const {
  if (abs_depth) return abs_depth;
  if (!depth_intra && !depth_inter) return std::nullopt;
  return depth_intra.value_or(0.0) + depth_inter.value_or(0.0);
}

PairTargets build_targets(const scene::SceneSample& sample, const LossConfig& config) {
  const scene::ViewBundle& v1 = sample.views[0];
  const scene::ViewBundle& v2 = sample.views[1];
  PairTargets t;
  t.correspondences = scene::extract_correspondences(v1, v2);
  t.negatives_12 = negative_mask(t.correspondences.pixels_v2(), config.negatives, v2.grid.patch_width());
  t.negatives_21 = negative_mask(t.correspondences.pixels_v1(), config.negatives, v1.grid.patch_width());
  t.teacher_12 = scene::teacher_cost_distribution(v1, v2, config.teacher_bandwidth);
  t.teacher_21 = scene::teacher_cost_distribution(v2, v1, config.teacher_bandwidth);

  std::vector<double> depths;
  for (const scene::ViewBundle* v : {&v1, &v2}) {
    for (int p : v->visible_patches()) depths.push_back(v->depth(p));
  }
  t.depth_scale = median(depths);

  const Eigen::Index k = static_cast<Eigen::Index>(t.correspondences.size());
  Vector d1(k);
  Vector d2(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    d1(i) = v1.depth(t.correspondences.pairs[static_cast<std::size_t>(i)].patch_v1);
    d2(i) = v2.depth(t.correspondences.pairs[static_cast<std::size_t>(i)].patch_v2);
  }
  t.inter_targets_12 = inter_delta_targets(d1, d2, t.depth_scale);
  t.inter_targets_21 = inter_delta_targets(d2, d1, t.depth_scale);
  return t;
}

PreparedPair prepare_pair(const scene::SceneSample& sample, const PairTargets& targets, const LossConfig& config,
                          std::mt19937_64& rng) {
  PreparedPair p;
  p.sample = &sample;
  p.targets = &targets;
  for (std::size_t v = 0; v < 2; ++v) p.ordinal_pairs[v] = sample_ordinal_pairs(sample.views[v], config.pair_budget, rng);
  return p;
}

LossOutput total_loss(ad::Tape& tape, const model::Model& model, const model::BoundParameters& bound,
                      const PreparedPair& pair, const LossConfig& config, double tau) {
  config.weights.validate();
  if (pair.sample == nullptr || pair.targets == nullptr) throw ContractError("total_loss: unprepared pair");
  const LossWeights& w = config.weights;
  LossOutput out;
  out.total = tape.constant(0.0);
  if (w.match == 0.0 && w.depth == 0.0 && w.cost == 0.0) return out;

  const scene::SceneSample& sample = *pair.sample;
  const PairTargets& targets = *pair.targets;
  const model::EncodedView e1 = model::encode(tape, model, bound, sample.views[0].descriptors, 0);
  const model::EncodedView e2 = model::encode(tape, model, bound, sample.views[1].descriptors, 1);
  ad::Var f1 = e1.final.features;
  ad::Var f2 = e2.final.features;

  const std::vector<Eigen::Index> kp1 = targets.correspondences.patches_v1();
  const std::vector<Eigen::Index> kp2 = targets.correspondences.patches_v2();
  std::vector<ad::Var> terms;

  if (w.match > 0.0) {
    const SmoothApOptions opts{config.match_temperature, config.normalize_match_features};
    ad::Var l = match_loss_from_masks(ad::gather_rows(f1, kp1), ad::gather_rows(f2, kp2), targets.negatives_12,
                                      targets.negatives_21, opts);
    out.diagnostics.match = l.scalar();
    terms.push_back(ad::scale(l, w.match));
  }

  if (w.depth > 0.0) {
    ad::Var depth = tape.constant(0.0);
    if (config.abs_depth) {
      double acc = 0.0;
      for (std::size_t v = 0; v < 2; ++v) {
        const scene::ViewBundle& view = sample.views[v];
        const std::vector<int> vis = view.visible_patches();
        const std::vector<Eigen::Index> idx(vis.begin(), vis.end());
        Vector gt(static_cast<Eigen::Index>(vis.size()));
        for (std::size_t i = 0; i < vis.size(); ++i) gt(static_cast<Eigen::Index>(i)) = view.depth(vis[i]);
        ad::Var pred = ad::gather_rows(model::abs_depth_prediction(bound, v == 0 ? f1 : f2), idx);
        ad::Var l = abs_depth_loss(pred, gt);
        acc += l.scalar();
        depth = ad::add(depth, l);
      }
      out.diagnostics.abs_depth = acc;
    } else {
      double intra = 0.0;
      for (std::size_t v = 0; v < 2; ++v) {
        if (pair.ordinal_pairs[v].empty()) {
          ++out.diagnostics.skipped_intra_views;
          continue;
        }
        ad::Var l = intra_depth_loss(bound, v == 0 ? f1 : f2, pair.ordinal_pairs[v]);
        intra += l.scalar();
        depth = ad::add(depth, l);
      }
      out.diagnostics.depth_intra = intra;

      double inter = 0.0;
      if (!targets.correspondences.empty()) {
        ad::Var q1 = ad::gather_rows(f1, kp1);
        ad::Var q2 = ad::gather_rows(f2, kp2);
        ad::Var l12 = inter_depth_loss(model::inter_delta(bound, q1, q2), targets.inter_targets_12);
        ad::Var l21 = inter_depth_loss(model::inter_delta(bound, q2, q1), targets.inter_targets_21);
        inter = l12.scalar() + l21.scalar();
        depth = ad::add(depth, ad::add(l12, l21));
      }
      out.diagnostics.depth_inter = inter;
    }
    terms.push_back(ad::scale(depth, w.depth));
  }

  if (w.cost > 0.0) {
    ad::Var c12 = cost_volume(e1.intermediate.features, e2.intermediate.features);
    ad::Var p12 = cost_distribution(c12, tau, targets.teacher_12.row_mask);
    ad::Var p21 = cost_distribution(ad::transpose(c12), tau, targets.teacher_21.row_mask);
    ad::Var l = cost_alignment_loss(targets.teacher_12, targets.teacher_21, p12, p21, targets.teacher_12.row_mask,
                                    targets.teacher_21.row_mask, config.divergence);
    out.diagnostics.cost = l.scalar();
    terms.push_back(ad::scale(l, w.cost));
  }

  for (const ad::Var& t : terms) out.total = ad::add(out.total, t);
  out.diagnostics.total = out.total.scalar();
  return out;
}

}  // namespace geodistill::losses
