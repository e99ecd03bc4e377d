#include "geodistill/eval.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "geodistill/errors.hpp"

namespace geodistill::eval {

namespace {

Matrix normalized_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

Json pck_to_json(const PckTable& t) {
  Json j = Json::object();
  for (const auto& [alpha, value] : t) {
    std::ostringstream key;
    key << alpha;
    j[key.str()] = value;
  }
  return j;
}

Json scene_to_json(const SceneReport& s) {
  return {{"scene_seed", s.scene_seed},
          {"pck", pck_to_json(s.pck)},
          {"ordinal_accuracy", s.ordinal_accuracy},
          {"cost_kl", s.cost_kl},
          {"inter_delta_mae", s.inter_delta_mae}};
}

PckTable pck_delta(const PckTable& base, const PckTable& dist) {
  PckTable out;
  for (const auto& [alpha, value] : dist) out[alpha] = value - base.at(alpha);
  return out;
}

bool same_alphas(const PckTable& a, const PckTable& b) {
  if (a.size() != b.size()) return false;
  return std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) { return x.first == y.first; });
}

}  // namespace

PckTable pck(const Matrix& feats_v1, const Matrix& feats_v2, const scene::CorrespondenceSet& correspondences,
             std::span<const double> alphas, const Eigen::MatrixX2d& patch_centers_v2, int image_height,
             int image_width) {
  if (correspondences.empty()) throw EmptyInputError("pck: no correspondences");
  if (feats_v1.cols() != feats_v2.cols()) throw DimensionError("pck: feature dims differ");
  if (patch_centers_v2.rows() != feats_v2.rows()) throw DimensionError("pck: one patch centre per view-2 feature row");

  const Matrix q = normalized_rows(feats_v1);
  const Matrix t = normalized_rows(feats_v2);
  std::vector<double> errors;
  errors.reserve(correspondences.size());
  for (const scene::Correspondence& c : correspondences.pairs) {
    if (c.patch_v1 < 0 || c.patch_v1 >= q.rows()) throw DimensionError("pck: correspondence patch out of range");
    const Vector sims = t * q.row(c.patch_v1).transpose();
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < sims.size(); ++j) {
      if (sims(j) > sims(best)) best = j;
    }
    errors.push_back((patch_centers_v2.row(best).transpose() - c.pixel_v2).norm());
  }

  const double base = std::max(image_height, image_width);
  PckTable out;
  for (double alpha : alphas) {
    const double threshold = alpha * base;
    const auto hits = std::count_if(errors.begin(), errors.end(), [&](double e) { return e <= threshold; });
    out[alpha] = static_cast<double>(hits) / static_cast<double>(errors.size());
  }
  return out;
}

OrdinalResult ordinal_accuracy(const Matrix& features, const model::DepthRankHead& head,
                               std::span<const losses::OrdinalPair> pairs) {
  if (pairs.empty()) throw EmptyInputError("ordinal_accuracy: no usable pairs");
  const Matrix projected = features * head.projection;
  OrdinalResult r;
  r.num_pairs = pairs.size();
  for (const losses::OrdinalPair& p : pairs) {
    const double score = ((projected.row(p.x) - projected.row(p.y)) * head.weight)(0, 0);
    const int predicted = score > 0.0 ? 1 : (score < 0.0 ? -1 : 0);
    if (predicted == p.label) ++r.num_correct;
  }
  r.accuracy = static_cast<double>(r.num_correct) / static_cast<double>(r.num_pairs);
  return r;
}

OrdinalResult ordinal_accuracy(const Vector& predicted_depth, std::span<const losses::OrdinalPair> pairs) {
  if (pairs.empty()) throw EmptyInputError("ordinal_accuracy: no usable pairs");
  OrdinalResult r;
  r.num_pairs = pairs.size();
  for (const losses::OrdinalPair& p : pairs) {
    const double score = predicted_depth(p.x) - predicted_depth(p.y);
    const int predicted = score > 0.0 ? 1 : (score < 0.0 ? -1 : 0);
    if (predicted == p.label) ++r.num_correct;
  }
  r.accuracy = static_cast<double>(r.num_correct) / static_cast<double>(r.num_pairs);
  return r;
}

OrdinalResult ordinal_accuracy(const scene::ViewBundle& view, const Matrix& features,
                               const model::DepthRankHead& head, int budget, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<losses::OrdinalPair> pairs = losses::sample_ordinal_pairs(view, budget, rng);
  return ordinal_accuracy(features, head, pairs);
}

double brute_force_ap(const Matrix& similarities, std::span<const Eigen::Index> positives, const Matrix* candidates) {
  const Eigen::Index k = similarities.rows();
  if (k == 0) throw EmptyInputError("brute_force_ap: no queries");
  if (static_cast<Eigen::Index>(positives.size()) != k) throw DimensionError("brute_force_ap: one positive per query");
  if (candidates && (candidates->rows() != k || candidates->cols() != similarities.cols())) {
    throw DimensionError("brute_force_ap: candidate mask shape");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index pos = positives[static_cast<std::size_t>(i)];
    if (pos < 0 || pos >= similarities.cols()) throw DimensionError("brute_force_ap: positive out of range");
    const double s_pos = similarities(i, pos);
    int rank = 1;
    for (Eigen::Index j = 0; j < similarities.cols(); ++j) {
      if (j == pos) continue;
      if (candidates && (*candidates)(i, j) == 0.0) continue;
      if (similarities(i, j) >= s_pos) ++rank;
    }
    total += 1.0 / rank;
  }
  return total / static_cast<double>(k);
}

PcaResult pca_features(std::span<const Matrix> views, int components) {
  if (views.empty()) throw EmptyInputError("pca_features: no views");
  if (components < 1) throw ParameterError("pca_features: components must be >= 1");
  const Eigen::Index d = views.front().cols();
  Eigen::Index n = 0;
  for (const Matrix& v : views) {
    if (v.cols() != d) throw DimensionError("pca_features: views differ in feature dim");
    n += v.rows();
  }
  if (n < components) throw EmptyInputError("pca_features: fewer patches than components");

  Matrix all(n, d);
  Eigen::Index offset = 0;
  for (const Matrix& v : views) {
    all.middleRows(offset, v.rows()) = v;
    offset += v.rows();
  }
  PcaResult r;
  r.mean = all.colwise().mean().transpose();
  const Matrix centered = all.rowwise() - r.mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(n);

  const Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  const Vector eigenvalues = solver.eigenvalues().reverse().cwiseMax(0.0);
  const Matrix eigenvectors = solver.eigenvectors().rowwise().reverse();
  const double total = eigenvalues.sum();
  // Relative floor, plus an absolute one so rounding noise on identical rows reads as zero variance.
  const double scale = all.cwiseAbs().maxCoeff();
  const double tolerance = std::max(1e-12 * total, 1e-20 * scale * scale);

  r.components = Matrix::Zero(d, components);
  r.explained_variance_ratio = Vector::Zero(components);
  for (int c = 0; c < components && c < d; ++c) {
    if (eigenvalues(c) <= tolerance) break;
    Vector v = eigenvectors.col(c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    r.components.col(c) = v;
    r.explained_variance_ratio(c) = eigenvalues(c) / total;
    ++r.effective_components;
  }
  if (r.effective_components < components) {
    r.warning = "only " + std::to_string(r.effective_components) + " of " + std::to_string(components) +
                " components have non-zero variance; remaining components are zero";
  }

  offset = 0;
  for (const Matrix& v : views) {
    r.projections.push_back(centered.middleRows(offset, v.rows()) * r.components);
    offset += v.rows();
  }
  return r;
}

void write_pca_csv(std::ostream& out, const PcaResult& pca, const scene::PatchGrid& grid) {
  const Eigen::Index k = pca.components.cols();
  out << "view,patch_row,patch_col";
  for (Eigen::Index c = 0; c < k; ++c) out << ",pc" << c + 1;
  out << '\n';
  out.precision(17);
  for (std::size_t v = 0; v < pca.projections.size(); ++v) {
    const Matrix& p = pca.projections[v];
    if (p.rows() != grid.size()) throw DimensionError("write_pca_csv: projection rows must match the patch grid");
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      out << v << ',' << i / grid.cols << ',' << i % grid.cols;
      for (Eigen::Index c = 0; c < k; ++c) out << ',' << p(i, c);
      out << '\n';
    }
  }
}

model::TrainableParameters adapter_disabled(const model::TrainableParameters& params) {
  model::TrainableParameters out = params;
  for (model::LoraLayer& l : out.adapter.layers) l.B.setZero();
  return out;
}

EvalReport evaluate(const model::Model& model, const model::TrainableParameters& params,
                    std::span<const scene::SceneSample> scenes, const EvalOptions& options) {
  if (scenes.empty()) throw EmptyInputError("evaluate: no scenes");
  model::Model m = model;
  m.params = params;

  EvalReport report;
  for (double a : options.alphas) report.pck[a] = 0.0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const scene::SceneSample& sample = scenes[s];
    const losses::PairTargets targets = losses::build_targets(sample, options.loss);
    ad::Tape tape;
    const model::BoundParameters bound = model::bind(tape, m.params, false);
    const model::EncodedView e1 = model::encode(tape, m, bound, sample.views[0].descriptors, 0);
    const model::EncodedView e2 = model::encode(tape, m, bound, sample.views[1].descriptors, 1);
    const Matrix& f1 = e1.final.features.value();
    const Matrix& f2 = e2.final.features.value();

    SceneReport sr;
    sr.scene_seed = sample.scene.config.seed;
    const scene::ViewBundle& v2 = sample.views[1];
    sr.pck = targets.correspondences.empty()
                 ? PckTable{}
                 : pck(f1, f2, targets.correspondences, options.alphas, v2.patch_centers, v2.grid.height, v2.grid.width);
    for (double a : options.alphas) sr.pck.try_emplace(a, 0.0);

    std::size_t correct = 0;
    std::size_t total = 0;
    for (std::size_t v = 0; v < 2; ++v) {
      std::mt19937_64 rng(scene::derive_seed(options.pair_seed, s * 2 + v));
      const auto pairs = losses::sample_ordinal_pairs(sample.views[v], options.pair_budget, rng);
      if (pairs.empty()) continue;
      const Matrix& f = v == 0 ? f1 : f2;
      const OrdinalResult r =
          options.abs_depth_readout
              ? ordinal_accuracy(Vector((f * m.params.abs_head.weight).array() + m.params.abs_head.bias(0, 0)), pairs)
              : ordinal_accuracy(f, m.params.rank_head, pairs);
      correct += r.num_correct;
      total += r.num_pairs;
    }
    sr.ordinal_accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

    ad::Var c12 = losses::cost_volume(e1.intermediate.features, e2.intermediate.features);
    ad::Var p12 = losses::cost_distribution(c12, options.tau, targets.teacher_12.row_mask);
    ad::Var p21 = losses::cost_distribution(ad::transpose(c12), options.tau, targets.teacher_21.row_mask);
    sr.cost_kl = losses::cost_alignment_loss(targets.teacher_12, targets.teacher_21, p12, p21,
                                             targets.teacher_12.row_mask, targets.teacher_21.row_mask,
                                             losses::Divergence::ForwardKl)
                     .scalar();

    if (!targets.correspondences.empty()) {
      const auto kp1 = targets.correspondences.patches_v1();
      const auto kp2 = targets.correspondences.patches_v2();
      ad::Var q1 = ad::gather_rows(e1.final.features, kp1);
      ad::Var q2 = ad::gather_rows(e2.final.features, kp2);
      const double l12 = losses::inter_depth_loss(model::inter_delta(bound, q1, q2), targets.inter_targets_12).scalar();
      const double l21 = losses::inter_depth_loss(model::inter_delta(bound, q2, q1), targets.inter_targets_21).scalar();
      sr.inter_delta_mae = 0.5 * (l12 + l21);
    }

    const double w = 1.0 / static_cast<double>(scenes.size());
    for (const auto& [a, value] : sr.pck) report.pck[a] += w * value;
    report.ordinal_accuracy += w * sr.ordinal_accuracy;
    report.mean_cost_kl += w * sr.cost_kl;
    report.inter_delta_mae += w * sr.inter_delta_mae;
    report.scenes.push_back(std::move(sr));
  }
  report.mean_cost_kl = std::max(0.0, report.mean_cost_kl);
  return report;
}

DeltaReport compare_runs(const EvalReport& baseline, const EvalReport& distilled) {
  if (baseline.scenes.size() != distilled.scenes.size()) throw ContractError("compare_runs: different scene sets");
  if (!same_alphas(baseline.pck, distilled.pck)) throw ContractError("compare_runs: different alpha grids");
  DeltaReport d;
  for (std::size_t i = 0; i < baseline.scenes.size(); ++i) {
    const SceneReport& b = baseline.scenes[i];
    const SceneReport& t = distilled.scenes[i];
    if (b.scene_seed != t.scene_seed) throw ContractError("compare_runs: different scene sets");
    if (!same_alphas(b.pck, t.pck)) throw ContractError("compare_runs: different alpha grids");
    SceneReport s;
    s.scene_seed = b.scene_seed;
    s.pck = pck_delta(b.pck, t.pck);
    s.ordinal_accuracy = t.ordinal_accuracy - b.ordinal_accuracy;
    s.cost_kl = t.cost_kl - b.cost_kl;
    s.inter_delta_mae = t.inter_delta_mae - b.inter_delta_mae;
    d.scenes.push_back(s);
  }
  d.pck = pck_delta(baseline.pck, distilled.pck);
  d.ordinal_accuracy = distilled.ordinal_accuracy - baseline.ordinal_accuracy;
  d.mean_cost_kl = distilled.mean_cost_kl - baseline.mean_cost_kl;
  d.inter_delta_mae = distilled.inter_delta_mae - baseline.inter_delta_mae;
  return d;
}

Json to_json(const EvalReport& r) {
  Json scenes = Json::array();
  for (const SceneReport& s : r.scenes) scenes.push_back(scene_to_json(s));
  return {{"pck", pck_to_json(r.pck)},
          {"ordinal_accuracy", r.ordinal_accuracy},
          {"mean_cost_kl", r.mean_cost_kl},
          {"inter_delta_mae", r.inter_delta_mae},
          {"scenes", scenes}};
}

Json to_json(const DeltaReport& r) {
  Json scenes = Json::array();
  for (const SceneReport& s : r.scenes) scenes.push_back(scene_to_json(s));
  return {{"pck", pck_to_json(r.pck)},
          {"ordinal_accuracy", r.ordinal_accuracy},
          {"mean_cost_kl", r.mean_cost_kl},
          {"inter_delta_mae", r.inter_delta_mae},
          {"scenes", scenes}};
}

}  // namespace geodistill::eval
