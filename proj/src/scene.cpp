#include "geodistill/scene.hpp"

#include <Eigen/Geometry>
#include <Eigen/QR>

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "geodistill/errors.hpp"

namespace geodistill::scene {

namespace {

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  }
  return m;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  // splitmix64 finalizer over the combined state
  std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double focal,
                   const Eigen::Vector2d& principal_point) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  const Eigen::Vector3d right = Eigen::Vector3d::UnitY().cross(forward).normalized();
  const Eigen::Vector3d down = forward.cross(right);
  CameraPose pose;
  pose.rotation.row(0) = right.transpose();
  pose.rotation.row(1) = down.transpose();
  pose.rotation.row(2) = forward.transpose();
  pose.translation = -pose.rotation * eye;
  pose.focal = focal;
  pose.principal_point = principal_point;
  return pose;
}

// ---------------------------------------------------------------------------

void SceneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("scene config: " + msg); };
  if (num_points <= 0) fail("num_points must be positive");
  if (grid_rows <= 0 || grid_cols <= 0) fail("patch grid must be non-empty");
  if (image_height <= 0 || image_width <= 0) fail("image size must be positive");
  if (image_height % grid_rows != 0 || image_width % grid_cols != 0) {
    fail("image size must be divisible by the patch grid");
  }
  if (descriptor_dim < nuisance_rank + 2) fail("descriptor_dim must exceed nuisance_rank + 1");
  if (nuisance_rank < 0) fail("nuisance_rank must be non-negative");
  if (!(near > 0.0) || !(far > near)) fail("depth range requires 0 < near < far");
  if (!(view_noise >= 0.0)) fail("view_noise must be non-negative");
  if (!(haze_density >= 0.0)) fail("haze_density must be non-negative");
  if (!(field_of_view > 0.0 && field_of_view < 3.0)) fail("field_of_view must lie in (0, 3) radians");
  if (!std::isfinite(baseline_angle)) fail("baseline_angle must be finite");
}

double SceneConfig::focal() const { return 0.5 * image_width / std::tan(0.5 * field_of_view); }

double PatchGrid::patch_diagonal() const { return std::hypot(patch_width(), patch_height()); }

Eigen::Vector2d PatchGrid::center(int patch) const {
  const int r = patch / cols;
  const int c = patch % cols;
  return {(c + 0.5) * patch_width(), (r + 0.5) * patch_height()};
}

std::optional<int> PatchGrid::patch_at(const Eigen::Vector2d& pixel) const {
  if (!(pixel.x() >= 0.0 && pixel.x() < width && pixel.y() >= 0.0 && pixel.y() < height)) return std::nullopt;
  const int c = std::min(cols - 1, static_cast<int>(pixel.x() / patch_width()));
  const int r = std::min(rows - 1, static_cast<int>(pixel.y() / patch_height()));
  return r * cols + c;
}

Eigen::MatrixX2d PatchGrid::centers() const {
  Eigen::MatrixX2d out(size(), 2);
  for (int i = 0; i < size(); ++i) out.row(i) = center(i).transpose();
  return out;
}

AppearanceBasis appearance_basis(const SceneConfig& config) {
  const int d = config.descriptor_dim;
  const int k = config.nuisance_rank;
  std::mt19937_64 rng(derive_seed(config.world_seed, 0));
  const Matrix raw = gaussian_matrix(d, k + 1, rng);
  Eigen::HouseholderQR<Matrix> qr(raw);
  const Matrix q = qr.householderQ() * Matrix::Identity(d, k + 1);

  AppearanceBasis basis;
  basis.haze_color = q.col(0);
  basis.nuisance = q.rightCols(k);
  basis.identity_projector = Matrix::Identity(d, d) - q * q.transpose();
  return basis;
}

int ViewBundle::num_visible() const {
  int n = 0;
  for (bool v : visible) n += v ? 1 : 0;
  return n;
}

std::vector<int> ViewBundle::visible_patches() const {
  std::vector<int> out;
  for (int i = 0; i < num_patches(); ++i) {
    if (visible[static_cast<std::size_t>(i)]) out.push_back(i);
  }
  return out;
}

CorrespondenceSet CorrespondenceSet::reversed() const {
  CorrespondenceSet out;
  out.pairs.reserve(pairs.size());
  for (const Correspondence& c : pairs) {
    out.pairs.push_back({c.patch_v2, c.patch_v1, c.pixel_v2, c.pixel_v1, c.point_id});
  }
  return out;
}

std::vector<Eigen::Index> CorrespondenceSet::patches_v1() const {
  std::vector<Eigen::Index> out;
  for (const Correspondence& c : pairs) out.push_back(c.patch_v1);
  return out;
}

std::vector<Eigen::Index> CorrespondenceSet::patches_v2() const {
  std::vector<Eigen::Index> out;
  for (const Correspondence& c : pairs) out.push_back(c.patch_v2);
  return out;
}

Eigen::MatrixX2d CorrespondenceSet::pixels_v1() const {
  Eigen::MatrixX2d out(static_cast<Eigen::Index>(pairs.size()), 2);
  for (std::size_t i = 0; i < pairs.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = pairs[i].pixel_v1.transpose();
  return out;
}

Eigen::MatrixX2d CorrespondenceSet::pixels_v2() const {
  Eigen::MatrixX2d out(static_cast<Eigen::Index>(pairs.size()), 2);
  for (std::size_t i = 0; i < pairs.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = pairs[i].pixel_v2.transpose();
  return out;
}

int CostDistribution::num_active() const {
  int n = 0;
  for (bool m : row_mask) n += m ? 1 : 0;
  return n;
}

// ---------------------------------------------------------------------------

Scene generate_scene(const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(derive_seed(config.seed, 0));

  const double mid = 0.5 * (config.near + config.far);
  const double half_w = mid * std::tan(0.5 * config.field_of_view);
  const double half_h = half_w * config.image_height / config.image_width;
  const double half_z = 0.5 * (config.far - config.near);

  Scene scene;
  scene.config = config;
  scene.points.resize(config.num_points, 3);
  std::uniform_real_distribution<double> ux(-half_w, half_w);
  std::uniform_real_distribution<double> uy(-half_h, half_h);
  std::uniform_real_distribution<double> uz(-half_z, half_z);
  for (int i = 0; i < config.num_points; ++i) {
    const double x = ux(rng);
    const double y = uy(rng);
    const double z = uz(rng);
    scene.points.row(i) << x, y, z;
  }

  const AppearanceBasis basis = appearance_basis(config);
  scene.base_descriptors.resize(config.num_points, config.descriptor_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int i = 0; i < config.num_points; ++i) {
    Vector v;
    do {
      Vector g(config.descriptor_dim);
      for (int j = 0; j < config.descriptor_dim; ++j) g(j) = normal(rng);
      v = basis.identity_projector * g;
    } while (v.norm() < 1e-6);
    scene.base_descriptors.row(i) = v.normalized().transpose();
  }

  const Eigen::Vector3d centroid = scene.points.colwise().mean().transpose();
  const Eigen::Vector2d pp(0.5 * config.image_width, 0.5 * config.image_height);
  const double angles[2] = {-0.5 * config.baseline_angle, 0.5 * config.baseline_angle};
  for (int k = 0; k < 2; ++k) {
    const Eigen::Vector3d eye = centroid + mid * Eigen::Vector3d(std::sin(angles[k]), 0.0, -std::cos(angles[k]));
    scene.poses[static_cast<std::size_t>(k)] = look_at(eye, centroid, config.focal(), pp);
  }
  return scene;
}

ViewBundle render_view(const Scene& scene, const CameraPose& pose, std::uint64_t noise_stream) {
  const SceneConfig& cfg = scene.config;
  const int n_points = static_cast<int>(scene.points.rows());

  ViewBundle view;
  view.grid = PatchGrid{cfg.grid_rows, cfg.grid_cols, cfg.image_height, cfg.image_width};
  const int n_patches = view.grid.size();
  view.patch_centers = view.grid.centers();
  view.descriptors = Matrix::Zero(n_patches, cfg.descriptor_dim);
  view.depth = Vector::Zero(n_patches);
  view.visible.assign(static_cast<std::size_t>(n_patches), false);
  view.point_id.assign(static_cast<std::size_t>(n_patches), -1);
  view.point_pixels.resize(n_points, 2);
  view.point_depth.resize(n_points);
  view.point_patch.assign(static_cast<std::size_t>(n_points), -1);

  for (int p = 0; p < n_points; ++p) {
    const Eigen::Vector3d xc = pose.to_camera(scene.points.row(p).transpose());
    view.point_depth(p) = xc.z();
    if (xc.z() <= 0.0) {
      view.point_pixels.row(p) << -1.0, -1.0;
      continue;
    }
    const Eigen::Vector2d px = pose.project(xc);
    view.point_pixels.row(p) = px.transpose();
    if (xc.z() < cfg.near || xc.z() > cfg.far) continue;
    const std::optional<int> patch = view.grid.patch_at(px);
    if (!patch) continue;
    const auto slot = static_cast<std::size_t>(*patch);
    // Nearest point wins; equal depths keep the lower id.
    if (view.point_id[slot] < 0 || xc.z() < view.depth(*patch)) {
      view.point_id[slot] = p;
      view.depth(*patch) = xc.z();
    }
  }

  const AppearanceBasis basis = appearance_basis(cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, 1000 + noise_stream));
  std::normal_distribution<double> nuisance(0.0, cfg.view_noise > 0.0 ? cfg.view_noise : 1.0);
  for (int i = 0; i < n_patches; ++i) {
    const int p = view.point_id[static_cast<std::size_t>(i)];
    if (p < 0) continue;
    view.visible[static_cast<std::size_t>(i)] = true;
    view.point_patch[static_cast<std::size_t>(p)] = i;
    const double haze = 1.0 - std::exp(-cfg.haze_density * view.depth(i));
    Vector desc = (1.0 - haze) * scene.base_descriptors.row(p).transpose() + haze * basis.haze_color;
    if (cfg.view_noise > 0.0 && cfg.nuisance_rank > 0) {
      Vector z(cfg.nuisance_rank);
      for (int k = 0; k < cfg.nuisance_rank; ++k) z(k) = nuisance(rng);
      desc += basis.nuisance * z;
    }
    view.descriptors.row(i) = desc.transpose();
  }
  return view;
}

SceneSample render_sample(Scene scene) {
  SceneSample sample;
  sample.views[0] = render_view(scene, scene.poses[0], 0);
  sample.views[1] = render_view(scene, scene.poses[1], 1);
  sample.scene = std::move(scene);
  return sample;
}

SceneSample make_sample(const SceneConfig& config) { return render_sample(generate_scene(config)); }

CorrespondenceSet extract_correspondences(const ViewBundle& view1, const ViewBundle& view2) {
  if (view1.point_patch.size() != view2.point_patch.size()) {
    throw ContractError("extract_correspondences: views come from different scenes");
  }
  CorrespondenceSet out;
  for (std::size_t p = 0; p < view1.point_patch.size(); ++p) {
    const int a = view1.point_patch[p];
    const int b = view2.point_patch[p];
    if (a < 0 || b < 0) continue;
    const auto row = static_cast<Eigen::Index>(p);
    out.pairs.push_back({a, b, view1.point_pixels.row(row).transpose(), view2.point_pixels.row(row).transpose(),
                         static_cast<int>(p)});
  }
  return out;
}

CostDistribution teacher_cost_distribution(const ViewBundle& view1, const ViewBundle& view2,
                                           std::optional<double> bandwidth) {
  const double bw = bandwidth.value_or(view2.grid.patch_width());
  if (!(bw > 0.0)) throw ParameterError("teacher_cost_distribution: bandwidth must be > 0");
  if (view1.point_patch.size() != view2.point_patch.size()) {
    throw ContractError("teacher_cost_distribution: views come from different scenes");
  }

  const int n1 = view1.num_patches();
  const int n2 = view2.num_patches();
  CostDistribution dist;
  dist.rows = Matrix::Zero(n1, n2);
  dist.row_mask.assign(static_cast<std::size_t>(n1), false);

  for (int i = 0; i < n1; ++i) {
    const int p = view1.point_id[static_cast<std::size_t>(i)];
    if (p < 0 || view2.point_patch[static_cast<std::size_t>(p)] < 0) continue;
    const Eigen::RowVector2d target = view2.point_pixels.row(p);
    Vector logits = -(view2.patch_centers.rowwise() - target).rowwise().squaredNorm() / (2.0 * bw * bw);
    logits.array() -= logits.maxCoeff();
    const Vector w = logits.array().exp().matrix();
    dist.rows.row(i) = (w / w.sum()).transpose();
    dist.row_mask[static_cast<std::size_t>(i)] = true;
  }
  return dist;
}

}  // namespace geodistill::scene
