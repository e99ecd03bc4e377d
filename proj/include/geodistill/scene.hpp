#pragma once

// Synthetic multi-view scenes with exact geometry.
//
// A scene is a point cloud observed by two pinhole cameras orbiting its
// centroid. Rendering z-buffers the points onto a patch grid, so every
// patch carries at most one point: its depth, identity and an appearance
// descriptor. The same geometry yields the supervision signals
// (correspondences, depths, soft matching distributions).

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace geodistill::scene {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// World-to-camera pinhole model: x_cam = rotation * X + translation.
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double focal = 1.0;
  Eigen::Vector2d principal_point = Eigen::Vector2d::Zero();

  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const { return rotation * world + translation; }

  /// Pixel of a camera-frame point; requires camera.z() > 0.
  Eigen::Vector2d project(const Eigen::Vector3d& camera) const {
    return focal * camera.head<2>() / camera.z() + principal_point;
  }

  /// Camera centre in world coordinates.
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
};

/// Camera looking from `eye` at `target` with image y pointing along world +y.
CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double focal,
                   const Eigen::Vector2d& principal_point);

struct SceneConfig {
  int num_points = 128;
  int grid_rows = 8;
  int grid_cols = 8;
  int image_height = 64;
  int image_width = 64;
  int descriptor_dim = 32;
  /// Std of the per-view nuisance added to every rendered descriptor.
  double view_noise = 0.35;
  /// Angle between the two cameras around the vertical axis (radians).
  double baseline_angle = 0.3;
  double near = 2.0;
  double far = 6.0;
  /// Horizontal field of view (radians); sets the focal length.
  double field_of_view = 1.0;
  /// Atmospheric extinction coefficient; haze fraction is 1 - exp(-haze_density * depth).
  double haze_density = 0.15;
  /// Dimension of the subspace carrying the view nuisance.
  int nuisance_rank = 4;
  /// Seeds the appearance basis shared by every scene of a dataset.
  std::uint64_t world_seed = 20240917;
  std::uint64_t seed = 0;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  double focal() const;
};

/// Patch layout of an image. Patches are indexed row-major.
struct PatchGrid {
  int rows = 0;
  int cols = 0;
  int height = 0;
  int width = 0;

  int size() const { return rows * cols; }
  double patch_width() const { return static_cast<double>(width) / cols; }
  double patch_height() const { return static_cast<double>(height) / rows; }
  double patch_diagonal() const;
  Eigen::Vector2d center(int patch) const;
  /// Patch containing `pixel`, or nullopt outside the image.
  std::optional<int> patch_at(const Eigen::Vector2d& pixel) const;
  Eigen::MatrixX2d centers() const;
};

/// Directions in descriptor space shared by all scenes of one world:
/// a haze colour and an orthonormal nuisance basis, mutually orthogonal.
struct AppearanceBasis {
  Vector haze_color;
  Matrix nuisance;  // descriptor_dim x nuisance_rank
  Matrix identity_projector;  // projector onto their orthogonal complement
};

AppearanceBasis appearance_basis(const SceneConfig& config);

struct Scene {
  SceneConfig config;
  Eigen::MatrixX3d points;  // world coordinates
  Matrix base_descriptors;  // num_points x descriptor_dim, unit rows
  std::array<CameraPose, 2> poses;
};

/// One rendered view. Patch-level fields have one entry per grid patch;
/// point-level fields have one entry per scene point.
struct ViewBundle {
  PatchGrid grid;
  Matrix descriptors;             // patches x descriptor_dim, zero rows for background
  Vector depth;                   // camera-frame depth, 0 for background
  std::vector<bool> visible;
  Eigen::MatrixX2d patch_centers;
  std::vector<int> point_id;      // -1 for background

  Eigen::MatrixX2d point_pixels;  // projection of every scene point
  Vector point_depth;             // camera z of every scene point
  std::vector<int> point_patch;   // patch a point wins in the z-buffer, or -1

  int num_patches() const { return grid.size(); }
  int num_visible() const;
  std::vector<int> visible_patches() const;
};

struct Correspondence {
  int patch_v1 = 0;
  int patch_v2 = 0;
  Eigen::Vector2d pixel_v1 = Eigen::Vector2d::Zero();
  Eigen::Vector2d pixel_v2 = Eigen::Vector2d::Zero();
  int point_id = 0;
};

struct CorrespondenceSet {
  std::vector<Correspondence> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  /// The same matches seen from view 2 to view 1.
  CorrespondenceSet reversed() const;
  std::vector<Eigen::Index> patches_v1() const;
  std::vector<Eigen::Index> patches_v2() const;
  Eigen::MatrixX2d pixels_v1() const;
  Eigen::MatrixX2d pixels_v2() const;
};

/// Row-stochastic patch-to-patch distribution; masked rows are all zero.
struct CostDistribution {
  Matrix rows;
  std::vector<bool> row_mask;

  int num_active() const;
};

/// A scene with both of its rendered views.
struct SceneSample {
  Scene scene;
  std::array<ViewBundle, 2> views;
};

Scene generate_scene(const SceneConfig& config);

/// Renders `scene` through `pose`. `noise_stream` selects the nuisance draw.
ViewBundle render_view(const Scene& scene, const CameraPose& pose, std::uint64_t noise_stream);

/// generate_scene followed by render_view for both cameras.
SceneSample make_sample(const SceneConfig& config);
SceneSample render_sample(Scene scene);

/// Patches of the two views observing the same point, ordered by point id.
CorrespondenceSet extract_correspondences(const ViewBundle& view1, const ViewBundle& view2);

/// Gaussian-in-pixel-space distribution around each patch's exact reprojection.
/// `bandwidth` defaults to one patch width when not given.
CostDistribution teacher_cost_distribution(const ViewBundle& view1, const ViewBundle& view2,
                                           std::optional<double> bandwidth = std::nullopt);

/// 64-bit mix used to derive independent seeds from one root seed.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);

}  // namespace geodistill::scene
