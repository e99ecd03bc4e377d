#pragma once

// Frozen patch encoder with low-rank adapters, plus the depth heads.
//
// The encoder is an MLP applied independently to every patch descriptor:
//   x_l = tanh(x_{l-1} W_l + b_l)   for l < L,   x_L = x_{L-1} W_L + b_L.
// Adapted layers use W_l + (alpha / rank) A_l B_l. Only adapter and head
// parameters are trainable; B starts at zero so the adapted encoder is
// initially identical to the frozen one.

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "geodistill/autodiff.hpp"

namespace geodistill::model {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int input_dim = 32;
  int hidden_dim = 32;
  int num_layers = 4;
  /// 1-based indices of layers carrying an adapter.
  std::vector<int> adapted_layers{2, 3};
  /// 1-based layer whose (post-activation) output is the intermediate tap.
  int intermediate_layer = 3;
  int rank = 4;
  double alpha = 4.0;
  double lora_init_std = 0.02;
  int rank_head_dim = 16;
  int delta_head_dim = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DenseLayer {
  Matrix weight;  // d_in x d_out
  Matrix bias;    // 1 x d_out
};

struct FrozenEncoder {
  std::vector<DenseLayer> layers;

  std::size_t parameter_count() const;
};

struct LoraLayer {
  int layer = 0;  // 1-based encoder layer
  Matrix A;       // d_in x rank
  Matrix B;       // rank x d_out
};

struct LoraAdapter {
  int rank = 0;
  double alpha = 0.0;
  std::vector<LoraLayer> layers;

  double scaling() const { return alpha / rank; }
  std::size_t parameter_count() const;
  /// W + (alpha / rank) A B for `layer`, or W unchanged when not adapted.
  Matrix effective_weight(const FrozenEncoder& encoder, int layer) const;
};

/// Pairwise depth ranking score  s(x, y) = w . (G^T f_x - G^T f_y).
struct DepthRankHead {
  Matrix projection;  // d x k
  Matrix weight;      // k x 1
};

/// tanh(tanh([f1 f2] W1 + b1) W2 + b2), bounded in (-1, 1).
struct InterViewDeltaHead {
  Matrix hidden_weight;  // 2d x k
  Matrix hidden_bias;    // 1 x k
  Matrix out_weight;     // k x 1
  Matrix out_bias;       // 1 x 1
};

/// Linear per-patch depth readout used by the absolute-depth ablation.
struct AbsDepthHead {
  Matrix weight;  // d x 1
  Matrix bias;    // 1 x 1
};

struct TrainableParameters {
  LoraAdapter adapter;
  DepthRankHead rank_head;
  InterViewDeltaHead delta_head;
  AbsDepthHead abs_head;
};

struct Model {
  ModelConfig config;
  FrozenEncoder encoder;
  TrainableParameters params;

  static Model initialize(const ModelConfig& config);
  /// Fraction of adapter parameters among (frozen + adapter) encoder parameters.
  double trainable_fraction() const;
};

FrozenEncoder make_frozen_encoder(const ModelConfig& config);

// Flat parameter view in a fixed order: adapter (A, B per layer), rank head,
// delta head, absolute-depth head. Frozen weights are never included.
std::vector<Matrix*> parameter_list(TrainableParameters& params);
std::vector<const Matrix*> parameter_list(const TrainableParameters& params);
std::vector<std::string> parameter_names(const TrainableParameters& params);
std::size_t parameter_count(const TrainableParameters& params);
Vector flatten(const TrainableParameters& params);
void unflatten(TrainableParameters& params, const Vector& flat);

/// Trainable parameters recorded on a tape.
struct BoundParameters {
  std::vector<ad::Var> lora_a;
  std::vector<ad::Var> lora_b;
  ad::Var rank_projection;
  ad::Var rank_weight;
  ad::Var delta_hidden_weight;
  ad::Var delta_hidden_bias;
  ad::Var delta_out_weight;
  ad::Var delta_out_bias;
  ad::Var abs_weight;
  ad::Var abs_bias;

  /// Same order as parameter_list().
  std::vector<ad::Var> all() const;
  /// Flattened gradients after Tape::backward.
  Vector gradient() const;
};

/// Records parameters as tape variables, or as constants when `trainable` is false.
BoundParameters bind(ad::Tape& tape, const TrainableParameters& params, bool trainable = true);

enum class LayerTag { Final, Intermediate };

struct FeatureGrid {
  ad::Var features;  // patches x d
  LayerTag tag = LayerTag::Final;
  int view_id = 0;
};

struct EncodedView {
  FeatureGrid final;
  FeatureGrid intermediate;
};

EncodedView encode(ad::Tape& tape, const Model& model, const BoundParameters& bound, const Matrix& descriptors,
                   int view_id = 0);

/// Encoder outputs as plain matrices (no gradient bookkeeping).
struct EncodedValues {
  Matrix final;
  Matrix intermediate;
};
EncodedValues encode_values(const Model& model, const Matrix& descriptors);

/// Score for a single pair of 1 x d features; exactly antisymmetric in (x, y).
ad::Var rank_score(const BoundParameters& bound, ad::Var f_x, ad::Var f_y);
/// Scores for many pairs given as row indices into `features`; result is M x 1.
ad::Var rank_scores(const BoundParameters& bound, ad::Var features, std::span<const Eigen::Index> x,
                    std::span<const Eigen::Index> y);
/// Per-patch ranking potential G^T f . w (patches x 1); s(x, y) = u_x - u_y up to rounding.
Vector rank_potential(const TrainableParameters& params, const Matrix& features);

/// Predicted inter-view depth deltas for index-aligned K x d feature rows.
ad::Var inter_delta(const BoundParameters& bound, ad::Var f_v1, ad::Var f_v2);

/// Absolute-depth readout, patches x 1.
ad::Var abs_depth_prediction(const BoundParameters& bound, ad::Var features);

/// x + 1 * bias, with bias a 1 x n row.
ad::Var add_row_bias(ad::Var x, ad::Var bias);

}  // namespace geodistill::model
