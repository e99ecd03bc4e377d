#include "geodistill/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "geodistill/errors.hpp"
#include "geodistill/scene.hpp"

namespace geodistill::model {

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  }
  return m;
}

int layer_in_dim(const ModelConfig& c, int layer) { return layer == 1 ? c.input_dim : c.hidden_dim; }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (input_dim <= 0 || hidden_dim <= 0) fail("dimensions must be positive");
  if (num_layers <= 0) fail("num_layers must be positive");
  if (rank <= 0) fail("rank must be positive");
  if (!(alpha > 0.0)) fail("alpha must be positive");
  if (!(lora_init_std >= 0.0)) fail("lora_init_std must be non-negative");
  if (rank_head_dim <= 0 || delta_head_dim <= 0) fail("head dimensions must be positive");
  if (intermediate_layer < 1 || intermediate_layer > num_layers) fail("intermediate_layer out of range");
  for (int l : adapted_layers) {
    if (l < 1 || l > num_layers) fail("adapted layer " + std::to_string(l) + " out of range");
  }
  std::vector<int> sorted = adapted_layers;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("duplicate adapted layer");
}

std::size_t FrozenEncoder::parameter_count() const {
  std::size_t n = 0;
  for (const DenseLayer& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

std::size_t LoraAdapter::parameter_count() const {
  std::size_t n = 0;
  for (const LoraLayer& l : layers) n += static_cast<std::size_t>(l.A.size() + l.B.size());
  return n;
}

Matrix LoraAdapter::effective_weight(const FrozenEncoder& encoder, int layer) const {
  Matrix w = encoder.layers.at(static_cast<std::size_t>(layer - 1)).weight;
  for (const LoraLayer& l : layers) {
    if (l.layer == layer) w += scaling() * l.A * l.B;
  }
  return w;
}

FrozenEncoder make_frozen_encoder(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(scene::derive_seed(config.seed, 1));
  FrozenEncoder enc;
  for (int l = 1; l <= config.num_layers; ++l) {
    const int d_in = layer_in_dim(config, l);
    DenseLayer layer;
    layer.weight = gaussian(d_in, config.hidden_dim, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
    layer.bias = gaussian(1, config.hidden_dim, 0.1, rng);
    enc.layers.push_back(std::move(layer));
  }
  return enc;
}

Model Model::initialize(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  m.encoder = make_frozen_encoder(config);

  const int d = config.hidden_dim;
  std::mt19937_64 rng(scene::derive_seed(config.seed, 2));
  m.params.adapter.rank = config.rank;
  m.params.adapter.alpha = config.alpha;
  std::vector<int> layers = config.adapted_layers;
  std::sort(layers.begin(), layers.end());
  for (int l : layers) {
    LoraLayer lora;
    lora.layer = l;
    lora.A = gaussian(layer_in_dim(config, l), config.rank, config.lora_init_std, rng);
    lora.B = Matrix::Zero(config.rank, config.hidden_dim);
    m.params.adapter.layers.push_back(std::move(lora));
  }

  std::mt19937_64 head_rng(scene::derive_seed(config.seed, 3));
  const int k = config.rank_head_dim;
  const int h = config.delta_head_dim;
  m.params.rank_head.projection = gaussian(d, k, 1.0 / std::sqrt(static_cast<double>(d)), head_rng);
  m.params.rank_head.weight = gaussian(k, 1, 1.0 / std::sqrt(static_cast<double>(k)), head_rng);
  m.params.delta_head.hidden_weight = gaussian(2 * d, h, 1.0 / std::sqrt(2.0 * d), head_rng);
  m.params.delta_head.hidden_bias = Matrix::Zero(1, h);
  m.params.delta_head.out_weight = gaussian(h, 1, 1.0 / std::sqrt(static_cast<double>(h)), head_rng);
  m.params.delta_head.out_bias = Matrix::Zero(1, 1);
  m.params.abs_head.weight = gaussian(d, 1, 1.0 / std::sqrt(static_cast<double>(d)), head_rng);
  m.params.abs_head.bias = Matrix::Zero(1, 1);
  return m;
}

double Model::trainable_fraction() const {
  const double adapter = static_cast<double>(params.adapter.parameter_count());
  return adapter / (adapter + static_cast<double>(encoder.parameter_count()));
}

// ---------------------------------------------------------------------------
// Flat parameter view

std::vector<Matrix*> parameter_list(TrainableParameters& p) {
  std::vector<Matrix*> out;
  for (LoraLayer& l : p.adapter.layers) {
    out.push_back(&l.A);
    out.push_back(&l.B);
  }
  out.insert(out.end(), {&p.rank_head.projection, &p.rank_head.weight, &p.delta_head.hidden_weight,
                         &p.delta_head.hidden_bias, &p.delta_head.out_weight, &p.delta_head.out_bias,
                         &p.abs_head.weight, &p.abs_head.bias});
  return out;
}

std::vector<const Matrix*> parameter_list(const TrainableParameters& p) {
  auto mutable_list = parameter_list(const_cast<TrainableParameters&>(p));
  return {mutable_list.begin(), mutable_list.end()};
}

std::vector<std::string> parameter_names(const TrainableParameters& p) {
  std::vector<std::string> out;
  for (const LoraLayer& l : p.adapter.layers) {
    out.push_back("lora" + std::to_string(l.layer) + ".A");
    out.push_back("lora" + std::to_string(l.layer) + ".B");
  }
  out.insert(out.end(), {"rank_head.projection", "rank_head.weight", "delta_head.hidden_weight",
                         "delta_head.hidden_bias", "delta_head.out_weight", "delta_head.out_bias",
                         "abs_head.weight", "abs_head.bias"});
  return out;
}

std::size_t parameter_count(const TrainableParameters& params) {
  std::size_t n = 0;
  for (const Matrix* m : parameter_list(params)) n += static_cast<std::size_t>(m->size());
  return n;
}

Vector flatten(const TrainableParameters& params) {
  Vector flat(static_cast<Eigen::Index>(parameter_count(params)));
  Eigen::Index offset = 0;
  for (const Matrix* m : parameter_list(params)) {
    flat.segment(offset, m->size()) = m->reshaped();
    offset += m->size();
  }
  return flat;
}

void unflatten(TrainableParameters& params, const Vector& flat) {
  if (static_cast<std::size_t>(flat.size()) != parameter_count(params)) {
    throw DimensionError("unflatten: expected " + std::to_string(parameter_count(params)) + " values, got " +
                         std::to_string(flat.size()));
  }
  Eigen::Index offset = 0;
  for (Matrix* m : parameter_list(params)) {
    m->reshaped() = flat.segment(offset, m->size());
    offset += m->size();
  }
}

std::vector<ad::Var> BoundParameters::all() const {
  std::vector<ad::Var> out;
  for (std::size_t i = 0; i < lora_a.size(); ++i) {
    out.push_back(lora_a[i]);
    out.push_back(lora_b[i]);
  }
  out.insert(out.end(), {rank_projection, rank_weight, delta_hidden_weight, delta_hidden_bias, delta_out_weight,
                         delta_out_bias, abs_weight, abs_bias});
  return out;
}

Vector BoundParameters::gradient() const {
  const std::vector<ad::Var> vars = all();
  Eigen::Index total = 0;
  for (const ad::Var& v : vars) total += v.value().size();
  Vector flat(total);
  Eigen::Index offset = 0;
  for (const ad::Var& v : vars) {
    const Matrix g = v.grad();
    flat.segment(offset, g.size()) = g.reshaped();
    offset += g.size();
  }
  return flat;
}

BoundParameters bind(ad::Tape& tape, const TrainableParameters& p, bool trainable) {
  auto put = [&](const Matrix& m) { return trainable ? tape.variable(m) : tape.constant(m); };
  BoundParameters b;
  for (const LoraLayer& l : p.adapter.layers) {
    b.lora_a.push_back(put(l.A));
    b.lora_b.push_back(put(l.B));
  }
  b.rank_projection = put(p.rank_head.projection);
  b.rank_weight = put(p.rank_head.weight);
  b.delta_hidden_weight = put(p.delta_head.hidden_weight);
  b.delta_hidden_bias = put(p.delta_head.hidden_bias);
  b.delta_out_weight = put(p.delta_head.out_weight);
  b.delta_out_bias = put(p.delta_head.out_bias);
  b.abs_weight = put(p.abs_head.weight);
  b.abs_bias = put(p.abs_head.bias);
  return b;
}

// ---------------------------------------------------------------------------
// Forward passes

ad::Var add_row_bias(ad::Var x, ad::Var bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw DimensionError("add_row_bias: bias must be 1 x cols");
  ad::Var ones = x.tape()->constant(Matrix::Ones(x.rows(), 1));
  return ad::add(x, ad::matmul(ones, bias));
}

EncodedView encode(ad::Tape& tape, const Model& model, const BoundParameters& bound, const Matrix& descriptors,
                   int view_id) {
  if (descriptors.cols() != model.config.input_dim) {
    throw DimensionError("encode: descriptor dim " + std::to_string(descriptors.cols()) + " != encoder input dim " +
                         std::to_string(model.config.input_dim));
  }
  const LoraAdapter& adapter = model.params.adapter;
  if (bound.lora_a.size() != adapter.layers.size()) throw DimensionError("encode: adapter binding mismatch");

  ad::Var x = tape.constant(descriptors);
  ad::Var intermediate;
  const int n_layers = static_cast<int>(model.encoder.layers.size());
  for (int l = 1; l <= n_layers; ++l) {
    const DenseLayer& layer = model.encoder.layers[static_cast<std::size_t>(l - 1)];
    ad::Var z = add_row_bias(ad::matmul(x, tape.constant(layer.weight)), tape.constant(layer.bias));
    for (std::size_t k = 0; k < adapter.layers.size(); ++k) {
      if (adapter.layers[k].layer != l) continue;
      ad::Var low = ad::matmul(ad::matmul(x, bound.lora_a[k]), bound.lora_b[k]);
      z = ad::add(z, ad::scale(low, adapter.scaling()));
    }
    x = l < n_layers ? ad::tanh(z) : z;
    if (l == model.config.intermediate_layer) intermediate = x;
  }
  return EncodedView{FeatureGrid{x, LayerTag::Final, view_id}, FeatureGrid{intermediate, LayerTag::Intermediate, view_id}};
}

EncodedValues encode_values(const Model& model, const Matrix& descriptors) {
  ad::Tape tape;
  const BoundParameters bound = bind(tape, model.params, false);
  const EncodedView view = encode(tape, model, bound, descriptors);
  return {view.final.features.value(), view.intermediate.features.value()};
}

ad::Var rank_score(const BoundParameters& bound, ad::Var f_x, ad::Var f_y) {
  ad::Var gx = ad::matmul(f_x, bound.rank_projection);
  ad::Var gy = ad::matmul(f_y, bound.rank_projection);
  return ad::matmul(ad::sub(gx, gy), bound.rank_weight);
}

ad::Var rank_scores(const BoundParameters& bound, ad::Var features, std::span<const Eigen::Index> x,
                    std::span<const Eigen::Index> y) {
  if (x.size() != y.size()) throw DimensionError("rank_scores: pair index lists differ in length");
  ad::Var projected = ad::matmul(features, bound.rank_projection);
  ad::Var diff = ad::sub(ad::gather_rows(projected, x), ad::gather_rows(projected, y));
  return ad::matmul(diff, bound.rank_weight);
}

Vector rank_potential(const TrainableParameters& params, const Matrix& features) {
  return features * params.rank_head.projection * params.rank_head.weight;
}

ad::Var inter_delta(const BoundParameters& bound, ad::Var f_v1, ad::Var f_v2) {
  ad::Var hidden = ad::tanh(add_row_bias(ad::matmul(ad::hcat(f_v1, f_v2), bound.delta_hidden_weight),
                                         bound.delta_hidden_bias));
  return ad::tanh(add_row_bias(ad::matmul(hidden, bound.delta_out_weight), bound.delta_out_bias));
}

ad::Var abs_depth_prediction(const BoundParameters& bound, ad::Var features) {
  return add_row_bias(ad::matmul(features, bound.abs_weight), bound.abs_bias);
}

}  // namespace geodistill::model
