#include "geodistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "geodistill/errors.hpp"

namespace geodistill::trainer {

namespace {

std::string format_component(const char* name, const std::optional<double>& value) {
  std::ostringstream os;
  os << name << '=';
  if (value) {
    os << *value;
  } else {
    os << "absent";
  }
  return os.str();
}

std::string describe(const losses::LossDiagnostics& d) {
  std::ostringstream os;
  os << format_component("L_match", d.match) << ' ' << format_component("L_depth_intra", d.depth_intra) << ' '
     << format_component("L_depth_inter", d.depth_inter) << ' ' << format_component("L_abs_depth", d.abs_depth) << ' '
     << format_component("L_cost", d.cost) << " L_total=" << d.total;
  return os.str();
}

void accumulate(std::optional<double>& into, const std::optional<double>& value, double weight) {
  if (!value) return;
  into = into.value_or(0.0) + weight * *value;
}

std::string save_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void load_rng(std::mt19937_64& rng, const std::string& text) {
  std::istringstream is(text);
  is >> rng;
  if (!is) throw ParseError("invalid generator state", 0);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be >= 1");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (anneal_steps < 0) throw ConfigError("train.anneal_steps must be >= 0");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("train.validation_fraction must lie in [0, 1)");
  }
  losses::TemperatureSchedule{tau_start, tau_end, 1}.validate();
  loss.weights.validate();
}

OptimState OptimState::zeros_like(const model::TrainableParameters& params) {
  OptimState s;
  for (const Matrix* p : model::parameter_list(params)) {
    s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adamw_update(model::TrainableParameters& params, const Vector& gradient, OptimState& state,
                  const TrainConfig& config) {
  std::vector<Matrix*> list = model::parameter_list(params);
  if (state.m.size() != list.size() || state.v.size() != list.size()) {
    throw ContractError("adamw_update: optimizer state does not match parameters");
  }
  if (gradient.size() != static_cast<Eigen::Index>(model::parameter_count(params))) {
    throw DimensionError("adamw_update: gradient length does not match parameters");
  }
  ++state.t;
  const double lr = config.learning_rate;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  Eigen::Index offset = 0;
  for (std::size_t k = 0; k < list.size(); ++k) {
    Matrix& p = *list[k];
    const Eigen::Index n = p.size();
    const Eigen::Map<const Matrix> g(gradient.data() + offset, p.rows(), p.cols());
    offset += n;
    p *= 1.0 - lr * config.weight_decay;
    state.m[k] = config.beta1 * state.m[k] + (1.0 - config.beta1) * g;
    state.v[k] = config.beta2 * state.v[k] + (1.0 - config.beta2) * g.cwiseAbs2();
    const Matrix m_hat = state.m[k] / bc1;
    const Matrix v_hat = state.v[k] / bc2;
    p.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + config.eps);
  }
}

std::vector<TrainingExample> build_examples(std::span<const scene::SceneSample> dataset,
                                            const losses::LossConfig& config) {
  std::vector<TrainingExample> out;
  out.reserve(dataset.size());
  for (const scene::SceneSample& s : dataset) out.push_back({&s, losses::build_targets(s, config)});
  return out;
}

StepRecord train_step(model::Model& model, std::span<const losses::PreparedPair> batch, const TrainConfig& config,
                      OptimState& optim, long step, double tau) {
  if (batch.empty()) throw EmptyInputError("train_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  StepRecord record;
  record.step = step;
  record.tau = tau;
  Vector gradient = Vector::Zero(static_cast<Eigen::Index>(model::parameter_count(model.params)));

  for (const losses::PreparedPair& pair : batch) {
    ad::Tape tape;
    const model::BoundParameters bound = model::bind(tape, model.params);
    const losses::LossOutput out = losses::total_loss(tape, model, bound, pair, config.loss, tau);
    const losses::LossDiagnostics& d = out.diagnostics;
    if (!std::isfinite(d.total)) throw NumericalError("non-finite loss at step " + std::to_string(step) + ": " + describe(d));
    if (tape.requires_grad(out.total)) {
      tape.backward(out.total);
      gradient += inv * bound.gradient();
    }
    accumulate(record.losses.match, d.match, inv);
    accumulate(record.losses.depth_intra, d.depth_intra, inv);
    accumulate(record.losses.depth_inter, d.depth_inter, inv);
    accumulate(record.losses.abs_depth, d.abs_depth, inv);
    accumulate(record.losses.cost, d.cost, inv);
    record.losses.total += inv * d.total;
    record.losses.skipped_intra_views += d.skipped_intra_views;
  }
  if (!gradient.allFinite()) {
    throw NumericalError("non-finite gradient at step " + std::to_string(step) + ": " + describe(record.losses));
  }
  record.grad_norm = gradient.norm();
  adamw_update(model.params, gradient, optim, config);
  return record;
}

double evaluate_loss(const model::Model& model, std::span<const TrainingExample> examples,
                     const losses::LossConfig& config, double tau, std::uint64_t seed) {
  if (examples.empty()) throw EmptyInputError("evaluate_loss: no scenes");
  std::mt19937_64 rng(seed);
  double total = 0.0;
  for (const TrainingExample& ex : examples) {
    const losses::PreparedPair pair = losses::prepare_pair(*ex.sample, ex.targets, config, rng);
    ad::Tape tape;
    const model::BoundParameters bound = model::bind(tape, model.params, false);
    total += losses::total_loss(tape, model, bound, pair, config, tau).diagnostics.total;
  }
  return total / static_cast<double>(examples.size());
}

Trainer::Trainer(model::Model model, std::span<const scene::SceneSample> dataset, TrainConfig config)
    : model_(std::move(model)), config_(std::move(config)), rng_(config_.seed) {
  config_.validate();
  if (dataset.empty()) throw EmptyInputError("run_training: empty dataset");
  std::vector<TrainingExample> all = build_examples(dataset, config_.loss);
  const auto n = all.size();
  auto n_val = static_cast<std::size_t>(std::lround(config_.validation_fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n - 1;
  train_.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_val));
  validation_.assign(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());

  state_.optim = OptimState::zeros_like(model_.params);
  state_.best_params = model_.params;
  state_.validation_seed = rng_();
}

long Trainer::total_steps() const {
  const long per_epoch = (static_cast<long>(train_.size()) + config_.batch - 1) / config_.batch;
  return per_epoch * config_.max_epochs;
}

void Trainer::restore(const TrainState& state) {
  if (state.optim.m.size() != model::parameter_list(model_.params).size()) {
    throw ContractError("restore: optimizer state does not match the model");
  }
  if (model::parameter_count(state.params) != model::parameter_count(model_.params)) {
    throw ContractError("restore: parameter shapes do not match the model");
  }
  for (int idx : state.order) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= train_.size()) throw ContractError("restore: scene order out of range");
  }
  state_ = state;
  model_.params = state.params;
  load_rng(rng_, state.rng_state);
  result_ = TrainResult{};
}

TrainState Trainer::state() const {
  TrainState s = state_;
  s.params = model_.params;
  s.rng_state = save_rng(rng_);
  return s;
}

void Trainer::begin_epoch() {
  state_.order.resize(train_.size());
  std::iota(state_.order.begin(), state_.order.end(), 0);
  std::shuffle(state_.order.begin(), state_.order.end(), rng_);
  state_.cursor = 0;
  state_.epoch_loss_sum = 0.0;
}

void Trainer::end_epoch() {
  const long steps_in_epoch = (static_cast<long>(train_.size()) + config_.batch - 1) / config_.batch;
  EpochRecord rec;
  rec.epoch = state_.epoch;
  rec.train_loss = state_.epoch_loss_sum / static_cast<double>(steps_in_epoch);

  const losses::TemperatureSchedule schedule{config_.tau_start, config_.tau_end,
                                             config_.anneal_steps > 0 ? config_.anneal_steps : total_steps()};
  // With no held-out scenes the training loss drives model selection.
  const double monitored = validation_.empty() ? rec.train_loss
                                               : evaluate_loss(model_, validation_, config_.loss,
                                                               schedule.at(state_.step), state_.validation_seed);
  if (!validation_.empty()) rec.validation_loss = monitored;
  if (!std::isfinite(monitored)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(state_.epoch));

  if (monitored < state_.best_validation) {
    state_.best_validation = monitored;
    state_.best_epoch = state_.epoch;
    state_.best_params = model_.params;
    state_.epochs_without_improvement = 0;
  } else {
    ++state_.epochs_without_improvement;
  }
  result_.epochs.push_back(rec);

  ++state_.epoch;
  state_.order.clear();
  state_.cursor = 0;
  if (state_.epochs_without_improvement >= config_.early_stop_patience) {
    state_.finished = true;
    state_.stopped_early = true;
  } else if (state_.epoch >= config_.max_epochs) {
    state_.finished = true;
  }
}

StepRecord Trainer::step() {
  if (state_.finished) throw ContractError("Trainer::step: training already finished");
  if (state_.order.empty()) begin_epoch();

  const losses::TemperatureSchedule schedule{config_.tau_start, config_.tau_end,
                                             config_.anneal_steps > 0 ? config_.anneal_steps : total_steps()};
  const double tau = schedule.at(state_.step);

  std::vector<losses::PreparedPair> batch;
  const int end = std::min<int>(state_.cursor + config_.batch, static_cast<int>(state_.order.size()));
  for (int i = state_.cursor; i < end; ++i) {
    const TrainingExample& ex = train_[static_cast<std::size_t>(state_.order[static_cast<std::size_t>(i)])];
    batch.push_back(losses::prepare_pair(*ex.sample, ex.targets, config_.loss, rng_));
  }
  state_.cursor = end;

  StepRecord rec = train_step(model_, batch, config_, state_.optim, state_.step, tau);
  rec.epoch = state_.epoch;
  ++state_.step;
  state_.epoch_loss_sum += rec.losses.total;
  result_.steps.push_back(rec);
  if (state_.cursor >= static_cast<int>(state_.order.size())) end_epoch();
  return rec;
}

TrainResult Trainer::run(const std::function<void(const StepRecord&)>& on_step, std::optional<long> max_steps) {
  long taken = 0;
  while (!state_.finished && (!max_steps || taken < *max_steps)) {
    const StepRecord rec = step();
    ++taken;
    if (on_step) on_step(rec);
  }
  TrainResult out = result_;
  out.best_params = state_.best_epoch >= 0 ? state_.best_params : model_.params;
  out.best_epoch = state_.best_epoch;
  if (state_.best_epoch >= 0 && !validation_.empty()) out.best_validation = state_.best_validation;
  out.stopped_early = state_.stopped_early;
  return out;
}

TrainResult run_training(const model::Model& model, std::span<const scene::SceneSample> dataset,
                         const TrainConfig& config, const std::function<void(const StepRecord&)>& on_step) {
  Trainer trainer(model, dataset, config);
  return trainer.run(on_step);
}

}  // namespace geodistill::trainer
