#pragma once

// AdamW optimisation of adapter and head parameters with temperature
// annealing, a held-out validation split, early stopping and resumable state.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geodistill/losses.hpp"
#include "geodistill/model.hpp"
#include "geodistill/scene.hpp"

namespace geodistill::trainer {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int max_epochs = 300;
  int early_stop_patience = 20;
  /// Scenes per optimizer step.
  int batch = 1;
  std::uint64_t seed = 0;
  double tau_start = 1.0;
  double tau_end = 0.5;
  /// Steps over which tau is annealed; 0 spans the whole run (max_epochs * steps per epoch).
  long anneal_steps = 0;
  /// Trailing fraction of the dataset held out for validation.
  double validation_fraction = 0.2;
  losses::LossConfig loss;

  void validate() const;
};

/// AdamW moments, one entry per trainable matrix in parameter_list() order.
struct OptimState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long t = 0;

  static OptimState zeros_like(const model::TrainableParameters& params);
};

/// One AdamW update: decoupled decay theta *= (1 - lr * wd), then the
/// bias-corrected Adam step. `gradient` is flat in parameter_list() order.
void adamw_update(model::TrainableParameters& params, const Vector& gradient, OptimState& state,
                  const TrainConfig& config);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double tau = 0.0;
  losses::LossDiagnostics losses;
  double grad_norm = 0.0;
};

/// Precomputed supervision for one scene.
struct TrainingExample {
  const scene::SceneSample* sample = nullptr;
  losses::PairTargets targets;
};

std::vector<TrainingExample> build_examples(std::span<const scene::SceneSample> dataset,
                                            const losses::LossConfig& config);

/// Forward + backward over `batch`, then one AdamW update with the batch-mean gradient.
/// Throws NumericalError, listing component losses, when the loss or gradient is not finite.
StepRecord train_step(model::Model& model, std::span<const losses::PreparedPair> batch, const TrainConfig& config,
                      OptimState& optim, long step, double tau);

/// Mean L_total over `examples` at temperature `tau` with ordinal pairs drawn from `seed`.
double evaluate_loss(const model::Model& model, std::span<const TrainingExample> examples,
                     const losses::LossConfig& config, double tau, std::uint64_t seed);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> validation_loss;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  model::TrainableParameters params;
  OptimState optim;
  long step = 0;
  int epoch = 0;
  /// Position inside the current epoch's scene order.
  int cursor = 0;
  std::vector<int> order;
  std::string rng_state;
  std::uint64_t validation_seed = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  model::TrainableParameters best_params;
  int epochs_without_improvement = 0;
  double epoch_loss_sum = 0.0;
  bool finished = false;
  bool stopped_early = false;
};

struct TrainResult {
  model::TrainableParameters best_params;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  std::optional<double> best_validation;
  bool stopped_early = false;
};

class Trainer {
 public:
  /// Splits `dataset` into train / validation scenes; the dataset must outlive the trainer.
  Trainer(model::Model model, std::span<const scene::SceneSample> dataset, TrainConfig config);

  /// Continues from a saved state instead of a fresh initialisation.
  void restore(const TrainState& state);
  TrainState state() const;

  const model::Model& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  bool finished() const { return state_.finished; }
  long total_steps() const;
  std::size_t num_train() const { return train_.size(); }
  std::size_t num_validation() const { return validation_.size(); }

  /// Runs a single optimizer step, closing the epoch (validation, early stopping) when it ends.
  StepRecord step();

  /// Runs until finished or `max_steps` more steps were taken.
  TrainResult run(const std::function<void(const StepRecord&)>& on_step = {},
                  std::optional<long> max_steps = std::nullopt);

 private:
  void begin_epoch();
  void end_epoch();

  model::Model model_;
  TrainConfig config_;
  std::vector<TrainingExample> train_;
  std::vector<TrainingExample> validation_;
  std::mt19937_64 rng_;
  TrainState state_;
  TrainResult result_;
};

/// Convenience wrapper: a fresh Trainer run to completion.
TrainResult run_training(const model::Model& model, std::span<const scene::SceneSample> dataset,
                         const TrainConfig& config, const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace geodistill::trainer
