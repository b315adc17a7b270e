#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "taskattr/tasks.hpp"

namespace taskattr {

enum class ModelKind { logreg, mlp2 };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);

/// logreg: logits = W x + b.
/// mlp2:   logits = W2 tanh(W1 x + b1) + b2.
///
/// Flat parameter order: logreg is W (row-major, class_count x input_dim)
/// then b; mlp2 is W1 (row-major, hidden x input), b1, W2 (row-major,
/// classes x hidden), b2.
struct ModelSpec {
    ModelKind kind = ModelKind::logreg;
    std::size_t input_dim = 1;
    std::size_t hidden_dim = 0;
    std::size_t class_count = 2;
    double l2_penalty = 0.0;

    std::size_t parameter_count() const;
    void validate() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct ModelParams {
    ModelSpec spec;
    Eigen::VectorXd flat;

    std::size_t size() const noexcept { return static_cast<std::size_t>(flat.size()); }
};

struct TrainerConfig {
    double step_size = 0.1;
    std::size_t iterations = 100;
    std::uint64_t seed = 0;
    double init_scale = 1.0;
    bool zero_init = false;
    /// Steps between captured checkpoints; 0 picks max(1, iterations / 20).
    std::size_t checkpoint_interval = 0;

    void validate() const;
};

/// Gaussian entries scaled by init_scale / sqrt(fan_in) per layer; biases
/// start at zero. zero_init (or init_scale = 0) gives the all-zero vector.
ModelParams init_params(const ModelSpec& spec, std::uint64_t seed, double init_scale = 1.0,
                        bool zero_init = false);

Eigen::VectorXd logits(const ModelParams& params, const Eigen::VectorXd& x);

/// Jacobian of the logits w.r.t. the flat parameters: row c is
/// d logit_c / dW, shape class_count x d.
Eigen::MatrixXd logit_jacobian(const ModelParams& params, const Eigen::VectorXd& x);

/// Per-class gradients as separate vectors (rows of logit_jacobian).
std::vector<Eigen::VectorXd> logit_grad(const ModelParams& params, const Eigen::VectorXd& x);

/// Dense weighted design: row n is a sample, weights[n] multiplies its
/// cross-entropy term. All loss/gradient/HVP evaluations go through this.
struct Batch {
    Eigen::MatrixXd features;
    std::vector<int> labels;
    Eigen::VectorXd weights;

    std::size_t size() const noexcept { return labels.size(); }
};

/// Uniform weights 1/N over the given samples.
Batch make_batch(std::span<const Sample> samples);
/// Task-weighted batch for s: sample of task k gets s_k / (|s| * n_k).
/// Unselected tasks are left out entirely.
Batch make_weighted_batch(const TaskBundle& bundle, const SubsetVector& s);

struct LossGrad {
    double loss = 0.0;
    Eigen::VectorXd grad;
};

/// Weighted cross-entropy and gradient; no penalty term.
LossGrad data_loss_grad(const ModelParams& params, const Batch& batch);
/// Weighted cross-entropy Hessian applied to v; no penalty term.
Eigen::VectorXd data_hvp(const ModelParams& params, const Batch& batch, const Eigen::VectorXd& v);

/// Mean cross-entropy over samples plus l2_penalty * ||W||^2 / 2.
LossGrad loss_grad(const ModelParams& params, std::span<const Sample> samples);
/// Hessian of loss_grad's objective applied to v.
Eigen::VectorXd hvp(const ModelParams& params, std::span<const Sample> samples, const Eigen::VectorXd& v);

/// Training objective for subset s: weighted data loss plus the l2 penalty.
LossGrad objective_grad(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s);
Eigen::VectorXd objective_hvp(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s,
                              const Eigen::VectorXd& v);

/// Mean cross-entropy of every task (no penalty).
std::vector<double> task_losses(const ModelParams& params, const TaskBundle& bundle);
/// Task-weighted empirical loss for s (mean per-task losses averaged over the selected tasks).
double weighted_loss(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s);

/// Mean test loss or accuracy, per `metric`.
double evaluate_metric(const ModelParams& params, std::span<const Sample> samples, Metric metric);

struct Checkpoint {
    ModelParams params;
    double step_size = 0.0;
};

struct TrainResult {
    ModelParams params;
    double final_loss = 0.0;
    double final_grad_norm = 0.0;
    std::vector<Checkpoint> trail;
};

/// Full-batch gradient descent on objective_grad for a fixed number of
/// iterations starting at init_params(spec, trainer.seed, ...).
/// Throws TrainingDiverged on a non-finite loss.
TrainResult train(const ModelSpec& spec, const TaskBundle& bundle, const SubsetVector& s,
                  const TrainerConfig& trainer, bool keep_trail = false);

/// Same loop from a given starting point.
TrainResult train_from(const ModelParams& start, const TaskBundle& bundle, const SubsetVector& s,
                       const TrainerConfig& trainer, bool keep_trail = false);

/// Model spec matching a bundle's dimensions.
ModelSpec spec_for(const TaskBundle& bundle, ModelKind kind, std::size_t hidden_dim, double l2_penalty);

}  // namespace taskattr
