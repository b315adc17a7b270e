#include "taskattr/models.hpp"

#include <cmath>

#include "taskattr/errors.hpp"
#include "taskattr/rng.hpp"

namespace taskattr {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMajorMatrix>;
using RowMap = Eigen::Map<RowMajorMatrix>;

struct Layout {
    Eigen::Index in, hidden, classes;
    // Offsets into the flat vector.
    Eigen::Index w1, b1, w2, b2;
};

Layout layout_of(const ModelSpec& spec) {
    Layout l{};
    l.in = static_cast<Eigen::Index>(spec.input_dim);
    l.hidden = static_cast<Eigen::Index>(spec.hidden_dim);
    l.classes = static_cast<Eigen::Index>(spec.class_count);
    if (spec.kind == ModelKind::logreg) {
        l.w2 = 0;
        l.b2 = l.classes * l.in;
    } else {
        l.w1 = 0;
        l.b1 = l.hidden * l.in;
        l.w2 = l.b1 + l.hidden;
        l.b2 = l.w2 + l.classes * l.hidden;
    }
    return l;
}

void check_params(const ModelParams& params) {
    if (params.flat.size() != static_cast<Eigen::Index>(params.spec.parameter_count()))
        throw ConfigError("parameter vector length does not match the model spec");
}

void check_input(const ModelParams& params, Eigen::Index cols) {
    if (cols != static_cast<Eigen::Index>(params.spec.input_dim))
        throw ConfigError("feature dimension " + std::to_string(cols) + " does not match model input_dim " +
                          std::to_string(params.spec.input_dim));
}

/// Row-wise softmax in place; returns per-row log-sum-exp.
Eigen::VectorXd softmax_rows(Eigen::MatrixXd& z) {
    Eigen::VectorXd lse(z.rows());
    for (Eigen::Index n = 0; n < z.rows(); ++n) {
        const double peak = z.row(n).maxCoeff();
        z.row(n) = (z.row(n).array() - peak).exp();
        const double total = z.row(n).sum();
        z.row(n) /= total;
        lse[n] = peak + std::log(total);
    }
    return lse;
}

struct Forward {
    Eigen::MatrixXd hidden;  // tanh activations (mlp2 only)
    Eigen::MatrixXd logits;  // N x C, before softmax
};

Forward forward(const ModelParams& params, const Eigen::MatrixXd& x) {
    check_params(params);
    check_input(params, x.cols());
    const auto l = layout_of(params.spec);
    const auto& flat = params.flat;
    Forward f;
    if (params.spec.kind == ModelKind::logreg) {
        ConstRowMap w(flat.data() + l.w2, l.classes, l.in);
        f.logits = x * w.transpose();
        f.logits.rowwise() += flat.segment(l.b2, l.classes).transpose();
    } else {
        ConstRowMap w1(flat.data() + l.w1, l.hidden, l.in);
        ConstRowMap w2(flat.data() + l.w2, l.classes, l.hidden);
        f.hidden = x * w1.transpose();
        f.hidden.rowwise() += flat.segment(l.b1, l.hidden).transpose();
        f.hidden = f.hidden.array().tanh().matrix();
        f.logits = f.hidden * w2.transpose();
        f.logits.rowwise() += flat.segment(l.b2, l.classes).transpose();
    }
    return f;
}

double penalty(const ModelParams& params) { return 0.5 * params.spec.l2_penalty * params.flat.squaredNorm(); }

}  // namespace

std::string_view to_string(ModelKind kind) { return kind == ModelKind::logreg ? "logreg" : "mlp2"; }

ModelKind parse_model_kind(std::string_view text) {
    if (text == "logreg") return ModelKind::logreg;
    if (text == "mlp2") return ModelKind::mlp2;
    throw ConfigError("unknown model kind: " + std::string(text));
}

std::size_t ModelSpec::parameter_count() const {
    if (kind == ModelKind::logreg) return class_count * input_dim + class_count;
    return hidden_dim * input_dim + hidden_dim + class_count * hidden_dim + class_count;
}

void ModelSpec::validate() const {
    if (input_dim == 0) throw ConfigError("model input_dim must be positive");
    if (class_count < 2) throw ConfigError("model class_count must be >= 2");
    if (kind == ModelKind::mlp2 && hidden_dim == 0) throw ConfigError("mlp2 hidden_dim must be positive");
    if (!(l2_penalty >= 0.0) || !std::isfinite(l2_penalty)) throw ConfigError("l2_penalty must be >= 0");
}

void TrainerConfig::validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ConfigError("trainer step_size must be > 0");
    if (iterations < 1) throw ConfigError("trainer iterations must be >= 1");
    if (!(init_scale >= 0.0)) throw ConfigError("trainer init_scale must be >= 0");
}

ModelSpec spec_for(const TaskBundle& bundle, ModelKind kind, std::size_t hidden_dim, double l2_penalty) {
    ModelSpec spec;
    spec.kind = kind;
    spec.input_dim = bundle.feature_dim();
    spec.hidden_dim = kind == ModelKind::mlp2 ? hidden_dim : 0;
    spec.class_count = static_cast<std::size_t>(bundle.class_count);
    spec.l2_penalty = l2_penalty;
    spec.validate();
    return spec;
}

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed, double init_scale, bool zero_init) {
    spec.validate();
    ModelParams params{spec, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.parameter_count()))};
    if (zero_init || init_scale == 0.0) return params;
    const auto l = layout_of(spec);
    Rng rng(derive_seed(seed, 0x1417));
    auto fill = [&](Eigen::Index offset, Eigen::Index count, double fan_in) {
        const double scale = init_scale / std::sqrt(fan_in);
        for (Eigen::Index i = 0; i < count; ++i) params.flat[offset + i] = scale * rng.normal();
    };
    if (spec.kind == ModelKind::logreg) {
        fill(l.w2, l.classes * l.in, static_cast<double>(l.in));
    } else {
        fill(l.w1, l.hidden * l.in, static_cast<double>(l.in));
        fill(l.w2, l.classes * l.hidden, static_cast<double>(l.hidden));
    }
    return params;
}

Eigen::VectorXd logits(const ModelParams& params, const Eigen::VectorXd& x) {
    Eigen::MatrixXd row = x.transpose();
    return forward(params, row).logits.row(0).transpose();
}

Eigen::MatrixXd logit_jacobian(const ModelParams& params, const Eigen::VectorXd& x) {
    check_params(params);
    check_input(params, x.size());
    const auto l = layout_of(params.spec);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(l.classes, params.flat.size());
    if (params.spec.kind == ModelKind::logreg) {
        for (Eigen::Index c = 0; c < l.classes; ++c) {
            jac.row(c).segment(l.w2 + c * l.in, l.in) = x.transpose();
            jac(c, l.b2 + c) = 1.0;
        }
        return jac;
    }
    ConstRowMap w1(params.flat.data() + l.w1, l.hidden, l.in);
    ConstRowMap w2(params.flat.data() + l.w2, l.classes, l.hidden);
    const Eigen::VectorXd h = (w1 * x + params.flat.segment(l.b1, l.hidden)).array().tanh().matrix();
    const Eigen::ArrayXd slope = 1.0 - h.array().square();
    for (Eigen::Index c = 0; c < l.classes; ++c) {
        // jac is column-major, so assemble the row contiguously first.
        Eigen::VectorXd row = Eigen::VectorXd::Zero(jac.cols());
        const Eigen::VectorXd da = (w2.row(c).transpose().array() * slope).matrix();
        RowMap(row.data() + l.w1, l.hidden, l.in) = da * x.transpose();
        row.segment(l.b1, l.hidden) = da;
        row.segment(l.w2 + c * l.hidden, l.hidden) = h;
        row[l.b2 + c] = 1.0;
        jac.row(c) = row.transpose();
    }
    return jac;
}

std::vector<Eigen::VectorXd> logit_grad(const ModelParams& params, const Eigen::VectorXd& x) {
    const auto jac = logit_jacobian(params, x);
    std::vector<Eigen::VectorXd> out;
    out.reserve(static_cast<std::size_t>(jac.rows()));
    for (Eigen::Index c = 0; c < jac.rows(); ++c) out.emplace_back(jac.row(c).transpose());
    return out;
}

Batch make_batch(std::span<const Sample> samples) {
    if (samples.empty()) throw ConfigError("batch needs at least one sample");
    Batch batch;
    const auto n = static_cast<Eigen::Index>(samples.size());
    batch.features.resize(n, samples.front().features.size());
    batch.labels.reserve(samples.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& sample = samples[static_cast<std::size_t>(i)];
        if (sample.features.size() != batch.features.cols()) throw ConfigError("ragged feature dimensions");
        batch.features.row(i) = sample.features.transpose();
        batch.labels.push_back(sample.label);
    }
    batch.weights = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    return batch;
}

Batch make_weighted_batch(const TaskBundle& bundle, const SubsetVector& s) {
    if (s.size() != bundle.task_count()) throw ConfigError("subset length does not match task count");
    const auto selected = s.count();
    if (selected == 0) throw ConfigError("subset selects no tasks");
    std::size_t rows = 0;
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (s[k]) rows += bundle.tasks[k].samples.size();
    }
    Batch batch;
    batch.features.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(bundle.feature_dim()));
    batch.weights.resize(static_cast<Eigen::Index>(rows));
    batch.labels.reserve(rows);
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (!s[k]) continue;
        const auto& samples = bundle.tasks[k].samples;
        const double w = 1.0 / (static_cast<double>(selected) * static_cast<double>(samples.size()));
        for (const auto& sample : samples) {
            batch.features.row(row) = sample.features.transpose();
            batch.weights[row] = w;
            batch.labels.push_back(sample.label);
            ++row;
        }
    }
    return batch;
}

LossGrad data_loss_grad(const ModelParams& params, const Batch& batch) {
    auto f = forward(params, batch.features);
    const auto l = layout_of(params.spec);
    Eigen::MatrixXd p = f.logits;
    const Eigen::VectorXd lse = softmax_rows(p);
    LossGrad out;
    out.grad = Eigen::VectorXd::Zero(params.flat.size());
    const auto n = static_cast<Eigen::Index>(batch.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = batch.labels[static_cast<std::size_t>(i)];
        out.loss += batch.weights[i] * (lse[i] - f.logits(i, y));
        p(i, y) -= 1.0;
    }
    // p now holds the weighted logit residuals D = w * (softmax - onehot).
    p.array().colwise() *= batch.weights.array();
    auto& g = out.grad;
    if (params.spec.kind == ModelKind::logreg) {
        RowMap(g.data() + l.w2, l.classes, l.in) = p.transpose() * batch.features;
        g.segment(l.b2, l.classes) = p.colwise().sum().transpose();
        return out;
    }
    ConstRowMap w2(params.flat.data() + l.w2, l.classes, l.hidden);
    RowMap(g.data() + l.w2, l.classes, l.hidden) = p.transpose() * f.hidden;
    g.segment(l.b2, l.classes) = p.colwise().sum().transpose();
    const Eigen::MatrixXd da = ((p * w2).array() * (1.0 - f.hidden.array().square())).matrix();
    RowMap(g.data() + l.w1, l.hidden, l.in) = da.transpose() * batch.features;
    g.segment(l.b1, l.hidden) = da.colwise().sum().transpose();
    return out;
}

Eigen::VectorXd data_hvp(const ModelParams& params, const Batch& batch, const Eigen::VectorXd& v) {
    if (v.size() != params.flat.size()) throw ConfigError("hvp direction has the wrong length");
    auto f = forward(params, batch.features);
    const auto l = layout_of(params.spec);
    Eigen::MatrixXd p = f.logits;
    softmax_rows(p);
    const auto& x = batch.features;
    const auto n = static_cast<Eigen::Index>(batch.size());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(params.flat.size());

    // R-operator: directional derivative of every intermediate along v.
    auto softmax_jvp = [&](const Eigen::MatrixXd& rz) {
        Eigen::MatrixXd pr = p.array() * rz.array();
        const Eigen::VectorXd mix = pr.rowwise().sum();
        pr -= (p.array().colwise() * mix.array()).matrix();
        pr.array().colwise() *= batch.weights.array();
        return pr;
    };

    if (params.spec.kind == ModelKind::logreg) {
        ConstRowMap vw(v.data() + l.w2, l.classes, l.in);
        Eigen::MatrixXd rz = x * vw.transpose();
        rz.rowwise() += v.segment(l.b2, l.classes).transpose();
        const Eigen::MatrixXd rd = softmax_jvp(rz);
        RowMap(out.data() + l.w2, l.classes, l.in) = rd.transpose() * x;
        out.segment(l.b2, l.classes) = rd.colwise().sum().transpose();
        return out;
    }

    ConstRowMap w2(params.flat.data() + l.w2, l.classes, l.hidden);
    ConstRowMap v1(v.data() + l.w1, l.hidden, l.in);
    ConstRowMap v2(v.data() + l.w2, l.classes, l.hidden);
    const auto& h = f.hidden;
    const Eigen::ArrayXXd slope = 1.0 - h.array().square();

    Eigen::MatrixXd d = p;
    for (Eigen::Index i = 0; i < n; ++i) d(i, batch.labels[static_cast<std::size_t>(i)]) -= 1.0;
    d.array().colwise() *= batch.weights.array();
    const Eigen::MatrixXd dh = d * w2;

    Eigen::MatrixXd ra = x * v1.transpose();
    ra.rowwise() += v.segment(l.b1, l.hidden).transpose();
    const Eigen::MatrixXd rh = (slope * ra.array()).matrix();
    Eigen::MatrixXd rz = rh * w2.transpose() + h * v2.transpose();
    rz.rowwise() += v.segment(l.b2, l.classes).transpose();
    const Eigen::MatrixXd rd = softmax_jvp(rz);

    RowMap(out.data() + l.w2, l.classes, l.hidden) = rd.transpose() * h + d.transpose() * rh;
    out.segment(l.b2, l.classes) = rd.colwise().sum().transpose();
    const Eigen::MatrixXd rdh = rd * w2 + d * v2;
    const Eigen::MatrixXd rda = (rdh.array() * slope - 2.0 * dh.array() * h.array() * rh.array()).matrix();
    RowMap(out.data() + l.w1, l.hidden, l.in) = rda.transpose() * x;
    out.segment(l.b1, l.hidden) = rda.colwise().sum().transpose();
    return out;
}

LossGrad loss_grad(const ModelParams& params, std::span<const Sample> samples) {
    auto out = data_loss_grad(params, make_batch(samples));
    out.loss += penalty(params);
    out.grad += params.spec.l2_penalty * params.flat;
    return out;
}

Eigen::VectorXd hvp(const ModelParams& params, std::span<const Sample> samples, const Eigen::VectorXd& v) {
    return data_hvp(params, make_batch(samples), v) + params.spec.l2_penalty * v;
}

LossGrad objective_grad(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s) {
    auto out = data_loss_grad(params, make_weighted_batch(bundle, s));
    out.loss += penalty(params);
    out.grad += params.spec.l2_penalty * params.flat;
    return out;
}

Eigen::VectorXd objective_hvp(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s,
                              const Eigen::VectorXd& v) {
    return data_hvp(params, make_weighted_batch(bundle, s), v) + params.spec.l2_penalty * v;
}

std::vector<double> task_losses(const ModelParams& params, const TaskBundle& bundle) {
    std::vector<double> out;
    out.reserve(bundle.task_count());
    for (const auto& task : bundle.tasks) out.push_back(data_loss_grad(params, make_batch(task.samples)).loss);
    return out;
}

double weighted_loss(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s) {
    if (s.size() != bundle.task_count()) throw ConfigError("subset length does not match task count");
    if (s.count() == 0) throw ConfigError("weighted_loss: subset selects no tasks");
    const auto losses = task_losses(params, bundle);
    return weighted_loss(std::span<const double>(losses), s);
}

double evaluate_metric(const ModelParams& params, std::span<const Sample> samples, Metric metric) {
    const auto batch = make_batch(samples);
    if (metric == Metric::mean_test_loss) return data_loss_grad(params, batch).loss;
    const auto f = forward(params, batch.features);
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < f.logits.rows(); ++i) {
        Eigen::Index best = 0;
        f.logits.row(i).maxCoeff(&best);
        if (best == batch.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

TrainResult train_from(const ModelParams& start, const TaskBundle& bundle, const SubsetVector& s,
                       const TrainerConfig& trainer, bool keep_trail) {
    trainer.validate();
    check_params(start);
    const auto batch = make_weighted_batch(bundle, s);
    const std::size_t interval =
        trainer.checkpoint_interval > 0 ? trainer.checkpoint_interval : std::max<std::size_t>(1, trainer.iterations / 20);
    const double lambda = start.spec.l2_penalty;

    TrainResult result;
    result.params = start;
    auto& w = result.params.flat;
    for (std::size_t it = 0; it < trainer.iterations; ++it) {
        auto lg = data_loss_grad(result.params, batch);
        const double loss = lg.loss + 0.5 * lambda * w.squaredNorm();
        if (!std::isfinite(loss) || !lg.grad.allFinite()) throw TrainingDiverged(it, loss);
        if (keep_trail && it % interval == 0) result.trail.push_back({result.params, trainer.step_size});
        w -= trainer.step_size * (lg.grad + lambda * w);
    }
    auto lg = data_loss_grad(result.params, batch);
    result.final_loss = lg.loss + 0.5 * lambda * w.squaredNorm();
    if (!std::isfinite(result.final_loss)) throw TrainingDiverged(trainer.iterations, result.final_loss);
    result.final_grad_norm = (lg.grad + lambda * w).norm();
    return result;
}

TrainResult train(const ModelSpec& spec, const TaskBundle& bundle, const SubsetVector& s,
                  const TrainerConfig& trainer, bool keep_trail) {
    return train_from(init_params(spec, trainer.seed, trainer.init_scale, trainer.zero_init), bundle, s, trainer,
                      keep_trail);
}

}  // namespace taskattr
