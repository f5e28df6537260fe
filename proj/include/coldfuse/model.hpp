#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "coldfuse/dataset.hpp"
#include "coldfuse/errors.hpp"
#include "coldfuse/matrix.hpp"
#include "coldfuse/param_vector.hpp"
#include "coldfuse/rng.hpp"

namespace coldfuse {

enum class Activation { Tanh, Relu };

inline std::string activation_name(Activation a) {
    return a == Activation::Tanh ? "tanh" : "relu";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation '" + s + "'");
}

// Feed-forward classifier layout: input -> hidden layers (shared body) ->
// linear head -> softmax. The body is what the protocol fuses; the head is
// task-specific.
struct ModelArch {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    Activation activation = Activation::Tanh;
    std::size_t head_dim = 0;

    void validate() const {
        if (input_dim == 0) throw InvalidArchError("input_dim must be positive");
        for (std::size_t h : hidden_dims)
            if (h == 0) throw InvalidArchError("hidden layer of dimension 0");
        if (head_dim == 0) throw InvalidArchError("head_dim must be positive");
    }

    // Width of the representation the head reads.
    std::size_t feature_dim() const {
        return hidden_dims.empty() ? input_dim : hidden_dims.back();
    }

    Manifest body_manifest() const {
        Manifest m;
        std::size_t in = input_dim;
        for (std::size_t l = 0; l < hidden_dims.size(); ++l) {
            const std::size_t out = hidden_dims[l];
            m.push_back({"body.w" + std::to_string(l), {out, in}});
            m.push_back({"body.b" + std::to_string(l), {out}});
            in = out;
        }
        return m;
    }

    Manifest head_manifest() const {
        return {{"head.w", {head_dim, feature_dim()}}, {"head.b", {head_dim}}};
    }

    std::size_t body_size() const { return manifest_elements(body_manifest()); }
    std::size_t head_size() const { return manifest_elements(head_manifest()); }

    // Same body, different label space.
    ModelArch with_head(std::size_t k) const {
        ModelArch a = *this;
        a.head_dim = k;
        return a;
    }

    bool body_compatible(const ModelArch& other) const {
        return input_dim == other.input_dim && hidden_dims == other.hidden_dims &&
               activation == other.activation;
    }
};

struct Model {
    ModelArch arch;
    ParameterVector body;
    ParameterVector head;

    void validate() const {
        arch.validate();
        if (body.manifest() != arch.body_manifest())
            throw ShapeError("model body manifest does not match arch");
        if (head.manifest() != arch.head_manifest())
            throw ShapeError("model head manifest does not match arch");
    }
};

struct TrainConfig {
    double learning_rate = 0.05;
    double lr_decay = 0.0;  // linear per-step decay
    std::size_t batch_size = 32;
    std::size_t max_examples = 10000;  // training budget, in examples
    double early_stop_delta = 0.0;
    std::size_t early_stop_window = 0;  // in examples; 0 disables early stopping
    std::uint64_t seed = 0;

    TrainConfig with_seed(std::uint64_t s) const {
        TrainConfig c = *this;
        c.seed = s;
        return c;
    }

    TrainConfig with_budget(std::size_t n) const {
        TrainConfig c = *this;
        c.max_examples = n;
        return c;
    }

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
        if (lr_decay < 0.0) throw ConfigError("lr_decay must be >= 0");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        const std::size_t total_steps =
            (max_examples + batch_size - 1) / batch_size;
        if (learning_rate - lr_decay * static_cast<double>(total_steps) < 0.0)
            throw ConfigError("lr_decay drives the learning rate negative "
                              "within the configured budget");
    }
};

// --- initialization ---------------------------------------------------------

inline ParameterVector zero_head(const ModelArch& arch) {
    arch.validate();
    return ParameterVector(arch.head_manifest(),
                           std::vector<double>(arch.head_size(), 0.0));
}

// Symmetric scaled-uniform body init keyed by seed. Weights are drawn
// uniformly from [-sqrt(6/(fan_in+fan_out)), +...]; biases start at zero.
inline ParameterVector init_body(const ModelArch& arch, std::uint64_t seed) {
    arch.validate();
    DetRng rng(mix_seed(seed, salt::init));
    std::vector<double> values(arch.body_size(), 0.0);
    std::size_t off = 0;
    std::size_t in = arch.input_dim;
    for (std::size_t out : arch.hidden_dims) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        for (std::size_t i = 0; i < out * in; ++i)
            values[off + i] = rng.uniform(-limit, limit);
        off += out * in;
        off += out;  // biases stay zero
        in = out;
    }
    return ParameterVector(arch.body_manifest(), std::move(values));
}

// Heads start at zero so an untrained model predicts the uniform
// distribution over classes.
inline Model init_model(const ModelArch& arch, std::uint64_t seed) {
    return Model{arch, init_body(arch, seed), zero_head(arch)};
}

// --- forward / backward core ------------------------------------------------

namespace detail {

struct LayerView {
    std::size_t in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;  // offsets into the flat body array
};

inline std::vector<LayerView> body_layout(const ModelArch& arch) {
    std::vector<LayerView> layers;
    std::size_t off = 0;
    std::size_t in = arch.input_dim;
    for (std::size_t out : arch.hidden_dims) {
        LayerView v;
        v.in = in;
        v.out = out;
        v.w_off = off;
        v.b_off = off + out * in;
        layers.push_back(v);
        off = v.b_off + out;
        in = out;
    }
    return layers;
}

inline double apply_act(Activation a, double z) {
    return a == Activation::Tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}

// Derivative expressed through the post-activation value.
inline double act_deriv(Activation a, double h) {
    return a == Activation::Tanh ? 1.0 - h * h : (h > 0.0 ? 1.0 : 0.0);
}

}  // namespace detail

// Forward/backward engine over flat body/head arrays. Owns the scratch
// buffers so training loops do not reallocate per batch.
class Backprop {
public:
    explicit Backprop(const ModelArch& arch)
        : arch_(arch), layers_(detail::body_layout(arch)) {}

    const ModelArch& arch() const { return arch_; }

    // logits = head(body(X)); activations for all layers are cached when
    // keep_acts is set (needed by backward).
    void forward_logits(const double* body, const double* head, const Matrix& X,
                        Matrix& logits) {
        run_forward(body, head, X, logits);
    }

    // Mean softmax cross-entropy gradient over the batch. gbody/ghead are
    // overwritten. Returns the mean loss.
    double batch_gradient(const double* body, const double* head,
                          const Matrix& X, const std::int32_t* labels,
                          std::vector<double>& gbody, std::vector<double>& ghead) {
        const std::size_t n = X.rows;
        if (n == 0) throw EmptyBatchError("gradient over an empty batch");
        const std::size_t k = arch_.head_dim;
        const std::size_t f = arch_.feature_dim();

        run_forward(body, head, X, logits_);
        gbody.assign(arch_.body_size(), 0.0);
        ghead.assign(arch_.head_size(), 0.0);

        // dlogits = (softmax - onehot) / n; loss accumulated on the side
        double loss = 0.0;
        dlogits_.resize(n, k);
        const double invn = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* z = logits_.row(i);
            double zmax = z[0];
            for (std::size_t c = 1; c < k; ++c) zmax = std::max(zmax, z[c]);
            double denom = 0.0;
            for (std::size_t c = 0; c < k; ++c) denom += std::exp(z[c] - zmax);
            const auto y = static_cast<std::size_t>(labels[i]);
            loss -= (z[y] - zmax - std::log(denom)) * invn;
            double* d = dlogits_.row(i);
            for (std::size_t c = 0; c < k; ++c)
                d[c] = (std::exp(z[c] - zmax) / denom - (c == y ? 1.0 : 0.0)) * invn;
        }

        // head grads; feats = last cached activation (or X itself)
        const Matrix& feats = layers_.empty() ? X : acts_[layers_.size() - 1];
        double* gw = ghead.data();
        double* gb = ghead.data() + k * f;
        for (std::size_t i = 0; i < n; ++i) {
            const double* d = dlogits_.row(i);
            const double* hrow = feats.row(i);
            for (std::size_t c = 0; c < k; ++c) {
                const double dc = d[c];
                if (dc == 0.0) continue;
                double* gwrow = gw + c * f;
                for (std::size_t j = 0; j < f; ++j) gwrow[j] += dc * hrow[j];
                gb[c] += dc;
            }
        }

        if (layers_.empty()) return loss;

        // delta through the head: batch x feature_dim
        delta_.resize(n, f);
        const double* hw = head;
        for (std::size_t i = 0; i < n; ++i) {
            const double* d = dlogits_.row(i);
            double* drow = delta_.row(i);
            for (std::size_t j = 0; j < f; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < k; ++c) s += d[c] * hw[c * f + j];
                drow[j] = s;
            }
        }

        for (std::size_t l = layers_.size(); l-- > 0;) {
            const auto& L = layers_[l];
            const Matrix& h_out = acts_[l];
            const Matrix& h_in = l == 0 ? X : acts_[l - 1];
            // delta through the activation
            for (std::size_t i = 0; i < n; ++i) {
                double* drow = delta_.row(i);
                const double* hrow = h_out.row(i);
                for (std::size_t j = 0; j < L.out; ++j)
                    drow[j] *= detail::act_deriv(arch_.activation, hrow[j]);
            }
            double* gwl = gbody.data() + L.w_off;
            double* gbl = gbody.data() + L.b_off;
            for (std::size_t i = 0; i < n; ++i) {
                const double* drow = delta_.row(i);
                const double* xrow = h_in.row(i);
                for (std::size_t j = 0; j < L.out; ++j) {
                    const double dj = drow[j];
                    if (dj == 0.0) continue;
                    double* gwrow = gwl + j * L.in;
                    for (std::size_t m = 0; m < L.in; ++m) gwrow[m] += dj * xrow[m];
                    gbl[j] += dj;
                }
            }
            if (l > 0) {
                // propagate delta to the previous layer
                next_delta_.resize(n, L.in);
                const double* wl = body + L.w_off;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* drow = delta_.row(i);
                    double* prow = next_delta_.row(i);
                    for (std::size_t m = 0; m < L.in; ++m) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < L.out; ++j)
                            s += drow[j] * wl[j * L.in + m];
                        prow[m] = s;
                    }
                }
                std::swap(delta_, next_delta_);
            }
        }
        return loss;
    }

    // Top-1 accuracy over the given example indices; ties go to the lowest
    // class index.
    double accuracy(const double* body, const double* head,
                    const TaskDataset& data, const std::vector<std::size_t>& idx) {
        if (idx.empty()) return 0.0;
        std::size_t correct = 0;
        xrow_.resize(1, data.input_dim);
        Matrix logits;
        for (std::size_t i : idx) {
            std::copy(data.features.row(i), data.features.row(i) + data.input_dim,
                      xrow_.row(0));
            run_forward(body, head, xrow_, logits);
            const double* z = logits.row(0);
            std::size_t best = 0;
            for (std::size_t c = 1; c < arch_.head_dim; ++c)
                if (z[c] > z[best]) best = c;
            if (best == static_cast<std::size_t>(data.labels[i])) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(idx.size());
    }

private:
    void run_forward(const double* body, const double* head, const Matrix& X,
                     Matrix& logits) {
        const std::size_t n = X.rows;
        acts_.resize(layers_.size());
        const Matrix* cur = &X;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            acts_[l].resize(n, L.out);
            const double* w = body + L.w_off;
            const double* b = body + L.b_off;
            for (std::size_t i = 0; i < n; ++i) {
                const double* xrow = cur->row(i);
                double* hrow = acts_[l].row(i);
                for (std::size_t j = 0; j < L.out; ++j) {
                    double z = b[j];
                    const double* wrow = w + j * L.in;
                    for (std::size_t m = 0; m < L.in; ++m) z += wrow[m] * xrow[m];
                    hrow[j] = detail::apply_act(arch_.activation, z);
                }
            }
            cur = &acts_[l];
        }
        const std::size_t k = arch_.head_dim;
        const std::size_t f = arch_.feature_dim();
        const double* hw = head;
        const double* hb = head + k * f;
        logits.resize(n, k);
        for (std::size_t i = 0; i < n; ++i) {
            const double* hrow = cur->row(i);
            double* zrow = logits.row(i);
            for (std::size_t c = 0; c < k; ++c) {
                double z = hb[c];
                const double* wrow = hw + c * f;
                for (std::size_t j = 0; j < f; ++j) z += wrow[j] * hrow[j];
                zrow[c] = z;
            }
        }
    }

    ModelArch arch_;
    std::vector<detail::LayerView> layers_;
    std::vector<Matrix> acts_;
    Matrix logits_, dlogits_, delta_, next_delta_, xrow_;
};

// --- public operations ------------------------------------------------------

// Class-probability matrix: one probability simplex row per example.
inline Matrix forward(const Model& model, const Matrix& batch) {
    model.validate();
    if (batch.cols != model.arch.input_dim)
        throw ShapeError("batch width " + std::to_string(batch.cols) +
                         " != input_dim " + std::to_string(model.arch.input_dim));
    Backprop bp(model.arch);
    Matrix logits;
    bp.forward_logits(model.body.values().data(), model.head.values().data(),
                      batch, logits);
    Matrix probs(batch.rows, model.arch.head_dim);
    for (std::size_t i = 0; i < batch.rows; ++i) {
        const double* z = logits.row(i);
        double* p = probs.row(i);
        double zmax = z[0];
        for (std::size_t c = 1; c < probs.cols; ++c) zmax = std::max(zmax, z[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < probs.cols; ++c) denom += std::exp(z[c] - zmax);
        for (std::size_t c = 0; c < probs.cols; ++c)
            p[c] = std::exp(z[c] - zmax) / denom;
    }
    return probs;
}

struct Gradients {
    ParameterVector body;
    ParameterVector head;
    double mean_loss = 0.0;
};

// Mean cross-entropy gradient over a batch.
inline Gradients gradient(const Model& model, const Matrix& batch,
                          const std::vector<std::int32_t>& labels) {
    model.validate();
    if (batch.rows == 0) throw EmptyBatchError("gradient over an empty batch");
    if (batch.cols != model.arch.input_dim)
        throw ShapeError("batch width mismatch");
    if (labels.size() != batch.rows)
        throw ShapeError("label count does not match batch");
    for (std::int32_t y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= model.arch.head_dim)
            throw LabelSpaceError("label out of range for head");
    Backprop bp(model.arch);
    std::vector<double> gbody, ghead;
    const double loss =
        bp.batch_gradient(model.body.values().data(), model.head.values().data(),
                          batch, labels.data(), gbody, ghead);
    return Gradients{ParameterVector(model.arch.body_manifest(), std::move(gbody)),
                     ParameterVector(model.arch.head_manifest(), std::move(ghead)),
                     loss};
}

namespace detail {

// Epoch-shuffled batch cursor over a task's train split. Batches never span
// epoch boundaries; the final batch of an epoch may be short.
class BatchStream {
public:
    BatchStream(const std::vector<std::size_t>& train_idx, std::size_t batch_size,
                std::uint64_t seed)
        : order_(train_idx), batch_size_(batch_size), rng_(seed) {
        rng_.shuffle(order_);
    }

    // Up to min(batch_size, remaining in epoch, max_take) example indices.
    std::vector<std::size_t> next(std::size_t max_take) {
        if (cursor_ == order_.size()) {
            rng_.shuffle(order_);
            cursor_ = 0;
        }
        const std::size_t take =
            std::min({batch_size_, order_.size() - cursor_, max_take});
        std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                       order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
        cursor_ += take;
        return batch;
    }

private:
    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t cursor_ = 0;
    DetRng rng_;
};

inline std::uint64_t train_stream_seed(const TrainConfig& cfg, std::size_t slot) {
    return mix_seed(cfg.seed, salt::train, slot);
}

// Dev-accuracy early stopper: stop when the improvement over one window of
// examples falls below delta.
class EarlyStopper {
public:
    EarlyStopper(const TrainConfig& cfg, bool has_dev)
        : enabled_(cfg.early_stop_window > 0 && has_dev),
          window_(cfg.early_stop_window), delta_(cfg.early_stop_delta) {}

    bool enabled() const { return enabled_; }

    void prime(double baseline_acc) {
        last_acc_ = baseline_acc;
        next_check_ = window_;
    }

    bool due(std::size_t examples_seen) const {
        return enabled_ && examples_seen >= next_check_;
    }

    // true => stop
    bool check(std::size_t examples_seen, double acc) {
        const bool stop = acc - last_acc_ < delta_;
        last_acc_ = acc;
        while (next_check_ <= examples_seen) next_check_ += window_;
        return stop;
    }

private:
    bool enabled_ = false;
    std::size_t window_ = 0;
    double delta_ = 0.0;
    double last_acc_ = 0.0;
    std::size_t next_check_ = 0;
};

inline void gather_batch(const TaskDataset& data,
                         const std::vector<std::size_t>& idx, Matrix& X,
                         std::vector<std::int32_t>& y) {
    X.resize(idx.size(), data.input_dim);
    y.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* src = data.features.row(idx[i]);
        std::copy(src, src + data.input_dim, X.row(i));
        y[i] = data.labels[idx[i]];
    }
}

inline void sgd_step(std::vector<double>& params, const std::vector<double>& grad,
                     double lr) {
    if (lr == 0.0) return;  // keeps parameter bits untouched at zero step size
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

// Shared SGD loop for finetune (update_body) and linear_probe (!update_body).
// Mutates body/head in place; returns the number of training examples
// actually consumed (early stopping may cut the budget short).
inline std::size_t train_core(const ModelArch& arch, std::vector<double>& body,
                              std::vector<double>& head, const TaskDataset& data,
                              const TrainConfig& cfg, bool update_body) {
    cfg.validate();
    if (arch.head_dim != data.n_classes)
        throw LabelSpaceError("head dimension " + std::to_string(arch.head_dim) +
                              " != label-space size " +
                              std::to_string(data.n_classes));
    if (data.input_dim != arch.input_dim)
        throw ShapeError("dataset width does not match arch input_dim");
    if (cfg.max_examples == 0) return 0;
    if (data.train_idx.empty()) throw DataError(data.task_id + ": empty train split");

    Backprop bp(arch);
    BatchStream stream(data.train_idx, cfg.batch_size, train_stream_seed(cfg, 0));
    EarlyStopper stopper(cfg, !data.dev_idx.empty());
    if (stopper.enabled())
        stopper.prime(bp.accuracy(body.data(), head.data(), data, data.dev_idx));

    Matrix X;
    std::vector<std::int32_t> y;
    std::vector<double> gbody, ghead;
    std::size_t seen = 0;
    std::size_t step = 0;
    while (seen < cfg.max_examples) {
        const auto batch = stream.next(cfg.max_examples - seen);
        gather_batch(data, batch, X, y);
        const double lr = std::max(
            0.0, cfg.learning_rate - cfg.lr_decay * static_cast<double>(step));
        bp.batch_gradient(body.data(), head.data(), X, y.data(), gbody, ghead);
        if (update_body) sgd_step(body, gbody, lr);
        sgd_step(head, ghead, lr);
        seen += batch.size();
        ++step;
        if (stopper.due(seen) && seen < cfg.max_examples) {
            const double acc = bp.accuracy(body.data(), head.data(), data, data.dev_idx);
            if (stopper.check(seen, acc)) break;
        }
    }
    return seen;
}

}  // namespace detail

struct FinetuneResult {
    Model model;
    std::size_t examples_seen = 0;
};

// SGD finetuning from `start`; the input model is unmodified. Bit-
// deterministic given (start, data, cfg).
inline FinetuneResult finetune_stats(const Model& start, const TaskDataset& data,
                                     const TrainConfig& cfg) {
    start.validate();
    std::vector<double> body = start.body.values();
    std::vector<double> head = start.head.values();
    const std::size_t seen =
        detail::train_core(start.arch, body, head, data, cfg, /*update_body=*/true);
    return FinetuneResult{
        Model{start.arch,
              ParameterVector(start.arch.body_manifest(), std::move(body)),
              ParameterVector(start.arch.head_manifest(), std::move(head))},
        seen};
}

inline Model finetune(const Model& start, const TaskDataset& data,
                      const TrainConfig& cfg) {
    return finetune_stats(start, data, cfg).model;
}

struct ProbeResult {
    ParameterVector head;
    double dev_accuracy = 0.0;
};

// Trains only a fresh zero-initialized classification head on the frozen
// body (linear probing). The body is never written.
inline ProbeResult linear_probe(const ParameterVector& body, const ModelArch& archIn,
                                const TaskDataset& data, const TrainConfig& cfg) {
    const ModelArch arch = archIn.with_head(data.n_classes);
    arch.validate();
    if (body.manifest() != arch.body_manifest())
        throw ShapeError("body manifest does not match arch");
    std::vector<double> body_copy = body.values();
    std::vector<double> head(arch.head_size(), 0.0);
    detail::train_core(arch, body_copy, head, data, cfg, /*update_body=*/false);
    Backprop bp(arch);
    const auto& eval_idx = data.dev_idx.empty() ? data.train_idx : data.dev_idx;
    const double acc = bp.accuracy(body.values().data(), head.data(), data, eval_idx);
    return ProbeResult{ParameterVector(arch.head_manifest(), std::move(head)), acc};
}

// Test-split accuracy of (body, head) on a task.
inline double test_accuracy(const ModelArch& archIn, const ParameterVector& body,
                            const ParameterVector& head, const TaskDataset& data) {
    const ModelArch arch = archIn.with_head(data.n_classes);
    Backprop bp(arch);
    return bp.accuracy(body.values().data(), head.values().data(), data,
                       data.test_idx);
}

}  // namespace coldfuse
