#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "coattn/tensor.hpp"

namespace coattn {

// 3D convolution geometry: kernel/stride/padding per (t, h, w) axis.
struct Conv3dSpec {
    int64_t out_channels = 1;
    std::array<int64_t, 3> kernel{1, 1, 1};
    std::array<int64_t, 3> stride{1, 1, 1};
    std::array<int64_t, 3> padding{0, 0, 0};
    bool has_bias = true;
};

// floor((in + 2p - k) / s) + 1
int64_t conv_extent(int64_t in, int64_t k, int64_t s, int64_t p);

// x: [B, T, H, W, Cin], weights: [kt, kh, kw, Cin, Cout], bias: [Cout].
// Cross-correlation with zero padding.
Tensor conv3d(const Tensor& x, const Conv3dSpec& spec, const Tensor& weights, const Tensor& bias);
Tensor avgpool3d(const Tensor& x, const std::array<int64_t, 3>& window,
                 const std::array<int64_t, 3>& stride);

// x: [.., in] -> [.., out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalizes the trailing dimension to mean 0 / population variance 1,
// then applies gamma * xhat + beta. eps only guards degenerate rows; it is
// small enough that output variance stays within 1e-6 of 1 for input
// variance >= 1e-3.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-10);

enum class Mode { train, eval };

// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
Tensor dropout(const Tensor& x, double p, Mode mode, std::mt19937_64& rng);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& labels);

// ---- parameters ----

struct ParamEntry {
    std::string name;
    Tensor tensor; // aliases the model's buffers
    bool decay = true;
};

class ParamRegistry {
public:
    Tensor& add(const std::string& name, Tensor t, bool decay = true);
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<ParamEntry>& entries() { return entries_; }
    const ParamEntry* find(const std::string& name) const;
    int64_t total_elements() const;
    void zero_grad();

private:
    std::vector<ParamEntry> entries_;
};

// He-normal: std = sqrt(2 / fan_in). For conv/linear weights feeding relu.
Tensor he_normal(const Shape& shape, int64_t fan_in, std::mt19937_64& rng);
// Xavier-uniform: limit = sqrt(6 / (fan_in + fan_out)). For attention projections.
Tensor xavier_uniform(const Shape& shape, int64_t fan_in, int64_t fan_out, std::mt19937_64& rng);

// ---- optimizers ----

enum class OptKind { sgd_momentum, adam };

struct OptimizerConfig {
    OptKind kind = OptKind::sgd_momentum;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double epsilon = 1e-8;
    bool decay_biases = false; // whether weight decay touches no-decay params
};

class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    // sgd_momentum: v <- mu*v + (g + lambda*theta); theta <- theta - lr*v
    // adam: bias-corrected first/second moments, eps inside the sqrt denominator
    void step(ParamRegistry& params);

    int64_t step_count() const { return step_count_; }
    OptimizerConfig& config() { return cfg_; }
    const OptimizerConfig& config() const { return cfg_; }

private:
    void ensure_state(const ParamRegistry& params);
    OptimizerConfig cfg_;
    int64_t step_count_ = 0;
    std::vector<std::vector<double>> m1_; // momentum / first moment
    std::vector<std::vector<double>> m2_; // second moment (adam)
};

// Like grad_check, but for a parameter already wired into a larger graph:
// loss_fn() is re-evaluated while the parameter's data is nudged in place.
double grad_check_param(const std::function<Tensor()>& loss_fn, Tensor param, double eps = 1e-5);

} // namespace coattn
