#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "coattn/errors.hpp"

namespace coattn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense row-major tensor of doubles. Data and grad buffers are shared
// between copies, so a copy is a cheap alias of the same storage.
// requires_grad implies a live grad buffer of the same element count.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;
    bool requires_grad = false;
    Tape* tape = nullptr; // tape this tensor is a node of (stale once the tape dies)
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::shared_ptr<std::vector<double>> d);

    int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    double* ptr() { return data->data(); }
    const double* ptr() const { return data->data(); }
    double item() const;

    // Allocates (or drops) the grad buffer.
    void set_requires_grad(bool on);
    void zero_grad();

    // Deep copy of the data buffer; grad tracking is not copied.
    Tensor clone() const;
    // Same data buffer, no grad/tape state.
    Tensor detached() const;
};

Tensor zeros(const Shape& shape);
Tensor full(const Shape& shape, double value);
Tensor from_data(const Shape& shape, std::vector<double> values);
Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0, double mean = 0.0);
Tensor rand_uniform(const Shape& shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0);

// Dynamically recorded operation tape for reverse-mode differentiation.
// Constructing a Tape makes it the active tape of the current thread;
// destruction restores the previous one. Ops record themselves while a
// tape is active and some input requires a gradient.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    // Node id of t on this tape, registering a leaf on first sight.
    // Leaves with requires_grad share the tensor's own grad buffer.
    int bind(const Tensor& t);
    // Registers an op result and stamps tape/node into it.
    int add_result(Tensor& out, bool needs_grad);
    void record(std::function<void(Tape&)> backward_fn);

    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    std::vector<double>& grad_buf(int id);
    size_t op_count() const { return ops_.size(); }

    void run_backward(const Tensor& loss);

private:
    struct Node {
        std::shared_ptr<std::vector<double>> value;
        std::shared_ptr<std::vector<double>> grad;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;
    std::vector<std::function<void(Tape&)>> ops_;
    std::unordered_map<const void*, int> bound_;
    Tape* prev_ = nullptr;
};

// ---- differentiable operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& new_shape);
Tensor flatten(const Tensor& x);
Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t lo, int64_t hi);
Tensor mean_axis(const Tensor& x, int64_t axis);
Tensor sum_all(const Tensor& x);

// Seeds d(loss)/d(loss) = 1 and sweeps the recorded ops in reverse,
// accumulating into every requires_grad leaf.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central_difference| / max(1, |analytic|).
// f must be scalar-valued; evaluations for the numeric side run untaped.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

} // namespace coattn
