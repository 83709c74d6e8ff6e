#include "coattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "coattn/parallel.hpp"

namespace coattn {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i)
        strides[i] = strides[i + 1] * shape[i + 1];
    return strides;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

static void check_shape(const Shape& shape) {
    for (int64_t e : shape)
        if (e < 1) throw ShapeMismatch("non-positive extent in " + shape_str(shape));
}

Tensor::Tensor(Shape s, std::shared_ptr<std::vector<double>> d)
    : shape(std::move(s)), data(std::move(d)) {
    check_shape(shape);
    if (shape_numel(shape) != numel())
        throw ShapeMismatch("shape " + shape_str(shape) + " does not cover buffer of " +
                            std::to_string(numel()) + " elements");
}

double Tensor::item() const {
    if (numel() != 1) throw NotScalar("tensor has " + std::to_string(numel()) + " elements");
    return (*data)[0];
}

void Tensor::set_requires_grad(bool on) {
    requires_grad = on;
    if (on) {
        if (!grad || grad->size() != data->size())
            grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
    } else {
        grad.reset();
    }
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor out(shape, std::make_shared<std::vector<double>>(*data));
    return out;
}

Tensor Tensor::detached() const {
    Tensor out;
    out.shape = shape;
    out.data = data;
    return out;
}

Tensor zeros(const Shape& shape) {
    check_shape(shape);
    return Tensor(shape, std::make_shared<std::vector<double>>(shape_numel(shape), 0.0));
}

Tensor full(const Shape& shape, double value) {
    check_shape(shape);
    return Tensor(shape, std::make_shared<std::vector<double>>(shape_numel(shape), value));
}

Tensor from_data(const Shape& shape, std::vector<double> values) {
    check_shape(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
        throw ShapeMismatch("value count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
    return Tensor(shape, std::make_shared<std::vector<double>>(std::move(values)));
}

Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev, double mean) {
    Tensor t = zeros(shape);
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : *t.data) v = dist(rng);
    return t;
}

Tensor rand_uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t = zeros(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : *t.data) v = dist(rng);
    return t;
}

// ---- tape ----

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

int Tape::bind(const Tensor& t) {
    if (t.tape == this && t.node >= 0) return t.node;
    auto it = bound_.find(static_cast<const void*>(t.data.get()));
    if (it != bound_.end()) return it->second;
    Node n;
    n.value = t.data;
    n.needs_grad = t.requires_grad;
    if (t.requires_grad) {
        if (!t.grad) throw DetachedGraph("requires_grad tensor without grad buffer");
        n.grad = t.grad;
    }
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(n));
    bound_.emplace(static_cast<const void*>(t.data.get()), id);
    return id;
}

int Tape::add_result(Tensor& out, bool needs_grad) {
    Node n;
    n.value = out.data;
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = std::make_shared<std::vector<double>>(out.data->size(), 0.0);
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(n));
    bound_.emplace(static_cast<const void*>(out.data.get()), id);
    out.tape = this;
    out.node = id;
    out.requires_grad = needs_grad;
    return id;
}

void Tape::record(std::function<void(Tape&)> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

std::vector<double>& Tape::grad_buf(int id) {
    return *nodes_[id].grad;
}

void Tape::run_backward(const Tensor& loss) {
    if (loss.numel() != 1) throw NotScalar("loss has " + std::to_string(loss.numel()) + " elements");
    // the node must exist here and hold the loss's buffer; a stale tape
    // pointer can alias a new tape's address after stack reuse
    if (loss.tape != this || loss.node < 0 ||
        loss.node >= static_cast<int>(nodes_.size()) || nodes_[loss.node].value != loss.data)
        throw DetachedGraph("loss is not a node of the active tape");
    if (!nodes_[loss.node].needs_grad)
        throw DetachedGraph("loss does not depend on any requires_grad tensor");
    (*nodes_[loss.node].grad)[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
}

void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t || loss.tape != t) throw DetachedGraph("no active tape holds the loss");
    t->run_backward(loss);
}

// True when the op should be recorded; fills node ids for inputs.
static Tape* taping(std::initializer_list<const Tensor*> ins, std::vector<int>& ids) {
    Tape* tp = Tape::active();
    if (!tp) return nullptr;
    bool any = false;
    for (const Tensor* t : ins) {
        if (t->requires_grad || (t->tape == tp && t->node >= 0 && tp->needs_grad(t->node)))
            any = true;
    }
    if (!any) return nullptr;
    ids.clear();
    for (const Tensor* t : ins) ids.push_back(tp->bind(*t));
    return tp;
}

// ---- matmul ----

// c[n,p] += a[n,k] * b[k,p]
static void mm_accum(const double* a, const double* b, double* c, int64_t n, int64_t k,
                     int64_t p) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * p;
        for (int64_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            const double* brow = b + kk * p;
            for (int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[n,p] += a[n,k] * b[p,k]^T
static void mm_accum_nt(const double* a, const double* b, double* c, int64_t n, int64_t k,
                        int64_t p) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * p;
        for (int64_t j = 0; j < p; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// c[k,p] += a[n,k]^T * b[n,p]
static void mm_accum_tn(const double* a, const double* b, double* c, int64_t n, int64_t k,
                        int64_t p) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * p;
        for (int64_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            double* crow = c + kk * p;
            for (int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeMismatch("matmul needs rank >= 2, got " + shape_str(a.shape) + " x " +
                            shape_str(b.shape));
    int64_t n = a.shape[a.rank() - 2], k = a.shape[a.rank() - 1];
    int64_t kb = b.shape[b.rank() - 2], p = b.shape[b.rank() - 1];
    if (k != kb)
        throw ShapeMismatch("inner dims differ: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    Shape abatch(a.shape.begin(), a.shape.end() - 2);
    Shape bbatch(b.shape.begin(), b.shape.end() - 2);
    if (!abatch.empty() && !bbatch.empty() && abatch != bbatch)
        throw ShapeMismatch("batch dims conflict: " + shape_str(a.shape) + " x " +
                            shape_str(b.shape));
    Shape batch = abatch.empty() ? bbatch : abatch;
    int64_t nb = shape_numel(batch);
    bool a_bcast = abatch.empty() && !bbatch.empty();
    bool b_bcast = bbatch.empty() && !abatch.empty();

    Shape out_shape = batch;
    out_shape.push_back(n);
    out_shape.push_back(p);
    Tensor out = zeros(out_shape);

    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* cp = out.ptr();
    int64_t mm_work = nb * n * k * p;
    parallel_for(nb, mm_work, [&](int64_t lo, int64_t hi) {
        for (int64_t bi = lo; bi < hi; ++bi)
            mm_accum(ap + (a_bcast ? 0 : bi * n * k), bp + (b_bcast ? 0 : bi * k * p),
                     cp + bi * n * p, n, k, p);
    });

    std::vector<int> ids;
    if (Tape* tp = taping({&a, &b}, ids)) {
        int na = ids[0], nbid = ids[1], nc = tp->add_result(out, true);
        auto adata = a.data, bdata = b.data;
        tp->record([=](Tape& t) {
            const std::vector<double>& gc = t.grad_buf(nc);
            if (t.needs_grad(na)) {
                std::vector<double>& ga = t.grad_buf(na);
                if (a_bcast) {
                    // da[n,k] += sum_batch gc * b^T; serial over batch, accumulation order fixed
                    for (int64_t bi = 0; bi < nb; ++bi)
                        mm_accum_nt(gc.data() + bi * n * p, bdata->data() + bi * k * p, ga.data(),
                                    n, p, k);
                } else {
                    parallel_for(nb, nb * n * k * p, [&](int64_t lo, int64_t hi) {
                        for (int64_t bi = lo; bi < hi; ++bi)
                            mm_accum_nt(gc.data() + bi * n * p,
                                        bdata->data() + (b_bcast ? 0 : bi * k * p),
                                        ga.data() + bi * n * k, n, p, k);
                    });
                }
            }
            if (t.needs_grad(nbid)) {
                std::vector<double>& gb = t.grad_buf(nbid);
                if (b_bcast) {
                    for (int64_t bi = 0; bi < nb; ++bi)
                        mm_accum_tn(adata->data() + bi * n * k, gc.data() + bi * n * p, gb.data(),
                                    n, k, p);
                } else {
                    parallel_for(nb, nb * n * k * p, [&](int64_t lo, int64_t hi) {
                        for (int64_t bi = lo; bi < hi; ++bi)
                            mm_accum_tn(adata->data() + (a_bcast ? 0 : bi * n * k),
                                        gc.data() + bi * n * p, gb.data() + bi * k * p, n, k, p);
                    });
                }
            }
        });
    }
    return out;
}

// ---- softmax ----

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw EmptyAxis("softmax needs rank >= 1");
    int64_t n = x.shape[x.rank() - 1];
    if (n == 0) throw EmptyAxis("softmax over empty axis");
    int64_t rows = x.numel() / n;
    Tensor out = zeros(x.shape);
    const double* xp = x.ptr();
    double* op = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xp + r * n;
        double* orow = op + r * n;
        double m = xr[0];
        for (int64_t i = 1; i < n; ++i) m = std::max(m, xr[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            orow[i] = std::exp(xr[i] - m);
            sum += orow[i];
        }
        for (int64_t i = 0; i < n; ++i) orow[i] /= sum;
    }

    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], ny = tp->add_result(out, true);
        auto ydata = out.data;
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gy = t.grad_buf(ny);
            std::vector<double>& gx = t.grad_buf(nx);
            const double* y = ydata->data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = y + r * n;
                const double* gyr = gy.data() + r * n;
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i) dot += yr[i] * gyr[i];
                double* gxr = gx.data() + r * n;
                for (int64_t i = 0; i < n; ++i) gxr[i] += yr[i] * (gyr[i] - dot);
            }
        });
    }
    return out;
}

// ---- elementwise ----

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape) + " vs " +
                            shape_str(b.shape));
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = zeros(a.shape);
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.ptr();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    std::vector<int> ids;
    if (Tape* tp = taping({&a, &b}, ids)) {
        int na = ids[0], nb = ids[1], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            const std::vector<double>& gc = t.grad_buf(nc);
            if (t.needs_grad(na)) {
                std::vector<double>& ga = t.grad_buf(na);
                for (int64_t i = 0; i < n; ++i) ga[i] += gc[i];
            }
            if (t.needs_grad(nb)) {
                std::vector<double>& gb = t.grad_buf(nb);
                for (int64_t i = 0; i < n; ++i) gb[i] += gc[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = zeros(a.shape);
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.ptr();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i];
    std::vector<int> ids;
    if (Tape* tp = taping({&a, &b}, ids)) {
        int na = ids[0], nb = ids[1], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            const std::vector<double>& gc = t.grad_buf(nc);
            if (t.needs_grad(na)) {
                std::vector<double>& ga = t.grad_buf(na);
                for (int64_t i = 0; i < n; ++i) ga[i] += gc[i];
            }
            if (t.needs_grad(nb)) {
                std::vector<double>& gb = t.grad_buf(nb);
                for (int64_t i = 0; i < n; ++i) gb[i] -= gc[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = zeros(a.shape);
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.ptr();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
    std::vector<int> ids;
    if (Tape* tp = taping({&a, &b}, ids)) {
        int na = ids[0], nb = ids[1], nc = tp->add_result(out, true);
        auto adata = a.data, bdata = b.data;
        tp->record([=](Tape& t) {
            const std::vector<double>& gc = t.grad_buf(nc);
            if (t.needs_grad(na)) {
                std::vector<double>& ga = t.grad_buf(na);
                const double* bv = bdata->data();
                for (int64_t i = 0; i < n; ++i) ga[i] += gc[i] * bv[i];
            }
            if (t.needs_grad(nb)) {
                std::vector<double>& gb = t.grad_buf(nb);
                const double* av = adata->data();
                for (int64_t i = 0; i < n; ++i) gb[i] += gc[i] * av[i];
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, double b) {
    Tensor out = zeros(a.shape);
    const double* ap = a.ptr();
    double* op = out.ptr();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + b;
    std::vector<int> ids;
    if (Tape* tp = taping({&a}, ids)) {
        int na = ids[0], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(na)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& ga = t.grad_buf(na);
            for (int64_t i = 0; i < n; ++i) ga[i] += gc[i];
        });
    }
    return out;
}

Tensor sub(const Tensor& a, double b) { return add(a, -b); }

Tensor mul(const Tensor& a, double b) { return scale(a, b); }

Tensor scale(const Tensor& a, double c) {
    Tensor out = zeros(a.shape);
    const double* ap = a.ptr();
    double* op = out.ptr();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * c;
    std::vector<int> ids;
    if (Tape* tp = taping({&a}, ids)) {
        int na = ids[0], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(na)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& ga = t.grad_buf(na);
            for (int64_t i = 0; i < n; ++i) ga[i] += gc[i] * c;
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = zeros(x.shape);
    const double* xp = x.ptr();
    double* op = out.ptr();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0.0 ? xp[i] : 0.0;
    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], nc = tp->add_result(out, true);
        auto xdata = x.data;
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            const double* xv = xdata->data();
            // subgradient 0 at exactly 0
            for (int64_t i = 0; i < n; ++i)
                if (xv[i] > 0.0) gx[i] += gc[i];
        });
    }
    return out;
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, const Shape& new_shape) {
    check_shape(new_shape);
    if (shape_numel(new_shape) != x.numel())
        throw ShapeMismatch("reshape " + shape_str(x.shape) + " -> " + shape_str(new_shape));
    Tensor out(new_shape, std::make_shared<std::vector<double>>(*x.data));
    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], nc = tp->add_result(out, true);
        int64_t n = x.numel();
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t i = 0; i < n; ++i) gx[i] += gc[i];
        });
    }
    return out;
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm) {
    int64_t r = x.rank();
    if (static_cast<int64_t>(perm.size()) != r)
        throw InvalidPermutation("perm size " + std::to_string(perm.size()) + " vs rank " +
                                 std::to_string(r));
    std::vector<bool> seen(r, false);
    for (int64_t p : perm) {
        if (p < 0 || p >= r || seen[p]) throw InvalidPermutation("bad perm entry");
        seen[p] = true;
    }
    Shape out_shape(r);
    for (int64_t i = 0; i < r; ++i) out_shape[i] = x.shape[perm[i]];
    Tensor out = zeros(out_shape);

    auto in_strides = row_major_strides(x.shape);
    auto out_strides = row_major_strides(out_shape);
    // out index i maps to in stride of axis perm[i]
    std::vector<int64_t> map_stride(r);
    for (int64_t i = 0; i < r; ++i) map_stride[i] = in_strides[perm[i]];

    int64_t n = x.numel();
    const double* xp = x.ptr();
    double* op = out.ptr();
    std::vector<int64_t> idx(r, 0);
    for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        int64_t rem = o;
        for (int64_t i = 0; i < r; ++i) {
            int64_t c = rem / out_strides[i];
            rem %= out_strides[i];
            src += c * map_stride[i];
        }
        op[o] = xp[src];
    }

    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t o = 0; o < n; ++o) {
                int64_t src = 0;
                int64_t rem = o;
                for (int64_t i = 0; i < r; ++i) {
                    int64_t c = rem / out_strides[i];
                    rem %= out_strides[i];
                    src += c * map_stride[i];
                }
                gx[src] += gc[o];
            }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
    int64_t r = parts[0].rank();
    if (axis < 0 || axis >= r) throw AxisOutOfRange("concat axis " + std::to_string(axis));
    Shape out_shape = parts[0].shape;
    int64_t total = parts[0].shape[axis];
    for (size_t i = 1; i < parts.size(); ++i) {
        if (parts[i].rank() != r) throw ShapeMismatch("concat rank mismatch");
        for (int64_t d = 0; d < r; ++d)
            if (d != axis && parts[i].shape[d] != out_shape[d])
                throw ShapeMismatch("concat extent mismatch on axis " + std::to_string(d));
        total += parts[i].shape[axis];
    }
    out_shape[axis] = total;
    Tensor out = zeros(out_shape);

    // outer x axis x inner layout
    int64_t outer = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
    int64_t inner = 1;
    for (int64_t d = axis + 1; d < r; ++d) inner *= out_shape[d];

    double* op = out.ptr();
    std::vector<int64_t> offsets(parts.size());
    {
        int64_t off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            offsets[pi] = off;
            int64_t ext = parts[pi].shape[axis];
            const double* xp = parts[pi].ptr();
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(op + (o * total + off) * inner, xp + o * ext * inner,
                            sizeof(double) * ext * inner);
            off += ext;
        }
    }

    std::vector<const Tensor*> refs;
    refs.reserve(parts.size());
    for (const Tensor& p : parts) refs.push_back(&p);
    Tape* tp = Tape::active();
    bool any = false;
    if (tp)
        for (const Tensor* p : refs)
            if (p->requires_grad || (p->tape == tp && p->node >= 0 && tp->needs_grad(p->node)))
                any = true;
    if (tp && any) {
        std::vector<int> in_ids;
        std::vector<int64_t> exts;
        for (const Tensor& p : parts) {
            in_ids.push_back(tp->bind(p));
            exts.push_back(p.shape[axis]);
        }
        int nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            const std::vector<double>& gc = t.grad_buf(nc);
            for (size_t pi = 0; pi < in_ids.size(); ++pi) {
                if (!t.needs_grad(in_ids[pi])) continue;
                std::vector<double>& gx = t.grad_buf(in_ids[pi]);
                int64_t ext = exts[pi], off = offsets[pi];
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = gc.data() + (o * total + off) * inner;
                    double* dst = gx.data() + o * ext * inner;
                    for (int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t lo, int64_t hi) {
    int64_t r = x.rank();
    if (axis < 0 || axis >= r) throw AxisOutOfRange("slice axis " + std::to_string(axis));
    if (lo < 0 || hi > x.shape[axis] || lo >= hi)
        throw AxisOutOfRange("slice range [" + std::to_string(lo) + "," + std::to_string(hi) +
                             ") on extent " + std::to_string(x.shape[axis]));
    Shape out_shape = x.shape;
    out_shape[axis] = hi - lo;
    Tensor out = zeros(out_shape);

    int64_t outer = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= x.shape[d];
    int64_t inner = 1;
    for (int64_t d = axis + 1; d < r; ++d) inner *= x.shape[d];
    int64_t ext = x.shape[axis], len = hi - lo;

    const double* xp = x.ptr();
    double* op = out.ptr();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(op + o * len * inner, xp + (o * ext + lo) * inner, sizeof(double) * len * inner);

    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = gc.data() + o * len * inner;
                double* dst = gx.data() + (o * ext + lo) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor mean_axis(const Tensor& x, int64_t axis) {
    int64_t r = x.rank();
    if (axis < 0 || axis >= r) throw AxisOutOfRange("mean axis " + std::to_string(axis));
    Shape out_shape;
    for (int64_t d = 0; d < r; ++d)
        if (d != axis) out_shape.push_back(x.shape[d]);
    int64_t ext = x.shape[axis];
    int64_t outer = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= x.shape[d];
    int64_t inner = 1;
    for (int64_t d = axis + 1; d < r; ++d) inner *= x.shape[d];

    Tensor out = zeros(out_shape);
    const double* xp = x.ptr();
    double* op = out.ptr();
    double inv = 1.0 / static_cast<double>(ext);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t e = 0; e < ext; ++e) {
            const double* src = xp + (o * ext + e) * inner;
            double* dst = op + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
        }

    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t e = 0; e < ext; ++e) {
                    const double* src = gc.data() + o * inner;
                    double* dst = gx.data() + (o * ext + e) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
                }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor out = zeros(Shape{});
    const double* xp = x.ptr();
    double acc = 0.0;
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += xp[i];
    (*out.data)[0] = acc;
    std::vector<int> ids;
    if (Tape* tp = taping({&x}, ids)) {
        int nx = ids[0], nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            double g = t.grad_buf(nc)[0];
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

// ---- gradient checking ----

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, double eps) {
    Tensor x = x0.clone();
    x.set_requires_grad(true);

    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(x);
        if (y.numel() != 1) throw NotScalar("grad_check target must be scalar-valued");
        if (!std::isfinite(y.item())) throw NonFinite("f(x) is not finite");
        backward(y);
        analytic = *x.grad;
    }

    double max_err = 0.0;
    int64_t n = x.numel();
    std::vector<double>& xd = *x.data;
    Tensor probe = x.detached(); // untaped view sharing the mutated buffer
    for (int64_t i = 0; i < n; ++i) {
        double orig = xd[i];
        xd[i] = orig + eps;
        double fp = f(probe).item();
        xd[i] = orig - eps;
        double fm = f(probe).item();
        xd[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NonFinite("f not finite near x at coordinate " + std::to_string(i));
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace coattn
