#include "kblam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_set>

#include <Eigen/Dense>

#include "kblam/error.hpp"

namespace kblam {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    double* grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad.data();
    }
};

} // namespace detail

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_checked = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

std::size_t product(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_2d(const char* op, const Tensor& a) {
    if (a.shape().size() != 2)
        throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(a.shape()));
}

} // namespace

std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---- Tensor -------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = product(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (product(shape) != data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> d(product(shape));
    for (double& x : d) x = stddev * rng.normal();
    return from(std::move(shape), std::move(d), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::size_t Tensor::rows() const { return node_->shape.size() >= 2 ? node_->shape[0] : 1; }
std::size_t Tensor::cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
std::span<double> Tensor::data() { return node_->value; }
std::span<const double> Tensor::data() const { return node_->value; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!node_->leaf) throw Error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
}

bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::grad_mut() { return {node_->grad_buffer(), node_->value.size()}; }

void Tensor::zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

void Tensor::clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }

// ---- graph --------------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents, BackwardFn backward) {
    if (product(shape) != value.size())
        throw ShapeError("op result length does not match shape " + shape_string(shape));
    if (g_checked)
        for (double x : value)
            if (!std::isfinite(x)) throw NumericError("non-finite value produced by op of shape " + shape_string(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->leaf = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node_ptr());
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

void backward(Tensor& loss) {
    auto* root = loss.node();
    if (!root) throw Error("backward on an undefined tensor");
    if (root->consumed) throw Error("backward called twice on the same graph; re-run forward first");
    if (root->value.size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_string(root->shape));
    if (!root->requires_grad) throw Error("backward: loss does not depend on any tensor requiring grad");

    // iterative post-order DFS gives a topological order
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && !p->leaf && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad.assign(1, 1.0);
    std::vector<double*> parent_grads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (!node->backward || node->grad.empty()) continue;
        parent_grads.clear();
        for (auto& p : node->parents) parent_grads.push_back(p->requires_grad ? p->grad_buffer() : nullptr);
        node->backward(node->grad, parent_grads);
    }
    for (detail::Node* node : order) {
        node->grad.clear();
        node->grad.shrink_to_fit();
        node->backward = nullptr;
        node->parents.clear();
        node->consumed = true;
    }
}

// ---- ops ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    std::vector<double> out(n * m);
    MMap(out.data(), n, m).noalias() = CMap(a.data().data(), n, k) * CMap(b.data().data(), k, m);
    return make_op({n, m}, std::move(out), {a, b},
                   [a, b, n, k, m](std::span<const double> g, std::span<double* const> pg) {
                       CMap G(g.data(), n, m);
                       if (pg[0]) MMap(pg[0], n, k).noalias() += G * CMap(b.data().data(), k, m).transpose();
                       if (pg[1]) MMap(pg[1], k, m).noalias() += CMap(a.data().data(), n, k).transpose() * G;
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](std::span<const double> g, std::span<double* const> pg) {
        for (double* p : pg)
            if (p)
                for (std::size_t i = 0; i < g.size(); ++i) p[i] += g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g, std::span<double* const> pg) {
        auto x = a.data(), y = b.data();
        if (pg[0])
            for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * y[i];
        if (pg[1])
            for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] += g[i] * x[i];
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& x : out) x *= s;
    return make_op(a.shape(), std::move(out), {a}, [s](std::span<const double> g, std::span<double* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += s * g[i];
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    const std::size_t n = a.numel();
    return make_op({1}, {s}, {a}, [n](std::span<const double> g, std::span<double* const> pg) {
        for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0];
    });
}

Tensor softmax_rows(const Tensor& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * cols;
        double* o = out.data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
    auto probs = std::make_shared<std::vector<double>>(out);
    return make_op(a.shape(), std::move(out), {a},
                   [probs, rows, cols](std::span<const double> g, std::span<double* const> pg) {
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* p = probs->data() + r * cols;
                           const double* gr = g.data() + r * cols;
                           double dot = 0.0;
                           for (std::size_t c = 0; c < cols; ++c) dot += p[c] * gr[c];
                           for (std::size_t c = 0; c < cols; ++c) pg[0][r * cols + c] += p[c] * (gr[c] - dot);
                       }
                   });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
    return make_op(a.shape(), std::move(out), {a}, [a](std::span<const double> g, std::span<double* const> pg) {
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            pg[0][i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

Tensor silu(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
    return make_op(a.shape(), std::move(out), {a}, [a](std::span<const double> g, std::span<double* const> pg) {
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            pg[0][i] += g[i] * (s + x[i] * s * (1.0 - s));
        }
    });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    const std::size_t rows = x.rows(), d = x.cols();
    if (gain.numel() != d)
        throw ShapeError("rmsnorm: gain " + shape_string(gain.shape()) + " vs input " + shape_string(x.shape()));
    std::vector<double> out(x.numel());
    auto inv_rms = std::make_shared<std::vector<double>>(rows);
    auto xv = x.data(), gv = gain.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * d;
        double ss = 0.0;
        for (std::size_t c = 0; c < d; ++c) ss += in[c] * in[c];
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        (*inv_rms)[r] = inv;
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = gv[c] * in[c] * inv;
    }
    return make_op(x.shape(), std::move(out), {x, gain},
                   [x, gain, inv_rms, rows, d](std::span<const double> g, std::span<double* const> pg) {
                       auto xv = x.data(), gv = gain.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* in = xv.data() + r * d;
                           const double* gr = g.data() + r * d;
                           const double inv = (*inv_rms)[r];
                           if (pg[0]) {
                               double dot = 0.0;
                               for (std::size_t c = 0; c < d; ++c) dot += gv[c] * gr[c] * in[c];
                               const double k = dot * inv * inv * inv / static_cast<double>(d);
                               for (std::size_t c = 0; c < d; ++c) pg[0][r * d + c] += gv[c] * gr[c] * inv - in[c] * k;
                           }
                           if (pg[1])
                               for (std::size_t c = 0; c < d; ++c) pg[1][c] += gr[c] * in[c] * inv;
                       }
                   });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    require_2d("embedding_lookup", table);
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    auto tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw ShapeError("embedding_lookup: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_op({ids.size(), d}, std::move(out), {table},
                   [idv = std::move(idv), d](std::span<const double> g, std::span<double* const> pg) {
                       for (std::size_t i = 0; i < idv.size(); ++i)
                           for (std::size_t c = 0; c < d; ++c)
                               pg[0][static_cast<std::size_t>(idv[i]) * d + c] += g[i * d + c];
                   });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
    const std::size_t rows = logits.rows(), vocab = logits.cols();
    if (targets.size() != rows || weights.size() != rows)
        throw ShapeError("cross_entropy: " + std::to_string(rows) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets / " + std::to_string(weights.size()) + " weights");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (!(wsum > 0.0)) throw ConfigError("cross_entropy: no positions carry weight");

    auto lv = logits.data();
    auto probs = std::make_shared<std::vector<double>>(logits.numel(), 0.0);
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (weights[r] == 0.0) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
            throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
        const double* l = lv.data() + r * vocab;
        double* p = probs->data() + r * vocab;
        const double mx = *std::max_element(l, l + vocab);
        double z = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) z += (p[c] = std::exp(l[c] - mx));
        for (std::size_t c = 0; c < vocab; ++c) p[c] /= z;
        loss += weights[r] * (mx + std::log(z) - l[targets[r]]);
    }
    loss /= wsum;
    std::vector<int> tv(targets.begin(), targets.end());
    std::vector<double> wv(weights.begin(), weights.end());
    return make_op({1}, {loss}, {logits},
                   [probs, tv = std::move(tv), wv = std::move(wv), wsum, rows, vocab](std::span<const double> g,
                                                                                     std::span<double* const> pg) {
                       for (std::size_t r = 0; r < rows; ++r) {
                           if (wv[r] == 0.0) continue;
                           const double k = g[0] * wv[r] / wsum;
                           const double* p = probs->data() + r * vocab;
                           double* out = pg[0] + r * vocab;
                           for (std::size_t c = 0; c < vocab; ++c) out[c] += k * p[c];
                           out[tv[r]] -= k;
                       }
                   });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    std::vector<double> ones(targets.size(), 1.0);
    return cross_entropy(logits, targets, ones);
}

namespace {

void rotate(double* row, std::size_t heads, std::size_t head_dim, std::size_t position, double base, bool inverse) {
    const std::size_t half = head_dim / 2;
    for (std::size_t j = 0; j < half; ++j) {
        const double inv_freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(position) * inv_freq;
        const double c = std::cos(angle);
        const double s = inverse ? -std::sin(angle) : std::sin(angle);
        for (std::size_t h = 0; h < heads; ++h) {
            double* a = row + h * head_dim + j;
            double* b = a + half;
            const double x = *a, y = *b;
            *a = x * c - y * s;
            *b = x * s + y * c;
        }
    }
}

} // namespace

void rope_row(std::span<double> row, std::size_t heads, std::size_t position, double base) {
    rotate(row.data(), heads, row.size() / heads, position, base, false);
}

Tensor rope(const Tensor& x, std::size_t heads, std::size_t offset, double base) {
    require_2d("rope", x);
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (heads == 0 || d % heads != 0 || (d / heads) % 2 != 0)
        throw ShapeError("rope: width " + std::to_string(d) + " not splittable into " + std::to_string(heads) +
                         " even-sized heads");
    const std::size_t hd = d / heads;
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < rows; ++r) rotate(out.data() + r * d, heads, hd, offset + r, base, false);
    return make_op(x.shape(), std::move(out), {x},
                   [rows, d, heads, hd, offset, base](std::span<const double> g, std::span<double* const> pg) {
                       std::vector<double> tmp(g.begin(), g.end());
                       for (std::size_t r = 0; r < rows; ++r) rotate(tmp.data() + r * d, heads, hd, offset + r, base, true);
                       for (std::size_t i = 0; i < tmp.size(); ++i) pg[0][i] += tmp[i];
                   });
}

// ---- finite differences -------------------------------------------------------

FiniteDiffReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps,
                                   std::size_t coords_per_tensor, std::uint64_t seed) {
    for (auto& p : params) {
        if (!p.is_leaf() || !p.requires_grad()) throw Error("finite_diff_check: parameters must be requires_grad leaves");
        p.zero_grad();
    }
    {
        Tensor loss = f();
        backward(loss);
    }
    struct Probe {
        std::size_t param, coord;
        double analytic, numeric;
    };
    std::vector<Probe> probes;
    Rng rng(seed);
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        std::vector<std::size_t> coords;
        if (p.numel() <= coords_per_tensor) {
            coords.resize(p.numel());
            std::iota(coords.begin(), coords.end(), std::size_t{0});
        } else {
            coords = rng.sample_without_replacement(p.numel(), coords_per_tensor);
        }
        auto data = p.data();
        for (std::size_t c : coords) {
            const double orig = data[c];
            data[c] = orig + eps;
            const double fp = f().item();
            data[c] = orig - eps;
            const double fm = f().item();
            data[c] = orig;
            probes.push_back({pi, c, analytic[c], (fp - fm) / (2.0 * eps)});
        }
    }
    // Central differences carry roundoff of order ulp(f)/eps, so coordinates far below
    // the gradient's overall scale are compared against that scale instead.
    double scale = 0.0;
    for (const auto& pr : probes) scale = std::max(scale, std::abs(pr.analytic));
    const double floor = std::max(1e-6, 1e-3 * scale);
    FiniteDiffReport report;
    report.coords_checked = probes.size();
    for (const auto& pr : probes) {
        const double rel =
            std::abs(pr.analytic - pr.numeric) / std::max({std::abs(pr.analytic), std::abs(pr.numeric), floor});
        if (rel >= report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = pr.param;
            report.worst_coord = pr.coord;
            report.worst_analytic = pr.analytic;
            report.worst_numeric = pr.numeric;
        }
    }
    return report;
}

} // namespace kblam
