#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kblam/random.hpp"

namespace kblam {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);

namespace detail {
struct Node;
}

/// Dense row-major double tensor with an optional gradient.
///
/// Tensors are handles: copies share storage. Results of ops that depend on a
/// requires_grad input carry a backward closure; backward() walks those closures in
/// reverse topological order and frees them afterwards.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t dim(std::size_t i) const { return shape().at(i); }
    /// Leading extent of a 2-D tensor (1 for vectors).
    std::size_t rows() const;
    /// Trailing extent.
    std::size_t cols() const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;

    bool requires_grad() const;
    /// Only valid on leaves. Clearing the flag also drops the gradient buffer.
    void set_requires_grad(bool on);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();
    void clear_grad();

    /// Copy of the values with no graph attached.
    Tensor detach() const;

    detail::Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                          std::function<void(std::span<const double>, std::span<double* const>)>);

    std::shared_ptr<detail::Node> node_;
};

/// Receives the output gradient and one pointer per parent: the parent's gradient
/// buffer (to accumulate into), or nullptr when that parent needs no gradient.
using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<double* const> parent_grads)>;

/// Builds an op result. The closure is kept only when grad mode is on and some
/// parent requires a gradient.
Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents, BackwardFn backward);

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from `loss`,
/// then frees the graph. Calling it twice on the same result is an error.
void backward(Tensor& loss);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// When on (the default), every op result is checked for NaN/Inf.
void set_checked_mode(bool on);
bool checked_mode();

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

/// Weighted mean token cross-entropy: sum_n w_n * CE_n / sum_n w_n. Positions with
/// zero weight are skipped entirely (their targets are never read).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Rotary position encoding applied per head to an [N x D] tensor; row n gets
/// position `offset + n`.
Tensor rope(const Tensor& x, std::size_t heads, std::size_t offset = 0, double base = 10000.0);
/// In-place rotation of one head-split row; shared with incremental decoding.
void rope_row(std::span<double> row, std::size_t heads, std::size_t position, double base = 10000.0);

// ---- finite differences -------------------------------------------------------

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_param = 0;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares backward() against central differences on a random subsample of at
/// least `coords_per_tensor` coordinates per parameter (all of them for smaller
/// tensors). Relative error is |a - n| / max(|a|, |n|, floor) with floor =
/// max(1e-6, 1e-3 * largest |analytic| checked).
FiniteDiffReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                   double eps = 1e-5, std::size_t coords_per_tensor = 64,
                                   std::uint64_t seed = 0);

} // namespace kblam
