#ifndef MVB_TENSOR_HPP
#define MVB_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvb {

// Error taxonomy shared across the library.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct InputError : std::runtime_error {
    explicit InputError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct EvalError : std::runtime_error {
    explicit EvalError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool has_scalar_f64 = false;
    double scalar_f64 = 0.0;  // widened value kept by scalar reductions
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;

    float* grad_buf();  // lazily allocates a zeroed grad of data.size()
};

// Cheap handle to an immutable-by-convention array. Ops never mutate their
// inputs; in-place writes happen only on leaf parameters between forward
// passes (optimizer updates).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, float v);
    static Tensor from_data(const Shape& s, std::vector<float> d);
    static Tensor scalar(float v);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int i) const;
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    const float* data() const { return impl_->data.data(); }
    float* data() { return impl_->data.data(); }
    const std::vector<float>& vec() const { return impl_->data; }

    float at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }
    float item() const;
    // For scalar reductions: the f64-accumulated value when available.
    double item_f64() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    const float* grad() const { return impl_->grad.data(); }
    const std::vector<float>& grad_vec() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    // Reverse-mode sweep from a scalar output.
    void backward() const;

    Tensor detach() const;  // same values, no tape, no grad
    Tensor clone() const;   // deep copy of values, keeps requires_grad

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    TensorImpl* raw() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

void check(bool cond, const std::string& msg);  // throws ShapeError

// ---------------------------------------------------------------------------
// Autograd toggle (thread-local). Sampling and metrics wrap forwards in
// NoGradGuard so no tape is built.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Attach a tape node to `out` when autograd is on and any parent needs grad.
void wire_node(Tensor& out, std::vector<Tensor> parents, std::function<void()> backward_fn);

// ---------------------------------------------------------------------------
// Counter-based deterministic RNG. A draw is one counter tick; each tick can
// expand into several independent 64-bit lanes so a normal variate still
// costs exactly one tick.
struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;

    uint64_t raw(uint32_t lane) const;  // value at (seed, counter, lane); no advance
    uint64_t next_u64();                // lane 0, advances counter by 1
    double uniform();                   // [0, 1), one tick
    double normal();                    // N(0, 1), one tick
    RngState fork(uint64_t label) const;
};

Tensor rng_normal(RngState& rng, const Shape& s);
Tensor rng_uniform(RngState& rng, const Shape& s, float lo, float hi);

}  // namespace mvb

#endif
