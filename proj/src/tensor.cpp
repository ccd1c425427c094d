#include "mvb/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace mvb {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

float* TensorImpl::grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad.data();
}

Tensor Tensor::zeros(const Shape& s) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = s;
    impl->data.assign(static_cast<size_t>(shape_numel(s)), 0.0f);
    return Tensor(impl);
}

Tensor Tensor::full(const Shape& s, float v) {
    Tensor t = zeros(s);
    for (auto& x : t.impl()->data) x = v;
    return t;
}

Tensor Tensor::from_data(const Shape& s, std::vector<float> d) {
    check(shape_numel(s) == static_cast<int64_t>(d.size()),
          "from_data: shape " + shape_str(s) + " does not match data length " + std::to_string(d.size()));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = s;
    impl->data = std::move(d);
    return Tensor(impl);
}

Tensor Tensor::scalar(float v) { return from_data({1}, {v}); }

int64_t Tensor::dim(int i) const {
    if (i < 0) i += rank();
    return impl_->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
    check(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

double Tensor::item_f64() const {
    check(numel() == 1, "item_f64: tensor has " + std::to_string(numel()) + " elements");
    return impl_->has_scalar_f64 ? impl_->scalar_f64 : static_cast<double>(impl_->data[0]);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->has_scalar_f64 = impl_->has_scalar_f64;
    impl->scalar_f64 = impl_->scalar_f64;
    return Tensor(impl);
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.set_requires_grad(impl_->requires_grad);
    return t;
}

void Tensor::backward() const {
    check(numel() == 1, "backward: output must be scalar");
    // Topological order over the reachable tape.
    std::vector<TensorImpl*> topo;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    impl_->grad_buf()[0] = 1.0f;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// ---------------------------------------------------------------------------

namespace {
thread_local int g_no_grad_depth = 0;
}

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void wire_node(Tensor& out, std::vector<Tensor> parents, std::function<void()> backward_fn) {
    if (!grad_enabled()) return;
    bool need = false;
    for (const auto& p : parents) need = need || p.requires_grad();
    if (!need) return;
    auto impl = out.impl();
    impl->requires_grad = true;
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
}

// ---------------------------------------------------------------------------
// SplitMix64-style finalizer over (seed, counter, lane).

namespace {
inline uint64_t mix64(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}
}

uint64_t RngState::raw(uint32_t lane) const {
    uint64_t x = seed;
    x ^= counter * 0x9e3779b97f4a7c15ULL;
    x ^= (static_cast<uint64_t>(lane) + 1) * 0xd1b54a32d192ed03ULL;
    return mix64(mix64(x));
}

uint64_t RngState::next_u64() {
    uint64_t v = raw(0);
    ++counter;
    return v;
}

double RngState::uniform() {
    uint64_t v = raw(0);
    ++counter;
    return static_cast<double>(v >> 11) * 0x1.0p-53;
}

double RngState::normal() {
    double u1 = static_cast<double>(raw(0) >> 11) * 0x1.0p-53;
    double u2 = static_cast<double>(raw(1) >> 11) * 0x1.0p-53;
    ++counter;
    double r = std::sqrt(-2.0 * std::log1p(-u1));  // log(1-u1), u1 in [0,1)
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

RngState RngState::fork(uint64_t label) const {
    RngState out;
    out.seed = mix64(mix64(seed ^ (label * 0xda3e39cb94b95bdbULL)) + 0x9e3779b97f4a7c15ULL);
    out.counter = 0;
    return out;
}

Tensor rng_normal(RngState& rng, const Shape& s) {
    Tensor t = Tensor::zeros(s);
    float* d = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) d[i] = static_cast<float>(rng.normal());
    return t;
}

Tensor rng_uniform(RngState& rng, const Shape& s, float lo, float hi) {
    Tensor t = Tensor::zeros(s);
    float* d = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i)
        d[i] = lo + (hi - lo) * static_cast<float>(rng.uniform());
    return t;
}

}  // namespace mvb
