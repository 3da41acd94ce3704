#pragma once
// Reverse-mode autodiff tensor. The graph is held by shared_ptr links from
// outputs to inputs; backward() toposorts from a scalar loss and runs node
// closures in reverse order. Two dtypes: f32 for training, f64 for the
// finite-difference gradient checks.

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowgate {

// All numeric buffers are 64-byte aligned. SIMD kernels peel loops based on
// pointer alignment; pinning the alignment keeps elementwise results
// bitwise-identical across allocations and runs.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const {
        return true;
    }
};

template <typename T>
using AVec = std::vector<T, AlignedAllocator<T>>;

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    DType dtype = DType::F32;
    bool requires_grad = false;
    const char* op = "leaf";

    AVec<float> f32;
    AVec<double> f64;
    AVec<float> g32;
    AVec<double> g64;

    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return shape_numel(shape); }

    template <typename T>
    AVec<T>& vals();
    template <typename T>
    const AVec<T>& vals() const;

    // Grad buffer, zero-initialized on first touch.
    template <typename T>
    AVec<T>& grad();

    bool has_grad() const { return !g32.empty() || !g64.empty(); }
    void zero_grad() {
        std::fill(g32.begin(), g32.end(), 0.0f);
        std::fill(g64.begin(), g64.end(), 0.0);
    }
};

template <>
inline AVec<float>& Node::vals<float>() { return f32; }
template <>
inline AVec<double>& Node::vals<double>() { return f64; }
template <>
inline const AVec<float>& Node::vals<float>() const { return f32; }
template <>
inline const AVec<double>& Node::vals<double>() const { return f64; }

template <>
inline AVec<float>& Node::grad<float>() {
    if (g32.empty()) g32.assign(static_cast<size_t>(numel()), 0.0f);
    return g32;
}
template <>
inline AVec<double>& Node::grad<double>() {
    if (g64.empty()) g64.assign(static_cast<size_t>(numel()), 0.0);
    return g64;
}

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, DType dt = DType::F32);
    static Tensor full(const Shape& shape, double value, DType dt = DType::F32);
    static Tensor from_data(const Shape& shape, const std::vector<double>& vals,
                            DType dt = DType::F32);
    static Tensor from_float(const Shape& shape, const std::vector<float>& vals);

    bool defined() const { return node_ != nullptr; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int64_t dim(int i) const {
        int n = static_cast<int>(node_->shape.size());
        if (i < 0) i += n;
        return node_->shape[static_cast<size_t>(i)];
    }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    DType dtype() const { return node_->dtype; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    template <typename T>
    AVec<T>& vals() { return node_->vals<T>(); }
    template <typename T>
    const AVec<T>& vals() const { return const_cast<const Node*>(node_.get())->vals<T>(); }

    // Scalar value of a single-element tensor, at any dtype.
    double item() const;
    double at(int64_t flat_index) const;
    void set(int64_t flat_index, double v);

    // Gradient as doubles (empty if no grad was accumulated).
    std::vector<double> grad_as_double() const;

    Tensor detach_copy() const;      // same values, no graph, no grad
    Tensor astype(DType dt) const;   // value-cast copy, no graph

    void zero_grad() const { node_->zero_grad(); }

  private:
    std::shared_ptr<Node> node_;
};

// Creates a node with forward storage allocated for `shape` at dtype `dt`.
std::shared_ptr<Node> make_node(const Shape& shape, DType dt, const char* op);

// Runs reverse-mode accumulation from a scalar `loss`. Grad buffers of leaf
// nodes with requires_grad are filled; interior grads are freed as soon as
// their backward has run.
void backward(const Tensor& loss);

// RAII switch: inside a NoGradGuard, ops do not record backward closures.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    static bool active();
};

}  // namespace flowgate
