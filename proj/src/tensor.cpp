#include "flowgate/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace flowgate {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::shared_ptr<Node> make_node(const Shape& shape, DType dt, const char* op) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->dtype = dt;
    n->op = op;
    size_t count = static_cast<size_t>(n->numel());
    if (dt == DType::F32)
        n->f32.assign(count, 0.0f);
    else
        n->f64.assign(count, 0.0);
    return n;
}

Tensor Tensor::zeros(const Shape& shape, DType dt) {
    return Tensor(make_node(shape, dt, "zeros"));
}

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
    Tensor t(make_node(shape, dt, "full"));
    if (dt == DType::F32)
        std::fill(t.vals<float>().begin(), t.vals<float>().end(), static_cast<float>(value));
    else
        std::fill(t.vals<double>().begin(), t.vals<double>().end(), value);
    return t;
}

Tensor Tensor::from_data(const Shape& shape, const std::vector<double>& vals, DType dt) {
    if (static_cast<int64_t>(vals.size()) != shape_numel(shape))
        throw ShapeError("from_data: value count " + std::to_string(vals.size()) +
                         " does not match shape " + shape_str(shape));
    Tensor t(make_node(shape, dt, "const"));
    if (dt == DType::F32) {
        auto& v = t.vals<float>();
        for (size_t i = 0; i < vals.size(); ++i) v[i] = static_cast<float>(vals[i]);
    } else {
        t.vals<double>().assign(vals.begin(), vals.end());
    }
    return t;
}

Tensor Tensor::from_float(const Shape& shape, const std::vector<float>& vals) {
    if (static_cast<int64_t>(vals.size()) != shape_numel(shape))
        throw ShapeError("from_float: value count mismatch for shape " + shape_str(shape));
    Tensor t(make_node(shape, DType::F32, "const"));
    t.vals<float>().assign(vals.begin(), vals.end());
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item(): tensor is not scalar, shape " + shape_str(shape()));
    return at(0);
}

double Tensor::at(int64_t i) const {
    return dtype() == DType::F32 ? static_cast<double>(node_->f32[static_cast<size_t>(i)])
                                 : node_->f64[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
    if (dtype() == DType::F32)
        node_->f32[static_cast<size_t>(i)] = static_cast<float>(v);
    else
        node_->f64[static_cast<size_t>(i)] = v;
}

std::vector<double> Tensor::grad_as_double() const {
    std::vector<double> out;
    if (dtype() == DType::F32) {
        out.assign(node_->g32.begin(), node_->g32.end());
    } else {
        out.assign(node_->g64.begin(), node_->g64.end());
    }
    return out;
}

Tensor Tensor::detach_copy() const {
    Tensor t(make_node(shape(), dtype(), "detached"));
    if (dtype() == DType::F32)
        t.vals<float>() = vals<float>();
    else
        t.vals<double>() = vals<double>();
    return t;
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype()) return detach_copy();
    Tensor t(make_node(shape(), dt, "cast"));
    size_t n = static_cast<size_t>(numel());
    if (dt == DType::F64) {
        const auto& src = vals<float>();
        auto& dst = t.vals<double>();
        for (size_t i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
    } else {
        const auto& src = vals<double>();
        auto& dst = t.vals<float>();
        for (size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
    }
    return t;
}

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));

    // Iterative post-order DFS; parents are visited in fixed vector order so
    // the execution (and thus accumulation) order is reproducible.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    Node* root = loss.node();
    if (!root->requires_grad) return;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            Node* p = f.n->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    if (loss.dtype() == DType::F32)
        root->grad<float>()[0] = 1.0f;
    else
        root->grad<double>()[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->backward_fn();
            // Interior grads and captured state are dead once the node ran.
            n->backward_fn = nullptr;
            n->g32.clear();
            n->g32.shrink_to_fit();
            n->g64.clear();
            n->g64.shrink_to_fit();
        }
    }
}

}  // namespace flowgate
