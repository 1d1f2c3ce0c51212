#include "headspec/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace headspec {

#ifdef __GLIBC__
namespace {
// Graph buffers are MB-sized and freed every step; keep them on the heap
// instead of bouncing pages through mmap.
struct AllocTuning {
    AllocTuning() {
        mallopt(M_MMAP_MAX, 0);
        mallopt(M_TRIM_THRESHOLD, -1);
    }
} g_alloc_tuning;
}  // namespace
#endif

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("tensor: negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

void Node::ensure_grad() {
    if (!grad_ready) {
        grad = Eigen::ArrayXd::Zero(values.size());
        grad_ready = true;
    }
}

Tensor Tensor::zeros(const Shape& s) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->values = Eigen::ArrayXd::Zero(shape_numel(s));
    return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& s, double v) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->values = Eigen::ArrayXd::Constant(shape_numel(s), v);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return full({}, v); }

Tensor Tensor::from(const Shape& s, const std::vector<double>& v) {
    if (shape_numel(s) != static_cast<int>(v.size()))
        throw std::invalid_argument("tensor: shape " + shape_str(s) + " does not match " +
                                    std::to_string(v.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->values = Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    return Tensor(std::move(n));
}

Tensor Tensor::from_array(const Shape& s, Eigen::ArrayXd v) {
    if (shape_numel(s) != static_cast<int>(v.size()))
        throw std::invalid_argument("tensor: shape " + shape_str(s) + " does not match " +
                                    std::to_string(v.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->values = std::move(v);
    return Tensor(std::move(n));
}

double Tensor::item() const {
    if (size() != 1)
        throw std::invalid_argument("tensor: item() on non-scalar of shape " + shape_str(shape()));
    return node_->values[0];
}

Tensor& Tensor::set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
}

const Eigen::ArrayXd& Tensor::grad() const {
    if (!node_->grad_ready)
        throw std::runtime_error("tensor: gradient not populated; call backward() first");
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad_ready = false;
    node_->grad.resize(0);
}

Tensor Tensor::detached() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->values = node_->values;
    return Tensor(std::move(n));
}

namespace {

thread_local int g_no_grad_depth = 0;

// Iterative post-order DFS. A node on the active stack seen again would mean
// a cycle, which the op constructors cannot produce; assert guards it.
void topo_order(Node* root, std::vector<Node*>& out) {
    std::unordered_set<Node*> done;
    std::unordered_set<Node*> on_stack;
    struct Frame {
        Node* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    on_stack.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            Node* p = f.n->parents[f.next_parent++].get();
            if (!done.count(p)) {
                assert(!on_stack.count(p) && "cycle in autodiff graph");
                stack.push_back({p, 0});
                on_stack.insert(p);
            }
        } else {
            done.insert(f.n);
            on_stack.erase(f.n);
            out.push_back(f.n);
            stack.pop_back();
        }
    }
}

}  // namespace

NoGradGuard::NoGradGuard() { g_no_grad_depth++; }
NoGradGuard::~NoGradGuard() { g_no_grad_depth--; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    std::vector<Node*> order;
    topo_order(loss.node().get(), order);
    for (Node* n : order) n->grad_ready = false;
    Node* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
    }
}

}  // namespace headspec
