#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace headspec {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

/// One vertex of the computation graph. Owns the forward value buffer and,
/// once backward() has visited it, the accumulated gradient.
struct Node {
    Shape shape;
    Eigen::ArrayXd values;
    Eigen::ArrayXd grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    int size() const { return static_cast<int>(values.size()); }
    void ensure_grad();
};

/// Dense row-major double tensor with reverse-mode autodiff. Copies are
/// shallow (shared graph node); use detached() for a value-only copy.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, double v);
    static Tensor scalar(double v);
    static Tensor from(const Shape& s, const std::vector<double>& v);
    static Tensor from_array(const Shape& s, Eigen::ArrayXd v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int size() const { return node_->size(); }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    const Eigen::ArrayXd& values() const { return node_->values; }
    Eigen::ArrayXd& values() { return node_->values; }
    double operator[](int i) const { return node_->values[i]; }

    /// Scalar extraction; throws unless size()==1.
    double item() const;

    Tensor& set_requires_grad(bool b);
    bool requires_grad() const { return node_->requires_grad; }

    const Eigen::ArrayXd& grad() const;
    bool has_grad() const { return node_->grad_ready; }
    void zero_grad();

    /// Value copy with no graph history.
    Tensor detached() const;

    std::shared_ptr<Node> node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// over fan-out; replay order is a fixed topological order, so repeated runs
/// on the same graph are bit-identical.
void backward(const Tensor& loss);

/// While any guard is alive, ops compute values but record no graph.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

}  // namespace headspec
