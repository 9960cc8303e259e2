// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "kdpl/errors.hpp"

namespace kdpl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace ad {

// Reverse-mode tape over dense double matrices. Each op appends one node;
// reverse creation order is a valid topological order, so backward() is a
// single reverse sweep. Nodes whose inputs carry no gradient skip closure
// allocation entirely, which makes frozen-model inference cheap.
struct Node {
  Matrix value;
  Matrix grad;  // lazily sized on first accumulation
  bool requires_grad = false;
  std::function<void(const Matrix&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

using Value = std::shared_ptr<Node>;

class Tape {
public:
  Value leaf(Matrix m, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = requires_grad;
    order_.push_back(n);
    return n;
  }

  Value constant(Matrix m) { return leaf(std::move(m), false); }

  Value make(Matrix value, const std::vector<Value>& parents,
             std::function<void(const Matrix&)> back) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents) {
      if (p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) n->backward = std::move(back);
    order_.push_back(n);
    return n;
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape once. `root` must be 1x1.
  void backward(const Value& root) {
    if (root->value.rows() != 1 || root->value.cols() != 1)
      throw ContractViolation("backward root must be a scalar node");
    root->accumulate(Matrix::Ones(1, 1));
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node& n = **it;
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  std::size_t size() const { return order_.size(); }

private:
  std::vector<Value> order_;
};

inline Value matmul(Tape& t, const Value& a, const Value& b) {
  if (a->value.cols() != b->value.rows()) throw ShapeError("matmul inner dims");
  return t.make(a->value * b->value, {a, b}, [a, b](const Matrix& g) {
    if (a->requires_grad) a->accumulate(g * b->value.transpose());
    if (b->requires_grad) b->accumulate(a->value.transpose() * g);
  });
}

/// a * b^T without materializing the transpose as a node.
inline Value matmul_nt(Tape& t, const Value& a, const Value& b) {
  if (a->value.cols() != b->value.cols()) throw ShapeError("matmul_nt inner dims");
  return t.make(a->value * b->value.transpose(), {a, b}, [a, b](const Matrix& g) {
    if (a->requires_grad) a->accumulate(g * b->value);
    if (b->requires_grad) b->accumulate(g.transpose() * a->value);
  });
}

inline Value add(Tape& t, const Value& a, const Value& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw ShapeError("add shape mismatch");
  return t.make(a->value + b->value, {a, b}, [a, b](const Matrix& g) {
    if (a->requires_grad) a->accumulate(g);
    if (b->requires_grad) b->accumulate(g);
  });
}

inline Value sub(Tape& t, const Value& a, const Value& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw ShapeError("sub shape mismatch");
  return t.make(a->value - b->value, {a, b}, [a, b](const Matrix& g) {
    if (a->requires_grad) a->accumulate(g);
    if (b->requires_grad) b->accumulate(-g);
  });
}

inline Value scale(Tape& t, const Value& a, double s) {
  return t.make(a->value * s, {a}, [a, s](const Matrix& g) {
    if (a->requires_grad) a->accumulate(g * s);
  });
}

inline Value hadamard(Tape& t, const Value& a, const Value& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw ShapeError("hadamard shape mismatch");
  return t.make(a->value.cwiseProduct(b->value), {a, b}, [a, b](const Matrix& g) {
    if (a->requires_grad) a->accumulate(g.cwiseProduct(b->value));
    if (b->requires_grad) b->accumulate(g.cwiseProduct(a->value));
  });
}

inline Value relu(Tape& t, const Value& a) {
  return t.make(a->value.cwiseMax(0.0), {a}, [a](const Matrix& g) {
    if (!a->requires_grad) return;
    Matrix mask = (a->value.array() > 0.0).cast<double>();
    a->accumulate(g.cwiseProduct(mask));
  });
}

inline Value tanh_op(Tape& t, const Value& a) {
  Matrix y = a->value.array().tanh();
  return t.make(y, {a}, [a, y](const Matrix& g) {
    if (!a->requires_grad) return;
    a->accumulate((g.array() * (1.0 - y.array().square())).matrix());
  });
}

/// Per-row softmax with max subtraction.
inline Value row_softmax(Tape& t, const Value& a) {
  Matrix y(a->value.rows(), a->value.cols());
  for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
    double mx = a->value.row(r).maxCoeff();
    Eigen::ArrayXd e = (a->value.row(r).array() - mx).exp();
    y.row(r) = (e / e.sum()).matrix();
  }
  return t.make(y, {a}, [a, y](const Matrix& g) {
    if (!a->requires_grad) return;
    Matrix gin(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = g.row(r).dot(y.row(r));
      gin.row(r) = y.row(r).cwiseProduct(g.row(r) - Matrix::Constant(1, y.cols(), dot).row(0));
    }
    a->accumulate(gin);
  });
}

/// Per-row layer normalization, no affine parameters.
inline Value layer_norm_rows(Tape& t, const Value& a, double eps = 1e-5) {
  const Eigen::Index rows = a->value.rows(), cols = a->value.cols();
  Matrix y(rows, cols);
  Vector inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mu = a->value.row(r).mean();
    Eigen::ArrayXd c = a->value.row(r).array() - mu;
    double var = c.square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    y.row(r) = (c * is).matrix();
  }
  return t.make(y, {a}, [a, y, inv_std](const Matrix& g) {
    if (!a->requires_grad) return;
    Matrix gin(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double gmean = g.row(r).mean();
      double gymean = g.row(r).cwiseProduct(y.row(r)).mean();
      gin.row(r) =
          inv_std(r) * (g.row(r).array() - gmean - y.row(r).array() * gymean).matrix();
    }
    a->accumulate(gin);
  });
}

inline Value concat_rows(Tape& t, const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractViolation("concat_rows needs at least one part");
  Eigen::Index cols = parts.front()->value.cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols) throw ShapeError("concat_rows column mismatch");
    rows += p->value.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p->value.rows()) = p->value;
    at += p->value.rows();
  }
  return t.make(y, parts, [parts](const Matrix& g) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) p->accumulate(g.middleRows(at, p->value.rows()));
      at += p->value.rows();
    }
  });
}

inline Value slice_rows(Tape& t, const Value& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a->value.rows())
    throw ShapeError("slice_rows out of range");
  Matrix y = a->value.middleRows(start, count);
  return t.make(y, {a}, [a, start, count](const Matrix& g) {
    if (!a->requires_grad) return;
    Matrix gin = Matrix::Zero(a->value.rows(), a->value.cols());
    gin.middleRows(start, count) = g;
    a->accumulate(gin);
  });
}

/// Column-wise mean over rows -> 1 x cols.
inline Value mean_rows(Tape& t, const Value& a) {
  const double inv = 1.0 / static_cast<double>(a->value.rows());
  Matrix y = a->value.colwise().mean();
  return t.make(y, {a}, [a, inv](const Matrix& g) {
    if (!a->requires_grad) return;
    a->accumulate(Matrix::Ones(a->value.rows(), 1) * (g * inv));
  });
}

/// L2-normalizes each row. Rows with near-zero norm are rejected.
inline Value normalize_rows(Tape& t, const Value& a) {
  const Eigen::Index rows = a->value.rows(), cols = a->value.cols();
  Matrix y(rows, cols);
  Vector inv_norm(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double n = a->value.row(r).norm();
    if (!(n > 0.0) || !std::isfinite(n))
      throw DegenerateInputError("zero-norm row in normalize_rows");
    inv_norm(r) = 1.0 / n;
    y.row(r) = a->value.row(r) * inv_norm(r);
  }
  return t.make(y, {a}, [a, y, inv_norm](const Matrix& g) {
    if (!a->requires_grad) return;
    Matrix gin(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = g.row(r).dot(y.row(r));
      gin.row(r) = inv_norm(r) * (g.row(r) - dot * y.row(r));
    }
    a->accumulate(gin);
  });
}

/// Elementwise ln(x + eps).
inline Value log_eps(Tape& t, const Value& a, double eps) {
  Matrix y = (a->value.array() + eps).log();
  return t.make(y, {a}, [a, eps](const Matrix& g) {
    if (!a->requires_grad) return;
    a->accumulate((g.array() / (a->value.array() + eps)).matrix());
  });
}

inline Value abs_op(Tape& t, const Value& a) {
  return t.make(a->value.cwiseAbs(), {a}, [a](const Matrix& g) {
    if (!a->requires_grad) return;
    Matrix sign = a->value.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    a->accumulate(g.cwiseProduct(sign));
  });
}

/// Sum of all entries -> 1x1.
inline Value sum_all(Tape& t, const Value& a) {
  Matrix y(1, 1);
  y(0, 0) = a->value.sum();
  return t.make(y, {a}, [a](const Matrix& g) {
    if (!a->requires_grad) return;
    a->accumulate(Matrix::Constant(a->value.rows(), a->value.cols(), g(0, 0)));
  });
}

inline Value mean_all(Tape& t, const Value& a) {
  return scale(t, sum_all(t, a), 1.0 / static_cast<double>(a->value.size()));
}

}  // namespace ad
}  // namespace kdpl
