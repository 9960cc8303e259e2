// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "kdpl/autodiff.hpp"
#include "kdpl/rng.hpp"

using namespace kdpl;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  SplitMix64 rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.next_symmetric(scale);
  return m;
}

// Central finite differences of a scalar-valued function of one leaf matrix.
template <typename F>
Matrix finite_diff(Matrix at, F&& f, double step = 1e-6) {
  Matrix g(at.rows(), at.cols());
  for (Eigen::Index i = 0; i < at.rows(); ++i) {
    for (Eigen::Index j = 0; j < at.cols(); ++j) {
      double keep = at(i, j);
      at(i, j) = keep + step;
      double hi = f(at);
      at(i, j) = keep - step;
      double lo = f(at);
      at(i, j) = keep;
      g(i, j) = (hi - lo) / (2.0 * step);
    }
  }
  return g;
}

double max_rel_err(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-8});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  return worst;
}

}  // namespace

TEST_CASE("matmul gradients match finite differences") {
  Matrix a0 = random_matrix(3, 4, 1), b0 = random_matrix(4, 2, 2);
  auto loss_of = [&](const Matrix& a, const Matrix& b) {
    ad::Tape t;
    auto va = t.leaf(a, true), vb = t.leaf(b, true);
    return ad::sum_all(t, ad::matmul(t, va, vb))->value(0, 0);
  };
  ad::Tape t;
  auto va = t.leaf(a0, true), vb = t.leaf(b0, true);
  auto loss = ad::sum_all(t, ad::matmul(t, va, vb));
  t.backward(loss);
  auto fd_a = finite_diff(a0, [&](const Matrix& a) { return loss_of(a, b0); });
  auto fd_b = finite_diff(b0, [&](const Matrix& b) { return loss_of(a0, b); });
  CHECK(max_rel_err(va->grad, fd_a) < 1e-7);
  CHECK(max_rel_err(vb->grad, fd_b) < 1e-7);
}

TEST_CASE("composite op gradients match finite differences") {
  // exercises row_softmax, layer_norm, tanh, slices, normalization, logs
  Matrix x0 = random_matrix(4, 5, 3);
  auto build = [&](ad::Tape& t, const ad::Value& x) {
    auto w = t.constant(random_matrix(5, 5, 4));
    auto att = ad::row_softmax(t, ad::scale(t, ad::matmul_nt(t, x, x), 0.7));
    auto h = ad::layer_norm_rows(t, ad::add(t, x, ad::matmul(t, att, ad::matmul(t, x, w))));
    auto act = ad::tanh_op(t, ad::slice_rows(t, h, 1, 2));
    auto pooled = ad::mean_rows(t, ad::concat_rows(t, {act, ad::abs_op(t, h)}));
    auto norm = ad::normalize_rows(t, pooled);
    return ad::sum_all(t, ad::log_eps(t, ad::hadamard(t, norm, norm), 1e-6));
  };
  auto loss_of = [&](const Matrix& x) {
    ad::Tape t;
    auto vx = t.leaf(x, true);
    return build(t, vx)->value(0, 0);
  };
  ad::Tape t;
  auto vx = t.leaf(x0, true);
  auto loss = build(t, vx);
  t.backward(loss);
  auto fd = finite_diff(x0, loss_of);
  CHECK(max_rel_err(vx->grad, fd) < 1e-5);
}

TEST_CASE("relu subgradient and shared-node accumulation") {
  Matrix x0 = random_matrix(2, 3, 9);
  ad::Tape t;
  auto vx = t.leaf(x0, true);
  auto r = ad::relu(t, vx);
  // x used twice: gradients must accumulate
  auto loss = ad::sum_all(t, ad::add(t, r, ad::scale(t, vx, 2.0)));
  t.backward(loss);
  for (Eigen::Index i = 0; i < x0.rows(); ++i)
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
      double expect = (x0(i, j) > 0 ? 1.0 : 0.0) + 2.0;
      CHECK(vx->grad(i, j) == Catch::Approx(expect));
    }
}

TEST_CASE("no-grad inputs skip closure allocation but values agree") {
  Matrix a = random_matrix(3, 3, 11);
  ad::Tape t1, t2;
  auto frozen = ad::row_softmax(t1, t1.constant(a));
  auto live = ad::row_softmax(t2, t2.leaf(a, true));
  CHECK(frozen->value == live->value);
  CHECK_FALSE(frozen->requires_grad);
  CHECK(live->requires_grad);
}

TEST_CASE("backward requires a scalar root") {
  ad::Tape t;
  auto v = t.leaf(random_matrix(2, 2, 5), true);
  CHECK_THROWS_AS(t.backward(v), ContractViolation);
}

TEST_CASE("normalize_rows rejects zero rows") {
  ad::Tape t;
  Matrix z = Matrix::Zero(1, 4);
  CHECK_THROWS_AS(ad::normalize_rows(t, t.constant(z)), DegenerateInputError);
}
