#pragma once

#include "isan/types.hpp"

namespace isan {

/// x -> W x + b.
struct AffineMap {
  Matrix W;
  Vector b;

  AffineMap() = default;
  AffineMap(Matrix w, Vector bias) : W(std::move(w)), b(std::move(bias)) { check_shape(); }

  static AffineMap identity(Index n) { return {Matrix::Identity(n, n), Vector::Zero(n)}; }

  Index in_dim() const noexcept { return W.cols(); }
  Index out_dim() const noexcept { return W.rows(); }

  void check_shape() const { detail::require_dim(b.size(), W.rows(), "affine bias"); }

  bool all_finite() const { return W.allFinite() && b.allFinite(); }

  Vector apply(const Vector& x) const {
    detail::require_dim(x.size(), in_dim(), "affine input");
    Vector y = b;
    y.noalias() += W * x;
    return y;
  }

  friend bool operator==(const AffineMap& a, const AffineMap& c) {
    return a.W.rows() == c.W.rows() && a.W.cols() == c.W.cols() && a.b.size() == c.b.size() &&
           a.W == c.W && a.b == c.b;
  }
};

/// Map equivalent to applying `first`, then `then`.
inline AffineMap compose(const AffineMap& first, const AffineMap& then) {
  detail::require_dim(then.in_dim(), first.out_dim(), "compose inner dimension");
  AffineMap out;
  out.W.noalias() = then.W * first.W;
  out.b = then.b;
  out.b.noalias() += then.W * first.b;
  return out;
}

}  // namespace isan
