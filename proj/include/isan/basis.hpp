#pragma once

// Changes of basis on the hidden state, the augmented linear form of the
// affine update, readout-subspace geometry, and the counting-basis recovery
// for the parentheses model.

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <cmath>
#include <limits>
#include <ostream>
#include <vector>

#include "isan/affine.hpp"
#include "isan/data.hpp"
#include "isan/io.hpp"
#include "isan/model.hpp"
#include "isan/stats.hpp"

namespace isan {

// ---------------------------------------------------------------------------
// Augmented form

/// [W b; 0 1].
inline Matrix augment(const AffineMap& a) {
  a.check_shape();
  if (a.W.rows() != a.W.cols()) throw ShapeError("augment needs a square transition matrix");
  const Index n = a.W.rows();
  Matrix out = Matrix::Zero(n + 1, n + 1);
  out.topLeftCorner(n, n) = a.W;
  out.topRightCorner(n, 1) = a.b;
  out(n, n) = 1.0;
  return out;
}

/// Inverse of augment. The last row must be (0, ..., 0, 1) within tol.
inline AffineMap deaugment(const Matrix& m, double tol = 0.0) {
  if (m.rows() != m.cols() || m.rows() < 2) throw ShapeError("deaugment needs a square matrix of size >= 2");
  const Index n = m.rows() - 1;
  Vector last = m.row(n).transpose();
  last(n) -= 1.0;
  if (last.cwiseAbs().maxCoeff() > tol) throw ShapeError("last row of an augmented matrix must be (0, ..., 0, 1)");
  return {m.topLeftCorner(n, n), m.topRightCorner(n, 1)};
}

inline Vector augment_state(const Vector& h) {
  Vector out(h.size() + 1);
  out << h, 1.0;
  return out;
}

/// [W_ro | b_ro] acting on augmented states.
inline Matrix augmented_readout(const ModelParams& p) {
  Matrix out(p.output_dim(), p.hidden_dim() + 1);
  out << p.readout.W, p.readout.b;
  return out;
}

// ---------------------------------------------------------------------------
// Basis transforms

struct BasisTransform {
  Matrix T;
  Matrix T_inv;
  double condition = 1.0;

  Index dim() const noexcept { return T.rows(); }
};

inline constexpr double kMaxCondition = 1e12;

inline BasisTransform make_basis(Matrix T) {
  if (T.rows() != T.cols() || T.rows() < 1) throw ShapeError("basis transform must be a nonempty square matrix");
  if (!T.allFinite()) throw NumericError("basis transform has non-finite entries");
  Eigen::JacobiSVD<Matrix> svd(T);
  const auto& s = svd.singularValues();
  const double cond = s(s.size() - 1) > 0 ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity();
  if (!(cond <= kMaxCondition))
    throw NumericError("basis transform is singular (condition estimate " + format_number(cond) + ")");
  Matrix inv = Eigen::PartialPivLU<Matrix>(T).inverse();
  const Index n = T.rows();
  const double err = (T * inv - Matrix::Identity(n, n)).cwiseAbs().maxCoeff();
  if (err > 1e-8) throw NumericError("basis inverse check failed (max error " + format_number(err) + ")");
  return {std::move(T), std::move(inv), cond};
}

/// W' = T W T^-1, b' = T b, h0' = T h0, W_ro' = W_ro T^-1, b_ro unchanged.
inline ModelParams apply_basis(const ModelParams& p, const BasisTransform& tr) {
  detail::require_dim(tr.dim(), p.hidden_dim(), "basis dimension");
  ModelParams out = p;
  for (auto& w : out.W) w = tr.T * w * tr.T_inv;
  out.B = tr.T * p.B;
  out.h0 = tr.T * p.h0;
  out.readout.W = p.readout.W * tr.T_inv;
  return out;
}

/// Transforms the augmented system with an (n+1)-dimensional T whose last
/// row is (0, ..., 0, 1), and returns it as an ordinary affine model.
inline ModelParams apply_augmented_basis(const ModelParams& p, const BasisTransform& tr) {
  const Index n = p.hidden_dim();
  detail::require_dim(tr.dim(), n + 1, "augmented basis dimension");
  ModelParams out = to_switched(p);
  const auto x_count = static_cast<TokenId>(p.vocab.size());
  for (TokenId x = 0; x < x_count; ++x) {
    const AffineMap a = deaugment(tr.T * augment(p.transition(x)) * tr.T_inv, 1e-9);
    out.W[static_cast<std::size_t>(x)] = a.W;
    out.B.col(x) = a.b;
  }
  const Vector z0 = tr.T * augment_state(p.h0);
  if (std::abs(z0(n) - 1.0) > 1e-9) throw ShapeError("augmented basis must keep the constant coordinate");
  out.h0 = z0.head(n);
  const Matrix ro = augmented_readout(p) * tr.T_inv;
  out.readout = AffineMap(ro.leftCols(n), ro.col(n));
  return out;
}

// ---------------------------------------------------------------------------
// Readout subspace

struct ReadoutSplit {
  Matrix B_par;   // n x r, orthonormal basis of the row space of W_ro
  Matrix B_perp;  // n x (n - r)
  Vector singular_values;

  Index rank() const noexcept { return B_par.cols(); }
  Vector proj_par(const Vector& v) const { return B_par * (B_par.transpose() * v); }
  Vector proj_perp(const Vector& v) const { return B_perp * (B_perp.transpose() * v); }
};

inline constexpr double kRankTolerance = 1e-10;

inline ReadoutSplit readout_split(const Matrix& W_ro) {
  if (W_ro.size() == 0 || W_ro.cwiseAbs().maxCoeff() == 0.0) throw ArgumentError("readout_split: zero readout matrix");
  Eigen::JacobiSVD<Matrix> svd(W_ro, Eigen::ComputeFullV);
  const Vector& s = svd.singularValues();
  Index r = 0;
  while (r < s.size() && s(r) > kRankTolerance * s(0)) ++r;
  const Index n = W_ro.cols();
  return {svd.matrixV().leftCols(r), svd.matrixV().rightCols(n - r), s};
}

/// Orthogonal T whose first rank() rows span the readout subspace.
inline BasisTransform readout_first_basis(const ReadoutSplit& split) {
  Matrix T(split.B_par.rows(), split.B_par.rows());
  T << split.B_par.transpose(), split.B_perp.transpose();
  return make_basis(std::move(T));
}

struct BiasNorms {
  Vector full, par, perp;  // per token
  Correlation corr_full, corr_par, corr_perp;  // each against log unigram probability
};

inline BiasNorms bias_subspace_norms(const ModelParams& p, const ReadoutSplit& split, const Vector& log_unigram) {
  detail::require_dim(log_unigram.size(), p.vocab_size(), "log unigram length");
  detail::require_dim(split.B_par.rows(), p.hidden_dim(), "readout split dimension");
  const Index K = p.vocab_size();
  BiasNorms out{Vector(K), Vector(K), Vector(K), {}, {}, {}};
  for (Index x = 0; x < K; ++x) {
    const Vector b = p.B.col(x);
    out.full(x) = b.norm();
    out.par(x) = (split.B_par.transpose() * b).norm();
    out.perp(x) = (split.B_perp.transpose() * b).norm();
  }
  const auto lu = to_std(log_unigram);
  out.corr_full = pearson(lu, to_std(out.full));
  out.corr_par = pearson(lu, to_std(out.par));
  out.corr_perp = pearson(lu, to_std(out.perp));
  return out;
}

/// 1 - cos(angle). NaN when either vector is zero.
inline double cosine_distance(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(1.0 - a.dot(b) / (na * nb), 0.0, 2.0);
}

struct CosineMatrices {
  Matrix full, par, perp;  // K x K; NaN rows/cols for zero vectors
};

inline Matrix cosine_distance_matrix(const Matrix& vectors) {
  const Index K = vectors.cols();
  Matrix out(K, K);
  for (Index i = 0; i < K; ++i) {
    const bool zero = vectors.col(i).norm() == 0.0;
    out(i, i) = zero ? std::numeric_limits<double>::quiet_NaN() : 0.0;
    for (Index j = i + 1; j < K; ++j) out(i, j) = out(j, i) = cosine_distance(vectors.col(i), vectors.col(j));
  }
  return out;
}

inline CosineMatrices bias_cosine_matrices(const ModelParams& p, const ReadoutSplit& split) {
  const Matrix par = split.B_par * (split.B_par.transpose() * p.B);
  const Matrix perp = split.B_perp * (split.B_perp.transpose() * p.B);
  return {cosine_distance_matrix(p.B), cosine_distance_matrix(par), cosine_distance_matrix(perp)};
}

// ---------------------------------------------------------------------------
// PCA

/// Explained-variance ratios of the columns of `samples` (one sample per
/// column), descending, summing to 1.
inline Vector pca_explained_variance(const Matrix& samples) {
  if (samples.cols() < 2) throw ArgumentError("PCA needs at least 2 samples");
  const Vector mean = samples.rowwise().mean();
  const Matrix centered = samples.colwise() - mean;
  const Matrix cov = centered * centered.transpose() / static_cast<double>(samples.cols() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
  Vector ev = eig.eigenvalues().reverse().cwiseMax(0.0);
  const double total = ev.sum();
  if (total == 0.0) throw ArgumentError("PCA of constant samples");
  return ev / total;
}

// ---------------------------------------------------------------------------
// Block view of an augmented matrix in a readout-first basis

struct BlockView {
  Matrix rr, rc, cr, cc;
  Vector br, bc;

  Index split() const noexcept { return rr.rows(); }
};

inline BlockView block_view(const Matrix& augmented, Index split) {
  if (augmented.rows() != augmented.cols() || augmented.rows() < 2)
    throw ShapeError("block_view needs a square augmented matrix");
  const Index n = augmented.rows() - 1;
  if (split < 1 || split >= n) throw ArgumentError("block split point out of range");
  const Index c = n - split;
  return {augmented.topLeftCorner(split, split),   augmented.block(0, split, split, c),
          augmented.block(split, 0, c, split),     augmented.block(split, split, c, c),
          augmented.block(0, n, split, 1),         augmented.block(split, n, c, 1)};
}

inline Matrix reassemble(const BlockView& v) {
  const Index s = v.rr.rows(), c = v.cc.rows(), n = s + c;
  Matrix out = Matrix::Zero(n + 1, n + 1);
  out.topLeftCorner(s, s) = v.rr;
  out.block(0, s, s, c) = v.rc;
  out.block(s, 0, c, s) = v.cr;
  out.block(s, s, c, c) = v.cc;
  out.block(0, n, s, 1) = v.br;
  out.block(s, n, c, 1) = v.bc;
  out(n, n) = 1.0;
  return out;
}

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

/// Per-token block norms (max-abs) of a model already expressed in a
/// readout-first basis.
inline void write_block_norms_csv(std::ostream& out, const ModelParams& p, Index split) {
  out << "symbol,rr,rc,cr,cc,br,bc\n";
  for (TokenId x = 0; x < p.vocab_size(); ++x) {
    const BlockView v = block_view(augment(p.transition(x)), split);
    out << display_symbol(p.vocab.symbol(x)) << ',' << format_number(max_abs(v.rr)) << ','
        << format_number(max_abs(v.rc)) << ',' << format_number(max_abs(v.cr)) << ',' << format_number(max_abs(v.cc))
        << ',' << format_number(max_abs(v.br)) << ',' << format_number(max_abs(v.bc)) << '\n';
  }
}

inline void write_matrix_csv(std::ostream& out, const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_number(m(r, c));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Counting basis for the parentheses model

struct CountingBasisOptions {
  double ridge = 1e-6;          // added to the unnormalized Gram matrix
  double max_residual = 0.1;    // RMS error of the fitted code coordinates
  // candidate pulls of the unvisited-direction preimages toward an
  // orthonormal complement, relative to the dynamics term
  std::vector<double> gauge_priors{1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
};

struct CountingBasis {
  BasisTransform transform;  // (n+1) x (n+1); rows: 12 readout, 12 count, unused, constant
  double residual_rms = 0.0;      // code fit on visited states
  double dynamics_residual = 0.0; // RMS of the preimage least-squares fit
  double automaton_error = 0.0;   // max |T W T^-1 - F| over code rows/cols and constant column
  double gauge_prior = 0.0;       // candidate that was kept
  Index visited_dim = 0;          // dimension of the visited affine subspace, constant included
  Index readout_dims = kParenOutputDim;
  Index code_dims = 2 * kParenOutputDim;
};

/// Augmented states after each step (columns) together with the lagged and
/// current 2-hot codes.
struct CodedStates {
  Matrix states;  // (n+1) x N
  Matrix codes;   // 24 x N: lagged code, then current code
};

inline CodedStates collect_coded_states(const ModelParams& p, const std::vector<ParenSample>& samples) {
  std::size_t total = 0;
  for (const auto& s : samples) total += s.tokens.size();
  if (total == 0) throw ArgumentError("no parentheses samples");
  const Index n = p.hidden_dim();
  CodedStates out{Matrix(n + 1, static_cast<Index>(total)), Matrix(2 * kParenOutputDim, static_cast<Index>(total))};
  Index col = 0;
  for (const auto& s : samples) {
    const StateTrajectory tr = run(p, s.tokens);
    for (Index t = 1; t <= tr.length(); ++t, ++col) {
      out.states.col(col) << tr.states.col(t), 1.0;
      out.codes.col(col) << s.targets.col(t - 1), paren_code(s.counts[static_cast<std::size_t>(t - 1)]);
    }
  }
  return out;
}

/// The reference solution in its own basis: 35 units, coordinates 0..11 hold
/// the lagged 2-hot output, 12..23 the current counts, the rest are unused.
/// Each parenthesis moves its own count block one level along a saturating
/// delay line and copies the current counts into the readout block.
inline ModelParams ideal_counting_model(Index hidden = 35) {
  const Index L = kParenLevels, out = kParenOutputDim;
  if (hidden < 2 * out) throw ArgumentError("ideal counting model needs at least 24 units");
  const Vocab vocab = Vocab::paren();
  ModelParams p = ModelParams::zeros(vocab, hidden, out);
  for (TokenId x = 0; x < vocab.size(); ++x) {
    Matrix& W = p.W[static_cast<std::size_t>(x)];
    W.block(0, out, out, out).setIdentity();
    for (int type = 0; type < 2; ++type) {
      for (int level = 0; level < L; ++level) {
        ParenCounts c{0, 0};
        c[static_cast<std::size_t>(type)] = level;
        const int next = paren_update(c, vocab.symbol(x))[static_cast<std::size_t>(type)];
        W(out + type * L + next, out + type * L + level) = 1.0;
      }
    }
  }
  const Vector zero_code = paren_code({0, 0});
  p.h0.head(out) = zero_code;
  p.h0.segment(out, out) = zero_code;
  p.readout.W.leftCols(out).setIdentity();
  return p;
}

namespace detail {

inline Index numerical_rank(const Matrix& m, double tol) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& s = svd.singularValues();
  Index r = 0;
  while (r < s.size() && s(r) > tol * s(0)) ++r;
  return r;
}

/// Orthonormal basis of the complement of span(basis) inside R^dim.
inline Matrix orthonormal_complement(const Matrix& basis, Index dim) {
  if (basis.cols() == 0) return Matrix::Identity(dim, dim);
  Eigen::JacobiSVD<Matrix> svd(basis, Eigen::ComputeFullU);
  const Index r = numerical_rank(basis, kRankTolerance);
  return svd.matrixU().rightCols(dim - r);
}

}  // namespace detail

/// Recovers coordinates in which the parentheses model's augmented state
/// reads as lagged counts (12 readout coordinates), current counts (12),
/// 11 unused coordinates, and the constant.
///
/// The 2-hot codes span only 21 dimensions (each block sums to the
/// constant), so the code is fitted on the matching 21-dimensional visited
/// subspace: the constant offset plus the leading principal directions of the
/// states. Data says nothing about the remaining directions. Their preimages
/// are chosen by least squares so that the transformed dynamics match the
/// ideal counting automaton, regularized toward an orthonormal complement.
/// Several regularization strengths are tried; the one whose transformed
/// dynamics lie closest to the automaton is kept. Every preimage outside the visited subspace has a zero
/// constant coordinate, so the last row of T stays (0, ..., 0, 1).
inline CountingBasis find_counting_basis(const ModelParams& p, const std::vector<ParenSample>& samples,
                                         const CountingBasisOptions& opt = {}) {
  detail::require_dim(p.output_dim(), kParenOutputDim, "parentheses readout dimension");
  if (p.vocab != Vocab::paren()) throw VocabError("counting basis needs the paren vocabulary");
  const Index n = p.hidden_dim();
  const Index m = n + 1;
  const Index codes = 2 * kParenOutputDim;
  if (n < codes) throw ArgumentError("hidden dimension too small for a counting basis");

  const CodedStates data = collect_coded_states(p, samples);
  const auto N = static_cast<double>(data.states.cols());
  Matrix code_c(codes + 1, data.codes.cols());
  code_c << data.codes, Eigen::RowVectorXd::Ones(data.codes.cols());
  const Index rho = detail::numerical_rank(code_c, 1e-9);

  // visited subspace: constant offset plus rho - 1 principal directions
  const Matrix hidden = data.states.topRows(n);
  const Vector mean = hidden.rowwise().mean();
  const Matrix centered = hidden.colwise() - mean;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(centered * centered.transpose() / N);
  const Matrix P = eig.eigenvectors().rightCols(rho - 1).rowwise().reverse();
  Matrix D = Matrix::Zero(m, rho);
  D.col(0) << mean, 1.0;
  D.bottomRightCorner(m, rho - 1).topRows(n) = P;
  Matrix y(rho, data.states.cols());
  y << Eigen::RowVectorXd::Ones(data.states.cols()), P.transpose() * centered;

  // code coordinates on the visited subspace
  const Matrix gram = y * y.transpose() + opt.ridge * Matrix::Identity(rho, rho);
  const Matrix A_code = gram.llt().solve(y * data.codes.transpose()).transpose();
  const double rms = std::sqrt((data.codes - A_code * y).squaredNorm() / (N * static_cast<double>(codes)));
  if (!(rms <= opt.max_residual))
    throw NumericError("counting-basis regression residual " + format_number(rms) +
                       " exceeds threshold; the model is not trained well enough");

  // target basis: images of the visited directions, gauge directions
  // completing the code block, then the unused coordinates
  Matrix Bz = Matrix::Zero(m, m);
  Bz.topLeftCorner(codes, rho) = A_code;
  Bz(n, 0) = 1.0;
  const Matrix range_q = Bz.leftCols(rho).householderQr().householderQ() * Matrix::Identity(m, rho);
  const Matrix constfree = range_q * detail::orthonormal_complement(range_q.row(n).transpose(), rho);
  const Matrix gauge = detail::orthonormal_complement(constfree.topRows(codes), codes);
  if (gauge.cols() != codes + 1 - rho) throw NumericError("counting-basis code images are degenerate");
  Bz.block(0, rho, codes, gauge.cols()) = gauge;
  Bz.block(codes, codes + 1, n - codes, n - codes).setIdentity();
  const Eigen::PartialPivLU<Matrix> bz_lu(Bz);

  // preimages of the remaining target directions: hidden-only vectors Vg,
  // pulled toward G0, the complement of the visited subspace
  const Index g = m - rho;
  const Index q = n * g;
  const Matrix G0 = detail::orthonormal_complement(P, n);  // n x g
  const ModelParams ideal = ideal_counting_model(n);
  Matrix normal = Matrix::Zero(q, q);
  Vector rhs = Vector::Zero(q);
  std::vector<Matrix> Ms, Ws, Fs;
  std::vector<Vector> cs;
  for (TokenId x = 0; x < p.vocab_size(); ++x) {
    const Matrix Wx = augment(p.transition(x));
    const Matrix Fx = bz_lu.solve(augment(ideal.transition(x)) * Bz);
    // residual W V - V F with V = [D, [Vg; 0]], vectorized column-major
    Matrix M = Matrix::Zero(m * m, q);
    for (Index k = 0; k < g; ++k) {       // column of Vg
      for (Index i = 0; i < n; ++i) {     // row of Vg
        const Index u = k * n + i;
        M.block((rho + k) * m, u, m, 1) += Wx.col(i);
        for (Index j = 0; j < m; ++j) M(j * m + i, u) -= Fx(rho + k, j);
      }
    }
    Matrix C = Matrix::Zero(m, m);
    C.leftCols(rho) = Wx * D;
    C -= D * Fx.topRows(rho);
    const Vector c = Eigen::Map<const Vector>(C.data(), C.size());
    normal.noalias() += M.transpose() * M;
    rhs.noalias() -= M.transpose() * c;
    Ms.push_back(std::move(M));
    cs.push_back(c);
    Ws.push_back(Wx);
    Fs.push_back(augment(ideal.transition(x)));
  }
  const Vector target = Eigen::Map<const Vector>(G0.data(), q);
  const double scale = std::max(normal.diagonal().mean(), 1e-300);

  CountingBasis best;
  best.transform.condition = std::numeric_limits<double>::infinity();
  double best_err = std::numeric_limits<double>::infinity();
  for (double prior : opt.gauge_priors) {
    const double lam = prior * scale;
    const Vector vg = (normal + lam * Matrix::Identity(q, q)).ldlt().solve(rhs + lam * target);
    Matrix V = Matrix::Zero(m, m);
    V.leftCols(rho) = D;
    V.topRightCorner(n, g) = Eigen::Map<const Matrix>(vg.data(), n, g);
    const Eigen::PartialPivLU<Matrix> v_lu(V);
    if (!(std::abs(v_lu.determinant()) > 0.0)) continue;
    Matrix T = Bz * v_lu.inverse();
    T.row(n) = Vector::Unit(m, n).transpose();
    BasisTransform tr;
    try {
      tr = make_basis(std::move(T));
    } catch (const NumericError&) {
      continue;
    }
    // distance of the transformed dynamics from the automaton on the code
    // coordinates and the constant column
    double err = 0.0;
    for (std::size_t x = 0; x < Ws.size(); ++x) {
      const Matrix E = tr.T * Ws[x] * tr.T_inv - Fs[x];
      err = std::max({err, max_abs(E.topLeftCorner(codes, codes)), max_abs(E.col(n).head(codes))});
    }
    if (err < best_err) {
      best_err = err;
      double dyn_ss = 0.0;
      for (std::size_t i = 0; i < Ms.size(); ++i) dyn_ss += (Ms[i] * vg + cs[i]).squaredNorm();
      best.transform = std::move(tr);
      best.dynamics_residual = std::sqrt(dyn_ss / static_cast<double>(m * m * p.vocab_size()));
      best.automaton_error = err;
      best.gauge_prior = prior;
    }
  }
  if (!std::isfinite(best_err)) throw NumericError("no well-conditioned counting basis found");
  best.residual_rms = rms;
  best.visited_dim = rho;
  return best;
}

/// Transformed augmented transition matrix of token x.
inline Matrix transformed_transition(const ModelParams& p, const BasisTransform& tr, TokenId x) {
  return tr.T * augment(p.transition(x)) * tr.T_inv;
}

}  // namespace isan
