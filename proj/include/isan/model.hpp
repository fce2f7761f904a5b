#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "isan/affine.hpp"
#include "isan/random.hpp"
#include "isan/types.hpp"
#include "isan/vocab.hpp"

namespace isan {

enum class Mode { switched, shared };

inline std::string to_string(Mode m) { return m == Mode::switched ? "switched" : "shared"; }

inline Mode parse_mode(std::string_view s) {
  if (s == "switched") return Mode::switched;
  if (s == "shared") return Mode::shared;
  throw ArgumentError("unknown mode '" + std::string(s) + "'");
}

/// Parameters of an input switched affine network:
///   h_t = W_{x_t} h_{t-1} + b_{x_t},   l_t = W_ro h_t + b_ro.
/// In shared mode a single transition matrix serves every token; the biases
/// stay per-token.
struct ModelParams {
  Mode mode = Mode::switched;
  Vocab vocab;
  std::vector<Matrix> W;  // K matrices (switched) or one (shared)
  Matrix B;               // n x K, column x is b_x
  Vector h0;
  AffineMap readout;      // n -> output_dim

  Index hidden_dim() const noexcept { return h0.size(); }
  Index output_dim() const noexcept { return readout.out_dim(); }
  int vocab_size() const noexcept { return vocab.size(); }

  const Matrix& transition_matrix(TokenId x) const {
    vocab.check(x);
    return mode == Mode::shared ? W.front() : W[static_cast<std::size_t>(x)];
  }
  Matrix& transition_matrix(TokenId x) {
    vocab.check(x);
    return mode == Mode::shared ? W.front() : W[static_cast<std::size_t>(x)];
  }
  auto bias(TokenId x) const {
    vocab.check(x);
    return B.col(x);
  }
  AffineMap transition(TokenId x) const { return {transition_matrix(x), bias(x)}; }

  /// All zeros with the given layout.
  static ModelParams zeros(Vocab v, Index hidden, Index output_dim, Mode m = Mode::switched) {
    ModelParams p;
    p.mode = m;
    p.vocab = std::move(v);
    const std::size_t count = m == Mode::shared ? 1 : static_cast<std::size_t>(p.vocab.size());
    p.W.assign(count, Matrix::Zero(hidden, hidden));
    p.B = Matrix::Zero(hidden, p.vocab.size());
    p.h0 = Vector::Zero(hidden);
    p.readout = AffineMap(Matrix::Zero(output_dim, hidden), Vector::Zero(output_dim));
    return p;
  }

  void validate() const {
    const Index n = hidden_dim();
    const std::size_t want = mode == Mode::shared ? 1 : static_cast<std::size_t>(vocab.size());
    if (vocab.size() < 2) throw VocabError("vocabulary needs at least 2 symbols");
    if (W.size() != want)
      throw ShapeError("expected " + std::to_string(want) + " transition matrices, got " +
                       std::to_string(W.size()));
    for (const auto& w : W) {
      detail::require_dim(w.rows(), n, "transition rows");
      detail::require_dim(w.cols(), n, "transition cols");
    }
    detail::require_dim(B.rows(), n, "bias rows");
    detail::require_dim(B.cols(), vocab.size(), "bias count");
    detail::require_dim(readout.in_dim(), n, "readout input");
    readout.check_shape();
    if (!all_finite()) throw NumericError("non-finite parameter");
  }

  bool all_finite() const {
    for (const auto& w : W)
      if (!w.allFinite()) return false;
    return B.allFinite() && h0.allFinite() && readout.all_finite();
  }
};

inline ModelParams zeros_like(const ModelParams& p) {
  return ModelParams::zeros(p.vocab, p.hidden_dim(), p.output_dim(), p.mode);
}

/// Visits every parameter tensor as a flat column-major view, in a fixed order:
/// transition.W[.i], transition.b, h0, readout.W, readout.b.
template <class Params, class Fn>
  requires std::is_same_v<std::remove_const_t<Params>, ModelParams>
void for_each_tensor(Params& p, Fn&& fn) {
  using Scalar = std::conditional_t<std::is_const_v<Params>, const double, double>;
  using Flat = Eigen::Map<std::conditional_t<std::is_const_v<Params>, const Vector, Vector>>;
  auto flat = [](auto& m) { return Flat(static_cast<Scalar*>(m.data()), m.size()); };
  if (p.mode == Mode::shared) {
    fn(std::string("transition.W"), flat(p.W.front()));
  } else {
    for (std::size_t i = 0; i < p.W.size(); ++i)
      fn("transition.W." + std::to_string(i), flat(p.W[i]));
  }
  fn(std::string("transition.b"), flat(p.B));
  fn(std::string("h0"), flat(p.h0));
  fn(std::string("readout.W"), flat(p.readout.W));
  fn(std::string("readout.b"), flat(p.readout.b));
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, auto v) { n += static_cast<std::size_t>(v.size()); });
  return n;
}

/// Same parameters in switched mode (the shared matrix copied per token).
inline ModelParams to_switched(const ModelParams& p) {
  if (p.mode == Mode::switched) return p;
  ModelParams out = p;
  out.mode = Mode::switched;
  out.W.assign(static_cast<std::size_t>(p.vocab.size()), p.W.front());
  return out;
}

struct InitConfig {
  double gamma = 0.95;  // identity scale of each transition matrix
  double sigma = 0.1;   // transition noise is N(0, sigma^2 / n)
};

/// W_x = gamma I + N(0, sigma^2/n), b_x = 0, h0 = 0, W_ro ~ N(0, 1/n), b_ro = 0.
inline ModelParams make_model(const Vocab& vocab, Index hidden, Index output_dim, Mode mode,
                              std::uint64_t seed, const InitConfig& init = {}) {
  if (hidden < 1) throw ArgumentError("hidden dimension must be positive");
  if (output_dim < 1) throw ArgumentError("output dimension must be positive");
  ModelParams p = ModelParams::zeros(vocab, hidden, output_dim, mode);
  Rng rng(seed);
  const double ws = init.sigma / std::sqrt(static_cast<double>(hidden));
  for (auto& w : p.W) {
    for (Index c = 0; c < hidden; ++c)
      for (Index r = 0; r < hidden; ++r) w(r, c) = ws * rng.normal();
    w.diagonal().array() += init.gamma;
  }
  const double rs = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Index c = 0; c < hidden; ++c)
    for (Index r = 0; r < output_dim; ++r) p.readout.W(r, c) = rs * rng.normal();
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

inline Vector step(const ModelParams& p, const Vector& h, TokenId x) {
  detail::require_dim(h.size(), p.hidden_dim(), "hidden state");
  const Matrix& W = p.transition_matrix(x);
  Vector out = p.B.col(x);
  out.noalias() += W * h;
  return out;
}

inline Vector step(const ModelParams& p, const Vector& h, char symbol) {
  return step(p, h, p.vocab.index(symbol));
}

/// states.col(0) = h0, states.col(t) = h_t after consuming tokens[t-1].
struct StateTrajectory {
  Matrix states;
  TokenSeq tokens;

  Index length() const noexcept { return static_cast<Index>(tokens.size()); }
  auto state(Index t) const { return states.col(t); }
};

inline StateTrajectory run(const ModelParams& p, const TokenSeq& tokens) {
  if (tokens.empty()) throw ArgumentError("run needs at least one token");
  StateTrajectory tr;
  tr.tokens = tokens;
  tr.states.resize(p.hidden_dim(), static_cast<Index>(tokens.size()) + 1);
  tr.states.col(0) = p.h0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TokenId x = tokens[t];
    const auto col = static_cast<Index>(t);
    tr.states.col(col + 1) = p.B.col(x);
    tr.states.col(col + 1).noalias() += p.transition_matrix(x) * tr.states.col(col);
  }
  return tr;
}

template <class Derived>
Vector logits(const ModelParams& p, const Eigen::MatrixBase<Derived>& h) {
  detail::require_dim(h.size(), p.hidden_dim(), "hidden state");
  Vector l = p.readout.b;
  l.noalias() += p.readout.W * h;
  return l;
}

/// Max-subtracted softmax. Shift invariance holds up to rounding.
template <class Derived>
Vector softmax(const Eigen::MatrixBase<Derived>& l) {
  const double m = l.maxCoeff();
  Vector e = (l.array() - m).exp().matrix();
  return e / e.sum();
}

template <class Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& l) {
  const double m = l.maxCoeff();
  return m + std::log((l.array() - m).exp().sum());
}

/// -log2 softmax(l)[target].
template <class Derived>
double surprisal_bits(const Eigen::MatrixBase<Derived>& l, TokenId target) {
  return (log_sum_exp(l) - l(target)) / std::numbers::ln2;
}

/// Index of the largest entry, lowest index on ties.
template <class Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

/// Mean over t = 1..T-1 of -log2 p(tokens[t] | tokens[0..t-1]), in bits.
inline double evaluate_bpc(const ModelParams& p, const TokenSeq& tokens) {
  if (tokens.size() < 2) throw ArgumentError("evaluate_bpc needs at least 2 tokens");
  Vector h = p.h0;
  Vector next(p.hidden_dim());
  Vector l(p.output_dim());
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const TokenId x = tokens[t];
    next = p.B.col(x);
    next.noalias() += p.transition_matrix(x) * h;
    h.swap(next);
    l = p.readout.b;
    l.noalias() += p.readout.W * h;
    const double bits = surprisal_bits(l, tokens[t + 1]);
    if (!std::isfinite(bits)) throw NumericError("non-finite loss", static_cast<long>(t));
    total += bits;
  }
  return total / static_cast<double>(tokens.size() - 1);
}

/// Draws from softmax(inv_temperature * l) by inverse CDF. An infinite
/// inverse temperature gives greedy argmax decoding.
inline TokenId sample_from_logits(const Vector& l, double inv_temperature, Rng& rng) {
  if (std::isinf(inv_temperature)) return static_cast<TokenId>(argmax(l));
  const Vector probs = softmax((inv_temperature * l).eval());
  const double u = rng.uniform();
  double acc = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(argmax(probs));
}

/// Feeds the prompt, then generates `count` symbols, feeding each back.
inline TokenSeq sample(const ModelParams& p, const TokenSeq& prompt, std::size_t count,
                       double inv_temperature, std::uint64_t seed) {
  if (prompt.empty()) throw ArgumentError("sample needs a nonempty prompt");
  if (!(inv_temperature > 0.0)) throw ArgumentError("inverse temperature must be positive");
  Rng rng(seed);
  Vector h = p.h0;
  for (TokenId x : prompt) h = step(p, h, x);
  TokenSeq out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const TokenId x = sample_from_logits(logits(p, h), inv_temperature, rng);
    out.push_back(x);
    h = step(p, h, x);
  }
  return out;
}

}  // namespace isan
