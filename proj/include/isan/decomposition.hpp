#pragma once

// Exact additive decomposition of ISAN logits into per-source contributions:
//
//   l_t = b_ro + sum_{s=0..t} kappa_s^t,
//   kappa_s^t = W_ro (W_{x_t} ... W_{x_{s+1}}) b_{x_s},   b_{x_0} := h0.
//
// kappa_t^t is W_ro b_{x_t} (empty product). Contributions are computed by
// pushing hidden-space vectors forward one step at a time, never by forming
// matrix products.

#include <algorithm>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "isan/data.hpp"
#include "isan/io.hpp"
#include "isan/model.hpp"
#include "isan/stats.hpp"

namespace isan {

/// Yields the contribution row of one target step at a time. Memory is
/// O(t * n) for the propagated hidden vectors.
class KappaStream {
 public:
  explicit KappaStream(const ModelParams& p) : p_(&p) {
    V_.resize(p.hidden_dim(), 16);
    V_.col(0) = p.h0;
    active_ = 1;
  }

  /// Steps consumed so far (t of the current row).
  Index t() const noexcept { return active_ - 1; }

  /// K x (t+1) matrix, column s = kappa_s^t for the current t.
  Matrix row() const { return p_->readout.W * V_.leftCols(active_); }

  /// Hidden-space contributions, column s = (W...W) b_{x_s}.
  auto hidden_row() const { return V_.leftCols(active_); }

  void advance(TokenId x) {
    const Matrix& W = p_->transition_matrix(x);
    if (active_ == V_.cols()) V_.conservativeResize(Eigen::NoChange, 2 * V_.cols());
    tmp_.noalias() = W * V_.leftCols(active_);
    V_.leftCols(active_) = tmp_;
    V_.col(active_) = p_->B.col(x);
    ++active_;
  }

 private:
  const ModelParams* p_;
  Matrix V_, tmp_;
  Index active_ = 0;
};

/// All kappa_s^t for 0 <= s <= t <= T, stored lower-triangular. Takes
/// O(T^2 K) memory, so construction is capped at max_steps tokens; longer
/// texts should go through KappaStream or the windowed analyses below.
class KappaTensor {
 public:
  static constexpr Index kDefaultMaxSteps = 512;

  KappaTensor() = default;

  KappaTensor(const ModelParams& p, const TokenSeq& tokens, Index max_steps = kDefaultMaxSteps)
      : tokens_(tokens), readout_bias_(p.readout.b) {
    const auto T = static_cast<Index>(tokens.size());
    if (T < 1) throw ArgumentError("kappa needs at least one token");
    if (T > max_steps)
      throw ArgumentError("kappa tensor capped at " + std::to_string(max_steps) + " steps; use KappaStream");
    for (TokenId x : tokens) p.vocab.check(x);
    data_.resize(p.output_dim(), offset(T + 1));
    KappaStream stream(p);
    data_.col(0) = stream.row().col(0);
    for (Index t = 1; t <= T; ++t) {
      stream.advance(tokens[static_cast<std::size_t>(t - 1)]);
      data_.middleCols(offset(t), t + 1) = stream.row();
    }
  }

  Index steps() const noexcept { return static_cast<Index>(tokens_.size()); }
  Index output_dim() const noexcept { return data_.rows(); }
  const TokenSeq& tokens() const noexcept { return tokens_; }
  const Vector& readout_bias() const noexcept { return readout_bias_; }

  /// Token at source step s (1-based), or -1 for the h0 slot s = 0.
  TokenId source_token(Index s) const { return s == 0 ? -1 : tokens_[static_cast<std::size_t>(s - 1)]; }

  auto contribution(Index s, Index t) const {
    check(s, t);
    return data_.col(offset(t) + s);
  }

  /// K x (t+1) block of all contributions to step t.
  auto row(Index t) const {
    check(0, t);
    return data_.middleCols(offset(t), t + 1);
  }

 private:
  static Index offset(Index t) noexcept { return t * (t + 1) / 2; }
  void check(Index s, Index t) const {
    if (t < 0 || t > steps() || s < 0 || s > t)
      throw ArgumentError("kappa index (s=" + std::to_string(s) + ", t=" + std::to_string(t) + ") out of range");
  }

  TokenSeq tokens_;
  Vector readout_bias_;
  Matrix data_;
};

inline KappaTensor kappa(const ModelParams& p, const TokenSeq& tokens,
                         Index max_steps = KappaTensor::kDefaultMaxSteps) {
  return KappaTensor(p, tokens, max_steps);
}

/// b_ro + sum_{s <= t} kappa_s^t.
inline Vector reconstruct_logits(const KappaTensor& k, Index t) {
  return k.readout_bias() + k.row(t).rowwise().sum();
}

// ---------------------------------------------------------------------------
// Source masks

/// Which source steps are kept. token is -1 for the h0 slot.
struct SourceMask {
  std::function<bool(Index s, TokenId token, Index t)> keep;

  bool operator()(Index s, TokenId token, Index t) const { return keep(s, token, t); }

  static SourceMask all() { return {[](Index, TokenId, Index) { return true; }}; }
  static SourceMask none() { return {[](Index, TokenId, Index) { return false; }}; }
  static SourceMask only_token(TokenId x) { return {[x](Index, TokenId tok, Index) { return tok == x; }}; }
  static SourceMask except_token(TokenId x) { return {[x](Index, TokenId tok, Index) { return tok != x; }}; }
  /// Sources with t - s < n (h0 included once it is recent enough).
  static SourceMask most_recent(Index n) { return {[n](Index s, TokenId, Index t) { return t - s < n; }}; }
  /// Sources in [begin, end).
  static SourceMask positions(Index begin, Index end) {
    return {[begin, end](Index s, TokenId, Index) { return s >= begin && s < end; }};
  }
  static SourceMask except_positions(Index begin, Index end) {
    return {[begin, end](Index s, TokenId, Index) { return s < begin || s >= end; }};
  }
  SourceMask operator|(const SourceMask& o) const {
    return {[a = keep, b = o.keep](Index s, TokenId tok, Index t) { return a(s, tok, t) || b(s, tok, t); }};
  }
};

struct MaskedPrediction {
  Vector logits;
  Vector probs;
};

/// b_ro plus the contributions passing the mask, and its softmax.
inline MaskedPrediction masked_logits(const KappaTensor& k, const SourceMask& mask, Index t) {
  Vector l = k.readout_bias();
  const auto r = k.row(t);
  for (Index s = 0; s <= t; ++s)
    if (mask(s, k.source_token(s), t)) l += r.col(s);
  Vector probs = softmax(l);
  return {std::move(l), std::move(probs)};
}

// ---------------------------------------------------------------------------
// Analyses over long texts

/// Bits/char when step t only sees b_ro plus the contributions of its n most
/// recent sources (t - s < n, h0 counted as source 0). Predictions are aligned
/// with evaluate_bpc.
inline double truncated_history_bpc(const ModelParams& p, const TokenSeq& tokens, Index n) {
  if (tokens.size() < 2) throw ArgumentError("truncated_history_bpc needs at least 2 tokens");
  if (n < 0) throw ArgumentError("history length must be nonnegative");
  const Index hidden = p.hidden_dim();
  const auto T = static_cast<Index>(tokens.size());
  const Index cap = std::min<Index>(n, T + 1);
  // circular window of propagated hidden contributions, oldest at `head`
  Matrix V(hidden, std::max<Index>(cap, 1)), tmp;
  Index active = 0, head = 0;
  auto push = [&](const auto& v) {
    if (cap == 0) return;
    if (active < cap) {
      V.col((head + active) % cap) = v;
      ++active;
    } else {
      V.col(head) = v;
      head = (head + 1) % cap;
    }
  };
  push(p.h0);
  double total = 0.0;
  for (Index t = 1; t < T; ++t) {
    const TokenId x = tokens[static_cast<std::size_t>(t - 1)];
    if (active > 0) {
      tmp.noalias() = p.transition_matrix(x) * V.leftCols(active == cap ? cap : active);
      V.leftCols(tmp.cols()) = tmp;
    }
    push(p.B.col(x));
    Vector h = active > 0 ? Vector(V.leftCols(active).rowwise().sum()) : Vector::Zero(hidden);
    total += surprisal_bits(logits(p, h), tokens[static_cast<std::size_t>(t)]);
  }
  return total / static_cast<double>(T - 1);
}

struct DecaySummary {
  std::vector<double> mean_norm;   // index = lag t - s
  std::vector<std::size_t> count;
};

/// Mean l2 norm of kappa_s^t over all pairs with t - s = lag, h0 excluded.
inline DecaySummary decay_curve(const ModelParams& p, const TokenSeq& tokens, Index max_lag) {
  if (max_lag < 1) throw ArgumentError("max_lag must be at least 1");
  const Index hidden = p.hidden_dim();
  const auto T = static_cast<Index>(tokens.size());
  const Index cap = max_lag + 1;
  DecaySummary out;
  out.mean_norm.assign(static_cast<std::size_t>(cap), 0.0);
  out.count.assign(static_cast<std::size_t>(cap), 0);
  Matrix V(hidden, cap), tmp, K;
  std::vector<Index> src(static_cast<std::size_t>(cap), 0);
  Index active = 0, head = 0;
  for (Index t = 1; t <= T; ++t) {
    const TokenId x = tokens[static_cast<std::size_t>(t - 1)];
    if (active > 0) {
      tmp.noalias() = p.transition_matrix(x) * V.leftCols(active);
      V.leftCols(active) = tmp;
    }
    Index slot;
    if (active < cap) {
      slot = (head + active) % cap;
      ++active;
    } else {
      slot = head;
      head = (head + 1) % cap;
    }
    V.col(slot) = p.B.col(x);
    src[static_cast<std::size_t>(slot)] = t;
    K.noalias() = p.readout.W * V.leftCols(active);
    for (Index c = 0; c < active; ++c) {
      const auto lag = static_cast<std::size_t>(t - src[static_cast<std::size_t>(c)]);
      out.mean_norm[lag] += K.col(c).norm();
      ++out.count[lag];
    }
  }
  for (std::size_t i = 0; i < out.mean_norm.size(); ++i)
    out.mean_norm[i] = out.count[i] ? out.mean_norm[i] / static_cast<double>(out.count[i])
                                    : std::numeric_limits<double>::quiet_NaN();
  return out;
}

enum class SpaceMaskMode { all, only_space, without_space };

struct PositionCe {
  std::vector<double> median_bits;  // index = position in word
  std::vector<std::size_t> count;
};

/// Position of each token inside its word: the leading space is 0, the
/// first letter 1. A word at the very start of the text (no leading space)
/// starts at 1.
inline std::vector<Index> positions_in_word(const TokenSeq& tokens, TokenId space) {
  std::vector<Index> pos(tokens.size(), 0);
  for (const auto& w : word_spans(tokens, space)) {
    const Index base = tokens[w.begin] == space ? 0 : 1;
    for (std::size_t i = w.begin; i < w.end; ++i) pos[i] = base + static_cast<Index>(i - w.begin);
  }
  return pos;
}

/// Median surprisal per word position when the logits use b_ro plus
/// (all | only space-sourced | all but space-sourced) contributions. The h0
/// contribution counts as non-space.
inline PositionCe position_in_word_ce(const ModelParams& p, const TokenSeq& tokens, SpaceMaskMode mode) {
  if (tokens.size() < 2) throw ArgumentError("position_in_word_ce needs at least 2 tokens");
  const TokenId space = p.vocab.index(' ');
  const auto pos = positions_in_word(tokens, space);
  // hidden-space sums of the space-sourced and other contributions
  Vector hs = Vector::Zero(p.hidden_dim());
  Vector ho = p.h0;
  Vector tmp;
  std::vector<std::vector<double>> per_pos;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const TokenId x = tokens[t - 1];
    const Matrix& W = p.transition_matrix(x);
    tmp.noalias() = W * hs;
    hs.swap(tmp);
    tmp.noalias() = W * ho;
    ho.swap(tmp);
    (x == space ? hs : ho) += p.B.col(x);
    Vector h;
    switch (mode) {
      case SpaceMaskMode::all: h = hs + ho; break;
      case SpaceMaskMode::only_space: h = hs; break;
      case SpaceMaskMode::without_space: h = ho; break;
    }
    const auto k = static_cast<std::size_t>(pos[t]);
    if (per_pos.size() <= k) per_pos.resize(k + 1);
    per_pos[k].push_back(surprisal_bits(logits(p, h), tokens[t]));
  }
  PositionCe out;
  for (const auto& v : per_pos) {
    out.median_bits.push_back(median(v));
    out.count.push_back(v.size());
  }
  return out;
}

inline SpaceMaskMode parse_space_mode(std::string_view s) {
  if (s == "all") return SpaceMaskMode::all;
  if (s == "only_space" || s == "only-space") return SpaceMaskMode::only_space;
  if (s == "without_space" || s == "without-space") return SpaceMaskMode::without_space;
  throw ArgumentError("unknown position-CE mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Word-level aggregation

struct WordContributions {
  std::vector<WordSpan> words;   // token index ranges; source step = token index + 1
  std::vector<Matrix> per_step;  // per target t: K x n_words, summed kappa of each word
  Matrix norms;                  // n_words x (T+1); NaN before the word starts
};

/// Sums kappa_s^t over the sources of each word (words carry their leading
/// space). The h0 slot belongs to no word.
inline WordContributions word_contributions(const KappaTensor& k, TokenId space) {
  WordContributions out;
  out.words = word_spans(k.tokens(), space);
  const auto nw = static_cast<Index>(out.words.size());
  const Index T = k.steps();
  out.norms = Matrix::Constant(nw, T + 1, std::numeric_limits<double>::quiet_NaN());
  for (Index t = 0; t <= T; ++t) {
    Matrix agg = Matrix::Zero(k.output_dim(), nw);
    const auto r = k.row(t);
    for (Index w = 0; w < nw; ++w) {
      const auto& span = out.words[static_cast<std::size_t>(w)];
      const auto first = static_cast<Index>(span.begin) + 1;
      if (first > t) continue;
      const Index last = std::min<Index>(static_cast<Index>(span.end), t);
      agg.col(w) = r.middleCols(first, last - first + 1).rowwise().sum();
      out.norms(w, t) = agg.col(w).norm();
    }
    out.per_step.push_back(std::move(agg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV exports

/// Heatmap with one row per source step (plus a leading "bias" row) and one
/// column per target step. logit_index selects a logit; a negative value
/// exports the l2 norm of each contribution. Cells with s > t are empty.
inline void write_kappa_csv(std::ostream& out, const KappaTensor& k, const Vocab& vocab, Index logit_index) {
  const Index T = k.steps();
  out << "source,symbol";
  for (Index t = 0; t <= T; ++t) out << ",t" << t;
  out << '\n';
  auto cell = [&](const auto& v) { return format_number(logit_index < 0 ? v.norm() : v(logit_index)); };
  out << "bias,";
  for (Index t = 0; t <= T; ++t) out << ',' << cell(k.readout_bias());
  out << '\n';
  for (Index s = 0; s <= T; ++s) {
    out << s << ',' << (s == 0 ? std::string("h0") : display_symbol(vocab.symbol(k.source_token(s))));
    for (Index t = 0; t <= T; ++t) {
      out << ',';
      if (s <= t) out << cell(k.contribution(s, t));
    }
    out << '\n';
  }
}

/// Row per word, column per target step, cells are ||kappa_word^t||.
inline void write_word_norms_csv(std::ostream& out, const WordContributions& wc, const TokenSeq& tokens,
                                 const Vocab& vocab) {
  out << "word";
  for (Index t = 0; t < wc.norms.cols(); ++t) out << ",t" << t;
  out << '\n';
  for (std::size_t w = 0; w < wc.words.size(); ++w) {
    std::string text;
    for (std::size_t i = wc.words[w].begin; i < wc.words[w].end; ++i) text += display_symbol(vocab.symbol(tokens[i]));
    out << text;
    for (Index t = 0; t < wc.norms.cols(); ++t) {
      out << ',';
      const double v = wc.norms(static_cast<Index>(w), t);
      if (!std::isnan(v)) out << format_number(v);
    }
    out << '\n';
  }
}

inline void write_decay_csv(std::ostream& out, const DecaySummary& d) {
  out << "lag,mean_norm\n";
  for (std::size_t i = 0; i < d.mean_norm.size(); ++i) out << i << ',' << format_number(d.mean_norm[i]) << '\n';
}

inline void write_position_ce_csv(std::ostream& out, const PositionCe& pc) {
  out << "position,median_bits\n";
  for (std::size_t i = 0; i < pc.median_bits.size(); ++i) out << i << ',' << format_number(pc.median_bits[i]) << '\n';
}

}  // namespace isan
