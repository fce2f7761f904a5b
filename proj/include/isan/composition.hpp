#pragma once

// Affine maps of whole token strings. Since every step is affine, a string's
// effect on the hidden state collapses into one (W, b) pair that can be
// cached and applied at the cost of a single step.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "isan/affine.hpp"
#include "isan/data.hpp"
#include "isan/model.hpp"
#include "isan/stats.hpp"

namespace isan {

/// Left-to-right fold of the tokens' maps.
inline AffineMap compose_string(const ModelParams& p, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ArgumentError("compose_string needs at least one token");
  AffineMap acc = p.transition(tokens.front());
  for (std::size_t i = 1; i < tokens.size(); ++i) acc = compose(acc, p.transition(tokens[i]));
  return acc;
}

namespace detail {

// Balanced-tree composition; used to cross-check the sequential fold.
inline AffineMap compose_tree(const ModelParams& p, std::span<const TokenId> tokens) {
  if (tokens.size() == 1) return p.transition(tokens.front());
  const std::size_t mid = tokens.size() / 2;
  return compose(compose_tree(p, tokens.first(mid)), compose_tree(p, tokens.subspan(mid)));
}

inline std::string key_of(std::span<const TokenId> tokens) {
  std::string k(tokens.size(), '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) k[i] = static_cast<char>(tokens[i]);
  return k;
}

inline double relative_gap(const AffineMap& a, const AffineMap& b) {
  const double scale = std::max({1.0, a.W.cwiseAbs().maxCoeff(), a.b.cwiseAbs().maxCoeff()});
  const double gap = std::max((a.W - b.W).cwiseAbs().maxCoeff(), (a.b - b.b).cwiseAbs().maxCoeff());
  return gap / scale;
}

}  // namespace detail

enum class TablePolicyKind { top_words, ngrams };

struct TablePolicy {
  TablePolicyKind kind = TablePolicyKind::top_words;
  std::size_t top_k = 2000;                 // top_words: number of words kept
  std::size_t max_ngram = 3;                // ngrams: all substrings up to this length
  std::size_t max_bytes = std::size_t{1} << 30;
  double verify_tolerance = 1e-12;
};

inline std::string to_string(const TablePolicy& p) {
  return p.kind == TablePolicyKind::top_words ? "top_words:" + std::to_string(p.top_k)
                                              : "ngrams:" + std::to_string(p.max_ngram);
}

/// Immutable after build; lookups are safe from several threads.
class CompositionTable {
 public:
  CompositionTable() = default;

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const TablePolicy& policy() const noexcept { return policy_; }
  Index hidden_dim() const noexcept { return hidden_; }
  /// Stored reals: sum over entries of n^2 + n.
  std::size_t reals() const noexcept { return entries_.size() * static_cast<std::size_t>(hidden_ * hidden_ + hidden_); }
  std::size_t bytes() const noexcept { return reals() * sizeof(double); }
  /// True when the memory cap dropped some candidates.
  bool truncated() const noexcept { return truncated_; }
  std::size_t max_key_length() const noexcept { return max_len_; }

  const AffineMap* find(std::span<const TokenId> tokens) const {
    if (tokens.size() > max_len_) return nullptr;
    key_.assign(tokens.size(), '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) key_[i] = static_cast<char>(tokens[i]);
    const auto it = entries_.find(key_);
    return it == entries_.end() ? nullptr : &it->second;
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [k, v] : entries_) fn(k, v);
  }

  friend CompositionTable build_table(const ModelParams&, std::span<const TokenId>, const TablePolicy&);

 private:
  std::unordered_map<std::string, AffineMap> entries_;
  TablePolicy policy_;
  Index hidden_ = 0;
  std::size_t max_len_ = 0;
  bool truncated_ = false;
  // scratch for find(); a table shared across threads needs one copy each
  static inline thread_local std::string key_;
};

/// Candidate strings ordered by descending frequency (ties by key).
inline std::vector<std::pair<std::string, std::size_t>> table_candidates(std::span<const TokenId> corpus,
                                                                         TokenId space, const TablePolicy& policy) {
  std::unordered_map<std::string, std::size_t> counts;
  if (policy.kind == TablePolicyKind::top_words) {
    for (const auto& w : word_spans(corpus, space)) ++counts[detail::key_of(corpus.subspan(w.begin, w.end - w.begin))];
  } else {
    for (std::size_t i = 0; i < corpus.size(); ++i)
      for (std::size_t len = 2; len <= policy.max_ngram && i + len <= corpus.size(); ++len)
        ++counts[detail::key_of(corpus.subspan(i, len))];
  }
  std::vector<std::pair<std::string, std::size_t>> out(counts.begin(), counts.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (policy.kind == TablePolicyKind::top_words && out.size() > policy.top_k) out.resize(policy.top_k);
  return out;
}

/// Every entry is composed twice, sequentially and as a balanced tree, and
/// the two must agree to policy.verify_tolerance (relative).
inline CompositionTable build_table(const ModelParams& p, std::span<const TokenId> corpus, const TablePolicy& policy) {
  if (policy.kind == TablePolicyKind::ngrams && policy.max_ngram < 1) throw ArgumentError("n-gram length must be >= 1");
  CompositionTable table;
  table.policy_ = policy;
  table.hidden_ = p.hidden_dim();
  const std::size_t per_entry = static_cast<std::size_t>(p.hidden_dim() * p.hidden_dim() + p.hidden_dim()) * sizeof(double);
  const TokenId space = p.vocab.contains(' ') ? p.vocab.index(' ') : -1;
  auto add = [&](const std::string& key) {
    if ((table.entries_.size() + 1) * per_entry > policy.max_bytes) {
      table.truncated_ = true;
      return false;
    }
    TokenSeq toks(key.begin(), key.end());
    for (TokenId x : toks) p.vocab.check(x);
    AffineMap seq = compose_string(p, toks);
    const double gap = detail::relative_gap(seq, detail::compose_tree(p, toks));
    if (!(gap <= policy.verify_tolerance))
      throw NumericError("composition table entry failed verification (relative gap " + format_number(gap) + ")");
    table.max_len_ = std::max(table.max_len_, key.size());
    table.entries_.emplace(key, std::move(seq));
    return true;
  };
  if (policy.kind == TablePolicyKind::ngrams) {
    // single tokens first so that greedy cover never misses
    for (TokenId x = 0; x < p.vocab_size(); ++x)
      if (!add(std::string(1, static_cast<char>(x)))) return table;
  }
  if (policy.kind == TablePolicyKind::top_words && policy.top_k == 0) return table;
  for (const auto& [key, count] : table_candidates(corpus, space, policy))
    if (!add(key)) break;
  return table;
}

struct FastRunResult {
  Vector final_state;
  Matrix boundary_states;              // n x words, state after each word
  std::vector<std::size_t> boundaries; // token count consumed at each boundary
  std::size_t hits = 0;                // words applied as one table entry
  std::size_t misses = 0;
  std::size_t applications = 0;        // affine applications performed
};

/// Runs the text word by word. A word found in the table is a single affine
/// application; other words are covered greedily by the longest table keys,
/// falling back to single steps. Interior states of a word are not produced.
inline FastRunResult fast_run(const ModelParams& p, const CompositionTable& table, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ArgumentError("fast_run needs at least one token");
  for (TokenId x : tokens) p.vocab.check(x);
  if (!table.empty()) detail::require_dim(table.hidden_dim(), p.hidden_dim(), "composition table dimension");
  const TokenId space = p.vocab.contains(' ') ? p.vocab.index(' ') : -1;
  const auto words = word_spans(tokens, space);
  FastRunResult out;
  out.boundary_states.resize(p.hidden_dim(), static_cast<Index>(words.size()));
  Vector h = p.h0, tmp(p.hidden_dim());
  auto apply = [&](const Matrix& W, const auto& b) {
    tmp = b;
    tmp.noalias() += W * h;
    h.swap(tmp);
    ++out.applications;
  };
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto span = tokens.subspan(words[w].begin, words[w].end - words[w].begin);
    if (const AffineMap* m = table.find(span)) {
      apply(m->W, m->b);
      ++out.hits;
    } else {
      ++out.misses;
      std::size_t i = 0;
      while (i < span.size()) {
        const AffineMap* piece = nullptr;
        std::size_t len = std::min(table.max_key_length(), span.size() - i);
        while (len > 1 && !(piece = table.find(span.subspan(i, len)))) --len;
        if (piece) {
          apply(piece->W, piece->b);
          i += len;
        } else {
          apply(p.transition_matrix(span[i]), p.B.col(span[i]));
          ++i;
        }
      }
    }
    out.boundary_states.col(static_cast<Index>(w)) = h;
    out.boundaries.push_back(words[w].end);
  }
  out.final_state = h;
  return out;
}

/// Final state by plain per-token stepping.
inline Vector final_state(const ModelParams& p, std::span<const TokenId> tokens) {
  Vector h = p.h0, tmp(p.hidden_dim());
  for (TokenId x : tokens) {
    tmp = p.B.col(x);
    tmp.noalias() += p.transition_matrix(x) * h;
    h.swap(tmp);
  }
  return h;
}

struct BenchReport {
  Index n = 0;
  int vocab = 0;
  std::string policy;
  std::size_t entries = 0;
  std::size_t bytes = 0;
  double per_char_ns_per_token = 0;
  double fast_ns_per_token = 0;
  double matvec_ratio = 0;  // per-token applications / fast-path applications
  double speedup = 0;       // measured wall-time ratio
  std::size_t hits = 0, misses = 0;
};

/// Medians over `repetitions` timed runs of each path, after one untimed
/// warm-up run of each.
inline BenchReport bench(const ModelParams& p, const CompositionTable& table, std::span<const TokenId> tokens,
                         int repetitions = 7) {
  if (repetitions < 1) throw ArgumentError("repetitions must be positive");
  if (tokens.empty()) throw ArgumentError("bench needs tokens");
  using clock = std::chrono::steady_clock;
  auto time_ns = [](auto&& fn) {
    const auto t0 = clock::now();
    fn();
    return static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - t0).count());
  };
  volatile double sink = 0;
  FastRunResult fast = fast_run(p, table, tokens);
  sink = sink + final_state(p, tokens)(0);
  std::vector<double> slow_t, fast_t;
  for (int r = 0; r < repetitions; ++r) {
    slow_t.push_back(time_ns([&] { sink = sink + final_state(p, tokens)(0); }));
    fast_t.push_back(time_ns([&] { sink = sink + fast_run(p, table, tokens).final_state(0); }));
  }
  const auto T = static_cast<double>(tokens.size());
  BenchReport r;
  r.n = p.hidden_dim();
  r.vocab = p.vocab_size();
  r.policy = to_string(table.policy());
  r.entries = table.size();
  r.bytes = table.bytes();
  r.per_char_ns_per_token = median(slow_t) / T;
  r.fast_ns_per_token = median(fast_t) / T;
  r.matvec_ratio = T / static_cast<double>(fast.applications);
  r.speedup = r.per_char_ns_per_token / r.fast_ns_per_token;
  r.hits = fast.hits;
  r.misses = fast.misses;
  return r;
}

}  // namespace isan
