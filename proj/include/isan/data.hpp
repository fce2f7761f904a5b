#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "isan/io.hpp"
#include "isan/model.hpp"
#include "isan/random.hpp"
#include "isan/stats.hpp"
#include "isan/vocab.hpp"

namespace isan {

// ---------------------------------------------------------------------------
// Text corpus

struct Corpus {
  Vocab vocab;
  TokenSeq train;
  TokenSeq validation;
  TokenSeq test;

  std::size_t size() const noexcept { return train.size() + validation.size() + test.size(); }
};

/// Contiguous 90/5/5 split by position: train gets floor(0.9 L), validation
/// floor(0.05 L), test the remainder.
inline Corpus split_corpus(const Vocab& vocab, const TokenSeq& all) {
  const std::size_t L = all.size();
  const std::size_t n_train = L * 9 / 10;
  const std::size_t n_val = L / 20;
  Corpus c;
  c.vocab = vocab;
  c.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                      all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  c.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
  return c;
}

/// Reads a text file (optionally only the first max_bytes), normalizes it to
/// the 27-symbol alphabet and splits it.
inline Corpus load_text_corpus(const std::filesystem::path& path, std::size_t max_bytes = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::string raw;
  if (max_bytes > 0) {
    raw.resize(max_bytes);
    in.read(raw.data(), static_cast<std::streamsize>(max_bytes));
    raw.resize(static_cast<std::size_t>(in.gcount()));
  } else {
    std::ostringstream ss;
    ss << in.rdbuf();
    raw = ss.str();
  }
  if (raw.empty()) throw IoError("corpus " + path.string() + " is empty");
  const Vocab vocab = Vocab::text();
  return split_corpus(vocab, encode_text(vocab, raw));
}

/// Half-open token range [begin, end) of one word.
struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Splits a token stream into words. Every space starts a new word and
/// belongs to it (so " annual" is one word); leading non-space tokens form a
/// word of their own.
inline std::vector<WordSpan> word_spans(std::span<const TokenId> tokens, TokenId space) {
  std::vector<WordSpan> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i == 0 || tokens[i] == space) out.push_back({i, i + 1});
    else out.back().end = i + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lane batching for truncated BPTT

struct Segment {
  std::size_t lane = 0;
  std::size_t offset = 0;  // position of tokens[0] within the split
  std::span<const TokenId> tokens;
  bool starts_lane = false;  // first segment of its lane: state starts at h0
};

/// Cuts a split into batch_size contiguous lanes; lane i starts at
/// i * floor(L / batch_size). Batch k holds segment k of every lane, so
/// consecutive batches continue each lane where the previous one stopped.
/// Lane tails shorter than seq_len are dropped.
class LaneBatcher {
 public:
  LaneBatcher(std::span<const TokenId> split, std::size_t seq_len, std::size_t batch_size)
      : split_(split), seq_len_(seq_len), lanes_(batch_size) {
    if (seq_len == 0 || batch_size == 0) throw ArgumentError("seq_len and batch_size must be positive");
    if (split.size() < seq_len * batch_size)
      throw ArgumentError("split of " + std::to_string(split.size()) + " tokens is shorter than seq_len * batch_size");
    lane_len_ = split.size() / batch_size;
    per_lane_ = lane_len_ / seq_len;
  }

  std::size_t lanes() const noexcept { return lanes_; }
  std::size_t seq_len() const noexcept { return seq_len_; }
  std::size_t size() const noexcept { return per_lane_; }  // batches per pass
  std::size_t lane_offset(std::size_t lane) const noexcept { return lane * lane_len_; }

  std::vector<Segment> batch(std::size_t k) const {
    if (k >= per_lane_) throw ArgumentError("batch index out of range");
    std::vector<Segment> out;
    out.reserve(lanes_);
    for (std::size_t lane = 0; lane < lanes_; ++lane) {
      const std::size_t off = lane_offset(lane) + k * seq_len_;
      out.push_back({lane, off, split_.subspan(off, seq_len_), k == 0});
    }
    return out;
  }

 private:
  std::span<const TokenId> split_;
  std::size_t seq_len_;
  std::size_t lanes_;
  std::size_t lane_len_ = 0;
  std::size_t per_lane_ = 0;
};

// ---------------------------------------------------------------------------
// Parentheses counting task
//
// Two bracket types, '(' ')' and '[' ']', plus the noise symbol 'a'. Each
// type keeps a nesting count saturating in [0, 5]. The target at step t is
// the 2-hot encoding of the counts *before* step t (counts after step t-1),
// so the first target encodes (0, 0).

inline constexpr int kParenLevels = 6;
inline constexpr int kParenMaxCount = kParenLevels - 1;
inline constexpr int kParenOutputDim = 2 * kParenLevels;

using ParenCounts = std::array<int, 2>;

inline ParenCounts paren_update(ParenCounts c, char symbol) {
  switch (symbol) {
    case '(': c[0] = std::min(c[0] + 1, kParenMaxCount); break;
    case ')': c[0] = std::max(c[0] - 1, 0); break;
    case '[': c[1] = std::min(c[1] + 1, kParenMaxCount); break;
    case ']': c[1] = std::max(c[1] - 1, 0); break;
    case 'a': break;
    default: throw VocabError(std::string("not a parentheses-task symbol: '") + symbol + "'");
  }
  return c;
}

/// 12-dim 2-hot code: one-hot level of type 1, then one-hot level of type 2.
inline Vector paren_code(const ParenCounts& c) {
  Vector v = Vector::Zero(kParenOutputDim);
  v(c[0]) = 1.0;
  v(kParenLevels + c[1]) = 1.0;
  return v;
}

struct ParenSample {
  std::string text;
  TokenSeq tokens;
  std::vector<ParenCounts> counts;  // counts after each step
  Matrix targets;                   // 12 x T, column t = code of counts before step t

  std::size_t length() const noexcept { return tokens.size(); }
};

inline ParenSample make_paren_sample(const std::string& text) {
  ParenSample s;
  s.text = text;
  s.tokens = Vocab::paren().encode(text);
  s.targets.resize(kParenOutputDim, static_cast<Index>(text.size()));
  ParenCounts c{0, 0};
  for (std::size_t t = 0; t < text.size(); ++t) {
    s.targets.col(static_cast<Index>(t)) = paren_code(c);
    c = paren_update(c, text[t]);
    s.counts.push_back(c);
  }
  return s;
}

/// i.i.d. symbols: 'a' with probability p_noise, otherwise one of the four
/// brackets uniformly. Unmatched closes saturate at zero.
inline std::vector<ParenSample> gen_paren(std::size_t n_samples, std::size_t length, double p_noise,
                                          std::uint64_t seed) {
  if (length < 1) throw ArgumentError("paren length must be at least 1");
  if (!(p_noise >= 0.0 && p_noise <= 1.0)) throw ArgumentError("p_noise must be in [0, 1]");
  static constexpr char kBrackets[] = {'(', ')', '[', ']'};
  Rng rng(seed);
  std::vector<ParenSample> out;
  out.reserve(n_samples);
  std::string text(length, 'a');
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (auto& ch : text) ch = rng.uniform() < p_noise ? 'a' : kBrackets[rng.below(4)];
    out.push_back(make_paren_sample(text));
  }
  return out;
}

/// "<tokens>\t<c1>:<c2>,<c1>:<c2>,..." with the counts after each step.
inline std::string format_paren_line(const ParenSample& s) {
  std::string line = s.text + "\t";
  for (std::size_t t = 0; t < s.counts.size(); ++t) {
    if (t) line += ',';
    line += std::to_string(s.counts[t][0]) + ":" + std::to_string(s.counts[t][1]);
  }
  return line;
}

inline ParenSample parse_paren_line(const std::string& line) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) throw ArgumentError("paren line has no tab");
  ParenSample s = make_paren_sample(line.substr(0, tab));
  std::istringstream rest(line.substr(tab + 1));
  std::string pair;
  std::size_t t = 0;
  while (std::getline(rest, pair, ',')) {
    const auto colon = pair.find(':');
    if (colon == std::string::npos || t >= s.counts.size())
      throw ArgumentError("malformed count list in paren line");
    const ParenCounts c{std::stoi(pair.substr(0, colon)), std::stoi(pair.substr(colon + 1))};
    if (c != s.counts[t]) throw ArgumentError("paren counts disagree with the token string at step " + std::to_string(t));
    ++t;
  }
  if (t != s.counts.size()) throw ArgumentError("paren count list has the wrong length");
  return s;
}

// ---------------------------------------------------------------------------
// Empirical n-gram statistics

struct NgramStats {
  Vector unigram_counts;  // K
  Matrix bigram_counts;   // K x K, (prev, next)
  Vector unigram;         // relative frequency
  Matrix bigram;          // add-one smoothed P(next | prev), rows sum to 1

  int vocab_size() const noexcept { return static_cast<int>(unigram.size()); }

  /// Plain conditional frequencies; rows of never-seen predecessors are zero.
  Matrix unsmoothed_bigram() const {
    Matrix out = bigram_counts;
    for (Index r = 0; r < out.rows(); ++r) {
      const double s = out.row(r).sum();
      if (s > 0) out.row(r) /= s;
    }
    return out;
  }

  /// Add-one smoothed unigram, for log-probabilities of unseen symbols.
  Vector smoothed_unigram() const {
    const Vector c = unigram_counts.array() + 1.0;
    return c / c.sum();
  }
};

inline NgramStats empirical_ngrams(std::span<const TokenId> tokens, int vocab_size) {
  if (tokens.empty()) throw ArgumentError("empirical_ngrams needs a nonempty split");
  NgramStats s;
  s.unigram_counts = Vector::Zero(vocab_size);
  s.bigram_counts = Matrix::Zero(vocab_size, vocab_size);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab_size) throw VocabError("token id out of range");
    s.unigram_counts(tokens[i]) += 1.0;
    if (i + 1 < tokens.size()) s.bigram_counts(tokens[i], tokens[i + 1]) += 1.0;
  }
  s.unigram = s.unigram_counts / static_cast<double>(tokens.size());
  s.bigram = (s.bigram_counts.array() + 1.0).matrix();
  for (Index r = 0; r < vocab_size; ++r) s.bigram.row(r) /= s.bigram.row(r).sum();
  return s;
}

// ---------------------------------------------------------------------------
// Model vs n-gram comparison

namespace detail {

inline void require_lm(const ModelParams& p, const NgramStats& s) {
  if (p.output_dim() != p.vocab_size() || s.vocab_size() != p.vocab_size())
    throw ShapeError("n-gram comparison needs readout dim == vocab size == n-gram vocab size");
}

inline std::vector<double> maybe_log(const Vector& v, bool log_space) {
  std::vector<double> out = to_std(v);
  if (log_space)
    for (auto& x : out) x = std::log(x);
  return out;
}

}  // namespace detail

/// Pearson correlation of softmax(b_ro) with the unigram distribution.
/// With log_space the correlation is taken between log-probabilities (the
/// unigram is then add-one smoothed so every entry is finite).
inline Correlation compare_unigram(const ModelParams& p, const NgramStats& s, bool log_space = false) {
  detail::require_lm(p, s);
  const Vector model = softmax(p.readout.b);
  const Vector emp = log_space ? s.smoothed_unigram() : s.unigram;
  return pearson(detail::maybe_log(model, log_space), detail::maybe_log(emp, log_space));
}

struct BigramComparison {
  TokenId symbol = 0;
  Correlation model;     // softmax(W_ro b_x + b_ro) vs P(. | x)
  Correlation baseline;  // P(.) vs P(. | x)
};

/// Per-symbol comparison against the add-one smoothed conditional rows.
inline std::vector<BigramComparison> compare_bigram(const ModelParams& p, const NgramStats& s,
                                                    bool log_space = false) {
  detail::require_lm(p, s);
  const Vector unigram = log_space ? s.smoothed_unigram() : s.unigram;
  const auto base = detail::maybe_log(unigram, log_space);
  std::vector<BigramComparison> out;
  for (TokenId x = 0; x < p.vocab_size(); ++x) {
    const Vector pred = softmax(p.readout.apply(p.B.col(x)));
    const Vector row = s.bigram.row(x).transpose();
    const auto cond = detail::maybe_log(row, log_space);
    out.push_back({x, pearson(detail::maybe_log(pred, log_space), cond), pearson(base, cond)});
  }
  return out;
}

/// Printable form of a symbol for CSV output: space becomes '_'.
inline std::string display_symbol(char c) { return c == ' ' ? std::string("_") : std::string(1, c); }

inline void write_bigram_csv(std::ostream& out, const Vocab& vocab,
                             const std::vector<BigramComparison>& rows) {
  out << "symbol,model_corr,unigram_baseline_corr\n";
  auto field = [](const Correlation& c) { return c.degenerate ? std::string("nan") : format_number(c.value); };
  for (const auto& r : rows)
    out << display_symbol(vocab.symbol(r.symbol)) << ',' << field(r.model) << ',' << field(r.baseline) << '\n';
}

}  // namespace isan
