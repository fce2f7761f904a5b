#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "isan/decomposition.hpp"
#include "test_util.hpp"

using namespace isan;
using isan::testing::letters;
using isan::testing::random_model;
using isan::testing::random_tokens;
using isan::testing::rel_err;

namespace {

// kappa_s^t by explicit matrix products: W_ro W_{x_t} ... W_{x_{s+1}} b_{x_s}
Vector explicit_kappa(const ModelParams& p, const TokenSeq& toks, Index s, Index t) {
  Matrix prod = Matrix::Identity(p.hidden_dim(), p.hidden_dim());
  for (Index j = s + 1; j <= t; ++j) prod = p.transition_matrix(toks[static_cast<std::size_t>(j - 1)]) * prod;
  const Vector src = s == 0 ? p.h0 : Vector(p.B.col(toks[static_cast<std::size_t>(s - 1)]));
  return p.readout.W * (prod * src);
}

ModelParams text_model(std::uint64_t seed, Index n = 10) { return random_model(Vocab::text(), n, 27, seed, 0.6); }

}  // namespace

TEST(Kappa, SingleStepZeroH0) {
  ModelParams p = random_model(letters(3), 4, 3, 1);
  p.h0.setZero();
  const KappaTensor k = kappa(p, {2});
  const Vector want = p.readout.W * p.B.col(2);
  EXPECT_EQ(Vector(k.contribution(1, 1)), want);
  EXPECT_EQ(Vector(k.contribution(0, 1)), Vector::Zero(3));
  EXPECT_LE(rel_err(reconstruct_logits(k, 1), logits(p, step(p, p.h0, TokenId{2}))), 1e-15);
}

TEST(Kappa, MemorylessModel) {
  ModelParams p = random_model(letters(3), 4, 3, 2);
  for (auto& w : p.W) w.setZero();
  const TokenSeq toks{0, 1, 2, 1};
  const KappaTensor k = kappa(p, toks);
  for (Index t = 1; t <= 4; ++t) {
    for (Index s = 0; s < t; ++s) EXPECT_EQ(k.contribution(s, t).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(Vector(k.contribution(t, t)), Vector(p.readout.W * p.B.col(toks[static_cast<std::size_t>(t - 1)])));
  }
}

TEST(Kappa, MatchesExplicitProductOracle) {
  const ModelParams p = random_model(letters(4), 3, 4, 3);
  const TokenSeq toks{1, 3, 0, 0, 2, 1};
  const KappaTensor k = kappa(p, toks);
  const auto tr = run(p, toks);
  for (Index t = 0; t <= 6; ++t) {
    EXPECT_LE(rel_err(reconstruct_logits(k, t), logits(p, tr.states.col(t))), 1e-12);
    for (Index s = 0; s <= t; ++s) EXPECT_LE(rel_err(Vector(k.contribution(s, t)), explicit_kappa(p, toks, s, t)), 1e-12);
  }
}

TEST(Kappa, ExactnessOverRandomModels) {
  Rng rng(99);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<Index>(4 + rng.below(29));
    const int K = 3 + static_cast<int>(rng.below(25));
    const ModelParams p = random_model(letters(K), n, K, rng.next_u64(), 0.95);
    const TokenSeq toks = random_tokens(K, 64, rng.next_u64());
    const KappaTensor k = kappa(p, toks);
    const auto tr = run(p, toks);
    for (Index t = 0; t <= 64; ++t) {
      const Vector l = logits(p, tr.states.col(t));
      const double scale = std::max(l.cwiseAbs().maxCoeff(), 1e-300);
      worst = std::max(worst, (reconstruct_logits(k, t) - l).cwiseAbs().maxCoeff() / scale);
    }
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Kappa, PrefixIndependence) {
  const ModelParams p = random_model(letters(5), 6, 5, 4);
  TokenSeq a = random_tokens(5, 20, 5);
  TokenSeq b = a;
  for (std::size_t i = 0; i < 7; ++i) b[i] = (a[i] + 1 + static_cast<TokenId>(i % 3)) % 5;  // positions 1..7 change
  const KappaTensor ka = kappa(p, a), kb = kappa(p, b);
  for (Index t = 8; t <= 20; ++t)
    for (Index s = 8; s <= t; ++s) EXPECT_EQ(Vector(ka.contribution(s, t)), Vector(kb.contribution(s, t)));
  EXPECT_NE(Vector(ka.contribution(7, 10)), Vector(kb.contribution(7, 10)));
}

TEST(Kappa, SharedModeAndCaps) {
  const ModelParams p = random_model(letters(4), 5, 4, 6, 0.8, Mode::shared);
  const TokenSeq toks = random_tokens(4, 30, 7);
  const KappaTensor k = kappa(p, toks);
  EXPECT_LE(rel_err(reconstruct_logits(k, 30), logits(p, run(p, toks).states.col(30))), 1e-12);
  EXPECT_THROW(kappa(p, toks, 10), ArgumentError);
  EXPECT_THROW(kappa(p, {}), ArgumentError);
  EXPECT_THROW(kappa(p, {9}), VocabError);
  EXPECT_THROW(k.contribution(5, 4), ArgumentError);
  EXPECT_THROW(reconstruct_logits(k, 31), ArgumentError);
}

TEST(Kappa, StreamMatchesTensor) {
  const ModelParams p = random_model(letters(4), 5, 4, 8);
  const TokenSeq toks = random_tokens(4, 25, 9);
  const KappaTensor k = kappa(p, toks);
  KappaStream st(p);
  for (Index t = 0; t <= 25; ++t) {
    if (t > 0) st.advance(toks[static_cast<std::size_t>(t - 1)]);
    ASSERT_EQ(st.t(), t);
    EXPECT_EQ(st.row(), Matrix(k.row(t)));
  }
}

TEST(Mask, AllAndNone) {
  const ModelParams p = random_model(letters(4), 5, 4, 10);
  const KappaTensor k = kappa(p, random_tokens(4, 12, 11));
  for (Index t = 0; t <= 12; ++t) {
    EXPECT_LE(rel_err(masked_logits(k, SourceMask::all(), t).logits, reconstruct_logits(k, t)), 1e-15);
    EXPECT_EQ(masked_logits(k, SourceMask::none(), t).logits, p.readout.b);
    EXPECT_NEAR(masked_logits(k, SourceMask::all(), t).probs.sum(), 1.0, 1e-12);
  }
}

TEST(Mask, AdditivityOfDisjointMasks) {
  const ModelParams p = random_model(letters(5), 6, 5, 12);
  const TokenSeq toks = random_tokens(5, 30, 13);
  const KappaTensor k = kappa(p, toks);
  const std::vector<std::pair<SourceMask, SourceMask>> pairs{
      {SourceMask::only_token(2), SourceMask::except_token(2)},
      {SourceMask::positions(3, 9), SourceMask::positions(12, 20)},
      {SourceMask::most_recent(4), SourceMask::positions(0, 2)},
  };
  for (const auto& [m1, m2] : pairs) {
    for (Index t = 0; t <= 30; ++t) {
      // masks must be disjoint at this t for the identity to apply
      bool overlap = false;
      for (Index s = 0; s <= t; ++s) overlap |= m1(s, k.source_token(s), t) && m2(s, k.source_token(s), t);
      if (overlap) continue;
      const Vector sum = masked_logits(k, m1, t).logits + masked_logits(k, m2, t).logits - k.readout_bias();
      EXPECT_LE(rel_err(sum, masked_logits(k, m1 | m2, t).logits), 1e-12);
    }
  }
}

TEST(Mask, MostRecentWindow) {
  const ModelParams p = random_model(letters(3), 4, 3, 14);
  const TokenSeq toks = random_tokens(3, 10, 15);
  const KappaTensor k = kappa(p, toks);
  Vector want = k.readout_bias();
  for (Index s = 8; s <= 10; ++s) want += k.contribution(s, 10);
  EXPECT_LE(rel_err(masked_logits(k, SourceMask::most_recent(3), 10).logits, want), 1e-14);
}

TEST(TruncatedHistory, LongWindowIsFullBpc) {
  const ModelParams p = text_model(16);
  const TokenSeq toks = random_tokens(27, 80, 17);
  EXPECT_NEAR(truncated_history_bpc(p, toks, 80), evaluate_bpc(p, toks), 1e-12);
  EXPECT_NEAR(truncated_history_bpc(p, toks, 500), evaluate_bpc(p, toks), 1e-12);
}

TEST(TruncatedHistory, ZeroWindowIsBiasPredictor) {
  const ModelParams p = text_model(18);
  const TokenSeq toks = random_tokens(27, 60, 19);
  double want = 0;
  for (std::size_t t = 1; t < toks.size(); ++t) want += surprisal_bits(p.readout.b, toks[t]);
  EXPECT_NEAR(truncated_history_bpc(p, toks, 0), want / 59, 1e-12);
  EXPECT_THROW(truncated_history_bpc(p, toks, -1), ArgumentError);
}

TEST(TruncatedHistory, MatchesMaskOracle) {
  const ModelParams p = text_model(20);
  const TokenSeq toks = random_tokens(27, 40, 21);
  const KappaTensor k = kappa(p, toks);
  for (Index n : {1, 2, 5, 13}) {
    double total = 0;
    for (Index t = 1; t < 40; ++t)
      total += surprisal_bits(masked_logits(k, SourceMask::most_recent(n), t).logits, toks[static_cast<std::size_t>(t)]);
    EXPECT_NEAR(truncated_history_bpc(p, toks, n), total / 39, 1e-11) << "n=" << n;
  }
}

TEST(Words, PartitionReconstructsLogits) {
  const ModelParams p = text_model(22);
  const TokenSeq toks = encode_text(p.vocab, "the annual revenue was higher than a b");
  const KappaTensor k = kappa(p, toks);
  const WordContributions wc = word_contributions(k, p.vocab.index(' '));
  ASSERT_EQ(wc.words.size(), 8u);
  for (Index t = 0; t <= k.steps(); ++t) {
    const Vector sum = wc.per_step[static_cast<std::size_t>(t)].rowwise().sum() + k.readout_bias() +
                       Vector(k.contribution(0, t));
    EXPECT_LE(rel_err(sum, reconstruct_logits(k, t)), 1e-9);
  }
  ASSERT_EQ(wc.words[6].end - wc.words[6].begin, 2u);  // " a"
  EXPECT_EQ(wc.words[0].begin, 0u);
  // " b" covers source steps 37 and 38
  const Index t = k.steps();
  const Vector last_word = k.contribution(37, t) + k.contribution(38, t);
  EXPECT_LE(rel_err(Vector(wc.per_step[static_cast<std::size_t>(t)].col(7)), last_word), 1e-14);
  EXPECT_TRUE(std::isnan(wc.norms(7, 30)));
}

TEST(Words, SingleTokenWordEqualsItsKappa) {
  const ModelParams p = text_model(23);
  const TokenSeq toks = encode_text(p.vocab, "ab  cd");  // second space is a one-token word
  const KappaTensor k = kappa(p, toks);
  const WordContributions wc = word_contributions(k, p.vocab.index(' '));
  ASSERT_EQ(wc.words.size(), 3u);
  ASSERT_EQ(wc.words[1].end - wc.words[1].begin, 1u);
  for (Index t = 3; t <= 6; ++t)
    EXPECT_EQ(Vector(wc.per_step[static_cast<std::size_t>(t)].col(1)), Vector(k.contribution(3, t)));
}

TEST(Decay, GeometricToyModel) {
  ModelParams p = ModelParams::zeros(letters(3), 4, 3);
  Rng rng(3);
  Vector b(4);
  for (Index i = 0; i < 4; ++i) b(i) = rng.normal();
  for (auto& w : p.W) w = 0.5 * Matrix::Identity(4, 4);
  for (TokenId x = 0; x < 3; ++x) p.B.col(x) = b;
  for (Index i = 0; i < p.readout.W.size(); ++i) p.readout.W.data()[i] = rng.normal();
  p.h0.setConstant(5.0);  // excluded from the curve
  const DecaySummary d = decay_curve(p, random_tokens(3, 100, 4), 20);
  const double base = (p.readout.W * b).norm();
  for (std::size_t lag = 0; lag <= 20; ++lag) {
    EXPECT_NEAR(d.mean_norm[lag], std::pow(0.5, static_cast<double>(lag)) * base, 1e-12 * base);
    EXPECT_EQ(d.count[lag], 100 - lag);
  }
}

TEST(Decay, LagZeroIsFrequencyWeightedBiasNorm) {
  const ModelParams p = random_model(letters(4), 5, 4, 30);
  const TokenSeq toks = random_tokens(4, 200, 31);
  double want = 0;
  for (TokenId x : toks) want += (p.readout.W * p.B.col(x)).norm();
  const DecaySummary d = decay_curve(p, toks, 5);
  EXPECT_NEAR(d.mean_norm[0], want / 200, 1e-12 * want);
}

TEST(Decay, MatchesKappaTensorAverages) {
  const ModelParams p = random_model(letters(4), 5, 4, 32, 0.8);
  const TokenSeq toks = random_tokens(4, 50, 33);
  const KappaTensor k = kappa(p, toks);
  const DecaySummary d = decay_curve(p, toks, 60);
  for (Index lag = 0; lag <= 60; ++lag) {
    double sum = 0;
    std::size_t cnt = 0;
    for (Index t = 1; t <= 50; ++t)
      if (t - lag >= 1) {
        sum += k.contribution(t - lag, t).norm();
        ++cnt;
      }
    EXPECT_EQ(d.count[static_cast<std::size_t>(lag)], cnt);
    if (cnt) EXPECT_NEAR(d.mean_norm[static_cast<std::size_t>(lag)], sum / double(cnt), 1e-11);
    else EXPECT_TRUE(std::isnan(d.mean_norm[static_cast<std::size_t>(lag)]));
  }
  EXPECT_THROW(decay_curve(p, toks, 0), ArgumentError);
}

TEST(PositionCe, PositionsInWord) {
  const Vocab v = Vocab::text();
  const auto pos = positions_in_word(encode_text(v, "ab cde f"), v.index(' '));
  EXPECT_EQ(pos, (std::vector<Index>{1, 2, 0, 1, 2, 3, 0, 1}));
}

TEST(PositionCe, AllModeMatchesUnmaskedModel) {
  const ModelParams p = text_model(40);
  const TokenSeq toks = encode_text(p.vocab, "the cat sat on the mat and the dog sat on the log");
  const auto pos = positions_in_word(toks, p.vocab.index(' '));
  const auto tr = run(p, toks);
  std::vector<std::vector<double>> per;
  for (std::size_t t = 1; t < toks.size(); ++t) {
    const auto k = static_cast<std::size_t>(pos[t]);
    if (per.size() <= k) per.resize(k + 1);
    per[k].push_back(surprisal_bits(logits(p, tr.states.col(static_cast<Index>(t))), toks[t]));
  }
  const PositionCe pc = position_in_word_ce(p, toks, SpaceMaskMode::all);
  ASSERT_EQ(pc.median_bits.size(), per.size());
  for (std::size_t i = 0; i < per.size(); ++i) EXPECT_NEAR(pc.median_bits[i], median(per[i]), 1e-12);
}

TEST(PositionCe, MasksMatchKappaOracle) {
  const ModelParams p = text_model(41);
  const TokenSeq toks = encode_text(p.vocab, "in the beginning was the word");
  const TokenId space = p.vocab.index(' ');
  const KappaTensor k = kappa(p, toks);
  const auto pos = positions_in_word(toks, space);
  for (auto [mode, mask] : {std::pair{SpaceMaskMode::only_space, SourceMask::only_token(space)},
                            std::pair{SpaceMaskMode::without_space, SourceMask::except_token(space)}}) {
    std::vector<std::vector<double>> per;
    for (std::size_t t = 1; t < toks.size(); ++t) {
      const auto q = static_cast<std::size_t>(pos[t]);
      if (per.size() <= q) per.resize(q + 1);
      per[q].push_back(surprisal_bits(masked_logits(k, mask, static_cast<Index>(t)).logits, toks[t]));
    }
    const PositionCe pc = position_in_word_ce(p, toks, mode);
    for (std::size_t i = 0; i < per.size(); ++i) EXPECT_NEAR(pc.median_bits[i], median(per[i]), 1e-11);
  }
}

TEST(PositionCe, NoSpacesOnlySpaceIsBiasPredictor) {
  const ModelParams p = text_model(42);
  const TokenSeq toks = encode_text(p.vocab, "abcdefghij");
  const PositionCe pc = position_in_word_ce(p, toks, SpaceMaskMode::only_space);
  for (std::size_t i = 2; i < pc.median_bits.size(); ++i) {
    // each position holds one token: positions are 1..10 and position i predicts toks[i-1]
    EXPECT_NEAR(pc.median_bits[i], surprisal_bits(p.readout.b, toks[i - 1]), 1e-12);
  }
  EXPECT_EQ(parse_space_mode("only-space"), SpaceMaskMode::only_space);
  EXPECT_THROW(parse_space_mode("some"), ArgumentError);
}

TEST(Export, KappaCsvLayout) {
  const ModelParams p = text_model(50, 4);
  const TokenSeq toks = encode_text(p.vocab, " ab");
  const KappaTensor k = kappa(p, toks);
  std::ostringstream out;
  write_kappa_csv(out, k, p.vocab, 1);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "source,symbol,t0,t1,t2,t3");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 6), "bias,,");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 5), "0,h0,");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 5), "1,_,,");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 6), "2,a,,,");
  std::ostringstream d;
  write_decay_csv(d, decay_curve(p, toks, 2));
  EXPECT_EQ(d.str().substr(0, 14), "lag,mean_norm\n");
}
