#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "isan/checkpoint.hpp"
#include "isan/data.hpp"
#include "isan/io.hpp"
#include "isan/model.hpp"

namespace isan {

enum class LossKind { cross_entropy, l2 };
enum class OptimizerKind { adam, adagrad, sgd };

inline LossKind parse_loss(std::string_view s) {
  if (s == "ce" || s == "cross-entropy" || s == "cross_entropy") return LossKind::cross_entropy;
  if (s == "l2" || s == "L2") return LossKind::l2;
  throw ArgumentError("unknown loss '" + std::string(s) + "'");
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adagrad") return OptimizerKind::adagrad;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ArgumentError("unknown optimizer '" + std::string(s) + "'");
}

inline std::string to_string(LossKind k) { return k == LossKind::l2 ? "l2" : "cross-entropy"; }
inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adagrad: return "adagrad";
    default: return "sgd";
  }
}

struct TrainingConfig {
  std::size_t seq_len = 64;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double lr_final_fraction = 1.0;  // linear anneal to lr * fraction at max_steps
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
  bool decay_biases = false;  // weight decay also on biases, h0 and b_ro
  std::optional<double> grad_clip_norm = 1.0;
  std::size_t max_steps = 1000;
  std::size_t eval_every = 100;
  std::size_t eval_tokens = 0;  // cap on validation tokens, 0 = whole split
  std::uint64_t seed = 0;
  LossKind loss = LossKind::cross_entropy;
  std::filesystem::path checkpoint_dir;  // last-good checkpoint on abort, if set
  double param_limit = 1e6;

  void validate() const {
    if (seq_len < 2) throw ArgumentError("seq_len must be at least 2");
    if (batch_size < 1) throw ArgumentError("batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw ArgumentError("learning rate must be nonnegative");
    if (!(lr_final_fraction >= 0.0)) throw ArgumentError("lr_final_fraction must be nonnegative");
    if (!(epsilon > 0.0)) throw ArgumentError("epsilon must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ArgumentError("Adam betas must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ArgumentError("weight decay must be nonnegative");
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ArgumentError("clip norm must be positive");
    if (eval_every < 1) throw ArgumentError("eval_every must be positive");
  }
};

/// One gradient tensor per parameter tensor, laid out like the parameters.
using GradientSet = ModelParams;

struct LossAndGrad {
  double loss = 0.0;
  GradientSet grads;
};

// ---------------------------------------------------------------------------
// BPTT on one segment

/// One truncated-BPTT segment. The state starts at h_in; the state after
/// tokens[j] is s_{j+1}. Cross entropy predicts tokens[j] from s_j (j = 0
/// only when predict_first); L2 compares the readout of s_{j+1} with
/// targets.col(j).
struct SegmentSpec {
  std::span<const TokenId> tokens;
  const Matrix* targets = nullptr;
  bool predict_first = false;
  bool from_h0 = true;  // h_in is the learned h0, so it receives gradient
};

struct SegmentResult {
  double loss_sum = 0.0;    // bits (CE) or squared error (L2), summed
  std::size_t count = 0;    // predictions (CE) or predictions x dims (L2)
  Vector final_state;
};

class SegmentEngine {
 public:
  /// Runs forward and, when grads is non-null, adds scale * d(loss_sum)/dparams.
  SegmentResult run(const ModelParams& p, const Vector& h_in, const SegmentSpec& seg, LossKind kind,
                    GradientSet* grads, double scale) {
    const Index n = p.hidden_dim();
    const Index m = p.output_dim();
    const auto L = static_cast<Index>(seg.tokens.size());
    if (L < 1) throw ArgumentError("segment needs at least one token");
    detail::require_dim(h_in.size(), n, "segment initial state");
    if (kind == LossKind::l2) {
      if (!seg.targets) throw ArgumentError("L2 loss needs targets");
      detail::require_dim(seg.targets->rows(), m, "target dimension");
      detail::require_dim(seg.targets->cols(), L, "target count");
    } else if (m != p.vocab_size()) {
      throw ShapeError("cross entropy needs readout dimension == vocab size");
    }
    for (TokenId x : seg.tokens) p.vocab.check(x);

    S_.resize(n, L + 1);
    S_.col(0) = h_in;
    for (Index j = 0; j < L; ++j) {
      const TokenId x = seg.tokens[static_cast<std::size_t>(j)];
      S_.col(j + 1) = p.B.col(x);
      S_.col(j + 1).noalias() += p.transition_matrix(x) * S_.col(j);
    }

    // output states are columns [first_out, first_out + n_out) of S_
    Index first_out, n_out;
    if (kind == LossKind::l2) {
      first_out = 1;
      n_out = L;
    } else {
      first_out = seg.predict_first ? 0 : 1;
      n_out = L - first_out;
    }

    SegmentResult res;
    res.final_state = S_.col(L);
    if (n_out <= 0) return res;

    Lg_.noalias() = p.readout.W * S_.middleCols(first_out, n_out);
    Lg_.colwise() += p.readout.b;
    for (Index k = 0; k < n_out; ++k) {
      if (!Lg_.col(k).allFinite()) throw NumericError("non-finite logits", static_cast<long>(first_out + k));
    }

    G_.resize(m, n_out);
    if (kind == LossKind::cross_entropy) {
      for (Index k = 0; k < n_out; ++k) {
        const TokenId y = seg.tokens[static_cast<std::size_t>(first_out + k)];
        const auto l = Lg_.col(k);
        const double lse = log_sum_exp(l);
        res.loss_sum += (lse - l(y)) / std::numbers::ln2;
        G_.col(k) = (l.array() - lse).exp().matrix();
        G_(y, k) -= 1.0;
      }
      G_ *= scale / std::numbers::ln2;
      res.count = static_cast<std::size_t>(n_out);
    } else {
      G_ = Lg_ - *seg.targets;
      res.loss_sum = G_.squaredNorm();
      G_ *= 2.0 * scale;
      res.count = static_cast<std::size_t>(n_out * m);
    }
    if (!std::isfinite(res.loss_sum)) throw NumericError("non-finite loss");
    if (!grads) return res;

    // readout
    grads->readout.W.noalias() += G_ * S_.middleCols(first_out, n_out).transpose();
    grads->readout.b += G_.rowwise().sum();
    R_.noalias() = p.readout.W.transpose() * G_;

    // backward through the recurrence; D_.col(j) = dLoss/ds_{j+1}
    D_.resize(n, L);
    delta_.setZero(n);
    for (Index j = L; j >= 1; --j) {
      if (j >= first_out && j < first_out + n_out) delta_ += R_.col(j - first_out);
      D_.col(j - 1) = delta_;
      const TokenId x = seg.tokens[static_cast<std::size_t>(j - 1)];
      tmp_.noalias() = p.transition_matrix(x).transpose() * delta_;
      delta_.swap(tmp_);
    }
    if (first_out == 0) delta_ += R_.col(0);
    if (seg.from_h0) grads->h0 += delta_;

    for (Index j = 0; j < L; ++j) grads->B.col(seg.tokens[static_cast<std::size_t>(j)]) += D_.col(j);

    if (p.mode == Mode::shared) {
      grads->W.front().noalias() += D_ * S_.leftCols(L).transpose();
    } else {
      // group steps by token so each matrix gradient is one GEMM
      by_token_.assign(static_cast<std::size_t>(p.vocab_size()), {});
      for (Index j = 0; j < L; ++j) by_token_[static_cast<std::size_t>(seg.tokens[static_cast<std::size_t>(j)])].push_back(j);
      for (std::size_t x = 0; x < by_token_.size(); ++x) {
        const auto& idx = by_token_[x];
        if (idx.empty()) continue;
        if (idx.size() == 1) {
          grads->W[x].noalias() += D_.col(idx[0]) * S_.col(idx[0]).transpose();
          continue;
        }
        const auto c = static_cast<Index>(idx.size());
        gd_.resize(n, c);
        gs_.resize(n, c);
        for (Index k = 0; k < c; ++k) {
          gd_.col(k) = D_.col(idx[static_cast<std::size_t>(k)]);
          gs_.col(k) = S_.col(idx[static_cast<std::size_t>(k)]);
        }
        grads->W[x].noalias() += gd_ * gs_.transpose();
      }
    }
    return res;
  }

 private:
  Matrix S_, Lg_, G_, R_, D_, gd_, gs_;
  Vector delta_, tmp_;
  std::vector<std::vector<Index>> by_token_;
};

/// Mean bits per character over tokens[1..] from h0, with exact gradients.
inline LossAndGrad cross_entropy_loss(const ModelParams& p, const TokenSeq& tokens) {
  if (tokens.size() < 2) throw ArgumentError("cross_entropy_loss needs at least 2 tokens");
  LossAndGrad out{0.0, zeros_like(p)};
  SegmentEngine eng;
  const SegmentSpec seg{tokens, nullptr, false, true};
  const double scale = 1.0 / static_cast<double>(tokens.size() - 1);
  const auto r = eng.run(p, p.h0, seg, LossKind::cross_entropy, &out.grads, scale);
  out.loss = r.loss_sum / static_cast<double>(r.count);
  return out;
}

/// Mean over steps and output dims of (l_t - target_t)^2; targets.col(t) is
/// the target for the readout after tokens[t].
inline LossAndGrad l2_loss(const ModelParams& p, const TokenSeq& tokens, const Matrix& targets) {
  if (tokens.empty()) throw ArgumentError("l2_loss needs at least 1 token");
  LossAndGrad out{0.0, zeros_like(p)};
  SegmentEngine eng;
  const SegmentSpec seg{tokens, &targets, false, true};
  const double scale = 1.0 / static_cast<double>(tokens.size() * static_cast<std::size_t>(p.output_dim()));
  const auto r = eng.run(p, p.h0, seg, LossKind::l2, &out.grads, scale);
  out.loss = r.loss_sum / static_cast<double>(r.count);
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

namespace detail {

// Straight-line forward pass in extended precision; shares no code with the
// BPTT path so it can serve as the reference.
inline long double reference_loss(const ModelParams& p, const TokenSeq& tokens, LossKind kind,
                                  const Matrix* targets) {
  using LD = long double;
  using VecL = Eigen::Matrix<LD, Eigen::Dynamic, 1>;
  const Index n = p.hidden_dim(), m = p.output_dim();
  VecL h = p.h0.cast<LD>();
  LD total = 0;
  std::size_t count = 0;
  auto readout = [&](const VecL& s) {
    VecL l(m);
    for (Index r = 0; r < m; ++r) {
      LD acc = p.readout.b(r);
      for (Index c = 0; c < n; ++c) acc += static_cast<LD>(p.readout.W(r, c)) * s(c);
      l(r) = acc;
    }
    return l;
  };
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const TokenId x = tokens[t];
    const Matrix& W = p.transition_matrix(x);
    VecL next(n);
    for (Index r = 0; r < n; ++r) {
      LD acc = p.B(r, x);
      for (Index c = 0; c < n; ++c) acc += static_cast<LD>(W(r, c)) * h(c);
      next(r) = acc;
    }
    h = next;
    if (kind == LossKind::cross_entropy) {
      if (t + 1 >= tokens.size()) break;
      const VecL l = readout(h);
      LD mx = l.maxCoeff(), se = 0;
      for (Index r = 0; r < m; ++r) se += std::exp(l(r) - mx);
      total += (mx + std::log(se) - l(tokens[t + 1])) / std::numbers::ln2_v<LD>;
      ++count;
    } else {
      const VecL l = readout(h);
      for (Index r = 0; r < m; ++r) {
        const LD d = l(r) - static_cast<LD>((*targets)(r, static_cast<Index>(t)));
        total += d * d;
        ++count;
      }
    }
  }
  return total / static_cast<LD>(count);
}

}  // namespace detail

/// max over all parameters of |analytic - central difference| /
/// max(|analytic|, |cd|, 1e-8), comparing against the supplied gradients.
inline double grad_check(const ModelParams& p, const GradientSet& analytic, const TokenSeq& tokens,
                         LossKind kind, double epsilon, const Matrix* targets = nullptr) {
  ModelParams work = p;
  std::vector<Eigen::Map<const Vector>> an;
  for_each_tensor(analytic, [&](const std::string&, Eigen::Map<const Vector> v) { an.push_back(v); });
  double worst = 0.0;
  std::size_t ti = 0;
  for_each_tensor(work, [&](const std::string&, Eigen::Map<Vector> v) {
    for (Index i = 0; i < v.size(); ++i) {
      const double orig = v(i);
      v(i) = orig + epsilon;
      const long double up = detail::reference_loss(work, tokens, kind, targets);
      v(i) = orig - epsilon;
      const long double down = detail::reference_loss(work, tokens, kind, targets);
      v(i) = orig;
      const double cd = static_cast<double>((up - down) / (2.0L * epsilon));
      const double a = an[ti](i);
      const double denom = std::max({std::abs(a), std::abs(cd), 1e-8});
      worst = std::max(worst, std::abs(a - cd) / denom);
    }
    ++ti;
  });
  return worst;
}

/// Checks the BPTT gradients of the given loss against central differences.
inline double grad_check(const ModelParams& p, const TokenSeq& tokens, LossKind kind, double epsilon,
                         const Matrix* targets = nullptr) {
  const LossAndGrad lg = kind == LossKind::cross_entropy ? cross_entropy_loss(p, tokens)
                                                         : l2_loss(p, tokens, *targets);
  return grad_check(p, lg.grads, tokens, kind, epsilon, targets);
}

// ---------------------------------------------------------------------------
// Optimizers

struct OptimizerState {
  std::vector<Vector> first;   // Adam first moment
  std::vector<Vector> second;  // Adam second moment / Adagrad squared-gradient sum
  std::size_t step = 0;
};

inline OptimizerState make_optimizer_state(const ModelParams& p) {
  OptimizerState s;
  for_each_tensor(p, [&](const std::string&, auto v) {
    s.first.push_back(Vector::Zero(v.size()));
    s.second.push_back(Vector::Zero(v.size()));
  });
  return s;
}

inline double global_norm(const GradientSet& g) {
  double ss = 0.0;
  for_each_tensor(g, [&](const std::string&, auto v) { ss += v.squaredNorm(); });
  return std::sqrt(ss);
}

/// Rescales to the clip norm when the global norm exceeds it. Returns the
/// norm before clipping.
inline double clip_global_norm(GradientSet& g, double clip_norm) {
  const double norm = global_norm(g);
  if (norm > clip_norm) {
    const double s = clip_norm / norm;
    for_each_tensor(g, [&](const std::string&, Eigen::Map<Vector> v) { v *= s; });
  }
  return norm;
}

namespace detail {

inline bool is_matrix_tensor(const std::string& name) {
  return name.rfind("transition.W", 0) == 0 || name == "readout.W";
}

}  // namespace detail

/// Clips (if configured), applies the update rule, and increments the step
/// counter. lr overrides config.learning_rate when given.
inline void optimizer_step(OptimizerState& state, ModelParams& params, GradientSet& grads,
                           const TrainingConfig& config, std::optional<double> lr = std::nullopt) {
  for_each_tensor(grads, [&](const std::string& name, auto v) {
    if (!v.allFinite()) throw NumericError("non-finite gradient in " + name, static_cast<long>(state.step));
  });
  if (config.grad_clip_norm) clip_global_norm(grads, *config.grad_clip_norm);
  const double rate = lr.value_or(config.learning_rate);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);

  std::vector<Eigen::Map<Vector>> gv;
  for_each_tensor(grads, [&](const std::string&, Eigen::Map<Vector> v) { gv.push_back(v); });
  std::size_t i = 0;
  for_each_tensor(params, [&](const std::string& name, Eigen::Map<Vector> p) {
    const auto& g = gv[i];
    auto& m = state.first[i];
    auto& s = state.second[i];
    ++i;
    if (config.weight_decay > 0.0 && (config.decay_biases || detail::is_matrix_tensor(name))) p *= 1.0 - rate * config.weight_decay;
    switch (config.optimizer) {
      case OptimizerKind::sgd:
        p -= rate * g;
        break;
      case OptimizerKind::adagrad:
        s.array() += g.array().square();
        p.array() -= rate * g.array() / (s.array() + config.epsilon).sqrt();
        break;
      case OptimizerKind::adam:
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        s = config.beta2 * s + (1.0 - config.beta2) * g.cwiseAbs2();
        p.array() -= rate * (m.array() / bc1) / ((s.array() / bc2).sqrt() + config.epsilon);
        break;
    }
  });
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t step = 0;
  double train_metric = 0.0;  // bits/char or MSE, averaged since the previous row
  double val_metric = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = 0.0;     // pre-clip global norm of the last step
  double wall_ms = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> log;
};

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& log) {
  out << "step,train_bpc_or_mse,val_metric,grad_norm,wall_ms\n";
  for (const auto& r : log)
    out << r.step << ',' << format_number(r.train_metric) << ',' << format_number(r.val_metric) << ','
        << format_number(r.grad_norm) << ',' << format_number(r.wall_ms) << '\n';
}

struct TrainingJob {
  SegmentSpec spec;
  Vector* carried = nullptr;  // state to continue from and to update, or null
};

using ProgressFn = std::function<void(const MetricsRow&)>;

/// Generic truncated-BPTT loop. next_batch(step) returns the segments of one
/// minibatch; validate(params) returns the validation metric. Gradients are
/// of the mean loss over every prediction in the batch.
template <class NextBatch, class Validate>
TrainResult train_loop(const TrainingConfig& config, ModelParams params, NextBatch&& next_batch,
                       Validate&& validate, const ProgressFn& progress = {}) {
  config.validate();
  params.validate();
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  TrainResult result;
  OptimizerState opt = make_optimizer_state(params);
  SegmentEngine engine;
  GradientSet grads = zeros_like(params);
  double window_loss = 0.0;
  std::size_t window_count = 0;
  double last_norm = 0.0;

  auto abort_with_checkpoint = [&](const ModelParams& last_good) {
    if (!config.checkpoint_dir.empty()) save_checkpoint(config.checkpoint_dir, last_good);
  };

  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    std::vector<TrainingJob> jobs = next_batch(step);
    std::size_t total = 0;
    for (const auto& j : jobs) {
      const auto L = j.spec.tokens.size();
      if (config.loss == LossKind::l2) total += L * static_cast<std::size_t>(params.output_dim());
      else total += j.spec.predict_first ? L : L - 1;
    }
    if (total == 0) throw ArgumentError("empty training batch");
    for_each_tensor(grads, [](const std::string&, Eigen::Map<Vector> v) { v.setZero(); });
    const double scale = 1.0 / static_cast<double>(total);
    double batch_loss = 0.0;
    std::size_t batch_count = 0;
    try {
      for (auto& j : jobs) {
        const Vector h_in = j.spec.from_h0 || !j.carried ? params.h0 : *j.carried;
        const auto r = engine.run(params, h_in, j.spec, config.loss, &grads, scale);
        batch_loss += r.loss_sum;
        batch_count += r.count;
        if (j.carried) *j.carried = r.final_state;
      }
    } catch (const NumericError& e) {
      abort_with_checkpoint(params);
      throw NumericError(std::string("training aborted: ") + e.what(), static_cast<long>(step));
    }
    last_norm = global_norm(grads);
    const double frac = config.max_steps > 1 ? static_cast<double>(step - 1) / static_cast<double>(config.max_steps - 1) : 0.0;
    const double lr = config.learning_rate * (1.0 - (1.0 - config.lr_final_fraction) * frac);
    const ModelParams last_good = params;
    try {
      optimizer_step(opt, params, grads, config, lr);
    } catch (const NumericError&) {
      abort_with_checkpoint(last_good);
      throw;
    }
    bool blown = !params.all_finite();
    for_each_tensor(params, [&](const std::string&, auto v) {
      if (!blown && v.cwiseAbs().maxCoeff() > config.param_limit) blown = true;
    });
    if (blown) {
      abort_with_checkpoint(last_good);
      throw NumericError("parameter magnitude exceeded limit; last good parameters saved", static_cast<long>(step));
    }
    window_loss += batch_loss;
    window_count += batch_count;

    if (step % config.eval_every == 0 || step == config.max_steps) {
      MetricsRow row;
      row.step = step;
      row.train_metric = window_loss / static_cast<double>(window_count);
      row.val_metric = validate(params);
      row.grad_norm = last_norm;
      row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      result.log.push_back(row);
      if (progress) progress(row);
      window_loss = 0.0;
      window_count = 0;
    }
  }
  result.params = std::move(params);
  return result;
}

/// Character-level language modelling on a corpus: lanes over the training
/// split with the state carried between consecutive segments (gradients
/// stop at segment boundaries). A lane restarts from h0 when the split is
/// exhausted, so h0 only learns from lane starts. Validation metric is
/// bits/char on the validation split.
inline TrainResult train_text(const TrainingConfig& config, const Corpus& corpus, ModelParams init,
                              const ProgressFn& progress = {}) {
  config.validate();
  const LaneBatcher batcher(corpus.train, config.seq_len, config.batch_size);
  std::vector<Vector> lane_state(batcher.lanes(), init.h0);
  TokenSeq val = corpus.validation;
  if (config.eval_tokens > 0 && val.size() > config.eval_tokens) val.resize(config.eval_tokens);
  auto next = [&](std::size_t step) {
    const std::size_t k = (step - 1) % batcher.size();
    std::vector<TrainingJob> jobs;
    for (const auto& seg : batcher.batch(k)) {
      TrainingJob j;
      j.spec.tokens = seg.tokens;
      j.spec.predict_first = !seg.starts_lane;
      j.spec.from_h0 = seg.starts_lane;
      j.carried = &lane_state[seg.lane];
      jobs.push_back(j);
    }
    return jobs;
  };
  auto validate = [&](const ModelParams& p) {
    return val.size() >= 2 ? evaluate_bpc(p, val) : std::numeric_limits<double>::quiet_NaN();
  };
  TrainingConfig cfg = config;
  cfg.loss = LossKind::cross_entropy;
  return train_loop(cfg, std::move(init), next, validate, progress);
}

struct ParenTaskConfig {
  std::size_t length = 64;
  double p_noise = 0.2;
  std::size_t val_samples = 64;
};

/// Settings that reach the counting solution on a 35-unit switched model
/// in a few thousand steps: zero-mean initialization and weight decay on
/// every tensor, which removes activity outside the visited states.
inline TrainingConfig paren_training_preset() {
  TrainingConfig c;
  c.batch_size = 16;
  c.learning_rate = 0.01;
  c.lr_final_fraction = 0.05;
  c.weight_decay = 0.1;
  c.decay_biases = true;
  c.max_steps = 4000;
  c.eval_every = 500;
  c.seed = 1;
  c.loss = LossKind::l2;
  return c;
}

inline InitConfig paren_init_preset() { return {0.0, 0.1}; }

/// Character-level text recipe for 216 units on a few MB of text. Adam at
/// 1e-3 with a linear anneal to a tenth.
inline TrainingConfig text_training_preset() {
  TrainingConfig c;
  c.learning_rate = 1e-3;
  c.lr_final_fraction = 0.1;
  c.max_steps = 3000;
  c.eval_every = 500;
  c.eval_tokens = 100'000;
  return c;
}

/// With gamma = 0.95 the transition spectra start partly outside the unit
/// circle and long validation streams overflow; 0.9 keeps them inside.
inline InitConfig text_init_preset() { return {0.9, 0.1}; }

/// Per-dimension MSE of the readout against the lagged 2-hot targets.
inline double paren_mse(const ModelParams& p, const std::vector<ParenSample>& samples) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    const auto tr = run(p, s.tokens);
    Matrix out = p.readout.W * tr.states.rightCols(static_cast<Index>(s.length()));
    out.colwise() += p.readout.b;
    total += (out - s.targets).squaredNorm();
    count += static_cast<std::size_t>(out.size());
  }
  return total / static_cast<double>(count);
}

/// Fraction of (step, type) pairs whose argmax over the 6 levels matches the target.
inline double paren_accuracy(const ModelParams& p, const std::vector<ParenSample>& samples) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : samples) {
    const auto tr = run(p, s.tokens);
    for (Index t = 0; t < static_cast<Index>(s.length()); ++t) {
      const Vector out = logits(p, tr.states.col(t + 1));
      for (int type = 0; type < 2; ++type) {
        const Index pred = argmax(out.segment(type * kParenLevels, kParenLevels));
        const Index want = argmax(s.targets.col(t).segment(type * kParenLevels, kParenLevels));
        hit += pred == want;
        ++total;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

/// Parentheses counting with L2 loss. Every minibatch is batch_size fresh
/// sequences of task.length symbols, each starting from h0 with zero counts.
/// Validation metric is per-dim MSE on a fixed held-out set.
inline TrainResult train_paren(const TrainingConfig& config, const ParenTaskConfig& task, ModelParams init,
                               const ProgressFn& progress = {}) {
  if (init.vocab != Vocab::paren()) throw VocabError("parentheses training needs the paren vocabulary");
  if (init.output_dim() != kParenOutputDim) throw ShapeError("parentheses readout must have 12 outputs");
  const auto val = gen_paren(task.val_samples, task.length, task.p_noise, config.seed ^ 0x5eedf00dULL);
  std::vector<ParenSample> batch;
  auto next = [&](std::size_t step) {
    batch = gen_paren(config.batch_size, task.length, task.p_noise, config.seed * 1000003ULL + step);
    std::vector<TrainingJob> jobs;
    for (const auto& s : batch) {
      TrainingJob j;
      j.spec = SegmentSpec{s.tokens, &s.targets, false, true};
      jobs.push_back(j);
    }
    return jobs;
  };
  auto validate = [&](const ModelParams& p) { return paren_mse(p, val); };
  TrainingConfig cfg = config;
  cfg.loss = LossKind::l2;
  return train_loop(cfg, std::move(init), next, validate, progress);
}

}  // namespace isan
