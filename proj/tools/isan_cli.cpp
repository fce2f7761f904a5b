// isan: train and analyse input switched affine networks.
//
// Every subcommand writes its outputs plus a config.json snapshot into
// --out. The snapshot can be fed back with --config to repeat the run.

#include <CLI11.hpp>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "isan/basis.hpp"
#include "isan/checkpoint.hpp"
#include "isan/composition.hpp"
#include "isan/data.hpp"
#include "isan/decomposition.hpp"
#include "isan/io.hpp"
#include "isan/model.hpp"
#include "isan/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace isan;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// JSON config files: top-level keys are global options, nested objects are
// subcommand sections.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return {}; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> out;
    collect(j, {}, out);
    return out;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void collect(const json& obj, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (it->is_object()) {
        auto p = parents;
        p.push_back(it.key());
        collect(*it, p, out);
        continue;
      }
      if (it->is_null()) continue;
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = it.key();
      if (it->is_array())
        for (const auto& v : *it) item.inputs.push_back(scalar(v));
      else
        item.inputs.push_back(scalar(*it));
      out.push_back(std::move(item));
    }
  }
};

json typed_value(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  long long i = 0;
  const char* end = s.data() + s.size();
  if (auto [p, ec] = std::from_chars(s.data(), end, i); ec == std::errc() && p == end && !s.empty()) return i;
  double d = 0;
  if (auto [p, ec] = std::from_chars(s.data(), end, d); ec == std::errc() && p == end && !s.empty() && std::isfinite(d))
    return d;
  return s;
}

json option_snapshot(const CLI::App* app) {
  json out = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    const bool flag = opt->get_expected_min() == 0;
    if (flag) {
      out[name] = opt->count() > 0;
      continue;
    }
    std::vector<std::string> vals = opt->results();
    if (vals.empty() && !opt->get_default_str().empty()) vals.push_back(opt->get_default_str());
    if (vals.empty()) continue;
    if (opt->get_items_expected_max() > 1) {
      json arr = json::array();
      for (const auto& v : vals) arr.push_back(typed_value(v));
      out[name] = arr;
    } else {
      out[name] = typed_value(vals.back());
    }
  }
  return out;
}

std::ofstream open_in(const fs::path& dir, const std::string& name) { return open_output(dir / name); }

void write_json(const fs::path& path, const json& j) {
  auto out = open_output(path);
  out << j.dump(2) << '\n';
}

Checkpoint require_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  return load_checkpoint(path);
}

void require_text_model(const ModelParams& p, const char* what) {
  if (!p.vocab.is_text() || p.output_dim() != p.vocab_size())
    throw UsageError(std::string(what) + " needs a character language model checkpoint");
}

Corpus require_corpus(const std::string& path, std::size_t max_bytes) {
  if (path.empty()) throw UsageError("--corpus is required");
  if (!fs::exists(path)) throw UsageError("corpus not found: " + path);
  return load_text_corpus(path, max_bytes);
}

const TokenSeq& pick_split(const Corpus& c, const std::string& split) {
  if (split == "train") return c.train;
  if (split == "validation") return c.validation;
  if (split == "test") return c.test;
  throw UsageError("unknown split " + split);
}

TokenSeq head_tokens(const TokenSeq& s, std::size_t n) {
  if (n == 0 || n >= s.size()) return s;
  return TokenSeq(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
}

// ---------------------------------------------------------------------------

struct Globals {
  std::string out = "isan_out";
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string task = "text";
  std::string corpus;
  std::size_t max_bytes = 5'000'000;
  std::optional<Index> hidden;
  std::string mode = "switched";
  std::optional<std::string> loss;
  std::optional<std::size_t> steps, batch, eval_every;
  std::size_t seq_len = 64;
  std::optional<std::size_t> eval_tokens;
  std::optional<double> lr, lr_final, weight_decay, init_gamma, init_sigma;
  std::string optimizer = "adam";
  bool decay_biases = false;
  double clip = 1.0;
  std::size_t paren_length = 64;
  double paren_noise = 0.2;
  std::size_t paren_val = 64;
  bool quiet = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const bool paren = a.task == "paren";
  if (!paren && a.task != "text") throw UsageError("--task must be text or paren");
  TrainingConfig cfg = paren ? paren_training_preset() : text_training_preset();
  InitConfig init = paren ? paren_init_preset() : text_init_preset();
  cfg.seed = g.seed;
  cfg.seq_len = a.seq_len;
  if (a.eval_tokens) cfg.eval_tokens = *a.eval_tokens;
  cfg.optimizer = parse_optimizer(a.optimizer);
  cfg.grad_clip_norm = a.clip > 0 ? std::optional<double>(a.clip) : std::nullopt;
  if (a.steps) cfg.max_steps = *a.steps;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.eval_every) cfg.eval_every = *a.eval_every;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.lr_final) cfg.lr_final_fraction = *a.lr_final;
  if (a.weight_decay) cfg.weight_decay = *a.weight_decay;
  if (a.decay_biases) cfg.decay_biases = true;
  if (a.init_gamma) init.gamma = *a.init_gamma;
  if (a.init_sigma) init.sigma = *a.init_sigma;
  const LossKind loss = parse_loss(a.loss.value_or(paren ? "l2" : "cross-entropy"));
  if (paren && loss != LossKind::l2) throw UsageError("the paren task trains with --loss l2");
  if (!paren && loss != LossKind::cross_entropy) throw UsageError("text training uses --loss cross-entropy");
  cfg.loss = loss;
  const fs::path out(g.out);
  cfg.checkpoint_dir = out / "checkpoint";
  const Mode mode = parse_mode(a.mode);

  auto progress = [&](const MetricsRow& r) {
    if (!a.quiet)
      std::cerr << "step " << r.step << " train " << format_number(r.train_metric) << " val "
                << format_number(r.val_metric) << " grad " << format_number(r.grad_norm) << '\n';
  };
  TrainResult res;
  json summary;
  if (paren) {
    ModelParams p0 = make_model(Vocab::paren(), a.hidden.value_or(35), kParenOutputDim, mode, g.seed + 7, init);
    ParenTaskConfig task{a.paren_length, a.paren_noise, a.paren_val};
    res = train_paren(cfg, task, std::move(p0), progress);
    const auto held = gen_paren(200, a.paren_length, a.paren_noise, g.seed + 999);
    summary = {{"task", "paren"}, {"mse", paren_mse(res.params, held)}, {"accuracy", paren_accuracy(res.params, held)}};
  } else {
    const Corpus corpus = require_corpus(a.corpus, a.max_bytes);
    ModelParams p0 = make_model(corpus.vocab, a.hidden.value_or(216), corpus.vocab.size(), mode, g.seed + 7, init);
    res = train_text(cfg, corpus, std::move(p0), progress);
    summary = {{"task", "text"}, {"validation_bpc", evaluate_bpc(res.params, corpus.validation)}};
  }
  save_checkpoint(out / "checkpoint", res.params);
  {
    auto m = open_in(out, "metrics.csv");
    write_metrics_csv(m, res.log);
  }
  summary["steps"] = res.log.empty() ? 0 : res.log.back().step;
  summary["parameters"] = parameter_count(res.params);
  write_json(out / "summary.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint, corpus, split = "test";
  std::size_t max_bytes = 5'000'000, tokens = 0, paren_samples = 200;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  json out;
  if (ck.params.vocab == Vocab::paren()) {
    const auto held = gen_paren(a.paren_samples, 64, 0.2, g.seed + 999);
    out = {{"mse", paren_mse(ck.params, held)}, {"accuracy", paren_accuracy(ck.params, held)}};
  } else {
    require_text_model(ck.params, "eval");
    const Corpus c = require_corpus(a.corpus, a.max_bytes);
    const TokenSeq toks = head_tokens(pick_split(c, a.split), a.tokens);
    out = {{"split", a.split}, {"tokens", toks.size()}, {"bpc", evaluate_bpc(ck.params, toks)}};
  }
  write_json(fs::path(g.out) / "eval.json", out);
  std::cout << out.dump() << '\n';
  return 0;
}

struct SampleArgs {
  std::string checkpoint, prompt = " ";
  std::size_t count = 200;
  double inv_temperature = 1.0;
};

int cmd_sample(const Globals& g, const SampleArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  require_text_model(ck.params, "sample");
  const TokenSeq prompt = encode_text(ck.params.vocab, a.prompt);
  const TokenSeq gen = sample(ck.params, prompt, a.count, a.inv_temperature, g.seed);
  const std::string text = ck.params.vocab.decode(prompt) + ck.params.vocab.decode(gen);
  auto f = open_in(g.out, "sample.txt");
  f << text << '\n';
  std::cout << text << '\n';
  return 0;
}

struct DecomposeArgs {
  std::string checkpoint, text;
  std::vector<std::string> logits;
};

int cmd_decompose(const Globals& g, const DecomposeArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  require_text_model(ck.params, "decompose");
  if (a.text.empty()) throw UsageError("--text is required");
  const TokenSeq toks = encode_text(ck.params.vocab, a.text);
  const KappaTensor k = kappa(ck.params, toks);
  {
    auto f = open_in(g.out, "kappa_norms.csv");
    write_kappa_csv(f, k, ck.params.vocab, -1);
  }
  for (const std::string& sym : a.logits) {
    const std::string norm = normalize_text(sym);
    if (norm.size() != 1) throw UsageError("--logit takes single symbols ('_' for space)");
    const TokenId id = ck.params.vocab.index(norm[0]);
    auto f = open_in(g.out, "kappa_" + display_symbol(norm[0]) + ".csv");
    write_kappa_csv(f, k, ck.params.vocab, id);
  }
  std::cout << "wrote kappa CSVs for " << toks.size() << " tokens to " << g.out << '\n';
  return 0;
}

struct WordsArgs {
  std::string checkpoint, text;
};

int cmd_words(const Globals& g, const WordsArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  require_text_model(ck.params, "words");
  if (a.text.empty()) throw UsageError("--text is required");
  const TokenSeq toks = encode_text(ck.params.vocab, a.text);
  const KappaTensor k = kappa(ck.params, toks);
  const WordContributions wc = word_contributions(k, ck.params.vocab.index(' '));
  auto f = open_in(g.out, "word_norms.csv");
  write_word_norms_csv(f, wc, toks, ck.params.vocab);
  std::cout << wc.words.size() << " words\n";
  return 0;
}

struct DecayArgs {
  std::string checkpoint, corpus, split = "test";
  std::size_t max_bytes = 5'000'000, tokens = 100'000;
  Index max_lag = 40;
  std::vector<Index> history{0, 1, 2, 3, 5, 10, 15, 20, 30, 40};
};

int cmd_decay(const Globals& g, const DecayArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  require_text_model(ck.params, "decay");
  const Corpus c = require_corpus(a.corpus, a.max_bytes);
  const TokenSeq toks = head_tokens(pick_split(c, a.split), a.tokens);
  const fs::path out(g.out);
  {
    auto f = open_in(out, "decay.csv");
    write_decay_csv(f, decay_curve(ck.params, toks, a.max_lag));
  }
  {
    auto f = open_in(out, "truncated_bpc.csv");
    f << "history,bpc\n";
    for (Index n : a.history) f << n << ',' << format_number(truncated_history_bpc(ck.params, toks, n)) << '\n';
    f << "full," << format_number(evaluate_bpc(ck.params, toks)) << '\n';
  }
  for (const char* mode : {"all", "only-space", "without-space"}) {
    auto f = open_in(out, std::string("position_ce_") + mode + ".csv");
    write_position_ce_csv(f, position_in_word_ce(ck.params, toks, parse_space_mode(mode)));
  }
  std::cout << "wrote decay, truncated-history and position CSVs to " << g.out << '\n';
  return 0;
}

struct BasisArgs {
  std::string checkpoint, corpus;
  std::size_t max_bytes = 5'000'000, pca_tokens = 20'000;
};

int cmd_basis(const Globals& g, const BasisArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  const ModelParams& p = ck.params;
  require_text_model(p, "basis");
  const Corpus c = require_corpus(a.corpus, a.max_bytes);
  const NgramStats stats = empirical_ngrams(c.train, p.vocab_size());
  const Vector log_uni = stats.smoothed_unigram().array().log().matrix();
  const ReadoutSplit split = readout_split(p.readout.W);
  const BiasNorms bn = bias_subspace_norms(p, split, log_uni);
  const fs::path out(g.out);
  {
    auto f = open_in(out, "bias_norms.csv");
    f << "symbol,log_unigram,full,parallel,perpendicular\n";
    for (TokenId x = 0; x < p.vocab_size(); ++x)
      f << display_symbol(p.vocab.symbol(x)) << ',' << format_number(log_uni(x)) << ',' << format_number(bn.full(x))
        << ',' << format_number(bn.par(x)) << ',' << format_number(bn.perp(x)) << '\n';
  }
  const CosineMatrices cm = bias_cosine_matrices(p, split);
  for (const auto& [name, m] : {std::pair{"full", &cm.full}, {"parallel", &cm.par}, {"perpendicular", &cm.perp}}) {
    auto f = open_in(out, std::string("cosine_") + name + ".csv");
    write_matrix_csv(f, *m);
  }
  const TokenSeq toks = head_tokens(c.test, a.pca_tokens);
  const Vector pca = pca_explained_variance(run(p, toks).states);
  {
    auto f = open_in(out, "pca.csv");
    f << "component,ratio\n";
    for (Index i = 0; i < pca.size(); ++i) f << i + 1 << ',' << format_number(pca(i)) << '\n';
  }
  const BasisTransform tr = readout_first_basis(split);
  const ModelParams rotated = apply_basis(p, tr);
  if (split.rank() < p.hidden_dim()) {
    auto f = open_in(out, "block_norms.csv");
    write_block_norms_csv(f, rotated, split.rank());
  }
  save_checkpoint(out / "readout_basis", rotated, tr.T);
  auto corr = [](const Correlation& r) { return r.degenerate ? json(nullptr) : json(r.value); };
  const json summary = {{"readout_rank", split.rank()},
                        {"corr_full", corr(bn.corr_full)},
                        {"corr_parallel", corr(bn.corr_par)},
                        {"corr_perpendicular", corr(bn.corr_perp)}};
  write_json(out / "basis.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

struct NgramArgs {
  std::string checkpoint, corpus;
  std::size_t max_bytes = 5'000'000;
  bool log_space = false;
};

int cmd_ngram(const Globals& g, const NgramArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  require_text_model(ck.params, "ngram");
  const Corpus c = require_corpus(a.corpus, a.max_bytes);
  const NgramStats stats = empirical_ngrams(c.train, ck.params.vocab_size());
  const auto rows = compare_bigram(ck.params, stats, a.log_space);
  {
    auto f = open_in(g.out, "bigram.csv");
    write_bigram_csv(f, ck.params.vocab, rows);
  }
  const Correlation uni = compare_unigram(ck.params, stats, a.log_space);
  {
    auto f = open_in(g.out, "unigram.csv");
    f << "symbol,model,empirical\n";
    const Vector model = softmax(ck.params.readout.b);
    for (TokenId x = 0; x < ck.params.vocab_size(); ++x)
      f << display_symbol(ck.params.vocab.symbol(x)) << ',' << format_number(model(x)) << ','
        << format_number(stats.unigram(x)) << '\n';
  }
  double model_mean = 0, base_mean = 0;
  std::size_t used = 0;
  for (const auto& r : rows) {
    if (r.model.degenerate || r.baseline.degenerate) continue;
    model_mean += r.model.value;
    base_mean += r.baseline.value;
    ++used;
  }
  const json summary = {{"unigram_corr", uni.degenerate ? json(nullptr) : json(uni.value)},
                        {"bigram_model_mean", used ? json(model_mean / double(used)) : json(nullptr)},
                        {"bigram_baseline_mean", used ? json(base_mean / double(used)) : json(nullptr)}};
  write_json(fs::path(g.out) / "ngram.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

struct ParenReverseArgs {
  std::string checkpoint;
  std::size_t samples = 200;
};

int cmd_paren_reverse(const Globals& g, const ParenReverseArgs& a) {
  const Checkpoint ck = require_checkpoint(a.checkpoint);
  const ModelParams& p = ck.params;
  if (p.vocab != Vocab::paren()) throw UsageError("paren-reverse needs a parentheses checkpoint");
  const auto held = gen_paren(a.samples, 64, 0.2, g.seed + 999);
  const CountingBasis cb = find_counting_basis(p, held);
  const fs::path out(g.out);
  json tokens = json::object();
  for (TokenId x = 0; x < p.vocab_size(); ++x) {
    const Matrix m = transformed_transition(p, cb.transform, x);
    const BlockView v = block_view(m, cb.readout_dims);
    const Matrix rc = v.rc.leftCols(cb.readout_dims);
    tokens[std::string(1, p.vocab.symbol(x))] = {
        {"rr", max_abs(v.rr)}, {"rc", max_abs(v.rc)}, {"cr", max_abs(v.cr)}, {"cc", max_abs(v.cc)},
        {"rc_identity_gap", max_abs(rc - Matrix::Identity(rc.rows(), rc.cols()))}};
    auto f = open_in(out, std::string("transition_") + p.vocab.symbol(x) + ".csv");
    write_matrix_csv(f, m);
  }
  {
    auto f = open_in(out, "counting_basis_T.csv");
    write_matrix_csv(f, cb.transform.T);
  }
  const CodedStates cs = collect_coded_states(p, {held.begin(), held.begin() + 1});
  {
    auto f = open_in(out, "states_sample0.csv");
    write_matrix_csv(f, (cb.transform.T * cs.states).transpose());
  }
  save_checkpoint(out / "counting_basis", apply_augmented_basis(p, cb.transform), cb.transform.T);
  const json summary = {{"mse", paren_mse(p, held)},
                        {"accuracy", paren_accuracy(p, held)},
                        {"code_residual_rms", cb.residual_rms},
                        {"dynamics_residual", cb.dynamics_residual},
                        {"automaton_error", cb.automaton_error},
                        {"gauge_prior", cb.gauge_prior},
                        {"visited_dim", cb.visited_dim},
                        {"condition", cb.transform.condition},
                        {"blocks", tokens}};
  write_json(out / "counting_basis.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

struct BenchArgs {
  std::string checkpoint, corpus;
  std::size_t max_bytes = 5'000'000, tokens = 200'000;
  Index hidden = 216;
  std::string policy = "top-words";
  std::size_t top_k = 2000, max_ngram = 3, table_bytes = std::size_t{1} << 30;
  int reps = 7;
};

int cmd_compose_bench(const Globals& g, const BenchArgs& a) {
  const Corpus c = require_corpus(a.corpus, a.max_bytes);
  const ModelParams p = a.checkpoint.empty()
                            ? make_model(c.vocab, a.hidden, c.vocab.size(), Mode::switched, g.seed, InitConfig{})
                            : load_checkpoint(a.checkpoint).params;
  if (p.vocab != c.vocab) throw UsageError("checkpoint vocabulary does not match the corpus");
  TablePolicy pol;
  if (a.policy == "top-words") {
    pol.kind = TablePolicyKind::top_words;
  } else if (a.policy == "ngrams") {
    pol.kind = TablePolicyKind::ngrams;
  } else {
    throw UsageError("--policy must be top-words or ngrams");
  }
  pol.top_k = a.top_k;
  pol.max_ngram = a.max_ngram;
  pol.max_bytes = a.table_bytes;
  const CompositionTable table = build_table(p, c.train, pol);
  const TokenSeq toks = head_tokens(c.test.size() >= a.tokens ? c.test : c.train, a.tokens);
  const BenchReport r = bench(p, table, toks, a.reps);
  const json report = {{"n", r.n},
                       {"vocab", r.vocab},
                       {"policy", r.policy},
                       {"entries", r.entries},
                       {"bytes", r.bytes},
                       {"per_char_ns_per_token", r.per_char_ns_per_token},
                       {"fast_ns_per_token", r.fast_ns_per_token},
                       {"matvec_ratio", r.matvec_ratio},
                       {"speedup", r.speedup}};
  write_json(fs::path(g.out) / "bench.json", report);
  std::cout << report.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Input switched affine networks: training and analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "Read options from a JSON file (e.g. a previous config.json)");
  Globals g;
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();

  auto ckpt = [](CLI::App* s, std::string& dst) { s->add_option("--checkpoint", dst, "Checkpoint directory"); };
  auto corpus = [](CLI::App* s, std::string& dst, std::size_t& max_bytes) {
    s->add_option("--corpus", dst, "Plain-text corpus file");
    s->add_option("--max-bytes", max_bytes, "Read only this many bytes of the corpus (0 = all)")->capture_default_str();
  };

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a text corpus or the parentheses task");
  train->add_option("--task", ta.task, "text or paren")->capture_default_str()->check(CLI::IsMember({"text", "paren"}));
  corpus(train, ta.corpus, ta.max_bytes);
  train->add_option("--hidden", ta.hidden, "Hidden units (216 for text, 35 for paren)");
  train->add_option("--mode", ta.mode, "switched or shared")->capture_default_str()->check(CLI::IsMember({"switched", "shared"}));
  train->add_option("--loss", ta.loss, "cross-entropy (text) or l2 (paren)");
  train->add_option("--steps", ta.steps, "Optimizer steps");
  train->add_option("--batch", ta.batch, "Lanes (text) or sequences (paren) per step");
  train->add_option("--seq-len", ta.seq_len, "Truncated BPTT length")->capture_default_str();
  train->add_option("--lr", ta.lr, "Learning rate");
  train->add_option("--lr-final", ta.lr_final, "Final learning rate as a fraction of --lr (linear anneal)");
  train->add_option("--optimizer", ta.optimizer, "adam, adagrad or sgd")->capture_default_str();
  train->add_option("--weight-decay", ta.weight_decay, "Decoupled weight decay");
  train->add_flag("--decay-biases", ta.decay_biases, "Apply weight decay to biases, h0 and b_ro too");
  train->add_option("--clip", ta.clip, "Global gradient-norm clip, <= 0 disables")->capture_default_str();
  train->add_option("--eval-every", ta.eval_every, "Steps between validation passes");
  train->add_option("--eval-tokens", ta.eval_tokens, "Cap on validation tokens (0 = whole split)");
  train->add_option("--init-gamma", ta.init_gamma, "Identity scale of the initial transition matrices");
  train->add_option("--init-sigma", ta.init_sigma, "Noise scale of the initial transition matrices");
  train->add_option("--paren-length", ta.paren_length, "Parentheses sequence length")->capture_default_str();
  train->add_option("--paren-noise", ta.paren_noise, "Probability of the noise symbol")->capture_default_str();
  train->add_option("--paren-val", ta.paren_val, "Held-out parentheses sequences")->capture_default_str();
  train->add_flag("--quiet", ta.quiet, "No progress lines on stderr");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Bits/char on a corpus split, or MSE/accuracy for a parentheses model");
  ckpt(eval, ea.checkpoint);
  corpus(eval, ea.corpus, ea.max_bytes);
  eval->add_option("--split", ea.split, "train, validation or test")->capture_default_str();
  eval->add_option("--tokens", ea.tokens, "Use only the first N tokens of the split (0 = all)")->capture_default_str();
  eval->add_option("--paren-samples", ea.paren_samples, "Generated sequences for a parentheses model")->capture_default_str();

  SampleArgs sa;
  auto* samp = app.add_subcommand("sample", "Generate text");
  ckpt(samp, sa.checkpoint);
  samp->add_option("--prompt", sa.prompt, "Prompt text")->capture_default_str();
  samp->add_option("--count", sa.count, "Symbols to generate")->capture_default_str();
  samp->add_option("--inv-temperature", sa.inv_temperature, "Inverse temperature; inf is greedy")->capture_default_str();

  DecomposeArgs da;
  auto* dec = app.add_subcommand("decompose", "Per-source logit contributions of a string");
  ckpt(dec, da.checkpoint);
  dec->add_option("--text", da.text, "Input string; non-letters become spaces");
  dec->add_option("--logit", da.logits, "Also export the contributions to these symbols' logits");

  WordsArgs wa;
  auto* words = app.add_subcommand("words", "Contributions aggregated per word");
  ckpt(words, wa.checkpoint);
  words->add_option("--text", wa.text, "Input string");

  DecayArgs ya;
  auto* decay = app.add_subcommand("decay", "Contribution decay, truncated-history bpc, position-in-word CE");
  ckpt(decay, ya.checkpoint);
  corpus(decay, ya.corpus, ya.max_bytes);
  decay->add_option("--split", ya.split, "Corpus split")->capture_default_str();
  decay->add_option("--tokens", ya.tokens, "Tokens analysed")->capture_default_str();
  decay->add_option("--max-lag", ya.max_lag, "Largest lag of the decay curve")->capture_default_str();
  decay->add_option("--history", ya.history, "History lengths for truncated bpc")->capture_default_str();

  BasisArgs ba;
  auto* basis = app.add_subcommand("basis", "Readout subspace split, bias geometry, PCA, block norms");
  ckpt(basis, ba.checkpoint);
  corpus(basis, ba.corpus, ba.max_bytes);
  basis->add_option("--pca-tokens", ba.pca_tokens, "Test tokens whose states feed the PCA")->capture_default_str();

  NgramArgs na;
  auto* ngram = app.add_subcommand("ngram", "Compare readout-of-bias predictions with n-gram statistics");
  ckpt(ngram, na.checkpoint);
  corpus(ngram, na.corpus, na.max_bytes);
  ngram->add_flag("--log-space", na.log_space, "Correlate log-probabilities");

  ParenReverseArgs pa;
  auto* paren = app.add_subcommand("paren-reverse", "Counting basis of a trained parentheses model");
  ckpt(paren, pa.checkpoint);
  paren->add_option("--samples", pa.samples, "Generated sequences used for the fit")->capture_default_str();

  BenchArgs bn;
  auto* bench_cmd = app.add_subcommand("compose-bench", "Word-level composed maps vs per-character stepping");
  bench_cmd->add_option("--checkpoint", bn.checkpoint, "Checkpoint; a random model is used when omitted");
  corpus(bench_cmd, bn.corpus, bn.max_bytes);
  bench_cmd->add_option("--tokens", bn.tokens, "Tokens timed")->capture_default_str();
  bench_cmd->add_option("--hidden", bn.hidden, "Hidden units of the random model")->capture_default_str();
  bench_cmd->add_option("--policy", bn.policy, "top-words or ngrams")->capture_default_str();
  bench_cmd->add_option("--top-k", bn.top_k, "Words kept by top-words")->capture_default_str();
  bench_cmd->add_option("--max-ngram", bn.max_ngram, "Longest substring kept by ngrams")->capture_default_str();
  bench_cmd->add_option("--table-bytes", bn.table_bytes, "Memory cap of the table")->capture_default_str();
  bench_cmd->add_option("--reps", bn.reps, "Timed repetitions")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    fs::create_directories(g.out);
    json snapshot = {{"out", g.out}, {"seed", g.seed}};
    snapshot[sub->get_name()] = option_snapshot(sub);
    write_json(fs::path(g.out) / "config.json", snapshot);

    if (*train) return cmd_train(g, ta);
    if (*eval) return cmd_eval(g, ea);
    if (*samp) return cmd_sample(g, sa);
    if (*dec) return cmd_decompose(g, da);
    if (*words) return cmd_words(g, wa);
    if (*decay) return cmd_decay(g, ya);
    if (*basis) return cmd_basis(g, ba);
    if (*ngram) return cmd_ngram(g, na);
    if (*paren) return cmd_paren_reverse(g, pa);
    if (*bench_cmd) return cmd_compose_bench(g, bn);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
