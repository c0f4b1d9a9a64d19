// lmn: train, eval, generate, bench and verify.
//
// Settings are flat key=value pairs (model.*, train.*, bench.*, run.*).
// Precedence: built-in defaults < --config file < command-line flags.
// Exit codes: 0 ok, 1 verification failure, 2 input error, 3 artifact
// mismatch, 4 capacity.

#include <malloc.h>

#include <CLI11.hpp>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "lmn/bench.hpp"
#include "lmn/checkpoint.hpp"
#include "lmn/data.hpp"
#include "lmn/model.hpp"
#include "lmn/train.hpp"
#include "lmn/verify.hpp"

namespace fs = std::filesystem;
using namespace lmn;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kInputError = 2, kArtifactMismatch = 3, kCapacity = 4 };

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string corpus = "data/corpus.txt";
  std::string out = "runs/latest";
  Mode mode = Mode::parallel;
  std::string checkpoint;  // default: <out>/final.ckpt
  std::string vocab;       // default: vocab.txt next to the checkpoint
  std::string prompt = "\n";
  std::size_t n_new = 500;
  double temperature = 1.0;
  bool argmax = false;
  bool quick = false;
  std::uint64_t seed = 1337;

  bool set(const std::string& key, const std::string& value) {
    if (key == "run.corpus") corpus = value;
    else if (key == "run.out") out = value;
    else if (key == "run.mode") mode = parse_mode(value);
    else if (key == "run.checkpoint") checkpoint = value;
    else if (key == "run.vocab") vocab = value;
    else if (key == "run.prompt") prompt = unescape(value);
    else if (key == "run.n_new") n_new = parse_uint(key, value);
    else if (key == "run.temperature") temperature = parse_double(key, value);
    else if (key == "run.argmax") argmax = parse_bool(key, value);
    else if (key == "run.quick") quick = parse_bool(key, value);
    else if (key == "run.seed") seed = parse_uint(key, value);
    else return false;
    return true;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "run.corpus=" << corpus << '\n'
       << "run.out=" << out << '\n'
       << "run.mode=" << to_string(mode) << '\n'
       << "run.checkpoint=" << checkpoint << '\n'
       << "run.vocab=" << vocab << '\n'
       << "run.prompt=" << escape(prompt) << '\n'
       << "run.n_new=" << n_new << '\n'
       << "run.temperature=" << temperature << '\n'
       << "run.argmax=" << (argmax ? "true" : "false") << '\n'
       << "run.quick=" << (quick ? "true" : "false") << '\n'
       << "run.seed=" << seed << '\n';
    return os.str();
  }

  // Prompts may contain newlines; the config text stores them as \n.
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '\n') out += "\\n";
      else if (c == '\\') out += "\\\\";
      else out += c;
    }
    return out;
  }

  static std::string unescape(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '\\' && i + 1 < s.size()) {
        const char n = s[++i];
        out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
      } else {
        out += s[i];
      }
    }
    return out;
  }
};

struct Settings {
  ModelConfig model;
  TrainConfig train;
  BenchConfig bench;
  RunConfig run;

  void set(const std::string& key, const std::string& value) {
    if (model.set(key, value) || train.set(key, value) || bench.set(key, value) || run.set(key, value)) return;
    throw ConfigError("unknown configuration key '" + key + "'");
  }

  std::string to_text() const { return model.to_text() + train.to_text() + bench.to_text() + run.to_text(); }
};

struct Flags {
  std::string config;
  std::optional<std::string> out, variant, mode, corpus, lengths, orientation, checkpoint, vocab, prompt;
  std::optional<std::uint64_t> seed, embed, banks, expansion, max_iters, n_new, n_blocks;
  std::optional<double> temperature;
  bool quick = false;
  bool argmax = false;
};

Settings resolve(const Flags& f) {
  Settings s;
  if (!f.config.empty()) {
    if (!fs::exists(f.config)) throw DataError("config file '" + f.config + "' does not exist");
    for (const auto& kv : parse_key_values(read_text_file(f.config))) {
      try {
        s.set(kv.key, kv.value);
      } catch (const ConfigError& e) {
        throw ConfigError(f.config + ":" + std::to_string(kv.line) + ": " + e.what());
      }
    }
  }
  const auto apply = [&](const char* key, const auto& v) {
    if (!v) return;
    std::ostringstream os;
    os << std::setprecision(17) << *v;
    s.set(key, os.str());
  };
  apply("run.out", f.out);
  apply("model.variant", f.variant);
  apply("run.mode", f.mode);
  apply("run.corpus", f.corpus);
  apply("bench.lengths", f.lengths);
  apply("model.score_orientation", f.orientation);
  apply("run.checkpoint", f.checkpoint);
  apply("run.vocab", f.vocab);
  if (f.prompt) s.run.prompt = *f.prompt;
  apply("model.embed", f.embed);
  apply("model.banks", f.banks);
  apply("model.expansion", f.expansion);
  apply("model.n_blocks", f.n_blocks);
  apply("train.max_iters", f.max_iters);
  apply("run.n_new", f.n_new);
  apply("run.temperature", f.temperature);
  if (f.seed) {
    s.model.seed = s.train.seed = s.bench.seed = s.run.seed = *f.seed;
  }
  if (f.quick) s.run.quick = true;
  if (f.argmax) s.run.argmax = true;
  return s;
}

void echo(const Settings& s, std::ostream& os) {
  os << "# effective configuration\n" << s.to_text() << std::flush;
}

fs::path checkpoint_path(const Settings& s) { return s.run.checkpoint.empty() ? fs::path(s.run.out) / "final.ckpt" : fs::path(s.run.checkpoint); }

fs::path vocab_path(const Settings& s) { return s.run.vocab.empty() ? checkpoint_path(s).parent_path() / "vocab.txt" : fs::path(s.run.vocab); }

Vocab load_vocab(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("vocabulary file '" + path.string() + "' does not exist");
  return Vocab::from_sidecar(read_text_file(path));
}

Model<float> load_model(const Settings& s, const Vocab& vocab) {
  const fs::path ckpt = checkpoint_path(s);
  if (!fs::exists(ckpt)) throw DataError("checkpoint '" + ckpt.string() + "' does not exist");
  Model<float> model = load_checkpoint(ckpt);
  if (model.config().vocab_size != vocab.size()) {
    throw ArtifactError("checkpoint vocabulary size " + std::to_string(model.config().vocab_size) + " does not match vocabulary file size " +
                        std::to_string(vocab.size()));
  }
  return model;
}

Dataset load_corpus(const Settings& s, const Vocab& vocab) {
  if (!fs::exists(s.run.corpus)) throw DataError("corpus '" + s.run.corpus + "' does not exist");
  return Dataset::from_ids(vocab.encode(read_text_file(s.run.corpus)), s.train.train_fraction);
}

int cmd_train(Settings s) {
  if (!fs::exists(s.run.corpus)) throw DataError("corpus '" + s.run.corpus + "' does not exist");
  const std::string text = read_text_file(s.run.corpus);
  const Vocab vocab = Vocab::build(text);
  s.model.vocab_size = vocab.size();
  s.model = s.model.normalized();
  echo(s, std::cout);
  s.model.validate();
  s.train.validate(s.model);
  const Dataset ds = Dataset::from_ids(vocab.encode(text), s.train.train_fraction);
  const fs::path out(s.run.out);
  fs::create_directories(out);
  {
    std::ofstream(out / "vocab.txt", std::ios::binary) << vocab.sidecar();
    std::ofstream(out / "config.txt") << s.to_text();
  }
  Model<float> model = Model<float>::init(s.model);
  std::cout << "corpus: " << ds.ids.size() << " characters, vocabulary " << vocab.size() << ", parameters " << model.param_count() << std::endl;
  const TrainReport report = train(model, ds, s.train, {out, [](const std::string& line) { std::cout << line << std::endl; }});
  std::cout << std::fixed << std::setprecision(4) << "final: train " << report.final_train_loss << ", val " << report.final_val_loss
            << ", best val " << report.best_val_loss << " at step " << report.best_step << " (" << std::setprecision(1) << report.seconds
            << " s)\nartifacts: " << (out / "report.csv").string() << ", " << (out / "final.ckpt").string() << ", "
            << (out / "best.ckpt").string() << ", " << (out / "vocab.txt").string() << std::endl;
  return kOk;
}

int cmd_eval(const Settings& s) {
  echo(s, std::cout);
  const Vocab vocab = load_vocab(vocab_path(s));
  const Model<float> model = load_model(s, vocab);
  const Dataset ds = load_corpus(s, vocab);
  TrainConfig cfg = s.train;
  cfg.block_size = std::min(cfg.block_size, model.config().max_seq_len);
  EvalResult e;
  if (s.run.mode == Mode::parallel) {
    e = evaluate(model, ds, cfg, s.run.seed);
  } else {
    NoGradGuard ng;
    Rng rng(s.run.seed);
    for (Split split : {Split::train, Split::val}) {
      double total = 0;
      for (std::size_t i = 0; i < cfg.eval_iters; ++i) {
        const Batch b = sample_batch(ds, split, cfg.batch_size, cfg.block_size, rng);
        total += lm_loss(model.forward(b.inputs, b.batch, b.length, Mode::sequential), std::span<const std::int32_t>(b.targets)).item();
      }
      (split == Split::train ? e.train_loss : e.val_loss) = total / static_cast<double>(cfg.eval_iters);
    }
  }
  std::cout << std::fixed << std::setprecision(4) << "train_loss=" << e.train_loss << "\nval_loss=" << e.val_loss << std::endl;
  return kOk;
}

int cmd_generate(const Settings& s) {
  echo(s, std::cerr);
  const Vocab vocab = load_vocab(vocab_path(s));
  const Model<float> model = load_model(s, vocab);
  std::string prompt = s.run.prompt;
  if (prompt.empty()) throw ConfigError("run.prompt must not be empty");
  std::vector<std::int32_t> ids;
  for (char32_t cp : utf8::decode(prompt)) {
    if (!vocab.contains(cp)) throw ArtifactError("prompt character '" + utf8::encode(cp) + "' is not in the vocabulary");
    ids.push_back(vocab.id(cp));
  }
  Rng rng(s.run.seed);
  std::cout << prompt << std::flush;
  generate(model, std::span<const std::int32_t>(ids), s.run.n_new, {s.run.temperature, s.run.argmax}, rng,
           [&](std::int32_t id) { std::cout << vocab.decode(std::span<const std::int32_t>(&id, 1)) << std::flush; });
  std::cout << std::endl;
  return kOk;
}

int cmd_bench(Settings s) {
  if (s.run.quick) s.bench.lengths = {64, 128, 256};
  echo(s, std::cout);
  fs::create_directories(s.run.out);
  const fs::path csv = fs::path(s.run.out) / "bench.csv";
  std::cout << csv_header() << std::endl;
  const auto rows = sweep(s.bench, s.model, csv, [](const BenchRecord& r) { std::cout << csv_row(r) << std::endl; });
  for (const auto& f : fit_slopes(rows)) {
    std::cout << "slope " << f.variant << ' ' << to_string(f.mode) << ": time " << std::fixed << std::setprecision(3) << f.time_slope
              << ", peak bytes " << f.peak_slope << std::endl;
  }
  std::cout << "wrote " << csv.string() << std::endl;
  return kOk;
}

int cmd_verify(const Settings& s) {
  echo(s, std::cout);
  std::size_t failed = 0;
  std::vector<std::string> failures;
  const auto results = run_verify(s.run.quick, [&](const CheckResult& r) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << std::setw(7) << std::fixed << std::setprecision(2) << r.seconds << "s  " << r.name
              << "  [" << r.detail << "]" << std::endl;
  });
  for (const auto& r : results)
    if (!r.passed) {
      ++failed;
      failures.push_back(r.name);
    }
  if (failed == 0) {
    std::cout << "all " << results.size() << " checks passed" << std::endl;
    return kOk;
  }
  std::cout << failed << " of " << results.size() << " checks failed:" << std::endl;
  for (const auto& n : failures) std::cout << "  - " << n << std::endl;
  return kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed tensor memory in the heap; training reallocates the same
  // sizes every step.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, -1);

  CLI::App app{"Log-memory language models: training, generation, benchmarks and self-checks"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "key=value configuration file");
  app.add_option("--out", f.out, "output directory");
  app.add_option("--seed", f.seed, "seed for weights, batches, sampling and benchmarks");
  app.add_option("--variant", f.variant, "logmem | tiny-logmem | expsum | baseline-attn");
  app.add_option("--embed", f.embed, "embedding width");
  app.add_option("--banks", f.banks, "memory banks");
  app.add_option("--expansion", f.expansion, "expander slots added per merge (expsum)");
  app.add_option("--blocks", f.n_blocks, "number of residual blocks");
  app.add_option("--mode", f.mode, "parallel | sequential");
  app.add_option("--corpus", f.corpus, "UTF-8 training corpus");
  app.add_option("--max-iters", f.max_iters, "training steps");
  app.add_option("--lengths", f.lengths, "comma-separated benchmark lengths");
  app.add_option("--score-orientation", f.orientation, "literal | swapped");
  app.add_option("--checkpoint", f.checkpoint, "checkpoint file (default <out>/final.ckpt)");
  app.add_option("--vocab", f.vocab, "vocabulary sidecar (default next to the checkpoint)");
  app.add_option("--prompt", f.prompt, "generation prompt");
  app.add_option("--n-new", f.n_new, "characters to generate");
  app.add_option("--temperature", f.temperature, "sampling temperature");
  app.add_flag("--argmax", f.argmax, "greedy decoding");
  app.add_flag("--quick", f.quick, "reduced shapes (verify, bench)");

  auto* train_cmd = app.add_subcommand("train", "train a model on a character corpus");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  auto* gen_cmd = app.add_subcommand("generate", "sample text from a checkpoint (sequential mode)");
  auto* bench_cmd = app.add_subcommand("bench", "time and memory sweep over sequence lengths");
  auto* verify_cmd = app.add_subcommand("verify", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInputError;
  }

  try {
    const Settings s = resolve(f);
    if (train_cmd->parsed()) return cmd_train(s);
    if (eval_cmd->parsed()) return cmd_eval(s);
    if (gen_cmd->parsed()) return cmd_generate(s);
    if (bench_cmd->parsed()) return cmd_bench(s);
    if (verify_cmd->parsed()) return cmd_verify(s);
  } catch (const CapacityError& e) {
    std::cerr << "\nerror: " << e.what() << std::endl;
    return kCapacity;
  } catch (const ArtifactError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kArtifactMismatch;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kArtifactMismatch;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kInputError;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kInputError;
  }
  return kInputError;
}
