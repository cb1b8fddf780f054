#include "faircl/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "faircl/config.hpp"
#include "faircl/error.hpp"
#include "faircl/eval.hpp"
#include "faircl/rng.hpp"
#include "faircl/train.hpp"

namespace faircl::cli {

namespace fs = std::filesystem;
using config::ExperimentConfig;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::string> seed;
  std::map<std::string, std::string> overrides;  // key -> value from flags
  std::string data;
  std::string out;
  std::string init;
  std::string model;
  std::string split;
  std::string kind = "pooled";
  std::string lambdas = "0.01,0.1,1";
  std::string spaces = "shared,independent";
  bool log_time = false;
};

std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

ExperimentConfig resolve_config(const Options& opt, std::ostream& err) {
  ExperimentConfig cfg;
  if (!opt.config_path.empty()) config::load_file(cfg, opt.config_path);
  if (const char* env = std::getenv("FAIRCL_SEED"); env && *env) {
    try {
      config::set_value(cfg, "seed", env);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("FAIRCL_SEED: ") + e.what());
    }
  }
  for (const auto& [key, value] : opt.overrides) config::set_value(cfg, key, value);
  if (opt.seed) config::set_value(cfg, "seed", *opt.seed);
  cfg.apply_seed();
  cfg.validate();
  (void)err;
  return cfg;
}

data::Corpus load_corpus(const Options& opt, const ExperimentConfig& cfg) {
  if (opt.data.empty()) return data::generate_synthetic_corpus(cfg.corpus);
  data::LoadOptions lo;
  lo.mel = cfg.mel;
  lo.max_frames = cfg.max_frames;
  return data::load_manifest(opt.data, lo);
}

std::vector<std::string> corpus_attributes(const data::Corpus& corpus) {
  std::vector<std::string> names;
  if (!corpus.empty()) {
    for (const auto& [k, v] : corpus.front().demographics) names.push_back(k);
  }
  return names;
}

// Input width and vocabulary come from the corpus unless pinned.
model::ModelConfig resolve_model(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  model::ModelConfig m = cfg.model;
  if (m.encoder.input_dim == 0) {
    if (corpus.empty()) throw ConfigError("model.input_dim: cannot infer from an empty corpus");
    m.encoder.input_dim = corpus.front().spec.bins;
  }
  if (m.head.vocab_size == 0) {
    int top = 0;
    for (const auto& u : corpus) {
      for (int t : u.transcript) top = std::max(top, t);
    }
    m.head.vocab_size = static_cast<std::size_t>(std::max(top + 1, 2));
  }
  m.head.independent_heads = !cfg.pretrain.loss.shared_embedding_space;
  m.validate();
  return m;
}

data::Corpus select_split(const data::Corpus& corpus, const ExperimentConfig& cfg, const std::string& which,
                          std::ostream& err) {
  if (which == "all") return corpus;
  if (which != "train" && which != "test") throw ConfigError("--split: expected train, test or all, got '" + which + "'");
  const auto attrs = cfg.split_attributes.empty() ? corpus_attributes(corpus) : cfg.split_attributes;
  auto parts = data::stratified_split(corpus, cfg.test_fraction, attrs, derive_seed(cfg.seed, 23));
  for (const auto& w : parts.warnings) err << "warning: " << w << "\n";
  return which == "train" ? std::move(parts.train) : std::move(parts.test);
}

std::vector<std::string> eval_attributes(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  return cfg.eval_attributes.empty() ? corpus_attributes(corpus) : cfg.eval_attributes;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  return os;
}

std::string epoch_name(const std::string& stage, std::size_t epoch) {
  std::ostringstream os;
  os << stage << "_epoch" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return os.str();
}

// Per-epoch and best-by-loss checkpoints under dir.
train::TrainHooks checkpoint_hooks(const fs::path& dir, const std::string& stage, const model::ModelConfig& mcfg,
                                   std::shared_ptr<std::string> last, std::shared_ptr<double> best) {
  train::TrainHooks hooks;
  hooks.on_epoch = [=](std::size_t epoch, const model::ModelParams& p, const train::EpochSummary& s) {
    const fs::path path = dir / epoch_name(stage, epoch);
    model::save_checkpoint(path, p, mcfg);
    *last = path.string();
    if (s.mean_loss < *best) {
      *best = s.mean_loss;
      model::save_checkpoint(dir / (stage + "_best.ckpt"), p, mcfg);
    }
  };
  hooks.last_good = [last] { return last->empty() ? std::string("none") : *last; };
  return hooks;
}

train::TrainResult run_pretrain(const data::Corpus& train_set, const model::ModelConfig& mcfg,
                                const train::TrainConfig& tcfg, const model::ModelParams* init, const fs::path& dir) {
  fs::create_directories(dir);
  auto hooks = checkpoint_hooks(dir, "pretrain", mcfg, std::make_shared<std::string>(),
                                std::make_shared<double>(std::numeric_limits<double>::infinity()));
  return train::pretrain(train_set, mcfg, tcfg, init, hooks);
}

train::TrainResult run_finetune(const data::Corpus& train_set, const model::ModelParams& pre,
                                const model::ModelConfig& mcfg, const train::TrainConfig& tcfg, const fs::path& dir) {
  fs::create_directories(dir);
  auto hooks = checkpoint_hooks(dir, "finetune", mcfg, std::make_shared<std::string>(),
                                std::make_shared<double>(std::numeric_limits<double>::infinity()));
  return train::finetune(train_set, pre, mcfg, tcfg, hooks);
}

void write_log(const fs::path& path, const train::TrainLog& log, bool with_time) {
  auto os = open_out(path);
  log.write(os, with_time);
}

// ---- commands ----

int cmd_gen_data(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt, err);
  require(opt.out, "--out");
  const auto corpus = data::generate_synthetic_corpus(cfg.corpus);
  data::write_manifest(corpus, opt.out);
  out << "wrote " << corpus.size() << " utterances to " << opt.out << "\n";
  return 0;
}

int cmd_pretrain(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt, err);
  require(opt.out, "--out");
  const auto corpus = load_corpus(opt, cfg);
  const auto mcfg = resolve_model(cfg, corpus);
  const auto train_set = select_split(corpus, cfg, opt.split.empty() ? "train" : opt.split, err);
  std::optional<model::ModelParams> init;
  if (!opt.init.empty()) init = model::load_checkpoint(opt.init, &mcfg);
  const fs::path dir = opt.out;
  auto result = run_pretrain(train_set, mcfg, cfg.pretrain, init ? &*init : nullptr, dir);
  model::save_checkpoint(dir / "pretrain.ckpt", result.params, mcfg);
  write_log(dir / "pretrain_log.jsonl", result.log, opt.log_time);
  const auto& last = result.log.epochs.back();
  out << "pretrain: " << train_set.size() << " utterances, " << result.log.steps.size() << " steps, final loss "
      << fmt_double(last.mean_loss) << " (info_nce " << fmt_double(last.mean_info_nce) << ", fsc "
      << fmt_double(last.mean_fsc) << ")\n";
  return 0;
}

int cmd_finetune(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt, err);
  require(opt.out, "--out");
  require(opt.init, "--init");
  const auto corpus = load_corpus(opt, cfg);
  const auto mcfg = resolve_model(cfg, corpus);
  const auto train_set = select_split(corpus, cfg, opt.split.empty() ? "train" : opt.split, err);
  const auto pre = model::load_checkpoint(opt.init, &mcfg);
  const fs::path dir = opt.out;
  auto result = run_finetune(train_set, pre, mcfg, cfg.finetune, dir);
  model::save_checkpoint(dir / "finetune.ckpt", result.params, mcfg);
  write_log(dir / "finetune_log.jsonl", result.log, opt.log_time);
  out << "finetune: " << train_set.size() << " utterances, " << result.log.steps.size() << " steps, final ctc "
      << fmt_double(result.log.epochs.back().mean_loss) << "\n";
  return 0;
}

int cmd_evaluate(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt, err);
  require(opt.model, "--model");
  const auto corpus = load_corpus(opt, cfg);
  auto mcfg = resolve_model(cfg, corpus);
  const auto params = model::load_checkpoint(opt.model, &mcfg);
  if (!params.contains("dec.out.w")) throw ConfigError(opt.model + ": checkpoint has no decoder head (run finetune)");
  mcfg.head.vocab_size = params.at("dec.out.w").dim(1);
  const auto test = select_split(corpus, cfg, opt.split.empty() ? "test" : opt.split, err);
  const auto report = eval::evaluate(test, params, mcfg, eval_attributes(cfg, corpus));
  for (const auto& w : report.warnings) err << "warning: " << w << "\n";
  eval::write_report_text(out, report);
  if (!opt.out.empty()) {
    const fs::path dir = opt.out;
    auto txt = open_out(dir / "report.txt");
    eval::write_report_text(txt, report);
    auto csv = open_out(dir / "report.csv");
    eval::write_report_csv(csv, report);
  }
  return 0;
}

std::string probe_attribute(const ExperimentConfig& cfg, const data::Corpus& corpus) {
  if (!cfg.probe_attribute.empty()) return cfg.probe_attribute;
  const auto attrs = eval_attributes(cfg, corpus);
  if (attrs.empty()) throw ConfigError("probe: corpus has no demographic attributes");
  return attrs.front();
}

int cmd_probe(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt, err);
  require(opt.model, "--model");
  const auto corpus = load_corpus(opt, cfg);
  const auto mcfg = resolve_model(cfg, corpus);
  const auto params = model::load_checkpoint(opt.model, &mcfg);
  const auto test = select_split(corpus, cfg, opt.split.empty() ? "test" : opt.split, err);
  const std::string attr = probe_attribute(cfg, corpus);
  std::vector<std::string> labels;
  for (const auto& u : test) labels.push_back(data::group_key(u.demographics, attr));
  const auto emb = eval::pooled_embeddings(test, params, mcfg.encoder);
  const auto r = eval::demographic_probe(emb, labels, attr, derive_seed(cfg.seed, 24));
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << "attribute " << r.attribute << "\nclasses " << r.n_classes
     << "\ntest_samples " << r.n_test << "\ntrain_accuracy " << r.train_accuracy << "\ntest_accuracy "
     << r.test_accuracy << "\nchance " << r.chance << "\n";
  out << os.str();
  if (!opt.out.empty()) {
    auto f = open_out(fs::path(opt.out) / "probe.txt");
    f << os.str();
  }
  return 0;
}

int cmd_export(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt, err);
  require(opt.model, "--model");
  require(opt.out, "--out");
  const auto corpus = load_corpus(opt, cfg);
  const auto mcfg = resolve_model(cfg, corpus);
  const auto params = model::load_checkpoint(opt.model, &mcfg);
  const auto test = select_split(corpus, cfg, opt.split.empty() ? "test" : opt.split, err);
  const auto attrs = eval_attributes(cfg, corpus);
  auto pooled = eval::pooled_embeddings(test, params, mcfg.encoder);
  auto os = open_out(opt.out);
  if (opt.kind == "pooled") {
    eval::write_embeddings_csv(os, test, attrs, pooled);
  } else if (opt.kind == "projected") {
    ag::NoGradGuard guard;
    eval::Matrix rows;
    for (const auto& p : pooled) {
      const auto z = model::project(ag::Tensor::from({1, p.size()}, p), params, mcfg.head);
      rows.emplace_back(z.values().begin(), z.values().end());
    }
    eval::write_embeddings_csv(os, test, attrs, rows);
  } else if (opt.kind == "pca") {
    auto proj = eval::project_2d(pooled);
    for (const auto& w : proj.warnings) err << "warning: " << w << "\n";
    eval::write_embeddings_csv(os, test, attrs, proj.coords, "pc");
  } else {
    throw ConfigError("--kind: expected pooled, projected or pca, got '" + opt.kind + "'");
  }
  out << "wrote " << test.size() << " rows to " << opt.out << "\n";
  return 0;
}

int cmd_ablate(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto base = resolve_config(opt, err);
  require(opt.out, "--out");
  std::vector<double> lambdas;
  for (const auto& s : split_list(opt.lambdas)) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !(v >= 0.0)) {
      throw ConfigError("--lambda: expected non-negative numbers, got '" + s + "'");
    }
    lambdas.push_back(v);
  }
  const auto spaces = split_list(opt.spaces);
  if (lambdas.empty() || spaces.empty()) throw ConfigError("--lambda and --space need at least one value each");
  for (const auto& s : spaces) {
    if (s != "shared" && s != "independent") {
      throw ConfigError("--space: expected shared or independent, got '" + s + "'");
    }
  }

  const auto corpus = load_corpus(opt, base);
  const auto train_set = select_split(corpus, base, "train", err);
  const auto test_set = select_split(corpus, base, "test", err);
  const auto attrs = eval_attributes(base, corpus);
  const fs::path dir = opt.out;
  std::vector<eval::LabeledReport> reports;
  for (const auto& space : spaces) {
    for (double lambda : lambdas) {
      auto cfg = base;
      cfg.pretrain.objective = train::Objective::FairAsr;
      cfg.pretrain.loss.lambda = lambda;
      cfg.pretrain.loss.shared_embedding_space = space == "shared";
      const auto mcfg = resolve_model(cfg, corpus);
      const std::string label = "lambda=" + fmt_double(lambda) + " " + space;
      const fs::path cell = dir / ("lambda_" + fmt_double(lambda) + "_" + space);
      err << "ablate: " << label << "\n";
      auto pre = run_pretrain(train_set, mcfg, cfg.pretrain, nullptr, cell);
      auto fin = run_finetune(train_set, pre.params, mcfg, cfg.finetune, cell);
      model::save_checkpoint(cell / "finetune.ckpt", fin.params, mcfg);
      write_log(cell / "pretrain_log.jsonl", pre.log, opt.log_time);
      write_log(cell / "finetune_log.jsonl", fin.log, opt.log_time);
      auto report = eval::evaluate(test_set, fin.params, mcfg, attrs);
      auto txt = open_out(cell / "report.txt");
      eval::write_report_text(txt, report);
      auto csv = open_out(cell / "report.csv");
      eval::write_report_csv(csv, report);
      reports.push_back({label, std::move(report)});
    }
  }
  eval::write_comparison_text(out, reports);
  auto txt = open_out(dir / "ablation.txt");
  eval::write_comparison_text(txt, reports);
  auto csv = open_out(dir / "ablation.csv");
  eval::write_comparison_csv(csv, reports);
  return 0;
}

void add_common(CLI::App* sub, Options& opt) {
  sub->add_option("--config", opt.config_path, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", opt.seed, "master seed (overrides FAIRCL_SEED and the config file)");
  sub->add_option("--data", opt.data, "JSONL manifest (default: synthetic corpus from corpus.* keys)");
  sub->add_option("--split", opt.split, "train, test or all (default: train for training, test otherwise)");
  sub->add_flag("--log-time", opt.log_time, "include wall time in training logs");
  ExperimentConfig defaults;
  for (const auto& key : config::keys()) {
    if (key.name == "seed") continue;
    const std::string name = key.name;
    sub->add_option_function<std::string>(
           "--" + name, [&opt, name](const std::string& v) { opt.overrides[name] = v; }, key.doc)
        ->default_str(key.get(defaults))
        ->type_name("VALUE");
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fairness-aware contrastive pretraining and CTC fine-tuning for speech recognition", "faircl"};
  app.require_subcommand(1);
  Options opt;

  using Handler = int (*)(const Options&, std::ostream&, std::ostream&);
  std::vector<std::pair<CLI::App*, Handler>> commands;
  auto add = [&](const char* name, const char* doc, Handler h) {
    CLI::App* sub = app.add_subcommand(name, doc);
    add_common(sub, opt);
    commands.emplace_back(sub, h);
    return sub;
  };
  auto* gen = add("gen-data", "write a synthetic corpus manifest", cmd_gen_data);
  gen->add_option("--out", opt.out, "manifest path");
  auto* pre = add("pretrain", "contrastive pretraining", cmd_pretrain);
  pre->add_option("--out", opt.out, "checkpoint directory");
  pre->add_option("--init", opt.init, "resume from checkpoint");
  pre->add_option("--lambda", opt.overrides["pretrain.lambda"], "shorthand for --pretrain.lambda");
  pre->add_option("--space", opt.overrides["pretrain.embedding_space"], "shorthand for --pretrain.embedding_space");
  auto* fin = add("finetune", "CTC fine-tuning", cmd_finetune);
  fin->add_option("--out", opt.out, "checkpoint directory");
  fin->add_option("--init", opt.init, "pretrained checkpoint");
  auto* ev = add("evaluate", "per-cohort WER report", cmd_evaluate);
  ev->add_option("--model", opt.model, "fine-tuned checkpoint");
  ev->add_option("--out", opt.out, "directory for report.txt and report.csv");
  auto* pr = add("probe", "linear demographic probe on pooled encoder features", cmd_probe);
  pr->add_option("--model", opt.model, "checkpoint");
  pr->add_option("--out", opt.out, "directory for probe.txt");
  auto* ex = add("export-embeddings", "write per-utterance embeddings as CSV", cmd_export);
  ex->add_option("--model", opt.model, "checkpoint");
  ex->add_option("--out", opt.out, "CSV path");
  ex->add_option("--kind", opt.kind, "pooled, projected or pca")->capture_default_str();
  auto* ab = add("ablate", "lambda x embedding-space grid", cmd_ablate);
  ab->add_option("--out", opt.out, "output directory");
  ab->add_option("--lambda", opt.lambdas, "comma-separated lambda values")->capture_default_str();
  ab->add_option("--space", opt.spaces, "comma-separated: shared, independent")->capture_default_str();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }
  // Shorthand options register empty entries; drop the unused ones.
  for (auto it = opt.overrides.begin(); it != opt.overrides.end();) {
    it = it->second.empty() ? opt.overrides.erase(it) : std::next(it);
  }

  for (const auto& [sub, handler] : commands) {
    if (!sub->parsed()) continue;
    try {
      return handler(opt, out, err);
    } catch (const ConfigError& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}

}  // namespace faircl::cli
