#include "faircl/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "faircl/error.hpp"
#include "faircl/rng.hpp"

namespace faircl::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& items, const char* sep) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : sep) + s;
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto t = trim(v);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto t = trim(v);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

using Cfg = ExperimentConfig;

// Field accessors: one KeyInfo per scalar field.
template <class Ref>
KeyInfo size_key(std::string name, std::string doc, Ref ref) {
  return {name, std::move(doc),
          [ref, name](Cfg& c, const std::string& v) { ref(c) = static_cast<std::size_t>(parse_uint(name, v)); },
          [ref](const Cfg& c) { return fmt(static_cast<std::uint64_t>(ref(const_cast<Cfg&>(c)))); }};
}

template <class Ref>
KeyInfo double_key(std::string name, std::string doc, Ref ref) {
  return {name, std::move(doc), [ref, name](Cfg& c, const std::string& v) { ref(c) = parse_double(name, v); },
          [ref](const Cfg& c) { return fmt(ref(const_cast<Cfg&>(c))); }};
}

template <class Ref>
KeyInfo bool_key(std::string name, std::string doc, Ref ref) {
  return {name, std::move(doc), [ref, name](Cfg& c, const std::string& v) { ref(c) = parse_bool(name, v); },
          [ref](const Cfg& c) { return fmt(ref(const_cast<Cfg&>(c))); }};
}

void add_stage_keys(std::vector<KeyInfo>& k, const std::string& p, train::TrainConfig Cfg::*stage) {
  auto s = [stage](Cfg& c) -> train::TrainConfig& { return c.*stage; };
  k.push_back(size_key(p + ".epochs", "training epochs", [s](Cfg& c) -> std::size_t& { return s(c).epochs; }));
  k.push_back(size_key(p + ".batch_size", "utterances per batch (N)",
                       [s](Cfg& c) -> std::size_t& { return s(c).batch_size; }));
  k.push_back(double_key(p + ".learning_rate", "AdamW peak learning rate",
                         [s](Cfg& c) -> double& { return s(c).optim.lr; }));
  k.push_back(double_key(p + ".lr_min", "cosine schedule floor", [s](Cfg& c) -> double& { return s(c).lr_min; }));
  k.push_back(double_key(p + ".beta1", "AdamW beta1", [s](Cfg& c) -> double& { return s(c).optim.beta1; }));
  k.push_back(double_key(p + ".beta2", "AdamW beta2", [s](Cfg& c) -> double& { return s(c).optim.beta2; }));
  k.push_back(double_key(p + ".weight_decay", "decoupled weight decay",
                         [s](Cfg& c) -> double& { return s(c).optim.weight_decay; }));
  k.push_back(double_key(p + ".clip_norm", "global gradient-norm clip (0 disables)",
                         [s](Cfg& c) -> double& { return s(c).clip_norm; }));
}

std::vector<KeyInfo> build_keys() {
  std::vector<KeyInfo> k;
  k.push_back({"seed", "master seed for corpus, splits, initialization, shuffling and augmentation",
               [](Cfg& c, const std::string& v) { c.seed = parse_uint("seed", v); },
               [](const Cfg& c) { return fmt(c.seed); }});

  // corpus
  k.push_back(size_key("corpus.n_utterances", "synthetic corpus size",
                       [](Cfg& c) -> std::size_t& { return c.corpus.n_utterances; }));
  k.push_back(size_key("corpus.vocab_size", "token vocabulary including blank 0",
                       [](Cfg& c) -> std::size_t& { return c.corpus.vocab_size; }));
  k.push_back(size_key("corpus.min_tokens", "fewest tokens per utterance",
                       [](Cfg& c) -> std::size_t& { return c.corpus.min_tokens; }));
  k.push_back(size_key("corpus.max_tokens", "most tokens per utterance",
                       [](Cfg& c) -> std::size_t& { return c.corpus.max_tokens; }));
  k.push_back(size_key("corpus.frames_per_token", "frames rendered per token",
                       [](Cfg& c) -> std::size_t& { return c.corpus.frames_per_token; }));
  k.push_back(size_key("corpus.n_mels", "mel bins of synthetic spectrograms",
                       [](Cfg& c) -> std::size_t& { return c.corpus.n_mels; }));
  k.push_back(double_key("corpus.group_strength", "L2 norm of the additive demographic signature",
                         [](Cfg& c) -> double& { return c.corpus.group_strength; }));
  k.push_back(double_key("corpus.noise_std", "i.i.d. noise standard deviation",
                         [](Cfg& c) -> double& { return c.corpus.noise_std; }));
  k.push_back({"corpus.schema", "attributes: name=cat[:weight],...; name=...",
               [](Cfg& c, const std::string& v) { c.corpus.schema = parse_schema(v); },
               [](const Cfg& c) { return format_schema(c.corpus.schema); }});

  // audio features
  k.push_back(size_key("features.n_mels", "mel filters for audio input",
                       [](Cfg& c) -> std::size_t& { return c.mel.n_mels; }));
  k.push_back(size_key("features.frame_len", "analysis window in samples",
                       [](Cfg& c) -> std::size_t& { return c.mel.frame_len; }));
  k.push_back(size_key("features.hop", "frame hop in samples", [](Cfg& c) -> std::size_t& { return c.mel.hop; }));
  k.push_back(size_key("data.max_frames", "drop utterances longer than this many frames (0 = keep all)",
                       [](Cfg& c) -> std::size_t& { return c.max_frames; }));

  // augmentation (pretraining only)
  auto aug = [](Cfg& c) -> features::AugmentPolicy& { return c.pretrain.augment; };
  k.push_back(size_key("augment.n_time_masks", "time masks per view",
                       [aug](Cfg& c) -> std::size_t& { return aug(c).n_time_masks; }));
  k.push_back(size_key("augment.max_time_mask_width", "widest time mask (frames)",
                       [aug](Cfg& c) -> std::size_t& { return aug(c).max_time_mask_width; }));
  k.push_back(size_key("augment.n_freq_masks", "frequency masks per view",
                       [aug](Cfg& c) -> std::size_t& { return aug(c).n_freq_masks; }));
  k.push_back(size_key("augment.max_freq_mask_width", "widest frequency mask (bins)",
                       [aug](Cfg& c) -> std::size_t& { return aug(c).max_freq_mask_width; }));
  k.push_back(double_key("augment.mask_value", "value written into masked cells",
                         [aug](Cfg& c) -> double& { return aug(c).mask_value; }));

  // model
  k.push_back(size_key("model.input_dim", "mel bins at the encoder input (0 = from corpus)",
                       [](Cfg& c) -> std::size_t& { return c.model.encoder.input_dim; }));
  k.push_back(size_key("model.n_blocks", "encoder blocks", [](Cfg& c) -> std::size_t& { return c.model.encoder.n_blocks; }));
  k.push_back(size_key("model.model_dim", "encoder width D",
                       [](Cfg& c) -> std::size_t& { return c.model.encoder.model_dim; }));
  k.push_back(size_key("model.ff_dim", "feedforward inner width",
                       [](Cfg& c) -> std::size_t& { return c.model.encoder.ff_dim; }));
  k.push_back(size_key("model.conv_kernel", "depthwise convolution width (odd)",
                       [](Cfg& c) -> std::size_t& { return c.model.encoder.conv_kernel; }));
  k.push_back(size_key("model.subsample_factor", "time reduction at the encoder input",
                       [](Cfg& c) -> std::size_t& { return c.model.encoder.subsample_factor; }));
  k.push_back(bool_key("model.use_attention", "single-head self-attention in each block",
                       [](Cfg& c) -> bool& { return c.model.encoder.use_attention; }));
  k.push_back(size_key("model.proj_hidden", "projection head hidden width",
                       [](Cfg& c) -> std::size_t& { return c.model.head.proj_hidden; }));
  k.push_back(size_key("model.proj_dim", "embedding dimension D'",
                       [](Cfg& c) -> std::size_t& { return c.model.head.proj_dim; }));
  k.push_back(bool_key("model.normalize_projections", "L2-normalize embeddings before inner products",
                       [](Cfg& c) -> bool& { return c.model.head.normalize_projections; }));
  k.push_back(size_key("model.vocab_size", "decoder vocabulary incl. blank (0 = from corpus)",
                       [](Cfg& c) -> std::size_t& { return c.model.head.vocab_size; }));

  // pretraining
  add_stage_keys(k, "pretrain", &Cfg::pretrain);
  k.push_back(double_key("pretrain.temperature", "contrastive temperature tau",
                         [](Cfg& c) -> double& { return c.pretrain.temperature; }));
  k.push_back(double_key("pretrain.lambda", "weight of the fair supervised contrastive term",
                         [](Cfg& c) -> double& { return c.pretrain.loss.lambda; }));
  k.push_back(double_key("pretrain.grl_alpha", "gradient reversal scale",
                         [](Cfg& c) -> double& { return c.pretrain.loss.grl_alpha; }));
  k.push_back({"pretrain.embedding_space", "shared or independent projection heads",
               [](Cfg& c, const std::string& v) {
                 const auto t = trim(v);
                 if (t != "shared" && t != "independent") {
                   throw ConfigError("pretrain.embedding_space: expected shared or independent, got '" + v + "'");
                 }
                 c.pretrain.loss.shared_embedding_space = t == "shared";
               },
               [](const Cfg& c) { return std::string(c.pretrain.loss.shared_embedding_space ? "shared" : "independent"); }});
  k.push_back({"pretrain.fsc_attribute", "group label for the fair loss: an attribute name or composite",
               [](Cfg& c, const std::string& v) { c.pretrain.fsc_attribute = trim(v); },
               [](const Cfg& c) { return c.pretrain.fsc_attribute; }});
  k.push_back({"pretrain.objective", "fairasr (InfoNCE + lambda * FSC) or infonce (baseline)",
               [](Cfg& c, const std::string& v) {
                 const auto t = trim(v);
                 if (t == "fairasr") c.pretrain.objective = train::Objective::FairAsr;
                 else if (t == "infonce") c.pretrain.objective = train::Objective::InfoNceOnly;
                 else throw ConfigError("pretrain.objective: expected fairasr or infonce, got '" + v + "'");
               },
               [](const Cfg& c) {
                 return std::string(c.pretrain.objective == train::Objective::FairAsr ? "fairasr" : "infonce");
               }});

  // fine-tuning
  add_stage_keys(k, "finetune", &Cfg::finetune);
  k.push_back(bool_key("finetune.freeze_encoder", "keep encoder weights fixed during CTC training",
                       [](Cfg& c) -> bool& { return c.finetune.freeze_encoder; }));

  // evaluation
  k.push_back({"eval.attributes", "comma-separated attributes to report (empty = all)",
               [](Cfg& c, const std::string& v) { c.eval_attributes = split(v, ','); },
               [](const Cfg& c) { return join(c.eval_attributes, ","); }});
  k.push_back({"eval.split_attributes", "comma-separated attributes that stratify the test split (empty = all)",
               [](Cfg& c, const std::string& v) { c.split_attributes = split(v, ','); },
               [](const Cfg& c) { return join(c.split_attributes, ","); }});
  k.push_back(double_key("eval.test_fraction", "held-out share per stratum",
                         [](Cfg& c) -> double& { return c.test_fraction; }));
  k.push_back({"eval.probe_attribute", "attribute predicted by the linear probe (empty = first eval attribute)",
               [](Cfg& c, const std::string& v) { c.probe_attribute = trim(v); },
               [](const Cfg& c) { return c.probe_attribute; }});
  return k;
}

}  // namespace

model::ModelConfig ExperimentConfig::default_model() {
  model::ModelConfig m;
  m.encoder.input_dim = 0;
  m.head.vocab_size = 0;
  return m;
}

train::TrainConfig ExperimentConfig::default_stage(train::Stage stage) {
  train::TrainConfig t;
  t.stage = stage;
  t.epochs = stage == train::Stage::Pretrain ? 40 : 60;
  return t;
}

void ExperimentConfig::apply_seed() {
  corpus.seed = seed;
  pretrain.seed = derive_seed(seed, 21);
  finetune.seed = derive_seed(seed, 22);
}

void ExperimentConfig::validate() const {
  corpus.validate();
  pretrain.validate();
  finetune.validate();
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("eval.test_fraction must be in (0, 1)");
}

const std::vector<KeyInfo>& keys() {
  static const std::vector<KeyInfo> registry = build_keys();
  return registry;
}

const KeyInfo* find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const KeyInfo* info = find_key(key);
  if (!info) throw ConfigError("unknown config key '" + key + "'");
  info->set(cfg, value);
}

void load_file(ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    try {
      set_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

std::string dump(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::vector<data::AttributeSpec> parse_schema(const std::string& text) {
  std::vector<data::AttributeSpec> schema;
  for (const auto& attr : split(text, ';')) {
    const auto eq = attr.find('=');
    if (eq == std::string::npos) throw ConfigError("corpus.schema: expected name=categories in '" + attr + "'");
    data::AttributeSpec spec;
    spec.name = trim(attr.substr(0, eq));
    bool any_weight = false;
    for (const auto& cat : split(attr.substr(eq + 1), ',')) {
      const auto colon = cat.rfind(':');
      if (colon == std::string::npos) {
        spec.categories.push_back(cat);
        spec.weights.push_back(1.0);
      } else {
        spec.categories.push_back(trim(cat.substr(0, colon)));
        spec.weights.push_back(parse_double("corpus.schema", cat.substr(colon + 1)));
        any_weight = true;
      }
    }
    if (!any_weight) spec.weights.clear();
    if (spec.name.empty() || spec.categories.empty()) throw ConfigError("corpus.schema: empty attribute in '" + attr + "'");
    schema.push_back(std::move(spec));
  }
  if (schema.empty()) throw ConfigError("corpus.schema: no attributes");
  return schema;
}

std::string format_schema(const std::vector<data::AttributeSpec>& schema) {
  std::vector<std::string> attrs;
  for (const auto& a : schema) {
    std::vector<std::string> cats;
    for (std::size_t i = 0; i < a.categories.size(); ++i) {
      cats.push_back(a.weights.empty() ? a.categories[i] : a.categories[i] + ":" + fmt(a.weights[i]));
    }
    attrs.push_back(a.name + "=" + join(cats, ","));
  }
  return join(attrs, "; ");
}

}  // namespace faircl::config
