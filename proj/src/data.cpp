#include "faircl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "faircl/error.hpp"
#include "faircl/rng.hpp"

namespace faircl::data {

namespace fs = std::filesystem;
using features::MelSpectrogram;

std::string composite_key(const Demographics& d, const std::vector<std::string>& attributes) {
  std::string key;
  auto append = [&](const std::string& name, const std::string& value) {
    if (!key.empty()) key += '|';
    key += name + '=' + value;
  };
  if (attributes.empty()) {
    for (const auto& [name, value] : d) append(name, value);
    return key;
  }
  for (const auto& name : attributes) {
    auto it = d.find(name);
    if (it == d.end()) throw ConfigError("demographics has no attribute '" + name + "'");
    append(name, it->second);
  }
  return key;
}

std::string group_key(const Demographics& d, const std::string& selector) {
  if (selector == kComposite) return composite_key(d);
  auto it = d.find(selector);
  if (it == d.end()) throw ConfigError("demographics has no attribute '" + selector + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

std::vector<AttributeSpec> SyntheticCorpusConfig::default_schema() {
  return {
      {"age_band", {"18-30", "31-65"}, {0.5, 0.5}},
      {"gender", {"female", "male"}, {0.75, 0.25}},
  };
}

void SyntheticCorpusConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("corpus: vocab_size must be >= 2 (blank + one symbol)");
  if (min_tokens < 1 || max_tokens < min_tokens) throw ConfigError("corpus: need 1 <= min_tokens <= max_tokens");
  if (max_tokens > 1 && vocab_size < 3) throw ConfigError("corpus: multi-token utterances need vocab_size >= 3");
  if (frames_per_token < 1) throw ConfigError("corpus: frames_per_token must be >= 1");
  if (n_mels < 1) throw ConfigError("corpus: n_mels must be >= 1");
  if (group_strength < 0.0) throw ConfigError("corpus: group_strength must be >= 0");
  if (noise_std < 0.0) throw ConfigError("corpus: noise_std must be >= 0");
  if (schema.empty()) throw ConfigError("corpus: schema needs at least one attribute");
  std::set<std::string> names;
  for (const auto& a : schema) {
    if (a.name.empty() || a.categories.empty()) throw ConfigError("corpus: attribute needs a name and categories");
    if (!names.insert(a.name).second) throw ConfigError("corpus: duplicate attribute '" + a.name + "'");
    if (!a.weights.empty() && a.weights.size() != a.categories.size()) {
      throw ConfigError("corpus: attribute '" + a.name + "' has mismatched weights");
    }
  }
}

namespace {

std::vector<double> random_direction(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace

Corpus generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  cfg.validate();
  const std::size_t m = cfg.n_mels;

  Rng template_rng(derive_seed(cfg.seed, 1));
  std::vector<std::vector<double>> templates(cfg.vocab_size);
  for (std::size_t v = 1; v < cfg.vocab_size; ++v) {
    templates[v].resize(m);
    for (double& x : templates[v]) x = template_rng.normal();
  }

  // One direction per attribute value; a group's signature is their sum
  // rescaled to norm group_strength.
  Rng signature_rng(derive_seed(cfg.seed, 2));
  std::map<std::string, std::vector<double>> value_dirs;
  for (const auto& attr : cfg.schema) {
    for (const auto& cat : attr.categories) value_dirs[attr.name + '=' + cat] = random_direction(signature_rng, m);
  }

  Corpus corpus;
  corpus.reserve(cfg.n_utterances);
  for (std::size_t i = 0; i < cfg.n_utterances; ++i) {
    Rng rng(derive_seed(cfg.seed, 1000 + i));
    Utterance u;
    u.id = "utt" + std::to_string(i);
    for (const auto& attr : cfg.schema) {
      const std::vector<double> w = attr.weights.empty() ? std::vector<double>(attr.categories.size(), 1.0) : attr.weights;
      u.demographics[attr.name] = attr.categories[rng.categorical(w)];
    }
    std::vector<double> signature(m, 0.0);
    for (const auto& [name, value] : u.demographics) {
      const auto& dir = value_dirs.at(name + '=' + value);
      for (std::size_t j = 0; j < m; ++j) signature[j] += dir[j];
    }
    double norm = 0.0;
    for (double x : signature) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : signature) x = norm > 0.0 ? x * cfg.group_strength / norm : 0.0;

    const auto n_tokens = static_cast<std::size_t>(
        rng.integer(static_cast<std::int64_t>(cfg.min_tokens), static_cast<std::int64_t>(cfg.max_tokens)));
    int prev = 0;
    for (std::size_t k = 0; k < n_tokens; ++k) {
      int tok;
      do {
        tok = static_cast<int>(rng.integer(1, static_cast<std::int64_t>(cfg.vocab_size) - 1));
      } while (tok == prev);
      u.transcript.push_back(tok);
      prev = tok;
    }

    const std::size_t frames = n_tokens * cfg.frames_per_token;
    u.spec = MelSpectrogram{frames, m, std::vector<double>(frames * m)};
    for (std::size_t t = 0; t < frames; ++t) {
      const auto& tpl = templates[static_cast<std::size_t>(u.transcript[t / cfg.frames_per_token])];
      for (std::size_t j = 0; j < m; ++j) u.spec.at(t, j) = tpl[j] + signature[j] + cfg.noise_std * rng.normal();
    }
    features::normalize_utterance(u.spec);
    // Stored features are float32; keep the in-memory corpus identical.
    for (double& x : u.spec.values) x = static_cast<double>(static_cast<float>(x));
    corpus.push_back(std::move(u));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Files

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_feature_file(const fs::path& path, const MelSpectrogram& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  put_u32(out, static_cast<std::uint32_t>(spec.frames));
  put_u32(out, static_cast<std::uint32_t>(spec.bins));
  for (double v : spec.values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

MelSpectrogram read_feature_file(const fs::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < 8) throw ConfigError(path.string() + ": truncated feature header");
  MelSpectrogram spec;
  spec.frames = get_u32(bytes.data());
  spec.bins = get_u32(bytes.data() + 4);
  const std::size_t n = spec.frames * spec.bins;
  if (spec.frames == 0 || spec.bins == 0) throw ConfigError(path.string() + ": empty feature matrix");
  if (bytes.size() != 8 + 4 * n) {
    throw ConfigError(path.string() + ": expected " + std::to_string(8 + 4 * n) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  spec.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float f = std::bit_cast<float>(get_u32(bytes.data() + 8 + 4 * i));
    if (!std::isfinite(f)) throw ConfigError(path.string() + ": non-finite feature value");
    spec.values[i] = f;
  }
  return spec;
}

std::vector<double> read_waveform(const fs::path& path) {
  const auto bytes = slurp(path);
  std::vector<double> samples;
  if (path.extension() == ".wav") {
    // Minimal RIFF walk: fmt must be PCM, mono, 16-bit.
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
      throw ConfigError(path.string() + ": not a RIFF/WAVE file");
    }
    std::size_t pos = 12;
    bool fmt_ok = false;
    while (pos + 8 <= bytes.size()) {
      const std::uint32_t len = get_u32(bytes.data() + pos + 4);
      const unsigned char* body = bytes.data() + pos + 8;
      if (pos + 8 + len > bytes.size()) throw ConfigError(path.string() + ": truncated chunk");
      if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
        const unsigned fmt = body[0] | (body[1] << 8);
        const unsigned channels = body[2] | (body[3] << 8);
        const unsigned bits = body[14] | (body[15] << 8);
        if (fmt != 1 || channels != 1 || bits != 16) throw ConfigError(path.string() + ": need 16-bit PCM mono");
        fmt_ok = true;
      } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
        if (!fmt_ok) throw ConfigError(path.string() + ": data chunk before fmt chunk");
        for (std::size_t i = 0; i + 1 < len; i += 2) {
          const auto s = static_cast<std::int16_t>(body[i] | (body[i + 1] << 8));
          samples.push_back(static_cast<double>(s) / 32768.0);
        }
        return samples;
      }
      pos += 8 + len + (len & 1);
    }
    throw ConfigError(path.string() + ": no data chunk");
  }
  if (bytes.size() % 4 != 0) throw ConfigError(path.string() + ": raw float32 file size not a multiple of 4");
  samples.resize(bytes.size() / 4);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = std::bit_cast<float>(get_u32(bytes.data() + 4 * i));
  return samples;
}

Corpus load_manifest(const fs::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  Corpus corpus;
  std::vector<std::string> schema;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(where + "malformed record (" + e.what() + ")");
    }
    try {
      if (!rec.is_object()) throw ConfigError("record is not an object");
      for (const char* field : {"id", "transcript", "demographics"}) {
        if (!rec.contains(field)) throw ConfigError(std::string("missing field '") + field + "'");
      }
      Utterance u;
      u.id = rec.at("id").get<std::string>();
      std::istringstream toks(rec.at("transcript").get<std::string>());
      std::string tok;
      while (toks >> tok) {
        std::size_t used = 0;
        int id = -1;
        try {
          id = std::stoi(tok, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != tok.size() || id < 1) throw ConfigError("invalid token '" + tok + "' (ids must be integers >= 1)");
        u.transcript.push_back(id);
      }
      if (u.transcript.empty()) throw ConfigError("empty transcript");
      const auto& demo = rec.at("demographics");
      if (!demo.is_object()) throw ConfigError("demographics must be an object");
      for (const auto& [k, v] : demo.items()) u.demographics[k] = v.get<std::string>();
      if (corpus.empty() && schema.empty()) {
        for (const auto& [k, v] : u.demographics) schema.push_back(k);
      } else {
        for (const auto& name : schema) {
          if (!u.demographics.contains(name)) throw ConfigError("missing attribute '" + name + "'");
        }
        if (u.demographics.size() != schema.size()) throw ConfigError("unexpected extra demographic attribute");
      }
      if (rec.contains("features")) {
        u.spec = read_feature_file(base / rec.at("features").get<std::string>());
      } else if (rec.contains("audio")) {
        const auto wave = read_waveform(base / rec.at("audio").get<std::string>());
        u.spec = features::mel_spectrogram(wave, options.mel);
        features::normalize_utterance(u.spec);
      } else {
        throw ConfigError("record needs 'features' or 'audio'");
      }
      if (options.max_frames > 0 && u.spec.frames > options.max_frames) continue;
      corpus.push_back(std::move(u));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + "bad field type (" + e.what() + ")");
    }
  }
  return corpus;
}

void write_manifest(const Corpus& corpus, const fs::path& path, const std::string& feature_subdir) {
  const fs::path base = path.parent_path();
  fs::create_directories(base / feature_subdir);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write manifest " + path.string());
  for (const auto& u : corpus) {
    const std::string rel = feature_subdir + "/" + u.id + ".feat";
    write_feature_file(base / rel, u.spec);
    std::string transcript;
    for (int t : u.transcript) transcript += (transcript.empty() ? "" : " ") + std::to_string(t);
    nlohmann::ordered_json rec;
    rec["id"] = u.id;
    rec["features"] = rel;
    rec["transcript"] = transcript;
    rec["demographics"] = nlohmann::json(u.demographics);
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------

Split stratified_split(const Corpus& corpus, double test_fraction, const std::vector<std::string>& key_attributes,
                       std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("stratified_split: test_fraction must be in (0, 1)");
  }
  std::map<std::string, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    strata[composite_key(corpus[i].demographics, key_attributes)].push_back(i);
  }
  Split split;
  std::vector<bool> in_test(corpus.size(), false);
  std::uint64_t stream = 0;
  for (auto& [key, members] : strata) {
    ++stream;
    if (members.size() < 2) {
      split.warnings.push_back("stratum '" + key + "' has " + std::to_string(members.size()) +
                               " item(s); assigned to train");
      continue;
    }
    Rng rng(derive_seed(seed, stream));
    rng.shuffle(members);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < std::min(n_test, members.size()); ++k) in_test[members[k]] = true;
  }
  for (std::size_t i = 0; i < corpus.size(); ++i) (in_test[i] ? split.test : split.train).push_back(corpus[i]);
  return split;
}

std::uint64_t view_seed(std::uint64_t batch_seed, std::size_t i) { return derive_seed(batch_seed, i); }

ContrastiveBatch make_contrastive_batch(const std::vector<const Utterance*>& utterances,
                                        const std::string& fsc_attribute, const features::AugmentPolicy& policy,
                                        std::uint64_t seed) {
  const std::size_t n = utterances.size();
  if (n < 2) throw ConfigError("contrastive batch needs N >= 2 originals, got " + std::to_string(n));
  ContrastiveBatch batch;
  batch.samples.resize(2 * n);
  batch.pair_of.resize(2 * n);
  batch.group_key.resize(2 * n);
  batch.is_augmented.resize(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Utterance& u = *utterances[i];
    Rng rng(view_seed(seed, i));
    try {
      features::validate_policy(policy, u.spec.frames, u.spec.bins);
    } catch (const ConfigError& e) {
      throw ConfigError("utterance '" + u.id + "': " + e.what());
    }
    batch.samples[i] = u.spec;
    batch.samples[i + n] = features::spec_augment(u.spec, policy, rng);
    batch.pair_of[i] = i + n;
    batch.pair_of[i + n] = i;
    batch.group_key[i] = batch.group_key[i + n] = group_key(u.demographics, fsc_attribute);
    batch.is_augmented[i] = false;
    batch.is_augmented[i + n] = true;
  }
  return batch;
}

}  // namespace faircl::data
