#include "faircl/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "faircl/error.hpp"
#include "faircl/rng.hpp"

namespace faircl::model {

using ag::Tensor;

void EncoderConfig::validate() const {
  if (input_dim < 1) throw ConfigError("encoder: input_dim must be >= 1");
  if (model_dim < 4) throw ConfigError("encoder: model_dim must be >= 4");
  if (n_blocks < 1) throw ConfigError("encoder: n_blocks must be >= 1");
  if (ff_dim < 1) throw ConfigError("encoder: ff_dim must be >= 1");
  if (conv_kernel % 2 == 0) throw ConfigError("encoder: conv_kernel must be odd");
  if (subsample_factor < 1) throw ConfigError("encoder: subsample_factor must be >= 1");
}

void HeadConfig::validate() const {
  if (proj_hidden < 1 || proj_dim < 1) throw ConfigError("head: projection sizes must be >= 1");
  if (vocab_size == 1) throw ConfigError("head: vocab_size must be >= 2 (blank + one symbol)");
}

void ModelConfig::validate() const {
  encoder.validate();
  head.validate();
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "input_dim=" << encoder.input_dim << ";n_blocks=" << encoder.n_blocks << ";model_dim=" << encoder.model_dim
     << ";ff_dim=" << encoder.ff_dim << ";conv_kernel=" << encoder.conv_kernel
     << ";subsample_factor=" << encoder.subsample_factor << ";use_attention=" << encoder.use_attention
     << ";proj_hidden=" << head.proj_hidden << ";proj_dim=" << head.proj_dim
     << ";normalize_projections=" << head.normalize_projections << ";independent_heads=" << head.independent_heads;
  return os.str();
}

std::uint64_t ModelConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------

const Tensor& ModelParams::at(const std::string& path) const {
  auto it = tensors.find(path);
  if (it == tensors.end()) throw ConfigError("model has no parameter '" + path + "'");
  return it->second;
}

void ModelParams::zero_grad() {
  for (auto& [_, t] : tensors) t.zero_grad();
}

bool ModelParams::all_finite() const {
  for (const auto& [_, t] : tensors) {
    for (double v : t.values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& [path, t] : tensors) {
    out.tensors.emplace(path, Tensor::from(t.shape(), {t.values().begin(), t.values().end()}, true));
  }
  return out;
}

namespace {

class Initializer {
 public:
  Initializer(ModelParams& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void weight(const std::string& path, std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = rng_.uniform(-bound, bound);
    put(path, {fan_in, fan_out}, std::move(v));
  }
  void weight_shaped(const std::string& path, ag::Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(ag::numel(shape));
    for (double& x : v) x = rng_.uniform(-bound, bound);
    put(path, std::move(shape), std::move(v));
  }
  void constant(const std::string& path, std::size_t n, double value) {
    put(path, {n}, std::vector<double>(n, value));
  }
  void linear(const std::string& prefix, std::size_t in, std::size_t out) {
    weight(prefix + ".w", in, out);
    constant(prefix + ".b", out, 0.0);
  }
  void norm(const std::string& prefix, std::size_t n) {
    constant(prefix + ".g", n, 1.0);
    constant(prefix + ".b", n, 0.0);
  }

 private:
  void put(const std::string& path, ag::Shape shape, std::vector<double> v) {
    params_.tensors.insert_or_assign(path, Tensor::from(std::move(shape), std::move(v), true));
  }
  ModelParams& params_;
  Rng rng_;
};

std::string block_prefix(std::size_t i) { return "enc.block" + std::to_string(i); }

void init_projection(Initializer& init, const std::string& head, const ModelConfig& cfg) {
  init.linear(head + ".l1", cfg.encoder.model_dim, cfg.head.proj_hidden);
  init.linear(head + ".l2", cfg.head.proj_hidden, cfg.head.proj_dim);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams params;
  Initializer init(params, derive_seed(seed, 11));
  const auto& e = cfg.encoder;
  const std::size_t d = e.model_dim;
  init.linear("enc.in", e.input_dim * e.subsample_factor, d);
  for (std::size_t i = 0; i < e.n_blocks; ++i) {
    const std::string p = block_prefix(i);
    for (const char* ff : {".ff1", ".ff2"}) {
      init.norm(p + ff + ".ln", d);
      init.linear(p + ff + ".l1", d, e.ff_dim);
      init.linear(p + ff + ".l2", e.ff_dim, d);
    }
    if (e.use_attention) {
      init.norm(p + ".attn.ln", d);
      for (const char* w : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) init.weight(p + w, d, d);
    }
    init.norm(p + ".conv.ln", d);
    init.weight_shaped(p + ".conv.dw", {e.conv_kernel, d}, e.conv_kernel);
    init.linear(p + ".conv.pw", d, d);
    init.norm(p + ".out.ln", d);
  }
  init_projection(init, kProjHead, cfg);
  if (cfg.head.independent_heads) init_projection(init, kProjRevHead, cfg);
  if (cfg.head.vocab_size > 0) init_decoder(params, cfg, seed);
  return params;
}

void init_decoder(ModelParams& params, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.head.vocab_size < 2) throw ConfigError("decoder: vocab_size must be >= 2");
  Initializer init(params, derive_seed(seed, 12));
  const std::size_t d = cfg.encoder.model_dim;
  init.weight("dec.lstm.wx", d, 4 * d);
  init.weight("dec.lstm.wh", d, 4 * d);
  init.constant("dec.lstm.b", 4 * d, 0.0);
  init.linear("dec.out", d, cfg.head.vocab_size);
}

bool is_encoder_param(const std::string& path) { return path.starts_with("enc."); }
bool is_decoder_param(const std::string& path) { return path.starts_with("dec."); }

// ---------------------------------------------------------------------------

PaddedBatch pad_batch(const std::vector<const features::MelSpectrogram*>& specs) {
  if (specs.empty()) throw ShapeError("pad_batch: empty batch");
  const std::size_t bins = specs.front()->bins;
  std::size_t t_max = 0;
  for (const auto* s : specs) {
    if (s->bins != bins) {
      throw ShapeError("pad_batch: mixed mel bin counts " + std::to_string(bins) + " and " + std::to_string(s->bins));
    }
    if (s->frames == 0) throw ShapeError("pad_batch: spectrogram with zero frames");
    t_max = std::max(t_max, s->frames);
  }
  PaddedBatch out;
  std::vector<double> v(specs.size() * t_max * bins, 0.0);
  for (std::size_t b = 0; b < specs.size(); ++b) {
    std::copy(specs[b]->values.begin(), specs[b]->values.end(), v.begin() + static_cast<std::ptrdiff_t>(b * t_max * bins));
    out.lengths.push_back(specs[b]->frames);
  }
  out.x = Tensor::from({specs.size(), t_max, bins}, std::move(v));
  return out;
}

namespace {

Tensor affine_norm(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return ag::add(ag::mul(ag::layer_norm(x), p.at(prefix + ".g")), p.at(prefix + ".b"));
}

Tensor linear(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return ag::add(ag::matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

Tensor feedforward(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  Tensor h = affine_norm(x, p, prefix + ".ln");
  h = ag::relu(linear(h, p, prefix + ".l1"));
  return linear(h, p, prefix + ".l2");
}

Tensor attention(const Tensor& x, const Tensor& key_bias, const ModelParams& p, const std::string& prefix,
                 std::size_t d) {
  Tensor h = affine_norm(x, p, prefix + ".ln");
  Tensor q = ag::matmul(h, p.at(prefix + ".q"));
  Tensor k = ag::matmul(h, p.at(prefix + ".k"));
  Tensor v = ag::matmul(h, p.at(prefix + ".v"));
  Tensor scores = ag::scale(ag::bmm(q, ag::transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  scores = ag::add(scores, key_bias);
  Tensor weights = ag::exp(ag::log_softmax(scores));
  return ag::matmul(ag::bmm(weights, v), p.at(prefix + ".o"));
}

Tensor convolution(const Tensor& x, const Tensor& mask, const ModelParams& p, const std::string& prefix) {
  // Padded frames enter the convolution as zeros, like sequence edges.
  Tensor h = ag::mul(affine_norm(x, p, prefix + ".ln"), mask);
  h = ag::relu(ag::depthwise_conv_time(h, p.at(prefix + ".dw")));
  return linear(h, p, prefix + ".pw");
}

}  // namespace

Encoded encode(const PaddedBatch& batch, const ModelParams& params, const EncoderConfig& cfg) {
  const Tensor& x = batch.x;
  if (x.rank() != 3 || x.dim(2) != cfg.input_dim || batch.lengths.size() != x.dim(0)) {
    throw ShapeError("encode: input " + ag::shape_str(x.shape()) + " does not match input_dim " +
                     std::to_string(cfg.input_dim) + " with " + std::to_string(batch.lengths.size()) + " lengths");
  }
  const std::size_t b = x.dim(0), t = x.dim(1), m = x.dim(2), s = cfg.subsample_factor, d = cfg.model_dim;
  const std::size_t t_out = cfg.output_frames(t);

  Tensor stacked = x;
  if (t_out * s != t) stacked = ag::concat({x, Tensor::zeros({b, t_out * s - t, m})}, 1);
  stacked = ag::reshape(stacked, {b, t_out, s * m});

  Encoded enc;
  std::vector<double> mask(b * t_out, 0.0), key_bias(b * t_out, ag::kLogZero);
  for (std::size_t i = 0; i < b; ++i) {
    if (batch.lengths[i] == 0 || batch.lengths[i] > t) throw ShapeError("encode: invalid length in batch");
    const std::size_t valid = cfg.output_frames(batch.lengths[i]);
    enc.lengths.push_back(valid);
    for (std::size_t j = 0; j < valid; ++j) {
      mask[i * t_out + j] = 1.0;
      key_bias[i * t_out + j] = 0.0;
    }
  }
  enc.mask = Tensor::from({b, t_out, 1}, std::move(mask));
  const Tensor bias = Tensor::from({b, 1, t_out}, std::move(key_bias));

  Tensor h = ag::mul(linear(stacked, params, "enc.in"), enc.mask);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = block_prefix(i);
    h = ag::mul(ag::add(h, ag::scale(feedforward(h, params, p + ".ff1"), 0.5)), enc.mask);
    if (cfg.use_attention) h = ag::mul(ag::add(h, attention(h, bias, params, p + ".attn", d)), enc.mask);
    h = ag::mul(ag::add(h, convolution(h, enc.mask, params, p + ".conv")), enc.mask);
    h = ag::add(h, ag::scale(feedforward(h, params, p + ".ff2"), 0.5));
    h = ag::mul(affine_norm(h, params, p + ".out.ln"), enc.mask);
  }
  enc.h = h;
  return enc;
}

Tensor mean_pool(const Encoded& enc) {
  const std::size_t b = enc.h.dim(0);
  std::vector<double> inv(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (enc.lengths[i] == 0) throw ShapeError("mean_pool: sample " + std::to_string(i) + " has no valid frames");
    inv[i] = 1.0 / static_cast<double>(enc.lengths[i]);
  }
  Tensor summed = ag::sum(ag::mul(enc.h, enc.mask), 1);
  return ag::mul(summed, Tensor::from({b, 1}, std::move(inv)));
}

Tensor project(const Tensor& pooled, const ModelParams& params, const HeadConfig& cfg, const std::string& head) {
  Tensor z = ag::relu(linear(pooled, params, head + ".l1"));
  z = linear(z, params, head + ".l2");
  return cfg.normalize_projections ? ag::l2_normalize(z) : z;
}

Tensor decode_logits(const Encoded& enc, const ModelParams& params, const HeadConfig& cfg) {
  const Tensor& wx = params.at("dec.lstm.wx");
  const std::size_t b = enc.h.dim(0), steps = enc.h.dim(1), hidden = wx.dim(1) / 4;
  if (params.at("dec.out.w").dim(1) != cfg.vocab_size) {
    throw ConfigError("decoder: head has " + std::to_string(params.at("dec.out.w").dim(1)) +
                      " outputs but vocab_size is " + std::to_string(cfg.vocab_size));
  }
  // Input projections for all frames at once; the recurrence adds h·W_h.
  Tensor xw = ag::add(ag::matmul(enc.h, wx), params.at("dec.lstm.b"));
  Tensor h = Tensor::zeros({b, hidden});
  Tensor c = Tensor::zeros({b, hidden});
  std::vector<Tensor> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor gates = ag::add(ag::reshape(ag::slice(xw, 1, t, 1), {b, 4 * hidden}), ag::matmul(h, params.at("dec.lstm.wh")));
    Tensor in_gate = ag::sigmoid(ag::slice(gates, 1, 0, hidden));
    Tensor forget_gate = ag::sigmoid(ag::slice(gates, 1, hidden, hidden));
    Tensor cell_in = ag::tanh(ag::slice(gates, 1, 2 * hidden, hidden));
    Tensor out_gate = ag::sigmoid(ag::slice(gates, 1, 3 * hidden, hidden));
    c = ag::add(ag::mul(forget_gate, c), ag::mul(in_gate, cell_in));
    h = ag::mul(out_gate, ag::tanh(c));
    outputs.push_back(ag::reshape(h, {b, 1, hidden}));
  }
  Tensor seq = ag::concat(outputs, 1);
  return ag::log_softmax(linear(seq, params, "dec.out"));
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
void put_le(std::ostream& os, T v) {
  auto u = std::bit_cast<std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <class T>
T get_le(std::istream& is, const std::string& what) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == EOF) throw ConfigError(what + ": truncated checkpoint");
    u |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return std::bit_cast<T>(u);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write checkpoint " + path.string());
  out.write("FCLK", 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, cfg.digest());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.values()) put_le<double>(out, v);
  }
  if (!out) throw RuntimeFailure("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig* cfg, std::uint64_t* digest_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  const std::string what = path.string();
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "FCLK") throw ConfigError(what + ": not a checkpoint file");
  const auto version = get_le<std::uint32_t>(in, what);
  if (version != kCheckpointVersion) throw ConfigError(what + ": unsupported checkpoint version " + std::to_string(version));
  const auto digest = get_le<std::uint64_t>(in, what);
  if (digest_out) *digest_out = digest;
  if (cfg && digest != cfg->digest()) {
    throw ConfigError(what + ": checkpoint was written for a different model configuration");
  }
  const auto count = get_le<std::uint32_t>(in, what);
  ModelParams params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(in, what);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get_le<std::uint32_t>(in, what);
    ag::Shape shape(rank);
    for (auto& d : shape) d = get_le<std::uint64_t>(in, what);
    std::vector<double> values(ag::numel(shape));
    for (double& v : values) v = get_le<double>(in, what);
    params.tensors.emplace(std::move(name), Tensor::from(std::move(shape), std::move(values), true));
  }
  return params;
}

}  // namespace faircl::model
