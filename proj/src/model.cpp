// spikeseg/model.cpp

#include "spikeseg/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "spikeseg/errors.hpp"

namespace spikeseg::model {

using ad::Tensor;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  const auto* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
  return out;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::Spike ? "spike" : "relu"; }

Activation parse_activation(const std::string& name) {
  if (name == "spike") return Activation::Spike;
  if (name == "relu") return Activation::Relu;
  throw ConfigError("activation must be 'spike' or 'relu', got '" + name + "'");
}

void ModelConfig::validate() const {
  if (d_feat < 1) throw ConfigError("d_feat must be >= 1");
  if (n_tokens < 2) throw ConfigError("n_tokens must be >= 2");
  if (n_enc_blocks < 1) throw ConfigError("n_enc_blocks must be >= 1");
  if (n_dec_blocks < 1) throw ConfigError("n_dec_blocks must be >= 1");
  if (heads < 1 || d_model % heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (d_ff < 1 || frontend_ch1 < 1 || frontend_ch2 < 1 || cif_channels < 1) {
    throw ConfigError("layer widths must be >= 1");
  }
  if (cif_kernel < 1 || cif_kernel % 2 == 0) throw ConfigError("cif_kernel must be odd");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(token_dropout >= 0.0 && token_dropout < 1.0)) throw ConfigError("token_dropout must lie in [0, 1)");
  if (!(spike_threshold > 0.0)) throw ConfigError("spike_threshold must be > 0");
  if (!(surrogate_width > 0.0)) throw ConfigError("surrogate_width must be > 0");
  if (max_decode_len < 1) throw ConfigError("max_decode_len must be >= 1");
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "d_feat") d_feat = parse_size(key, value);
  else if (key == "n_tokens") n_tokens = parse_size(key, value);
  else if (key == "n_enc_blocks") n_enc_blocks = parse_size(key, value);
  else if (key == "n_dec_blocks") n_dec_blocks = parse_size(key, value);
  else if (key == "d_model") d_model = parse_size(key, value);
  else if (key == "d_ff") d_ff = parse_size(key, value);
  else if (key == "heads") heads = parse_size(key, value);
  else if (key == "activation") activation = parse_activation(value);
  else if (key == "dropout") dropout = parse_real(key, value);
  else if (key == "token_dropout") token_dropout = parse_real(key, value);
  else if (key == "frontend_ch1") frontend_ch1 = parse_size(key, value);
  else if (key == "frontend_ch2") frontend_ch2 = parse_size(key, value);
  else if (key == "cif_channels") cif_channels = parse_size(key, value);
  else if (key == "cif_kernel") cif_kernel = parse_size(key, value);
  else if (key == "spike_threshold") spike_threshold = parse_real(key, value);
  else if (key == "surrogate_width") surrogate_width = parse_real(key, value);
  else if (key == "max_decode_len") max_decode_len = parse_size(key, value);
  else throw ConfigError("unknown model config key '" + key + "'");
}

void ModelConfig::apply_kv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string ModelConfig::to_kv() const {
  std::ostringstream out;
  out << "d_feat = " << d_feat << '\n'
      << "n_tokens = " << n_tokens << '\n'
      << "n_enc_blocks = " << n_enc_blocks << '\n'
      << "n_dec_blocks = " << n_dec_blocks << '\n'
      << "d_model = " << d_model << '\n'
      << "d_ff = " << d_ff << '\n'
      << "heads = " << heads << '\n'
      << "activation = " << to_string(activation) << '\n'
      << "dropout = " << format_double(dropout) << '\n'
      << "token_dropout = " << format_double(token_dropout) << '\n'
      << "frontend_ch1 = " << frontend_ch1 << '\n'
      << "frontend_ch2 = " << frontend_ch2 << '\n'
      << "cif_channels = " << cif_channels << '\n'
      << "cif_kernel = " << cif_kernel << '\n'
      << "spike_threshold = " << format_double(spike_threshold) << '\n'
      << "surrogate_width = " << format_double(surrogate_width) << '\n'
      << "max_decode_len = " << max_decode_len << '\n';
  return out.str();
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_feat", d_feat},
          {"n_tokens", n_tokens},
          {"n_enc_blocks", n_enc_blocks},
          {"n_dec_blocks", n_dec_blocks},
          {"d_model", d_model},
          {"d_ff", d_ff},
          {"heads", heads},
          {"activation", to_string(activation)},
          {"dropout", dropout},
          {"token_dropout", token_dropout},
          {"frontend_ch1", frontend_ch1},
          {"frontend_ch2", frontend_ch2},
          {"cif_channels", cif_channels},
          {"cif_kernel", cif_kernel},
          {"spike_threshold", spike_threshold},
          {"surrogate_width", surrogate_width},
          {"max_decode_len", max_decode_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_feat = j.at("d_feat").get<std::size_t>();
    c.n_tokens = j.at("n_tokens").get<std::size_t>();
    c.n_enc_blocks = j.at("n_enc_blocks").get<std::size_t>();
    c.n_dec_blocks = j.at("n_dec_blocks").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.dropout = j.at("dropout").get<double>();
    c.token_dropout = j.at("token_dropout").get<double>();
    c.frontend_ch1 = j.at("frontend_ch1").get<std::size_t>();
    c.frontend_ch2 = j.at("frontend_ch2").get<std::size_t>();
    c.cif_channels = j.at("cif_channels").get<std::size_t>();
    c.cif_kernel = j.at("cif_kernel").get<std::size_t>();
    c.spike_threshold = j.at("spike_threshold").get<double>();
    c.surrogate_width = j.at("surrogate_width").get<double>();
    c.max_decode_len = j.at("max_decode_len").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Layers

Tensor Linear::operator()(const Tensor& x) const { return ad::add_row(ad::matmul(x, w), b); }

Tensor Norm::operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }

std::vector<double> sinusoidal_positions(std::size_t length, std::size_t d_model) {
  std::vector<double> pe(length * d_model);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
      const double angle = static_cast<double>(t) * freq;
      pe[t * d_model + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

std::vector<double> causal_mask(std::size_t length) {
  std::vector<double> m(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) m[i * length + j] = -1e30;
  }
  return m;
}

Tensor multi_head_attention(const Attention& att, const Tensor& q_in, const Tensor& kv_in,
                            std::span<const double> mask) {
  const std::size_t d = att.q.w.cols();
  if (q_in.dim() != 2 || kv_in.dim() != 2 || q_in.cols() != att.q.w.rows() || kv_in.cols() != att.k.w.rows()) {
    throw DimensionError("attention: inputs " + ad::shape_str(q_in.shape()) + " and " + ad::shape_str(kv_in.shape()) +
                         " do not match projection " + ad::shape_str(att.q.w.shape()));
  }
  if (att.heads < 1 || d % att.heads != 0) throw ConfigError("attention: width not divisible by heads");
  if (!mask.empty() && mask.size() != q_in.rows() * kv_in.rows()) {
    throw DimensionError("attention: mask size does not match [Tq x Tk]");
  }
  const std::size_t dh = d / att.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = att.q(q_in);
  Tensor k = att.k(kv_in);
  Tensor v = att.v(kv_in);
  std::vector<Tensor> heads;
  heads.reserve(att.heads);
  for (std::size_t h = 0; h < att.heads; ++h) {
    Tensor qh = att.heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = att.heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = att.heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = ad::matmul(qh, ad::transpose(kh)) * inv_sqrt;
    heads.push_back(ad::matmul(ad::softmax_rows(scores, mask), vh));
  }
  Tensor cat = att.heads == 1 ? heads[0] : ad::concat_cols(heads);
  return att.o(cat);
}

// ---------------------------------------------------------------------------
// Model

namespace {

class Builder {
 public:
  Builder(ParameterStore& params, std::mt19937_64& rng) : params_(params), rng_(rng) {}

  Tensor weight(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    return params_.add(name, {fan_in, fan_out}, ad::xavier_uniform(fan_in, fan_out, fan_in * fan_out, rng_));
  }
  Tensor bias(const std::string& name, std::size_t n) { return params_.add(name, {n}, std::vector<double>(n, 0.0)); }

  Linear linear(const std::string& name, std::size_t in, std::size_t out) {
    return {weight(name + ".w", in, out), bias(name + ".b", out)};
  }
  Norm norm(const std::string& name, std::size_t d) {
    return {params_.add(name + ".gamma", {d}, std::vector<double>(d, 1.0)), bias(name + ".beta", d)};
  }
  Attention attention(const std::string& name, std::size_t d, std::size_t heads) {
    return {linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d), linear(name + ".o", d, d),
            heads};
  }

  ParameterStore& params() { return params_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  ParameterStore& params_;
  std::mt19937_64& rng_;
};

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  Builder b(params_, rng);
  const std::size_t d = cfg_.d_model;
  const std::size_t V = cfg_.vocab_size();

  conv1_w_ = b.weight("front.conv1.w", 5 * cfg_.d_feat, 2 * cfg_.frontend_ch1);
  conv1_b_ = b.bias("front.conv1.b", 2 * cfg_.frontend_ch1);
  conv2_w_ = b.weight("front.conv2.w", 5 * cfg_.frontend_ch1, 2 * cfg_.frontend_ch2);
  conv2_b_ = b.bias("front.conv2.b", 2 * cfg_.frontend_ch2);
  front_proj_ = b.linear("front.proj", cfg_.frontend_ch2, d);

  for (std::size_t i = 0; i < cfg_.n_enc_blocks; ++i) {
    const std::string p = "enc." + std::to_string(i);
    EncoderBlock blk;
    blk.ln_att = b.norm(p + ".ln_att", d);
    blk.att = b.attention(p + ".att", d, cfg_.heads);
    blk.ln_ff = b.norm(p + ".ln_ff", d);
    blk.ff1 = b.linear(p + ".ff1", d, cfg_.d_ff);
    blk.ff2 = b.linear(p + ".ff2", cfg_.d_ff, d);
    enc_.push_back(std::move(blk));
  }
  enc_norm_ = b.norm("enc.norm", d);

  cif_ = boundary::CurrentHead::create(params_, "cif", d, cfg_.cif_channels, cfg_.cif_kernel, rng);
  ctc_head_ = b.linear("ctc", d, V);

  mem_norm_ = b.norm("dec.mem_norm", d);
  embed_ = params_.add("dec.embed", {V, d}, ad::xavier_uniform(V, d, V * d, rng));
  for (std::size_t i = 0; i < cfg_.n_dec_blocks; ++i) {
    const std::string p = "dec." + std::to_string(i);
    DecoderBlock blk;
    blk.ln_self = b.norm(p + ".ln_self", d);
    blk.self_att = b.attention(p + ".self", d, cfg_.heads);
    blk.ln_cross = b.norm(p + ".ln_cross", d);
    blk.cross_att = b.attention(p + ".cross", d, cfg_.heads);
    blk.ln_ff = b.norm(p + ".ln_ff", d);
    blk.ff1 = b.linear(p + ".ff1", d, cfg_.d_ff);
    blk.ff2 = b.linear(p + ".ff2", cfg_.d_ff, d);
    dec_.push_back(std::move(blk));
  }
  dec_norm_ = b.norm("dec.norm", d);
  out_proj_ = b.linear("dec.out", d, V);
}

Tensor Model::frontend(const Tensor& features) const {
  if (features.dim() != 2 || features.cols() != cfg_.d_feat) {
    throw DimensionError("frontend expects [T x " + std::to_string(cfg_.d_feat) + "] features, got " +
                         ad::shape_str(features.shape()));
  }
  if (features.rows() < 4) {
    throw TooShortError("utterance of " + std::to_string(features.rows()) + " frames is shorter than 4");
  }
  Tensor x = ad::glu(ad::conv1d(features, conv1_w_, conv1_b_, 5, 2, 2));
  x = ad::glu(ad::conv1d(x, conv2_w_, conv2_b_, 5, 2, 2));
  return front_proj_(x);
}

Tensor Model::encoder_block(const EncoderBlock& blk, const Tensor& x, const Context& ctx) const {
  auto drop = [&](const Tensor& t) {
    if (!ctx.training || cfg_.dropout <= 0.0) return t;
    return ad::dropout(t, cfg_.dropout, true, *ctx.rng);
  };
  Tensor y = blk.ln_att(x);
  Tensor h = x + drop(multi_head_attention(blk.att, y, y));
  Tensor pre = blk.ff1(blk.ln_ff(h));
  Tensor act = cfg_.activation == Activation::Spike ? ad::spike_fn(pre, cfg_.spike_threshold, cfg_.surrogate_width)
                                                    : ad::relu(pre);
  return h + drop(blk.ff2(act));
}

Tensor Model::encode(const Tensor& features, const Context& ctx) const {
  Tensor x = frontend(features);
  x = x + Tensor::constant(x.shape(), sinusoidal_positions(x.rows(), cfg_.d_model));
  for (const auto& blk : enc_) x = encoder_block(blk, x, ctx);
  return enc_norm_(x);
}

Tensor Model::currents(const Tensor& h) const { return boundary::compute_currents(h, cif_); }

Tensor Model::ctc_log_probs(const Tensor& h) const { return ad::log_softmax_rows(ctc_head_(h)); }

Tensor Model::decode(const Tensor& memory, std::span<const int> inputs, const Context& ctx) const {
  if (memory.dim() != 2 || memory.rows() == 0) throw DecodeContextError("decoder needs at least one fired state");
  if (memory.cols() != cfg_.d_model) {
    throw DimensionError("decoder memory width " + std::to_string(memory.cols()) + " != d_model");
  }
  if (inputs.empty()) throw ContractError("decoder input must start with bos");
  auto drop = [&](const Tensor& t) {
    if (!ctx.training || cfg_.dropout <= 0.0) return t;
    return ad::dropout(t, cfg_.dropout, true, *ctx.rng);
  };
  const std::size_t L = inputs.size();
  // Fired states are sums over segments of varying length; normalizing them
  // keeps cross-attention logits on one scale. Attention over memory is
  // order-blind, so they also carry positions.
  Tensor mem = mem_norm_(memory) + Tensor::constant(memory.shape(), sinusoidal_positions(memory.rows(), cfg_.d_model));
  std::vector<int> ids(inputs.begin(), inputs.end());
  if (ctx.training && cfg_.token_dropout > 0.0) {
    std::bernoulli_distribution hide(cfg_.token_dropout);
    for (std::size_t i = 1; i < ids.size(); ++i) {
      if (hide(*ctx.rng)) ids[i] = cfg_.pad_id();
    }
  }
  Tensor x = ad::embedding(embed_, ids);
  x = x + Tensor::constant(x.shape(), sinusoidal_positions(L, cfg_.d_model));
  const std::vector<double> mask = causal_mask(L);
  for (const auto& blk : dec_) {
    Tensor y = blk.ln_self(x);
    x = x + drop(multi_head_attention(blk.self_att, y, y, mask));
    x = x + drop(multi_head_attention(blk.cross_att, blk.ln_cross(x), mem));
    x = x + drop(blk.ff2(ad::relu(blk.ff1(blk.ln_ff(x)))));
  }
  return ad::log_softmax_rows(out_proj_(dec_norm_(x)));
}

std::vector<double> Model::decode_step(const Tensor& memory, std::span<const int> prefix) const {
  ad::NoGradGuard guard;
  std::vector<int> inputs;
  inputs.reserve(prefix.size() + 1);
  inputs.push_back(cfg_.bos_id());
  inputs.insert(inputs.end(), prefix.begin(), prefix.end());
  Tensor lp = decode(memory, inputs, Context{});
  const std::size_t V = cfg_.vocab_size();
  const auto vals = lp.values();
  return {vals.end() - static_cast<std::ptrdiff_t>(V), vals.end()};
}

// ---------------------------------------------------------------------------
// Beam search

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  const double sa = a.score();
  const double sb = b.score();
  if (sa != sb) return sa > sb;
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(), b.tokens.end());
}

Hypothesis beam_search(const Scorer& scorer, const BeamOptions& options) {
  if (options.beam < 1) throw ContractError("beam_search: beam must be >= 1");
  if (options.max_len < 1) throw ContractError("beam_search: max_len must be >= 1");

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 1; step <= options.max_len && !live.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : live) {
      const std::vector<double> lp = scorer(h.tokens);
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        const int id = static_cast<int>(tok);
        if (std::find(options.banned.begin(), options.banned.end(), id) != options.banned.end()) continue;
        Hypothesis c;
        c.tokens = h.tokens;
        c.log_prob = h.log_prob + lp[tok];
        c.length = step;
        if (id == options.eos) {
          c.ended_with_eos = true;
        } else {
          c.tokens.push_back(id);
        }
        candidates.push_back(std::move(c));
      }
    }
    // An eos candidate and a token candidate never share a token list at the
    // same step, so ranks_before is a strict total order here.
    std::sort(candidates.begin(), candidates.end(), [](const Hypothesis& a, const Hypothesis& b) {
      if (a.score() != b.score()) return a.score() > b.score();
      if (a.tokens != b.tokens) return a.tokens < b.tokens;
      return a.ended_with_eos && !b.ended_with_eos;
    });
    if (candidates.size() > options.beam) candidates.resize(options.beam);
    live.clear();
    for (auto& c : candidates) {
      if (c.ended_with_eos || step == options.max_len) {
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }
  if (finished.empty()) return Hypothesis{};
  return *std::min_element(finished.begin(), finished.end(),
                           [](const Hypothesis& a, const Hypothesis& b) { return ranks_before(a, b); });
}

Hypothesis decode_beam(const Model& model, const Tensor& memory, std::size_t beam) {
  const ModelConfig& cfg = model.config();
  BeamOptions opt;
  opt.beam = beam;
  opt.max_len = cfg.max_decode_len;
  opt.eos = cfg.eos_id();
  opt.banned = {cfg.pad_id(), cfg.bos_id(), cfg.blank_id()};
  return beam_search([&](const std::vector<int>& prefix) { return model.decode_step(memory, prefix); }, opt);
}

}  // namespace spikeseg::model
