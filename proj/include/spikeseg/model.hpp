// spikeseg/model.hpp
//
// Encoder-decoder for token segmentation: a strided convolutional frontend,
// pre-norm transformer encoder blocks whose feed-forward activation is an
// integrate-and-fire spike (or ReLU), a boundary current head, an auxiliary
// CTC projection, and an autoregressive transformer decoder that attends to
// the fired segment states.
#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikeseg/boundary.hpp"
#include "spikeseg/checkpoint.hpp"
#include "spikeseg/tensor.hpp"

namespace spikeseg::model {

enum class Activation { Spike, Relu };

struct ModelConfig {
  std::size_t d_feat = 16;
  std::size_t n_tokens = 8;  // content symbols; four specials follow them
  std::size_t n_enc_blocks = 2;
  std::size_t n_dec_blocks = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t heads = 4;
  Activation activation = Activation::Spike;
  double dropout = 0.2;
  // Training only: each decoder input after bos is replaced by pad with this
  // probability, so predictions must come from the fired states.
  double token_dropout = 0.0;
  std::size_t frontend_ch1 = 32;
  std::size_t frontend_ch2 = 64;
  std::size_t cif_channels = 256;
  std::size_t cif_kernel = 3;
  double spike_threshold = 1.0;
  double surrogate_width = 0.5;
  std::size_t max_decode_len = 16;

  std::size_t vocab_size() const { return n_tokens + 4; }
  int pad_id() const { return static_cast<int>(n_tokens); }
  int bos_id() const { return static_cast<int>(n_tokens) + 1; }
  int eos_id() const { return static_cast<int>(n_tokens) + 2; }
  int blank_id() const { return static_cast<int>(n_tokens) + 3; }

  // Throws ConfigError.
  void validate() const;

  // key = value lines; '#' starts a comment. Unknown keys and malformed
  // values throw ConfigError. Keys not mentioned keep their current value.
  void apply_kv(const std::string& text);
  void set(const std::string& key, const std::string& value);
  std::string to_kv() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

struct Linear {
  ad::Tensor w;  // [in x out]
  ad::Tensor b;  // [out]
  ad::Tensor operator()(const ad::Tensor& x) const;
};

struct Norm {
  ad::Tensor gamma;
  ad::Tensor beta;
  ad::Tensor operator()(const ad::Tensor& x) const;
};

struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;
};

struct EncoderBlock {
  Norm ln_att;
  Attention att;
  Norm ln_ff;
  Linear ff1, ff2;
};

struct DecoderBlock {
  Norm ln_self;
  Attention self_att;
  Norm ln_cross;
  Attention cross_att;
  Norm ln_ff;
  Linear ff1, ff2;
};

struct Context {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

// softmax(Q K^T / sqrt(d_head) + mask) V per head, heads concatenated and
// mixed by the output projection. `mask` is additive, [Tq x Tk], or empty.
ad::Tensor multi_head_attention(const Attention& att, const ad::Tensor& q_in, const ad::Tensor& kv_in,
                                std::span<const double> mask = {});

// [T x d] table of sin/cos positions.
std::vector<double> sinusoidal_positions(std::size_t length, std::size_t d_model);
// Additive mask hiding positions j > i.
std::vector<double> causal_mask(std::size_t length);

class Model {
 public:
  // Registers every parameter in `params`; initialization draws from rng.
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // [T x d_feat] -> [ceil(T/4) x d_model]. Throws TooShortError for T < 4.
  ad::Tensor frontend(const ad::Tensor& features) const;
  ad::Tensor encoder_block(const EncoderBlock& blk, const ad::Tensor& x, const Context& ctx) const;
  // Frontend, positions, encoder blocks, final norm.
  ad::Tensor encode(const ad::Tensor& features, const Context& ctx) const;

  ad::Tensor currents(const ad::Tensor& h) const;
  // Log-posteriors over the full vocabulary (blank included), [T' x V].
  ad::Tensor ctc_log_probs(const ad::Tensor& h) const;

  // Teacher-forced decoder: inputs start with bos; returns [L x V]
  // log-probabilities for the next token at each position. Throws
  // DecodeContextError when memory has no rows.
  ad::Tensor decode(const ad::Tensor& memory, std::span<const int> inputs, const Context& ctx) const;
  // Next-token log-probabilities after bos + prefix.
  std::vector<double> decode_step(const ad::Tensor& memory, std::span<const int> prefix) const;

  const std::vector<EncoderBlock>& encoder_blocks() const { return enc_; }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  ad::Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  Linear front_proj_;
  std::vector<EncoderBlock> enc_;
  Norm enc_norm_;
  boundary::CurrentHead cif_;
  Linear ctc_head_;
  Norm mem_norm_;
  ad::Tensor embed_;
  std::vector<DecoderBlock> dec_;
  Norm dec_norm_;
  Linear out_proj_;
};

// Scores the next token given the tokens emitted so far.
using Scorer = std::function<std::vector<double>(const std::vector<int>& prefix)>;

struct BeamOptions {
  std::size_t beam = 5;
  std::size_t max_len = 16;  // emitted tokens, eos included
  int eos = 0;
  std::vector<int> banned;  // never proposed
};

struct Hypothesis {
  std::vector<int> tokens;  // eos stripped
  double log_prob = 0.0;
  std::size_t length = 0;  // tokens scored, eos included
  bool ended_with_eos = false;

  double score() const { return length == 0 ? 0.0 : log_prob / static_cast<double>(length); }
};

// true when a ranks ahead of b: higher length-normalized score, then the
// lexicographically smaller token sequence.
bool ranks_before(const Hypothesis& a, const Hypothesis& b);

// Each step extends every live hypothesis by every allowed token and keeps
// the `beam` best candidates overall; candidates ending in eos or reaching
// max_len are finished. Returns the best finished hypothesis.
Hypothesis beam_search(const Scorer& scorer, const BeamOptions& options);

// Beam search over a model's decoder with pad, bos and blank banned.
Hypothesis decode_beam(const Model& model, const ad::Tensor& memory, std::size_t beam);

}  // namespace spikeseg::model
