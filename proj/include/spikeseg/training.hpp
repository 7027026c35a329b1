// spikeseg/training.hpp
//
// Corpus handling, optimization and evaluation for the segmentation model.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikeseg/dynamics.hpp"
#include "spikeseg/io.hpp"
#include "spikeseg/losses.hpp"
#include "spikeseg/model.hpp"

namespace spikeseg::training {

struct Utterance {
  std::string id;
  Matrix features;                    // [T x d_feat]
  std::vector<int> tokens;            // content ids, no specials
  std::vector<std::size_t> boundaries;  // segment end frames (exclusive), last == T
};

struct Manifest {
  std::map<std::string, int> vocab;  // token string -> content id
  std::vector<Utterance> utterances;
  std::string split = "train";

  std::size_t n_tokens() const { return vocab.size(); }
  std::size_t d_feat() const;
  const Utterance& find(const std::string& id) const;
  // Ids in range, T >= 4, tokens non-empty, consistent feature widths.
  void validate() const;
};

// JSON manifest with one feature CSV per utterance next to it.
void save_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest load_manifest(const std::filesystem::path& path);

struct SynthOptions {
  std::size_t vocab = 8;
  std::size_t n_train = 200;
  std::size_t n_eval = 0;
  std::size_t d_feat = 16;
  std::uint64_t seed = 17;
  std::size_t min_tokens = 3, max_tokens = 10;
  std::size_t min_seg = 3, max_seg = 8;
  double noise = 0.1;
};

struct SynthCorpus {
  Manifest train;
  Manifest eval;
};

// Token class means are drawn once per seed and shared by both splits.
SynthCorpus synth_corpus(const SynthOptions& options);
Manifest synth_corpus(std::size_t vocab, std::size_t n_utts, std::size_t d_feat, std::uint64_t seed);

struct CmvnStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  nlohmann::json to_json() const;
  static CmvnStats from_json(const nlohmann::json& j);
};

// Per-dimension statistics over every frame of the manifest; std floored at 1e-8.
CmvnStats compute_cmvn(const Manifest& m);
void apply_cmvn(Manifest& m, const CmvnStats& stats);

// peak * min(step / warmup, sqrt(warmup / step)).
double lr_at(std::size_t step, double peak, std::size_t warmup);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Applies one bias-corrected Adam update from the gradients held by the
// parameters. Returns false, leaving parameters and moments untouched, if any
// gradient is non-finite.
bool adam_step(ParameterStore& params, AdamState& state, double lr);

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(ParameterStore& params, double max_norm);

struct TrainOptions {
  std::size_t steps = 3000;
  std::uint64_t seed = 17;
  std::size_t batch = 4;
  double peak_lr = 5e-4;
  std::size_t warmup = 400;
  double clip = 5.0;
  losses::LossWeights weights;
  std::size_t checkpoint_every = 200;
  std::size_t keep = 3;
  // PER of greedy decoding on up to this many utterances of the validation
  // manifest, measured at every checkpoint to pick best.ckpt.
  std::size_t validate_utts = 50;
  // Check spike count == target length on every scaled integration.
  bool assert_quantity = true;
};

struct StepStats {
  std::size_t step = 0;
  double lr = 0.0;
  double ce = 0.0;
  double ctc = 0.0;
  double qua = 0.0;
  double total = 0.0;
  std::size_t spikes = 0;   // hard spike count summed over the batch
  std::size_t targets = 0;  // target tokens summed over the batch
  bool rejected = false;
};

struct TrainResult {
  std::vector<StepStats> log;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::optional<double> best_per;
  std::size_t scaled_steps = 0;         // steps that integrated scaled currents
  std::size_t quantity_violations = 0;  // scaled integrations with count != target
};

// Everything needed to rebuild a trained system.
struct Bundle {
  model::ModelConfig config;
  dynamics::DynamicsSpec spec;
  CmvnStats cmvn;
  std::map<std::string, int> vocab;
};

nlohmann::json bundle_meta(const Bundle& b, std::size_t step);
Bundle bundle_from_meta(const nlohmann::json& meta);

// Losses for one utterance. Gradients are recorded when grad mode is on.
struct UtteranceLoss {
  ad::Tensor ce, ctc, qua, total;
  std::size_t spikes = 0;
  bool scaled = false;
  bool ctc_used = false;
};
UtteranceLoss utterance_loss(const model::Model& m, const dynamics::DynamicsSpec& spec, const Utterance& utt,
                             const losses::LossWeights& w, const model::Context& ctx);

// `manifest` must already be cmvn-normalized with `bundle.cmvn`. Writes
// train_log.jsonl, step checkpoints, best.ckpt and final.ckpt to out_dir.
// Throws DivergenceError on a non-finite loss after saving last_good.ckpt.
TrainResult train(const Manifest& manifest, const Bundle& bundle, const TrainOptions& options,
                  const std::filesystem::path& out_dir, const Manifest* validation = nullptr);

struct UtteranceResult {
  std::string id;
  std::vector<int> hypothesis;
  double per = 0.0;
  double boundary_recall = 0.0;
  std::size_t spikes = 0;
  std::vector<std::size_t> predicted_boundaries;  // input frames
};

struct EvalResult {
  double per_mean = 0.0;
  double per_std = 0.0;
  double boundary_recall = 0.0;
  double spikes_per_utt = 0.0;
  double target_len_mean = 0.0;
  std::vector<UtteranceResult> utterances;

  nlohmann::json to_json() const;
};

struct Segmentation {
  boundary::IntegrationTrace trace;
  std::size_t encoder_frames = 0;
  std::vector<std::size_t> input_boundaries;
  std::vector<int> hypothesis;
};

// Inference on one (normalized) utterance: unscaled currents, tail rule,
// beam search over the fired states.
Segmentation segment(const model::Model& m, const dynamics::DynamicsSpec& spec, const Matrix& features,
                     std::size_t beam);

// Boundary recall uses a +-2 frame tolerance.
EvalResult evaluate(const model::Model& m, const dynamics::DynamicsSpec& spec, const Manifest& normalized,
                    std::size_t beam, std::size_t limit = 0);

struct RobustnessResult {
  double per_clean = 0.0;
  double per_noisy = 0.0;
  std::optional<double> relative_change;  // empty when per_clean == 0 < per_noisy
  nlohmann::json to_json() const;
};

// Adds uniform [0, noise_high] noise to every normalized feature and
// re-evaluates.
RobustnessResult robustness_eval(const model::Model& m, const dynamics::DynamicsSpec& spec,
                                 const Manifest& normalized, double noise_high, std::uint64_t seed,
                                 std::size_t beam);

struct LoadedSystem {
  Bundle bundle;
  std::unique_ptr<model::Model> model;
};
LoadedSystem load_system(const std::filesystem::path& checkpoint);

}  // namespace spikeseg::training
