// spikeseg/training.cpp

#include "spikeseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "spikeseg/boundary.hpp"
#include "spikeseg/checkpoint.hpp"
#include "spikeseg/errors.hpp"

namespace spikeseg::training {

namespace fs = std::filesystem;
using ad::Tensor;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest

std::size_t Manifest::d_feat() const { return utterances.empty() ? 0 : utterances.front().features.cols; }

const Utterance& Manifest::find(const std::string& id) const {
  for (const auto& u : utterances) {
    if (u.id == id) return u;
  }
  throw ContractError("no utterance with id '" + id + "'");
}

void Manifest::validate() const {
  if (utterances.empty()) throw ContractError("manifest has no utterances");
  const std::size_t k = vocab.size();
  std::vector<bool> seen(k, false);
  for (const auto& [name, id] : vocab) {
    if (id < 0 || static_cast<std::size_t>(id) >= k || seen[static_cast<std::size_t>(id)]) {
      throw ContractError("vocabulary ids must be 0..K-1 without gaps; '" + name + "' has " + std::to_string(id));
    }
    seen[static_cast<std::size_t>(id)] = true;
  }
  const std::size_t d = d_feat();
  for (const auto& u : utterances) {
    if (u.features.rows < 4) throw ContractError("utterance '" + u.id + "' has fewer than 4 frames");
    if (u.features.cols != d || d == 0) throw DimensionError("utterance '" + u.id + "' has inconsistent feature width");
    if (u.tokens.empty()) throw ContractError("utterance '" + u.id + "' has no tokens");
    for (int t : u.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= k) {
        throw ContractError("utterance '" + u.id + "' has token " + std::to_string(t) + " outside the vocabulary");
      }
    }
    for (std::size_t i = 0; i < u.boundaries.size(); ++i) {
      if (u.boundaries[i] > u.features.rows || (i > 0 && u.boundaries[i] <= u.boundaries[i - 1])) {
        throw ContractError("utterance '" + u.id + "' has invalid boundaries");
      }
    }
  }
}

void save_manifest(const fs::path& path, const Manifest& m) {
  const fs::path dir = path.parent_path();
  const fs::path feat_dir = fs::path(m.split + "_features");
  json utts = json::array();
  for (const auto& u : m.utterances) {
    const fs::path rel = feat_dir / (u.id + ".csv");
    write_matrix_csv(dir / rel, u.features);
    utts.push_back({{"id", u.id}, {"features", rel.generic_string()}, {"tokens", u.tokens}, {"boundaries", u.boundaries}});
  }
  json j = {{"split", m.split}, {"vocab", m.vocab}, {"utterances", utts}};
  write_json(path, j);
}

Manifest load_manifest(const fs::path& path) {
  const json j = read_json(path);
  Manifest m;
  try {
    m.split = j.value("split", std::string("train"));
    m.vocab = j.at("vocab").get<std::map<std::string, int>>();
    for (const auto& ju : j.at("utterances")) {
      Utterance u;
      u.id = ju.at("id").get<std::string>();
      fs::path feat = ju.at("features").get<std::string>();
      if (feat.is_relative()) feat = path.parent_path() / feat;
      u.features = read_matrix_csv(feat);
      u.tokens = ju.at("tokens").get<std::vector<int>>();
      if (ju.contains("boundaries")) u.boundaries = ju.at("boundaries").get<std::vector<std::size_t>>();
      m.utterances.push_back(std::move(u));
    }
  } catch (const json::exception& e) {
    throw ContractError("manifest " + path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

Manifest synth_split(const SynthOptions& o, const std::vector<double>& means, std::size_t count,
                     const std::string& split, std::mt19937_64& rng) {
  Manifest m;
  m.split = split;
  for (std::size_t k = 0; k < o.vocab; ++k) m.vocab["t" + std::to_string(k)] = static_cast<int>(k);
  std::uniform_int_distribution<std::size_t> n_tok(o.min_tokens, o.max_tokens);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(o.vocab) - 1);
  std::uniform_int_distribution<std::size_t> seg(o.min_seg, o.max_seg);
  std::normal_distribution<double> noise(0.0, o.noise);
  for (std::size_t n = 0; n < count; ++n) {
    Utterance u;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%04zu", split.c_str(), n);
    u.id = id;
    const std::size_t len = n_tok(rng);
    std::vector<std::size_t> seg_len;
    for (std::size_t i = 0; i < len; ++i) {
      u.tokens.push_back(tok(rng));
      seg_len.push_back(seg(rng));
    }
    const std::size_t frames = std::accumulate(seg_len.begin(), seg_len.end(), std::size_t{0});
    u.features = Matrix(frames, o.d_feat);
    std::size_t t = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const double* mu = means.data() + static_cast<std::size_t>(u.tokens[i]) * o.d_feat;
      for (std::size_t f = 0; f < seg_len[i]; ++f, ++t) {
        for (std::size_t d = 0; d < o.d_feat; ++d) u.features(t, d) = mu[d] + noise(rng);
      }
      u.boundaries.push_back(t);
    }
    m.utterances.push_back(std::move(u));
  }
  return m;
}

}  // namespace

SynthCorpus synth_corpus(const SynthOptions& o) {
  if (o.vocab < 2) throw ContractError("synth_corpus needs a vocabulary of at least 2 tokens");
  if (o.d_feat < 1) throw ContractError("synth_corpus needs d_feat >= 1");
  if (o.min_tokens < 1 || o.min_tokens > o.max_tokens || o.min_seg < 1 || o.min_seg > o.max_seg) {
    throw ContractError("synth_corpus: bad length ranges");
  }
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> means(o.vocab * o.d_feat);
  for (double& x : means) x = unit(rng);
  SynthCorpus c;
  c.train = synth_split(o, means, o.n_train, "train", rng);
  c.eval = synth_split(o, means, o.n_eval, "eval", rng);
  return c;
}

Manifest synth_corpus(std::size_t vocab, std::size_t n_utts, std::size_t d_feat, std::uint64_t seed) {
  SynthOptions o;
  o.vocab = vocab;
  o.n_train = n_utts;
  o.d_feat = d_feat;
  o.seed = seed;
  return synth_corpus(o).train;
}

// ---------------------------------------------------------------------------
// CMVN

json CmvnStats::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

CmvnStats CmvnStats::from_json(const json& j) {
  CmvnStats s;
  try {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.stddev = j.at("std").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ContractError(std::string("cmvn stats: ") + e.what());
  }
  if (s.mean.size() != s.stddev.size()) throw ContractError("cmvn stats: mean and std differ in length");
  return s;
}

CmvnStats compute_cmvn(const Manifest& m) {
  if (m.utterances.empty()) throw ContractError("compute_cmvn: empty manifest");
  const std::size_t d = m.d_feat();
  std::vector<double> sum(d, 0.0);
  double frames = 0.0;
  for (const auto& u : m.utterances) {
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      for (std::size_t k = 0; k < d; ++k) sum[k] += u.features(t, k);
    }
    frames += static_cast<double>(u.features.rows);
  }
  CmvnStats s;
  s.mean.resize(d);
  for (std::size_t k = 0; k < d; ++k) s.mean[k] = sum[k] / frames;
  // Second pass on centred values keeps the variance accurate.
  std::vector<double> sq(d, 0.0);
  for (const auto& u : m.utterances) {
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      for (std::size_t k = 0; k < d; ++k) {
        const double c = u.features(t, k) - s.mean[k];
        sq[k] += c * c;
      }
    }
  }
  s.stddev.resize(d);
  for (std::size_t k = 0; k < d; ++k) s.stddev[k] = std::max(std::sqrt(sq[k] / frames), 1e-8);
  return s;
}

void apply_cmvn(Manifest& m, const CmvnStats& stats) {
  for (auto& u : m.utterances) {
    if (u.features.cols != stats.mean.size()) throw DimensionError("apply_cmvn: feature width differs from stats");
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      for (std::size_t k = 0; k < u.features.cols; ++k) {
        u.features(t, k) = (u.features(t, k) - stats.mean[k]) / stats.stddev[k];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Optimization

double lr_at(std::size_t step, double peak, std::size_t warmup) {
  if (step < 1) throw ContractError("lr_at: step must be >= 1");
  if (warmup == 0) return peak / std::sqrt(static_cast<double>(step));
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

bool adam_step(ParameterStore& params, AdamState& st, double lr) {
  auto& entries = params.entries();
  for (auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.mutable_grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  if (st.m.size() != entries.size()) {
    st.m.assign(entries.size(), {});
    st.v.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      st.m[i].assign(entries[i].tensor.size(), 0.0);
      st.v[i].assign(entries[i].tensor.size(), 0.0);
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].tensor;
    const bool has = p.has_grad();
    auto w = p.mutable_values();
    std::span<double> g = has ? p.mutable_grad() : std::span<double>{};
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * gk;
      v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * gk * gk;
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + st.eps);
    }
  }
  return true;
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.mutable_grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      for (double& g : e.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Bundles

json bundle_meta(const Bundle& b, std::size_t step) {
  return {{"config", b.config.to_json()},
          {"dynamics", b.spec.to_json()},
          {"cmvn", b.cmvn.to_json()},
          {"vocab", b.vocab},
          {"step", step}};
}

Bundle bundle_from_meta(const json& meta) {
  Bundle b;
  try {
    b.config = model::ModelConfig::from_json(meta.at("config"));
    b.spec = dynamics::DynamicsSpec::from_json(meta.at("dynamics"));
    b.cmvn = CmvnStats::from_json(meta.at("cmvn"));
    b.vocab = meta.at("vocab").get<std::map<std::string, int>>();
  } catch (const json::exception& e) {
    throw ContractError(std::string("checkpoint metadata: ") + e.what());
  }
  return b;
}

LoadedSystem load_system(const fs::path& checkpoint) {
  Checkpoint ckpt = load_checkpoint(checkpoint);
  LoadedSystem sys;
  sys.bundle = bundle_from_meta(ckpt.meta);
  sys.model = std::make_unique<model::Model>(sys.bundle.config, 0);
  restore_parameters(sys.model->params(), ckpt);
  return sys;
}

// ---------------------------------------------------------------------------
// Loss of one utterance

UtteranceLoss utterance_loss(const model::Model& m, const dynamics::DynamicsSpec& spec, const Utterance& utt,
                             const losses::LossWeights& w, const model::Context& ctx) {
  const model::ModelConfig& cfg = m.config();
  const std::size_t n = utt.tokens.size();
  UtteranceLoss out;

  Tensor h = m.encode(Tensor::from_matrix(utt.features), ctx);
  Tensor currents = m.currents(h);

  boundary::IntegrateOptions opt;
  Tensor drive_in = currents;
  out.scaled = ctx.training && spec.kind == dynamics::Kind::Vanilla;
  if (out.scaled) {
    drive_in = boundary::scale_currents(currents, n, spec.v_th0);
    opt.scaled_target = n;
  }
  boundary::Integration integ = boundary::integrate_and_fire(h, drive_in, spec, opt);
  out.spikes = integ.trace.spike_count();

  // Scaled currents always sum to n thresholds, so the proxy is taken from
  // the raw currents there.
  Tensor proxy = out.scaled ? ad::sum(currents) * (1.0 / spec.v_th0) : integ.drive;
  out.qua = losses::quantity_loss(proxy, n);

  Tensor memory = boundary::fit_to_length(integ.fired, n, cfg.d_model);
  std::vector<int> inputs{cfg.bos_id()};
  inputs.insert(inputs.end(), utt.tokens.begin(), utt.tokens.end());
  std::vector<int> targets(utt.tokens.begin(), utt.tokens.end());
  targets.push_back(cfg.eos_id());
  out.ce = losses::ce_loss(m.decode(memory, inputs, ctx), targets, cfg.pad_id());

  if (h.rows() >= losses::ctc_min_frames(utt.tokens)) {
    out.ctc = losses::ctc_loss(m.ctc_log_probs(h), utt.tokens, cfg.blank_id());
    out.ctc_used = true;
  } else {
    out.ctc = Tensor::scalar(0.0);
  }
  out.total = losses::combined_loss(out.ce, out.ctc, out.qua, w);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string step_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_step%06zu.ckpt", step);
  return buf;
}

json step_json(const StepStats& s) {
  json j = {{"step", s.step}, {"lr", s.lr},         {"ce", s.ce},
            {"ctc", s.ctc},   {"qua", s.qua},       {"total", s.total},
            {"spikes", s.spikes}, {"targets", s.targets}};
  if (s.rejected) j["rejected"] = true;
  return j;
}

}  // namespace

TrainResult train(const Manifest& manifest, const Bundle& bundle, const TrainOptions& o, const fs::path& out_dir,
                  const Manifest* validation) {
  manifest.validate();
  bundle.spec.validate();
  o.weights.validate();
  if (o.batch < 1) throw ConfigError("batch must be >= 1");
  if (o.steps < 1) throw ConfigError("steps must be >= 1");
  if (manifest.d_feat() != bundle.config.d_feat || manifest.n_tokens() != bundle.config.n_tokens) {
    throw ConfigError("model config (d_feat " + std::to_string(bundle.config.d_feat) + ", n_tokens " +
                      std::to_string(bundle.config.n_tokens) + ") does not match the manifest (d_feat " +
                      std::to_string(manifest.d_feat()) + ", n_tokens " + std::to_string(manifest.n_tokens()) + ")");
  }

  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + (out_dir / "train_log.jsonl").string());

  model::Model net(bundle.config, o.seed);
  std::mt19937_64 rng(o.seed ^ 0x5deece66dULL);
  model::Context ctx{true, &rng};
  AdamState adam;
  TrainResult result;

  // Length-sorted batches, visited in a freshly shuffled order every epoch.
  std::vector<std::size_t> order(manifest.utterances.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return manifest.utterances[a].features.rows < manifest.utterances[b].features.rows;
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += o.batch) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + o.batch, order.size())));
  }
  std::vector<std::size_t> batch_order(batches.size());
  std::size_t cursor = batch_order.size();

  const Manifest& val = validation ? *validation : manifest;
  std::vector<fs::path> kept;
  auto save = [&](const fs::path& p, std::size_t step) { save_checkpoint(p, net.params(), bundle_meta(bundle, step)); };

  for (std::size_t step = 1; step <= o.steps; ++step) {
    if (cursor == batch_order.size()) {
      std::iota(batch_order.begin(), batch_order.end(), 0);
      std::shuffle(batch_order.begin(), batch_order.end(), rng);
      cursor = 0;
    }
    const auto& batch = batches[batch_order[cursor++]];
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    StepStats st;
    st.step = step;
    st.lr = lr_at(step, o.peak_lr, o.warmup);
    net.params().zero_grad();
    bool scaled_step = false;
    for (std::size_t idx : batch) {
      const Utterance& utt = manifest.utterances[idx];
      UtteranceLoss ul = utterance_loss(net, bundle.spec, utt, o.weights, ctx);
      if (!std::isfinite(ul.total.item())) {
        save(out_dir / "last_good.ckpt", step - 1);
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " on utterance " + utt.id);
      }
      if (ul.scaled) {
        scaled_step = true;
        if (ul.spikes != utt.tokens.size()) {
          ++result.quantity_violations;
          if (o.assert_quantity) {
            throw std::logic_error("scaled integration fired " + std::to_string(ul.spikes) + " times for " +
                                   std::to_string(utt.tokens.size()) + " targets on " + utt.id);
          }
        }
      }
      (ul.total * inv_b).backward();
      st.ce += ul.ce.item() * inv_b;
      st.ctc += ul.ctc.item() * inv_b;
      st.qua += ul.qua.item() * inv_b;
      st.total += ul.total.item() * inv_b;
      st.spikes += ul.spikes;
      st.targets += utt.tokens.size();
    }
    if (scaled_step) ++result.scaled_steps;
    clip_grad_norm(net.params(), o.clip);
    st.rejected = !adam_step(net.params(), adam, st.lr);
    log << step_json(st).dump() << '\n';
    result.log.push_back(st);

    const bool last = step == o.steps;
    if (o.checkpoint_every > 0 && (step % o.checkpoint_every == 0 || last)) {
      const fs::path p = out_dir / step_name(step);
      save(p, step);
      kept.push_back(p);
      while (kept.size() > std::max<std::size_t>(o.keep, 1)) {
        fs::remove(kept.front());
        kept.erase(kept.begin());
      }
      const double per = evaluate(net, bundle.spec, val, 1, o.validate_utts).per_mean;
      log << json{{"step", step}, {"per", per}}.dump() << '\n';
      if (!result.best_per || per < *result.best_per) {
        result.best_per = per;
        save(out_dir / "best.ckpt", step);
      }
    }
  }
  log.flush();
  result.final_checkpoint = out_dir / "final.ckpt";
  save(result.final_checkpoint, o.steps);
  result.best_checkpoint = result.best_per ? out_dir / "best.ckpt" : result.final_checkpoint;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

Segmentation segment(const model::Model& m, const dynamics::DynamicsSpec& spec, const Matrix& features,
                     std::size_t beam) {
  ad::NoGradGuard guard;
  Segmentation s;
  Tensor h = m.encode(Tensor::from_matrix(features), model::Context{});
  Tensor currents = m.currents(h);
  boundary::Integration integ = boundary::integrate_and_fire(h, currents, spec);
  s.encoder_frames = h.rows();
  for (std::size_t k : integ.trace.boundary_frames) {
    s.input_boundaries.push_back(boundary::to_input_frame(k, s.encoder_frames, features.rows));
  }
  if (integ.fired.rows() > 0 && integ.fired.dim() == 2 && integ.fired.shape()[0] > 0) {
    s.hypothesis = model::decode_beam(m, integ.fired, beam).tokens;
  }
  s.trace = std::move(integ.trace);
  return s;
}

EvalResult evaluate(const model::Model& m, const dynamics::DynamicsSpec& spec, const Manifest& normalized,
                    std::size_t beam, std::size_t limit) {
  if (normalized.utterances.empty()) throw ContractError("evaluate: empty manifest");
  const std::size_t count = limit == 0 ? normalized.utterances.size() : std::min(limit, normalized.utterances.size());
  EvalResult r;
  double recall_sum = 0.0, spikes = 0.0, targets = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const Utterance& u = normalized.utterances[i];
    Segmentation s = segment(m, spec, u.features, beam);
    UtteranceResult ur;
    ur.id = u.id;
    ur.hypothesis = s.hypothesis;
    ur.per = losses::per(u.tokens, s.hypothesis);
    ur.spikes = s.trace.spike_count();
    ur.predicted_boundaries = s.input_boundaries;
    ur.boundary_recall = u.boundaries.empty() ? 0.0 : losses::boundary_accuracy(s.input_boundaries, u.boundaries, 2);
    recall_sum += ur.boundary_recall;
    spikes += static_cast<double>(ur.spikes);
    targets += static_cast<double>(u.tokens.size());
    r.utterances.push_back(std::move(ur));
  }
  const double n = static_cast<double>(count);
  for (const auto& ur : r.utterances) r.per_mean += ur.per / n;
  double var = 0.0;
  for (const auto& ur : r.utterances) var += (ur.per - r.per_mean) * (ur.per - r.per_mean) / n;
  r.per_std = std::sqrt(var);
  r.boundary_recall = recall_sum / n;
  r.spikes_per_utt = spikes / n;
  r.target_len_mean = targets / n;
  return r;
}

json EvalResult::to_json() const {
  return {{"per_mean", per_mean},
          {"per_std", per_std},
          {"boundary_recall", boundary_recall},
          {"spikes_per_utt", spikes_per_utt},
          {"target_len_mean", target_len_mean},
          {"utterances", utterances.size()}};
}

json RobustnessResult::to_json() const {
  json j = {{"per_clean", per_clean}, {"per_noisy", per_noisy}};
  j["relative_change"] = relative_change ? json(*relative_change) : json(nullptr);
  return j;
}

RobustnessResult robustness_eval(const model::Model& m, const dynamics::DynamicsSpec& spec, const Manifest& normalized,
                                 double noise_high, std::uint64_t seed, std::size_t beam) {
  if (!(noise_high >= 0.0) || !std::isfinite(noise_high)) throw ContractError("noise_high must be >= 0");
  RobustnessResult r;
  r.per_clean = evaluate(m, spec, normalized, beam).per_mean;
  Manifest noisy = normalized;
  if (noise_high > 0.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, noise_high);
    for (auto& u : noisy.utterances) {
      for (double& x : u.features.data) x += dist(rng);
    }
  }
  r.per_noisy = evaluate(m, spec, noisy, beam).per_mean;
  if (r.per_clean > 0.0) {
    r.relative_change = (r.per_noisy - r.per_clean) / r.per_clean;
  } else if (r.per_noisy == 0.0) {
    r.relative_change = 0.0;
  }
  return r;
}

}  // namespace spikeseg::training
