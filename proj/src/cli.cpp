// spikeseg/cli.cpp

#include "spikeseg/cli.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spikeseg/dynamics.hpp"
#include "spikeseg/errors.hpp"
#include "spikeseg/io.hpp"
#include "spikeseg/model.hpp"
#include "spikeseg/training.hpp"

namespace spikeseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// key = value files

using KeyValues = std::vector<std::pair<std::string, std::string>>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

KeyValues read_kv_file(const fs::path& path) {
  std::istringstream in(read_text(path));
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

double to_real(const std::string& key, const std::string& v) {
  double x = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
  return x;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return x;
}

void set_dynamics_key(dynamics::DynamicsSpec& s, const std::string& key, const std::string& value) {
  static const std::map<std::string, double dynamics::DynamicsSpec::*> fields = {
      {"v_th0", &dynamics::DynamicsSpec::v_th0}, {"v_clip", &dynamics::DynamicsSpec::v_clip},
      {"alpha", &dynamics::DynamicsSpec::alpha}, {"delta_h", &dynamics::DynamicsSpec::delta_h},
      {"a", &dynamics::DynamicsSpec::a},         {"b", &dynamics::DynamicsSpec::b},
      {"c", &dynamics::DynamicsSpec::c},         {"g", &dynamics::DynamicsSpec::g},
      {"m", &dynamics::DynamicsSpec::m},         {"n", &dynamics::DynamicsSpec::n},
      {"u_jump", &dynamics::DynamicsSpec::u_jump}, {"tau", &dynamics::DynamicsSpec::tau},
      {"c_m", &dynamics::DynamicsSpec::c_m}};
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown dynamics parameter '" + key + "'");
  s.*(it->second) = to_real(key, value);
}

// Writes to `path`, or to `out` when the path is empty or "-".
void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
  } else {
    write_text(path, text);
  }
}

// ---------------------------------------------------------------------------
// Training configuration shared by train and sweep

struct TrainSetup {
  model::ModelConfig model;
  training::TrainOptions options;
  dynamics::Kind kind = dynamics::Kind::Vanilla;
};

void apply_train_key(TrainSetup& t, const std::string& key, const std::string& value) {
  if (key == "steps") t.options.steps = to_size(key, value);
  else if (key == "seed") t.options.seed = to_size(key, value);
  else if (key == "batch") t.options.batch = to_size(key, value);
  else if (key == "peak_lr") t.options.peak_lr = to_real(key, value);
  else if (key == "warmup") t.options.warmup = to_size(key, value);
  else if (key == "clip") t.options.clip = to_real(key, value);
  else if (key == "lambda_ce") t.options.weights.ce = to_real(key, value);
  else if (key == "lambda_ctc") t.options.weights.ctc = to_real(key, value);
  else if (key == "lambda_qua") t.options.weights.quantity = to_real(key, value);
  else if (key == "checkpoint_every") t.options.checkpoint_every = to_size(key, value);
  else if (key == "keep") t.options.keep = to_size(key, value);
  else if (key == "dynamics") t.kind = dynamics::parse_kind(value);
  else t.model.set(key, value);
}

struct TrainFlags {
  std::string config;
  std::string dynamics;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t enc_blocks = 0;
  std::string activation;
  double lr = 0.0;
  CLI::Option* o_dynamics = nullptr;
  CLI::Option* o_steps = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_enc = nullptr;
  CLI::Option* o_act = nullptr;
  CLI::Option* o_lr = nullptr;

  void add(CLI::App* app, bool with_dynamics) {
    app->add_option("--config", config, "key = value file with model and training settings");
    if (with_dynamics) {
      o_dynamics = app->add_option("--dynamics", dynamics, "vanilla | adaptive-threshold | second-order | double-neuron");
    }
    o_steps = app->add_option("--steps", steps, "optimizer steps (default 3000)");
    o_seed = app->add_option("--seed", seed, "seed for initialization and batching (default 17)");
    o_enc = app->add_option("--enc-blocks", enc_blocks, "encoder blocks (default 2)");
    o_act = app->add_option("--activation", activation, "feed-forward activation: spike | relu");
    o_lr = app->add_option("--lr", lr, "peak learning rate");
  }

  // defaults < config file < flags
  TrainSetup resolve(const training::Manifest& m) const {
    TrainSetup t;
    t.options.checkpoint_every = 200;
    t.model.d_feat = m.d_feat();
    t.model.n_tokens = m.n_tokens();
    if (!config.empty()) {
      for (const auto& [k, v] : read_kv_file(config)) apply_train_key(t, k, v);
    }
    if (o_dynamics && o_dynamics->count()) t.kind = dynamics::parse_kind(dynamics);
    if (o_steps->count()) t.options.steps = steps;
    if (o_seed->count()) t.options.seed = seed;
    if (o_enc->count()) t.model.n_enc_blocks = enc_blocks;
    if (o_act->count()) t.model.activation = model::parse_activation(activation);
    if (o_lr->count()) t.options.peak_lr = lr;
    if (t.model.d_feat != m.d_feat() || t.model.n_tokens != m.n_tokens()) {
      throw ConfigError("config d_feat/n_tokens disagree with the manifest");
    }
    t.model.validate();
    return t;
  }
};

struct Prepared {
  training::Manifest train;
  std::optional<training::Manifest> validation;
  training::Bundle bundle;
};

Prepared prepare(const std::string& manifest, const std::string& eval_manifest, const TrainSetup& t) {
  Prepared p;
  p.train = training::load_manifest(manifest);
  p.bundle.config = t.model;
  p.bundle.spec = dynamics::DynamicsSpec::make(t.kind);
  p.bundle.cmvn = training::compute_cmvn(p.train);
  p.bundle.vocab = p.train.vocab;
  training::apply_cmvn(p.train, p.bundle.cmvn);
  if (!eval_manifest.empty()) {
    p.validation = training::load_manifest(eval_manifest);
    training::apply_cmvn(*p.validation, p.bundle.cmvn);
  }
  return p;
}

training::Manifest load_normalized(const std::string& path, const training::LoadedSystem& sys) {
  training::Manifest m = training::load_manifest(path);
  if (m.vocab != sys.bundle.vocab) throw ContractError("manifest vocabulary does not match the checkpoint");
  training::apply_cmvn(m, sys.bundle.cmvn);
  return m;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spiking-neuron boundary detection: neuron analysis, synthetic corpora, training and evaluation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Simulate one neuron on a constant or triangle current");
  std::string sim_dyn = "second-order", sim_params, sim_wave = "triangle", sim_out, sim_summary;
  double sim_min = 0.015, sim_max = 0.15;
  std::size_t sim_steps = 500, sim_period = 100;
  sim->add_option("--dynamics", sim_dyn, "vanilla | adaptive-threshold | second-order | double-neuron")
      ->capture_default_str();
  sim->add_option("--params-file", sim_params, "key = value overrides of the neuron parameters");
  sim->add_option("--wave", sim_wave, "constant | triangle")->capture_default_str();
  sim->add_option("--min", sim_min, "lowest current of the wave")->capture_default_str();
  sim->add_option("--max", sim_max, "highest current; a constant wave drives at this value")->capture_default_str();
  sim->add_option("--period", sim_period, "triangle period in steps")->capture_default_str();
  sim->add_option("--steps", sim_steps, "number of steps")->capture_default_str();
  sim->add_option("--out", sim_out, "trace CSV (step,i,v,v_th,u,spike); stdout when omitted");
  sim->add_option("--summary", sim_summary, "JSON summary file");

  // phase
  auto* phase = app.add_subcommand("phase", "Fixed points of the second-order neuron");
  double ph_a = 0.1014, ph_b = -0.0832, ph_c = 0.9506, ph_i = 0.0;
  std::string ph_out;
  phase->add_option("--a", ph_a)->capture_default_str();
  phase->add_option("--b", ph_b)->capture_default_str();
  phase->add_option("--c", ph_c)->capture_default_str();
  phase->add_option("--current", ph_i, "constant input current")->capture_default_str();
  phase->add_option("--out", ph_out, "JSON report; stdout when omitted");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic segmentation corpus");
  training::SynthOptions so;
  so.n_eval = 50;
  std::string gen_dir;
  gen->add_option("--vocab", so.vocab, "content symbols")->capture_default_str();
  gen->add_option("--utts", so.n_train, "training utterances")->capture_default_str();
  gen->add_option("--eval-utts", so.n_eval, "held-out utterances")->capture_default_str();
  gen->add_option("--dim", so.d_feat, "feature dimension")->capture_default_str();
  gen->add_option("--seed", so.seed)->capture_default_str();
  gen->add_option("--out-dir", gen_dir, "writes train.json, eval.json and feature CSVs")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train the segmentation model");
  std::string tr_manifest, tr_eval, tr_dir;
  TrainFlags tr_flags;
  tr->add_option("--manifest", tr_manifest, "training manifest")->required();
  tr->add_option("--eval-manifest", tr_eval, "validation manifest for best-PER selection");
  tr->add_option("--out-dir", tr_dir, "log, checkpoints and cmvn statistics")->required();
  tr_flags.add(tr, true);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_manifest, ev_out;
  std::size_t ev_beam = 5;
  double ev_noise = 0.0;
  std::uint64_t ev_seed = 17;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--beam", ev_beam, "beam width")->capture_default_str();
  auto* ev_noise_opt = ev->add_option("--noise", ev_noise, "also evaluate with uniform [0, noise] input noise");
  ev->add_option("--seed", ev_seed, "noise seed")->capture_default_str();
  ev->add_option("--out", ev_out, "metrics JSON; stdout when omitted");

  // segment
  auto* seg = app.add_subcommand("segment", "Boundary trace of one utterance");
  std::string sg_ckpt, sg_manifest, sg_utt, sg_out, sg_json;
  std::size_t sg_beam = 5;
  seg->add_option("--checkpoint", sg_ckpt)->required();
  seg->add_option("--manifest", sg_manifest)->required();
  seg->add_option("--utt-id", sg_utt)->required();
  seg->add_option("--out", sg_out, "per-frame CSV (frame,current,potential,spike)")->required();
  seg->add_option("--json", sg_json, "boundary JSON; defaults to the CSV path with .json");
  seg->add_option("--beam", sg_beam)->capture_default_str();

  // sweep
  auto* sw = app.add_subcommand("sweep", "PER over a grid of dynamics and encoder depths");
  std::string sw_manifest, sw_eval, sw_out, sw_dir;
  std::vector<std::string> sw_dyn{"vanilla", "second-order"};
  std::vector<std::size_t> sw_layers{1, 2};
  std::size_t sw_beam = 5;
  TrainFlags sw_flags;
  sw->add_option("--manifest", sw_manifest)->required();
  sw->add_option("--eval-manifest", sw_eval)->required();
  sw->add_option("--dynamics-list", sw_dyn)->delimiter(',')->capture_default_str();
  sw->add_option("--layers-list", sw_layers)->delimiter(',')->capture_default_str();
  sw->add_option("--beam", sw_beam)->capture_default_str();
  sw->add_option("--out", sw_out, "grid CSV")->required();
  sw->add_option("--work-dir", sw_dir, "checkpoints per grid cell; defaults next to --out");
  sw_flags.add(sw, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim) {
      dynamics::DynamicsSpec spec = dynamics::DynamicsSpec::make(dynamics::parse_kind(sim_dyn));
      if (!sim_params.empty()) {
        for (const auto& [k, v] : read_kv_file(sim_params)) set_dynamics_key(spec, k, v);
      }
      spec.validate();
      std::vector<double> currents;
      if (sim_wave == "constant") {
        currents.assign(sim_steps, sim_max);
      } else if (sim_wave == "triangle") {
        if (!(sim_min < sim_max)) throw UsageError("triangle wave needs --min < --max");
        if (sim_period < 2) throw UsageError("triangle wave needs --period >= 2");
        currents = dynamics::triangle_wave(sim_min, sim_max, sim_period, sim_steps);
      } else {
        throw UsageError("--wave must be 'constant' or 'triangle', got '" + sim_wave + "'");
      }
      const auto trace = dynamics::simulate(spec, currents);
      std::ostringstream csv;
      dynamics::write_trace_csv(csv, trace);
      emit(sim_out, csv.str(), out);
      const json summary = dynamics::trace_summary_json(spec, trace);
      if (!sim_summary.empty()) write_json(sim_summary, summary);
      if (!sim_out.empty() && sim_out != "-") out << summary.dump() << '\n';
    } else if (*phase) {
      dynamics::DynamicsSpec spec = dynamics::DynamicsSpec::make(dynamics::Kind::SecondOrder);
      spec.a = ph_a;
      spec.b = ph_b;
      spec.c = ph_c;
      const json j = dynamics::to_json(dynamics::fixed_points(spec, ph_i));
      emit(ph_out, j.dump(2) + "\n", out);
    } else if (*gen) {
      const training::SynthCorpus c = training::synth_corpus(so);
      training::save_manifest(fs::path(gen_dir) / "train.json", c.train);
      if (so.n_eval > 0) training::save_manifest(fs::path(gen_dir) / "eval.json", c.eval);
      out << json{{"train", c.train.utterances.size()}, {"eval", c.eval.utterances.size()}, {"out_dir", gen_dir}}.dump()
          << '\n';
    } else if (*tr) {
      const TrainSetup setup = tr_flags.resolve(training::load_manifest(tr_manifest));
      Prepared p = prepare(tr_manifest, tr_eval, setup);
      write_json(fs::path(tr_dir) / "cmvn.json", p.bundle.cmvn.to_json());
      write_text(fs::path(tr_dir) / "model.cfg", p.bundle.config.to_kv());
      const auto r = training::train(p.train, p.bundle, setup.options, tr_dir,
                                     p.validation ? &*p.validation : nullptr);
      json j = {{"final_checkpoint", r.final_checkpoint.string()},
                {"best_checkpoint", r.best_checkpoint.string()},
                {"steps", r.log.size()},
                {"final_total", r.log.empty() ? 0.0 : r.log.back().total}};
      if (r.best_per) j["best_per"] = *r.best_per;
      out << j.dump() << '\n';
    } else if (*ev) {
      if (ev_beam < 1) throw UsageError("--beam must be >= 1");
      const auto sys = training::load_system(ev_ckpt);
      const auto m = load_normalized(ev_manifest, sys);
      const auto r = training::evaluate(*sys.model, sys.bundle.spec, m, ev_beam);
      json j = r.to_json();
      j["beam"] = ev_beam;
      j["dynamics"] = std::string(dynamics::to_string(sys.bundle.spec.kind));
      if (ev_noise_opt->count()) {
        const auto rob = training::robustness_eval(*sys.model, sys.bundle.spec, m, ev_noise, ev_seed, ev_beam);
        j["noise_high"] = ev_noise;
        j["robustness"] = rob.to_json();
      }
      emit(ev_out, j.dump(2) + "\n", out);
    } else if (*seg) {
      const auto sys = training::load_system(sg_ckpt);
      const auto m = load_normalized(sg_manifest, sys);
      const training::Utterance& u = m.find(sg_utt);
      const auto s = training::segment(*sys.model, sys.bundle.spec, u.features, sg_beam);
      std::ostringstream csv;
      csv << "frame,current,potential,spike\n";
      for (std::size_t t = 0; t < s.trace.currents.size(); ++t) {
        csv << t << ',' << format_double(s.trace.currents[t]) << ',' << format_double(s.trace.potentials[t]) << ','
            << (s.trace.spikes[t] ? 1 : 0) << '\n';
      }
      write_text(sg_out, csv.str());
      json j = {{"utt_id", u.id},
                {"encoder_frames", s.encoder_frames},
                {"input_frames", u.features.rows},
                {"boundary_frames", s.trace.boundary_frames},
                {"input_boundaries", s.input_boundaries},
                {"reference_boundaries", u.boundaries},
                {"hypothesis", s.hypothesis},
                {"reference", u.tokens}};
      const fs::path jpath = sg_json.empty() ? fs::path(sg_out).replace_extension(".json") : fs::path(sg_json);
      write_json(jpath, j);
      out << j.dump() << '\n';
    } else if (*sw) {
      const training::Manifest probe = training::load_manifest(sw_manifest);
      const fs::path work = sw_dir.empty() ? fs::path(sw_out).parent_path() / "sweep" : fs::path(sw_dir);
      std::ostringstream csv;
      csv << "dynamics,enc_blocks,per_mean,per_std,boundary_recall,spikes_per_utt\n";
      for (const auto& dname : sw_dyn) {
        for (std::size_t layers : sw_layers) {
          TrainSetup setup = sw_flags.resolve(probe);
          setup.kind = dynamics::parse_kind(dname);
          setup.model.n_enc_blocks = layers;
          setup.model.validate();
          Prepared p = prepare(sw_manifest, sw_eval, setup);
          const fs::path cell = work / (dname + "_L" + std::to_string(layers));
          const auto r = training::train(p.train, p.bundle, setup.options, cell, &*p.validation);
          const auto sys = training::load_system(r.final_checkpoint);
          const auto e = training::evaluate(*sys.model, sys.bundle.spec, *p.validation, sw_beam);
          csv << dname << ',' << layers << ',' << format_double(e.per_mean) << ',' << format_double(e.per_std) << ','
              << format_double(e.boundary_recall) << ',' << format_double(e.spikes_per_utt) << '\n';
        }
      }
      write_text(sw_out, csv.str());
      out << csv.str();
    }
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace spikeseg::cli
