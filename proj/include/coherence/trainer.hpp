// Copyright 2026 The Coherence Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Training loop for the three regimes:
//
//   pairwise     hinge loss on one negative per instance
//   contrastive  margin softmax loss on N negatives per instance
//   full         contrastive loss on N mined hard negatives, plus the
//                momentum-queue loss, combined with weight lambda
//
// All randomness is derived statelessly from (seed, purpose, position), so a
// run restored from a checkpoint continues bit-identically.

#pragma once

#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coherence/common.hpp"
#include "coherence/config.hpp"
#include "coherence/evalsuite.hpp"
#include "coherence/io.hpp"
#include "coherence/miner.hpp"
#include "coherence/momentum.hpp"
#include "coherence/objectives.hpp"
#include "coherence/scorer.hpp"
#include "coherence/taskgen.hpp"

namespace coherence {

enum class Regime { kPairwise, kContrastive, kFull };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::kPairwise: return "pairwise";
    case Regime::kContrastive: return "contrastive";
    case Regime::kFull: return "full";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "pairwise") return Regime::kPairwise;
  if (s == "contrastive") return Regime::kContrastive;
  if (s == "full") return Regime::kFull;
  throw UsageError("unknown regime '" + s + "'");
}

struct TrainerConfig {
  Regime regime = Regime::kPairwise;
  double tau = 0.1;
  std::size_t negatives = 5;  // N
  MinerConfig miner;
  std::size_t queue_size = 1000;
  double mu = 0.9999999;
  double lambda = 0.85;
  double learning_rate = 5e-6;
  double lr_floor = 1e-6;
  // 0 selects the regime default: 5000 (pairwise, contrastive), 1000 (full).
  std::size_t anneal_steps = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clipping; 0 disables
  std::size_t batch_size = 1;
  std::size_t max_steps = 1000;
  std::size_t eval_every = 1000;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;
  // Hard-negative mining. Unset means: on for full, off otherwise. Turning it
  // on for the contrastive regime is the mining-without-momentum ablation.
  std::optional<bool> mining;
  bool swa_average = false;
  // When non-empty, best-on-dev and last checkpoints are written here.
  std::string output_dir;

  std::size_t effective_anneal_steps() const {
    if (anneal_steps) return anneal_steps;
    return regime == Regime::kFull ? 1000 : 5000;
  }
  bool mining_enabled() const { return mining.value_or(regime == Regime::kFull); }

  void validate() const {
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw UsageError("tau must be finite and >= 0");
    if (negatives < 1) throw UsageError("negatives must be >= 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must be in [0, 1]");
    MomentumEncoder::check_mu(mu);
    if (queue_size < 1) throw UsageError("queue_size must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (eval_every < 1) throw UsageError("eval_every must be >= 1");
    if (!(learning_rate > 0.0) || !(lr_floor >= 0.0))
      throw UsageError("learning rates must be positive");
    if (mining_enabled()) {
      if (regime == Regime::kPairwise)
        throw UsageError("hard-negative mining needs the contrastive or full regime");
      if (miner.n != negatives)
        throw UsageError("miner N must equal the number of training negatives");
      miner.validate();
    }
  }
};

inline KeyValues to_key_values(const TrainerConfig& c) {
  KeyValues kv;
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("regime", to_string(c.regime));
  kv.set("tau", num(c.tau));
  kv.set("negatives", std::to_string(c.negatives));
  kv.set("h", std::to_string(c.miner.h));
  kv.set("x", std::to_string(c.miner.x));
  kv.set("queue_size", std::to_string(c.queue_size));
  kv.set("mu", num(c.mu));
  kv.set("lambda", num(c.lambda));
  kv.set("lr", num(c.learning_rate));
  kv.set("lr_floor", num(c.lr_floor));
  kv.set("anneal_steps", std::to_string(c.anneal_steps));
  kv.set("weight_decay", num(c.weight_decay));
  kv.set("beta1", num(c.beta1));
  kv.set("beta2", num(c.beta2));
  kv.set("adam_eps", num(c.adam_eps));
  kv.set("grad_clip", num(c.grad_clip));
  kv.set("batch_size", std::to_string(c.batch_size));
  kv.set("max_steps", std::to_string(c.max_steps));
  kv.set("eval_every", std::to_string(c.eval_every));
  kv.set("seed", std::to_string(c.seed));
  kv.set("freeze_encoder", c.freeze_encoder ? "true" : "false");
  if (c.mining) kv.set("mining", *c.mining ? "true" : "false");
  kv.set("swa", c.swa_average ? "true" : "false");
  return kv;
}

inline TrainerConfig trainer_config_from(const KeyValues& kv, TrainerConfig c = {}) {
  c.regime = parse_regime(kv.get_string("regime", to_string(c.regime)));
  c.tau = kv.get("tau", c.tau);
  c.negatives = kv.get("negatives", c.negatives);
  c.miner.n = c.negatives;
  c.miner.h = kv.get("h", c.miner.h);
  c.miner.x = kv.get("x", c.miner.x);
  c.queue_size = kv.get("queue_size", c.queue_size);
  c.mu = kv.get("mu", c.mu);
  c.lambda = kv.get("lambda", c.lambda);
  c.learning_rate = kv.get("lr", c.learning_rate);
  c.lr_floor = kv.get("lr_floor", c.lr_floor);
  c.anneal_steps = kv.get("anneal_steps", c.anneal_steps);
  c.weight_decay = kv.get("weight_decay", c.weight_decay);
  c.beta1 = kv.get("beta1", c.beta1);
  c.beta2 = kv.get("beta2", c.beta2);
  c.adam_eps = kv.get("adam_eps", c.adam_eps);
  c.grad_clip = kv.get("grad_clip", c.grad_clip);
  c.batch_size = kv.get("batch_size", c.batch_size);
  c.max_steps = kv.get("max_steps", c.max_steps);
  c.eval_every = kv.get("eval_every", c.eval_every);
  c.seed = kv.get("seed", c.seed);
  c.freeze_encoder = kv.get("freeze_encoder", c.freeze_encoder);
  if (kv.has("mining")) c.mining = kv.get("mining", false);
  c.swa_average = kv.get("swa", c.swa_average);
  if (c.batch_size > 1)
    warn("batch_size " + std::to_string(c.batch_size) +
         " > 1 departs from the reference setup; a mining block of x steps now "
         "covers x * batch_size instances");
  return c;
}

inline BackboneConfig backbone_config_from(const KeyValues& kv, BackboneConfig c = {}) {
  c.kind = parse_backbone_kind(kv.get_string("backbone", to_string(c.kind)));
  if (c.kind == BackboneKind::kPretrained) c = BackboneConfig::pretrained_base();
  c.vocab_size = kv.get("backbone.vocab_size", c.vocab_size);
  c.d = kv.get("backbone.d", c.d);
  c.layers = kv.get("backbone.layers", c.layers);
  c.heads = kv.get("backbone.heads", c.heads);
  c.ffn = kv.get("backbone.ffn", c.ffn);
  c.max_tokens = kv.get("backbone.max_tokens", c.max_tokens);
  c.max_sentences = kv.get("backbone.max_sentences", c.max_sentences);
  c.use_positions = kv.get("backbone.use_positions", c.use_positions);
  c.dropout = kv.get("backbone.dropout", c.dropout);
  c.init_std = kv.get("backbone.init_std", c.init_std);
  c.seed = kv.get("backbone.seed", c.seed);
  c.weights_dir = kv.get_string("backbone.weights_dir", c.weights_dir);
  return c;
}

inline KeyValues to_key_values(const BackboneConfig& c) {
  KeyValues kv;
  std::ostringstream init_std;
  init_std.precision(17);
  init_std << c.init_std;
  std::ostringstream dropout;
  dropout.precision(17);
  dropout << c.dropout;
  kv.set("backbone", to_string(c.kind));
  kv.set("backbone.vocab_size", std::to_string(c.vocab_size));
  kv.set("backbone.d", std::to_string(c.d));
  kv.set("backbone.layers", std::to_string(c.layers));
  kv.set("backbone.heads", std::to_string(c.heads));
  kv.set("backbone.ffn", std::to_string(c.ffn));
  kv.set("backbone.max_tokens", std::to_string(c.max_tokens));
  kv.set("backbone.max_sentences", std::to_string(c.max_sentences));
  kv.set("backbone.use_positions", c.use_positions ? "true" : "false");
  kv.set("backbone.dropout", dropout.str());
  kv.set("backbone.init_std", init_std.str());
  kv.set("backbone.seed", std::to_string(c.seed));
  if (!c.weights_dir.empty()) kv.set("backbone.weights_dir", c.weights_dir);
  return kv;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule and optimizer

// Linear anneal from `start` to `floor` over `anneal_steps`, then constant.
inline double scheduled_lr(std::size_t step, double start, double floor,
                           std::size_t anneal_steps) {
  if (anneal_steps == 0 || step >= anneal_steps) return floor;
  const double frac = static_cast<double>(step) / static_cast<double>(anneal_steps);
  return start + (floor - start) * frac;
}

inline double scheduled_lr(const TrainerConfig& c, std::size_t step) {
  return scheduled_lr(step, c.learning_rate, c.lr_floor, c.effective_anneal_steps());
}

// AdamW with decoupled weight decay over any number of parameter groups.
class AdamW {
 public:
  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Moment buffers for one group. Parameters are passed to each step rather
  // than held here, so the owner of the parameters stays freely movable.
  void add_group(const ParamSet& params) {
    groups_.push_back({params.zeros_like(), params.zeros_like()});
  }

  std::size_t steps() const { return t_; }

  void step(std::span<ParamSet* const> params, std::span<ParamSet* const> grads, double lr) {
    if (params.size() != groups_.size() || grads.size() != groups_.size())
      throw std::invalid_argument("parameter or gradient groups do not match optimizer groups");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      auto& grp = groups_[g];
      if (!params[g]->same_shape(grp.m))
        throw ShapeMismatch("parameter group " + std::to_string(g) + " does not match optimizer state");
      for (std::size_t i = 0; i < params[g]->size(); ++i) {
        Matrix& p = (*params[g])[i].value;
        const Matrix& gr = (*grads[g])[i].value;
        Matrix& m = grp.m[i].value;
        Matrix& v = grp.v[i].value;
        m = beta1_ * m + (1.0 - beta1_) * gr;
        v = beta2_ * v + (1.0 - beta2_) * gr.cwiseProduct(gr);
        p *= 1.0 - lr * weight_decay_;
        p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
      }
    }
  }

  void save(const fs::path& dir, const std::string& prefix) const {
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      write_params(groups_[g].m, (dir / (prefix + std::to_string(g) + ".m.bin")).string());
      write_params(groups_[g].v, (dir / (prefix + std::to_string(g) + ".v.bin")).string());
    }
  }

  void load(const fs::path& dir, const std::string& prefix, std::size_t t) {
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      assign_params(groups_[g].m,
                    read_params((dir / (prefix + std::to_string(g) + ".m.bin")).string()),
                    "optimizer state");
      assign_params(groups_[g].v,
                    read_params((dir / (prefix + std::to_string(g) + ".v.bin")).string()),
                    "optimizer state");
    }
    t_ = t;
  }

 private:
  struct Group {
    ParamSet m, v;
  };
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.01;
  std::size_t t_ = 0;
  std::vector<Group> groups_;
};

// ---------------------------------------------------------------------------
// Per-instance objective

struct Gradients {
  ParamSet encoder;
  ParamSet head;

  static Gradients zeros_for(const Scorer& s) {
    return {s.encoder().params().zeros_like(), s.head().params().zeros_like()};
  }
  void set_zero() {
    encoder.set_zero();
    head.set_zero();
  }
  double squared_norm() const { return encoder.squared_norm() + head.squared_norm(); }
};

// Momentum-side inputs; both are constants with respect to theta.
struct MomentumInputs {
  Vector z_pos_m;
  std::span<const Vector> queue;
};

struct ObjectiveValue {
  double loss = 0.0;
  double contrastive = 0.0;  // pairwise hinge for the pairwise regime
  double momentum = std::numeric_limits<double>::quiet_NaN();
  bool momentum_active = false;
  double score_pos = 0.0;
  std::vector<double> score_negs;
  Vector z_pos;
};

// Loss of one instance under `regime`. When `grads` is non-null, adds
// grad_scale * dLoss/dtheta into it (encoder part skipped if frozen). The
// momentum term is used when regime is full and the queue is non-empty;
// otherwise lambda is renormalized to 1.
inline ObjectiveValue instance_objective(const Scorer& scorer, Regime regime,
                                         const Document& positive,
                                         std::span<const Document> negatives,
                                         const MomentumInputs* mom, double tau,
                                         double lambda, Gradients* grads = nullptr,
                                         double grad_scale = 1.0, bool freeze_encoder = false,
                                         Rng* dropout_rng = nullptr) {
  if (negatives.empty()) throw ShapeMismatch("instance has no negatives");
  const bool trace = grads && !freeze_encoder;
  std::vector<Encoder::Trace> traces;
  std::vector<Vector> zs;
  auto run = [&](const Document& d) {
    if (trace) {
      traces.push_back(scorer.encoder().trace(d, dropout_rng));
      zs.push_back(traces.back().z_value);
    } else {
      zs.push_back(scorer.encoder().encode(d).z);
    }
  };
  run(positive);
  for (const auto& n : negatives) run(n);

  ObjectiveValue out;
  out.z_pos = zs[0];
  out.score_pos = scorer.head().apply(zs[0]);
  for (std::size_t j = 1; j < zs.size(); ++j)
    out.score_negs.push_back(scorer.head().apply(zs[j]));

  double d_pos = 0.0;
  std::vector<double> d_negs;
  if (regime == Regime::kPairwise) {
    auto l = pairwise_loss_grad(out.score_pos, out.score_negs[0], tau);
    out.contrastive = l.value;
    d_pos = l.d_pos;
    d_negs.assign(out.score_negs.size(), 0.0);
    d_negs[0] = l.d_neg;
  } else {
    auto l = contrastive_loss_grad(out.score_pos, out.score_negs, tau);
    out.contrastive = l.value;
    d_pos = l.d_pos;
    d_negs = l.d_negs;
  }

  double weight = 1.0;
  Vector dz_mom;
  if (regime == Regime::kFull && mom && !mom->queue.empty()) {
    auto m = momentum_loss_grad(zs[0], mom->z_pos_m, mom->queue, tau);
    out.momentum = m.value;
    out.momentum_active = true;
    weight = lambda;
    out.loss = combined_loss(out.contrastive, out.momentum, lambda);
    dz_mom = (1.0 - lambda) * m.d_z_pos;
  } else {
    out.loss = out.contrastive;
  }
  if (!grads) return out;

  const double s = grad_scale * weight;
  scorer.head().accumulate(zs[0], s * d_pos, grads->head);
  for (std::size_t j = 0; j < d_negs.size(); ++j)
    scorer.head().accumulate(zs[j + 1], s * d_negs[j], grads->head);
  if (!trace) return out;

  const Vector w = scorer.head().w();
  Vector dz_pos = s * d_pos * w;
  if (dz_mom.size()) dz_pos += grad_scale * dz_mom;
  Encoder::backward(traces[0], dz_pos, grads->encoder);
  for (std::size_t j = 0; j < d_negs.size(); ++j) {
    if (d_negs[j] == 0.0) continue;
    Encoder::backward(traces[j + 1], (s * d_negs[j]) * w, grads->encoder);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training log

struct StepRecord {
  std::size_t step = 0;  // 1-based count of completed gradient steps
  double loss = 0.0;
  double loss_contrastive = 0.0;
  double loss_momentum = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  bool operator==(const StepRecord& o) const {
    auto same = [](double a, double b) {
      return double_bits(a) == double_bits(b) || (std::isnan(a) && std::isnan(b));
    };
    return step == o.step && same(loss, o.loss) &&
           same(loss_contrastive, o.loss_contrastive) &&
           same(loss_momentum, o.loss_momentum) && same(lr, o.lr);
  }
};

struct EvalRecord {
  std::size_t step = 0;
  double dev_accuracy = 0.0;
};

struct TrainLog {
  std::string regime;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  double wall_seconds = 0.0;

  std::optional<EvalRecord> best_eval() const {
    std::optional<EvalRecord> best;
    for (const auto& e : evals)
      if (!best || e.dev_accuracy > best->dev_accuracy) best = e;
    return best;
  }
};

// JSON lines: {"type":"step",...} and {"type":"eval",...}. Doubles are
// written with round-trip precision; a NaN momentum loss is written as null.
inline void write_train_log(const TrainLog& log, std::ostream& out) {
  out << nlohmann::json{{"type", "header"}, {"regime", log.regime}}.dump() << "\n";
  std::size_t e = 0;
  auto flush_evals = [&](std::size_t upto) {
    for (; e < log.evals.size() && log.evals[e].step <= upto; ++e)
      out << nlohmann::json{{"type", "eval"},
                            {"step", log.evals[e].step},
                            {"dev_accuracy", log.evals[e].dev_accuracy}}
                 .dump()
          << "\n";
  };
  for (const auto& s : log.steps) {
    flush_evals(s.step - 1);
    nlohmann::json j{{"type", "step"},
                     {"step", s.step},
                     {"loss", s.loss},
                     {"loss_contrastive", s.loss_contrastive},
                     {"lr", s.lr}};
    j["loss_momentum"] =
        std::isnan(s.loss_momentum) ? nlohmann::json(nullptr) : nlohmann::json(s.loss_momentum);
    out << j.dump() << "\n";
  }
  flush_evals(std::numeric_limits<std::size_t>::max());
}

inline TrainLog read_train_log(std::istream& in) {
  TrainLog log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "header") {
        log.regime = j.at("regime").get<std::string>();
      } else if (type == "step") {
        StepRecord s;
        s.step = j.at("step").get<std::size_t>();
        s.loss = j.at("loss").get<double>();
        s.loss_contrastive = j.at("loss_contrastive").get<double>();
        if (!j.at("loss_momentum").is_null()) s.loss_momentum = j["loss_momentum"].get<double>();
        s.lr = j.at("lr").get<double>();
        log.steps.push_back(s);
      } else if (type == "eval") {
        log.evals.push_back({j.at("step").get<std::size_t>(),
                             j.at("dev_accuracy").get<double>()});
      }
    } catch (const std::exception& e) {
      throw DataError("train log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

inline TrainLog read_train_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read train log: " + path);
  return read_train_log(in);
}

// Hooks for observing the loop, mainly for tests.
class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  virtual void on_step(std::size_t /*step*/, const StepRecord&) {}
  // Selections for `block_index` were computed after `completed_steps` steps.
  virtual void on_mining(std::size_t /*block_index*/, std::size_t /*completed_steps*/) {}
  virtual void on_eval(const EvalRecord&) {}
};

// Fingerprint of a dataset's content, stored in checkpoints.
inline std::string dataset_fingerprint(const std::vector<TrainingInstance>& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& inst : data) {
    h = fnv1a64(instance_to_json(inst).dump(), h);
    for (const auto& s : inst.positive.sentences) h = fnv1a64(s, h);
  }
  return hex64(h);
}

// ---------------------------------------------------------------------------
// Trainer

inline constexpr int kTrainerCheckpointVersion = 1;

class Trainer {
 public:
  Trainer(TrainerConfig config, Scorer scorer, std::vector<TrainingInstance> dataset,
          std::vector<EvalPair> dev = {})
      : config_(std::move(config)),
        scorer_(std::move(scorer)),
        dataset_(std::move(dataset)),
        dev_(std::move(dev)) {
    config_.validate();
    check_dataset();
    log_.regime = to_string(config_.regime);
    optimizer_ = AdamW(config_.beta1, config_.beta2, config_.adam_eps, config_.weight_decay);
    if (!config_.freeze_encoder) optimizer_.add_group(scorer_.encoder().params());
    optimizer_.add_group(scorer_.head().params());
    grads_ = Gradients::zeros_for(scorer_);
    if (config_.regime == Regime::kFull) {
      momentum_ = init_momentum(scorer_, config_.mu);
      queue_ = NegativeQueue(config_.queue_size, scorer_.dim());
    }
  }

  const TrainerConfig& config() const { return config_; }
  TrainerConfig& mutable_config() { return config_; }
  const Scorer& scorer() const { return scorer_; }
  Scorer& scorer() { return scorer_; }
  const TrainLog& log() const { return log_; }
  std::size_t step_count() const { return step_; }
  const std::optional<MomentumEncoder>& momentum() const { return momentum_; }
  const std::optional<NegativeQueue>& queue() const { return queue_; }
  const MiningState& mining_state() const { return mining_; }
  const Gradients& last_gradients() const { return grads_; }
  void set_observer(TrainObserver* obs) { observer_ = obs; }

  // Dataset instance used at global position p (epoch-wise shuffled).
  std::size_t instance_at(std::size_t position) {
    const std::size_t epoch = position / dataset_.size();
    if (epoch != order_epoch_ || order_.empty()) {
      order_.resize(dataset_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Rng rng = stream(config_.seed, "epoch", epoch);
      rng.shuffle(order_.begin(), order_.end());
      order_epoch_ = epoch;
    }
    return order_[position % dataset_.size()];
  }

  // One gradient step over batch_size instances.
  StepRecord step() {
    if (config_.mining_enabled() && step_ == 0 && mining_.selections.empty()) init_mining();
    grads_.set_zero();
    const double lr = scheduled_lr(config_, step_);
    const double scale = 1.0 / static_cast<double>(config_.batch_size);
    StepRecord rec;
    rec.step = step_ + 1;
    rec.lr = lr;
    double mom_sum = 0.0;
    std::size_t mom_count = 0;
    std::vector<Vector> pending;

    for (std::size_t b = 0; b < config_.batch_size; ++b) {
      const std::size_t pos = step_ * config_.batch_size + b;
      const TrainingInstance& inst = dataset_[instance_at(pos)];
      std::vector<Document> negs;
      for (auto i : negatives_for(pos, inst)) negs.push_back(inst.negative(i));

      std::optional<MomentumInputs> mom;
      std::vector<Vector> queue_snapshot;
      if (config_.regime == Regime::kFull) {
        Rng slice_rng = stream(config_.seed, "slice", pos);
        Document slice = slice_positive(inst.positive, slice_rng);
        queue_snapshot = queue_->snapshot();
        mom = MomentumInputs{momentum_->encode(slice).z, queue_snapshot};
        for (const auto& n : negs) pending.push_back(momentum_->encode(n).z);
      }
      Rng dropout_rng = stream(config_.seed, "dropout", pos);
      ObjectiveValue v;
      try {
        v = instance_objective(scorer_, config_.regime, inst.positive, negs,
                               mom ? &*mom : nullptr, config_.tau, config_.lambda, &grads_,
                               scale, config_.freeze_encoder, &dropout_rng);
      } catch (const std::invalid_argument&) {
        // Non-finite scores or representations.
        v.loss = std::numeric_limits<double>::quiet_NaN();
      } catch (const NonFiniteValue&) {
        v.loss = std::numeric_limits<double>::quiet_NaN();
      }
      rec.loss += scale * v.loss;
      rec.loss_contrastive += scale * v.contrastive;
      if (v.momentum_active) mom_sum += v.momentum, ++mom_count;
    }
    if (mom_count) rec.loss_momentum = mom_sum / static_cast<double>(mom_count);

    if (!std::isfinite(rec.loss) || !std::isfinite(grads_.squared_norm())) {
      if (!config_.output_dir.empty())
        save_checkpoint(fs::path(config_.output_dir) / "diverged");
      throw TrainingDiverged("non-finite loss at step " + std::to_string(rec.step));
    }

    if (config_.grad_clip > 0.0) {
      const double norm = std::sqrt(grads_.squared_norm());
      if (norm > config_.grad_clip) {
        const double f = config_.grad_clip / norm;
        for (auto& t : grads_.encoder) t.value *= f;
        for (auto& t : grads_.head) t.value *= f;
      }
    }
    std::vector<ParamSet*> params, groups;
    if (!config_.freeze_encoder) {
      params.push_back(&scorer_.encoder().params());
      groups.push_back(&grads_.encoder);
    }
    params.push_back(&scorer_.head().params());
    groups.push_back(&grads_.head);
    optimizer_.step(params, groups, lr);
    if (!scorer_.all_finite()) {
      if (!config_.output_dir.empty())
        save_checkpoint(fs::path(config_.output_dir) / "diverged");
      throw TrainingDiverged("non-finite parameters after step " + std::to_string(rec.step));
    }

    if (config_.regime == Regime::kFull) {
      momentum_update(*momentum_, scorer_.encoder().params());
      queue_->enqueue(pending);
    }
    ++step_;
    log_.steps.push_back(rec);
    if (observer_) observer_->on_step(step_, rec);

    if (config_.mining_enabled() && step_ % config_.miner.x == 0) advance_mining();
    if (!dev_.empty() && step_ % config_.eval_every == 0) evaluate_dev();
    return rec;
  }

  // Runs until `max_steps` steps have been taken in total.
  void run_until(std::size_t max_steps) {
    const auto start = std::chrono::steady_clock::now();
    while (step_ < max_steps) step();
    log_.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  // Full run: trains to config.max_steps, evaluates at the end if the last
  // step was not an evaluation point, applies optional weight averaging, and
  // writes the "last" checkpoint.
  void run() {
    run_until(config_.max_steps);
    if (!dev_.empty() && (log_.evals.empty() || log_.evals.back().step != step_))
      evaluate_dev();
    if (config_.swa_average && swa_count_ > 0) apply_average();
    if (!config_.output_dir.empty()) save_checkpoint(fs::path(config_.output_dir) / "last");
  }

  double evaluate_dev() {
    const double acc = *pairwise_accuracy(scorer_, dev_).value;
    EvalRecord e{step_, acc};
    const bool improved = !best_dev_ || acc > *best_dev_;
    log_.evals.push_back(e);
    if (observer_) observer_->on_eval(e);
    if (improved) {
      best_dev_ = acc;
      if (!config_.output_dir.empty())
        save_checkpoint(fs::path(config_.output_dir) / "best");
    }
    if (config_.swa_average && step_ >= config_.effective_anneal_steps()) accumulate_average();
    return acc;
  }

  // ---- checkpoints ------------------------------------------------------

  void save_checkpoint(const fs::path& dir) const {
    write_directory_atomically(dir, [&](const fs::path& tmp) {
      save_scorer(scorer_, tmp / "scorer");
      optimizer_.save(tmp, "optimizer.group");
      if (momentum_) write_params(momentum_->params(), (tmp / "momentum.bin").string());
      if (queue_) {
        ParamSet q;
        Matrix m(static_cast<Eigen::Index>(queue_->size()), static_cast<Eigen::Index>(queue_->dim()));
        Eigen::Index r = 0;
        for (const auto& e : queue_->entries()) m.row(r++) = e.transpose();
        q.add("queue", std::move(m));
        write_params(q, (tmp / "queue.bin").string());
      }
      if (swa_count_ > 0) {
        write_params(swa_.encoder, (tmp / "swa.encoder.bin").string());
        write_params(swa_.head, (tmp / "swa.head.bin").string());
      }
      nlohmann::json state{{"format_version", kTrainerCheckpointVersion},
                           {"step", step_},
                           {"optimizer_steps", optimizer_.steps()},
                           {"config", to_key_values(config_).values()},
                           {"dataset_fingerprint", fingerprint()},
                           {"mining",
                            {{"block_index", mining_.block_index},
                             {"selections", mining_.selections}}},
                           {"swa_count", swa_count_}};
      state["best_dev"] = best_dev_ ? nlohmann::json(double_bits(*best_dev_)) : nlohmann::json(nullptr);
      write_json(state, (tmp / "trainer.json").string());
      std::ofstream log_out(tmp / "train_log.jsonl");
      write_train_log(log_, log_out);
    });
  }

  // Restores a trainer. Settings in `overrides` (e.g. max_steps) replace the
  // saved configuration; the dataset must be the one the run started with.
  static Trainer load_checkpoint(const fs::path& dir, std::vector<TrainingInstance> dataset,
                                 std::vector<EvalPair> dev = {},
                                 const KeyValues* overrides = nullptr) {
    const auto state = read_json((dir / "trainer.json").string());
    const int version = state.at("format_version").get<int>();
    if (version != kTrainerCheckpointVersion)
      throw VersionMismatch("trainer checkpoint version " + std::to_string(version) +
                            " is not supported (expected " +
                            std::to_string(kTrainerCheckpointVersion) + ")");
    KeyValues kv;
    for (const auto& [k, v] : state.at("config").items()) kv.set(k, v.get<std::string>());
    if (overrides)
      for (const auto& [k, v] : overrides->values()) kv.set(k, v);
    TrainerConfig config = trainer_config_from(kv);
    if (overrides && overrides->has("output_dir"))
      config.output_dir = overrides->get_string("output_dir", "");
    Trainer t(config, load_scorer(dir / "scorer"), std::move(dataset), std::move(dev));
    if (t.fingerprint() != state.at("dataset_fingerprint").get<std::string>())
      throw DataError("checkpoint " + dir.string() + " was trained on a different dataset");
    t.step_ = state.at("step").get<std::size_t>();
    t.optimizer_.load(dir, "optimizer.group", state.at("optimizer_steps").get<std::size_t>());
    if (t.momentum_)
      assign_params(t.momentum_->params(), read_params((dir / "momentum.bin").string()),
                    "momentum encoder");
    if (t.queue_) {
      ParamSet q = read_params((dir / "queue.bin").string());
      std::vector<Vector> entries;
      for (Eigen::Index r = 0; r < q[0].value.rows(); ++r)
        entries.push_back(q[0].value.row(r).transpose());
      t.queue_->restore(std::move(entries));
    }
    t.mining_.block_index = state.at("mining").at("block_index").get<std::size_t>();
    t.mining_.selections =
        state.at("mining").at("selections").get<std::vector<std::vector<std::size_t>>>();
    t.swa_count_ = state.at("swa_count").get<std::size_t>();
    if (t.swa_count_ > 0) {
      t.swa_ = Gradients::zeros_for(t.scorer_);
      assign_params(t.swa_.encoder, read_params((dir / "swa.encoder.bin").string()), "swa");
      assign_params(t.swa_.head, read_params((dir / "swa.head.bin").string()), "swa");
    }
    if (!state.at("best_dev").is_null())
      t.best_dev_ = bits_double(state.at("best_dev").get<std::uint64_t>());
    std::ifstream log_in(dir / "train_log.jsonl");
    if (log_in) t.log_ = read_train_log(log_in);
    return t;
  }

  std::string fingerprint() const {
    if (fingerprint_.empty()) fingerprint_ = dataset_fingerprint(dataset_);
    return fingerprint_;
  }

 private:
  void check_dataset() const {
    if (dataset_.empty()) throw ShapeMismatch("training dataset is empty");
    const std::size_t need = config_.mining_enabled() ? config_.miner.h
                             : config_.regime == Regime::kPairwise ? 1
                                                                   : config_.negatives;
    for (const auto& inst : dataset_)
      if (inst.negative_count() < need)
        throw ShapeMismatch("instance of '" + inst.positive.id + "' has " +
                            std::to_string(inst.negative_count()) +
                            " negatives; regime " + to_string(config_.regime) +
                            (config_.mining_enabled() ? " with mining" : "") + " needs " +
                            std::to_string(need));
    if (config_.regime == Regime::kFull)
      for (const auto& inst : dataset_)
        if (inst.positive.size() < 4)
          throw ShapeMismatch("full regime needs positives with >= 4 sentences");
  }

  // Candidate indices trained on at `position`.
  std::vector<std::size_t> negatives_for(std::size_t position, const TrainingInstance& inst) {
    if (config_.mining_enabled()) {
      const std::size_t block_len = config_.miner.x * config_.batch_size;
      return mining_.selections.at(position - mining_.block_index * block_len);
    }
    const std::size_t want = config_.regime == Regime::kPairwise ? 1 : config_.negatives;
    if (inst.negative_count() == want) {
      std::vector<std::size_t> all(want);
      std::iota(all.begin(), all.end(), std::size_t{0});
      return all;
    }
    Rng rng = stream(config_.seed, "pick", position);
    return rng.sample_without_replacement(inst.negative_count(), want);
  }

  std::vector<const TrainingInstance*> block_instances(std::size_t block) {
    const std::size_t block_len = config_.miner.x * config_.batch_size;
    std::vector<const TrainingInstance*> out;
    for (std::size_t p = block * block_len; p < (block + 1) * block_len; ++p)
      out.push_back(&dataset_[instance_at(p)]);
    return out;
  }

  // Candidate pools are the first h negatives of each instance.
  std::vector<TrainingInstance> truncated_pools(
      const std::vector<const TrainingInstance*>& block) const {
    std::vector<TrainingInstance> out;
    for (const auto* inst : block) {
      TrainingInstance t = *inst;
      if (t.kind == NegativeKind::kPermutation) t.orders.resize(config_.miner.h);
      else t.negative_docs.resize(config_.miner.h);
      out.push_back(std::move(t));
    }
    return out;
  }

  void init_mining() {
    auto pools = truncated_pools(block_instances(0));
    Rng rng = stream(config_.seed, "mine-init");
    mining_ = init_block_random(pools, config_.negatives, rng);
    if (observer_) observer_->on_mining(0, step_);
  }

  void advance_mining() {
    auto pools = truncated_pools(block_instances(mining_.block_index + 1));
    std::vector<const TrainingInstance*> ptrs;
    for (const auto& p : pools) ptrs.push_back(&p);
    mining_ = advance(mining_, scorer_, ptrs, config_.negatives);
    if (observer_) observer_->on_mining(mining_.block_index, step_);
  }

  void accumulate_average() {
    if (swa_count_ == 0) swa_ = Gradients::zeros_for(scorer_);
    const double k = static_cast<double>(swa_count_);
    auto blend = [k](ParamSet& avg, const ParamSet& cur) {
      for (std::size_t i = 0; i < avg.size(); ++i)
        avg[i].value = (avg[i].value * k + cur[i].value) / (k + 1.0);
    };
    blend(swa_.encoder, scorer_.encoder().params());
    blend(swa_.head, scorer_.head().params());
    ++swa_count_;
  }

  void apply_average() {
    assign_params(scorer_.encoder().params(), swa_.encoder, "swa");
    assign_params(scorer_.head().params(), swa_.head, "swa");
  }

  TrainerConfig config_;
  Scorer scorer_;
  std::vector<TrainingInstance> dataset_;
  std::vector<EvalPair> dev_;
  AdamW optimizer_;
  Gradients grads_;
  std::optional<MomentumEncoder> momentum_;
  std::optional<NegativeQueue> queue_;
  MiningState mining_;
  std::size_t step_ = 0;
  TrainLog log_;
  std::optional<double> best_dev_;
  Gradients swa_;
  std::size_t swa_count_ = 0;
  std::vector<std::size_t> order_;
  std::size_t order_epoch_ = 0;
  TrainObserver* observer_ = nullptr;
  mutable std::string fingerprint_;
};

// Convenience wrapper: trains and returns the final scorer and log.
inline std::pair<Scorer, TrainLog> train(const TrainerConfig& config, Scorer scorer,
                                         std::vector<TrainingInstance> dataset,
                                         std::vector<EvalPair> dev_pairs = {}) {
  Trainer t(config, std::move(scorer), std::move(dataset), std::move(dev_pairs));
  t.run();
  return {t.scorer(), t.log()};
}

}  // namespace coherence
