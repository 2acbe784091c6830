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

// The coherence model: a transformer document encoder producing a pooled
// representation z, and a linear head mapping z to a scalar score w.z + b.

#pragma once

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "coherence/common.hpp"
#include "coherence/corpus.hpp"
#include "coherence/io.hpp"
#include "coherence/tape.hpp"

namespace coherence {

enum class BackboneKind { kTiny, kPretrained };

inline std::string to_string(BackboneKind k) {
  return k == BackboneKind::kTiny ? "tiny" : "pretrained";
}

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "tiny") return BackboneKind::kTiny;
  if (s == "pretrained") return BackboneKind::kPretrained;
  throw UsageError("unknown backbone kind '" + s + "'");
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::kTiny;
  std::size_t vocab_size = 512;  // hashed word buckets
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t max_tokens = 192;  // excluding the classification token
  std::size_t max_sentences = 32;
  bool use_positions = true;
  double dropout = 0.0;
  double init_std = 0.1;
  std::uint64_t seed = 7;
  // kPretrained only: directory holding converted encoder weights.
  std::string weights_dir;

  // Base-size configuration used with converted pretrained weights.
  static BackboneConfig pretrained_base() {
    BackboneConfig c;
    c.kind = BackboneKind::kPretrained;
    c.vocab_size = 32000;
    c.d = 768;
    c.layers = 12;
    c.heads = 12;
    c.ffn = 3072;
    c.max_tokens = 512;
    c.max_sentences = 64;
    return c;
  }

  std::string identifier() const {
    return to_string(kind) + "-L" + std::to_string(layers) + "-d" +
           std::to_string(d) + "-H" + std::to_string(heads);
  }

  void validate() const {
    if (d == 0 || layers == 0 || heads == 0 || ffn == 0 || vocab_size == 0 ||
        max_tokens == 0 || max_sentences == 0)
      throw UsageError("backbone sizes must be positive");
    if (d % heads != 0) throw UsageError("d must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0)
      throw UsageError("dropout must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"kind", to_string(c.kind)},   {"vocab_size", c.vocab_size},
          {"d", c.d},                    {"layers", c.layers},
          {"heads", c.heads},            {"ffn", c.ffn},
          {"max_tokens", c.max_tokens},  {"max_sentences", c.max_sentences},
          {"use_positions", c.use_positions},
          {"dropout", c.dropout},        {"init_std", c.init_std},
          {"seed", c.seed}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.kind = parse_backbone_kind(j.at("kind").get<std::string>());
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.max_tokens = j.at("max_tokens").get<std::size_t>();
  c.max_sentences = j.at("max_sentences").get<std::size_t>();
  c.use_positions = j.at("use_positions").get<bool>();
  c.dropout = j.at("dropout").get<double>();
  c.init_std = j.at("init_std").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// Token ids plus the sentence index of every token.
struct TokenizedDocument {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> sentence_of;
  bool truncated = false;
};

// Lowercased alphanumeric runs and single punctuation marks, hashed into
// `vocab_size` buckets.
inline TokenizedDocument tokenize(const Document& doc, std::size_t vocab_size,
                                  std::size_t max_tokens) {
  TokenizedDocument out;
  auto emit = [&](const std::string& tok, std::size_t sent) {
    if (out.ids.size() >= max_tokens) {
      out.truncated = true;
      return;
    }
    out.ids.push_back(fnv1a64(tok) % vocab_size);
    out.sentence_of.push_back(sent);
  };
  for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
    std::string cur;
    for (unsigned char c : doc.sentences[s]) {
      if (std::isalnum(c)) {
        cur.push_back(static_cast<char>(std::tolower(c)));
        continue;
      }
      if (!cur.empty()) emit(cur, s), cur.clear();
      if (!std::isspace(c)) emit(std::string(1, static_cast<char>(c)), s);
    }
    if (!cur.empty()) emit(cur, s);
  }
  return out;
}

struct EncoderOutput {
  Vector z;
  // Final-layer state of every document token (rows), excluding [CLS].
  Matrix token_reps;
};

// Pre-norm transformer encoder. The input sequence is a learned
// classification token followed by the document tokens; each position sums a
// token embedding, an absolute position embedding and a sentence-index
// embedding. z is the final classification-token state plus the mean of the
// final token states.
class Encoder {
 public:
  struct LayerIds {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
  };

  // Recorded forward pass, kept for the backward pass.
  struct Trace {
    Tape tape;
    Var z;
    Var states;  // final layer, row 0 is the classification token
    Vector z_value;
  };

  Encoder() = default;

  explicit Encoder(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    build();
    initialize();
  }

  const BackboneConfig& config() const { return config_; }
  std::size_t dim() const { return config_.d; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  EncoderOutput encode(const Document& doc) const {
    Trace t = trace(doc, nullptr);
    EncoderOutput out;
    out.z = t.z_value;
    const Matrix& h = t.tape.value(t.states);
    out.token_reps = h.bottomRows(h.rows() - 1);
    return out;
  }

  // Forward pass recorded for differentiation. `dropout_rng` enables dropout
  // (training mode); pass nullptr for deterministic inference.
  Trace trace(const Document& doc, Rng* dropout_rng) const;

  // Adds d(z)/d(params)^T * dz into `grads`.
  static void backward(Trace& t, const Vector& dz, ParamSet& grads) {
    t.tape.backward(t.z, dz.transpose(), grads);
  }

 private:
  void build() {
    const auto d = static_cast<Eigen::Index>(config_.d);
    const auto f = static_cast<Eigen::Index>(config_.ffn);
    auto zeros = [](Eigen::Index r, Eigen::Index c) { return Matrix::Zero(r, c); };
    // Row vocab_size is the classification token.
    tok_emb_ = params_.add("embed.token",
                           zeros(static_cast<Eigen::Index>(config_.vocab_size) + 1, d));
    pos_emb_ = params_.add("embed.position",
                           zeros(static_cast<Eigen::Index>(config_.max_tokens) + 1, d));
    // Row max_sentences is the classification token's segment.
    sent_emb_ = params_.add(
        "embed.sentence",
        zeros(static_cast<Eigen::Index>(config_.max_sentences) + 1, d));
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerIds ids{};
      ids.ln1_g = params_.add(p + "ln1.gain", Matrix::Ones(1, d));
      ids.ln1_b = params_.add(p + "ln1.bias", zeros(1, d));
      ids.wq = params_.add(p + "attn.wq", zeros(d, d));
      ids.bq = params_.add(p + "attn.bq", zeros(1, d));
      ids.wk = params_.add(p + "attn.wk", zeros(d, d));
      ids.bk = params_.add(p + "attn.bk", zeros(1, d));
      ids.wv = params_.add(p + "attn.wv", zeros(d, d));
      ids.bv = params_.add(p + "attn.bv", zeros(1, d));
      ids.wo = params_.add(p + "attn.wo", zeros(d, d));
      ids.bo = params_.add(p + "attn.bo", zeros(1, d));
      ids.ln2_g = params_.add(p + "ln2.gain", Matrix::Ones(1, d));
      ids.ln2_b = params_.add(p + "ln2.bias", zeros(1, d));
      ids.w1 = params_.add(p + "ffn.w1", zeros(d, f));
      ids.b1 = params_.add(p + "ffn.b1", zeros(1, f));
      ids.w2 = params_.add(p + "ffn.w2", zeros(f, d));
      ids.b2 = params_.add(p + "ffn.b2", zeros(1, d));
      layers_.push_back(ids);
    }
    lnf_g_ = params_.add("final_ln.gain", Matrix::Ones(1, d));
    lnf_b_ = params_.add("final_ln.bias", zeros(1, d));
  }

  void initialize() {
    Rng rng(derive_seed(config_.seed, "encoder-init"));
    for (auto& t : params_) {
      const bool is_matrix =
          t.name.find(".w") != std::string::npos || t.name.rfind("embed.", 0) == 0;
      if (!is_matrix) continue;
      // Output projections are scaled down with depth.
      double std = config_.init_std;
      if (t.name.ends_with("attn.wo") || t.name.ends_with("ffn.w2"))
        std /= std::sqrt(2.0 * static_cast<double>(config_.layers));
      for (Eigen::Index i = 0; i < t.value.size(); ++i)
        t.value.data()[i] = rng.normal() * std;
    }
  }

  Var maybe_dropout(Tape& tape, Var x, Rng* rng) const {
    if (!rng || config_.dropout <= 0.0) return x;
    const Matrix& v = tape.value(x);
    Matrix m(v.rows(), v.cols());
    const double keep = 1.0 - config_.dropout;
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = rng->uniform01() < keep ? 1.0 / keep : 0.0;
    return tape.mask(x, std::move(m));
  }

  BackboneConfig config_;
  ParamSet params_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, sent_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::vector<LayerIds> layers_;
};

inline Encoder::Trace Encoder::trace(const Document& doc, Rng* rng) const {
  if (doc.sentences.empty()) throw DataError("cannot encode an empty document");
  if (params_.size() == 0) throw BackboneUnavailable("encoder has no parameters");
  TokenizedDocument tok = tokenize(doc, config_.vocab_size, config_.max_tokens);
  if (tok.ids.empty()) throw DataError("document '" + doc.id + "' has no tokens");
  if (tok.truncated)
    warn("document '" + doc.id + "' exceeds the backbone window of " +
         std::to_string(config_.max_tokens) + " tokens; truncated");

  Trace t;
  Tape& tape = t.tape;
  const std::size_t n = tok.ids.size() + 1;
  std::vector<std::size_t> ids(n), positions(n), segments(n);
  ids[0] = config_.vocab_size;
  positions[0] = 0;
  segments[0] = config_.max_sentences;
  for (std::size_t i = 1; i < n; ++i) {
    ids[i] = tok.ids[i - 1];
    positions[i] = i;
    segments[i] = std::min(tok.sentence_of[i - 1], config_.max_sentences - 1);
  }
  Var x = tape.gather_rows(params_, tok_emb_, ids);
  if (config_.use_positions) {
    x = tape.add(x, tape.gather_rows(params_, pos_emb_, positions));
    x = tape.add(x, tape.gather_rows(params_, sent_emb_, segments));
  }

  const auto d = static_cast<Eigen::Index>(config_.d);
  const auto heads = static_cast<Eigen::Index>(config_.heads);
  const Eigen::Index dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto P = [&](std::size_t idx) { return tape.param(params_, idx); };

  for (const auto& L : layers_) {
    Var h = tape.layer_norm(x, P(L.ln1_g), P(L.ln1_b));
    Var q = tape.add_row(tape.matmul(h, P(L.wq)), P(L.bq));
    Var k = tape.add_row(tape.matmul(h, P(L.wk)), P(L.bk));
    Var v = tape.add_row(tape.matmul(h, P(L.wv)), P(L.bv));
    std::vector<Var> outs;
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      Var qh = tape.cols(q, hd * dh, dh);
      Var kh = tape.cols(k, hd * dh, dh);
      Var vh = tape.cols(v, hd * dh, dh);
      Var att = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), att_scale));
      outs.push_back(tape.matmul(att, vh));
    }
    Var o = outs.size() == 1 ? outs[0] : tape.concat_cols(outs);
    o = tape.add_row(tape.matmul(o, P(L.wo)), P(L.bo));
    x = tape.add(x, maybe_dropout(tape, o, rng));

    Var h2 = tape.layer_norm(x, P(L.ln2_g), P(L.ln2_b));
    Var ff = tape.gelu(tape.add_row(tape.matmul(h2, P(L.w1)), P(L.b1)));
    ff = tape.add_row(tape.matmul(ff, P(L.w2)), P(L.b2));
    x = tape.add(x, maybe_dropout(tape, ff, rng));
  }
  Var final_h = tape.layer_norm(x, P(lnf_g_), P(lnf_b_));
  t.states = final_h;
  t.z = tape.add(tape.row(final_h, 0), tape.mean_rows(final_h, 1));
  t.z_value = tape.value(t.z).row(0).transpose();
  if (!t.z_value.allFinite()) throw NonFiniteValue("encoder produced a non-finite z");
  return t;
}

// Score head: w (d x 1) and b (1 x 1) stored as a two-tensor ParamSet.
class LinearHead {
 public:
  LinearHead() = default;
  explicit LinearHead(std::size_t d) {
    params_.add("head.w", Matrix::Zero(static_cast<Eigen::Index>(d), 1));
    params_.add("head.b", Matrix::Zero(1, 1));
  }

  std::size_t dim() const { return static_cast<std::size_t>(params_[0].value.rows()); }
  auto w() { return params_[0].value.col(0); }
  auto w() const { return params_[0].value.col(0); }
  double& b() { return params_[1].value(0, 0); }
  double b() const { return params_[1].value(0, 0); }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  double apply(const Vector& z) const {
    if (static_cast<std::size_t>(z.size()) != dim())
      throw ShapeMismatch("head dimension " + std::to_string(dim()) +
                          " does not match representation dimension " +
                          std::to_string(z.size()));
    return w().dot(z) + b();
  }

  // Gradient of ds * (w.z + b) with respect to (w, b).
  void accumulate(const Vector& z, double ds, ParamSet& grads) const {
    grads[0].value.col(0) += ds * z;
    grads[1].value(0, 0) += ds;
  }

 private:
  ParamSet params_;
};

// Encoder plus linear head; the full parameter set theta = {phi, w, b}.
class Scorer {
 public:
  Scorer() = default;
  explicit Scorer(Encoder encoder) : encoder_(std::move(encoder)), head_(encoder_.dim()) {
    Rng rng(derive_seed(encoder_.config().seed, "head-init"));
    for (Eigen::Index i = 0; i < head_.w().size(); ++i)
      head_.w()(i) = rng.normal() * encoder_.config().init_std;
  }

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  LinearHead& head() { return head_; }
  const LinearHead& head() const { return head_; }
  std::size_t dim() const { return encoder_.dim(); }

  EncoderOutput encode(const Document& doc) const { return encoder_.encode(doc); }

  double score(const Document& doc) const {
    return head_.apply(encoder_.encode(doc).z);
  }

  bool all_finite() const {
    return encoder_.params().all_finite() && head_.params().all_finite();
  }

 private:
  Encoder encoder_;
  LinearHead head_;
};

// Any document -> score function; evaluation and mining accept these so that
// oracle scorers can stand in for a model.
using ScoreFn = std::function<double(const Document&)>;

inline ScoreFn score_fn(const Scorer& scorer) {
  return [&scorer](const Document& d) { return scorer.score(d); };
}

// Builds an encoder. kTiny initializes from the seed; kPretrained loads
// converted weights from config.weights_dir (or $COHERENCE_HOME/backbones/
// <identifier>) and fails with BackboneUnavailable when they are missing.
inline Encoder make_backbone(const BackboneConfig& config) {
  if (config.kind == BackboneKind::kTiny) return Encoder(config);
  std::string dir = config.weights_dir;
  if (dir.empty()) {
    if (const char* home = std::getenv("COHERENCE_HOME"))
      dir = (fs::path(home) / "backbones" / config.identifier()).string();
  }
  const fs::path weights = fs::path(dir) / "encoder.bin";
  if (dir.empty() || !fs::exists(weights))
    throw BackboneUnavailable("pretrained backbone weights not found" +
                              (dir.empty() ? std::string() : " in " + dir));
  Encoder enc(config);
  assign_params(enc.params(), read_params(weights.string()),
                "pretrained backbone " + config.identifier());
  return enc;
}

inline Encoder make_backbone(BackboneKind kind, BackboneConfig config = {}) {
  if (kind == BackboneKind::kPretrained && config.kind != BackboneKind::kPretrained) {
    auto base = BackboneConfig::pretrained_base();
    base.weights_dir = config.weights_dir;
    config = base;
  }
  config.kind = kind;
  return make_backbone(config);
}

// ---------------------------------------------------------------------------
// Scorer checkpoints: a directory with scorer.json, encoder.bin, head.bin.

inline constexpr int kScorerFormatVersion = 1;

inline void save_scorer(const Scorer& scorer, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json meta{{"format_version", kScorerFormatVersion},
                      {"backbone", scorer.encoder().config().identifier()},
                      {"backbone_config", to_json(scorer.encoder().config())},
                      {"d", scorer.dim()}};
  write_json(meta, (dir / "scorer.json").string());
  write_params(scorer.encoder().params(), (dir / "encoder.bin").string());
  write_params(scorer.head().params(), (dir / "head.bin").string());
}

inline Scorer load_scorer(const fs::path& dir) {
  const auto meta = read_json((dir / "scorer.json").string());
  const int version = meta.at("format_version").get<int>();
  if (version != kScorerFormatVersion)
    throw VersionMismatch("scorer checkpoint version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kScorerFormatVersion) + ")");
  BackboneConfig config = backbone_config_from_json(meta.at("backbone_config"));
  Scorer scorer{Encoder(config)};
  assign_params(scorer.encoder().params(),
                read_params((dir / "encoder.bin").string()), "encoder");
  assign_params(scorer.head().params(), read_params((dir / "head.bin").string()),
                "head");
  return scorer;
}

// Loads a checkpoint into an existing scorer, which must have the same
// backbone dimension and architecture.
inline void load_scorer_into(Scorer& target, const fs::path& dir) {
  const auto meta = read_json((dir / "scorer.json").string());
  const auto d = meta.at("d").get<std::size_t>();
  if (d != target.dim())
    throw ShapeMismatch("checkpoint dimension " + std::to_string(d) +
                        " does not match scorer dimension " +
                        std::to_string(target.dim()));
  Scorer loaded = load_scorer(dir);
  assign_params(target.encoder().params(), loaded.encoder().params(), "encoder");
  assign_params(target.head().params(), loaded.head().params(), "head");
}

}  // namespace coherence
