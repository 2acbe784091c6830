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

// coherence: command-line driver for data generation, training, evaluation,
// scoring, sweeps and analysis. Every command writes a manifest.json that is
// enough to re-run it (see `coherence replay`).
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "coherence/analysis.hpp"
#include "coherence/config.hpp"
#include "coherence/corpus.hpp"
#include "coherence/evalsuite.hpp"
#include "coherence/io.hpp"
#include "coherence/scorer.hpp"
#include "coherence/synthetic.hpp"
#include "coherence/taskgen.hpp"
#include "coherence/trainer.hpp"

extern char** environ;

namespace coherence {
namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
  std::string command;
  std::vector<std::string> args;
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  json inputs = json::object();
  std::vector<std::string> outputs;
  std::string status = "ok";
  json extra = json::object();

  void input(const std::string& path) { inputs[fs::absolute(path).string()] = file_hash(path); }

  json to_json() const {
    json j{{"command", command},
           {"args", args},
           {"cwd", fs::current_path().string()},
           {"config", config},
           {"seeds", seeds},
           {"inputs", inputs},
           {"outputs", outputs},
           {"toolkit_version", std::string(kToolkitVersion)},
           {"status", status}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return j;
  }
};

void write_manifest(const Manifest& m, const fs::path& path) {
  write_file_atomically(path, [&](std::ostream& out) { out << m.to_json().dump(2) << "\n"; });
}

json config_json(const KeyValues& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv.values()) j[k] = v;
  return j;
}

KeyValues key_values_from_json(const json& j) {
  KeyValues kv;
  for (const auto& [k, v] : j.items()) kv.set(k, v.get<std::string>());
  return kv;
}

// Output root for runs that were not given --out.
fs::path default_run_dir(const std::string& name) {
  const char* home = std::getenv("COHERENCE_HOME");
  if (!home || !*home)
    throw UsageError("no --out given and COHERENCE_HOME is not set");
  return fs::path(home) / "runs" / name;
}

// Runs `fill` on a staging directory that is moved to `out` afterwards.
// On failure the staging directory is removed unless `keep_on` accepts the
// exception, in which case it is published as is.
template <typename Fill, typename Keep>
void publish_directory(const fs::path& out, Fill&& fill, Keep&& keep_on) {
  fs::path stage = out;
  stage += ".partial";
  fs::remove_all(stage);
  fs::create_directories(stage);
  auto publish = [&] {
    fs::remove_all(out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    fs::rename(stage, out);
  };
  try {
    fill(stage);
  } catch (const std::exception& e) {
    if (keep_on(e)) {
      publish();
    } else {
      fs::remove_all(stage);
    }
    throw;
  }
  publish();
}

template <typename Fill>
void publish_directory(const fs::path& out, Fill&& fill) {
  publish_directory(out, std::forward<Fill>(fill), [](const std::exception&) { return false; });
}

void write_lines(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  write_file_atomically(path, body);
}

// ---------------------------------------------------------------------------
// Datasets written by `generate`

struct DatasetFiles {
  Corpus positives;
  std::vector<TrainingInstance> instances;
  std::vector<EvalPair> dev;
  std::optional<std::vector<EvalPair>> test;
};

DatasetFiles load_dataset(const fs::path& dir, Manifest& m) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  DatasetFiles d;
  const auto positives = dir / "positives.jsonl";
  const auto train = dir / "train.jsonl";
  d.positives = load_corpus(positives.string());
  d.instances = load_instances(train.string(), d.positives);
  m.input(positives.string());
  m.input(train.string());
  if (d.instances.empty()) throw DataError("dataset " + dir.string() + " has no training instances");
  if (fs::exists(dir / "dev.jsonl")) {
    d.dev = load_eval_pairs((dir / "dev.jsonl").string(), PairSchema::kGeneric);
    m.input((dir / "dev.jsonl").string());
  }
  if (fs::exists(dir / "test.jsonl")) {
    d.test = load_eval_pairs((dir / "test.jsonl").string(), PairSchema::kGeneric);
    m.input((dir / "test.jsonl").string());
  }
  return d;
}

// Accepts a scorer directory, a trainer checkpoint, or a training run
// directory (its best checkpoint, else last).
fs::path resolve_scorer_dir(const fs::path& p) {
  for (const auto& c : {p, p / "scorer", p / "best" / "scorer", p / "last" / "scorer"})
    if (fs::exists(c / "scorer.json")) return c;
  throw DataError("no scorer checkpoint found under " + p.string());
}

std::string checkpoint_hash(const fs::path& scorer_dir) {
  std::string all;
  for (const char* f : {"scorer.json", "encoder.bin", "head.bin"})
    all += file_hash((scorer_dir / f).string());
  return hex64(fnv1a64(all));
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::size_t documents = 600;
  std::size_t min_sentences = 6;
  std::size_t max_sentences = 12;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& args) {
  SyntheticOptions o{a.documents, a.min_sentences, a.max_sentences, a.seed};
  const Corpus c = synthetic_corpus(o);
  write_lines(a.out, [&](std::ostream& out) { write_corpus(c, out); });
  Manifest m;
  m.command = "synth";
  m.args = args;
  m.seeds = {a.seed};
  m.config = {{"documents", a.documents},
              {"min_sentences", a.min_sentences},
              {"max_sentences", a.max_sentences}};
  m.outputs = {fs::absolute(a.out).string()};
  write_manifest(m, a.out + ".manifest.json");
  std::cerr << "wrote " << c.size() << " documents to " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string corpus;
  std::string format = "jsonl";
  std::size_t synthetic = 0;
  std::string task = "permuted";
  std::size_t repetitions = 20;
  std::size_t negatives = 5;
  std::string similarity = "random";
  std::size_t dev_docs = 0;
  std::size_t test_docs = 0;
  std::size_t pairs_per_doc = 5;
  std::size_t min_sentences = 4;
  std::size_t max_tokens = 600;
  bool no_partition = false;
  std::uint64_t seed = 0;
  std::string out;
};

std::vector<EvalPair> intrusion_pairs(const Corpus& c, IntrusionSimilarity sim, std::uint64_t seed) {
  std::vector<EvalPair> out;
  for (auto& inst : build_intrusion_dataset(c, sim, seed)) {
    EvalPair p;
    p.pair_id = inst.positive.id + "/intrusion";
    p.positive = inst.positive;
    p.negative = inst.negative(0);
    out.push_back(std::move(p));
  }
  return out;
}

int cmd_generate(const GenerateArgs& a, const std::vector<std::string>& args) {
  if (a.corpus.empty() == (a.synthetic == 0))
    throw UsageError("give exactly one of --corpus or --synthetic");
  Manifest m;
  m.command = "generate";
  m.args = args;
  m.seeds = {a.seed};

  Corpus raw;
  if (!a.corpus.empty()) {
    raw = load_corpus(a.corpus, a.format == "text" ? CorpusFormat::kPlainText : CorpusFormat::kJsonl);
    m.input(a.corpus);
  } else {
    raw = synthetic_corpus({a.synthetic, 6, 12, a.seed});
  }
  if (a.dev_docs + a.test_docs >= raw.size())
    throw DataError("corpus has " + std::to_string(raw.size()) +
                    " documents; not enough for the requested dev/test split");

  // Split first so blocks of one source document never straddle splits.
  const CorpusSplits splits = split_corpus(raw, a.dev_docs, a.test_docs);
  PrepareOptions prep;
  prep.preprocess.min_sentences = a.min_sentences;
  prep.preprocess.max_tokens = a.max_tokens;
  prep.partition = !a.no_partition;
  const Corpus train = prepare_corpus(splits.train, prep);
  const Corpus dev = prepare_corpus(splits.dev, prep);
  const Corpus test = prepare_corpus(splits.test, prep);
  if (train.documents.empty()) throw DataError("no training documents survive preprocessing");

  const auto sim = a.similarity == "lexical" ? IntrusionSimilarity::kLexicalOverlap
                                             : IntrusionSimilarity::kRandom;
  std::vector<TrainingInstance> instances;
  std::vector<EvalPair> dev_pairs, test_pairs;
  if (a.task == "permuted") {
    instances = build_permuted_dataset(train, a.repetitions, a.negatives, a.seed);
    dev_pairs = make_permuted_pairs(dev, a.pairs_per_doc, derive_seed(a.seed, "dev"));
    test_pairs = make_permuted_pairs(test, a.pairs_per_doc, derive_seed(a.seed, "test"));
  } else {
    instances = build_intrusion_dataset(train, sim, a.seed);
    if (dev.size() >= 2) dev_pairs = intrusion_pairs(dev, sim, derive_seed(a.seed, "dev"));
    if (test.size() >= 2) test_pairs = intrusion_pairs(test, sim, derive_seed(a.seed, "test"));
  }
  if (instances.empty()) throw DataError("no training instances could be built");

  const fs::path out(a.out);
  publish_directory(out, [&](const fs::path& stage) {
    write_lines(stage / "positives.jsonl", [&](std::ostream& o) { write_corpus(train, o); });
    write_lines(stage / "train.jsonl", [&](std::ostream& o) { write_instances(instances, o); });
    m.outputs.push_back((fs::absolute(out) / "positives.jsonl").string());
    m.outputs.push_back((fs::absolute(out) / "train.jsonl").string());
    if (!dev_pairs.empty()) {
      write_lines(stage / "dev.jsonl", [&](std::ostream& o) { write_eval_pairs(dev_pairs, o); });
      m.outputs.push_back((fs::absolute(out) / "dev.jsonl").string());
    }
    if (!test_pairs.empty()) {
      write_lines(stage / "test.jsonl", [&](std::ostream& o) { write_eval_pairs(test_pairs, o); });
      m.outputs.push_back((fs::absolute(out) / "test.jsonl").string());
    }
    m.config = {{"task", a.task},
                {"repetitions", a.repetitions},
                {"negatives", a.task == "permuted" ? a.negatives : 1},
                {"similarity", a.similarity},
                {"dev_docs", a.dev_docs},
                {"test_docs", a.test_docs},
                {"pairs_per_doc", a.pairs_per_doc},
                {"min_sentences", a.min_sentences},
                {"max_tokens", a.max_tokens},
                {"partition", !a.no_partition},
                {"synthetic", a.synthetic}};
    m.extra["counts"] = {{"positives", train.size()},
                         {"instances", instances.size()},
                         {"dev_pairs", dev_pairs.size()},
                         {"test_pairs", test_pairs.size()},
                         {"skipped_records", raw.skipped}};
    write_manifest(m, stage / "manifest.json");
  });
  std::cerr << "wrote " << instances.size() << " instances (" << train.size() << " positives, "
            << dev_pairs.size() << " dev pairs, " << test_pairs.size() << " test pairs) to "
            << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string resume;
};

class ProgressPrinter final : public TrainObserver {
 public:
  void on_eval(const EvalRecord& e) override {
    std::fprintf(stderr, "step %zu dev_accuracy %.4f\n", e.step, e.dev_accuracy);
  }
};

// Keys handled by the CLI itself rather than the trainer.
const std::set<std::string> kRunKeys = {"data", "name"};

int cmd_train(const TrainArgs& a) {
  KeyValues kv;
  if (!a.config.empty()) kv = KeyValues::load(a.config);
  for (const auto& o : a.overrides) kv.apply_override(o);

  if (!a.resume.empty() && !kv.has("data")) {
    // Fall back to the data the checkpoint's run was trained on.
    const auto run_manifest = fs::path(a.resume).parent_path() / "manifest.json";
    if (fs::exists(run_manifest)) {
      const auto j = read_json(run_manifest.string());
      if (j.contains("config") && j["config"].contains("data"))
        kv.set("data", j["config"]["data"].get<std::string>());
    }
  }
  if (a.resume.empty() && !kv.has("seed"))
    throw UsageError("a seed is required: set 'seed = N' in the config or pass seed=N");
  if (!kv.has("data")) throw UsageError("no dataset given: set 'data = <generate output dir>'");

  const std::string data = fs::absolute(kv.get_string("data", "")).string();
  const std::string name = kv.get_string("name", "");
  TrainerConfig tc = trainer_config_from(kv);
  BackboneConfig bc = backbone_config_from(kv);
  if (!kv.has("backbone.seed")) bc.seed = tc.seed;
  if (const auto unused = kv.unused_keys(); !unused.empty()) {
    std::string list;
    for (const auto& k : unused) list += (list.empty() ? "" : ", ") + k;
    throw UsageError("unknown config keys: " + list);
  }
  tc.validate();
  bc.validate();

  KeyValues resolved = to_key_values(tc);
  const KeyValues backbone_kv = to_key_values(bc);
  for (const auto& [k, v] : backbone_kv.values()) resolved.set(k, v);
  resolved.set("data", data);
  if (!name.empty()) resolved.set("name", name);

  Manifest m;
  m.command = "train";
  m.config = config_json(resolved);
  m.seeds = {tc.seed};
  if (!a.config.empty()) m.input(a.config);
  DatasetFiles ds = load_dataset(data, m);

  const fs::path out = a.out.empty()
                           ? default_run_dir(name.empty() ? "run-" + hex64(fnv1a64(resolved.dump()))
                                                          : name)
                           : fs::path(a.out);
  m.args = {"train", "{config}", "--out", fs::absolute(out).string()};
  if (!a.resume.empty()) {
    m.args.push_back("--resume");
    m.args.push_back(fs::absolute(a.resume).string());
    m.input((fs::path(a.resume) / "trainer.json").string());
  }

  ProgressPrinter progress;
  bool diverged = false;
  auto finish = [&](const fs::path& stage, const Trainer& t) {
    write_lines(stage / "train_log.jsonl", [&](std::ostream& o) { write_train_log(t.log(), o); });
    write_lines(stage / "config.txt", [&](std::ostream& o) { o << resolved.dump(); });
    json summary{{"steps", t.step_count()}, {"wall_seconds", t.log().wall_seconds}};
    if (auto best = t.log().best_eval())
      summary["best_dev"] = {{"step", best->step}, {"accuracy", best->dev_accuracy}};
    if (!t.log().evals.empty()) summary["final_dev"] = t.log().evals.back().dev_accuracy;
    if (ds.test && !ds.test->empty() && !diverged) {
      // Test accuracy of the best-on-dev checkpoint when there is one.
      const auto best_dir = stage / "best" / "scorer";
      const Scorer s = fs::exists(best_dir / "scorer.json") ? load_scorer(best_dir) : t.scorer();
      summary["test_accuracy"] = *pairwise_accuracy(s, *ds.test).value;
    }
    write_json(summary, (stage / "summary.json").string());
    for (const auto& f : fs::directory_iterator(stage))
      m.outputs.push_back((fs::absolute(out) / f.path().filename()).string());
    m.outputs.push_back((fs::absolute(out) / "manifest.json").string());
    std::sort(m.outputs.begin(), m.outputs.end());
    m.status = diverged ? "diverged" : "ok";
    m.extra["summary"] = summary;
    write_manifest(m, stage / "manifest.json");
  };

  std::optional<Trainer> trainer;
  try {
    publish_directory(
        out,
        [&](const fs::path& stage) {
          if (a.resume.empty()) {
            tc.output_dir = stage.string();
            trainer.emplace(tc, Scorer(make_backbone(bc)), std::move(ds.instances), ds.dev);
          } else {
            KeyValues trainer_overrides;
            for (const auto& [k, v] : kv.values())
              if (!kRunKeys.contains(k) && k.rfind("backbone", 0) != 0) trainer_overrides.set(k, v);
            trainer.emplace(Trainer::load_checkpoint(a.resume, std::move(ds.instances), ds.dev,
                                                     &trainer_overrides));
            trainer->mutable_config().output_dir = stage.string();
            m.config = config_json(to_key_values(trainer->config()));
            const KeyValues loaded_backbone = to_key_values(trainer->scorer().encoder().config());
            for (const auto& [k, v] : loaded_backbone.values()) m.config[k] = v;
            m.config["data"] = data;
            m.seeds = {trainer->config().seed};
          }
          trainer->set_observer(&progress);
          try {
            trainer->run();
          } catch (const TrainingDiverged&) {
            diverged = true;
            finish(stage, *trainer);
            throw;
          }
          finish(stage, *trainer);
        },
        [](const std::exception& e) { return dynamic_cast<const TrainingDiverged*>(&e) != nullptr; });
  } catch (const TrainingDiverged&) {
    std::cerr << "diverged; state saved under " << (out / "diverged").string() << "\n";
    throw;
  }
  std::cerr << "trained " << trainer->step_count() << " steps; outputs in " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string checkpoint;
  std::string pairs;
  std::string metric = "accuracy";
  std::string agreement_mode = "model-as-rater";
  bool keep_ties = false;
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, const std::vector<std::string>& args) {
  Manifest m;
  m.command = "evaluate";
  m.args = args;
  m.config = {{"metric", a.metric}, {"agreement_mode", a.agreement_mode}, {"keep_ties", a.keep_ties}};
  const fs::path scorer_dir = resolve_scorer_dir(a.checkpoint);
  const Scorer scorer = load_scorer(scorer_dir);
  for (const char* f : {"scorer.json", "encoder.bin", "head.bin"}) m.input((scorer_dir / f).string());
  m.input(a.pairs);

  const PairSchema schema = a.metric == "agreement" ? PairSchema::kJudgments
                            : a.metric == "probe"   ? PairSchema::kProbes
                                                    : PairSchema::kGeneric;
  const auto pairs = load_eval_pairs(a.pairs, schema);
  if (pairs.empty()) throw DataError("no pairs in " + a.pairs);

  EvalReport r;
  try {
    if (a.metric == "accuracy") {
      r = pairwise_accuracy(scorer, pairs, {a.keep_ties});
    } else if (a.metric == "probe") {
      r = probe_accuracy(scorer, pairs);
    } else {
      r = model_agreement(scorer, pairs,
                          a.agreement_mode == "model-vs-majority" ? AgreementMode::kModelVsMajority
                                                                  : AgreementMode::kModelAsRater);
    }
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  r.dataset = fs::path(a.pairs).filename().string();
  r.checkpoint_hash = checkpoint_hash(scorer_dir);
  r.dataset_hash = file_hash(a.pairs);

  const fs::path out(a.out);
  publish_directory(out, [&](const fs::path& stage) {
    write_json(to_json(r), (stage / "report.json").string());
    write_lines(stage / "report.txt", [&](std::ostream& o) { o << format_table(r); });
    m.outputs = {(fs::absolute(out) / "report.json").string(),
                 (fs::absolute(out) / "report.txt").string()};
    write_manifest(m, stage / "manifest.json");
  });
  std::cout << format_table(r);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
  std::string checkpoint;
  std::string docs;
  std::string format = "jsonl";
  std::string out;
};

int cmd_score(const ScoreArgs& a, const std::vector<std::string>& args) {
  Manifest m;
  m.command = "score";
  m.args = args;
  const fs::path scorer_dir = resolve_scorer_dir(a.checkpoint);
  const Scorer scorer = load_scorer(scorer_dir);
  for (const char* f : {"scorer.json", "encoder.bin", "head.bin"}) m.input((scorer_dir / f).string());
  m.input(a.docs);
  const Corpus docs =
      load_corpus(a.docs, a.format == "text" ? CorpusFormat::kPlainText : CorpusFormat::kJsonl);
  if (docs.documents.empty()) throw DataError("no documents in " + a.docs);
  std::vector<double> scores;
  for (const auto& d : docs.documents) {
    scores.push_back(scorer.score(d));
    if (!std::isfinite(scores.back())) throw DataError("non-finite score for document '" + d.id + "'");
  }
  write_lines(a.out, [&](std::ostream& o) {
    for (std::size_t i = 0; i < scores.size(); ++i)
      o << json{{"id", docs.documents[i].id}, {"score", scores[i]}}.dump() << "\n";
  });
  m.outputs = {fs::absolute(a.out).string()};
  write_manifest(m, a.out + ".manifest.json");
  std::cerr << "scored " << scores.size() << " documents\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::vector<std::string> grid;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  std::string out;
};

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

// "l" is accepted as shorthand for the queue size.
std::string canonical_key(const std::string& k) { return k == "l" ? "queue_size" : k; }

GridAxis parse_axis(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("grid axis '" + s + "' is not key=v1,v2");
  GridAxis g{canonical_key(trim(s.substr(0, eq))), {}};
  std::stringstream ss(s.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ','))
    if (!trim(v).empty()) g.values.push_back(trim(v));
  if (g.values.empty()) throw UsageError("grid axis '" + g.key + "' has no values");
  if (g.key == "seed") throw UsageError("seeds are given with --seeds, not --grid");
  return g;
}

double numeric_or_index(const std::string& v, std::size_t index) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  return static_cast<double>(index);
}

int spawn(const std::vector<std::string>& argv, const fs::path& log_file) {
  std::vector<char*> cargv;
  for (const auto& s : argv) cargv.push_back(const_cast<char*>(s.c_str()));
  cargv.push_back(nullptr);
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, STDOUT_FILENO, log_file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&fa, STDOUT_FILENO, STDERR_FILENO);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, argv[0].c_str(), &fa, nullptr, cargv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) throw Error("cannot start child process: " + std::string(std::strerror(rc)));
  return pid;
}

int cmd_sweep(const SweepArgs& a, const std::vector<std::string>& args) {
  if (a.seeds.empty()) throw UsageError("--seeds is required");
  if (a.grid.empty()) throw UsageError("at least one --grid axis is required");
  std::vector<GridAxis> axes;
  for (const auto& g : a.grid) axes.push_back(parse_axis(g));

  // Validate the base configuration once, before launching anything.
  {
    KeyValues kv;
    if (!a.config.empty()) kv = KeyValues::load(a.config);
    for (const auto& o : a.overrides) kv.apply_override(o);
    for (const auto& ax : axes) kv.set(ax.key, ax.values.front());
    kv.set("seed", std::to_string(a.seeds.front()));
    kv.get_string("data", "");
    kv.get_string("name", "");
    trainer_config_from(kv).validate();
    backbone_config_from(kv).validate();
    if (const auto unused = kv.unused_keys(); !unused.empty())
      throw UsageError("unknown config key: " + *unused.begin());
  }

  std::vector<std::vector<std::size_t>> points{{}};
  for (const auto& ax : axes) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& p : points)
      for (std::size_t i = 0; i < ax.values.size(); ++i) {
        auto q = p;
        q.push_back(i);
        next.push_back(q);
      }
    points = std::move(next);
  }

  Manifest m;
  m.command = "sweep";
  m.args = args;
  m.seeds = a.seeds;
  json grid = json::object();
  for (const auto& ax : axes) grid[ax.key] = ax.values;
  m.config = {{"grid", grid}, {"overrides", a.overrides}, {"jobs", a.jobs}};
  if (!a.config.empty()) m.input(a.config);

  const std::string self = fs::read_symlink("/proc/self/exe").string();
  const std::string config_abs = a.config.empty() ? "" : fs::absolute(a.config).string();
  const fs::path out(a.out);

  publish_directory(out, [&](const fs::path& stage) {
    struct Child {
      std::string id;
      std::size_t point;
      std::uint64_t seed;
      std::vector<std::string> argv;
      int exit_code = -1;
    };
    std::vector<Child> children;
    fs::create_directories(stage / "logs");
    for (std::size_t p = 0; p < points.size(); ++p)
      for (auto seed : a.seeds) {
        Child c;
        c.point = p;
        c.seed = seed;
        c.id = "p" + std::to_string(p);
        for (std::size_t i = 0; i < axes.size(); ++i)
          c.id += "-" + axes[i].key + "_" + axes[i].values[points[p][i]];
        c.id += "-seed" + std::to_string(seed);
        c.argv = {self, "train"};
        if (!config_abs.empty()) c.argv.push_back(config_abs);
        for (const auto& o : a.overrides) c.argv.push_back(o);
        for (std::size_t i = 0; i < axes.size(); ++i)
          c.argv.push_back(axes[i].key + "=" + axes[i].values[points[p][i]]);
        c.argv.push_back("seed=" + std::to_string(seed));
        c.argv.push_back("--out");
        c.argv.push_back((fs::absolute(stage) / "runs" / c.id).string());
        children.push_back(std::move(c));
      }

    std::map<pid_t, std::size_t> running;
    std::size_t next = 0, done = 0;
    while (done < children.size()) {
      while (next < children.size() && running.size() < std::max<std::size_t>(a.jobs, 1)) {
        running[spawn(children[next].argv, stage / "logs" / (children[next].id + ".log"))] = next;
        ++next;
      }
      int status = 0;
      const pid_t pid = waitpid(-1, &status, 0);
      if (pid < 0) throw Error("waitpid failed");
      auto it = running.find(pid);
      if (it == running.end()) continue;
      Child& c = children[it->second];
      c.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
      running.erase(it);
      ++done;
      std::cerr << "[" << done << "/" << children.size() << "] " << c.id
                << (c.exit_code == 0 ? " ok" : " failed (exit " + std::to_string(c.exit_code) + ")")
                << "\n";
      if (c.exit_code == kExitUsage) throw UsageError("child run " + c.id + " rejected its arguments");
    }

    if (std::none_of(children.begin(), children.end(), [](const Child& c) { return c.exit_code == 0; })) {
      std::string log = read_file((stage / "logs" / (children.front().id + ".log")).string());
      throw DataError("every run failed; first run said: " + trim(log));
    }

    // Aggregate over seeds.
    std::vector<SweepPoint> sweep_points;
    json rows = json::array();
    json child_manifests = json::array();
    std::string csv = "point";
    for (const auto& ax : axes) csv += "," + ax.key;
    csv += ",dev_mean,dev_std,test_mean,test_std,runs,complete\n";
    for (std::size_t p = 0; p < points.size(); ++p) {
      std::vector<double> dev, test;
      std::size_t finished = 0;
      json assignment = json::object();
      for (std::size_t i = 0; i < axes.size(); ++i) assignment[axes[i].key] = axes[i].values[points[p][i]];
      for (const auto& c : children) {
        if (c.point != p) continue;
        const fs::path run = stage / "runs" / c.id;
        if (fs::exists(run / "manifest.json"))
          child_manifests.push_back((fs::absolute(out) / "runs" / c.id / "manifest.json").string());
        std::optional<double> dev_acc, test_acc;
        if (c.exit_code == 0 && fs::exists(run / "summary.json")) {
          const auto s = read_json((run / "summary.json").string());
          ++finished;
          if (s.contains("best_dev")) dev_acc = s["best_dev"]["accuracy"].get<double>();
          if (s.contains("test_accuracy")) test_acc = s["test_accuracy"].get<double>();
        }
        if (dev_acc) dev.push_back(*dev_acc);
        if (test_acc) test.push_back(*test_acc);
        if (axes.size() == 1) {
          const double x = numeric_or_index(axes[0].values[points[p][0]], points[p][0]);
          sweep_points.push_back({axes[0].key, x, "dev", c.seed, dev_acc});
          sweep_points.push_back({axes[0].key, x, "test", c.seed, test_acc});
        }
      }
      auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
      const bool complete = finished == a.seeds.size();
      rows.push_back({{"assignment", assignment},
                      {"dev_mean", num(mean_of(dev))},
                      {"dev_std", sample_std(dev)},
                      {"test_mean", num(mean_of(test))},
                      {"test_std", sample_std(test)},
                      {"runs", finished},
                      {"complete", complete}});
      csv += std::to_string(p);
      for (std::size_t i = 0; i < axes.size(); ++i) csv += "," + axes[i].values[points[p][i]];
      csv += "," + format_double(mean_of(dev)) + "," + format_double(sample_std(dev)) + "," +
             format_double(mean_of(test)) + "," + format_double(sample_std(test)) + "," +
             std::to_string(finished) + "," + (complete ? "1" : "0") + "\n";
    }
    json pts = json::array();
    for (const auto& sp : sweep_points)
      pts.push_back({{"parameter", sp.parameter},
                     {"value", sp.value},
                     {"test_set", sp.test_set},
                     {"seed", sp.seed},
                     {"metric", sp.metric ? json(*sp.metric) : json(nullptr)}});
    write_json({{"grid", grid}, {"seeds", a.seeds}, {"rows", rows}, {"points", pts}},
               (stage / "sweep.json").string());
    write_lines(stage / "sweep.csv", [&](std::ostream& o) { o << csv; });
    if (axes.size() == 1 && axes[0].values.size() >= 2) {
      sweep_curves(sweep_points, a.seeds.size(), stage / "curves", {.title = "", .x_label = axes[0].key});
    } else if (axes.size() > 1) {
      info("curves are drawn for single-parameter grids only; see sweep.csv");
    }
    m.extra["children"] = child_manifests;
    for (const auto& f : fs::directory_iterator(stage))
      m.outputs.push_back((fs::absolute(out) / f.path().filename()).string());
    m.outputs.push_back((fs::absolute(out) / "manifest.json").string());
    std::sort(m.outputs.begin(), m.outputs.end());
    write_manifest(m, stage / "manifest.json");
    std::cout << csv;
  });
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::vector<std::string> runs;
  std::size_t warmup = 0;
  std::string sweep;
  std::string out;
};

int cmd_analyze(const AnalyzeArgs& a, const std::vector<std::string>& args) {
  if (a.runs.empty() && a.sweep.empty()) throw UsageError("give --run LABEL=PATH or --sweep DIR");
  Manifest m;
  m.command = "analyze";
  m.args = args;
  m.config = {{"warmup", a.warmup}};

  std::vector<TrainLog> logs;
  std::vector<std::string> labels;
  for (const auto& r : a.runs) {
    const auto eq = r.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--run expects LABEL=PATH, got '" + r + "'");
    fs::path p = r.substr(eq + 1);
    if (fs::is_directory(p)) p /= "train_log.jsonl";
    logs.push_back(read_train_log(p.string()));
    labels.push_back(r.substr(0, eq));
    m.input(p.string());
  }
  std::vector<SweepPoint> sweep_points;
  std::size_t sweep_seeds = 0;
  if (!a.sweep.empty()) {
    const auto sweep_file = fs::path(a.sweep) / "sweep.json";
    const auto j = read_json(sweep_file.string());
    m.input(sweep_file.string());
    sweep_seeds = j.at("seeds").size();
    for (const auto& p : j.at("points"))
      sweep_points.push_back({p.at("parameter").get<std::string>(), p.at("value").get<double>(),
                              p.at("test_set").get<std::string>(), p.at("seed").get<std::uint64_t>(),
                              p.at("metric").is_null() ? std::nullopt
                                                       : std::optional<double>(p["metric"].get<double>())});
    if (sweep_points.empty()) throw DataError(sweep_file.string() + " has no single-parameter points");
  }

  std::vector<StabilityStats> stats;
  if (!logs.empty()) stats = stability_stats(logs, labels, a.warmup);

  const fs::path out(a.out);
  publish_directory(out, [&](const fs::path& stage) {
    if (!logs.empty()) {
      json js = json::array();
      for (const auto& s : stats)
        js.push_back({{"label", s.label},
                      {"runs", s.runs},
                      {"mean_accuracy", s.mean_accuracy},
                      {"mean_std", s.mean_std},
                      {"run_std", s.run_std}});
      write_json({{"warmup_steps", a.warmup}, {"stability", js}}, (stage / "stability.json").string());
      write_curves(stability_curves(logs, labels), stage / "stability",
                   {.title = "dev accuracy during training", .x_label = "step"});
    }
    if (!sweep_points.empty())
      sweep_curves(sweep_points, sweep_seeds, stage / "sweep", {.title = "", .x_label = sweep_points[0].parameter});
    for (const auto& f : fs::directory_iterator(stage))
      m.outputs.push_back((fs::absolute(out) / f.path().filename()).string());
    m.outputs.push_back((fs::absolute(out) / "manifest.json").string());
    std::sort(m.outputs.begin(), m.outputs.end());
    write_manifest(m, stage / "manifest.json");
  });
  for (const auto& s : stats)
    std::printf("%-16s runs=%zu mean_acc=%.4f post_warmup_std=%.4f\n", s.label.c_str(), s.runs,
                s.mean_accuracy, s.mean_std);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// replay

int run(int argc, char** argv);

int cmd_replay(const std::string& manifest_path, const std::string& out) {
  const auto j = read_json(manifest_path);
  auto args = j.at("args").get<std::vector<std::string>>();
  if (args.empty()) throw DataError("manifest has no recorded arguments");
  const std::string out_abs = fs::absolute(out).string();
  bool replaced = false;
  for (std::size_t i = 0; i + 1 < args.size(); ++i)
    if (args[i] == "--out") args[i + 1] = out_abs, replaced = true;
  if (!replaced) throw DataError("manifest has no --out argument to redirect");

  fs::path config_file;
  if (j.at("command") == "train") {
    // The resolved configuration is complete, so it stands in for the original file.
    config_file = fs::path(out_abs + ".replay-config.txt");
    const KeyValues kv = key_values_from_json(j.at("config"));
    write_lines(config_file, [&](std::ostream& o) { o << kv.dump(); });
    for (auto& a : args)
      if (a == "{config}") a = config_file.string();
  }
  const fs::path cwd = fs::current_path();
  fs::current_path(j.at("cwd").get<std::string>());
  std::vector<std::string> storage{"coherence"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> cargv;
  for (auto& s : storage) cargv.push_back(s.data());
  int rc = kExitData;
  try {
    rc = run(static_cast<int>(cargv.size()), cargv.data());
  } catch (...) {
    fs::current_path(cwd);
    if (!config_file.empty()) fs::remove(config_file);
    throw;
  }
  fs::current_path(cwd);
  if (!config_file.empty()) fs::remove(config_file);
  return rc;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"Self-supervised text-coherence toolkit", "coherence"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1);
  const std::vector<std::string> args(argv + 1, argv + argc);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Write the synthetic demo corpus");
  synth->add_option("--documents", sy.documents, "Number of documents")->capture_default_str();
  synth->add_option("--min-sentences", sy.min_sentences)->capture_default_str();
  synth->add_option("--max-sentences", sy.max_sentences)->capture_default_str();
  synth->add_option("--seed", sy.seed, "Generator seed")->required();
  synth->add_option("--out", sy.out, "Output corpus (JSON lines)")->required();

  GenerateArgs g;
  auto* gen = app.add_subcommand("generate", "Build a training dataset and eval pairs from a corpus");
  gen->add_option("--corpus", g.corpus, "Corpus file")->check(CLI::ExistingFile);
  gen->add_option("--format", g.format, "Corpus format")->check(CLI::IsMember({"jsonl", "text"}));
  gen->add_option("--synthetic", g.synthetic, "Use N synthetic documents instead of --corpus");
  gen->add_option("--task", g.task, "Negative construction")
      ->check(CLI::IsMember({"permuted", "intrusion"}))
      ->capture_default_str();
  gen->add_option("--repetitions", g.repetitions, "Instances per positive")->capture_default_str();
  gen->add_option("--negatives", g.negatives, "Negatives per instance (h for mining)")
      ->capture_default_str();
  gen->add_option("--similarity", g.similarity, "Intruder choice")
      ->check(CLI::IsMember({"random", "lexical"}));
  gen->add_option("--dev-docs", g.dev_docs, "Documents held out for dev pairs");
  gen->add_option("--test-docs", g.test_docs, "Documents held out for test pairs");
  gen->add_option("--pairs-per-doc", g.pairs_per_doc, "Permuted eval pairs per held-out document")
      ->capture_default_str();
  gen->add_option("--min-sentences", g.min_sentences)->capture_default_str();
  gen->add_option("--max-tokens", g.max_tokens)->capture_default_str();
  gen->add_flag("--no-partition", g.no_partition, "Keep long documents whole");
  gen->add_option("--seed", g.seed, "Sampling seed")->required();
  gen->add_option("--out", g.out, "Output directory")->required();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a scorer");
  tr->add_option("config", t.config, "Key-value config file");
  tr->add_option("overrides", t.overrides, "key=value overrides");
  tr->add_option("--out", t.out, "Run directory (default $COHERENCE_HOME/runs/<name>)");
  tr->add_option("--resume", t.resume, "Trainer checkpoint to continue from")
      ->check(CLI::ExistingDirectory);

  EvaluateArgs e;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a scorer on a pair file");
  ev->add_option("--checkpoint", e.checkpoint, "Scorer, checkpoint or run directory")->required();
  ev->add_option("--pairs", e.pairs, "Pair file (JSON lines)")->required()->check(CLI::ExistingFile);
  ev->add_option("--metric", e.metric)
      ->check(CLI::IsMember({"accuracy", "agreement", "probe"}))
      ->capture_default_str();
  ev->add_option("--agreement-mode", e.agreement_mode)
      ->check(CLI::IsMember({"model-as-rater", "model-vs-majority"}))
      ->capture_default_str();
  ev->add_flag("--keep-ties", e.keep_ties, "Count gold-tied pairs as errors instead of excluding them");
  ev->add_option("--out", e.out, "Report directory")->required();

  ScoreArgs s;
  auto* sc = app.add_subcommand("score", "Score documents");
  sc->add_option("--checkpoint", s.checkpoint, "Scorer, checkpoint or run directory")->required();
  sc->add_option("--docs", s.docs, "Documents")->required()->check(CLI::ExistingFile);
  sc->add_option("--format", s.format)->check(CLI::IsMember({"jsonl", "text"}));
  sc->add_option("--out", s.out, "Scores (JSON lines)")->required();

  SweepArgs w;
  auto* sw = app.add_subcommand("sweep", "Train over a hyperparameter grid and seeds");
  sw->add_option("config", w.config, "Base config file");
  sw->add_option("overrides", w.overrides, "key=value overrides");
  sw->add_option("--grid", w.grid, "Axis as key=v1,v2 (h, mu, l/queue_size, lambda, ...)")->required();
  sw->add_option("--seeds", w.seeds, "Seeds, one run each")->required()->delimiter(',');
  sw->add_option("--jobs", w.jobs, "Concurrent child processes")->capture_default_str();
  sw->add_option("--out", w.out, "Sweep directory")->required();

  AnalyzeArgs an;
  auto* az = app.add_subcommand("analyze", "Stability statistics and sweep curves");
  az->add_option("--run", an.runs, "LABEL=train_log.jsonl or run directory");
  az->add_option("--warmup", an.warmup, "Evaluations at or before this step are ignored");
  az->add_option("--sweep", an.sweep, "Sweep directory")->check(CLI::ExistingDirectory);
  az->add_option("--out", an.out, "Output directory")->required();

  std::string replay_manifest, replay_out;
  auto* rp = app.add_subcommand("replay", "Re-run a command from its manifest");
  rp->add_option("manifest", replay_manifest, "manifest.json")->required()->check(CLI::ExistingFile);
  rp->add_option("--out", replay_out, "Where the re-run writes its outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << "error: " << err.what() << "\n\n";
    CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    std::cerr << failing->help();
    return kExitUsage;
  }

  // A first positional of the form key=value is an override, not a file.
  auto split_config = [](std::string& config, std::vector<std::string>& overrides) {
    if (config.empty() || fs::exists(config)) return;
    if (config.find('=') == std::string::npos)
      throw UsageError("config file does not exist: " + config);
    overrides.insert(overrides.begin(), config);
    config.clear();
  };
  split_config(t.config, t.overrides);
  split_config(w.config, w.overrides);

  if (*synth) return cmd_synth(sy, args);
  if (*gen) return cmd_generate(g, args);
  if (*tr) return cmd_train(t);
  if (*ev) return cmd_evaluate(e, args);
  if (*sc) return cmd_score(s, args);
  if (*sw) return cmd_sweep(w, args);
  if (*az) return cmd_analyze(an, args);
  return cmd_replay(replay_manifest, replay_out);
}

}  // namespace
}  // namespace coherence

int main(int argc, char** argv) {
  using namespace coherence;
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
