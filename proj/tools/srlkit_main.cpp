// srlkit command-line driver: synthetic data generation, teacher training,
// distillation, fine-tuning, evaluation, and parameter counting. Every run
// writes a run-*.json record with the resolved configuration, seed, and
// digests of the artifacts it produced.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "srlkit/checkpoint.hpp"
#include "srlkit/config.hpp"
#include "srlkit/distill.hpp"
#include "srlkit/heads.hpp"
#include "srlkit/metrics.hpp"
#include "srlkit/model.hpp"
#include "srlkit/synth.hpp"
#include "srlkit/trainer.hpp"

namespace fs = std::filesystem;
using namespace srlkit;
using json = nlohmann::json;

namespace {

constexpr int kExitMissingInput = 2;
constexpr int kExitConfig = 3;
constexpr int kExitDivergence = 4;

class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::string& path)
      : std::runtime_error("missing input artifact: " + path) {}
};

struct CommonArgs {
  std::string config = "toy";
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config,
                  "config file path or preset (toy, base-reference)");
  cmd->add_option("--out", args.out, "output directory (env SRLKIT_OUT)");
  cmd->add_option("--seed", args.seed, "override the config seed");
}

std::string resolve_out(const CommonArgs& args) {
  std::string out = args.out;
  if (out.empty()) {
    const char* env = std::getenv("SRLKIT_OUT");
    out = env && *env ? env : "out";
  }
  fs::create_directories(out);
  return out;
}

Config resolve_config(const CommonArgs& args) {
  Config cfg;
  if (fs::exists(args.config)) {
    cfg = Config::parse_file(args.config);
  } else if (args.config == "toy") {
    cfg = Config();
  } else if (args.config == "base-reference") {
    cfg = Config::base_reference();
  } else {
    throw ConfigError("config: no such file or preset '" + args.config + "'");
  }
  if (args.seed) cfg.apply_override("seed", std::to_string(*args.seed));
  return cfg;
}

void require_artifact(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifact(path);
}

// Run record: resolved config, seed, and artifact digests. Timestamps live
// only here so that every other artifact is byte-reproducible.
struct RunRecord {
  std::string command;
  Config config;
  std::string out_dir;
  std::vector<std::string> artifacts;

  void add(const std::string& path) { artifacts.push_back(path); }

  void write(const std::string& name) const {
    json j;
    j["command"] = command;
    j["seed"] = config.seed;
    j["config"] = json::object();
    std::istringstream cfg_text(config.serialize());
    std::string line;
    while (std::getline(cfg_text, line)) {
      const auto eq = line.find(" = ");
      if (eq != std::string::npos)
        j["config"][line.substr(0, eq)] = line.substr(eq + 3);
    }
    j["artifacts"] = json::object();
    for (const auto& a : artifacts) {
      char digest[32];
      std::snprintf(digest, sizeof digest, "%016llx",
                    static_cast<unsigned long long>(file_digest(a)));
      j["artifacts"][a] = digest;
    }
    j["timestamp"] = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    std::ofstream f(out_dir + "/" + name);
    f << j.dump(2) << "\n";
  }
};

SynthSpec synth_spec_from(const Config& cfg) {
  SynthSpec spec;
  spec.num_keywords = cfg.data.keywords;
  spec.num_speakers = cfg.data.speakers;
  spec.utterances_per_pair = cfg.data.utterances;
  spec.sample_len = cfg.data.sample_len;
  spec.noise = cfg.data.noise;
  spec.sample_rate = cfg.data.rate;
  spec.seed = cfg.seed;
  return spec;
}

std::map<Task, TaskDataset> train_datasets(const Config& cfg,
                                           const Corpus& corpus,
                                           const std::vector<Task>& tasks) {
  std::map<Task, TaskDataset> data;
  for (Task t : tasks) data[t] = make_task_dataset(corpus, t, Split::train);
  return data;
}

TrainOptions train_options(const Config& cfg) {
  TrainOptions opts;
  opts.lr = cfg.train.lr;
  opts.clip_norm = cfg.train.clip;
  opts.shared_optimizer = cfg.train.shared_optimizer;
  opts.checkpoint_every = cfg.train.checkpoint_every;
  return opts;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& common) {
  const Config cfg = resolve_config(common);
  const std::string out = resolve_out(common);
  const std::string data_dir = out + "/data";
  generate_synthetic(synth_spec_from(cfg), data_dir);
  RunRecord rec{"gen-data", cfg, out, {}};
  rec.add(data_dir + "/manifest.tsv");
  rec.write("run-gen-data.json");
  std::cout << "corpus written to " << data_dir << "\n";
  return 0;
}

int cmd_train_teacher(const CommonArgs& common, const std::string& data_arg) {
  const Config cfg = resolve_config(common);
  const std::string out = resolve_out(common);
  const std::string manifest =
      data_arg.empty() ? out + "/data/manifest.tsv" : data_arg;
  require_artifact(manifest);
  const Corpus corpus = load_corpus(manifest);

  auto teacher = build_model<float>(cfg.teacher_model_config(), cfg.seed);
  std::map<Task, TaskHead<float>> heads;
  heads[Task::kws] = make_kws_head<float>(cfg.model.dim, cfg.kws.classes, cfg.seed);
  heads[Task::sv] = make_sv_head<float>(cfg.model.dim, cfg.sv_speakers(),
                                        cfg.sv.margin, cfg.sv.scale, cfg.seed);

  TrainSchedule sched;
  sched.tasks = {Task::kws, Task::sv};
  sched.max_iterations = cfg.train.iterations;
  sched.batch_size = cfg.train.batch;
  sched.seed = cfg.seed;
  const auto data = train_datasets(cfg, corpus, sched.tasks);

  const std::string ckpt = out + "/teacher.ckpt";
  FinetuneState<float> state;
  auto save_cb = [&](const FinetuneState<float>& st) {
    save_checkpoint(ckpt, cfg, teacher, &heads, nullptr, &st);
  };
  auto trace = multitask_finetune(teacher, heads, data, sched,
                                  train_options(cfg), &state, save_cb);
  save_checkpoint(ckpt, cfg, teacher, &heads, nullptr, &state);
  write_finetune_trace_csv(out + "/teacher_trace.csv", trace);

  RunRecord rec{"train-teacher", cfg, out, {}};
  rec.add(ckpt);
  rec.add(out + "/teacher_trace.csv");
  rec.write("run-train-teacher.json");
  std::cout << "teacher checkpoint: " << ckpt << "\n";
  return 0;
}

int cmd_distill(const CommonArgs& common, const std::string& teacher_arg,
                const std::string& data_arg, const std::string& resume_arg) {
  const Config cfg = resolve_config(common);
  const std::string out = resolve_out(common);
  const std::string teacher_path =
      teacher_arg.empty() ? out + "/teacher.ckpt" : teacher_arg;
  const std::string manifest =
      data_arg.empty() ? out + "/data/manifest.tsv" : data_arg;
  require_artifact(teacher_path);
  require_artifact(manifest);

  auto teacher_bundle = load_checkpoint<float>(teacher_path);
  EncoderModel<float>& teacher = teacher_bundle.model;
  teacher.set_frozen(true);

  EncoderModel<float> student;
  DistillPlan<float> plan;
  DistillState<float> state;
  if (!resume_arg.empty()) {
    require_artifact(resume_arg);
    auto resumed = load_checkpoint<float>(resume_arg);
    if (!resumed.plan || !resumed.distill)
      throw ConfigError("resume checkpoint carries no distillation state: " +
                        resume_arg);
    student = std::move(resumed.model);
    plan = std::move(*resumed.plan);
    state = std::move(*resumed.distill);
  } else {
    student = init_student_from_teacher(teacher, cfg.student_model_config());
    plan = make_distill_plan<float>(cfg.distill.layers, cfg.model.dim,
                                    cfg.model.dim, cfg.seed);
  }

  const Corpus corpus = load_corpus(manifest);
  std::vector<std::vector<float>> waves;
  for (const auto& u : corpus.utterances)
    if (u.split == Split::train) waves.push_back(u.wave);

  DistillOptions opts;
  opts.batch_size = cfg.distill.batch;
  opts.lr = cfg.train.lr;
  opts.clip_norm = cfg.train.clip;
  opts.checkpoint_every = cfg.train.checkpoint_every;

  const std::string ckpt = out + "/student_distilled.ckpt";
  auto save_cb = [&](const DistillState<float>& st) {
    save_checkpoint(ckpt, cfg, student, nullptr, &plan, nullptr, &st);
  };
  auto trace = run_distillation(teacher, student, plan, waves,
                                cfg.distill.steps, cfg.seed, opts, &state,
                                save_cb);
  save_checkpoint(ckpt, cfg, student, nullptr, &plan, nullptr, &state);
  write_distill_trace_csv(out + "/distill_trace.csv", trace, plan.teacher_layers);

  RunRecord rec{"distill", cfg, out, {}};
  rec.add(ckpt);
  rec.add(out + "/distill_trace.csv");
  rec.write("run-distill.json");
  std::cout << "distilled student checkpoint: " << ckpt << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& common, const std::string& input_arg,
                 const std::string& data_arg, const std::string& tasks_arg,
                 bool freeze) {
  const Config cfg = resolve_config(common);
  const std::string out = resolve_out(common);
  const std::string input =
      input_arg.empty() ? out + "/student_distilled.ckpt" : input_arg;
  const std::string manifest =
      data_arg.empty() ? out + "/data/manifest.tsv" : data_arg;
  require_artifact(input);
  require_artifact(manifest);

  std::vector<Task> tasks;
  if (tasks_arg == "kws")
    tasks = {Task::kws};
  else if (tasks_arg == "sv")
    tasks = {Task::sv};
  else if (tasks_arg == "multi")
    tasks = {Task::kws, Task::sv};
  else
    throw ConfigError("finetune: --tasks must be kws, sv, or multi");

  auto bundle = load_checkpoint<float>(input);
  EncoderModel<float>& model = bundle.model;

  std::map<Task, TaskHead<float>> heads = bundle.heads;
  for (Task t : tasks) {
    if (heads.count(t)) continue;
    heads[t] = t == Task::kws
                   ? make_kws_head<float>(cfg.model.dim, cfg.kws.classes, cfg.seed)
                   : make_sv_head<float>(cfg.model.dim, cfg.sv_speakers(),
                                         cfg.sv.margin, cfg.sv.scale, cfg.seed);
  }

  const Corpus corpus = load_corpus(manifest);
  TrainSchedule sched;
  sched.tasks = tasks;
  sched.max_iterations = cfg.train.iterations;
  sched.batch_size = cfg.train.batch;
  sched.freeze_srl = freeze;
  sched.seed = cfg.seed;
  const auto data = train_datasets(cfg, corpus, tasks);

  FinetuneState<float> state;
  if (bundle.finetune) state = std::move(*bundle.finetune);

  std::string tag = tasks_arg;
  if (freeze) tag += "_frozen";
  const std::string ckpt = out + "/student_" + tag + ".ckpt";
  const DistillPlan<float>* plan = bundle.plan ? &*bundle.plan : nullptr;
  auto save_cb = [&](const FinetuneState<float>& st) {
    save_checkpoint(ckpt, cfg, model, &heads, plan, &st);
  };
  auto trace = multitask_finetune(model, heads, data, sched,
                                  train_options(cfg), &state, save_cb);
  save_checkpoint(ckpt, cfg, model, &heads, plan, &state);
  write_finetune_trace_csv(out + "/finetune_" + tag + "_trace.csv", trace);

  RunRecord rec{"finetune", cfg, out, {}};
  rec.add(ckpt);
  rec.add(out + "/finetune_" + tag + "_trace.csv");
  rec.write("run-finetune-" + tag + ".json");
  std::cout << "fine-tuned checkpoint: " << ckpt << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& common, const std::string& input_arg,
                 const std::string& data_arg) {
  const Config cfg = resolve_config(common);
  const std::string out = resolve_out(common);
  const std::string input =
      input_arg.empty() ? out + "/student_multi.ckpt" : input_arg;
  const std::string manifest =
      data_arg.empty() ? out + "/data/manifest.tsv" : data_arg;
  require_artifact(input);
  require_artifact(manifest);

  auto bundle = load_checkpoint<float>(input);
  EncoderModel<float>& model = bundle.model;
  model.set_frozen(true);
  const Corpus corpus = load_corpus(manifest);
  const Index depth = model.config.num_transformer_layers;

  std::vector<Index> kws_pred, kws_label;
  std::vector<SVEmbedding<float>> embeddings;
  std::vector<Index> emb_speaker;
  for (const auto& u : corpus.utterances) {
    if (u.split != Split::test) continue;
    auto hidden = forward_hidden(model, wave_tensor<float>(u.wave), depth);
    if (bundle.heads.count(Task::kws)) {
      const TaskHead<float>& head = bundle.heads.at(Task::kws);
      Tensor<float> pooled = mean_pool_rows(hidden.back());
      Tensor<float> logits =
          add(matmul(reshape(pooled, {1, pooled.dim(0)}), head.weight), head.bias);
      Index best = 0;
      for (Index c = 1; c < head.out_dim(); ++c)
        if (logits.values()[c] > logits.values()[best]) best = c;
      kws_pred.push_back(best);
      kws_label.push_back(u.keyword);
    }
    embeddings.push_back(extract_embedding(hidden.back(), u.id));
    emb_speaker.push_back(u.speaker);
  }

  std::vector<MetricReport> reports;
  if (!kws_pred.empty())
    reports.push_back({"kws", "accuracy", accuracy(kws_pred, kws_label),
                       static_cast<std::int64_t>(kws_pred.size())});

  // Trials: every same-speaker pair, plus an equal-sized seeded sample of
  // cross-speaker pairs.
  TrialSet trials;
  std::vector<std::pair<std::size_t, std::size_t>> impostor_pool;
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
      if (emb_speaker[i] == emb_speaker[j]) {
        trials.trials.push_back({embeddings[i].utterance_id,
                                 embeddings[j].utterance_id, true});
        trials.scores.push_back(cosine_score(embeddings[i], embeddings[j]));
      } else {
        impostor_pool.emplace_back(i, j);
      }
    }
  const std::size_t targets = trials.trials.size();
  Rng trial_rng(derive_seed(cfg.seed, "eval.impostors"));
  for (std::size_t k = 0; k < targets && !impostor_pool.empty(); ++k) {
    const std::size_t pick = static_cast<std::size_t>(
        trial_rng.below(impostor_pool.size()));
    const auto [i, j] = impostor_pool[pick];
    impostor_pool[pick] = impostor_pool.back();
    impostor_pool.pop_back();
    trials.trials.push_back({embeddings[i].utterance_id,
                             embeddings[j].utterance_id, false});
    trials.scores.push_back(cosine_score(embeddings[i], embeddings[j]));
  }
  if (targets > 0 && trials.trials.size() > targets)
    reports.push_back({"sv", "eer", compute_eer(trials),
                       static_cast<std::int64_t>(trials.trials.size())});

  const std::string stem = fs::path(input).stem().string();
  const std::string metrics_path = out + "/metrics_" + stem + ".csv";
  const std::string trials_path = out + "/trials_" + stem + ".tsv";
  write_metric_report_csv(metrics_path, reports);
  write_trial_list(trials_path, trials);

  RunRecord rec{"evaluate", cfg, out, {}};
  rec.add(metrics_path);
  rec.add(trials_path);
  rec.write("run-evaluate-" + stem + ".json");
  for (const auto& r : reports)
    std::cout << r.task << " " << r.metric << " = " << r.value << " (n=" << r.n
              << ")\n";
  return 0;
}

int cmd_count_params(const CommonArgs& common) {
  const Config cfg = resolve_config(common);
  const std::string out = resolve_out(common);

  auto teacher = build_model<float>(cfg.teacher_model_config(), cfg.seed);
  const Index teacher_count = count_parameters(teacher);

  auto student = build_model<float>(cfg.student_model_config(), cfg.seed);
  const Index encoder_count = count_parameters(student);
  auto plan = make_distill_plan<float>(cfg.distill.layers, cfg.model.dim,
                                       cfg.model.dim, cfg.seed);
  Index plan_count = 0;
  for (const auto& [name, t] : plan.named_parameters()) plan_count += t.numel();
  const Index kws_count = cfg.model.dim * cfg.kws.classes + cfg.kws.classes;
  const Index sv_count = cfg.model.dim * cfg.sv_speakers();
  const Index student_count = encoder_count + plan_count + kws_count + sv_count;

  std::printf("teacher-reference parameters: %lld\n",
              static_cast<long long>(teacher_count));
  std::printf(
      "student-reference parameters: %lld (encoder %lld + prediction heads "
      "%lld + downstream heads %lld)\n",
      static_cast<long long>(student_count),
      static_cast<long long>(encoder_count),
      static_cast<long long>(plan_count),
      static_cast<long long>(kws_count + sv_count));
  std::printf("student/teacher ratio: %.4f\n",
              static_cast<double>(student_count) /
                  static_cast<double>(teacher_count));

  RunRecord rec{"count-params", cfg, out, {}};
  rec.write("run-count-params.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speech-encoder distillation and multi-task fine-tuning toolkit"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(gen, gen_args);

  CommonArgs teach_args;
  std::string teach_data;
  CLI::App* teach =
      app.add_subcommand("train-teacher", "supervised multi-task teacher training");
  add_common(teach, teach_args);
  teach->add_option("--data", teach_data, "corpus manifest path");

  CommonArgs dist_args;
  std::string dist_teacher, dist_data, dist_resume;
  CLI::App* dist = app.add_subcommand("distill", "distill the teacher into a student");
  add_common(dist, dist_args);
  dist->add_option("--teacher", dist_teacher, "teacher checkpoint path");
  dist->add_option("--data", dist_data, "corpus manifest path");
  dist->add_option("--resume", dist_resume, "partial student checkpoint to resume");

  CommonArgs ft_args;
  std::string ft_input, ft_data, ft_tasks = "multi";
  bool ft_freeze = false;
  CLI::App* ft = app.add_subcommand("finetune", "fine-tune a student checkpoint");
  add_common(ft, ft_args);
  ft->add_option("--input", ft_input, "input checkpoint path");
  ft->add_option("--data", ft_data, "corpus manifest path");
  ft->add_option("--tasks", ft_tasks, "kws, sv, or multi");
  ft->add_flag("--freeze", ft_freeze, "freeze the SRL encoder");

  CommonArgs ev_args;
  std::string ev_input, ev_data;
  CLI::App* ev = app.add_subcommand("evaluate", "accuracy and EER on the test split");
  add_common(ev, ev_args);
  ev->add_option("--input", ev_input, "checkpoint to evaluate");
  ev->add_option("--data", ev_data, "corpus manifest path");

  CommonArgs cp_args;
  CLI::App* cp = app.add_subcommand("count-params", "parameter counting report");
  add_common(cp, cp_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (teach->parsed()) return cmd_train_teacher(teach_args, teach_data);
    if (dist->parsed())
      return cmd_distill(dist_args, dist_teacher, dist_data, dist_resume);
    if (ft->parsed())
      return cmd_finetune(ft_args, ft_input, ft_data, ft_tasks, ft_freeze);
    if (ev->parsed()) return cmd_evaluate(ev_args, ev_input, ev_data);
    if (cp->parsed()) return cmd_count_params(cp_args);
  } catch (const MissingArtifact& e) {
    std::cerr << "error: missing-input: " << e.what() << "\n";
    return kExitMissingInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
