#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "srlkit/checkpoint.hpp"
#include "srlkit/config.hpp"
#include "srlkit/synth.hpp"

using namespace srlkit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

SynthSpec small_spec(double noise = 0.8) {
  SynthSpec spec;
  spec.num_keywords = 4;
  spec.num_speakers = 3;
  spec.utterances_per_pair = 3;
  spec.sample_len = 200;
  spec.noise = noise;
  spec.seed = 11;
  return spec;
}

// Goertzel-style energy probe at one frequency.
double tone_energy(const std::vector<float>& wave, double freq, double rate) {
  double re = 0.0, im = 0.0;
  for (std::size_t i = 0; i < wave.size(); ++i) {
    const double phase = 2.0 * 3.14159265358979323846 * freq *
                         static_cast<double>(i) / rate;
    re += wave[i] * std::cos(phase);
    im += wave[i] * std::sin(phase);
  }
  return re * re + im * im;
}

ModelConfig tiny_model(Index layers = 2) {
  ModelConfig cfg;
  cfg.conv_layers = {{8, 8, 4}, {8, 3, 2}};
  cfg.model_dim = 16;
  cfg.num_transformer_layers = layers;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.pos_conv = {5, 2};
  return cfg;
}

Config tiny_config() {
  Config c;
  c.model.conv = {{8, 8, 4}, {8, 3, 2}};
  c.model.dim = 16;
  c.model.heads = 2;
  c.model.ffn = 32;
  c.model.teacher_layers = 2;
  c.model.student_layers = 1;
  c.model.posconv_kernel = 5;
  c.model.posconv_groups = 2;
  c.distill.layers = {1, 2};
  c.data.keywords = 4;
  c.data.speakers = 3;
  c.data.utterances = 2;
  c.data.sample_len = 120;
  c.kws.classes = 4;
  return c;
}

}  // namespace

TEST_CASE("generator is byte-deterministic in the spec seed") {
  TempDir d1("srlkit_gen_a"), d2("srlkit_gen_b");
  const SynthSpec spec = small_spec();
  generate_synthetic(spec, d1.str());
  generate_synthetic(spec, d2.str());
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(d1.path)) {
    const auto other = d2.path / e.path().filename();
    REQUIRE(fs::exists(other));
    CHECK(file_digest(e.path().string()) == file_digest(other.string()));
    ++files;
  }
  CHECK(files == 4 * 3 * 3 + 1);  // corpus + manifest

  TempDir d3("srlkit_gen_c");
  SynthSpec other_seed = spec;
  other_seed.seed = 12;
  generate_synthetic(other_seed, d3.str());
  bool any_diff = false;
  for (const auto& e : fs::directory_iterator(d1.path)) {
    if (e.path().filename() == "manifest.tsv") continue;
    any_diff = any_diff ||
               file_digest(e.path().string()) !=
                   file_digest((d3.path / e.path().filename()).string());
  }
  CHECK(any_diff);
}

TEST_CASE("zero noise collapses repeats of the same (keyword, speaker)") {
  const SynthSpec spec = small_spec(0.0);
  const SynthTables tables = make_synth_tables(spec);
  auto u0 = synth_utterance(spec, tables, 2, 1, 0);
  auto u1 = synth_utterance(spec, tables, 2, 1, 1);
  REQUIRE(u0.size() == u1.size());
  for (std::size_t i = 0; i < u0.size(); ++i) CHECK(u0[i] == u1[i]);

  SynthSpec noisy = small_spec(0.5);
  auto n0 = synth_utterance(noisy, tables, 2, 1, 0);
  auto n1 = synth_utterance(noisy, tables, 2, 1, 1);
  bool differ = false;
  for (std::size_t i = 0; i < n0.size(); ++i) differ = differ || n0[i] != n1[i];
  CHECK(differ);
}

TEST_CASE("spectral-peak oracle recovers every keyword at zero noise") {
  SynthSpec spec = small_spec(0.0);
  spec.num_keywords = 12;
  spec.num_speakers = 6;
  const SynthTables tables = make_synth_tables(spec);
  for (Index k = 0; k < spec.num_keywords; ++k)
    for (Index s = 0; s < spec.num_speakers; ++s) {
      const auto wave = synth_utterance(spec, tables, k, s, 0);
      double best = -1.0;
      Index best_k = -1;
      for (Index cand = 0; cand < spec.num_keywords; ++cand) {
        double energy = 0.0;
        for (double f : tables.kw_freq[cand])
          energy += tone_energy(wave, f, spec.sample_rate);
        if (energy > best) {
          best = energy;
          best_k = cand;
        }
      }
      CHECK(best_k == k);
    }
}

TEST_CASE("manifest closure: all files referenced, all references exist") {
  TempDir dir("srlkit_closure");
  const SynthSpec spec = small_spec();
  const Manifest manifest = generate_synthetic(spec, dir.str());

  std::set<std::string> referenced;
  for (const auto& e : manifest.entries) {
    referenced.insert(e.path);
    CHECK(fs::exists(dir.path / e.path));
  }
  CHECK(referenced.size() == manifest.entries.size());  // paths unique
  for (const auto& e : fs::directory_iterator(dir.path)) {
    if (e.path().filename() == "manifest.tsv") continue;
    CHECK(referenced.count(e.path().filename().string()) == 1);
  }

  bool train_seen = false, test_seen = false;
  for (const auto& e : manifest.entries) {
    train_seen = train_seen || e.split == Split::train;
    test_seen = test_seen || e.split == Split::test;
  }
  CHECK(train_seen);
  CHECK(test_seen);
}

TEST_CASE("manifest file round trip") {
  TempDir dir("srlkit_manifest");
  Manifest m;
  m.sample_rate = 8000;
  m.entries = {{"a.f32", 3, 1, Split::train}, {"b.f32", 0, 2, Split::test}};
  write_manifest(dir.str() + "/m.tsv", m);
  Manifest r = read_manifest(dir.str() + "/m.tsv");
  CHECK(r.sample_rate == 8000);
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[0].path == "a.f32");
  CHECK(r.entries[0].keyword == 3);
  CHECK(r.entries[1].split == Split::test);

  std::ofstream bad(dir.str() + "/bad.tsv");
  bad << "no header\n";
  bad.close();
  CHECK_THROWS_AS(read_manifest(dir.str() + "/bad.tsv"), IoError);
}

TEST_CASE("corpus loading and task views") {
  TempDir dir("srlkit_corpus");
  const SynthSpec spec = small_spec();
  generate_synthetic(spec, dir.str());
  Corpus corpus = load_corpus(dir.str() + "/manifest.tsv");
  CHECK(corpus.utterances.size() == 4 * 3 * 3);
  CHECK(corpus.utterances.front().wave.size() == 200);

  TaskDataset kws_train = make_task_dataset(corpus, Task::kws, Split::train);
  TaskDataset sv_test = make_task_dataset(corpus, Task::sv, Split::test);
  CHECK(kws_train.examples.size() == 4 * 3 * 2);
  CHECK(sv_test.examples.size() == 4 * 3);
  for (const auto& ex : kws_train.examples) CHECK(ex.label < 4);
  for (const auto& ex : sv_test.examples) CHECK(ex.label < 3);
}

TEST_CASE("checkpoint round trip is bit-exact in both precision modes") {
  TempDir dir("srlkit_ckpt");
  Config cfg = tiny_config();

  auto model32 = build_model<float>(tiny_model(), 3);
  std::map<Task, TaskHead<float>> heads;
  heads[Task::kws] = make_kws_head<float>(16, 4, 3);
  heads[Task::sv] = make_sv_head<float>(16, 3, cfg.sv.margin, cfg.sv.scale, 3);
  save_checkpoint(dir.str() + "/m32.ckpt", cfg, model32, &heads);
  auto b32 = load_checkpoint<float>(dir.str() + "/m32.ckpt");
  for (const auto& [name, t] : model32.parameters()) {
    const auto& lv = b32.model.param(name).values();
    for (Index i = 0; i < t.numel(); ++i) CHECK(t.values()[i] == lv[i]);
  }
  REQUIRE(b32.heads.count(Task::kws) == 1);
  REQUIRE(b32.heads.count(Task::sv) == 1);
  CHECK(b32.heads[Task::sv].margin == cfg.sv.margin);
  for (Index i = 0; i < heads[Task::kws].weight.numel(); ++i)
    CHECK(heads[Task::kws].weight.values()[i] ==
          b32.heads[Task::kws].weight.values()[i]);

  auto model64 = build_model<double>(tiny_model(), 3);
  save_checkpoint<double>(dir.str() + "/m64.ckpt", cfg, model64);
  auto b64 = load_checkpoint<double>(dir.str() + "/m64.ckpt");
  for (const auto& [name, t] : model64.parameters()) {
    const auto& lv = b64.model.param(name).values();
    for (Index i = 0; i < t.numel(); ++i) CHECK(t.values()[i] == lv[i]);
  }

  // Mixed-precision loads are refused rather than silently converted.
  CHECK_THROWS_AS(load_checkpoint<double>(dir.str() + "/m32.ckpt"), IoError);
}

TEST_CASE("truncated and corrupted checkpoints fail the digest check") {
  TempDir dir("srlkit_ckpt_bad");
  Config cfg = tiny_config();
  auto model = build_model<float>(tiny_model(), 3);
  const std::string path = dir.str() + "/m.ckpt";
  save_checkpoint(path, cfg, model);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  in.close();

  std::ofstream cut(dir.str() + "/cut.ckpt", std::ios::binary);
  cut.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  cut.close();
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(dir.str() + "/cut.ckpt").model.config.validate(),
                       doctest::Contains("digest"), IoError);

  bytes[bytes.size() / 3] ^= 0x20;
  std::ofstream flip(dir.str() + "/flip.ckpt", std::ios::binary);
  flip.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  flip.close();
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(dir.str() + "/flip.ckpt").model.config.validate(),
                       doctest::Contains("digest"), IoError);
}

TEST_CASE("unknown tensor names in a checkpoint are rejected") {
  TempDir dir("srlkit_ckpt_unknown");
  Config cfg = tiny_config();
  auto model = build_model<float>(tiny_model(), 3);
  CheckpointData data;
  data.config_text = cfg.serialize();
  data.tensors.push_back(scalar_raw("meta.num_layers", 2.0));
  for (const auto& [name, t] : model.parameters())
    data.tensors.push_back(to_raw("model." + name, t));
  data.tensors.push_back(scalar_raw("mystery.tensor", 1.0));
  save_checkpoint_file(dir.str() + "/u.ckpt", data);
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(dir.str() + "/u.ckpt").config.seed,
                       doctest::Contains("mystery.tensor"), IoError);
}

TEST_CASE("config: empty file gives all defaults") {
  TempDir dir("srlkit_cfg");
  std::ofstream(dir.str() + "/empty.cfg").close();
  Config c = Config::parse_file(dir.str() + "/empty.cfg");
  Config d;
  CHECK(c.serialize() == d.serialize());
  CHECK(c.seed == 42);
  CHECK(c.model.dim == 64);
  CHECK(c.train.lr == 1e-4);
  CHECK(c.sv.margin == 0.2);
}

TEST_CASE("config: domain violation names the key") {
  CHECK_THROWS_WITH_AS(Config::parse_text("sv.margin = -1\n"),
                       doctest::Contains("sv.margin"), ConfigError);
  CHECK_THROWS_WITH_AS(Config::parse_text("model.dropout = 1.5\n"),
                       doctest::Contains("model.dropout"), ConfigError);
}

TEST_CASE("config: unknown keys and malformed lines carry line numbers") {
  CHECK_THROWS_WITH_AS(Config::parse_text("seed = 1\nnot.a.key = 2\n", "f.cfg"),
                       doctest::Contains("f.cfg:2"), ConfigError);
  CHECK_THROWS_WITH_AS(Config::parse_text("seed 1\n", "f.cfg"),
                       doctest::Contains("f.cfg:1"), ConfigError);
  CHECK_THROWS_WITH_AS(Config::parse_text("seed = 1\nseed = 2\n", "f.cfg"),
                       doctest::Contains("duplicate"), ConfigError);
  CHECK_THROWS_WITH_AS(Config::parse_text("train.lr = fast\n", "f.cfg"),
                       doctest::Contains("train.lr"), ConfigError);
}

TEST_CASE("config: comments and whitespace are tolerated") {
  Config c = Config::parse_text(
      "# experiment\n\n  seed = 9  # inline comment\nmodel.dim = 32\n");
  CHECK(c.seed == 9);
  CHECK(c.model.dim == 32);
}

TEST_CASE("config: serialize round-trips and echoes into checkpoints verbatim") {
  TempDir dir("srlkit_cfg_echo");
  Config c = tiny_config();
  c.seed = 77;
  c.train.lr = 3e-4;
  c.sv.margin = 0.35;
  const std::string text = c.serialize();
  Config reparsed = Config::parse_text(text);
  CHECK(reparsed.serialize() == text);

  const std::string cfg_path = dir.str() + "/full.cfg";
  std::ofstream(cfg_path) << text;
  Config from_file = Config::parse_file(cfg_path);
  auto model = build_model<float>(from_file.teacher_model_config(), from_file.seed);
  save_checkpoint(dir.str() + "/echo.ckpt", from_file, model);
  CheckpointData raw = load_checkpoint_file(dir.str() + "/echo.ckpt");
  std::ifstream in(cfg_path, std::ios::binary);
  std::string original((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  CHECK(raw.config_text == original);
}

TEST_CASE("config: overrides obey domains") {
  Config c;
  c.apply_override("train.iterations", "123");
  CHECK(c.train.iterations == 123);
  CHECK_THROWS_AS(c.apply_override("sv.margin", "-2"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("bogus.key", "1"), ConfigError);
}

TEST_CASE("distillation checkpoint resumes fine-tuning bit-identically") {
  // Distill a student, checkpoint it, and verify that fine-tuning the loaded
  // copy reproduces the trace of fine-tuning the in-memory model directly.
  TempDir dir("srlkit_resume");
  Config cfg = tiny_config();
  auto teacher = build_model<float>(cfg.teacher_model_config(), cfg.seed);
  teacher.set_frozen(true);
  auto student = init_student_from_teacher(teacher, cfg.student_model_config());
  DistillPlan<float> plan = make_distill_plan<float>(
      cfg.distill.layers, cfg.model.dim, cfg.model.dim, cfg.seed);

  std::vector<std::vector<float>> waves(10);
  Rng rng(4);
  for (auto& w : waves) {
    w.resize(120);
    for (auto& v : w) v = static_cast<float>(rng.normal());
  }
  DistillOptions dopts;
  dopts.batch_size = 4;
  run_distillation(teacher, student, plan, waves, 12, cfg.seed, dopts);
  save_checkpoint(dir.str() + "/student.ckpt", cfg, student, nullptr, &plan);

  auto run_finetune = [&](EncoderModel<float>& m) {
    std::map<Task, TaskHead<float>> heads;
    heads[Task::kws] = make_kws_head<float>(cfg.model.dim, 4, cfg.seed);
    heads[Task::sv] = make_sv_head<float>(cfg.model.dim, 3, cfg.sv.margin,
                                          cfg.sv.scale, cfg.seed);
    std::map<Task, TaskDataset> data;
    TaskDataset ds;
    for (std::size_t i = 0; i < waves.size(); ++i)
      ds.examples.push_back({waves[i], static_cast<Index>(i % 3), "w"});
    data[Task::kws] = ds;
    data[Task::sv] = ds;
    TrainSchedule sched;
    sched.tasks = {Task::kws, Task::sv};
    sched.max_iterations = 10;
    sched.batch_size = 3;
    sched.seed = cfg.seed;
    return multitask_finetune(m, heads, data, sched);
  };

  auto direct_trace = run_finetune(student);
  auto bundle = load_checkpoint<float>(dir.str() + "/student.ckpt");
  auto loaded_trace = run_finetune(bundle.model);
  REQUIRE(direct_trace.size() == loaded_trace.size());
  for (std::size_t i = 0; i < direct_trace.size(); ++i)
    CHECK(direct_trace[i].loss == loaded_trace[i].loss);
}
