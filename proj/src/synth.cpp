#include "srlkit/synth.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "srlkit/rng.hpp"

namespace srlkit {

namespace {

constexpr double kTwoPi = 6.283185307179586;
constexpr double kKeywordBandLo = 2000.0;
constexpr double kKeywordBandHi = 7000.0;
constexpr double kSpeakerF0Lo = 300.0;
constexpr double kSpeakerF0Hi = 950.0;
constexpr double kSpeakerCeiling = 1950.0;

static_assert(std::endian::native == std::endian::little,
              "waveform and checkpoint files assume a little-endian host");

std::string utterance_id(Index keyword, Index speaker, Index utt) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "utt_k%02d_s%03d_u%02d",
                static_cast<int>(keyword), static_cast<int>(speaker),
                static_cast<int>(utt));
  return buf;
}

}  // namespace

SynthTables make_synth_tables(const SynthSpec& spec) {
  spec.validate();
  SynthTables t;
  Rng rng(derive_seed(spec.seed, "synth.tables"));
  const Index slots = spec.num_keywords * SynthTables::kComponents;
  const double slot_width = (kKeywordBandHi - kKeywordBandLo) / slots;
  t.kw_freq.resize(spec.num_keywords);
  t.kw_amp.resize(spec.num_keywords);
  t.kw_phase.resize(spec.num_keywords);
  for (Index k = 0; k < spec.num_keywords; ++k) {
    for (Index c = 0; c < SynthTables::kComponents; ++c) {
      const Index slot = k * SynthTables::kComponents + c;
      t.kw_freq[k].push_back(kKeywordBandLo + slot_width * (slot + 0.5));
      t.kw_amp[k].push_back(rng.uniform(0.4, 0.6));
      t.kw_phase[k].push_back(rng.uniform(0.0, kTwoPi));
    }
  }
  // Speaker signature: a fundamental on a coarse grid below the keyword
  // band plus its harmonics under the band ceiling, and a spectral tilt
  // applied to the keyword components. The harmonic stack keeps adjacent
  // speakers resolvable within the short analysis window.
  t.sp_freq.resize(spec.num_speakers);
  t.sp_amp.resize(spec.num_speakers);
  t.sp_phase.resize(spec.num_speakers);
  t.sp_tilt.resize(spec.num_speakers);
  for (Index s = 0; s < spec.num_speakers; ++s) {
    const double f0 = kSpeakerF0Lo + (kSpeakerF0Hi - kSpeakerF0Lo) *
                                         (s + 0.5) / spec.num_speakers;
    for (Index h = 1; h <= SynthTables::kHarmonics; ++h) {
      if (f0 * h >= kSpeakerCeiling) break;
      t.sp_freq[s].push_back(f0 * h);
      t.sp_amp[s].push_back(rng.uniform(0.9, 1.3) / std::sqrt(double(h)));
      t.sp_phase[s].push_back(rng.uniform(0.0, kTwoPi));
    }
    t.sp_tilt[s] = rng.uniform(-0.6, 0.6);
  }
  return t;
}

std::vector<float> synth_clean_wave(const SynthSpec& spec,
                                    const SynthTables& tables, Index keyword,
                                    Index speaker) {
  const double mid = 0.5 * (kKeywordBandLo + kKeywordBandHi);
  const double half = 0.5 * (kKeywordBandHi - kKeywordBandLo);
  const double tilt = tables.sp_tilt[speaker];
  std::vector<float> wave(static_cast<std::size_t>(spec.sample_len));
  for (Index i = 0; i < spec.sample_len; ++i) {
    const double ts = static_cast<double>(i) / spec.sample_rate;
    double v = 0.0;
    for (Index c = 0; c < SynthTables::kComponents; ++c) {
      const double f = tables.kw_freq[keyword][c];
      const double envelope = 1.0 + tilt * (f - mid) / half;
      v += tables.kw_amp[keyword][c] * envelope *
           std::sin(kTwoPi * f * ts + tables.kw_phase[keyword][c]);
    }
    for (std::size_t h = 0; h < tables.sp_freq[speaker].size(); ++h) {
      v += tables.sp_amp[speaker][h] *
           std::sin(kTwoPi * tables.sp_freq[speaker][h] * ts +
                    tables.sp_phase[speaker][h]);
    }
    wave[static_cast<std::size_t>(i)] = static_cast<float>(v);
  }
  return wave;
}

std::vector<float> synth_utterance(const SynthSpec& spec,
                                   const SynthTables& tables, Index keyword,
                                   Index speaker, Index utterance) {
  std::vector<float> wave = synth_clean_wave(spec, tables, keyword, speaker);
  if (spec.noise > 0.0) {
    const std::uint64_t utt_index = static_cast<std::uint64_t>(
        (keyword * spec.num_speakers + speaker) * spec.utterances_per_pair +
        utterance);
    Rng rng(derive_seed(spec.seed, "synth.noise", utt_index));
    for (auto& v : wave)
      v = static_cast<float>(static_cast<double>(v) + spec.noise * rng.normal());
  }
  return wave;
}

Manifest generate_synthetic(const SynthSpec& spec, const std::string& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("generate_synthetic: cannot create " + out_dir);
  const SynthTables tables = make_synth_tables(spec);
  Manifest manifest;
  manifest.sample_rate = spec.sample_rate;
  for (Index k = 0; k < spec.num_keywords; ++k)
    for (Index s = 0; s < spec.num_speakers; ++s)
      for (Index u = 0; u < spec.utterances_per_pair; ++u) {
        ManifestEntry e;
        e.path = utterance_id(k, s, u) + ".f32";
        e.keyword = k;
        e.speaker = s;
        e.split = u == 0 ? Split::test : Split::train;
        write_waveform(out_dir + "/" + e.path,
                       synth_utterance(spec, tables, k, s, u));
        manifest.entries.push_back(std::move(e));
      }
  write_manifest(out_dir + "/manifest.tsv", manifest);
  return manifest;
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  Manifest m;
  std::string line;
  if (!std::getline(in, line) || line.rfind("#srl-manifest v1 rate=", 0) != 0)
    throw IoError("manifest " + path + ": missing '#srl-manifest v1' header");
  m.sample_rate = std::stol(line.substr(std::strlen("#srl-manifest v1 rate=")));
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string kw, sp, split;
    if (!std::getline(ss, e.path, '\t') || !std::getline(ss, kw, '\t') ||
        !std::getline(ss, sp, '\t') || !std::getline(ss, split))
      throw IoError("manifest " + path + ": malformed line " +
                    std::to_string(line_no));
    e.keyword = std::stol(kw);
    e.speaker = std::stol(sp);
    if (split == "train")
      e.split = Split::train;
    else if (split == "test")
      e.split = Split::test;
    else
      throw IoError("manifest " + path + ": unknown split '" + split +
                    "' at line " + std::to_string(line_no));
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path);
  out << "#srl-manifest v1 rate=" << manifest.sample_rate << "\n";
  for (const auto& e : manifest.entries)
    out << e.path << '\t' << e.keyword << '\t' << e.speaker << '\t'
        << (e.split == Split::train ? "train" : "test") << '\n';
}

std::vector<float> read_waveform(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open waveform " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff bytes = in.tellg();
  in.seekg(0, std::ios::beg);
  if (bytes % 4 != 0)
    throw IoError("waveform " + path + ": size is not a multiple of 4 bytes");
  std::vector<float> wave(static_cast<std::size_t>(bytes / 4));
  in.read(reinterpret_cast<char*>(wave.data()), bytes);
  if (!in) throw IoError("waveform " + path + ": short read");
  return wave;
}

void write_waveform(const std::string& path, const std::vector<float>& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write waveform " + path);
  out.write(reinterpret_cast<const char*>(wave.data()),
            static_cast<std::streamsize>(wave.size() * 4));
  if (!out) throw IoError("waveform " + path + ": short write");
}

Corpus load_corpus(const std::string& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const std::string dir =
      std::filesystem::path(manifest_path).parent_path().string();
  Corpus corpus;
  corpus.sample_rate = m.sample_rate;
  for (const auto& e : m.entries) {
    Utterance u;
    u.id = std::filesystem::path(e.path).stem().string();
    u.wave = read_waveform(dir.empty() ? e.path : dir + "/" + e.path);
    u.keyword = e.keyword;
    u.speaker = e.speaker;
    u.split = e.split;
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

TaskDataset make_task_dataset(const Corpus& corpus, Task task, Split split) {
  TaskDataset ds;
  for (const auto& u : corpus.utterances) {
    if (u.split != split) continue;
    WaveExample ex;
    ex.wave = u.wave;
    ex.label = task == Task::kws ? u.keyword : u.speaker;
    ex.id = u.id;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace srlkit
