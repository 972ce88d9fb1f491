// Synthetic two-label corpus generation and dataset plumbing.
//
// Every utterance is keyword template + speaker signature + seeded noise.
// Keyword identity lives in a high band (sinusoid components on a per-keyword
// frequency grid), speaker identity in a low band (fundamental + harmonics)
// and in a spectral tilt applied to the keyword components, so the two labels
// are separable but not trivially correlated. Waveforms are stored as raw
// 32-bit little-endian IEEE-754 samples, one file per utterance.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "srlkit/tensor.hpp"
#include "srlkit/trainer.hpp"

namespace srlkit {

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct SynthSpec {
  Index num_keywords = 12;
  Index num_speakers = 16;
  Index utterances_per_pair = 4;  // utterance 0 of each pair goes to test
  Index sample_len = 240;
  double noise = 1.0;
  Index sample_rate = 16000;
  std::uint64_t seed = 42;

  void validate() const {
    if (num_keywords < 1 || num_speakers < 1 || utterances_per_pair < 1)
      throw ConfigError("synth: counts must be >= 1");
    if (sample_len < 1) throw ConfigError("synth: sample_len must be >= 1");
    if (noise < 0.0) throw ConfigError("synth: noise must be >= 0");
    if (sample_rate < 1) throw ConfigError("synth: sample_rate must be >= 1");
  }
};

enum class Split { train, test };

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  Index keyword = 0;
  Index speaker = 0;
  Split split = Split::train;
};

struct Manifest {
  Index sample_rate = 16000;
  std::vector<ManifestEntry> entries;
};

// The generator's frequency tables, exposed so spectrum-based oracles can
// check label recoverability independently of any model.
struct SynthTables {
  static constexpr Index kComponents = 3;
  static constexpr Index kHarmonics = 3;
  std::vector<std::vector<double>> kw_freq;   // [keyword][component] Hz
  std::vector<std::vector<double>> kw_amp;
  std::vector<std::vector<double>> kw_phase;
  std::vector<std::vector<double>> sp_freq;   // [speaker][harmonic] Hz; speakers
                                              // near the ceiling carry fewer
  std::vector<std::vector<double>> sp_amp;
  std::vector<std::vector<double>> sp_phase;
  std::vector<double> sp_tilt;                // [-0.6, 0.6]
};

SynthTables make_synth_tables(const SynthSpec& spec);

// Deterministic clean waveform for (keyword, speaker); noise is added on top
// by the generator using a per-utterance derived seed.
std::vector<float> synth_clean_wave(const SynthSpec& spec,
                                    const SynthTables& tables, Index keyword,
                                    Index speaker);

std::vector<float> synth_utterance(const SynthSpec& spec,
                                   const SynthTables& tables, Index keyword,
                                   Index speaker, Index utterance);

// Writes one .f32 file per utterance plus manifest.tsv under out_dir.
Manifest generate_synthetic(const SynthSpec& spec, const std::string& out_dir);

// Manifest file: header line `#srl-manifest v1 rate=<int>`, then
// path<TAB>keyword<TAB>speaker<TAB>split rows.
Manifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& manifest);

std::vector<float> read_waveform(const std::string& path);
void write_waveform(const std::string& path, const std::vector<float>& wave);

// In-memory corpus keyed by the manifest.
struct Utterance {
  std::string id;  // file stem
  std::vector<float> wave;
  Index keyword = 0;
  Index speaker = 0;
  Split split = Split::train;
};

struct Corpus {
  Index sample_rate = 16000;
  std::vector<Utterance> utterances;
};

Corpus load_corpus(const std::string& manifest_path);

TaskDataset make_task_dataset(const Corpus& corpus, Task task, Split split);

}  // namespace srlkit
