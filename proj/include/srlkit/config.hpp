// Flat key = value experiment configuration with typed defaults, domain
// validation, and a canonical serialization that is embedded verbatim in
// checkpoint headers. Unknown keys are errors.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "srlkit/model.hpp"

namespace srlkit {

struct Config {
  std::uint64_t seed = 42;

  struct Model {
    std::vector<ConvLayerSpec> conv = {{32, 10, 5}, {32, 3, 2}};
    Index dim = 64;
    Index heads = 4;
    Index ffn = 128;
    Index teacher_layers = 4;
    Index student_layers = 2;
    Index posconv_kernel = 15;
    Index posconv_groups = 4;
    double dropout = 0.0;
  } model;

  struct Data {
    Index keywords = 12;
    Index speakers = 16;
    Index utterances = 6;  // per (keyword, speaker); the first goes to test
    Index sample_len = 240;
    double noise = 0.4;
    Index rate = 16000;
  } data;

  struct Distill {
    std::vector<Index> layers = {2, 3, 4};
    Index steps = 500;
    Index batch = 16;
  } distill;

  struct Train {
    double lr = 1e-4;
    Index iterations = 2000;
    Index batch = 16;
    double clip = 5.0;
    Index checkpoint_every = 500;
    bool shared_optimizer = true;
  } train;

  struct Kws {
    Index classes = 12;
  } kws;

  struct Sv {
    double margin = 0.5;
    double scale = 30.0;
    Index speakers = 0;  // 0: use data.speakers
    std::string variant = "additive";
  } sv;

  // Reference-scale preset used for parameter counting.
  static Config base_reference();

  static Config parse_file(const std::string& path);
  static Config parse_text(const std::string& text,
                           const std::string& origin = "<text>");

  // Canonical key = value dump; parse_text(serialize()) reproduces *this.
  std::string serialize() const;

  void apply_override(const std::string& key, const std::string& value);

  ModelConfig teacher_model_config() const;
  ModelConfig student_model_config() const;
  Index sv_speakers() const { return sv.speakers > 0 ? sv.speakers : data.speakers; }
};

}  // namespace srlkit
