#include "srlkit/config.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace srlkit {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct RawEntry {
  std::string value;
  std::size_t line = 0;
};

using RawMap = std::map<std::string, RawEntry>;

[[noreturn]] void fail(const std::string& origin, std::size_t line,
                       const std::string& msg) {
  throw ConfigError("config " + origin + ":" + std::to_string(line) + ": " + msg);
}

class Reader {
 public:
  Reader(RawMap raw, std::string origin)
      : raw_(std::move(raw)), origin_(std::move(origin)) {}

  bool has(const std::string& key) {
    auto it = raw_.find(key);
    if (it == raw_.end()) return false;
    consumed_.insert(consumed_.end(), key);
    return true;
  }

  const RawEntry& entry(const std::string& key) { return raw_.at(key); }

  std::int64_t get_int(const std::string& key, std::int64_t fallback,
                       std::int64_t lo, std::int64_t hi) {
    if (!has(key)) return fallback;
    const RawEntry& e = entry(key);
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (ec != std::errc() || p != e.value.data() + e.value.size())
      fail(origin_, e.line, key + " expects an integer, got '" + e.value + "'");
    if (v < lo || v > hi)
      fail(origin_, e.line, key + " must lie in [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "], got " + e.value);
    return v;
  }

  double get_double(const std::string& key, double fallback, double lo,
                    double hi, bool hi_exclusive = false) {
    if (!has(key)) return fallback;
    const RawEntry& e = entry(key);
    char* end = nullptr;
    const double v = std::strtod(e.value.c_str(), &end);
    if (end != e.value.c_str() + e.value.size() || e.value.empty())
      fail(origin_, e.line, key + " expects a number, got '" + e.value + "'");
    const bool hi_ok = hi_exclusive ? v < hi : v <= hi;
    if (!(v >= lo) || !hi_ok)
      fail(origin_, e.line, key + " out of domain, got " + e.value);
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const RawEntry& e = entry(key);
    if (e.value == "true") return true;
    if (e.value == "false") return false;
    fail(origin_, e.line, key + " expects true or false, got '" + e.value + "'");
  }

  std::string get_string(const std::string& key, std::string fallback) {
    if (!has(key)) return fallback;
    return entry(key).value;
  }

  // channels x kernel x stride, comma-separated layers: "512x10x5,512x3x2".
  std::vector<ConvLayerSpec> get_conv(const std::string& key,
                                      std::vector<ConvLayerSpec> fallback) {
    if (!has(key)) return fallback;
    const RawEntry& e = entry(key);
    std::vector<ConvLayerSpec> out;
    std::istringstream ss(e.value);
    std::string part;
    while (std::getline(ss, part, ',')) {
      ConvLayerSpec c;
      long ch = 0, ke = 0, st = 0;
      if (std::sscanf(part.c_str(), "%ldx%ldx%ld", &ch, &ke, &st) != 3 ||
          ch < 1 || ke < 1 || st < 1)
        fail(origin_, e.line,
             key + " expects channelsxkernelxstride layers, got '" + part + "'");
      c.channels = ch;
      c.kernel = ke;
      c.stride = st;
      out.push_back(c);
    }
    if (out.empty()) fail(origin_, e.line, key + " lists no layers");
    return out;
  }

  std::vector<Index> get_ints(const std::string& key,
                              std::vector<Index> fallback) {
    if (!has(key)) return fallback;
    const RawEntry& e = entry(key);
    std::vector<Index> out;
    std::istringstream ss(e.value);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      Index v = 0;
      auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
      if (ec != std::errc() || p != part.data() + part.size())
        fail(origin_, e.line, key + " expects integers, got '" + part + "'");
      out.push_back(v);
    }
    if (out.empty()) fail(origin_, e.line, key + " lists no values");
    return out;
  }

  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const RawEntry& e = entry(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (ec != std::errc() || p != e.value.data() + e.value.size())
      fail(origin_, e.line, key + " expects an unsigned integer, got '" + e.value + "'");
    return v;
  }

 private:
  RawMap raw_;
  std::string origin_;
  std::vector<std::string> consumed_;
};

const char* const kKnownKeys[] = {
    "seed",
    "model.conv", "model.dim", "model.heads", "model.ffn",
    "model.teacher_layers", "model.student_layers",
    "model.posconv_kernel", "model.posconv_groups", "model.dropout",
    "data.keywords", "data.speakers", "data.utterances",
    "data.sample_len", "data.noise", "data.rate",
    "distill.layers", "distill.steps", "distill.batch",
    "train.lr", "train.iterations", "train.batch", "train.clip",
    "train.checkpoint_every", "train.shared_optimizer",
    "kws.classes",
    "sv.margin", "sv.scale", "sv.speakers", "sv.variant",
};

RawMap tokenize(const std::string& text, const std::string& origin) {
  RawMap raw;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(origin, line_no, "expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(origin, line_no, "empty key");
    bool known = false;
    for (const char* k : kKnownKeys) known = known || key == k;
    if (!known) fail(origin, line_no, "unknown key '" + key + "'");
    if (raw.count(key))
      fail(origin, line_no, "duplicate key '" + key + "'");
    raw[key] = {value, line_no};
  }
  return raw;
}

Config from_reader(Reader& r) {
  Config c;
  constexpr std::int64_t kMax = 1'000'000'000;
  c.seed = r.get_uint64("seed", c.seed);
  c.model.conv = r.get_conv("model.conv", c.model.conv);
  c.model.dim = r.get_int("model.dim", c.model.dim, 1, kMax);
  c.model.heads = r.get_int("model.heads", c.model.heads, 1, kMax);
  c.model.ffn = r.get_int("model.ffn", c.model.ffn, 1, kMax);
  c.model.teacher_layers = r.get_int("model.teacher_layers", c.model.teacher_layers, 1, kMax);
  c.model.student_layers = r.get_int("model.student_layers", c.model.student_layers, 1, kMax);
  c.model.posconv_kernel = r.get_int("model.posconv_kernel", c.model.posconv_kernel, 1, kMax);
  c.model.posconv_groups = r.get_int("model.posconv_groups", c.model.posconv_groups, 1, kMax);
  c.model.dropout = r.get_double("model.dropout", c.model.dropout, 0.0, 1.0, true);
  c.data.keywords = r.get_int("data.keywords", c.data.keywords, 1, kMax);
  c.data.speakers = r.get_int("data.speakers", c.data.speakers, 1, kMax);
  c.data.utterances = r.get_int("data.utterances", c.data.utterances, 1, kMax);
  c.data.sample_len = r.get_int("data.sample_len", c.data.sample_len, 1, kMax);
  c.data.noise = r.get_double("data.noise", c.data.noise, 0.0, 1e6);
  c.data.rate = r.get_int("data.rate", c.data.rate, 1, kMax);
  c.distill.layers = r.get_ints("distill.layers", c.distill.layers);
  c.distill.steps = r.get_int("distill.steps", c.distill.steps, 0, kMax);
  c.distill.batch = r.get_int("distill.batch", c.distill.batch, 1, kMax);
  c.train.lr = r.get_double("train.lr", c.train.lr, 0.0, 1e6);
  c.train.iterations = r.get_int("train.iterations", c.train.iterations, 0, kMax);
  c.train.batch = r.get_int("train.batch", c.train.batch, 1, kMax);
  c.train.clip = r.get_double("train.clip", c.train.clip, -1.0, 1e9);
  c.train.checkpoint_every = r.get_int("train.checkpoint_every", c.train.checkpoint_every, 0, kMax);
  c.train.shared_optimizer = r.get_bool("train.shared_optimizer", c.train.shared_optimizer);
  c.kws.classes = r.get_int("kws.classes", c.kws.classes, 2, kMax);
  c.sv.margin = r.get_double("sv.margin", c.sv.margin, 0.0, 10.0);
  c.sv.scale = r.get_double("sv.scale", c.sv.scale, 1e-9, 1e6);
  c.sv.speakers = r.get_int("sv.speakers", c.sv.speakers, 0, kMax);
  c.sv.variant = r.get_string("sv.variant", c.sv.variant);
  if (c.sv.variant != "additive")
    throw ConfigError("config: sv.variant supports only 'additive', got '" +
                      c.sv.variant + "'");
  return c;
}

void append_double(std::string& out, double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, p);
}

}  // namespace

Config Config::base_reference() {
  Config c;
  c.model.conv = {{512, 10, 5}, {512, 3, 2}, {512, 3, 2}, {512, 3, 2},
                  {512, 3, 2}, {512, 2, 2}, {512, 2, 2}};
  c.model.dim = 768;
  c.model.heads = 12;
  c.model.ffn = 3072;
  c.model.teacher_layers = 12;
  c.model.student_layers = 2;
  c.model.posconv_kernel = 128;
  c.model.posconv_groups = 16;
  c.model.dropout = 0.1;
  c.distill.layers = {4, 8, 12};
  c.kws.classes = 12;
  c.sv.speakers = 1211;
  return c;
}

Config Config::parse_text(const std::string& text, const std::string& origin) {
  Reader r(tokenize(text, origin), origin);
  return from_reader(r);
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

void Config::apply_override(const std::string& key, const std::string& value) {
  bool known = false;
  for (const char* k : kKnownKeys) known = known || key == k;
  if (!known) throw ConfigError("config: unknown key '" + key + "'");
  // Rewrite the canonical dump and reparse so overrides obey the same domains.
  std::istringstream in(serialize());
  std::ostringstream out;
  std::string line;
  const std::string prefix = key + " = ";
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0)
      out << prefix << value << '\n';
    else
      out << line << '\n';
  }
  *this = parse_text(out.str(), "<override " + key + ">");
}

std::string Config::serialize() const {
  std::string out;
  auto kv = [&out](const std::string& k, const std::string& v) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  };
  kv("seed", std::to_string(seed));
  {
    std::string conv;
    for (std::size_t i = 0; i < model.conv.size(); ++i) {
      if (i) conv += ",";
      conv += std::to_string(model.conv[i].channels) + "x" +
              std::to_string(model.conv[i].kernel) + "x" +
              std::to_string(model.conv[i].stride);
    }
    kv("model.conv", conv);
  }
  kv("model.dim", std::to_string(model.dim));
  kv("model.heads", std::to_string(model.heads));
  kv("model.ffn", std::to_string(model.ffn));
  kv("model.teacher_layers", std::to_string(model.teacher_layers));
  kv("model.student_layers", std::to_string(model.student_layers));
  kv("model.posconv_kernel", std::to_string(model.posconv_kernel));
  kv("model.posconv_groups", std::to_string(model.posconv_groups));
  {
    std::string v;
    append_double(v, model.dropout);
    kv("model.dropout", v);
  }
  kv("data.keywords", std::to_string(data.keywords));
  kv("data.speakers", std::to_string(data.speakers));
  kv("data.utterances", std::to_string(data.utterances));
  kv("data.sample_len", std::to_string(data.sample_len));
  {
    std::string v;
    append_double(v, data.noise);
    kv("data.noise", v);
  }
  kv("data.rate", std::to_string(data.rate));
  {
    std::string v;
    for (std::size_t i = 0; i < distill.layers.size(); ++i) {
      if (i) v += ",";
      v += std::to_string(distill.layers[i]);
    }
    kv("distill.layers", v);
  }
  kv("distill.steps", std::to_string(distill.steps));
  kv("distill.batch", std::to_string(distill.batch));
  {
    std::string v;
    append_double(v, train.lr);
    kv("train.lr", v);
  }
  kv("train.iterations", std::to_string(train.iterations));
  kv("train.batch", std::to_string(train.batch));
  {
    std::string v;
    append_double(v, train.clip);
    kv("train.clip", v);
  }
  kv("train.checkpoint_every", std::to_string(train.checkpoint_every));
  kv("train.shared_optimizer", train.shared_optimizer ? "true" : "false");
  kv("kws.classes", std::to_string(kws.classes));
  {
    std::string v;
    append_double(v, sv.margin);
    kv("sv.margin", v);
  }
  {
    std::string v;
    append_double(v, sv.scale);
    kv("sv.scale", v);
  }
  kv("sv.speakers", std::to_string(sv.speakers));
  kv("sv.variant", sv.variant);
  return out;
}

ModelConfig Config::teacher_model_config() const {
  ModelConfig mc;
  mc.conv_layers = model.conv;
  mc.model_dim = model.dim;
  mc.num_transformer_layers = model.teacher_layers;
  mc.num_heads = model.heads;
  mc.ffn_dim = model.ffn;
  mc.pos_conv = {model.posconv_kernel, model.posconv_groups};
  mc.dropout = model.dropout;
  mc.validate();
  return mc;
}

ModelConfig Config::student_model_config() const {
  ModelConfig mc = teacher_model_config();
  mc.num_transformer_layers = model.student_layers;
  mc.validate();
  return mc;
}

}  // namespace srlkit
