// Binary checkpoints: magic `SRLD`, u32 version, length-prefixed config
// text, named tensor table, trailing FNV-1a 64 digest. All integers
// little-endian; tensor payloads are the raw storage bytes, so round trips
// are bit-exact in every precision mode. The bundle layer maps the tensor
// table onto models, task heads, prediction heads, and training state.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "srlkit/config.hpp"
#include "srlkit/distill.hpp"
#include "srlkit/heads.hpp"
#include "srlkit/model.hpp"
#include "srlkit/synth.hpp"
#include "srlkit/trainer.hpp"

namespace srlkit {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct RawTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<char> bytes;
};

struct CheckpointData {
  std::uint32_t version = 1;
  std::string config_text;
  std::vector<RawTensor> tensors;
};

void save_checkpoint_file(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint_file(const std::string& path);
std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t file_digest(const std::string& path);

// ---------------------------------------------------------------------------
// Tensor adapters
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
constexpr DType dtype_of() {
  return sizeof(S) == 4 ? DType::f32 : DType::f64;
}
}  // namespace detail

template <typename S>
RawTensor to_raw(const std::string& name, const Tensor<S>& t) {
  RawTensor r;
  r.name = name;
  r.dtype = detail::dtype_of<S>();
  r.shape = t.shape();
  r.bytes.resize(static_cast<std::size_t>(t.numel()) * sizeof(S));
  std::memcpy(r.bytes.data(), t.values().data(), r.bytes.size());
  return r;
}

template <typename S>
Tensor<S> from_raw(const RawTensor& r, bool requires_grad) {
  if (r.dtype != detail::dtype_of<S>())
    throw IoError("checkpoint tensor " + r.name +
                  ": storage dtype does not match the requested precision");
  ArrayX<S> v(shape_numel(r.shape));
  if (r.bytes.size() != static_cast<std::size_t>(v.size()) * sizeof(S))
    throw IoError("checkpoint tensor " + r.name + ": payload size mismatch");
  std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
  return Tensor<S>::from_values(r.shape, std::move(v), requires_grad);
}

inline RawTensor scalar_raw(const std::string& name, double v) {
  RawTensor r;
  r.name = name;
  r.dtype = DType::f64;
  r.shape = {};
  r.bytes.resize(sizeof(double));
  std::memcpy(r.bytes.data(), &v, sizeof(double));
  return r;
}

inline double scalar_from_raw(const RawTensor& r) {
  if (r.dtype != DType::f64 || r.bytes.size() != sizeof(double))
    throw IoError("checkpoint tensor " + r.name + ": expected a f64 scalar");
  double v = 0.0;
  std::memcpy(&v, r.bytes.data(), sizeof(double));
  return v;
}

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

// Everything one run needs to resume or evaluate: encoder, optional task
// heads, optional prediction heads, optional optimizer/loop state.
template <typename S>
struct CheckpointBundle {
  Config config;
  std::string config_text;
  EncoderModel<S> model;
  std::map<Task, TaskHead<S>> heads;
  std::optional<DistillPlan<S>> plan;
  std::optional<FinetuneState<S>> finetune;
  std::optional<DistillState<S>> distill;
};

namespace detail {

template <typename S>
void append_adam(std::vector<RawTensor>& out, const std::string& prefix,
                 const AdamState<S>& st) {
  // Slot order follows sorted names for a stable file layout.
  std::vector<std::string> names;
  names.reserve(st.slots.size());
  for (const auto& [name, slot] : st.slots) names.push_back(name);
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    const auto& slot = st.slots.at(name);
    RawTensor m;
    m.name = prefix + ".m." + name;
    m.dtype = dtype_of<S>();
    m.shape = {slot.m.size()};
    m.bytes.resize(static_cast<std::size_t>(slot.m.size()) * sizeof(S));
    std::memcpy(m.bytes.data(), slot.m.data(), m.bytes.size());
    out.push_back(std::move(m));
    RawTensor v;
    v.name = prefix + ".v." + name;
    v.dtype = dtype_of<S>();
    v.shape = {slot.v.size()};
    v.bytes.resize(static_cast<std::size_t>(slot.v.size()) * sizeof(S));
    std::memcpy(v.bytes.data(), slot.v.data(), v.bytes.size());
    out.push_back(std::move(v));
    out.push_back(scalar_raw(prefix + ".t." + name,
                             static_cast<double>(slot.t)));
  }
}

template <typename S>
bool consume_adam(const std::string& prefix, const RawTensor& r,
                  AdamState<S>& st) {
  for (const char* kind : {".m.", ".v.", ".t."}) {
    const std::string lead = prefix + kind;
    if (r.name.rfind(lead, 0) != 0) continue;
    const std::string param = r.name.substr(lead.size());
    AdamParamState<S>& slot = st.slots[param];
    if (kind[1] == 't') {
      slot.t = static_cast<std::int64_t>(scalar_from_raw(r));
    } else {
      if (r.dtype != dtype_of<S>())
        throw IoError("checkpoint tensor " + r.name + ": dtype mismatch");
      ArrayX<S> buf(shape_numel(r.shape));
      std::memcpy(buf.data(), r.bytes.data(), r.bytes.size());
      (kind[1] == 'm' ? slot.m : slot.v) = std::move(buf);
    }
    return true;
  }
  return false;
}

}  // namespace detail

// Serializes config + model (+ heads, prediction heads, training state).
template <typename S>
void save_checkpoint(
    const std::string& path, const Config& config, const EncoderModel<S>& model,
    const std::map<Task, TaskHead<std::type_identity_t<S>>>* heads = nullptr,
    const DistillPlan<std::type_identity_t<S>>* plan = nullptr,
    const FinetuneState<std::type_identity_t<S>>* finetune = nullptr,
    const DistillState<std::type_identity_t<S>>* distill = nullptr) {
  CheckpointData data;
  data.config_text = config.serialize();
  data.tensors.push_back(scalar_raw(
      "meta.num_layers",
      static_cast<double>(model.config.num_transformer_layers)));
  for (const auto& [name, t] : model.parameters())
    data.tensors.push_back(to_raw("model." + name, t));
  if (heads) {
    for (const auto& [task, head] : *heads)
      for (const auto& [name, t] :
           head.named_parameters(std::string("head.") + task_name(task)))
        data.tensors.push_back(to_raw(name, t));
  }
  if (plan) {
    for (const auto& [name, t] : plan->named_parameters())
      data.tensors.push_back(to_raw(name, t));
  }
  if (finetune) {
    data.tensors.push_back(
        scalar_raw("state.finetune.iteration",
                   static_cast<double>(finetune->iteration)));
    for (std::size_t i = 0; i < finetune->cyclers.size(); ++i) {
      const auto& cs = finetune->cyclers[i];
      const std::string p = "state.finetune.cycler" + std::to_string(i);
      data.tensors.push_back(scalar_raw(p + ".epoch", static_cast<double>(cs.epoch)));
      data.tensors.push_back(scalar_raw(p + ".cursor", static_cast<double>(cs.cursor)));
    }
    detail::append_adam(data.tensors, "adam.shared", finetune->adam);
    for (const auto& [task, st] : finetune->per_task)
      detail::append_adam(data.tensors,
                          std::string("adam.") + task_name(task), st);
  }
  if (distill) {
    data.tensors.push_back(scalar_raw("state.distill.step",
                                      static_cast<double>(distill->step)));
    data.tensors.push_back(scalar_raw("state.distill.epoch",
                                      static_cast<double>(distill->cycler.epoch)));
    data.tensors.push_back(scalar_raw("state.distill.cursor",
                                      static_cast<double>(distill->cycler.cursor)));
    detail::append_adam(data.tensors, "adam.distill", distill->adam);
  }
  save_checkpoint_file(path, data);
}

// Rebuilds a bundle from the tensor table. Every stored tensor must be
// consumed; an unknown name is an error rather than silently ignored.
template <typename S>
CheckpointBundle<S> load_checkpoint(const std::string& path) {
  const CheckpointData data = load_checkpoint_file(path);
  CheckpointBundle<S> bundle;
  bundle.config_text = data.config_text;
  bundle.config = Config::parse_text(data.config_text, path + "#config");

  double num_layers = -1.0;
  for (const auto& r : data.tensors)
    if (r.name == "meta.num_layers") num_layers = scalar_from_raw(r);
  if (num_layers < 0)
    throw IoError("checkpoint " + path + ": missing meta.num_layers");
  ModelConfig mc = bundle.config.teacher_model_config();
  mc.num_transformer_layers = static_cast<Index>(num_layers);
  mc.validate();
  bundle.model = build_model<S>(mc, bundle.config.seed);

  std::map<std::string, const RawTensor*> pending;
  for (const auto& r : data.tensors) pending[r.name] = &r;
  pending.erase("meta.num_layers");

  auto take = [&pending](const std::string& name) -> const RawTensor* {
    auto it = pending.find(name);
    if (it == pending.end()) return nullptr;
    const RawTensor* r = it->second;
    pending.erase(it);
    return r;
  };

  for (auto& [name, t] : bundle.model.parameters()) {
    const RawTensor* r = take("model." + name);
    if (!r) throw IoError("checkpoint " + path + ": missing tensor model." + name);
    Tensor<S> loaded = from_raw<S>(*r, false);
    if (loaded.shape() != t.shape())
      throw IoError("checkpoint " + path + ": shape mismatch for model." + name);
    t.mutable_values() = loaded.values();
  }

  if (const RawTensor* w = take("head.kws.weight")) {
    TaskHead<S> h;
    h.task = Task::kws;
    h.weight = from_raw<S>(*w, true);
    const RawTensor* b = take("head.kws.bias");
    if (!b) throw IoError("checkpoint " + path + ": missing head.kws.bias");
    h.bias = from_raw<S>(*b, true);
    bundle.heads[Task::kws] = std::move(h);
  }
  if (const RawTensor* w = take("head.sv.weight")) {
    TaskHead<S> h;
    h.task = Task::sv;
    h.weight = from_raw<S>(*w, true);
    h.margin = bundle.config.sv.margin;
    h.scale = bundle.config.sv.scale;
    bundle.heads[Task::sv] = std::move(h);
  }

  if (pending.count("distill.head0.weight")) {
    DistillPlan<S> plan;
    plan.teacher_layers = bundle.config.distill.layers;
    for (std::size_t j = 0; j < plan.teacher_layers.size(); ++j) {
      const std::string prefix = "distill.head" + std::to_string(j);
      const RawTensor* w = take(prefix + ".weight");
      const RawTensor* b = take(prefix + ".bias");
      if (!w || !b)
        throw IoError("checkpoint " + path + ": incomplete " + prefix);
      typename DistillPlan<S>::Head h;
      h.weight = from_raw<S>(*w, true);
      h.bias = from_raw<S>(*b, true);
      plan.heads.push_back(std::move(h));
    }
    bundle.plan = std::move(plan);
  }

  if (pending.count("state.finetune.iteration")) {
    FinetuneState<S> st;
    st.iteration =
        static_cast<std::int64_t>(scalar_from_raw(*take("state.finetune.iteration")));
    for (std::size_t i = 0;; ++i) {
      const std::string p = "state.finetune.cycler" + std::to_string(i);
      const RawTensor* e = take(p + ".epoch");
      if (!e) break;
      const RawTensor* c = take(p + ".cursor");
      if (!c) throw IoError("checkpoint " + path + ": incomplete " + p);
      CyclerState cs;
      cs.epoch = static_cast<std::int64_t>(scalar_from_raw(*e));
      cs.cursor = static_cast<Index>(scalar_from_raw(*c));
      st.cyclers.push_back(cs);
    }
    bundle.finetune = std::move(st);
  }
  if (pending.count("state.distill.step")) {
    DistillState<S> st;
    st.step = static_cast<std::int64_t>(scalar_from_raw(*take("state.distill.step")));
    st.cycler.epoch =
        static_cast<std::int64_t>(scalar_from_raw(*take("state.distill.epoch")));
    st.cycler.cursor =
        static_cast<Index>(scalar_from_raw(*take("state.distill.cursor")));
    bundle.distill = std::move(st);
  }

  // Remaining names must be optimizer slots.
  std::vector<std::string> leftover;
  for (const auto& [name, r] : pending) {
    bool used = false;
    if (bundle.finetune) {
      used = detail::consume_adam("adam.shared", *r, bundle.finetune->adam);
      for (Task task : {Task::kws, Task::sv})
        if (!used && r->name.rfind(std::string("adam.") + task_name(task) + ".",
                                   0) == 0)
          used = detail::consume_adam(std::string("adam.") + task_name(task), *r,
                                      bundle.finetune->per_task[task]);
    }
    if (!used && bundle.distill)
      used = detail::consume_adam("adam.distill", *r, bundle.distill->adam);
    if (!used) leftover.push_back(name);
  }
  if (!leftover.empty())
    throw IoError("checkpoint " + path + ": unknown tensor name " + leftover[0]);

  if (bundle.finetune) {
    bundle.finetune->adam.lr = bundle.config.train.lr;
    for (auto& [task, st] : bundle.finetune->per_task)
      st.lr = bundle.config.train.lr;
  }
  if (bundle.distill) bundle.distill->adam.lr = bundle.config.train.lr;
  return bundle;
}

}  // namespace srlkit
