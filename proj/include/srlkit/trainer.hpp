// Training machinery: bias-corrected Adam, deterministic dataset cycling,
// and the alternating multi-task fine-tuning loop. Iteration i always trains
// tasks[i mod |tasks|] on that task's next batch; with freeze_srl only the
// head parameters move. Single-task training is the one-task special case of
// the same loop.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "srlkit/heads.hpp"
#include "srlkit/model.hpp"
#include "srlkit/ops.hpp"
#include "srlkit/rng.hpp"
#include "srlkit/tensor.hpp"

namespace srlkit {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)),
        step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

template <typename S>
using ParamList = std::vector<std::pair<std::string, Tensor<S>>>;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename S>
struct AdamParamState {
  ArrayX<S> m;
  ArrayX<S> v;
  std::int64_t t = 0;
};

template <typename S>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::unordered_map<std::string, AdamParamState<S>> slots;
};

// One bias-corrected Adam update, applied in place to every listed parameter.
// Moment buffers are keyed by parameter name and persist across calls; each
// parameter keeps its own step count so skipped iterations (the inactive
// task's head) do not distort bias correction.
template <typename S>
void adam_step(ParamList<S>& params, AdamState<S>& st) {
  for (auto& [name, p] : params) {
    const ArrayX<S>& g = p.grad();
    if (!g.isFinite().all())
      throw ValueError("adam_step: non-finite gradient for " + name);
    AdamParamState<S>& slot = st.slots[name];
    if (slot.m.size() == 0) {
      slot.m = ArrayX<S>::Zero(g.size());
      slot.v = ArrayX<S>::Zero(g.size());
    }
    if (slot.m.size() != g.size())
      throw ShapeError("adam_step: state size mismatch for " + name);
    slot.t += 1;
    const double b1 = st.beta1, b2 = st.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(slot.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(slot.t));
    ArrayX<S>& values = p.mutable_values();
    for (Index i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = b1 * static_cast<double>(slot.m[i]) + (1.0 - b1) * gi;
      const double v = b2 * static_cast<double>(slot.v[i]) + (1.0 - b2) * gi * gi;
      slot.m[i] = static_cast<S>(m);
      slot.v[i] = static_cast<S>(v);
      const double update = st.lr * (m / c1) / (std::sqrt(v / c2) + st.eps);
      values[i] = static_cast<S>(static_cast<double>(values[i]) - update);
    }
  }
}

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Disabled when max_norm <= 0.
template <typename S>
double clip_gradients(ParamList<S>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    const ArrayX<S>& g = p.grad();
    for (Index i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      sq += gi * gi;
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S factor = static_cast<S>(max_norm / norm);
    for (auto& [name, p] : params) p.node()->grad *= factor;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Deterministic dataset cycling
// ---------------------------------------------------------------------------

struct CyclerState {
  std::int64_t epoch = 0;
  Index cursor = 0;
};

// Visits every example once per epoch in an order derived from
// (seed, label, epoch); reshuffles when exhausted. Fully reproducible from
// its small serializable state.
class DatasetCycler {
 public:
  DatasetCycler(std::size_t size, std::uint64_t seed, std::string label,
                CyclerState state = {})
      : size_(static_cast<Index>(size)),
        seed_(seed),
        label_(std::move(label)),
        state_(state) {
    if (size_ == 0) throw ValueError("dataset cycler: empty dataset");
    reshuffle();
  }

  Index next() {
    if (state_.cursor >= size_) {
      state_.epoch += 1;
      state_.cursor = 0;
      reshuffle();
    }
    return order_[static_cast<std::size_t>(state_.cursor++)];
  }

  const CyclerState& state() const { return state_; }

 private:
  void reshuffle() {
    order_.resize(static_cast<std::size_t>(size_));
    for (Index i = 0; i < size_; ++i) order_[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(seed_, label_, static_cast<std::uint64_t>(state_.epoch)));
    rng.shuffle(order_);
  }

  Index size_;
  std::uint64_t seed_;
  std::string label_;
  CyclerState state_;
  std::vector<Index> order_;
};

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

struct WaveExample {
  std::vector<float> wave;
  Index label = 0;
  std::string id;
};

struct TaskDataset {
  std::vector<WaveExample> examples;
};

struct TrainSchedule {
  std::vector<Task> tasks;
  std::int64_t max_iterations = 0;
  Index batch_size = 16;
  bool freeze_srl = false;
  std::uint64_t seed = 42;

  void validate() const {
    if (tasks.empty()) throw ConfigError("schedule: tasks must be non-empty");
    if (max_iterations < 0)
      throw ConfigError("schedule: max_iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
  }
};

struct TrainOptions {
  double lr = 1e-4;
  double clip_norm = 5.0;          // global-norm clip; <= 0 disables
  bool shared_optimizer = true;    // one Adam state across tasks
  std::int64_t checkpoint_every = 0;  // 0 disables the callback
};

struct IterationRecord {
  std::int64_t iteration = 0;
  Task task = Task::kws;
  double loss = 0.0;
};

template <typename S>
struct FinetuneState {
  AdamState<S> adam;                   // shared optimizer
  std::map<Task, AdamState<S>> per_task;  // used when !shared_optimizer
  std::vector<CyclerState> cyclers;    // parallel to sched.tasks
  std::int64_t iteration = 0;
};

template <typename S>
Tensor<S> wave_tensor(const std::vector<float>& wave) {
  const Index n = static_cast<Index>(wave.size());
  ArrayX<S> v(n);
  for (Index i = 0; i < n; ++i)
    v[i] = static_cast<S>(wave[static_cast<std::size_t>(i)]);
  return Tensor<S>::from_values({n}, std::move(v));
}

template <typename S>
Tensor<S> task_loss(EncoderModel<S>& srl, TaskHead<S>& head,
                    const WaveExample& ex, const ForwardContext* ctx) {
  auto hidden = forward_hidden(srl, wave_tensor<S>(ex.wave),
                               srl.config.num_transformer_layers, ctx);
  return head.task == Task::kws
             ? kws_loss(hidden.back(), ex.label, head)
             : angular_softmax_loss(hidden.back(), ex.label, head);
}

// Runs iterations [state.iteration, sched.max_iterations). Each iteration
// draws the active task's next batch, averages the per-example loss, and
// applies one Adam step to the active head plus (unless frozen) the SRL
// parameters. Passing a loaded state resumes an interrupted run exactly.
template <typename S>
std::vector<IterationRecord> multitask_finetune(
    EncoderModel<S>& srl, std::map<Task, TaskHead<S>>& heads,
    const std::map<Task, TaskDataset>& data, const TrainSchedule& sched,
    const TrainOptions& opts = {}, FinetuneState<S>* state = nullptr,
    const std::function<void(const FinetuneState<std::type_identity_t<S>>&)>&
        checkpoint_cb = {}) {
  sched.validate();
  for (Task t : sched.tasks) {
    if (!heads.count(t))
      throw ConfigError(std::string("finetune: missing head for task ") +
                        task_name(t));
    auto it = data.find(t);
    if (it == data.end() || it->second.examples.empty())
      throw ConfigError(std::string("finetune: empty dataset for task ") +
                        task_name(t));
  }
  srl.set_frozen(sched.freeze_srl);

  FinetuneState<S> local;
  FinetuneState<S>& st = state ? *state : local;
  if (st.adam.slots.empty()) st.adam.lr = opts.lr;
  std::vector<DatasetCycler> cyclers;
  for (std::size_t k = 0; k < sched.tasks.size(); ++k) {
    const Task t = sched.tasks[k];
    CyclerState cs = k < st.cyclers.size() ? st.cyclers[k] : CyclerState{};
    cyclers.emplace_back(data.at(t).examples.size(), sched.seed,
                         std::string("cycle.") + task_name(t), cs);
  }

  std::vector<IterationRecord> trace;
  for (std::int64_t i = st.iteration; i < sched.max_iterations; ++i) {
    const std::size_t task_idx = static_cast<std::size_t>(
        i % static_cast<std::int64_t>(sched.tasks.size()));
    const Task task = sched.tasks[task_idx];
    TaskHead<S>& head = heads.at(task);
    const TaskDataset& ds = data.at(task);

    ParamList<S> update_set = head.named_parameters(
        std::string("head.") + task_name(task));
    if (!sched.freeze_srl)
      for (auto& [name, p] : srl.parameters())
        update_set.emplace_back("model." + name, p);
    for (auto& [name, p] : update_set) p.zero_grad();

    Rng drop_rng(derive_seed(sched.seed, "dropout", static_cast<std::uint64_t>(i)));
    ForwardContext ctx{&drop_rng, true};
    Tensor<S> loss;
    try {
      Tensor<S> loss_sum;
      for (Index b = 0; b < sched.batch_size; ++b) {
        const auto& ex =
            ds.examples[static_cast<std::size_t>(cyclers[task_idx].next())];
        Tensor<S> li = task_loss(srl, head, ex, &ctx);
        loss_sum = b == 0 ? li : add(loss_sum, li);
      }
      loss = scale(loss_sum, 1.0 / static_cast<double>(sched.batch_size));
    } catch (const ValueError& e) {
      // Overflow inside the forward pass is a divergence, not a usage error.
      throw DivergenceError(std::string("finetune: ") + e.what(), i);
    }
    if (!loss.all_finite())
      throw DivergenceError("finetune: non-finite loss", i);
    backward(loss);
    clip_gradients(update_set, opts.clip_norm);
    AdamState<S>& adam =
        opts.shared_optimizer ? st.adam : st.per_task[task];
    if (adam.slots.empty()) adam.lr = opts.lr;
    adam_step(update_set, adam);

    trace.push_back({i, task, static_cast<double>(loss.item())});
    st.iteration = i + 1;
    for (std::size_t k = 0; k < sched.tasks.size(); ++k) {
      if (st.cyclers.size() <= k) st.cyclers.push_back(cyclers[k].state());
      else st.cyclers[k] = cyclers[k].state();
    }
    if (checkpoint_cb && opts.checkpoint_every > 0 &&
        (i + 1) % opts.checkpoint_every == 0)
      checkpoint_cb(st);
  }
  return trace;
}

// Single-task fine-tuning is the |tasks| = 1 case of the same loop.
template <typename S>
std::vector<IterationRecord> singletask_finetune(
    EncoderModel<S>& srl, TaskHead<S>& head, const TaskDataset& data,
    TrainSchedule sched, const TrainOptions& opts = {},
    FinetuneState<S>* state = nullptr) {
  sched.tasks = {head.task};
  std::map<Task, TaskHead<S>> heads{{head.task, head}};
  std::map<Task, TaskDataset> ds{{head.task, data}};
  auto trace = multitask_finetune(srl, heads, ds, sched, opts, state);
  head = heads.at(head.task);
  return trace;
}

inline void write_finetune_trace_csv(const std::string& path,
                                     const std::vector<IterationRecord>& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot write trace file " + path);
  out << "iteration,task,loss\n";
  char buf[64];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    out << r.iteration << ',' << task_name(r.task) << ',' << buf << '\n';
  }
}

}  // namespace srlkit
