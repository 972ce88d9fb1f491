// Teacher-to-student transfer: student initialization from the teacher's
// lower layers, the layer-wise feature matching loss (per-timestep scaled L1
// plus negative log-sigmoid of cosine similarity), and the distillation
// training loop driving student + prediction heads against a frozen teacher.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "srlkit/model.hpp"
#include "srlkit/ops.hpp"
#include "srlkit/trainer.hpp"

namespace srlkit {

// Mapping from teacher layer indices to linear prediction heads on the
// student's final hidden state (one shared trunk, one head per layer).
template <typename S>
struct DistillPlan {
  struct Head {
    Tensor<S> weight;  // [student_dim x teacher_dim]
    Tensor<S> bias;    // [teacher_dim]
  };
  std::vector<Index> teacher_layers;
  std::vector<Head> heads;

  void validate(Index teacher_depth) const {
    if (teacher_layers.empty())
      throw ConfigError("distill plan: no teacher layers selected");
    for (std::size_t i = 0; i < teacher_layers.size(); ++i) {
      if (teacher_layers[i] < 1 || teacher_layers[i] > teacher_depth)
        throw ConfigError("distill plan: layer index " +
                          std::to_string(teacher_layers[i]) +
                          " outside [1, " + std::to_string(teacher_depth) + "]");
      if (i > 0 && teacher_layers[i] <= teacher_layers[i - 1])
        throw ConfigError("distill plan: layer indices must be strictly increasing");
    }
    if (heads.size() != teacher_layers.size())
      throw ConfigError("distill plan: need exactly one prediction head per layer");
  }

  ParamList<S> named_parameters() const {
    ParamList<S> out;
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const std::string prefix = "distill.head" + std::to_string(i);
      out.emplace_back(prefix + ".weight", heads[i].weight);
      out.emplace_back(prefix + ".bias", heads[i].bias);
    }
    return out;
  }
};

template <typename S>
DistillPlan<S> make_distill_plan(std::vector<Index> teacher_layers,
                                 Index student_dim, Index teacher_dim,
                                 std::uint64_t seed) {
  DistillPlan<S> plan;
  plan.teacher_layers = std::move(teacher_layers);
  for (std::size_t i = 0; i < plan.teacher_layers.size(); ++i) {
    typename DistillPlan<S>::Head h;
    Rng rng(derive_seed(seed, "distill.head", static_cast<std::uint64_t>(i)));
    h.weight = Tensor<S>::rand_uniform(
        {student_dim, teacher_dim}, rng,
        std::sqrt(3.0 / static_cast<double>(student_dim)), true);
    h.bias = Tensor<S>::zeros({teacher_dim}, true);
    plan.heads.push_back(std::move(h));
  }
  return plan;
}

template <typename S>
struct DistillLossParts {
  Tensor<S> l1;      // sum_i (1/K) * ||f_i - fbar_i||_1
  Tensor<S> cosine;  // sum_i -log sigmoid(cos(f_i, fbar_i))
  Tensor<S> total;
};

// Feature-matching loss over T aligned time steps of K-dimensional features.
// Teacher features are treated as constants; gradients flow only into the
// student prediction.
template <typename S>
DistillLossParts<S> distillation_loss_parts(const Tensor<S>& teacher_feats,
                                            const Tensor<S>& student_pred) {
  if (teacher_feats.rank() != 2 || student_pred.rank() != 2 ||
      teacher_feats.shape() != student_pred.shape())
    throw ShapeError("distillation_loss: features must share a [T x K] shape, got " +
                     shape_str(teacher_feats.shape()) + " vs " +
                     shape_str(student_pred.shape()));
  teacher_feats.check_finite("distillation_loss: teacher features");
  student_pred.check_finite("distillation_loss: student prediction");
  const Index feature_dim = teacher_feats.dim(1);
  Tensor<S> target = teacher_feats.detach();
  DistillLossParts<S> parts;
  parts.l1 = scale(sum(abs(sub(student_pred, target))),
                   1.0 / static_cast<double>(feature_dim));
  parts.cosine = neg(sum(log(sigmoid(cosine_similarity(target, student_pred)))));
  parts.total = add(parts.l1, parts.cosine);
  return parts;
}

template <typename S>
Tensor<S> distillation_loss(const Tensor<S>& teacher_feats,
                            const Tensor<S>& student_pred) {
  return distillation_loss_parts(teacher_feats, student_pred).total;
}

// Builds the student as a value-copy of the teacher's CNN front-end,
// projection, positional embedding, and first `student_cfg` transformer
// layers. Throws on any dimension mismatch between the two configurations.
template <typename S>
EncoderModel<S> init_student_from_teacher(const EncoderModel<S>& teacher,
                                          const ModelConfig& student_cfg) {
  student_cfg.validate();
  const ModelConfig& tc = teacher.config;
  if (student_cfg.conv_layers != tc.conv_layers)
    throw ConfigError("init_student: conv front-ends differ");
  if (student_cfg.model_dim != tc.model_dim)
    throw ConfigError("init_student: model_dim mismatch (" +
                      std::to_string(student_cfg.model_dim) + " vs " +
                      std::to_string(tc.model_dim) + ")");
  if (student_cfg.num_heads != tc.num_heads ||
      student_cfg.ffn_dim != tc.ffn_dim ||
      !(student_cfg.pos_conv == tc.pos_conv))
    throw ConfigError("init_student: transformer geometry mismatch");
  if (student_cfg.num_transformer_layers > tc.num_transformer_layers)
    throw ConfigError("init_student: student depth exceeds teacher depth");

  EncoderModel<S> student = build_model<S>(student_cfg, /*seed=*/0);
  for (auto& [name, p] : student.parameters())
    p.mutable_values() = teacher.param(name).values();
  return student;
}

// ---------------------------------------------------------------------------
// Distillation loop
// ---------------------------------------------------------------------------

struct DistillOptions {
  Index batch_size = 16;
  double lr = 1e-4;
  double clip_norm = 5.0;
  std::int64_t checkpoint_every = 0;
};

struct DistillStepRecord {
  std::int64_t step = 0;
  std::vector<double> per_layer;
  double total = 0.0;
};

template <typename S>
struct DistillState {
  AdamState<S> adam;
  CyclerState cycler;
  std::int64_t step = 0;
};

// Trains student + prediction heads to match the frozen teacher's hidden
// layers on an unlabeled waveform stream. Per-layer losses are averaged into
// the step objective so the magnitude does not depend on how many layers are
// distilled. Runs steps [state.step, steps).
template <typename S>
std::vector<DistillStepRecord> run_distillation(
    EncoderModel<S>& teacher, EncoderModel<S>& student,
    DistillPlan<S>& plan, const std::vector<std::vector<float>>& waves,
    std::int64_t steps, std::uint64_t seed, const DistillOptions& opts = {},
    DistillState<S>* state = nullptr,
    const std::function<void(const DistillState<std::type_identity_t<S>>&)>&
        checkpoint_cb = {}) {
  if (!teacher.frozen())
    throw ConfigError("run_distillation: teacher must be frozen");
  plan.validate(teacher.config.num_transformer_layers);
  if (steps < 0) throw ConfigError("run_distillation: steps must be >= 0");
  std::vector<DistillStepRecord> trace;
  if (steps == 0) return trace;
  if (waves.empty()) throw ConfigError("run_distillation: empty waveform stream");

  DistillState<S> local;
  DistillState<S>& st = state ? *state : local;
  if (st.adam.slots.empty()) st.adam.lr = opts.lr;
  DatasetCycler cycler(waves.size(), seed, "cycle.distill", st.cycler);

  const Index max_layer =
      *std::max_element(plan.teacher_layers.begin(), plan.teacher_layers.end());
  const std::size_t num_layers = plan.teacher_layers.size();

  ParamList<S> update_set = plan.named_parameters();
  for (auto& [name, p] : student.parameters())
    update_set.emplace_back("model." + name, p);

  for (std::int64_t step = st.step; step < steps; ++step) {
    for (auto& [name, p] : update_set) p.zero_grad();
    Rng drop_rng(derive_seed(seed, "distill.dropout",
                             static_cast<std::uint64_t>(step)));
    ForwardContext ctx{&drop_rng, true};

    std::vector<Tensor<S>> layer_sums(num_layers);
    try {
      for (Index b = 0; b < opts.batch_size; ++b) {
        const auto& wave = waves[static_cast<std::size_t>(cycler.next())];
        Tensor<S> w = wave_tensor<S>(wave);
        auto teacher_hidden = forward_hidden(teacher, w, max_layer);
        auto student_hidden =
            forward_hidden(student, w, student.config.num_transformer_layers, &ctx);
        const Tensor<S>& trunk = student_hidden.back();
        for (std::size_t j = 0; j < num_layers; ++j) {
          Tensor<S> pred =
              add(matmul(trunk, plan.heads[j].weight), plan.heads[j].bias);
          Tensor<S> lj = distillation_loss(
              teacher_hidden[static_cast<std::size_t>(plan.teacher_layers[j])],
              pred);
          layer_sums[j] = b == 0 ? lj : add(layer_sums[j], lj);
        }
      }
    } catch (const ValueError& e) {
      throw DivergenceError(std::string("run_distillation: ") + e.what(), step);
    }
    DistillStepRecord rec;
    rec.step = step;
    Tensor<S> total_sum;
    for (std::size_t j = 0; j < num_layers; ++j) {
      Tensor<S> layer_mean =
          scale(layer_sums[j], 1.0 / static_cast<double>(opts.batch_size));
      rec.per_layer.push_back(static_cast<double>(layer_mean.item()));
      total_sum = j == 0 ? layer_mean : add(total_sum, layer_mean);
    }
    Tensor<S> total =
        scale(total_sum, 1.0 / static_cast<double>(num_layers));
    rec.total = static_cast<double>(total.item());
    if (!total.all_finite())
      throw DivergenceError("run_distillation: non-finite loss", step);
    backward(total);
    clip_gradients(update_set, opts.clip_norm);
    adam_step(update_set, st.adam);
    trace.push_back(std::move(rec));
    st.step = step + 1;
    st.cycler = cycler.state();
    if (checkpoint_cb && opts.checkpoint_every > 0 &&
        (step + 1) % opts.checkpoint_every == 0)
      checkpoint_cb(st);
  }
  return trace;
}

inline void write_distill_trace_csv(const std::string& path,
                                    const std::vector<DistillStepRecord>& trace,
                                    const std::vector<Index>& teacher_layers) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot write trace file " + path);
  out << "step";
  for (Index p : teacher_layers) out << ",loss_l" << p;
  out << ",total\n";
  char buf[64];
  for (const auto& r : trace) {
    out << r.step;
    for (double v : r.per_layer) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out << ',' << buf;
    }
    std::snprintf(buf, sizeof buf, "%.9g", r.total);
    out << ',' << buf << '\n';
  }
}

}  // namespace srlkit
