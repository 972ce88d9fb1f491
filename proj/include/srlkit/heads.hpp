// Downstream task heads: a linear classifier over mean-pooled encoder states
// for keyword spotting (cross-entropy) and a normalized linear head for
// speaker verification (additive cosine margin softmax). Both losses are
// differentiable through the encoder states and the head parameters.

#pragma once

#include <string>
#include <vector>

#include "srlkit/ops.hpp"
#include "srlkit/rng.hpp"
#include "srlkit/tensor.hpp"

namespace srlkit {

enum class Task { kws, sv };

inline const char* task_name(Task t) { return t == Task::kws ? "kws" : "sv"; }

template <typename S>
struct TaskHead {
  Task task = Task::kws;
  Tensor<S> weight;  // [model_dim x out_dim]
  Tensor<S> bias;    // keyword head only
  double margin = 0.0;  // SV: subtracted from the true-class cosine
  double scale = 1.0;   // SV: logit scale

  Index out_dim() const { return weight.dim(1); }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters(
      const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
    return out;
  }
};

template <typename S>
TaskHead<S> make_kws_head(Index model_dim, Index classes, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("kws head: need at least 2 classes");
  TaskHead<S> h;
  h.task = Task::kws;
  Rng rng(derive_seed(seed, "head.kws"));
  h.weight = Tensor<S>::rand_uniform(
      {model_dim, classes}, rng,
      std::sqrt(3.0 / static_cast<double>(model_dim)), true);
  h.bias = Tensor<S>::zeros({classes}, true);
  return h;
}

template <typename S>
TaskHead<S> make_sv_head(Index model_dim, Index speakers, double margin,
                         double scale, std::uint64_t seed) {
  if (speakers < 2) throw ConfigError("sv head: need at least 2 speakers");
  if (margin < 0.0) throw ConfigError("sv head: margin must be non-negative");
  if (scale <= 0.0) throw ConfigError("sv head: scale must be positive");
  TaskHead<S> h;
  h.task = Task::sv;
  h.margin = margin;
  h.scale = scale;
  Rng rng(derive_seed(seed, "head.sv"));
  h.weight = Tensor<S>::rand_uniform(
      {model_dim, speakers}, rng,
      std::sqrt(3.0 / static_cast<double>(model_dim)), true);
  return h;
}

namespace detail {

// -log softmax(z)[label] for a [1 x C] logit row.
template <typename S>
Tensor<S> cross_entropy_row(const Tensor<S>& logits, Index label) {
  Tensor<S> probs = softmax(logits);
  Tensor<S> p = slice(probs, 1, label, 1);
  return neg(reshape(log(p), Shape{}));
}

}  // namespace detail

// Cross-entropy keyword spotting loss on mean-pooled hidden states.
template <typename S>
Tensor<S> kws_loss(const Tensor<S>& hidden, Index label,
                   const TaskHead<S>& head) {
  if (head.task != Task::kws)
    throw ConfigError("kws_loss: head is not a keyword head");
  if (label < 0 || label >= head.out_dim())
    throw ValueError("kws_loss: label " + std::to_string(label) +
                     " out of range [0, " + std::to_string(head.out_dim()) + ")");
  Tensor<S> pooled = mean_pool_rows(hidden);
  Tensor<S> logits = add(matmul(reshape(pooled, {1, pooled.dim(0)}), head.weight),
                         head.bias);
  return detail::cross_entropy_row(logits, label);
}

// Additive cosine margin softmax: embeddings and per-speaker weight vectors
// are L2-normalized, the true-speaker cosine is reduced by the margin, and
// the result is scaled before cross-entropy. With margin 0 and scale 1 this
// is plain cross-entropy over cosine logits.
template <typename S>
Tensor<S> angular_softmax_loss(const Tensor<S>& hidden, Index speaker,
                               const TaskHead<S>& head) {
  if (head.task != Task::sv)
    throw ConfigError("angular_softmax_loss: head is not a speaker head");
  const Index classes = head.out_dim();
  if (speaker < 0 || speaker >= classes)
    throw ValueError("angular_softmax_loss: speaker " + std::to_string(speaker) +
                     " out of range [0, " + std::to_string(classes) + ")");
  Tensor<S> pooled = mean_pool_rows(hidden);
  Tensor<S> e = l2_normalize(reshape(pooled, {1, pooled.dim(0)}));
  Tensor<S> class_rows = l2_normalize(transpose(head.weight));  // [C x D]
  Tensor<S> cosines = matmul(e, transpose(class_rows));         // [1 x C]
  if (head.margin != 0.0) {
    ArrayX<S> m = ArrayX<S>::Zero(classes);
    m[speaker] = static_cast<S>(head.margin);
    cosines = sub(cosines, Tensor<S>::from_values({Index(1), classes}, std::move(m)));
  }
  return detail::cross_entropy_row(scale(cosines, head.scale), speaker);
}

// Utterance-level speaker embedding: mean pool over time, stored
// unnormalized. Normalization happens at scoring time.
template <typename S>
struct SVEmbedding {
  ArrayX<S> vector;
  std::string utterance_id;
};

template <typename S>
SVEmbedding<S> extract_embedding(const Tensor<S>& hidden,
                                 std::string utterance_id = {}) {
  if (hidden.rank() != 2 || hidden.dim(0) < 1)
    throw ShapeError("extract_embedding: expected [T' x D] with T' >= 1, got " +
                     shape_str(hidden.shape()));
  const Index rows = hidden.dim(0), cols = hidden.dim(1);
  SVEmbedding<S> e;
  e.utterance_id = std::move(utterance_id);
  e.vector = ArrayX<S>(cols);
  auto mview = mat_view(hidden.values(), rows, cols);
  for (Index j = 0; j < cols; ++j) {
    double acc = 0.0;
    for (Index i = 0; i < rows; ++i) acc += static_cast<double>(mview(i, j));
    e.vector[j] = static_cast<S>(acc / static_cast<double>(rows));
  }
  return e;
}

// Cosine score between two embeddings; zero when either is degenerate.
template <typename S>
double cosine_score(const SVEmbedding<S>& a, const SVEmbedding<S>& b) {
  double qa = 0.0, qb = 0.0, dot = 0.0;
  for (Index i = 0; i < a.vector.size(); ++i) {
    const double va = static_cast<double>(a.vector[i]);
    const double vb = static_cast<double>(b.vector[i]);
    qa += va * va;
    qb += vb * vb;
    dot += va * vb;
  }
  const double na = std::sqrt(qa), nb = std::sqrt(qb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return dot / (na * nb);
}

}  // namespace srlkit
