#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "csnet/knn.hpp"
#include "csnet/metrics.hpp"
#include "csnet/ot_topk.hpp"
#include "csnet/pointcloud.hpp"
#include "csnet/rng.hpp"
#include "csnet/tensor.hpp"

namespace csnet {

enum class AttnVariant { oa, sa, mlp };
enum class LossVariant { emd, cd, cd_plus_emd };

inline std::string to_string(AttnVariant v) {
  switch (v) {
    case AttnVariant::oa: return "oa";
    case AttnVariant::sa: return "sa";
    default: return "mlp";
  }
}
inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::emd: return "emd";
    case LossVariant::cd: return "cd";
    default: return "cd_emd";
  }
}
inline AttnVariant attn_from_string(const std::string& s) {
  if (s == "oa") return AttnVariant::oa;
  if (s == "sa") return AttnVariant::sa;
  if (s == "mlp") return AttnVariant::mlp;
  throw std::invalid_argument("unknown attention variant '" + s + "'");
}
inline LossVariant loss_from_string(const std::string& s) {
  if (s == "emd") return LossVariant::emd;
  if (s == "cd") return LossVariant::cd;
  if (s == "cd_emd") return LossVariant::cd_plus_emd;
  throw std::invalid_argument("unknown loss variant '" + s + "'");
}

struct LossConfig {
  double alpha = 1.0;
  double beta = 1.0;
  LossVariant variant = LossVariant::emd;

  void validate() const {
    if (alpha < 0 || beta < 0)
      throw std::invalid_argument("loss weights must be nonnegative");
    if (alpha == 0 && beta == 0)
      throw std::invalid_argument("alpha and beta cannot both be zero");
  }
};

// Ordered, named parameter storage shared by the sampler and classifier.
template <class Real>
struct ParamTable {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<Real> value;
  };
  std::vector<Entry> entries;

  // Glorot-uniform matrix.
  std::size_t add_matrix(const std::string& name, std::size_t fan_in,
                         std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    Entry e{name, {fan_in, fan_out}, std::vector<Real>(fan_in * fan_out)};
    for (auto& w : e.value) w = static_cast<Real>(rng.uniform(-limit, limit));
    entries.push_back(std::move(e));
    return entries.size() - 1;
  }

  std::size_t add_bias(const std::string& name, std::size_t width) {
    entries.push_back(Entry{name, {width}, std::vector<Real>(width, Real(0))});
    return entries.size() - 1;
  }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (const auto& e : entries) total += e.value.size();
    return total;
  }

  // Leaves for one forward pass, aligned with `entries`.
  std::vector<Tensor<Real>> bind(Graph<Real>& g, bool requires_grad) const {
    std::vector<Tensor<Real>> bound;
    bound.reserve(entries.size());
    for (const auto& e : entries)
      bound.push_back(g.leaf(e.shape, e.value, requires_grad));
    return bound;
  }
};

// The contribution-scoring sampler: grouping + feature embedding,
// a cascade of three attention blocks, and the per-point scoring head,
// with the OT Top-k selector on the end.
template <class Real>
struct CsNetModel {
  std::size_t neighbors = 32;  // g
  std::size_t width = 64;      // c
  AttnVariant attn = AttnVariant::oa;
  TopkConfig topk;
  ParamTable<Real> params;

  // Entry indices into `params`.
  std::size_t fe_mlp1_w, fe_mlp1_b, fe_mlp2_w, fe_mlp2_b, fe_fuse_w, fe_fuse_b;
  struct Block {
    std::size_t wq, wk, wv, g1_w, g1_b, g2_w, g2_b;
  };
  std::array<Block, 3> blocks;
  std::size_t cs_rho_w, cs_rho_b, cs_fc1_w, cs_fc1_b, cs_fc2_w, cs_fc2_b,
      cs_fc3_w, cs_fc3_b;

  CsNetModel(std::size_t g, std::size_t c, AttnVariant variant, TopkConfig cfg,
             std::uint64_t seed)
      : neighbors(g), width(c), attn(variant), topk(cfg) {
    Rng rng(Rng::derive_seed(seed, 0xc5, 0));
    fe_mlp1_w = params.add_matrix("fe.mlp1.w", 6, c, rng);
    fe_mlp1_b = params.add_bias("fe.mlp1.b", c);
    fe_mlp2_w = params.add_matrix("fe.mlp2.w", c, c, rng);
    fe_mlp2_b = params.add_bias("fe.mlp2.b", c);
    fe_fuse_w = params.add_matrix("fe.fuse.w", 2 * c, c, rng);
    fe_fuse_b = params.add_bias("fe.fuse.b", c);
    for (int b = 0; b < 3; ++b) {
      const std::string p = "ca.oa" + std::to_string(b + 1) + ".";
      blocks[b].wq = params.add_matrix(p + "wq", c, c, rng);
      blocks[b].wk = params.add_matrix(p + "wk", c, c, rng);
      blocks[b].wv = params.add_matrix(p + "wv", c, c, rng);
      blocks[b].g1_w = params.add_matrix(p + "gamma1.w", c, c, rng);
      blocks[b].g1_b = params.add_bias(p + "gamma1.b", c);
      blocks[b].g2_w = params.add_matrix(p + "gamma2.w", c, c, rng);
      blocks[b].g2_b = params.add_bias(p + "gamma2.b", c);
    }
    cs_rho_w = params.add_matrix("cs.rho.w", 3 * c, 128, rng);
    cs_rho_b = params.add_bias("cs.rho.b", 128);
    cs_fc1_w = params.add_matrix("cs.fc1.w", 128, 64, rng);
    cs_fc1_b = params.add_bias("cs.fc1.b", 64);
    cs_fc2_w = params.add_matrix("cs.fc2.w", 64, 32, rng);
    cs_fc2_b = params.add_bias("cs.fc2.b", 32);
    cs_fc3_w = params.add_matrix("cs.fc3.w", 32, 1, rng);
    cs_fc3_b = params.add_bias("cs.fc3.b", 1);
  }
};

// Per-pass activations (shapes for the configured n, g, c).
template <class Real>
struct ActivationRecord {
  Tensor<Real> f_group;      // n x g x 3 relative coordinates
  Tensor<Real> f_combine;    // n x g x c
  Tensor<Real> f_pointwise;  // n x c
  std::array<Tensor<Real>, 3> f_sa;
  std::array<Tensor<Real>, 3> f_oa;
  Tensor<Real> f_concat;  // n x 3c
  Tensor<Real> s_con;     // n
};

namespace nn {

template <class Real>
Tensor<Real> dense(Graph<Real>& g, const Tensor<Real>& x, const Tensor<Real>& w,
                   const Tensor<Real>& b, bool relu_out) {
  const std::size_t rows = x.dim(0), out_w = w.dim(1);
  Tensor<Real> y = g.add(g.matmul(x, w),
                         g.replicate(g.reshape(b, {1, out_w}), 0, rows));
  return relu_out ? g.relu(y) : y;
}

}  // namespace nn

// Relative coordinates of each point's g nearest neighbors (self first,
// ties to the lower index). The offsets are constants on the graph: the
// learnable pipeline starts at the embedding MLP.
template <class Real>
std::pair<Tensor<Real>, std::vector<std::size_t>> grouping_layer(
    const PointCloud& cloud, std::size_t g_neighbors) {
  const std::size_t n = cloud.size();
  const auto idx = knn::neighbors(cloud, g_neighbors);
  std::vector<Real> offsets(n * g_neighbors * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g_neighbors; ++j) {
      const auto& self = cloud.points[i];
      const auto& nb = cloud.points[idx[i * g_neighbors + j]];
      const std::size_t base = (i * g_neighbors + j) * 3;
      offsets[base] = static_cast<Real>(nb[0]) - static_cast<Real>(self[0]);
      offsets[base + 1] = static_cast<Real>(nb[1]) - static_cast<Real>(self[1]);
      offsets[base + 2] = static_cast<Real>(nb[2]) - static_cast<Real>(self[2]);
    }
  return {Graph<Real>::constant({n, g_neighbors, 3}, std::move(offsets)), idx};
}

// Grouping offsets + replicated absolute coordinates -> shared MLP ->
// fused max/mean spatial pooling over the neighbor axis.
template <class Real>
Tensor<Real> feature_embed(Graph<Real>& g, const PointCloud& cloud,
                           const CsNetModel<Real>& model,
                           const std::vector<Tensor<Real>>& p,
                           ActivationRecord<Real>* record = nullptr) {
  const std::size_t n = cloud.size();
  const std::size_t gn = model.neighbors;
  if (gn > n)
    throw std::invalid_argument("feature_embed: g=" + std::to_string(gn) +
                                " exceeds cloud size " + std::to_string(n));
  auto [f_group, idx] = grouping_layer<Real>(cloud, gn);
  if (record) record->f_group = f_group;

  std::vector<Real> abs_coords(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d)
      abs_coords[i * 3 + d] = static_cast<Real>(cloud.points[i][d]);
  Tensor<Real> replicated = g.replicate(
      g.reshape(Graph<Real>::constant({n, 3}, std::move(abs_coords)), {n, 1, 3}),
      1, gn);

  Tensor<Real> combined =
      g.concat({g.reshape(f_group, {n * gn, 3}), g.reshape(replicated, {n * gn, 3})}, 1);
  Tensor<Real> h = nn::dense(g, combined, p[model.fe_mlp1_w], p[model.fe_mlp1_b], true);
  Tensor<Real> f_combine =
      nn::dense(g, h, p[model.fe_mlp2_w], p[model.fe_mlp2_b], true);
  Tensor<Real> grouped = g.reshape(f_combine, {n, gn, model.width});
  if (record) record->f_combine = grouped;

  Tensor<Real> pooled = g.concat(
      {g.reduce_max(grouped, 1), g.reduce_mean(grouped, 1)}, 1);  // n x 2c
  Tensor<Real> f_pointwise =
      nn::dense(g, pooled, p[model.fe_fuse_w], p[model.fe_fuse_b], true);
  if (record) record->f_pointwise = f_pointwise;
  return f_pointwise;
}

template <class Real>
Tensor<Real> self_attention(Graph<Real>& g, const Tensor<Real>& f_in,
                            const Tensor<Real>& wq, const Tensor<Real>& wk,
                            const Tensor<Real>& wv) {
  const Real scale = std::sqrt(static_cast<Real>(wk.dim(1)));  // d_key = c
  Tensor<Real> q = g.matmul(f_in, wq);
  Tensor<Real> k = g.matmul(f_in, wk);
  Tensor<Real> v = g.matmul(f_in, wv);
  Tensor<Real> attn = g.softmax(g.matmul(q, g.transpose(k)), 1, scale);
  return g.matmul(attn, v);
}

// One attention block. The variant picks gamma's argument:
//   oa:  gamma(f_in - f_sa) + f_in
//   sa:  gamma(f_sa) + f_in
//   mlp: gamma(f_in) + f_in   (attention bypassed entirely)
template <class Real>
Tensor<Real> offset_attention(Graph<Real>& g, const Tensor<Real>& f_in,
                              const CsNetModel<Real>& model, int block,
                              const std::vector<Tensor<Real>>& p,
                              Tensor<Real>* sa_out = nullptr) {
  const auto& blk = model.blocks[static_cast<std::size_t>(block)];
  Tensor<Real> gamma_arg;
  if (model.attn == AttnVariant::mlp) {
    gamma_arg = f_in;
  } else {
    Tensor<Real> f_sa = self_attention(g, f_in, p[blk.wq], p[blk.wk], p[blk.wv]);
    if (sa_out) *sa_out = f_sa;
    gamma_arg = model.attn == AttnVariant::oa ? g.sub(f_in, f_sa) : f_sa;
  }
  Tensor<Real> hidden = nn::dense(g, gamma_arg, p[blk.g1_w], p[blk.g1_b], true);
  Tensor<Real> out = nn::dense(g, hidden, p[blk.g2_w], p[blk.g2_b], false);
  return g.add(out, f_in);
}

// Three chained blocks, outputs concatenated along the feature axis.
template <class Real>
Tensor<Real> cascade_attention(Graph<Real>& g, const Tensor<Real>& f_pointwise,
                               const CsNetModel<Real>& model,
                               const std::vector<Tensor<Real>>& p,
                               ActivationRecord<Real>* record = nullptr) {
  Tensor<Real> f = f_pointwise;
  std::vector<Tensor<Real>> outs;
  for (int b = 0; b < 3; ++b) {
    Tensor<Real> sa;
    f = offset_attention(g, f, model, b, p, record ? &sa : nullptr);
    if (record) {
      record->f_sa[static_cast<std::size_t>(b)] = sa;
      record->f_oa[static_cast<std::size_t>(b)] = f;
    }
    outs.push_back(f);
  }
  Tensor<Real> f_concat = g.concat(outs, 1);
  if (record) record->f_concat = f_concat;
  return f_concat;
}

// rho (3c -> 128) followed by the 128 -> 64 -> 32 -> 1 head; the final
// layer stays linear so scores are sign-free reals.
template <class Real>
Tensor<Real> score(Graph<Real>& g, const Tensor<Real>& f_concat,
                   const CsNetModel<Real>& model,
                   const std::vector<Tensor<Real>>& p,
                   ActivationRecord<Real>* record = nullptr) {
  const std::size_t n = f_concat.dim(0);
  Tensor<Real> h = nn::dense(g, f_concat, p[model.cs_rho_w], p[model.cs_rho_b], true);
  h = nn::dense(g, h, p[model.cs_fc1_w], p[model.cs_fc1_b], true);
  h = nn::dense(g, h, p[model.cs_fc2_w], p[model.cs_fc2_b], true);
  h = nn::dense(g, h, p[model.cs_fc3_w], p[model.cs_fc3_b], false);
  Tensor<Real> s = g.reshape(h, {n});
  if (record) record->s_con = s;
  return s;
}

template <class Real>
struct ForwardResult {
  SampleResult sample;
  Tensor<Real> gates;  // length k, forward-valued 1
  Tensor<Real> scores;
  TransportPlan<Real> plan;
  ActivationRecord<Real> record;
};

// Full sampler forward pass: grouping -> feature embedding -> cascade
// attention -> scoring -> straight-through OT Top-k selection.
template <class Real>
ForwardResult<Real> forward_sample(Graph<Real>& g, const PointCloud& cloud,
                                   const CsNetModel<Real>& model,
                                   const std::vector<Tensor<Real>>& p,
                                   std::size_t k, bool keep_record = false) {
  if (k < 1 || k >= cloud.size())
    throw std::invalid_argument("forward_sample requires 1 <= k < n");
  ForwardResult<Real> out;
  ActivationRecord<Real>* rec = keep_record ? &out.record : nullptr;
  Tensor<Real> f_pointwise = feature_embed(g, cloud, model, p, rec);
  Tensor<Real> f_concat = cascade_attention(g, f_pointwise, model, p, rec);
  out.scores = score(g, f_concat, model, p, rec);
  auto sel = straight_through_select(g, cloud, out.scores, k, model.topk);
  out.sample = std::move(sel.sample);
  out.sample.method_tag = "csnet";
  out.gates = sel.gates;
  out.plan = std::move(sel.plan);
  return out;
}

// L_total = alpha * L_shape + beta * L_task. The shape term holds the
// optimal matching (or nearest-neighbor argmins) fixed for the step; the
// straight-through gates carry its gradient back to the scores.
template <class Real>
Tensor<Real> joint_loss(Graph<Real>& g, const SampleResult& sample,
                        const Tensor<Real>& gates, const PointCloud& cloud,
                        const Tensor<Real>& task_loss, const LossConfig& cfg) {
  cfg.validate();
  if (task_loss.size() != 1)
    throw std::invalid_argument("task loss must be scalar");
  const std::size_t k = sample.indices.size();
  const std::size_t n = cloud.size();

  std::vector<Real> gate_coeff(k, Real(0));
  if (cfg.variant == LossVariant::emd || cfg.variant == LossVariant::cd_plus_emd) {
    const Matching m = emd(sample.sampled, cloud);
    for (std::size_t j = 0; j < k; ++j)
      gate_coeff[j] += static_cast<Real>(m.squared_dists[j] / double(k));
  }
  if (cfg.variant == LossVariant::cd || cfg.variant == LossVariant::cd_plus_emd) {
    // Sampled -> input nearest distances (zero for exact subsets), gated
    // per sampled point.
    for (std::size_t j = 0; j < k; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i)
        best = std::min(best, detail::cloud_dist2(sample.sampled.points[j],
                                                  cloud.points[i]));
      gate_coeff[j] += static_cast<Real>(best / double(k));
    }
    // Input -> sampled nearest distances, gated through each input
    // point's nearest selected point.
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const double d = detail::cloud_dist2(cloud.points[i],
                                             sample.sampled.points[j]);
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      gate_coeff[arg] += static_cast<Real>(best / double(n));
    }
  }
  Tensor<Real> shape_loss = g.reshape(
      g.matmul(g.reshape(gates, {1, k}),
               Graph<Real>::constant({k, 1}, std::move(gate_coeff))),
      {1});
  return g.add(g.scalar_mul(shape_loss, static_cast<Real>(cfg.alpha)),
               g.scalar_mul(task_loss, static_cast<Real>(cfg.beta)));
}

}  // namespace csnet
