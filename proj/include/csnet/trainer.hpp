#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "csnet/model.hpp"
#include "csnet/parallel.hpp"
#include "csnet/pointcloud.hpp"
#include "csnet/rng.hpp"
#include "csnet/samplers.hpp"

namespace csnet {

// Desk-scale point classifier: shared per-point MLP, global max-pool,
// small fully connected head. Permutation-invariant by construction.
template <class Real>
struct ClassifierModel {
  std::size_t num_classes = 8;
  ParamTable<Real> params;
  std::size_t pm1_w, pm1_b, pm2_w, pm2_b, head1_w, head1_b, head2_w, head2_b;

  ClassifierModel(std::size_t classes, std::uint64_t seed) : num_classes(classes) {
    Rng rng(Rng::derive_seed(seed, 0xc1f, 0));
    pm1_w = params.add_matrix("pm1.w", 3, 64, rng);
    pm1_b = params.add_bias("pm1.b", 64);
    pm2_w = params.add_matrix("pm2.w", 64, 128, rng);
    pm2_b = params.add_bias("pm2.b", 128);
    head1_w = params.add_matrix("head1.w", 128, 64, rng);
    head1_b = params.add_bias("head1.b", 64);
    head2_w = params.add_matrix("head2.w", 64, classes, rng);
    head2_b = params.add_bias("head2.b", classes);
  }
};

template <class Real>
Tensor<Real> classifier_forward(Graph<Real>& g, const Tensor<Real>& points,
                                const ClassifierModel<Real>& model,
                                const std::vector<Tensor<Real>>& p) {
  if (points.rank() != 2 || points.dim(1) != 3)
    throw std::invalid_argument("classifier expects an m x 3 tensor, got " +
                                shape_str(points.shape()));
  Tensor<Real> h = nn::dense(g, points, p[model.pm1_w], p[model.pm1_b], true);
  h = nn::dense(g, h, p[model.pm2_w], p[model.pm2_b], true);
  Tensor<Real> pooled = g.reshape(g.reduce_max(h, 0), {1, h.dim(1)});
  Tensor<Real> head = nn::dense(g, pooled, p[model.head1_w], p[model.head1_b], true);
  head = nn::dense(g, head, p[model.head2_w], p[model.head2_b], false);
  return g.reshape(head, {model.num_classes});
}

template <class Real>
Tensor<Real> classifier_forward(Graph<Real>& g, const PointCloud& cloud,
                                const ClassifierModel<Real>& model,
                                const std::vector<Tensor<Real>>& p) {
  std::vector<Real> coords(cloud.size() * 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int d = 0; d < 3; ++d)
      coords[i * 3 + d] = static_cast<Real>(cloud.points[i][d]);
  return classifier_forward(g, Graph<Real>::constant({cloud.size(), 3}, coords),
                            model, p);
}

// -log softmax(logits)[label], stabilized through logsumexp.
template <class Real>
Tensor<Real> cross_entropy(Graph<Real>& g, const Tensor<Real>& logits,
                           std::size_t label) {
  if (logits.rank() != 1)
    throw std::invalid_argument("cross_entropy expects a logit vector");
  if (label >= logits.size())
    throw std::invalid_argument("label " + std::to_string(label) +
                                " out of range for " +
                                std::to_string(logits.size()) + " classes");
  Tensor<Real> lse = g.logsumexp(logits, 0);
  Tensor<Real> picked = g.reshape(
      g.gather_rows(g.reshape(logits, {logits.size(), 1}), {label}), {1});
  return g.sub(lse, picked);
}

// ---- optimizer -------------------------------------------------------

template <class Real>
struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<Real>> m, v;
};

template <class Real>
void adam_step(ParamTable<Real>& params, const std::vector<std::vector<Real>>& grads,
               AdamState<Real>& state) {
  if (grads.size() != params.entries.size())
    throw std::invalid_argument("adam_step: gradient table shape mismatch");
  if (state.m.empty()) {
    state.m.resize(params.entries.size());
    state.v.resize(params.entries.size());
    for (std::size_t e = 0; e < params.entries.size(); ++e) {
      state.m[e].assign(params.entries[e].value.size(), Real(0));
      state.v[e].assign(params.entries[e].value.size(), Real(0));
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t e = 0; e < params.entries.size(); ++e) {
    auto& value = params.entries[e].value;
    if (grads[e].size() != value.size())
      throw std::invalid_argument("adam_step: gradient size mismatch for " +
                                  params.entries[e].name);
    auto& m = state.m[e];
    auto& v = state.v[e];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = double(grads[e][i]);
      m[i] = Real(state.beta1 * double(m[i]) + (1 - state.beta1) * gi);
      v[i] = Real(state.beta2 * double(v[i]) + (1 - state.beta2) * gi * gi);
      const double mhat = double(m[i]) / bc1;
      const double vhat = double(v[i]) / bc2;
      value[i] = Real(double(value[i]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

// ---- training configuration ------------------------------------------

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 0.001;
  std::uint64_t seed = 1;
  std::size_t k = 64;
  double alpha = 1.0;
  double beta = 1.0;
  LossVariant loss_variant = LossVariant::emd;
  AttnVariant attn = AttnVariant::oa;
  double eps = 0.01;  // Top-k regularization
  std::string checkpoint_path;
  std::size_t width = 64;
  std::size_t neighbors = 32;
  AugmentOptions augment{true, {0.9, 1.1}, false};
  // Train the classifier on seeded random subsets instead of the sampler
  // (reference baseline); the sampler is left untouched.
  bool random_baseline = false;
  // Stop once test accuracy reaches this value (<= 0 disables).
  double stop_at_accuracy = -1.0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  }
};

struct EvalResult {
  double accuracy = 0;
  long correct = 0;
  long total = 0;
  std::vector<std::vector<long>> confusion;  // [truth][predicted]
};

struct TrainReport {
  std::vector<double> train_loss;     // per epoch
  std::vector<double> test_accuracy;  // per epoch
  double best_accuracy = 0;
  int best_epoch = -1;
  int epochs_run = 0;
};

enum class EvalSampler { csnet, random, none };

// Deterministic evaluation: no augmentation, argmax of logits on sampled
// clouds. The csnet path consumes no rng; the random baseline derives a
// fixed per-cloud seed.
template <class Real>
EvalResult evaluate(const std::vector<PointCloud>& split,
                    const CsNetModel<Real>* sampler,
                    const ClassifierModel<Real>& clf, std::size_t k,
                    EvalSampler mode = EvalSampler::csnet) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalResult result;
  result.confusion.assign(clf.num_classes,
                          std::vector<long>(clf.num_classes, 0));
  std::vector<int> predicted(split.size(), -1);
  parallel_for(
      split.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          Graph<Real> g;
          PointCloud sampled;
          if (mode == EvalSampler::csnet) {
            auto bound = sampler->params.bind(g, false);
            auto fwd = forward_sample(g, split[i], *sampler, bound, k);
            sampled = std::move(fwd.sample.sampled);
          } else if (mode == EvalSampler::random) {
            Rng rng(Rng::derive_seed(0xe7a1, i, k));
            sampled = random_sample(split[i], k, rng).sampled;
          } else {
            sampled = split[i];
          }
          auto cp = clf.params.bind(g, false);
          Tensor<Real> logits = classifier_forward(g, sampled, clf, cp);
          int arg = 0;
          for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[arg]) arg = static_cast<int>(c);
          predicted[i] = arg;
        }
      },
      8);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const int truth = split[i].label.value_or(-1);
    if (truth < 0 || static_cast<std::size_t>(truth) >= clf.num_classes)
      throw std::invalid_argument("evaluate: cloud without a valid label");
    result.total += 1;
    result.correct += predicted[i] == truth;
    result.confusion[static_cast<std::size_t>(truth)]
                    [static_cast<std::size_t>(predicted[i])] += 1;
  }
  result.accuracy = double(result.correct) / double(result.total);
  return result;
}

namespace detail {

template <class Real>
struct ItemGrads {
  std::vector<std::vector<Real>> csnet;
  std::vector<std::vector<Real>> clf;
  double loss = 0;
};

template <class Real>
void accumulate(std::vector<std::vector<Real>>& into,
                const ParamTable<Real>& params, const Graph<Real>& g,
                const std::vector<Tensor<Real>>& bound) {
  if (into.empty()) {
    into.resize(params.entries.size());
    for (std::size_t e = 0; e < params.entries.size(); ++e)
      into[e].assign(params.entries[e].value.size(), Real(0));
  }
  for (std::size_t e = 0; e < bound.size(); ++e) {
    const std::vector<Real>* grad = g.gradient(bound[e]);
    if (!grad) continue;
    for (std::size_t i = 0; i < grad->size(); ++i) into[e][i] += (*grad)[i];
  }
}

}  // namespace detail

// Joint training loop: per epoch, seeded shuffle, then for every cloud
// augment -> forward_sample -> classifier on the gate-scaled sampled
// points -> joint_loss -> backward, gradients accumulated over the batch
// before one Adam step per model. Batch items run on parallel workers
// with per-item derived rng streams; gradient sums are reduced in item
// order, so results do not depend on the worker count.
template <class Real>
TrainReport train(const std::vector<PointCloud>& train_split,
                  const std::vector<PointCloud>& test_split,
                  CsNetModel<Real>& sampler, ClassifierModel<Real>& clf,
                  const TrainConfig& cfg) {
  cfg.validate();
  TrainReport report;
  AdamState<Real> sampler_opt, clf_opt;
  sampler_opt.lr = cfg.learning_rate;
  clf_opt.lr = cfg.learning_rate;
  LossConfig loss_cfg{cfg.alpha, cfg.beta, cfg.loss_variant};
  loss_cfg.validate();

  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::derive_seed(cfg.seed, 0xe90c, std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    for (std::size_t batch_lo = 0; batch_lo < order.size();
         batch_lo += std::size_t(cfg.batch_size)) {
      const std::size_t batch_hi =
          std::min(order.size(), batch_lo + std::size_t(cfg.batch_size));
      const std::size_t batch_n = batch_hi - batch_lo;
      std::vector<detail::ItemGrads<Real>> items(batch_n);
      parallel_for(
          batch_n,
          [&](std::size_t lo, std::size_t hi) {
            for (std::size_t b = lo; b < hi; ++b) {
              const std::size_t cloud_idx = order[batch_lo + b];
              Rng item_rng(Rng::derive_seed(
                  cfg.seed, 0xa06 + std::uint64_t(epoch),
                  std::uint64_t(batch_lo + b)));
              PointCloud cloud = augment(train_split[cloud_idx], item_rng,
                                         cfg.augment);
              Graph<Real> g;
              auto cp = clf.params.bind(g, true);
              Tensor<Real> loss;
              if (cfg.random_baseline) {
                SampleResult sampled = random_sample(cloud, cfg.k, item_rng);
                Tensor<Real> logits =
                    classifier_forward(g, sampled.sampled, clf, cp);
                loss = cross_entropy(
                    g, logits, std::size_t(cloud.label.value()));
              } else {
                auto sp = sampler.params.bind(g, true);
                auto fwd = forward_sample(g, cloud, sampler, sp, cfg.k);
                // Selected coordinates scaled by the straight-through
                // gates; forward-identical to the raw subset.
                std::vector<Real> coords(cfg.k * 3);
                for (std::size_t j = 0; j < cfg.k; ++j)
                  for (int d = 0; d < 3; ++d)
                    coords[j * 3 + d] =
                        static_cast<Real>(fwd.sample.sampled.points[j][d]);
                Tensor<Real> gated = g.mul(
                    Graph<Real>::constant({cfg.k, 3}, std::move(coords)),
                    g.replicate(g.reshape(fwd.gates, {cfg.k, 1}), 1, 3));
                Tensor<Real> logits = classifier_forward(g, gated, clf, cp);
                Tensor<Real> task = cross_entropy(
                    g, logits, std::size_t(cloud.label.value()));
                loss = joint_loss(g, fwd.sample, fwd.gates, cloud, task,
                                  loss_cfg);
                g.backward(loss);
                detail::accumulate(items[b].csnet, sampler.params, g, sp);
              }
              if (cfg.random_baseline) g.backward(loss);
              detail::accumulate(items[b].clf, clf.params, g, cp);
              items[b].loss = double(loss.scalar());
              if (!std::isfinite(items[b].loss))
                throw std::runtime_error(
                    "non-finite training loss at epoch " +
                    std::to_string(epoch) + ", cloud " +
                    std::to_string(cloud_idx));
            }
          },
          1);
      // Fixed-order reduction keeps training bit-reproducible.
      std::vector<std::vector<Real>> csnet_grads, clf_grads;
      for (auto& item : items) {
        epoch_loss += item.loss;
        if (!item.csnet.empty()) {
          if (csnet_grads.empty()) csnet_grads = std::move(item.csnet);
          else
            for (std::size_t e = 0; e < csnet_grads.size(); ++e)
              for (std::size_t i = 0; i < csnet_grads[e].size(); ++i)
                csnet_grads[e][i] += item.csnet[e][i];
        }
        if (clf_grads.empty()) clf_grads = std::move(item.clf);
        else
          for (std::size_t e = 0; e < clf_grads.size(); ++e)
            for (std::size_t i = 0; i < clf_grads[e].size(); ++i)
              clf_grads[e][i] += item.clf[e][i];
      }
      const Real inv = Real(1) / Real(batch_n);
      if (!csnet_grads.empty()) {
        for (auto& g2 : csnet_grads)
          for (auto& v : g2) v *= inv;
        adam_step(sampler.params, csnet_grads, sampler_opt);
      }
      for (auto& g2 : clf_grads)
        for (auto& v : g2) v *= inv;
      adam_step(clf.params, clf_grads, clf_opt);
    }
    report.train_loss.push_back(epoch_loss / double(order.size()));
    EvalResult eval = evaluate(test_split, &sampler, clf, cfg.k,
                               cfg.random_baseline ? EvalSampler::random
                                                   : EvalSampler::csnet);
    report.test_accuracy.push_back(eval.accuracy);
    report.epochs_run = epoch + 1;
    if (eval.accuracy > report.best_accuracy) {
      report.best_accuracy = eval.accuracy;
      report.best_epoch = epoch;
    }
    if (cfg.stop_at_accuracy > 0 && eval.accuracy >= cfg.stop_at_accuracy) break;
  }
  return report;
}

// ---- checkpoint ------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  write_u32(out, static_cast<std::uint32_t>(v & 0xffffffffULL));
  write_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& in) {
  const std::uint64_t lo = read_u32(in);
  const std::uint64_t hi = read_u32(in);
  return lo | (hi << 32);
}

inline void write_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

inline float read_f32(std::istream& in) {
  const std::uint32_t bits = read_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_named_table(std::ostream& out, const std::string& prefix,
                              const ParamTable<float>& table) {
  for (const auto& e : table.entries) {
    const std::string name = prefix + e.name;
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) write_u64(out, d);
    for (float v : e.value) write_f32(out, v);
  }
}

}  // namespace detail

inline constexpr char kCheckpointMagic[6] = {'C', 'S', 'N', 'E', 'T', '\x01'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  CsNetModel<float> sampler{32, 64, AttnVariant::oa, TopkConfig{}, 0};
  ClassifierModel<float> clf{8, 0};
  TrainConfig config;
  std::uint64_t rng_state[4] = {};
};

inline void save_checkpoint(const std::string& path,
                            const CsNetModel<float>& sampler,
                            const ClassifierModel<float>& clf,
                            const TrainConfig& cfg, const Rng& rng) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_u32(out, kCheckpointVersion);
  detail::write_u32(out, static_cast<std::uint32_t>(
                             sampler.params.entries.size() +
                             clf.params.entries.size()));
  detail::write_named_table(out, "csnet.", sampler.params);
  detail::write_named_table(out, "clf.", clf.params);

  nlohmann::json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["seed"] = cfg.seed;
  j["k"] = cfg.k;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  j["loss"] = to_string(cfg.loss_variant);
  j["attn"] = to_string(cfg.attn);
  j["eps"] = cfg.eps;
  j["width"] = sampler.width;
  j["neighbors"] = sampler.neighbors;
  j["topk_max_iters"] = sampler.topk.max_iters;
  j["topk_tol"] = sampler.topk.tol;
  j["num_classes"] = clf.num_classes;
  j["rng_state"] = {rng.state()[0], rng.state()[1], rng.state()[2],
                    rng.state()[3]};
  const std::string blob = j.dump();
  detail::write_u32(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("checkpoint write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kCheckpointMagic, 6) != 0)
    throw std::runtime_error(path + ": not a checkpoint file (bad magic)");
  const std::uint32_t version = detail::read_u32(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const std::uint32_t count = detail::read_u32(in);
  struct Record {
    std::string name;
    Shape shape;
    std::vector<float> value;
  };
  std::vector<Record> records(count);
  for (auto& r : records) {
    const std::uint32_t name_len = detail::read_u32(in);
    r.name.resize(name_len);
    in.read(r.name.data(), name_len);
    const std::uint32_t rank = detail::read_u32(in);
    r.shape.resize(rank);
    std::size_t total = 1;
    for (auto& d : r.shape) {
      d = static_cast<std::size_t>(detail::read_u64(in));
      total *= d;
    }
    r.value.resize(total);
    for (auto& v : r.value) v = detail::read_f32(in);
    if (!in) throw std::runtime_error(path + ": checkpoint truncated");
  }
  const std::uint32_t blob_len = detail::read_u32(in);
  std::string blob(blob_len, '\0');
  in.read(blob.data(), blob_len);
  if (!in) throw std::runtime_error(path + ": checkpoint truncated");
  const nlohmann::json j = nlohmann::json::parse(blob);

  Checkpoint ck;
  ck.config.epochs = j.at("epochs").get<int>();
  ck.config.batch_size = j.at("batch_size").get<int>();
  ck.config.learning_rate = j.at("learning_rate").get<double>();
  ck.config.seed = j.at("seed").get<std::uint64_t>();
  ck.config.k = j.at("k").get<std::size_t>();
  ck.config.alpha = j.at("alpha").get<double>();
  ck.config.beta = j.at("beta").get<double>();
  ck.config.loss_variant = loss_from_string(j.at("loss").get<std::string>());
  ck.config.attn = attn_from_string(j.at("attn").get<std::string>());
  ck.config.eps = j.at("eps").get<double>();
  ck.config.width = j.at("width").get<std::size_t>();
  ck.config.neighbors = j.at("neighbors").get<std::size_t>();
  for (int i = 0; i < 4; ++i)
    ck.rng_state[i] = j.at("rng_state")[i].get<std::uint64_t>();

  TopkConfig topk;
  topk.epsilon = ck.config.eps;
  topk.max_iters = j.at("topk_max_iters").get<int>();
  topk.tol = j.at("topk_tol").get<double>();
  ck.sampler = CsNetModel<float>(ck.config.neighbors, ck.config.width,
                                 ck.config.attn, topk, 0);
  ck.clf = ClassifierModel<float>(j.at("num_classes").get<std::size_t>(), 0);

  const auto fill = [&](const std::string& prefix, ParamTable<float>& table) {
    for (auto& e : table.entries) {
      const std::string want = prefix + e.name;
      const auto it =
          std::find_if(records.begin(), records.end(),
                       [&](const Record& r) { return r.name == want; });
      if (it == records.end())
        throw std::runtime_error(path + ": missing tensor " + want);
      if (it->shape != e.shape)
        throw std::runtime_error(path + ": shape mismatch for " + want);
      e.value = it->value;
    }
  };
  fill("csnet.", ck.sampler.params);
  fill("clf.", ck.clf.params);
  return ck;
}

}  // namespace csnet
