#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mlosr/data.hpp"
#include "mlosr/error.hpp"
#include "mlosr/models.hpp"
#include "mlosr/ops.hpp"
#include "mlosr/random.hpp"
#include "mlosr/tape.hpp"

namespace mlosr {

enum class TrainingMode {
  mlosr,        // shared encoder, joint classification + reconstruction
  dcn_softmax,  // encoder + classifier only
  dcn_ae,       // classifier pipeline and a separate encoder + decoder
};

inline const char* training_mode_name(TrainingMode m) {
  switch (m) {
    case TrainingMode::mlosr: return "mlosr";
    case TrainingMode::dcn_softmax: return "dcn_softmax";
    case TrainingMode::dcn_ae: return "dcn_ae";
  }
  return "?";
}

inline TrainingMode parse_training_mode(const std::string& s) {
  if (s == "mlosr") return TrainingMode::mlosr;
  if (s == "dcn_softmax") return TrainingMode::dcn_softmax;
  if (s == "dcn_ae") return TrainingMode::dcn_ae;
  throw ValidationError("unknown training mode '" + s + "' (expected mlosr, dcn_softmax or dcn_ae)");
}

inline DecoderLayout decoder_layout_for(TrainingMode m) {
  switch (m) {
    case TrainingMode::mlosr: return DecoderLayout::Shared;
    case TrainingMode::dcn_softmax: return DecoderLayout::None;
    case TrainingMode::dcn_ae: return DecoderLayout::Separate;
  }
  return DecoderLayout::Shared;
}

struct TrainConfig {
  double eta = 0.0003;
  std::size_t batch_size = 64;
  double lambda_c = 0.5;
  double lambda_r = 0.5;
  std::size_t max_epochs = 50;
  // Training stops once the epoch-mean L_r drops below this value times the
  // number of pixels per sample (L_r is a per-sample sum).
  double lr_stop_per_pixel = 0.01;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(eta > 0.0)) throw ValidationError("learning rate must be positive");
    if (batch_size == 0) throw ValidationError("batch size must be at least 1");
    if (lambda_c < 0.0 || lambda_r < 0.0) throw ValidationError("loss weights must be nonnegative");
    if (lambda_c == 0.0 && lambda_r == 0.0) throw ValidationError("loss weights cannot both be zero");
    if (max_epochs == 0) throw ValidationError("max_epochs must be positive");
  }
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update. `grads[i]` pairs with `*params[i]`;
/// moment buffers are allocated on the first call.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double eta) {
  if (grads.empty() || grads.size() != params.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters (step before backward?)");
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: parameter list changed between steps");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) throw DimensionError("adam_step: gradient shape does not match parameter");
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      p[j] -= eta * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
    }
  }
}

struct Losses {
  double classification = 0.0;                 // L_c
  std::optional<double> reconstruction;        // L_r, absent without a decoder
};

/// L_t = lambda_c L_c + lambda_r L_r
inline double total_loss(double l_c, double l_r, const TrainConfig& cfg) {
  return cfg.lambda_c * l_c + cfg.lambda_r * l_r;
}

namespace detail {

inline Tensor one_hot(std::span<const int> labels, std::size_t k) {
  Tensor t(Shape{labels.size(), k}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ValidationError("label " + std::to_string(labels[i]) + " out of range 0.." + std::to_string(k - 1));
    }
    t[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// Forward graph of one batch. Parameter leaves are tracked when `track`;
/// each vector lists a network's parameter leaves in Network::params order.
struct LossGraph {
  Var l_c;
  std::optional<Var> l_r;
  Var l_t;
  std::vector<Var> encoder, decoder, classifier, recon_encoder;
};

inline std::vector<Tensor*> parameter_pointers(Network& net) {
  std::vector<Tensor*> out;
  for (auto& layer : net.params)
    for (auto& t : layer) out.push_back(&t);
  return out;
}

inline LossGraph build_loss_graph(Tape& tape, const ModelTriplet& m, const Tensor& x, std::span<const int> labels,
                                  const TrainConfig& cfg, TrainingMode mode, bool track) {
  LossGraph g;
  Var xv = tape.leaf(x);
  NetworkTrace enc = run_network(tape, m.encoder, xv, track);
  NetworkTrace cls = run_network(tape, m.classifier, enc.output, track);
  Var probs = softmax(cls.output);
  g.l_c = cross_entropy(tape.leaf(one_hot(labels, m.num_classes)), probs);
  g.encoder = enc.params;
  g.classifier = cls.params;

  if (mode != TrainingMode::dcn_softmax && m.decoder) {
    Var latent = enc.output;
    if (mode == TrainingMode::dcn_ae) {
      NetworkTrace renc = run_network(tape, *m.recon_encoder, xv, track);
      latent = renc.output;
      g.recon_encoder = renc.params;
    }
    NetworkTrace dec = run_network(tape, *m.decoder, latent, track);
    g.decoder = dec.params;
    g.l_r = l1_loss(xv, dec.output);
    g.l_t = weighted_sum(g.l_c, cfg.lambda_c, *g.l_r, cfg.lambda_r);
  } else {
    g.l_t = g.l_c;
  }
  return g;
}

inline void check_mode(const ModelTriplet& m, TrainingMode mode) {
  switch (mode) {
    case TrainingMode::mlosr:
      if (!m.decoder || m.recon_encoder) throw ContractError("mlosr mode needs a shared-encoder decoder");
      break;
    case TrainingMode::dcn_ae:
      if (!m.decoder || !m.recon_encoder) throw ContractError("dcn_ae mode needs a separate reconstruction encoder");
      break;
    case TrainingMode::dcn_softmax: break;
  }
}

}  // namespace detail

/// Batch-mean cross-entropy and batch-mean per-sample L1 reconstruction.
inline Losses compute_losses(const ModelTriplet& m, const Tensor& x, std::span<const int> labels) {
  if (labels.size() != x.dim(0)) throw DimensionError("compute_losses: label count does not match batch");
  Tape tape;
  const TrainingMode mode = !m.decoder ? TrainingMode::dcn_softmax
                                       : (m.recon_encoder ? TrainingMode::dcn_ae : TrainingMode::mlosr);
  detail::LossGraph g = detail::build_loss_graph(tape, m, x, labels, TrainConfig{}, mode, false);
  Losses out;
  out.classification = tape.value(g.l_c).item();
  if (g.l_r) out.reconstruction = tape.value(*g.l_r).item();
  return out;
}

struct EpochLoss {
  std::size_t epoch;
  double l_c;
  double l_r;  // 0 for classifier-only training
  double l_t;
};

struct TrainResult {
  std::vector<EpochLoss> history;
  bool stopped_on_reconstruction = false;
};

/// Joint training loop. Every batch computes L_t and updates all parameters
/// that L_t depends on with Adam. Batch order is reshuffled each epoch from
/// the run seed; the last partial batch is kept.
inline TrainResult train(ModelTriplet& m, const Dataset& data, const TrainConfig& cfg, TrainingMode mode) {
  cfg.validate();
  detail::check_mode(m, mode);
  if (data.size() == 0) throw ValidationError("cannot train on an empty dataset");
  const Shape expect = m.config.input_shape;
  if (data.sample_shape() != expect) {
    throw DimensionError("dataset samples are " + shape_string(data.sample_shape()) + " but the model expects " +
                         shape_string(expect));
  }
  for (int l : data.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= m.num_classes) {
      throw ValidationError("training label " + std::to_string(l) + " out of range for " +
                            std::to_string(m.num_classes) + " classes");
    }
  }

  AdamState adam;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.epsilon = cfg.epsilon;
  const double pixels = static_cast<double>(shape_volume(expect));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 1000 + epoch));
    rng.shuffle(std::span<std::size_t>(order));
    double sum_c = 0.0, sum_r = 0.0, sum_t = 0.0;
    bool has_r = false;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + b, e - b);
      const Tensor xb = data.images.gather_rows(rows);
      std::vector<int> yb;
      yb.reserve(rows.size());
      for (std::size_t r : rows) yb.push_back(data.labels[r]);

      Tape tape;
      detail::LossGraph g = detail::build_loss_graph(tape, m, xb, yb, cfg, mode, true);
      tape.backward(g.l_t);

      std::vector<Tensor*> params;
      std::vector<Tensor> grads;
      auto collect = [&](Network& net, const std::vector<Var>& vars) {
        const auto ptrs = detail::parameter_pointers(net);
        for (std::size_t i = 0; i < vars.size(); ++i) {
          params.push_back(ptrs.at(i));
          grads.push_back(tape.grad(vars[i]));
        }
      };
      collect(m.encoder, g.encoder);
      collect(m.classifier, g.classifier);
      if (!g.decoder.empty()) collect(*m.decoder, g.decoder);
      if (!g.recon_encoder.empty()) collect(*m.recon_encoder, g.recon_encoder);
      adam_step(params, grads, adam, cfg.eta);

      const double w = static_cast<double>(rows.size());
      sum_c += w * tape.value(g.l_c).item();
      if (g.l_r) {
        has_r = true;
        sum_r += w * tape.value(*g.l_r).item();
      }
      sum_t += w * tape.value(g.l_t).item();
    }
    const double n = static_cast<double>(data.size());
    result.history.push_back(EpochLoss{epoch + 1, sum_c / n, sum_r / n, sum_t / n});
    if (has_r && sum_r / n < cfg.lr_stop_per_pixel * pixels) {
      result.stopped_on_reconstruction = true;
      break;
    }
  }
  return result;
}

inline void write_loss_csv(std::ostream& os, const std::vector<EpochLoss>& history) {
  os << "epoch,L_c,L_r,L_t\n";
  char buf[160];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.l_c, e.l_r, e.l_t);
    os << buf;
  }
}

inline void write_loss_csv(const std::string& path, const std::vector<EpochLoss>& history) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_loss_csv(os, history);
}

}  // namespace mlosr
