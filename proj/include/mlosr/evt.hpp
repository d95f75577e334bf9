#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mlosr/error.hpp"
#include "mlosr/models.hpp"
#include "mlosr/tensor.hpp"

namespace mlosr {

/// Generalized Pareto tail over reconstruction errors.
///
/// `sigma` is the GPD scale. `threshold` (w) is the cut point in
/// reconstruction-error units; excesses are r - w. Samples with
/// P_evt(r) >= tau are rejected as unknown.
struct TailModel {
  double zeta = 0.0;
  double sigma = 1.0;
  double threshold = 0.0;
  std::size_t tail_size = 20;
  double tau = 0.5;

  bool operator==(const TailModel&) const = default;
};

// Boundary: no interior stationary point beats the zeta -> -1 limit, the
// uniform law on [0, max excess].
enum class GpdFitMethod { Grimshaw, Exponential, DegenerateExponential, Boundary };

struct GpdFit {
  double zeta = 0.0;
  double sigma = 1.0;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  GpdFitMethod method = GpdFitMethod::Exponential;
};

/// GPD log-likelihood of nonnegative excesses; -inf outside the support.
inline double gpd_log_likelihood(std::span<const double> excesses, double zeta, double sigma) {
  if (!(sigma > 0.0)) return -std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(excesses.size());
  if (std::abs(zeta) < 1e-12) {
    double s = 0.0;
    for (double y : excesses) s += y;
    return -n * std::log(sigma) - s / sigma;
  }
  if (zeta == -1.0) {  // uniform on [0, sigma]
    for (double y : excesses)
      if (y > sigma) return -std::numeric_limits<double>::infinity();
    return -n * std::log(sigma);
  }
  double s = 0.0;
  for (double y : excesses) {
    const double t = zeta * y / sigma;
    if (!(t > -1.0)) return -std::numeric_limits<double>::infinity();
    s += std::log1p(t);
  }
  return -n * std::log(sigma) - (1.0 + 1.0 / zeta) * s;
}

namespace detail {

// Grimshaw's reduction: with theta = zeta / sigma the likelihood equations
// collapse to h(theta) = u(theta) * v(theta) - 1 = 0, where
//   u = mean 1/(1 + theta y),   v = 1 + mean log(1 + theta y),
// and then zeta = v - 1, sigma = zeta / theta.
inline double grimshaw_h(std::span<const double> y, double theta) {
  double u = 0.0, v = 0.0;
  for (double yi : y) {
    const double s = 1.0 + theta * yi;
    u += 1.0 / s;
    v += std::log(s);
  }
  const double n = static_cast<double>(y.size());
  return (u / n) * (1.0 + v / n) - 1.0;
}

inline std::vector<double> grimshaw_roots(std::span<const double> y, double lo, double hi) {
  // Sample densely with points crowding both ends of (lo, hi), then bisect
  // every sign change. The logistic span must reach far into both ends: with
  // a tiny minimum excess the upper bound is huge and roots sit near 0.
  constexpr int kPoints = 1600;
  constexpr double kSpan = 40.0;
  std::vector<double> roots;
  auto theta_at = [lo, hi](int i) {
    const double s = -kSpan + 2.0 * kSpan * static_cast<double>(i) / kPoints;
    return lo + (hi - lo) / (1.0 + std::exp(-s));
  };
  double prev_t = theta_at(0);
  double prev_h = grimshaw_h(y, prev_t);
  for (int i = 1; i <= kPoints; ++i) {
    const double t = theta_at(i);
    const double h = grimshaw_h(y, t);
    if (std::isfinite(prev_h) && std::isfinite(h) && (prev_h == 0.0 || prev_h * h < 0.0)) {
      double a = prev_t, b = t, ha = prev_h;
      for (int it = 0; it < 200 && b - a > 1e-15 * std::max(1.0, std::abs(a)); ++it) {
        const double mid = 0.5 * (a + b);
        const double hm = grimshaw_h(y, mid);
        if (hm == 0.0) {
          a = b = mid;
          break;
        }
        if ((ha < 0.0) == (hm < 0.0)) {
          a = mid;
          ha = hm;
        } else {
          b = mid;
        }
      }
      roots.push_back(0.5 * (a + b));
    }
    prev_t = t;
    prev_h = h;
  }
  return roots;
}

}  // namespace detail

/// Maximum-likelihood GPD fit of strictly positive excesses.
///
/// Nonzero roots of the Grimshaw equation are searched in
/// (-1/max y, 0) and (0, 2 (mean - min) / min^2); each root, the
/// exponential (zeta = 0) solution and the zeta = -1 edge of the parameter
/// space are scored by log-likelihood and the best kept. Identical excesses fall back to the exponential fit with
/// sigma equal to their mean.
inline GpdFit fit_gpd(std::span<const double> excesses) {
  if (excesses.size() < 2) throw ValidationError("fit_gpd needs at least 2 excesses");
  for (double y : excesses)
    if (!(y >= 0.0) || !std::isfinite(y)) throw ValidationError("fit_gpd: excesses must be finite and nonnegative");
  const auto [mn_it, mx_it] = std::minmax_element(excesses.begin(), excesses.end());
  const double ymin = *mn_it, ymax = *mx_it;
  const double mean = std::accumulate(excesses.begin(), excesses.end(), 0.0) / static_cast<double>(excesses.size());
  if (!(ymax > 0.0)) throw ValidationError("fit_gpd: all excesses are zero");

  GpdFit best{0.0, mean, gpd_log_likelihood(excesses, 0.0, mean), GpdFitMethod::Exponential};
  if (ymax - ymin <= 1e-12 * ymax) {
    best.method = GpdFitMethod::DegenerateExponential;
    return best;
  }

  auto consider = [&](double theta) {
    if (!std::isfinite(theta) || theta == 0.0) return;
    double v = 0.0;
    for (double y : excesses) v += std::log1p(theta * y);
    const double zeta = v / static_cast<double>(excesses.size());
    const double sigma = zeta / theta;
    if (!(sigma > 0.0) || !std::isfinite(sigma)) return;
    const double ll = gpd_log_likelihood(excesses, zeta, sigma);
    if (ll > best.log_likelihood) best = GpdFit{zeta, sigma, ll, GpdFitMethod::Grimshaw};
  };

  const double lo = -1.0 / ymax;
  for (double t : detail::grimshaw_roots(excesses, lo, 0.0)) consider(t);
  const double hi = ymin > 0.0 ? 2.0 * (mean - ymin) / (ymin * ymin) : 1e6 / mean;
  if (hi > 0.0) {
    for (double t : detail::grimshaw_roots(excesses, 0.0, hi)) consider(t);
  }
  // Small bounded samples can have the supremum on the zeta = -1 edge.
  const double ll_edge = gpd_log_likelihood(excesses, -1.0, ymax);
  if (ll_edge > best.log_likelihood) best = GpdFit{-1.0, ymax, ll_edge, GpdFitMethod::Boundary};
  return best;
}

/// Threshold between the tail_size-th and (tail_size+1)-th largest errors.
/// When those tie, the cut moves down to the next strictly smaller value so
/// every excess stays positive.
inline double tail_threshold(std::vector<double> sorted_desc, std::size_t tail_size) {
  const double kth = sorted_desc[tail_size - 1];
  for (std::size_t i = tail_size; i < sorted_desc.size(); ++i) {
    if (sorted_desc[i] < kth) return 0.5 * (kth + sorted_desc[i]);
  }
  return kth - std::max(1e-12, 1e-9 * std::abs(kth));
}

/// Fits the tail of a set of reconstruction errors.
inline TailModel fit_gpd_tail(std::span<const double> errors, std::size_t tail_size = 20, double tau = 0.5) {
  if (tail_size < 2) throw ValidationError("tail_size must be at least 2");
  if (errors.size() < tail_size + 1) {
    throw ValidationError("fit_gpd_tail needs at least tail_size + 1 = " + std::to_string(tail_size + 1) +
                          " errors, got " + std::to_string(errors.size()));
  }
  std::vector<double> sorted(errors.begin(), errors.end());
  for (double r : sorted)
    if (!(r >= 0.0) || !std::isfinite(r)) throw ValidationError("reconstruction errors must be finite and nonnegative");
  std::sort(sorted.begin(), sorted.end(), std::greater<>{});

  TailModel model;
  model.tail_size = tail_size;
  model.tau = tau;
  model.threshold = tail_threshold(sorted, tail_size);
  std::vector<double> excess;
  for (double r : sorted)
    if (r > model.threshold) excess.push_back(r - model.threshold);
  const GpdFit fit = fit_gpd(excess);
  model.zeta = fit.zeta;
  model.sigma = fit.sigma;
  return model;
}

/// Standard GPD CDF. Past the finite upper support endpoint (zeta < 0) the
/// value is 1.
inline double gpd_cdf(double v, const TailModel& model) {
  if (!(v > 0.0)) return 0.0;
  double p;
  if (model.zeta == 0.0) {
    p = -std::expm1(-v / model.sigma);
  } else {
    const double base = 1.0 + model.zeta * v / model.sigma;
    if (base <= 0.0) return 1.0;
    p = 1.0 - std::pow(base, -1.0 / model.zeta);
  }
  return std::clamp(p, 0.0, 1.0);
}

/// P_evt(r): 0 at or below the threshold, GPD CDF of the excess above it.
inline double evt_probability(double r, const TailModel& model) {
  if (r <= model.threshold) return 0.0;
  return gpd_cdf(r - model.threshold, model);
}

/// Sum of absolute elementwise differences.
inline double reconstruction_error(std::span<const double> x, std::span<const double> x_recon) {
  if (x.size() != x_recon.size()) {
    throw DimensionError("reconstruction_error: sizes " + std::to_string(x.size()) + " and " +
                         std::to_string(x_recon.size()) + " differ");
  }
  double r = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) r += std::abs(x[i] - x_recon[i]);
  return r;
}

/// Per-sample reconstruction errors of two same-shape batches.
inline std::vector<double> reconstruction_errors(const Tensor& x, const Tensor& x_recon) {
  if (x.shape() != x_recon.shape()) {
    throw DimensionError("reconstruction_errors: shape mismatch " + shape_string(x.shape()) + " vs " +
                         shape_string(x_recon.shape()));
  }
  const std::size_t n = x.dim(0), vol = x.size() / n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = reconstruction_error(x.data().subspan(i * vol, vol), x_recon.data().subspan(i * vol, vol));
  }
  return out;
}

/// Outcome of the known/unknown test for one sample.
struct Decision {
  std::optional<std::size_t> label;  // set iff Known
  double score = 0.0;                // P_evt(r)
  double recon_error = 0.0;

  bool known() const { return label.has_value(); }
};

/// Known iff P_evt(r) < tau (strict).
inline Decision decide_from(std::size_t predicted_label, double recon_error, const TailModel& model) {
  const double p = evt_probability(recon_error, model);
  Decision d;
  d.score = p;
  d.recon_error = recon_error;
  if (p < model.tau) d.label = predicted_label;
  return d;
}

/// Per-sample classifier output and reconstruction error.
struct ModelOutputs {
  std::vector<std::size_t> predicted;
  std::vector<double> max_probability;
  std::vector<double> recon_errors;  // empty for models without a decoder
};

/// Runs encoder, classifier and (when present) decoder in batches.
inline ModelOutputs run_model(const ModelTriplet& m, const Tensor& x, std::size_t batch = 256) {
  ModelOutputs out;
  const std::size_t n = x.dim(0);
  for (std::size_t b = 0; b < n; b += batch) {
    const Tensor xb = x.slice_rows(b, std::min(n, b + batch));
    const Tensor z = forward_encoder(m, xb);
    const Tensor p = forward_classifier(m, z);
    const auto labels = argmax_rows(p);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      out.predicted.push_back(labels[i]);
      out.max_probability.push_back(p[i * p.dim(1) + labels[i]]);
    }
    if (m.decoder) {
      const Tensor xr = m.recon_encoder ? reconstruct(m, xb) : forward_decoder(m, z);
      const auto r = reconstruction_errors(xb, xr);
      out.recon_errors.insert(out.recon_errors.end(), r.begin(), r.end());
    }
  }
  return out;
}

/// Test-time procedure: z = F(X), p = C(z), X~ = G(z), r = |X - X~|_1,
/// Known(argmax p) iff P_evt(r) < tau, otherwise Unknown. One Decision per
/// row of X.
inline std::vector<Decision> decide(const ModelTriplet& m, const TailModel& model, const Tensor& x) {
  if (!m.decoder) throw ContractError("decide() needs a model with a decoder");
  const ModelOutputs o = run_model(m, x);
  std::vector<Decision> out;
  out.reserve(o.predicted.size());
  for (std::size_t i = 0; i < o.predicted.size(); ++i) out.push_back(decide_from(o.predicted[i], o.recon_errors[i], model));
  return out;
}

// Text form: one "key=value" line per field, doubles printed round-trip exact.

inline std::string tail_model_to_text(const TailModel& t) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "zeta=%.17g\nsigma=%.17g\nthreshold=%.17g\ntail_size=%zu\ntau=%.17g\n", t.zeta,
                t.sigma, t.threshold, t.tail_size, t.tau);
  return buf;
}

inline TailModel tail_model_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("tail model line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&kv](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(std::string("tail model is missing '") + key + "'");
    return it->second;
  };
  TailModel t;
  try {
    t.zeta = std::stod(get("zeta"));
    t.sigma = std::stod(get("sigma"));
    t.threshold = std::stod(get("threshold"));
    t.tail_size = static_cast<std::size_t>(std::stoull(get("tail_size")));
    t.tau = std::stod(get("tau"));
  } catch (const std::logic_error& e) {
    throw ParseError(std::string("tail model has a malformed number: ") + e.what());
  }
  if (!(t.sigma > 0.0)) throw ParseError("tail model sigma must be positive");
  if (kv.size() != 5) throw ParseError("tail model has unexpected keys");
  return t;
}

inline void save_tail_model(const std::string& path, const TailModel& t) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << tail_model_to_text(t);
}

inline TailModel load_tail_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open tail model " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return tail_model_from_text(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace mlosr
