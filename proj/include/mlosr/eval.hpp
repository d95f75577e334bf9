#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlosr/data.hpp"
#include "mlosr/error.hpp"
#include "mlosr/evt.hpp"
#include "mlosr/models.hpp"
#include "mlosr/random.hpp"
#include "mlosr/trainer.hpp"

namespace mlosr {

/// Openness = 1 - sqrt(2 n_train / (n_test + n_target)).
///
/// With K known and U unknown classes the call is openness(K, K + U, K):
/// n_train and n_target count known classes and n_test counts every class
/// seen at test time.
inline double openness(std::size_t n_train, std::size_t n_test, std::size_t n_target) {
  if (n_train == 0 || n_test == 0 || n_target == 0) throw ValidationError("openness: class counts must be positive");
  if (2 * n_train > n_test + n_target) {
    throw ValidationError("openness: 2*n_train (" + std::to_string(2 * n_train) + ") exceeds n_test + n_target (" +
                          std::to_string(n_test + n_target) + "); check argument order");
  }
  return 1.0 - std::sqrt(2.0 * static_cast<double>(n_train) / static_cast<double>(n_test + n_target));
}

inline double openness_for(std::size_t n_known, std::size_t n_unknown) {
  return openness(n_known, n_known + n_unknown, n_known);
}

enum class FMeasureAverage {
  macro_with_unknown,  // macro F1 over K known classes + Unknown
  macro_known_only,    // macro F1 over the K known classes
  micro,               // micro F1 over K + 1 classes (= accuracy)
};

struct FMeasure {
  double value = 0.0;
  std::vector<std::optional<double>> per_class;  // K + 1 entries; nullopt = absent from truth and prediction
};

/// Open-set F-measure from (K+1)x(K+1) confusion counts. Labels are
/// 0..K-1 for known classes and kUnknownLabel for Unknown, on both sides.
/// Classes absent from truth and prediction are skipped in macro averages.
inline FMeasure f_measure(std::span<const int> predicted, std::span<const int> truth, std::size_t num_known,
                          FMeasureAverage average = FMeasureAverage::macro_with_unknown) {
  if (predicted.size() != truth.size()) throw ValidationError("f_measure: prediction and truth lengths differ");
  if (predicted.empty()) throw ValidationError("f_measure: empty input");
  const std::size_t k1 = num_known + 1;
  auto index = [num_known](int label) -> std::size_t {
    if (label == kUnknownLabel) return num_known;
    if (label < 0 || static_cast<std::size_t>(label) >= num_known) {
      throw ValidationError("f_measure: label " + std::to_string(label) + " outside 0.." +
                            std::to_string(num_known - 1) + " and not Unknown");
    }
    return static_cast<std::size_t>(label);
  };
  std::vector<std::size_t> confusion(k1 * k1, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) ++confusion[index(truth[i]) * k1 + index(predicted[i])];

  FMeasure out;
  out.per_class.resize(k1);
  std::size_t correct = 0;
  for (std::size_t c = 0; c < k1; ++c) {
    std::size_t tp = confusion[c * k1 + c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < k1; ++o) {
      if (o == c) continue;
      fp += confusion[o * k1 + c];
      fn += confusion[c * k1 + o];
    }
    correct += tp;
    if (tp + fp + fn == 0) continue;
    const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    out.per_class[c] = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }

  if (average == FMeasureAverage::micro) {
    out.value = static_cast<double>(correct) / static_cast<double>(truth.size());
    return out;
  }
  const std::size_t limit = average == FMeasureAverage::macro_known_only ? num_known : k1;
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < limit; ++c) {
    if (out.per_class[c]) {
      s += *out.per_class[c];
      ++n;
    }
  }
  out.value = n ? s / static_cast<double>(n) : 0.0;
  return out;
}

inline std::vector<int> decision_labels(std::span<const Decision> decisions) {
  std::vector<int> out;
  out.reserve(decisions.size());
  for (const auto& d : decisions) out.push_back(d.known() ? static_cast<int>(*d.label) : kUnknownLabel);
  return out;
}

inline FMeasure f_measure(std::span<const Decision> decisions, std::span<const int> truth, std::size_t num_known,
                          FMeasureAverage average = FMeasureAverage::macro_with_unknown) {
  const auto pred = decision_labels(decisions);
  return f_measure(pred, truth, num_known, average);
}

/// Probability that a random known score exceeds a random unknown score,
/// ties counted as one half (Mann-Whitney U / (n_known n_unknown)).
/// Higher scores mean "more known".
inline double auroc(std::span<const double> known_scores, std::span<const double> unknown_scores) {
  if (known_scores.empty() || unknown_scores.empty()) throw ValidationError("auroc: both score lists must be non-empty");
  struct Item {
    double score;
    bool known;
  };
  std::vector<Item> all;
  all.reserve(known_scores.size() + unknown_scores.size());
  for (double s : known_scores) all.push_back({s, true});
  for (double s : unknown_scores) all.push_back({s, false});
  for (const auto& it : all)
    if (std::isnan(it.score)) throw ValidationError("auroc: NaN score");
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Twice the rank sum of known scores, with midranks for ties; kept in
  // integers so the result is exact.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t known_in_group = 0;
    while (j < all.size() && all[j].score == all[i].score) known_in_group += all[j++].known;
    // ranks i+1 .. j, midrank (i + 1 + j) / 2
    twice_rank_sum += known_in_group * (i + 1 + j);
    i = j;
  }
  const std::uint64_t nk = known_scores.size(), nu = unknown_scores.size();
  const std::uint64_t twice_u = twice_rank_sum - nk * (nk + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(nk) * static_cast<double>(nu));
}

/// "More known" score derived from P_evt for ranking. Above the tail
/// threshold it is 1 - P_evt(r); below it P_evt is identically 0, so the
/// score keeps decreasing with r on [1, 2] instead of tying at 1.
inline double known_score(double r, const TailModel& tail) {
  if (r > tail.threshold) return 1.0 - evt_probability(r, tail);
  const double scale = tail.threshold > 0.0 ? tail.threshold : 1.0;
  return 1.0 + (tail.threshold - r) / scale;
}

// ---------------------------------------------------------------------------
// Reports

struct TrialStats {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single trial

  static TrialStats of(std::vector<double> v) {
    TrialStats s;
    s.values = std::move(v);
    if (s.values.empty()) return s;
    s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / static_cast<double>(s.values.size());
    if (s.values.size() > 1) {
      double ss = 0.0;
      for (double x : s.values) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(s.values.size() - 1));
    }
    return s;
  }

  bool operator==(const TrialStats&) const = default;
};

struct EvaluationReport {
  std::string method = "mlosr";
  std::optional<double> openness;  // needs the split's class counts
  double f1 = 0.0;
  std::optional<double> auroc;
  std::optional<std::string> auroc_error;
  std::optional<double> auroc_recon_error;  // AUROC of -r alone
  std::size_t known_test = 0, unknown_test = 0;
  std::size_t predicted_known = 0, predicted_unknown = 0;
  std::optional<double> mean_error_known, mean_error_unknown;
  std::vector<int> known_classes, unknown_classes;
  TrialStats f1_trials, auroc_trials;
  nlohmann::json config = nlohmann::json::object();

  bool operator==(const EvaluationReport&) const = default;
};

inline nlohmann::json to_json(const TrialStats& s) {
  return nlohmann::json{{"values", s.values}, {"mean", s.mean}, {"std", s.std}};
}

inline TrialStats trial_stats_from_json(const nlohmann::json& j) {
  TrialStats s;
  s.values = j.at("values").get<std::vector<double>>();
  s.mean = j.at("mean").get<double>();
  s.std = j.at("std").get<double>();
  return s;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["openness"] = r.openness ? nlohmann::json(*r.openness) : nlohmann::json(nullptr);
  j["f1"] = r.f1;
  j["auroc"] = r.auroc ? nlohmann::json(*r.auroc) : nlohmann::json(nullptr);
  if (r.auroc_error) j["auroc_error"] = *r.auroc_error;
  j["auroc_recon_error"] = r.auroc_recon_error ? nlohmann::json(*r.auroc_recon_error) : nlohmann::json(nullptr);
  j["counts"] = {{"known_test", r.known_test},
                 {"unknown_test", r.unknown_test},
                 {"predicted_known", r.predicted_known},
                 {"predicted_unknown", r.predicted_unknown}};
  j["mean_recon_error"] = {
      {"known", r.mean_error_known ? nlohmann::json(*r.mean_error_known) : nlohmann::json(nullptr)},
      {"unknown", r.mean_error_unknown ? nlohmann::json(*r.mean_error_unknown) : nlohmann::json(nullptr)}};
  j["split"] = {{"known_classes", r.known_classes}, {"unknown_classes", r.unknown_classes}};
  j["trials"] = {{"f1", to_json(r.f1_trials)}, {"auroc", to_json(r.auroc_trials)}};
  j["config"] = r.config;
  return j;
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  EvaluationReport r;
  r.method = j.at("method").get<std::string>();
  r.openness = opt(j.at("openness"));
  r.f1 = j.at("f1").get<double>();
  r.auroc = opt(j.at("auroc"));
  if (j.contains("auroc_error")) r.auroc_error = j.at("auroc_error").get<std::string>();
  r.auroc_recon_error = opt(j.at("auroc_recon_error"));
  const auto& c = j.at("counts");
  r.known_test = c.at("known_test").get<std::size_t>();
  r.unknown_test = c.at("unknown_test").get<std::size_t>();
  r.predicted_known = c.at("predicted_known").get<std::size_t>();
  r.predicted_unknown = c.at("predicted_unknown").get<std::size_t>();
  r.mean_error_known = opt(j.at("mean_recon_error").at("known"));
  r.mean_error_unknown = opt(j.at("mean_recon_error").at("unknown"));
  r.known_classes = j.at("split").at("known_classes").get<std::vector<int>>();
  r.unknown_classes = j.at("split").at("unknown_classes").get<std::vector<int>>();
  r.f1_trials = trial_stats_from_json(j.at("trials").at("f1"));
  r.auroc_trials = trial_stats_from_json(j.at("trials").at("auroc"));
  r.config = j.at("config");
  return r;
}

// ---------------------------------------------------------------------------
// Open-set methods

/// The four open-set rules compared in the ablation.
///
/// mlosr:        Known iff P_evt(r) < tau, GPD tail over training errors.
/// mlosr_no_evt: same model; Unknown iff r > tau * (largest training
///               reconstruction error).
/// dcn_ae:       as mlosr_no_evt, with errors from a separately trained
///               encoder/decoder.
/// dcn_softmax:  Known iff the top softmax probability is >= tau.
enum class OpenSetMethod { mlosr, mlosr_no_evt, dcn_ae, dcn_softmax };

inline const char* method_name(OpenSetMethod m) {
  switch (m) {
    case OpenSetMethod::mlosr: return "mlosr";
    case OpenSetMethod::mlosr_no_evt: return "mlosr_no_evt";
    case OpenSetMethod::dcn_ae: return "dcn_ae";
    case OpenSetMethod::dcn_softmax: return "dcn_softmax";
  }
  return "?";
}

inline OpenSetMethod parse_method(const std::string& s) {
  for (auto m : {OpenSetMethod::mlosr, OpenSetMethod::mlosr_no_evt, OpenSetMethod::dcn_ae, OpenSetMethod::dcn_softmax})
    if (s == method_name(m)) return m;
  throw ValidationError("unknown method '" + s + "' (expected mlosr, mlosr_no_evt, dcn_ae or dcn_softmax)");
}

inline TrainingMode training_mode_for(OpenSetMethod m) {
  switch (m) {
    case OpenSetMethod::mlosr:
    case OpenSetMethod::mlosr_no_evt: return TrainingMode::mlosr;
    case OpenSetMethod::dcn_ae: return TrainingMode::dcn_ae;
    case OpenSetMethod::dcn_softmax: return TrainingMode::dcn_softmax;
  }
  return TrainingMode::mlosr;
}

/// Rejection cutoff of the reconstruction-error baselines: a sample is
/// unknown when its error exceeds `fraction` of the largest training error.
inline double max_error_cutoff(std::span<const double> train_errors, double fraction) {
  if (train_errors.empty()) throw ValidationError("max-error cutoff needs at least one training error");
  return fraction * *std::max_element(train_errors.begin(), train_errors.end());
}

/// A trained model plus whatever its rejection rule was calibrated on.
struct OpenSetModel {
  OpenSetMethod method = OpenSetMethod::mlosr;
  ModelTriplet model;
  TailModel tail;
  std::vector<double> train_errors;  // empty for dcn_softmax
};

inline std::vector<double> training_errors(const ModelTriplet& m, const Dataset& d) {
  return run_model(m, d.images).recon_errors;
}

struct ScoredSample {
  int predicted;        // label or kUnknownLabel
  double known_score;   // higher = more known
  std::optional<double> recon_error;
};

inline std::vector<ScoredSample> score_samples(const OpenSetModel& om, const Tensor& x) {
  const ModelOutputs o = run_model(om.model, x);
  const double tau = om.tail.tau;
  double cutoff = 0.0;
  if (om.method == OpenSetMethod::mlosr_no_evt || om.method == OpenSetMethod::dcn_ae) {
    cutoff = max_error_cutoff(om.train_errors, tau);
  }
  std::vector<ScoredSample> out(o.predicted.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int label = static_cast<int>(o.predicted[i]);
    ScoredSample& s = out[i];
    if (!o.recon_errors.empty()) s.recon_error = o.recon_errors[i];
    switch (om.method) {
      case OpenSetMethod::mlosr: {
        const Decision d = decide_from(o.predicted[i], o.recon_errors[i], om.tail);
        s.predicted = d.known() ? label : kUnknownLabel;
        s.known_score = known_score(o.recon_errors[i], om.tail);
        break;
      }
      case OpenSetMethod::mlosr_no_evt:
      case OpenSetMethod::dcn_ae: {
        s.predicted = o.recon_errors[i] <= cutoff ? label : kUnknownLabel;
        s.known_score = -o.recon_errors[i];
        break;
      }
      case OpenSetMethod::dcn_softmax:
        s.predicted = o.max_probability[i] >= tau ? label : kUnknownLabel;
        s.known_score = o.max_probability[i];
        break;
    }
  }
  return out;
}

struct EvaluateOptions {
  FMeasureAverage average = FMeasureAverage::macro_with_unknown;
  std::optional<OpenSetSplit> split;
};

/// Scores every test sample, then computes F-measure and AUROC. An empty
/// unknown set leaves AUROC unset with an explanatory `auroc_error`.
inline EvaluationReport evaluate_open_set(const OpenSetModel& om, const Dataset& test_known,
                                          const Dataset& test_unknown, const EvaluateOptions& opt = {}) {
  if (test_known.size() == 0 && test_unknown.size() == 0) throw ValidationError("evaluate_open_set: empty test sets");
  EvaluationReport rep;
  rep.method = method_name(om.method);
  const std::size_t k = om.model.num_classes;
  std::vector<int> pred, truth;
  std::vector<double> known_scores, unknown_scores, known_r, unknown_r;
  auto run = [&](const Dataset& d, bool known) {
    if (d.size() == 0) return;
    const auto scored = score_samples(om, d.images);
    for (std::size_t i = 0; i < scored.size(); ++i) {
      const ScoredSample& s = scored[i];
      pred.push_back(s.predicted);
      truth.push_back(known ? d.labels[i] : kUnknownLabel);
      (known ? known_scores : unknown_scores).push_back(s.known_score);
      if (s.recon_error) (known ? known_r : unknown_r).push_back(-*s.recon_error);
    }
  };
  run(test_known, true);
  run(test_unknown, false);

  rep.f1 = f_measure(pred, truth, k, opt.average).value;
  rep.known_test = test_known.size();
  rep.unknown_test = test_unknown.size();
  for (int p : pred) (p == kUnknownLabel ? rep.predicted_unknown : rep.predicted_known)++;
  if (!known_scores.empty() && !unknown_scores.empty()) {
    rep.auroc = auroc(known_scores, unknown_scores);
  } else {
    rep.auroc_error = known_scores.empty() ? "known test set is empty" : "unknown test set is empty";
  }
  if (!known_r.empty() && !unknown_r.empty()) rep.auroc_recon_error = auroc(known_r, unknown_r);
  auto mean_neg = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return -std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.mean_error_known = mean_neg(known_r);
  rep.mean_error_unknown = mean_neg(unknown_r);
  if (opt.split) {
    rep.known_classes = opt.split->known_classes;
    rep.unknown_classes = opt.split->unknown_classes;
    rep.openness = openness_for(opt.split->num_known(), opt.split->num_unknown());
  } else if (test_unknown.size() == 0) {
    rep.openness = 0.0;
  }
  rep.f1_trials = TrialStats::of({rep.f1});
  if (rep.auroc) rep.auroc_trials = TrialStats::of({*rep.auroc});
  return rep;
}

/// Known/unknown evaluation of an MLOSR model with a fitted tail.
inline EvaluationReport evaluate_open_set(const ModelTriplet& m, const TailModel& tail, const Dataset& test_known,
                                          const Dataset& test_unknown, const EvaluateOptions& opt = {}) {
  OpenSetModel om{OpenSetMethod::mlosr, m, tail, {}};
  return evaluate_open_set(om, test_known, test_unknown, opt);
}

/// Holds a training set out for tail fitting when `holdout_fraction` > 0;
/// otherwise the tail is fitted on the training errors themselves.
struct FitOptions {
  std::size_t tail_size = 20;
  double tau = 0.5;
  double holdout_fraction = 0.0;
};

/// Splits `d` into (fit, train) parts with `fraction` of the rows going to the
/// fit part. A zero fraction returns the full set for both.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& d, double fraction, std::uint64_t seed) {
  if (fraction == 0.0) return {d, d};
  if (fraction < 0.0 || fraction >= 1.0) throw ValidationError("holdout_fraction must be in [0, 1)");
  std::vector<std::size_t> rows(d.size());
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng(mix_seed(seed, 77));
  rng.shuffle(std::span<std::size_t>(rows));
  const auto n_fit = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows.size())));
  std::vector<std::size_t> fit_rows(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_fit));
  std::vector<std::size_t> train_rows(rows.begin() + static_cast<std::ptrdiff_t>(n_fit), rows.end());
  std::sort(fit_rows.begin(), fit_rows.end());
  std::sort(train_rows.begin(), train_rows.end());
  return {d.subset(fit_rows), d.subset(train_rows)};
}

/// Trains the model required by `method` and calibrates its rejection rule.
inline OpenSetModel train_open_set_model(OpenSetMethod method, const ModelConfig& mc, const Dataset& train_known,
                                         const TrainConfig& tc, const FitOptions& fit,
                                         TrainResult* history = nullptr) {
  const TrainingMode mode = training_mode_for(method);
  OpenSetModel om;
  om.method = method;
  om.model = build_model(mc, tc.seed, decoder_layout_for(mode));
  const auto [fit_set, train_set] = split_holdout(train_known, fit.holdout_fraction, tc.seed);

  TrainResult tr = train(om.model, train_set, tc, mode);
  if (history) *history = std::move(tr);
  om.tail.tail_size = fit.tail_size;
  om.tail.tau = fit.tau;
  if (mode != TrainingMode::dcn_softmax) {
    om.train_errors = training_errors(om.model, fit_set);
    if (method == OpenSetMethod::mlosr) om.tail = fit_gpd_tail(om.train_errors, fit.tail_size, fit.tau);
  }
  return om;
}

// ---------------------------------------------------------------------------
// Openness sweep

struct SweepConfig {
  std::size_t n_known = 15;
  std::vector<std::size_t> unknown_counts{15, 50, 85};
  std::size_t trials = 5;
  std::vector<OpenSetMethod> methods{OpenSetMethod::mlosr, OpenSetMethod::mlosr_no_evt, OpenSetMethod::dcn_ae,
                                     OpenSetMethod::dcn_softmax};
  ModelConfig model;
  TrainConfig train;
  FitOptions fit;
  double train_fraction = 0.8;
  std::optional<std::size_t> max_train_per_class;
  std::optional<std::size_t> max_test_per_class;
  FMeasureAverage average = FMeasureAverage::macro_with_unknown;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct SweepPoint {
  OpenSetMethod method;
  std::size_t n_unknown;
  double openness;
  TrialStats f1;
  TrialStats auroc;  // empty values when there are no unknowns
};

/// For each trial the split seed is fixed, so known classes and their
/// train/test rows are identical across unknown counts; the unknown
/// classes at count u are the first u of the trial's class permutation.
/// Each method's model is therefore trained once per trial and evaluated
/// at every openness point. Trials may run on several threads; results
/// are gathered by trial index.
inline std::vector<SweepPoint> run_openness_sweep(const Dataset& d, const SweepConfig& cfg) {
  if (cfg.trials == 0) throw ValidationError("sweep needs at least one trial");
  if (cfg.unknown_counts.empty()) throw ValidationError("sweep needs at least one unknown count");
  const std::size_t classes = d.num_classes();
  for (std::size_t u : cfg.unknown_counts) {
    if (cfg.n_known + u > classes) {
      throw ValidationError("insufficient classes: " + std::to_string(cfg.n_known) + " known + " + std::to_string(u) +
                            " unknown requested, dataset has " + std::to_string(classes));
    }
  }
  if (cfg.n_known >= classes) throw ValidationError("insufficient classes for " + std::to_string(cfg.n_known) + " known");

  const std::size_t nm = cfg.methods.size(), nu = cfg.unknown_counts.size();
  // results[trial][method][unknown] = {f1, auroc?}
  std::vector<std::vector<std::vector<std::pair<double, std::optional<double>>>>> results(
      cfg.trials, std::vector<std::vector<std::pair<double, std::optional<double>>>>(nm, std::vector<std::pair<double, std::optional<double>>>(nu)));

  auto run_trial = [&](std::size_t trial) {
    const std::uint64_t trial_seed = mix_seed(cfg.seed, 500 + trial);
    SplitOptions so;
    so.n_known = cfg.n_known;
    so.train_fraction = cfg.train_fraction;
    so.max_train_per_class = cfg.max_train_per_class;
    so.max_test_per_class = cfg.max_test_per_class;
    so.seed = trial_seed;
    const SplitData full = sample_split(d, so);  // every remaining class unknown
    const auto by_class = detail::rows_by_class(d);
    // order unknown classes by the trial's permutation
    std::vector<int> perm(full.split.unknown_classes);
    Rng prng(mix_seed(trial_seed, 3));
    prng.shuffle(std::span<int>(perm));

    for (std::size_t mi = 0; mi < nm; ++mi) {
      TrainConfig tc = cfg.train;
      tc.seed = mix_seed(trial_seed, 900 + static_cast<std::uint64_t>(cfg.methods[mi]));
      const OpenSetModel om = train_open_set_model(cfg.methods[mi], cfg.model, full.train_known, tc, cfg.fit);
      for (std::size_t ui = 0; ui < nu; ++ui) {
        const std::size_t u = cfg.unknown_counts[ui];
        std::vector<int> chosen(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(u));
        std::sort(chosen.begin(), chosen.end());
        Dataset unknown;
        if (u > 0) {
          Rng urng(mix_seed(trial_seed, 4));
          std::vector<std::size_t> pool;
          for (int c : chosen) {
            std::vector<std::size_t> r = by_class.at(c);
            urng.shuffle(std::span<std::size_t>(r));
            const std::size_t take = std::min(r.size(), cfg.max_test_per_class.value_or(r.size()));
            pool.insert(pool.end(), r.begin(), r.begin() + static_cast<std::ptrdiff_t>(take));
          }
          std::sort(pool.begin(), pool.end());
          unknown = detail::relabeled(d, pool, full.split);
        }
        OpenSetSplit split = full.split;
        split.unknown_classes = chosen;
        EvaluateOptions eo;
        eo.average = cfg.average;
        eo.split = split;
        const EvaluationReport rep = evaluate_open_set(om, full.test_known, unknown, eo);
        results[trial][mi][ui] = {rep.f1, rep.auroc};
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, cfg.trials));
  if (threads == 1) {
    for (std::size_t t = 0; t < cfg.trials; ++t) run_trial(t);
  } else {
    std::vector<std::thread> pool;
    std::mutex err_mu;
    std::exception_ptr err;
    std::size_t next = 0;
    std::mutex next_mu;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t t;
          {
            std::lock_guard lock(next_mu);
            if (next >= cfg.trials) return;
            t = next++;
          }
          try {
            run_trial(t);
          } catch (...) {
            std::lock_guard lock(err_mu);
            if (!err) err = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
  }

  std::vector<SweepPoint> out;
  for (std::size_t mi = 0; mi < nm; ++mi) {
    for (std::size_t ui = 0; ui < nu; ++ui) {
      std::vector<double> f1, au;
      for (std::size_t t = 0; t < cfg.trials; ++t) {
        f1.push_back(results[t][mi][ui].first);
        if (results[t][mi][ui].second) au.push_back(*results[t][mi][ui].second);
      }
      out.push_back(SweepPoint{cfg.methods[mi], cfg.unknown_counts[ui], openness_for(cfg.n_known, cfg.unknown_counts[ui]),
                               TrialStats::of(f1), TrialStats::of(au)});
    }
  }
  return out;
}

/// One row per (method, unknown count): "method,n_unknown,openness,f1_mean,f1_std".
inline void write_sweep_csv(std::ostream& os, std::span<const SweepPoint> points) {
  os << "method,n_unknown,openness,f1_mean,f1_std\n";
  char buf[256];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g\n", method_name(p.method), p.n_unknown, p.openness,
                  p.f1.mean, p.f1.std);
    os << buf;
  }
}

}  // namespace mlosr
