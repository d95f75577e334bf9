#pragma once

// Command implementations behind the `mlosr` executable.
//
// Configs are flat `key = value` files. Keys before the first section header
// apply to every command that accepts them; keys under `[train]`, `[eval]`,
// `[sweep]`, `[reconstruct]` or `[fit-evt]` apply to that command only.
// Command-line overrides win over file values. Every command writes into
// <out_dir>/<command>-<config hash>-s<seed>/ and archives its resolved
// config there as config.ini.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlosr/data.hpp"
#include "mlosr/error.hpp"
#include "mlosr/eval.hpp"
#include "mlosr/evt.hpp"
#include "mlosr/models.hpp"
#include "mlosr/trainer.hpp"

namespace mlosr::cli {

namespace fs = std::filesystem;

enum class Command { train, eval, sweep, reconstruct, fit_evt };

inline const char* command_name(Command c) {
  switch (c) {
    case Command::train: return "train";
    case Command::eval: return "eval";
    case Command::sweep: return "sweep";
    case Command::reconstruct: return "reconstruct";
    case Command::fit_evt: return "fit-evt";
  }
  return "?";
}

inline std::optional<Command> parse_command(std::string_view s) {
  for (Command c : {Command::train, Command::eval, Command::sweep, Command::reconstruct, Command::fit_evt}) {
    if (s == command_name(c)) return c;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Key schema

enum class KeyKind { String, Int, Real, Bool, List, InPath, OutPath };

struct KeySpec {
  const char* name;
  const char* default_value;  // "" = unset
  KeyKind kind;
  unsigned commands;  // bitmask over Command
};

inline constexpr unsigned bit(Command c) { return 1u << static_cast<unsigned>(c); }
inline constexpr unsigned kTrain = bit(Command::train), kEval = bit(Command::eval), kSweep = bit(Command::sweep),
                          kRecon = bit(Command::reconstruct), kFit = bit(Command::fit_evt);
inline constexpr unsigned kAll = kTrain | kEval | kSweep | kRecon | kFit;
inline constexpr unsigned kData = kTrain | kSweep;

// `{K}` in the network strings is replaced by n_known.
inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs{
      {"seed", "0", KeyKind::Int, kAll},
      {"out_dir", "runs", KeyKind::OutPath, kAll},
      // dataset
      {"dataset", "synthetic", KeyKind::String, kData},
      {"synth_classes", "10", KeyKind::Int, kData},
      {"synth_samples", "100", KeyKind::Int, kData},
      {"synth_size", "32", KeyKind::Int, kData},
      {"synth_noise", "0.1", KeyKind::Real, kData},
      {"synth_seed", "0", KeyKind::Int, kData},
      {"idx_images", "", KeyKind::InPath, kData},
      {"idx_labels", "", KeyKind::InPath, kData},
      {"idx_test_images", "", KeyKind::InPath, kData},
      {"idx_test_labels", "", KeyKind::InPath, kData},
      {"image_dir", "", KeyKind::InPath, kData},
      {"dataset_cache", "", KeyKind::InPath, kData},
      {"resize", "0", KeyKind::Int, kData},
      {"grayscale", "false", KeyKind::Bool, kData},
      // split
      {"n_known", "6", KeyKind::Int, kData},
      {"n_unknown", "", KeyKind::Int, kTrain},
      {"train_fraction", "0.8", KeyKind::Real, kData},
      {"max_train_per_class", "", KeyKind::Int, kData},
      {"max_test_per_class", "", KeyKind::Int, kData},
      // model
      {"encoder", "Conv(8)-ReLU-Conv(16)-ReLU-Conv(32)-FC(64)", KeyKind::String, kData},
      {"decoder", "FC(512)-ConvTran(16)-ReLU-ConvTran(8)-ReLU-ConvTran(1)-Tanh", KeyKind::String, kData},
      {"classifier", "FC(64)-FC({K})", KeyKind::String, kData},
      {"method", "mlosr", KeyKind::String, kTrain},
      // training
      {"eta", "0.0003", KeyKind::Real, kData},
      {"batch_size", "64", KeyKind::Int, kData},
      {"lambda_c", "0.5", KeyKind::Real, kData},
      {"lambda_r", "0.5", KeyKind::Real, kData},
      {"max_epochs", "50", KeyKind::Int, kData},
      {"lr_stop_per_pixel", "0.01", KeyKind::Real, kData},
      // tail
      {"tail_size", "20", KeyKind::Int, kData | kFit},
      {"tau", "0.5", KeyKind::Real, kData | kFit},
      {"holdout_fraction", "0", KeyKind::Real, kData},
      // evaluation
      {"run_dir", "", KeyKind::InPath, kEval | kRecon | kFit},
      {"tail", "", KeyKind::InPath, kEval | kRecon},
      {"eval_tau", "", KeyKind::Real, kEval | kRecon},
      {"f1_average", "macro", KeyKind::String, kEval | kSweep},
      {"count", "8", KeyKind::Int, kRecon},
      // sweep
      {"unknown_counts", "15,50,85", KeyKind::List, kSweep},
      {"trials", "5", KeyKind::Int, kSweep},
      {"methods", "mlosr,mlosr_no_evt,dcn_ae,dcn_softmax", KeyKind::List, kSweep},
      {"threads", "1", KeyKind::Int, kSweep},
  };
  return specs;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : key_specs()) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Config files

struct ConfigFile {
  std::map<std::string, std::string> global;
  std::map<std::string, std::map<std::string, std::string>> sections;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::pair<std::string, std::string> split_assignment(std::string_view line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
  std::string key = trim(line.substr(0, eq));
  if (key.empty()) throw ConfigError(where + ": empty key");
  return {std::move(key), trim(line.substr(eq + 1))};
}

/// Parses config text. Unknown keys and keys placed in a section whose
/// command does not accept them are rejected with the key name.
inline ConfigFile parse_config(std::istream& is, const std::string& origin = "config") {
  ConfigFile cfg;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": malformed section header '" + t + "'");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      if (!parse_command(section)) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    auto [key, value] = split_assignment(t, where);
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError(where + ": unknown key '" + key + "'");
    if (section.empty()) {
      cfg.global[key] = value;
    } else {
      if (!(spec->commands & bit(*parse_command(section)))) {
        throw ConfigError(where + ": key '" + key + "' is not accepted by [" + section + "]");
      }
      cfg.sections[section][key] = value;
    }
  }
  return cfg;
}

inline ConfigFile load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  return parse_config(is, path);
}

// ---------------------------------------------------------------------------
// Resolved config

/// Every key accepted by one command, defaults filled in, paths absolute.
class RunConfig {
public:
  Command command = Command::train;
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const {
    const auto it = values.find(key);
    return it != values.end() && !it->second.empty();
  }

  const std::string& str(const std::string& key) const {
    const auto it = values.find(key);
    if (it == values.end()) throw ConfigError("key '" + key + "' is not defined for " + command_name(command));
    return it->second;
  }

  std::string required(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing required key '" + key + "'");
    return str(key);
  }

  std::int64_t integer(const std::string& key) const { return parse_int(key, required(key)); }
  std::size_t count(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw ConfigError("key '" + key + "' must be nonnegative");
    return static_cast<std::size_t>(v);
  }
  std::optional<std::size_t> optional_count(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return count(key);
  }
  double real(const std::string& key) const { return parse_real(key, required(key)); }
  std::optional<double> optional_real(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return real(key);
  }
  bool boolean(const std::string& key) const { return parse_bool(key, required(key)); }
  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }

  /// Canonical `key = value` lines (sorted), also the hashed text.
  std::string canonical() const {
    std::string out = "# mlosr ";
    out += command_name(command);
    out += '\n';
    for (const auto& [k, v] : values) out += k + " = " + v + "\n";
    return out;
  }

  static std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("key '" + key + "': not an integer: " + v);
    return out;
  }
  static double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("key '" + key + "': not a number: " + v);
    return out;
  }
  static bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': not a boolean: " + v);
  }
};

/// Merges defaults, global file keys, the command's section and overrides
/// (in that order), validates value types and makes paths absolute.
inline RunConfig resolve_config(Command cmd, const ConfigFile& file,
                                const std::vector<std::pair<std::string, std::string>>& overrides,
                                const fs::path& base_dir = fs::current_path()) {
  RunConfig rc;
  rc.command = cmd;
  for (const auto& k : key_specs()) {
    if (k.commands & bit(cmd)) rc.values[k.name] = k.default_value;
  }
  for (const auto& [k, v] : file.global) {
    if (rc.values.count(k)) rc.values[k] = v;
  }
  if (const auto it = file.sections.find(command_name(cmd)); it != file.sections.end()) {
    for (const auto& [k, v] : it->second) rc.values[k] = v;
  }
  for (const auto& [k, v] : overrides) {
    const KeySpec* spec = find_key(k);
    if (!spec) throw ConfigError("unknown key '" + k + "'");
    if (!(spec->commands & bit(cmd))) throw ConfigError("key '" + k + "' is not accepted by " + command_name(cmd));
    rc.values[k] = v;
  }
  for (auto& [k, v] : rc.values) {
    if (v.empty()) continue;
    switch (find_key(k)->kind) {
      case KeyKind::Int: RunConfig::parse_int(k, v); break;
      case KeyKind::Real: RunConfig::parse_real(k, v); break;
      case KeyKind::Bool: RunConfig::parse_bool(k, v); break;
      case KeyKind::InPath:
      case KeyKind::OutPath: {
        fs::path p(v);
        if (p.is_relative()) p = base_dir / p;
        v = p.lexically_normal().string();
        if (find_key(k)->kind == KeyKind::InPath && !fs::exists(p)) {
          throw IoError("key '" + k + "': no such file or directory: " + v);
        }
        break;
      }
      default: break;
    }
  }
  return rc;
}

/// Parses a config previously archived by a run (sectionless).
inline RunConfig load_archived_config(const fs::path& path, Command cmd) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open archived config " + path.string());
  RunConfig rc;
  rc.command = cmd;
  std::string line;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto [k, v] = split_assignment(t, path.string());
    rc.values[k] = v;
  }
  return rc;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

inline fs::path run_directory(const RunConfig& rc) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(rc.canonical())));
  return fs::path(rc.str("out_dir")) /
         (std::string(command_name(rc.command)) + "-" + hash + "-s" + std::to_string(rc.seed()));
}

inline fs::path prepare_run_directory(const RunConfig& rc) {
  const fs::path dir = run_directory(rc);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  write_text(dir / "config.ini", rc.canonical());
  return dir;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Building blocks from a resolved config

inline Dataset load_configured(const RunConfig& rc, std::optional<Dataset>* official_test) {
  const std::string kind = rc.str("dataset");
  auto finish = [&](const Dataset& raw) {
    const Shape s = raw.sample_shape();
    if (s.size() != 3) throw DimensionError("dataset samples must be C x H x W");
    const std::size_t r = rc.count("resize");
    return preprocess(raw, r ? std::pair{r, r} : std::pair{s[1], s[2]}, rc.boolean("grayscale"));
  };
  try {
    if (kind == "synthetic") {
      SyntheticConfig sc;
      sc.num_classes = rc.count("synth_classes");
      sc.samples_per_class = rc.count("synth_samples");
      sc.image_size = rc.count("synth_size");
      sc.noise = rc.real("synth_noise");
      sc.seed = static_cast<std::uint64_t>(rc.integer("synth_seed"));
      return generate_synthetic(sc);
    }
    if (kind == "idx") {
      const Dataset train = finish(load_idx(rc.required("idx_images"), rc.required("idx_labels")));
      if (rc.has("idx_test_images") || rc.has("idx_test_labels")) {
        const Dataset test = finish(load_idx(rc.required("idx_test_images"), rc.required("idx_test_labels")));
        if (official_test) *official_test = test;
      }
      return train;
    }
    if (kind == "image_dir") return finish(load_image_dir(rc.required("image_dir")));
    if (kind == "cache") {
      std::ifstream is(rc.required("dataset_cache"), std::ios::binary);
      if (!is) throw IoError("cannot open " + rc.str("dataset_cache"));
      return load_dataset(is);
    }
  } catch (const Error& e) {
    // keep the category, add which dataset failed
    if (e.category() == std::string_view("io")) throw IoError("loading " + kind + " dataset: " + e.what());
    if (e.category() == std::string_view("parse")) throw ParseError("loading " + kind + " dataset: " + e.what());
    throw;
  }
  throw ConfigError("key 'dataset': expected synthetic, idx, image_dir or cache, got '" + kind + "'");
}

inline SplitOptions split_options(const RunConfig& rc) {
  SplitOptions so;
  so.n_known = rc.count("n_known");
  if (rc.values.count("n_unknown")) so.n_unknown = rc.optional_count("n_unknown");
  so.train_fraction = rc.real("train_fraction");
  so.max_train_per_class = rc.optional_count("max_train_per_class");
  so.max_test_per_class = rc.optional_count("max_test_per_class");
  so.seed = rc.seed();
  return so;
}

inline SplitData load_split(const RunConfig& rc) {
  std::optional<Dataset> test;
  const Dataset d = load_configured(rc, &test);
  const SplitOptions so = split_options(rc);
  return test ? sample_split(d, *test, so) : sample_split(d, so);
}

inline std::string substitute_k(std::string s, std::size_t k) {
  const std::string tok = "{K}";
  for (auto pos = s.find(tok); pos != std::string::npos; pos = s.find(tok, pos)) s.replace(pos, tok.size(), std::to_string(k));
  return s;
}

inline ModelConfig model_config(const RunConfig& rc, const Shape& input_shape) {
  const std::size_t k = rc.count("n_known");
  ModelConfig mc;
  mc.encoder = substitute_k(rc.str("encoder"), k);
  mc.decoder = substitute_k(rc.str("decoder"), k);
  mc.classifier = substitute_k(rc.str("classifier"), k);
  mc.input_shape = input_shape;
  return mc;
}

inline TrainConfig train_config(const RunConfig& rc) {
  TrainConfig tc;
  tc.eta = rc.real("eta");
  tc.batch_size = rc.count("batch_size");
  tc.lambda_c = rc.real("lambda_c");
  tc.lambda_r = rc.real("lambda_r");
  tc.max_epochs = rc.count("max_epochs");
  tc.lr_stop_per_pixel = rc.real("lr_stop_per_pixel");
  tc.seed = mix_seed(rc.seed(), 11);
  return tc;
}

inline FitOptions fit_options(const RunConfig& rc) {
  FitOptions f;
  f.tail_size = rc.count("tail_size");
  f.tau = rc.real("tau");
  f.holdout_fraction = rc.real("holdout_fraction");
  return f;
}

inline FMeasureAverage f1_average(const RunConfig& rc) {
  const std::string& a = rc.str("f1_average");
  if (a == "macro") return FMeasureAverage::macro_with_unknown;
  if (a == "macro_known") return FMeasureAverage::macro_known_only;
  if (a == "micro") return FMeasureAverage::micro;
  throw ConfigError("key 'f1_average': expected macro, macro_known or micro, got '" + a + "'");
}

inline nlohmann::json config_json(const RunConfig& rc) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : rc.values) j[k] = v;
  return j;
}

inline void write_values(const fs::path& path, const std::vector<double>& v) {
  std::string text;
  char buf[64];
  for (double x : v) {
    std::snprintf(buf, sizeof buf, "%.17g\n", x);
    text += buf;
  }
  write_text(path, text);
}

inline std::vector<double> read_values(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<double> out;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (!line.empty()) out.push_back(RunConfig::parse_real(path.filename().string(), line));
  }
  return out;
}

inline nlohmann::json split_json(const OpenSetSplit& s) {
  return {{"known_classes", s.known_classes}, {"unknown_classes", s.unknown_classes}, {"seed", s.seed}};
}

// ---------------------------------------------------------------------------
// Trained runs

/// Everything a train run left behind, reloaded for eval/reconstruct/fit-evt.
struct TrainedRun {
  fs::path dir;
  RunConfig config;  // the archived train config
  OpenSetModel model;
};

inline TrainedRun load_trained_run(const fs::path& dir) {
  TrainedRun tr;
  tr.dir = dir;
  const fs::path ckpt = dir / "checkpoint.bin";
  if (!fs::exists(ckpt)) throw IoError("missing checkpoint: " + ckpt.string());
  tr.config = load_archived_config(dir / "config.ini", Command::train);
  tr.model.method = parse_method(tr.config.str("method"));
  tr.model.model = load_checkpoint(ckpt.string());
  tr.model.tail = load_tail_model((dir / "tail.txt").string());
  if (fs::exists(dir / "train_errors.txt")) tr.model.train_errors = read_values(dir / "train_errors.txt");
  return tr;
}

/// Applies `tail` / `eval_tau` overrides from an eval or reconstruct config.
inline void apply_tail_overrides(const RunConfig& rc, OpenSetModel& om) {
  if (rc.has("tail")) om.tail = load_tail_model(rc.str("tail"));
  if (const auto tau = rc.optional_real("eval_tau")) om.tail.tau = *tau;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the run directory it wrote.

inline fs::path cmd_train(const RunConfig& rc) {
  const OpenSetMethod method = parse_method(rc.str("method"));
  const SplitData sd = load_split(rc);
  const ModelConfig mc = model_config(rc, sd.train_known.sample_shape());
  TrainResult history;
  const OpenSetModel om = train_open_set_model(method, mc, sd.train_known, train_config(rc), fit_options(rc), &history);

  const fs::path dir = prepare_run_directory(rc);
  save_checkpoint((dir / "checkpoint.bin").string(), om.model);
  save_tail_model((dir / "tail.txt").string(), om.tail);
  write_loss_csv((dir / "losses.csv").string(), history.history);
  if (!om.train_errors.empty()) write_values(dir / "train_errors.txt", om.train_errors);
  nlohmann::json summary = {{"method", method_name(method)},
                            {"split", split_json(sd.split)},
                            {"train_samples", sd.train_known.size()},
                            {"epochs", history.history.size()},
                            {"stopped_on_reconstruction", history.stopped_on_reconstruction},
                            {"parameters", om.model.encoder.parameter_count() + om.model.classifier.parameter_count() +
                                               (om.model.decoder ? om.model.decoder->parameter_count() : 0) +
                                               (om.model.recon_encoder ? om.model.recon_encoder->parameter_count() : 0)}};
  write_json(dir / "summary.json", summary);
  return dir;
}

inline EvaluationReport evaluate_run(const RunConfig& rc, const TrainedRun& tr) {
  OpenSetModel om = tr.model;
  apply_tail_overrides(rc, om);
  const SplitData sd = load_split(tr.config);
  EvaluateOptions eo;
  eo.average = f1_average(rc);
  eo.split = sd.split;
  EvaluationReport rep = evaluate_open_set(om, sd.test_known, sd.test_unknown, eo);
  rep.config = config_json(rc);
  rep.config["train"] = config_json(tr.config);
  rep.config["tau"] = om.tail.tau;
  return rep;
}

inline fs::path cmd_eval(const RunConfig& rc) {
  const TrainedRun tr = load_trained_run(rc.required("run_dir"));
  const EvaluationReport rep = evaluate_run(rc, tr);
  const fs::path dir = prepare_run_directory(rc);
  write_json(dir / "report.json", to_json(rep));
  return dir;
}

inline fs::path cmd_fit_evt(const RunConfig& rc) {
  const TrainedRun tr = load_trained_run(rc.required("run_dir"));
  if (!tr.model.model.decoder) throw ContractError("fit-evt needs a checkpoint with a decoder");
  const SplitData sd = load_split(tr.config);
  const auto fit_set = split_holdout(sd.train_known, tr.config.real("holdout_fraction"), train_config(tr.config).seed).first;
  const auto errors = training_errors(tr.model.model, fit_set);
  const TailModel tail = fit_gpd_tail(errors, rc.count("tail_size"), rc.real("tau"));
  const fs::path dir = prepare_run_directory(rc);
  save_tail_model((dir / "tail.txt").string(), tail);
  return dir;
}

inline fs::path cmd_reconstruct(const RunConfig& rc) {
  const TrainedRun tr = load_trained_run(rc.required("run_dir"));
  OpenSetModel om = tr.model;
  apply_tail_overrides(rc, om);
  if (!om.model.decoder) throw ContractError("reconstruct needs a checkpoint with a decoder");
  const SplitData sd = load_split(tr.config);
  const std::size_t n = rc.count("count");
  if (sd.test_known.size() == 0 && sd.test_unknown.size() == 0) throw ValidationError("reconstruct: no test inputs");

  const fs::path dir = prepare_run_directory(rc);
  std::string csv = "set,index,label,r,p_evt\n";
  char buf[256];
  auto dump = [&](const Dataset& d, const char* name) {
    const std::size_t take = std::min(n, d.size());
    if (take == 0) return;
    const Tensor x = d.images.slice_rows(0, take);
    const Tensor xr = reconstruct(om.model, x);
    const auto r = reconstruction_errors(x, xr);
    const Shape s = d.sample_shape();
    const std::size_t c = s[0], h = s[1], w = s[2], vol = c * h * w;
    auto to_bytes = [&](const Tensor& t, std::size_t i) {
      // channels averaged to one gray plane
      std::vector<double> px(h * w, 0.0);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < h * w; ++k) px[k] += t[i * vol + ch * h * w + k] / static_cast<double>(c);
      for (double& v : px) v = unit_to_byte(v);
      return px;
    };
    for (std::size_t i = 0; i < take; ++i) {
      std::snprintf(buf, sizeof buf, "%s_%03zu", name, i);
      write_pgm((dir / (std::string(buf) + "_input.pgm")).string(), h, w, to_bytes(x, i));
      write_pgm((dir / (std::string(buf) + "_recon.pgm")).string(), h, w, to_bytes(xr, i));
      std::snprintf(buf, sizeof buf, "%s,%zu,%d,%.17g,%.17g\n", name, i, d.labels[i], r[i],
                    evt_probability(r[i], om.tail));
      csv += buf;
    }
  };
  dump(sd.test_known, "known");
  dump(sd.test_unknown, "unknown");
  write_text(dir / "reconstruction.csv", csv);
  return dir;
}

inline fs::path cmd_sweep(const RunConfig& rc) {
  const Dataset d = load_configured(rc, nullptr);
  SweepConfig sc;
  sc.n_known = rc.count("n_known");
  sc.unknown_counts.clear();
  for (const auto& s : rc.list("unknown_counts")) sc.unknown_counts.push_back(static_cast<std::size_t>(RunConfig::parse_int("unknown_counts", s)));
  sc.trials = rc.count("trials");
  sc.methods.clear();
  for (const auto& s : rc.list("methods")) sc.methods.push_back(parse_method(s));
  if (sc.methods.empty()) throw ConfigError("key 'methods' is empty");
  sc.model = model_config(rc, d.sample_shape());
  sc.train = train_config(rc);
  sc.fit = fit_options(rc);
  sc.train_fraction = rc.real("train_fraction");
  sc.max_train_per_class = rc.optional_count("max_train_per_class");
  sc.max_test_per_class = rc.optional_count("max_test_per_class");
  sc.average = f1_average(rc);
  sc.seed = rc.seed();
  sc.threads = rc.count("threads");
  const auto points = run_openness_sweep(d, sc);

  const fs::path dir = prepare_run_directory(rc);
  std::ostringstream csv;
  write_sweep_csv(csv, points);
  write_text(dir / "sweep.csv", csv.str());
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : points) {
    j.push_back({{"method", method_name(p.method)},
                 {"n_unknown", p.n_unknown},
                 {"openness", p.openness},
                 {"f1", to_json(p.f1)},
                 {"auroc", to_json(p.auroc)}});
  }
  write_json(dir / "sweep.json", {{"points", j}, {"config", config_json(rc)}});
  return dir;
}

inline fs::path run_command(const RunConfig& rc) {
  switch (rc.command) {
    case Command::train: return cmd_train(rc);
    case Command::eval: return cmd_eval(rc);
    case Command::sweep: return cmd_sweep(rc);
    case Command::reconstruct: return cmd_reconstruct(rc);
    case Command::fit_evt: return cmd_fit_evt(rc);
  }
  throw ContractError("unhandled command");
}

/// Process exit code for an error category.
inline int exit_code_for(std::string_view category) {
  if (category == "config") return 2;
  if (category == "parse") return 3;
  if (category == "io") return 4;
  if (category == "validation") return 5;
  if (category == "dimension") return 6;
  if (category == "contract") return 7;
  return 1;
}

/// `error <category>: <message>` on one line.
inline std::string error_line(std::string_view category, std::string message) {
  for (char& c : message) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return "error " + std::string(category) + ": " + message;
}

}  // namespace mlosr::cli
