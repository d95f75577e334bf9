#include <cstdlib>
#include <regex>
#include <sstream>

#include <gtest/gtest.h>

#include "mlosr/cli.hpp"
#include "test_support.hpp"

using namespace mlosr;
using namespace mlosr::cli;
using mlosr::testing::TempDir;
using mlosr::testing::read_file;
using mlosr::testing::write_file;

namespace {

const char* kTinyConfig = R"(# tiny synthetic run
dataset = synthetic
synth_classes = 6
synth_samples = 20
synth_size = 8
n_known = 3
encoder = Conv(2)-ReLU-Conv(3)-FC(6)
decoder = FC(12)-ConvTran(2)-ReLU-ConvTran(1)-Tanh
classifier = FC(5)-ReLU-FC({K})
max_epochs = 2
batch_size = 8
eta = 0.003
tail_size = 5

[sweep]
unknown_counts = 0,1,3
trials = 2

[reconstruct]
count = 2
)";

ConfigFile parse_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is, "test.ini");
}

RunConfig tiny(Command cmd, const TempDir& dir, std::vector<std::pair<std::string, std::string>> extra = {}) {
  extra.emplace_back("out_dir", dir / "runs");
  return resolve_config(cmd, parse_text(kTinyConfig), extra, dir.path());
}

template <typename E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  return "<no exception>";
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(const std::string& args, const TempDir& dir) {
  const std::string out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(MLOSR_CLI_PATH) + " " + args + " >" + out + " 2>" + err;
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

}  // namespace

TEST(ConfigParse, GlobalAndSections) {
  const ConfigFile f = parse_text(kTinyConfig);
  EXPECT_EQ(f.global.at("n_known"), "3");
  EXPECT_EQ(f.global.at("classifier"), "FC(5)-ReLU-FC({K})");
  EXPECT_EQ(f.sections.at("sweep").at("trials"), "2");
  EXPECT_EQ(f.sections.at("reconstruct").at("count"), "2");
}

TEST(ConfigParse, RejectsUnknownKeysWithLocation) {
  const std::string msg = message_of<ConfigError>([] { parse_text("seed = 1\n\nlearning_rate = 0.1\n"); });
  EXPECT_NE(msg.find("learning_rate"), std::string::npos) << msg;
  EXPECT_NE(msg.find("test.ini:3"), std::string::npos) << msg;

  EXPECT_THROW(parse_text("[tune]\n"), ConfigError);
  EXPECT_THROW(parse_text("[train\n"), ConfigError);
  EXPECT_THROW(parse_text("just words\n"), ConfigError);
  EXPECT_THROW(parse_text(" = 3\n"), ConfigError);
  // trials belongs to sweep only
  const std::string sec = message_of<ConfigError>([] { parse_text("[train]\ntrials = 3\n"); });
  EXPECT_NE(sec.find("trials"), std::string::npos) << sec;
  EXPECT_THROW(load_config_file("/nonexistent/run.ini"), IoError);
}

TEST(ConfigResolve, PrecedenceAndFiltering) {
  TempDir dir("cli");
  const ConfigFile f = parse_text("max_epochs = 7\ncount = 3\n[train]\nmax_epochs = 9\n[sweep]\ntrials = 4\n");
  const RunConfig train = resolve_config(Command::train, f, {}, dir.path());
  EXPECT_EQ(train.integer("max_epochs"), 9);
  EXPECT_EQ(train.values.count("count"), 0u);   // reconstruct-only key ignored
  EXPECT_EQ(train.values.count("trials"), 0u);
  EXPECT_EQ(train.real("eta"), 0.0003);          // default
  EXPECT_EQ(train.str("method"), "mlosr");

  const RunConfig sweep = resolve_config(Command::sweep, f, {{"max_epochs", "2"}}, dir.path());
  EXPECT_EQ(sweep.integer("max_epochs"), 2);
  EXPECT_EQ(sweep.count("trials"), 4u);
  EXPECT_EQ(sweep.list("methods"), (std::vector<std::string>{"mlosr", "mlosr_no_evt", "dcn_ae", "dcn_softmax"}));

  const RunConfig recon = resolve_config(Command::reconstruct, f, {}, dir.path());
  EXPECT_EQ(recon.count("count"), 3u);
  EXPECT_EQ(recon.str("out_dir"), (dir.path() / "runs").string());
}

TEST(ConfigResolve, ValidatesValues) {
  TempDir dir("cli");
  const ConfigFile none;
  EXPECT_THROW(resolve_config(Command::train, none, {{"eta", "fast"}}, dir.path()), ConfigError);
  EXPECT_THROW(resolve_config(Command::train, none, {{"batch_size", "6.5"}}, dir.path()), ConfigError);
  EXPECT_THROW(resolve_config(Command::train, none, {{"grayscale", "maybe"}}, dir.path()), ConfigError);
  EXPECT_THROW(resolve_config(Command::train, none, {{"count", "3"}}, dir.path()), ConfigError);
  EXPECT_THROW(resolve_config(Command::train, none, {{"nonsense", "3"}}, dir.path()), ConfigError);
  EXPECT_THROW(resolve_config(Command::eval, none, {{"run_dir", "missing"}}, dir.path()), IoError);
  const RunConfig ev = resolve_config(Command::eval, none, {}, dir.path());
  EXPECT_THROW(ev.required("run_dir"), ConfigError);
  EXPECT_FALSE(ev.optional_real("eval_tau").has_value());
}

TEST(RunDirectory, HashTracksConfig) {
  TempDir dir("cli");
  const RunConfig a = tiny(Command::train, dir), b = tiny(Command::train, dir);
  EXPECT_EQ(run_directory(a), run_directory(b));
  const RunConfig c = tiny(Command::train, dir, {{"eta", "0.004"}});
  EXPECT_NE(run_directory(a), run_directory(c));
  const RunConfig s = tiny(Command::train, dir, {{"seed", "12"}});
  EXPECT_TRUE(std::regex_match(run_directory(s).filename().string(), std::regex("train-[0-9a-f]{16}-s12")));
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Commands, TrainEvalReconstructFitEvt) {
  TempDir dir("cli");
  const fs::path run = cmd_train(tiny(Command::train, dir));
  for (const char* f : {"checkpoint.bin", "tail.txt", "losses.csv", "train_errors.txt", "summary.json", "config.ini"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  const ModelTriplet m = load_checkpoint((run / "checkpoint.bin").string());
  EXPECT_EQ(m.num_classes, 3u);
  EXPECT_EQ(m.config.input_shape, (Shape{1, 8, 8}));
  const auto summary = nlohmann::json::parse(read_file(run / "summary.json"));
  EXPECT_EQ(summary.at("split").at("known_classes").size(), 3u);
  EXPECT_EQ(summary.at("epochs"), 2);
  EXPECT_EQ(load_tail_model((run / "tail.txt").string()).tail_size, 5u);

  const fs::path ev = cmd_eval(tiny(Command::eval, dir, {{"run_dir", run.string()}}));
  const auto rep = report_from_json(nlohmann::json::parse(read_file(ev / "report.json")));
  EXPECT_EQ(rep.method, "mlosr");
  EXPECT_EQ(rep.known_classes.size(), 3u);
  EXPECT_EQ(rep.unknown_classes.size(), 3u);
  EXPECT_EQ(*rep.openness, openness_for(3, 3));
  EXPECT_TRUE(rep.auroc.has_value());
  EXPECT_EQ(rep.known_test, 3u * 4u);     // 20% of each known class
  EXPECT_EQ(rep.unknown_test, 3u * 20u);  // every sample of each unknown class
  EXPECT_EQ(rep.config.at("train").at("n_known"), "3");

  const fs::path rc = cmd_reconstruct(tiny(Command::reconstruct, dir, {{"run_dir", run.string()}}));
  for (const char* f : {"known_000_input.pgm", "known_001_recon.pgm", "unknown_001_input.pgm"})
    EXPECT_TRUE(fs::exists(rc / f)) << f;
  EXPECT_FALSE(fs::exists(rc / "known_002_input.pgm"));
  const Image img = read_pnm((rc / "known_000_recon.pgm").string());
  EXPECT_EQ(img.height, 8u);
  const std::string csv = read_file(rc / "reconstruction.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "set,index,label,r,p_evt");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);

  const fs::path fe = cmd_fit_evt(tiny(Command::fit_evt, dir, {{"run_dir", run.string()}, {"tail_size", "8"}, {"tau", "0.3"}}));
  const TailModel refit = load_tail_model((fe / "tail.txt").string());
  EXPECT_EQ(refit.tail_size, 8u);
  EXPECT_EQ(refit.tau, 0.3);
  // the refit tail plugs back into eval
  const fs::path ev2 = cmd_eval(tiny(Command::eval, dir, {{"run_dir", run.string()}, {"tail", (fe / "tail.txt").string()}}));
  EXPECT_EQ(nlohmann::json::parse(read_file(ev2 / "report.json")).at("config").at("tau"), 0.3);
}

TEST(Commands, EvalTauIsMonotone) {
  TempDir dir("cli");
  const fs::path run = cmd_train(tiny(Command::train, dir));
  std::size_t prev_known = 0;
  for (const char* tau : {"0", "0.2", "0.5", "0.8", "1"}) {
    const TrainedRun tr = load_trained_run(run);
    const EvaluationReport rep = evaluate_run(tiny(Command::eval, dir, {{"run_dir", run.string()}, {"eval_tau", tau}}), tr);
    EXPECT_GE(rep.predicted_known, prev_known) << tau;
    prev_known = rep.predicted_known;
    if (std::string(tau) == "0") {
      EXPECT_EQ(rep.predicted_known, 0u);
    }
  }
}

TEST(Commands, ClassifierOnlyCheckpoint) {
  TempDir dir("cli");
  const fs::path run = cmd_train(tiny(Command::train, dir, {{"method", "dcn_softmax"}}));
  EXPECT_FALSE(load_checkpoint((run / "checkpoint.bin").string()).decoder.has_value());
  EXPECT_FALSE(fs::exists(run / "train_errors.txt"));
  const fs::path ev = cmd_eval(tiny(Command::eval, dir, {{"run_dir", run.string()}}));
  const auto rep = nlohmann::json::parse(read_file(ev / "report.json"));
  EXPECT_EQ(rep.at("method"), "dcn_softmax");
  EXPECT_TRUE(rep.at("auroc_recon_error").is_null());
  EXPECT_THROW(cmd_reconstruct(tiny(Command::reconstruct, dir, {{"run_dir", run.string()}})), ContractError);
  EXPECT_THROW(cmd_fit_evt(tiny(Command::fit_evt, dir, {{"run_dir", run.string()}})), ContractError);
}

TEST(Commands, TrainAndEvalAreReproducible) {
  TempDir dir("cli");
  const RunConfig rc = tiny(Command::train, dir, {{"method", "dcn_ae"}});
  const fs::path run = cmd_train(rc);
  const std::string ckpt = read_file(run / "checkpoint.bin"), tail = read_file(run / "tail.txt");
  const fs::path ev = cmd_eval(tiny(Command::eval, dir, {{"run_dir", run.string()}}));
  const std::string report = read_file(ev / "report.json");

  fs::remove_all(run);
  fs::remove_all(ev);
  EXPECT_EQ(cmd_train(rc), run);
  EXPECT_EQ(read_file(run / "checkpoint.bin"), ckpt);
  EXPECT_EQ(read_file(run / "tail.txt"), tail);
  cmd_eval(tiny(Command::eval, dir, {{"run_dir", run.string()}}));
  EXPECT_EQ(read_file(ev / "report.json"), report);
}

TEST(Commands, Sweep) {
  TempDir dir("cli");
  const fs::path sw = cmd_sweep(tiny(Command::sweep, dir, {{"methods", "mlosr,dcn_softmax"}}));
  const std::string csv = read_file(sw / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 3);
  const auto j = nlohmann::json::parse(read_file(sw / "sweep.json"));
  ASSERT_EQ(j.at("points").size(), 6u);
  EXPECT_EQ(j.at("points")[0].at("f1").at("values").size(), 2u);
  EXPECT_EQ(j.at("points")[0].at("openness"), 0.0);

  EXPECT_THROW(cmd_sweep(tiny(Command::sweep, dir, {{"methods", "mlosr,openmax"}})), ValidationError);
  EXPECT_THROW(cmd_sweep(tiny(Command::sweep, dir, {{"unknown_counts", "2,9"}})), ValidationError);
  EXPECT_THROW(cmd_sweep(tiny(Command::sweep, dir, {{"f1_average", "weighted"}})), ConfigError);
}

TEST(Commands, BrokenRuns) {
  TempDir dir("cli");
  fs::create_directories(dir.path() / "empty");
  const std::string msg = message_of<IoError>(
      [&] { cmd_eval(tiny(Command::eval, dir, {{"run_dir", (dir.path() / "empty").string()}})); });
  EXPECT_NE(msg.find("missing checkpoint"), std::string::npos) << msg;

  const fs::path run = cmd_train(tiny(Command::train, dir));
  write_file(run / "checkpoint.bin", "not a checkpoint");
  EXPECT_THROW(cmd_eval(tiny(Command::eval, dir, {{"run_dir", run.string()}})), ParseError);
}

TEST(Binary, ExitCodesAndErrorLines) {
  TempDir dir("cli");
  write_file(dir.path() / "tiny.ini", kTinyConfig);
  const std::string cfg = "-c " + (dir / "tiny.ini") + " --out " + (dir / "runs");

  const CliResult ok = run_cli("train " + cfg + " --seed 3 --tail-size 6", dir);
  ASSERT_EQ(ok.code, 0) << ok.err;
  std::string run = ok.out.substr(0, ok.out.find('\n'));
  EXPECT_TRUE(fs::exists(fs::path(run) / "checkpoint.bin")) << run;
  EXPECT_EQ(load_tail_model((fs::path(run) / "tail.txt").string()).tail_size, 6u);

  const CliResult ev = run_cli("eval " + cfg + " --run " + run + " --tau 0.25", dir);
  ASSERT_EQ(ev.code, 0) << ev.err;
  const std::string ev_dir = ev.out.substr(0, ev.out.find('\n'));
  EXPECT_EQ(nlohmann::json::parse(read_file(fs::path(ev_dir) / "report.json")).at("config").at("tau"), 0.25);

  struct Case {
    std::string args;
    int code;
    std::string category;
  };
  write_file(dir.path() / "bad.ini", "epochs = 3\n");
  const Case cases[] = {
      {"", 2, "config"},
      {"train --bogus-flag", 2, "config"},
      {"train -c " + (dir / "bad.ini"), 2, "config"},
      {"train --set eta", 2, "config"},
      {"train -c " + (dir / "missing.ini"), 4, "io"},
      {"eval " + cfg + " --run " + (dir / "nowhere"), 4, "io"},
      {"train " + cfg + " --set n_known=9", 5, "validation"},
      {"train " + cfg + " --set 'encoder=Conv(2)-Blur(3)'", 3, "parse"},
      {"train " + cfg + " --set method=dcn_ae --set 'decoder=FC(12)-ConvTran(1)'", 3, "parse"},
  };
  for (const Case& c : cases) {
    const CliResult r = run_cli(c.args, dir);
    EXPECT_EQ(r.code, c.code) << c.args << "\n" << r.err;
    EXPECT_EQ(r.err.rfind("error " + c.category + ": ", 0), 0u) << c.args << "\n" << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  }
}
