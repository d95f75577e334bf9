#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "mlosr/data.hpp"
#include "mlosr/trainer.hpp"
#include "test_support.hpp"

using namespace mlosr;
using mlosr::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

void write_idx(const TempDir& dir, std::uint32_t n_images, std::uint32_t n_labels, std::size_t payload_images,
               std::uint32_t image_magic = 0x803) {
  std::string img = be32(image_magic) + be32(n_images) + be32(3) + be32(2);
  for (std::size_t i = 0; i < payload_images * 6; ++i) img += static_cast<char>(i % 256);
  mlosr::testing::write_file(dir / "img", img);
  std::string lab = be32(0x801) + be32(n_labels);
  for (std::uint32_t i = 0; i < n_labels; ++i) lab += static_cast<char>(i % 10);
  mlosr::testing::write_file(dir / "lab", lab);
}

void write_pnm(const fs::path& p, const std::string& magic, std::size_t w, std::size_t h, std::size_t ch,
               unsigned char value) {
  std::ostringstream os;
  os << magic << "\n# comment\n" << w << " " << h << "\n255\n";
  os << std::string(w * h * ch, static_cast<char>(value));
  mlosr::testing::write_file(p, os.str());
}

}  // namespace

TEST(LoadIdx, ParsesHeaderAndPixels) {
  TempDir dir("idx");
  write_idx(dir, 4, 4, 4);
  const Dataset d = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(d.images.shape(), (Shape{4, 1, 3, 2}));
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(d.images[7], 7.0);  // raw bytes, unnormalised
}

TEST(LoadIdx, BundledMnistSubset) {
  const std::string root = std::string(MLOSR_SOURCE_DIR) + "/data/mnist-5k/";
  const Dataset d = load_idx(root + "images-idx3-ubyte", root + "labels-idx1-ubyte");
  EXPECT_EQ(d.images.shape(), (Shape{5000, 1, 28, 28}));
  std::vector<int> per_class(10, 0);
  for (int l : d.labels) per_class.at(static_cast<std::size_t>(l))++;
  for (int c : per_class) EXPECT_EQ(c, 500);
}

TEST(LoadIdx, Errors) {
  TempDir dir("idx_err");
  write_idx(dir, 4, 4, 4, 0x802);
  try {
    load_idx(dir / "img", dir / "lab");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("0x00000803"), std::string::npos) << e.what();
  }
  write_idx(dir, 4, 4, 3);
  try {
    load_idx(dir / "img", dir / "lab");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  write_idx(dir, 4, 5, 4);
  EXPECT_THROW(load_idx(dir / "img", dir / "lab"), ParseError);
  EXPECT_THROW(load_idx(dir / "missing", dir / "lab"), IoError);
}

TEST(ImageDir, ThreeClassesTwoImagesEach) {
  TempDir dir("imgdir");
  for (const char* c : {"b_class", "a_class", "c_class"}) {
    fs::create_directories(dir.path() / c);
    write_pnm(dir.path() / c / "0.pgm", "P5", 4, 3, 1, 10);
    write_pnm(dir.path() / c / "1.pgm", "P5", 4, 3, 1, 20);
  }
  const Dataset d = load_image_dir(dir.path().string());
  EXPECT_EQ(d.size(), 6u);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 0, 1, 1, 2, 2}));
  EXPECT_EQ(d.class_names, (std::vector<std::string>{"a_class", "b_class", "c_class"}));
  EXPECT_EQ(d.images.shape(), (Shape{6, 1, 3, 4}));
}

TEST(ImageDir, AcceptsP5AndP6) {
  TempDir dir("pnm");
  write_pnm(dir.path() / "g.pgm", "P5", 2, 2, 1, 7);
  write_pnm(dir.path() / "c.ppm", "P6", 2, 2, 3, 9);
  const Image g = read_pnm(dir / "g.pgm");
  const Image c = read_pnm(dir / "c.ppm");
  EXPECT_EQ(g.channels, 1u);
  EXPECT_EQ(c.channels, 3u);
  EXPECT_EQ(c.pixels.size(), 12u);
  EXPECT_EQ(c.pixels[11], 9.0);
  mlosr::testing::write_file(dir.path() / "bad.pgm", "P2\n2 2\n255\n0 0 0 0");
  EXPECT_THROW(read_pnm(dir / "bad.pgm"), ParseError);
}

TEST(ImageDir, Errors) {
  TempDir dir("imgdir_err");
  fs::create_directories(dir.path() / "a");
  fs::create_directories(dir.path() / "empty");
  write_pnm(dir.path() / "a" / "0.pgm", "P5", 4, 4, 1, 1);
  try {
    load_image_dir(dir.path().string());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("empty"), std::string::npos) << e.what();
  }
  fs::remove_all(dir.path() / "empty");
  fs::create_directories(dir.path() / "b");
  write_pnm(dir.path() / "b" / "0.pgm", "P5", 5, 4, 1, 1);
  EXPECT_THROW(load_image_dir(dir.path().string()), IoError);
  const Dataset resized = load_image_dir(dir.path().string(), std::pair<std::size_t, std::size_t>{8, 8});
  EXPECT_EQ(resized.images.shape(), (Shape{2, 1, 8, 8}));
}

TEST(Preprocess, LinearMapAndShapes) {
  EXPECT_EQ(byte_to_unit(0), -1.0);
  EXPECT_EQ(byte_to_unit(255), 1.0);
  EXPECT_EQ(byte_to_unit(127.5), 0.0);
  EXPECT_EQ(unit_to_byte(-1.0), 0.0);
  EXPECT_EQ(unit_to_byte(1.0), 255.0);

  Dataset d;
  d.images = Tensor({1, 3, 128, 128}, 0.0);
  Rng rng(1);
  for (double& v : d.images.values()) v = std::floor(rng.uniform(0, 256));
  d.labels = {0};
  const Dataset out = preprocess(d, {64, 64}, true);
  EXPECT_EQ(out.images.shape(), (Shape{1, 1, 64, 64}));
  const auto [lo, hi] = std::minmax_element(out.images.values().begin(), out.images.values().end());
  EXPECT_GE(*lo, -1.0);
  EXPECT_LE(*hi, 1.0);
  EXPECT_THROW(preprocess(d, {0, 64}, true), ValidationError);
}

TEST(Preprocess, GrayInputKeepsItsValue) {
  Dataset d;
  d.images = Tensor({1, 3, 2, 2}, 51.0);
  d.labels = {0};
  const Dataset out = preprocess(d, {2, 2}, true);
  for (double v : out.images.values()) EXPECT_NEAR(v, byte_to_unit(51.0), 1e-12);
}

TEST(BilinearResize, IdentityAndConstant) {
  const std::vector<double> src{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(bilinear_resize(src, 1, 2, 3, 2, 3), src);
  const std::vector<double> flat(16, 3.0);
  for (double v : bilinear_resize(flat, 1, 4, 4, 7, 5)) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(SampleSplit, HundredClassesFifteenKnown) {
  SyntheticConfig sc;
  sc.num_classes = 100;
  sc.samples_per_class = 5;
  sc.image_size = 8;
  const Dataset d = generate_synthetic(sc);
  SplitOptions opt;
  opt.n_known = 15;
  opt.seed = 42;
  const SplitData s = sample_split(d, opt);
  EXPECT_EQ(s.split.known_classes.size(), 15u);
  EXPECT_EQ(s.split.unknown_classes.size(), 85u);
  std::set<int> known(s.split.known_classes.begin(), s.split.known_classes.end());
  for (int u : s.split.unknown_classes) EXPECT_EQ(known.count(u), 0u);

  std::set<int> relabeled;
  for (const auto& [orig, lbl] : s.split.relabel) relabeled.insert(lbl);
  EXPECT_EQ(relabeled.size(), 15u);
  EXPECT_EQ(*relabeled.begin(), 0);
  EXPECT_EQ(*relabeled.rbegin(), 14);
  for (int l : s.train_known.labels) EXPECT_TRUE(l >= 0 && l < 15);
  for (int l : s.test_unknown.labels) EXPECT_EQ(l, kUnknownLabel);
  EXPECT_EQ(s.test_unknown.size(), 85u * 5u);
  EXPECT_EQ(s.train_known.size() + s.test_known.size(), 15u * 5u);
  EXPECT_EQ(s.train_known.size(), 15u * 4u);  // 80/20

  const SplitData again = sample_split(d, opt);
  EXPECT_EQ(again.split.known_classes, s.split.known_classes);
  EXPECT_EQ(again.train_known, s.train_known);
  opt.seed = 43;
  EXPECT_NE(sample_split(d, opt).split.known_classes, s.split.known_classes);
}

TEST(SampleSplit, NoUnknownLeakIntoTraining) {
  SyntheticConfig sc;
  sc.num_classes = 12;
  sc.samples_per_class = 6;
  sc.image_size = 8;
  Dataset d = generate_synthetic(sc);
  // tag every image with its row index so rows can be traced
  for (std::size_t i = 0; i < d.size(); ++i) d.images[i * 64] = static_cast<double>(i);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SplitOptions opt;
    opt.n_known = 5;
    opt.seed = seed;
    const SplitData s = sample_split(d, opt);
    std::set<int> unknown_rows;
    for (std::size_t i = 0; i < s.test_unknown.size(); ++i)
      unknown_rows.insert(static_cast<int>(s.test_unknown.images[i * 64]));
    for (std::size_t i = 0; i < s.train_known.size(); ++i) {
      const int row = static_cast<int>(s.train_known.images[i * 64]);
      ASSERT_EQ(unknown_rows.count(row), 0u);
      const int orig = d.labels[static_cast<std::size_t>(row)];
      ASSERT_EQ(s.split.relabel.at(orig), s.train_known.labels[i]);
    }
  }
}

TEST(SampleSplit, Errors) {
  SyntheticConfig sc;
  sc.num_classes = 4;
  sc.samples_per_class = 2;
  sc.image_size = 8;
  const Dataset d = generate_synthetic(sc);
  SplitOptions opt;
  opt.n_known = 4;
  EXPECT_THROW(sample_split(d, opt), ValidationError);
  opt.n_known = 2;
  opt.n_unknown = 3;
  EXPECT_THROW(sample_split(d, opt), ValidationError);
}

TEST(SampleSplit, OfficialTrainTestPartition) {
  SyntheticConfig sc;
  sc.num_classes = 6;
  sc.samples_per_class = 4;
  sc.image_size = 8;
  const Dataset train = generate_synthetic(sc);
  sc.samples_per_class = 2;
  sc.seed = 9;
  const Dataset test = generate_synthetic(sc);
  SplitOptions opt;
  opt.n_known = 4;
  const SplitData s = sample_split(train, test, opt);
  EXPECT_EQ(s.train_known.size(), 16u);
  EXPECT_EQ(s.test_known.size(), 8u);
  EXPECT_EQ(s.test_unknown.size(), 4u);
}

TEST(Synthetic, ShapesAndNoise) {
  SyntheticConfig sc;
  sc.num_classes = 10;
  sc.samples_per_class = 100;
  sc.image_size = 32;
  const Dataset d = generate_synthetic(sc);
  EXPECT_EQ(d.size(), 1000u);
  EXPECT_EQ(d.images.shape(), (Shape{1000, 1, 32, 32}));
  const auto [lo, hi] = std::minmax_element(d.images.values().begin(), d.images.values().end());
  EXPECT_GE(*lo, -1.0);
  EXPECT_LE(*hi, 1.0);
  EXPECT_EQ(generate_synthetic(sc), d);

  sc.noise = 0.0;
  sc.num_classes = 100;
  sc.samples_per_class = 3;
  const Dataset clean = generate_synthetic(sc);
  std::set<std::vector<double>> templates;
  for (std::size_t c = 0; c < 100; ++c) {
    const Tensor a = clean.images.slice_rows(3 * c, 3 * c + 1), b = clean.images.slice_rows(3 * c + 2, 3 * c + 3);
    EXPECT_EQ(a, b);
    templates.insert(a.values());
  }
  EXPECT_EQ(templates.size(), 100u) << "every class pattern is distinct";
}

TEST(Synthetic, TinyClassifierSeparatesTwoClasses) {
  SyntheticConfig sc;
  sc.num_classes = 2;
  sc.samples_per_class = 40;
  sc.image_size = 16;
  const Dataset train_set = generate_synthetic(sc);
  sc.seed = 99;
  const Dataset test_set = generate_synthetic(sc);

  ModelConfig mc;
  mc.encoder = "Conv(4)-FC(8)";
  mc.decoder = "FC(256)-ConvTran(1)-Tanh";
  mc.classifier = "FC(2)";
  mc.input_shape = {1, 16, 16};
  ModelTriplet m = build_model(mc, 1, DecoderLayout::None);
  TrainConfig tc;
  tc.eta = 1e-2;
  tc.max_epochs = 20;
  train(m, train_set, tc, TrainingMode::dcn_softmax);
  const auto pred = argmax_rows(forward_classifier(m, forward_encoder(m, test_set.images)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += static_cast<int>(pred[i]) == test_set.labels[i];
  EXPECT_EQ(correct, pred.size());
}

TEST(DatasetCache, RoundTripIsByteIdentical) {
  SyntheticConfig sc;
  sc.num_classes = 3;
  sc.samples_per_class = 2;
  sc.image_size = 8;
  Dataset d = generate_synthetic(sc);
  d.labels[1] = kUnknownLabel;
  std::stringstream a;
  save_dataset(a, d);
  const Dataset back = load_dataset(a);
  EXPECT_EQ(back, d);
  std::stringstream b;
  save_dataset(b, back);
  EXPECT_EQ(a.str(), b.str());

  std::stringstream bad(std::string("MLOSRDSX") + a.str().substr(8));
  EXPECT_THROW(load_dataset(bad), ParseError);
  std::stringstream cut(a.str().substr(0, 40));
  EXPECT_THROW(load_dataset(cut), ParseError);
}
