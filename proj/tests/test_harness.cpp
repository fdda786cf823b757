#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "dppkit/cli.hpp"
#include "dppkit/train.hpp"

using namespace dppkit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dppkit_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

// Writes an IDX pair of `count` images; image n has every pixel equal to
// (n * 37 + p) % 256 and label n % 10.
void write_idx(const fs::path& images, const fs::path& labels, std::uint32_t count, std::uint32_t label_count,
               std::uint32_t side = 28, std::uint32_t image_magic = 0x803) {
  std::ofstream im(images, std::ios::binary);
  put_be32(im, image_magic);
  put_be32(im, count);
  put_be32(im, side);
  put_be32(im, side);
  for (std::uint32_t n = 0; n < count; ++n)
    for (std::uint32_t p = 0; p < side * side; ++p) im.put(static_cast<char>((n * 37 + p) % 256));
  std::ofstream lb(labels, std::ios::binary);
  put_be32(lb, 0x801);
  put_be32(lb, label_count);
  for (std::uint32_t n = 0; n < label_count; ++n) lb.put(static_cast<char>(n % 10));
}

// Small learnable stand-in for MNIST: each class lights a distinct block of
// pixels, plus uniform noise.
Dataset synthetic_digits(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.rows = d.cols = kImageSide;
  d.pixels.assign(n * 784, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 10);
    d.labels.push_back(label);
    for (std::size_t p = 0; p < 784; ++p) {
      const bool lit = (p / 28) / 3 == static_cast<std::size_t>(label) && (p % 28) >= 4 && (p % 28) < 24;
      d.pixels[i * 784 + p] = static_cast<float>((lit ? 0.8 : 0.0) + 0.2 * rng.uniform(0, 1));
    }
  }
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.arch = Architecture::LeNet300_100;
  c.pruning = {{Granularity::Fine, 40}, {Granularity::Fine, 20}, {Granularity::Fine, 10}};
  c.epochs = 3;
  c.batch_size = 32;
  c.metric_samples = 20;
  c.seed = 11;
  return c;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* mnist_dir() {
  const char* dir = std::getenv("DPP_DATA_DIR");
  if (dir && fs::exists(fs::path(dir) / "train-images-idx3-ubyte")) return dir;
  return nullptr;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("IDX loader scales pixels and checks headers") {
  const auto dir = scratch("idx");
  write_idx(dir / "im", dir / "lb", 5, 5);
  auto d = load_mnist_idx(dir / "im", dir / "lb");
  REQUIRE(d.size() == 5);
  CHECK(d.rows == 28);
  CHECK(d.cols == 28);
  CHECK(d.labels[3] == 3);
  for (std::size_t n = 0; n < 5; ++n)
    for (std::size_t p = 0; p < 784; ++p) CHECK(d.pixels[n * 784 + p] == static_cast<float>((n * 37 + p) % 256) / 255.0f);
  // Image 0 pixel 255 holds the byte 255.
  CHECK(d.pixels[255] == 1.0f);
  CHECK(d.pixels[0] == 0.0f);

  auto onehot = d.one_hot();
  CHECK(onehot.size() == 50);
  CHECK(onehot[2 * 10 + 2] == 1.0f);
  CHECK(onehot[2 * 10 + 3] == 0.0f);
  CHECK(d.head(2).size() == 2);
  CHECK(d.head(0).size() == 5);

  write_idx(dir / "im2", dir / "lb2", 5, 4);
  CHECK_THROWS_AS(load_mnist_idx(dir / "im2", dir / "lb2"), IdxError);

  write_idx(dir / "im3", dir / "lb3", 2, 2, 28, 0x801);
  CHECK_THROWS_AS(load_mnist_idx(dir / "im3", dir / "lb3"), IdxError);
  CHECK_THROWS_AS(load_mnist_idx(dir / "lb", dir / "im"), IdxError);

  fs::copy_file(dir / "im", dir / "cut");
  fs::resize_file(dir / "cut", 16 + 784 * 3 + 100);
  try {
    load_mnist_idx(dir / "cut", dir / "lb");
    FAIL("truncated file accepted");
  } catch (const IdxError& e) {
    CHECK(std::string(e.what()).find("byte offset " + std::to_string(16 + 784 * 3 + 100)) != std::string::npos);
  }
  CHECK_THROWS(load_mnist_idx(dir / "missing", dir / "lb"));
}

TEST_CASE("config parsing, validation and round trip") {
  std::istringstream text(R"(# comment
architecture = "lenet5-caffe"
granularity = ["fine", "fine", "medium", "fine"]
k = [5, 4, 100, 50]
bits = 8
mu = 0.01
beta = 0.5
epochs = 7
seed = 42
)");
  auto c = parse_train_config(text);
  CHECK(c.arch == Architecture::LeNet5Caffe);
  REQUIRE(c.pruning.size() == 4);
  CHECK(c.pruning[2].level == Granularity::Medium);
  CHECK(c.pruning[2].k == 100);
  CHECK(c.bits == 8);
  CHECK(c.mu == 0.01);
  CHECK(c.beta == 0.5);
  CHECK(c.epochs == 7);
  CHECK(c.seed == 42);
  CHECK(c.learning_rate == 0.001);
  CHECK(c.batch_size == 128);
  CHECK(c.optimizer == "adam");

  std::istringstream again(format_train_config(c));
  auto d = parse_train_config(again);
  CHECK(format_train_config(d) == format_train_config(c));

  auto bad = [](const std::string& s) {
    std::istringstream in(s);
    return parse_train_config(in);
  };
  CHECK_THROWS(bad("architecture = \"lenet300\"\nk = [15, 6]\n"));
  CHECK_THROWS(bad("architecture = \"lenet300\"\nk = [15, 6, 6]\nwhatever = 3\n"));
  CHECK_THROWS(bad("architecture = \"lenet300\"\nk = [900, 6, 6]\n"));
  CHECK_THROWS(bad("architecture = \"lenet300\"\nk = [15, 6, 6]\nbits = 4\n"));
  CHECK_THROWS(bad("architecture = \"lenet300\"\nk = [15, 6, 6]\nbeta = 2\n"));
  CHECK_THROWS(bad("architecture = \"alexnet\"\nk = [15, 6, 6]\n"));
  CHECK_THROWS(bad("architecture = \"lenet300\"\nk = [15, 6, 6]\nepochs = -1\n"));
  CHECK_NOTHROW(bad("architecture = \"lenet300\"\nk = [15, 6, 6]\n"));
}

TEST_CASE("temperature schedule endpoints") {
  TrainConfig c = tiny_config();
  c.epochs = 30;
  auto s = c.schedule();
  CHECK(tau_at(s, 1) == doctest::Approx(5.0));
  CHECK(tau_at(s, 30) == doctest::Approx(0.5));
  CHECK(tau_at(s, 2) == doctest::Approx(5.0 - 4.5 / 29));
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto train_set = synthetic_digits(300, 1);
  const auto test_set = synthetic_digits(100, 2);
  auto run = [&] {
    auto r = train(tiny_config(), train_set, test_set);
    std::ostringstream csv;
    write_metrics_csv(csv, r.log);
    return std::make_pair(csv.str(), r);
  };
  auto [a, ra] = run();
  auto [b, rb] = run();
  CHECK(a == b);
  CHECK(ra.log.size() == 3);
  std::istringstream lines(a);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "epoch,train_loss,train_acc,test_acc,tau,H_norm_1,I_norm_1,H_norm_2,I_norm_2,H_norm_3,I_norm_3");
  auto wa = ra.state.network.layers()[0].weights.values();
  auto wb = rb.state.network.layers()[0].weights.values();
  CHECK(std::equal(wa.begin(), wa.end(), wb.begin()));

  auto other = tiny_config();
  other.seed = 12;
  std::ostringstream csv;
  write_metrics_csv(csv, train(other, train_set, test_set).log);
  CHECK(csv.str() != a);
}

TEST_CASE("evaluation") {
  const auto train_set = synthetic_digits(400, 3);
  const auto test_set = synthetic_digits(200, 4);
  Dataset empty;
  empty.rows = empty.cols = 28;

  TrainConfig dense = tiny_config();
  dense.pruning = {{Granularity::Fine, 784}, {Granularity::Fine, 300}, {Granularity::Fine, 100}};
  auto r = train(dense, train_set, test_set);
  CHECK_THROWS_AS(evaluate(r.state, empty, 1), std::invalid_argument);

  // All-ones masks: the frozen model is the plain network.
  DenseModel plain;
  plain.arch = r.state.network.arch();
  plain.layers = r.state.network.specs();
  for (const auto& l : r.state.network.layers()) {
    plain.weights.push_back(l.weights.clone());
    plain.biases.push_back(l.bias.clone());
  }
  const double direct = accuracy(plain, test_set);
  CHECK(evaluate(r.state, test_set, 1) == direct);
  CHECK(evaluate(r.state, test_set, 99) == direct);
  CHECK(direct > 0.9);
}

TEST_CASE("state file round trip") {
  const auto train_set = synthetic_digits(200, 5);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.bits = 2;
  auto r = train(cfg, train_set, train_set);
  const auto dir = scratch("state");
  save_state(dir / "s.dpst", r.state);
  auto back = load_state(dir / "s.dpst");
  CHECK(format_train_config(back.config) == format_train_config(r.state.config));
  for (std::size_t l = 0; l < 3; ++l) {
    auto a = r.state.network.layers()[l].logits.values.values();
    auto b = back.network.layers()[l].logits.values.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  CHECK(evaluate(back, train_set, 5) == evaluate(r.state, train_set, 5));

  auto bytes = read_file_bytes(dir / "s.dpst");
  bytes.resize(bytes.size() - 3);
  write_file(dir / "cut.dpst", bytes);
  CHECK_THROWS(load_state(dir / "cut.dpst"));
}

TEST_CASE("entropy penalty lowers the average pruning entropy") {
  const auto train_set = synthetic_digits(500, 6);
  auto with = tiny_config();
  with.epochs = 4;
  with.mu = 0.005;
  with.metric_samples = 200;
  auto without = with;
  without.mu = 0.0;
  // Same seed: identical init, noise and data order.
  auto a = train(with, train_set, train_set);
  auto b = train(without, train_set, train_set);
  double ha = 0, hb = 0;
  for (double v : a.log.back().h_norm) ha += v;
  for (double v : b.log.back().h_norm) hb += v;
  CHECK(ha < hb);
}

TEST_CASE("cli usage errors") {
  std::string out, err;
  CHECK(cli({}, &out, &err) == 2);
  CHECK(cli({"train", "--bogus"}, &out, &err) == 2);
  CHECK(err.find('\n') == err.size() - 1);
  CHECK(cli({"frobnicate"}) == 2);
  CHECK(cli({"eval", "/nonexistent/model.dpps", "--data-dir", "/tmp"}, &out, &err) != 0);
  CHECK(out.empty());
  CHECK(cli({"inspect", "/nonexistent/model.dpps"}, &out, &err) != 0);
  CHECK(out.empty());
  CHECK(cli({"--help"}, &out) == 0);
  CHECK(out.find("train") != std::string::npos);

  const auto dir = scratch("cli_bad");
  std::ofstream(dir / "junk.dpps") << "not a model";
  CHECK(cli({"inspect", (dir / "junk.dpps").string()}, &out, &err) == 1);
  CHECK(out.empty());
  CHECK(err.find("bad magic") != std::string::npos);
}

TEST_CASE("cli happy path on synthetic IDX files") {
  const auto dir = scratch("cli");
  const auto data = dir / "data";
  fs::create_directories(data);
  write_idx(data / "train-images-idx3-ubyte", data / "train-labels-idx1-ubyte", 200, 200);
  write_idx(data / "t10k-images-idx3-ubyte", data / "t10k-labels-idx1-ubyte", 50, 50);
  std::ofstream(dir / "run.cfg") << "architecture = \"lenet300-100\"\nk = [20, 10, 5]\nepochs = 2\nbatch_size = 50\n"
                                    "metric_samples = 10\n";
  const auto run = dir / "run1";
  std::string out, err;
  REQUIRE(cli({"train", "--config", (dir / "run.cfg").string(), "--seed", "1", "--data-dir", data.string(), "--out",
               run.string()},
              &out, &err) == 0);
  CHECK(fs::exists(run / "metrics.csv"));
  CHECK(fs::exists(run / "model.dpps"));
  CHECK(fs::exists(run / "state.dpst"));
  std::ifstream csv(run / "metrics.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);

  REQUIRE(cli({"inspect", (run / "model.dpps").string()}, &out, &err) == 0);
  const std::size_t s = 20 * 300 + 10 * 100 + 5 * 10;
  CHECK(out.find(",266200," + std::to_string(s) + ",32,") != std::string::npos);
  REQUIRE(cli({"inspect", (run / "model.dpps").string(), "--json"}, &out, &err) == 0);
  CHECK(out.find("\"compression_rate\"") != std::string::npos);

  REQUIRE(cli({"eval", (run / "model.dpps").string(), "--data-dir", data.string()}, &out, &err) == 0);
  const std::string model_acc = out;
  CHECK(model_acc.rfind("accuracy,", 0) == 0);
  // The exported model is the draw with the run seed; the state evaluated
  // with the same seed gives the same accuracy.
  REQUIRE(cli({"eval", (run / "state.dpst").string(), "--seed", "1", "--data-dir", data.string()}, &out, &err) == 0);
  CHECK(out == model_acc);

  REQUIRE(cli({"export", (run / "state.dpst").string(), "--seed", "1", "--out", (dir / "again.dpps").string()}, &out,
              &err) == 0);
  CHECK(read_file_bytes(dir / "again.dpps") == read_file_bytes(run / "model.dpps"));

  REQUIRE(cli({"metrics", (run / "state.dpst").string(), "--samples", "30"}, &out, &err) == 0);
  CHECK(out.rfind("layer,D,C,K,H_avg", 0) == 0);
  CHECK(out.find("\n1,300,784,20,") != std::string::npos);

  // DPP_DATA_DIR supplies the default data path.
  const char* saved = std::getenv("DPP_DATA_DIR");
  const std::string previous = saved ? saved : "";
  ::setenv("DPP_DATA_DIR", data.string().c_str(), 1);
  CHECK(cli({"eval", (run / "model.dpps").string()}, &out, &err) == 0);
  CHECK(out == model_acc);
  ::unsetenv("DPP_DATA_DIR");
  CHECK(cli({"eval", (run / "model.dpps").string()}, &out, &err) == 2);
  if (saved) ::setenv("DPP_DATA_DIR", previous.c_str(), 1);
}

TEST_CASE("cli binary exit status") {
  const char* exe = std::getenv("DPPKIT_CLI");
  if (!exe) return;
  const std::string quiet = " >/dev/null 2>&1";
  CHECK(std::system((std::string(exe) + " --help" + quiet).c_str()) == 0);
  CHECK(std::system((std::string(exe) + " inspect /nonexistent.dpps" + quiet).c_str()) != 0);
  CHECK(std::system((std::string(exe) + " train --no-such-flag" + quiet).c_str()) != 0);
}

TEST_CASE("dense baseline on MNIST reaches 97% in 5 epochs") {
  const char* dir = mnist_dir();
  if (!dir) {
    MESSAGE("DPP_DATA_DIR not set; skipping the MNIST baseline");
    return;
  }
  auto data = load_mnist_dir(dir);
  CHECK(data.train.size() == 60000);
  CHECK(data.test.size() == 10000);
  TrainConfig c;
  c.pruning = {{Granularity::Fine, 784}, {Granularity::Fine, 300}, {Granularity::Fine, 100}};
  c.epochs = 5;
  c.metric_samples = 1;
  auto r = train(c, data.train, data.test);
  CHECK(r.log.back().test_acc >= 0.97);
}
