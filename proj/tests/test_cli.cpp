#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "accvit/image.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(ACCVIT_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("accvit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write_image(const std::string& name, std::size_t side) const {
    accvit::Image img{side, side, std::vector<std::uint8_t>(side * side * 3)};
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>((i * 37) % 251);
    accvit::write_ppm(img, path(name));
    return path(name);
  }

  fs::path dir_;
};

std::string field(const std::string& line, int idx) {
  std::istringstream in(line);
  std::string f;
  for (int i = 0; i <= idx; ++i) std::getline(in, f, '\t');
  return f;
}

std::string find_line(const std::string& text, const std::string& prefix) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0) return line;
  return {};
}

}  // namespace

TEST_F(Cli, InfoPublishedVariant) {
  const auto r = cli("info --variant tiny");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("within 2%"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("within 5%"), std::string::npos) << r.out;
}

TEST_F(Cli, UnknownVariantIsUsageError) {
  EXPECT_EQ(cli("info --variant bogus").code, 2);
  EXPECT_EQ(cli("no-such-command").code, 2);
  EXPECT_EQ(cli("forward").code, 2);
  EXPECT_EQ(cli("info --variant femto --resolution 100").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST_F(Cli, TsvTotalsIndependentOfResolutionForParams) {
  const auto a = cli("info --variant femto --tsv");
  const auto b = cli("info --variant femto --resolution 64 --tsv");
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  const auto ta = find_line(a.out, "total\t"), tb = find_line(b.out, "total\t");
  ASSERT_FALSE(ta.empty());
  EXPECT_EQ(field(ta, 1), field(tb, 1));
  EXPECT_GT(std::stoull(field(ta, 2)), std::stoull(field(tb, 2)));
  EXPECT_FALSE(find_line(a.out, "stem\t").empty());
}

TEST_F(Cli, ForwardIsDeterministicWithSavedWeights) {
  const auto img = write_image("in.ppm", 240);
  const auto w = path("femto.bin");
  ASSERT_EQ(cli("save-weights --variant femto --seed 3 --out " + w).code, 0);
  const auto a = cli("forward --variant femto --image " + img + " --weights " + w + " --all-logits");
  const auto b = cli("forward --variant femto --image " + img + " --weights " + w + " --all-logits");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  std::istringstream in(a.out);
  std::string line;
  std::size_t logits = 0, ranks = 0;
  while (std::getline(in, line)) {
    if (line.rfind("logit\t", 0) == 0) {
      EXPECT_TRUE(std::isfinite(std::stod(field(line, 2))));
      ++logits;
    } else if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0]))) {
      ++ranks;
    }
  }
  EXPECT_EQ(logits, 1000u);
  EXPECT_EQ(ranks, 5u);
  const auto other = cli("forward --variant femto --seed 4 --image " + img);
  EXPECT_NE(find_line(other.out, "1\t"), find_line(a.out, "1\t"));
}

TEST_F(Cli, ForwardRejectsBadImage) {
  const auto img = write_image("in.ppm", 64);
  fs::resize_file(img, fs::file_size(img) - 10);
  EXPECT_EQ(cli("forward --variant femto --image " + img).code, 2);
  EXPECT_EQ(cli("forward --variant femto --image " + path("missing.ppm")).code, 2);
}

TEST_F(Cli, VerifyPartition) {
  const auto r = cli("verify partition");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
  EXPECT_EQ(cli("verify nothing").code, 2);
}

TEST_F(Cli, TrainSmokeThresholds) {
  EXPECT_EQ(cli("train-smoke --lr 0 --steps 12 --images 2 --size 32").code, 4);
  const auto empty = cli("train-smoke --steps 0");
  EXPECT_EQ(empty.code, 4);
  EXPECT_EQ(find_line(empty.out, "0\t"), "");
  const auto trace = path("trace.tsv");
  cli("train-smoke --steps 3 --images 2 --size 32 --out " + trace);
  EXPECT_TRUE(fs::exists(trace));
}

TEST_F(Cli, WeightsRoundTripAndCrossVariant) {
  const auto w = path("pico.bin");
  ASSERT_EQ(cli("save-weights --variant pico --out " + w).code, 0);
  EXPECT_EQ(cli("load --variant pico --weights " + w).code, 0);
  EXPECT_EQ(cli("load --variant femto --weights " + w).code, 2);
  fs::resize_file(w, 100);
  EXPECT_EQ(cli("load --variant pico --weights " + w).code, 2);
}
