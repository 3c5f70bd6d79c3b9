#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "osen/config.hpp"
#include "osen/data.hpp"
#include "osen/experiment.hpp"

using namespace osen;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("osen_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_binary(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

/// RFC 4180 reader: quoted fields, doubled quotes, CRLF records.
std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') field += '"', ++i;
      else if (c == '"') quoted = false;
      else field += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(field);
      field.clear();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      row.push_back(field);
      rows.push_back(row);
      row.clear();
      field.clear();
      ++i;
    } else {
      field += c;
    }
  }
  return rows;
}

struct CliResult {
  int code;
  std::string out;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(OSEN_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

const char* kSmallSe = R"(pipeline = "se_spatial"
mr = [0.25]
q = [1]
seeds = [1, 2]
side = 8
train_count = 24
val_count = 8
test_count = 8
epochs = 2
batch_size = 8
snr_db = [inf, 10]
save_models = false
)";

}  // namespace

TEST(IngestIdx, ReadsScaledImagesAndLabels) {
  const fs::path dir = scratch_dir("idx");
  std::vector<std::uint8_t> img;
  put_be32(img, 0x00000803);
  put_be32(img, 2);
  put_be32(img, 3);
  put_be32(img, 4);
  for (int i = 0; i < 24; ++i) img.push_back(static_cast<std::uint8_t>(i * 10));
  write_binary(dir / "img.idx", img);
  std::vector<std::uint8_t> lab;
  put_be32(lab, 0x00000801);
  put_be32(lab, 2);
  lab.push_back(7);
  lab.push_back(3);
  write_binary(dir / "lab.idx", lab);

  const ImageSet set = ingest_idx((dir / "img.idx").string(), (dir / "lab.idx").string());
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set.height, 3u);
  EXPECT_EQ(set.width, 4u);
  EXPECT_DOUBLE_EQ(set.images[1](2, 3), 230.0 / 255.0);
  EXPECT_EQ(set.labels, (std::vector<int>{7, 3}));

  std::vector<std::uint8_t> header_only(img.begin(), img.begin() + 16);
  write_binary(dir / "short.idx", header_only);
  EXPECT_THROW(ingest_idx((dir / "short.idx").string()), FormatError);
  std::vector<std::uint8_t> stub(img.begin(), img.begin() + 6);
  write_binary(dir / "stub.idx", stub);
  EXPECT_THROW(ingest_idx((dir / "stub.idx").string()), FormatError);
  EXPECT_THROW(ingest_idx((dir / "lab.idx").string()), FormatError);
  EXPECT_THROW(ingest_idx((dir / "img.idx").string(), (dir / "img.idx").string()), FormatError);
  EXPECT_THROW(ingest_idx((dir / "missing.idx").string()), FormatError);
  fs::remove_all(dir);
}

TEST(Split, FiveOneOneRatio) {
  const SplitIndices s = split_5_1_1(7000, 3);
  EXPECT_EQ(s.train.size(), 5000u);
  EXPECT_EQ(s.validation.size(), 1000u);
  EXPECT_EQ(s.test.size(), 1000u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 7000u);
  EXPECT_EQ(split_5_1_1(7000, 3).test, s.test);
  EXPECT_NE(split_5_1_1(7000, 4).test, s.test);
}

TEST(IngestImageDir, GraymapsOfBothDepths) {
  const fs::path dir = scratch_dir("pgm");
  Tensor img({256, 256});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 256) / 255.0;
  write_pgm((dir / "a.pgm").string(), img);
  const ImageSet set = ingest_image_dir(dir.string(), 256);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_LT(max_abs_diff(set.images[0], img), 1e-12);

  const fs::path deep = scratch_dir("pgm16");
  std::vector<std::uint8_t> b;
  for (char c : std::string("P5\n2 2\n65535\n")) b.push_back(static_cast<std::uint8_t>(c));
  for (std::uint16_t v : {0, 65535, 1, 32768}) {
    b.push_back(static_cast<std::uint8_t>(v >> 8));
    b.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  write_binary(deep / "d.pgm", b);
  const Tensor d = load_pgm((deep / "d.pgm").string(), 2);
  EXPECT_DOUBLE_EQ(d(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(d(1, 0), 1.0 / 65535.0);
  EXPECT_DOUBLE_EQ(d(1, 1), 32768.0 / 65535.0);

  const fs::path empty = scratch_dir("empty");
  EXPECT_THROW(ingest_image_dir(empty.string(), 8), FormatError);
  std::ofstream(deep / "color.pgm") << "P6\n1 1\n255\nabc";
  try {
    ingest_image_dir(deep.string(), 2);
    FAIL() << "colour file accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("color.pgm"), std::string::npos);
  }
  for (const auto& p : {dir, deep, empty}) fs::remove_all(p);
}

TEST(SynthSparse, SupportAndAmplitudes) {
  for (const Tensor& x : synth_sparse(50, 0, 3, 1))
    for (double v : x.values()) EXPECT_EQ(v, 0.0);
  const auto xs = synth_sparse(100, 20, 30, 2);
  for (const Tensor& x : xs) {
    std::size_t nz = 0;
    for (double v : x.values())
      if (v != 0.0) {
        ++nz;
        EXPECT_GE(v, 0.2);
        EXPECT_LE(v, 1.0);
      }
    EXPECT_EQ(nz, 20u);
  }
  EXPECT_EQ(synth_sparse(100, 20, 30, 2), xs);
  EXPECT_NE(synth_sparse(100, 20, 30, 3), xs);
  EXPECT_THROW(synth_sparse(10, 10, 1, 0), DomainError);
}

TEST(Config, DefaultsAndPipelineSpecificValues) {
  const ExperimentConfig se = parse("pipeline = \"se_spatial\"\n");
  EXPECT_EQ(se.epochs, 100u);
  EXPECT_EQ(se.side, 28u);
  EXPECT_EQ(se.loss, "mse_mask");
  EXPECT_EQ(se.q, (std::vector<std::size_t>{3}));
  const ExperimentConfig rbc = parse("pipeline = \"rbc_classify\"\n");
  EXPECT_EQ(rbc.epochs, 30u);
  EXPECT_EQ(rbc.loss, "hybrid");
  EXPECT_EQ(parse("pipeline = \"cs_tv\"\n").side, 64u);
  const ExperimentConfig c = parse("pipeline = \"se_spatial\"\nmr = [0.1, 0.25]\nq = [1, 3, 5]\nsnr_db = [inf, 20, 10]\n");
  EXPECT_EQ(c.mr, (std::vector<double>{0.1, 0.25}));
  EXPECT_EQ(c.q, (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_TRUE(std::isinf(c.snr_db[0]));
}

TEST(Config, Errors) {
  EXPECT_THROW(parse("mr = [0.25]\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"segment\"\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"se_spatial\"\nlearning_rte = 0.1\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"se_spatial\"\nepochs = \"many\"\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"se_spatial\"\nmr = [1.5]\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"se_spatial\"\nepochs = -3\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"se_spatial\"\n[extra]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"se_spatial\"\ndataset = \"idx\"\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"rbc_classify\"\nloss = \"mse_mask\"\n"), ConfigError);
  EXPECT_THROW(parse("pipeline = \"cs_tv\"\nncl = true\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/osen.toml"), ConfigError);
}

TEST(Config, EchoRoundTrips) {
  const ExperimentConfig c = parse(std::string(kSmallSe) + "lambda_g = 0.125\nvariant = \"osen2\"\n");
  const std::string echo = echo_config(c);
  EXPECT_EQ(echo_config(parse(echo)), echo);
}

TEST(Config, ShippedSamplesParse) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(OSEN_SAMPLES_DIR)) {
    if (e.path().extension() != ".toml") continue;
    EXPECT_NO_THROW(load_config(e.path().string())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 3u);
}

TEST(Report, CsvQuoting) {
  EXPECT_EQ(detail::csv_field("plain"), "plain");
  EXPECT_EQ(detail::csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(detail::csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  const auto rows = read_csv(detail::csv_row({"x,y", "q\"z", "3"}));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"x,y", "q\"z", "3"}));
  EXPECT_EQ(std::stod(detail::csv_number(0.1 + 0.2)), 0.1 + 0.2);
}

TEST(Experiment, SpatialRunReportsAndSeedMeans) {
  const ExperimentConfig cfg = parse(kSmallSe);
  const ExperimentReport rep = run_experiment(cfg);
  ASSERT_EQ(rep.runs.size(), 2u);
  ModelSpec spec;
  spec.order = 1;
  spec.height = spec.width = 8;
  for (const auto& r : rep.runs) {
    EXPECT_EQ(r.param_count, param_count(spec));
    ASSERT_EQ(r.noise.size(), 2u);
    EXPECT_EQ(r.history.size(), 2u);
  }
  EXPECT_EQ(rep.runs[0].seed, 1u);
  EXPECT_EQ(rep.runs[1].seed, 2u);

  const auto means = seed_means(rep);
  ASSERT_EQ(means.size(), 1u);
  for (std::size_t i = 0; i < means[0].metrics.size(); ++i) {
    const double want = (rep.runs[0].metrics[i].second + rep.runs[1].metrics[i].second) / 2.0;
    EXPECT_NEAR(means[0].metrics[i].second, want, 1e-12) << means[0].metrics[i].first;
  }
  EXPECT_NEAR(means[0].noise[1].metrics.f1, (rep.runs[0].noise[1].metrics.f1 + rep.runs[1].noise[1].metrics.f1) / 2, 1e-12);

  const fs::path a = scratch_dir("report_a"), b = scratch_dir("report_b");
  emit_report(rep, a.string());
  emit_report(run_experiment(cfg), b.string());
  for (const char* f : {"metrics.csv", "metrics_mean.csv", "noise_sweep.csv", "noise_sweep_mean.csv",
                        "history.csv", "config.txt"})
    EXPECT_EQ(read_text(a / f), read_text(b / f)) << f;

  const auto rows = read_csv(read_text(a / "metrics.csv"));
  ASSERT_EQ(rows.size(), 3u);
  const auto& header = rows[0];
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  ASSERT_LT(col("f1"), header.size());
  ASSERT_LT(col("param_count"), header.size());
  EXPECT_EQ(rows[1][col("param_count")], std::to_string(param_count(spec)));
  EXPECT_EQ(rows[1][col("seed")], "1");
  EXPECT_EQ(std::stod(rows[2][col("f1")]), rep.runs[1].metric("f1"));
  EXPECT_EQ(read_csv(read_text(a / "noise_sweep.csv")).size(), 5u);
  EXPECT_TRUE(fs::exists(a / "timing.csv"));
  EXPECT_EQ(echo_config(parse(read_text(a / "config.txt"))), read_text(a / "config.txt"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, ClassificationRunReportsAccuracies) {
  const ExperimentConfig cfg = parse(R"(pipeline = "rbc_classify"
mr = [0.25]
q = [1]
seeds = [0]
classes = 3
block_rows = 1
signal_dim = 32
train_count = 12
val_count = 6
test_count = 6
epochs = 1
save_models = false
)");
  const ExperimentReport rep = run_experiment(cfg);
  const RunResult& r = rep.runs.at(0);
  EXPECT_DOUBLE_EQ(r.metric("chance"), 1.0 / 3.0);
  EXPECT_EQ(r.metric("measurement_dim"), 8.0);
  for (const char* k : {"accuracy", "crc_accuracy"}) {
    EXPECT_GE(r.metric(k), 0.0);
    EXPECT_LE(r.metric(k), 1.0);
  }
}

TEST(Experiment, OracleWeightedTvRowPresent) {
  const ExperimentConfig cfg = parse(R"(pipeline = "cs_tv"
mr = [0.25]
q = [1]
seeds = [0]
side = 32
test_count = 2
use_network = false
oracle_weights = true
save_models = false
)");
  const RunResult r = run_experiment(cfg).runs.at(0);
  EXPECT_GE(r.metric("psnr_oracle_wtv"), r.metric("psnr_tv"));
  EXPECT_GT(r.metric("psnr_tv"), r.metric("psnr_zf"));
  EXPECT_EQ(r.metric("measurement_count"), 256.0);
}

TEST(Experiment, StageFailuresNameTheStage) {
  const ExperimentConfig cfg = parse("pipeline = \"se_spatial\"\ndataset = \"idx\"\ndataset_path = \"/nonexistent.idx\"\n");
  try {
    run_experiment(cfg);
    FAIL() << "missing dataset accepted";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "ingest");
  }
}

TEST(CommandLine, ParamCountAndExitCodes) {
  const CliResult a = run_cli("paramcount --variant osen1 --q 3");
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(a.out, "33413\n");
  EXPECT_EQ(run_cli("paramcount --variant osen2 --q 5 --mr 0.05").out, "238479\n");
  EXPECT_EQ(run_cli("paramcount --variant osen3 --q 1").code, 1);
  EXPECT_EQ(run_cli("frobnicate").code, 1);

  const fs::path dir = scratch_dir("cmd");
  std::ofstream(dir / "bad.toml") << "pipeline = \"nope\"\n";
  const CliResult bad = run_cli("run " + (dir / "bad.toml").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("config error"), std::string::npos);
  std::ofstream(dir / "broken.toml") << "pipeline = \"se_spatial\"\ndataset = \"idx\"\ndataset_path = \"/nonexistent.idx\"\n";
  const CliResult broken = run_cli("run " + (dir / "broken.toml").string());
  EXPECT_EQ(broken.code, 2);
  EXPECT_NE(broken.out.find("ingest"), std::string::npos);
  EXPECT_NE(broken.out.find("pipeline = \"se_spatial\""), std::string::npos);
  fs::remove_all(dir);
}

TEST(CommandLine, GradcheckMaskAndRecon) {
  EXPECT_EQ(run_cli("gradcheck --selfgop --q 2").code, 0);
  const fs::path dir = scratch_dir("recon");
  const std::string mask = (dir / "mask.txt").string();
  ASSERT_EQ(run_cli("mask --side 32 --mr 0.25 --seed 1 --out " + mask).code, 0);
  const CliResult r = run_cli("recon --mask " + mask + " --phantom 2 --oracle --out " + (dir / "out").string());
  EXPECT_EQ(r.code, 0) << r.out;
  const auto rows = read_csv(read_text(dir / "out" / "recon.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[3][0], "oracle_weighted_tv");
  EXPECT_TRUE(fs::exists(dir / "out" / "tv.pgm"));
  EXPECT_EQ(run_cli("recon --mask " + (dir / "none.txt").string()).code, 2);
  fs::remove_all(dir);
}
