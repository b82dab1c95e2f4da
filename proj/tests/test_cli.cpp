// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "atss/checkpoint.hpp"
#include "atss/config.hpp"
#include "atss/embedder.hpp"
#include "atss/pipeline.hpp"
#include "atss/wav.hpp"
#include "doctest.h"
#include "synth.hpp"

using namespace atss;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string cli_path() {
  const char* p = std::getenv("ATSS_CLI");
  REQUIRE_MESSAGE(p != nullptr, "ATSS_CLI must point at the atss binary");
  return p;
}

CmdResult run_cli(const std::string& args) {
  const fs::path errfile =
      fs::temp_directory_path() / ("atss_cli_err_" + std::to_string(getpid()));
  const std::string cmd =
      cli_path() + " " + args + " 2>" + errfile.string();
  CmdResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream ef(errfile);
  std::stringstream ss;
  ss << ef.rdbuf();
  r.err = ss.str();
  fs::remove(errfile);
  return r;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Fresh scratch dir per test-case invocation.
fs::path scratch_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("atss_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Writes a 2-speaker synthetic corpus and its manifest; returns the
// manifest path.
fs::path write_corpus(const fs::path& dir, uint64_t seed, int speakers = 2,
                      int utts = 2) {
  const Corpus corpus =
      atss::testing::make_synth_corpus({speakers, utts, 3.2, seed});
  std::ofstream manifest(dir / "manifest.tsv");
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    const std::string name = "utt" + std::to_string(i) + ".wav";
    write_wav((dir / name).string(), corpus.utterances[i].wave);
    manifest << corpus.utterances[i].speaker << "\t" << name << "\n";
  }
  return dir / "manifest.tsv";
}

std::string tiny_config_text() {
  return "model.n_blocks=1\n"
         "model.n_heads=2\n"
         "model.d_k=2\n"
         "model.embed_dim=16\n"
         "train.lr=0.001\n"
         "train.batch_size=2\n"
         "train.max_epochs=2\n"
         "train.patience=2\n"
         "train.steps_per_epoch=2\n"
         "train.validation_size=2\n"
         "train.seed=3\n";
}

fs::path write_tiny_config(const fs::path& dir) {
  std::ofstream f(dir / "tiny.cfg");
  f << tiny_config_text();
  return dir / "tiny.cfg";
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults serialize and round-trip") {
    const Config def;
    const Config back = Config::parse_text(def.serialize());
    CHECK(back.serialize() == def.serialize());
    CHECK(back.stft.frame_len == 400);
    CHECK(back.stft.hop == 160);
    CHECK(back.stft.fft_size == 512);
    CHECK(back.n_blocks == 3);
    CHECK(back.n_heads == 2);
    CHECK(back.d_k == 64);
    CHECK(back.embed_dim == 256);
    CHECK(back.lr == 1e-4);
    CHECK(back.batch_size == 16);
    CHECK(back.max_epochs == 50);
    CHECK(back.patience == 10);
  }
  SUBCASE("comments, blanks and spacing are accepted") {
    const Config cfg = Config::parse_text(
        "# a comment\n\n  train.lr = 0.5  # trailing\n\tmodel.d_k=8\n");
    CHECK(cfg.lr == 0.5);
    CHECK(cfg.d_k == 8);
  }
  SUBCASE("unknown keys are rejected with their line number") {
    CHECK_THROWS_WITH_AS(Config::parse_text("train.lr=1e-4\nbogus.key=1\n"),
                         doctest::Contains("line 2"), DataError);
  }
  SUBCASE("malformed values carry line numbers") {
    CHECK_THROWS_WITH_AS(Config::parse_text("train.batch_size=abc\n"),
                         doctest::Contains("line 1"), DataError);
    CHECK_THROWS_WITH_AS(Config::parse_text("mix.mode=sideways\n"),
                         doctest::Contains("line 1"), DataError);
    CHECK_THROWS_WITH_AS(Config::parse_text("no_equals_here\n"),
                         doctest::Contains("line 1"), DataError);
  }
  SUBCASE("cross-field validation") {
    CHECK_THROWS_AS(Config::parse_text("model.d_k=10\nmodel.n_heads=3\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(Config::parse_text("mix.snr_min=10\nmix.snr_max=5\n"),
                    std::invalid_argument);
  }
}

TEST_CASE("checkpoint format") {
  const fs::path dir = scratch_dir("ckpt");
  EmbedderConfig ecfg;
  ecfg.embed_dim = 16;
  ecfg.n_speakers = 3;
  Embedder<float> emb(ecfg, 123);
  const Config cfg;
  const fs::path path = dir / "emb.ckpt";

  SUBCASE("round trip restores every tensor bitwise") {
    save_checkpoint(path.string(), cfg.serialize(), emb.named_parameters());
    const CheckpointData loaded = load_checkpoint(path.string());
    CHECK(loaded.version == kCheckpointVersion);
    CHECK(loaded.config_text == cfg.serialize());

    Embedder<float> fresh(ecfg, 456);  // different init
    load_into(loaded, fresh.named_parameters());
    auto a = emb.named_parameters();
    auto b = fresh.named_parameters();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].second.numel() == b[i].second.numel());
      for (int64_t j = 0; j < a[i].second.numel(); ++j)
        CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
    }
  }
  SUBCASE("save-load-save produces byte-identical files") {
    save_checkpoint(path.string(), cfg.serialize(), emb.named_parameters());
    const CheckpointData loaded = load_checkpoint(path.string());
    Embedder<float> fresh(ecfg, 456);
    load_into(loaded, fresh.named_parameters());
    const fs::path path2 = dir / "emb2.ckpt";
    save_checkpoint(path2.string(), loaded.config_text,
                    fresh.named_parameters());
    CHECK(read_bytes(path) == read_bytes(path2));
  }
  SUBCASE("magic and version are validated") {
    {
      std::ofstream f(dir / "bad.ckpt", std::ios::binary);
      f << "NOPE notactuallyacheckpoint";
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bad.ckpt").string()),
                         doctest::Contains("magic"), DataError);

    std::string bytes = "ATSS";
    bytes += std::string("\x09\x00\x00\x00", 4);  // unsupported version 9
    {
      std::ofstream f(dir / "v9.ckpt", std::ios::binary);
      f << bytes;
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "v9.ckpt").string()),
                         doctest::Contains("version"), DataError);
  }
  SUBCASE("truncation detected") {
    save_checkpoint(path.string(), cfg.serialize(), emb.named_parameters());
    std::string bytes = read_bytes(path);
    bytes.resize(bytes.size() / 2);
    {
      std::ofstream f(dir / "trunc.ckpt", std::ios::binary);
      f << bytes;
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "trunc.ckpt").string()),
                         doctest::Contains("truncated"), DataError);
  }
  SUBCASE("missing and mismatched tensors rejected") {
    save_checkpoint(path.string(), cfg.serialize(), emb.named_parameters());
    const CheckpointData loaded = load_checkpoint(path.string());

    EmbedderConfig other = ecfg;
    other.embed_dim = 8;  // shape mismatch in fc1
    Embedder<float> wrong(other, 1);
    CHECK_THROWS_AS(load_into(loaded, wrong.named_parameters()), DataError);

    ModelConfig mcfg;
    mcfg.n_blocks = 1;
    mcfg.n_heads = 1;
    mcfg.d_k = 2;
    mcfg.embed_dim = 16;
    AtssModel<float> model(mcfg, 1);
    CHECK_THROWS_AS(load_into(loaded, model.named_parameters()), DataError);
  }
}

TEST_CASE("cli: argument and data errors") {
  CHECK(run_cli("").exit_code == 1);
  CHECK(run_cli("definitely-not-a-command").exit_code == 1);
  CHECK(run_cli("train-embedder --out x.ckpt").exit_code == 1);  // missing arg

  const auto r = run_cli(
      "train-embedder --manifest /nonexistent/manifest.tsv --out /tmp/x.ckpt");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("/nonexistent/manifest.tsv") != std::string::npos);
}

TEST_CASE("cli: embedder training is deterministic and loadable") {
  const fs::path dir = scratch_dir("embtrain");
  const fs::path manifest = write_corpus(dir, 7001);
  const fs::path config = write_tiny_config(dir);

  const std::string args = "train-embedder --manifest " + manifest.string() +
                           " --config " + config.string();
  const auto r1 = run_cli(args + " --out " + (dir / "a.ckpt").string());
  INFO(r1.err);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.out.find("epoch 1 loss=") != std::string::npos);

  const auto r2 = run_cli(args + " --out " + (dir / "b.ckpt").string());
  REQUIRE(r2.exit_code == 0);
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));

  // loadable and well-formed
  const CheckpointData ckpt = load_checkpoint((dir / "a.ckpt").string());
  CHECK(ckpt.find("embedder.fc1.b") != nullptr);
  CHECK(ckpt.find("embedder.fc2.b") != nullptr);
  CHECK(ckpt.find("embedder.fc1.b")->data.size() == 16);
}

TEST_CASE("cli: separator training, loss history, nan dump") {
  const fs::path dir = scratch_dir("septrain");
  const fs::path manifest = write_corpus(dir, 7002);
  const fs::path config = write_tiny_config(dir);

  // embedder checkpoint first
  const auto re = run_cli("train-embedder --manifest " + manifest.string() +
                          " --config " + config.string() + " --out " +
                          (dir / "emb.ckpt").string());
  REQUIRE(re.exit_code == 0);

  const std::string train_args =
      "train-separator --manifest " + manifest.string() + " --val-manifest " +
      manifest.string() + " --embedder " + (dir / "emb.ckpt").string() +
      " --config " + config.string();

  SUBCASE("writes checkpoint and an epoch,train_loss,val_loss CSV") {
    const auto r =
        run_cli(train_args + " --out " + (dir / "model.ckpt").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    const std::string csv = read_bytes(dir / "model.ckpt.loss.csv");
    CHECK(csv.rfind("epoch,train_loss,val_loss\n", 0) == 0);
    int rows = 0;
    for (char c : csv)
      if (c == '\n') ++rows;
    CHECK(rows == 1 + 2);  // header + one row per epoch

    // byte-identical rerun (checkpoint and CSV)
    const auto r2 =
        run_cli(train_args + " --out " + (dir / "model2.ckpt").string());
    REQUIRE(r2.exit_code == 0);
    CHECK(read_bytes(dir / "model.ckpt") == read_bytes(dir / "model2.ckpt"));
    CHECK(read_bytes(dir / "model.ckpt.loss.csv") ==
          read_bytes(dir / "model2.ckpt.loss.csv"));
  }
  SUBCASE("injected NaN exits 3 and dumps partial state") {
    const auto r = run_cli(train_args + " --inject-nan --out " +
                           (dir / "nan.ckpt").string());
    CHECK(r.exit_code == 3);
    CHECK(r.err.find("partial state") != std::string::npos);
    CHECK(fs::exists(dir / "nan.ckpt.partial"));
    CHECK(!fs::exists(dir / "nan.ckpt"));
  }
}

TEST_CASE("cli: simulate writes WAV triples and an index") {
  const fs::path dir = scratch_dir("sim");
  const fs::path manifest = write_corpus(dir, 7003, 3, 2);
  const fs::path noise_dir = dir / "noise";
  fs::create_directories(noise_dir);
  // noise manifest
  const Corpus noise = atss::testing::make_noise_corpus(2, 7004);
  std::ofstream nm(noise_dir / "noise.tsv");
  for (size_t i = 0; i < noise.utterances.size(); ++i) {
    const std::string name = "n" + std::to_string(i) + ".wav";
    write_wav((noise_dir / name).string(), noise.utterances[i].wave);
    nm << noise.utterances[i].speaker << "\t" << name << "\n";
  }
  nm.close();

  SUBCASE("two_speaker mode: count=3 gives 9 WAVs plus index.json") {
    const auto r = run_cli("simulate --manifest " + manifest.string() +
                           " --mode two_speaker --count 3 --seed 5 --out-dir " +
                           (dir / "out").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    int wavs = 0;
    for (const auto& e : fs::directory_iterator(dir / "out"))
      if (e.path().extension() == ".wav") ++wavs;
    CHECK(wavs == 9);
    CHECK(fs::exists(dir / "out" / "index.json"));

    // regeneration with the same seed is byte-identical
    const auto r2 = run_cli("simulate --manifest " + manifest.string() +
                            " --mode two_speaker --count 3 --seed 5 --out-dir " +
                            (dir / "out2").string());
    REQUIRE(r2.exit_code == 0);
    CHECK(read_bytes(dir / "out" / "index.json") ==
          read_bytes(dir / "out2" / "index.json"));
    CHECK(read_bytes(dir / "out" / "mixture_00002.wav") ==
          read_bytes(dir / "out2" / "mixture_00002.wav"));
  }
  SUBCASE("noisy mode records snr_db in [5, 20]") {
    const auto r = run_cli("simulate --manifest " + manifest.string() +
                           " --noise-manifest " +
                           (noise_dir / "noise.tsv").string() +
                           " --mode noisy --count 4 --seed 6 --out-dir " +
                           (dir / "noisy").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    const std::string index = read_bytes(dir / "noisy" / "index.json");
    CHECK(index.find("snr_db") != std::string::npos);
    const auto samples = load_simulation_dir((dir / "noisy").string());
    REQUIRE(samples.size() == 4);
    for (const auto& s : samples) {
      REQUIRE(s.snr_db.has_value());
      CHECK(*s.snr_db >= 5.0);
      CHECK(*s.snr_db <= 20.0);
    }
  }
  SUBCASE("noisy mode without a noise manifest exits 1") {
    CHECK(run_cli("simulate --manifest " + manifest.string() +
                  " --mode noisy --count 1 --out-dir " +
                  (dir / "x").string())
              .exit_code == 1);
  }
}

TEST_CASE("cli: separate and evaluate") {
  const fs::path dir = scratch_dir("sep");
  const fs::path manifest = write_corpus(dir, 7005);
  const fs::path config = write_tiny_config(dir);

  // untrained-but-valid checkpoints straight from the library
  const Config cfg = Config::parse_text(tiny_config_text());
  EmbedderConfig ecfg;
  ecfg.embed_dim = cfg.embed_dim;
  ecfg.n_speakers = 2;
  Embedder<float> emb(ecfg, 1);
  save_checkpoint((dir / "emb.ckpt").string(), cfg.serialize(),
                  emb.named_parameters());
  AtssModel<float> model(cfg.model_config(), 2);
  save_checkpoint((dir / "model.ckpt").string(), cfg.serialize(),
                  model.named_parameters());

  // a mixture pair on disk
  const auto sample =
      simulate_two_speaker(load_corpus_manifest(manifest.string()), 3);
  write_wav((dir / "mix.wav").string(), sample.mixture);
  write_wav((dir / "ref.wav").string(), sample.reference);

  SUBCASE("separate: output length, determinism, ones-mask round trip") {
    const std::string base = "separate --mixture " + (dir / "mix.wav").string() +
                             " --reference " + (dir / "ref.wav").string() +
                             " --embedder " + (dir / "emb.ckpt").string() +
                             " --model " + (dir / "model.ckpt").string();
    const auto r1 = run_cli(base + " --out " + (dir / "out1.wav").string());
    INFO(r1.err);
    REQUIRE(r1.exit_code == 0);
    const Waveform out = read_wav((dir / "out1.wav").string());
    const Waveform in = read_wav((dir / "mix.wav").string());
    CHECK(out.size() == in.size());

    const auto r2 = run_cli(base + " --out " + (dir / "out2.wav").string());
    REQUIRE(r2.exit_code == 0);
    CHECK(read_bytes(dir / "out1.wav") == read_bytes(dir / "out2.wav"));

    const auto r3 = run_cli(base + " --ones-mask --out " +
                            (dir / "ones.wav").string());
    REQUIRE(r3.exit_code == 0);
    const Waveform ones = read_wav((dir / "ones.wav").string());
    REQUIRE(ones.size() == in.size());
    // round trip through 16-bit quantization: +-1 LSB on the interior
    double max_err = 0.0;
    for (int64_t i = 400; i < in.size() - 400; ++i)
      max_err = std::max(max_err, std::abs(ones.samples[i] - in.samples[i]));
    CHECK(max_err <= 1.0 / 32768.0 + 1e-9);
  }
  SUBCASE("separate rejects malformed checkpoints with exit 2") {
    {
      std::ofstream f(dir / "junk.ckpt", std::ios::binary);
      f << "JUNKJUNKJUNK";
    }
    const auto r = run_cli("separate --mixture " + (dir / "mix.wav").string() +
                           " --reference " + (dir / "ref.wav").string() +
                           " --embedder " + (dir / "junk.ckpt").string() +
                           " --model " + (dir / "model.ckpt").string() +
                           " --out " + (dir / "x.wav").string());
    CHECK(r.exit_code == 2);
  }
  SUBCASE("evaluate: stdout format and JSON consistency") {
    const auto rs = run_cli("simulate --manifest " + manifest.string() +
                            " --mode two_speaker --count 3 --seed 9 --out-dir " +
                            (dir / "evalset").string());
    REQUIRE(rs.exit_code == 0);

    const auto r = run_cli("evaluate --manifest " +
                           (dir / "evalset").string() + " --embedder " +
                           (dir / "emb.ckpt").string() + " --model " +
                           (dir / "model.ckpt").string() + " --ones-mask" +
                           " --report " + (dir / "report.json").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    double before = 0, after = 0, improved = 0;
    REQUIRE(std::sscanf(r.out.c_str(), "SDR before=%lf after=%lf improved=%lf",
                        &before, &after, &improved) == 3);
    CHECK(improved == doctest::Approx(after - before).epsilon(1e-6));

    const std::string json = read_bytes(dir / "report.json");
    CHECK(json.find("\"sdr_improved_mean\"") != std::string::npos);
    // the ones-mask estimate is the mixture round trip, so "after" tracks
    // "before" up to reconstruction error
    CHECK(std::abs(after - before) < 0.5);
  }
  SUBCASE("evaluate on an empty or missing manifest exits 2") {
    CHECK(run_cli("evaluate --manifest " + (dir / "missing").string() +
                  " --embedder " + (dir / "emb.ckpt").string() + " --model " +
                  (dir / "model.ckpt").string())
              .exit_code == 2);
  }
  SUBCASE("evaluate --ablation dispatches the architecture") {
    ModelConfig na_cfg = cfg.model_config();
    na_cfg.mode = ModelMode::kNoAttention;
    AtssModel<float> na(na_cfg, 4);
    Config na_file = cfg;
    na_file.ablation = ModelMode::kNoAttention;
    save_checkpoint((dir / "na.ckpt").string(), na_file.serialize(),
                    na.named_parameters());

    const auto rs = run_cli("simulate --manifest " + manifest.string() +
                            " --mode two_speaker --count 1 --seed 2 --out-dir " +
                            (dir / "abl").string());
    REQUIRE(rs.exit_code == 0);

    const std::string base = "evaluate --manifest " + (dir / "abl").string() +
                             " --embedder " + (dir / "emb.ckpt").string();
    // matching override works
    CHECK(run_cli(base + " --model " + (dir / "na.ckpt").string() +
                  " --ablation no_attention")
              .exit_code == 0);
    // full checkpoint under a no_attention override cannot satisfy the
    // tensor table
    CHECK(run_cli(base + " --model " + (dir / "model.ckpt").string() +
                  " --ablation no_attention")
              .exit_code == 2);
  }
}

TEST_CASE("cli: gradcheck") {
  auto r = run_cli("gradcheck --scope layers");
  INFO(r.out);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("linear") != std::string::npos);
  CHECK(r.out.find("conv2d") != std::string::npos);
  CHECK(r.out.find("softmax") != std::string::npos);
  CHECK(r.out.find("layer_norm") != std::string::npos);
  CHECK(r.out.find("stat_pool") != std::string::npos);
  CHECK(r.out.find("relu") != std::string::npos);
  CHECK(r.out.find("sigmoid") != std::string::npos);

  CHECK(run_cli("gradcheck --scope block").exit_code == 0);
  CHECK(run_cli("gradcheck --scope end2end").exit_code == 0);
  CHECK(run_cli("gradcheck --scope bogus").exit_code == 1);

  const auto rf = run_cli("gradcheck --scope layers --inject-fault");
  CHECK(rf.exit_code == 4);
  CHECK(rf.out.find("injected_fault") != std::string::npos);
  CHECK(rf.out.find("FAIL") != std::string::npos);
}
