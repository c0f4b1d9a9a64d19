#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <unistd.h>
#include <vector>

#include "lmn/data.hpp"
#include "lmn/train.hpp"

namespace lmn {
namespace {

std::vector<std::int32_t> cyclic_ids(std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int32_t>((i * 7 + i / 13) % vocab);
  return ids;
}

ModelConfig tiny_model(std::size_t vocab) {
  ModelConfig c;
  c.variant = Variant::logmem;
  c.vocab_size = vocab;
  c.embed = 16;
  c.max_seq_len = 32;
  c.banks = 2;
  c.seed = 3;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.block_size = 32;
  t.max_iters = 5;
  t.eval_iters = 2;
  t.eval_interval = 2;
  t.learning_rate = 1e-2;
  return t;
}

double checksum(const Model<float>& m) {
  double s = 0;
  for (const auto& [name, p] : m.parameters())
    for (float x : p.data()) s += static_cast<double>(x) * 1.000001;
  return s;
}

TEST(Vocab, SortedUniqueCharacters) {
  const auto v = Vocab::build("abcab");
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.encode("cab"), (std::vector<std::int32_t>{2, 0, 1}));
}

TEST(Vocab, RoundTripIncludingMultibyte) {
  const std::string text = "na\xc3\xafve caf\xc3\xa9\n\t\xe2\x82\xac";
  const auto v = Vocab::build(text);
  EXPECT_EQ(v.size(), 12u);
  const auto ids = v.encode(text);
  EXPECT_EQ(ids.size(), 13u);
  EXPECT_EQ(v.decode(ids), text);
}

TEST(Vocab, SidecarRoundTrip) {
  const auto v = Vocab::build("hello, world\n");
  EXPECT_EQ(Vocab::from_sidecar(v.sidecar()), v);
  EXPECT_THROW(Vocab::from_sidecar("ba"), DataError);
  EXPECT_THROW(Vocab::from_sidecar("aab"), DataError);
  EXPECT_THROW(Vocab::from_sidecar(""), DataError);
}

TEST(Vocab, UnknownCharacterNamesIt) {
  const auto v = Vocab::build("abc");
  try {
    (void)v.encode("abz");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("U+7A"), std::string::npos) << e.what();
  }
  EXPECT_THROW(Vocab::build(""), DataError);
}

TEST(Dataset, SplitPoint) {
  const auto ds = Dataset::from_ids(cyclic_ids(1000, 11));
  EXPECT_EQ(ds.part(Split::train).size(), 900u);
  EXPECT_EQ(ds.part(Split::val).size(), 100u);
  EXPECT_EQ(ds.part(Split::val)[0], ds.ids[900]);
  EXPECT_THROW(Dataset::from_ids({1, 2}, 1.0), DataError);
}

TEST(Batches, TargetsAreInputsShiftedByOne) {
  const auto ds = Dataset::from_ids(cyclic_ids(5000, 23));
  Rng rng(1);
  for (Split s : {Split::train, Split::val}) {
    const auto src = ds.part(s);
    const auto b = sample_batch(ds, s, 8, 50, rng);
    ASSERT_EQ(b.inputs.size(), 400u);
    for (std::size_t i = 0; i < 8; ++i) {
      ASSERT_LE(b.offsets[i] + 50 + 1, src.size());
      for (std::size_t t = 0; t < 50; ++t) {
        EXPECT_EQ(b.inputs[i * 50 + t], src[b.offsets[i] + t]);
        EXPECT_EQ(b.targets[i * 50 + t], src[b.offsets[i] + t + 1]);
      }
    }
  }
}

TEST(Batches, DeterministicGivenSeedAndCoverEveryOffset) {
  const auto ds = Dataset::from_ids(cyclic_ids(100, 5));
  Rng a(9), b(9);
  EXPECT_EQ(sample_batch(ds, Split::train, 4, 8, a).offsets, sample_batch(ds, Split::train, 4, 8, b).offsets);
  // 90 training tokens, length 8: offsets 0..81.
  Rng rng(2);
  std::vector<int> seen(82, 0);
  for (int i = 0; i < 400; ++i)
    for (std::size_t off : sample_batch(ds, Split::train, 4, 8, rng).offsets) {
      ASSERT_LT(off, 82u);
      seen[off] = 1;
    }
  EXPECT_EQ(std::accumulate(seen.begin(), seen.end(), 0), 82);
}

TEST(Batches, ShortSplitIsRejected) {
  const auto ds = Dataset::from_ids(cyclic_ids(100, 5));
  Rng rng(3);
  EXPECT_THROW(sample_batch(ds, Split::val, 1, 10, rng), DataError);
  EXPECT_NO_THROW(sample_batch(ds, Split::val, 1, 9, rng));
}

TEST(TrainConfig, Validation) {
  const auto m = tiny_model(11);
  auto t = tiny_train();
  EXPECT_NO_THROW(t.validate(m));
  t.block_size = 33;
  EXPECT_THROW(t.validate(m), ConfigError);
  t = tiny_train();
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(m), ConfigError);
  t = tiny_train();
  EXPECT_TRUE(t.set("train.schedule", "cosine"));
  EXPECT_FALSE(t.set("train.nonsense", "1"));
  EXPECT_THROW(t.set("train.schedule", "linear"), ConfigError);
}

TEST(TrainConfig, CosineScheduleEndpoints) {
  auto t = tiny_train();
  t.schedule = Schedule::cosine;
  t.max_iters = 100;
  EXPECT_DOUBLE_EQ(t.lr_at(0), t.learning_rate);
  EXPECT_NEAR(t.lr_at(100), t.learning_rate * t.min_lr_ratio, 1e-15);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(t.lr_at(s), t.lr_at(s - 1));
}

TEST(Evaluate, UntrainedModelNearUniform) {
  const auto ds = Dataset::from_ids(cyclic_ids(4000, 11));
  const auto model = Model<float>::init(tiny_model(11));
  const auto r = evaluate(model, ds, tiny_train(), 5);
  EXPECT_NEAR(r.val_loss, std::log(11.0), 0.5);
  EXPECT_NEAR(r.train_loss, std::log(11.0), 0.5);
}

TEST(Evaluate, DeterministicAndLeavesParametersAlone) {
  const auto ds = Dataset::from_ids(cyclic_ids(4000, 11));
  const auto model = Model<float>::init(tiny_model(11));
  const double before = checksum(model);
  const auto a = evaluate(model, ds, tiny_train(), 5);
  const auto b = evaluate(model, ds, tiny_train(), 5);
  EXPECT_EQ(a.val_loss, b.val_loss);
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(checksum(model), before);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
  auto model = Model<float>::init(tiny_model(11));
  const double before = checksum(model);
  AdamW opt(model.parameters(), tiny_train());
  opt.zero_grad();
  opt.step(1e-2);
  EXPECT_EQ(checksum(model), before);
}

TEST(AdamW, FirstStepMovesEachCoordinateByLearningRate) {
  // Bias-corrected first step: m/sqrt(v) = sign(g).
  auto x = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
  NamedParams<float> params{{"x", x}};
  auto cfg = tiny_train();
  cfg.grad_clip = 0;
  AdamW opt(params, cfg);
  opt.zero_grad();
  sum(mul(x, Tensor::from({3}, {3.0f, -1.0f, 0.0f}))).backward();
  opt.step(0.1);
  EXPECT_NEAR(x[0], 0.9f, 1e-6);
  EXPECT_NEAR(x[1], -1.9f, 1e-6);
  EXPECT_NEAR(x[2], 0.5f, 1e-6);
}

TEST(AdamW, OneStepLowersLossOnSameBatch) {
  const auto ds = Dataset::from_ids(cyclic_ids(4000, 11));
  auto model = Model<float>::init(tiny_model(11));
  Rng rng(4);
  const auto b = sample_batch(ds, Split::train, 4, 32, rng);
  const auto loss_of = [&] { return lm_loss(model.forward(b.inputs, b.batch, b.length, Mode::parallel), std::span<const std::int32_t>(b.targets)); };
  AdamW opt(model.parameters(), tiny_train());
  opt.zero_grad();
  const auto before = loss_of();
  before.backward();
  opt.step(1e-3);
  NoGradGuard ng;
  EXPECT_LT(loss_of().item(), before.item());
}

TEST(Train, SmokeRunWritesArtifacts) {
  const auto dir = std::filesystem::temp_directory_path() / ("lmn_train_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  const auto ds = Dataset::from_ids(cyclic_ids(4000, 11));
  auto model = Model<float>::init(tiny_model(11));
  std::vector<std::string> lines;
  const auto report = train(model, ds, tiny_train(), TrainOutputs{dir, [&](const std::string& l) { lines.push_back(l); }});
  // Evaluations at 0, 2, 4 and the final step 5.
  ASSERT_EQ(report.rows.size(), 4u);
  EXPECT_EQ(report.rows.back().step, 5u);
  EXPECT_EQ(lines.size(), 4u);
  EXPECT_LT(report.final_val_loss, report.rows.front().val_loss);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "final.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report.csv"));
  std::filesystem::remove_all(dir);
}

TEST(Train, SameSeedSameReport) {
  const auto ds = Dataset::from_ids(cyclic_ids(4000, 11));
  auto a = Model<float>::init(tiny_model(11));
  auto b = Model<float>::init(tiny_model(11));
  const auto ra = train(a, ds, tiny_train());
  const auto rb = train(b, ds, tiny_train());
  EXPECT_EQ(ra.final_val_loss, rb.final_val_loss);
  EXPECT_EQ(checksum(a), checksum(b));
}

}  // namespace
}  // namespace lmn
