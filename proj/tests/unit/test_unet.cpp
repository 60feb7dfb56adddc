#include <gtest/gtest.h>

#include <cstring>
#include <set>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "vndiff/binary_io.hpp"
#include "vndiff/checkpoint.hpp"
#include "vndiff/error.hpp"
#include "vndiff/unet.hpp"

using namespace vndiff;

namespace {

std::vector<float> flat_params(const UNet& net) {
  std::vector<float> out;
  net.for_each_parameter([&](const std::string&, const Parameter<float>& p) {
    out.insert(out.end(), p.value.values().begin(), p.value.values().end());
  });
  return out;
}

}  // namespace

TEST(UNetConfig, Validation) {
  UNetConfig c;
  c.patch_edge = 10;
  c.levels = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_THROW(UNet(c, 0), ParameterError);
  c.patch_edge = 16;
  EXPECT_NO_THROW(c.validate());
  c.channel_mult = {1, 2};
  EXPECT_THROW(c.validate(), ParameterError);
  c = UNetConfig{};
  c.time_embed_dim = 7;
  EXPECT_THROW(c.validate(), ParameterError);
  c = UNetConfig{};
  c.base_channels = 0;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(UNetConfig, JsonRoundTripAndUnknownKeys) {
  const UNetConfig c = testutil::toy_config(16);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<UNetConfig>(), c);
  nlohmann::json bad = j;
  bad["dropout"] = 0.1;
  EXPECT_THROW(bad.get<UNetConfig>(), ParameterError);
}

TEST(BuildUNet, DeterministicFromSeed) {
  const auto a = flat_params(build_unet<float>(testutil::toy_config(), 5));
  const auto b = flat_params(build_unet<float>(testutil::toy_config(), 5));
  const auto c = flat_params(build_unet<float>(testutil::toy_config(), 6));
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
  EXPECT_NE(0, std::memcmp(a.data(), c.data(), a.size() * sizeof(float)));
}

// Counted by hand for levels=2, base=4, mult=[1,2], blocks=1, temb=8, in=1:
//   time MLP            2 * (8*8 + 8)                               144
//   input conv          27*1*4 + 4                                  112
//   encoder level 0     res(4,4) 924 + down conv 436               1360
//   encoder level 1     res(4,8) incl. 1x1 skip                    2744
//   middle              res(8,8)                                   3576
//   decoder level 0     res(8,4) incl. skip                        1400
//   decoder level 1     res(16,8) 5456 + up conv(8->4) 868         6324
//   output              norm 8 + conv 27*4 + 1                      117
// with res(i,o) = 2i + (27 i o + o) + (8 o + o) + 2o + (27 o o + o) [+ i o + o].
TEST(BuildUNet, ToyParameterCountMatchesHandCount) {
  const UNet net(testutil::toy_config(), 0);
  EXPECT_EQ(net.parameter_count(), 15777u);
  EXPECT_EQ(unet_parameter_count(testutil::toy_config()), 15777u);
}

TEST(BuildUNet, FormulaMatchesConstruction) {
  std::vector<UNetConfig> configs{testutil::toy_config(), UNetConfig{}};
  UNetConfig c3 = testutil::toy_config(16);
  c3.levels = 3;
  c3.channel_mult = {1, 2, 3};
  c3.blocks_per_level = 2;
  c3.in_channels = 2;
  configs.push_back(c3);
  for (const auto& c : configs) {
    const UNet net(c, 1);
    std::size_t n = 0;
    net.for_each_parameter([&](const std::string&, const Parameter<float>& p) { n += p.value.size(); });
    EXPECT_EQ(n, unet_parameter_count(c));
    EXPECT_EQ(net.parameter_count(), n);
  }
}

TEST(BuildUNet, ParameterNamesAreUnique) {
  const UNet net(UNetConfig{}, 0);
  std::set<std::string> names;
  net.for_each_parameter([&](const std::string& n, const Parameter<float>&) { EXPECT_TRUE(names.insert(n).second) << n; });
  EXPECT_TRUE(names.contains("input.weight"));
  EXPECT_TRUE(names.contains("output.conv.weight"));
  EXPECT_TRUE(names.contains("middle.conv1.weight"));
}

TEST(TimeEmbedding, Basics) {
  const auto e0 = time_embedding(0, 16);
  ASSERT_EQ(e0.size(), 16u);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(e0[i], i % 2 == 0 ? 0.0 : 1.0);
  EXPECT_THROW(time_embedding(3, 7), ParameterError);
  EXPECT_EQ(time_embedding(5, 32).size(), 32u);
}

TEST(TimeEmbedding, PairwiseDistinctOverSchedule) {
  std::vector<std::vector<double>> all;
  for (int t = 0; t < 1000; ++t) all.push_back(time_embedding(t, 32));
  double min_dist = INFINITY;
  for (int a = 0; a < 1000; ++a)
    for (int b = a + 1; b < 1000; ++b) {
      double d = 0.0;
      for (int i = 0; i < 32; ++i) d += (all[a][i] - all[b][i]) * (all[a][i] - all[b][i]);
      min_dist = std::min(min_dist, d);
    }
  EXPECT_GT(min_dist, 1e-6);
}

TEST(UNetForward, ZeroInitOutputAndShapes) {
  for (int edge : {16, 32}) {
    UNetConfig c = testutil::toy_config(edge);
    UNet net(c, 3);
    const auto x = testutil::random_tensor({1, edge, edge, edge}, 4);
    Graph<float> g(GradMode::disabled);
    const auto out = net.forward(g, g.constant(x), 100);
    const auto& eps = g.value(out.eps);
    EXPECT_EQ(eps.shape(), x.shape());
    for (float v : eps.values()) EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(g.value(out.features).shape(), (Shape{8, edge / 2, edge / 2, edge / 2}));
    ASSERT_EQ(out.skips.size(), 2u);
    EXPECT_EQ(g.value(out.skips[0]).shape(), (Shape{4, edge, edge, edge}));
  }
}

TEST(UNetForward, NonCubicAndBadShapes) {
  UNet net(testutil::toy_config(8), 3);
  EXPECT_EQ(net.predict(testutil::random_tensor({1, 8, 16, 4}, 1), 7).shape(), (Shape{1, 8, 16, 4}));
  EXPECT_THROW(net.predict(testutil::random_tensor({1, 8, 7, 8}, 1), 7), ShapeError);
  EXPECT_THROW(net.predict(testutil::random_tensor({2, 8, 8, 8}, 1), 7), ShapeError);
}

TEST(UNetForward, EncoderPerturbationChangesOutput) {
  UNet net(testutil::toy_config(8), 3);
  testutil::randomize_all(net, 2, 0.1);
  const auto x = testutil::random_tensor({1, 8, 8, 8}, 6);
  const auto before = net.predict(x, 50);
  net.encoder()[0].blocks[0].conv1.weight.value[3] += 0.5f;
  const auto after = net.predict(x, 50);
  double diff = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) diff += std::abs(before[i] - after[i]);
  EXPECT_GT(diff, 1e-4);
}

TEST(UNetForward, DeterministicAndFiniteOnWideInputs) {
  UNet net(testutil::toy_config(8), 3);
  testutil::randomize_all(net, 2, 0.1);
  auto x = testutil::random_tensor({1, 8, 8, 8}, 6);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] * 2.0f, -3.0f, 3.0f);
  const auto a = net.predict(x, 999);
  const auto b = net.predict(x, 999);
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
  for (float v : a.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(UNetForward, TimestepMatters) {
  UNet net(testutil::toy_config(8), 3);
  testutil::randomize_all(net, 2, 0.1);
  const auto x = testutil::random_tensor({1, 8, 8, 8}, 6);
  const auto a = net.predict(x, 10);
  const auto b = net.predict(x, 900);
  EXPECT_NE(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
}

TEST(UNetFreeze, FrozenNetworkAccumulatesNoGradient) {
  UNet net(testutil::toy_config(8), 3);
  testutil::randomize_all(net, 2, 0.1);
  net.set_frozen(true);
  Graph<float> g;
  const auto x = testutil::random_tensor({1, 8, 8, 8}, 6);
  Var in = g.constant(x);
  auto out = net.forward(g, in, 5);
  EXPECT_FALSE(g.requires_grad(out.eps));
  net.for_each_parameter([](const std::string& n, const Parameter<float>& p) {
    EXPECT_FALSE(p.requires_grad) << n;
    EXPECT_TRUE(p.grad.empty() || std::all_of(p.grad.values().begin(), p.grad.values().end(), [](float v) { return v == 0; }));
  });
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override { dir_ = testutil::temp_dir("ckpt"); }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  UNet net(testutil::toy_config(8), 3);
  testutil::randomize_all(net, 2, 0.1);
  const auto path = dir_ / "net.vnckpt";
  save_checkpoint(net, path);
  const UNet back = load_checkpoint(path);
  EXPECT_EQ(back.config(), net.config());
  const auto a = flat_params(net), b = flat_params(back);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
  EXPECT_EQ(parameter_digest(net), parameter_digest(back));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}

TEST_F(CheckpointTest, OptimizerStateRoundTrips) {
  UNet net(testutil::toy_config(8), 3);
  TrainingState st;
  st.step = 17;
  st.optimizer.steps = 17;
  st.optimizer.first["input.weight"] = testutil::random_tensor({4, 1, 3, 3, 3}, 1);
  st.optimizer.second["input.weight"] = testutil::random_tensor({4, 1, 3, 3, 3}, 2);
  save_checkpoint(net, dir_ / "s.vnckpt", &st);
  TrainingState back;
  load_checkpoint(dir_ / "s.vnckpt", &back);
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.optimizer.steps, 17);
  const auto& m = back.optimizer.first.at("input.weight");
  EXPECT_EQ(0, std::memcmp(m.data(), st.optimizer.first["input.weight"].data(), m.size() * 4));
}

TEST_F(CheckpointTest, DistinctLoadErrors) {
  UNet net(testutil::toy_config(8), 3);
  const auto path = dir_ / "net.vnckpt";
  save_checkpoint(net, path);
  auto bytes = io::read_file(path);

  auto corrupt = bytes;
  corrupt[0] = std::byte{'X'};
  io::write_file_atomic(dir_ / "magic.vnckpt", corrupt);
  EXPECT_THROW(load_checkpoint(dir_ / "magic.vnckpt"), BadMagicError);

  std::vector<std::byte> cut(bytes.begin(), bytes.end() - 10);
  io::write_file_atomic(dir_ / "cut.vnckpt", cut);
  EXPECT_THROW(load_checkpoint(dir_ / "cut.vnckpt"), TruncatedError);
  std::vector<std::byte> tiny(bytes.begin(), bytes.begin() + 12);
  io::write_file_atomic(dir_ / "tiny.vnckpt", tiny);
  EXPECT_THROW(load_checkpoint(dir_ / "tiny.vnckpt"), TruncatedError);

  // Rename one tensor in the manifest.
  Container c = read_container(path);
  for (auto& t : c.tensors)
    if (t.name == "input.weight") t.name = "input.kernel";
  write_container(dir_ / "names.vnckpt", c.manifest, c.tensors);
  EXPECT_THROW(load_checkpoint(dir_ / "names.vnckpt"), TensorNameMismatchError);
}

// Fixed little-endian layout: a golden container built by hand.
TEST_F(CheckpointTest, ContainerByteLayoutIsLittleEndian) {
  nlohmann::json manifest{{"k", 1}};
  std::vector<NamedTensor> tensors{{"a", Shape{2}, {1.0f, -2.0f}}};
  const auto bytes = encode_container(manifest, tensors);
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(0, std::memcmp(bytes.data(), "VNCKPT1\0", 8));
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<std::uint8_t>(bytes[8 + i]);
  ASSERT_EQ(bytes.size(), 16 + len + 8);
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000, least significant byte first.
  const unsigned char tail[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(0, std::memcmp(bytes.data() + bytes.size() - 8, tail, 8));
  const auto back = decode_container(bytes);
  ASSERT_EQ(back.tensors.size(), 1u);
  EXPECT_EQ(back.tensors[0].data, (std::vector<float>{1.0f, -2.0f}));
  EXPECT_EQ(back.manifest.at("k"), 1);
}
