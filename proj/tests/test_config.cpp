#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "qcfuse/config.hpp"

using namespace qcfuse;

TEST(Settings, DefaultsAreValid) {
  const Settings s;
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.model.n_layers, 4);
  EXPECT_EQ(s.model.critical_layer, 2);
  EXPECT_DOUBLE_EQ(s.store.anchor_ratio, 0.05);
  EXPECT_DOUBLE_EQ(s.fusion.cost.compute_alpha, 1e-9);
  EXPECT_DOUBLE_EQ(s.fusion.cost.compute_beta, 1e-4);
  EXPECT_DOUBLE_EQ(s.fusion.cost.decode_gamma, 1e-3);
  EXPECT_EQ(s.fusion.max_new_tokens, 32);
  EXPECT_EQ(s.chunk_tokens, 64);
}

TEST(Settings, ParseCommentsAndWhitespace) {
  const auto s = parse_settings(
      "# a comment\n"
      "\n"
      "  model.seed = 42   # trailing\n"
      "store.anchor_ratio=0.1\r\n"
      "fusion.aggregation = last_query_token\n"
      "fusion.epic_mode = per_chunk\n"
      "fusion.pipelined = false\n"
      "tier.anchors_resident = 0\n"
      "store.key_norm_mode = mean_all_layers\n");
  EXPECT_EQ(s.model.seed, 42u);
  EXPECT_DOUBLE_EQ(s.store.anchor_ratio, 0.1);
  EXPECT_EQ(s.fusion.aggregation, ScoreAggregation::LastQueryToken);
  EXPECT_EQ(s.fusion.epic_mode, EpicMode::PerChunk);
  EXPECT_FALSE(s.fusion.pipelined);
  EXPECT_FALSE(s.store.tier.anchors_resident);
  EXPECT_FALSE(s.fusion.cost.tier.anchors_resident);
  EXPECT_EQ(s.store.key_norm_mode, KeyNormMode::MeanAllLayers);
}

TEST(Settings, DerivesDependentShapes) {
  const auto s = parse_settings("model.n_layers = 8\nmodel.n_heads = 4\nmodel.d_model = 64\n");
  EXPECT_EQ(s.model.d_head, 16);
  EXPECT_EQ(s.model.d_ff, 256);
  EXPECT_EQ(s.model.critical_layer, 4);
  const auto odd = parse_settings("model.n_layers = 7\n");
  EXPECT_EQ(odd.model.critical_layer, 4);
  const auto pinned = parse_settings("model.n_layers = 8\nmodel.critical_layer = 3\n");
  EXPECT_EQ(pinned.model.critical_layer, 3);
}

TEST(Settings, TierMirroredIntoCost) {
  const auto s = parse_settings("tier.ssd_base_latency = 0.5\ntier.ssd_bandwidth = 2e6\n");
  EXPECT_DOUBLE_EQ(s.fusion.cost.tier.ssd_base_latency, 0.5);
  EXPECT_DOUBLE_EQ(s.fusion.cost.tier.ssd_bandwidth, 2e6);
}

TEST(Settings, Errors) {
  EXPECT_THROW(parse_settings("nonsense\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.unknown = 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.seed = 1\nmodel.seed = 2\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.seed = abc\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.n_layers = 4x\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("cost.compute_alpha = 1e-9z\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("fusion.pipelined = maybe\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("fusion.aggregation = median\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("store.key_norm_mode = max\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("store.anchor_ratio = 0\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("store.anchor_ratio = 1.5\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.n_layers = 3\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.d_model = 30\nmodel.n_heads = 4\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("model.critical_layer = 4\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("cost.decode_gamma = -1\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("tier.ssd_bandwidth = 0\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("fusion.max_new_tokens = 0\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("bench.top_k = 0\n"), std::invalid_argument);
  EXPECT_THROW(parse_settings("bench.chunk_tokens = -2\n"), std::invalid_argument);
}

TEST(Settings, RenderRoundTrips) {
  const auto s = parse_settings(
      "model.n_layers = 6\nmodel.seed = 99\nstore.anchor_ratio = 0.125\ncost.compute_alpha = 3.3e-9\n"
      "fusion.random_seed = 18446744073709551615\nbench.top_k = 2\n");
  const std::string text = s.render();
  const auto back = parse_settings(text);
  EXPECT_EQ(back.render(), text);
  EXPECT_EQ(back.model.canonical(), s.model.canonical());
  EXPECT_EQ(back.fusion.random_seed, UINT64_MAX);
  EXPECT_DOUBLE_EQ(back.fusion.cost.compute_alpha, 3.3e-9);
}

TEST(Settings, LoadFromFileAndEnv) {
  const auto path = std::filesystem::temp_directory_path() / "qcfuse_test_config.txt";
  std::ofstream(path) << "model.seed = 5\nbench.chunk_tokens = 32\n";
  EXPECT_EQ(load_settings(path).chunk_tokens, 32);
  EXPECT_THROW(load_settings(path.string() + ".missing"), std::runtime_error);

  ::setenv("QCFUSE_CONFIG", path.c_str(), 1);
  EXPECT_EQ(settings_from_env().model.seed, 5u);
  ::setenv("QCFUSE_CONFIG", "", 1);
  EXPECT_EQ(settings_from_env().model.seed, 7u);
  ::unsetenv("QCFUSE_CONFIG");
  EXPECT_EQ(settings_from_env().chunk_tokens, 64);
  std::filesystem::remove(path);
}
