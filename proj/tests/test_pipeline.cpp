#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "qcfuse/pipeline.hpp"
#include "qcfuse/splitmix.hpp"

using namespace qcfuse;

namespace {

std::vector<double> random_durations(SplitMix64& rng, int n, double zero_prob = 0.2) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform() < zero_prob ? 0.0 : rng.uniform() * 5.0;
  return v;
}

// Event-by-event reference: a single fetch queue feeding a single compute unit.
double reference_pipelined(const std::vector<double>& f, const std::vector<double>& c, double pre) {
  double fetch_done = pre, compute_done = pre;
  for (size_t i = 0; i < f.size(); ++i) {
    fetch_done += f[i];
    compute_done = std::max(compute_done, fetch_done) + c[i];
  }
  return compute_done;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(Schedule, HandCase) {
  const std::vector<double> f = {2, 2, 2}, c = {3, 3, 3};
  const auto p = schedule_pipelined(f, c, 0.0);
  ASSERT_EQ(p.layers.size(), 3u);
  EXPECT_DOUBLE_EQ(p.layers[0].compute_end, 5.0);
  EXPECT_DOUBLE_EQ(p.layers[1].compute_end, 8.0);
  EXPECT_DOUBLE_EQ(p.layers[2].compute_end, 11.0);
  EXPECT_DOUBLE_EQ(p.ttft_core, 11.0);
  EXPECT_DOUBLE_EQ(schedule_sequential(f, c, 0.0).ttft_core, 15.0);
}

TEST(Schedule, Limits) {
  const std::vector<double> zeros = {0, 0, 0}, c = {1, 2, 3}, f = {4, 5, 6};
  EXPECT_DOUBLE_EQ(schedule_pipelined(zeros, c, 0.0).ttft_core, 6.0);
  EXPECT_DOUBLE_EQ(schedule_pipelined(f, zeros, 0.0).ttft_core, 15.0);
  EXPECT_DOUBLE_EQ(schedule_sequential(std::vector<double>{}, std::vector<double>{}, 0.0).ttft_core, 0.0);
  EXPECT_DOUBLE_EQ(schedule_pipelined(std::vector<double>{}, std::vector<double>{}, 0.5).ttft_core, 0.5);
  EXPECT_DOUBLE_EQ(schedule_pipelined(std::vector<double>{2}, std::vector<double>{3}, 1.0).ttft_core,
                   schedule_sequential(std::vector<double>{2}, std::vector<double>{3}, 1.0).ttft_core);
}

TEST(Schedule, LengthMismatchThrows) {
  EXPECT_THROW(schedule_pipelined(std::vector<double>{1, 2}, std::vector<double>{1}, 0.0), std::invalid_argument);
  EXPECT_THROW(schedule_sequential(std::vector<double>{1}, std::vector<double>{}, 0.0), std::invalid_argument);
}

TEST(Schedule, RandomLaws) {
  SplitMix64 rng(2718);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(12));
    const auto f = random_durations(rng, n), c = random_durations(rng, n);
    const double pre = rng.below(4) == 0 ? 0.0 : rng.uniform() * 3.0;
    const auto p = schedule_pipelined(f, c, pre);
    const auto s = schedule_sequential(f, c, pre);

    EXPECT_NEAR(p.ttft_core, reference_pipelined(f, c, pre), 1e-12);
    EXPECT_NEAR(s.ttft_core, pre + sum(f) + sum(c), 1e-9);
    EXPECT_LE(p.ttft_core, s.ttft_core + 1e-12);
    EXPECT_GE(p.ttft_core + 1e-12, pre + sum(c));
    EXPECT_GE(p.ttft_core + 1e-12, pre + sum(f) + c.back());

    for (int i = 0; i < n; ++i) {
      const auto& st = p.layers[i];
      EXPECT_NEAR(st.fetch_end - st.fetch_start, f[i], 1e-12);
      EXPECT_NEAR(st.compute_end - st.compute_start, c[i], 1e-12);
      EXPECT_GE(st.compute_start + 1e-12, st.fetch_end);
      if (i > 0) {
        EXPECT_DOUBLE_EQ(st.fetch_start, p.layers[i - 1].fetch_end);
        EXPECT_GE(st.compute_start + 1e-12, p.layers[i - 1].compute_end);
      }
    }

    // Monotone in every input.
    const int k = static_cast<int>(rng.below(n));
    const double bump = rng.uniform();
    auto f2 = f, c2 = c;
    f2[k] += bump;
    c2[k] += bump;
    EXPECT_GE(schedule_pipelined(f2, c, pre).ttft_core + 1e-12, p.ttft_core);
    EXPECT_GE(schedule_pipelined(f, c2, pre).ttft_core + 1e-12, p.ttft_core);
    EXPECT_GE(schedule_pipelined(f, c, pre + bump).ttft_core + 1e-12, p.ttft_core);

    // Fetches after the first at zero: nothing left to overlap.
    auto f3 = f;
    std::fill(f3.begin() + 1, f3.end(), 0.0);
    EXPECT_NEAR(schedule_pipelined(f3, c, pre).ttft_core, schedule_sequential(f3, c, pre).ttft_core, 1e-9);
  }
}

TEST(LayerTimes, Examples) {
  auto cfg = make_config(4, 2, 16, 1);  // d_head 8
  CostModel cost;
  cost.tier.ssd_base_latency = 0.001;
  cost.tier.ssd_bandwidth = 1e6;
  EXPECT_DOUBLE_EQ(layer_times(0, 8, cfg, cost).fetch, 0.002024);
  EXPECT_DOUBLE_EQ(layer_times(0, 8, cfg, cost).compute, cost.compute_beta);
  const double a1 = layer_times(5, 100, cfg, cost).compute - cost.compute_beta;
  const double a2 = layer_times(10, 100, cfg, cost).compute - cost.compute_beta;
  EXPECT_DOUBLE_EQ(a2, 2.0 * a1);
  EXPECT_DOUBLE_EQ(a1, 1e-9 * 5 * 100 * 16);
}

TEST(CostModel, Validate) {
  CostModel cost;
  EXPECT_NO_THROW(cost.validate());
  cost.compute_alpha = -1.0;
  EXPECT_THROW(cost.validate(), std::invalid_argument);
  cost.compute_alpha = 0.0;
  cost.tier.ssd_bandwidth = 0.0;
  EXPECT_THROW(cost.validate(), std::invalid_argument);
}

TEST(PolicyPlan, Compositions) {
  const auto cfg = make_config(6, 2, 32, 1);
  const CostModel cost;
  PrephaseInputs in;
  in.n_ctx = 200;
  in.n_query = 8;
  in.n_probe_past = 11;
  const double layer_fetch = layer_times(0, in.n_ctx, cfg, cost).fetch;

  const auto reuse = plan_policy(Policy::FullReuse, 0, cfg, cost, in);
  EXPECT_EQ(reuse.pre_phase, 0.0);
  for (double c : reuse.compute) EXPECT_EQ(c, 0.0);
  for (double f : reuse.fetch) EXPECT_DOUBLE_EQ(f, layer_fetch);

  const auto full = plan_policy(Policy::FullCompute, 40, cfg, cost, in);
  EXPECT_EQ(full.pre_phase, 0.0);
  for (double f : full.fetch) EXPECT_EQ(f, 0.0);
  for (double c : full.compute) EXPECT_DOUBLE_EQ(c, layer_times(in.n_ctx, in.n_ctx, cfg, cost).compute);

  const auto all = plan_policy(Policy::QCAll, 40, cfg, cost, in);
  for (double f : all.fetch) EXPECT_EQ(f, 0.0);
  EXPECT_GE(all.pre_phase, 6 * layer_fetch);

  const auto qc = plan_policy(Policy::QCFuse, 40, cfg, cost, in);
  EXPECT_LT(qc.pre_phase, all.pre_phase);
  // Probe over the anchors plus one key-only fetch: cheaper than one full layer fetch plus that compute.
  const double key_fetch = cost.tier.fetch_seconds(200ULL * 2 * 16 * 4);
  EXPECT_GT(qc.pre_phase, key_fetch);

  const auto blend = plan_policy(Policy::CacheBlend, 40, cfg, cost, in);
  EXPECT_EQ(blend.fetch[0], 0.0);
  EXPECT_DOUBLE_EQ(blend.pre_phase, layer_fetch + layer_times(in.n_ctx, in.n_ctx, cfg, cost).compute);
  EXPECT_DOUBLE_EQ(plan_policy(Policy::KVShare, 40, cfg, cost, in).pre_phase, blend.pre_phase);

  for (Policy p : {Policy::Random, Policy::EPIC}) EXPECT_EQ(plan_policy(p, 40, cfg, cost, in).pre_phase, 0.0);
}

TEST(PolicyPlan, NonResidentAnchorsAddFetch) {
  const auto cfg = make_config(4, 2, 16, 1);
  CostModel cost;
  PrephaseInputs in{100, 6, 6};
  const double resident = policy_prephase(Policy::QCFuse, cfg, cost, in);
  cost.tier.anchors_resident = false;
  const double remote = policy_prephase(Policy::QCFuse, cfg, cost, in);
  EXPECT_DOUBLE_EQ(remote - resident, cost.tier.fetch_seconds(2ULL * 4 * 5 * 2 * 8 * 4));
}

TEST(PolicyPlan, QCFuseNeverSlowerThanQCAll) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const int layers = 1 + static_cast<int>(rng.below(16));
    const int heads = 1 + static_cast<int>(rng.below(4));
    const auto cfg = make_config(std::max(layers, 4), heads, heads * 2 * (1 + static_cast<int>(rng.below(8))), 1);
    CostModel cost;
    cost.compute_alpha = rng.uniform() * 1e-8;
    cost.compute_beta = rng.uniform() * 1e-3;
    cost.tier.ssd_base_latency = 1e-6 + rng.uniform() * 1e-3;
    cost.tier.ssd_bandwidth = 1e6 + rng.uniform() * 1e10;
    PrephaseInputs in;
    in.n_ctx = 1 + static_cast<int>(rng.below(500));
    in.n_query = 1 + static_cast<int>(rng.below(20));
    in.n_probe_past = 1 + ceil_count(0.05, in.n_ctx);
    const int n_sel = ceil_count(rng.uniform(), in.n_ctx);
    for (bool pipelined : {true, false}) {
      const double qc = simulate_policy(Policy::QCFuse, n_sel, cfg, cost, in, pipelined).ttft;
      const double all = simulate_policy(Policy::QCAll, n_sel, cfg, cost, in, pipelined).ttft;
      EXPECT_LE(qc, all + 1e-15) << "trial " << trial;
    }
  }
}

TEST(SimulatePolicy, AddsOneDecodeStep) {
  const auto cfg = make_config(4, 2, 16, 1);
  const CostModel cost;
  PrephaseInputs in{64, 4, 5};
  const auto s = simulate_policy(Policy::FullReuse, 0, cfg, cost, in);
  EXPECT_DOUBLE_EQ(s.ttft, s.ttft_core + cost.decode_gamma);
  EXPECT_NEAR(s.ttft_core, 4 * layer_times(0, 64, cfg, cost).fetch, 1e-15);
  const auto seq = simulate_policy(Policy::QCFuse, 10, cfg, cost, in, false);
  EXPECT_FALSE(seq.pipelined);
  EXPECT_GE(seq.ttft, simulate_policy(Policy::QCFuse, 10, cfg, cost, in, true).ttft);
}
