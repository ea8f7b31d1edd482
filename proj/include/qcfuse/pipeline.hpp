#pragma once

#include <span>
#include <vector>

#include "qcfuse/kv_store.hpp"
#include "qcfuse/model.hpp"
#include "qcfuse/policy.hpp"

namespace qcfuse {

// Declared cost model on a virtual clock; none of these are measurements.
struct CostModel {
  double compute_alpha = 1e-9;  // seconds per (selected token × context token × head × dim)
  double compute_beta = 1e-4;   // fixed seconds per layer
  double decode_gamma = 1e-3;   // seconds per generated-token forward
  TierConfig tier;

  void validate() const;
};

struct LayerTimes {
  double fetch = 0.0;
  double compute = 0.0;
};

LayerTimes layer_times(int n_sel, int n_ctx, const ModelConfig& config, const CostModel& cost);

struct StageTimes {
  double fetch_start = 0.0;
  double fetch_end = 0.0;
  double compute_start = 0.0;
  double compute_end = 0.0;
};

struct ScheduleTrace {
  std::vector<StageTimes> layers;
  double pre_phase = 0.0;
  double ttft_core = 0.0;  // end of the last layer's compute
  double ttft = 0.0;       // ttft_core plus the first decode step, when the caller adds it
  bool pipelined = true;
};

// Single fetch channel; layer i+1 is fetched while layer i computes.
ScheduleTrace schedule_pipelined(std::span<const double> fetch, std::span<const double> compute, double pre_phase);
// Fetch then compute, one layer at a time.
ScheduleTrace schedule_sequential(std::span<const double> fetch, std::span<const double> compute, double pre_phase);

struct PrephaseInputs {
  int n_ctx = 0;
  int n_query = 0;
  int n_probe_past = 1;  // rows in the anchor probe past, BOS included
};

double policy_prephase(Policy policy, const ModelConfig& config, const CostModel& cost, const PrephaseInputs& in);

struct PolicyPlan {
  std::vector<double> fetch;
  std::vector<double> compute;
  double pre_phase = 0.0;
};

// Per-layer fetch/compute durations and pre-phase cost of a policy that
// recomputes `n_sel` tokens.
PolicyPlan plan_policy(Policy policy, int n_sel, const ModelConfig& config, const CostModel& cost,
                       const PrephaseInputs& in);

// plan_policy + schedule + one decode step.
ScheduleTrace simulate_policy(Policy policy, int n_sel, const ModelConfig& config, const CostModel& cost,
                              const PrephaseInputs& in, bool pipelined = true);

}  // namespace qcfuse
