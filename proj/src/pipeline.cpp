#include "qcfuse/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

namespace qcfuse {

const char* to_string(Policy policy) {
  switch (policy) {
    case Policy::FullCompute: return "FullCompute";
    case Policy::FullReuse: return "FullReuse";
    case Policy::Random: return "Random";
    case Policy::EPIC: return "EPIC";
    case Policy::CacheBlend: return "CacheBlend";
    case Policy::KVShare: return "KVShare";
    case Policy::QCLast: return "QCLast";
    case Policy::QCAll: return "QCAll";
    case Policy::QCFuse: return "QCFuse";
  }
  return "?";
}

Policy policy_from_string(std::string_view name) {
  for (Policy p : kAllPolicies) {
    if (name == to_string(p)) return p;
  }
  throw std::invalid_argument("unknown policy: " + std::string(name));
}

void CostModel::validate() const {
  if (compute_alpha < 0.0 || compute_beta < 0.0 || decode_gamma < 0.0) {
    throw std::invalid_argument("cost model coefficients must be >= 0");
  }
  tier.validate();
}

LayerTimes layer_times(int n_sel, int n_ctx, const ModelConfig& config, const CostModel& cost) {
  const double hd = static_cast<double>(config.n_heads) * config.d_head;
  LayerTimes t;
  t.fetch = cost.tier.fetch_seconds(2ULL * n_ctx * config.n_heads * config.d_head * 4);
  t.compute = cost.compute_alpha * n_sel * static_cast<double>(n_ctx) * hd + cost.compute_beta;
  return t;
}

namespace {

void check_lengths(std::span<const double> fetch, std::span<const double> compute) {
  if (fetch.size() != compute.size()) throw std::invalid_argument("schedule: fetch/compute length mismatch");
}

}  // namespace

ScheduleTrace schedule_pipelined(std::span<const double> fetch, std::span<const double> compute, double pre_phase) {
  check_lengths(fetch, compute);
  ScheduleTrace s;
  s.pre_phase = pre_phase;
  s.pipelined = true;
  double fetch_clock = pre_phase;
  double compute_clock = pre_phase;
  for (size_t i = 0; i < fetch.size(); ++i) {
    StageTimes st;
    st.fetch_start = fetch_clock;
    st.fetch_end = fetch_clock + fetch[i];
    st.compute_start = std::max(compute_clock, st.fetch_end);
    st.compute_end = st.compute_start + compute[i];
    fetch_clock = st.fetch_end;
    compute_clock = st.compute_end;
    s.layers.push_back(st);
  }
  s.ttft_core = compute_clock;
  s.ttft = s.ttft_core;
  return s;
}

ScheduleTrace schedule_sequential(std::span<const double> fetch, std::span<const double> compute, double pre_phase) {
  check_lengths(fetch, compute);
  ScheduleTrace s;
  s.pre_phase = pre_phase;
  s.pipelined = false;
  double clock = pre_phase;
  for (size_t i = 0; i < fetch.size(); ++i) {
    StageTimes st;
    st.fetch_start = clock;
    st.fetch_end = clock + fetch[i];
    st.compute_start = st.fetch_end;
    st.compute_end = st.compute_start + compute[i];
    clock = st.compute_end;
    s.layers.push_back(st);
  }
  s.ttft_core = clock;
  s.ttft = s.ttft_core;
  return s;
}

double policy_prephase(Policy policy, const ModelConfig& config, const CostModel& cost, const PrephaseInputs& in) {
  const double hd = static_cast<double>(config.n_heads) * config.d_head;
  const int layers = config.n_layers;
  const double nq = in.n_query;
  auto probe_cost = [&](int n_past) {
    return layers * (cost.compute_alpha * nq * (n_past + nq) * hd + cost.compute_beta);
  };
  auto score_cost = [&](int n_layers_scored) {
    return n_layers_scored * (cost.compute_alpha * nq * in.n_ctx * hd + cost.compute_beta);
  };
  const double key_fetch = cost.tier.fetch_seconds(1ULL * in.n_ctx * config.n_heads * config.d_head * 4);
  const double layer_fetch = layer_times(0, in.n_ctx, config, cost).fetch;

  switch (policy) {
    case Policy::QCFuse: {
      double t = probe_cost(in.n_probe_past) + score_cost(1) + key_fetch;
      if (!cost.tier.anchors_resident) {
        const int anchors = std::max(0, in.n_probe_past - 1);
        t += cost.tier.fetch_seconds(2ULL * layers * anchors * config.n_heads * config.d_head * 4);
      }
      return t;
    }
    case Policy::QCLast:
      return probe_cost(1) + score_cost(1) + key_fetch;
    case Policy::QCAll:
      return layers * layer_fetch + probe_cost(in.n_ctx + 1) + score_cost(layers);
    case Policy::CacheBlend:
    case Policy::KVShare:
      return layer_fetch + layer_times(in.n_ctx, in.n_ctx, config, cost).compute;
    case Policy::FullCompute:
    case Policy::FullReuse:
    case Policy::Random:
    case Policy::EPIC:
      return 0.0;
  }
  return 0.0;
}

PolicyPlan plan_policy(Policy policy, int n_sel, const ModelConfig& config, const CostModel& cost,
                       const PrephaseInputs& in) {
  PolicyPlan plan;
  const int layers = config.n_layers;
  plan.pre_phase = policy_prephase(policy, config, cost, in);
  const LayerTimes t = layer_times(policy == Policy::FullCompute ? in.n_ctx : n_sel, in.n_ctx, config, cost);
  plan.fetch.assign(layers, t.fetch);
  plan.compute.assign(layers, t.compute);
  switch (policy) {
    case Policy::FullCompute:
    case Policy::QCAll:  // everything already resident after the pre-phase
      std::fill(plan.fetch.begin(), plan.fetch.end(), 0.0);
      break;
    case Policy::FullReuse:
      std::fill(plan.compute.begin(), plan.compute.end(), 0.0);
      break;
    case Policy::CacheBlend:
    case Policy::KVShare:
      plan.fetch[0] = 0.0;  // layer 1 was fetched for the deviation pass
      break;
    case Policy::QCFuse:
    case Policy::QCLast: {
      // The scored layer's keys arrived in the pre-phase; only its values remain.
      const int scored = policy == Policy::QCFuse ? config.critical_layer - 1 : layers - 1;
      plan.fetch[scored] = cost.tier.fetch_seconds(1ULL * in.n_ctx * config.n_heads * config.d_head * 4);
      break;
    }
    default:
      break;
  }
  return plan;
}

ScheduleTrace simulate_policy(Policy policy, int n_sel, const ModelConfig& config, const CostModel& cost,
                              const PrephaseInputs& in, bool pipelined) {
  const PolicyPlan plan = plan_policy(policy, n_sel, config, cost, in);
  ScheduleTrace s = pipelined ? schedule_pipelined(plan.fetch, plan.compute, plan.pre_phase)
                              : schedule_sequential(plan.fetch, plan.compute, plan.pre_phase);
  s.ttft = s.ttft_core + cost.decode_gamma;
  return s;
}

}  // namespace qcfuse
