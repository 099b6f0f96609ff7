#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfcredit/env.hpp"
#include "cfcredit/errors.hpp"
#include "cfcredit/policy.hpp"

namespace cfcredit {

struct OptimizerConfig {
  double clip_eps = 0.2;
  double kl_beta = 0.02;
  double learning_rate = 0.05;  ///< linear-softmax default
  double norm_delta = 1e-8;
  double grad_clip_norm = 1.0;

  void validate() const {
    require_config(clip_eps > 0.0 && clip_eps < 1.0,
                   "clip_eps must lie in (0,1), got ", clip_eps);
    require_config(kl_beta >= 0.0, "kl_beta must be nonnegative");
    require_config(norm_delta > 0.0, "norm_delta must be positive");
    require_config(learning_rate > 0.0, "learning_rate must be positive");
    require_config(grad_clip_norm > 0.0, "grad_clip_norm must be positive");
  }
};

/// Adapter-scale settings; far too slow for linear-softmax policies but kept
/// available as a named preset.
inline OptimizerConfig paper_llm_config() {
  OptimizerConfig cfg;
  cfg.learning_rate = 1e-5;
  return cfg;
}

inline OptimizerConfig optimizer_config_preset(const std::string& name) {
  if (name == "default") return OptimizerConfig{};
  if (name == "paper-llm") return paper_llm_config();
  throw ConfigError("unknown optimizer preset \"" + name + "\"");
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

/// Frozen copy of a policy set. Stored by value; nothing mutates it after
/// capture.
struct PolicySnapshot {
  std::vector<AgentPolicy> policies;

  const AgentPolicy& agent(int i) const {
    require_usage(i >= 0 && i < static_cast<int>(policies.size()),
                  "snapshot has no agent ", i);
    return policies[static_cast<std::size_t>(i)];
  }
};

inline PolicySnapshot capture_snapshot(const std::vector<AgentPolicy>& policies) {
  return PolicySnapshot{policies};
}

inline nlohmann::json policies_to_json(const std::vector<AgentPolicy>& policies) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& pol : policies) {
    std::vector<double> flat(pol.theta.data(),
                             pol.theta.data() + pol.theta.size());
    out.push_back({{"agent", pol.agent},
                   {"conditioning", to_string(pol.conditioning)},
                   {"rows", pol.theta.rows()},
                   {"cols", pol.theta.cols()},
                   {"theta", flat}});
  }
  return out;
}

inline std::vector<AgentPolicy> policies_from_json(const nlohmann::json& j) {
  std::vector<AgentPolicy> out;
  for (const auto& pj : j) {
    AgentPolicy pol;
    pol.agent = pj.at("agent").get<int>();
    pol.conditioning = conditioning_from_string(pj.at("conditioning").get<std::string>());
    const auto rows = pj.at("rows").get<long>();
    const auto cols = pj.at("cols").get<long>();
    const auto flat = pj.at("theta").get<std::vector<double>>();
    require_config(static_cast<long>(flat.size()) == rows * cols,
                   "theta payload size mismatch");
    pol.theta = Eigen::Map<const Eigen::MatrixXd>(flat.data(), rows, cols);
    out.push_back(std::move(pol));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Group-normalized advantages
// ---------------------------------------------------------------------------

/// (x_n - mean) / (population std + delta). Needs at least two samples.
inline std::vector<double> group_normalized_advantages(
    const std::vector<double>& signals, double delta) {
  const auto n = signals.size();
  require_usage(n >= 2, "group normalization needs at least 2 samples, got ", n);
  require_usage(delta > 0.0, "normalization delta must be positive");
  double mean = 0.0;
  for (double s : signals) mean += s;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double s : signals) var += (s - mean) * (s - mean);
  var /= static_cast<double>(n);
  const double denom = std::sqrt(var) + delta;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (signals[i] - mean) / denom;
  return out;
}

// ---------------------------------------------------------------------------
// REINFORCE
// ---------------------------------------------------------------------------

struct ReinforceSample {
  ConditioningInput z;
  Proposal action;
  double signal = 0.0;
};

namespace detail {

inline void clip_gradient_norm(Eigen::MatrixXd& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm) grad *= max_norm / norm;
}

}  // namespace detail

/// One ascent step on (1/B) sum psi(z, a) * signal with global norm clipping.
inline AgentPolicy reinforce_update(const AgentPolicy& policy,
                                    const std::vector<ReinforceSample>& batch,
                                    double learning_rate,
                                    double grad_clip_norm = 1.0) {
  require_usage(!batch.empty(), "reinforce_update needs a non-empty batch");
  Eigen::MatrixXd grad =
      Eigen::MatrixXd::Zero(policy.theta.rows(), policy.theta.cols());
  for (const auto& sample : batch) {
    require_usage(std::isfinite(sample.signal), "non-finite training signal");
    grad += logprob_grad(policy, sample.z, sample.action) * sample.signal;
  }
  grad /= static_cast<double>(batch.size());
  detail::clip_gradient_norm(grad, grad_clip_norm);
  AgentPolicy out = policy;
  out.theta += learning_rate * grad;
  return out;
}

// ---------------------------------------------------------------------------
// GRPO
// ---------------------------------------------------------------------------

/// One joint rollout inside a group: proposals of all agents, their
/// collection-time log-probabilities, and the per-agent training signals.
struct GrpoSample {
  std::vector<Proposal> proposals;
  std::vector<double> logprobs;
  std::vector<double> signals;
};

/// N joint rollouts sharing one context.
struct GrpoGroup {
  Context context;
  std::vector<GrpoSample> samples;
};

/// Exact KL(pi_theta(.|z) || pi_ref(.|z)) summed over the vocabulary.
inline double kl_divergence(const AgentPolicy& policy,
                            const AgentPolicy& reference,
                            const ConditioningInput& z) {
  const Eigen::VectorXd p = action_probabilities(policy, z);
  const Eigen::VectorXd q = action_probabilities(reference, z);
  double kl = 0.0;
  for (int v = 0; v < p.size(); ++v) kl += p[v] * std::log(p[v] / q[v]);
  return kl;
}

/// Gradient step on the clipped surrogate
///   mean over samples of min(rho * A, clip(rho, 1-eps, 1+eps) * A)
/// minus kl_beta times the exact KL to the reference policy at each
/// encountered conditioning input. rho is the single-symbol probability
/// ratio against the old snapshot.
inline AgentPolicy grpo_update(const AgentPolicy& policy, const EnvSpec& env,
                               const std::vector<GrpoGroup>& groups,
                               const PolicySnapshot& old_snapshot,
                               const PolicySnapshot& ref_snapshot,
                               const OptimizerConfig& cfg) {
  cfg.validate();
  require_usage(!groups.empty(), "grpo_update needs at least one group");
  const int i = policy.agent;
  const AgentPolicy& old_policy = old_snapshot.agent(i);
  const AgentPolicy& ref_policy = ref_snapshot.agent(i);
  const Conditioning mode = policy.conditioning;

  Eigen::MatrixXd grad =
      Eigen::MatrixXd::Zero(policy.theta.rows(), policy.theta.cols());
  long count = 0;
  for (const auto& group : groups) {
    std::vector<double> signals;
    signals.reserve(group.samples.size());
    for (const auto& sample : group.samples)
      signals.push_back(sample.signals[static_cast<std::size_t>(i)]);
    const std::vector<double> advantages =
        group_normalized_advantages(signals, cfg.norm_delta);

    for (std::size_t n = 0; n < group.samples.size(); ++n) {
      const auto& sample = group.samples[n];
      const std::vector<Proposal> prefix(sample.proposals.begin(),
                                         sample.proposals.begin() + i);
      const auto z = make_conditioning(
          env, mode, group.context,
          mode == Conditioning::Autoregressive ? prefix
                                               : std::vector<Proposal>{});
      const Proposal& action = sample.proposals[static_cast<std::size_t>(i)];
      const double p_new = action_probabilities(policy, z)[action.token];
      const double p_old = action_probabilities(old_policy, z)[action.token];
      const double rho = p_new / p_old;
      require_usage(std::isfinite(rho), "non-finite probability ratio for agent ",
                    i, "; the old policy assigns zero mass to a realized action");
      const double advantage = advantages[n];
      // the clipped branch is a constant in theta: no gradient flows when
      // the ratio is saturated against the sign of the advantage
      const bool clipped_out = (advantage > 0.0 && rho > 1.0 + cfg.clip_eps) ||
                               (advantage < 0.0 && rho < 1.0 - cfg.clip_eps);
      if (!clipped_out)
        grad += advantage * rho * logprob_grad(policy, z, action);
      if (cfg.kl_beta > 0.0) {
        const Eigen::VectorXd p = action_probabilities(policy, z);
        const Eigen::VectorXd q = action_probabilities(ref_policy, z);
        Eigen::VectorXd coeff(p.size());
        for (int v = 0; v < p.size(); ++v)
          coeff[v] = p[v] * std::log(p[v] / q[v]);
        // d KL / d theta = sum_v p_v log(p_v/q_v) outer(z, e_v - p)
        grad -= cfg.kl_beta *
                (z.encoded * (coeff.transpose() -
                              coeff.sum() * p.transpose()));
      }
      ++count;
    }
  }
  grad /= static_cast<double>(count);
  detail::clip_gradient_norm(grad, cfg.grad_clip_norm);
  AgentPolicy out = policy;
  out.theta += cfg.learning_rate * grad;
  return out;
}

}  // namespace cfcredit
