#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfcredit/env.hpp"
#include "cfcredit/errors.hpp"
#include "cfcredit/mechanism.hpp"
#include "cfcredit/policy.hpp"
#include "cfcredit/rng.hpp"

namespace cfcredit {

enum class EstimatorKind { WinnerTakeAll, DoublyRobust, LeaveOneOut, Shared };

inline std::string to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::WinnerTakeAll: return "wta";
    case EstimatorKind::DoublyRobust: return "dr";
    case EstimatorKind::LeaveOneOut: return "loo";
    case EstimatorKind::Shared: return "shared";
  }
  return "?";
}

inline EstimatorKind estimator_kind_from_string(const std::string& s) {
  if (s == "wta") return EstimatorKind::WinnerTakeAll;
  if (s == "dr") return EstimatorKind::DoublyRobust;
  if (s == "loo") return EstimatorKind::LeaveOneOut;
  if (s == "shared") return EstimatorKind::Shared;
  throw ConfigError("unknown estimator kind \"" + s + "\"");
}

/// Per-agent training signal produced by an estimator.
struct MarginalContribution {
  int agent = 0;
  int turn = 1;
  double value = 0.0;
  EstimatorKind kind = EstimatorKind::Shared;
};

/// Estimated return-to-go if candidate j had been deployed.
struct CandidateReturnEstimate {
  int candidate = 0;
  double value = 0.0;
};

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

/// Bounded FIFO of logged observations; eviction is strictly oldest-first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 50000) : capacity_(capacity) {
    require_config(capacity_ > 0, "replay capacity must be positive");
  }

  void push(LoggedObservation obs) {
    if (records_.size() == capacity_) records_.pop_front();
    records_.push_back(std::move(obs));
  }

  std::size_t size() const { return records_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return records_.empty(); }

  const LoggedObservation& at(std::size_t i) const { return records_[i]; }

  const LoggedObservation& sample(Rng& rng) const {
    require_usage(!records_.empty(), "cannot sample from an empty replay buffer");
    return records_[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(records_.size())))];
  }

 private:
  std::size_t capacity_;
  std::deque<LoggedObservation> records_;
};

// ---------------------------------------------------------------------------
// Reward predictor
// ---------------------------------------------------------------------------

struct PredictorConfig {
  double propensity_floor = 0.05;
  double ips_clip = 3.0;
  std::size_t replay_capacity = 50000;
  int replay_batch = 64;
  double learning_rate = 0.1;
};

/// Importance weight for one logged selection:
///   min(1 / max(p, floor), clip).
inline double ips_weight(double propensity, const PredictorConfig& cfg) {
  return std::min(1.0 / std::max(propensity, cfg.propensity_floor),
                  cfg.ips_clip);
}

/// Linear predictor of the return-to-go of a candidate, trained only on
/// selected candidates with inverse-propensity weights.
struct RewardPredictor {
  Eigen::VectorXd psi;
  PredictorConfig config;

  double predict(const EnvSpec& env, const Context& ctx,
                 const Proposal& candidate) const {
    const Eigen::VectorXd f = candidate_features(env, ctx, candidate);
    require_config(f.size() == psi.size(), "predictor expects feature dim ",
                   psi.size(), ", got ", f.size());
    return psi.dot(f);
  }
};

inline RewardPredictor make_predictor(const EnvSpec& env,
                                      PredictorConfig cfg = {}) {
  return RewardPredictor{Eigen::VectorXd::Zero(candidate_feature_dim(env)), cfg};
}

inline double predict_return(const RewardPredictor& pred, const EnvSpec& env,
                             const Context& ctx, const Proposal& candidate) {
  return pred.predict(env, ctx, candidate);
}

/// One weighted stochastic gradient step on the squared error between the
/// prediction for the selected candidate and the observed return, over a
/// replay batch drawn with replacement.
inline RewardPredictor update_predictor(const RewardPredictor& pred,
                                        const EnvSpec& env,
                                        const ReplayBuffer& buffer, Rng& rng) {
  require_usage(!buffer.empty(), "update_predictor needs a non-empty buffer");
  RewardPredictor out = pred;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(out.psi.size());
  const int batch = out.config.replay_batch;
  for (int b = 0; b < batch; ++b) {
    const LoggedObservation& obs = buffer.sample(rng);
    const Proposal& chosen =
        obs.candidates[static_cast<std::size_t>(obs.selected)];
    const double w = ips_weight(obs.propensities[obs.selected], out.config);
    const Eigen::VectorXd f = candidate_features(env, obs.ctx, chosen);
    const double err = out.psi.dot(f) - obs.observed_return;
    grad += w * err * f;
  }
  out.psi -= out.config.learning_rate / batch * grad;
  return out;
}

// ---------------------------------------------------------------------------
// Doubly-robust routing estimator
// ---------------------------------------------------------------------------

/// DR estimate of candidate j's return-to-go:
///   G_hat(j) = mu(j) + 1{I=j} / p_j * (G - mu(j)).
/// For an unselected candidate this reduces to the model prediction.
/// Model is anything with predict(env, ctx, proposal) -> double.
template <class Model>
CandidateReturnEstimate dr_candidate_return(const EnvSpec& env,
                                            const LoggedObservation& obs,
                                            int j, const Model& model) {
  require_usage(j >= 0 && j < static_cast<int>(obs.candidates.size()),
                "candidate index ", j, " out of range");
  const double mu =
      model.predict(env, obs.ctx, obs.candidates[static_cast<std::size_t>(j)]);
  double value = mu;
  if (j == obs.selected) {
    const double p = obs.propensities[j];
    require_config(p > 0.0,
                   "logged propensity for the selected candidate is zero; "
                   "the logging invariant was violated");
    value += (obs.observed_return - mu) / p;
  }
  return CandidateReturnEstimate{j, value};
}

/// Routing marginal contribution of one agent:
///   sum_j p_j G_hat(j) - sum_{j != i} p^{-i}_j G_hat(j),
/// with logged propensities for p and the current router recomputed over the
/// reduced candidate set for p^{-i}.
template <class Model>
MarginalContribution routing_marginal_contribution(const EnvSpec& env,
                                                   const LoggedObservation& obs,
                                                   int agent,
                                                   const Model& model,
                                                   const Router& router) {
  const int K = static_cast<int>(obs.candidates.size());
  require_usage(K >= 2, "routing marginal contribution needs K >= 2");
  require_usage(agent >= 0 && agent < K, "agent index ", agent, " out of range");
  std::vector<double> g(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j)
    g[static_cast<std::size_t>(j)] = dr_candidate_return(env, obs, j, model).value;
  double full = 0.0;
  for (int j = 0; j < K; ++j) full += obs.propensities[j] * g[static_cast<std::size_t>(j)];
  const Eigen::VectorXd p_without = route_probabilities_without(
      router, env, obs.ctx, obs.candidates, agent);
  double removed = 0.0;
  int slot = 0;
  for (int j = 0; j < K; ++j) {
    if (j == agent) continue;
    removed += p_without[slot++] * g[static_cast<std::size_t>(j)];
  }
  return MarginalContribution{agent, obs.turn, full - removed,
                              EstimatorKind::DoublyRobust};
}

/// Naive selection-gated baseline: the observed return for the selected
/// agent, zero for everyone else.
inline MarginalContribution winner_take_all_signal(const LoggedObservation& obs,
                                                   int agent) {
  const double value = (agent == obs.selected) ? obs.observed_return : 0.0;
  return MarginalContribution{agent, obs.turn, value,
                              EstimatorKind::WinnerTakeAll};
}

/// Shared-reward baseline: every agent receives the full return.
inline MarginalContribution shared_signal(double return_to_go, int agent,
                                          int turn = 1) {
  return MarginalContribution{agent, turn, return_to_go, EstimatorKind::Shared};
}

// ---------------------------------------------------------------------------
// Leave-one-out counterfactual rollout (collaborative mechanisms)
// ---------------------------------------------------------------------------

/// Episode state at one turn: the context, the realized proposals, and the
/// realized return-to-go from this turn onward.
struct TurnState {
  Context ctx;
  std::vector<Proposal> proposals;
  double return_to_go = 0.0;
  int turn = 1;
};

namespace detail {

/// Simulates the rest of an episode after (ctx, y) was deployed at `turn`,
/// returning the realized sum of rewards including the reward at `turn`.
inline double rollout_return(const EnvSpec& env,
                             const std::vector<AgentPolicy>& policies,
                             const Mechanism& mech, Context ctx,
                             DeployedOutput y, int turn, Rng& rng) {
  double total = reward(env, ctx, y, rng);
  for (int u = turn + 1; u <= env.T; ++u) {
    ctx = transition(env, ctx, y, rng);
    const auto joint = sample_joint(env, policies, ctx, rng);
    const auto result = deploy(mech, env, ctx, joint.proposals, rng);
    y = result.output;
    total += reward(env, ctx, y, rng);
  }
  return total;
}

}  // namespace detail

/// One leave-one-out counterfactual sample: replace agent i's proposal with
/// a draw from q, resample all downstream proposals under the counterfactual
/// prefix, rerun the mechanism and environment to the horizon with fresh
/// randomness, and return G_t - G_t^{-i}.
inline MarginalContribution loo_marginal_contribution(
    const EnvSpec& env, const TurnState& state, int agent,
    const ReplacementPolicy& q, const std::vector<AgentPolicy>& policies,
    const Mechanism& mech, Rng& rng) {
  require_usage(mech.kind == MechanismKind::Aggregation,
                "leave-one-out credit is defined for collaborative "
                "(aggregation) mechanisms");
  require_usage(agent >= 0 && agent < env.K, "agent index ", agent,
                " out of range");
  const Conditioning mode = policies.front().conditioning;

  std::vector<Proposal> counterfactual(
      state.proposals.begin(), state.proposals.begin() + agent);
  const auto z = make_conditioning(
      env, mode, state.ctx,
      mode == Conditioning::Autoregressive ? counterfactual
                                           : std::vector<Proposal>{});
  counterfactual.push_back(sample_replacement(q, z, agent, env.V, rng));
  for (int j = agent + 1; j < env.K; ++j) {
    const auto zj = make_conditioning(
        env, mode, state.ctx,
        mode == Conditioning::Autoregressive ? counterfactual
                                             : std::vector<Proposal>{});
    counterfactual.push_back(
        propose(policies[static_cast<std::size_t>(j)], zj, rng).first);
  }

  const auto result = deploy(mech, env, state.ctx, counterfactual, rng);
  const double counterfactual_return = detail::rollout_return(
      env, policies, mech, state.ctx, result.output, state.turn, rng);
  return MarginalContribution{agent, state.turn,
                              state.return_to_go - counterfactual_return,
                              EstimatorKind::LeaveOneOut};
}

// ---------------------------------------------------------------------------
// Rollout-based return-to-go estimate
// ---------------------------------------------------------------------------

/// Estimates the expected return-to-go of deploying y at (ctx, turn) by
/// averaging simulated continuations. Single-turn episodes collapse to the
/// exact table reward with no sampling.
inline double mr_estimate(const EnvSpec& env, const Context& ctx,
                          const DeployedOutput& y,
                          const std::vector<AgentPolicy>& policies,
                          const Mechanism& mech, int n_rollouts, Rng& rng,
                          int turn = 1) {
  require_usage(n_rollouts >= 1, "mr_estimate needs n_rollouts >= 1");
  if (env.T == turn) return expected_reward(env, ctx.id, y.key);
  double total = 0.0;
  for (int n = 0; n < n_rollouts; ++n)
    total += detail::rollout_return(env, policies, mech, ctx, y, turn, rng);
  return total / n_rollouts;
}

// ---------------------------------------------------------------------------
// Structured estimator diagnostics
// ---------------------------------------------------------------------------

struct EstimatorDiagnostic {
  int update = 0;
  int turn = 1;
  int agent = 0;
  double prediction = 0.0;
  double weight = 1.0;
  double delta = 0.0;
  EstimatorKind kind = EstimatorKind::DoublyRobust;
};

inline nlohmann::json diagnostic_to_json(const EstimatorDiagnostic& d) {
  return nlohmann::json{{"update", d.update}, {"turn", d.turn},
                        {"agent", d.agent},   {"prediction", d.prediction},
                        {"weight", d.weight}, {"delta", d.delta},
                        {"kind", to_string(d.kind)}};
}

}  // namespace cfcredit
