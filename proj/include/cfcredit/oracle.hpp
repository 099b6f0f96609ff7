#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cfcredit/env.hpp"
#include "cfcredit/errors.hpp"
#include "cfcredit/estimator.hpp"
#include "cfcredit/mechanism.hpp"
#include "cfcredit/policy.hpp"
#include "cfcredit/presets.hpp"
#include "cfcredit/rng.hpp"

namespace cfcredit::oracle {

/// value[t-1][c] = exact expected return-to-go at turn t from context c under
/// the full system (policies + mechanism + environment).
using ValueTable = std::vector<std::vector<double>>;

// ---------------------------------------------------------------------------
// Enumeration bounds
// ---------------------------------------------------------------------------

inline double enumeration_cardinality(const EnvSpec& env) {
  const double joints = std::pow(static_cast<double>(env.V), env.K);
  const double selections = static_cast<double>(env.K);
  const double transitions = env.T > 1 ? static_cast<double>(env.n_contexts) : 1.0;
  return static_cast<double>(env.n_contexts) * joints * selections *
         transitions * static_cast<double>(env.T);
}

inline void check_enumerable(const EnvSpec& env) {
  const double paths = enumeration_cardinality(env);
  require_config(paths <= 1e6 && env.T <= 3,
                 "environment is not enumerable: ", paths,
                 " paths (limit 1e6, horizon limit 3)");
}

// ---------------------------------------------------------------------------
// Joint proposal enumeration
// ---------------------------------------------------------------------------

struct JointOutcome {
  std::vector<Proposal> proposals;
  double prob = 1.0;
};

namespace detail {

inline void joint_rec(const EnvSpec& env,
                      const std::vector<AgentPolicy>& policies,
                      const Context& ctx, Conditioning mode, int j,
                      std::vector<Proposal>& current, double prob,
                      std::vector<JointOutcome>& out) {
  if (j == env.K) {
    out.push_back({current, prob});
    return;
  }
  const auto z = make_conditioning(
      env, mode, ctx,
      mode == Conditioning::Autoregressive ? current
                                           : std::vector<Proposal>{});
  const Eigen::VectorXd p = action_probabilities(policies[static_cast<std::size_t>(j)], z);
  for (int t = 0; t < env.V; ++t) {
    current.push_back({j, t});
    joint_rec(env, policies, ctx, mode, j + 1, current, prob * p[t], out);
    current.pop_back();
  }
}

}  // namespace detail

inline std::vector<JointOutcome> enumerate_joint(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Context& ctx) {
  std::vector<JointOutcome> out;
  std::vector<Proposal> current;
  detail::joint_rec(env, policies, ctx, policies.front().conditioning, 0,
                    current, 1.0, out);
  return out;
}

// ---------------------------------------------------------------------------
// Expected return-to-go with pinned proposals
// ---------------------------------------------------------------------------

namespace detail {

/// Expected value of a deployed profile at (ctx, turn): immediate expected
/// reward plus the transition-weighted continuation value.
inline double branch_value(const EnvSpec& env, const Context& ctx,
                           const std::string& key, int turn,
                           const ValueTable& value) {
  double v = expected_reward(env, ctx.id, key);
  if (turn < env.T) {
    for (const auto& [next, p] : env.transition_row(ctx.id, key))
      v += p * value[static_cast<std::size_t>(turn)][static_cast<std::size_t>(next)];
  }
  return v;
}

/// Expected return of one complete proposal profile through the mechanism.
inline double profile_value(const EnvSpec& env, const Mechanism& mech,
                            const Context& ctx,
                            const std::vector<Proposal>& profile, int turn,
                            const ValueTable& value) {
  if (mech.kind == MechanismKind::Aggregation) {
    const DeployedOutput y = aggregate(mech.aggregator, ctx, profile);
    return branch_value(env, ctx, y.key, turn, value);
  }
  const Eigen::VectorXd p = route_probabilities(mech.router, env, ctx, profile);
  double v = 0.0;
  for (int j = 0; j < p.size(); ++j)
    v += p[j] * branch_value(env, ctx, proposal_key(profile[static_cast<std::size_t>(j)]),
                             turn, value);
  return v;
}

/// Enumerates proposals of agents j..K-1, honoring pins and an optional
/// removed agent, and accumulates probability-weighted profile values.
inline double rtg_rec(const EnvSpec& env,
                      const std::vector<AgentPolicy>& policies,
                      const Mechanism& mech, const Context& ctx,
                      const std::vector<std::optional<Proposal>>& pinned,
                      int removed, int j, std::vector<Proposal>& current,
                      double prob, int turn, const ValueTable& value) {
  if (j == env.K)
    return prob * profile_value(env, mech, ctx, current, turn, value);
  if (j == removed)
    return rtg_rec(env, policies, mech, ctx, pinned, removed, j + 1, current,
                   prob, turn, value);
  if (pinned[static_cast<std::size_t>(j)].has_value()) {
    current.push_back(*pinned[static_cast<std::size_t>(j)]);
    const double v = rtg_rec(env, policies, mech, ctx, pinned, removed, j + 1,
                             current, prob, turn, value);
    current.pop_back();
    return v;
  }
  const Conditioning mode = policies.front().conditioning;
  // a removed agent never appears in anyone's conditioning input, so the
  // autoregressive prefix stays well-formed only without removal
  const auto z = make_conditioning(
      env, mode, ctx,
      mode == Conditioning::Autoregressive ? current
                                           : std::vector<Proposal>{});
  const Eigen::VectorXd p = action_probabilities(policies[static_cast<std::size_t>(j)], z);
  double total = 0.0;
  for (int t = 0; t < env.V; ++t) {
    current.push_back({j, t});
    total += rtg_rec(env, policies, mech, ctx, pinned, removed, j + 1, current,
                     prob * p[t], turn, value);
    current.pop_back();
  }
  return total;
}

inline double expected_rtg(const EnvSpec& env,
                           const std::vector<AgentPolicy>& policies,
                           const Mechanism& mech, const Context& ctx,
                           const std::vector<std::optional<Proposal>>& pinned,
                           int removed, int turn, const ValueTable& value) {
  if (removed >= 0)
    require_usage(policies.front().conditioning == Conditioning::Independent,
                  "candidate removal is defined for independent policies");
  std::vector<Proposal> current;
  return rtg_rec(env, policies, mech, ctx, pinned, removed, 0, current, 1.0,
                 turn, value);
}

}  // namespace detail

/// Exact value function of the full system, by backward induction.
inline ValueTable system_value(const EnvSpec& env,
                               const std::vector<AgentPolicy>& policies,
                               const Mechanism& mech) {
  ValueTable value(static_cast<std::size_t>(env.T),
                   std::vector<double>(static_cast<std::size_t>(env.n_contexts), 0.0));
  const std::vector<std::optional<Proposal>> unpinned(
      static_cast<std::size_t>(env.K), std::nullopt);
  for (int t = env.T; t >= 1; --t)
    for (int c = 0; c < env.n_contexts; ++c)
      value[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(c)] =
          detail::expected_rtg(env, policies, mech, env.context(c), unpinned,
                               -1, t, value);
  return value;
}

/// Exact system objective J_sys: expected sum of rewards over the episode,
/// by full enumeration over contexts, proposals, selections, and transitions.
inline double exact_system_objective(const EnvSpec& env,
                                     const std::vector<AgentPolicy>& policies,
                                     const Mechanism& mech) {
  check_enumerable(env);
  const ValueTable value = system_value(env, policies, mech);
  double j = 0.0;
  for (int c = 0; c < env.n_contexts; ++c)
    j += env.initial_prob(c) * value[0][static_cast<std::size_t>(c)];
  return j;
}

/// Exact per-agent routing utility E[p_i r(h, a^(i))] at the first turn of a
/// single-turn environment.
inline double exact_utility(const EnvSpec& env,
                            const std::vector<AgentPolicy>& policies,
                            const Router& router, int agent) {
  check_enumerable(env);
  require_usage(env.T == 1, "exact_utility is defined for single-turn environments");
  require_usage(agent >= 0 && agent < env.K, "agent index out of range");
  double u = 0.0;
  for (int c = 0; c < env.n_contexts; ++c) {
    const Context ctx = env.context(c);
    for (const auto& joint : enumerate_joint(env, policies, ctx)) {
      const Eigen::VectorXd p = route_probabilities(router, env, ctx, joint.proposals);
      const double r = expected_reward(
          env, c, proposal_key(joint.proposals[static_cast<std::size_t>(agent)]));
      u += env.initial_prob(c) * joint.prob * p[agent] * r;
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// Exact counterfactual marginal contribution
// ---------------------------------------------------------------------------

namespace detail {

inline double exact_marginal_with_value(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Mechanism& mech, const ReplacementPolicy& q, int agent,
    const Context& ctx, const std::vector<Proposal>& prefix,
    const Proposal& action, int turn, const ValueTable& value) {
  std::vector<std::optional<Proposal>> pinned(static_cast<std::size_t>(env.K),
                                              std::nullopt);
  for (std::size_t j = 0; j < prefix.size(); ++j) pinned[j] = prefix[j];
  pinned[static_cast<std::size_t>(agent)] = action;
  const double realized =
      expected_rtg(env, policies, mech, ctx, pinned, -1, turn, value);

  double counterfactual = 0.0;
  if (mech.kind == MechanismKind::Routing) {
    // leave-one-out without downstream resampling: the candidate is removed
    // and the router renormalizes over the remaining agents
    require_usage(prefix.empty(),
                  "routing marginals condition on the context only");
    std::vector<std::optional<Proposal>> none(static_cast<std::size_t>(env.K),
                                              std::nullopt);
    counterfactual =
        expected_rtg(env, policies, mech, ctx, none, agent, turn, value);
  } else {
    const Conditioning mode = policies.front().conditioning;
    const auto z = make_conditioning(
        env, mode, ctx,
        mode == Conditioning::Autoregressive ? prefix
                                             : std::vector<Proposal>{});
    const Eigen::VectorXd qp = replacement_probabilities(q, z, env.V);
    for (int t = 0; t < env.V; ++t) {
      if (qp[t] == 0.0) continue;
      pinned[static_cast<std::size_t>(agent)] = Proposal{agent, t};
      counterfactual +=
          qp[t] * expected_rtg(env, policies, mech, ctx, pinned, -1, turn, value);
    }
  }
  return realized - counterfactual;
}

}  // namespace detail

/// Exact E[G_t - G_t^{-i} | z, a^(i)] by summation over replacement draws,
/// downstream proposals, mechanism randomness, rewards, and transitions.
/// Routing mechanisms use the removal counterfactual (q is ignored);
/// aggregation mechanisms use replacement from q with downstream resampling.
inline double exact_marginal_contribution(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Mechanism& mech, const ReplacementPolicy& q, int agent,
    const Context& ctx, const std::vector<Proposal>& prefix,
    const Proposal& action, int turn = 1) {
  check_enumerable(env);
  require_usage(agent >= 0 && agent < env.K, "agent index out of range");
  require_usage(static_cast<int>(prefix.size()) <= agent,
                "prefix may cover only agents before ", agent);
  const ValueTable value = system_value(env, policies, mech);
  return detail::exact_marginal_with_value(env, policies, mech, q, agent, ctx,
                                           prefix, action, turn, value);
}

// ---------------------------------------------------------------------------
// Exact counterfactual policy gradient
// ---------------------------------------------------------------------------

namespace detail {

/// Turn-indexed context occupancy d_t(c) under the full system.
inline std::vector<std::vector<double>> occupancy(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Mechanism& mech) {
  std::vector<std::vector<double>> d(
      static_cast<std::size_t>(env.T),
      std::vector<double>(static_cast<std::size_t>(env.n_contexts), 0.0));
  for (int c = 0; c < env.n_contexts; ++c) d[0][static_cast<std::size_t>(c)] = env.initial_prob(c);
  for (int t = 1; t < env.T; ++t) {
    for (int c = 0; c < env.n_contexts; ++c) {
      const double w = d[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(c)];
      if (w == 0.0) continue;
      const Context ctx = env.context(c);
      for (const auto& joint : enumerate_joint(env, policies, ctx)) {
        if (mech.kind == MechanismKind::Aggregation) {
          const DeployedOutput y = aggregate(mech.aggregator, ctx, joint.proposals);
          for (const auto& [next, p] : env.transition_row(c, y.key))
            d[static_cast<std::size_t>(t)][static_cast<std::size_t>(next)] += w * joint.prob * p;
        } else {
          const Eigen::VectorXd sel =
              route_probabilities(mech.router, env, ctx, joint.proposals);
          for (int j = 0; j < sel.size(); ++j) {
            const std::string key =
                proposal_key(joint.proposals[static_cast<std::size_t>(j)]);
            for (const auto& [next, p] : env.transition_row(c, key))
              d[static_cast<std::size_t>(t)][static_cast<std::size_t>(next)] +=
                  w * joint.prob * sel[j] * p;
          }
        }
      }
    }
  }
  return d;
}

inline void prefix_rec(const EnvSpec& env,
                       const std::vector<AgentPolicy>& policies,
                       const Context& ctx, int upto, int j,
                       std::vector<Proposal>& current, double prob,
                       std::vector<JointOutcome>& out) {
  if (j == upto) {
    out.push_back({current, prob});
    return;
  }
  const Conditioning mode = policies.front().conditioning;
  const auto z = make_conditioning(
      env, mode, ctx,
      mode == Conditioning::Autoregressive ? current
                                           : std::vector<Proposal>{});
  const Eigen::VectorXd p = action_probabilities(policies[static_cast<std::size_t>(j)], z);
  for (int t = 0; t < env.V; ++t) {
    current.push_back({j, t});
    prefix_rec(env, policies, ctx, upto, j + 1, current, prob * p[t], out);
    current.pop_back();
  }
}

inline std::vector<JointOutcome> enumerate_prefixes(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Context& ctx, int upto) {
  std::vector<JointOutcome> out;
  std::vector<Proposal> current;
  prefix_rec(env, policies, ctx, upto, 0, current, 1.0, out);
  return out;
}

}  // namespace detail

/// Exact gradient of J_sys w.r.t. agent i's parameters via the
/// counterfactual form: sum over turns and states of the occupancy-weighted
/// expectation of psi * Delta. No sampling anywhere.
inline Eigen::MatrixXd exact_counterfactual_gradient(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Mechanism& mech, const ReplacementPolicy& q, int agent) {
  check_enumerable(env);
  const AgentPolicy& pol = policies[static_cast<std::size_t>(agent)];
  const Conditioning mode = pol.conditioning;
  const ValueTable value = system_value(env, policies, mech);
  const auto d = detail::occupancy(env, policies, mech);

  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(pol.theta.rows(), pol.theta.cols());
  for (int t = 1; t <= env.T; ++t) {
    for (int c = 0; c < env.n_contexts; ++c) {
      const double w = d[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(c)];
      if (w == 0.0) continue;
      const Context ctx = env.context(c);
      const bool condition_on_prefix = mech.kind == MechanismKind::Aggregation;
      const auto prefixes =
          condition_on_prefix
              ? detail::enumerate_prefixes(env, policies, ctx, agent)
              : std::vector<JointOutcome>{{{}, 1.0}};
      for (const auto& prefix : prefixes) {
        const auto z = make_conditioning(
            env, mode, ctx,
            mode == Conditioning::Autoregressive ? prefix.proposals
                                                 : std::vector<Proposal>{});
        const Eigen::VectorXd p = action_probabilities(pol, z);
        for (int a = 0; a < env.V; ++a) {
          const Proposal action{agent, a};
          const double delta = detail::exact_marginal_with_value(
              env, policies, mech, q, agent, ctx, prefix.proposals, action, t,
              value);
          grad += w * prefix.prob * p[a] * delta * logprob_grad(pol, z, action);
        }
      }
    }
  }
  return grad;
}

/// Central finite differences of a scalar objective over a parameter matrix.
inline Eigen::MatrixXd finite_difference_gradient(
    const std::function<double(const Eigen::MatrixXd&)>& objective,
    const Eigen::MatrixXd& at, double step) {
  require_usage(step > 0.0, "finite difference step must be positive");
  Eigen::MatrixXd grad(at.rows(), at.cols());
  Eigen::MatrixXd point = at;
  for (int r = 0; r < at.rows(); ++r)
    for (int c = 0; c < at.cols(); ++c) {
      point(r, c) = at(r, c) + step;
      const double up = objective(point);
      point(r, c) = at(r, c) - step;
      const double down = objective(point);
      point(r, c) = at(r, c);
      grad(r, c) = (up - down) / (2.0 * step);
    }
  return grad;
}

// ---------------------------------------------------------------------------
// Risk-sensitive routing incentives
// ---------------------------------------------------------------------------

struct DiscreteDist {
  std::vector<double> values;
  std::vector<double> probs;

  double mean() const {
    double m = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) m += probs[i] * values[i];
    return m;
  }

  void validate() const {
    require_config(values.size() == probs.size() && !values.empty(),
                   "distribution values and probabilities must align");
    double total = 0.0;
    for (double p : probs) {
      require_config(p >= 0.0, "negative probability");
      total += p;
    }
    require_config(std::abs(total - 1.0) <= 1e-9,
                   "distribution sums to ", total);
  }
};

inline DiscreteDist point_mass(double v) { return {{v}, {1.0}}; }

inline DiscreteDist bernoulli_dist(double p) { return {{0.0, 1.0}, {1.0 - p, p}}; }

struct RiskSensitivityResult {
  double utility_a = 0.0;
  double utility_b = 0.0;
  double gap() const { return std::abs(utility_a - utility_b); }
};

namespace detail {

inline double softmax_routing_utility(const std::function<double(double)>& sigma,
                                      const DiscreteDist& own,
                                      const DiscreteDist& other, int K,
                                      double tau, double epsilon) {
  // enumeration over the joint reward outcome (own reward x other rewards)
  std::vector<std::size_t> idx(static_cast<std::size_t>(K - 1), 0);
  double utility = 0.0;
  for (std::size_t i = 0; i < own.values.size(); ++i) {
    const double r1 = own.values[i];
    const double w1 = std::exp(sigma(r1) / tau);
    // recursively enumerate the other agents' outcomes
    std::function<void(int, double, double)> rec = [&](int j, double prob,
                                                       double denom) {
      if (j == K - 1) {
        const double p1 = (1.0 - epsilon) * w1 / (w1 + denom) + epsilon / K;
        utility += own.probs[i] * prob * p1 * r1;
        return;
      }
      for (std::size_t m = 0; m < other.values.size(); ++m)
        rec(j + 1, prob * other.probs[m],
            denom + std::exp(sigma(other.values[m]) / tau));
    };
    rec(0, 1.0, 0.0);
  }
  return utility;
}

}  // namespace detail

/// Exact utilities of agent 1 when its reward distribution is dist_a versus
/// dist_b (equal means required), with the other K-1 agents' rewards drawn
/// iid from `other` and routing scores sigma(reward) at temperature tau.
inline RiskSensitivityResult risk_sensitivity_demo(
    const std::function<double(double)>& sigma, const DiscreteDist& dist_a,
    const DiscreteDist& dist_b, const DiscreteDist& other, int K = 2,
    double tau = 1.0, double epsilon = 0.0) {
  dist_a.validate();
  dist_b.validate();
  other.validate();
  require_config(K >= 2, "risk demo needs K >= 2");
  require_config(tau > 0.0, "temperature must be positive");
  require_config(std::abs(dist_a.mean() - dist_b.mean()) <= 1e-12,
                 "the comparison requires equal means, got ", dist_a.mean(),
                 " vs ", dist_b.mean());
  return RiskSensitivityResult{
      detail::softmax_routing_utility(sigma, dist_a, other, K, tau, epsilon),
      detail::softmax_routing_utility(sigma, dist_b, other, K, tau, epsilon)};
}

// ---------------------------------------------------------------------------
// Shared-reward non-identification counterexample
// ---------------------------------------------------------------------------

/// Numerical reproduction of the two-mechanism construction: identical
/// deployed-reward laws, different first-agent marginal contributions.
struct CounterexampleReport {
  double reward_law_first = 0.0;   ///< P(reward = 1), reward = agent 1 token
  double reward_law_second = 0.0;  ///< P(reward = 1), reward = agent 2 token
  std::array<double, 2> marginal_first{};   ///< agent-1 Delta given a1 = 0, 1
  std::array<double, 2> marginal_second{};  ///< same under the second reward
};

inline CounterexampleReport shared_reward_counterexample() {
  CounterexampleReport report;
  for (int variant = 0; variant < 2; ++variant) {
    const EnvSpec env = make_preset(variant == 0 ? "counterexample-prop2"
                                                 : "counterexample-prop2-alt");
    std::vector<AgentPolicy> policies;
    for (int i = 0; i < env.K; ++i)
      policies.push_back(make_policy(env, i, Conditioning::Independent));
    const Mechanism mech = aggregation_mechanism();
    const double law = exact_system_objective(env, policies, mech);
    const auto q = uniform_replacement(env.V);
    std::array<double, 2> marginal{};
    for (int a1 = 0; a1 < 2; ++a1)
      marginal[static_cast<std::size_t>(a1)] = exact_marginal_contribution(
          env, policies, mech, q, 0, env.context(0), {}, Proposal{0, a1});
    if (variant == 0) {
      report.reward_law_first = law;
      report.marginal_first = marginal;
    } else {
      report.reward_law_second = law;
      report.marginal_second = marginal;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Exact signal moments (single-turn collaborative)
// ---------------------------------------------------------------------------

/// Exact first and second moments of the gradient signals psi*G,
/// psi*(G - G^{-i}), psi*Delta and psi*G^{-i}, by enumerating proposals,
/// reward outcomes, replacements, downstream resamples, and counterfactual
/// outcomes. Variances are summed over gradient elements.
struct SignalMoments {
  Eigen::MatrixXd mean_shared, mean_loo_diff, mean_oracle;
  double var_shared = 0.0;
  double var_loo_diff = 0.0;
  double var_oracle = 0.0;
  double var_baseline = 0.0;  ///< Var(psi G^{-i})
  double cov_term = 0.0;      ///< 2 Cov(psi (G - G^{-i}), psi G^{-i})
  Eigen::MatrixXd var_shared_elem, var_loo_diff_elem, var_oracle_elem;

  /// Positivity condition of the variance decomposition.
  bool positivity() const { return var_baseline + cov_term > 0.0; }
  double decomposition_residual() const {
    return var_shared - (var_loo_diff + var_baseline + cov_term);
  }
};

namespace detail {

/// Possible realized values of one reward lookup with their probabilities.
inline std::vector<std::pair<double, double>> reward_outcomes(
    const EnvSpec& env, int ctx_id, const std::string& key) {
  const double mean = expected_reward(env, ctx_id, key);
  if (env.reward_noise == RewardNoise::Deterministic) return {{mean, 1.0}};
  std::vector<std::pair<double, double>> out;
  if (mean < 1.0) out.push_back({0.0, 1.0 - mean});
  if (mean > 0.0) out.push_back({1.0, mean});
  return out;
}

}  // namespace detail

inline SignalMoments exact_signal_moments(const EnvSpec& env,
                                          const std::vector<AgentPolicy>& policies,
                                          const ReplacementPolicy& q,
                                          int agent) {
  check_enumerable(env);
  require_usage(env.T == 1, "exact signal moments cover single-turn episodes");
  const Mechanism mech = aggregation_mechanism();
  const ValueTable value = system_value(env, policies, mech);
  const AgentPolicy& pol = policies[static_cast<std::size_t>(agent)];
  const Conditioning mode = pol.conditioning;

  const long rows = pol.theta.rows(), cols = pol.theta.cols();
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(rows, cols);
  Eigen::MatrixXd m_shared = zero, m_loo = zero, m_oracle = zero, m_base = zero;
  Eigen::MatrixXd s_shared = zero, s_loo = zero, s_oracle = zero, s_base = zero;
  Eigen::MatrixXd s_cross = zero;  // E[(psi loo_diff) .* (psi baseline)]

  for (int c = 0; c < env.n_contexts; ++c) {
    const Context ctx = env.context(c);
    for (const auto& joint : enumerate_joint(env, policies, ctx)) {
      const std::vector<Proposal> prefix(joint.proposals.begin(),
                                         joint.proposals.begin() + agent);
      const auto z = make_conditioning(
          env, mode, ctx,
          mode == Conditioning::Autoregressive ? prefix
                                               : std::vector<Proposal>{});
      const Proposal action = joint.proposals[static_cast<std::size_t>(agent)];
      const Eigen::MatrixXd psi = logprob_grad(pol, z, action);
      const double delta_oracle = detail::exact_marginal_with_value(
          env, policies, mech, q, agent, ctx, prefix, action, 1, value);
      const DeployedOutput y = aggregate(mech.aggregator, ctx, joint.proposals);

      // enumerate counterfactual branches: replacement draw, downstream
      // resample, and both realized reward outcomes
      const Eigen::VectorXd qp = replacement_probabilities(q, z, env.V);
      for (int rep = 0; rep < env.V; ++rep) {
        if (qp[rep] == 0.0) continue;
        std::vector<Proposal> cf(prefix);
        cf.push_back({agent, rep});
        std::vector<JointOutcome> downstream;
        std::vector<Proposal> scratch = cf;
        if (agent + 1 < env.K)
          detail::prefix_rec(env, policies, ctx, env.K, agent + 1, scratch,
                             1.0, downstream);
        else
          downstream.push_back({cf, 1.0});
        for (const auto& tail : downstream) {
          const std::vector<Proposal>& cf_profile = tail.proposals;
          const DeployedOutput y_cf = aggregate(mech.aggregator, ctx, cf_profile);
          for (const auto& [g, pg] : detail::reward_outcomes(env, c, y.key)) {
            for (const auto& [gcf, pgcf] :
                 detail::reward_outcomes(env, c, y_cf.key)) {
              const double w = env.initial_prob(c) * joint.prob * qp[rep] *
                               tail.prob * pg * pgcf;
              const Eigen::MatrixXd x_shared = psi * g;
              const Eigen::MatrixXd x_loo = psi * (g - gcf);
              const Eigen::MatrixXd x_oracle = psi * delta_oracle;
              const Eigen::MatrixXd x_base = psi * gcf;
              m_shared += w * x_shared;
              m_loo += w * x_loo;
              m_oracle += w * x_oracle;
              m_base += w * x_base;
              s_shared += w * x_shared.cwiseProduct(x_shared);
              s_loo += w * x_loo.cwiseProduct(x_loo);
              s_oracle += w * x_oracle.cwiseProduct(x_oracle);
              s_base += w * x_base.cwiseProduct(x_base);
              s_cross += w * x_loo.cwiseProduct(x_base);
            }
          }
        }
      }
    }
  }

  SignalMoments out;
  out.mean_shared = m_shared;
  out.mean_loo_diff = m_loo;
  out.mean_oracle = m_oracle;
  out.var_shared_elem = s_shared - m_shared.cwiseProduct(m_shared);
  out.var_loo_diff_elem = s_loo - m_loo.cwiseProduct(m_loo);
  out.var_oracle_elem = s_oracle - m_oracle.cwiseProduct(m_oracle);
  out.var_shared = out.var_shared_elem.sum();
  out.var_loo_diff = out.var_loo_diff_elem.sum();
  out.var_oracle = out.var_oracle_elem.sum();
  out.var_baseline = (s_base - m_base.cwiseProduct(m_base)).sum();
  out.cov_term = 2.0 * (s_cross - m_loo.cwiseProduct(m_base)).sum();
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo gradient variance report
// ---------------------------------------------------------------------------

/// Sampled means and variances of the three per-agent gradient signals on a
/// single-turn collaborative environment, with batch-based standard errors
/// for the variance gaps and the exact decomposition terms.
struct VarianceReport {
  int n_samples = 0;
  Eigen::MatrixXd mean_shared, mean_loo_diff, mean_oracle;
  double var_shared = 0.0, var_loo_diff = 0.0, var_oracle = 0.0;
  double var_baseline = 0.0, cov_term = 0.0;
  double decomposition_residual = 0.0;
  double gap_shared_loo = 0.0, gap_shared_loo_se = 0.0;
  double gap_loo_oracle = 0.0, gap_loo_oracle_se = 0.0;
  /// max over elements and signal pairs of |mean difference| in SE units
  double mean_agreement_sigmas = 0.0;
};

inline VarianceReport gradient_variance_report(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const ReplacementPolicy& q, int agent, int n_samples, Rng& rng) {
  require_usage(n_samples >= 10000, "variance report needs >= 1e4 samples");
  require_usage(env.T == 1, "variance report covers single-turn episodes");
  const Mechanism mech = aggregation_mechanism();
  const AgentPolicy& pol = policies[static_cast<std::size_t>(agent)];
  const Conditioning mode = pol.conditioning;
  const ValueTable value = system_value(env, policies, mech);

  // memoized oracle Delta per (context, prefix tokens, action token)
  std::map<std::string, double> delta_cache;
  const auto oracle_delta = [&](const Context& ctx,
                                const std::vector<Proposal>& prefix,
                                const Proposal& action) {
    std::string key = std::to_string(ctx.id) + "|";
    for (const auto& p : prefix) key += std::to_string(p.token) + ",";
    key += "|" + std::to_string(action.token);
    auto it = delta_cache.find(key);
    if (it != delta_cache.end()) return it->second;
    const double d = detail::exact_marginal_with_value(
        env, policies, mech, q, agent, ctx, prefix, action, 1, value);
    delta_cache.emplace(std::move(key), d);
    return d;
  };

  const long rows = pol.theta.rows(), cols = pol.theta.cols();
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(rows, cols);
  Eigen::MatrixXd m_shared = zero, m_loo = zero, m_oracle = zero, m_base = zero;
  Eigen::MatrixXd s_shared = zero, s_loo = zero, s_oracle = zero, s_base = zero;
  Eigen::MatrixXd s_cross = zero;
  Eigen::MatrixXd m_d_sl = zero, s_d_sl = zero;  // shared - loo, per element
  Eigen::MatrixXd m_d_so = zero, s_d_so = zero;  // shared - oracle
  Eigen::MatrixXd m_d_lo = zero, s_d_lo = zero;  // loo - oracle

  const int batch_size = 1000;
  std::vector<double> batch_gap_sl, batch_gap_lo;
  Eigen::MatrixXd bm_shared = zero, bm_loo = zero, bm_oracle = zero;
  Eigen::MatrixXd bs_shared = zero, bs_loo = zero, bs_oracle = zero;
  int in_batch = 0;

  for (int n = 0; n < n_samples; ++n) {
    const Context ctx = sample_context(env, rng);
    const auto joint = sample_joint(env, policies, ctx, rng);
    const std::vector<Proposal> prefix(joint.proposals.begin(),
                                       joint.proposals.begin() + agent);
    const auto z = make_conditioning(
        env, mode, ctx,
        mode == Conditioning::Autoregressive ? prefix
                                             : std::vector<Proposal>{});
    const Proposal action = joint.proposals[static_cast<std::size_t>(agent)];
    const Eigen::MatrixXd psi = logprob_grad(pol, z, action);

    const DeployedOutput y = aggregate(mech.aggregator, ctx, joint.proposals);
    const double g = reward(env, ctx, y, rng);
    const TurnState state{ctx, joint.proposals, g, 1};
    const double loo_diff =
        loo_marginal_contribution(env, state, agent, q, policies, mech, rng).value;
    const double delta = oracle_delta(ctx, prefix, action);

    const Eigen::MatrixXd x_shared = psi * g;
    const Eigen::MatrixXd x_loo = psi * loo_diff;
    const Eigen::MatrixXd x_oracle = psi * delta;
    const Eigen::MatrixXd x_base = psi * (g - loo_diff);

    m_shared += x_shared;
    m_loo += x_loo;
    m_oracle += x_oracle;
    m_base += x_base;
    s_shared += x_shared.cwiseProduct(x_shared);
    s_loo += x_loo.cwiseProduct(x_loo);
    s_oracle += x_oracle.cwiseProduct(x_oracle);
    s_base += x_base.cwiseProduct(x_base);
    s_cross += x_loo.cwiseProduct(x_base);
    const Eigen::MatrixXd d_sl = x_shared - x_loo;
    const Eigen::MatrixXd d_so = x_shared - x_oracle;
    const Eigen::MatrixXd d_lo = x_loo - x_oracle;
    m_d_sl += d_sl;
    s_d_sl += d_sl.cwiseProduct(d_sl);
    m_d_so += d_so;
    s_d_so += d_so.cwiseProduct(d_so);
    m_d_lo += d_lo;
    s_d_lo += d_lo.cwiseProduct(d_lo);

    bm_shared += x_shared;
    bm_loo += x_loo;
    bm_oracle += x_oracle;
    bs_shared += x_shared.cwiseProduct(x_shared);
    bs_loo += x_loo.cwiseProduct(x_loo);
    bs_oracle += x_oracle.cwiseProduct(x_oracle);
    if (++in_batch == batch_size) {
      const double inv = 1.0 / batch_size;
      const double v_sh = (bs_shared * inv - (bm_shared * inv).cwiseAbs2()).sum();
      const double v_lo = (bs_loo * inv - (bm_loo * inv).cwiseAbs2()).sum();
      const double v_or = (bs_oracle * inv - (bm_oracle * inv).cwiseAbs2()).sum();
      batch_gap_sl.push_back(v_sh - v_lo);
      batch_gap_lo.push_back(v_lo - v_or);
      bm_shared = bm_loo = bm_oracle = zero;
      bs_shared = bs_loo = bs_oracle = zero;
      in_batch = 0;
    }
  }

  const double inv = 1.0 / n_samples;
  VarianceReport out;
  out.n_samples = n_samples;
  out.mean_shared = m_shared * inv;
  out.mean_loo_diff = m_loo * inv;
  out.mean_oracle = m_oracle * inv;
  out.var_shared = (s_shared * inv - out.mean_shared.cwiseAbs2()).sum();
  out.var_loo_diff = (s_loo * inv - out.mean_loo_diff.cwiseAbs2()).sum();
  out.var_oracle = (s_oracle * inv - out.mean_oracle.cwiseAbs2()).sum();
  const Eigen::MatrixXd mean_base = m_base * inv;
  out.var_baseline = (s_base * inv - mean_base.cwiseAbs2()).sum();
  out.cov_term =
      2.0 * (s_cross * inv - out.mean_loo_diff.cwiseProduct(mean_base)).sum();
  out.decomposition_residual =
      out.var_shared - (out.var_loo_diff + out.var_baseline + out.cov_term);

  const auto batch_stats = [](const std::vector<double>& gaps) {
    double m = 0.0;
    for (double g : gaps) m += g;
    m /= static_cast<double>(gaps.size());
    double v = 0.0;
    for (double g : gaps) v += (g - m) * (g - m);
    v /= static_cast<double>(gaps.size());
    return std::pair<double, double>(m, std::sqrt(v / static_cast<double>(gaps.size())));
  };
  std::tie(out.gap_shared_loo, out.gap_shared_loo_se) = batch_stats(batch_gap_sl);
  std::tie(out.gap_loo_oracle, out.gap_loo_oracle_se) = batch_stats(batch_gap_lo);

  const auto max_sigmas = [&](const Eigen::MatrixXd& mean_sum,
                              const Eigen::MatrixXd& sq_sum) {
    double worst = 0.0;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        const double m = mean_sum(r, c) * inv;
        const double var = sq_sum(r, c) * inv - m * m;
        const double se = std::sqrt(std::max(var, 1e-300) * inv);
        worst = std::max(worst, std::abs(m) / se);
      }
    return worst;
  };
  out.mean_agreement_sigmas =
      std::max({max_sigmas(m_d_sl, s_d_sl), max_sigmas(m_d_so, s_d_so),
                max_sigmas(m_d_lo, s_d_lo)});
  return out;
}

// ---------------------------------------------------------------------------
// Summary bundle
// ---------------------------------------------------------------------------

struct MarginalEntry {
  int ctx = 0;
  int agent = 0;
  std::vector<int> prefix_tokens;
  int token = 0;
  double value = 0.0;
};

/// Exact quantities for an enumerable system, computed with no sampling:
/// the system objective, per-agent routing utilities (routing only),
/// first-turn marginal contributions, and the exact counterfactual gradient
/// per agent.
struct ExactQuantities {
  double j_sys = 0.0;
  std::vector<double> utilities;
  std::vector<MarginalEntry> marginals;
  std::vector<Eigen::MatrixXd> grad_j;
};

inline ExactQuantities compute_exact_quantities(
    const EnvSpec& env, const std::vector<AgentPolicy>& policies,
    const Mechanism& mech, const ReplacementPolicy& q) {
  check_enumerable(env);
  ExactQuantities out;
  out.j_sys = exact_system_objective(env, policies, mech);
  if (mech.kind == MechanismKind::Routing && env.T == 1)
    for (int i = 0; i < env.K; ++i)
      out.utilities.push_back(exact_utility(env, policies, mech.router, i));
  const ValueTable value = system_value(env, policies, mech);
  for (int i = 0; i < env.K; ++i) {
    for (int c = 0; c < env.n_contexts; ++c) {
      const Context ctx = env.context(c);
      const auto prefixes =
          mech.kind == MechanismKind::Aggregation
              ? detail::enumerate_prefixes(env, policies, ctx, i)
              : std::vector<JointOutcome>{{{}, 1.0}};
      for (const auto& prefix : prefixes)
        for (int t = 0; t < env.V; ++t) {
          MarginalEntry e;
          e.ctx = c;
          e.agent = i;
          for (const auto& p : prefix.proposals) e.prefix_tokens.push_back(p.token);
          e.token = t;
          e.value = detail::exact_marginal_with_value(
              env, policies, mech, q, i, ctx, prefix.proposals, Proposal{i, t},
              1, value);
          out.marginals.push_back(std::move(e));
        }
    }
    out.grad_j.push_back(exact_counterfactual_gradient(env, policies, mech, q, i));
  }
  return out;
}

}  // namespace cfcredit::oracle
