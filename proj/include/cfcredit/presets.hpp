#pragma once

#include <string>
#include <vector>

#include "cfcredit/env.hpp"

namespace cfcredit {

namespace detail {

/// Routing rewards with additive (token, agent, context) structure, so a
/// linear predictor over concatenated one-hot features is exactly
/// realizable. Token 0 is deliberately weak: an untrained argmax policy
/// proposes it, leaving clear headroom for training.
inline EnvSpec make_routing_basic() {
  EnvSpec env;
  env.name = "routing-basic";
  env.n_contexts = 3;
  env.d = 3;
  env.K = 3;
  env.V = 4;
  env.T = 1;
  env.reward_noise = RewardNoise::Bernoulli;
  env.features = Eigen::MatrixXd::Identity(3, 3);
  const double tok_q[4] = {0.10, 0.30, 0.55, 0.40};
  const double agent_b[3] = {0.00, 0.08, 0.16};
  const double ctx_b[3] = {0.00, 0.05, 0.10};
  env.reward_table.resize(3);
  for (int c = 0; c < 3; ++c)
    for (int a = 0; a < 3; ++a)
      for (int t = 0; t < 4; ++t)
        env.reward_table[c][proposal_key({a, t})] =
            tok_q[t] + agent_b[a] + ctx_b[c];
  env.context_labels = {0, 1, 2};
  env.agent_specialties = {0, 1, 2};
  env.finalize();
  return env;
}

/// Collaborative preset with interaction-heavy rewards: the best joint
/// output depends on both agents' tokens, in opposite directions across
/// the two contexts. Rewards are deterministic so the variance seen by an
/// agent comes from the other agent's sampling, which is exactly what the
/// leave-one-out difference filters.
inline EnvSpec make_collab_interaction() {
  EnvSpec env;
  env.name = "collab-interaction";
  env.n_contexts = 2;
  env.d = 2;
  env.K = 2;
  env.V = 2;
  env.T = 1;
  env.reward_noise = RewardNoise::Deterministic;
  env.features = Eigen::MatrixXd::Identity(2, 2);
  env.reward_table.resize(2);
  env.reward_table[0] = {{"(0,0)", 0.15}, {"(0,1)", 0.85},
                         {"(1,0)", 0.70}, {"(1,1)", 0.20}};
  env.reward_table[1] = {{"(0,0)", 0.80}, {"(0,1)", 0.25},
                         {"(1,0)", 0.10}, {"(1,1)", 0.75}};
  env.context_labels = {0, 1};
  env.agent_specialties = {0, 1};
  env.finalize();
  return env;
}

/// Two-agent tuple mechanism whose reward equals the first agent's token.
/// With uniform proposals the deployed reward is Bernoulli(1/2) while
/// agent 2 is reward-irrelevant.
inline EnvSpec make_counterexample_prop2(bool reward_is_second_agent) {
  EnvSpec env;
  env.name = reward_is_second_agent ? "counterexample-prop2-alt"
                                    : "counterexample-prop2";
  env.n_contexts = 1;
  env.d = 1;
  env.K = 2;
  env.V = 2;
  env.T = 1;
  env.reward_noise = RewardNoise::Deterministic;
  env.features = Eigen::MatrixXd::Ones(1, 1);
  env.reward_table.resize(1);
  for (int t0 = 0; t0 < 2; ++t0)
    for (int t1 = 0; t1 < 2; ++t1) {
      const std::string key =
          "(" + std::to_string(t0) + "," + std::to_string(t1) + ")";
      env.reward_table[0][key] =
          static_cast<double>(reward_is_second_agent ? t1 : t0);
    }
  env.finalize();
  return env;
}

/// Two-turn routing environment: deployed tokens steer the next context,
/// so return-to-go differs from the immediate reward.
inline EnvSpec make_routing_multiturn() {
  EnvSpec env;
  env.name = "routing-multiturn";
  env.n_contexts = 2;
  env.d = 2;
  env.K = 2;
  env.V = 2;
  env.T = 2;
  env.reward_noise = RewardNoise::Bernoulli;
  env.features = Eigen::MatrixXd::Identity(2, 2);
  env.reward_table.resize(2);
  env.transition_table.resize(2);
  for (int c = 0; c < 2; ++c)
    for (int a = 0; a < 2; ++a)
      for (int t = 0; t < 2; ++t) {
        const std::string key = proposal_key({a, t});
        env.reward_table[c][key] = 0.20 + 0.35 * t + 0.10 * a + 0.05 * c;
        // token 1 steers toward context 1, token 0 toward context 0
        const double p1 = 0.25 + 0.50 * t;
        env.transition_table[c][key] = {{0, 1.0 - p1}, {1, p1}};
      }
  env.context_labels = {0, 1};
  env.agent_specialties = {0, 1};
  env.finalize();
  return env;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"routing-basic", "collab-interaction", "counterexample-prop2",
          "counterexample-prop2-alt", "routing-multiturn"};
}

inline EnvSpec make_preset(const std::string& name) {
  if (name == "routing-basic") return detail::make_routing_basic();
  if (name == "collab-interaction") return detail::make_collab_interaction();
  if (name == "counterexample-prop2") return detail::make_counterexample_prop2(false);
  if (name == "counterexample-prop2-alt") return detail::make_counterexample_prop2(true);
  if (name == "routing-multiturn") return detail::make_routing_multiturn();
  throw ConfigError("unknown environment preset \"" + name + "\"");
}

inline bool is_preset(const std::string& name) {
  for (const auto& n : preset_names())
    if (n == name) return true;
  return false;
}

}  // namespace cfcredit
