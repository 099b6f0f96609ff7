#pragma once

#include <functional>
#include <string>

#include "cfcredit/env.hpp"
#include "cfcredit/policy.hpp"

namespace cfcredit::test {

/// Routing environment with rewards given by fn(context, agent, token).
inline EnvSpec routing_env(int n_contexts, int K, int V,
                           const std::function<double(int, int, int)>& fn,
                           RewardNoise noise = RewardNoise::Deterministic) {
  EnvSpec env;
  env.name = "test-routing";
  env.n_contexts = n_contexts;
  env.d = n_contexts;
  env.K = K;
  env.V = V;
  env.T = 1;
  env.reward_noise = noise;
  env.features = Eigen::MatrixXd::Identity(n_contexts, n_contexts);
  env.reward_table.resize(static_cast<std::size_t>(n_contexts));
  for (int c = 0; c < n_contexts; ++c)
    for (int a = 0; a < K; ++a)
      for (int t = 0; t < V; ++t)
        env.reward_table[static_cast<std::size_t>(c)][proposal_key({a, t})] = fn(c, a, t);
  env.finalize();
  return env;
}

/// Collaborative (tuple-keyed) environment with rewards fn(context, t0, t1).
inline EnvSpec collab_env2(int n_contexts,
                           const std::function<double(int, int, int)>& fn,
                           int V = 2,
                           RewardNoise noise = RewardNoise::Deterministic) {
  EnvSpec env;
  env.name = "test-collab";
  env.n_contexts = n_contexts;
  env.d = n_contexts;
  env.K = 2;
  env.V = V;
  env.T = 1;
  env.reward_noise = noise;
  env.features = Eigen::MatrixXd::Identity(n_contexts, n_contexts);
  env.reward_table.resize(static_cast<std::size_t>(n_contexts));
  for (int c = 0; c < n_contexts; ++c)
    for (int t0 = 0; t0 < V; ++t0)
      for (int t1 = 0; t1 < V; ++t1) {
        const std::string key =
            "(" + std::to_string(t0) + "," + std::to_string(t1) + ")";
        env.reward_table[static_cast<std::size_t>(c)][key] = fn(c, t0, t1);
      }
  env.finalize();
  return env;
}

/// Uniform policies (theta = 0) for all agents.
inline std::vector<AgentPolicy> uniform_policies(
    const EnvSpec& env, Conditioning mode = Conditioning::Independent) {
  std::vector<AgentPolicy> out;
  for (int i = 0; i < env.K; ++i) out.push_back(make_policy(env, i, mode));
  return out;
}

/// Policies with i.i.d. normal-ish entries from a seeded stream.
inline std::vector<AgentPolicy> random_policies(const EnvSpec& env,
                                                Conditioning mode, Rng& rng,
                                                double scale = 1.0) {
  auto out = uniform_policies(env, mode);
  for (auto& pol : out)
    for (int r = 0; r < pol.theta.rows(); ++r)
      for (int c = 0; c < pol.theta.cols(); ++c)
        pol.theta(r, c) = scale * (2.0 * rng.uniform() - 1.0);
  return out;
}

/// Three-sigma band for a Monte Carlo mean of values with variance var.
inline double sigma_band(double var, int n, double k = 3.0) {
  return k * std::sqrt(var / n);
}

}  // namespace cfcredit::test
