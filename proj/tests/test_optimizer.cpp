#include <catch2/catch_amalgamated.hpp>

#include "cfcredit/estimator.hpp"
#include "cfcredit/optimizer.hpp"
#include "test_util.hpp"

using namespace cfcredit;

namespace {

double cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a.array() * b.array()).sum() / (a.norm() * b.norm());
}

}  // namespace

TEST_CASE("constant signals normalize to zero advantages") {
  const auto adv = group_normalized_advantages({0.7, 0.7, 0.7, 0.7}, 1e-8);
  for (double a : adv) REQUIRE(a == 0.0);
}

TEST_CASE("two-point group normalizes to plus and minus one") {
  const auto adv = group_normalized_advantages({0.0, 1.0}, 1e-15);
  REQUIRE(adv[0] == Catch::Approx(-1.0).margin(1e-12));
  REQUIRE(adv[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("normalized advantages are centered") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> signals;
    for (int n = 0; n < 6; ++n) signals.push_back(rng.uniform() * 4 - 2);
    const auto adv = group_normalized_advantages(signals, 1e-8);
    double mean = 0.0;
    for (double a : adv) mean += a;
    REQUIRE(std::abs(mean / 6) < 1e-12);
  }
}

TEST_CASE("group normalization rejects singleton groups") {
  REQUIRE_THROWS_AS(group_normalized_advantages({1.0}, 1e-8), UsageError);
}

TEST_CASE("zero signals leave the policy unchanged") {
  auto env = test::routing_env(1, 1, 3, [](int, int, int) { return 0.5; });
  Rng init(2);
  const auto policy = test::random_policies(env, Conditioning::Independent, init)[0];
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  std::vector<ReinforceSample> batch;
  for (int t = 0; t < 3; ++t) batch.push_back({z, {0, t}, 0.0});
  const auto updated = reinforce_update(policy, batch, 0.05);
  REQUIRE(updated.theta == policy.theta);
}

TEST_CASE("reinforce solves the two-armed bandit") {
  // single context, one agent, rewards (1, 0): probability of the good arm
  // must exceed 0.99 within 2000 update rounds
  auto env = test::routing_env(1, 1, 2, [](int, int, int t) {
    return t == 0 ? 1.0 : 0.0;
  });
  auto policy = make_policy(env, 0, Conditioning::Independent);
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  Rng rng(3);
  bool solved = false;
  for (int round = 0; round < 2000 && !solved; ++round) {
    std::vector<ReinforceSample> batch;
    for (int n = 0; n < 4; ++n) {
      const auto [action, logprob] = propose(policy, z, rng);
      const double r = expected_reward(env, 0, proposal_key(action));
      batch.push_back({z, action, r});
    }
    policy = reinforce_update(policy, batch, 0.05);
    solved = action_probabilities(policy, z)[0] > 0.99;
  }
  REQUIRE(solved);
}

TEST_CASE("sampled reinforce gradient matches finite differences of J") {
  // test-local enumeration of the one-agent objective J(theta) and its
  // central finite differences; the sampled score-function batch gradient
  // must agree within 5 percent relative error at 1e5 samples
  auto env = test::routing_env(1, 1, 3, [](int, int, int t) {
    return 0.2 + 0.3 * t;
  });
  Rng init(4);
  auto policy = test::random_policies(env, Conditioning::Independent, init, 0.5)[0];
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  const auto objective = [&](const AgentPolicy& pol) {
    const Eigen::VectorXd p = action_probabilities(pol, z);
    double j = 0.0;
    for (int t = 0; t < 3; ++t) j += p[t] * expected_reward(env, 0, proposal_key({0, t}));
    return j;
  };
  Eigen::MatrixXd fd(policy.theta.rows(), policy.theta.cols());
  const double step = 1e-5;
  for (int r = 0; r < policy.theta.rows(); ++r)
    for (int c = 0; c < policy.theta.cols(); ++c) {
      AgentPolicy up = policy, down = policy;
      up.theta(r, c) += step;
      down.theta(r, c) -= step;
      fd(r, c) = (objective(up) - objective(down)) / (2 * step);
    }
  Rng rng(5);
  const int n = 100000;
  Eigen::MatrixXd sampled = Eigen::MatrixXd::Zero(policy.theta.rows(),
                                                  policy.theta.cols());
  for (int i = 0; i < n; ++i) {
    const auto [action, logprob] = propose(policy, z, rng);
    sampled += logprob_grad(policy, z, action) *
               expected_reward(env, 0, proposal_key(action));
  }
  sampled /= n;
  REQUIRE((sampled - fd).norm() / fd.norm() < 0.05);
}

namespace {

// one group of N samples on a fixed context for a K=1 environment
GrpoGroup sample_group(const EnvSpec& env, const AgentPolicy& policy,
                       const ConditioningInput& z, int N, Rng& rng) {
  GrpoGroup group{z.context, {}};
  for (int n = 0; n < N; ++n) {
    const auto [action, logprob] = propose(policy, z, rng);
    const double r = expected_reward(env, 0, proposal_key(action));
    group.samples.push_back({{action}, {logprob}, {r}});
  }
  return group;
}

}  // namespace

TEST_CASE("grpo at rho one with zero beta equals normalized-advantage reinforce") {
  auto env = test::routing_env(1, 1, 4, [](int, int, int t) {
    return 0.1 + 0.2 * t;
  });
  Rng init(6);
  const auto policy = test::random_policies(env, Conditioning::Independent, init, 0.7)[0];
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  Rng rng(7);
  const auto group = sample_group(env, policy, z, 8, rng);

  OptimizerConfig cfg;
  cfg.kl_beta = 0.0;
  cfg.grad_clip_norm = 1e9;  // keep clipping out of the comparison
  const auto snapshot = capture_snapshot({policy});
  const auto grpo = grpo_update(policy, env, {group}, snapshot, snapshot, cfg);

  std::vector<double> signals;
  for (const auto& s : group.samples) signals.push_back(s.signals[0]);
  const auto advantages = group_normalized_advantages(signals, cfg.norm_delta);
  std::vector<ReinforceSample> batch;
  for (std::size_t n = 0; n < group.samples.size(); ++n)
    batch.push_back({z, group.samples[n].proposals[0], advantages[n]});
  const auto reinforce =
      reinforce_update(policy, batch, cfg.learning_rate, cfg.grad_clip_norm);

  REQUIRE((grpo.theta - reinforce.theta).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("saturated ratios contribute no gradient") {
  auto env = test::routing_env(1, 1, 3, [](int, int, int t) {
    return t == 1 ? 1.0 : 0.0;
  });
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  // old policy uniform; the boost puts token 1 at ratio 1.32 (> 1+eps)
  // while tokens 0 and 2 sit at ratio 0.84 (inside the clip range)
  auto old_policy = make_policy(env, 0, Conditioning::Independent);
  auto policy = old_policy;
  policy.theta(0, 1) = 0.452;

  OptimizerConfig cfg;
  cfg.kl_beta = 0.0;
  cfg.clip_eps = 0.2;
  cfg.grad_clip_norm = 1e9;
  const Eigen::VectorXd p_new = action_probabilities(policy, z);
  const Eigen::VectorXd p_old = action_probabilities(old_policy, z);
  REQUIRE(p_new[1] / p_old[1] > 1.0 + cfg.clip_eps);
  REQUIRE(p_new[0] / p_old[0] > 1.0 - cfg.clip_eps);

  // token 1 earns the positive advantage and is clipped out; token 0
  // carries the negative advantage and keeps its gradient
  GrpoGroup group{z.context,
                  {{{Proposal{0, 1}}, {std::log(1.0 / 3)}, {1.0}},
                   {{Proposal{0, 0}}, {std::log(1.0 / 3)}, {0.0}}}};
  const auto old_snapshot = capture_snapshot({old_policy});
  const auto updated = grpo_update(policy, env, {group}, old_snapshot,
                                   old_snapshot, cfg);

  // expected gradient: only the unclipped sample, averaged over the group
  const double rho0 = p_new[0] / p_old[0];
  const double adv0 = group_normalized_advantages({1.0, 0.0}, cfg.norm_delta)[1];
  Eigen::MatrixXd expected = adv0 * rho0 * logprob_grad(policy, z, {0, 0});
  expected /= 2.0;
  const Eigen::MatrixXd actual = (updated.theta - policy.theta) / cfg.learning_rate;
  REQUIRE((actual - expected).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("a large kl coefficient pulls the policy back to the reference") {
  auto env = test::routing_env(1, 1, 3, [](int, int, int) { return 0.5; });
  const auto reference = make_policy(env, 0, Conditioning::Independent);
  auto policy = reference;
  policy.theta(0, 0) = 1.4;
  policy.theta(0, 2) = -0.8;
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  const double kl_start = kl_divergence(policy, reference, z);
  REQUIRE(kl_start > 0.1);

  OptimizerConfig cfg;
  cfg.kl_beta = 10.0;
  const auto ref_snapshot = capture_snapshot({reference});
  for (int step = 0; step < 100; ++step) {
    // constant signals: zero advantages, so the kl term dominates
    GrpoGroup group{z.context,
                    {{{Proposal{0, 0}}, {0.0}, {0.5}},
                     {{Proposal{0, 1}}, {0.0}, {0.5}}}};
    const auto old_snapshot = capture_snapshot({policy});
    policy = grpo_update(policy, env, {group}, old_snapshot, ref_snapshot, cfg);
  }
  const double kl_end = kl_divergence(policy, reference, z);
  REQUIRE((kl_end < kl_start || kl_end <= 1e-6));
  REQUIRE(kl_end < 0.01);
}

TEST_CASE("grpo updates are invariant to a constant signal shift") {
  auto env = test::routing_env(1, 1, 3, [](int, int, int t) {
    return 0.1 + 0.25 * t;
  });
  Rng init(8);
  const auto policy = test::random_policies(env, Conditioning::Independent, init, 0.4)[0];
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  Rng rng(9);
  auto group = sample_group(env, policy, z, 6, rng);
  auto shifted = group;
  for (auto& s : shifted.samples) s.signals[0] += 17.5;

  OptimizerConfig cfg;
  const auto snapshot = capture_snapshot({policy});
  const auto a = grpo_update(policy, env, {group}, snapshot, snapshot, cfg);
  const auto b = grpo_update(policy, env, {shifted}, snapshot, snapshot, cfg);
  REQUIRE((a.theta - b.theta).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("grpo direction approaches reinforce as the group grows") {
  auto env = test::routing_env(1, 1, 4, [](int, int, int t) {
    return 0.05 + 0.18 * t;
  });
  Rng init(10);
  const auto policy = test::random_policies(env, Conditioning::Independent, init, 0.6)[0];
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  Rng rng(11);
  const auto group = sample_group(env, policy, z, 512, rng);

  OptimizerConfig cfg;
  cfg.kl_beta = 0.0;
  cfg.grad_clip_norm = 1e9;
  const auto snapshot = capture_snapshot({policy});
  const auto grpo = grpo_update(policy, env, {group}, snapshot, snapshot, cfg);
  const Eigen::MatrixXd grpo_dir = grpo.theta - policy.theta;

  std::vector<ReinforceSample> batch;
  for (const auto& s : group.samples)
    batch.push_back({z, s.proposals[0], s.signals[0]});
  const auto rf = reinforce_update(policy, batch, cfg.learning_rate, 1e9);
  const Eigen::MatrixXd rf_dir = rf.theta - policy.theta;

  REQUIRE(cosine(grpo_dir, rf_dir) > 0.99);
}

TEST_CASE("snapshots are immune to later edits of the source") {
  auto env = test::routing_env(1, 2, 2, [](int, int, int) { return 0.5; });
  auto policies = test::uniform_policies(env);
  const auto snapshot = capture_snapshot(policies);
  policies[0].theta(0, 0) = 9.0;
  const auto z = make_conditioning(env, Conditioning::Independent,
                                   env.context(0), {});
  REQUIRE(action_probabilities(snapshot.agent(0), z)[0] ==
          Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("snapshot of a snapshot is identical") {
  auto env = test::routing_env(1, 2, 3, [](int, int, int) { return 0.5; });
  Rng init(12);
  const auto policies = test::random_policies(env, Conditioning::Independent, init);
  const auto first = capture_snapshot(policies);
  const auto second = capture_snapshot(first.policies);
  for (std::size_t i = 0; i < policies.size(); ++i)
    REQUIRE(first.policies[i].theta == second.policies[i].theta);
}

TEST_CASE("policy json round trip preserves every coefficient") {
  auto env = test::routing_env(2, 2, 3, [](int, int, int) { return 0.5; });
  Rng init(13);
  const auto policies = test::random_policies(env, Conditioning::Autoregressive, init, 3.3);
  const auto j = policies_to_json(policies);
  const auto back = policies_from_json(nlohmann::json::parse(j.dump()));
  for (std::size_t i = 0; i < policies.size(); ++i) {
    REQUIRE(back[i].theta == policies[i].theta);
    REQUIRE(back[i].conditioning == policies[i].conditioning);
  }
}

TEST_CASE("optimizer config presets carry the documented defaults") {
  const OptimizerConfig lib = optimizer_config_preset("default");
  REQUIRE(lib.clip_eps == 0.2);
  REQUIRE(lib.kl_beta == 0.02);
  REQUIRE(lib.learning_rate == 0.05);
  REQUIRE(lib.grad_clip_norm == 1.0);
  const OptimizerConfig llm = optimizer_config_preset("paper-llm");
  REQUIRE(llm.learning_rate == 1e-5);
  REQUIRE_THROWS_AS(optimizer_config_preset("nope"), ConfigError);
}

TEST_CASE("invalid optimizer configs are rejected") {
  OptimizerConfig cfg;
  cfg.clip_eps = 1.5;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = OptimizerConfig{};
  cfg.kl_beta = -0.1;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = OptimizerConfig{};
  cfg.norm_delta = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
