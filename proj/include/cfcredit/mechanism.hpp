#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfcredit/env.hpp"
#include "cfcredit/errors.hpp"
#include "cfcredit/policy.hpp"
#include "cfcredit/rng.hpp"

namespace cfcredit {

/// Feature vector scored by the router and the reward predictor:
/// context features, candidate token one-hot, agent one-hot.
inline Eigen::VectorXd candidate_features(const EnvSpec& env,
                                          const Context& ctx,
                                          const Proposal& p) {
  require_config(p.token >= 0 && p.token < env.V, "token ", p.token,
                 " outside vocabulary [0,", env.V, ")");
  require_config(p.agent >= 0 && p.agent < env.K, "agent ", p.agent,
                 " outside [0,", env.K, ")");
  Eigen::VectorXd f = Eigen::VectorXd::Zero(env.d + env.V + env.K);
  f.head(env.d) = ctx.features;
  f[env.d + p.token] = 1.0;
  f[env.d + env.V + p.agent] = 1.0;
  return f;
}

inline int candidate_feature_dim(const EnvSpec& env) {
  return env.d + env.V + env.K;
}

/// Softmax router with temperature and uniform exploration mix:
///   p_i = (1 - epsilon) * softmax(s / tau)_i + epsilon / K.
struct Router {
  Eigen::VectorXd phi;  ///< linear score weights over candidate_features
  double tau = 1.0;
  double epsilon = 0.0;
};

inline Router make_router(const EnvSpec& env, double tau = 1.0,
                          double epsilon = 0.0) {
  return Router{Eigen::VectorXd::Zero(candidate_feature_dim(env)), tau,
                epsilon};
}

inline double router_score(const Router& router, const EnvSpec& env,
                           const Context& ctx, const Proposal& p) {
  return router.phi.dot(candidate_features(env, ctx, p));
}

inline Eigen::VectorXd route_probabilities(
    const Router& router, const EnvSpec& env, const Context& ctx,
    const std::vector<Proposal>& candidates) {
  require_config(router.tau > 0.0, "router temperature must be positive, got ",
                 router.tau);
  require_config(router.epsilon >= 0.0 && router.epsilon <= 1.0,
                 "router exploration must lie in [0,1]");
  const int n = static_cast<int>(candidates.size());
  require_config(n >= 1, "router needs at least one candidate");
  Eigen::VectorXd scores(n);
  for (int i = 0; i < n; ++i)
    scores[i] = router_score(router, env, ctx, candidates[static_cast<std::size_t>(i)]);
  const double m = scores.maxCoeff();
  Eigen::VectorXd p = ((scores.array() - m) / router.tau).exp();
  p /= p.sum();
  return (1.0 - router.epsilon) * p +
         Eigen::VectorXd::Constant(n, router.epsilon / n);
}

/// Router probabilities after removing one agent's candidate: the same rule
/// recomputed over the remaining K-1 candidates, exploration mixed with
/// 1/(K-1). Returned in original order with the removed slot skipped.
inline Eigen::VectorXd route_probabilities_without(
    const Router& router, const EnvSpec& env, const Context& ctx,
    const std::vector<Proposal>& candidates, int removed) {
  require_usage(candidates.size() >= 2, "cannot remove the sole candidate");
  require_usage(removed >= 0 && removed < static_cast<int>(candidates.size()),
                "removed index ", removed, " out of range");
  std::vector<Proposal> rest;
  rest.reserve(candidates.size() - 1);
  for (int j = 0; j < static_cast<int>(candidates.size()); ++j)
    if (j != removed) rest.push_back(candidates[static_cast<std::size_t>(j)]);
  return route_probabilities(router, env, ctx, rest);
}

/// Categorical selection; errors on a vector that is not normalized to 1e-6.
inline int select(const Eigen::VectorXd& probabilities, Rng& rng) {
  return rng.categorical(probabilities);
}

// ---------------------------------------------------------------------------
// Collaborative aggregation
// ---------------------------------------------------------------------------

enum class AggregationRule { SelectMaxScore, TupleIdentity, Custom };

/// Deterministic combination of all K proposals into one deployed output.
/// select-max-score picks the proposal with the highest token index (ties
/// to the earliest agent); tuple-identity keys the ordered token tuple.
struct Aggregator {
  AggregationRule rule = AggregationRule::TupleIdentity;
  std::string custom_tag;
  std::function<DeployedOutput(const Context&, const std::vector<Proposal>&)>
      custom_fn;
};

inline DeployedOutput aggregate(const Aggregator& agg, const Context& ctx,
                                const std::vector<Proposal>& proposals) {
  require_config(!proposals.empty(), "aggregate needs at least one proposal");
  switch (agg.rule) {
    case AggregationRule::TupleIdentity:
      return DeployedOutput{tuple_key(proposals)};
    case AggregationRule::SelectMaxScore: {
      std::size_t best = 0;
      for (std::size_t j = 1; j < proposals.size(); ++j)
        if (proposals[j].token > proposals[best].token) best = j;
      return DeployedOutput{proposal_key(proposals[best])};
    }
    case AggregationRule::Custom:
      require_config(static_cast<bool>(agg.custom_fn),
                     "custom aggregator \"", agg.custom_tag,
                     "\" has no function");
      return agg.custom_fn(ctx, proposals);
  }
  throw UsageError("unreachable aggregation rule");
}

// ---------------------------------------------------------------------------
// Reward allocation
// ---------------------------------------------------------------------------

enum class AllocationKind { SelectedIndicator, UniformShare };

inline Eigen::VectorXd allocation(AllocationKind kind, int K,
                                  std::optional<int> selected) {
  require_config(K >= 1, "allocation needs K >= 1");
  if (kind == AllocationKind::UniformShare)
    return Eigen::VectorXd::Constant(K, 1.0 / K);
  require_usage(selected.has_value(),
                "selected-indicator allocation needs a selected index");
  require_usage(*selected >= 0 && *selected < K, "selected index ", *selected,
                " outside [0,", K, ")");
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(K);
  alpha[*selected] = 1.0;
  return alpha;
}

// ---------------------------------------------------------------------------
// Selection-gated logging
// ---------------------------------------------------------------------------

/// The filtered record emitted by the logging map: candidates, selection,
/// propensities, and the observed return of the selected candidate only.
/// No field stores an unselected candidate's reward.
struct LoggedObservation {
  Context ctx;
  std::vector<Proposal> candidates;
  int selected = 0;
  Eigen::VectorXd propensities;
  double observed_return = 0.0;
  std::uint64_t mech_seed = 0;
  int turn = 1;
};

constexpr int kLogSchemaVersion = 1;

inline LoggedObservation log_observation(const Context& ctx,
                                         std::vector<Proposal> candidates,
                                         const Eigen::VectorXd& propensities,
                                         int selected, double observed_return,
                                         std::uint64_t mech_seed, int turn) {
  const int K = static_cast<int>(candidates.size());
  require_config(K >= 1, "log_observation needs candidates");
  require_config(selected >= 0 && selected < K, "selected index ", selected,
                 " outside [0,", K, ")");
  require_config(propensities.size() == K,
                 "propensity vector length must match candidate count");
  require_config(std::abs(propensities.sum() - 1.0) <= 1e-9,
                 "propensities sum to ", propensities.sum());
  require_config(std::isfinite(observed_return),
                 "observed return must be finite");
  require_config(turn >= 1, "turn index must be >= 1");
  return LoggedObservation{ctx,   std::move(candidates), selected,
                           propensities, observed_return, mech_seed, turn};
}

inline nlohmann::json observation_to_json(const LoggedObservation& obs) {
  nlohmann::json j;
  j["schema_version"] = kLogSchemaVersion;
  j["ctx"] = {{"id", obs.ctx.id},
              {"features", std::vector<double>(obs.ctx.features.data(),
                                               obs.ctx.features.data() +
                                                   obs.ctx.features.size())}};
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : obs.candidates)
    cands.push_back({{"agent", c.agent}, {"token", c.token}});
  j["candidates"] = cands;
  j["selected"] = obs.selected;
  j["propensities"] = std::vector<double>(
      obs.propensities.data(), obs.propensities.data() + obs.propensities.size());
  j["observed_return"] = obs.observed_return;
  j["mech_seed"] = obs.mech_seed;
  j["turn"] = obs.turn;
  return j;
}

inline LoggedObservation observation_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    require_config(version == kLogSchemaVersion, "log schema version ",
                   version, " is not supported");
    Context ctx;
    ctx.id = j.at("ctx").at("id").get<int>();
    const auto feats = j.at("ctx").at("features").get<std::vector<double>>();
    ctx.features = Eigen::Map<const Eigen::VectorXd>(feats.data(),
                                                     static_cast<long>(feats.size()));
    std::vector<Proposal> candidates;
    for (const auto& c : j.at("candidates"))
      candidates.push_back({c.at("agent").get<int>(), c.at("token").get<int>()});
    const auto props = j.at("propensities").get<std::vector<double>>();
    Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(props.data(),
                                                          static_cast<long>(props.size()));
    return log_observation(ctx, std::move(candidates), p,
                           j.at("selected").get<int>(),
                           j.at("observed_return").get<double>(),
                           j.at("mech_seed").get<std::uint64_t>(),
                           j.at("turn").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(detail::cat("malformed log record: ", e.what()));
  }
}

/// Newline-delimited log file: one observation per line. This format is the
/// contract between rollout collection and estimator training.
inline void write_log_file(const std::string& path,
                           const std::vector<LoggedObservation>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& obs : log) out << observation_to_json(obs).dump() << "\n";
  if (!out) throw IoError("write to " + path + " failed");
}

inline std::vector<LoggedObservation> read_log_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log file " + path);
  std::vector<LoggedObservation> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(observation_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite mechanism
// ---------------------------------------------------------------------------

enum class MechanismKind { Routing, Aggregation };

inline std::string to_string(MechanismKind k) {
  return k == MechanismKind::Routing ? "routing" : "aggregation";
}

inline MechanismKind mechanism_kind_from_string(const std::string& s) {
  if (s == "routing") return MechanismKind::Routing;
  if (s == "aggregation") return MechanismKind::Aggregation;
  throw ConfigError("unknown mechanism kind \"" + s + "\"");
}

struct Mechanism {
  MechanismKind kind = MechanismKind::Routing;
  Router router;          ///< used when kind == Routing
  Aggregator aggregator;  ///< used when kind == Aggregation
  AllocationKind alloc = AllocationKind::SelectedIndicator;
};

inline Mechanism routing_mechanism(const EnvSpec& env, double tau = 1.0,
                                   double epsilon = 0.0) {
  return Mechanism{MechanismKind::Routing, make_router(env, tau, epsilon),
                   Aggregator{}, AllocationKind::SelectedIndicator};
}

inline Mechanism aggregation_mechanism(
    AggregationRule rule = AggregationRule::TupleIdentity) {
  return Mechanism{MechanismKind::Aggregation, Router{},
                   Aggregator{rule, "", nullptr},
                   AllocationKind::UniformShare};
}

/// Outcome of applying the mechanism to one proposal profile. For routing,
/// mechanism randomness is drawn under a named seed so that counterfactual
/// replays can use an independent stream.
struct DeployResult {
  DeployedOutput output;
  int selected = -1;                ///< -1 for aggregation
  Eigen::VectorXd propensities;     ///< empty for aggregation
  std::uint64_t mech_seed = 0;
};

inline DeployResult deploy(const Mechanism& mech, const EnvSpec& env,
                           const Context& ctx,
                           const std::vector<Proposal>& proposals, Rng& rng) {
  if (mech.kind == MechanismKind::Aggregation) {
    return DeployResult{aggregate(mech.aggregator, ctx, proposals), -1,
                        Eigen::VectorXd{}, 0};
  }
  const Eigen::VectorXd p = route_probabilities(mech.router, env, ctx, proposals);
  const std::uint64_t seed = rng.next_seed();
  Rng mech_rng(seed);
  const int idx = select(p, mech_rng);
  return DeployResult{DeployedOutput{proposal_key(proposals[static_cast<std::size_t>(idx)])},
                      idx, p, seed};
}

}  // namespace cfcredit
