#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfcredit/errors.hpp"
#include "cfcredit/rng.hpp"

namespace cfcredit {

/// History/state at a turn: a discrete index plus its feature vector.
/// Features are a deterministic function of the id.
struct Context {
  int id = 0;
  Eigen::VectorXd features;
};

/// One agent's proposal: a symbol from that agent's vocabulary.
struct Proposal {
  int agent = 0;
  int token = 0;

  friend bool operator==(const Proposal& a, const Proposal& b) {
    return a.agent == b.agent && a.token == b.token;
  }
};

/// Canonical key of a deployed output, used for reward/transition lookups.
struct DeployedOutput {
  std::string key;

  friend bool operator==(const DeployedOutput& a, const DeployedOutput& b) {
    return a.key == b.key;
  }
};

/// Key of a single selected proposal (routing deployment).
inline std::string proposal_key(const Proposal& p) {
  return std::to_string(p.agent) + ":" + std::to_string(p.token);
}

/// Key of an ordered proposal tuple (collaborative deployment), e.g. "(1,0)".
inline std::string tuple_key(const std::vector<Proposal>& proposals) {
  std::string out = "(";
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(proposals[i].token);
  }
  out += ")";
  return out;
}

enum class RewardNoise { Deterministic, Bernoulli };

inline std::string to_string(RewardNoise m) {
  return m == RewardNoise::Deterministic ? "deterministic" : "bernoulli";
}

inline RewardNoise reward_noise_from_string(const std::string& s) {
  if (s == "deterministic") return RewardNoise::Deterministic;
  if (s == "bernoulli") return RewardNoise::Bernoulli;
  throw ConfigError("unknown reward_noise \"" + s + "\"");
}

/// Distribution over next context ids; rows of the transition table.
using TransitionRow = std::vector<std::pair<int, double>>;

/// Fully enumerable synthetic environment. Reward and transition tables are
/// keyed by (context id, deployed-output key), so every counterfactual
/// quantity has an exact value obtainable by summation.
struct EnvSpec {
  std::string name;
  int n_contexts = 0;
  int d = 0;  ///< feature dimension
  int K = 0;  ///< agent count
  int V = 0;  ///< vocabulary size per agent
  int T = 1;  ///< horizon (turns per episode)
  RewardNoise reward_noise = RewardNoise::Deterministic;

  /// Row c holds the feature vector of context c.
  Eigen::MatrixXd features;

  /// reward_table[c][key] = expected reward in [0,1]. std::map keeps
  /// enumeration order deterministic.
  std::vector<std::map<std::string, double>> reward_table;

  /// transition_table[c][key] = distribution over next context ids.
  /// Present only when T > 1.
  std::vector<std::map<std::string, TransitionRow>> transition_table;

  /// Initial context distribution; empty means uniform.
  std::vector<double> initial_dist;

  /// Specialty label per context and per agent (used by harness metrics;
  /// empty when the preset does not define specialties).
  std::vector<int> context_labels;
  std::vector<int> agent_specialties;

  /// Best achievable expected return over the table outputs, computed by
  /// finalize(); used for regret reporting against shipped presets.
  double optimal_return = 0.0;

  static constexpr std::size_t kMaxTableEntries = 1000000;

  Context context(int id) const {
    require_config(id >= 0 && id < n_contexts, "context id ", id,
                   " out of range [0,", n_contexts, ")");
    return Context{id, features.row(id)};
  }

  double initial_prob(int id) const {
    if (initial_dist.empty()) return 1.0 / n_contexts;
    return initial_dist[static_cast<std::size_t>(id)];
  }

  void validate() const {
    require_config(n_contexts > 0, "n_contexts must be positive");
    require_config(d > 0, "feature dimension d must be positive");
    require_config(K > 0, "agent count K must be positive");
    require_config(V > 0, "vocabulary size V must be positive");
    require_config(T >= 1, "horizon T must be >= 1");
    require_config(features.rows() == n_contexts && features.cols() == d,
                   "feature table must be n_contexts x d");
    require_config(features.allFinite(), "context features must be finite");
    require_config(reward_table.size() == static_cast<std::size_t>(n_contexts),
                   "reward_table must have one row per context");

    std::size_t entries = 0;
    for (int c = 0; c < n_contexts; ++c) {
      for (const auto& [key, r] : reward_table[c]) {
        require_config(std::isfinite(r) && r >= 0.0 && r <= 1.0,
                       "reward for context ", c, ", output \"", key,
                       "\" is ", r, ", outside [0,1]");
        ++entries;
      }
    }
    require_config(entries <= kMaxTableEntries, "reward table has ", entries,
                   " entries, exceeding the enumeration bound ",
                   kMaxTableEntries);

    if (T > 1) {
      require_config(
          transition_table.size() == static_cast<std::size_t>(n_contexts),
          "transition_table must have one row per context when T > 1");
      for (int c = 0; c < n_contexts; ++c) {
        for (const auto& [key, row] : transition_table[c]) {
          double total = 0.0;
          for (const auto& [next, p] : row) {
            require_config(next >= 0 && next < n_contexts,
                           "transition target ", next, " out of range");
            require_config(p >= 0.0, "negative transition probability");
            total += p;
          }
          require_config(std::abs(total - 1.0) <= 1e-9,
                         "transition row for context ", c, ", output \"", key,
                         "\" sums to ", total);
        }
      }
    }

    if (!initial_dist.empty()) {
      require_config(
          initial_dist.size() == static_cast<std::size_t>(n_contexts),
          "initial distribution must have n_contexts entries");
      double total = 0.0;
      for (double p : initial_dist) {
        require_config(p >= 0.0, "negative initial probability");
        total += p;
      }
      require_config(std::abs(total - 1.0) <= 1e-9,
                     "initial distribution sums to ", total);
    }
    if (!context_labels.empty())
      require_config(
          context_labels.size() == static_cast<std::size_t>(n_contexts),
          "context_labels must have one entry per context");
    if (!agent_specialties.empty())
      require_config(agent_specialties.size() == static_cast<std::size_t>(K),
                     "agent_specialties must have one entry per agent");
  }

  /// Validates and fills optimal_return by exhaustive enumeration:
  /// a finite-horizon maximization over table outputs.
  void finalize() {
    validate();
    // value[c] = best achievable return-to-go from context c with t turns left
    std::vector<double> value(static_cast<std::size_t>(n_contexts), 0.0);
    for (int turns_left = 1; turns_left <= T; ++turns_left) {
      std::vector<double> next(static_cast<std::size_t>(n_contexts), 0.0);
      for (int c = 0; c < n_contexts; ++c) {
        double best = 0.0;
        bool any = false;
        for (const auto& [key, r] : reward_table[c]) {
          double v = r;
          if (turns_left > 1) {
            const auto& row = transition_row(c, key);
            for (const auto& [nc, p] : row) v += p * value[nc];
          }
          if (!any || v > best) best = v;
          any = true;
        }
        next[c] = best;
      }
      value = std::move(next);
    }
    optimal_return = 0.0;
    for (int c = 0; c < n_contexts; ++c)
      optimal_return += initial_prob(c) * value[c];
  }

  const TransitionRow& transition_row(int ctx_id, const std::string& key) const {
    require_usage(T > 1, "environment \"", name,
                  "\" is single-turn; it has no transitions");
    const auto& row = transition_table[static_cast<std::size_t>(ctx_id)];
    auto it = row.find(key);
    require_config(it != row.end(), "no transition entry for context ", ctx_id,
                   ", output \"", key, "\"");
    return it->second;
  }
};

/// Expected reward from the table; errors on a missing entry.
inline double expected_reward(const EnvSpec& env, int ctx_id,
                              const std::string& key) {
  require_config(ctx_id >= 0 && ctx_id < env.n_contexts, "context id ", ctx_id,
                 " out of range");
  const auto& row = env.reward_table[static_cast<std::size_t>(ctx_id)];
  auto it = row.find(key);
  require_config(it != row.end(), "no reward entry for context ", ctx_id,
                 ", output \"", key, "\"");
  return it->second;
}

/// Draws the initial context for an episode.
inline Context sample_context(const EnvSpec& env, Rng& rng) {
  if (env.initial_dist.empty())
    return env.context(rng.uniform_int(env.n_contexts));
  Eigen::VectorXd probs =
      Eigen::Map<const Eigen::VectorXd>(env.initial_dist.data(),
                                        static_cast<long>(env.initial_dist.size()));
  return env.context(rng.categorical(probs));
}

/// Realized reward of a deployed output. Deterministic mode returns the
/// table value; bernoulli mode draws a 0/1 outcome with that mean.
inline double reward(const EnvSpec& env, const Context& ctx,
                     const DeployedOutput& y, Rng& rng) {
  const double mean = expected_reward(env, ctx.id, y.key);
  if (env.reward_noise == RewardNoise::Deterministic) return mean;
  return rng.bernoulli(mean) ? 1.0 : 0.0;
}

/// Draws the next context. Only defined for multi-turn environments.
inline Context transition(const EnvSpec& env, const Context& ctx,
                          const DeployedOutput& y, Rng& rng) {
  const TransitionRow& row = env.transition_row(ctx.id, y.key);
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [next, p] : row) {
    acc += p;
    if (u < acc) return env.context(next);
  }
  return env.context(row.back().first);
}

/// Complete, duplicate-free listing of (output, expected reward) for a
/// context, in key order.
inline std::vector<std::pair<DeployedOutput, double>> enumerate_outcomes(
    const EnvSpec& env, const Context& ctx) {
  require_config(ctx.id >= 0 && ctx.id < env.n_contexts, "context id ", ctx.id,
                 " out of range");
  std::vector<std::pair<DeployedOutput, double>> out;
  for (const auto& [key, r] : env.reward_table[static_cast<std::size_t>(ctx.id)])
    out.push_back({DeployedOutput{key}, r});
  return out;
}

// ---------------------------------------------------------------------------
// Structured-text (JSON) environment files. Keys mirror the EnvSpec fields.
// ---------------------------------------------------------------------------

inline nlohmann::json env_to_json(const EnvSpec& env) {
  nlohmann::json j;
  j["name"] = env.name;
  j["n_contexts"] = env.n_contexts;
  j["d"] = env.d;
  j["K"] = env.K;
  j["V"] = env.V;
  j["T"] = env.T;
  j["reward_noise"] = to_string(env.reward_noise);
  std::vector<std::vector<double>> feats;
  for (int c = 0; c < env.n_contexts; ++c) {
    feats.emplace_back(env.features.row(c).data(),
                       env.features.row(c).data() + env.d);
  }
  j["features"] = feats;
  nlohmann::json rt = nlohmann::json::object();
  for (int c = 0; c < env.n_contexts; ++c)
    rt[std::to_string(c)] = env.reward_table[static_cast<std::size_t>(c)];
  j["reward_table"] = rt;
  if (env.T > 1) {
    nlohmann::json tt = nlohmann::json::object();
    for (int c = 0; c < env.n_contexts; ++c) {
      nlohmann::json row = nlohmann::json::object();
      for (const auto& [key, dist] : env.transition_table[static_cast<std::size_t>(c)]) {
        nlohmann::json r = nlohmann::json::object();
        for (const auto& [next, p] : dist) r[std::to_string(next)] = p;
        row[key] = r;
      }
      tt[std::to_string(c)] = row;
    }
    j["transition_table"] = tt;
  }
  if (!env.initial_dist.empty()) j["initial_dist"] = env.initial_dist;
  if (!env.context_labels.empty()) j["context_labels"] = env.context_labels;
  if (!env.agent_specialties.empty())
    j["agent_specialties"] = env.agent_specialties;
  return j;
}

inline EnvSpec env_from_json(const nlohmann::json& j) {
  EnvSpec env;
  try {
    env.name = j.value("name", "unnamed");
    env.n_contexts = j.at("n_contexts").get<int>();
    env.d = j.at("d").get<int>();
    env.K = j.at("K").get<int>();
    env.V = j.at("V").get<int>();
    env.T = j.value("T", 1);
    env.reward_noise =
        reward_noise_from_string(j.value("reward_noise", "deterministic"));
    require_config(env.n_contexts > 0 && env.d > 0,
                   "n_contexts and d must be positive");
    env.features = Eigen::MatrixXd::Zero(env.n_contexts, env.d);
    if (j.contains("features")) {
      const auto& feats = j.at("features");
      require_config(static_cast<int>(feats.size()) == env.n_contexts,
                     "features must have one row per context");
      for (int c = 0; c < env.n_contexts; ++c) {
        const auto row = feats[static_cast<std::size_t>(c)].get<std::vector<double>>();
        require_config(static_cast<int>(row.size()) == env.d,
                       "feature row ", c, " has wrong dimension");
        for (int k = 0; k < env.d; ++k) env.features(c, k) = row[static_cast<std::size_t>(k)];
      }
    } else {
      // default: one-hot context features (requires d == n_contexts)
      require_config(env.d == env.n_contexts,
                     "omitted features require d == n_contexts (one-hot)");
      env.features = Eigen::MatrixXd::Identity(env.n_contexts, env.d);
    }
    env.reward_table.resize(static_cast<std::size_t>(env.n_contexts));
    for (const auto& [ckey, row] : j.at("reward_table").items()) {
      const int c = std::stoi(ckey);
      require_config(c >= 0 && c < env.n_contexts,
                     "reward_table context ", c, " out of range");
      for (const auto& [key, val] : row.items())
        env.reward_table[static_cast<std::size_t>(c)][key] = val.get<double>();
    }
    if (env.T > 1) {
      env.transition_table.resize(static_cast<std::size_t>(env.n_contexts));
      for (const auto& [ckey, row] : j.at("transition_table").items()) {
        const int c = std::stoi(ckey);
        require_config(c >= 0 && c < env.n_contexts,
                       "transition_table context ", c, " out of range");
        for (const auto& [key, dist] : row.items()) {
          TransitionRow r;
          for (const auto& [nkey, p] : dist.items())
            r.emplace_back(std::stoi(nkey), p.get<double>());
          std::sort(r.begin(), r.end());
          env.transition_table[static_cast<std::size_t>(c)][key] = std::move(r);
        }
      }
    }
    if (j.contains("initial_dist"))
      env.initial_dist = j.at("initial_dist").get<std::vector<double>>();
    if (j.contains("context_labels"))
      env.context_labels = j.at("context_labels").get<std::vector<int>>();
    if (j.contains("agent_specialties"))
      env.agent_specialties = j.at("agent_specialties").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(detail::cat("malformed environment json: ", e.what()));
  }
  env.finalize();
  return env;
}

inline EnvSpec load_env_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open environment file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(detail::cat("cannot parse ", path, ": ", e.what()));
  }
  return env_from_json(j);
}

}  // namespace cfcredit
