#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cfcredit/env.hpp"
#include "cfcredit/errors.hpp"
#include "cfcredit/rng.hpp"

namespace cfcredit {

enum class Conditioning { Independent, Autoregressive };

inline std::string to_string(Conditioning c) {
  return c == Conditioning::Independent ? "independent" : "autoregressive";
}

inline Conditioning conditioning_from_string(const std::string& s) {
  if (s == "independent") return Conditioning::Independent;
  if (s == "autoregressive") return Conditioning::Autoregressive;
  throw ConfigError("unknown conditioning mode \"" + s + "\"");
}

/// Dimension of the encoded conditioning input. Autoregressive policies see
/// the context features plus one vocabulary-sized slot per possible prefix
/// agent, zero-padded for agents that have not acted.
inline int encoded_dim(const EnvSpec& env, Conditioning mode) {
  if (mode == Conditioning::Independent) return env.d;
  return env.d + (env.K - 1) * env.V;
}

/// The information available before an agent acts: the context plus the
/// proposals of earlier agents, with a fixed-width numeric encoding.
struct ConditioningInput {
  Context context;
  std::vector<Proposal> prefix;
  Eigen::VectorXd encoded;
};

inline ConditioningInput make_conditioning(const EnvSpec& env,
                                           Conditioning mode,
                                           const Context& ctx,
                                           std::vector<Proposal> prefix) {
  if (mode == Conditioning::Independent)
    require_config(prefix.empty(),
                   "independent conditioning takes an empty prefix");
  require_config(static_cast<int>(prefix.size()) <= env.K - 1 || prefix.empty(),
                 "prefix longer than K-1 agents");
  Eigen::VectorXd enc = Eigen::VectorXd::Zero(encoded_dim(env, mode));
  enc.head(env.d) = ctx.features;
  if (mode == Conditioning::Autoregressive) {
    for (std::size_t j = 0; j < prefix.size(); ++j) {
      const Proposal& p = prefix[j];
      require_config(p.token >= 0 && p.token < env.V, "prefix token ",
                     p.token, " outside vocabulary [0,", env.V, ")");
      enc[env.d + static_cast<int>(j) * env.V + p.token] = 1.0;
    }
  }
  return ConditioningInput{ctx, std::move(prefix), std::move(enc)};
}

/// Linear-softmax agent policy: logits are theta^T z for the encoded
/// conditioning input z. theta has shape (encoded dim) x V.
struct AgentPolicy {
  int agent = 0;
  Conditioning conditioning = Conditioning::Independent;
  Eigen::MatrixXd theta;
};

inline AgentPolicy make_policy(const EnvSpec& env, int agent,
                               Conditioning mode) {
  return AgentPolicy{agent, mode,
                     Eigen::MatrixXd::Zero(encoded_dim(env, mode), env.V)};
}

/// Exact softmax action distribution at z. Shift-invariant and normalized
/// to machine precision.
inline Eigen::VectorXd action_probabilities(const AgentPolicy& policy,
                                            const ConditioningInput& z) {
  require_config(policy.theta.rows() == z.encoded.size(),
                 "policy expects encoded dimension ", policy.theta.rows(),
                 ", got ", z.encoded.size());
  Eigen::VectorXd logits = policy.theta.transpose() * z.encoded;
  const double m = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - m).exp();
  p /= p.sum();
  return p;
}

/// Samples a proposal and returns its exact log-probability.
inline std::pair<Proposal, double> propose(const AgentPolicy& policy,
                                           const ConditioningInput& z,
                                           Rng& rng) {
  const Eigen::VectorXd p = action_probabilities(policy, z);
  const int token = rng.categorical(p);
  return {Proposal{policy.agent, token}, std::log(p[token])};
}

/// Gradient of log pi(a|z) w.r.t. theta. For linear-softmax this is the
/// outer product of z with (one-hot(a) - probabilities).
inline Eigen::MatrixXd logprob_grad(const AgentPolicy& policy,
                                    const ConditioningInput& z,
                                    const Proposal& a) {
  const Eigen::VectorXd p = action_probabilities(policy, z);
  require_usage(a.token >= 0 && a.token < p.size(), "token ", a.token,
                " outside vocabulary");
  Eigen::VectorXd delta = -p;
  delta[a.token] += 1.0;
  return z.encoded * delta.transpose();
}

struct JointSample {
  std::vector<Proposal> proposals;
  std::vector<double> logprobs;
};

/// Samples all K agents in index order. Autoregressive policies see the
/// realized prefix; independent policies see only the context.
inline JointSample sample_joint(const EnvSpec& env,
                                const std::vector<AgentPolicy>& policies,
                                const Context& ctx, Rng& rng) {
  require_config(static_cast<int>(policies.size()) == env.K,
                 "expected ", env.K, " policies, got ", policies.size());
  const Conditioning mode = policies.front().conditioning;
  for (const auto& pol : policies)
    require_config(pol.conditioning == mode,
                   "all policies must share one conditioning mode");
  JointSample out;
  std::vector<Proposal> prefix;
  for (int i = 0; i < env.K; ++i) {
    const auto z = make_conditioning(
        env, mode, ctx,
        mode == Conditioning::Autoregressive ? prefix
                                             : std::vector<Proposal>{});
    auto [proposal, logprob] = propose(policies[static_cast<std::size_t>(i)], z, rng);
    out.proposals.push_back(proposal);
    out.logprobs.push_back(logprob);
    prefix.push_back(proposal);
  }
  return out;
}

/// Replacement distribution q for counterfactuals. Deliberately decoupled
/// from any trainable policy: a frozen copy snapshots theta by value.
struct ReplacementPolicy {
  enum class Kind { FixedToken, Uniform, FrozenCopy };
  Kind kind = Kind::Uniform;
  int fixed_token = 0;
  int vocab = 0;  ///< required for Uniform
  std::shared_ptr<const AgentPolicy> snapshot;  ///< required for FrozenCopy
};

inline ReplacementPolicy fixed_replacement(int token) {
  return ReplacementPolicy{ReplacementPolicy::Kind::FixedToken, token, 0, nullptr};
}

inline ReplacementPolicy uniform_replacement(int vocab) {
  require_config(vocab > 0, "uniform replacement needs a positive vocabulary");
  return ReplacementPolicy{ReplacementPolicy::Kind::Uniform, 0, vocab, nullptr};
}

inline ReplacementPolicy frozen_replacement(const AgentPolicy& policy) {
  return ReplacementPolicy{ReplacementPolicy::Kind::FrozenCopy, 0, 0,
                           std::make_shared<const AgentPolicy>(policy)};
}

/// Probability vector of the replacement draw at z (needed by oracles).
inline Eigen::VectorXd replacement_probabilities(const ReplacementPolicy& q,
                                                 const ConditioningInput& z,
                                                 int vocab) {
  switch (q.kind) {
    case ReplacementPolicy::Kind::FixedToken: {
      require_usage(q.fixed_token >= 0 && q.fixed_token < vocab,
                    "fixed replacement token out of range");
      Eigen::VectorXd p = Eigen::VectorXd::Zero(vocab);
      p[q.fixed_token] = 1.0;
      return p;
    }
    case ReplacementPolicy::Kind::Uniform:
      require_usage(q.vocab == vocab, "uniform replacement vocabulary ",
                    q.vocab, " does not match environment vocabulary ", vocab);
      return Eigen::VectorXd::Constant(vocab, 1.0 / vocab);
    case ReplacementPolicy::Kind::FrozenCopy:
      require_usage(q.snapshot != nullptr, "frozen replacement has no snapshot");
      return action_probabilities(*q.snapshot, z);
  }
  throw UsageError("unreachable replacement kind");
}

inline Proposal sample_replacement(const ReplacementPolicy& q,
                                   const ConditioningInput& z, int agent,
                                   int vocab, Rng& rng) {
  const Eigen::VectorXd p = replacement_probabilities(q, z, vocab);
  return Proposal{agent, rng.categorical(p)};
}

// ---------------------------------------------------------------------------
// Policy-set serialization: flat numeric file with a header line carrying
// (K, V, encoded dim, conditioning mode). Values are hex floats so that a
// checkpoint/resume round trip is bit-exact.
// ---------------------------------------------------------------------------

inline void save_policies(const std::string& path,
                          const std::vector<AgentPolicy>& policies) {
  require_usage(!policies.empty(), "cannot save an empty policy set");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const auto& first = policies.front();
  out << "cfcredit-policy 1\n";
  out << policies.size() << " " << first.theta.cols() << " "
      << first.theta.rows() << " " << to_string(first.conditioning) << "\n";
  char buf[64];
  for (const auto& pol : policies) {
    for (int r = 0; r < pol.theta.rows(); ++r)
      for (int c = 0; c < pol.theta.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%a", pol.theta(r, c));
        out << buf << (c + 1 == pol.theta.cols() ? "\n" : " ");
      }
  }
  if (!out) throw IoError("write to " + path + " failed");
}

inline std::vector<AgentPolicy> load_policies(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open policy file " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "cfcredit-policy" || version != 1)
    throw IoError(path + " is not a version-1 policy file");
  std::size_t K = 0;
  int V = 0, d_enc = 0;
  std::string mode_str;
  in >> K >> V >> d_enc >> mode_str;
  if (!in || K == 0 || V <= 0 || d_enc <= 0)
    throw IoError(path + ": malformed policy header");
  const Conditioning mode = conditioning_from_string(mode_str);
  std::vector<AgentPolicy> policies;
  for (std::size_t i = 0; i < K; ++i) {
    AgentPolicy pol{static_cast<int>(i), mode,
                    Eigen::MatrixXd::Zero(d_enc, V)};
    for (int r = 0; r < d_enc; ++r)
      for (int c = 0; c < V; ++c) {
        std::string tok;
        in >> tok;
        if (!in) throw IoError(path + ": truncated policy data");
        pol.theta(r, c) = std::strtod(tok.c_str(), nullptr);
      }
    policies.push_back(std::move(pol));
  }
  return policies;
}

}  // namespace cfcredit
