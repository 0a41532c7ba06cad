#pragma once

// Small action expert coupled to the backbone through joint attention, with
// query, autoregressive and flow-matching decoders.

#include "dw0/backbone.hpp"

#include <functional>

namespace dw0 {

enum class DecoderKind : std::uint8_t { Query = 0, Autoregressive = 1, Flow = 2 };

std::string to_string(DecoderKind k);
DecoderKind decoder_from_string(const std::string& s);

struct ExpertConfig {
  int d_model = 64;
  int heads = 4;           // must match the backbone
  int attn_width = 128;    // backbone heads x head_dim
  int layers = 4;          // one joint layer per backbone layer
  int mlp_hidden = 256;
  int queries = kWaypoints;
  int flow_steps = 10;
  int max_tokens = 32;     // prefix + decoder tokens
  double init_std = 0.02;
  DecoderKind kind = DecoderKind::Query;
  /// Lets backbone positions attend expert tokens. Off by default; the
  /// autoregressive decoder refuses it.
  bool backbone_sees_expert = false;

  void validate(const BackboneConfig& backbone) const;
};

inline constexpr int kPrefixTokens = kActionTokens;  // A_{t-1}
inline constexpr double kFlowScale = kWorkspaceBound;

/// Sinusoidal embedding of scalar times (one row each), `dim` even:
/// [sin(s*f_0) .. sin(s*f_{h-1}), cos(s*f_0) .. ], f_i = 10000^(-i/h).
Matrix<double> sinusoidal_embedding(std::span<const double> values, int dim, double scale = 1.0);

template <typename Scalar>
struct JointAttentionOutput {
  Tensor<Scalar> backbone;
  Tensor<Scalar> expert;  // invalid when the expert side is empty
};

/// One attention over [backbone; expert] tokens per sequence. Expert
/// queries see every backbone token and earlier expert tokens; backbone
/// queries are causal over the backbone and see the expert side only when
/// backbone_sees_expert. te == 0 gives plain causal backbone attention.
template <typename Scalar>
JointAttentionOutput<Scalar> joint_attention(const Tensor<Scalar>& qb, const Tensor<Scalar>& kb,
                                             const Tensor<Scalar>& vb, const Tensor<Scalar>& qe,
                                             const Tensor<Scalar>& ke, const Tensor<Scalar>& ve, int heads, int batch,
                                             int te, bool backbone_sees_expert);

template <typename Scalar>
struct JointOutput {
  BackboneActivations<Scalar> backbone;
  Tensor<Scalar> expert_hidden;  // (batch*te) x d_expert after the final norm
};

template <typename Scalar>
class ActionExpert {
 public:
  static constexpr const char* kPrefix = "expert.";

  ActionExpert(const Backbone<Scalar>& backbone, ExpertConfig config);
  const ExpertConfig& config() const { return config_; }
  const Backbone<Scalar>& backbone() const { return *backbone_; }

  void init(ParamSet<Scalar>& params, Rng& rng) const;

  /// Expert stack over cached backbone keys/values (backbone_sees_expert off).
  Tensor<Scalar> forward_cached(Binder<Scalar>& bind, const BackboneActivations<Scalar>& context,
                                const Tensor<Scalar>& expert_in, int te) const;
  /// Layer-interleaved joint forward of both stacks.
  JointOutput<Scalar> forward_joint(Binder<Scalar>& bind, const SequenceBatch& batch, const Tensor<Scalar>& expert_in,
                                    int te) const;

  // ---- expert inputs (rows grouped per sequence) ----
  Tensor<Scalar> embed_tokens(Binder<Scalar>& bind, std::span<const int> ids, int batch, int te) const;
  Tensor<Scalar> query_input(Binder<Scalar>& bind, std::span<const int> prefix_ids, int batch) const;
  /// x_t rows: batch x 12 normalized waypoints; t: one time per sequence.
  Tensor<Scalar> flow_input(Binder<Scalar>& bind, std::span<const int> prefix_ids, const Matrix<Scalar>& x,
                            std::span<const double> t) const;

  // ---- heads ----
  /// batch x 12 trajectory in meters from the query rows.
  Tensor<Scalar> query_head(Binder<Scalar>& bind, const Tensor<Scalar>& hidden, int batch) const;
  Tensor<Scalar> ar_logits(Binder<Scalar>& bind, const Tensor<Scalar>& hidden, std::span<const int> rows) const;
  /// batch x 12 velocity from the flow rows.
  Tensor<Scalar> flow_head(Binder<Scalar>& bind, const Tensor<Scalar>& hidden, int batch) const;

  int query_tokens() const { return kPrefixTokens + config_.queries; }
  int flow_tokens() const { return kPrefixTokens + kWaypoints; }

 private:
  std::string name(int layer, const std::string& leaf) const;
  Tensor<Scalar> expert_layer(Binder<Scalar>& bind, int l, const Tensor<Scalar>& h, const Tensor<Scalar>& attn) const;
  Tensor<Scalar> add_positions(Binder<Scalar>& bind, const Tensor<Scalar>& x, int batch, int te) const;

  const Backbone<Scalar>* backbone_;
  ExpertConfig config_;
};

/// Runs the expert against one fixed backbone context. With
/// backbone_sees_expert off the context is computed once and its keys and
/// values are reused by every expert call; otherwise every call is a full
/// joint forward.
template <typename Scalar>
class ExpertSession {
 public:
  ExpertSession(const ActionExpert<Scalar>& expert, ParamSet<Scalar>& params, Tape<Scalar>& tape,
                SequenceBatch context);

  const SequenceBatch& context() const { return context_; }
  Binder<Scalar>& binder() { return bind_; }
  /// Backbone activations of the context (cached or from the last joint call).
  const BackboneActivations<Scalar>& backbone() const { return backbone_; }
  Tensor<Scalar> run(const Tensor<Scalar>& expert_in, int te);

 private:
  const ActionExpert<Scalar>* expert_;
  Binder<Scalar> bind_;
  SequenceBatch context_;
  BackboneActivations<Scalar> backbone_;
};

/// Per-sequence prefix ids (A_{t-1}) and targets gathered from sequences.
std::vector<int> prefix_ids(const std::vector<const TokenSequence*>& seqs);

// ---- training losses ----
template <typename Scalar>
Tensor<Scalar> query_loss(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                          const std::vector<const TokenSequence*>& seqs);
template <typename Scalar>
Tensor<Scalar> ar_expert_loss(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                              const std::vector<const TokenSequence*>& seqs);
/// Flow-matching MSE with a_0 ~ N(0, I) and t ~ U[0, 1] drawn from rng.
template <typename Scalar>
Tensor<Scalar> flow_loss(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                         const std::vector<const TokenSequence*>& seqs, Rng& rng);

// ---- decoding (one sequence per session row) ----
template <typename Scalar>
std::vector<Trajectory> query_decode(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                                     const std::vector<const TokenSequence*>& seqs);
/// Generates `count` tokens per sequence (12 for a trajectory; other counts
/// only for timing) with masked decoding.
template <typename Scalar>
std::vector<std::vector<int>> ar_expert_decode(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                                               const std::vector<const TokenSequence*>& seqs,
                                               const DecodeOptions& options = {}, int count = kActionTokens);
/// Velocity field v(x_t, t) in normalized coordinates, batch x 12.
template <typename Scalar>
Matrix<double> flow_velocity(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                             const std::vector<const TokenSequence*>& seqs, const Matrix<double>& x,
                             std::span<const double> t);
template <typename Scalar>
std::vector<Trajectory> flow_sample(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                                    const std::vector<const TokenSequence*>& seqs, std::uint64_t seed);

using VelocityField = std::function<Matrix<double>(const Matrix<double>& x, double t)>;
/// Explicit Euler from t = 0 to 1 in `steps` equal steps.
Matrix<double> euler_integrate(Matrix<double> x0, int steps, const VelocityField& field);

/// Rows of 12 normalized coordinates <-> trajectories in meters.
Matrix<double> flatten_trajectories(const std::vector<Trajectory>& t, double scale = 1.0 / kFlowScale);
Trajectory unflatten_trajectory(const RowVector<double>& row, double scale = kFlowScale);

}  // namespace dw0
