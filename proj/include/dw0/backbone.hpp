#pragma once

// Pre-norm causal transformer over interleaved token sequences.

#include "dw0/sequence.hpp"
#include "dw0/tensor.hpp"

#include <optional>

namespace dw0 {

struct BackboneConfig {
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int mlp_hidden = 512;
  int max_length = kMaxSequenceLength;
  double init_std = 0.02;

  int head_dim() const { return d_model / heads; }
  void validate() const;
};

/// Batch of sequences sharing one layout (same length and modality tags).
struct SequenceBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;        // batch * length
  std::vector<int> positions;  // batch * length
  std::vector<int> segments;   // modality per position, batch * length
  bool continuous = false;
  std::vector<int> visual_rows;  // global rows fed by patch features (continuous)
  Matrix<float> patches;         // one row per visual_rows entry
};

/// Stacks sequences, keeping the first `length` positions of each (all of
/// them when length < 0). Throws when layouts differ.
SequenceBatch make_batch(const std::vector<const TokenSequence*>& seqs, FrontEnd front_end, int length = -1);
SequenceBatch make_batch(const std::vector<TokenSequence>& seqs, FrontEnd front_end, int length = -1);

/// Lazily binds named parameters to one tape.
template <typename Scalar>
class Binder {
 public:
  Binder(Tape<Scalar>& tape, ParamSet<Scalar>& params) : tape_(&tape), params_(&params) {}
  Tensor<Scalar> operator()(const std::string& name);
  Tape<Scalar>& tape() const { return *tape_; }
  ParamSet<Scalar>& params() const { return *params_; }

 private:
  Tape<Scalar>* tape_;
  ParamSet<Scalar>* params_;
  std::map<std::string, Tensor<Scalar>> bound_;
};

template <typename Scalar>
struct BackboneActivations {
  Tensor<Scalar> hidden;  // (batch*length) x d_model after the final norm
  std::vector<Tensor<Scalar>> keys, values;  // per layer, for expert attention
  int batch = 0;
  int length = 0;
};

template <typename Scalar>
class Backbone {
 public:
  static constexpr const char* kPrefix = "backbone.";

  explicit Backbone(BackboneConfig config = {}) : config_(config) { config_.validate(); }
  const BackboneConfig& config() const { return config_; }

  void init(ParamSet<Scalar>& params, Rng& rng) const;

  Tensor<Scalar> embed(Binder<Scalar>& bind, const SequenceBatch& batch) const;

  struct Projections {
    Tensor<Scalar> q, k, v;
  };
  Projections project(Binder<Scalar>& bind, int layer, const Tensor<Scalar>& h) const;
  /// Residual attention output projection plus the MLP block.
  Tensor<Scalar> finish_layer(Binder<Scalar>& bind, int layer, const Tensor<Scalar>& h,
                              const Tensor<Scalar>& attn) const;
  Tensor<Scalar> final_norm(Binder<Scalar>& bind, const Tensor<Scalar>& h) const;

  /// Causal forward. `mask` replaces the causal mask when given.
  BackboneActivations<Scalar> forward(Binder<Scalar>& bind, const SequenceBatch& batch,
                                      std::shared_ptr<const AttentionMask> mask = nullptr) const;

  /// Next-token logits at the given global rows.
  Tensor<Scalar> logits(Binder<Scalar>& bind, const Tensor<Scalar>& hidden, std::span<const int> rows) const;

 private:
  std::string name(int layer, const std::string& leaf) const;

  BackboneConfig config_;
};

/// Cross-entropy over A_t targets; rows are per-sequence positions.
template <typename Scalar>
Tensor<Scalar> loss_action(const Backbone<Scalar>& model, Binder<Scalar>& bind,
                           const BackboneActivations<Scalar>& act, const std::vector<const TokenSequence*>& seqs);

/// Cross-entropy over the final frame's 64 visual tokens. Rejects sequences
/// without discrete visual targets.
template <typename Scalar>
Tensor<Scalar> loss_wm_ar(const Backbone<Scalar>& model, Binder<Scalar>& bind,
                          const BackboneActivations<Scalar>& act, const std::vector<const TokenSequence*>& seqs);

struct DecodeOptions {
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

/// Index of the chosen token among [lo, hi): argmax, or sampling at the
/// given temperature. Logits outside the range are ignored.
int choose_token(const RowVector<double>& logits, int lo, int hi, double temperature, Rng& rng);

/// Greedy / sampled generation of the 12 A_t tokens from the context, one
/// full forward per token.
template <typename Scalar>
std::array<int, kActionTokens> generate_action_tokens(const Backbone<Scalar>& model, ParamSet<Scalar>& params,
                                                      const TokenSequence& seq, FrontEnd front_end,
                                                      const DecodeOptions& options = {});

/// 64 visual tokens for the final frame, sampled left to right after its
/// BOV; discrete front end only.
template <typename Scalar>
std::array<int, kPatchesPerImage> generate_visual_tokens(const Backbone<Scalar>& model, ParamSet<Scalar>& params,
                                                         const TokenSequence& seq, FrontEnd front_end,
                                                         const DecodeOptions& options);

}  // namespace dw0
