#pragma once

// Latent diffusion on the next frame, conditioned on pooled backbone features.

#include "dw0/backbone.hpp"

#include <filesystem>
#include <functional>

namespace dw0 {

inline constexpr int kLatentBlock = 8;
inline constexpr int kLatentSide = kImageSize / kLatentBlock;                  // 4
inline constexpr int kLatentDim = kLatentSide * kLatentSide * kImageChannels;  // 48

struct NoiseSchedule {
  std::vector<double> beta, alpha, alpha_bar;  // index k-1 for step k

  /// Linear betas from beta_1 to beta_T.
  static NoiseSchedule linear(int steps, double beta_1, double beta_T);
  /// 1e-4 .. 0.02 rescaled by 1000 / steps (the 1000-step range compressed).
  static NoiseSchedule standard(int steps = 100);
  int steps() const { return static_cast<int>(beta.size()); }
  double b(int k) const { return beta.at(static_cast<std::size_t>(k - 1)); }
  double a(int k) const { return alpha.at(static_cast<std::size_t>(k - 1)); }
  double abar(int k) const { return k == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(k - 1)); }
  /// Posterior variance of z_{k-1} given z_k and z_0.
  double posterior_variance(int k) const;
};

/// 8x8 block mean per channel, mapped to [-1, 1]; layout (block_row, block_col, channel).
RowVector<double> encode_latent(const Image& image);
/// Clips to [-1, 1], inverts the affine map, nearest-neighbour upsampling.
Image decode_latent(const RowVector<double>& z);

/// sqrt(abar_k) z + sqrt(1 - abar_k) eps, 1 <= k <= T.
RowVector<double> noising(const RowVector<double>& z, int k, const RowVector<double>& eps,
                          const NoiseSchedule& schedule);

struct DenoiserConfig {
  int hidden = 256;
  int time_dim = 32;
  int cond_dim = 128;  // backbone width
  double out_std = 0.02;
  int input_dim() const { return kLatentDim + time_dim + 2 * cond_dim; }
};

template <typename Scalar>
struct PooledFeatures {
  Tensor<Scalar> visual;  // batch x d, mean of the final chunk's visual rows
  Tensor<Scalar> action;  // batch x d, mean of the final chunk's A_{t-1} rows (zeros when absent)
};

/// Mean-pools backbone hidden rows of the selected sequences.
template <typename Scalar>
PooledFeatures<Scalar> pool_features(Tape<Scalar>& tape, const BackboneActivations<Scalar>& act,
                                     const std::vector<const TokenSequence*>& seqs, std::span<const int> which);

template <typename Scalar>
class Denoiser {
 public:
  static constexpr const char* kPrefix = "diffusion.";

  explicit Denoiser(DenoiserConfig config) : config_(config) {}
  const DenoiserConfig& config() const { return config_; }
  void init(ParamSet<Scalar>& params, Rng& rng) const;
  /// z_k: batch x 48; k: one step per row; returns predicted noise.
  Tensor<Scalar> forward(Binder<Scalar>& bind, const Tensor<Scalar>& zk, std::span<const int> k,
                         const PooledFeatures<Scalar>& cond) const;

 private:
  DenoiserConfig config_;
};

/// Next-frame latents for a batch; sequences whose clip has no next frame are skipped.
struct DiffusionTargets {
  std::vector<int> which;  // batch rows with a target
  Matrix<double> latents;  // which.size() x 48
  int skipped = 0;
};
DiffusionTargets diffusion_targets(const SequenceBuilder& builder, const std::vector<const TokenSequence*>& seqs);

/// MSE between drawn noise and the prediction, k ~ U{1..T}. Returns a zero
/// constant when no sequence has a target.
template <typename Scalar>
Tensor<Scalar> loss_wm_diff(const Denoiser<Scalar>& denoiser, Binder<Scalar>& bind, const NoiseSchedule& schedule,
                            const BackboneActivations<Scalar>& act, const std::vector<const TokenSequence*>& seqs,
                            const DiffusionTargets& targets, Rng& rng);

/// eps prediction for one latent at step k.
using EpsilonModel = std::function<RowVector<double>(const RowVector<double>& zk, int k)>;

/// Ancestral sampling from z_T ~ N(0, I); no noise at k = 1. The result is clipped to [-1, 1].
RowVector<double> ancestral_sample(const NoiseSchedule& schedule, const EpsilonModel& eps, std::uint64_t seed);

/// Samples one future frame per sequence (rows of `pooled` as conditioning).
template <typename Scalar>
std::vector<Image> sample_future(const Denoiser<Scalar>& denoiser, ParamSet<Scalar>& params,
                                 const NoiseSchedule& schedule, const Matrix<Scalar>& pooled_visual,
                                 const Matrix<Scalar>& pooled_action, std::uint64_t seed);

/// 16-byte header ("DW0I", u32 width, height, channels) plus raw bytes.
void write_image_dump(const std::filesystem::path& path, const Image& image);
Image read_image_dump(const std::filesystem::path& path);

}  // namespace dw0
