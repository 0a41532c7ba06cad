#include "dw0/diffusion.hpp"

#include "dw0/binary_io.hpp"
#include "dw0/experts.hpp"

#include <cmath>
#include <fstream>

namespace dw0 {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_1, double beta_T) {
  if (steps < 2) throw UsageError("diffusion needs at least 2 steps");
  NoiseSchedule s;
  double acc = 1.0;
  for (int k = 0; k < steps; ++k) {
    const double b = beta_1 + (beta_T - beta_1) * k / (steps - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    acc *= 1.0 - b;
    s.alpha_bar.push_back(acc);
  }
  return s;
}

NoiseSchedule NoiseSchedule::standard(int steps) {
  const double f = 1000.0 / steps;
  return linear(steps, 1e-4 * f, 0.02 * f);
}

double NoiseSchedule::posterior_variance(int k) const { return (1.0 - abar(k - 1)) / (1.0 - abar(k)) * b(k); }

RowVector<double> encode_latent(const Image& image) {
  RowVector<double> z = RowVector<double>::Zero(kLatentDim);
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c)
      for (int ch = 0; ch < kImageChannels; ++ch)
        z(((r / kLatentBlock) * kLatentSide + c / kLatentBlock) * kImageChannels + ch) +=
            image[static_cast<std::size_t>((r * kImageSize + c) * kImageChannels + ch)];
  z /= double(kLatentBlock * kLatentBlock);
  return (z.array() / 127.5 - 1.0).matrix();
}

Image decode_latent(const RowVector<double>& z) {
  if (z.size() != kLatentDim) throw std::invalid_argument("decode_latent: latent must have 48 values");
  Image img{};
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c)
      for (int ch = 0; ch < kImageChannels; ++ch) {
        const double v = std::clamp(z(((r / kLatentBlock) * kLatentSide + c / kLatentBlock) * kImageChannels + ch),
                                    -1.0, 1.0);
        img[static_cast<std::size_t>((r * kImageSize + c) * kImageChannels + ch)] =
            static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
      }
  return img;
}

RowVector<double> noising(const RowVector<double>& z, int k, const RowVector<double>& eps,
                          const NoiseSchedule& schedule) {
  if (k < 1 || k > schedule.steps()) throw std::out_of_range("diffusion step out of range");
  return std::sqrt(schedule.abar(k)) * z + std::sqrt(1.0 - schedule.abar(k)) * eps;
}

template <typename Scalar>
PooledFeatures<Scalar> pool_features(Tape<Scalar>& tape, const BackboneActivations<Scalar>& act,
                                     const std::vector<const TokenSequence*>& seqs, std::span<const int> which) {
  const auto n = static_cast<Eigen::Index>(which.size());
  const auto d = act.hidden.cols();
  std::vector<int> vrows, arows;
  std::vector<int> with_action;
  for (int i : which) {
    const auto& s = *seqs.at(static_cast<std::size_t>(i));
    for (int v = 0; v < kPatchesPerImage; ++v) vrows.push_back(i * act.length + s.final_visual_begin + v);
    if (s.final_action_begin >= 0)
      for (int a = 0; a < kActionTokens; ++a) arows.push_back(i * act.length + s.final_action_begin + a);
    with_action.push_back(s.final_action_begin >= 0);
  }
  Matrix<Scalar> pv = Matrix<Scalar>::Zero(n, n * kPatchesPerImage);
  for (Eigen::Index r = 0; r < n; ++r) pv.block(r, r * kPatchesPerImage, 1, kPatchesPerImage).setConstant(Scalar(1) / kPatchesPerImage);
  PooledFeatures<Scalar> out;
  out.visual = matmul(tape.constant(pv), gather_rows(act.hidden, vrows));
  if (arows.empty()) {
    out.action = tape.constant(Matrix<Scalar>::Zero(n, d));
    return out;
  }
  const auto na = static_cast<Eigen::Index>(arows.size() / kActionTokens);
  Matrix<Scalar> pa = Matrix<Scalar>::Zero(n, na * kActionTokens);
  for (Eigen::Index r = 0, j = 0; r < n; ++r)
    if (with_action[static_cast<std::size_t>(r)]) {
      pa.block(r, j * kActionTokens, 1, kActionTokens).setConstant(Scalar(1) / kActionTokens);
      ++j;
    }
  out.action = matmul(tape.constant(pa), gather_rows(act.hidden, arows));
  return out;
}

template <typename Scalar>
void Denoiser<Scalar>::init(ParamSet<Scalar>& p, Rng& rng) const {
  const std::string P = kPrefix;
  const int in = config_.input_dim(), h = config_.hidden;
  p.add_normal(P + "l0.w", {in, h}, 1.0 / std::sqrt(double(in)), rng);
  p.add_constant(P + "l0.b", {1, h}, Scalar(0));
  p.add_normal(P + "l1.w", {h, h}, 1.0 / std::sqrt(double(h)), rng);
  p.add_constant(P + "l1.b", {1, h}, Scalar(0));
  p.add_normal(P + "l2.w", {h, kLatentDim}, config_.out_std, rng);
  p.add_constant(P + "l2.b", {1, kLatentDim}, Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::forward(Binder<Scalar>& bind, const Tensor<Scalar>& zk, std::span<const int> k,
                                         const PooledFeatures<Scalar>& cond) const {
  if (zk.cols() != kLatentDim || zk.rows() != static_cast<Eigen::Index>(k.size()))
    throw std::invalid_argument("denoiser: z_k must be batch x 48 with one step per row");
  if (cond.visual.cols() != config_.cond_dim || cond.action.cols() != config_.cond_dim)
    throw std::invalid_argument("denoiser: conditioning width mismatch");
  std::vector<double> kk(k.begin(), k.end());
  const Matrix<Scalar> temb = sinusoidal_embedding(kk, config_.time_dim).template cast<Scalar>();
  const std::string P = kPrefix;
  auto x = concat_cols<Scalar>({zk, bind.tape().constant(temb), cond.visual, cond.action});
  x = gelu(linear(x, bind(P + "l0.w"), bind(P + "l0.b")));
  x = gelu(linear(x, bind(P + "l1.w"), bind(P + "l1.b")));
  return linear(x, bind(P + "l2.w"), bind(P + "l2.b"));
}

DiffusionTargets diffusion_targets(const SequenceBuilder& builder, const std::vector<const TokenSequence*>& seqs) {
  DiffusionTargets t;
  std::vector<RowVector<double>> rows;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto next = builder.next_frame(seqs[i]->anchor);
    if (!next) {
      ++t.skipped;
      continue;
    }
    t.which.push_back(static_cast<int>(i));
    rows.push_back(encode_latent(builder.records()[*next].image));
  }
  t.latents.resize(static_cast<Eigen::Index>(rows.size()), kLatentDim);
  for (std::size_t i = 0; i < rows.size(); ++i) t.latents.row(static_cast<Eigen::Index>(i)) = rows[i];
  return t;
}

template <typename Scalar>
Tensor<Scalar> loss_wm_diff(const Denoiser<Scalar>& denoiser, Binder<Scalar>& bind, const NoiseSchedule& schedule,
                            const BackboneActivations<Scalar>& act, const std::vector<const TokenSequence*>& seqs,
                            const DiffusionTargets& targets, Rng& rng) {
  auto& tape = bind.tape();
  if (targets.which.empty()) return tape.constant(Matrix<Scalar>::Zero(1, 1));
  const auto n = static_cast<Eigen::Index>(targets.which.size());
  std::vector<int> ks;
  Matrix<double> eps(n, kLatentDim), zk(n, kLatentDim);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps())));
    ks.push_back(k);
    for (int j = 0; j < kLatentDim; ++j) eps(r, j) = rng.normal();
    zk.row(r) = noising(targets.latents.row(r), k, eps.row(r), schedule);
  }
  const auto cond = pool_features(tape, act, seqs, targets.which);
  const auto pred = denoiser.forward(bind, tape.constant(zk.cast<Scalar>()), ks, cond);
  return mse(pred, tape.constant(eps.cast<Scalar>()));
}

RowVector<double> ancestral_sample(const NoiseSchedule& schedule, const EpsilonModel& eps, std::uint64_t seed) {
  Rng rng(seed);
  RowVector<double> z(kLatentDim);
  for (int j = 0; j < kLatentDim; ++j) z(j) = rng.normal();
  for (int k = schedule.steps(); k >= 1; --k) {
    const RowVector<double> e = eps(z, k);
    if (!e.allFinite()) throw NumericError("denoiser produced a non-finite prediction");
    z = (z - schedule.b(k) / std::sqrt(1.0 - schedule.abar(k)) * e) / std::sqrt(schedule.a(k));
    if (k > 1) {
      const double sd = std::sqrt(schedule.posterior_variance(k));
      for (int j = 0; j < kLatentDim; ++j) z(j) += sd * rng.normal();
    }
  }
  return z.cwiseMax(-1.0).cwiseMin(1.0);
}

template <typename Scalar>
std::vector<Image> sample_future(const Denoiser<Scalar>& denoiser, ParamSet<Scalar>& params,
                                 const NoiseSchedule& schedule, const Matrix<Scalar>& pooled_visual,
                                 const Matrix<Scalar>& pooled_action, std::uint64_t seed) {
  std::vector<Image> out;
  for (Eigen::Index r = 0; r < pooled_visual.rows(); ++r) {
    const EpsilonModel model = [&](const RowVector<double>& zk, int k) {
      Tape<Scalar> tape;
      tape.set_grad_enabled(false);
      Binder<Scalar> bind(tape, params);
      PooledFeatures<Scalar> cond{tape.constant(pooled_visual.row(r)), tape.constant(pooled_action.row(r))};
      const int kk[1] = {k};
      const Matrix<Scalar> z = zk.cast<Scalar>();
      return RowVector<double>(denoiser.forward(bind, tape.constant(z), kk, cond).value().template cast<double>());
    };
    out.push_back(decode_latent(ancestral_sample(schedule, model, Rng::derive(seed, static_cast<std::uint64_t>(r)))));
  }
  return out;
}

void write_image_dump(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  io::put_magic(os, "DW0I");
  io::put<std::uint32_t>(os, kImageSize);
  io::put<std::uint32_t>(os, kImageSize);
  io::put<std::uint32_t>(os, kImageChannels);
  os.write(reinterpret_cast<const char*>(image.data()), kImageBytes);
  if (!os) throw DataError("write failed: " + path.string());
}

Image read_image_dump(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  io::expect_magic(is, "DW0I", path.string());
  const auto w = io::get<std::uint32_t>(is), h = io::get<std::uint32_t>(is), c = io::get<std::uint32_t>(is);
  if (w != kImageSize || h != kImageSize || c != kImageChannels) throw DataError(path.string() + ": unexpected image shape");
  Image img{};
  if (!is.read(reinterpret_cast<char*>(img.data()), kImageBytes)) throw DataError(path.string() + ": truncated");
  return img;
}

#define DW0_INSTANTIATE(S)                                                                                       \
  template PooledFeatures<S> pool_features(Tape<S>&, const BackboneActivations<S>&,                             \
                                           const std::vector<const TokenSequence*>&, std::span<const int>);     \
  template class Denoiser<S>;                                                                                    \
  template Tensor<S> loss_wm_diff(const Denoiser<S>&, Binder<S>&, const NoiseSchedule&, const BackboneActivations<S>&, \
                                  const std::vector<const TokenSequence*>&, const DiffusionTargets&, Rng&);      \
  template std::vector<Image> sample_future(const Denoiser<S>&, ParamSet<S>&, const NoiseSchedule&, const Matrix<S>&, \
                                            const Matrix<S>&, std::uint64_t);
DW0_INSTANTIATE(float)
DW0_INSTANTIATE(double)
#undef DW0_INSTANTIATE

}  // namespace dw0
