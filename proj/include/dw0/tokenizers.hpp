#pragma once

// Token vocabulary, k-means patch codebook, continuous patch front end and
// the quantized-DCT trajectory tokenizer.

#include "dw0/checkpoint.hpp"
#include "dw0/gridworld.hpp"
#include "dw0/tensor.hpp"

#include <array>
#include <span>
#include <vector>

namespace dw0 {

enum class Modality : std::uint8_t { Language = 0, Visual = 1, Action = 2, Special = 3 };

struct VocabularyLayout {
  static constexpr int kLanguageBegin = 0;
  static constexpr int kVisualBegin = 4;
  static constexpr int kActionBegin = 260;
  static constexpr int kSpecialBegin = 516;
  static constexpr int kBOS = 516;
  static constexpr int kBOV = 517;
  static constexpr int kBOA = 518;
  static constexpr int kEOS = 519;
  static constexpr int kSize = 520;
  static constexpr int kVisualCount = kActionBegin - kVisualBegin;
  static constexpr int kActionCount = kSpecialBegin - kActionBegin;

  /// Throws std::out_of_range outside [0, kSize).
  static Modality classify(int id);
  static int command_token(Command c) { return kLanguageBegin + static_cast<int>(c); }
  static int visual_token(int code) { return kVisualBegin + code; }
  static int action_token(int symbol) { return kActionBegin + symbol + 128; }
  static bool is_visual(int id) { return id >= kVisualBegin && id < kActionBegin; }
  static bool is_action(int id) { return id >= kActionBegin && id < kSpecialBegin; }
};

// ---- visual codebook ----------------------------------------------------

inline constexpr int kPatchSize = 4;
inline constexpr int kPatchGrid = kImageSize / kPatchSize;  // 8
inline constexpr int kPatchesPerImage = kPatchGrid * kPatchGrid;
inline constexpr int kPatchDim = kPatchSize * kPatchSize * kImageChannels;  // 48
inline constexpr int kCodebookSize = 256;

/// 64 x 48 matrix of patches in [0, 1], patch grid row-major, each patch
/// laid out (row, col, channel).
Matrix<float> extract_patches(const Image& image);
Image assemble_patches(const Matrix<float>& patches);

struct VisualCodebook {
  Matrix<float> centroids;  // K x 48
  std::uint64_t seed = 0;
  double inertia = 0.0;     // mean squared distance per patch element at fit
  std::size_t distinct_patches = 0;
  bool duplicate_fallback = false;

  int size() const { return static_cast<int>(centroids.rows()); }
};

/// Seeded k-means (k-means++ init, fixed iteration count) over the patches
/// of `images`. With at most K distinct patches the codebook is exactly those
/// patches, padded by repetition; fewer than K sets duplicate_fallback.
VisualCodebook fit_codebook(const std::vector<Image>& images, std::uint64_t seed, int iterations = 25,
                            int k = kCodebookSize);

/// Index of the nearest centroid, lowest index on ties.
int nearest_centroid(const VisualCodebook& book, const Eigen::Ref<const RowVector<float>>& patch);
std::array<int, kPatchesPerImage> encode_image(const VisualCodebook& book, const Image& image);
Image decode_tokens(const VisualCodebook& book, std::span<const int> ids);
/// Nearest-centroid squared error per element, patch values in [0, 1].
double reconstruction_mse(const VisualCodebook& book, const std::vector<Image>& images);

/// Stored under "codebook.centroids" (K x 48) plus "codebook.meta"
/// (inertia, distinct patch count).
std::vector<NamedTensor> export_codebook(const VisualCodebook& book);
/// Throws DataError when the checkpoint holds no codebook.
VisualCodebook import_codebook(const std::vector<NamedTensor>& tensors);

// ---- continuous front end -------------------------------------------------

/// patches (64 x 48) * w (48 x d) + b: the learned patch projection.
template <typename Scalar>
Tensor<Scalar> embed_patches_continuous(const Tensor<Scalar>& patches, const Tensor<Scalar>& w,
                                        const Tensor<Scalar>& b);

// ---- action tokenizer -------------------------------------------------------

inline constexpr int kActionTokens = 2 * kWaypoints;
inline constexpr int kSymbolMin = -128;
inline constexpr int kSymbolMax = 127;

struct ActionTokenizer {
  double gamma = 2.0;
  double bound = kWorkspaceBound;

  /// Orthonormal DCT-II per axis; output interleaved by frequency
  /// [x0, y0, x1, y1, ...].
  static std::array<double, kActionTokens> forward_dct(const Trajectory& t);
  static Trajectory inverse_dct(const std::array<double, kActionTokens>& coeffs);

  std::array<int, kActionTokens> symbols(const Trajectory& t) const;
  std::array<int, kActionTokens> tokenize(const Trajectory& t) const;
  /// Throws std::invalid_argument unless exactly 12 action-range ids.
  Trajectory detokenize(std::span<const int> ids) const;
  /// Guaranteed ADE bound of a round trip: sqrt(2) * 0.5 / gamma.
  double ade_bound() const;
};

}  // namespace dw0
