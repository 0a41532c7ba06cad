#include "dw0/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace dw0 {

Modality VocabularyLayout::classify(int id) {
  if (id < 0 || id >= kSize) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  if (id < kVisualBegin) return Modality::Language;
  if (id < kActionBegin) return Modality::Visual;
  if (id < kSpecialBegin) return Modality::Action;
  return Modality::Special;
}

Matrix<float> extract_patches(const Image& image) {
  Matrix<float> out(kPatchesPerImage, kPatchDim);
  for (int pr = 0; pr < kPatchGrid; ++pr) {
    for (int pc = 0; pc < kPatchGrid; ++pc) {
      int j = 0;
      for (int r = 0; r < kPatchSize; ++r) {
        for (int c = 0; c < kPatchSize; ++c) {
          const int row = pr * kPatchSize + r, col = pc * kPatchSize + c;
          for (int ch = 0; ch < kImageChannels; ++ch)
            out(pr * kPatchGrid + pc, j++) =
                image[static_cast<std::size_t>((row * kImageSize + col) * kImageChannels + ch)] / 255.0f;
        }
      }
    }
  }
  return out;
}

Image assemble_patches(const Matrix<float>& patches) {
  if (patches.rows() != kPatchesPerImage || patches.cols() != kPatchDim)
    throw std::invalid_argument("assemble_patches expects 64 x 48");
  Image img{};
  for (int pr = 0; pr < kPatchGrid; ++pr) {
    for (int pc = 0; pc < kPatchGrid; ++pc) {
      int j = 0;
      for (int r = 0; r < kPatchSize; ++r) {
        for (int c = 0; c < kPatchSize; ++c) {
          const int row = pr * kPatchSize + r, col = pc * kPatchSize + c;
          for (int ch = 0; ch < kImageChannels; ++ch) {
            const float v = std::clamp(patches(pr * kPatchGrid + pc, j++), 0.0f, 1.0f);
            img[static_cast<std::size_t>((row * kImageSize + col) * kImageChannels + ch)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
        }
      }
    }
  }
  return img;
}

namespace {

using PatchKey = std::array<std::uint8_t, kPatchDim>;

/// Squared distances of every row of x to every row of c.
Matrix<double> pairwise_sq(const Matrix<double>& x, const Matrix<double>& c) {
  Matrix<double> d = -2.0 * x * c.transpose();
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

}  // namespace

VisualCodebook fit_codebook(const std::vector<Image>& images, std::uint64_t seed, int iterations, int k) {
  if (images.empty()) throw DataError("codebook fit needs at least one image");
  // distinct patches with multiplicities; the map orders them deterministically
  std::map<PatchKey, double> counts;
  for (const auto& img : images) {
    for (int pr = 0; pr < kPatchGrid; ++pr) {
      for (int pc = 0; pc < kPatchGrid; ++pc) {
        PatchKey key{};
        int j = 0;
        for (int r = 0; r < kPatchSize; ++r)
          for (int c = 0; c < kPatchSize; ++c)
            for (int ch = 0; ch < kImageChannels; ++ch)
              key[static_cast<std::size_t>(j++)] = img[static_cast<std::size_t>(
                  ((pr * kPatchSize + r) * kImageSize + pc * kPatchSize + c) * kImageChannels + ch)];
        counts[key] += 1.0;
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(counts.size());
  Matrix<double> x(n, kPatchDim);
  Eigen::VectorXd w(n);
  Eigen::Index i = 0;
  for (const auto& [key, count] : counts) {
    for (int j = 0; j < kPatchDim; ++j) x(i, j) = key[static_cast<std::size_t>(j)] / 255.0;
    w(i++) = count;
  }

  VisualCodebook book;
  book.seed = seed;
  book.distinct_patches = counts.size();
  Matrix<double> c(k, kPatchDim);
  if (n <= k) {
    book.duplicate_fallback = n < k;
    for (int j = 0; j < k; ++j) c.row(j) = x.row(j % n);
  } else {
    // k-means++ seeding, weighted by multiplicity
    Rng rng(seed);
    auto pick = [&](const Eigen::VectorXd& weight) {
      const double total = weight.sum();
      double u = rng.uniform() * total;
      for (Eigen::Index r = 0; r < weight.size(); ++r) {
        u -= weight(r);
        if (u < 0) return r;
      }
      return weight.size() - 1;
    };
    c.row(0) = x.row(pick(w));
    Eigen::VectorXd best = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
    for (int j = 1; j < k; ++j) {
      c.row(j) = x.row(pick(w.cwiseProduct(best)));
      best = best.cwiseMin((x.rowwise() - c.row(j)).rowwise().squaredNorm());
    }
    for (int it = 0; it < iterations; ++it) {
      const Matrix<double> d = pairwise_sq(x, c);
      Matrix<double> sums = Matrix<double>::Zero(k, kPatchDim);
      Eigen::VectorXd mass = Eigen::VectorXd::Zero(k);
      for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Index j;
        d.row(r).minCoeff(&j);
        sums.row(j) += w(r) * x.row(r);
        mass(j) += w(r);
      }
      for (int j = 0; j < k; ++j)
        if (mass(j) > 0) c.row(j) = sums.row(j) / mass(j);  // empty clusters keep their centroid
    }
  }
  const Matrix<double> d = pairwise_sq(x, c);
  double sse = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    Eigen::Index j;
    d.row(r).minCoeff(&j);
    sse += w(r) * (x.row(r) - c.row(j)).squaredNorm();
  }
  book.inertia = sse / (w.sum() * kPatchDim);
  book.centroids = c.cast<float>();
  return book;
}

int nearest_centroid(const VisualCodebook& book, const Eigen::Ref<const RowVector<float>>& patch) {
  int best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (int j = 0; j < book.size(); ++j) {
    const float d = (book.centroids.row(j) - patch).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

std::array<int, kPatchesPerImage> encode_image(const VisualCodebook& book, const Image& image) {
  const Matrix<float> p = extract_patches(image);
  std::array<int, kPatchesPerImage> ids{};
  for (int i = 0; i < kPatchesPerImage; ++i)
    ids[static_cast<std::size_t>(i)] = VocabularyLayout::visual_token(nearest_centroid(book, p.row(i)));
  return ids;
}

Image decode_tokens(const VisualCodebook& book, std::span<const int> ids) {
  if (ids.size() != static_cast<std::size_t>(kPatchesPerImage))
    throw std::invalid_argument("decode_tokens expects 64 ids, got " + std::to_string(ids.size()));
  Matrix<float> p(kPatchesPerImage, kPatchDim);
  for (int i = 0; i < kPatchesPerImage; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (!VocabularyLayout::is_visual(id) || id - VocabularyLayout::kVisualBegin >= book.size())
      throw std::invalid_argument("id " + std::to_string(id) + " is not a visual token");
    p.row(i) = book.centroids.row(id - VocabularyLayout::kVisualBegin);
  }
  return assemble_patches(p);
}

double reconstruction_mse(const VisualCodebook& book, const std::vector<Image>& images) {
  double total = 0.0;
  for (const auto& img : images) {
    const Matrix<float> p = extract_patches(img);
    for (int i = 0; i < kPatchesPerImage; ++i)
      total += (book.centroids.row(nearest_centroid(book, p.row(i))) - p.row(i)).squaredNorm();
  }
  return total / (static_cast<double>(images.size()) * kPatchesPerImage * kPatchDim);
}

std::vector<NamedTensor> export_codebook(const VisualCodebook& book) {
  NamedTensor c{"codebook.centroids", {book.size(), kPatchDim}, {}};
  c.values.assign(book.centroids.data(), book.centroids.data() + book.centroids.size());
  NamedTensor meta{"codebook.meta", {2}, {}};
  meta.values = {static_cast<float>(book.inertia), static_cast<float>(book.distinct_patches)};
  return {c, meta};
}

VisualCodebook import_codebook(const std::vector<NamedTensor>& tensors) {
  const NamedTensor* c = find_tensor(tensors, "codebook.centroids");
  if (!c || c->shape.size() != 2 || c->shape[1] != kPatchDim) throw DataError("checkpoint holds no visual codebook");
  VisualCodebook book;
  book.centroids = Eigen::Map<const Matrix<float>>(c->values.data(), c->shape[0], kPatchDim);
  if (const NamedTensor* meta = find_tensor(tensors, "codebook.meta"); meta && meta->values.size() == 2) {
    book.inertia = meta->values[0];
    book.distinct_patches = static_cast<std::size_t>(meta->values[1]);
    book.duplicate_fallback = book.distinct_patches < static_cast<std::size_t>(book.size());
  }
  return book;
}

template <typename Scalar>
Tensor<Scalar> embed_patches_continuous(const Tensor<Scalar>& patches, const Tensor<Scalar>& w,
                                        const Tensor<Scalar>& b) {
  return linear(patches, w, b);
}

template Tensor<float> embed_patches_continuous(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> embed_patches_continuous(const Tensor<double>&, const Tensor<double>&,
                                                 const Tensor<double>&);

// ---- DCT ------------------------------------------------------------------------

namespace {

const Eigen::Matrix<double, kWaypoints, kWaypoints>& dct_basis() {
  static const auto basis = [] {
    Eigen::Matrix<double, kWaypoints, kWaypoints> m;
    for (int k = 0; k < kWaypoints; ++k) {
      const double s = std::sqrt((k == 0 ? 1.0 : 2.0) / kWaypoints);
      for (int n = 0; n < kWaypoints; ++n) m(k, n) = s * std::cos(std::numbers::pi * (n + 0.5) * k / kWaypoints);
    }
    return m;
  }();
  return basis;
}

}  // namespace

std::array<double, kActionTokens> ActionTokenizer::forward_dct(const Trajectory& t) {
  const Eigen::Matrix<double, kWaypoints, 2> c = dct_basis() * t.points;
  std::array<double, kActionTokens> out{};
  for (int k = 0; k < kWaypoints; ++k) {
    out[static_cast<std::size_t>(2 * k)] = c(k, 0);
    out[static_cast<std::size_t>(2 * k + 1)] = c(k, 1);
  }
  return out;
}

Trajectory ActionTokenizer::inverse_dct(const std::array<double, kActionTokens>& coeffs) {
  Eigen::Matrix<double, kWaypoints, 2> c;
  for (int k = 0; k < kWaypoints; ++k) {
    c(k, 0) = coeffs[static_cast<std::size_t>(2 * k)];
    c(k, 1) = coeffs[static_cast<std::size_t>(2 * k + 1)];
  }
  Trajectory t;
  t.points = dct_basis().transpose() * c;
  return t;
}

std::array<int, kActionTokens> ActionTokenizer::symbols(const Trajectory& t) const {
  if (!(gamma > 0)) throw std::invalid_argument("action tokenizer gamma must be positive");
  if (!t.points.allFinite() || !t.within(bound))
    throw std::invalid_argument("trajectory outside the workspace bound");
  const auto c = forward_dct(t);
  std::array<int, kActionTokens> s{};
  for (std::size_t i = 0; i < c.size(); ++i)
    s[i] = static_cast<int>(std::clamp(std::nearbyint(gamma * c[i]), double(kSymbolMin), double(kSymbolMax)));
  return s;
}

std::array<int, kActionTokens> ActionTokenizer::tokenize(const Trajectory& t) const {
  auto s = symbols(t);
  for (auto& v : s) v = VocabularyLayout::action_token(v);
  return s;
}

Trajectory ActionTokenizer::detokenize(std::span<const int> ids) const {
  if (ids.size() != static_cast<std::size_t>(kActionTokens))
    throw std::invalid_argument("expected 12 action tokens, got " + std::to_string(ids.size()));
  std::array<double, kActionTokens> c{};
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!VocabularyLayout::is_action(ids[i]))
      throw std::invalid_argument("id " + std::to_string(ids[i]) + " is not an action token");
    c[i] = (ids[i] - VocabularyLayout::kActionBegin - 128) / gamma;
  }
  return inverse_dct(c);
}

double ActionTokenizer::ade_bound() const { return std::sqrt(2.0) * 0.5 / gamma; }

}  // namespace dw0
