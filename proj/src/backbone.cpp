#include "dw0/backbone.hpp"

#include <cmath>

namespace dw0 {

void BackboneConfig::validate() const {
  if (d_model <= 0 || layers <= 0 || heads <= 0 || mlp_hidden <= 0)
    throw UsageError("backbone dimensions must be positive");
  if (d_model % heads != 0) throw UsageError("backbone d_model must be divisible by heads");
  if (max_length <= 0 || max_length > kMaxSequenceLength) throw UsageError("backbone max_length out of range");
}

SequenceBatch make_batch(const std::vector<const TokenSequence*>& seqs, FrontEnd front_end, int length) {
  if (seqs.empty()) throw std::invalid_argument("make_batch: no sequences");
  const TokenSequence& first = *seqs.front();
  const int full = static_cast<int>(first.ids.size());
  if (length < 0) length = full;
  if (length == 0 || length > full) throw std::invalid_argument("make_batch: bad length");
  SequenceBatch b;
  b.batch = static_cast<int>(seqs.size());
  b.length = length;
  b.continuous = front_end == FrontEnd::Continuous;
  std::size_t n_vis = 0;
  for (int r : first.visual_rows)
    if (r < length) ++n_vis;
  if (b.continuous) b.patches.resize(static_cast<Eigen::Index>(n_vis * seqs.size()), kPatchDim);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const TokenSequence& q = *seqs[s];
    if (q.tags != first.tags) throw std::invalid_argument("make_batch: sequences have different layouts");
    const int base = static_cast<int>(s) * length;
    for (int i = 0; i < length; ++i) {
      b.ids.push_back(q.ids[static_cast<std::size_t>(i)]);
      b.positions.push_back(i);
      b.segments.push_back(static_cast<int>(q.tags[static_cast<std::size_t>(i)]));
    }
    if (b.continuous) {
      if (q.patches.rows() < static_cast<Eigen::Index>(n_vis))
        throw std::invalid_argument("make_batch: continuous front end needs patch features");
      for (std::size_t v = 0; v < n_vis; ++v) b.visual_rows.push_back(base + q.visual_rows[v]);
      b.patches.middleRows(static_cast<Eigen::Index>(s * n_vis), static_cast<Eigen::Index>(n_vis)) =
          q.patches.topRows(static_cast<Eigen::Index>(n_vis));
    }
  }
  return b;
}

SequenceBatch make_batch(const std::vector<TokenSequence>& seqs, FrontEnd front_end, int length) {
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return make_batch(ptrs, front_end, length);
}

template <typename Scalar>
Tensor<Scalar> Binder<Scalar>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const auto t = tape_->param(params_->at(name));
  bound_.emplace(name, t);
  return t;
}

template <typename Scalar>
std::string Backbone<Scalar>::name(int layer, const std::string& leaf) const {
  return std::string(kPrefix) + "layer" + std::to_string(layer) + "." + leaf;
}

template <typename Scalar>
void Backbone<Scalar>::init(ParamSet<Scalar>& p, Rng& rng) const {
  const int d = config_.d_model, m = config_.mlp_hidden;
  const double sd = config_.init_std;
  const std::string P = kPrefix;
  p.add_normal(P + "tok_emb", {VocabularyLayout::kSize, d}, sd, rng);
  p.add_normal(P + "pos_emb", {config_.max_length, d}, sd, rng);
  p.add_normal(P + "seg_emb", {4, d}, sd, rng);
  p.add_normal(P + "patch.w", {kPatchDim, d}, sd, rng);
  p.add_constant(P + "patch.b", {1, d}, Scalar(0));
  // residual projections scaled down with depth
  const double sd_out = sd / std::sqrt(2.0 * config_.layers);
  for (int l = 0; l < config_.layers; ++l) {
    p.add_constant(name(l, "ln1.g"), {1, d}, Scalar(1));
    p.add_constant(name(l, "ln1.b"), {1, d}, Scalar(0));
    for (const char* w : {"wq", "wk", "wv"}) {
      p.add_normal(name(l, std::string(w) + ".w"), {d, d}, sd, rng);
      p.add_constant(name(l, std::string(w) + ".b"), {1, d}, Scalar(0));
    }
    p.add_normal(name(l, "wo.w"), {d, d}, sd_out, rng);
    p.add_constant(name(l, "wo.b"), {1, d}, Scalar(0));
    p.add_constant(name(l, "ln2.g"), {1, d}, Scalar(1));
    p.add_constant(name(l, "ln2.b"), {1, d}, Scalar(0));
    p.add_normal(name(l, "mlp.w1"), {d, m}, sd, rng);
    p.add_constant(name(l, "mlp.b1"), {1, m}, Scalar(0));
    p.add_normal(name(l, "mlp.w2"), {m, d}, sd_out, rng);
    p.add_constant(name(l, "mlp.b2"), {1, d}, Scalar(0));
  }
  p.add_constant(P + "ln_f.g", {1, d}, Scalar(1));
  p.add_constant(P + "ln_f.b", {1, d}, Scalar(0));
  p.add_normal(P + "head.w", {d, VocabularyLayout::kSize}, sd, rng);
  p.add_constant(P + "head.b", {1, VocabularyLayout::kSize}, Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> Backbone<Scalar>::embed(Binder<Scalar>& bind, const SequenceBatch& b) const {
  if (b.length > config_.max_length)
    throw UsageError("sequence length " + std::to_string(b.length) + " exceeds maximum " +
                     std::to_string(config_.max_length));
  const std::string P = kPrefix;
  Tensor<Scalar> x = embedding_lookup(bind(P + "tok_emb"), std::span<const int>(b.ids));
  if (b.continuous && !b.visual_rows.empty()) {
    auto& tape = bind.tape();
    const auto patches = tape.constant(b.patches.template cast<Scalar>());
    const auto feat = linear(patches, bind(P + "patch.w"), bind(P + "patch.b"));
    std::vector<int> index(static_cast<std::size_t>(x.rows()));
    for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<int>(i);
    for (std::size_t v = 0; v < b.visual_rows.size(); ++v)
      index[static_cast<std::size_t>(b.visual_rows[v])] = static_cast<int>(x.rows() + static_cast<Eigen::Index>(v));
    x = gather_rows(concat_rows<Scalar>({x, feat}), std::span<const int>(index));
  }
  x = add(x, embedding_lookup(bind(P + "pos_emb"), std::span<const int>(b.positions)));
  return add(x, embedding_lookup(bind(P + "seg_emb"), std::span<const int>(b.segments)));
}

template <typename Scalar>
typename Backbone<Scalar>::Projections Backbone<Scalar>::project(Binder<Scalar>& bind, int l,
                                                                 const Tensor<Scalar>& h) const {
  const auto x = layer_norm(h, bind(name(l, "ln1.g")), bind(name(l, "ln1.b")), Scalar(1e-5));
  return {linear(x, bind(name(l, "wq.w")), bind(name(l, "wq.b"))),
          linear(x, bind(name(l, "wk.w")), bind(name(l, "wk.b"))),
          linear(x, bind(name(l, "wv.w")), bind(name(l, "wv.b")))};
}

template <typename Scalar>
Tensor<Scalar> Backbone<Scalar>::finish_layer(Binder<Scalar>& bind, int l, const Tensor<Scalar>& h,
                                              const Tensor<Scalar>& attn) const {
  const auto r = add(h, linear(attn, bind(name(l, "wo.w")), bind(name(l, "wo.b"))));
  const auto x = layer_norm(r, bind(name(l, "ln2.g")), bind(name(l, "ln2.b")), Scalar(1e-5));
  const auto m = linear(gelu(linear(x, bind(name(l, "mlp.w1")), bind(name(l, "mlp.b1")))), bind(name(l, "mlp.w2")),
                        bind(name(l, "mlp.b2")));
  return add(r, m);
}

template <typename Scalar>
Tensor<Scalar> Backbone<Scalar>::final_norm(Binder<Scalar>& bind, const Tensor<Scalar>& h) const {
  const std::string P = kPrefix;
  return layer_norm(h, bind(P + "ln_f.g"), bind(P + "ln_f.b"), Scalar(1e-5));
}

template <typename Scalar>
BackboneActivations<Scalar> Backbone<Scalar>::forward(Binder<Scalar>& bind, const SequenceBatch& b,
                                                      std::shared_ptr<const AttentionMask> mask) const {
  if (!mask) mask = causal_mask(b.length);
  BackboneActivations<Scalar> out;
  out.batch = b.batch;
  out.length = b.length;
  Tensor<Scalar> h = embed(bind, b);
  for (int l = 0; l < config_.layers; ++l) {
    const auto p = project(bind, l, h);
    out.keys.push_back(p.k);
    out.values.push_back(p.v);
    h = finish_layer(bind, l, h, masked_attention(p.q, p.k, p.v, config_.heads, b.batch, mask));
  }
  out.hidden = final_norm(bind, h);
  return out;
}

template <typename Scalar>
Tensor<Scalar> Backbone<Scalar>::logits(Binder<Scalar>& bind, const Tensor<Scalar>& hidden,
                                        std::span<const int> rows) const {
  const std::string P = kPrefix;
  return linear(gather_rows(hidden, rows), bind(P + "head.w"), bind(P + "head.b"));
}

namespace {

template <typename Scalar>
Tensor<Scalar> target_loss(const Backbone<Scalar>& model, Binder<Scalar>& bind, const BackboneActivations<Scalar>& act,
                           const std::vector<const TokenSequence*>& seqs, bool visual) {
  std::vector<int> rows, targets;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& r = visual ? seqs[s]->visual_target_rows : seqs[s]->action_target_rows;
    const auto& t = visual ? seqs[s]->visual_targets : seqs[s]->action_targets;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (r[i] >= act.length) throw std::invalid_argument("target row beyond the forwarded length");
      rows.push_back(static_cast<int>(s) * act.length + r[i]);
      targets.push_back(t[i]);
    }
  }
  if (rows.empty())
    throw std::invalid_argument(visual ? "loss_wm_ar: no visual targets (continuous front end or vision masked out)"
                                       : "loss_action: no action targets");
  const std::vector<std::uint8_t> mask(rows.size(), 1);
  return cross_entropy(model.logits(bind, act.hidden, rows), std::span<const int>(targets),
                       std::span<const std::uint8_t>(mask));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> loss_action(const Backbone<Scalar>& model, Binder<Scalar>& bind, const BackboneActivations<Scalar>& act,
                           const std::vector<const TokenSequence*>& seqs) {
  return target_loss(model, bind, act, seqs, false);
}

template <typename Scalar>
Tensor<Scalar> loss_wm_ar(const Backbone<Scalar>& model, Binder<Scalar>& bind, const BackboneActivations<Scalar>& act,
                          const std::vector<const TokenSequence*>& seqs) {
  return target_loss(model, bind, act, seqs, true);
}

int choose_token(const RowVector<double>& logits, int lo, int hi, double temperature, Rng& rng) {
  if (lo < 0 || hi > logits.size() || lo >= hi) throw std::invalid_argument("choose_token: bad range");
  int best = lo;
  for (int i = lo + 1; i < hi; ++i)
    if (logits(i) > logits(best)) best = i;
  if (temperature <= 0.0) return best;
  const double m = logits(best);
  std::vector<double> w(static_cast<std::size_t>(hi - lo));
  double z = 0.0;
  for (int i = lo; i < hi; ++i) z += w[static_cast<std::size_t>(i - lo)] = std::exp((logits(i) - m) / temperature);
  // underflow at tiny temperatures degenerates to greedy
  if (!(z > 0.0) || !std::isfinite(z)) return best;
  double u = rng.uniform() * z;
  for (int i = lo; i < hi; ++i) {
    u -= w[static_cast<std::size_t>(i - lo)];
    if (u < 0.0) return i;
  }
  return hi - 1;
}

namespace {

template <typename Scalar>
RowVector<double> last_logits(const Backbone<Scalar>& model, ParamSet<Scalar>& params, const TokenSequence& seq,
                              FrontEnd front_end, int length) {
  Tape<Scalar> tape;
  tape.set_grad_enabled(false);
  Binder<Scalar> bind(tape, params);
  const auto batch = make_batch(std::vector<const TokenSequence*>{&seq}, front_end, length);
  const auto act = model.forward(bind, batch);
  const int row = length - 1;
  return model.logits(bind, act.hidden, std::span<const int>(&row, 1)).value().row(0).template cast<double>();
}

}  // namespace

template <typename Scalar>
std::array<int, kActionTokens> generate_action_tokens(const Backbone<Scalar>& model, ParamSet<Scalar>& params,
                                                      const TokenSequence& seq, FrontEnd front_end,
                                                      const DecodeOptions& options) {
  if (seq.action_target_rows.size() != static_cast<std::size_t>(kActionTokens))
    throw std::invalid_argument("generate_action_tokens: sequence has no action continuation");
  TokenSequence work = seq;
  Rng rng(options.seed);
  std::array<int, kActionTokens> out{};
  for (int i = 0; i < kActionTokens; ++i) {
    const int row = work.action_target_rows[static_cast<std::size_t>(i)];
    const auto lg = last_logits(model, params, work, front_end, row + 1);
    out[static_cast<std::size_t>(i)] = choose_token(lg, VocabularyLayout::kActionBegin, VocabularyLayout::kSpecialBegin,
                                                    options.temperature, rng);
    if (row + 1 < static_cast<int>(work.ids.size())) work.ids[static_cast<std::size_t>(row + 1)] = out[static_cast<std::size_t>(i)];
  }
  return out;
}

template <typename Scalar>
std::array<int, kPatchesPerImage> generate_visual_tokens(const Backbone<Scalar>& model, ParamSet<Scalar>& params,
                                                         const TokenSequence& seq, FrontEnd front_end,
                                                         const DecodeOptions& options) {
  if (front_end != FrontEnd::Discrete)
    throw UsageError("visual token generation needs the discrete front end");
  TokenSequence work = seq;
  Rng rng(options.seed);
  std::array<int, kPatchesPerImage> out{};
  for (int i = 0; i < kPatchesPerImage; ++i) {
    const int row = work.final_visual_begin - 1 + i;
    const auto lg = last_logits(model, params, work, front_end, row + 1);
    out[static_cast<std::size_t>(i)] = choose_token(lg, VocabularyLayout::kVisualBegin, VocabularyLayout::kActionBegin,
                                                    options.temperature, rng);
    work.ids[static_cast<std::size_t>(row + 1)] = out[static_cast<std::size_t>(i)];
  }
  return out;
}

#define DW0_INSTANTIATE(S)                                                                                      \
  template class Binder<S>;                                                                                     \
  template class Backbone<S>;                                                                                   \
  template Tensor<S> loss_action(const Backbone<S>&, Binder<S>&, const BackboneActivations<S>&,                \
                                 const std::vector<const TokenSequence*>&);                                    \
  template Tensor<S> loss_wm_ar(const Backbone<S>&, Binder<S>&, const BackboneActivations<S>&,                 \
                                const std::vector<const TokenSequence*>&);                                     \
  template std::array<int, kActionTokens> generate_action_tokens(const Backbone<S>&, ParamSet<S>&,             \
                                                                 const TokenSequence&, FrontEnd,              \
                                                                 const DecodeOptions&);                       \
  template std::array<int, kPatchesPerImage> generate_visual_tokens(const Backbone<S>&, ParamSet<S>&,          \
                                                                    const TokenSequence&, FrontEnd,           \
                                                                    const DecodeOptions&);
DW0_INSTANTIATE(float)
DW0_INSTANTIATE(double)
#undef DW0_INSTANTIATE

}  // namespace dw0
