#include "dw0/experts.hpp"

#include <cmath>

namespace dw0 {

std::string to_string(DecoderKind k) {
  switch (k) {
    case DecoderKind::Query: return "query";
    case DecoderKind::Autoregressive: return "ar";
    case DecoderKind::Flow: return "flow";
  }
  return "?";
}

DecoderKind decoder_from_string(const std::string& s) {
  if (s == "query") return DecoderKind::Query;
  if (s == "ar" || s == "autoregressive") return DecoderKind::Autoregressive;
  if (s == "flow") return DecoderKind::Flow;
  throw UsageError("unknown decoder '" + s + "' (query|ar|flow)");
}

void ExpertConfig::validate(const BackboneConfig& b) const {
  if (d_model <= 0 || mlp_hidden <= 0 || queries <= 0 || flow_steps <= 0) throw UsageError("expert sizes must be positive");
  if (heads != b.heads || attn_width != b.d_model)
    throw UsageError("expert attention geometry must match the backbone (" + std::to_string(b.heads) + " heads x " +
                     std::to_string(b.head_dim()) + ")");
  if (layers != b.layers) throw UsageError("expert layers must equal backbone layers (one joint layer each)");
  if (max_tokens < kPrefixTokens + std::max(queries, kActionTokens))
    throw UsageError("expert max_tokens too small for the prefix and decoder tokens");
  if (kind == DecoderKind::Autoregressive && backbone_sees_expert)
    throw UsageError("the autoregressive expert cannot let the backbone attend expert tokens (target leakage)");
}

Matrix<double> sinusoidal_embedding(std::span<const double> values, int dim, double scale) {
  if (dim <= 0 || dim % 2) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
  const int half = dim / 2;
  Matrix<double> out(static_cast<Eigen::Index>(values.size()), dim);
  for (std::size_t r = 0; r < values.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double a = values[r] * scale * std::pow(10000.0, -double(i) / half);
      out(static_cast<Eigen::Index>(r), i) = std::sin(a);
      out(static_cast<Eigen::Index>(r), half + i) = std::cos(a);
    }
  }
  return out;
}

namespace {

std::shared_ptr<const AttentionMask> expert_mask(int tb, int te) {
  auto m = std::make_shared<AttentionMask>(te, tb + te);
  m->setZero();
  for (int i = 0; i < te; ++i) {
    m->row(i).head(tb).setOnes();
    m->row(i).segment(tb, i + 1).setOnes();
  }
  return m;
}

std::shared_ptr<const AttentionMask> backbone_joint_mask(int tb, int te) {
  auto m = std::make_shared<AttentionMask>(tb, tb + te);
  m->setZero();
  for (int i = 0; i < tb; ++i) {
    m->row(i).head(i + 1).setOnes();
    m->row(i).tail(te).setOnes();
  }
  return m;
}

template <typename Scalar>
Tensor<Scalar> interleave(const Tensor<Scalar>& a, const Tensor<Scalar>& b, int batch, int ta, int tb) {
  std::vector<int> index;
  index.reserve(static_cast<std::size_t>(batch * (ta + tb)));
  for (int s = 0; s < batch; ++s) {
    for (int i = 0; i < ta; ++i) index.push_back(s * ta + i);
    for (int i = 0; i < tb; ++i) index.push_back(batch * ta + s * tb + i);
  }
  return gather_rows(concat_rows<Scalar>({a, b}), std::span<const int>(index));
}

}  // namespace

template <typename Scalar>
JointAttentionOutput<Scalar> joint_attention(const Tensor<Scalar>& qb, const Tensor<Scalar>& kb,
                                             const Tensor<Scalar>& vb, const Tensor<Scalar>& qe,
                                             const Tensor<Scalar>& ke, const Tensor<Scalar>& ve, int heads, int batch,
                                             int te, bool backbone_sees_expert) {
  if (batch <= 0 || qb.rows() % batch) throw std::invalid_argument("joint_attention: bad batch");
  const int tb = static_cast<int>(qb.rows() / batch);
  JointAttentionOutput<Scalar> out;
  if (te == 0) {
    out.backbone = masked_attention(qb, kb, vb, heads, batch, causal_mask(tb));
    return out;
  }
  if (qe.cols() != qb.cols() || ke.cols() != kb.cols() || ve.cols() != vb.cols())
    throw std::invalid_argument("joint_attention: backbone and expert head geometry differ (" +
                                std::to_string(qb.cols()) + " vs " + std::to_string(qe.cols()) + ")");
  if (qe.rows() != static_cast<Eigen::Index>(batch) * te) throw std::invalid_argument("joint_attention: bad expert rows");
  const auto K = interleave(kb, ke, batch, tb, te);
  const auto V = interleave(vb, ve, batch, tb, te);
  out.backbone = backbone_sees_expert ? masked_attention(qb, K, V, heads, batch, backbone_joint_mask(tb, te))
                                      : masked_attention(qb, kb, vb, heads, batch, causal_mask(tb));
  out.expert = masked_attention(qe, K, V, heads, batch, expert_mask(tb, te));
  return out;
}

template <typename Scalar>
ActionExpert<Scalar>::ActionExpert(const Backbone<Scalar>& backbone, ExpertConfig config)
    : backbone_(&backbone), config_(config) {
  config_.validate(backbone.config());
}

template <typename Scalar>
std::string ActionExpert<Scalar>::name(int layer, const std::string& leaf) const {
  return std::string(kPrefix) + "layer" + std::to_string(layer) + "." + leaf;
}

template <typename Scalar>
void ActionExpert<Scalar>::init(ParamSet<Scalar>& p, Rng& rng) const {
  const int d = config_.d_model, w = config_.attn_width, m = config_.mlp_hidden;
  const double sd = config_.init_std, sd_out = sd / std::sqrt(2.0 * config_.layers);
  const std::string P = kPrefix;
  p.add_normal(P + "tok_emb", {VocabularyLayout::kSize, d}, sd, rng);
  p.add_normal(P + "pos_emb", {config_.max_tokens, d}, sd, rng);
  for (int l = 0; l < config_.layers; ++l) {
    p.add_constant(name(l, "ln1.g"), {1, d}, Scalar(1));
    p.add_constant(name(l, "ln1.b"), {1, d}, Scalar(0));
    for (const char* x : {"wq", "wk", "wv"}) {
      p.add_normal(name(l, std::string(x) + ".w"), {d, w}, sd, rng);
      p.add_constant(name(l, std::string(x) + ".b"), {1, w}, Scalar(0));
    }
    p.add_normal(name(l, "wo.w"), {w, d}, sd_out, rng);
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
  p.add_normal(P + "query.queries", {config_.queries, d}, 1.0, rng);
  p.add_normal(P + "query.head.w", {d, 2}, sd, rng);
  p.add_constant(P + "query.head.b", {1, 2}, Scalar(0));
  p.add_normal(P + "ar.head.w", {d, VocabularyLayout::kSize}, sd, rng);
  p.add_constant(P + "ar.head.b", {1, VocabularyLayout::kSize}, Scalar(0));
  p.add_normal(P + "flow.in.w", {2, d}, 1.0 / std::sqrt(2.0), rng);
  p.add_constant(P + "flow.in.b", {1, d}, Scalar(0));
  p.add_normal(P + "flow.out.w", {d, 2}, sd, rng);
  p.add_constant(P + "flow.out.b", {1, 2}, Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::expert_layer(Binder<Scalar>& bind, int l, const Tensor<Scalar>& h,
                                                  const Tensor<Scalar>& attn) const {
  const auto r = add(h, linear(attn, bind(name(l, "wo.w")), bind(name(l, "wo.b"))));
  const auto x = layer_norm(r, bind(name(l, "ln2.g")), bind(name(l, "ln2.b")), Scalar(1e-5));
  return add(r, linear(gelu(linear(x, bind(name(l, "mlp.w1")), bind(name(l, "mlp.b1")))), bind(name(l, "mlp.w2")),
                       bind(name(l, "mlp.b2"))));
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::forward_cached(Binder<Scalar>& bind, const BackboneActivations<Scalar>& ctx,
                                                    const Tensor<Scalar>& expert_in, int te) const {
  if (config_.backbone_sees_expert) throw UsageError("cached expert forward needs backbone_sees_expert off");
  if (static_cast<int>(ctx.keys.size()) != config_.layers) throw std::invalid_argument("context layer count mismatch");
  const int batch = ctx.batch, tb = ctx.length;
  Tensor<Scalar> h = expert_in;
  const auto mask = expert_mask(tb, te);
  for (int l = 0; l < config_.layers; ++l) {
    const auto x = layer_norm(h, bind(name(l, "ln1.g")), bind(name(l, "ln1.b")), Scalar(1e-5));
    const auto q = linear(x, bind(name(l, "wq.w")), bind(name(l, "wq.b")));
    const auto k = linear(x, bind(name(l, "wk.w")), bind(name(l, "wk.b")));
    const auto v = linear(x, bind(name(l, "wv.w")), bind(name(l, "wv.b")));
    const auto K = interleave(ctx.keys[static_cast<std::size_t>(l)], k, batch, tb, te);
    const auto V = interleave(ctx.values[static_cast<std::size_t>(l)], v, batch, tb, te);
    h = expert_layer(bind, l, h, masked_attention(q, K, V, config_.heads, batch, mask));
  }
  return layer_norm(h, bind(std::string(kPrefix) + "ln_f.g"), bind(std::string(kPrefix) + "ln_f.b"), Scalar(1e-5));
}

template <typename Scalar>
JointOutput<Scalar> ActionExpert<Scalar>::forward_joint(Binder<Scalar>& bind, const SequenceBatch& batch,
                                                        const Tensor<Scalar>& expert_in, int te) const {
  const Backbone<Scalar>& bb = *backbone_;
  JointOutput<Scalar> out;
  out.backbone.batch = batch.batch;
  out.backbone.length = batch.length;
  Tensor<Scalar> hb = bb.embed(bind, batch);
  Tensor<Scalar> he = expert_in;
  for (int l = 0; l < config_.layers; ++l) {
    const auto pb = bb.project(bind, l, hb);
    out.backbone.keys.push_back(pb.k);
    out.backbone.values.push_back(pb.v);
    Tensor<Scalar> qe, ke, ve;
    if (te > 0) {
      const auto x = layer_norm(he, bind(name(l, "ln1.g")), bind(name(l, "ln1.b")), Scalar(1e-5));
      qe = linear(x, bind(name(l, "wq.w")), bind(name(l, "wq.b")));
      ke = linear(x, bind(name(l, "wk.w")), bind(name(l, "wk.b")));
      ve = linear(x, bind(name(l, "wv.w")), bind(name(l, "wv.b")));
    }
    const auto att = joint_attention(pb.q, pb.k, pb.v, qe, ke, ve, config_.heads, batch.batch, te,
                                     config_.backbone_sees_expert);
    hb = bb.finish_layer(bind, l, hb, att.backbone);
    if (te > 0) he = expert_layer(bind, l, he, att.expert);
  }
  out.backbone.hidden = bb.final_norm(bind, hb);
  if (te > 0)
    out.expert_hidden =
        layer_norm(he, bind(std::string(kPrefix) + "ln_f.g"), bind(std::string(kPrefix) + "ln_f.b"), Scalar(1e-5));
  return out;
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::add_positions(Binder<Scalar>& bind, const Tensor<Scalar>& x, int batch,
                                                   int te) const {
  if (te > config_.max_tokens) throw UsageError("expert sequence longer than max_tokens");
  std::vector<int> pos;
  for (int s = 0; s < batch; ++s)
    for (int i = 0; i < te; ++i) pos.push_back(i);
  return add(x, embedding_lookup(bind(std::string(kPrefix) + "pos_emb"), std::span<const int>(pos)));
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::embed_tokens(Binder<Scalar>& bind, std::span<const int> ids, int batch,
                                                  int te) const {
  if (ids.size() != static_cast<std::size_t>(batch * te)) throw std::invalid_argument("embed_tokens: bad id count");
  return add_positions(bind, embedding_lookup(bind(std::string(kPrefix) + "tok_emb"), ids), batch, te);
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::query_input(Binder<Scalar>& bind, std::span<const int> prefix, int batch) const {
  const auto pre = embedding_lookup(bind(std::string(kPrefix) + "tok_emb"), prefix);
  const auto q = bind(std::string(kPrefix) + "query.queries");
  std::vector<int> index;
  for (int s = 0; s < batch; ++s) {
    for (int i = 0; i < kPrefixTokens; ++i) index.push_back(s * kPrefixTokens + i);
    for (int i = 0; i < config_.queries; ++i) index.push_back(batch * kPrefixTokens + i);
  }
  const auto x = gather_rows(concat_rows<Scalar>({pre, q}), std::span<const int>(index));
  return add_positions(bind, x, batch, query_tokens());
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::flow_input(Binder<Scalar>& bind, std::span<const int> prefix,
                                                const Matrix<Scalar>& x, std::span<const double> t) const {
  const int batch = static_cast<int>(t.size());
  if (x.rows() != batch || x.cols() != 2 * kWaypoints) throw std::invalid_argument("flow_input: x must be batch x 12");
  for (double v : t)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("flow time outside [0, 1]");
  auto& tape = bind.tape();
  // one token per waypoint, with the time embedding added
  Matrix<Scalar> pts(static_cast<Eigen::Index>(batch) * kWaypoints, 2);
  for (int s = 0; s < batch; ++s)
    for (int k = 0; k < kWaypoints; ++k) pts.row(s * kWaypoints + k) = x.block(s, 2 * k, 1, 2);
  std::vector<double> tt;
  for (double v : t)
    for (int k = 0; k < kWaypoints; ++k) tt.push_back(v);
  const Matrix<Scalar> temb = sinusoidal_embedding(tt, config_.d_model, 1000.0).template cast<Scalar>();
  const auto flow = add(linear(tape.constant(pts), bind(std::string(kPrefix) + "flow.in.w"),
                               bind(std::string(kPrefix) + "flow.in.b")),
                        tape.constant(temb));
  const auto pre = embedding_lookup(bind(std::string(kPrefix) + "tok_emb"), prefix);
  return add_positions(bind, interleave(pre, flow, batch, kPrefixTokens, kWaypoints), batch, flow_tokens());
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::query_head(Binder<Scalar>& bind, const Tensor<Scalar>& hidden, int batch) const {
  std::vector<int> rows;
  const int te = query_tokens();
  for (int s = 0; s < batch; ++s)
    for (int i = 0; i < config_.queries; ++i) rows.push_back(s * te + kPrefixTokens + i);
  const auto pts = linear(gather_rows(hidden, std::span<const int>(rows)), bind(std::string(kPrefix) + "query.head.w"),
                          bind(std::string(kPrefix) + "query.head.b"));
  return scale(reshape(pts, {batch, 2 * config_.queries}), static_cast<Scalar>(kFlowScale));
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::ar_logits(Binder<Scalar>& bind, const Tensor<Scalar>& hidden,
                                               std::span<const int> rows) const {
  return linear(gather_rows(hidden, rows), bind(std::string(kPrefix) + "ar.head.w"),
                bind(std::string(kPrefix) + "ar.head.b"));
}

template <typename Scalar>
Tensor<Scalar> ActionExpert<Scalar>::flow_head(Binder<Scalar>& bind, const Tensor<Scalar>& hidden, int batch) const {
  std::vector<int> rows;
  const int te = flow_tokens();
  for (int s = 0; s < batch; ++s)
    for (int k = 0; k < kWaypoints; ++k) rows.push_back(s * te + kPrefixTokens + k);
  const auto v = linear(gather_rows(hidden, std::span<const int>(rows)), bind(std::string(kPrefix) + "flow.out.w"),
                        bind(std::string(kPrefix) + "flow.out.b"));
  return reshape(v, {batch, 2 * kWaypoints});
}

// ---- session ----

template <typename Scalar>
ExpertSession<Scalar>::ExpertSession(const ActionExpert<Scalar>& expert, ParamSet<Scalar>& params, Tape<Scalar>& tape,
                                     SequenceBatch context)
    : expert_(&expert), bind_(tape, params), context_(std::move(context)) {
  if (!expert.config().backbone_sees_expert) backbone_ = expert.backbone().forward(bind_, context_);
}

template <typename Scalar>
Tensor<Scalar> ExpertSession<Scalar>::run(const Tensor<Scalar>& expert_in, int te) {
  if (!expert_->config().backbone_sees_expert) return expert_->forward_cached(bind_, backbone_, expert_in, te);
  auto out = expert_->forward_joint(bind_, context_, expert_in, te);
  backbone_ = out.backbone;
  return out.expert_hidden;
}

std::vector<int> prefix_ids(const std::vector<const TokenSequence*>& seqs) {
  std::vector<int> ids;
  for (const auto* s : seqs) {
    if (s->final_action_begin < 0) throw std::invalid_argument("expert prefix needs action slots (not a 6V sequence)");
    ids.insert(ids.end(), s->prev_action.begin(), s->prev_action.end());
  }
  return ids;
}

namespace {

template <typename Scalar>
Matrix<Scalar> targets_meters(const std::vector<const TokenSequence*>& seqs) {
  std::vector<Trajectory> t;
  for (const auto* s : seqs) t.push_back(s->target);
  return flatten_trajectories(t, 1.0).template cast<Scalar>();
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> query_loss(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                          const std::vector<const TokenSequence*>& seqs) {
  const int batch = static_cast<int>(seqs.size());
  const auto pre = prefix_ids(seqs);
  auto& bind = session.binder();
  const auto h = session.run(expert.query_input(bind, pre, batch), expert.query_tokens());
  return l1(expert.query_head(bind, h, batch), bind.tape().constant(targets_meters<Scalar>(seqs)));
}

template <typename Scalar>
Tensor<Scalar> ar_expert_loss(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                              const std::vector<const TokenSequence*>& seqs) {
  const int batch = static_cast<int>(seqs.size());
  const int te = kPrefixTokens + kActionTokens;
  std::vector<int> ids, rows, targets;
  for (int s = 0; s < batch; ++s) {
    const auto* q = seqs[static_cast<std::size_t>(s)];
    if (q->action_targets.size() != static_cast<std::size_t>(kActionTokens))
      throw std::invalid_argument("ar_expert_loss: sequence has no action targets");
    ids.insert(ids.end(), q->prev_action.begin(), q->prev_action.end());
    ids.push_back(VocabularyLayout::kBOA);
    ids.insert(ids.end(), q->action_targets.begin(), q->action_targets.end() - 1);
    for (int i = 0; i < kActionTokens; ++i) {
      rows.push_back(s * te + kPrefixTokens + i);
      targets.push_back(q->action_targets[static_cast<std::size_t>(i)]);
    }
  }
  auto& bind = session.binder();
  const auto h = session.run(expert.embed_tokens(bind, ids, batch, te), te);
  const std::vector<std::uint8_t> mask(rows.size(), 1);
  return cross_entropy(expert.ar_logits(bind, h, rows), std::span<const int>(targets),
                       std::span<const std::uint8_t>(mask));
}

template <typename Scalar>
Tensor<Scalar> flow_loss(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                         const std::vector<const TokenSequence*>& seqs, Rng& rng) {
  const int batch = static_cast<int>(seqs.size());
  const Matrix<double> a1 = targets_meters<double>(seqs) / kFlowScale;
  Matrix<double> a0(batch, 2 * kWaypoints);
  for (Eigen::Index i = 0; i < a0.size(); ++i) a0.data()[i] = rng.normal();
  std::vector<double> t(static_cast<std::size_t>(batch));
  for (auto& v : t) v = rng.uniform();
  Matrix<double> xt(batch, 2 * kWaypoints);
  for (int s = 0; s < batch; ++s) xt.row(s) = (1.0 - t[static_cast<std::size_t>(s)]) * a0.row(s) + t[static_cast<std::size_t>(s)] * a1.row(s);
  auto& bind = session.binder();
  const auto pre = prefix_ids(seqs);
  const auto h = session.run(expert.flow_input(bind, pre, xt.cast<Scalar>(), t), expert.flow_tokens());
  const Matrix<Scalar> target = (a1 - a0).cast<Scalar>();
  return mse(expert.flow_head(bind, h, batch), bind.tape().constant(target));
}

template <typename Scalar>
std::vector<Trajectory> query_decode(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                                     const std::vector<const TokenSequence*>& seqs) {
  const int batch = static_cast<int>(seqs.size());
  auto& bind = session.binder();
  const auto h = session.run(expert.query_input(bind, prefix_ids(seqs), batch), expert.query_tokens());
  const Matrix<double> pts = expert.query_head(bind, h, batch).value().template cast<double>();
  std::vector<Trajectory> out;
  for (int s = 0; s < batch; ++s) out.push_back(unflatten_trajectory(pts.row(s), 1.0));
  return out;
}

template <typename Scalar>
std::vector<std::vector<int>> ar_expert_decode(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                                               const std::vector<const TokenSequence*>& seqs,
                                               const DecodeOptions& options, int count) {
  const int batch = static_cast<int>(seqs.size());
  if (count <= 0 || kPrefixTokens + count > expert.config().max_tokens)
    throw UsageError("ar expert token count out of range");
  std::vector<std::vector<int>> seqs_ids(static_cast<std::size_t>(batch));
  for (int s = 0; s < batch; ++s) {
    const auto* q = seqs[static_cast<std::size_t>(s)];
    seqs_ids[static_cast<std::size_t>(s)].assign(q->prev_action.begin(), q->prev_action.end());
    seqs_ids[static_cast<std::size_t>(s)].push_back(VocabularyLayout::kBOA);
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batch));
  std::vector<Rng> rngs;
  for (int s = 0; s < batch; ++s) rngs.emplace_back(Rng::derive(options.seed, static_cast<std::uint64_t>(s)));
  auto& bind = session.binder();
  for (int i = 0; i < count; ++i) {
    const int te = kPrefixTokens + 1 + i;
    std::vector<int> ids, rows;
    for (int s = 0; s < batch; ++s) {
      ids.insert(ids.end(), seqs_ids[static_cast<std::size_t>(s)].begin(), seqs_ids[static_cast<std::size_t>(s)].end());
      rows.push_back(s * te + te - 1);
    }
    const auto h = session.run(expert.embed_tokens(bind, ids, batch, te), te);
    const Matrix<double> lg = expert.ar_logits(bind, h, rows).value().template cast<double>();
    for (int s = 0; s < batch; ++s) {
      const int tok = choose_token(lg.row(s), VocabularyLayout::kActionBegin, VocabularyLayout::kSpecialBegin,
                                   options.temperature, rngs[static_cast<std::size_t>(s)]);
      out[static_cast<std::size_t>(s)].push_back(tok);
      seqs_ids[static_cast<std::size_t>(s)].push_back(tok);
    }
  }
  return out;
}

template <typename Scalar>
Matrix<double> flow_velocity(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                             const std::vector<const TokenSequence*>& seqs, const Matrix<double>& x,
                             std::span<const double> t) {
  const int batch = static_cast<int>(seqs.size());
  auto& bind = session.binder();
  const auto h = session.run(expert.flow_input(bind, prefix_ids(seqs), x.cast<Scalar>(), t), expert.flow_tokens());
  return expert.flow_head(bind, h, batch).value().template cast<double>();
}

template <typename Scalar>
std::vector<Trajectory> flow_sample(const ActionExpert<Scalar>& expert, ExpertSession<Scalar>& session,
                                    const std::vector<const TokenSequence*>& seqs, std::uint64_t seed) {
  const int batch = static_cast<int>(seqs.size());
  Rng rng(seed);
  Matrix<double> x0(batch, 2 * kWaypoints);
  for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = rng.normal();
  const Matrix<double> x1 = euler_integrate(x0, expert.config().flow_steps, [&](const Matrix<double>& x, double t) {
    const std::vector<double> ts(static_cast<std::size_t>(batch), t);
    return flow_velocity(expert, session, seqs, x, ts);
  });
  std::vector<Trajectory> out;
  for (int s = 0; s < batch; ++s) out.push_back(unflatten_trajectory(x1.row(s)));
  return out;
}

Matrix<double> euler_integrate(Matrix<double> x, int steps, const VelocityField& field) {
  if (steps <= 0) throw std::invalid_argument("euler_integrate: steps must be positive");
  const double dt = 1.0 / steps;
  for (int i = 0; i < steps; ++i) {
    const Matrix<double> v = field(x, i * dt);
    if (v.rows() != x.rows() || v.cols() != x.cols()) throw std::invalid_argument("euler_integrate: field shape");
    x += dt * v;
  }
  return x;
}

Matrix<double> flatten_trajectories(const std::vector<Trajectory>& t, double scale) {
  Matrix<double> out(static_cast<Eigen::Index>(t.size()), 2 * kWaypoints);
  for (std::size_t s = 0; s < t.size(); ++s)
    for (int k = 0; k < kWaypoints; ++k) {
      out(static_cast<Eigen::Index>(s), 2 * k) = t[s].points(k, 0) * scale;
      out(static_cast<Eigen::Index>(s), 2 * k + 1) = t[s].points(k, 1) * scale;
    }
  return out;
}

Trajectory unflatten_trajectory(const RowVector<double>& row, double scale) {
  if (row.size() != 2 * kWaypoints) throw std::invalid_argument("unflatten_trajectory: need 12 values");
  Trajectory t;
  for (int k = 0; k < kWaypoints; ++k) t.points.row(k) << row(2 * k) * scale, row(2 * k + 1) * scale;
  return t;
}

#define DW0_INSTANTIATE(S)                                                                                          \
  template JointAttentionOutput<S> joint_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,           \
                                                   const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int,  \
                                                   int, bool);                                                      \
  template class ActionExpert<S>;                                                                                   \
  template class ExpertSession<S>;                                                                                  \
  template Tensor<S> query_loss(const ActionExpert<S>&, ExpertSession<S>&, const std::vector<const TokenSequence*>&); \
  template Tensor<S> ar_expert_loss(const ActionExpert<S>&, ExpertSession<S>&,                                     \
                                    const std::vector<const TokenSequence*>&);                                     \
  template Tensor<S> flow_loss(const ActionExpert<S>&, ExpertSession<S>&, const std::vector<const TokenSequence*>&, \
                               Rng&);                                                                               \
  template std::vector<Trajectory> query_decode(const ActionExpert<S>&, ExpertSession<S>&,                         \
                                                const std::vector<const TokenSequence*>&);                         \
  template std::vector<std::vector<int>> ar_expert_decode(const ActionExpert<S>&, ExpertSession<S>&,               \
                                                          const std::vector<const TokenSequence*>&,                \
                                                          const DecodeOptions&, int);                              \
  template Matrix<double> flow_velocity(const ActionExpert<S>&, ExpertSession<S>&,                                 \
                                        const std::vector<const TokenSequence*>&, const Matrix<double>&,           \
                                        std::span<const double>);                                                   \
  template std::vector<Trajectory> flow_sample(const ActionExpert<S>&, ExpertSession<S>&,                          \
                                               const std::vector<const TokenSequence*>&, std::uint64_t);
DW0_INSTANTIATE(float)
DW0_INSTANTIATE(double)
#undef DW0_INSTANTIATE

}  // namespace dw0
