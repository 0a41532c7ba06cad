#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dw0/experts.hpp"
#include "dw0/gradcheck.hpp"

#include <cmath>

using namespace dw0;

namespace {

struct Fixture {
  std::vector<SceneRecord> records = generate_records(48, 91, ScenarioMix{});
  VisualCodebook book;
  Fixture() {
    std::vector<Image> imgs;
    for (const auto& r : records) imgs.push_back(r.image);
    book = fit_codebook(imgs, 1);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

BackboneConfig mini_backbone() {
  BackboneConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.mlp_hidden = 32;
  c.max_length = 256;
  c.init_std = 0.3;
  return c;
}

ExpertConfig mini_expert(DecoderKind kind, bool sees = false) {
  ExpertConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.attn_width = 16;
  c.layers = 2;
  c.mlp_hidden = 16;
  c.init_std = 0.3;
  c.kind = kind;
  c.backbone_sees_expert = sees;
  return c;
}

template <typename S>
Matrix<S> random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix<S> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.uniform(-1, 1));
  return m;
}

std::vector<TokenSequence> stage2_sequences(FrontEnd fe, int n) {
  const auto& f = fixture();
  SequenceConfig c;
  c.history = 2;
  c.front_end = fe;
  const SequenceBuilder sb(f.records, c, fe == FrontEnd::Discrete ? &f.book : nullptr);
  const auto anchors = sb.anchors();
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) out.push_back(sb.build(anchors[static_cast<std::size_t>(i * 3) % anchors.size()]));
  return out;
}

std::vector<const TokenSequence*> ptrs(const std::vector<TokenSequence>& v) {
  std::vector<const TokenSequence*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

TEST_CASE("joint attention: empty expert reproduces standalone causal attention") {
  Rng rng(1);
  Tape<double> tape;
  const int B = 2, T = 8, D = 16;
  const auto q = tape.variable(random_matrix<double>(B * T, D, rng));
  const auto k = tape.variable(random_matrix<double>(B * T, D, rng));
  const auto v = tape.variable(random_matrix<double>(B * T, D, rng));
  const auto standalone = masked_attention(q, k, v, 2, B, causal_mask(T));
  for (bool sees : {false, true}) {
    const auto j = joint_attention(q, k, v, Tensor<double>{}, Tensor<double>{}, Tensor<double>{}, 2, B, 0, sees);
    CHECK((j.backbone.value() - standalone.value()).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK_FALSE(j.expert.valid());
  }
}

TEST_CASE("joint attention: split lengths, direction mask isolation, geometry check") {
  Rng rng(2);
  const int B = 3, Tb = 8, Te = 4, D = 16;
  const auto qb = random_matrix<double>(B * Tb, D, rng), kb = random_matrix<double>(B * Tb, D, rng),
             vb = random_matrix<double>(B * Tb, D, rng);
  const auto qe = random_matrix<double>(B * Te, D, rng), ke = random_matrix<double>(B * Te, D, rng),
             ve = random_matrix<double>(B * Te, D, rng);
  auto run = [&](const Matrix<double>& kexp, const Matrix<double>& vexp, bool sees) {
    Tape<double> tape;
    const auto j = joint_attention(tape.constant(qb), tape.constant(kb), tape.constant(vb), tape.constant(qe),
                                   tape.constant(kexp), tape.constant(vexp), 2, B, Te, sees);
    return std::make_pair(Matrix<double>(j.backbone.value()), Matrix<double>(j.expert.value()));
  };
  const auto [b0, e0] = run(ke, ve, false);
  CHECK(b0.rows() == B * Tb);
  CHECK(e0.rows() == B * Te);
  for (int trial = 0; trial < 10; ++trial) {
    const auto [b1, e1] = run(random_matrix<double>(B * Te, D, rng), random_matrix<double>(B * Te, D, rng), false);
    CHECK(b1 == b0);  // bitwise
    CHECK(e1 != e0);
  }
  const auto [bon, eon] = run(ke, ve, true);
  const auto [bon2, eon2] = run(2.0 * ke, 2.0 * ve, true);
  CHECK(bon != bon2);  // with the reverse direction on, the backbone sees the expert

  // expert rows equal a brute-force attention over [K_b; K_e]
  Matrix<double> brute(B * Te, D);
  const int dh = D / 2;
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < 2; ++h)
      for (int i = 0; i < Te; ++i) {
        std::vector<double> w;
        std::vector<Eigen::Index> rows;
        for (int j = 0; j < Tb; ++j) rows.push_back(b * Tb + j);
        for (int j = 0; j <= i; ++j) rows.push_back(-(b * Te + j) - 1);
        double m = -1e300;
        for (auto r : rows) {
          const auto krow = r >= 0 ? kb.block(r, h * dh, 1, dh) : ke.block(-r - 1, h * dh, 1, dh);
          w.push_back(qe.block(b * Te + i, h * dh, 1, dh).cwiseProduct(krow).sum() / std::sqrt(double(dh)));
          m = std::max(m, w.back());
        }
        double z = 0;
        for (auto& x : w) z += x = std::exp(x - m);
        RowVector<double> acc = RowVector<double>::Zero(dh);
        for (std::size_t n = 0; n < rows.size(); ++n) {
          const auto r = rows[n];
          acc += w[n] / z * (r >= 0 ? vb.block(r, h * dh, 1, dh) : ve.block(-r - 1, h * dh, 1, dh));
        }
        brute.block(b * Te + i, h * dh, 1, dh) = acc;
      }
  CHECK((brute - e0).cwiseAbs().maxCoeff() < 1e-12);

  Tape<double> tape;
  CHECK_THROWS_AS(joint_attention(tape.constant(qb), tape.constant(kb), tape.constant(vb),
                                  tape.constant(random_matrix<double>(B * Te, 8, rng)),
                                  tape.constant(random_matrix<double>(B * Te, 8, rng)),
                                  tape.constant(random_matrix<double>(B * Te, 8, rng)), 2, B, Te, false),
                  std::invalid_argument);
}

TEST_CASE("joint attention gradient check, both directions") {
  Rng rng(3);
  const int B = 2, Tb = 5, Te = 3, D = 8;
  for (bool sees : {false, true}) {
    std::vector<Matrix<double>> in;
    for (int i = 0; i < 3; ++i) in.push_back(random_matrix<double>(B * Tb, D, rng));
    for (int i = 0; i < 3; ++i) in.push_back(random_matrix<double>(B * Te, D, rng));
    const Matrix<double> wb = random_matrix<double>(B * Tb, D, rng), we = random_matrix<double>(B * Te, D, rng);
    const auto f = [&](Tape<double>& t, const std::vector<Tensor<double>>& x) {
      const auto j = joint_attention(x[0], x[1], x[2], x[3], x[4], x[5], 2, B, Te, sees);
      return add(sum(mul(j.backbone, t.constant(wb))), sum(mul(j.expert, t.constant(we))));
    };
    const auto rd = gradient_check<double>(f, in, 1e-5, 1e-6);
    CHECK(rd.passed);
    std::vector<Matrix<float>> inf;
    for (const auto& m : in) inf.push_back(m.cast<float>());
    const Matrix<float> wbf = wb.cast<float>(), wef = we.cast<float>();
    const auto rf = gradient_check<float>(
        [&](Tape<float>& t, const std::vector<Tensor<float>>& x) {
          const auto j = joint_attention(x[0], x[1], x[2], x[3], x[4], x[5], 2, B, Te, sees);
          return add(sum(mul(j.backbone, t.constant(wbf))), sum(mul(j.expert, t.constant(wef))));
        },
        inf, 1e-2f, 1e-4);
    MESSAGE("joint attention (reverse direction " << sees << "): double " << rd.max_rel_error << ", float "
                                                  << rf.max_rel_error);
    CHECK(rf.passed);
  }
}

TEST_CASE("cached expert forward equals the joint forward; decoders share backbone activations") {
  const auto seqs = stage2_sequences(FrontEnd::Discrete, 3);
  const auto sp = ptrs(seqs);
  Rng rng(4);
  ParamSet<double> p;
  const Backbone<double> bb(mini_backbone());
  bb.init(p, rng);
  const ActionExpert<double> ex(bb, mini_expert(DecoderKind::Query));
  ex.init(p, rng);
  const auto ctx = make_batch(sp, FrontEnd::Discrete, seqs[0].context_length);
  const auto pre = prefix_ids(sp);

  Tape<double> t1;
  Binder<double> b1(t1, p);
  const auto joint = ex.forward_joint(b1, ctx, ex.query_input(b1, pre, 3), ex.query_tokens());
  Tape<double> t2;
  Binder<double> b2(t2, p);
  const auto act = bb.forward(b2, ctx);
  const auto cached = ex.forward_cached(b2, act, ex.query_input(b2, pre, 3), ex.query_tokens());
  CHECK(joint.backbone.hidden.value() == act.hidden.value());
  CHECK(joint.expert_hidden.value() == cached.value());

  // different decoder inputs: identical backbone computation
  Tape<double> t3;
  Binder<double> b3(t3, p);
  std::vector<double> ts(3, 0.5);
  const auto flow = ex.forward_joint(b3, ctx, ex.flow_input(b3, pre, Matrix<double>::Ones(3, 12), ts), ex.flow_tokens());
  CHECK(flow.backbone.hidden.value() == joint.backbone.hidden.value());
  for (int l = 0; l < 2; ++l) CHECK(flow.backbone.keys[static_cast<std::size_t>(l)].value() == joint.backbone.keys[static_cast<std::size_t>(l)].value());

  ExpertConfig bad = mini_expert(DecoderKind::Autoregressive, true);
  CHECK_THROWS_AS(ActionExpert<double>(bb, bad), UsageError);
  bad = mini_expert(DecoderKind::Query);
  bad.attn_width = 24;
  CHECK_THROWS_AS(ActionExpert<double>(bb, bad), UsageError);
}

TEST_CASE("query decoder: zero head, perfect L1, gradient check through joint attention") {
  const auto seqs = stage2_sequences(FrontEnd::Discrete, 2);
  const auto sp = ptrs(seqs);
  for (bool sees : {false, true}) {
    Rng rng(5);
    ParamSet<double> p;
    const Backbone<double> bb(mini_backbone());
    bb.init(p, rng);
    const ActionExpert<double> ex(bb, mini_expert(DecoderKind::Query, sees));
    ex.init(p, rng);
    const auto ctx = make_batch(sp, FrontEnd::Discrete, seqs[0].context_length);
    {
      ParamSet<double> z = p;
      z.at("expert.query.head.w").value.setZero();
      Tape<double> tape;
      ExpertSession<double> s(ex, z, tape, ctx);
      for (const auto& t : query_decode(ex, s, sp)) CHECK(t.points.cwiseAbs().maxCoeff() == 0.0);
    }
    {
      Tape<double> tape;
      const Matrix<double> target = flatten_trajectories({seqs[0].target}, 1.0);
      CHECK(l1(tape.constant(target), tape.constant(target)).item() == 0.0);
    }
    const auto report = gradient_check_params<double>(
        [&](Tape<double>& tape) {
          ExpertSession<double> s(ex, p, tape, ctx);
          return query_loss(ex, s, sp);
        },
        p, 1e-5, 1e-6, 4, rng);
    MESSAGE("query loss gradient check (reverse direction " << sees << "): " << report.max_rel_error);
    CHECK(report.passed);
    // the backbone receives gradient through joint attention
    p.zero_grad();
    Tape<double> tape;
    ExpertSession<double> s(ex, p, tape, ctx);
    tape.backward(query_loss(ex, s, sp));
    CHECK(p.at("backbone.layer0.wk.w").grad.cwiseAbs().maxCoeff() > 0.0);
    CHECK(p.at("backbone.tok_emb").grad.cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("autoregressive expert: determinism, masked range, gradient check") {
  const auto seqs = stage2_sequences(FrontEnd::Continuous, 4);
  const auto sp = ptrs(seqs);
  Rng rng(6);
  ParamSet<float> p;
  const Backbone<float> bb(mini_backbone());
  bb.init(p, rng);
  ExpertConfig ec = mini_expert(DecoderKind::Autoregressive);
  ec.init_std = 1.0;
  const ActionExpert<float> ex(bb, ec);
  ex.init(p, rng);
  const auto ctx = make_batch(sp, FrontEnd::Continuous, seqs[0].context_length);
  auto decode = [&](const DecodeOptions& o, int count = kActionTokens) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    ExpertSession<float> s(ex, p, tape, ctx);
    return ar_expert_decode(ex, s, sp, o, count);
  };
  const auto g1 = decode({}), g2 = decode({});
  CHECK(g1 == g2);
  DecodeOptions cold;
  cold.temperature = 1e-9;
  CHECK(decode(cold) == g1);
  std::size_t bad = 0, total = 0;
  for (int i = 0; i < 50; ++i) {
    DecodeOptions o;
    o.temperature = 1.0;
    o.seed = static_cast<std::uint64_t>(i);
    for (const auto& ids : decode(o, 16)) {
      CHECK(ids.size() == 16);
      for (int id : ids) bad += !VocabularyLayout::is_action(id);
      total += ids.size();
    }
  }
  CHECK(total == 50 * 4 * 16);
  CHECK(bad == 0);

  ParamSet<double> pd;
  Rng r2(6);
  const Backbone<double> bbd(mini_backbone());
  bbd.init(pd, r2);
  const ActionExpert<double> exd(bbd, mini_expert(DecoderKind::Autoregressive));
  exd.init(pd, r2);
  const auto report = gradient_check_params<double>(
      [&](Tape<double>& tape) {
        ExpertSession<double> s(exd, pd, tape, ctx);
        return ar_expert_loss(exd, s, sp);
      },
      pd, 1e-5, 1e-6, 4, r2);
  CHECK(report.passed);
}

TEST_CASE("flow matching: Euler oracles, velocity contract, sampler determinism") {
  // constant field: Euler is exact up to rounding of the 10 additions
  Rng rng(7);
  const Matrix<double> x0 = random_matrix<double>(3, 12, rng);
  const Matrix<double> c = random_matrix<double>(3, 12, rng);
  const auto xc = euler_integrate(x0, 10, [&](const Matrix<double>&, double) { return c; });
  CHECK((xc - (x0 + c)).cwiseAbs().maxCoeff() < 1e-14);
  Matrix<double> half = Matrix<double>::Constant(3, 12, 0.5);
  const auto xh = euler_integrate(x0, 10, [&](const Matrix<double>&, double) { return Matrix<double>(half * 10.0); });
  CHECK((xh - (x0 + half * 10.0)).cwiseAbs().maxCoeff() < 1e-14);
  // linear field v = -x: (1 - 1/10)^10 x0
  const auto xl = euler_integrate(x0, 10, [](const Matrix<double>& x, double) { return Matrix<double>(-x); });
  CHECK((xl - std::pow(0.9, 10) * x0).cwiseAbs().maxCoeff() < 1e-9);
  // straight-line target: a_0 = 0, a_1 = 1 -> velocity 1 for every t
  const Matrix<double> a0 = Matrix<double>::Zero(1, 12), a1 = Matrix<double>::Ones(1, 12);
  for (double t : {0.0, 0.3, 1.0}) {
    const Matrix<double> xt = (1 - t) * a0 + t * a1;
    CHECK(((a1 - a0) - Matrix<double>::Ones(1, 12)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((xt - Matrix<double>::Constant(1, 12, t)).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK_THROWS_AS(euler_integrate(x0, 0, [](const Matrix<double>& x, double) { return x; }), std::invalid_argument);

  const auto seqs = stage2_sequences(FrontEnd::Discrete, 2);
  const auto sp = ptrs(seqs);
  Rng r2(8);
  ParamSet<double> p;
  const Backbone<double> bb(mini_backbone());
  bb.init(p, r2);
  const ActionExpert<double> ex(bb, mini_expert(DecoderKind::Flow));
  ex.init(p, r2);
  const auto ctx = make_batch(sp, FrontEnd::Discrete, seqs[0].context_length);
  auto sample = [&](std::uint64_t seed) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    ExpertSession<double> s(ex, p, tape, ctx);
    return flow_sample(ex, s, sp, seed);
  };
  const auto s1 = sample(11), s2 = sample(11), s3 = sample(12);
  CHECK(s1[0].points == s2[0].points);
  CHECK(s1[1].points == s2[1].points);
  CHECK(s1[0].points != s3[0].points);
  {
    Tape<double> tape;
    ExpertSession<double> s(ex, p, tape, ctx);
    const std::vector<double> bad_t{0.5, 1.5};
    CHECK_THROWS_AS(flow_velocity(ex, s, sp, Matrix<double>::Zero(2, 12), bad_t), std::invalid_argument);
  }
  // flow MSE gradient check; the rng is reseeded so every evaluation draws the same noise
  const auto report = gradient_check_params<double>(
      [&](Tape<double>& tape) {
        Rng noise(99);
        ExpertSession<double> s(ex, p, tape, ctx);
        return flow_loss(ex, s, sp, noise);
      },
      p, 1e-5, 1e-6, 4, r2);
  CHECK(report.passed);
  // oracle velocity gives zero loss
  Tape<double> tape;
  const Matrix<double> v = Matrix<double>::Ones(2, 12);
  CHECK(mse(tape.constant(v), tape.constant(v)).item() == 0.0);
}

TEST_CASE("sinusoidal embedding") {
  const std::vector<double> t{0.0, 0.25};
  const auto e = sinusoidal_embedding(t, 8);
  CHECK(e.rows() == 2);
  CHECK(e(0, 0) == 0.0);
  CHECK(e(0, 4) == 1.0);
  CHECK(e(1, 0) == doctest::Approx(std::sin(0.25)));
  CHECK_THROWS(sinusoidal_embedding(t, 7));
}
