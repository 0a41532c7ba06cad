#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dw0/backbone.hpp"
#include "dw0/gradcheck.hpp"

#include <cmath>

using namespace dw0;

namespace {

struct Fixture {
  std::vector<SceneRecord> records = generate_records(64, 77, ScenarioMix{});
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

SequenceConfig config(int history, FrontEnd fe = FrontEnd::Discrete) {
  SequenceConfig c;
  c.history = history;
  c.front_end = fe;
  return c;
}

BackboneConfig mini() {
  BackboneConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.mlp_hidden = 32;
  c.max_length = 256;
  c.init_std = 0.3;
  return c;
}

template <typename S>
Matrix<double> logits_at(const Backbone<S>& m, ParamSet<S>& p, const TokenSequence& s, FrontEnd fe,
                         std::shared_ptr<const AttentionMask> mask = nullptr) {
  Tape<S> tape;
  Binder<S> bind(tape, p);
  const auto act = m.forward(bind, make_batch(std::vector<const TokenSequence*>{&s}, fe), mask);
  std::vector<int> rows(s.ids.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return m.logits(bind, act.hidden, rows).value().template cast<double>();
}

}  // namespace

TEST_CASE("sequence layout: lengths, determinism, tag histogram") {
  const auto& f = fixture();
  for (int H : {1, 2, 6}) {
    const SequenceBuilder sb(f.records, config(H), &f.book);
    const auto anchors = sb.anchors();
    REQUIRE_FALSE(anchors.empty());
    const auto s = sb.build(anchors.front());
    CHECK(s.context_length == 1 + H * 79);
    CHECK(static_cast<int>(s.ids.size()) == 1 + H * 79 + 12);
    CHECK(static_cast<int>(s.ids.size()) == sb.config().sequence_length());
    const auto again = sb.build(anchors.front());
    CHECK(s.ids == again.ids);
    std::array<int, 4> hist{};
    for (int i = 0; i < s.context_length; ++i) ++hist[static_cast<std::size_t>(s.tags[static_cast<std::size_t>(i)])];
    CHECK(hist[0] == H);
    CHECK(hist[1] == 64 * H);
    CHECK(hist[2] == 12 * H);
    CHECK(hist[3] == 1 + 2 * H);
    for (std::size_t i = 0; i < s.ids.size(); ++i) CHECK(VocabularyLayout::classify(s.ids[i]) == s.tags[i]);
    CHECK(s.ids.front() == VocabularyLayout::kBOS);
    // action targets are A_t, inputs of the final chunk carry A_{t-1}
    const auto& rec = f.records[s.anchor];
    const auto at = sb.tokenizer().tokenize(rec.expert);
    CHECK(std::equal(at.begin(), at.end(), s.action_targets.begin()));
    CHECK(s.ids[static_cast<std::size_t>(s.action_target_rows.front())] == VocabularyLayout::kBOA);
    for (int i = 1; i < 12; ++i) CHECK(s.ids[static_cast<std::size_t>(s.action_target_rows[static_cast<std::size_t>(i)])] == at[static_cast<std::size_t>(i - 1)]);
    const auto prev = sb.tokenizer().tokenize(f.records[s.anchor - 1].expert);
    CHECK(std::equal(prev.begin(), prev.end(), s.ids.begin() + s.final_action_begin));
    CHECK(s.ids[static_cast<std::size_t>(s.final_visual_begin - 1)] == VocabularyLayout::kBOV);
    CHECK(s.visual_target_rows.front() == s.final_visual_begin - 1);
  }
  // anchors need H chunks and the frame before the first chunk
  const SequenceBuilder six(f.records, config(6), &f.book);
  // stride 2: frames f, f-2, .., f-10 plus f-11 must exist
  for (auto a : six.anchors()) CHECK(f.records[a].frame_index >= 11);
  CHECK(six.anchors().size() == 4 * 5);
  CHECK(six.anchors(true).size() == 4 * 4);
  const auto first = std::find_if(f.records.begin(), f.records.end(), [](const auto& r) { return r.frame_index == 2; });
  CHECK_THROWS_AS(six.build(static_cast<std::size_t>(first - f.records.begin())), DataError);
}

TEST_CASE("sequence config validation and variants") {
  SequenceConfig c;
  c.interval_s = 0.75;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c.interval_s = 4.0;
  CHECK_THROWS_AS(c.validate(), UsageError);  // 6 chunks 4 s apart do not fit in 16 frames
  c.history = 2;
  CHECK_NOTHROW(c.validate());
  CHECK(c.frame_stride() == 8);

  const auto& f = fixture();
  SequenceConfig v = config(6);
  v.vision_only = true;
  const SequenceBuilder sb(f.records, v, &f.book);
  const auto s = sb.build(sb.anchors().front());
  CHECK(std::count(s.tags.begin(), s.tags.end(), Modality::Action) == 0);
  CHECK(std::count(s.tags.begin(), s.tags.end(), Modality::Language) == 0);
  CHECK(s.action_targets.empty());
  CHECK(s.visual_targets.size() == 64);
  CHECK(static_cast<int>(s.ids.size()) == 1 + 6 * 65);

  // interval variants only change which frames feed the chunks
  SequenceConfig a = config(2), b = config(2);
  b.interval_s = 4.0;
  const SequenceBuilder sa(f.records, a, &f.book), sbb(f.records, b, &f.book);
  const auto anchor = sbb.anchors().front();
  const auto x = sa.build(anchor), y = sbb.build(anchor);
  CHECK(x.tags == y.tags);
  CHECK(x.action_targets == y.action_targets);
  CHECK(x.ids != y.ids);

  CHECK_THROWS_AS(SequenceBuilder(f.records, config(1), nullptr), UsageError);
  const SequenceBuilder cont(f.records, config(1, FrontEnd::Continuous), nullptr);
  const auto cs = cont.build(cont.anchors().front());
  CHECK(cs.visual_targets.empty());
  CHECK(cs.patches.rows() == 64);
}

TEST_CASE("causality: future perturbations never change past logits") {
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(1), &f.book);
  const auto base = sb.build(sb.anchors().front());
  Rng rng(3);
  ParamSet<float> p;
  const Backbone<float> model;
  model.init(p, rng);
  const auto ref = logits_at(model, p, base, FrontEnd::Discrete);
  const int T = static_cast<int>(base.ids.size());
  for (int trial = 0; trial < 20; ++trial) {
    const int pos = static_cast<int>(rng.below(static_cast<std::uint64_t>(T - 1)));
    TokenSequence s = base;
    for (int i = pos + 1; i < T; ++i) s.ids[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(VocabularyLayout::kSize));
    const auto got = logits_at(model, p, s, FrontEnd::Discrete);
    CHECK(got.topRows(pos + 1) == ref.topRows(pos + 1));
    CHECK(got.bottomRows(T - pos - 1) != ref.bottomRows(T - pos - 1));
  }
  // continuous front end: perturbing a later patch leaves earlier rows alone
  const SequenceBuilder cb(f.records, config(2, FrontEnd::Continuous), nullptr);
  const auto cbase = cb.build(cb.anchors().front());
  const auto cref = logits_at(model, p, cbase, FrontEnd::Continuous);
  TokenSequence cs = cbase;
  cs.patches.row(100).setConstant(0.5f);
  const auto cgot = logits_at(model, p, cs, FrontEnd::Continuous);
  const int row = cbase.visual_rows[100];
  CHECK(cgot.topRows(row) == cref.topRows(row));
  CHECK(cgot.row(row) != cref.row(row));
}

TEST_CASE("zero head gives uniform logits: CE = ln 520") {
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(1), &f.book);
  const auto s = sb.build(sb.anchors().front());
  Rng rng(1);
  ParamSet<double> p;
  const Backbone<double> model(mini());
  model.init(p, rng);
  p.at("backbone.head.w").value.setZero();
  Tape<double> tape;
  Binder<double> bind(tape, p);
  const std::vector<const TokenSequence*> seqs{&s};
  const auto act = model.forward(bind, make_batch(seqs, FrontEnd::Discrete));
  CHECK(loss_action(model, bind, act, seqs).item() == doctest::Approx(std::log(520.0)).epsilon(1e-12));
  CHECK(loss_wm_ar(model, bind, act, seqs).item() == doctest::Approx(std::log(520.0)).epsilon(1e-12));
}

TEST_CASE("losses equal hand-rolled -log p sums; joint total is additive") {
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(2), &f.book);
  const auto anchors = sb.anchors();
  std::vector<TokenSequence> store{sb.build(anchors[0]), sb.build(anchors[5])};
  const std::vector<const TokenSequence*> seqs{&store[0], &store[1]};
  Rng rng(4);
  ParamSet<double> p;
  const Backbone<double> model(mini());
  model.init(p, rng);
  Tape<double> tape;
  Binder<double> bind(tape, p);
  const auto act = model.forward(bind, make_batch(seqs, FrontEnd::Discrete));
  const double la = loss_action(model, bind, act, seqs).item();
  const double lw = loss_wm_ar(model, bind, act, seqs).item();

  auto hand = [&](bool visual) {
    double total = 0;
    int n = 0;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const auto lg = logits_at(model, p, *seqs[s], FrontEnd::Discrete);
      const auto& rows = visual ? seqs[s]->visual_target_rows : seqs[s]->action_target_rows;
      const auto& tg = visual ? seqs[s]->visual_targets : seqs[s]->action_targets;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto r = lg.row(rows[i]);
        double z = 0;
        for (int v = 0; v < r.size(); ++v) z += std::exp(r(v));
        total += -(r(tg[i]) - std::log(z));
        ++n;
      }
    }
    return total / n;
  };
  CHECK(std::abs(la - hand(false)) < 1e-6);
  CHECK(std::abs(lw - hand(true)) < 1e-6);

  const double alpha = 1.0;
  Tape<double> t2;
  Binder<double> b2(t2, p);
  const auto act2 = model.forward(b2, make_batch(seqs, FrontEnd::Discrete));
  const auto total = add(loss_action(model, b2, act2, seqs), scale(loss_wm_ar(model, b2, act2, seqs), alpha));
  CHECK(std::abs(total.item() - (la + alpha * lw)) < 1e-6);
}

TEST_CASE("loss_wm_ar rejects the continuous front end and empty masks") {
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(1, FrontEnd::Continuous), nullptr);
  const auto s = sb.build(sb.anchors().front());
  Rng rng(1);
  ParamSet<float> p;
  const Backbone<float> model(mini());
  model.init(p, rng);
  Tape<float> tape;
  Binder<float> bind(tape, p);
  const std::vector<const TokenSequence*> seqs{&s};
  const auto act = model.forward(bind, make_batch(seqs, FrontEnd::Continuous));
  CHECK_THROWS_AS(loss_wm_ar(model, bind, act, seqs), std::invalid_argument);
  CHECK(std::isfinite(loss_action(model, bind, act, seqs).item()));
  TokenSequence none = s;
  none.action_target_rows.clear();
  none.action_targets.clear();
  CHECK_THROWS_AS(loss_action(model, bind, act, std::vector<const TokenSequence*>{&none}), std::invalid_argument);
  CHECK_THROWS(generate_visual_tokens(model, p, s, FrontEnd::Continuous, {}));
}

TEST_CASE("gradient check: 2-layer miniature backbone") {
  const auto& f = fixture();
  for (FrontEnd fe : {FrontEnd::Discrete, FrontEnd::Continuous}) {
    const SequenceBuilder sb(f.records, config(1, fe), fe == FrontEnd::Discrete ? &f.book : nullptr);
    const auto s = sb.build(sb.anchors().front());
    const std::vector<const TokenSequence*> seqs{&s};
    const auto batch = make_batch(seqs, fe);
    {
      Rng rng(6);
      ParamSet<double> p;
      const Backbone<double> model(mini());
      model.init(p, rng);
      const auto report = gradient_check_params<double>(
          [&](Tape<double>& tape) {
            Binder<double> bind(tape, p);
            const auto act = model.forward(bind, batch);
            auto loss = loss_action(model, bind, act, seqs);
            if (fe == FrontEnd::Discrete) loss = add(loss, loss_wm_ar(model, bind, act, seqs));
            return loss;
          },
          p, 1e-5, 1e-6, 6, rng);
      MESSAGE("double miniature (" << to_string(fe) << "): max rel err " << report.max_rel_error << " over "
                                   << report.coordinates << " coordinates");
      CHECK(report.passed);
    }
    {
      Rng rng(6);
      ParamSet<float> p;
      const Backbone<float> model(mini());
      model.init(p, rng);
      const auto report = gradient_check_params<float>(
          [&](Tape<float>& tape) {
            Binder<float> bind(tape, p);
            const auto act = model.forward(bind, batch);
            return loss_action(model, bind, act, seqs);
          },
          p, 1e-2f, 1e-4, 6, rng);
      MESSAGE("float miniature (" << to_string(fe) << "): max rel err " << report.max_rel_error << " at param #"
                                  << report.worst_input << "[" << report.worst_index << "]");
      CHECK(report.passed);
    }
  }
}

TEST_CASE("action loss reaches final-chunk visual tokens only through attention") {
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(2), &f.book);
  const auto s = sb.build(sb.anchors().front());
  const std::vector<const TokenSequence*> seqs{&s};
  Rng rng(8);
  ParamSet<double> p;
  const Backbone<double> model(mini());
  model.init(p, rng);
  const auto batch = make_batch(seqs, FrontEnd::Discrete);
  auto loss_with = [&](std::shared_ptr<const AttentionMask> mask) {
    Tape<double> tape;
    Binder<double> bind(tape, p);
    const auto act = model.forward(bind, batch, mask);
    return loss_action(model, bind, act, seqs).item();
  };
  const int T = static_cast<int>(s.ids.size());
  auto m = std::make_shared<AttentionMask>(*causal_mask(T));
  for (int r = s.context_length; r < T; ++r)
    for (int c = s.final_visual_begin; c < s.final_visual_begin + 64; ++c) (*m)(r, c) = 0;
  (*m)(s.action_target_rows.front(), s.final_visual_begin) = 0;
  const double full = loss_with(nullptr), cut = loss_with(m);
  MESSAGE("L_Action full " << full << ", with action->final-visual attention removed " << cut);
  CHECK(full != cut);
  CHECK(loss_with(causal_mask(T)) == full);
}

TEST_CASE("masked decoding: determinism, range, temperature limit") {
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(1), &f.book);
  const auto anchors = sb.anchors();
  BackboneConfig c = mini();
  c.init_std = 1.0;  // a random head puts plenty of mass outside the action range
  Rng rng(10);
  ParamSet<float> p;
  const Backbone<float> model(c);
  model.init(p, rng);
  const auto s = sb.build(anchors.front());
  const auto g1 = generate_action_tokens(model, p, s, FrontEnd::Discrete);
  const auto g2 = generate_action_tokens(model, p, s, FrontEnd::Discrete);
  CHECK(g1 == g2);
  DecodeOptions cold;
  cold.temperature = 1e-8;
  CHECK(generate_action_tokens(model, p, s, FrontEnd::Discrete, cold) == g1);

  // unmasked argmax would leave the action range for this model
  const auto lg = logits_at(model, p, s, FrontEnd::Discrete);
  int outside = 0;
  for (int r : s.action_target_rows) {
    Eigen::Index arg;
    lg.row(r).maxCoeff(&arg);
    outside += !VocabularyLayout::is_action(static_cast<int>(arg));
  }
  MESSAGE("unmasked argmax outside the action range at " << outside << " of 12 positions");

  std::size_t bad = 0, total = 0;
  for (int i = 0; i < 1000; ++i) {
    DecodeOptions o;
    o.temperature = 1.0;
    o.seed = static_cast<std::uint64_t>(i);
    const auto ids = generate_action_tokens(model, p, sb.build(anchors[static_cast<std::size_t>(i) % anchors.size()]),
                                            FrontEnd::Discrete, o);
    for (int id : ids) bad += !VocabularyLayout::is_action(id);
    total += ids.size();
  }
  CHECK(total == 12000);
  CHECK(bad == 0);

  DecodeOptions o;
  o.temperature = 1.0;
  o.seed = 5;
  const auto v1 = generate_visual_tokens(model, p, s, FrontEnd::Discrete, o);
  const auto v2 = generate_visual_tokens(model, p, s, FrontEnd::Discrete, o);
  CHECK(v1 == v2);
  for (int id : v1) CHECK_UNARY(VocabularyLayout::is_visual(id));
  const Image img = decode_tokens(f.book, v1);
  CHECK(img.size() == static_cast<std::size_t>(kImageBytes));
}

TEST_CASE("choose_token respects the range") {
  RowVector<double> lg(6);
  lg << 9, 1, 3, 2, 8, 0;
  Rng rng(1);
  CHECK(choose_token(lg, 1, 4, 0.0, rng) == 2);
  CHECK(choose_token(lg, 0, 6, 0.0, rng) == 0);
  for (int i = 0; i < 100; ++i) {
    const int k = choose_token(lg, 1, 4, 2.0, rng);
    CHECK(k >= 1);
    CHECK(k < 4);
  }
  CHECK_THROWS(choose_token(lg, 4, 4, 0.0, rng));
}

TEST_CASE("overlong sequences are rejected") {
  BackboneConfig c = mini();
  c.max_length = 64;
  const auto& f = fixture();
  const SequenceBuilder sb(f.records, config(1), &f.book);
  const auto s = sb.build(sb.anchors().front());
  Rng rng(1);
  ParamSet<float> p;
  const Backbone<float> model(c);
  model.init(p, rng);
  Tape<float> tape;
  Binder<float> bind(tape, p);
  CHECK_THROWS_AS(model.forward(bind, make_batch(std::vector<const TokenSequence*>{&s}, FrontEnd::Discrete)),
                  UsageError);
}
