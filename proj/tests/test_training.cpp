#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dw0/checkpoint.hpp"
#include "dw0/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace dw0;

namespace {

namespace fs = std::filesystem;

Config mini_config() {
  Config c;
  for (const char* kv : {"model.d_model=16", "model.layers=2", "model.heads=2", "model.mlp_hidden=32",
                         "model.max_length=512", "model.init_std=0.1", "expert.d_model=8", "expert.mlp_hidden=16",
                         "diffusion.hidden=16", "diffusion.time_dim=4", "seq.history=1", "stage2.history=1",
                         "train.batch=2", "train.steps=4", "train.warmup=1", "train.lr=3e-3", "data.eval_limit=4"})
    c.apply(kv);
  return c;
}

const std::vector<SceneRecord>& records() {
  static const auto r = generate_records(80, 17, ScenarioMix{});
  return r;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dw0_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string log_text(const std::vector<LossRow>& log) {
  std::ostringstream os;
  write_loss_header(os);
  for (const auto& r : log) write_loss_row(os, r);
  return os.str();
}

template <typename S>
std::map<std::string, Matrix<S>> backbone_values(const Model<S>& m) {
  std::map<std::string, Matrix<S>> out;
  for (const auto& [name, p] : m.params)
    if (name.rfind(Backbone<S>::kPrefix, 0) == 0) out[name] = p.value;
  return out;
}

}  // namespace

TEST_CASE("config: defaults, overrides, unknown keys, echo round trip") {
  Config c;
  CHECK(c.integer("model.d_model") == 128);
  CHECK(c.str("seq.front_end") == "discrete");
  CHECK_FALSE(c.flag("expert.backbone_sees_expert"));
  c.apply("train.lr = 5e-4");
  CHECK(c.real("train.lr") == 5e-4);
  CHECK_THROWS_AS(c.set("train.lrr", "1"), UsageError);
  CHECK_THROWS_AS(c.apply("no equals sign"), UsageError);
  CHECK_THROWS_AS(c.str("nope"), UsageError);
  c.set("train.steps", "12x");
  CHECK_THROWS_AS(c.integer("train.steps"), UsageError);
  c.set("train.steps", "12");
  c.set("train.freeze_backbone", "maybe");
  CHECK_THROWS_AS(c.flag("train.freeze_backbone"), UsageError);
  c.set("train.freeze_backbone", "yes");
  CHECK(c.list("sweep.sizes") == std::vector<std::string>{"1000", "10000", "50000"});

  const auto dir = scratch("config");
  c.write_echo(dir / "echo.txt");
  Config d;
  d.load_file(dir / "echo.txt");
  CHECK(d.values() == c.values());
  const auto echo = c.echo();
  CHECK(echo.find("train.lr=5e-4\n") != std::string::npos);
  // sorted keys
  std::istringstream is(echo);
  std::string prev, line;
  while (std::getline(is, line)) {
    CHECK(prev < line);
    prev = line;
  }
  {
    std::ofstream os(dir / "bad.txt");
    os << "# comment\n\nmodel.layers=3\nmodel.bogus=1\n";
  }
  Config e;
  CHECK_THROWS_AS(e.load_file(dir / "bad.txt"), UsageError);
  CHECK_THROWS_AS(e.load_file(dir / "missing.txt"), DataError);
}

TEST_CASE("run options: derived expert geometry and validation") {
  const auto o = run_options(mini_config());
  CHECK(o.model.expert.heads == 2);
  CHECK(o.model.expert.attn_width == 16);
  CHECK(o.model.expert.layers == 2);
  CHECK(o.model.denoiser.cond_dim == 16);
  auto c = mini_config();
  c.set("train.stage", "2");
  CHECK_THROWS_AS(run_options(c), UsageError);  // no stage-1 checkpoint
  c = mini_config();
  c.set("seq.vision_only", "true");
  c.set("train.alpha", "0");
  CHECK_THROWS_AS(run_options(c), UsageError);
  c = mini_config();
  c.set("train.lr", "0");
  CHECK_THROWS_AS(run_options(c), UsageError);
  c = mini_config();
  c.set("seq.front_end", "pixels");
  CHECK_THROWS(run_options(c));
}

TEST_CASE("stage-1 total recomposes from its components") {
  for (const char* fe : {"discrete", "continuous"}) {
    auto c = mini_config();
    c.set("seq.front_end", fe);
    c.set("train.alpha", "0.5");
    c.set("train.beta", "0.7");
    const auto o = run_options(c);
    auto m = create_model<double>(o, 1, records());
    const SequenceBuilder sb(records(), o.seq(1), m->book(), m->tokenizer);
    const auto anchors = sb.anchors(true);
    std::vector<TokenSequence> seqs{sb.build(anchors[0]), sb.build(anchors[5])};
    const std::vector<const TokenSequence*> sp{&seqs[0], &seqs[1]};
    Tape<double> tape;
    Binder<double> bind(tape, m->params);
    Rng noise(3);
    const auto l = stage1_loss(*m, bind, o.train, sb, sp, noise);
    REQUIRE(l.action);
    REQUIRE(l.wm);
    const double w = std::string(fe) == "discrete" ? 0.5 : 0.7;
    CHECK(l.wm_weight == w);
    CHECK(std::abs(l.total.item() - (l.action->item() + w * l.wm->item())) < 1e-6);
    CHECK(l.diffusion_skipped == 0);
  }
}

TEST_CASE("alpha = 0 logs the world-model column as n/a") {
  auto c = mini_config();
  c.set("train.alpha", "0");
  const auto o = run_options(c);
  auto m = create_model<float>(o, 1, records());
  const auto r = train(*m, o, records());
  REQUIRE(r.log.size() == 4);
  const auto text = log_text(r.log);
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    CHECK(line.find(",n/a,") != std::string::npos);
  }
  for (const auto& row : r.log) {
    CHECK_FALSE(row.wm);
    REQUIRE(row.action);
    CHECK(row.total == *row.action);
  }
}

TEST_CASE("vision-only pretraining has no action term") {
  auto c = mini_config();
  c.set("seq.vision_only", "true");
  const auto o = run_options(c);
  auto m = create_model<float>(o, 1, records());
  const auto r = train(*m, o, records());
  for (const auto& row : r.log) {
    CHECK_FALSE(row.action);
    REQUIRE(row.wm);
    CHECK(row.total == doctest::Approx(*row.wm));
  }
}

TEST_CASE("identical config and seeds give identical loss logs") {
  for (const char* fe : {"discrete", "continuous"}) {
    auto c = mini_config();
    c.set("seq.front_end", fe);
    const auto o = run_options(c);
    auto a = create_model<float>(o, 1, records());
    auto b = create_model<float>(o, 1, records());
    const auto ra = train(*a, o, records()), rb = train(*b, o, records());
    CHECK(log_text(ra.log) == log_text(rb.log));
    c.set("train.noise_seed", "77");
    c.set("train.data_seed", "78");
    const auto o2 = run_options(c);
    auto d = create_model<float>(o2, 1, records());
    CHECK(log_text(train(*d, o2, records()).log) != log_text(ra.log));
  }
}

TEST_CASE("stage 2: frozen backbone stays bitwise fixed; unfrozen backbone receives gradient") {
  auto c = mini_config();
  const auto dir = scratch("freeze");
  {
    const auto o1 = run_options(c);
    auto m1 = create_model<float>(o1, 1, records());
    train(*m1, o1, records());
    save_model(*m1, dir / "s1.ckpt");
  }
  c.set("train.stage", "2");
  c.set("train.init", (dir / "s1.ckpt").string());
  for (const char* kind : {"query", "autoregressive", "flow"}) {
    c.set("expert.kind", kind);
    c.set("train.freeze_backbone", "true");
    auto o = run_options(c);
    auto frozen = create_stage2_model<float>(o, dir / "s1.ckpt");
    const auto before = backbone_values(*frozen);
    const auto rf = train(*frozen, o, records());
    CHECK(backbone_values(*frozen) == before);
    CHECK(rf.first_backbone_grad_norm == 0.0);
    for (const auto& [name, p] : frozen->params) CHECK(p.trainable);  // flags restored

    c.set("train.freeze_backbone", "false");
    o = run_options(c);
    auto open = create_stage2_model<float>(o, dir / "s1.ckpt");
    CHECK(backbone_values(*open) == before);
    const auto ro = train(*open, o, records());
    MESSAGE(std::string(kind) << ": step-1 backbone grad norm " << ro.first_backbone_grad_norm);
    CHECK(ro.first_backbone_grad_norm > 0.0);
    CHECK(backbone_values(*open) != before);

    c.set("train.backbone_lr_scale", "0");
    o = run_options(c);
    auto scaled = create_stage2_model<float>(o, dir / "s1.ckpt");
    train(*scaled, o, records());
    CHECK(backbone_values(*scaled) == before);
    c.set("train.backbone_lr_scale", "1");
  }
}

TEST_CASE("non-finite loss aborts and writes the rescue checkpoint") {
  const auto o = run_options(mini_config());
  auto m = create_model<float>(o, 1, records());
  m->params.at("backbone.ln_f.g").value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const auto dir = scratch("diverge");
  CHECK_THROWS_AS(train(*m, o, records(), {}, dir / "last_good.ckpt"), NumericError);
  CHECK(fs::exists(dir / "last_good.ckpt"));
  CHECK_THROWS_AS(train(*m, o, records()), NumericError);
}

TEST_CASE("step callback stops early") {
  const auto o = run_options(mini_config());
  auto m = create_model<float>(o, 1, records());
  const auto r = train(*m, o, records(), [](const LossRow& row) { return row.step < 2; });
  CHECK(r.stopped_early);
  CHECK(r.log.size() == 2);
}

TEST_CASE("checkpoint round trip restores every parameter and the codebook") {
  for (const char* fe : {"discrete", "continuous"}) {
    auto c = mini_config();
    c.set("seq.front_end", fe);
    const auto o = run_options(c);
    auto m = create_model<float>(o, 1, records());
    train(*m, o, records());
    const auto dir = scratch(std::string("ckpt_") + fe);
    save_model(*m, dir / "m.ckpt");
    auto back = load_model<float>(o, 1, dir / "m.ckpt");
    REQUIRE(back->params.size() == m->params.size());
    for (const auto& [name, p] : m->params) CHECK(back->params.at(name).value == p.value);
    if (std::string(fe) == "discrete") CHECK(back->codebook.centroids == m->codebook.centroids);
    const auto ea = evaluate(*m, o, records()), eb = evaluate(*back, o, records());
    CHECK(ea.summary.ade_m == eb.summary.ade_m);
    CHECK(ea.results.size() == 4);
    // a stage-1 file lacks the expert parameters a stage-2 load needs
    auto c2 = c;
    c2.set("train.stage", "2");
    c2.set("train.init", (dir / "m.ckpt").string());
    CHECK_THROWS_AS(load_model<float>(run_options(c2), 2, dir / "m.ckpt"), DataError);
  }
}

TEST_CASE("generate_frame: discrete re-generates the anchor, continuous predicts the next frame") {
  for (const char* fe : {"discrete", "continuous"}) {
    auto c = mini_config();
    c.set("seq.front_end", fe);
    const auto o = run_options(c);
    auto m = create_model<float>(o, 1, records());
    const SequenceBuilder sb(records(), o.seq(1), m->book());
    const auto anchor = sb.anchors(true).front();
    const auto g1 = generate_frame(*m, o, records(), anchor, 5);
    const auto g2 = generate_frame(*m, o, records(), anchor, 5);
    CHECK(g1.generated == g2.generated);
    if (std::string(fe) == "discrete") {
      CHECK(g1.method == "ar-tokens");
      CHECK(g1.reference == records()[anchor].image);
    } else {
      CHECK(g1.method == "diffusion");
      CHECK(g1.reference == records()[*sb.next_frame(anchor)].image);
    }
  }
}

TEST_CASE("loss log and sweep CSV round trips; medians") {
  const auto dir = scratch("csv");
  std::vector<LossRow> log(3);
  for (int i = 0; i < 3; ++i) {
    log[i].step = i + 1;
    log[i].lr = 1e-3 * (i + 1);
    log[i].total = 2.5 - i;
    log[i].action = 1.25;
    log[i].grad_norm = 0.5;
  }
  log[1].wm = 0.75;
  {
    std::ofstream os(dir / "loss.csv");
    os << log_text(log);
  }
  const auto back = read_loss_log(dir / "loss.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[0].total == 2.5);
  CHECK_FALSE(back[0].wm);
  CHECK(*back[1].wm == 0.75);

  std::vector<SweepRow> rows;
  for (double ade : {3.0, 1.0, 2.0, std::nan("")}) {
    SweepRow r;
    r.size = 1000;
    r.frontend = "discrete";
    r.variant = "world_model";
    r.ade_m = ade;
    rows.push_back(r);
  }
  {
    std::ofstream os(dir / "sweep.csv");
    write_sweep_header(os);
    for (const auto& r : rows) write_sweep_row(os, r);
  }
  const auto rb = read_sweep_csv(dir / "sweep.csv");
  REQUIRE(rb.size() == 4);
  CHECK(std::isnan(rb[3].ade_m));
  const auto med = sweep_medians(rb);
  REQUIRE(med.size() == 1);
  CHECK(med[0].ade_m == 2.0);
  CHECK(med[0].seeds == 3);
}

TEST_CASE("sweep on a tiny config writes one row per cell") {
  auto c = mini_config();
  for (const char* kv : {"sweep.sizes=60,80", "sweep.seeds=0", "sweep.steps=2", "sweep.history=1",
                         "sweep.eval_frames=60"})
    c.apply(kv);
  const auto dir = scratch("sweep");
  const auto rows = run_sweep(c, dir);
  CHECK(rows.size() == 8);
  const auto back = read_sweep_csv(dir / "sweep.csv");
  REQUIRE(back.size() == 8);
  for (const auto& r : back) {
    CHECK(std::isfinite(r.ade_m));
    CHECK(r.decoder == "backbone");
    CHECK(fs::exists(dir / "cells" / (std::to_string(r.size) + "_" + r.frontend + "_" + r.variant + "_s0") / "loss.csv"));
  }
  // the action-only cells log no world-model term
  const auto wm_off = read_loss_log(dir / "cells" / "60_discrete_action_only_s0" / "loss.csv");
  for (const auto& r : wm_off) CHECK_FALSE(r.wm);
  CHECK(fs::exists(dir / "sweep_summary.txt"));
  c.set("sweep.variants", "everything");
  CHECK_THROWS_AS(run_sweep(c, scratch("sweep_bad")), UsageError);
}

TEST_CASE("ablation variants: vision-only sequences carry no action tokens") {
  SequenceConfig sc;
  sc.history = 6;
  sc.vision_only = true;
  std::vector<Image> imgs;
  for (const auto& r : records()) imgs.push_back(r.image);
  const auto book = fit_codebook(imgs, 0);
  const SequenceBuilder sb(records(), sc, &book);
  const auto s = sb.build(sb.anchors().front());
  for (auto t : s.tags) CHECK(t != Modality::Action);
  for (int id : s.ids) CHECK_FALSE(VocabularyLayout::is_action(id));
  CHECK(s.final_action_begin == -1);

  auto c = mini_config();
  for (const char* kv : {"ablate.variants=1V,1VA@2s", "ablate.frames=80", "ablate.stage1_steps=2",
                         "ablate.stage2_steps=2", "sweep.eval_frames=60"})
    c.apply(kv);
  const auto dir = scratch("ablate");
  const auto rows = run_ablations(c, dir);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].variant == "1V");
  CHECK(rows[1].variant == "1VA@2s");
  for (const auto& r : rows) {
    CHECK(r.decoder == "query");
    CHECK(std::isfinite(r.ade_m));
  }
  const auto s1 = read_loss_log(dir / "cells" / "1V_s0" / "loss.csv");
  for (const auto& r : s1) CHECK_FALSE(r.action);
  Config echo;
  echo.load_file(dir / "cells" / "1VA@2s_s0" / "config.txt");
  CHECK(echo.str("seq.interval") == "2");
  c.set("ablate.variants", "6X");
  CHECK_THROWS_AS(run_ablations(c, scratch("ablate_bad")), UsageError);
}
