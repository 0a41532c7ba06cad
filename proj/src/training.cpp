#include "dw0/training.hpp"

#include "dw0/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace dw0 {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(what + ": expected a non-negative integer, got '" + s + "'");
}

// Fisher-Yates on top of Rng::below, so orders are platform independent.
void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::vector<const TokenSequence*> pointers(const std::vector<TokenSequence>& seqs) {
  std::vector<const TokenSequence*> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(&s);
  return out;
}

std::string scenario_id(const SceneRecord& r) {
  return std::to_string(r.clip_id) + ":" + std::to_string(r.frame_index);
}

std::vector<std::size_t> spread(const std::vector<std::size_t>& anchors, std::size_t limit) {
  if (limit == 0 || anchors.size() <= limit) return anchors;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < limit; ++i) out.push_back(anchors[i * anchors.size() / limit]);
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

// ---- options ------------------------------------------------------------------

void RunOptions::validate() const {
  model.backbone.validate();
  stage1_seq.validate();
  stage2_seq.validate();
  if (stage2_seq.vision_only) throw UsageError("stage 2 needs action tokens in its context");
  if (train.stage != 1 && train.stage != 2) throw UsageError("train.stage must be 1 or 2");
  if (train.steps < 1 || train.batch < 1) throw UsageError("train.steps and train.batch must be positive");
  if (!(train.lr > 0)) throw UsageError("train.lr must be positive");
  if (train.alpha < 0 || train.beta < 0) throw UsageError("loss weights must be non-negative");
  if (stage1_seq.vision_only) {
    const double w = front_end() == FrontEnd::Discrete ? train.alpha : train.beta;
    if (w == 0) throw UsageError("a vision-only run needs a positive world-model weight");
  }
  if (train.stage == 2) {
    if (train.init_checkpoint.empty()) throw UsageError("stage 2 requires train.init (a stage-1 checkpoint)");
    model.expert.validate(model.backbone);
  }
  if (model.denoiser.cond_dim != model.backbone.d_model) throw UsageError("denoiser conditioning width mismatch");
  if (model.diffusion_steps < 2) throw UsageError("diffusion.steps must be at least 2");
}

RunOptions run_options(const Config& c) {
  RunOptions o;
  auto& b = o.model.backbone;
  b.d_model = c.integer("model.d_model");
  b.layers = c.integer("model.layers");
  b.heads = c.integer("model.heads");
  b.mlp_hidden = c.integer("model.mlp_hidden");
  b.max_length = c.integer("model.max_length");
  b.init_std = c.real("model.init_std");
  b.validate();

  auto& e = o.model.expert;
  e.kind = decoder_from_string(c.str("expert.kind"));
  e.d_model = c.integer("expert.d_model");
  e.mlp_hidden = c.integer("expert.mlp_hidden");
  e.queries = c.integer("expert.queries");
  e.flow_steps = c.integer("expert.flow_steps");
  e.init_std = c.real("expert.init_std");
  e.backbone_sees_expert = c.flag("expert.backbone_sees_expert");
  e.heads = b.heads;
  e.attn_width = b.d_model;
  e.layers = b.layers;
  e.max_tokens = kPrefixTokens + std::max(e.queries, kActionTokens);

  o.model.denoiser.hidden = c.integer("diffusion.hidden");
  o.model.denoiser.time_dim = c.integer("diffusion.time_dim");
  o.model.denoiser.cond_dim = b.d_model;
  o.model.diffusion_steps = c.integer("diffusion.steps");
  o.model.gamma = c.real("tokenizer.gamma");
  o.model.codebook_seed = parse_u64(c.str("data.codebook_seed"), "data.codebook_seed");

  o.stage1_seq.history = c.integer("seq.history");
  o.stage1_seq.interval_s = c.real("seq.interval");
  o.stage1_seq.front_end = front_end_from_string(c.str("seq.front_end"));
  o.stage1_seq.vision_only = c.flag("seq.vision_only");
  o.stage2_seq.history = c.integer("stage2.history");
  o.stage2_seq.interval_s = c.real("stage2.interval");
  o.stage2_seq.front_end = o.stage1_seq.front_end;

  auto& t = o.train;
  t.stage = c.integer("train.stage");
  t.steps = c.integer("train.steps");
  t.batch = c.integer("train.batch");
  t.lr = c.real("train.lr");
  t.warmup = c.integer("train.warmup");
  t.lr_floor = c.real("train.lr_floor");
  t.adamw.weight_decay = c.real("train.weight_decay");
  t.adamw.clip_norm = c.real("train.clip_norm");
  t.backbone_lr_scale = c.real("train.backbone_lr_scale");
  t.freeze_backbone = c.flag("train.freeze_backbone");
  t.alpha = c.real("train.alpha");
  t.beta = c.real("train.beta");
  t.anchor_limit = static_cast<std::size_t>(c.int64("data.anchor_limit"));
  t.init_seed = parse_u64(c.str("train.seed"), "train.seed");
  t.data_seed = parse_u64(c.str("train.data_seed"), "train.data_seed");
  t.noise_seed = parse_u64(c.str("train.noise_seed"), "train.noise_seed");
  t.init_checkpoint = c.str("train.init");

  o.eval_limit = static_cast<std::size_t>(c.int64("data.eval_limit"));
  o.eval_seed = parse_u64(c.str("eval.seed"), "eval.seed");
  o.eval_temperature = c.real("eval.temperature");
  o.validate();
  return o;
}

// ---- model ----------------------------------------------------------------------

template <typename Scalar>
Model<Scalar>::Model(const ModelOptions& opts, FrontEnd fe, int stage_)
    : options(opts),
      front_end(fe),
      stage(stage_),
      backbone(opts.backbone),
      schedule(NoiseSchedule::standard(opts.diffusion_steps)) {
  tokenizer.gamma = opts.gamma;
  if (stage == 2) expert.emplace(backbone, opts.expert);
  if (fe == FrontEnd::Continuous) denoiser.emplace(opts.denoiser);
}

template <typename Scalar>
void Model<Scalar>::freeze_backbone(bool frozen) {
  for (auto& [name, p] : params)
    if (name.rfind(Backbone<Scalar>::kPrefix, 0) == 0) p.trainable = !frozen;
}

template <typename Scalar>
std::unique_ptr<Model<Scalar>> create_model(const RunOptions& o, int stage,
                                            const std::vector<SceneRecord>& codebook_source) {
  auto m = std::make_unique<Model<Scalar>>(o.model, o.front_end(), stage);
  Rng rng(o.train.init_seed);
  m->backbone.init(m->params, rng);
  if (m->denoiser) m->denoiser->init(m->params, rng);
  if (m->expert) m->expert->init(m->params, rng);
  if (o.front_end() == FrontEnd::Discrete) {
    if (codebook_source.empty()) throw DataError("no images to fit the visual codebook on");
    std::vector<Image> imgs;
    imgs.reserve(codebook_source.size());
    for (const auto& r : codebook_source) imgs.push_back(r.image);
    m->codebook = fit_codebook(imgs, o.model.codebook_seed);
  }
  return m;
}

namespace {

template <typename Scalar>
void restore(Model<Scalar>& m, const std::vector<NamedTensor>& tensors, const std::string& only_prefix) {
  std::size_t expected = 0;
  for (const auto& [name, p] : m.params)
    if (name.rfind(only_prefix, 0) == 0) ++expected;
  std::size_t loaded = 0;
  for (const auto& t : tensors) {
    if (t.name.rfind(only_prefix, 0) != 0 || !m.params.contains(t.name)) continue;
    auto& p = m.params.at(t.name);
    if (p.shape != t.shape)
      throw DataError("checkpoint tensor " + t.name + " has shape " + shape_str(t.shape) + ", expected " +
                      shape_str(p.shape));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(t.values[static_cast<std::size_t>(i)]);
    ++loaded;
  }
  if (loaded != expected)
    throw DataError("checkpoint provides " + std::to_string(loaded) + " of " + std::to_string(expected) +
                    " parameters" + (only_prefix.empty() ? "" : " under " + only_prefix));
  if (m.front_end == FrontEnd::Discrete) m.codebook = import_codebook(tensors);
}

}  // namespace

template <typename Scalar>
std::unique_ptr<Model<Scalar>> create_stage2_model(const RunOptions& o, const std::filesystem::path& stage1) {
  auto m = std::make_unique<Model<Scalar>>(o.model, o.front_end(), 2);
  Rng rng(o.train.init_seed);
  m->backbone.init(m->params, rng);
  if (m->denoiser) m->denoiser->init(m->params, rng);
  m->expert->init(m->params, rng);
  restore(*m, read_checkpoint(stage1), Backbone<Scalar>::kPrefix);
  return m;
}

template <typename Scalar>
std::unique_ptr<Model<Scalar>> load_model(const RunOptions& o, int stage, const std::filesystem::path& path) {
  auto m = std::make_unique<Model<Scalar>>(o.model, o.front_end(), stage);
  Rng rng(0);
  m->backbone.init(m->params, rng);
  if (m->denoiser) m->denoiser->init(m->params, rng);
  if (m->expert) m->expert->init(m->params, rng);
  restore(*m, read_checkpoint(path), "");
  return m;
}

template <typename Scalar>
void save_model(const Model<Scalar>& m, const std::filesystem::path& path) {
  auto tensors = export_params(m.params);
  if (m.front_end == FrontEnd::Discrete)
    for (auto& t : export_codebook(m.codebook)) tensors.push_back(std::move(t));
  write_checkpoint(path, tensors);
}

// ---- objectives -----------------------------------------------------------------

template <typename Scalar>
BatchLoss<Scalar> stage1_loss(Model<Scalar>& m, Binder<Scalar>& bind, const TrainOptions& t,
                              const SequenceBuilder& builder, const std::vector<const TokenSequence*>& seqs,
                              Rng& noise) {
  const bool vision_only = builder.config().vision_only;
  const auto act = m.backbone.forward(bind, make_batch(seqs, m.front_end));
  BatchLoss<Scalar> out;
  if (!vision_only) out.action = loss_action(m.backbone, bind, act, seqs);
  if (m.front_end == FrontEnd::Discrete && t.alpha > 0) {
    out.wm = loss_wm_ar(m.backbone, bind, act, seqs);
    out.wm_weight = t.alpha;
  } else if (m.front_end == FrontEnd::Continuous && t.beta > 0) {
    const auto targets = diffusion_targets(builder, seqs);
    out.diffusion_skipped = targets.skipped;
    out.wm = loss_wm_diff(*m.denoiser, bind, m.schedule, act, seqs, targets, noise);
    out.wm_weight = t.beta;
  }
  if (out.action && out.wm)
    out.total = add(*out.action, scale(*out.wm, static_cast<Scalar>(out.wm_weight)));
  else if (out.action)
    out.total = *out.action;
  else if (out.wm)
    out.total = scale(*out.wm, static_cast<Scalar>(out.wm_weight));
  else
    throw UsageError("empty objective");
  return out;
}

template <typename Scalar>
Tensor<Scalar> stage2_loss(Model<Scalar>& m, Tape<Scalar>& tape, const std::vector<const TokenSequence*>& seqs,
                           Rng& noise) {
  if (!m.expert) throw UsageError("stage-2 loss needs an action expert");
  ExpertSession<Scalar> session(*m.expert, m.params, tape, make_batch(seqs, m.front_end, seqs.front()->context_length));
  switch (m.expert->config().kind) {
    case DecoderKind::Query: return query_loss(*m.expert, session, seqs);
    case DecoderKind::Autoregressive: return ar_expert_loss(*m.expert, session, seqs);
    case DecoderKind::Flow: return flow_loss(*m.expert, session, seqs, noise);
  }
  throw UsageError("unknown decoder");
}

// ---- training loop --------------------------------------------------------------

template <typename Scalar>
TrainResult train(Model<Scalar>& m, const RunOptions& o, const std::vector<SceneRecord>& records,
                  const StepCallback& on_step, const std::filesystem::path& rescue) {
  const auto t0 = Clock::now();
  const auto& t = o.train;
  const SequenceBuilder builder(records, o.seq(m.stage), m.book(), m.tokenizer);
  auto anchors = builder.anchors();
  if (t.anchor_limit > 0 && anchors.size() > t.anchor_limit) anchors.resize(t.anchor_limit);
  if (anchors.empty()) throw DataError("no usable training anchors (clips too short for the sequence config)");

  m.freeze_backbone(m.stage == 2 && t.freeze_backbone);
  auto opt = make_optimizer_state(m.params, t.lr, t.adamw);
  const int warmup = std::min(t.warmup, std::max(0, t.steps - 1));

  Rng order_rng(t.data_seed), noise(t.noise_seed);
  std::vector<std::size_t> order(anchors.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, order_rng);
  std::size_t cursor = 0;

  TrainResult result;
  for (int step = 1; step <= t.steps; ++step) {
    std::vector<TokenSequence> seqs;
    for (int b = 0; b < t.batch; ++b) {
      if (cursor == order.size()) {
        shuffle(order, order_rng);
        cursor = 0;
      }
      seqs.push_back(builder.build(anchors[order[cursor++]]));
    }
    const auto sp = pointers(seqs);
    m.params.zero_grad();
    Tape<Scalar> tape;
    Binder<Scalar> bind(tape, m.params);
    LossRow row;
    row.step = step;
    auto diverge = [&](const std::string& what) {
      if (!rescue.empty()) save_model(m, rescue);
      throw NumericError(what + " at step " + std::to_string(step) +
                         (rescue.empty() ? std::string() : "; last good parameters in " + rescue.string()));
    };
    Tensor<Scalar> total;
    std::string failure;
    try {
      if (m.stage == 1) {
        const auto l = stage1_loss(m, bind, t, builder, sp, noise);
        total = l.total;
        if (l.action) row.action = static_cast<double>(l.action->item());
        if (l.wm) row.wm = static_cast<double>(l.wm->item());
        result.diffusion_skipped += l.diffusion_skipped;
      } else {
        total = stage2_loss(m, tape, sp, noise);
        row.action = static_cast<double>(total.item());
      }
      row.total = static_cast<double>(total.item());
      if (!std::isfinite(row.total))
        failure = "non-finite loss";
      else
        tape.backward(total);
    } catch (const NumericError& e) {
      failure = e.what();
    }
    if (!failure.empty()) diverge(failure);
    if (step == 1) {
      double sq = 0;
      for (const auto& [name, p] : m.params)
        if (name.rfind(Backbone<Scalar>::kPrefix, 0) == 0 && p.grad.size()) sq += p.grad.template cast<double>().squaredNorm();
      result.first_backbone_grad_norm = std::sqrt(sq);
    }
    row.lr = cosine_lr(step, warmup, t.steps, t.lr, t.lr_floor);
    // per-group rate: backbone parameters scaled relative to the rest
    std::map<std::string, Matrix<Scalar>> saved;
    if (t.backbone_lr_scale != 1.0)
      for (auto& [name, p] : m.params)
        if (name.rfind(Backbone<Scalar>::kPrefix, 0) == 0 && p.trainable) saved[name] = p.value;
    const auto report = optimizer_step(m.params, opt, row.lr);
    row.grad_norm = report.grad_norm;
    if (!report.applied) diverge("non-finite gradient");
    for (auto& [name, before] : saved) {
      auto& p = m.params.at(name).value;
      p = before + static_cast<Scalar>(t.backbone_lr_scale) * (p - before);
    }
    result.log.push_back(row);
    if (on_step && !on_step(row)) {
      result.stopped_early = true;
      break;
    }
  }
  m.freeze_backbone(false);
  result.wallclock_s = seconds_since(t0);
  return result;
}

// ---- evaluation -----------------------------------------------------------------

template <typename Scalar>
EvalOutput evaluate(Model<Scalar>& m, const RunOptions& o, const std::vector<SceneRecord>& records) {
  const auto t0 = Clock::now();
  const SequenceBuilder builder(records, o.seq(m.stage), m.book(), m.tokenizer);
  const auto anchors = spread(builder.anchors(), o.eval_limit);
  if (anchors.empty()) throw DataError("no evaluable anchors in the evaluation data");
  EvalOutput out;
  auto add = [&](const TokenSequence& s, const Trajectory& pred) {
    const auto& rec = records[s.anchor];
    out.results.push_back(evaluate_scenario(scenario_id(rec), pred, rec));
  };
  if (!m.expert) {
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto s = builder.build(anchors[i]);
      DecodeOptions d;
      d.temperature = o.eval_temperature;
      d.seed = Rng::derive(o.eval_seed, i);
      const auto ids = generate_action_tokens(m.backbone, m.params, s, m.front_end, d);
      add(s, m.tokenizer.detokenize(ids));
    }
  } else {
    constexpr std::size_t kChunk = 16;
    for (std::size_t i0 = 0; i0 < anchors.size(); i0 += kChunk) {
      std::vector<TokenSequence> seqs;
      for (std::size_t i = i0; i < std::min(anchors.size(), i0 + kChunk); ++i) seqs.push_back(builder.build(anchors[i]));
      const auto sp = pointers(seqs);
      Tape<Scalar> tape;
      tape.set_grad_enabled(false);
      ExpertSession<Scalar> session(*m.expert, m.params, tape, make_batch(sp, m.front_end, seqs[0].context_length));
      std::vector<Trajectory> preds;
      switch (m.expert->config().kind) {
        case DecoderKind::Query: preds = query_decode(*m.expert, session, sp); break;
        case DecoderKind::Autoregressive: {
          DecodeOptions d;
          d.temperature = o.eval_temperature;
          d.seed = Rng::derive(o.eval_seed, i0);
          for (const auto& ids : ar_expert_decode(*m.expert, session, sp, d)) preds.push_back(m.tokenizer.detokenize(ids));
          break;
        }
        case DecoderKind::Flow: preds = flow_sample(*m.expert, session, sp, Rng::derive(o.eval_seed, i0)); break;
      }
      for (std::size_t j = 0; j < seqs.size(); ++j) add(seqs[j], preds[j]);
    }
  }
  out.summary = aggregate(out.results);
  out.wallclock_s = seconds_since(t0);
  return out;
}

template <typename Scalar>
GeneratedFrame generate_frame(Model<Scalar>& m, const RunOptions& o, const std::vector<SceneRecord>& records,
                              std::size_t record, std::uint64_t seed) {
  if (record >= records.size()) throw DataError("record index " + std::to_string(record) + " out of range");
  const SequenceBuilder builder(records, o.seq(1), m.book(), m.tokenizer);
  const auto s = builder.build(record);
  GeneratedFrame g;
  if (m.front_end == FrontEnd::Discrete) {
    DecodeOptions d;
    d.temperature = 1.0;
    d.seed = seed;
    const auto ids = generate_visual_tokens(m.backbone, m.params, s, m.front_end, d);
    g.generated = decode_tokens(m.codebook, ids);
    g.reference = records[record].image;
    g.method = "ar-tokens";
    return g;
  }
  const auto next = builder.next_frame(record);
  if (!next) throw DataError("record " + std::to_string(record) + " is the last frame of its clip; nothing to predict");
  Tape<Scalar> tape;
  tape.set_grad_enabled(false);
  Binder<Scalar> bind(tape, m.params);
  const std::vector<const TokenSequence*> sp{&s};
  const auto act = m.backbone.forward(bind, make_batch(sp, m.front_end));
  const int which[1] = {0};
  const auto cond = pool_features(tape, act, sp, which);
  g.generated = sample_future(*m.denoiser, m.params, m.schedule, cond.visual.value(), cond.action.value(), seed).front();
  g.reference = records[*next].image;
  g.method = "diffusion";
  return g;
}

// ---- CSV ------------------------------------------------------------------------

void write_loss_header(std::ostream& os) { os << "step,lr,loss_total,loss_action,loss_wm,grad_norm\n"; }

void write_loss_row(std::ostream& os, const LossRow& r) {
  os << r.step << ',' << fmt(r.lr) << ',' << fmt(r.total) << ',' << (r.action ? fmt(*r.action) : "n/a") << ','
     << (r.wm ? fmt(*r.wm) : "n/a") << ',' << fmt(r.grad_norm) << '\n';
}

std::vector<LossRow> read_loss_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "step,lr,loss_total,loss_action,loss_wm,grad_norm") throw DataError(path.string() + ": bad header");
  std::vector<LossRow> rows;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string f[6];
    for (auto& x : f)
      if (!std::getline(ss, x, ',')) throw DataError(path.string() + ": short row");
    LossRow r;
    r.step = std::stoll(f[0]);
    r.lr = std::stod(f[1]);
    r.total = std::stod(f[2]);
    if (f[3] != "n/a") r.action = std::stod(f[3]);
    if (f[4] != "n/a") r.wm = std::stod(f[4]);
    r.grad_norm = std::stod(f[5]);
    rows.push_back(r);
  }
  return rows;
}

void write_sweep_header(std::ostream& os) {
  os << "size,frontend,variant,decoder,seed,ade_m,collision_rate,pdms_analog,wallclock_s\n";
}

void write_sweep_row(std::ostream& os, const SweepRow& r) {
  os << r.size << ',' << r.frontend << ',' << r.variant << ',' << r.decoder << ',' << r.seed << ',' << fmt(r.ade_m)
     << ',' << fmt(r.collision_rate) << ',' << fmt(r.pdms_analog) << ',' << fmt(r.wallclock_s) << '\n';
}

std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "size,frontend,variant,decoder,seed,ade_m,collision_rate,pdms_analog,wallclock_s")
    throw DataError(path.string() + ": bad header");
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string f[9];
    for (auto& x : f)
      if (!std::getline(ss, x, ',')) throw DataError(path.string() + ": short row");
    SweepRow r;
    r.size = std::stoull(f[0]);
    r.frontend = f[1];
    r.variant = f[2];
    r.decoder = f[3];
    r.seed = std::stoull(f[4]);
    r.ade_m = std::stod(f[5]);
    r.collision_rate = std::stod(f[6]);
    r.pdms_analog = std::stod(f[7]);
    r.wallclock_s = std::stod(f[8]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<SweepMedian> sweep_medians(const std::vector<SweepRow>& rows) {
  std::map<std::tuple<std::size_t, std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.size, r.frontend, r.variant}].push_back(r.ade_m);
  std::vector<SweepMedian> out;
  for (auto& [key, v] : groups) {
    std::vector<double> finite;
    for (double x : v)
      if (std::isfinite(x)) finite.push_back(x);
    SweepMedian m;
    std::tie(m.size, m.frontend, m.variant) = key;
    m.seeds = static_cast<int>(finite.size());
    if (finite.empty()) {
      m.ade_m = std::numeric_limits<double>::quiet_NaN();
    } else {
      std::sort(finite.begin(), finite.end());
      const auto n = finite.size();
      m.ade_m = n % 2 ? finite[n / 2] : 0.5 * (finite[n / 2 - 1] + finite[n / 2]);
    }
    out.push_back(m);
  }
  return out;
}

// ---- drivers --------------------------------------------------------------------

std::vector<SceneRecord> load_or_generate(const std::filesystem::path& path, std::size_t frames, std::uint64_t seed,
                                          const ScenarioMix& mix) {
  if (std::filesystem::exists(path)) {
    const auto problems = validate_dataset_file(path);
    if (!problems.empty()) throw DataError(path.string() + ": " + problems.front());
    auto records = read_dataset(path);
    if (records.size() != frames)
      throw DataError(path.string() + " holds " + std::to_string(records.size()) + " frames, expected " +
                      std::to_string(frames));
    return records;
  }
  std::filesystem::create_directories(path.parent_path());
  return generate_dataset(frames, seed, mix, path);
}

namespace {

std::vector<SceneRecord> read_checked(const std::string& path, const std::string& key) {
  if (path.empty()) throw UsageError(key + " is not set");
  const auto problems = validate_dataset_file(path);
  if (!problems.empty()) throw DataError(path + ": " + problems.front());
  return read_dataset(path);
}

template <typename Scalar>
RunSummary run_train_impl(const Config& config, const std::filesystem::path& out) {
  const auto o = run_options(config);
  const auto train_records = read_checked(config.str("data.train"), "data.train");
  std::filesystem::create_directories(out);
  std::unique_ptr<Model<Scalar>> model = o.train.stage == 1 ? create_model<Scalar>(o, 1, train_records)
                                                            : create_stage2_model<Scalar>(o, o.train.init_checkpoint);
  std::ofstream log(out / "loss.csv");
  if (!log) throw DataError("cannot write " + (out / "loss.csv").string());
  write_loss_header(log);
  RunSummary s;
  s.train = train(*model, o, train_records,
                  [&](const LossRow& r) {
                    write_loss_row(log, r);
                    if (r.step % 50 == 0) log.flush();
                    return true;
                  },
                  out / "last_good.ckpt");
  log.flush();
  save_model(*model, out / "model.ckpt");
  if (!config.str("data.eval").empty()) {
    const auto eval_records = read_checked(config.str("data.eval"), "data.eval");
    const auto e = evaluate(*model, o, eval_records);
    write_eval_report(out / "eval.csv", e.results);
    s.eval = e.summary;
  }
  return s;
}

template <typename Scalar>
EvalSummary run_eval_impl(const Config& config, const std::filesystem::path& out) {
  const auto o = run_options(config);
  const auto ckpt = config.str("eval.checkpoint");
  if (ckpt.empty()) throw UsageError("eval.checkpoint is not set");
  const auto records = read_checked(config.str("data.eval"), "data.eval");
  auto model = load_model<Scalar>(o, o.train.stage, ckpt);
  const auto e = evaluate(*model, o, records);
  std::filesystem::create_directories(out);
  write_eval_report(out / "eval.csv", e.results);
  return e.summary;
}

bool use_double(const Config& c) {
  const auto& p = c.str("model.precision");
  if (p == "float") return false;
  if (p == "double") return true;
  throw UsageError("model.precision must be float or double");
}

ScenarioMix mix_of(const Config& c) { return ScenarioMix::parse(c.str("gen.mix")); }

std::vector<std::uint64_t> seeds_of(const Config& c, const std::string& key) {
  std::vector<std::uint64_t> out;
  for (const auto& s : c.list(key)) out.push_back(parse_u64(s, key));
  if (out.empty()) throw UsageError(key + " is empty");
  return out;
}

template <typename Scalar>
SweepRow run_cell(const Config& cell, const std::vector<SceneRecord>& train_records,
                  const std::vector<SceneRecord>& eval_records, const std::filesystem::path& dir, int stage2_steps) {
  const auto t0 = Clock::now();
  std::filesystem::create_directories(dir);
  cell.write_echo(dir / "config.txt");
  auto o = run_options(cell);
  auto model = create_model<Scalar>(o, 1, train_records);
  {
    std::ofstream log(dir / "loss.csv");
    write_loss_header(log);
    train(*model, o, train_records, [&](const LossRow& r) {
      write_loss_row(log, r);
      return true;
    }, dir / "last_good.ckpt");
  }
  save_model(*model, dir / "stage1.ckpt");
  SweepRow row;
  if (stage2_steps > 0) {
    o.train.stage = 2;
    o.train.steps = stage2_steps;
    o.train.init_checkpoint = (dir / "stage1.ckpt").string();
    model = create_stage2_model<Scalar>(o, dir / "stage1.ckpt");
    std::ofstream log(dir / "loss_stage2.csv");
    write_loss_header(log);
    train(*model, o, train_records, [&](const LossRow& r) {
      write_loss_row(log, r);
      return true;
    }, dir / "last_good.ckpt");
    save_model(*model, dir / "stage2.ckpt");
    row.decoder = to_string(o.model.expert.kind);
  } else {
    row.decoder = "backbone";
  }
  const auto e = evaluate(*model, o, eval_records);
  write_eval_report(dir / "eval.csv", e.results);
  row.ade_m = e.summary.ade_m;
  row.collision_rate = e.summary.collision_rate;
  row.pdms_analog = e.summary.pdms;
  row.wallclock_s = seconds_since(t0);
  return row;
}

SweepRow failed_row(const SweepRow& base) {
  SweepRow r = base;
  r.ade_m = r.collision_rate = r.pdms_analog = std::numeric_limits<double>::quiet_NaN();
  return r;
}

}  // namespace

GeneratedFrame run_generate(const Config& config, const std::filesystem::path& out) {
  const auto o = run_options(config);
  const auto ckpt = config.str("eval.checkpoint");
  if (ckpt.empty()) throw UsageError("eval.checkpoint is not set");
  const auto records = read_checked(config.str("data.eval"), "data.eval");
  const auto record = static_cast<std::size_t>(config.int64("generate.record"));
  const auto seed = parse_u64(config.str("generate.seed"), "generate.seed");
  auto run = [&](auto& m) {
    const auto anchors = SequenceBuilder(records, o.seq(1), m.book(), m.tokenizer).anchors(true);
    if (record >= anchors.size())
      throw DataError("generate.record " + std::to_string(record) + " out of range (" + std::to_string(anchors.size()) +
                      " usable frames)");
    return generate_frame(m, o, records, anchors[record], seed);
  };
  GeneratedFrame g;
  if (use_double(config)) {
    g = run(*load_model<double>(o, 1, ckpt));
  } else {
    g = run(*load_model<float>(o, 1, ckpt));
  }
  std::filesystem::create_directories(out);
  write_image_dump(out / "generated.dw0i", g.generated);
  write_image_dump(out / "reference.dw0i", g.reference);
  return g;
}

RunSummary run_train(const Config& config, const std::filesystem::path& out) {
  return use_double(config) ? run_train_impl<double>(config, out) : run_train_impl<float>(config, out);
}

EvalSummary run_eval(const Config& config, const std::filesystem::path& out) {
  return use_double(config) ? run_eval_impl<double>(config, out) : run_eval_impl<float>(config, out);
}

std::vector<SweepRow> run_sweep(const Config& config, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  const auto mix = mix_of(config);
  const auto data_seed = parse_u64(config.str("sweep.data_seed"), "sweep.data_seed");
  const auto eval_records =
      load_or_generate(out / "data" / "eval.dw0d", static_cast<std::size_t>(config.int64("sweep.eval_frames")),
                       Rng::derive(data_seed, 999999), mix);
  std::vector<std::size_t> sizes;
  for (const auto& s : config.list("sweep.sizes")) sizes.push_back(parse_u64(s, "sweep.sizes"));
  const auto seeds = seeds_of(config, "sweep.seeds");
  std::ofstream csv(out / "sweep.csv");
  if (!csv) throw DataError("cannot write " + (out / "sweep.csv").string());
  write_sweep_header(csv);
  std::ofstream errors(out / "sweep_errors.txt");
  std::vector<SweepRow> rows;
  for (const auto size : sizes) {
    const auto train_records = load_or_generate(out / "data" / ("train_" + std::to_string(size) + ".dw0d"), size,
                                                Rng::derive(data_seed, size), mix);
    for (const auto& fe : config.list("sweep.frontends")) {
      for (const auto& variant : config.list("sweep.variants")) {
        if (variant != "action_only" && variant != "world_model")
          throw UsageError("sweep variant must be action_only or world_model, got '" + variant + "'");
        for (const auto seed : seeds) {
          SweepRow base;
          base.size = size;
          base.frontend = fe;
          base.variant = variant;
          base.seed = seed;
          base.decoder = "backbone";
          Config cell = config;
          cell.set("train.stage", "1");
          cell.set("seq.front_end", fe);
          cell.set("seq.history", config.str("sweep.history"));
          cell.set("seq.vision_only", "false");
          cell.set("train.steps", config.str("sweep.steps"));
          cell.set("train.alpha", variant == "world_model" ? "1.0" : "0");
          cell.set("train.beta", variant == "world_model" ? "1.0" : "0");
          cell.set("train.seed", std::to_string(seed));
          cell.set("train.data_seed", std::to_string(Rng::derive(seed, 1)));
          cell.set("train.noise_seed", std::to_string(Rng::derive(seed, 2)));
          const std::string name = std::to_string(size) + "_" + fe + "_" + variant + "_s" + std::to_string(seed);
          SweepRow row;
          try {
            row = use_double(cell) ? run_cell<double>(cell, train_records, eval_records, out / "cells" / name, 0)
                                   : run_cell<float>(cell, train_records, eval_records, out / "cells" / name, 0);
            row.size = size;
            row.frontend = fe;
            row.variant = variant;
            row.seed = seed;
          } catch (const UsageError&) {
            throw;
          } catch (const std::exception& e) {
            row = failed_row(base);
            errors << name << ": " << e.what() << '\n';
            errors.flush();
          }
          write_sweep_row(csv, row);
          csv.flush();
          std::cerr << "sweep " << name << ": ade " << row.ade_m << " m, collision " << row.collision_rate << ", "
                    << row.wallclock_s << " s\n";
          rows.push_back(row);
        }
      }
    }
  }
  std::ofstream summary(out / "sweep_summary.txt");
  summary << "median ADE over seeds (m)\n";
  for (const auto& m : sweep_medians(rows))
    summary << m.size << ' ' << m.frontend << ' ' << m.variant << ' ' << fmt(m.ade_m) << " (" << m.seeds
            << " seeds)\n";
  return rows;
}

std::vector<SweepRow> run_ablations(const Config& config, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  const auto mix = mix_of(config);
  const auto frames = static_cast<std::size_t>(config.int64("ablate.frames"));
  const auto data_seed = parse_u64(config.str("sweep.data_seed"), "sweep.data_seed");
  const auto train_records =
      load_or_generate(out / "data" / ("train_" + std::to_string(frames) + ".dw0d"), frames, Rng::derive(data_seed, frames), mix);
  const auto eval_records =
      load_or_generate(out / "data" / "eval.dw0d", static_cast<std::size_t>(config.int64("sweep.eval_frames")),
                       Rng::derive(data_seed, 999999), mix);
  std::ofstream csv(out / "ablations.csv");
  if (!csv) throw DataError("cannot write " + (out / "ablations.csv").string());
  write_sweep_header(csv);
  std::ofstream errors(out / "ablation_errors.txt");
  std::vector<SweepRow> rows;
  for (const auto& variant : config.list("ablate.variants")) {
    Config cell = config;
    std::string v = variant, interval = "1.0";
    if (const auto at = v.find('@'); at != std::string::npos) {
      interval = v.substr(at + 1);
      if (!interval.empty() && interval.back() == 's') interval.pop_back();
      v = v.substr(0, at);
    }
    bool vision_only = false;
    if (v.size() >= 2 && v.substr(v.size() - 2) == "VA") {
      v = v.substr(0, v.size() - 2);
    } else if (!v.empty() && v.back() == 'V') {
      vision_only = true;
      v.pop_back();
    } else {
      throw UsageError("ablation variant '" + variant + "' is not <H>VA, <H>V or <H>VA@<interval>s");
    }
    const std::string history = v.empty() ? "1" : v;
    cell.set("train.stage", "1");
    cell.set("seq.front_end", "discrete");
    cell.set("seq.history", history);
    cell.set("seq.interval", interval);
    cell.set("seq.vision_only", vision_only ? "true" : "false");
    cell.set("train.steps", config.str("ablate.stage1_steps"));
    cell.set("expert.kind", "query");
    for (const auto seed : seeds_of(config, "ablate.seeds")) {
      cell.set("train.seed", std::to_string(seed));
      cell.set("train.data_seed", std::to_string(Rng::derive(seed, 1)));
      cell.set("train.noise_seed", std::to_string(Rng::derive(seed, 2)));
      SweepRow base;
      base.size = frames;
      base.frontend = "discrete";
      base.variant = variant;
      base.decoder = "query";
      base.seed = seed;
      SweepRow row;
      const std::string name = variant + "_s" + std::to_string(seed);
      try {
        row = use_double(cell)
                  ? run_cell<double>(cell, train_records, eval_records, out / "cells" / name,
                                     config.integer("ablate.stage2_steps"))
                  : run_cell<float>(cell, train_records, eval_records, out / "cells" / name,
                                    config.integer("ablate.stage2_steps"));
        row.size = frames;
        row.frontend = "discrete";
        row.variant = variant;
        row.seed = seed;
      } catch (const UsageError&) {
        throw;
      } catch (const std::exception& e) {
        row = failed_row(base);
        errors << name << ": " << e.what() << '\n';
        errors.flush();
      }
      write_sweep_row(csv, row);
      csv.flush();
      std::cerr << "ablation " << name << ": ade " << row.ade_m << " m, " << row.wallclock_s << " s\n";
      rows.push_back(row);
    }
  }
  return rows;
}

#define DW0_INSTANTIATE(S)                                                                                        \
  template struct Model<S>;                                                                                       \
  template std::unique_ptr<Model<S>> create_model(const RunOptions&, int, const std::vector<SceneRecord>&);     \
  template std::unique_ptr<Model<S>> create_stage2_model(const RunOptions&, const std::filesystem::path&);       \
  template std::unique_ptr<Model<S>> load_model(const RunOptions&, int, const std::filesystem::path&);          \
  template void save_model(const Model<S>&, const std::filesystem::path&);                                       \
  template BatchLoss<S> stage1_loss(Model<S>&, Binder<S>&, const TrainOptions&, const SequenceBuilder&,          \
                                    const std::vector<const TokenSequence*>&, Rng&);                             \
  template Tensor<S> stage2_loss(Model<S>&, Tape<S>&, const std::vector<const TokenSequence*>&, Rng&);          \
  template TrainResult train(Model<S>&, const RunOptions&, const std::vector<SceneRecord>&, const StepCallback&, \
                             const std::filesystem::path&);                                                       \
  template EvalOutput evaluate(Model<S>&, const RunOptions&, const std::vector<SceneRecord>&);                   \
  template GeneratedFrame generate_frame(Model<S>&, const RunOptions&, const std::vector<SceneRecord>&, std::size_t, \
                                         std::uint64_t);
DW0_INSTANTIATE(float)
DW0_INSTANTIATE(double)
#undef DW0_INSTANTIATE

}  // namespace dw0
