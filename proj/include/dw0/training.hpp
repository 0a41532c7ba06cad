#pragma once

// Two-stage training, evaluation, checkpoints, the scale sweep and the
// ablation runner.

#include "dw0/config.hpp"
#include "dw0/diffusion.hpp"
#include "dw0/eval.hpp"
#include "dw0/experts.hpp"
#include "dw0/optim.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>

namespace dw0 {

struct ModelOptions {
  BackboneConfig backbone;
  ExpertConfig expert;
  DenoiserConfig denoiser;
  int diffusion_steps = 100;
  double gamma = 2.0;
  std::uint64_t codebook_seed = 0;
};

struct TrainOptions {
  int stage = 1;
  int steps = 500;
  int batch = 8;
  double lr = 1e-3;
  int warmup = 50;
  double lr_floor = 0.1;
  AdamWConfig adamw;
  double backbone_lr_scale = 1.0;
  bool freeze_backbone = false;
  double alpha = 1.0;  // AR world-model weight, discrete front end
  double beta = 1.0;   // diffusion weight, continuous front end
  std::size_t anchor_limit = 0;  // 0 = every anchor
  std::uint64_t init_seed = 0;
  std::uint64_t data_seed = 1;
  std::uint64_t noise_seed = 2;
  std::string init_checkpoint;  // stage 2: stage-1 checkpoint
};

struct RunOptions {
  ModelOptions model;
  TrainOptions train;
  SequenceConfig stage1_seq;
  SequenceConfig stage2_seq;
  std::size_t eval_limit = 200;
  std::uint64_t eval_seed = 0;
  double eval_temperature = 0.0;

  FrontEnd front_end() const { return stage1_seq.front_end; }
  const SequenceConfig& seq(int stage) const { return stage == 1 ? stage1_seq : stage2_seq; }
  /// Throws UsageError on inconsistent settings.
  void validate() const;
};

RunOptions run_options(const Config& config);

template <typename Scalar>
struct Model {
  Model(const ModelOptions& options, FrontEnd front_end, int stage);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ModelOptions options;
  FrontEnd front_end;
  int stage;
  ParamSet<Scalar> params;
  Backbone<Scalar> backbone;
  std::optional<ActionExpert<Scalar>> expert;  // stage 2
  std::optional<Denoiser<Scalar>> denoiser;    // continuous front end
  VisualCodebook codebook;                     // discrete front end
  ActionTokenizer tokenizer;
  NoiseSchedule schedule;

  const VisualCodebook* book() const { return front_end == FrontEnd::Discrete ? &codebook : nullptr; }
  /// Marks backbone parameters (non-)trainable.
  void freeze_backbone(bool frozen);
};

/// Fresh parameters from init_seed. A discrete model fits its codebook on
/// the images of `codebook_source`.
template <typename Scalar>
std::unique_ptr<Model<Scalar>> create_model(const RunOptions& options, int stage,
                                            const std::vector<SceneRecord>& codebook_source);
/// Stage-2 model: backbone (and codebook) from a stage-1 checkpoint, fresh expert.
template <typename Scalar>
std::unique_ptr<Model<Scalar>> create_stage2_model(const RunOptions& options, const std::filesystem::path& stage1);
/// Restores every parameter of a model saved with save_model.
template <typename Scalar>
std::unique_ptr<Model<Scalar>> load_model(const RunOptions& options, int stage, const std::filesystem::path& path);
template <typename Scalar>
void save_model(const Model<Scalar>& model, const std::filesystem::path& path);

struct LossRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  std::optional<double> action;  // empty: term not in the objective
  std::optional<double> wm;
  double grad_norm = 0.0;
};

template <typename Scalar>
struct BatchLoss {
  Tensor<Scalar> total;
  std::optional<Tensor<Scalar>> action;
  std::optional<Tensor<Scalar>> wm;
  double wm_weight = 0.0;
  int diffusion_skipped = 0;
};

/// Stage-1 objective on one batch: L_Action + alpha L_WM-AR (discrete) or
/// L_Action + beta L_WM-Diff (continuous); world-model loss only for 6V.
template <typename Scalar>
BatchLoss<Scalar> stage1_loss(Model<Scalar>& model, Binder<Scalar>& bind, const TrainOptions& train,
                              const SequenceBuilder& builder, const std::vector<const TokenSequence*>& seqs,
                              Rng& noise);
/// Stage-2 objective: the expert decoder's own loss on the context prefix.
template <typename Scalar>
Tensor<Scalar> stage2_loss(Model<Scalar>& model, Tape<Scalar>& tape, const std::vector<const TokenSequence*>& seqs,
                           Rng& noise);

struct TrainResult {
  std::vector<LossRow> log;
  double first_backbone_grad_norm = 0.0;  // backbone gradient norm at step 1
  std::int64_t diffusion_skipped = 0;
  double wallclock_s = 0.0;
  bool stopped_early = false;
};

/// Return false to stop after the current step.
using StepCallback = std::function<bool(const LossRow&)>;

/// Runs model.stage's objective. A non-finite loss or gradient writes the
/// last good parameters to `rescue` (when set) and throws NumericError.
template <typename Scalar>
TrainResult train(Model<Scalar>& model, const RunOptions& options, const std::vector<SceneRecord>& records,
                  const StepCallback& on_step = {}, const std::filesystem::path& rescue = {});

struct EvalOutput {
  std::vector<ScenarioResult> results;
  EvalSummary summary;
  double wallclock_s = 0.0;
};

/// Stage-1 models decode action tokens with the backbone; stage-2 models
/// use their expert decoder.
template <typename Scalar>
EvalOutput evaluate(Model<Scalar>& model, const RunOptions& options, const std::vector<SceneRecord>& records);

struct GeneratedFrame {
  Image generated;
  Image reference;  // the frame being predicted
  std::string method;  // "ar-tokens" or "diffusion"
};
/// Discrete: re-generates the anchor frame's 64 visual tokens after its
/// history (temperature 1). Continuous: samples the next frame's latent.
template <typename Scalar>
GeneratedFrame generate_frame(Model<Scalar>& model, const RunOptions& options, const std::vector<SceneRecord>& records,
                              std::size_t record, std::uint64_t seed);

// ---- run-directory drivers (precision chosen by model.precision) ----

void write_loss_header(std::ostream& os);
void write_loss_row(std::ostream& os, const LossRow& row);
std::vector<LossRow> read_loss_log(const std::filesystem::path& path);

struct RunSummary {
  TrainResult train;
  std::optional<EvalSummary> eval;
};
/// Trains per the config into out (loss.csv, model.ckpt, eval.csv when data.eval is set).
RunSummary run_train(const Config& config, const std::filesystem::path& out);
/// Evaluates eval.checkpoint on data.eval into out/eval.csv.
EvalSummary run_eval(const Config& config, const std::filesystem::path& out);

/// The generate.record-th usable anchor of data.eval with eval.checkpoint
/// -> out/generated.dw0i, out/reference.dw0i.
GeneratedFrame run_generate(const Config& config, const std::filesystem::path& out);

struct SweepRow {
  std::size_t size = 0;
  std::string frontend;
  std::string variant;
  std::string decoder;
  std::uint64_t seed = 0;
  double ade_m = 0.0;
  double collision_rate = 0.0;
  double pdms_analog = 0.0;
  double wallclock_s = 0.0;
};
void write_sweep_header(std::ostream& os);
void write_sweep_row(std::ostream& os, const SweepRow& row);
std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path);

/// sizes x front ends x variants x seeds stage-1 cells -> out/sweep.csv
/// (plus out/sweep_summary.txt). Failed cells are written with NaN metrics.
std::vector<SweepRow> run_sweep(const Config& config, const std::filesystem::path& out);
/// Pretraining variants (6VA, 6V, VA, 2VA, 2VA@4s), each followed by a
/// stage-2 query expert -> out/ablations.csv.
std::vector<SweepRow> run_ablations(const Config& config, const std::filesystem::path& out);

/// Median ADE per (size, frontend, variant) over seeds.
struct SweepMedian {
  std::size_t size = 0;
  std::string frontend, variant;
  double ade_m = 0.0;
  int seeds = 0;
};
std::vector<SweepMedian> sweep_medians(const std::vector<SweepRow>& rows);

/// Either reads an existing dataset (validating it) or generates it.
std::vector<SceneRecord> load_or_generate(const std::filesystem::path& path, std::size_t frames, std::uint64_t seed,
                                          const ScenarioMix& mix);

}  // namespace dw0
