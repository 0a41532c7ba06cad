#include "CLI11.hpp"
#include "dw0/latency.hpp"
#include "dw0/training.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>

using namespace dw0;

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string seed;
  bool force = false;
  std::vector<std::string> args;
};

void add_globals(CLI::App* cmd, Globals& g) {
  cmd->add_option("--config", g.config, "key=value configuration file");
  cmd->add_option("--set", g.sets, "override one key (repeatable)")->type_name("KEY=VALUE");
  cmd->add_option("--out", g.out, "output directory (dataset file for gen-data)");
  cmd->add_option("--seed", g.seed, "seed for the command");
  cmd->add_flag("--force", g.force, "overwrite existing outputs");
}

Config build_config(const Globals& g, const std::string& seed_key) {
  Config c;
  if (!g.config.empty()) c.load_file(g.config);
  for (const auto& s : g.sets) c.apply(s);
  if (!g.seed.empty()) c.set(seed_key, g.seed);
  return c;
}

std::filesystem::path require_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required");
  return g.out;
}

void prepare_dir(const std::filesystem::path& out, const Globals& g, const std::string& marker) {
  if (std::filesystem::exists(out / marker) && !g.force)
    throw UsageError(out.string() + " already holds " + marker + " (use --force)");
  std::filesystem::create_directories(out);
}

void print_summary(const EvalSummary& s) {
  std::cout << "scenarios " << s.scenarios << "  ade_m " << s.ade_m << "  collision_rate " << s.collision_rate
            << "  pdms " << s.pdms << '\n';
}

int cmd_gen_data(const Globals& g) {
  const auto c = build_config(g, "gen.seed");
  const auto out = require_out(g);
  const auto records = generate_dataset(static_cast<std::size_t>(c.int64("gen.frames")), std::stoull(c.str("gen.seed")),
                                        ScenarioMix::parse(c.str("gen.mix")), out, g.force);
  std::cout << "wrote " << records.size() << " frames to " << out.string() << '\n';
  return 0;
}

int cmd_validate(const Globals& g) {
  std::vector<std::string> paths = g.args;
  if (paths.empty()) {
    const auto c = build_config(g, "gen.seed");
    for (const auto* k : {"data.train", "data.eval"})
      if (!c.str(k).empty()) paths.push_back(c.str(k));
  }
  if (paths.empty()) throw UsageError("validate-data needs a dataset path");
  int bad = 0;
  for (const auto& p : paths) {
    const auto problems = validate_dataset_file(p);
    if (problems.empty()) {
      std::cout << p << ": ok\n";
    } else {
      ++bad;
      for (const auto& msg : problems) std::cout << p << ": " << msg << '\n';
    }
  }
  return bad ? 2 : 0;
}

int cmd_train(const Globals& g) {
  const auto c = build_config(g, "train.seed");
  const auto out = require_out(g);
  prepare_dir(out, g, "model.ckpt");
  c.write_echo(out / "config.txt");
  const auto s = run_train(c, out);
  const auto& last = s.train.log.back();
  std::cout << "trained " << s.train.log.size() << " steps in " << s.train.wallclock_s << " s, final loss "
            << last.total << '\n';
  if (s.eval) print_summary(*s.eval);
  return 0;
}

int cmd_eval(const Globals& g) {
  Config c;
  if (g.config.empty()) {
    // default to the run's echoed config next to the checkpoint
    Config probe;
    for (const auto& s : g.sets) probe.apply(s);
    const auto ckpt = std::filesystem::path(probe.str("eval.checkpoint"));
    if (!ckpt.empty() && std::filesystem::exists(ckpt.parent_path() / "config.txt")) c.load_file(ckpt.parent_path() / "config.txt");
  } else {
    c.load_file(g.config);
  }
  for (const auto& s : g.sets) c.apply(s);
  if (!g.seed.empty()) c.set("eval.seed", g.seed);
  const auto out = require_out(g);
  prepare_dir(out, g, "eval.csv");
  c.write_echo(out / "config.txt");
  print_summary(run_eval(c, out));
  return 0;
}

int cmd_sweep(const Globals& g, bool ablate) {
  const auto c = build_config(g, "sweep.data_seed");
  const auto out = require_out(g);
  prepare_dir(out, g, ablate ? "ablations.csv" : "sweep.csv");
  c.write_echo(out / "config.txt");
  const auto rows = ablate ? run_ablations(c, out) : run_sweep(c, out);
  for (const auto& m : sweep_medians(rows))
    std::cout << std::setw(6) << m.size << ' ' << std::setw(10) << m.frontend << ' ' << std::setw(12) << m.variant
              << "  median ADE " << m.ade_m << " m (" << m.seeds << " seeds)\n";
  return 0;
}

int cmd_generate(const Globals& g) {
  Config c;
  if (!g.config.empty()) c.load_file(g.config);
  for (const auto& s : g.sets) c.apply(s);
  if (!g.seed.empty()) c.set("generate.seed", g.seed);
  const auto out = require_out(g);
  prepare_dir(out, g, "generated.dw0i");
  c.write_echo(out / "config.txt");
  const auto f = run_generate(c, out);
  std::cout << "wrote " << (out / "generated.dw0i").string() << " (" << f.method << ") and reference.dw0i\n";
  return 0;
}

template <typename Scalar>
LatencyReport latency_impl(const Config& c) {
  const auto o = run_options(c);
  const auto records = generate_records(64, 7, ScenarioMix{});
  VisualCodebook book;
  ParamSet<Scalar> params;
  if (!c.str("eval.checkpoint").empty()) {
    auto m = load_model<Scalar>(o, o.train.stage, c.str("eval.checkpoint"));
    for (auto& [name, p] : m->params) params.add(name, p.shape).value = p.value;
    book = m->codebook;
  } else {
    Rng rng(o.train.init_seed);
    Backbone<Scalar>(o.model.backbone).init(params, rng);
    if (o.front_end() == FrontEnd::Discrete) {
      std::vector<Image> imgs;
      for (const auto& r : records) imgs.push_back(r.image);
      book = fit_codebook(imgs, 0);
    }
  }
  const SequenceBuilder sb(records, o.stage2_seq, o.front_end() == FrontEnd::Discrete ? &book : nullptr);
  const auto seq = sb.build(sb.anchors().front());
  LatencyOptions lo;
  lo.repeats = c.integer("latency.repeats");
  lo.warmup = c.integer("latency.warmup");
  lo.ar_repeats = c.integer("latency.ar_repeats");
  lo.ar_lengths.clear();
  for (const auto& s : c.list("latency.lengths")) lo.ar_lengths.push_back(std::stoi(s));
  return measure_latency(o.model.backbone, o.model.expert, params, seq, o.front_end(), lo);
}

int cmd_latency(const Globals& g) {
  const auto c = build_config(g, "train.seed");
  const auto out = require_out(g);
  prepare_dir(out, g, "latency.csv");
  c.write_echo(out / "config.txt");
  const auto r = c.str("model.precision") == "double" ? latency_impl<double>(c) : latency_impl<float>(c);
  std::ofstream csv(out / "latency.csv");
  csv << "method,tokens,median_ms,ratio_to_full_backbone\n";
  auto row = [&](const std::string& m, int tokens, double ms) {
    csv << m << ',' << tokens << ',' << ms << ',' << ms / r.full_backbone_ms << '\n';
    std::cout << std::left << std::setw(16) << m << std::right << std::setw(4) << tokens << std::setw(12) << ms
              << " ms  ratio " << ms / r.full_backbone_ms << '\n';
  };
  row("full_backbone_ar", kActionTokens, r.full_backbone_ms);
  row("expert_query", 0, r.expert_query_ms);
  row("expert_ar", kActionTokens, r.expert_ar_ms);
  row("expert_flow", 0, r.expert_flow_ms);
  for (const auto& [L, ms] : r.ar_by_length) row("expert_ar_L", L, ms);
  std::cout << "expert AR fit: " << r.ar_slope_ms << " ms/token + " << r.ar_intercept_ms << " ms, R^2 " << r.ar_r2
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dw0: world-model-supervised driving VLA at desk scale"};
  app.require_subcommand(1);
  Globals g;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate a synthetic dataset"},
      {"train", "train stage 1 or 2 into --out"},
      {"eval", "evaluate eval.checkpoint on data.eval"},
      {"sweep", "data-scaling sweep"},
      {"ablate", "sequence-design ablations"},
      {"generate", "generate a frame with the world model"},
      {"latency", "decoder latency bench"},
      {"validate-data", "check dataset files"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* s = app.add_subcommand(name, help);
    add_globals(s, g);
    subs[name] = s;
  }
  subs["validate-data"]->add_option("paths", g.args, "dataset files");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    if (subs["gen-data"]->parsed()) return cmd_gen_data(g);
    if (subs["train"]->parsed()) return cmd_train(g);
    if (subs["eval"]->parsed()) return cmd_eval(g);
    if (subs["sweep"]->parsed()) return cmd_sweep(g, false);
    if (subs["ablate"]->parsed()) return cmd_sweep(g, true);
    if (subs["generate"]->parsed()) return cmd_generate(g);
    if (subs["latency"]->parsed()) return cmd_latency(g);
    if (subs["validate-data"]->parsed()) return cmd_validate(g);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
