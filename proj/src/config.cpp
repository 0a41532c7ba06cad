#include "dw0/config.hpp"

#include "dw0/common.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace dw0 {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config::Config() {
  values_ = {
      // data
      {"data.train", ""},
      {"data.eval", ""},
      {"data.anchor_limit", "0"},
      {"data.eval_limit", "200"},
      {"data.codebook_seed", "0"},
      // generation
      {"gen.frames", "1000"},
      {"gen.seed", "0"},
      {"gen.mix", "cruise:0.2,lead-follow:0.2,junction-turn:0.2,stop:0.2,crossing-agent:0.2"},
      // sequences
      {"seq.history", "6"},
      {"seq.interval", "1.0"},
      {"seq.front_end", "discrete"},
      {"seq.vision_only", "false"},
      {"stage2.history", "2"},
      {"stage2.interval", "1.0"},
      // backbone
      {"model.d_model", "128"},
      {"model.layers", "4"},
      {"model.heads", "4"},
      {"model.mlp_hidden", "512"},
      {"model.max_length", "512"},
      {"model.init_std", "0.02"},
      {"model.precision", "float"},
      // action expert
      {"expert.kind", "query"},
      {"expert.d_model", "64"},
      {"expert.mlp_hidden", "256"},
      {"expert.queries", "6"},
      {"expert.flow_steps", "10"},
      {"expert.init_std", "0.02"},
      {"expert.backbone_sees_expert", "false"},
      // diffusion world model
      {"diffusion.steps", "100"},
      {"diffusion.hidden", "256"},
      {"diffusion.time_dim", "32"},
      // action tokenizer
      {"tokenizer.gamma", "2.0"},
      // training
      {"train.stage", "1"},
      {"train.steps", "500"},
      {"train.batch", "8"},
      {"train.lr", "1e-3"},
      {"train.warmup", "50"},
      {"train.lr_floor", "0.1"},
      {"train.weight_decay", "0.01"},
      {"train.clip_norm", "1.0"},
      {"train.backbone_lr_scale", "1.0"},
      {"train.freeze_backbone", "false"},
      {"train.alpha", "1.0"},
      {"train.beta", "1.0"},
      {"train.init", ""},
      {"train.seed", "0"},
      {"train.data_seed", "1"},
      {"train.noise_seed", "2"},
      // evaluation
      {"eval.seed", "0"},
      {"eval.temperature", "0"},
      {"eval.checkpoint", ""},
      // scale sweep
      {"sweep.sizes", "1000,10000,50000"},
      {"sweep.frontends", "discrete,continuous"},
      {"sweep.variants", "action_only,world_model"},
      {"sweep.seeds", "0,1,2"},
      {"sweep.steps", "800"},
      {"sweep.history", "2"},
      {"sweep.eval_frames", "1000"},
      {"sweep.data_seed", "100"},
      // ablations
      {"ablate.variants", "6VA,6V,VA,2VA,2VA@4s"},
      {"ablate.frames", "1000"},
      {"ablate.stage1_steps", "300"},
      {"ablate.stage2_steps", "200"},
      {"ablate.seeds", "0"},
      // generation of frames / latency
      {"generate.record", "0"},
      {"generate.seed", "0"},
      {"latency.repeats", "20"},
      {"latency.ar_repeats", "60"},
      {"latency.warmup", "5"},
      {"latency.lengths", "2,4,6,8,10,12"},
  };
}

void Config::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  it->second = value;
}

void Config::apply(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read config " + path.string());
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      apply(t);
    } catch (const UsageError& e) {
      throw UsageError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

const std::string& Config::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t Config::int64(const std::string& key) const {
  const auto& s = str(key);
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw UsageError(key + ": expected an integer, got '" + s + "'");
  return v;
}

int Config::integer(const std::string& key) const {
  const auto v = int64(key);
  if (v < INT32_MIN || v > INT32_MAX) throw UsageError(key + ": out of range");
  return static_cast<int>(v);
}

double Config::real(const std::string& key) const {
  const auto& s = str(key);
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw UsageError(key + ": expected a number, got '" + s + "'");
  return v;
}

bool Config::flag(const std::string& key) const {
  const auto& s = str(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw UsageError(key + ": expected true/false, got '" + s + "'");
}

std::vector<std::string> Config::list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string Config::echo() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

void Config::write_echo(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << echo();
}

}  // namespace dw0
