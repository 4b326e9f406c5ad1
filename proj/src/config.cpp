#include "hyperseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>

namespace hyperseg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || end != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || end != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(to_double(key, item));
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(to_size(key, item));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
std::string fmt_list(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_floating_point_v<T>)
      out += fmt(xs[i]);
    else
      out += std::to_string(xs[i]);
  }
  return out;
}

struct Parsed {
  RunConfig cfg;
  bool seed_set = false;
  bool dataset_seed_set = false;
  bool train_seed_set = false;
};

struct Field {
  std::function<void(Parsed&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(name, member)                                                         \
  {name,                                                                                 \
   {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.member = to_size(k, v); }, \
    [](const RunConfig& c) { return std::to_string(c.member); }}}
#define DOUBLE_FIELD(name, member)                                                         \
  {name,                                                                                   \
   {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.member = to_double(k, v); }, \
    [](const RunConfig& c) { return fmt(c.member); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"seed",
       {[](Parsed& p, const std::string& k, const std::string& v) {
          p.cfg.seed = to_u64(k, v);
          p.seed_set = true;
        },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"dataset.seed",
       {[](Parsed& p, const std::string& k, const std::string& v) {
          p.cfg.dataset.seed = to_u64(k, v);
          p.dataset_seed_set = true;
        },
        [](const RunConfig& c) { return std::to_string(c.dataset.seed); }}},
      SIZE_FIELD("dataset.n_samples", dataset.n_samples),
      SIZE_FIELD("dataset.grid_size", dataset.grid_size),
      SIZE_FIELD("dataset.blobs_min", dataset.blobs_min),
      SIZE_FIELD("dataset.blobs_max", dataset.blobs_max),
      DOUBLE_FIELD("dataset.blob_scale_min", dataset.blob_scale_min),
      DOUBLE_FIELD("dataset.blob_scale_max", dataset.blob_scale_max),
      SIZE_FIELD("dataset.confusers_min", dataset.confusers_min),
      SIZE_FIELD("dataset.confusers_max", dataset.confusers_max),
      DOUBLE_FIELD("dataset.lesion_gain", dataset.lesion_gain),
      DOUBLE_FIELD("dataset.confuser_gain", dataset.confuser_gain),
      DOUBLE_FIELD("dataset.texture_amplitude", dataset.texture_amplitude),
      DOUBLE_FIELD("dataset.noise_std", dataset.noise_std),
      DOUBLE_FIELD("dataset.tau_min", dataset.tau_min),
      DOUBLE_FIELD("dataset.tau_max", dataset.tau_max),
      DOUBLE_FIELD("dataset.train_fraction", dataset.train_fraction),
      {"model.kernel_depths",
       {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.train.model.kernel_depths = to_sizes(k, v); },
        [](const RunConfig& c) { return fmt_list(c.train.model.kernel_depths); }}},
      SIZE_FIELD("model.hypervector_size", train.model.hypervector_size),
      SIZE_FIELD("model.mapping_layers", train.model.mapping_layers),
      SIZE_FIELD("model.kernel_size", train.model.kernel_size),
      {"train.seed",
       {[](Parsed& p, const std::string& k, const std::string& v) {
          p.cfg.train.seed = to_u64(k, v);
          p.train_seed_set = true;
        },
        [](const RunConfig& c) { return std::to_string(c.train.seed); }}},
      {"train.strategy",
       {[](Parsed& p, const std::string&, const std::string& v) {
          try {
            p.cfg.train.strategy = strategy_from_string(v);
          } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config key 'train.strategy': ") + e.what());
          }
        },
        [](const RunConfig& c) { return to_string(c.train.strategy); }}},
      SIZE_FIELD("train.epochs", train.epochs),
      SIZE_FIELD("train.batch_size", train.batch_size),
      {"train.lr",
       {[](Parsed& p, const std::string& k, const std::string& v) {
          if (v == "auto")
            p.cfg.train.lr.reset();
          else
            p.cfg.train.lr = to_double(k, v);
        },
        [](const RunConfig& c) { return c.train.lr ? fmt(*c.train.lr) : std::string("auto"); }}},
      DOUBLE_FIELD("train.weight_decay", train.weight_decay),
      SIZE_FIELD("train.patch_size", train.patch_size),
      {"train.alpha_grid",
       {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.train.alpha_grid = to_doubles(k, v); },
        [](const RunConfig& c) { return fmt_list(c.train.alpha_grid); }}},
      SIZE_FIELD("train.ensemble_size", train.ensemble_size),
      DOUBLE_FIELD("train.dropout", train.dropout),
      DOUBLE_FIELD("train.smooth", train.loss.smooth),
      DOUBLE_FIELD("train.dice_ce_mix", train.loss.dice_ce_mix),
      {"train.fixed_alpha",
       {[](Parsed& p, const std::string& k, const std::string& v) {
          if (v == "none")
            p.cfg.train.fixed_h.reset();
          else
            p.cfg.train.fixed_h = TverskyParams::from_alpha(to_double(k, v));
        },
        [](const RunConfig& c) { return c.train.fixed_h ? fmt(c.train.fixed_h->alpha) : std::string("none"); }}},
      {"train.augment",
       {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.train.augment.enabled = to_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.train.augment.enabled ? "true" : "false"); }}},
      DOUBLE_FIELD("train.gamma_min", train.augment.gamma_min),
      DOUBLE_FIELD("train.gamma_max", train.augment.gamma_max),
      DOUBLE_FIELD("train.flip_probability", train.augment.flip_probability),
      SIZE_FIELD("train.foreground_retries", train.augment.foreground_retries),
      SIZE_FIELD("predict.patch", window.patch),
      DOUBLE_FIELD("predict.overlap", window.overlap),
      SIZE_FIELD("predict.batch", window.batch),
      {"predict.ensemble_alphas",
       {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.ensemble_alphas = to_doubles(k, v); },
        [](const RunConfig& c) { return fmt_list(c.ensemble_alphas); }}},
      {"predict.taus",
       {[](Parsed& p, const std::string& k, const std::string& v) { p.cfg.taus = to_doubles(k, v); },
        [](const RunConfig& c) { return fmt_list(c.taus); }}},
      DOUBLE_FIELD("evaluate.threshold", eval_threshold),
      DOUBLE_FIELD("evaluate.roc_step", roc_step),
      DOUBLE_FIELD("evaluate.sweep_step", sweep_step),
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD

void apply(Parsed& p, const std::string& key, const std::string& value, const std::string& where) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError(where + "unknown config key '" + key + "'");
  try {
    it->second.set(p, key, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  }
}

std::pair<std::string, std::string> split_assignment(const std::string& line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
  std::string key = trim(std::string_view(line).substr(0, eq));
  if (key.empty()) throw ConfigError(where + "missing key before '='");
  return {key, trim(std::string_view(line).substr(eq + 1))};
}

}  // namespace

EvaluationOptions RunConfig::evaluation_options() const {
  EvaluationOptions o;
  o.threshold = eval_threshold;
  o.roc_taus = threshold_grid(roc_step);
  o.sweep_taus = threshold_grid(sweep_step);
  return o;
}

void RunConfig::validate() const {
  dataset.validate();
  train.validate();
  window.validate();
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (ensemble_alphas.empty()) fail("predict.ensemble_alphas must be nonempty");
  for (double a : ensemble_alphas)
    if (!(a > 0.0 && a < 1.0)) fail("predict.ensemble_alphas values must lie in (0, 1)");
  for (double t : taus)
    if (!(t >= 0.0 && t <= 1.0)) fail("predict.taus values must lie in [0, 1]");
  if (!(eval_threshold >= 0.0 && eval_threshold <= 1.0)) fail("evaluate.threshold must lie in [0, 1]");
  if (!(roc_step > 0.0 && roc_step <= 1.0)) fail("evaluate.roc_step must lie in (0, 1]");
  if (!(sweep_step > 0.0 && sweep_step <= 1.0)) fail("evaluate.sweep_step must lie in (0, 1]");
}

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides) {
  Parsed p;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    auto [key, value] = split_assignment(line, where);
    if (!seen.insert(key).second) throw ConfigError(where + "config key '" + key + "' given twice");
    apply(p, key, value, where);
  }
  for (const auto& o : overrides) {
    auto [key, value] = split_assignment(o, "override: ");
    apply(p, key, value, "override: ");
  }
  if (!p.seed_set) throw ConfigError("config: 'seed' is required");
  if (!p.dataset_seed_set) p.cfg.dataset.seed = p.cfg.seed;
  if (!p.train_seed_set) p.cfg.train.seed = p.cfg.seed;
  try {
    p.cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return p.cfg;
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

std::string echo_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

void write_config_echo(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.echo", std::ios::binary);
    out << echo_run_config(cfg);
    if (!out) throw std::runtime_error("cannot write " + (dir / "config.echo").string());
  }
  std::ofstream v(dir / "FORMAT_VERSION", std::ios::binary);
  v << kArtifactFormatVersion << "\n";
  if (!v) throw std::runtime_error("cannot write " + (dir / "FORMAT_VERSION").string());
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, field] : fields()) keys.push_back(key);
  return keys;
}

}  // namespace hyperseg
