// hyperseg: generate / train / predict / evaluate.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>

#include "hyperseg/config.hpp"
#include "hyperseg/inference.hpp"
#include "hyperseg/metrics.hpp"
#include "hyperseg/synthdata.hpp"
#include "hyperseg/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace hyperseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonArgs& a) {
  if (a.config.empty()) return parse_run_config("", a.overrides);
  return load_run_config(a.config, a.overrides);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

std::vector<std::size_t> subset_indices(const Dataset& ds, const std::string& subset) {
  if (subset == "train") return ds.split.train;
  if (subset == "val") return ds.split.val;
  std::vector<std::size_t> all(ds.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

std::string tau_text(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", tau);
  return buf;
}

// A checkpoint directory, or a directory whose subdirectories are checkpoints.
std::vector<fs::path> checkpoint_dirs(const fs::path& p) {
  if (!fs::is_directory(p)) throw std::runtime_error("checkpoint path " + p.string() + " does not exist");
  if (fs::exists(p / "manifest")) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_directory() && fs::exists(e.path() / "manifest")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::runtime_error("no checkpoints under " + p.string());
  return out;
}

// ---------------------------------------------------------------------------

int cmd_generate(const CommonArgs& common, const fs::path& out) {
  const RunConfig cfg = resolve_config(common);
  const Dataset ds = make_dataset(cfg.dataset);
  write_dataset(ds, out);
  write_config_echo(cfg, out);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const CommonArgs& common, const fs::path& dataset_dir, const fs::path& out, const std::string& subset) {
  const RunConfig cfg = resolve_config(common);
  const Dataset ds = read_dataset(dataset_dir);
  std::vector<SyntheticSample> data;
  for (std::size_t i : subset_indices(ds, subset)) data.push_back(ds.samples[i]);
  if (data.empty()) throw std::invalid_argument("training subset '" + subset + "' is empty");

  fs::create_directories(out);
  write_config_echo(cfg, out);
  std::ofstream log(out / "train.log", std::ios::binary);
  const auto wall_start = std::chrono::system_clock::now();
  log << "started " << std::chrono::duration_cast<std::chrono::seconds>(wall_start.time_since_epoch()).count()
      << " strategy=" << to_string(cfg.train.strategy) << " samples=" << data.size() << "\n";
  const TrainOutput result = train(data, cfg.train, [&](const LogEntry& e) { log << format_log_line(e) << "\n"; });
  const auto paths = save_members(result, out);

  json report;
  report["format_version"] = kArtifactFormatVersion;
  report["strategy"] = to_string(cfg.train.strategy);
  report["seed"] = result.report.seed;
  report["training_samples"] = data.size();
  json members = json::array();
  for (std::size_t i = 0; i < result.members.size(); ++i)
    members.push_back({{"name", result.members[i].name},
                       {"checkpoint", paths[i].filename().string()},
                       {"epoch_loss", result.report.epoch_loss[i]}});
  report["members"] = members;
  report["config"] = echo_run_config(cfg);
  write_text(out / "train_report.json", report.dump(2) + "\n");

  // Wall time changes between runs, so it stays out of the report.
  json timing;
  json member_seconds = json::array();
  for (const auto& m : result.members) member_seconds.push_back({{"name", m.name}, {"wall_seconds", m.wall_seconds}});
  timing["members"] = member_seconds;
  timing["wall_seconds"] = result.report.wall_seconds;
  write_text(out / "timing.json", timing.dump(2) + "\n");
  log << "finished wall_seconds=" << result.report.wall_seconds << "\n";
  std::cout << "trained " << result.members.size() << " checkpoint(s) in " << result.report.wall_seconds << " s\n";
  return kExitOk;
}

int cmd_predict(const CommonArgs& common, const std::vector<std::string>& model_paths, const fs::path& dataset_dir,
                const fs::path& out, const std::string& subset, const std::string& method,
                std::optional<double> alpha) {
  const RunConfig cfg = resolve_config(common);
  std::vector<fs::path> dirs;
  for (const auto& p : model_paths)
    for (auto& d : checkpoint_dirs(p)) dirs.push_back(d);
  std::vector<Checkpoint> ckpts;
  for (const auto& d : dirs) ckpts.push_back(load_checkpoint(d));
  const ModelKind kind = ckpts.front().model.spec().kind;
  for (const auto& c : ckpts)
    if (c.model.spec().kind != kind) throw std::invalid_argument("cannot mix plain and hyper checkpoints");
  if (kind == ModelKind::kHyper && ckpts.size() != 1)
    throw std::invalid_argument("hyper prediction takes exactly one checkpoint");
  if (alpha && kind != ModelKind::kHyper) throw std::invalid_argument("--alpha needs a hyper checkpoint");
  if (alpha) TverskyParams::from_alpha(*alpha).validate();

  const Dataset ds = read_dataset(dataset_dir);
  fs::create_directories(out);
  write_config_echo(cfg, out);
  json manifest;
  manifest["format_version"] = kArtifactFormatVersion;
  manifest["method"] = method;
  manifest["model_kind"] = to_string(kind);
  manifest["taus"] = cfg.taus;
  json ids = json::array();
  for (std::size_t i : subset_indices(ds, subset)) {
    const auto& image = ds.samples[i].image;
    ProbabilityMap p;
    if (kind == ModelKind::kHyper) {
      p = alpha ? sliding_window_predict(image, ckpts[0].model, cfg.window, TverskyParams::from_alpha(*alpha))
                : hyper_ensemble_predict(image, ckpts[0].model, cfg.ensemble_alphas, cfg.window);
    } else {
      std::vector<const SegmentationNet*> members;
      for (const auto& c : ckpts) members.push_back(&c.model);
      p = member_ensemble_predict(image, members, cfg.window);
    }
    const fs::path dir = out / ds.ids[i];
    fs::create_directories(dir);
    write_map(dir / "prob", p);
    write_pgm(dir / "prob.pgm", p);
    const auto h = entropy_map(p);
    write_map(dir / "entropy", h);
    Grid<double> h_scaled = h;
    for (auto& v : h_scaled.values) v = std::min(1.0, v / std::log(2.0));
    write_pgm(dir / "entropy.pgm", h_scaled);
    for (double tau : cfg.taus) write_pgm(dir / ("label_tau" + tau_text(tau) + ".pgm"), threshold_map(p, tau));
    ids.push_back(ds.ids[i]);
  }
  manifest["ids"] = ids;
  write_text(out / "predictions.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << ids.size() << " prediction(s) to " << out.string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const CommonArgs& common, const std::vector<std::string>& prediction_dirs,
                 const fs::path& dataset_dir, const fs::path& out) {
  const RunConfig cfg = resolve_config(common);
  const Dataset ds = read_dataset(dataset_dir);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.ids.size(); ++i) index[ds.ids[i]] = i;
  const EvaluationOptions opts = cfg.evaluation_options();

  std::vector<MethodReport> rows;
  std::set<std::string> methods;
  for (const auto& pd : prediction_dirs) {
    const json manifest = read_json(fs::path(pd) / "predictions.json");
    const std::string method = manifest.at("method").get<std::string>();
    if (!methods.insert(method).second) throw std::invalid_argument("method '" + method + "' given twice");
    std::vector<std::string> orphans;
    std::vector<ProbabilityMap> ps, trues;
    std::vector<LabelMap> truths;
    for (const auto& id_json : manifest.at("ids")) {
      const std::string id = id_json.get<std::string>();
      const auto it = index.find(id);
      if (it == index.end()) {
        orphans.push_back(id);
        continue;
      }
      ps.push_back(read_map(fs::path(pd) / id / "prob"));
      truths.push_back(ds.samples[it->second].annotation);
      trues.push_back(ds.samples[it->second].p_true);
    }
    if (!orphans.empty()) {
      std::string list;
      for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
      throw std::invalid_argument("predictions in " + pd + " have no matching dataset sample: " + list);
    }
    if (ps.empty()) throw std::invalid_argument("no predictions in " + pd);
    rows.push_back({method, "micro", aggregate(ps, truths, &trues, opts)});
    rows.push_back({method, "macro", macro_aggregate(ps, truths, &trues, opts)});
  }
  fs::create_directories(out);
  write_config_echo(cfg, out);
  write_summary_csv(out / "summary.csv", rows);
  write_sweep_csv(out / "sweep.csv", rows);
  write_report_json(out / "report.json", rows);
  for (const auto& r : rows)
    if (r.averaging == "micro")
      std::cout << r.method << ": dice " << r.report.dice << " auc "
                << (r.report.roc_auc ? std::to_string(*r.report.roc_auc) : std::string("n/a")) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tversky-ensemble segmentation on synthetic data"};
  app.require_subcommand(1);
  CommonArgs common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Run configuration file")->check(CLI::ExistingFile);
    sub->add_option("overrides", common.overrides, "key=value overrides");
  };

  std::string out, dataset, train_subset = "train", predict_subset = "val", method = "model";
  std::vector<std::string> models, predictions;
  std::optional<double> alpha;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  add_common(gen);
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train the configured strategy");
  add_common(tr);
  tr->add_option("--dataset", dataset, "Dataset directory")->required();
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--subset", train_subset, "Samples to train on")->check(CLI::IsMember({"train", "val", "all"}));

  auto* pr = app.add_subcommand("predict", "Probability, entropy and label maps");
  add_common(pr);
  pr->add_option("--model", models, "Checkpoint or training output directory (repeatable)")->required();
  pr->add_option("--dataset", dataset, "Dataset directory")->required();
  pr->add_option("--out", out, "Output directory")->required();
  pr->add_option("--subset", predict_subset, "Samples to predict")->check(CLI::IsMember({"train", "val", "all"}));
  pr->add_option("--method", method, "Method name recorded with the predictions");
  pr->add_option("--alpha", alpha, "Single hyper prediction at this alpha instead of the ensemble");

  auto* ev = app.add_subcommand("evaluate", "Metrics against the dataset annotations");
  add_common(ev);
  ev->add_option("--predictions", predictions, "Prediction directory (repeatable)")->required();
  ev->add_option("--dataset", dataset, "Dataset directory")->required();
  ev->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) return cmd_generate(common, out);
    if (*tr) return cmd_train(common, dataset, out, train_subset);
    if (*pr) return cmd_predict(common, models, dataset, out, predict_subset, method, alpha);
    if (*ev) return cmd_evaluate(common, predictions, dataset, out);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
