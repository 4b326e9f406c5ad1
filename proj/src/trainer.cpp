#include "hyperseg/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "hyperseg/ops.hpp"

namespace hyperseg {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kSingleDice: return "single_dice";
    case Strategy::kSingleDiceCe: return "single_dice_ce";
    case Strategy::kDropout: return "dropout";
    case Strategy::kSubsetEnsemble: return "subset_ensemble";
    case Strategy::kVtvEnsemble: return "vtv_ensemble";
    case Strategy::kHypernet: return "hypernet";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  for (auto k : {Strategy::kSingleDice, Strategy::kSingleDiceCe, Strategy::kDropout, Strategy::kSubsetEnsemble,
                 Strategy::kVtvEnsemble, Strategy::kHypernet})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown strategy '" + s +
                              "' (expected single_dice, single_dice_ce, dropout, subset_ensemble, vtv_ensemble or hypernet)");
}

double TrainConfig::effective_lr() const {
  if (lr) return *lr;
  return strategy == Strategy::kHypernet ? 1e-5 : 1e-4;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (lr && !(*lr > 0.0)) fail("lr must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (patch_size < 1) fail("patch_size must be >= 1");
  if (ensemble_size < 1) fail("ensemble_size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (alpha_grid.empty()) fail("alpha_grid must be nonempty");
  for (std::size_t i = 0; i < alpha_grid.size(); ++i) {
    if (!(alpha_grid[i] > 0.0 && alpha_grid[i] < 1.0)) fail("alpha_grid values must lie in (0, 1)");
    if (i && !(alpha_grid[i] > alpha_grid[i - 1])) fail("alpha_grid must be strictly increasing");
  }
  if (strategy == Strategy::kVtvEnsemble && alpha_grid.size() != ensemble_size)
    fail("vtv_ensemble needs one alpha per member (" + std::to_string(alpha_grid.size()) + " alphas, ensemble_size " +
         std::to_string(ensemble_size) + ")");
  if (!(augment.gamma_min > 0.0 && augment.gamma_min <= augment.gamma_max)) fail("gamma range must be positive and ordered");
  if (!(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0)) fail("flip probability must lie in [0, 1]");
  loss.validate();
  model.validate();
  if (patch_size % model.spatial_divisor() != 0)
    fail("patch_size " + std::to_string(patch_size) + " must be a multiple of " + std::to_string(model.spatial_divisor()));
  if (fixed_h) fixed_h->validate();
}

std::string format_log_line(const LogEntry& e) {
  char buf[256];
  char alpha[32] = "-";
  if (e.alpha) std::snprintf(alpha, sizeof alpha, "%.6f", *e.alpha);
  std::snprintf(buf, sizeof buf, "member=%zu epoch=%zu step=%zu alpha=%s loss=%.9g elapsed_ms=%.1f batch_seed=%llu",
                e.member, e.epoch, e.step, alpha, e.loss, e.elapsed_ms,
                static_cast<unsigned long long>(e.batch_seed));
  return buf;
}

Minibatch make_minibatch(const std::vector<const SyntheticSample*>& samples, std::size_t patch,
                         const AugmentConfig& aug, std::mt19937_64& rng) {
  const std::size_t n = samples.size();
  Minibatch mb{Tensor(Shape{n, 1, patch, patch}), Tensor(Shape{n, 1, patch, patch})};
  for (std::size_t b = 0; b < n; ++b) {
    SyntheticSample s = random_crop(*samples[b], patch, rng, aug.foreground_retries);
    if (aug.enabled) {
      random_flip(s, rng, aug.flip_probability);
      random_gamma(s.image, rng, aug.gamma_min, aug.gamma_max);
    }
    std::copy(s.image.values.begin(), s.image.values.end(), mb.image.mutable_ptr() + b * patch * patch);
    for (std::size_t i = 0; i < s.annotation.size(); ++i)
      mb.label.mutable_ptr()[b * patch * patch + i] = s.annotation.values[i];
  }
  return mb;
}

namespace {

enum class Objective { kDice, kDiceCe, kTversky, kSampledTversky };

struct MemberPlan {
  std::string name;
  std::uint64_t seed;
  Objective objective;
  TverskyParams h;
  double dropout = 0.0;
  std::vector<const SyntheticSample*> data;
  std::map<std::string, std::string> tags;
};

using Clock = std::chrono::steady_clock;

std::string alpha_text(double a) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, a);
  return ec == std::errc{} ? std::string(buf, end) : std::to_string(a);
}

TrainedMember train_member(const MemberPlan& plan, std::size_t member_index, const TrainConfig& cfg,
                           ModelKind kind, const LogSink& log, std::vector<double>& epoch_loss) {
  if (plan.data.empty()) throw std::invalid_argument("training set is empty");
  const auto t0 = Clock::now();
  ModelSpec spec = cfg.model;
  spec.kind = kind;
  SegmentationNet net = SegmentationNet::create(spec, plan.seed);
  std::vector<Tensor> params = net.trainable();
  AdamState state;
  state.config = AdamConfig{cfg.effective_lr(), 0.9, 0.999, 1e-8, cfg.weight_decay};

  const std::size_t n = plan.data.size();
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(sample_seed(plan.seed, 0x5eed0000ULL + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, n - first);
      // A trailing single sample would switch batch norm to running statistics.
      if (nb < 2 && n >= 2) break;
      const std::uint64_t batch_seed = sample_seed(plan.seed, step);
      std::mt19937_64 rng(batch_seed);
      std::vector<const SyntheticSample*> picked;
      for (std::size_t i = 0; i < nb; ++i) picked.push_back(plan.data[order[first + i]]);
      Minibatch mb = make_minibatch(picked, cfg.patch_size, cfg.augment, rng);

      std::optional<TverskyParams> h;
      if (plan.objective == Objective::kSampledTversky) h = cfg.fixed_h ? *cfg.fixed_h : sample_tversky_params(rng);
      ForwardOptions opts;
      opts.training = true;
      opts.dropout = plan.dropout;
      opts.rng = &rng;

      Tape tape;
      double loss_value = 0.0;
      {
        TapeGuard guard(tape);
        const Tensor p = net.forward(mb.image, opts, kind == ModelKind::kHyper ? h : std::nullopt);
        Tensor loss;
        switch (plan.objective) {
          case Objective::kDice: loss = soft_dice_loss(p, mb.label, cfg.loss.smooth, Reduction::kPerSampleMean); break;
          case Objective::kDiceCe:
            loss = dice_ce_loss(p, mb.label, cfg.loss.dice_ce_mix, cfg.loss.smooth, Reduction::kPerSampleMean);
            break;
          case Objective::kTversky:
            loss = tversky_loss(p, mb.label, plan.h, cfg.loss.smooth, Reduction::kPerSampleMean);
            break;
          case Objective::kSampledTversky:
            loss = tversky_loss(p, mb.label, *h, cfg.loss.smooth, Reduction::kPerSampleMean);
            break;
        }
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
          throw TrainingDiverged(plan.name + ": non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(step) + " (minibatch seed " + std::to_string(batch_seed) + ")",
                                 batch_seed);
        tape.backward(loss);
      }
      try {
        adam_step(params, state);
      } catch (const NonFiniteGradient& e) {
        throw TrainingDiverged(plan.name + ": " + e.what() + " (minibatch seed " + std::to_string(batch_seed) + ")",
                               batch_seed);
      }
      net.zero_grad();
      loss_sum += loss_value;
      ++batches;
      if (log) {
        LogEntry e;
        e.member = member_index;
        e.epoch = epoch;
        e.step = step;
        if (plan.objective == Objective::kTversky) e.alpha = plan.h.alpha;
        if (plan.objective == Objective::kSampledTversky) e.alpha = h->alpha;
        e.loss = loss_value;
        e.elapsed_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        e.batch_seed = batch_seed;
        log(e);
      }
      ++step;
    }
    epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
  }

  TrainingMetadata meta{plan.seed, cfg.epochs, epoch_loss, plan.tags};
  meta.tags["strategy"] = to_string(cfg.strategy);
  meta.tags["member"] = plan.name;
  std::optional<AdamState> optim;
  if (state.t > 0) optim = state;
  TrainedMember out{plan.name, Checkpoint{std::move(net), std::move(optim), std::move(meta)}, 0.0};
  out.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

TrainOutput run_plans(const std::vector<MemberPlan>& plans, const TrainConfig& cfg, ModelKind kind,
                      const LogSink& log) {
  TrainOutput out;
  out.report.seed = cfg.seed;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    std::vector<double> curve;
    out.members.push_back(train_member(plans[i], i, cfg, kind, log, curve));
    out.report.epoch_loss.push_back(std::move(curve));
    out.report.wall_seconds += out.members.back().wall_seconds;
  }
  return out;
}

std::vector<const SyntheticSample*> pointers(const std::vector<SyntheticSample>& data) {
  std::vector<const SyntheticSample*> out;
  for (const auto& s : data) out.push_back(&s);
  return out;
}

TrainConfig with_strategy(TrainConfig cfg, Strategy s) {
  cfg.strategy = s;
  cfg.validate();
  return cfg;
}

}  // namespace

TrainOutput train_single(const std::vector<SyntheticSample>& data, const TrainConfig& in, const LogSink& log) {
  const Strategy s = in.strategy == Strategy::kSingleDice || in.strategy == Strategy::kDropout ? in.strategy
                                                                                                : Strategy::kSingleDiceCe;
  const TrainConfig cfg = with_strategy(in, s);
  MemberPlan plan{"model", cfg.seed, Objective::kDiceCe, TverskyParams{}, 0.0, pointers(data), {}};
  if (s == Strategy::kSingleDice) plan.objective = Objective::kDice;
  if (s == Strategy::kDropout) plan.dropout = cfg.dropout;
  return run_plans({plan}, cfg, ModelKind::kPlain, log);
}

TrainOutput train_vtv_ensemble(const std::vector<SyntheticSample>& data, const TrainConfig& in, const LogSink& log) {
  const TrainConfig cfg = with_strategy(in, Strategy::kVtvEnsemble);
  std::vector<MemberPlan> plans;
  for (std::size_t i = 0; i < cfg.alpha_grid.size(); ++i) {
    const double a = cfg.alpha_grid[i];
    plans.push_back({member_dir_name_for_alpha(a), cfg.seed + i, Objective::kTversky, TverskyParams::from_alpha(a), 0.0,
                     pointers(data), {{"alpha", alpha_text(a)}}});
  }
  return run_plans(plans, cfg, ModelKind::kPlain, log);
}

TrainOutput train_subset_ensemble(const std::vector<SyntheticSample>& data, const TrainConfig& in,
                                  const LogSink& log) {
  const TrainConfig cfg = with_strategy(in, Strategy::kSubsetEnsemble);
  const auto folds = kfold_split(data.size(), cfg.ensemble_size, cfg.seed);
  std::vector<MemberPlan> plans;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    MemberPlan p{"fold_" + std::to_string(i), cfg.seed + i, Objective::kDiceCe, TverskyParams{}, 0.0, {},
                 {{"fold", std::to_string(i)}}};
    for (std::size_t j = 0; j < data.size(); ++j)
      if (!std::binary_search(folds[i].begin(), folds[i].end(), j)) p.data.push_back(&data[j]);
    plans.push_back(std::move(p));
  }
  return run_plans(plans, cfg, ModelKind::kPlain, log);
}

TrainOutput train_hypernet(const std::vector<SyntheticSample>& data, const TrainConfig& in, const LogSink& log) {
  const TrainConfig cfg = with_strategy(in, Strategy::kHypernet);
  MemberPlan plan{"model", cfg.seed, Objective::kSampledTversky, TverskyParams{}, 0.0, pointers(data), {}};
  return run_plans({plan}, cfg, ModelKind::kHyper, log);
}

TrainOutput train(const std::vector<SyntheticSample>& data, const TrainConfig& cfg, const LogSink& log) {
  switch (cfg.strategy) {
    case Strategy::kSingleDice:
    case Strategy::kSingleDiceCe:
    case Strategy::kDropout: return train_single(data, cfg, log);
    case Strategy::kSubsetEnsemble: return train_subset_ensemble(data, cfg, log);
    case Strategy::kVtvEnsemble: return train_vtv_ensemble(data, cfg, log);
    case Strategy::kHypernet: return train_hypernet(data, cfg, log);
  }
  throw std::logic_error("unhandled strategy");
}

std::string member_dir_name_for_alpha(double alpha) { return "member_" + alpha_text(alpha); }

std::vector<std::filesystem::path> save_members(const TrainOutput& out, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> paths;
  for (const auto& m : out.members) {
    paths.push_back(dir / m.name);
    save_checkpoint(m.checkpoint, paths.back());
  }
  return paths;
}

}  // namespace hyperseg
