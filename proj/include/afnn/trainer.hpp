#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afnn/data.hpp"
#include "afnn/losses.hpp"
#include "afnn/metrics.hpp"
#include "afnn/model.hpp"
#include "afnn/optim.hpp"
#include "afnn/parallel.hpp"

namespace afnn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StageConfig {
  std::size_t epochs = 0;
  double base_lr = 4e-5;
  bool freeze_backbone = false;
  double lambda_seg = 1.0;
  double lambda_rec = 1.0;
  double lambda_cls = 1.0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 8;
  std::size_t image_size = 64;
  int unseen_domain = 0;
  double alpha = 0.4;
  double beta = 0.6;
  bool balanced = true;
  bool augment = true;
  double val_fraction = 0.1;
  double threshold = 0.5;
  std::vector<StageConfig> stages{{10, 4e-5, true, 1.0, 1.0, 1.0}, {20, 4e-5, false, 2.0, 0.5, 0.5}};
  ModelConfig model;

  LossWeights weights(const StageConfig& s) const { return {alpha, beta, s.lambda_seg, s.lambda_rec, s.lambda_cls}; }

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (image_size < 1 || image_size % model.spatial_divisor() != 0) {
      throw ConfigError("image_size must be a positive multiple of " + std::to_string(model.spatial_divisor()));
    }
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in [0, 1)");
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must be in (0, 1)");
    if (stages.empty()) throw ConfigError("at least one stage is required");
    for (const auto& s : stages) {
      if (!(s.base_lr > 0) || !std::isfinite(s.base_lr)) throw ConfigError("stage base_lr must be > 0");
      try {
        weights(s).validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    if (unseen_domain < 0 || static_cast<std::size_t>(unseen_domain) >= model.n_domains) {
      throw ConfigError("unseen_domain " + std::to_string(unseen_domain) + " outside [0, " +
                        std::to_string(model.n_domains) + ")");
    }
    try {
      model.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// JSON (unknown keys are rejected)

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; })) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      if (!j.at(key).is_number_unsigned()) throw ConfigError(where + "." + key + " must be a non-negative integer");
    }
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"adaptor_channels", m.adaptor.channels},
          {"levels", m.fusion.levels},
          {"channels", m.fusion.channels},
          {"fusion_dim", m.fusion.fusion_dim},
          {"kernels", m.fusion.kernels},
          {"n_domains", m.n_domains},
          {"use_adaptor", m.use_adaptor},
          {"use_fusion", m.use_fusion},
          {"use_multitask", m.use_multitask}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  const std::string w = "model";
  detail::reject_unknown(j, {"adaptor_channels", "levels", "channels", "fusion_dim", "kernels", "n_domains",
                             "use_adaptor", "use_fusion", "use_multitask"},
                         w);
  ModelConfig m;
  detail::read_opt(j, "adaptor_channels", m.adaptor.channels, w);
  detail::read_opt(j, "levels", m.fusion.levels, w);
  detail::read_opt(j, "channels", m.fusion.channels, w);
  m.fusion.fusion_dim = m.fusion.channels.empty() ? 0 : m.fusion.channels.back();
  detail::read_opt(j, "fusion_dim", m.fusion.fusion_dim, w);
  detail::read_opt(j, "kernels", m.fusion.kernels, w);
  detail::read_opt(j, "n_domains", m.n_domains, w);
  detail::read_opt(j, "use_adaptor", m.use_adaptor, w);
  detail::read_opt(j, "use_fusion", m.use_fusion, w);
  detail::read_opt(j, "use_multitask", m.use_multitask, w);
  return m;
}

inline nlohmann::json to_json(const StageConfig& s) {
  return {{"epochs", s.epochs},           {"base_lr", s.base_lr},       {"freeze_backbone", s.freeze_backbone},
          {"lambda_seg", s.lambda_seg}, {"lambda_rec", s.lambda_rec}, {"lambda_cls", s.lambda_cls}};
}

inline nlohmann::json to_json(const RunConfig& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages) stages.push_back(to_json(s));
  return {{"seed", r.seed},
          {"batch_size", r.batch_size},
          {"image_size", r.image_size},
          {"unseen_domain", r.unseen_domain},
          {"alpha", r.alpha},
          {"beta", r.beta},
          {"balanced", r.balanced},
          {"augment", r.augment},
          {"val_fraction", r.val_fraction},
          {"threshold", r.threshold},
          {"stages", stages},
          {"model", to_json(r.model)}};
}

/// Parses and validates a run configuration; absent keys keep their defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  const std::string w = "run config";
  detail::reject_unknown(j, {"seed", "batch_size", "image_size", "unseen_domain", "alpha", "beta", "balanced",
                             "augment", "val_fraction", "threshold", "stages", "model"},
                         w);
  RunConfig r;
  detail::read_opt(j, "seed", r.seed, w);
  detail::read_opt(j, "batch_size", r.batch_size, w);
  detail::read_opt(j, "image_size", r.image_size, w);
  detail::read_opt(j, "unseen_domain", r.unseen_domain, w);
  detail::read_opt(j, "alpha", r.alpha, w);
  detail::read_opt(j, "beta", r.beta, w);
  detail::read_opt(j, "balanced", r.balanced, w);
  detail::read_opt(j, "augment", r.augment, w);
  detail::read_opt(j, "val_fraction", r.val_fraction, w);
  detail::read_opt(j, "threshold", r.threshold, w);
  if (j.contains("stages")) {
    if (!j["stages"].is_array()) throw ConfigError("stages must be an array");
    r.stages.clear();
    for (const auto& js : j["stages"]) {
      const std::string ws = "stages[" + std::to_string(r.stages.size()) + "]";
      detail::reject_unknown(js, {"epochs", "base_lr", "freeze_backbone", "lambda_seg", "lambda_rec", "lambda_cls"},
                             ws);
      StageConfig s;
      detail::read_opt(js, "epochs", s.epochs, ws);
      detail::read_opt(js, "base_lr", s.base_lr, ws);
      detail::read_opt(js, "freeze_backbone", s.freeze_backbone, ws);
      detail::read_opt(js, "lambda_seg", s.lambda_seg, ws);
      detail::read_opt(js, "lambda_rec", s.lambda_rec, ws);
      detail::read_opt(js, "lambda_cls", s.lambda_cls, ws);
      r.stages.push_back(s);
    }
  }
  if (j.contains("model")) r.model = model_config_from_json(j["model"]);
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Runs the model in eval mode over `samples` and scores both structures of
/// each sample. Records come out in sample order, disc before cup.
inline std::vector<metrics::MetricRecord> evaluate(ModelParams<float>& params, const std::vector<Sample>& samples,
                                                   double threshold = 0.5, std::size_t batch = 16) {
  if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("evaluate: threshold must be in (0, 1)");
  std::vector<metrics::MetricRecord> records(2 * samples.size());
  const std::size_t chunks = (samples.size() + batch - 1) / batch;
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = c * batch; i < std::min(samples.size(), (c + 1) * batch); ++i) idx.push_back(i);
    auto b = make_batch<float>(samples, idx);
    const auto probs = predict(params, b.images);
    const std::size_t h = probs.dim(2), w = probs.dim(3), plane = h * w;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& s = samples[idx[k]];
      for (std::size_t ch = 0; ch < 2; ++ch) {
        const auto pred = metrics::BinaryMask::threshold(
            std::span<const float>(probs.data().data() + (2 * k + ch) * plane, plane), h, w, threshold);
        const auto& truth = ch == 0 ? s.od : s.oc;
        auto& r = records[2 * idx[k] + ch];
        r.domain_id = s.domain_id;
        r.structure = ch == 0 ? metrics::Structure::kOpticDisc : metrics::Structure::kOpticCup;
        r.dsc = metrics::dsc(truth, pred);
        r.hd = metrics::hausdorff(truth, pred);
        r.asd = metrics::asd(truth, pred);
        r.sample_id = s.id;
      }
    }
  });
  return records;
}

// ---------------------------------------------------------------------------
// Training

struct HistoryRow {
  std::size_t epoch = 0;  ///< global, counting across stages
  std::size_t stage = 0;  ///< 1-based
  double lr = 0.0;        ///< at the epoch's first step
  LossReport loss;        ///< means over the epoch's batches
  double val_dsc_od = 0.0;  ///< NaN without a validation split
  double val_dsc_oc = 0.0;
};

inline constexpr const char* kHistoryCsvHeader = "epoch,stage,lr,total,seg,rec,cls,val_dsc_od,val_dsc_oc";

inline void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows) {
  os << kHistoryCsvHeader << '\n';
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.stage << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.seg << ',' << r.loss.rec
       << ',' << r.loss.cls << ',' << r.val_dsc_od << ',' << r.val_dsc_oc << '\n';
  }
}

struct TrainResult {
  ModelParams<float> params;
  std::vector<HistoryRow> history;
  std::optional<LossReport> initial;  ///< loss of the very first batch, before any update
  std::size_t steps = 0;
};

struct TrainHooks {
  /// Called after each stage with its 1-based index.
  std::function<void(std::size_t, const ModelParams<float>&)> on_stage_end;
  /// Called with every batch's domain ids before the gradient step.
  std::function<void(const std::vector<int>&)> on_batch;
};

/// Samples of the training domains brought to the configured image size.
inline std::vector<Sample> prepare_training_set(const RunConfig& run, const std::vector<Sample>& data) {
  std::vector<Sample> out;
  for (const auto& s : data) {
    if (s.domain_id == run.unseen_domain) continue;
    if (s.domain_id < 0 || static_cast<std::size_t>(s.domain_id) >= run.model.n_domains) {
      throw ConfigError("sample " + s.id + " has domain " + std::to_string(s.domain_id) + " outside the model's " +
                        std::to_string(run.model.n_domains) + " domains");
    }
    if (s.height() == run.image_size && s.width() == run.image_size) {
      out.push_back(s);
    } else {
      out.push_back(crop_resize(s, std::min(s.height(), s.width()), run.image_size));
    }
  }
  return out;
}

/// Deterministic per-domain hold-out of `fraction` of the samples.
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(const std::vector<Sample>& samples,
                                                                            double fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < samples.size(); ++i) by_domain[samples[i].domain_id].push_back(i);
  std::vector<bool> is_val(samples.size(), false);
  for (auto& [d, idx] : by_domain) {
    Rng rng(mix_seed(seed, 0x5a17 + static_cast<std::uint64_t>(d)));
    rng.shuffle(idx);
    const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < take; ++k) is_val[idx[k]] = true;
  }
  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) (is_val[i] ? out.second : out.first).push_back(samples[i]);
  return out;
}

/// Two-stage optimization. Stage k freezes the backbone when configured,
/// runs its own cosine schedule, and uses its own loss coefficients.
inline TrainResult train(const RunConfig& run, const std::vector<Sample>& data, const TrainHooks& hooks = {}) {
  run.validate();
  const auto prepared = prepare_training_set(run, data);
  auto [train_set, val_set] = split_validation(prepared, run.val_fraction, run.seed);
  std::set<int> domains;
  for (const auto& s : train_set) domains.insert(s.domain_id);
  if (domains.size() < 2) throw ConfigError("training needs at least two source domains after excluding the unseen one");

  TrainResult result{init_params<float>(run.model, run.seed), {}, {}, 0};
  auto& params = result.params;
  Adam<float> adam;
  const AugmentOptions aug_opt = [&] {
    AugmentOptions o;
    o.fill = channel_means(train_set);
    return o;
  }();
  BatchIterator iter(train_set, std::min(run.batch_size, train_set.size()), run.seed, run.balanced);
  std::size_t global_epoch = 0;

  for (std::size_t si = 0; si < run.stages.size(); ++si) {
    const auto& stage = run.stages[si];
    const LossWeights w = run.weights(stage);
    for (auto& p : params.params()) p.frozen = stage.freeze_backbone && p.group == Group::kBackbone;
    const std::size_t total_steps = std::max<std::size_t>(1, stage.epochs * iter.batches_per_epoch());
    std::size_t step = 0;
    for (std::size_t e = 0; e < stage.epochs; ++e, ++global_epoch) {
      HistoryRow row;
      row.epoch = global_epoch;
      row.stage = si + 1;
      row.lr = cosine_lr(stage.base_lr, step, total_steps);
      const auto plan = iter.epoch(global_epoch);
      for (std::size_t bi = 0; bi < plan.size(); ++bi, ++step, ++result.steps) {
        std::vector<Sample> picked;
        for (auto i : plan[bi]) {
          if (train_set[i].domain_id == run.unseen_domain) {
            throw std::logic_error("unseen-domain sample " + train_set[i].id + " reached a training batch");
          }
          if (run.augment) {
            Rng rng(mix_seed(mix_seed(run.seed, result.steps), i));
            picked.push_back(augment(train_set[i], rng, aug_opt));
          } else {
            picked.push_back(train_set[i]);
          }
        }
        std::vector<std::size_t> all(picked.size());
        for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
        const auto batch = make_batch<float>(picked, all);
        if (hooks.on_batch) hooks.on_batch(batch.domains);

        Tape<float> tape;
        Net<float> net(params, tape, Mode::kTrain);
        auto x = tape.constant(batch.images);
        auto out = model_forward(net, x, run.model.use_multitask);
        auto seg = weighted_dice_loss(out.seg, batch.masks, w);
        std::optional<Var<float>> rec, cls;
        if (out.rec) rec = rec_loss(add_scalar(scale(x, 2.0f), -1.0f), *out.rec);
        if (out.cls_logits) cls = cls_loss(*out.cls_logits, batch.domains);
        auto loss = total_loss(seg, rec, cls, w);
        if (!std::isfinite(loss.report.total)) {
          throw NumericalError("non-finite loss at stage " + std::to_string(si + 1) + ", epoch " +
                               std::to_string(global_epoch) + ", step " + std::to_string(step));
        }
        if (!result.initial) result.initial = loss.report;
        tape.backward(loss.total);
        std::map<std::string, Tensor<float>> grads;
        for (const auto& [name, var] : net.bound()) {
          if (var.requires_grad()) grads.emplace(name, tape.grad(var));
        }
        try {
          adam.step(params, grads, cosine_lr(stage.base_lr, step, total_steps));
        } catch (const NumericalError& ex) {
          throw NumericalError(std::string(ex.what()) + " at stage " + std::to_string(si + 1) + ", epoch " +
                               std::to_string(global_epoch) + ", step " + std::to_string(step));
        }
        row.loss.total += loss.report.total;
        row.loss.seg += loss.report.seg;
        row.loss.seg_od += loss.report.seg_od;
        row.loss.seg_oc += loss.report.seg_oc;
        row.loss.rec += loss.report.rec;
        row.loss.cls += loss.report.cls;
      }
      const double nb = static_cast<double>(plan.size());
      for (double* v : {&row.loss.total, &row.loss.seg, &row.loss.seg_od, &row.loss.seg_oc, &row.loss.rec,
                        &row.loss.cls})
        *v /= nb;
      if (val_set.empty()) {
        row.val_dsc_od = row.val_dsc_oc = std::numeric_limits<double>::quiet_NaN();
      } else {
        const auto summary = metrics::summarize(evaluate(params, val_set, run.threshold));
        row.val_dsc_od = summary.at(metrics::Structure::kOpticDisc).mean_dsc;
        row.val_dsc_oc = summary.at(metrics::Structure::kOpticCup).mean_dsc;
      }
      result.history.push_back(row);
    }
    if (hooks.on_stage_end) hooks.on_stage_end(si + 1, params);
  }
  for (auto& p : params.params()) p.frozen = false;
  return result;
}

}  // namespace afnn
