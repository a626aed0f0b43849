#include "ottabp/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace ottabp {

void AdaptConfig::validate() const {
  if (injection_frequency && *injection_frequency <= 0)
    throw ConfigError("adapt.injection_frequency must be positive when set");
  if (init_labels < 0) throw ConfigError("adapt.init_labels must be nonnegative");
  if (reps_per_batch < 1) throw ConfigError("adapt.reps_per_batch must be at least 1");
  if (!(lr_test >= 0.0) || !std::isfinite(lr_test))
    throw ConfigError("adapt.lr_test must be finite and nonnegative");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    throw ConfigError("adapt.mask_ratio must be in [0, 1]");
  if (!(shrinkage.a > 0.0) || !(shrinkage.c > 0.0))
    throw ConfigError("adapt.shrinkage a and c must be positive");
  if (loss_weights.lambda_pred < 0.0)
    throw ConfigError("adapt.lambda_pred must be nonnegative");
  if (init_finetune_epochs < 0)
    throw ConfigError("adapt.init_finetune_epochs must be nonnegative");
  comp.validate();
  DualQueueBuffer probe(cap_unlabel, cap_label);  // validates the 2:1 ratio
  (void)probe;
}

std::vector<int> label_schedule(int T, std::optional<int> F) {
  if (T < 1) throw std::invalid_argument("label_schedule: T must be at least 1");
  if (!F) return {};
  if (*F <= 0) throw ConfigError("label injection frequency must be positive");
  std::vector<int> schedule;
  for (int i = *F; i <= T; i += *F) schedule.push_back(i);
  return schedule;
}

SubjectStream attach_labels(SubjectStream stream, const std::vector<int>& schedule) {
  std::vector<bool> labeled(stream.events.size() + 1, false);
  for (int pos : schedule)
    if (pos >= 1 && pos <= static_cast<int>(stream.events.size()))
      labeled[static_cast<std::size_t>(pos)] = true;
  for (std::size_t j = 0; j < stream.events.size(); ++j) {
    StreamEvent& ev = stream.events[j];
    if (labeled[j + 1]) {
      if (!ev.truth)
        throw ConfigError("subject " + stream.subject_id + ": scheduled label at position " +
                          std::to_string(j + 1) + " but the event has no ground truth");
      ev.label = ev.truth;
    } else {
      ev.label.reset();
    }
  }
  return stream;
}

namespace {

void check_window(const ModelParams& params, const SignalSegment& seg) {
  const int want = params.geo.window_length();
  if (static_cast<int>(seg.values.size()) != want)
    throw ConfigError("segment length " + std::to_string(seg.values.size()) +
                      " does not match model window length " + std::to_string(want));
}

TrainItem make_item(const SignalSegment& seg, const BPLabel* label,
                    const NormStats& stats, const ModelParams& params) {
  TrainItem item;
  item.tokens = tokenize(normalize_signal(seg.values, stats), params.geo.d);
  if (label) item.label = normalize_label(*label, stats);
  return item;
}

}  // namespace

ModelParams initial_finetune(ModelParams params,
                             const std::vector<std::pair<SignalSegment, BPLabel>>& init_labeled,
                             const NormStats& stats, const AdaptConfig& cfg) {
  if (init_labeled.empty()) return params;
  for (const auto& [seg, label] : init_labeled) check_window(params, seg);

  const auto n = init_labeled.size();
  const std::size_t batch_size = std::min<std::size_t>(32, n);
  Rng rng(mix_seed(cfg.seed, 0x696e6974ull));  // init-finetune stream

  std::vector<TrainItem> base;
  base.reserve(n);
  for (const auto& [seg, label] : init_labeled)
    base.push_back(make_item(seg, &label, stats, params));

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<TrainItem> batch;
  for (int epoch = 0; epoch < cfg.init_finetune_epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      batch.clear();
      for (std::size_t k = start; k < end; ++k) {
        TrainItem item = base[perm[k]];
        item.mask = sample_mask(params.geo.S, cfg.mask_ratio, rng);
        batch.push_back(std::move(item));
      }
      try {
        auto [grads, loss] = backward(params, batch, cfg.loss_weights, cfg.shrinkage);
        sgd_step(params, grads, cfg.lr_test);
      } catch (const NumericError& e) {
        throw NumericError("initial fine-tuning failed at epoch " + std::to_string(epoch) +
                           ": " + e.what());
      }
    }
  }
  return params;
}

std::optional<Prediction> otta_step(AdaptState& state, const StreamEvent& event,
                                    const AdaptConfig& cfg, const NormStats& stats) {
  check_window(state.params, event.segment);
  state.buffer.push(event);
  ++state.events_seen;

  // A leading labeled event can leave q_unlabel empty; updates start once
  // the first unlabeled event arrives.
  if (state.buffer.unlabel_size() > 0) {
    std::vector<SampledItem> sampled;
    std::vector<TrainItem> batch;
    if (!cfg.resample_per_rep) sampled = state.buffer.sample_batch(cfg.comp, state.rng);
    for (int rep = 0; rep < cfg.reps_per_batch; ++rep) {
      if (cfg.resample_per_rep) sampled = state.buffer.sample_batch(cfg.comp, state.rng);
      batch.clear();
      batch.reserve(sampled.size());
      for (const SampledItem& s : sampled) {
        TrainItem item = make_item(*s.segment, s.label, stats, state.params);
        item.mask = sample_mask(state.params.geo.S, cfg.mask_ratio, state.rng);
        batch.push_back(std::move(item));
      }
      try {
        auto [grads, loss] = backward(state.params, batch, cfg.loss_weights, cfg.shrinkage);
        sgd_step(state.params, grads, cfg.lr_test);
        ++state.updates_applied;
      } catch (const NumericError& e) {
        throw NumericError("adaptation failed at event " +
                           std::to_string(event.segment.index) + ": " + e.what());
      }
    }
    bool finite = true;
    for_each_tensor(state.params, [&](const std::string&, Eigen::MatrixXd& t) {
      finite = finite && t.allFinite();
    });
    if (!finite)
      throw NumericError("adaptation failed at event " +
                         std::to_string(event.segment.index) +
                         ": parameters became non-finite");
  }

  if (event.label) return std::nullopt;
  const Eigen::MatrixXd tokens =
      tokenize(normalize_signal(event.segment.values, stats), state.params.geo.d);
  const Eigen::Vector2d y = forward_predict(state.params, tokens);
  const BPLabel mmhg = denormalize_label(y, stats);
  return Prediction{mmhg.sbp, mmhg.dbp};
}

PredictionLog run_subject(const ModelParams& pretrained, const NormStats& stats,
                          const SubjectStream& stream, const AdaptConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(stream.init_labeled.size()) < cfg.init_labels)
    throw ConfigError("subject " + stream.subject_id + ": requested " +
                      std::to_string(cfg.init_labels) + " initial labels, stream has " +
                      std::to_string(stream.init_labeled.size()));

  std::vector<std::pair<SignalSegment, BPLabel>> init(
      stream.init_labeled.begin(),
      stream.init_labeled.begin() + cfg.init_labels);

  ModelParams params = initial_finetune(pretrained, init, stats, cfg);
  AdaptConfig seeded = cfg;
  seeded.seed = mix_seed(cfg.seed, fnv1a64(stream.subject_id), 0x73747265ull);
  AdaptState state(std::move(params), seeded);

  PredictionLog log;
  log.subject_id = stream.subject_id;
  try {
    for (const StreamEvent& ev : stream.events) {
      const auto pred = otta_step(state, ev, cfg, stats);
      if (pred) {
        log.entries.push_back({ev.segment.index, pred->sbp, pred->dbp, ev.truth});
      } else {
        log.labeled_indices.push_back(ev.segment.index);
      }
    }
  } catch (const NumericError& e) {
    throw NumericError("subject " + stream.subject_id + ": " + e.what());
  }
  return log;
}

void write_prediction_jsonl(const PredictionLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write prediction log: " + path);
  char buf[256];
  for (const PredEntry& e : log.entries) {
    if (e.truth) {
      std::snprintf(buf, sizeof(buf),
                    "{\"index\":%d,\"pred_sbp\":%.17g,\"pred_dbp\":%.17g,"
                    "\"true_sbp\":%.17g,\"true_dbp\":%.17g}\n",
                    e.index, e.pred_sbp, e.pred_dbp, e.truth->sbp, e.truth->dbp);
    } else {
      std::snprintf(buf, sizeof(buf),
                    "{\"index\":%d,\"pred_sbp\":%.17g,\"pred_dbp\":%.17g,"
                    "\"true_sbp\":null,\"true_dbp\":null}\n",
                    e.index, e.pred_sbp, e.pred_dbp);
    }
    out << buf;
  }
  if (!out) throw ConfigError("prediction log write failed: " + path);
}

}  // namespace ottabp
