#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ottabp/buffer.hpp"
#include "ottabp/common.hpp"
#include "ottabp/model.hpp"
#include "ottabp/signal.hpp"

namespace ottabp {

struct AdaptConfig {
  std::optional<int> injection_frequency;  // F; nullopt = no injected labels
  int init_labels = 0;                     // N0
  int reps_per_batch = 10;                 // K updates per incoming event
  double lr_test = 1e-3;
  BatchComposition comp{24, 8};
  int cap_unlabel = 64;
  int cap_label = 32;
  double mask_ratio = 0.5;
  LossWeights loss_weights{1.0};
  ShrinkageParams shrinkage{10.0, 0.2};
  int init_finetune_epochs = 20;
  bool resample_per_rep = true;  // false: one batch per event reused K times
  std::uint64_t seed = 0;

  void validate() const;
};

// 1-based labeled positions {i : 1 <= i <= T, i mod F == 0}; empty when F
// is absent. Event with 0-based index j is labeled iff (j+1) is in the set.
std::vector<int> label_schedule(int T, std::optional<int> F);

// Sets event labels from their ground truth exactly per the schedule,
// clearing labels everywhere else.
SubjectStream attach_labels(SubjectStream stream, const std::vector<int>& schedule);

// One-time pre-stream fine-tuning on the initial labeled samples:
// init_finetune_epochs passes of combined-loss SGD at lr_test over batches
// of min(32, N0), fresh masks every pass. Empty input returns params
// unchanged.
ModelParams initial_finetune(ModelParams params,
                             const std::vector<std::pair<SignalSegment, BPLabel>>& init_labeled,
                             const NormStats& stats, const AdaptConfig& cfg);

struct AdaptState {
  ModelParams params;
  DualQueueBuffer buffer;
  Rng rng;
  long events_seen = 0;
  long updates_applied = 0;  // sgd_step invocations, for diagnostics

  AdaptState(ModelParams p, const AdaptConfig& cfg)
      : params(std::move(p)), buffer(cfg.cap_unlabel, cfg.cap_label), rng(cfg.seed) {}
};

struct Prediction {
  double sbp = 0.0;  // mmHg
  double dbp = 0.0;  // mmHg
};

// Push the event, run K buffer-sampled SGD updates (reconstruction loss for
// unlabeled items, combined loss for labeled ones), then predict on the
// post-update parameters for unlabeled events. Labeled events return no
// prediction.
std::optional<Prediction> otta_step(AdaptState& state, const StreamEvent& event,
                                    const AdaptConfig& cfg, const NormStats& stats);

struct PredEntry {
  int index = 0;
  double pred_sbp = 0.0, pred_dbp = 0.0;  // mmHg
  std::optional<BPLabel> truth;
};

// One entry per unlabeled event, none for labeled events.
struct PredictionLog {
  std::string subject_id;
  std::vector<PredEntry> entries;
  std::vector<int> labeled_indices;
};

// Full per-subject run: copy the pretrained parameters, apply the initial
// fine-tuning, process every event in order. The pretrained parameters are
// never mutated. Labels must already be attached per the schedule.
PredictionLog run_subject(const ModelParams& pretrained, const NormStats& stats,
                          const SubjectStream& stream, const AdaptConfig& cfg);

// JSON Lines prediction log: one record per predicted event.
void write_prediction_jsonl(const PredictionLog& log, const std::string& path);

}  // namespace ottabp
