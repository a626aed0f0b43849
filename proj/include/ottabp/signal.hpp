#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ottabp/common.hpp"

namespace ottabp {

// One fixed-length signal window; the unit that streams in.
struct SignalSegment {
  Eigen::VectorXd values;  // length L, normalized amplitude
  std::string subject_id;
  int index = 0;  // arrival order within subject
};

struct BPLabel {
  double sbp = 0.0;  // mmHg
  double dbp = 0.0;  // mmHg
};

// The atom of the target-domain stream. `label` is present only when the
// event is a calibration (injected-label) event; `truth` is kept for
// evaluation and may be absent for rows ingested without ground truth.
struct StreamEvent {
  SignalSegment segment;
  std::optional<BPLabel> label;
  std::optional<BPLabel> truth;
};

struct SubjectStream {
  std::string subject_id;
  std::vector<std::pair<SignalSegment, BPLabel>> init_labeled;
  std::vector<StreamEvent> events;
};

// Z-score statistics fit on source-domain data.
struct NormStats {
  double signal_mean = 0.0, signal_std = 1.0;
  double sbp_mean = 0.0, sbp_std = 1.0;
  double dbp_mean = 0.0, dbp_std = 1.0;
};

enum class Domain { Source, Target };

// Synthetic stream generator settings. Signals are sums of per-subject
// harmonics; labels are linear in the harmonic amplitudes plus an optional
// target-domain drift term, so covariate shift (amplitude ranges) and label
// drift (drift_delta) are independently controllable.
struct SynthConfig {
  int L = 256;  // window length
  int d = 16;   // token length; L % d == 0
  int T = 500;  // stream length (events per subject)
  int n_init = 50;  // labeled samples generated ahead of the stream
  int n_harmonics = 3;
  std::vector<std::pair<double, double>> source_amp = {
      {0.6, 1.0}, {0.2, 0.5}, {0.1, 0.3}};
  std::vector<std::pair<double, double>> target_amp = {
      {0.75, 1.15}, {0.3, 0.6}, {0.15, 0.35}};
  double noise_sigma = 0.03;
  double drift_delta = 0.0;   // mmHg over the full stream, target domain only
  double heart_cycles = 8.0;  // cycles per window
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError naming the bad field
};

// Splits a segment of length L into S = L/d rows of width d.
// Row i holds values[i*d .. (i+1)*d); concatenating rows reproduces values.
Eigen::MatrixXd tokenize(const Eigen::VectorXd& values, int d);
Eigen::MatrixXd tokenize(const SignalSegment& segment, int d);

// Inverse of tokenize.
Eigen::VectorXd flatten_tokens(const Eigen::MatrixXd& tokens);

// Means/stds pooled over all signal values and over labels; population std.
NormStats fit_norm(const std::vector<std::pair<SignalSegment, BPLabel>>& source);
NormStats fit_norm(const std::vector<SubjectStream>& source);

Eigen::VectorXd normalize_signal(const Eigen::VectorXd& values, const NormStats& stats);
Eigen::VectorXd denormalize_signal(const Eigen::VectorXd& values, const NormStats& stats);
Eigen::Vector2d normalize_label(const BPLabel& label, const NormStats& stats);
BPLabel denormalize_label(const Eigen::Vector2d& normalized, const NormStats& stats);

// Deterministic in (cfg, domain, subject_seed). Target streams carry truth
// on every event but no exposed labels (those are attached per schedule);
// source streams expose truth as labels directly.
SubjectStream synth_subject(const SynthConfig& cfg, Domain domain,
                            std::uint64_t subject_seed);

// CSV schema: subject_id,index,has_label,sbp,dbp,s0,...,s{L-1}.
// Header required; UTF-8; LF line endings. sbp/dbp cells may be empty only
// for rows that are unlabeled for evaluation too.
std::vector<SubjectStream> load_stream_csv(const std::string& path);

void write_events_csv(const std::string& path, const std::vector<SubjectStream>& streams);
// Emits init_labeled sets in the same schema (all has_label=1, index 0..n-1).
void write_init_csv(const std::string& path, const std::vector<SubjectStream>& streams);

// Moves the events of `init` (all labeled) into the matching stream's
// init_labeled list, keyed by subject_id.
std::vector<SubjectStream> attach_init(std::vector<SubjectStream> streams,
                                       const std::vector<SubjectStream>& init);

}  // namespace ottabp
