#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ottabp/adapt.hpp"
#include "ottabp/common.hpp"
#include "ottabp/model.hpp"
#include "ottabp/signal.hpp"

namespace ottabp {

// Pearson correlation is undefined on zero-variance input.
class ZeroVarianceError : public DataError {
 public:
  using DataError::DataError;
};

double mae(const std::vector<double>& preds, const std::vector<double>& truths);
double pearson(const std::vector<double>& preds, const std::vector<double>& truths);

struct RunMetrics {
  double mae_sbp = 0.0, mae_dbp = 0.0;  // mmHg
  std::optional<double> corr_sbp, corr_dbp;  // absent when undefined, never 0
  int n_eval = 0;
};

// Metrics over exactly the logged (unlabeled) predictions that carry ground
// truth. Throws DataError when fewer than two evaluable entries exist.
RunMetrics evaluate(const PredictionLog& log);

// Frozen-model predictions on every event: no buffer, no updates. Equals
// run_subject with lr_test=0, F=none, N0=0 prediction-for-prediction.
PredictionLog baseline_log(const ModelParams& params, const NormStats& stats,
                           const SubjectStream& stream);
RunMetrics baseline_no_adapt(const ModelParams& params, const NormStats& stats,
                             const std::vector<SubjectStream>& streams);

struct SweepGrid {
  std::vector<std::optional<int>> frequencies = {std::nullopt, 100, 50, 20, 10};
  std::vector<int> init_label_counts = {0, 10, 20, 50};
  std::vector<std::uint64_t> seeds = {1};

  void validate() const;
};

// Aggregate of one (frequency, init labels) grid cell: unweighted mean over
// subjects and seeds. A cell with any failed run reports errors instead of
// values.
struct CellStats {
  int n_runs = 0;
  double mae_sbp = 0.0, mae_dbp = 0.0;
  std::optional<double> corr_sbp, corr_dbp;
  double n_eval_mean = 0.0;
  std::vector<std::string> errors;

  bool failed() const { return !errors.empty(); }
};

struct ReportTable {
  SweepGrid grid;
  // Keyed by (frequency index, init-label index) into the grid axes.
  std::map<std::pair<std::size_t, std::size_t>, CellStats> cells;
  CellStats baseline;
  std::string config_hash;
  std::uint64_t seed = 0;

  bool any_failed() const;
};

// Full Table-1-style sweep: for every (F, N0, subject, seed) attach the
// label schedule, run the subject, evaluate; aggregate per cell. Runs are
// independent; jobs > 1 executes them on a small thread pool with a keyed,
// order-independent merge. A nonempty predictions_dir gets one JSONL
// prediction log per run.
ReportTable sweep(const SweepGrid& grid, const ModelParams& pretrained,
                  const NormStats& stats, const std::vector<SubjectStream>& streams,
                  const AdaptConfig& cfg_template, int jobs = 1,
                  const std::string& predictions_dir = "");

// frequency,init_labels,metric,target,value,n_eval,n_runs rows; a leading
// '#' comment carries the config hash and seed.
void write_report_csv(const ReportTable& table, const std::string& path);

// Aligned text table: rows = injection frequency (incl. N/A), columns =
// initial-label counts, MAE/correlation sub-rows, SBP/DBP sub-columns.
void write_report_text(const ReportTable& table, std::ostream& out);
void write_report_text(const ReportTable& table, const std::string& path);

}  // namespace ottabp
