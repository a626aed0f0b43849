// Command-line entry point: generate synthetic streams, pretrain the
// dual-head model, run the adaptation sweep, evaluate the frozen baseline.
//
// Exit codes: 0 success, 2 config/input error, 3 training failure,
// 4 partial sweep failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ottabp/config.hpp"
#include "ottabp/eval.hpp"

namespace fs = std::filesystem;
using namespace ottabp;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> subjects;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_jobs) {
  cmd->add_option("--config", flags.config_path, "JSON config file")->required();
  cmd->add_option("--out", flags.out, "output path override");
  cmd->add_option("--seed", flags.seed, "seed override");
  cmd->add_option("--subjects", flags.subjects, "subject count override");
  if (with_jobs) cmd->add_option("--jobs", flags.jobs, "parallel runs");
}

RunConfig load_with_overrides(const CommonFlags& flags) {
  RunConfig rc = load_run_config(flags.config_path);
  if (flags.seed) {
    rc.seed = *flags.seed;
    rc.synth.seed = *flags.seed;
    rc.adapt.seed = *flags.seed;
  }
  if (flags.subjects) {
    if (*flags.subjects < 1) throw ConfigError("--subjects must be positive");
    rc.synth_subjects = *flags.subjects;
  }
  return rc;
}

std::vector<SubjectStream> load_data(const RunConfig& rc, bool need_init) {
  if (rc.paths.data.empty()) throw ConfigError("config field paths.data is required");
  std::vector<SubjectStream> streams = load_stream_csv(rc.paths.data);
  if (streams.empty()) throw ConfigError("no subjects in " + rc.paths.data);
  if (!rc.paths.init_data.empty())
    streams = attach_init(std::move(streams), load_stream_csv(rc.paths.init_data));
  else if (need_init)
    throw ConfigError("config field paths.init_data is required when init labels > 0");
  return streams;
}

void check_geometry(const ModelGeometry& geo, const std::vector<SubjectStream>& streams) {
  for (const auto& s : streams) {
    if (s.events.empty()) continue;
    const auto L = static_cast<int>(s.events.front().segment.values.size());
    if (L != geo.window_length())
      throw ConfigError("geometry mismatch: checkpoint expects window length " +
                        std::to_string(geo.window_length()) + ", data has " +
                        std::to_string(L));
  }
}

int cmd_synth(const CommonFlags& flags) {
  RunConfig rc = load_with_overrides(flags);
  const std::string out = flags.out.empty() ? rc.paths.data : flags.out;
  if (out.empty()) throw ConfigError("no output path: set paths.data or pass --out");

  std::vector<SubjectStream> streams;
  streams.reserve(static_cast<std::size_t>(rc.synth_subjects));
  long events = 0;
  for (int i = 0; i < rc.synth_subjects; ++i) {
    streams.push_back(synth_subject(rc.synth, rc.synth_domain, static_cast<std::uint64_t>(i)));
    events += static_cast<long>(streams.back().events.size());
  }
  write_events_csv(out, streams);
  std::string init_note;
  if (rc.synth_domain == Domain::Target && rc.synth.n_init > 0) {
    const std::string init_out =
        rc.paths.init_data.empty() ? out + ".init.csv" : rc.paths.init_data;
    write_init_csv(init_out, streams);
    init_note = ", init samples in " + init_out;
  }
  std::cout << "wrote " << streams.size() << " subjects, " << events << " events to "
            << out << init_note << "\n";
  return 0;
}

int cmd_pretrain(const CommonFlags& flags) {
  RunConfig rc = load_with_overrides(flags);
  const std::string out = flags.out.empty() ? rc.paths.checkpoint : flags.out;
  if (out.empty()) throw ConfigError("no output path: set paths.checkpoint or pass --out");

  std::vector<SubjectStream> streams = load_data(rc, false);
  check_geometry(rc.geometry, streams);
  const NormStats stats = fit_norm(streams);

  std::vector<SubjectStream> normalized = streams;
  for (auto& s : normalized) {
    for (auto& [seg, label] : s.init_labeled) {
      seg.values = normalize_signal(seg.values, stats);
      const Eigen::Vector2d l = normalize_label(label, stats);
      label = BPLabel{l[0], l[1]};
    }
    for (auto& ev : s.events) {
      ev.segment.values = normalize_signal(ev.segment.values, stats);
      if (ev.label) {
        const Eigen::Vector2d l = normalize_label(*ev.label, stats);
        ev.label = BPLabel{l[0], l[1]};
      }
    }
  }

  ModelParams params = init_params(rc.geometry, rc.seed);
  PretrainReport report;
  params = pretrain(std::move(params), normalized, rc.pretrain, rc.seed, &report);
  save_checkpoint(out, Checkpoint{std::move(params), stats});
  std::printf("checkpoint written to %s (final recon loss %.6f, pred loss %.6f)\n",
              out.c_str(), report.final_recon_loss, report.final_pred_loss);
  return 0;
}

int cmd_sweep(const CommonFlags& flags) {
  RunConfig rc = load_with_overrides(flags);
  if (rc.paths.checkpoint.empty())
    throw ConfigError("config field paths.checkpoint is required");
  const std::string out_dir = flags.out.empty() ? rc.paths.report_dir : flags.out;
  if (out_dir.empty()) throw ConfigError("no output dir: set paths.report_dir or pass --out");

  const Checkpoint ckpt = load_checkpoint(rc.paths.checkpoint);
  bool need_init = false;
  for (int n : rc.sweep_grid.init_label_counts) need_init = need_init || n > 0;
  std::vector<SubjectStream> streams = load_data(rc, need_init);
  if (flags.subjects && static_cast<std::size_t>(*flags.subjects) < streams.size())
    streams.resize(static_cast<std::size_t>(*flags.subjects));
  check_geometry(ckpt.params.geo, streams);

  fs::create_directories(out_dir);
  if (!rc.paths.predictions_dir.empty()) fs::create_directories(rc.paths.predictions_dir);

  ReportTable table = sweep(rc.sweep_grid, ckpt.params, ckpt.stats, streams, rc.adapt,
                            flags.jobs, rc.paths.predictions_dir);
  table.config_hash = rc.config_hash;
  table.seed = rc.seed;
  write_report_csv(table, out_dir + "/report.csv");
  write_report_text(table, out_dir + "/report.txt");
  write_report_text(table, std::cout);
  if (table.any_failed()) {
    std::cerr << "some sweep cells failed; partial report written\n";
    return 4;
  }
  return 0;
}

int cmd_baseline(const CommonFlags& flags) {
  RunConfig rc = load_with_overrides(flags);
  if (rc.paths.checkpoint.empty())
    throw ConfigError("config field paths.checkpoint is required");

  const Checkpoint ckpt = load_checkpoint(rc.paths.checkpoint);
  std::vector<SubjectStream> streams = load_data(rc, false);
  if (flags.subjects && static_cast<std::size_t>(*flags.subjects) < streams.size())
    streams.resize(static_cast<std::size_t>(*flags.subjects));
  check_geometry(ckpt.params.geo, streams);

  if (!rc.paths.predictions_dir.empty()) {
    fs::create_directories(rc.paths.predictions_dir);
    for (const auto& s : streams)
      write_prediction_jsonl(baseline_log(ckpt.params, ckpt.stats, s),
                             rc.paths.predictions_dir + "/baseline_" + s.subject_id + ".jsonl");
  }

  const RunMetrics m = baseline_no_adapt(ckpt.params, ckpt.stats, streams);
  std::printf("baseline (no adaptation): MAE %.3f/%.3f mmHg", m.mae_sbp, m.mae_dbp);
  if (m.corr_sbp && m.corr_dbp)
    std::printf(", corr %.3f/%.3f", *m.corr_sbp, *m.corr_dbp);
  std::printf(" (SBP/DBP), n_eval=%d\n", m.n_eval);

  if (!flags.out.empty()) {
    std::ofstream f(flags.out, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write baseline report: " + flags.out);
    f << "# config_hash=" << rc.config_hash << " seed=" << rc.seed << "\n";
    f << "metric,target,value,n_eval\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "mae,sbp,%.9g,%d\n", m.mae_sbp, m.n_eval);
    f << buf;
    std::snprintf(buf, sizeof(buf), "mae,dbp,%.9g,%d\n", m.mae_dbp, m.n_eval);
    f << buf;
    if (m.corr_sbp) {
      std::snprintf(buf, sizeof(buf), "corr,sbp,%.9g,%d\n", *m.corr_sbp, m.n_eval);
      f << buf;
    }
    if (m.corr_dbp) {
      std::snprintf(buf, sizeof(buf), "corr,dbp,%.9g,%d\n", *m.corr_dbp, m.n_eval);
      f << buf;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming test-time adaptation benchmark for blood pressure regression"};
  app.require_subcommand(1);

  CommonFlags synth_flags, pretrain_flags, sweep_flags, baseline_flags;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic stream CSV");
  add_common(synth, synth_flags, false);
  CLI::App* pre = app.add_subcommand("pretrain", "pretrain on labeled source data");
  add_common(pre, pretrain_flags, false);
  CLI::App* swp = app.add_subcommand("sweep", "run the frequency x init-label grid");
  add_common(swp, sweep_flags, true);
  CLI::App* base = app.add_subcommand("baseline", "evaluate the frozen checkpoint");
  add_common(base, baseline_flags, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_flags);
    if (pre->parsed()) return cmd_pretrain(pretrain_flags);
    if (swp->parsed()) return cmd_sweep(sweep_flags);
    if (base->parsed()) return cmd_baseline(baseline_flags);
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
