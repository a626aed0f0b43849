#include "ottabp/signal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace ottabp {

void SynthConfig::validate() const {
  if (L <= 0) throw ConfigError("synth.L must be positive");
  if (d <= 0) throw ConfigError("synth.d must be positive");
  if (L % d != 0) throw ConfigError("synth.L must be divisible by synth.d");
  if (T < 1) throw ConfigError("synth.T must be at least 1");
  if (n_init < 0) throw ConfigError("synth.n_init must be nonnegative");
  if (n_harmonics < 1) throw ConfigError("synth.n_harmonics must be at least 1");
  if (static_cast<int>(source_amp.size()) != n_harmonics)
    throw ConfigError("synth.source_amp needs one range per harmonic");
  if (static_cast<int>(target_amp.size()) != n_harmonics)
    throw ConfigError("synth.target_amp needs one range per harmonic");
  for (const auto& [lo, hi] : source_amp)
    if (!(lo <= hi)) throw ConfigError("synth.source_amp range is empty");
  for (const auto& [lo, hi] : target_amp)
    if (!(lo <= hi)) throw ConfigError("synth.target_amp range is empty");
  if (noise_sigma < 0.0) throw ConfigError("synth.noise_sigma must be nonnegative");
  if (!(heart_cycles > 0.0)) throw ConfigError("synth.heart_cycles must be positive");
}

Eigen::MatrixXd tokenize(const Eigen::VectorXd& values, int d) {
  const int L = static_cast<int>(values.size());
  if (d <= 0 || L % d != 0)
    throw ConfigError("segment length " + std::to_string(L) +
                      " is not divisible by token length " + std::to_string(d));
  const int S = L / d;
  Eigen::MatrixXd tokens(S, d);
  for (int i = 0; i < S; ++i) tokens.row(i) = values.segment(i * d, d).transpose();
  return tokens;
}

Eigen::MatrixXd tokenize(const SignalSegment& segment, int d) {
  return tokenize(segment.values, d);
}

Eigen::VectorXd flatten_tokens(const Eigen::MatrixXd& tokens) {
  const int S = static_cast<int>(tokens.rows());
  const int d = static_cast<int>(tokens.cols());
  Eigen::VectorXd values(S * d);
  for (int i = 0; i < S; ++i) values.segment(i * d, d) = tokens.row(i).transpose();
  return values;
}

NormStats fit_norm(const std::vector<std::pair<SignalSegment, BPLabel>>& source) {
  if (source.empty()) throw DataError("fit_norm: empty source set");
  double sum = 0.0, sumsq = 0.0;
  long n = 0;
  double sbp_sum = 0.0, sbp_sq = 0.0, dbp_sum = 0.0, dbp_sq = 0.0;
  for (const auto& [seg, label] : source) {
    sum += seg.values.sum();
    sumsq += seg.values.squaredNorm();
    n += seg.values.size();
    sbp_sum += label.sbp;
    sbp_sq += label.sbp * label.sbp;
    dbp_sum += label.dbp;
    dbp_sq += label.dbp * label.dbp;
  }
  const auto m = static_cast<double>(source.size());
  NormStats stats;
  stats.signal_mean = sum / static_cast<double>(n);
  const double sig_var = sumsq / static_cast<double>(n) - stats.signal_mean * stats.signal_mean;
  stats.sbp_mean = sbp_sum / m;
  stats.dbp_mean = dbp_sum / m;
  const double sbp_var = sbp_sq / m - stats.sbp_mean * stats.sbp_mean;
  const double dbp_var = dbp_sq / m - stats.dbp_mean * stats.dbp_mean;
  if (sig_var <= 0.0) throw DataError("fit_norm: pooled signal variance is zero");
  stats.signal_std = std::sqrt(sig_var);
  // Single-label fits keep unit label scale instead of collapsing.
  stats.sbp_std = sbp_var > 0.0 ? std::sqrt(sbp_var) : 1.0;
  stats.dbp_std = dbp_var > 0.0 ? std::sqrt(dbp_var) : 1.0;
  return stats;
}

NormStats fit_norm(const std::vector<SubjectStream>& source) {
  std::vector<std::pair<SignalSegment, BPLabel>> pooled;
  for (const auto& stream : source) {
    for (const auto& pair : stream.init_labeled) pooled.push_back(pair);
    for (const auto& ev : stream.events) {
      if (!ev.label) throw DataError("fit_norm: unlabeled event in source stream");
      pooled.emplace_back(ev.segment, *ev.label);
    }
  }
  return fit_norm(pooled);
}

Eigen::VectorXd normalize_signal(const Eigen::VectorXd& values, const NormStats& stats) {
  return (values.array() - stats.signal_mean) / stats.signal_std;
}

Eigen::VectorXd denormalize_signal(const Eigen::VectorXd& values, const NormStats& stats) {
  return values.array() * stats.signal_std + stats.signal_mean;
}

Eigen::Vector2d normalize_label(const BPLabel& label, const NormStats& stats) {
  return {(label.sbp - stats.sbp_mean) / stats.sbp_std,
          (label.dbp - stats.dbp_mean) / stats.dbp_std};
}

BPLabel denormalize_label(const Eigen::Vector2d& normalized, const NormStats& stats) {
  return {normalized[0] * stats.sbp_std + stats.sbp_mean,
          normalized[1] * stats.dbp_std + stats.dbp_mean};
}

namespace {

std::string subject_name(std::uint64_t subject_seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "subj_%03llu",
                static_cast<unsigned long long>(subject_seed));
  return buf;
}

Eigen::VectorXd harmonic_window(int L, double heart_cycles,
                                const std::vector<double>& amps,
                                const std::vector<double>& phases) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(L);
  for (std::size_t k = 0; k < amps.size(); ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k + 1) * heart_cycles;
    for (int t = 0; t < L; ++t)
      v[t] += amps[k] * std::sin(w * static_cast<double>(t) / static_cast<double>(L) + phases[k]);
  }
  return v;
}

}  // namespace

SubjectStream synth_subject(const SynthConfig& cfg, Domain domain,
                            std::uint64_t subject_seed) {
  cfg.validate();
  const bool target = domain == Domain::Target;
  Rng rng(mix_seed(cfg.seed, target ? 2u : 1u, subject_seed));
  const auto& ranges = target ? cfg.target_amp : cfg.source_amp;

  std::vector<double> amps(cfg.n_harmonics), phases(cfg.n_harmonics);
  for (int k = 0; k < cfg.n_harmonics; ++k) {
    std::uniform_real_distribution<double> dist(ranges[k].first, ranges[k].second);
    amps[k] = dist(rng);
  }
  {
    std::uniform_real_distribution<double> dist(0.0, 2.0 * std::numbers::pi);
    for (int k = 0; k < cfg.n_harmonics; ++k) phases[k] = dist(rng);
  }

  const Eigen::VectorXd clean = harmonic_window(cfg.L, cfg.heart_cycles, amps, phases);
  const double a1 = amps[0];
  const double a2 = cfg.n_harmonics > 1 ? amps[1] : 0.0;
  const double a3 = cfg.n_harmonics > 2 ? amps[2] : 0.0;
  const double sbp_base = 100.0 + 40.0 * a1 + 15.0 * a2;
  const double dbp_base = 65.0 + 20.0 * a1 + 8.0 * a3;

  std::normal_distribution<double> noise(0.0, 1.0);
  auto make_segment = [&](int index) {
    SignalSegment seg;
    seg.values = clean;
    if (cfg.noise_sigma > 0.0)
      for (int t = 0; t < cfg.L; ++t) seg.values[t] += cfg.noise_sigma * noise(rng);
    else
      for (int t = 0; t < cfg.L; ++t) noise(rng);  // keep draw count fixed
    seg.subject_id = subject_name(subject_seed);
    seg.index = index;
    return seg;
  };

  SubjectStream stream;
  stream.subject_id = subject_name(subject_seed);
  // Initial labeled samples model pre-deployment calibration measurements;
  // they exist for target subjects only and carry no drift.
  const int n_init = target ? cfg.n_init : 0;
  stream.init_labeled.reserve(static_cast<std::size_t>(n_init));
  for (int i = 0; i < n_init; ++i)
    stream.init_labeled.emplace_back(make_segment(i), BPLabel{sbp_base, dbp_base});

  stream.events.reserve(cfg.T);
  for (int i = 0; i < cfg.T; ++i) {
    const double drift =
        target ? cfg.drift_delta * static_cast<double>(i) / static_cast<double>(cfg.T) : 0.0;
    StreamEvent ev;
    ev.segment = make_segment(i);
    ev.truth = BPLabel{sbp_base + drift, dbp_base + 0.5 * drift};
    if (!target) ev.label = ev.truth;  // source labels are consistently available
    stream.events.push_back(std::move(ev));
  }
  return stream;
}

namespace {

double parse_double(std::string_view cell, long line, const char* what) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw ParseError(std::string("bad ") + what + " value '" + std::string(cell) + "'", line);
  if (!std::isfinite(v))
    throw ParseError(std::string("non-finite ") + what + " value", line);
  return v;
}

long parse_long(std::string_view cell, long line, const char* what) {
  long v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc{} || ptr != cell.data() + cell.size())
    throw ParseError(std::string("bad ") + what + " value '" + std::string(cell) + "'", line);
  return v;
}

void split_csv(const std::string& row, std::vector<std::string_view>& out) {
  out.clear();
  std::size_t start = 0;
  while (true) {
    std::size_t comma = row.find(',', start);
    if (comma == std::string::npos) {
      out.emplace_back(row.data() + start, row.size() - start);
      return;
    }
    out.emplace_back(row.data() + start, comma - start);
    start = comma + 1;
  }
}

}  // namespace

std::vector<SubjectStream> load_stream_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open stream file: " + path);

  std::string row;
  if (!std::getline(in, row)) return {};  // empty file -> empty list
  if (!row.empty() && row.back() == '\r') row.pop_back();

  std::vector<std::string_view> cells;
  split_csv(row, cells);
  if (cells.size() < 6 || cells[0] != "subject_id" || cells[1] != "index" ||
      cells[2] != "has_label" || cells[3] != "sbp" || cells[4] != "dbp")
    throw ParseError("unexpected header; want subject_id,index,has_label,sbp,dbp,s0,...", 1);
  const std::size_t L = cells.size() - 5;

  // Keyed by first appearance so file order is preserved.
  std::vector<SubjectStream> streams;
  std::map<std::string, std::size_t> by_id;
  long line = 1;
  while (std::getline(in, row)) {
    ++line;
    if (!row.empty() && row.back() == '\r') row.pop_back();
    if (row.empty()) continue;
    split_csv(row, cells);
    if (cells.size() != L + 5)
      throw ParseError("expected " + std::to_string(L + 5) + " columns, got " +
                           std::to_string(cells.size()),
                       line);

    StreamEvent ev;
    ev.segment.subject_id = std::string(cells[0]);
    ev.segment.index = static_cast<int>(parse_long(cells[1], line, "index"));
    const long has_label = parse_long(cells[2], line, "has_label");
    if (has_label != 0 && has_label != 1)
      throw ParseError("has_label must be 0 or 1", line);
    const bool has_truth = !cells[3].empty() || !cells[4].empty();
    if (has_truth) {
      const double sbp = parse_double(cells[3], line, "sbp");
      const double dbp = parse_double(cells[4], line, "dbp");
      ev.truth = BPLabel{sbp, dbp};
    } else if (has_label == 1) {
      throw ParseError("has_label=1 row is missing sbp/dbp", line);
    }
    if (has_label == 1) ev.label = ev.truth;
    ev.segment.values.resize(static_cast<Eigen::Index>(L));
    for (std::size_t j = 0; j < L; ++j)
      ev.segment.values[static_cast<Eigen::Index>(j)] =
          parse_double(cells[5 + j], line, "signal");

    auto [it, inserted] = by_id.try_emplace(ev.segment.subject_id, streams.size());
    if (inserted) {
      streams.emplace_back();
      streams.back().subject_id = ev.segment.subject_id;
    }
    streams[it->second].events.push_back(std::move(ev));
  }

  for (auto& stream : streams) {
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const StreamEvent& a, const StreamEvent& b) {
                       return a.segment.index < b.segment.index;
                     });
    for (std::size_t i = 0; i < stream.events.size(); ++i)
      if (stream.events[i].segment.index != static_cast<int>(i))
        throw ConfigError("subject " + stream.subject_id +
                          ": event indices must be 0..T-1 strictly increasing");
  }
  return streams;
}

namespace {

void append_value(std::string& out, double v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

void write_row(std::string& out, const SignalSegment& seg, int has_label,
               const std::optional<BPLabel>& truth) {
  out += seg.subject_id;
  out += ',';
  out += std::to_string(seg.index);
  out += ',';
  out += std::to_string(has_label);
  out += ',';
  if (truth) append_value(out, truth->sbp);
  out += ',';
  if (truth) append_value(out, truth->dbp);
  for (Eigen::Index t = 0; t < seg.values.size(); ++t) {
    out += ',';
    append_value(out, seg.values[t]);
  }
  out += '\n';
}

void write_csv_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path);
  out << body;
  if (!out) throw ConfigError("write failed: " + path);
}

std::string csv_header(Eigen::Index L) {
  std::string header = "subject_id,index,has_label,sbp,dbp";
  for (Eigen::Index t = 0; t < L; ++t) {
    header += ",s";
    header += std::to_string(t);
  }
  header += '\n';
  return header;
}

}  // namespace

void write_events_csv(const std::string& path, const std::vector<SubjectStream>& streams) {
  Eigen::Index L = 0;
  for (const auto& s : streams)
    if (!s.events.empty()) {
      L = s.events.front().segment.values.size();
      break;
    }
  std::string body = csv_header(L);
  for (const auto& stream : streams)
    for (const auto& ev : stream.events)
      write_row(body, ev.segment, ev.label ? 1 : 0, ev.truth);
  write_csv_file(path, body);
}

void write_init_csv(const std::string& path, const std::vector<SubjectStream>& streams) {
  Eigen::Index L = 0;
  for (const auto& s : streams)
    if (!s.init_labeled.empty()) {
      L = s.init_labeled.front().first.values.size();
      break;
    }
  std::string body = csv_header(L);
  for (const auto& stream : streams)
    for (const auto& [seg, label] : stream.init_labeled)
      write_row(body, seg, 1, label);
  write_csv_file(path, body);
}

std::vector<SubjectStream> attach_init(std::vector<SubjectStream> streams,
                                       const std::vector<SubjectStream>& init) {
  std::map<std::string, const SubjectStream*> by_id;
  for (const auto& s : init) by_id[s.subject_id] = &s;
  for (auto& stream : streams) {
    auto it = by_id.find(stream.subject_id);
    if (it == by_id.end()) continue;
    stream.init_labeled.clear();
    for (const auto& ev : it->second->events) {
      if (!ev.label)
        throw ConfigError("init set for subject " + stream.subject_id +
                          " contains an unlabeled row");
      stream.init_labeled.emplace_back(ev.segment, *ev.label);
    }
  }
  return streams;
}

}  // namespace ottabp
