#include "ottabp/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

namespace ottabp {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& section,
                const std::set<std::string>& known) {
  for (const auto& [key, value] : obj.items())
    if (!known.count(key))
      throw ConfigError("unknown config field " +
                        (section.empty() ? key : section + "." + key));
}

std::string qualify(const std::string& section, const std::string& key) {
  return section.empty() ? key : section + "." + key;
}

long get_int(const json& obj, const std::string& section, const std::string& key,
             long fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer())
    throw ConfigError("config field " + qualify(section, key) + " must be an integer");
  return v.get<long>();
}

double get_num(const json& obj, const std::string& section, const std::string& key,
               double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number())
    throw ConfigError("config field " + qualify(section, key) + " must be a number");
  return v.get<double>();
}

bool get_bool(const json& obj, const std::string& section, const std::string& key,
              bool fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_boolean())
    throw ConfigError("config field " + qualify(section, key) + " must be a boolean");
  return v.get<bool>();
}

std::string get_str(const json& obj, const std::string& section, const std::string& key,
                    const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string())
    throw ConfigError("config field " + qualify(section, key) + " must be a string");
  return v.get<std::string>();
}

std::vector<std::pair<double, double>> get_ranges(const json& obj, const std::string& section,
                                                  const std::string& key,
                                                  std::vector<std::pair<double, double>> fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_array())
    throw ConfigError("config field " + qualify(section, key) +
                      " must be an array of [lo, hi] pairs");
  std::vector<std::pair<double, double>> out;
  for (const json& range : v) {
    if (!range.is_array() || range.size() != 2 || !range[0].is_number() ||
        !range[1].is_number())
      throw ConfigError("config field " + qualify(section, key) +
                        " must be an array of [lo, hi] pairs");
    out.emplace_back(range[0].get<double>(), range[1].get<double>());
  }
  return out;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
  check_keys(doc, "", {"seed", "model", "synth", "pretrain", "adapt", "sweep", "paths"});

  RunConfig rc;
  rc.config_hash = [&] {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(doc.dump())));
    return std::string(buf);
  }();
  if (doc.contains("seed")) {
    if (!doc.at("seed").is_number_integer())
      throw ConfigError("config field seed must be an integer");
    rc.seed = doc.at("seed").get<std::uint64_t>();
  }

  if (doc.contains("model")) {
    const json& m = doc.at("model");
    if (!m.is_object()) throw ConfigError("config field model must be an object");
    check_keys(m, "model", {"L", "d", "h", "blocks"});
    const long L = get_int(m, "model", "L", 256);
    rc.geometry.d = static_cast<int>(get_int(m, "model", "d", 16));
    rc.geometry.h = static_cast<int>(get_int(m, "model", "h", 32));
    rc.geometry.E = static_cast<int>(get_int(m, "model", "blocks", 2));
    if (rc.geometry.d <= 0 || L <= 0 || L % rc.geometry.d != 0)
      throw ConfigError("config field model.L must be a positive multiple of model.d");
    rc.geometry.S = static_cast<int>(L) / rc.geometry.d;
    rc.geometry.validate();
  }

  rc.synth.L = rc.geometry.window_length();
  rc.synth.d = rc.geometry.d;
  if (doc.contains("synth")) {
    const json& s = doc.at("synth");
    if (!s.is_object()) throw ConfigError("config field synth must be an object");
    check_keys(s, "synth",
               {"subjects", "domain", "L", "d", "T", "n_init", "n_harmonics", "source_amp",
                "target_amp", "noise_sigma", "drift_delta", "heart_cycles"});
    rc.synth_subjects = static_cast<int>(get_int(s, "synth", "subjects", 2));
    if (rc.synth_subjects < 1) throw ConfigError("config field synth.subjects must be positive");
    const std::string domain = get_str(s, "synth", "domain", "source");
    if (domain == "source")
      rc.synth_domain = Domain::Source;
    else if (domain == "target")
      rc.synth_domain = Domain::Target;
    else
      throw ConfigError("config field synth.domain must be 'source' or 'target'");
    rc.synth.L = static_cast<int>(get_int(s, "synth", "L", rc.synth.L));
    rc.synth.d = static_cast<int>(get_int(s, "synth", "d", rc.synth.d));
    rc.synth.T = static_cast<int>(get_int(s, "synth", "T", rc.synth.T));
    rc.synth.n_init = static_cast<int>(get_int(s, "synth", "n_init", rc.synth.n_init));
    rc.synth.n_harmonics =
        static_cast<int>(get_int(s, "synth", "n_harmonics", rc.synth.n_harmonics));
    rc.synth.source_amp = get_ranges(s, "synth", "source_amp", rc.synth.source_amp);
    rc.synth.target_amp = get_ranges(s, "synth", "target_amp", rc.synth.target_amp);
    rc.synth.noise_sigma = get_num(s, "synth", "noise_sigma", rc.synth.noise_sigma);
    rc.synth.drift_delta = get_num(s, "synth", "drift_delta", rc.synth.drift_delta);
    rc.synth.heart_cycles = get_num(s, "synth", "heart_cycles", rc.synth.heart_cycles);
  }
  rc.synth.seed = rc.seed;

  if (doc.contains("pretrain")) {
    const json& p = doc.at("pretrain");
    if (!p.is_object()) throw ConfigError("config field pretrain must be an object");
    check_keys(p, "pretrain", {"epochs", "batch_size", "lr_ssl", "lr_sl", "mask_ratio"});
    rc.pretrain.epochs = static_cast<int>(get_int(p, "pretrain", "epochs", rc.pretrain.epochs));
    rc.pretrain.batch_size =
        static_cast<int>(get_int(p, "pretrain", "batch_size", rc.pretrain.batch_size));
    rc.pretrain.lr_ssl = get_num(p, "pretrain", "lr_ssl", rc.pretrain.lr_ssl);
    rc.pretrain.lr_sl = get_num(p, "pretrain", "lr_sl", rc.pretrain.lr_sl);
    rc.pretrain.mask_ratio = get_num(p, "pretrain", "mask_ratio", rc.pretrain.mask_ratio);
    if (rc.pretrain.epochs < 0) throw ConfigError("config field pretrain.epochs must be >= 0");
    if (rc.pretrain.batch_size < 1)
      throw ConfigError("config field pretrain.batch_size must be positive");
  }

  if (doc.contains("adapt")) {
    const json& a = doc.at("adapt");
    if (!a.is_object()) throw ConfigError("config field adapt must be an object");
    check_keys(a, "adapt",
               {"injection_frequency", "init_labels", "reps_per_batch", "lr_test",
                "batch_unlabel", "batch_label", "cap_unlabel", "cap_label", "mask_ratio",
                "lambda_pred", "shrink_a", "shrink_c", "init_finetune_epochs",
                "resample_per_rep"});
    if (a.contains("injection_frequency") && !a.at("injection_frequency").is_null()) {
      if (!a.at("injection_frequency").is_number_integer())
        throw ConfigError("config field adapt.injection_frequency must be an integer or null");
      rc.adapt.injection_frequency = a.at("injection_frequency").get<int>();
    }
    rc.adapt.init_labels =
        static_cast<int>(get_int(a, "adapt", "init_labels", rc.adapt.init_labels));
    rc.adapt.reps_per_batch =
        static_cast<int>(get_int(a, "adapt", "reps_per_batch", rc.adapt.reps_per_batch));
    rc.adapt.lr_test = get_num(a, "adapt", "lr_test", rc.adapt.lr_test);
    rc.adapt.comp.n_unlabel =
        static_cast<int>(get_int(a, "adapt", "batch_unlabel", rc.adapt.comp.n_unlabel));
    rc.adapt.comp.n_label =
        static_cast<int>(get_int(a, "adapt", "batch_label", rc.adapt.comp.n_label));
    rc.adapt.cap_unlabel =
        static_cast<int>(get_int(a, "adapt", "cap_unlabel", rc.adapt.cap_unlabel));
    rc.adapt.cap_label = static_cast<int>(get_int(a, "adapt", "cap_label", rc.adapt.cap_label));
    rc.adapt.mask_ratio = get_num(a, "adapt", "mask_ratio", rc.adapt.mask_ratio);
    rc.adapt.loss_weights.lambda_pred =
        get_num(a, "adapt", "lambda_pred", rc.adapt.loss_weights.lambda_pred);
    rc.adapt.shrinkage.a = get_num(a, "adapt", "shrink_a", rc.adapt.shrinkage.a);
    rc.adapt.shrinkage.c = get_num(a, "adapt", "shrink_c", rc.adapt.shrinkage.c);
    rc.adapt.init_finetune_epochs = static_cast<int>(
        get_int(a, "adapt", "init_finetune_epochs", rc.adapt.init_finetune_epochs));
    rc.adapt.resample_per_rep =
        get_bool(a, "adapt", "resample_per_rep", rc.adapt.resample_per_rep);
    rc.adapt.validate();
  }
  rc.adapt.seed = rc.seed;

  if (doc.contains("sweep")) {
    const json& s = doc.at("sweep");
    if (!s.is_object()) throw ConfigError("config field sweep must be an object");
    check_keys(s, "sweep", {"frequencies", "init_label_counts", "seeds"});
    if (s.contains("frequencies")) {
      const json& f = s.at("frequencies");
      if (!f.is_array()) throw ConfigError("config field sweep.frequencies must be an array");
      rc.sweep_grid.frequencies.clear();
      for (const json& v : f) {
        if (v.is_null() || (v.is_string() && v.get<std::string>() == "none"))
          rc.sweep_grid.frequencies.push_back(std::nullopt);
        else if (v.is_number_integer())
          rc.sweep_grid.frequencies.push_back(v.get<int>());
        else
          throw ConfigError("config field sweep.frequencies entries must be integers or null");
      }
    }
    if (s.contains("init_label_counts")) {
      const json& n = s.at("init_label_counts");
      if (!n.is_array() )
        throw ConfigError("config field sweep.init_label_counts must be an array");
      rc.sweep_grid.init_label_counts.clear();
      for (const json& v : n) {
        if (!v.is_number_integer())
          throw ConfigError("config field sweep.init_label_counts entries must be integers");
        rc.sweep_grid.init_label_counts.push_back(v.get<int>());
      }
    }
    if (s.contains("seeds")) {
      const json& n = s.at("seeds");
      if (!n.is_array()) throw ConfigError("config field sweep.seeds must be an array");
      rc.sweep_grid.seeds.clear();
      for (const json& v : n) {
        if (!v.is_number_integer())
          throw ConfigError("config field sweep.seeds entries must be integers");
        rc.sweep_grid.seeds.push_back(v.get<std::uint64_t>());
      }
    }
    rc.sweep_grid.validate();
  }

  if (doc.contains("paths")) {
    const json& p = doc.at("paths");
    if (!p.is_object()) throw ConfigError("config field paths must be an object");
    check_keys(p, "paths",
               {"data", "init_data", "checkpoint", "report_dir", "predictions_dir"});
    rc.paths.data = get_str(p, "paths", "data", "");
    rc.paths.init_data = get_str(p, "paths", "init_data", "");
    rc.paths.checkpoint = get_str(p, "paths", "checkpoint", "");
    rc.paths.report_dir = get_str(p, "paths", "report_dir", "");
    rc.paths.predictions_dir = get_str(p, "paths", "predictions_dir", "");
  }

  try {
    rc.synth.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

}  // namespace ottabp
