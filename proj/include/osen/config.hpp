#pragma once

// Flat key = value experiment configuration (TOML subset: scalars, quoted
// strings and [a, b] lists; no tables). Unknown keys are errors.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "osen/error.hpp"

namespace osen {

enum class Pipeline { se_spatial, rbc_classify, cs_tv };

inline const char* to_string(Pipeline p) {
  switch (p) {
    case Pipeline::se_spatial: return "se_spatial";
    case Pipeline::rbc_classify: return "rbc_classify";
    case Pipeline::cs_tv: return "cs_tv";
  }
  return "?";
}

struct ExperimentConfig {
  Pipeline pipeline = Pipeline::se_spatial;
  std::vector<double> mr{0.25};
  std::vector<std::size_t> q{3};
  std::string variant = "osen1";
  bool ncl = false;
  std::vector<std::uint64_t> seeds{0};

  std::string dataset = "synthetic";  // synthetic | idx | images
  std::string dataset_path;
  std::string labels_path;
  std::size_t train_count = 2000;
  std::size_t val_count = 400;
  std::size_t test_count = 500;
  std::size_t side = 28;              // 64 for cs_tv
  double sparsity = 0.2;

  std::size_t epochs = 100;           // 30 for rbc_classify
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  bool freeze_shifts = false;
  double time_budget = 0.0;           // seconds of training per run, 0 = unlimited
  std::string loss = "mse_mask";      // hybrid for rbc_classify
  double lambda_g = 0.01;
  double lambda_c = 0.1;
  double threshold = 0.5;

  std::string proxy = "lmmse";        // lmmse | mc
  double lmmse_lambda = 0.0;          // 0 = validation search
  std::vector<double> snr_db{std::numeric_limits<double>::infinity()};

  std::size_t classes = 6;
  std::size_t group_h = 2;
  std::size_t group_w = 4;
  std::size_t block_rows = 2;
  std::size_t signal_dim = 64;
  std::size_t class_rank = 3;
  double class_noise = 0.1;
  double crc_lambda = 1e-2;

  double tv_lambda = 0.01;
  double tv_rho = 1.0;
  double tv_relax_alpha = 0.7;
  double tv_abs_tol = 1e-4;
  double tv_rel_tol = 1e-2;
  std::size_t tv_max_it = 2000;
  double epsilon = 0.2;
  double grad_tau = 0.04;
  bool oracle_weights = false;
  bool use_network = true;
  std::string mask_path;

  std::string output_dir = "osen_out";
  bool save_models = true;
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& s) {
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + s + "' is out of range");
  }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
}

inline std::string one(const std::string& key, const std::vector<std::string>& in) {
  if (in.size() != 1) throw ConfigError("config key '" + key + "' expects a single value");
  return in[0];
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  os << '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ", ";
    if (std::isinf(v[i])) os << (v[i] > 0 ? "inf" : "-inf");
    else os << v[i];
  }
  os << ']';
  return os.str();
}

template <class T>
std::string join_ints(const std::vector<T>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string quoted(const std::string& s) { return "\"" + s + "\""; }

}  // namespace detail

inline Pipeline parse_pipeline(const std::string& s) {
  if (s == "se_spatial") return Pipeline::se_spatial;
  if (s == "rbc_classify") return Pipeline::rbc_classify;
  if (s == "cs_tv") return Pipeline::cs_tv;
  throw ConfigError("unknown pipeline '" + s + "' (expected se_spatial, rbc_classify or cs_tv)");
}

/// Parses a configuration. `pipeline` is required; every other key falls
/// back to its documented default (some defaults depend on the pipeline).
inline ExperimentConfig parse_config(std::istream& in) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  std::map<std::string, std::vector<std::string>> kv;
  for (const auto& item : items) {
    if (!item.parents.empty()) throw ConfigError("config tables are not supported: [" + item.parents[0] + "]");
    if (kv.count(item.name)) throw ConfigError("duplicate config key '" + item.name + "'");
    kv[item.name] = item.inputs;
  }
  if (!kv.count("pipeline")) throw ConfigError("config must set 'pipeline'");

  ExperimentConfig c;
  c.pipeline = parse_pipeline(detail::one("pipeline", kv["pipeline"]));
  if (c.pipeline == Pipeline::rbc_classify) {
    c.epochs = 30;
    c.loss = "hybrid";
  }
  if (c.pipeline == Pipeline::cs_tv) c.side = 64;

  using Setter = std::function<void(const std::string&, const std::vector<std::string>&)>;
  auto str = [](std::string& f) -> Setter {
    return [&f](const std::string& k, const std::vector<std::string>& in) { f = detail::one(k, in); };
  };
  auto real = [](double& f) -> Setter {
    return [&f](const std::string& k, const std::vector<std::string>& in) {
      f = detail::parse_double(k, detail::one(k, in));
    };
  };
  auto count = [](std::size_t& f) -> Setter {
    return [&f](const std::string& k, const std::vector<std::string>& in) {
      f = detail::parse_uint(k, detail::one(k, in));
    };
  };
  auto flag = [](bool& f) -> Setter {
    return [&f](const std::string& k, const std::vector<std::string>& in) {
      f = detail::parse_bool(k, detail::one(k, in));
    };
  };
  const std::map<std::string, Setter> table = {
      {"pipeline", [](const std::string&, const std::vector<std::string>&) {}},
      {"mr", [&c](const std::string& k, const std::vector<std::string>& in) {
         c.mr.clear();
         for (const auto& s : in) c.mr.push_back(detail::parse_double(k, s));
       }},
      {"q", [&c](const std::string& k, const std::vector<std::string>& in) {
         c.q.clear();
         for (const auto& s : in) c.q.push_back(detail::parse_uint(k, s));
       }},
      {"seeds", [&c](const std::string& k, const std::vector<std::string>& in) {
         c.seeds.clear();
         for (const auto& s : in) c.seeds.push_back(detail::parse_uint(k, s));
       }},
      {"snr_db", [&c](const std::string& k, const std::vector<std::string>& in) {
         c.snr_db.clear();
         for (const auto& s : in) c.snr_db.push_back(detail::parse_double(k, s));
       }},
      {"variant", str(c.variant)},
      {"ncl", flag(c.ncl)},
      {"dataset", str(c.dataset)},
      {"dataset_path", str(c.dataset_path)},
      {"labels_path", str(c.labels_path)},
      {"train_count", count(c.train_count)},
      {"val_count", count(c.val_count)},
      {"test_count", count(c.test_count)},
      {"side", count(c.side)},
      {"sparsity", real(c.sparsity)},
      {"epochs", count(c.epochs)},
      {"batch_size", count(c.batch_size)},
      {"learning_rate", real(c.learning_rate)},
      {"freeze_shifts", flag(c.freeze_shifts)},
      {"time_budget", real(c.time_budget)},
      {"loss", str(c.loss)},
      {"lambda_g", real(c.lambda_g)},
      {"lambda_c", real(c.lambda_c)},
      {"threshold", real(c.threshold)},
      {"proxy", str(c.proxy)},
      {"lmmse_lambda", real(c.lmmse_lambda)},
      {"classes", count(c.classes)},
      {"group_h", count(c.group_h)},
      {"group_w", count(c.group_w)},
      {"block_rows", count(c.block_rows)},
      {"signal_dim", count(c.signal_dim)},
      {"class_rank", count(c.class_rank)},
      {"class_noise", real(c.class_noise)},
      {"crc_lambda", real(c.crc_lambda)},
      {"tv_lambda", real(c.tv_lambda)},
      {"tv_rho", real(c.tv_rho)},
      {"tv_relax_alpha", real(c.tv_relax_alpha)},
      {"tv_abs_tol", real(c.tv_abs_tol)},
      {"tv_rel_tol", real(c.tv_rel_tol)},
      {"tv_max_it", count(c.tv_max_it)},
      {"epsilon", real(c.epsilon)},
      {"grad_tau", real(c.grad_tau)},
      {"oracle_weights", flag(c.oracle_weights)},
      {"use_network", flag(c.use_network)},
      {"mask_path", str(c.mask_path)},
      {"output_dir", str(c.output_dir)},
      {"save_models", flag(c.save_models)},
  };
  for (const auto& [key, values] : kv) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, values);
  }

  if (c.mr.empty() || c.q.empty() || c.seeds.empty() || c.snr_db.empty())
    throw ConfigError("mr, q, seeds and snr_db lists must not be empty");
  for (double m : c.mr)
    if (!(m > 0.0 && m < 1.0)) throw ConfigError("mr values must lie in (0, 1)");
  for (std::size_t q : c.q)
    if (q == 0) throw ConfigError("q values must be >= 1");
  if (c.variant != "osen1" && c.variant != "osen2") throw ConfigError("variant must be osen1 or osen2");
  if (c.dataset != "synthetic" && c.dataset != "idx" && c.dataset != "images")
    throw ConfigError("dataset must be synthetic, idx or images");
  if (c.dataset != "synthetic" && c.dataset_path.empty())
    throw ConfigError("dataset '" + c.dataset + "' needs dataset_path");
  if (c.loss != "mse_mask" && c.loss != "group_l2" && c.loss != "hybrid")
    throw ConfigError("loss must be mse_mask, group_l2 or hybrid");
  if (c.proxy != "lmmse" && c.proxy != "mc") throw ConfigError("proxy must be lmmse or mc");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.train_count == 0) throw ConfigError("train_count must be positive");
  if (!(c.sparsity > 0.0 && c.sparsity < 1.0)) throw ConfigError("sparsity must lie in (0, 1)");
  if (c.time_budget < 0.0) throw ConfigError("time_budget must be >= 0");
  if (c.epsilon <= 0.0) throw ConfigError("epsilon must be positive");
  if (c.lmmse_lambda < 0.0) throw ConfigError("lmmse_lambda must be >= 0 (0 selects by validation)");
  if (c.pipeline != Pipeline::se_spatial && c.ncl)
    throw ConfigError("ncl is only available for the se_spatial pipeline");
  if (c.pipeline == Pipeline::rbc_classify && c.loss == "mse_mask")
    throw ConfigError("rbc_classify trains a class head; use loss hybrid or group_l2");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in);
}

/// Every resolved setting, one `key = value` line each, in fixed order.
/// Parsing the echo reproduces the configuration.
inline std::string echo_config(const ExperimentConfig& c) {
  using detail::num;
  using detail::quoted;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "pipeline = " << quoted(to_string(c.pipeline)) << '\n'
     << "mr = " << detail::join_doubles(c.mr) << '\n'
     << "q = " << detail::join_ints(c.q) << '\n'
     << "variant = " << quoted(c.variant) << '\n'
     << "ncl = " << b(c.ncl) << '\n'
     << "seeds = " << detail::join_ints(c.seeds) << '\n'
     << "dataset = " << quoted(c.dataset) << '\n'
     << "dataset_path = " << quoted(c.dataset_path) << '\n'
     << "labels_path = " << quoted(c.labels_path) << '\n'
     << "train_count = " << c.train_count << '\n'
     << "val_count = " << c.val_count << '\n'
     << "test_count = " << c.test_count << '\n'
     << "side = " << c.side << '\n'
     << "sparsity = " << num(c.sparsity) << '\n'
     << "epochs = " << c.epochs << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "learning_rate = " << num(c.learning_rate) << '\n'
     << "freeze_shifts = " << b(c.freeze_shifts) << '\n'
     << "time_budget = " << num(c.time_budget) << '\n'
     << "loss = " << quoted(c.loss) << '\n'
     << "lambda_g = " << num(c.lambda_g) << '\n'
     << "lambda_c = " << num(c.lambda_c) << '\n'
     << "threshold = " << num(c.threshold) << '\n'
     << "proxy = " << quoted(c.proxy) << '\n'
     << "lmmse_lambda = " << num(c.lmmse_lambda) << '\n'
     << "snr_db = " << detail::join_doubles(c.snr_db) << '\n'
     << "classes = " << c.classes << '\n'
     << "group_h = " << c.group_h << '\n'
     << "group_w = " << c.group_w << '\n'
     << "block_rows = " << c.block_rows << '\n'
     << "signal_dim = " << c.signal_dim << '\n'
     << "class_rank = " << c.class_rank << '\n'
     << "class_noise = " << num(c.class_noise) << '\n'
     << "crc_lambda = " << num(c.crc_lambda) << '\n'
     << "tv_lambda = " << num(c.tv_lambda) << '\n'
     << "tv_rho = " << num(c.tv_rho) << '\n'
     << "tv_relax_alpha = " << num(c.tv_relax_alpha) << '\n'
     << "tv_abs_tol = " << num(c.tv_abs_tol) << '\n'
     << "tv_rel_tol = " << num(c.tv_rel_tol) << '\n'
     << "tv_max_it = " << c.tv_max_it << '\n'
     << "epsilon = " << num(c.epsilon) << '\n'
     << "grad_tau = " << num(c.grad_tau) << '\n'
     << "oracle_weights = " << b(c.oracle_weights) << '\n'
     << "use_network = " << b(c.use_network) << '\n'
     << "mask_path = " << quoted(c.mask_path) << '\n'
     << "output_dir = " << quoted(c.output_dir) << '\n'
     << "save_models = " << b(c.save_models) << '\n';
  return os.str();
}

}  // namespace osen
