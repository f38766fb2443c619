#include "rosfl/config.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace rosfl {

std::string_view method_name(Method m) {
  switch (m) {
    case Method::RosFL: return "rosfl";
    case Method::FedAvg: return "fedavg";
    case Method::SequentialSL: return "sl";
    case Method::Centralized: return "central";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (auto m : {Method::RosFL, Method::FedAvg, Method::SequentialSL, Method::Centralized}) {
    if (s == method_name(m)) return m;
  }
  throw ConfigError("method: expected rosfl, fedavg, sl or central, got '" + std::string(s) + "'");
}

std::string_view transport_name(TransportKind t) { return t == TransportKind::InProc ? "inproc" : "tcp"; }

TransportKind parse_transport(std::string_view s) {
  if (s == "inproc") return TransportKind::InProc;
  if (s == "tcp") return TransportKind::Tcp;
  throw ConfigError("transport: expected inproc or tcp, got '" + std::string(s) + "'");
}

void ExperimentConfig::sync_derived() {
  model.height = model.width = data.size;
  model.in_channels = 1;
  if (task == Task::Segmentation) {
    model.head = TaskHead::Segmentation;
    model.out_channels = data.classes;
  } else {
    model.head = TaskHead::Regression;
    model.out_channels = 1;
  }
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (clients < 1 || clients > 65535) throw ConfigError("schedule.clients must be in [1, 65535]");
  if (rounds < 1) throw ConfigError("schedule.rounds must be >= 1");
  if (epochs < 1 || epochs > 65535) throw ConfigError("schedule.epochs must be in [1, 65535]");
  if (batch_size < 1) throw ConfigError("schedule.batch_size must be >= 1");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
  if (train_sizes.empty() || (train_sizes.size() != 1 && train_sizes.size() != static_cast<std::size_t>(clients))) {
    throw ConfigError("data.train_per_client must list one size or one per client");
  }
  for (Index s : train_sizes) {
    if (s < 1) throw ConfigError("data.train_per_client entries must be >= 1");
  }
  if (test_size < 1) throw ConfigError("data.test_per_client must be >= 1");
  if (!(optimizer.lr > 0)) throw ConfigError("optimizer.lr must be > 0");
  if (!(optimizer.weight_decay >= 0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1)) throw ConfigError("optimizer.beta1 must be in [0, 1)");
  if (!(optimizer.beta2 >= 0 && optimizer.beta2 < 1)) throw ConfigError("optimizer.beta2 must be in [0, 1)");
  if (!(optimizer.eps > 0)) throw ConfigError("optimizer.eps must be > 0");
  if (!(timing.latency_ms >= 0) || !(timing.compute_ms_per_sample >= 0)) {
    throw ConfigError("timing.latency_ms and timing.compute_ms_per_sample must be >= 0");
  }
  data.validate();
  model.validate();
  split.validate(model);
  dwcs.validate();
  ExperimentConfig synced = *this;
  synced.sync_derived();
  if (!(synced.model == model)) throw ConfigError("model settings disagree with data.image_size/data.classes");
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  return s;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  try {
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

long long to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  try {
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::string s = v;
  if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& key, const std::string& v, F parse) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(static_cast<T>(parse(key, item)));
  if (out.empty()) throw ConfigError(key + ": expected a non-empty list");
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

int to_int32(const std::string& key, const std::string& v) {
  const long long i = to_int(key, v);
  if (i < INT32_MIN || i > INT32_MAX) throw ConfigError(key + ": value out of range");
  return static_cast<int>(i);
}

struct Key {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Key>& keys() {
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<Key> table = {
      {"method", [](C& c, S v) { c.method = parse_method(v); }, [](const C& c) { return std::string(method_name(c.method)); }},
      {"task",
       [](C& c, S v) {
         if (v == "restoration") {
           c.task = Task::Restoration;
         } else if (v == "segmentation") {
           c.task = Task::Segmentation;
         } else {
           throw ConfigError("task: expected restoration or segmentation, got '" + v + "'");
         }
       },
       [](const C& c) { return std::string(c.task == Task::Restoration ? "restoration" : "segmentation"); }},
      {"seeds",
       [](C& c, S v) {
         c.seeds = to_list<std::uint64_t>("seeds", v, [](const std::string& k, const std::string& x) {
           const auto i = to_int(k, x);
           if (i < 0) throw ConfigError(k + ": seeds must be non-negative");
           return i;
         });
       },
       [](const C& c) { return fmt_list(c.seeds); }},
      {"precision",
       [](C& c, S v) {
         if (v == "f64") {
           c.precision = Precision::F64;
         } else if (v == "f32") {
           c.precision = Precision::F32;
         } else {
           throw ConfigError("precision: expected f64 or f32, got '" + v + "'");
         }
       },
       [](const C& c) { return std::string(c.precision == Precision::F64 ? "f64" : "f32"); }},
      {"transport", [](C& c, S v) { c.transport = parse_transport(v); },
       [](const C& c) { return std::string(transport_name(c.transport)); }},
      {"checkpoint_interval", [](C& c, S v) { c.checkpoint_interval = to_int32("checkpoint_interval", v); },
       [](const C& c) { return std::to_string(c.checkpoint_interval); }},

      {"schedule.clients", [](C& c, S v) { c.clients = to_int32("schedule.clients", v); },
       [](const C& c) { return std::to_string(c.clients); }},
      {"schedule.rounds", [](C& c, S v) { c.rounds = to_int32("schedule.rounds", v); },
       [](const C& c) { return std::to_string(c.rounds); }},
      {"schedule.epochs", [](C& c, S v) { c.epochs = to_int32("schedule.epochs", v); },
       [](const C& c) { return std::to_string(c.epochs); }},
      {"schedule.batch_size", [](C& c, S v) { c.batch_size = to_int32("schedule.batch_size", v); },
       [](const C& c) { return std::to_string(c.batch_size); }},

      {"model.depth", [](C& c, S v) { c.model.depth = to_int32("model.depth", v); },
       [](const C& c) { return std::to_string(c.model.depth); }},
      {"model.base_channels", [](C& c, S v) { c.model.base_channels = to_int("model.base_channels", v); },
       [](const C& c) { return std::to_string(c.model.base_channels); }},
      {"split.level", [](C& c, S v) { c.split.level = to_int32("split.level", v); },
       [](const C& c) { return std::to_string(c.split.level); }},

      {"optimizer.kind",
       [](C& c, S v) {
         if (v == "adam") {
           c.optimizer.kind = OptimizerKind::Adam;
         } else if (v == "sgd") {
           c.optimizer.kind = OptimizerKind::Sgd;
         } else {
           throw ConfigError("optimizer.kind: expected adam or sgd, got '" + v + "'");
         }
       },
       [](const C& c) { return std::string(c.optimizer.kind == OptimizerKind::Adam ? "adam" : "sgd"); }},
      {"optimizer.lr", [](C& c, S v) { c.optimizer.lr = to_double("optimizer.lr", v); },
       [](const C& c) { return fmt(c.optimizer.lr); }},
      {"optimizer.weight_decay", [](C& c, S v) { c.optimizer.weight_decay = to_double("optimizer.weight_decay", v); },
       [](const C& c) { return fmt(c.optimizer.weight_decay); }},
      {"optimizer.beta1", [](C& c, S v) { c.optimizer.beta1 = to_double("optimizer.beta1", v); },
       [](const C& c) { return fmt(c.optimizer.beta1); }},
      {"optimizer.beta2", [](C& c, S v) { c.optimizer.beta2 = to_double("optimizer.beta2", v); },
       [](const C& c) { return fmt(c.optimizer.beta2); }},
      {"optimizer.eps", [](C& c, S v) { c.optimizer.eps = to_double("optimizer.eps", v); },
       [](const C& c) { return fmt(c.optimizer.eps); }},

      {"dwcs.enabled", [](C& c, S v) { c.dwcs.enabled = to_bool("dwcs.enabled", v); },
       [](const C& c) { return std::string(c.dwcs.enabled ? "true" : "false"); }},
      {"dwcs.mu", [](C& c, S v) { c.dwcs.mu = to_double("dwcs.mu", v); }, [](const C& c) { return fmt(c.dwcs.mu); }},
      {"dwcs.eta",
       [](C& c, S v) {
         if (v.empty() || v == "lr") {
           c.dwcs.eta.reset();
         } else {
           c.dwcs.eta = to_double("dwcs.eta", v);
         }
       },
       [](const C& c) { return c.dwcs.eta ? fmt(*c.dwcs.eta) : std::string("lr"); }},
      {"dwcs.beta", [](C& c, S v) { c.dwcs.beta = to_double("dwcs.beta", v); },
       [](const C& c) { return fmt(c.dwcs.beta); }},
      {"dwcs.direction",
       [](C& c, S v) {
         if (v == "extrapolate") {
           c.dwcs.direction = CorrectionDirection::Extrapolate;
         } else if (v == "stabilize") {
           c.dwcs.direction = CorrectionDirection::Stabilize;
         } else {
           throw ConfigError("dwcs.direction: expected extrapolate or stabilize, got '" + v + "'");
         }
       },
       [](const C& c) {
         return std::string(c.dwcs.direction == CorrectionDirection::Extrapolate ? "extrapolate" : "stabilize");
       }},

      {"data.image_size", [](C& c, S v) { c.data.size = to_int("data.image_size", v); },
       [](const C& c) { return std::to_string(c.data.size); }},
      {"data.train_per_client", [](C& c, S v) { c.train_sizes = to_list<Index>("data.train_per_client", v, to_int); },
       [](const C& c) { return fmt_list(c.train_sizes); }},
      {"data.test_per_client", [](C& c, S v) { c.test_size = to_int("data.test_per_client", v); },
       [](const C& c) { return std::to_string(c.test_size); }},
      {"data.min_shapes", [](C& c, S v) { c.data.min_shapes = to_int32("data.min_shapes", v); },
       [](const C& c) { return std::to_string(c.data.min_shapes); }},
      {"data.max_shapes", [](C& c, S v) { c.data.max_shapes = to_int32("data.max_shapes", v); },
       [](const C& c) { return std::to_string(c.data.max_shapes); }},
      {"data.edge_softness", [](C& c, S v) { c.data.edge_softness = to_double("data.edge_softness", v); },
       [](const C& c) { return fmt(c.data.edge_softness); }},
      {"data.attenuation_scale", [](C& c, S v) { c.data.attenuation_scale = to_double("data.attenuation_scale", v); },
       [](const C& c) { return fmt(c.data.attenuation_scale); }},
      {"data.noise_gain", [](C& c, S v) { c.data.noise_gain = to_double("data.noise_gain", v); },
       [](const C& c) { return fmt(c.data.noise_gain); }},
      {"data.sigma_e2", [](C& c, S v) { c.data.sigma_e2 = to_double("data.sigma_e2", v); },
       [](const C& c) { return fmt(c.data.sigma_e2); }},
      {"data.doses", [](C& c, S v) { c.data.doses = to_list<double>("data.doses", v, to_double); },
       [](const C& c) { return fmt_list(c.data.doses); }},
      {"data.classes", [](C& c, S v) { c.data.classes = to_int32("data.classes", v); },
       [](const C& c) { return std::to_string(c.data.classes); }},
      {"data.contrast", [](C& c, S v) { c.data.contrast = to_list<double>("data.contrast", v, to_double); },
       [](const C& c) { return fmt_list(c.data.contrast); }},
      {"data.bias", [](C& c, S v) { c.data.bias = to_list<double>("data.bias", v, to_double); },
       [](const C& c) { return fmt_list(c.data.bias); }},
      {"data.seg_noise", [](C& c, S v) { c.data.seg_noise = to_double("data.seg_noise", v); },
       [](const C& c) { return fmt(c.data.seg_noise); }},

      {"timing.latency_ms", [](C& c, S v) { c.timing.latency_ms = to_double("timing.latency_ms", v); },
       [](const C& c) { return fmt(c.timing.latency_ms); }},
      {"timing.compute_ms_per_sample",
       [](C& c, S v) { c.timing.compute_ms_per_sample = to_double("timing.compute_ms_per_sample", v); },
       [](const C& c) { return fmt(c.timing.compute_ms_per_sample); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }

  std::map<std::string, std::string> flat;
  auto put = [&](const std::string& key, const std::string& value) {
    if (!flat.emplace(key, trim(value)).second) throw ConfigError(key + ": given more than once");
  };
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      put(name, node.data());
    } else {
      for (const auto& [key, leaf] : node) put(name + "." + key, leaf.data());
    }
  }

  ExperimentConfig cfg;
  std::map<std::string, const Key*> index;
  for (const auto& k : keys()) index[k.name] = &k;
  for (const auto& [key, value] : flat) {
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError("unknown key: " + key);
    it->second->set(cfg, value);
  }
  if (!flat.contains("method")) throw ConfigError("missing required key: method");
  cfg.sync_derived();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    const auto dot = k.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.name.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << leaf << " = " << k.get(cfg) << "\n";
  }
  return os.str();
}

}  // namespace rosfl
