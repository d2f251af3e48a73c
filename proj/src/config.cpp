#include "rectflow/config.hpp"

#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rectflow/errors.hpp"

namespace rectflow::app {

using nlohmann::json;

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InputError(where("") + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw InputError(where(key) + " has the wrong type");
    }
  }

  void get_size(const std::string& key, std::size_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw InputError(where(key) + " must be a nonnegative integer");
    }
    out = v.get<std::size_t>();
  }

  void get_sizes(const std::string& key, std::vector<std::size_t>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw InputError(where(key) + " must be an array of integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer() || e.get<long long>() <= 0) {
        throw InputError(where(key) + " entries must be positive integers");
      }
      out.push_back(e.get<std::size_t>());
    }
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    return Reader(j_.at(key), where(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw InputError("unknown config key '" + where(it.key()) + "'");
    }
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& message) {
  if (!ok) throw InputError(message);
}

void read_realnvp(Reader r, flows::RealNvpSpec& spec) {
  r.get_size("layers", spec.layers);
  r.get_sizes("hidden", spec.hidden);
  r.get("permute", spec.permute);
  r.finish();
}

json realnvp_json(const flows::RealNvpSpec& s) {
  return {{"layers", s.layers}, {"hidden", s.hidden}, {"permute", s.permute}};
}

}  // namespace

rect::RectSpec ExperimentConfig::rect_spec() const {
  rect::RectSpec s;
  s.D = D;
  s.d = d;
  s.high = high;
  s.low = low;
  return s;
}

train::TrainConfig ExperimentConfig::train_config() const {
  train::TrainConfig t;
  t.objective.method = method;
  t.objective.beta = beta;
  t.objective.anneal = anneal;
  t.objective.estimator = estimator;
  t.objective.jitter = jitter;
  t.lr = lr;
  t.batch_size = batch_size;
  t.patience = patience;
  t.max_epochs = max_epochs;
  t.criterion = early_stop;
  t.seed = seed;
  return t;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(doc, "");

  if (r.has("method")) {
    std::string m;
    r.get("method", m);
    c.method = train::parse_method(m);
  }
  r.get_size("D", c.D);
  r.get_size("d", c.d);
  if (r.has("estimator")) {
    Reader e = r.child("estimator");
    std::string type = "exact";
    e.get("type", type);
    if (type == "exact") {
      c.estimator = est::ExactEstimator{};
    } else if (type == "stochastic") {
      est::StochasticEstimator s;
      e.get_size("K", s.probes);
      e.get("cg_tol", s.cg_tol);
      std::string probe = est::to_string(s.probe);
      e.get("probe", probe);
      s.probe = est::parse_probe_kind(probe);
      require(s.probes >= 1, "estimator.K must be at least 1");
      require(s.cg_tol >= 0.0, "estimator.cg_tol must be nonnegative");
      c.estimator = s;
    } else {
      throw InputError("estimator.type must be exact or stochastic");
    }
    e.finish();
  }
  if (r.has("high_flow")) read_realnvp(r.child("high_flow"), c.high);
  if (r.has("low_flow")) {
    Reader l = r.child("low_flow");
    std::string type = "none";
    l.get("type", type);
    if (type == "none") {
      c.low.kind = rect::LowFlowSpec::Kind::None;
    } else if (type == "affine") {
      c.low.kind = rect::LowFlowSpec::Kind::Affine;
    } else if (type == "realnvp") {
      c.low.kind = rect::LowFlowSpec::Kind::RealNvp;
    } else {
      throw InputError("low_flow.type must be none, affine or realnvp");
    }
    l.get_size("layers", c.low.realnvp.layers);
    l.get_sizes("hidden", c.low.realnvp.hidden);
    l.get("permute", c.low.realnvp.permute);
    l.finish();
  }
  r.get("beta", c.beta);
  if (r.has("anneal")) {
    const json& a = r.raw("anneal");
    if (a.is_boolean()) {
      c.anneal.enabled = a.get<bool>();
    } else {
      Reader ar(a, "anneal");
      c.anneal.enabled = true;
      ar.get("start", c.anneal.start);
      ar.get("end", c.anneal.end);
      ar.finish();
    }
  }
  r.get("lr", c.lr);
  r.get_size("batch_size", c.batch_size);
  r.get_size("patience", c.patience);
  r.get_size("max_epochs", c.max_epochs);
  if (r.has("early_stop")) {
    std::string e;
    r.get("early_stop", e);
    c.early_stop = train::parse_early_stop(e);
  }
  r.get("seed", c.seed);
  if (r.has("dataset")) {
    Reader ds = r.child("dataset");
    std::string type = "von_mises";
    ds.get("type", type);
    if (type == "von_mises") {
      c.dataset.kind = DatasetSpec::Kind::VonMises;
      ds.get_size("n_train", c.dataset.n_train);
      ds.get_size("n_val", c.dataset.n_val);
      ds.get_size("n_test", c.dataset.n_test);
      ds.get("loc", c.dataset.loc);
      ds.get("concentration", c.dataset.concentration);
    } else if (type == "csv") {
      c.dataset.kind = DatasetSpec::Kind::Csv;
      ds.get("path", c.dataset.path);
      require(!c.dataset.path.empty(), "dataset.path is required for csv data");
    } else {
      throw InputError("dataset.type must be von_mises or csv");
    }
    ds.finish();
  }
  r.get("output_dir", c.output_dir);
  r.get("jitter", c.jitter);
  r.finish();

  require(c.d >= 1, "d must be at least 1");
  require(c.d <= c.D, "d must not exceed D");
  require(c.beta > 0.0, "beta must be positive");
  require(c.lr > 0.0, "lr must be positive");
  require(c.batch_size >= 1, "batch_size must be at least 1");
  require(c.max_epochs >= 1, "max_epochs must be at least 1");
  require(c.jitter >= 0.0, "jitter must be nonnegative");
  require(!c.anneal.enabled || (c.anneal.start >= 0.0 && c.anneal.start <= c.anneal.end),
          "anneal needs 0 <= start <= end");
  require(c.high.hidden.size() >= 1, "high_flow.hidden needs at least one layer");
  if (c.dataset.kind == DatasetSpec::Kind::VonMises) {
    require(c.D == 2, "von_mises data needs D = 2");
    require(c.dataset.concentration > 0.0, "dataset.concentration must be positive");
    require(c.dataset.n_train >= 1, "dataset.n_train must be at least 1");
    require(c.dataset.n_val >= 2, "dataset.n_val must be at least 2");
    require(c.dataset.n_test >= 2, "dataset.n_test must be at least 2");
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& c) {
  json j;
  j["method"] = train::to_string(c.method);
  if (const auto* s = std::get_if<est::StochasticEstimator>(&c.estimator)) {
    j["estimator"] = {{"type", "stochastic"},
                      {"K", s->probes},
                      {"cg_tol", s->cg_tol},
                      {"probe", est::to_string(s->probe)}};
  } else {
    j["estimator"] = {{"type", "exact"}};
  }
  j["D"] = c.D;
  j["d"] = c.d;
  j["high_flow"] = realnvp_json(c.high);
  json low = realnvp_json(c.low.realnvp);
  switch (c.low.kind) {
    case rect::LowFlowSpec::Kind::None: low["type"] = "none"; break;
    case rect::LowFlowSpec::Kind::Affine: low["type"] = "affine"; break;
    case rect::LowFlowSpec::Kind::RealNvp: low["type"] = "realnvp"; break;
  }
  j["low_flow"] = low;
  j["beta"] = c.beta;
  if (c.anneal.enabled) {
    j["anneal"] = {{"start", c.anneal.start}, {"end", c.anneal.end}};
  } else {
    j["anneal"] = false;
  }
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["patience"] = c.patience;
  j["max_epochs"] = c.max_epochs;
  j["early_stop"] = train::to_string(c.early_stop);
  j["seed"] = c.seed;
  if (c.dataset.kind == DatasetSpec::Kind::VonMises) {
    j["dataset"] = {{"type", "von_mises"},
                    {"n_train", c.dataset.n_train},
                    {"n_val", c.dataset.n_val},
                    {"n_test", c.dataset.n_test},
                    {"loc", c.dataset.loc},
                    {"concentration", c.dataset.concentration}};
  } else {
    j["dataset"] = {{"type", "csv"}, {"path", c.dataset.path}};
  }
  j["output_dir"] = c.output_dir;
  j["jitter"] = c.jitter;
  return j.dump(2);
}

std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& sets) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("config is not valid JSON: ") + e.what());
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw InputError("override '" + s + "' is not key=value");
    const std::string key = s.substr(0, eq);
    const std::string text = s.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json* node = &doc;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      json& next = (*node)[path[i]];
      if (next.is_null() || next.is_boolean()) next = json::object();
      if (!next.is_object()) throw InputError("override '" + key + "' goes through a non-object");
      node = &next;
    }
    (*node)[path.back()] = value;
  }
  return doc.dump();
}

std::string resolve_output_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("RNF_OUTPUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

data::Dataset make_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == DatasetSpec::Kind::Csv) {
    data::Dataset ds = data::load_tabular_csv(cfg.dataset.path, cfg.seed);
    if (ds.dim() != cfg.D) {
      throw InputError("dataset has " + std::to_string(ds.dim()) +
                       " usable columns but D = " + std::to_string(cfg.D));
    }
    return ds;
  }
  const DatasetSpec& s = cfg.dataset;
  data::Dataset ds;
  const std::size_t n = s.n_train + s.n_val + s.n_test;
  ds.data = data::sample_von_mises_circle(n, s.loc, s.concentration, cfg.seed);
  ds.train.resize(s.n_train);
  ds.val.resize(s.n_val);
  ds.test.resize(s.n_test);
  std::iota(ds.train.begin(), ds.train.end(), 0);
  std::iota(ds.val.begin(), ds.val.end(), s.n_train);
  std::iota(ds.test.begin(), ds.test.end(), s.n_train + s.n_val);
  ds.provenance = "von_mises";
  return ds;
}

}  // namespace rectflow::app
