#include "fedcsap/harness/config.hpp"

#include <fstream>
#include <set>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/random.hpp"

namespace fedcsap::harness {

using nlohmann::json;

namespace {

// Walks one JSON object, remembering which keys were read so leftovers can
// be rejected by name.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(child(key) + ": expected a boolean");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(child(key) + ": expected a number");
      out = v->get<double>();
    }
  }

  void read(const std::string& key, Index& out) {
    if (const json* v = find(key)) out = as_index(*v, child(key));
  }

  void read(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(child(key) + ": expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(child(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError(child(it.key()) + ": unknown key");
    }
  }

  static Index as_index(const json& v, const std::string& path) {
    if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
    return v.get<Index>();
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<double> read_numbers(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + ": expected an array");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]: expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

std::vector<Index> read_indices(const json& v, const std::string& path, std::size_t expected) {
  if (!v.is_array() || v.size() != expected) {
    throw ConfigError(path + ": expected an array of " + std::to_string(expected) + " integers");
  }
  std::vector<Index> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(ObjectReader::as_index(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

void parse_data(const json& j, ExperimentConfig& cfg) {
  ObjectReader r(j, "data");
  SyntheticTaskConfig& d = cfg.data;
  r.read("num_classes", d.num_classes);
  r.read("shots_per_class", d.shots_per_class);
  r.read("per_client_classes", cfg.per_client_classes);
  r.read("class_margin", d.class_margin);
  r.read("noise_sigma", d.noise_sigma);
  if (const json* v = r.find("image_shape")) {
    const std::vector<Index> s = read_indices(*v, "data.image_shape", 3);
    d.image_shape = {s[0], s[1], s[2]};
  }
  if (const json* v = r.find("domains")) {
    if (!v->is_array()) throw ConfigError("data.domains: expected an array");
    d.domains.clear();
    for (std::size_t k = 0; k < v->size(); ++k) {
      const std::string path = "data.domains[" + std::to_string(k) + "]";
      ObjectReader dr((*v)[k], path);
      StyleParams style;
      dr.read("brightness_shift", style.brightness_shift);
      dr.read("contrast_scale", style.contrast_scale);
      if (const json* b = dr.find("channel_bias")) style.channel_bias = read_numbers(*b, path + ".channel_bias");
      dr.finish();
      d.domains.push_back(std::move(style));
    }
  }
  r.finish();
}

void parse_model(const json& j, ModelConfig& m) {
  ObjectReader r(j, "model");
  r.read("d", m.width);
  r.read("m", m.prompt_length);
  r.read("heads", m.heads);
  r.read("Q_se", m.se_layers);
  r.read("r", m.reduction);
  r.read("init_std", m.init_std);
  r.read("style_momentum", m.style_momentum);
  if (const json* v = r.find("stage_shapes")) {
    if (!v->is_array()) throw ConfigError("model.stage_shapes: expected an array");
    m.stages.clear();
    for (std::size_t l = 0; l < v->size(); ++l) {
      const std::vector<Index> s = read_indices((*v)[l], "model.stage_shapes[" + std::to_string(l) + "]", 3);
      m.stages.push_back({s[0], s[1], s[2]});
    }
  }
  if (const json* v = r.find("L")) {
    const Index levels = ObjectReader::as_index(*v, "model.L");
    if (levels != static_cast<Index>(m.stages.size())) {
      throw ConfigError("model.L: " + std::to_string(levels) + " does not match " + std::to_string(m.stages.size()) +
                        " stage_shapes entries");
    }
  }
  r.finish();
}

void parse_loss(const json& j, LossConfig& loss) {
  ObjectReader r(j, "loss");
  r.read("tau", loss.tau);
  r.read("lambda_crp", loss.lambda_crp);
  r.finish();
}

void parse_fed(const json& j, RoundConfig& fed) {
  ObjectReader r(j, "fed");
  r.read("rounds", fed.rounds);
  r.read("local_steps", fed.local_steps);
  r.read("lr", fed.lr);
  r.read("participation", fed.participation);
  r.read("batch_size", fed.batch_size);
  r.read("weighted", fed.weighted);
  std::string schedule;
  r.read("lr_schedule", schedule);
  if (schedule == "cosine") {
    fed.schedule = LrSchedule::cosine;
  } else if (schedule.empty() || schedule == "constant") {
    fed.schedule = LrSchedule::constant;
  } else {
    throw ConfigError("fed.lr_schedule: expected \"constant\" or \"cosine\", got \"" + schedule + "\"");
  }
  r.finish();
}

void parse_ablations(const json& j, Ablations& a) {
  ObjectReader r(j, "ablations");
  r.read("disable_injection", a.disable_injection);
  r.read("static_prompts", a.static_prompts);
  std::string variant;
  r.read("crp_variant", variant);
  if (!variant.empty()) {
    try {
      a.crp_variant = parse_crp_variant(variant);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("ablations.crp_variant: ") + e.what());
    }
  }
  r.finish();
}

}  // namespace

std::string to_string(CrpVariant v) { return v == CrpVariant::normalized ? "normalized" : "unnormalized"; }

CrpVariant parse_crp_variant(const std::string& s) {
  if (s == "normalized") return CrpVariant::normalized;
  if (s == "unnormalized") return CrpVariant::unnormalized;
  throw ConfigError("expected \"normalized\" or \"unnormalized\", got \"" + s + "\"");
}

void ExperimentConfig::resolve() {
  data.seed = derive_seed(master_seed, "data");
  fed.client_seed = derive_seed(master_seed, "clients");
  model.image = data.image_shape;
  model.disable_injection = ablations.disable_injection;
  model.static_prompts = ablations.static_prompts;
  loss.crp_variant = ablations.crp_variant;
}

void ExperimentConfig::validate() const {
  data.validate();
  if (per_client_classes < 1) throw ConfigError("data.per_client_classes: must be at least 1");
  const Index n_base = (data.num_classes + 1) / 2;
  if (n_base % per_client_classes != 0) {
    throw ConfigError("data.per_client_classes: " + std::to_string(n_base) + " base classes are not divisible by " +
                      std::to_string(per_client_classes) + "; adjust data.num_classes or data.per_client_classes");
  }
  model.validate();
  loss.validate();
  fed.validate();
  if (fed.rounds % fed.eval_cadence != 0) {
    throw ConfigError("eval_cadence: " + std::to_string(fed.eval_cadence) + " does not divide fed.rounds = " +
                      std::to_string(fed.rounds));
  }
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  ObjectReader r(j, "");
  r.read("master_seed", cfg.master_seed);
  r.read("output_dir", cfg.output_dir);
  r.read("eval_cadence", cfg.fed.eval_cadence);
  if (const json* v = r.find("data")) parse_data(*v, cfg);
  if (const json* v = r.find("model")) parse_model(*v, cfg.model);
  if (const json* v = r.find("loss")) parse_loss(*v, cfg.loss);
  if (const json* v = r.find("fed")) parse_fed(*v, cfg.fed);
  if (const json* v = r.find("ablations")) parse_ablations(*v, cfg.ablations);
  r.finish();
  cfg.resolve();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& cfg) {
  json domains = json::array();
  for (const StyleParams& s : cfg.data.domains) {
    json d{{"brightness_shift", s.brightness_shift}, {"contrast_scale", s.contrast_scale}};
    if (!s.channel_bias.empty()) d["channel_bias"] = s.channel_bias;
    domains.push_back(std::move(d));
  }
  json stages = json::array();
  for (const StageShape& s : cfg.model.stages) stages.push_back({s.width, s.height, s.channels});
  const ImageShape& img = cfg.data.image_shape;
  return json{
      {"master_seed", cfg.master_seed},
      {"output_dir", cfg.output_dir},
      {"eval_cadence", cfg.fed.eval_cadence},
      {"data",
       {{"num_classes", cfg.data.num_classes},
        {"shots_per_class", cfg.data.shots_per_class},
        {"per_client_classes", cfg.per_client_classes},
        {"class_margin", cfg.data.class_margin},
        {"noise_sigma", cfg.data.noise_sigma},
        {"image_shape", {img.channels, img.height, img.width}},
        {"domains", domains}}},
      {"model",
       {{"d", cfg.model.width},
        {"m", cfg.model.prompt_length},
        {"heads", cfg.model.heads},
        {"L", static_cast<Index>(cfg.model.stages.size())},
        {"stage_shapes", stages},
        {"Q_se", cfg.model.se_layers},
        {"r", cfg.model.reduction},
        {"init_std", cfg.model.init_std},
        {"style_momentum", cfg.model.style_momentum}}},
      {"loss", {{"tau", cfg.loss.tau}, {"lambda_crp", cfg.loss.lambda_crp}}},
      {"fed",
       {{"rounds", cfg.fed.rounds},
        {"local_steps", cfg.fed.local_steps},
        {"lr", cfg.fed.lr},
        {"lr_schedule", cfg.fed.schedule == LrSchedule::cosine ? "cosine" : "constant"},
        {"participation", cfg.fed.participation},
        {"batch_size", cfg.fed.batch_size},
        {"weighted", cfg.fed.weighted}}},
      {"ablations",
       {{"disable_injection", cfg.ablations.disable_injection},
        {"static_prompts", cfg.ablations.static_prompts},
        {"crp_variant", to_string(cfg.ablations.crp_variant)}}},
  };
}

}  // namespace fedcsap::harness
