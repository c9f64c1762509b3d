#include "xnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xnet/errors.hpp"

namespace xnet {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

/// Walks one JSON object, consuming known keys; leftovers are errors.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return join(path_, key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + join(path_, it.key()) + "'");
    }
  }

  template <typename T>
  void number(const std::string& key, T& out) {
    const json* v = take(key);
    if (!v) return;
    if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) throw ConfigError("config key '" + path(key) + "' must be a number");
      out = static_cast<T>(v->get<double>());
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v->is_number_unsigned()) throw ConfigError("config key '" + path(key) + "' must be a non-negative integer");
      out = v->get<T>();
    } else {
      if (!v->is_number_integer()) throw ConfigError("config key '" + path(key) + "' must be an integer");
      const auto wide = v->get<std::int64_t>();
      if (wide < std::numeric_limits<T>::min() || wide > std::numeric_limits<T>::max()) {
        throw ConfigError("config key '" + path(key) + "' is out of range");
      }
      out = static_cast<T>(wide);
    }
  }

  void boolean(const std::string& key, bool& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_boolean()) throw ConfigError("config key '" + path(key) + "' must be true or false");
    out = v->get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError("config key '" + path(key) + "' must be a string");
    out = v->get<std::string>();
  }

  template <typename E, typename Parse>
  void enumeration(const std::string& key, E& out, Parse parse) {
    std::string s;
    const json* v = take(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError("config key '" + path(key) + "' must be a string");
    try {
      out = parse(v->get<std::string>());
    } catch (const Error& e) {
      throw ConfigError("config key '" + path(key) + "': " + e.what());
    }
  }

  template <std::size_t N>
  void int_array(const std::string& key, std::array<int, N>& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_array() || v->size() != N) {
      throw ConfigError("config key '" + path(key) + "' must be an array of " + std::to_string(N) + " integers");
    }
    for (std::size_t i = 0; i < N; ++i) {
      if (!(*v)[i].is_number_integer()) {
        throw ConfigError("config key '" + path(key) + "[" + std::to_string(i) + "]' must be an integer");
      }
      out[i] = (*v)[i].get<int>();
    }
  }

  std::string where() const { return path_.empty() ? "config root" : "config key '" + path_ + "'"; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_backbone(const json& j, const std::string& path, BackboneConfig& b) {
  Reader r(j, path);
  r.int_array("stage_depths", b.stage_depths);
  r.int_array("stage_dims", b.stage_dims);
  r.number("in_channels", b.in_channels);
  r.number("num_classes", b.num_classes);
  r.number("layer_scale_init", b.layer_scale_init);
  r.finish();
}

void read_train(const json& j, const std::string& path, TrainConfig& t) {
  Reader r(j, path);
  r.number("epochs", t.epochs);
  r.number("batch_size", t.batch_size);
  r.number("lr", t.lr);
  r.enumeration("optimizer", t.optimizer, optimizer_kind_from_string);
  r.number("weight_decay", t.weight_decay);
  r.number("seed", t.seed);
  r.number("max_depth", t.max_depth);
  r.boolean("flip_augment", t.flip_augment);
  r.enumeration("pretrain_volume", t.pretrain_volume, pretrain_volume_from_string);
  r.number("warmup_fraction", t.warmup_fraction);
  r.finish();
}

void read_data(const json& j, const std::string& path, DataConfig& d) {
  Reader r(j, path);
  r.number("pretrain_samples", d.pretrain_samples);
  r.number("dense_samples", d.dense_samples);
  r.number("height", d.height);
  r.number("width", d.width);
  r.number("seed", d.seed);
  r.finish();
}

json train_json(const TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"optimizer", to_string(t.optimizer)},
              {"weight_decay", t.weight_decay},
              {"seed", t.seed},
              {"max_depth", t.max_depth},
              {"flip_augment", t.flip_augment},
              {"pretrain_volume", to_string(t.pretrain_volume)},
              {"warmup_fraction", t.warmup_fraction}};
}

}  // namespace

void RunConfig::validate() const {
  backbone.validate();
  pretrain.validate();
  finetune.validate();
  data.validate();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.backbone = backbone;
  mc.task = task;
  mc.max_depth = finetune.max_depth;
  mc.freeze_encoder = freeze_encoder;
  return mc;
}

AblationConfig RunConfig::ablation_config() const {
  AblationConfig ac;
  ac.backbone = backbone;
  ac.pretrain = pretrain;
  ac.finetune = finetune;
  ac.data = data;
  ac.seeds = seeds;
  return ac;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Reader r(j, "");
  if (auto* v = r.take("backbone")) read_backbone(*v, "backbone", cfg.backbone);
  if (auto* v = r.take("pretrain")) read_train(*v, "pretrain", cfg.pretrain);
  if (auto* v = r.take("finetune")) read_train(*v, "finetune", cfg.finetune);
  if (auto* v = r.take("data")) read_data(*v, "data", cfg.data);
  r.enumeration("variant", cfg.variant, variant_from_string);
  r.enumeration("task", cfg.task, task_from_string);
  r.boolean("freeze_encoder", cfg.freeze_encoder);
  if (auto* v = r.take("seeds")) {
    if (!v->is_array()) throw ConfigError("config key 'seeds' must be an array of non-negative integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_number_unsigned()) {
        throw ConfigError("config key 'seeds[" + std::to_string(i) + "]' must be a non-negative integer");
      }
      cfg.seeds.push_back((*v)[i].get<std::uint64_t>());
    }
  }
  if (auto* v = r.take("paths")) {
    Reader p(*v, "paths");
    p.string("encoder", cfg.paths.encoder);
    p.string("decoder", cfg.paths.decoder);
    p.string("out", cfg.paths.out);
    p.finish();
  }
  r.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  json j;
  j["backbone"] = {{"stage_depths", cfg.backbone.stage_depths},
                   {"stage_dims", cfg.backbone.stage_dims},
                   {"in_channels", cfg.backbone.in_channels},
                   {"num_classes", cfg.backbone.num_classes},
                   {"layer_scale_init", cfg.backbone.layer_scale_init}};
  j["pretrain"] = train_json(cfg.pretrain);
  j["finetune"] = train_json(cfg.finetune);
  j["data"] = {{"pretrain_samples", cfg.data.pretrain_samples},
               {"dense_samples", cfg.data.dense_samples},
               {"height", cfg.data.height},
               {"width", cfg.data.width},
               {"seed", cfg.data.seed}};
  j["variant"] = to_string(cfg.variant);
  j["task"] = to_string(cfg.task);
  j["freeze_encoder"] = cfg.freeze_encoder;
  j["seeds"] = cfg.seeds;
  j["paths"] = {{"encoder", cfg.paths.encoder}, {"decoder", cfg.paths.decoder}, {"out", cfg.paths.out}};
  return j.dump(2) + "\n";
}

}  // namespace xnet
