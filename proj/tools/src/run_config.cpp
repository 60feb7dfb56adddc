#include "vndiff_cli/run_config.hpp"

#include <fstream>
#include <set>

#include "vndiff/error.hpp"

namespace vndiff::cli {

using nlohmann::json;

RunConfig::RunConfig() {
  network.levels = 2;
  network.base_channels = 8;
  network.channel_mult = {1, 2};
  network.blocks_per_level = 1;
  network.time_embed_dim = 32;
  network.patch_edge = 16;
  pretrain.steps = 2000;
  pretrain.lr = 1e-3;
  finetune.steps = 1000;
  finetune.lr = 1e-4;
  baseline.steps = 1000;
  baseline.lr = 1e-4;
}

void RunConfig::validate() const {
  if (workers < 1) throw ParameterError("workers must be positive");
  if (schedule.steps < 1) throw ParameterError("schedule.steps must be positive");
  network.validate();
  for (const auto* t : {&pretrain, &finetune, &baseline}) {
    if (t->steps < 0) throw ParameterError("training steps must be nonnegative");
    if (t->batch_size < 1) throw ParameterError("batch_size must be positive");
    if (!(t->lr >= 0.0)) throw ParameterError("lr must be nonnegative");
    if (t->log_every < 1) throw ParameterError("log_every must be positive");
  }
  for (int d : data.dims)
    if (d < network.patch_edge) throw ParameterError("data.dims must be at least network.patch_edge");
  for (int n : {data.pretrain_count, data.finetune_count, data.val_count, data.test_count})
    if (n < 1) throw ParameterError("dataset split counts must be positive");
  if (!(data.dose_fraction > 0.0 && data.dose_fraction <= 1.0))
    throw ParameterError("data.dose_fraction must lie in (0, 1]");
  if (!(data.counts_per_unit > 0.0)) throw ParameterError("data.counts_per_unit must be positive");
  if (!(data.vmax > 0.0)) throw ParameterError("data.vmax must be positive");
  inference.validate();
  if (inference.patch_edge % network.downsample_factor() != 0)
    throw ParameterError("inference.patch_edge must be divisible by the network downsampling factor");
  for (const auto& m : evaluation.methods) parse_method(m);
  if (evaluation.ssim.window_edge < 1 || evaluation.ssim.window_edge % 2 == 0)
    throw ParameterError("evaluation.ssim.window_edge must be odd");
}

namespace {

// Reads known keys of one object; anything left over is an error.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ParameterError(where_ + " must be an object");
  }
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw ParameterError("unknown config key '" + where_ + key + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParameterError("config key '" + where_ + key + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return where_ + key + "."; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_train(const json& j, const std::string& where, TrainConfig& t) {
  Reader r(j, where);
  r.get("steps", t.steps);
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("log_every", t.log_every);
  r.finish();
}

json train_json(const TrainConfig& t) {
  return {{"steps", t.steps}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"log_every", t.log_every}};
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& p = c.data.phantom;
  json inference = c.inference;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"schedule", {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
      {"network", c.network},
      {"pretrain", train_json(c.pretrain)},
      {"finetune", train_json(c.finetune)},
      {"baseline", train_json(c.baseline)},
      {"data",
       {{"dims", c.data.dims},
        {"spacing", c.data.spacing},
        {"dose_fraction", c.data.dose_fraction},
        {"counts_per_unit", c.data.counts_per_unit},
        {"vmax", c.data.vmax},
        {"pretrain_count", c.data.pretrain_count},
        {"finetune_count", c.data.finetune_count},
        {"val_count", c.data.val_count},
        {"test_count", c.data.test_count},
        {"phantom",
         {{"background_level", p.background_level},
          {"body_intensity", p.body_intensity},
          {"min_organs", p.min_organs},
          {"max_organs", p.max_organs},
          {"organ_min", p.organ_min},
          {"organ_max", p.organ_max},
          {"min_lesions", p.min_lesions},
          {"max_lesions", p.max_lesions},
          {"lesion_radius_min", p.lesion_radius_min},
          {"lesion_radius_max", p.lesion_radius_max},
          {"contrast_min", p.contrast_min},
          {"contrast_max", p.contrast_max},
          {"smoothing_mm", p.smoothing_mm}}}}},
      {"inference", inference},
      {"evaluation",
       {{"ssim",
         {{"window_edge", c.evaluation.ssim.window_edge},
          {"window_sigma", c.evaluation.ssim.window_sigma},
          {"k1", c.evaluation.ssim.k1},
          {"k2", c.evaluation.ssim.k2}}},
        {"methods", c.evaluation.methods}}}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  {
    Reader r(j, "");
    r.get("seed", c.seed);
    r.get("workers", c.workers);
    if (const json* s = r.child("schedule")) {
      Reader rs(*s, "schedule.");
      rs.get("steps", c.schedule.steps);
      rs.get("beta_start", c.schedule.beta_start);
      rs.get("beta_end", c.schedule.beta_end);
      rs.finish();
    }
    if (const json* n = r.child("network")) {
      // Unspecified network fields keep the run defaults.
      json merged = c.network;
      if (!n->is_object()) throw ParameterError("network must be an object");
      for (const auto& [key, value] : n->items()) merged[key] = value;
      try {
        c.network = merged.get<UNetConfig>();
      } catch (const json::exception& e) {
        throw ParameterError(std::string("config key 'network': ") + e.what());
      }
    }
    if (const json* t = r.child("pretrain")) read_train(*t, "pretrain.", c.pretrain);
    if (const json* t = r.child("finetune")) read_train(*t, "finetune.", c.finetune);
    if (const json* t = r.child("baseline")) read_train(*t, "baseline.", c.baseline);
    if (const json* d = r.child("data")) {
      Reader rd(*d, "data.");
      rd.get("dims", c.data.dims);
      rd.get("spacing", c.data.spacing);
      rd.get("dose_fraction", c.data.dose_fraction);
      rd.get("counts_per_unit", c.data.counts_per_unit);
      rd.get("vmax", c.data.vmax);
      rd.get("pretrain_count", c.data.pretrain_count);
      rd.get("finetune_count", c.data.finetune_count);
      rd.get("val_count", c.data.val_count);
      rd.get("test_count", c.data.test_count);
      if (const json* p = rd.child("phantom")) {
        auto& q = c.data.phantom;
        Reader rp(*p, "data.phantom.");
        rp.get("background_level", q.background_level);
        rp.get("body_intensity", q.body_intensity);
        rp.get("min_organs", q.min_organs);
        rp.get("max_organs", q.max_organs);
        rp.get("organ_min", q.organ_min);
        rp.get("organ_max", q.organ_max);
        rp.get("min_lesions", q.min_lesions);
        rp.get("max_lesions", q.max_lesions);
        rp.get("lesion_radius_min", q.lesion_radius_min);
        rp.get("lesion_radius_max", q.lesion_radius_max);
        rp.get("contrast_min", q.contrast_min);
        rp.get("contrast_max", q.contrast_max);
        rp.get("smoothing_mm", q.smoothing_mm);
        rp.finish();
      }
      rd.finish();
    }
    if (const json* inf = r.child("inference")) {
      if (!inf->is_object()) throw ParameterError("inference must be an object");
      try {
        from_json(*inf, c.inference);
      } catch (const json::exception& e) {
        throw ParameterError(std::string("config key 'inference': ") + e.what());
      }
    }
    if (const json* e = r.child("evaluation")) {
      Reader re(*e, "evaluation.");
      re.get("methods", c.evaluation.methods);
      if (const json* s = re.child("ssim")) {
        Reader rs(*s, "evaluation.ssim.");
        rs.get("window_edge", c.evaluation.ssim.window_edge);
        rs.get("window_sigma", c.evaluation.ssim.window_sigma);
        rs.get("k1", c.evaluation.ssim.k1);
        rs.get("k2", c.evaluation.ssim.k2);
        rs.finish();
      }
      re.finish();
    }
    r.finish();
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParameterError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace vndiff::cli
