#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asymdsd/pipeline.hpp"
#include "asymdsd/trainer.hpp"

namespace asymdsd::config {

using json = nlohmann::json;

// Flat key-value run configuration. Every pre-training hyperparameter is a
// named key whose default is the paper configuration at the "small" (ViT-S)
// scale; the "micro" scale preset shrinks the model and crops to desk size.
// Unknown keys and type mismatches are rejected with all failures listed.
inline json default_config() {
  return json{
      // training
      {"batch_size", 128},
      {"epochs", 300},
      {"base_lr", 5e-4},
      {"weight_decay", 0.05},
      {"beta1", 0.9},
      {"beta2", 0.999},
      {"grad_clip", 10.0},
      {"lr_warmup_epochs", 10.0},
      {"seed", 0},
      {"checkpoint_every", 50},
      // self-distillation
      {"ema_start", 0.995},
      {"ema_end", 1.0},
      {"center_momentum", 0.9},
      {"tau_student", 0.1},
      {"tau_cls_start", 0.04},
      {"tau_cls_end", 0.07},
      {"tau_patch_start", 0.05},
      {"tau_patch_end", 0.07},
      {"teacher_warmup_epochs", 10.0},
      {"koleo_scale", 0.01},
      // feature flags
      {"centering", true},
      {"sharpening", true},
      {"predictor_mode", "cross_only"},
      {"regression_loss", false},
      {"regression_beta", 2.0},
      // masking
      {"mask_sampler", "inverse_blockwise"},
      {"mask_ratio", 0.7},
      {"block_size", 6},
      {"adjust_ratio", 0.1},
      {"n_masks", 4},
      // cropping
      {"n_local", 4},
      {"global_points", 1024},
      {"global_patches", 64},
      {"local_points", 256},
      {"local_patches", 16},
      {"patch_points", 32},
      {"global_crop_min", 0.4},
      {"global_crop_max", 1.0},
      {"local_crop_min", 0.05},
      {"local_crop_max", 0.4},
      // model
      {"embed_dim", 384},
      {"layers", 12},
      {"heads", 6},
      {"mlp_dim", 1536},
      {"patch_mlp1_hidden", 128},
      {"patch_mlp1_out", 256},
      {"patch_mlp2_hidden", 512},
      {"pos_hidden", 128},
      {"pred_dim", 192},
      {"pred_layers", 6},
      {"pred_heads", 3},
      {"pred_mlp_dim", 768},
      {"pred_pos_hidden", 128},
      {"head_hidden1", 1024},
      {"head_hidden2", 1024},
      {"head_bottleneck", 256},
      {"n_tokens", 4096},
      {"head_weight_norm", false},
      {"drop_path", 0.0},
  };
}

// Desk-scale preset: same topology and training recipe, tiny dims, smaller
// crops, fewer masks. Applied only to keys the user did not set explicitly.
inline json micro_preset() {
  return json{
      {"batch_size", 16},     {"epochs", 30},
      {"lr_warmup_epochs", 3.0}, {"teacher_warmup_epochs", 3.0},
      {"checkpoint_every", 10},
      {"n_masks", 2},         {"block_size", 3},
      {"n_local", 2},
      {"global_points", 256}, {"global_patches", 32},
      {"local_points", 64},   {"local_patches", 8},
      {"patch_points", 16},
      {"embed_dim", 64},      {"layers", 3},
      {"heads", 4},           {"mlp_dim", 256},
      {"patch_mlp1_hidden", 32}, {"patch_mlp1_out", 64},
      {"patch_mlp2_hidden", 128}, {"pos_hidden", 32},
      {"pred_dim", 32},       {"pred_layers", 2},
      {"pred_heads", 2},      {"pred_mlp_dim", 128},
      {"pred_pos_hidden", 32},
      {"head_hidden1", 128},  {"head_hidden2", 128},
      {"head_bottleneck", 64},
      {"head_weight_norm", true},
  };
}

struct RunConfig {
  json values;

  // Builds the effective config: defaults, then the scale preset for keys
  // not explicitly given, then file values, then key=value overrides.
  // Throws with every validation failure listed at once.
  static RunConfig build(const json& file_values,
                         const std::vector<std::string>& overrides,
                         const std::string& scale = "micro") {
    json effective = default_config();
    std::vector<std::string> errors;

    json explicit_values = json::object();
    if (!file_values.is_null()) {
      if (!file_values.is_object()) {
        errors.push_back("config file must hold a JSON object");
      } else {
        for (const auto& [key, value] : file_values.items())
          explicit_values[key] = value;
      }
    }
    for (const auto& ov : overrides) {
      const auto eq = ov.find('=');
      if (eq == std::string::npos || eq == 0) {
        errors.push_back("override '" + ov + "' is not of the form key=value");
        continue;
      }
      const std::string key = ov.substr(0, eq);
      const std::string raw = ov.substr(eq + 1);
      json parsed;
      if (raw == "on" || raw == "true") parsed = true;
      else if (raw == "off" || raw == "false") parsed = false;
      else {
        const auto attempt = json::parse(raw, nullptr, false);
        parsed = attempt.is_discarded() ? json(raw) : attempt;
      }
      explicit_values[key] = parsed;
    }

    if (scale == "micro") {
      const json preset = micro_preset();
      for (const auto& [key, value] : preset.items())
        if (!explicit_values.contains(key)) effective[key] = value;
    } else if (scale != "small") {
      errors.push_back("unknown scale '" + scale + "' (expected micro or small)");
    }

    for (const auto& [key, value] : explicit_values.items()) {
      if (!effective.contains(key)) {
        errors.push_back("unknown config key '" + key + "'");
        continue;
      }
      const auto& def = effective.at(key);
      const bool both_numeric = def.is_number() && value.is_number();
      if (!both_numeric && def.type() != value.type()) {
        errors.push_back("config key '" + key + "' expects " +
                         std::string(def.type_name()) + ", got " +
                         std::string(value.type_name()));
        continue;
      }
      effective[key] = value;
    }

    RunConfig cfg{effective};
    cfg.validate(errors);
    if (!errors.empty()) {
      std::string msg = "config validation failed:";
      for (const auto& e : errors) msg += "\n  - " + e;
      throw Error(msg);
    }
    return cfg;
  }

  void validate(std::vector<std::string>& errors) const {
    auto positive = [&](const char* key) {
      if (values.at(key).get<double>() <= 0)
        errors.push_back(std::string("config key '") + key + "' must be positive");
    };
    positive("batch_size");
    positive("epochs");
    positive("n_tokens");
    positive("global_patches");
    positive("patch_points");
    const double mr = values.at("mask_ratio").get<double>();
    if (mr < 0 || mr >= 1)
      errors.push_back("config key 'mask_ratio' must be in [0, 1)");
    const std::string pm = values.at("predictor_mode").get<std::string>();
    if (pm != "cross_only" && pm != "self_full")
      errors.push_back("config key 'predictor_mode' must be cross_only or self_full");
    const std::string ms = values.at("mask_sampler").get<std::string>();
    if (ms != "inverse_blockwise" && ms != "uniform")
      errors.push_back("config key 'mask_sampler' must be inverse_blockwise or uniform");
    if (values.at("embed_dim").get<int>() % values.at("heads").get<int>() != 0)
      errors.push_back("config: embed_dim must be divisible by heads");
    if (values.at("pred_dim").get<int>() % values.at("pred_heads").get<int>() != 0)
      errors.push_back("config: pred_dim must be divisible by pred_heads");
    if (values.at("sharpening").get<bool>()) {
      if (values.at("tau_cls_end").get<double>() >=
              values.at("tau_student").get<double>() ||
          values.at("tau_patch_end").get<double>() >=
              values.at("tau_student").get<double>())
        errors.push_back(
            "config: teacher temperatures must stay below tau_student while "
            "sharpening is on");
    }
  }

  nn::ModelConfig model() const {
    nn::ModelConfig m;
    m.embed_dim = values.at("embed_dim").get<int>();
    m.layers = values.at("layers").get<int>();
    m.heads = values.at("heads").get<int>();
    m.mlp_dim = values.at("mlp_dim").get<int>();
    m.patch_mlp1_hidden = values.at("patch_mlp1_hidden").get<int>();
    m.patch_mlp1_out = values.at("patch_mlp1_out").get<int>();
    m.patch_mlp2_hidden = values.at("patch_mlp2_hidden").get<int>();
    m.pos_hidden = values.at("pos_hidden").get<int>();
    m.pred_dim = values.at("pred_dim").get<int>();
    m.pred_layers = values.at("pred_layers").get<int>();
    m.pred_heads = values.at("pred_heads").get<int>();
    m.pred_mlp_dim = values.at("pred_mlp_dim").get<int>();
    m.pred_pos_hidden = values.at("pred_pos_hidden").get<int>();
    m.head_hidden1 = values.at("head_hidden1").get<int>();
    m.head_hidden2 = values.at("head_hidden2").get<int>();
    m.head_bottleneck = values.at("head_bottleneck").get<int>();
    m.n_tokens = values.at("n_tokens").get<int>();
    m.head_weight_norm = values.at("head_weight_norm").get<bool>();
    m.drop_path = values.at("drop_path").get<float>();
    return m;
  }

  pipeline::PipelineConfig pipeline() const {
    pipeline::PipelineConfig p;
    p.model = model();
    p.crops.n_local = values.at("n_local").get<int>();
    p.crops.global_points = values.at("global_points").get<int>();
    p.crops.global_patches = values.at("global_patches").get<int>();
    p.crops.local_points = values.at("local_points").get<int>();
    p.crops.local_patches = values.at("local_patches").get<int>();
    p.crops.patch_points = values.at("patch_points").get<int>();
    p.crops.global_c_min = values.at("global_crop_min").get<float>();
    p.crops.global_c_max = values.at("global_crop_max").get<float>();
    p.crops.local_c_min = values.at("local_crop_min").get<float>();
    p.crops.local_c_max = values.at("local_crop_max").get<float>();
    p.mask_sampler = values.at("mask_sampler").get<std::string>();
    p.mask_ratio = values.at("mask_ratio").get<double>();
    p.block_size = values.at("block_size").get<int>();
    p.adjust_ratio = values.at("adjust_ratio").get<double>();
    p.n_masks = values.at("n_masks").get<int>();
    p.predictor_mode =
        nn::predictor_mode_from(values.at("predictor_mode").get<std::string>());
    p.centering = values.at("centering").get<bool>();
    p.use_regression = values.at("regression_loss").get<bool>();
    p.regression_beta = values.at("regression_beta").get<double>();
    p.koleo_scale = values.at("koleo_scale").get<double>();
    p.tau_student = values.at("tau_student").get<double>();
    p.center_momentum = values.at("center_momentum").get<float>();
    return p;
  }

  train::TrainConfig trainer() const {
    train::TrainConfig t;
    t.batch_size = values.at("batch_size").get<int>();
    t.epochs = values.at("epochs").get<int>();
    t.base_lr = values.at("base_lr").get<double>();
    t.weight_decay = values.at("weight_decay").get<double>();
    t.beta1 = values.at("beta1").get<double>();
    t.beta2 = values.at("beta2").get<double>();
    t.grad_clip = values.at("grad_clip").get<double>();
    t.lr_warmup_epochs = values.at("lr_warmup_epochs").get<double>();
    t.teacher_warmup_epochs = values.at("teacher_warmup_epochs").get<double>();
    t.ema_start = values.at("ema_start").get<double>();
    t.ema_end = values.at("ema_end").get<double>();
    t.tau_cls_start = values.at("tau_cls_start").get<double>();
    t.tau_cls_end = values.at("tau_cls_end").get<double>();
    t.tau_patch_start = values.at("tau_patch_start").get<double>();
    t.tau_patch_end = values.at("tau_patch_end").get<double>();
    t.sharpening = values.at("sharpening").get<bool>();
    t.seed = values.at("seed").get<uint64_t>();
    return t;
  }

  int checkpoint_every() const { return values.at("checkpoint_every").get<int>(); }

  // FNV-1a over the canonical dump; nlohmann objects serialize key-sorted.
  uint64_t digest() const {
    const std::string dump = values.dump();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : dump) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

inline json load_json_file(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "config: cannot open '", path, "'");
  json j = json::parse(f, nullptr, false);
  check(!j.is_discarded(), "config: '", path, "' is not valid JSON");
  return j;
}

}  // namespace asymdsd::config
