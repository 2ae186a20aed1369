#pragma once

// Checkpoint serialization and config JSON handling. A checkpoint is a JSON
// header (config echo + tensor manifest) followed by one QTEN record per
// parameter tensor, in manifest order.

#include <fstream>
#include <string>

#include <json.hpp>

#include "backbone.hpp"
#include "io.hpp"

namespace quadscan {

using json = nlohmann::json;

inline json config_to_json(const VariantConfig& cfg) {
  json j;
  j["variant"] = cfg.name;
  j["depths"] = cfg.depths;
  j["channels"] = cfg.base_channels;
  j["quad_stages"] = cfg.quad_stages;
  j["shift"] = cfg.enable_shift;
  j["tau"] = cfg.tau;
  j["seed"] = cfg.seed;
  j["num_classes"] = cfg.num_classes;
  j["image_size"] = cfg.image_size;
  j["expansion_ratio"] = cfg.expansion_ratio;
  j["drop_path"] = cfg.drop_path_rate;
  return j;
}

inline VariantConfig config_from_json(const json& j) {
  VariantConfig cfg = VariantConfig::by_name(j.value("variant", "micro"));
  if (j.contains("depths")) {
    auto d = j.at("depths").get<std::vector<int>>();
    check(d.size() == 4, "config: depths must have 4 entries");
    std::copy(d.begin(), d.end(), cfg.depths.begin());
  }
  if (j.contains("channels")) cfg.base_channels = j.at("channels").get<int>();
  if (j.contains("quad_stages"))
    cfg.quad_stages = j.at("quad_stages").get<std::vector<int>>();
  if (j.contains("shift")) cfg.enable_shift = j.at("shift").get<bool>();
  if (j.contains("tau")) cfg.tau = j.at("tau").get<double>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
  if (j.contains("image_size")) cfg.image_size = j.at("image_size").get<int>();
  if (j.contains("expansion_ratio"))
    cfg.expansion_ratio = j.at("expansion_ratio").get<double>();
  if (j.contains("drop_path")) cfg.drop_path_rate = j.at("drop_path").get<double>();
  return cfg;
}

inline void save_checkpoint(Model<float>& model, const std::string& path) {
  json header;
  header["format"] = "quadscan-checkpoint";
  header["version"] = 1;
  header["config"] = config_to_json(model.cfg);
  json manifest = json::array();
  std::vector<Tensor<float>> tensors;
  for (auto& [name, t] : model.named_parameters()) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t->shape();
    manifest.push_back(entry);
    tensors.push_back(*t);
  }
  header["manifest"] = manifest;
  write_checkpoint_raw(path, header.dump(), tensors);
}

inline Model<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "checkpoint: cannot open " + path);
  json header = json::parse(read_checkpoint_header(is));
  check(header.value("format", "") == std::string("quadscan-checkpoint"),
        "checkpoint: unrecognized header");
  Model<float> model = build_variant<float>(config_from_json(header.at("config")));
  auto params = model.named_parameters();
  const json& manifest = header.at("manifest");
  check(manifest.size() == params.size(),
        "checkpoint: manifest size does not match model parameters");
  for (size_t i = 0; i < params.size(); ++i) {
    check(manifest[i].at("name").get<std::string>() == params[i].first,
          "checkpoint: manifest order mismatch at " + params[i].first);
    Tensor<float> t = read_qten<float>(is);
    check(t.shape() == params[i].second->shape(),
          "checkpoint: shape mismatch for " + params[i].first);
    params[i].second->param_data() = t.vals();
  }
  return model;
}

}  // namespace quadscan
