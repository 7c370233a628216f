#pragma once

#include <filesystem>
#include <memory>

#include "json.hpp"
#include "textret/model.hpp"

namespace textret {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// A trained system. `recognizer` is set only for separately trained models, where
/// `model` is the detector and the recognizer reads image crops.
struct TrainedModel {
  std::shared_ptr<Model<float>> model;
  std::shared_ptr<Model<float>> recognizer;
  Charset charset;
  nlohmann::json meta;  // training configuration and progress

  bool separated() const { return recognizer != nullptr; }
  const Model<float>& recognition() const { return recognizer ? *recognizer : *model; }
  std::uint64_t fingerprint() const;
};

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& trained);
TrainedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace textret
