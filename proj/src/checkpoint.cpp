#include "textret/checkpoint.hpp"

#include "textret/archive.hpp"

namespace textret {

namespace {
constexpr std::string_view kMagic = "TXRCKPT1";
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"C", c.C},
       {"T", c.T},
       {"h_roi", c.h_roi},
       {"backbone_width", c.backbone_width},
       {"charset_size", c.charset_size},
       {"max_word_len", c.max_word_len},
       {"nms_iou", c.nms_iou},
       {"score_thresh", c.score_thresh},
       {"max_proposals", c.max_proposals},
       {"gn_groups", c.gn_groups},
       {"level_split", c.level_split},
       {"head", c.head == HeadKind::Phoc ? "phoc" : "similarity"},
       {"crop_input", c.crop_input},
       {"phoc_levels", c.phoc_levels}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.C = j.at("C");
  c.T = j.at("T");
  c.h_roi = j.at("h_roi");
  c.backbone_width = j.at("backbone_width");
  c.charset_size = j.at("charset_size");
  c.max_word_len = j.at("max_word_len");
  c.nms_iou = j.at("nms_iou");
  c.score_thresh = j.at("score_thresh");
  c.max_proposals = j.at("max_proposals");
  c.gn_groups = j.at("gn_groups");
  c.level_split = j.at("level_split");
  c.head = j.at("head") == "phoc" ? HeadKind::Phoc : HeadKind::Similarity;
  c.crop_input = j.at("crop_input");
  c.phoc_levels = j.at("phoc_levels").get<std::vector<int>>();
}

std::uint64_t TrainedModel::fingerprint() const {
  std::uint64_t h = model->fingerprint();
  if (recognizer) {
    const std::uint64_t r = recognizer->fingerprint();
    h = fnv1a(&r, sizeof r, h);
  }
  return fnv1a(&h, sizeof h, charset.id());
}

namespace {

void put_params(Archive& a, const std::string& prefix, const Model<float>& m) {
  for (const auto& [name, p] : m.params().items())
    a.arrays[prefix + name] = ArchiveArray{p.value.shape, p.value.data.cast<double>()};
}

std::shared_ptr<Model<float>> get_model(const Archive& a, const std::string& prefix, const ModelConfig& cfg) {
  auto m = std::make_shared<Model<float>>(cfg, 0);
  for (auto& [name, p] : m->params().items()) {
    auto it = a.arrays.find(prefix + name);
    if (it == a.arrays.end()) throw IoError("checkpoint lacks parameter " + prefix + name);
    if (it->second.shape != p.value.shape)
      throw IoError("checkpoint parameter " + prefix + name + " has shape " + nn::shape_string(it->second.shape) +
                    ", expected " + nn::shape_string(p.value.shape));
    p.value.data = it->second.data.cast<float>();
  }
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& trained) {
  Archive a;
  a.header["kind"] = trained.separated() ? "separated" : (trained.model->config().head == HeadKind::Phoc ? "phoc" : "joint");
  a.header["model"] = trained.model->config();
  if (trained.recognizer) a.header["recognizer"] = trained.recognizer->config();
  a.header["charset"] = {{"symbols", trained.charset.symbols()}, {"fold_case", trained.charset.fold_case()}};
  a.header["meta"] = trained.meta;
  a.header["fingerprint"] = trained.fingerprint();
  put_params(a, "model/", *trained.model);
  if (trained.recognizer) put_params(a, "recognizer/", *trained.recognizer);
  write_archive(path, kMagic, a);
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  const Archive a = read_archive(path, kMagic);
  TrainedModel t;
  try {
    t.charset = Charset(a.header.at("charset").at("symbols").get<std::vector<std::string>>(),
                        a.header.at("charset").at("fold_case").get<bool>());
    t.model = get_model(a, "model/", a.header.at("model").get<ModelConfig>());
    if (a.header.contains("recognizer")) t.recognizer = get_model(a, "recognizer/", a.header.at("recognizer").get<ModelConfig>());
    t.meta = a.header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header (" + e.what() + ")");
  }
  if (a.header.at("fingerprint").get<std::uint64_t>() != t.fingerprint())
    throw IoError(path.string() + ": fingerprint mismatch, checkpoint is corrupt");
  return t;
}

}  // namespace textret
