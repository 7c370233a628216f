#include "textret/model.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "textret/phoc.hpp"

namespace textret {

using nn::ConvSpec;
using nn::Shape;
using nn::Tensor;

ModelConfig ModelConfig::desk(int charset_size) {
  ModelConfig c;
  c.charset_size = charset_size;
  return c;
}

ModelConfig ModelConfig::full(int charset_size) {
  ModelConfig c;
  c.charset_size = charset_size;
  c.C = 128;
  c.T = 15;
  c.backbone_width = 64;
  c.gn_groups = 32;
  return c;
}

int ModelConfig::phoc_dim() const { return phoc_dimension(charset_size, phoc_levels); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidInput("model config: " + what); };
  if (C < 2 || C % 2 != 0) fail("C must be even and >= 2");
  if (T < 2) fail("T must be >= 2");
  if (h_roi < 4 || h_roi % 4 != 0) fail("h_roi must be a positive multiple of 4");
  if (charset_size < 1) fail("charset must be non-empty");
  if (max_word_len < 1) fail("max_word_len must be positive");
  if (!(nms_iou > 0 && nms_iou <= 1)) fail("nms_iou must lie in (0, 1]");
  if (!(score_thresh >= 0 && score_thresh < 1)) fail("score_thresh must lie in [0, 1)");
  if (max_proposals < 1) fail("max_proposals must be positive");
  if (gn_groups < 1 || backbone_width % gn_groups != 0 || fpn_channels() % gn_groups != 0)
    fail("backbone_width and 2C must be divisible by gn_groups");
  if (level_split <= 0) fail("level_split must be positive");
  if (head == HeadKind::Phoc && phoc_levels.empty()) fail("PHOC head needs pyramid levels");
}

template <class S>
Tensor<S> image_tensor(const Image& image) {
  Tensor<S> t(Shape{1, 3, image.height, image.width});
  const Eigen::Index plane = static_cast<Eigen::Index>(image.height) * image.width;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.data[c * plane + static_cast<Eigen::Index>(y) * image.width + x] = static_cast<S>((image.at(y, x, c) - 0.5f) * 4.0f);
  return t;
}

namespace {

template <class S>
Tensor<S> normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Tensor<S> t(std::move(shape));
  for (Eigen::Index i = 0; i < t.numel(); ++i) t.data[i] = static_cast<S>(d(rng));
  return t;
}

template <class S>
Tensor<S> uniform_init(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  Tensor<S> t(std::move(shape));
  for (Eigen::Index i = 0; i < t.numel(); ++i) t.data[i] = static_cast<S>(d(rng));
  return t;
}

template <class S>
void add_conv(nn::ParameterStore<S>& ps, const std::string& name, int cout, int cin, int k, std::mt19937_64& rng,
              double stddev = -1) {
  const double sd = stddev > 0 ? stddev : std::sqrt(2.0 / (cin * k * k));
  ps.add(name + ".w", normal_init<S>({cout, cin, k, k}, sd, rng));
  ps.add(name + ".b", Tensor<S>(Shape{cout}), false);
}

template <class S>
void add_gn(nn::ParameterStore<S>& ps, const std::string& name, int channels) {
  ps.add(name + ".gamma", Tensor<S>(Shape{channels}, nn::Vector<S>::Ones(channels)), false);
  ps.add(name + ".beta", Tensor<S>(Shape{channels}), false);
}

template <class S>
void add_conv_gn(nn::ParameterStore<S>& ps, const std::string& name, int cout, int cin, int k, std::mt19937_64& rng) {
  add_conv(ps, name, cout, cin, k, rng);
  add_gn(ps, name + ".gn", cout);
}

template <class S>
void add_residual(nn::ParameterStore<S>& ps, const std::string& name, int ch, std::mt19937_64& rng) {
  add_conv_gn(ps, name + ".a", ch, ch, 3, rng);
  add_conv_gn(ps, name + ".b", ch, ch, 3, rng);
}

template <class S>
void add_lstm(nn::ParameterStore<S>& ps, const std::string& name, int in, int hidden, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (const char* dir : {".f", ".r"}) {
    ps.add(name + dir + ".wi", uniform_init<S>({4 * hidden, in}, bound, rng));
    ps.add(name + dir + ".wh", uniform_init<S>({4 * hidden, hidden}, bound, rng));
    ps.add(name + dir + ".b", Tensor<S>(Shape{4 * hidden}), false);
  }
}

template <class S>
void add_linear(nn::ParameterStore<S>& ps, const std::string& name, int out, int in, std::mt19937_64& rng) {
  ps.add(name + ".w", uniform_init<S>({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  ps.add(name + ".b", Tensor<S>(Shape{out}), false);
}

constexpr ConvSpec k3{1, 1, 1, 1};
constexpr ConvSpec k3s2{2, 2, 1, 1};
constexpr ConvSpec k3s21{2, 1, 1, 1};
constexpr ConvSpec k1{1, 1, 0, 0};

}  // namespace

template <class S>
Model<S>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int w = config_.backbone_width, f = config_.fpn_channels(), c = config_.C;
  auto& ps = params_;
  add_conv_gn(ps, "stem", w, 3, 3, rng);
  add_conv_gn(ps, "s1.down", 2 * w, w, 3, rng);
  add_residual(ps, "s1.res", 2 * w, rng);
  add_conv_gn(ps, "s2.down", 4 * w, 2 * w, 3, rng);
  add_residual(ps, "s2.res", 4 * w, rng);
  add_conv(ps, "fpn.lat0", f, 2 * w, 1, rng);
  add_conv(ps, "fpn.lat1", f, 4 * w, 1, rng);
  add_conv(ps, "fpn.out0", f, f, 3, rng);
  add_conv(ps, "fpn.out1", f, f, 3, rng);
  add_conv_gn(ps, "head.tower", f, f, 3, rng);
  add_conv(ps, "head.cls", 1, f, 3, rng, 0.01);
  add_conv(ps, "head.reg", 4, f, 3, rng, 0.01);
  add_conv(ps, "head.ctr", 1, f, 3, rng, 0.01);
  ps.at("head.cls.b").value.data.setConstant(static_cast<S>(-std::log((1 - 0.01) / 0.01)));

  if (config_.crop_input) {
    add_conv_gn(ps, "crop.c1", w, 3, 3, rng);
    add_conv_gn(ps, "crop.c2", 2 * w, w, 3, rng);
    add_residual(ps, "crop.res", 2 * w, rng);
    add_conv(ps, "crop.out", f, 2 * w, 1, rng);
  }
  add_conv_gn(ps, "is2s.conv1", f, f, 3, rng);
  add_conv_gn(ps, "is2s.conv2", f, f, 3, rng);
  add_lstm(ps, "is2s.lstm", f, c / 2, rng);
  if (config_.head == HeadKind::Similarity) {
    ps.add("embed", normal_init<S>({config_.charset_size, f}, 1.0, rng));
    add_linear(ps, "ts2s.proj", f, f, rng);
    add_lstm(ps, "ts2s.lstm", f, c / 2, rng);
  } else {
    add_linear(ps, "phoc", config_.phoc_dim(), config_.feature_dim(), rng);
  }
  add_linear(ps, "ctc", config_.num_classes(), c, rng);
}

template <class S>
typename Model<S>::Var Model<S>::p(Tape& tape, const std::string& name) const {
  return tape.param(params_.at(name));
}

template <class S>
typename Model<S>::Var Model<S>::conv(Tape& tape, Var x, const std::string& name, ConvSpec spec) const {
  return nn::conv2d(x, p(tape, name + ".w"), p(tape, name + ".b"), spec);
}

template <class S>
typename Model<S>::Var Model<S>::conv_gn_relu(Tape& tape, Var x, const std::string& name, ConvSpec spec,
                                              bool relu) const {
  auto y = nn::group_norm(conv(tape, x, name, spec), p(tape, name + ".gn.gamma"), p(tape, name + ".gn.beta"),
                          config_.gn_groups);
  return relu ? nn::relu(y) : y;
}

template <class S>
typename Model<S>::Var Model<S>::residual(Tape& tape, Var x, const std::string& name) const {
  auto y = conv_gn_relu(tape, x, name + ".a", k3);
  y = conv_gn_relu(tape, y, name + ".b", k3, false);
  return nn::relu(nn::add(x, y));
}

template <class S>
typename Model<S>::Var Model<S>::bilstm(Tape& tape, Var x, const std::string& name) const {
  auto fwd = nn::lstm(x, p(tape, name + ".f.wi"), p(tape, name + ".f.wh"), p(tape, name + ".f.b"), false);
  auto bwd = nn::lstm(x, p(tape, name + ".r.wi"), p(tape, name + ".r.wh"), p(tape, name + ".r.b"), true);
  return nn::concat_last(fwd, bwd);
}

template <class S>
std::vector<typename Model<S>::Var> Model<S>::backbone(Tape& tape, const Tensor<S>& image) const {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) throw InvalidInput("backbone: expects [1,3,H,W]");
  if (image.dim(2) % 8 != 0 || image.dim(3) % 8 != 0)
    throw InvalidInput("backbone: image sides must be multiples of 8, got " + nn::shape_string(image.shape));
  auto x = conv_gn_relu(tape, tape.constant(image), "stem", k3s2);
  auto c4 = residual(tape, conv_gn_relu(tape, x, "s1.down", k3s2), "s1.res");
  auto c8 = residual(tape, conv_gn_relu(tape, c4, "s2.down", k3s2), "s2.res");
  auto l8 = conv(tape, c8, "fpn.lat1", k1);
  auto l4 = nn::add(conv(tape, c4, "fpn.lat0", k1), nn::upsample_nearest(l8, c4.dim(2), c4.dim(3)));
  return {conv(tape, l4, "fpn.out0", k3), conv(tape, l8, "fpn.out1", k3)};
}

template <class S>
HeadOutputs<S> Model<S>::detection_head(Tape& tape, const std::vector<Var>& pyramid) const {
  HeadOutputs<S> out;
  const auto strides = config_.strides();
  for (std::size_t l = 0; l < pyramid.size(); ++l) {
    auto t = conv_gn_relu(tape, pyramid[l], "head.tower", k3);
    out.levels.push_back(FeatureLevel{pyramid[l].dim(2), pyramid[l].dim(3), strides[l]});
    out.cls.push_back(conv(tape, t, "head.cls", k3));
    out.reg.push_back(conv(tape, t, "head.reg", k3));
    out.ctr.push_back(conv(tape, t, "head.ctr", k3));
  }
  return out;
}

template <class S>
ProposalSet Model<S>::decode(const HeadOutputs<S>& head, int image_height, int image_width) const {
  std::vector<Eigen::VectorXd> cls, ctr;
  std::vector<Eigen::MatrixXd> reg;
  for (std::size_t l = 0; l < head.levels.size(); ++l) {
    const int cells = head.levels[l].cells();
    cls.push_back(head.cls[l].value().data.template cast<double>());
    ctr.push_back(head.ctr[l].value().data.template cast<double>());
    reg.push_back(head.reg[l].value().as_matrix(4, cells).transpose().template cast<double>());
  }
  DecodeSettings settings;
  settings.score_thresh = config_.score_thresh;
  settings.nms_iou = config_.nms_iou;
  settings.max_proposals = config_.max_proposals;
  return decode_detections(head.levels, cls, reg, ctr, image_height, image_width, settings);
}

template <class S>
ProposalSet Model<S>::detect(const Image& image) const {
  if (image.height < 64 || image.width < 64) throw InvalidInput("detect: image sides must be at least 64");
  Tape tape(false);
  auto pyramid = backbone(tape, image_tensor<S>(image));
  return decode(detection_head(tape, pyramid), image.height, image.width);
}

template <class S>
typename Model<S>::Var Model<S>::roi_features(const std::vector<Var>& pyramid, const std::vector<Box>& boxes) const {
  return nn::roi_align(pyramid.front(), boxes, 1.0 / config_.strides().front(), config_.h_roi, config_.T);
}

template <class S>
typename Model<S>::Var Model<S>::crop_features(Tape& tape, const Tensor<S>& crops) const {
  if (!config_.crop_input) throw InvalidInput("crop_features: model has no crop stem");
  if (crops.rank() != 4 || crops.dim(1) != 3 || crops.dim(2) != config_.crop_height() || crops.dim(3) != config_.crop_width())
    throw InvalidInput("crop_features: expects [K,3," + std::to_string(config_.crop_height()) + "," +
                       std::to_string(config_.crop_width()) + "], got " + nn::shape_string(crops.shape));
  auto x = conv_gn_relu(tape, tape.constant(crops), "crop.c1", k3s2);
  x = residual(tape, conv_gn_relu(tape, x, "crop.c2", k3s2), "crop.res");
  return conv(tape, x, "crop.out", k1);
}

template <class S>
typename Model<S>::Var Model<S>::image_s2sm(Tape& tape, Var pooled) const {
  const Shape expect{pooled.dim(0), config_.fpn_channels(), config_.h_roi, config_.T};
  if (pooled.shape() != expect) throw InvalidInput("image_s2sm: expected " + nn::shape_string(expect) + ", got " + nn::shape_string(pooled.shape()));
  if (pooled.dim(0) == 0) return tape.constant(Tensor<S>(Shape{0, config_.T, config_.C}));
  auto x = conv_gn_relu(tape, pooled, "is2s.conv1", k3s21);
  x = conv_gn_relu(tape, x, "is2s.conv2", k3s21);
  return bilstm(tape, nn::average_height(x), "is2s.lstm");
}

template <class S>
typename Model<S>::Var Model<S>::embed_words(Tape& tape, const std::vector<Word>& words) const {
  if (config_.head != HeadKind::Similarity) throw InvalidInput("embed_words: model has no text branch");
  std::vector<std::vector<int>> ids;
  for (const auto& w : words) {
    if (w.size() > config_.max_word_len)
      throw InvalidInput("word longer than max_word_len (" + std::to_string(w.size()) + " > " +
                         std::to_string(config_.max_word_len) + ")");
    ids.push_back(w.ids());
  }
  if (ids.empty()) return tape.constant(Tensor<S>(Shape{0, config_.T, config_.fpn_channels()}));
  return nn::embed_interpolate(p(tape, "embed"), ids, config_.T);
}

template <class S>
typename Model<S>::Var Model<S>::text_s2sm(Tape& tape, Var embedded) const {
  const Shape expect{embedded.dim(0), config_.T, config_.fpn_channels()};
  if (embedded.shape() != expect) throw InvalidInput("text_s2sm: expected " + nn::shape_string(expect) + ", got " + nn::shape_string(embedded.shape()));
  if (embedded.dim(0) == 0) return tape.constant(Tensor<S>(Shape{0, config_.T, config_.C}));
  auto x = nn::linear(embedded, p(tape, "ts2s.proj.w"), p(tape, "ts2s.proj.b"));
  return bilstm(tape, x, "ts2s.lstm");
}

template <class S>
typename Model<S>::Var Model<S>::ctc_logits(Tape& tape, Var sequence) const {
  return nn::linear(sequence, p(tape, "ctc.w"), p(tape, "ctc.b"));
}

template <class S>
typename Model<S>::Var Model<S>::phoc_logits(Tape& tape, Var sequence) const {
  if (config_.head != HeadKind::Phoc) throw InvalidInput("phoc_logits: model has no PHOC head");
  auto flat = nn::reshape(sequence, {sequence.dim(0), config_.feature_dim()});
  return nn::linear(flat, p(tape, "phoc.w"), p(tape, "phoc.b"));
}

template <class S>
typename Model<S>::Var Model<S>::flatten_features(Var sequence) const {
  return nn::reshape(nn::tanh(sequence), {sequence.dim(0), config_.feature_dim()});
}

template <class S>
std::uint64_t Model<S>::fingerprint() const {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  std::ostringstream os;
  os << config_.C << ' ' << config_.T << ' ' << config_.h_roi << ' ' << config_.backbone_width << ' '
     << config_.charset_size << ' ' << static_cast<int>(config_.head) << ' ' << config_.crop_input;
  const std::string s = os.str();
  mix(s.data(), s.size());
  for (const auto& [name, prm] : params_.items()) {
    mix(name.data(), name.size());
    for (Eigen::Index i = 0; i < prm.value.numel(); ++i) {
      const double v = static_cast<double>(prm.value.data[i]);
      mix(&v, sizeof v);
    }
  }
  return h;
}

std::vector<int> greedy_decode(const Eigen::Ref<const Eigen::MatrixXd>& logits, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index best;
    logits.row(t).maxCoeff(&best);
    const int b = static_cast<int>(best);
    if (b != prev && b != blank) out.push_back(b);
    prev = b;
  }
  return out;
}

template class Model<float>;
template class Model<double>;
template nn::Tensor<float> image_tensor<float>(const Image&);
template nn::Tensor<double> image_tensor<double>(const Image&);

}  // namespace textret
