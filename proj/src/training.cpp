#include "textret/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "textret/phoc.hpp"

namespace textret {

using nn::RowMatrix;
using nn::Shape;
using nn::Tensor;

// Modes and configuration -----------------------------------------------------------

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Joint: return "joint";
    case TrainMode::Separated: return "separated";
    case TrainMode::PhocHead: return "phoc_head";
    case TrainMode::NoPPQQ: return "no_pp_qq";
    case TrainMode::NoWAS: return "no_was";
    case TrainMode::NoCTC: return "no_ctc";
    case TrainMode::Baseline: return "baseline";
  }
  return "joint";
}

TrainMode parse_mode(const std::string& name) {
  static const std::map<std::string, TrainMode> modes{
      {"joint", TrainMode::Joint},       {"+was+ctc", TrainMode::Joint},    {"separated", TrainMode::Separated},
      {"phoc_head", TrainMode::PhocHead}, {"no_pp_qq", TrainMode::NoPPQQ},  {"no_was", TrainMode::NoWAS},
      {"+ctc", TrainMode::NoWAS},         {"no_ctc", TrainMode::NoCTC},     {"+was", TrainMode::NoCTC},
      {"baseline", TrainMode::Baseline}};
  auto it = modes.find(name);
  if (it == modes.end()) throw InvalidInput("unknown training mode '" + name + "'");
  return it->second;
}

std::vector<int> TrainConfig::resolved_decay_steps() const {
  if (!decay_auto) return decay_steps;
  return {static_cast<int>(std::lround(0.6 * iterations)), static_cast<int>(std::lround(0.85 * iterations))};
}

double TrainConfig::learning_rate(int iteration) const {
  double rate = lr;
  for (int step : resolved_decay_steps())
    if (step > 0 && iteration > step) rate *= decay_factor;
  if (warmup > 0 && iteration <= warmup) rate *= static_cast<double>(iteration) / warmup;
  return rate;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw InvalidInput("lr must be positive");
  if (iterations < 1) throw InvalidInput("iterations must be >= 1");
  if (batch_size < 1) throw InvalidInput("batch_size must be >= 1");
  if (momentum < 0 || momentum >= 1) throw InvalidInput("momentum must lie in [0, 1)");
  if (weight_decay < 0) throw InvalidInput("weight_decay must be non-negative");
  if (decay_factor <= 0) throw InvalidInput("decay_factor must be positive");
  if (proposals_per_image < 0) throw InvalidInput("proposals_per_image must be non-negative");
  was.probabilities();
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw InvalidInput("config key " + key + ": cannot parse '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw InvalidInput("config key " + key + ": expected true/false, got '" + text + "'");
}

}  // namespace

const std::vector<std::pair<std::string, std::string>>& config_docs() {
  static const std::vector<std::pair<std::string, std::string>> docs{
      {"mode", "training mode: joint, separated, phoc_head, no_pp_qq, no_was, no_ctc, baseline"},
      {"iterations", "number of SGD updates (per stage in separated mode)"},
      {"batch_size", "images per update"},
      {"lr", "initial learning rate"},
      {"decay_steps", "comma-separated iterations where the rate decays; 'auto' = 60% and 85%; 'none'"},
      {"decay_factor", "multiplier applied at each decay step"},
      {"warmup", "iterations of linear learning-rate warmup"},
      {"momentum", "SGD momentum"},
      {"weight_decay", "L2 penalty on weights (not biases or norm parameters)"},
      {"clip_norm", "global gradient-norm clipping threshold (0 disables)"},
      {"was_ratios", "insert,delete,replace,keep weights of the word augmentation"},
      {"row_reduce", "per-row reduction of the similarity loss: max or mean"},
      {"seed", "random seed for initialisation, batching and augmentation"},
      {"proposals_per_image", "detected proposals matched to text added to the recognition batch per image"},
      {"checkpoint_every", "write an intermediate checkpoint every N iterations (0 disables)"},
      {"log_every", "metrics row every N iterations"},
      {"fold_case", "case-fold transcripts and queries"},
      {"channels", "sequence feature channels C"},
      {"steps", "sequence length T"},
      {"h_roi", "RoI height (multiple of 4)"},
      {"backbone_width", "base channel count of the backbone"},
      {"gn_groups", "group-normalisation groups"},
      {"score_thresh", "detection score threshold"},
      {"nms_iou", "non-maximum suppression IoU"},
      {"max_proposals", "maximum proposals kept per image"},
      {"level_split", "ground-truth height (px) separating the two detection levels"},
      {"max_word_len", "longest accepted word"},
  };
  return docs;
}

std::map<std::string, std::string> config_values(const TrainConfig& c) {
  const auto& w = c.was;
  std::map<std::string, std::string> v{
      {"mode", to_string(c.mode)},
      {"iterations", std::to_string(c.iterations)},
      {"batch_size", std::to_string(c.batch_size)},
      {"lr", fmt(c.lr)},
      {"decay_steps", c.decay_auto ? "auto" : (c.decay_steps.empty() ? "none" : join_ints(c.decay_steps))},
      {"decay_factor", fmt(c.decay_factor)},
      {"warmup", std::to_string(c.warmup)},
      {"momentum", fmt(c.momentum)},
      {"weight_decay", fmt(c.weight_decay)},
      {"clip_norm", fmt(c.clip_norm)},
      {"was_ratios", fmt(w.insert) + "," + fmt(w.remove) + "," + fmt(w.replace) + "," + fmt(w.keep)},
      {"row_reduce", c.row_reduce == nn::RowReduce::Max ? "max" : "mean"},
      {"seed", std::to_string(c.seed)},
      {"proposals_per_image", std::to_string(c.proposals_per_image)},
      {"checkpoint_every", std::to_string(c.checkpoint_every)},
      {"log_every", std::to_string(c.log_every)},
      {"fold_case", c.fold_case ? "true" : "false"},
      {"channels", std::to_string(c.model.C)},
      {"steps", std::to_string(c.model.T)},
      {"h_roi", std::to_string(c.model.h_roi)},
      {"backbone_width", std::to_string(c.model.backbone_width)},
      {"gn_groups", std::to_string(c.model.gn_groups)},
      {"score_thresh", fmt(c.model.score_thresh)},
      {"nms_iou", fmt(c.model.nms_iou)},
      {"max_proposals", std::to_string(c.model.max_proposals)},
      {"level_split", fmt(c.model.level_split)},
      {"max_word_len", std::to_string(c.model.max_word_len)},
  };
  return v;
}

void apply_config_values(TrainConfig& c, const std::map<std::string, std::string>& values) {
  for (const auto& [key, raw] : values) {
    const std::string val = trim(raw);
    if (key == "mode") c.mode = parse_mode(val);
    else if (key == "iterations") c.iterations = parse_number<int>(key, val);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, val);
    else if (key == "lr") c.lr = parse_number<double>(key, val);
    else if (key == "decay_steps") {
      c.decay_auto = val == "auto";
      c.decay_steps.clear();
      if (!c.decay_auto && val != "none" && !val.empty())
        for (const auto& part : split(val, ',')) c.decay_steps.push_back(parse_number<int>(key, trim(part)));
    } else if (key == "decay_factor") c.decay_factor = parse_number<double>(key, val);
    else if (key == "warmup") c.warmup = parse_number<int>(key, val);
    else if (key == "momentum") c.momentum = parse_number<double>(key, val);
    else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, val);
    else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, val);
    else if (key == "was_ratios") {
      const auto parts = split(val, ',');
      if (parts.size() != 4) throw InvalidInput("was_ratios needs four comma-separated weights");
      c.was = EditOperatorRatios{parse_number<double>(key, trim(parts[0])), parse_number<double>(key, trim(parts[1])),
                                 parse_number<double>(key, trim(parts[2])), parse_number<double>(key, trim(parts[3]))};
    } else if (key == "row_reduce") {
      if (val == "max") c.row_reduce = nn::RowReduce::Max;
      else if (val == "mean") c.row_reduce = nn::RowReduce::Mean;
      else throw InvalidInput("row_reduce must be max or mean");
    } else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "proposals_per_image") c.proposals_per_image = parse_number<int>(key, val);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, val);
    else if (key == "log_every") c.log_every = parse_number<int>(key, val);
    else if (key == "fold_case") c.fold_case = parse_bool(key, val);
    else if (key == "channels") c.model.C = parse_number<int>(key, val);
    else if (key == "steps") c.model.T = parse_number<int>(key, val);
    else if (key == "h_roi") c.model.h_roi = parse_number<int>(key, val);
    else if (key == "backbone_width") c.model.backbone_width = parse_number<int>(key, val);
    else if (key == "gn_groups") c.model.gn_groups = parse_number<int>(key, val);
    else if (key == "score_thresh") c.model.score_thresh = parse_number<double>(key, val);
    else if (key == "nms_iou") c.model.nms_iou = parse_number<double>(key, val);
    else if (key == "max_proposals") c.model.max_proposals = parse_number<int>(key, val);
    else if (key == "level_split") c.model.level_split = parse_number<double>(key, val);
    else if (key == "max_word_len") c.model.max_word_len = parse_number<int>(key, val);
    else throw InvalidInput("unknown config key '" + key + "'");
  }
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// Batch construction ---------------------------------------------------------------

QuerySet build_queries(const std::vector<Word>& transcripts, const EditOperatorRatios& ratios, const Charset& charset,
                       Rng& rng) {
  if (transcripts.empty()) throw EmptyBatch();
  QuerySet qs;
  for (const auto& w : transcripts)
    if (std::find(qs.queries.begin(), qs.queries.end(), w) == qs.queries.end()) qs.queries.push_back(w);
  qs.augmented = augment_query_set(qs.queries, ratios, charset, rng);
  return qs;
}

std::vector<ProposalMatch> match_proposals(const std::vector<Box>& proposals, const std::vector<Box>& gt, double thresh) {
  std::vector<ProposalMatch> out;
  for (std::size_t p = 0; p < proposals.size(); ++p) {
    ProposalMatch best{static_cast<int>(p), -1, 0.0};
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(proposals[p], gt[g]);
      if (v > best.iou) best = {static_cast<int>(p), static_cast<int>(g), v};
    }
    if (best.gt >= 0 && best.iou >= thresh) out.push_back(best);
  }
  return out;
}

// Losses ---------------------------------------------------------------------------

template <class S>
SimilarityTargets<S> similarity_targets(const std::vector<Word>& transcripts, const std::vector<Word>& augmented) {
  SimilarityTargets<S> t;
  t.pp = target_matrix(transcripts, transcripts).values.template cast<S>();
  t.qp = target_matrix(augmented, transcripts).values.template cast<S>();
  t.qq = target_matrix(augmented, augmented).values.template cast<S>();
  return t;
}

template <class S>
nn::Var<S> loss_similarity(nn::Tape<S>& tape, const SimilarityTerms<S>& pred, const SimilarityTargets<S>& tg,
                           nn::RowReduce reduce, bool with_pp_qq) {
  auto qp = nn::smooth_l1_rows(pred.qp, tg.qp, S(1), reduce);
  if (!with_pp_qq) return qp;
  return nn::sum_scalars(tape, {nn::smooth_l1_rows(pred.pp, tg.pp, S(1), reduce), qp,
                                nn::smooth_l1_rows(pred.qq, tg.qq, S(1), reduce)});
}

double loss_total(double detection, double similarity, double ctc) {
  const std::pair<const char*, double> terms[] = {{"L_d", detection}, {"L_s", similarity}, {"L_c", ctc}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v) || v < 0)
      throw TrainingFailure(name, std::string("loss term ") + name + " is " + (std::isfinite(v) ? "negative" : "not finite"));
  return detection + similarity + ctc;
}

template <class S>
nn::Var<S> detection_loss(nn::Tape<S>& tape, const HeadOutputs<S>& head, const std::vector<Box>& gt, double level_split) {
  const auto targets = assign_targets(gt, head.levels, {level_split});
  int positives = 0;
  double ctr_sum = 0;
  for (const auto& t : targets) {
    positives += static_cast<int>(t.positives.size());
    ctr_sum += t.centerness.sum();
  }
  const S norm = static_cast<S>(std::max(positives, 1));
  std::vector<nn::Var<S>> terms;
  std::vector<nn::Var<S>> reg_rows, ctr_rows;
  std::vector<S> strides, sides, ctr_t;
  for (std::size_t l = 0; l < targets.size(); ++l) {
    const auto& t = targets[l];
    const int cells = head.levels[l].cells();
    terms.push_back(nn::sigmoid_focal_loss(nn::reshape(head.cls[l], {cells}), nn::Vector<S>(t.labels.template cast<S>()), S(0.25),
                                           S(2), norm));
    if (t.positives.empty()) continue;
    reg_rows.push_back(nn::gather_rows(nn::nchw_to_rows(head.reg[l]), t.positives));
    ctr_rows.push_back(nn::gather_rows(nn::nchw_to_rows(head.ctr[l]), t.positives));
    for (int cell : t.positives) {
      strides.push_back(static_cast<S>(head.levels[l].stride));
      for (int k = 0; k < 4; ++k) sides.push_back(static_cast<S>(t.sides(cell, k)));
      ctr_t.push_back(static_cast<S>(t.centerness[cell]));
    }
  }
  if (positives > 0) {
    const Eigen::Index m = positives;
    auto reg = nn::concat_rows(tape, reg_rows, {4});
    auto ctr = nn::concat_rows(tape, ctr_rows, {1});
    nn::Vector<S> stride_v = Eigen::Map<nn::Vector<S>>(strides.data(), m);
    nn::Vector<S> ctr_v = Eigen::Map<nn::Vector<S>>(ctr_t.data(), m);
    RowMatrix<S> side_m = Eigen::Map<RowMatrix<S>>(sides.data(), m, 4);
    terms.push_back(nn::iou_loss_exp(reg, stride_v, side_m, ctr_v, static_cast<S>(std::max(ctr_sum, 1e-6))));
    const nn::Vector<S> ones = nn::Vector<S>::Ones(m);
    terms.push_back(nn::bce_with_logits(ctr, ctr_v, ones, norm));
  }
  return nn::sum_scalars(tape, terms);
}

// Training loop --------------------------------------------------------------------

namespace {

struct Sample {
  Image image;
  Tensor<float> tensor;
  std::vector<Box> boxes;
  std::vector<Word> words;
};

std::vector<Sample> load_samples(const GalleryManifest& manifest, const Charset& charset) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    Sample s;
    s.image = load_png(manifest.image_path(i));
    if (s.image.height % 8 != 0 || s.image.width % 8 != 0)
      throw InvalidInput("training images must have sides divisible by 8: " + manifest.samples[i].image);
    s.tensor = image_tensor<float>(s.image);
    for (const auto& inst : manifest.samples[i].instances) {
      s.boxes.push_back(inst.box);
      s.words.push_back(charset.encode(inst.text));
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw InvalidInput("training manifest has no samples");
  return out;
}

Tensor<float> crop_tensor(const Image& image, const std::vector<Box>& boxes, int h, int w) {
  Tensor<float> t(Shape{static_cast<int>(boxes.size()), 3, h, w});
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const Image crop = crop_resize(image, boxes[k], h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          t.data[(static_cast<Eigen::Index>(k) * 3 + c) * plane + y * w + x] = (crop.at(y, x, c) - 0.5f) * 4.0f;
  }
  return t;
}

class Batcher {
 public:
  Batcher(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) { reshuffle(); }
  std::vector<std::size_t> next(int count) {
    std::vector<std::size_t> out;
    for (int i = 0; i < count; ++i) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng rng_;
};

class Sgd {
 public:
  explicit Sgd(const TrainConfig& c) : config_(c) {}
  /// Returns the gradient norm before clipping.
  double step(nn::ParameterStore<float>& ps, double lr) {
    double sq = 0;
    for (auto& [_, p] : ps.items()) sq += p.grad.data.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingFailure("gradient", "gradient norm is not finite");
    const float clip = config_.clip_norm > 0 && norm > config_.clip_norm ? static_cast<float>(config_.clip_norm / norm) : 1.0f;
    const auto mom = static_cast<float>(config_.momentum), wd = static_cast<float>(config_.weight_decay),
               rate = static_cast<float>(lr);
    for (auto& [_, p] : ps.items()) {
      auto g = (p.grad.data * clip).eval();
      if (p.decay) g += wd * p.value.data;
      p.velocity.data = mom * p.velocity.data + g;
      p.value.data -= rate * p.velocity.data;
    }
    ps.zero_grad();
    return norm;
  }

 private:
  const TrainConfig& config_;
};

class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path) : path_(path), out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "iteration,L_d,L_s,L_c,L,lr,grad_norm\n";
  }
  void add(const MetricsRow& r) {
    rows.push_back(r);
    out_ << r.iteration << ',' << std::setprecision(9) << r.detection << ',' << r.similarity << ',' << r.ctc << ','
         << r.total << ',' << r.lr << ',' << r.grad_norm << '\n';
    out_.flush();
  }
  std::vector<MetricsRow> rows;

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

nlohmann::json meta_for(const TrainConfig& config, int iteration) {
  nlohmann::json j;
  j["config"] = config_values(config);
  j["iteration"] = iteration;
  return j;
}

struct Trainer {
  const TrainConfig& cfg;
  const std::vector<Sample>& data;
  const Charset& charset;
  const std::filesystem::path& out_dir;
  const BatchObserver& observer;
  MetricsLog& log;
  Rng aug_rng;
  int updates = 0;

  void fail(const TrainedModel& snapshot, const TrainingFailure& e) {
    save_checkpoint(out_dir / "diverged.bin", snapshot);
    throw TrainingFailure(e.term(), std::string(e.what()) + " (state written to " + (out_dir / "diverged.bin").string() + ")");
  }

  void record(int iteration, double ld, double ls, double lc, double lr, double grad_norm) {
    if (cfg.log_every > 0 && (iteration % cfg.log_every == 0 || iteration == 1))
      log.add(MetricsRow{iteration, ld, ls, lc, ld + ls + lc, lr, grad_norm});
  }

  /// Joint (and single-network ablation) training.
  void run_joint(TrainedModel& tm, bool detector_only, int offset) {
    Model<float>& model = *tm.model;
    Sgd sgd(cfg);
    Batcher batcher(data.size(), cfg.seed + 17 + static_cast<std::uint64_t>(offset));
    const auto ratios = cfg.uses_was() ? cfg.was : EditOperatorRatios::keep_only();
    const bool phoc = model.config().head == HeadKind::Phoc;
    const int blank = charset.blank_index();
    for (int it = 1; it <= cfg.iterations; ++it) {
      const double lr = cfg.learning_rate(it);
      nn::Tape<float> tape;
      std::vector<nn::Var<float>> ld_terms, parts;
      std::vector<Word> transcripts;
      const auto batch = batcher.next(cfg.batch_size);
      for (std::size_t b : batch) {
        const Sample& s = data[b];
        auto pyramid = model.backbone(tape, s.tensor);
        auto head = model.detection_head(tape, pyramid);
        ld_terms.push_back(detection_loss(tape, head, s.boxes, model.config().level_split));
        if (detector_only || s.boxes.empty()) continue;
        std::vector<Box> boxes = s.boxes;
        std::vector<Word> words = s.words;
        if (cfg.proposals_per_image > 0) {
          const ProposalSet props = model.decode(head, s.image.height, s.image.width);
          int taken = 0;
          for (const auto& m : match_proposals(props.boxes, s.boxes)) {
            if (taken++ >= cfg.proposals_per_image) break;
            boxes.push_back(props.boxes[static_cast<std::size_t>(m.proposal)]);
            words.push_back(s.words[static_cast<std::size_t>(m.gt)]);
          }
        }
        parts.push_back(model.image_s2sm(tape, model.roi_features(pyramid, boxes)));
        transcripts.insert(transcripts.end(), words.begin(), words.end());
      }
      auto ld = nn::scale(nn::sum_scalars(tape, ld_terms), 1.0f / static_cast<float>(batch.size()));
      std::vector<nn::Var<float>> total_terms{ld};
      double ls_v = 0, lc_v = 0;
      if (!transcripts.empty()) {
        auto e = nn::concat_rows(tape, parts, {model.config().T, model.config().C});
        auto [ls, lc] = recognition_losses(tape, model, e, transcripts, ratios, phoc, blank, it);
        if (ls) {
          total_terms.push_back(*ls);
          ls_v = ls->item();
        }
        if (lc) {
          total_terms.push_back(*lc);
          lc_v = lc->item();
        }
      }
      auto total = nn::sum_scalars(tape, total_terms);
      double grad_norm = 0;
      try {
        loss_total(ld.item(), ls_v, lc_v);
        tape.backward(total);
        grad_norm = sgd.step(model.params(), lr);
      } catch (const TrainingFailure& e) {
        fail(tm, e);
      }
      ++updates;
      record(offset + it, ld.item(), ls_v, lc_v, lr, grad_norm);
      checkpoint(tm, offset + it);
    }
  }

  std::pair<std::optional<nn::Var<float>>, std::optional<nn::Var<float>>> recognition_losses(
      nn::Tape<float>& tape, const Model<float>& model, nn::Var<float> e, const std::vector<Word>& transcripts,
      const EditOperatorRatios& ratios, bool phoc, int blank, int iteration) {
    std::optional<nn::Var<float>> ls, lc;
    if (phoc) {
      const auto& levels = model.config().phoc_levels;
      const int dim = model.config().phoc_dim();
      nn::Vector<float> target(static_cast<Eigen::Index>(transcripts.size()) * dim);
      for (std::size_t k = 0; k < transcripts.size(); ++k)
        target.segment(static_cast<Eigen::Index>(k) * dim, dim) = phoc_encode(transcripts[k], charset, levels).bits.cast<float>();
      const nn::Vector<float> ones = nn::Vector<float>::Ones(target.size());
      ls = nn::bce_with_logits(model.phoc_logits(tape, e), target, ones, static_cast<float>(transcripts.size()));
    } else {
      const QuerySet qs = build_queries(transcripts, ratios, charset, aug_rng);
      auto f = model.text_s2sm(tape, model.embed_words(tape, qs.augmented));
      auto p = model.flatten_features(e);
      auto q = model.flatten_features(f);
      const bool pp_qq = cfg.mode != TrainMode::NoPPQQ;
      SimilarityTerms<float> terms;
      terms.qp = nn::cosine(q, p);
      if (pp_qq) {
        terms.pp = nn::cosine(p, p);
        terms.qq = nn::cosine(q, q);
      }
      const auto targets = similarity_targets<float>(transcripts, qs.augmented);
      if (observer) observer(BatchRecord{iteration, transcripts, qs, similarity_targets<double>(transcripts, qs.augmented)});
      ls = loss_similarity(tape, terms, targets, cfg.row_reduce, pp_qq);
    }
    if (cfg.uses_ctc()) {
      std::vector<std::vector<int>> labels;
      for (const auto& w : transcripts) labels.push_back(w.ids());
      lc = nn::ctc_loss(model.ctc_logits(tape, e), labels, blank);
    }
    return {ls, lc};
  }

  /// Recognition network trained on ground-truth crops (separated mode, second stage).
  void run_crops(TrainedModel& tm, int offset) {
    Model<float>& model = *tm.recognizer;
    Sgd sgd(cfg);
    Batcher batcher(data.size(), cfg.seed + 29);
    const auto ratios = cfg.uses_was() ? cfg.was : EditOperatorRatios::keep_only();
    const int h = model.config().crop_height(), w = model.config().crop_width();
    for (int it = 1; it <= cfg.iterations; ++it) {
      const double lr = cfg.learning_rate(it);
      nn::Tape<float> tape;
      std::vector<nn::Var<float>> parts;
      std::vector<Word> transcripts;
      for (std::size_t b : batcher.next(cfg.batch_size)) {
        const Sample& s = data[b];
        if (s.boxes.empty()) continue;
        parts.push_back(model.image_s2sm(tape, model.crop_features(tape, crop_tensor(s.image, s.boxes, h, w))));
        transcripts.insert(transcripts.end(), s.words.begin(), s.words.end());
      }
      if (transcripts.empty()) continue;
      auto e = nn::concat_rows(tape, parts, {model.config().T, model.config().C});
      auto [ls, lc] = recognition_losses(tape, model, e, transcripts, ratios, false, charset.blank_index(), offset + it);
      std::vector<nn::Var<float>> terms{*ls};
      if (lc) terms.push_back(*lc);
      auto total = nn::sum_scalars(tape, terms);
      const double lc_v = lc ? lc->item() : 0.0;
      double grad_norm = 0;
      try {
        loss_total(0.0, ls->item(), lc_v);
        tape.backward(total);
        grad_norm = sgd.step(model.params(), lr);
      } catch (const TrainingFailure& e) {
        fail(tm, e);
      }
      ++updates;
      record(offset + it, 0.0, ls->item(), lc_v, lr, grad_norm);
      checkpoint(tm, offset + it);
    }
  }

  void checkpoint(TrainedModel& tm, int iteration) {
    if (cfg.checkpoint_every <= 0 || iteration % cfg.checkpoint_every != 0) return;
    tm.meta = meta_for(cfg, iteration);
    save_checkpoint(out_dir / ("checkpoint_" + std::to_string(iteration) + ".bin"), tm);
  }
};

}  // namespace

TrainResult train(const TrainConfig& config, const GalleryManifest& manifest, const std::filesystem::path& out_dir,
                  const BatchObserver& observer) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  const Charset charset = manifest_charset(manifest, config.fold_case);
  const auto data = load_samples(manifest, charset);

  ModelConfig mc = config.model;
  mc.charset_size = charset.size();
  mc.head = config.mode == TrainMode::PhocHead ? HeadKind::Phoc : HeadKind::Similarity;
  mc.crop_input = false;
  TrainedModel tm;
  tm.charset = charset;
  tm.model = std::make_shared<Model<float>>(mc, config.seed);
  if (config.mode == TrainMode::Separated) {
    ModelConfig rc = mc;
    rc.crop_input = true;
    tm.recognizer = std::make_shared<Model<float>>(rc, config.seed + 1);
  }

  TrainResult result;
  result.metrics_csv = out_dir / "metrics.csv";
  MetricsLog log(result.metrics_csv);
  Trainer trainer{config, data, charset, out_dir, observer, log, Rng(config.seed + 7)};
  if (config.mode == TrainMode::Separated) {
    trainer.run_joint(tm, true, 0);
    trainer.run_crops(tm, config.iterations);
  } else {
    trainer.run_joint(tm, false, 0);
  }
  tm.meta = meta_for(config, trainer.updates);
  result.checkpoint = out_dir / "checkpoint.bin";
  save_checkpoint(result.checkpoint, tm);
  result.trained = std::move(tm);
  result.metrics = log.rows;
  result.updates = trainer.updates;
  return result;
}

#define TEXTRET_INSTANTIATE_TRAINING(S)                                                                          \
  template SimilarityTargets<S> similarity_targets<S>(const std::vector<Word>&, const std::vector<Word>&);      \
  template nn::Var<S> loss_similarity<S>(nn::Tape<S>&, const SimilarityTerms<S>&, const SimilarityTargets<S>&, \
                                         nn::RowReduce, bool);                                                   \
  template nn::Var<S> detection_loss<S>(nn::Tape<S>&, const HeadOutputs<S>&, const std::vector<Box>&, double);

TEXTRET_INSTANTIATE_TRAINING(float)
TEXTRET_INSTANTIATE_TRAINING(double)

}  // namespace textret
