#include "textret/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "textret/archive.hpp"
#include "textret/phoc.hpp"

namespace textret {

namespace {

constexpr std::string_view kIndexMagic = "TXRINDX1";

Image pad_for_network(const Image& image) {
  auto up = [](int v) { return std::max(64, (v + 7) / 8 * 8); };
  const int h = up(image.height), w = up(image.width);
  if (h == image.height && w == image.width) return image;
  Image out(h, w);
  out.pixels.setConstant(0.5f);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, x, c);
  return out;
}

nn::Tensor<float> crops_tensor(const Image& image, const std::vector<Box>& boxes, int h, int w) {
  nn::Tensor<float> t(nn::Shape{static_cast<int>(boxes.size()), 3, h, w});
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

Eigen::MatrixXd to_matrix(const nn::Var<float>& v, int rows, int cols) {
  return v.value().as_matrix(rows, cols).cast<double>();
}

}  // namespace

Retriever::Retriever(TrainedModel trained) : trained_(std::move(trained)) {
  if (!trained_.model) throw InvalidInput("Retriever: no model");
}

std::string Retriever::kind() const {
  if (trained_.separated()) return "separated";
  return trained_.model->config().head == HeadKind::Phoc ? "phoc" : "joint";
}

IndexEntry Retriever::index_image(const Image& image, const std::vector<int>& scales) const {
  if (scales.empty()) throw InvalidInput("index_image: at least one scale is required");
  const Model<float>& det = *trained_.model;
  const Model<float>& rec = trained_.recognition();
  const bool phoc = rec.config().head == HeadKind::Phoc;
  const int dim = phoc ? rec.config().phoc_dim() : rec.config().feature_dim();
  IndexEntry entry;
  std::vector<Eigen::MatrixXd> blocks;
  for (int long_side : scales) {
    if (long_side < 8) throw InvalidInput("index_image: scale must be at least 8 pixels");
    double scale = 1.0;
    const Image resized = resize_long_side(image, long_side, &scale);
    const Image padded = pad_for_network(resized);
    nn::Tape<float> tape(false);
    auto pyramid = det.backbone(tape, image_tensor<float>(padded));
    ProposalSet props = det.decode(det.detection_head(tape, pyramid), padded.height, padded.width);
    std::vector<Box> boxes, original;
    std::vector<double> scores;
    for (int k = 0; k < props.size(); ++k) {
      const Box b = props.boxes[static_cast<std::size_t>(k)].clipped(resized.width, resized.height);
      if (b.width() < 1.0 || b.height() < 1.0) continue;
      boxes.push_back(b);
      original.push_back(b.scaled(1.0 / scale, 1.0 / scale).clipped(image.width, image.height));
      scores.push_back(props.scores[static_cast<std::size_t>(k)]);
    }
    if (boxes.empty()) continue;
    const int k = static_cast<int>(boxes.size());
    nn::Var<float> pooled = trained_.separated()
                                ? rec.crop_features(tape, crops_tensor(image, original, rec.config().crop_height(),
                                                                       rec.config().crop_width()))
                                : det.roi_features(pyramid, boxes);
    auto seq = rec.image_s2sm(tape, pooled);
    if (phoc)
      blocks.push_back(to_matrix(nn::sigmoid(rec.phoc_logits(tape, seq)), k, dim));
    else
      blocks.push_back(to_matrix(rec.flatten_features(seq), k, dim));
    entry.boxes.insert(entry.boxes.end(), original.begin(), original.end());
    entry.det_scores.insert(entry.det_scores.end(), scores.begin(), scores.end());
  }
  entry.features.resize(entry.size(), dim);
  Eigen::Index row = 0;
  for (const auto& b : blocks) {
    entry.features.middleRows(row, b.rows()) = b;
    row += b.rows();
  }
  return entry;
}

Eigen::MatrixXd Retriever::query_features(const std::vector<Word>& words) const {
  const Model<float>& rec = trained_.recognition();
  for (const auto& w : words)
    if (w.charset_id() != trained_.charset.id()) throw InvalidInput("query encoded with a different charset");
  if (rec.config().head == HeadKind::Phoc) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(words.size()), rec.config().phoc_dim());
    for (std::size_t i = 0; i < words.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = phoc_encode(words[i], trained_.charset, rec.config().phoc_levels).bits.transpose();
    return out;
  }
  nn::Tape<float> tape(false);
  auto f = rec.flatten_features(rec.text_s2sm(tape, rec.embed_words(tape, words)));
  return to_matrix(f, static_cast<int>(words.size()), rec.config().feature_dim());
}

GalleryIndex index_gallery(const Retriever& retriever, const std::vector<Image>& images,
                           const std::vector<std::string>& names, const std::vector<int>& scales) {
  if (images.empty()) throw InvalidInput("index_gallery: no images");
  GalleryIndex index;
  index.kind = retriever.kind();
  index.charset = retriever.charset();
  index.model_fingerprint = retriever.trained().fingerprint();
  index.scales = scales;
  for (std::size_t i = 0; i < images.size(); ++i) {
    IndexEntry e = retriever.index_image(images[i], scales);
    e.image = names[i];
    index.feature_dim = static_cast<int>(e.features.cols());
    index.entries.push_back(std::move(e));
  }
  return index;
}

GalleryIndex index_gallery(const Retriever& retriever, const std::vector<std::filesystem::path>& images,
                           const std::vector<int>& scales) {
  if (images.empty()) throw InvalidInput("index_gallery: no images");
  GalleryIndex index;
  index.kind = retriever.kind();
  index.charset = retriever.charset();
  index.model_fingerprint = retriever.trained().fingerprint();
  index.scales = scales;
  for (const auto& path : images) {
    IndexEntry e;
    try {
      e = retriever.index_image(load_png(path), scales);
    } catch (const IoError& err) {
      e = IndexEntry{};
      e.readable = false;
      e.warning = err.what();
      std::cerr << "warning: skipping unreadable image " << path.string() << ": " << err.what() << "\n";
    }
    e.image = path.string();
    if (e.readable) index.feature_dim = static_cast<int>(e.features.cols());
    index.entries.push_back(std::move(e));
  }
  for (auto& e : index.entries)
    if (!e.readable) e.features.resize(0, index.feature_dim);
  return index;
}

void save_index(const std::filesystem::path& path, const GalleryIndex& index) {
  Archive a;
  a.header["kind"] = index.kind;
  a.header["charset"] = {{"symbols", index.charset.symbols()}, {"fold_case", index.charset.fold_case()}};
  a.header["model_fingerprint"] = index.model_fingerprint;
  a.header["scales"] = index.scales;
  a.header["feature_dim"] = index.feature_dim;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const auto& e = index.entries[i];
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : e.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
    entries.push_back({{"image", e.image}, {"readable", e.readable}, {"warning", e.warning}, {"boxes", boxes},
                       {"det_scores", e.det_scores}});
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = e.features;
    a.arrays["features/" + std::to_string(i)] =
        ArchiveArray{{e.size(), index.feature_dim}, Eigen::Map<const Eigen::VectorXd>(rows.data(), rows.size())};
  }
  a.header["entries"] = entries;
  write_archive(path, kIndexMagic, a);
}

GalleryIndex load_index(const std::filesystem::path& path) {
  const Archive a = read_archive(path, kIndexMagic);
  GalleryIndex index;
  try {
    index.kind = a.header.at("kind");
    index.charset = Charset(a.header.at("charset").at("symbols").get<std::vector<std::string>>(),
                            a.header.at("charset").at("fold_case").get<bool>());
    index.model_fingerprint = a.header.at("model_fingerprint");
    index.scales = a.header.at("scales").get<std::vector<int>>();
    index.feature_dim = a.header.at("feature_dim");
    const auto& entries = a.header.at("entries");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& j = entries[i];
      IndexEntry e;
      e.image = j.at("image");
      e.readable = j.at("readable");
      e.warning = j.at("warning");
      for (const auto& b : j.at("boxes")) e.boxes.push_back(Box{b[0], b[1], b[2], b[3]});
      e.det_scores = j.at("det_scores").get<std::vector<double>>();
      const auto& arr = a.arrays.at("features/" + std::to_string(i));
      e.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          arr.data.data(), e.size(), index.feature_dim);
      index.entries.push_back(std::move(e));
    }
  } catch (const std::exception& e) {
    throw IoError(path.string() + ": malformed index (" + e.what() + ")");
  }
  return index;
}

ImageScore score_image(const Eigen::Ref<const Eigen::RowVectorXd>& query, const IndexEntry& entry) {
  ImageScore out;
  if (entry.size() == 0) return out;
  const double qn = query.norm();
  for (int k = 0; k < entry.size(); ++k) {
    const double fn = entry.features.row(k).norm();
    const double c = (qn > 0 && fn > 0) ? std::clamp(entry.features.row(k).dot(query) / (qn * fn), -1.0, 1.0) : 0.0;
    if (out.proposal < 0 || c > out.score) {
      out.score = c;
      out.proposal = k;
    }
  }
  out.box = entry.boxes[static_cast<std::size_t>(out.proposal)];
  return out;
}

RetrievalResult rank_gallery(const Word& query, const Eigen::Ref<const Eigen::RowVectorXd>& query_vector,
                             const GalleryIndex& index) {
  if (query.charset_id() != index.charset.id()) throw InvalidInput("rank_gallery: query charset differs from the index");
  RetrievalResult r;
  r.query = query;
  r.text = index.charset.decode(query);
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const ImageScore s = score_image(query_vector, index.entries[i]);
    r.ranked.push_back(RankedImage{static_cast<int>(i), s.score, s.box});
  }
  std::stable_sort(r.ranked.begin(), r.ranked.end(), [](const RankedImage& a, const RankedImage& b) {
    return a.score != b.score ? a.score > b.score : a.image < b.image;
  });
  return r;
}

RetrievalResult rank_gallery(const std::string& query, const Retriever& retriever, const GalleryIndex& index) {
  const Word w = index.charset.encode(query);
  return rank_gallery(w, retriever.query_features({w}).row(0), index);
}

double average_precision(const std::vector<bool>& relevance) {
  double sum = 0;
  int hits = 0;
  for (std::size_t k = 0; k < relevance.size(); ++k)
    if (relevance[k]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  if (hits == 0) throw DegenerateInput("average precision is undefined without relevant items");
  return sum / hits;
}

MapReport mean_ap(const std::vector<std::string>& queries, const std::vector<RetrievalResult>& rankings,
                  const std::vector<std::vector<bool>>& relevant) {
  if (queries.size() != rankings.size() || queries.size() != relevant.size())
    throw InvalidInput("mean_ap: queries, rankings and relevance differ in length");
  MapReport rep;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<bool> rel;
    for (const auto& r : rankings[q].ranked) rel.push_back(relevant[q].at(static_cast<std::size_t>(r.image)));
    if (std::find(rel.begin(), rel.end(), true) == rel.end()) {
      rep.skipped.push_back(queries[q]);
      continue;
    }
    rep.queries.push_back(queries[q]);
    rep.ap.push_back(average_precision(rel));
  }
  if (rep.ap.empty()) throw DegenerateInput("mean_ap: no query has a relevant image");
  rep.map = std::accumulate(rep.ap.begin(), rep.ap.end(), 0.0) / static_cast<double>(rep.ap.size());
  return rep;
}

std::vector<std::vector<bool>> relevance_matrix(const std::vector<std::string>& queries,
                                                const GalleryManifest& manifest, const Charset& charset) {
  std::vector<std::vector<bool>> rel;
  for (const auto& q : queries) {
    const Word qw = charset.encode(q);
    std::vector<bool> row;
    for (const auto& s : manifest.samples) {
      bool hit = false;
      for (const auto& inst : s.instances) hit = hit || (charset.contains(inst.text) && charset.encode(inst.text) == qw);
      row.push_back(hit);
    }
    rel.push_back(std::move(row));
  }
  return rel;
}

MapReport evaluate_map(const Retriever& retriever, const GalleryIndex& index, const GalleryManifest& manifest,
                       const std::vector<std::string>& queries) {
  if (index.entries.size() != manifest.samples.size()) throw InvalidInput("evaluate_map: index and manifest sizes differ");
  std::vector<Word> words;
  for (const auto& q : queries) words.push_back(index.charset.encode(q));
  const Eigen::MatrixXd f = retriever.query_features(words);
  std::vector<RetrievalResult> rankings;
  for (std::size_t q = 0; q < words.size(); ++q) rankings.push_back(rank_gallery(words[q], f.row(static_cast<Eigen::Index>(q)), index));
  auto rep = mean_ap(queries, rankings, relevance_matrix(queries, manifest, index.charset));
  for (const auto& s : rep.skipped) std::cerr << "warning: query '" << s << "' has no relevant image; excluded from mAP\n";
  return rep;
}

DetectionScore detection_f_measure(const std::vector<Box>& predicted, const std::vector<Box>& gt, double iou_thresh) {
  return detection_f_measure(std::vector<std::vector<Box>>{predicted}, std::vector<std::vector<Box>>{gt}, iou_thresh);
}

DetectionScore detection_f_measure(const std::vector<std::vector<Box>>& predicted, const std::vector<std::vector<Box>>& gt,
                                   double iou_thresh) {
  if (!(iou_thresh > 0 && iou_thresh < 1)) throw InvalidInput("detection_f_measure: iou_thresh must lie in (0, 1)");
  if (predicted.size() != gt.size()) throw InvalidInput("detection_f_measure: image counts differ");
  DetectionScore s;
  std::size_t n_pred = 0, n_gt = 0;
  for (std::size_t img = 0; img < gt.size(); ++img) {
    const auto& p = predicted[img];
    const auto& g = gt[img];
    n_pred += p.size();
    n_gt += g.size();
    struct Pair {
      double iou;
      std::size_t pi, gi;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double v = iou(p[i], g[j]);
        if (v >= iou_thresh) pairs.push_back({v, i, j});
      }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
    std::vector<char> pu(p.size(), 0), gu(g.size(), 0);
    for (const auto& pr : pairs)
      if (!pu[pr.pi] && !gu[pr.gi]) {
        pu[pr.pi] = gu[pr.gi] = 1;
        ++s.matched;
      }
  }
  s.precision = n_pred == 0 ? (n_gt == 0 ? 1.0 : 0.0) : static_cast<double>(s.matched) / static_cast<double>(n_pred);
  s.recall = n_gt == 0 ? 1.0 : static_cast<double>(s.matched) / static_cast<double>(n_gt);
  s.f = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::vector<Annotation> annotate(const IndexEntry& entry, const std::vector<std::string>& words,
                                 const Retriever& retriever) {
  std::vector<Word> encoded;
  for (const auto& w : words) encoded.push_back(retriever.charset().encode(w));
  std::vector<Annotation> out;
  if (encoded.empty()) return out;
  const Eigen::MatrixXd f = retriever.query_features(encoded);
  for (std::size_t i = 0; i < words.size(); ++i) {
    const ImageScore s = score_image(f.row(static_cast<Eigen::Index>(i)), entry);
    if (s.box) out.push_back(Annotation{words[i], s.box, s.score});
  }
  return out;
}

std::vector<Box> confident_boxes(const IndexEntry& entry, double min_score) {
  std::vector<Box> out;
  for (int k = 0; k < entry.size(); ++k)
    if (entry.det_scores[static_cast<std::size_t>(k)] >= min_score) out.push_back(entry.boxes[static_cast<std::size_t>(k)]);
  return out;
}

AnnotationReport evaluate_annotation(const Retriever& retriever, const GalleryIndex& index,
                                     const GalleryManifest& manifest, double detector_thresh, double iou_thresh) {
  if (index.entries.size() != manifest.samples.size())
    throw InvalidInput("evaluate_annotation: index and manifest sizes differ");
  AnnotationReport rep;
  std::vector<std::vector<Box>> annotated, detected, gt;
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    std::vector<std::string> words;
    std::vector<Box> boxes;
    for (const auto& t : manifest.samples[i].instances) {
      words.push_back(t.text);
      boxes.push_back(t.box);
    }
    rep.annotations.push_back(annotate(index.entries[i], words, retriever));
    std::vector<Box> ann;
    for (const auto& a : rep.annotations.back()) ann.push_back(*a.box);
    annotated.push_back(std::move(ann));
    detected.push_back(confident_boxes(index.entries[i], detector_thresh));
    gt.push_back(std::move(boxes));
  }
  rep.annotated = detection_f_measure(annotated, gt, iou_thresh);
  rep.detector = detection_f_measure(detected, gt, iou_thresh);
  return rep;
}

}  // namespace textret
