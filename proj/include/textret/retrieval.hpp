#pragma once

// Gallery indexing, query ranking, mAP and detection evaluation, weak annotation.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "textret/checkpoint.hpp"
#include "textret/synthgen.hpp"

namespace textret {

/// One gallery image: pooled proposals and the vectors compared by cosine.
struct IndexEntry {
  std::string image;
  bool readable = true;
  std::string warning;
  std::vector<Box> boxes;
  std::vector<double> det_scores;
  Eigen::MatrixXd features;  // one row per box

  int size() const { return static_cast<int>(boxes.size()); }
};

struct GalleryIndex {
  std::string kind;  // joint, separated or phoc
  Charset charset;
  std::uint64_t model_fingerprint = 0;
  std::vector<int> scales;
  int feature_dim = 0;
  std::vector<IndexEntry> entries;
};

void save_index(const std::filesystem::path& path, const GalleryIndex& index);
GalleryIndex load_index(const std::filesystem::path& path);

/// Runs a trained system over images and encodes queries for it.
class Retriever {
 public:
  explicit Retriever(TrainedModel trained);

  const TrainedModel& trained() const { return trained_; }
  const Charset& charset() const { return trained_.charset; }
  std::string kind() const;

  /// Per scale (target long side): resize, detect, extract features; boxes mapped back and pooled.
  IndexEntry index_image(const Image& image, const std::vector<int>& scales) const;
  /// Query vectors, one row per word, comparable with IndexEntry::features.
  Eigen::MatrixXd query_features(const std::vector<Word>& words) const;

 private:
  TrainedModel trained_;
};

/// Unreadable images are kept with a warning and no proposals.
GalleryIndex index_gallery(const Retriever& retriever, const std::vector<std::filesystem::path>& images,
                           const std::vector<int>& scales);
GalleryIndex index_gallery(const Retriever& retriever, const std::vector<Image>& images,
                           const std::vector<std::string>& names, const std::vector<int>& scales);

struct ImageScore {
  double score = -1.0;  // -1 when the image has no proposals
  std::optional<Box> box;
  int proposal = -1;
};

ImageScore score_image(const Eigen::Ref<const Eigen::RowVectorXd>& query, const IndexEntry& entry);

struct RankedImage {
  int image = 0;
  double score = -1.0;
  std::optional<Box> box;
};

struct RetrievalResult {
  Word query;
  std::string text;
  std::vector<RankedImage> ranked;
};

/// Scores descending, ties by image id.
RetrievalResult rank_gallery(const Word& query, const Eigen::Ref<const Eigen::RowVectorXd>& query_vector,
                             const GalleryIndex& index);
RetrievalResult rank_gallery(const std::string& query, const Retriever& retriever, const GalleryIndex& index);

/// Mean over relevant positions of precision@k. Throws DegenerateInput without relevant items.
double average_precision(const std::vector<bool>& relevance);

struct MapReport {
  double map = 0;
  std::vector<std::string> queries;  // evaluated queries
  std::vector<double> ap;
  std::vector<std::string> skipped;  // queries with no relevant image
};

/// relevant[q][i]: image i contains query q.
MapReport mean_ap(const std::vector<std::string>& queries, const std::vector<RetrievalResult>& rankings,
                  const std::vector<std::vector<bool>>& relevant);

/// Image i is relevant to a query when one of its transcripts equals it after the charset's folding.
std::vector<std::vector<bool>> relevance_matrix(const std::vector<std::string>& queries,
                                                const GalleryManifest& manifest, const Charset& charset);

/// Ranks every query over the index and computes mAP against the manifest's transcripts.
MapReport evaluate_map(const Retriever& retriever, const GalleryIndex& index, const GalleryManifest& manifest,
                       const std::vector<std::string>& queries);

struct DetectionScore {
  double precision = 0, recall = 0, f = 0;
  int matched = 0;
};

/// Greedy one-to-one matching in descending IoU order, pairs below `iou_thresh` never match.
DetectionScore detection_f_measure(const std::vector<Box>& predicted, const std::vector<Box>& gt, double iou_thresh = 0.5);
/// Matches per image, precision and recall pooled over all images.
DetectionScore detection_f_measure(const std::vector<std::vector<Box>>& predicted, const std::vector<std::vector<Box>>& gt,
                                   double iou_thresh = 0.5);

struct Annotation {
  std::string word;
  std::optional<Box> box;
  double score = -1.0;
};

/// Per word, the box of the most similar proposal. Words are dropped (unannotated) when the
/// image has no proposals.
std::vector<Annotation> annotate(const IndexEntry& entry, const std::vector<std::string>& words,
                                 const Retriever& retriever);

/// Boxes whose detection score reaches `min_score`.
std::vector<Box> confident_boxes(const IndexEntry& entry, double min_score);

struct AnnotationReport {
  std::vector<std::vector<Annotation>> annotations;  // per image
  DetectionScore annotated;  // annotation boxes against the ground truth
  DetectionScore detector;   // detector boxes scoring at least the threshold
};

/// Annotates every indexed image with its ground-truth transcripts as weak labels and scores
/// the resulting boxes next to the raw detector on the same images.
AnnotationReport evaluate_annotation(const Retriever& retriever, const GalleryIndex& index,
                                     const GalleryManifest& manifest, double detector_thresh = 0.5,
                                     double iou_thresh = 0.5);

}  // namespace textret
