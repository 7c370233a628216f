#pragma once

// Anchor-free (per-location) text detection: training targets and box decoding.

#include <vector>

#include <Eigen/Core>

#include "textret/geometry.hpp"

namespace textret {

/// Detected text proposals, best score first.
struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> scores;

  int size() const { return static_cast<int>(boxes.size()); }
  bool empty() const { return boxes.empty(); }
};

struct FeatureLevel {
  int height = 0;
  int width = 0;
  int stride = 1;

  /// Image-space center of feature cell (i, j).
  double cx(int j) const { return j * stride + stride / 2.0; }
  double cy(int i) const { return i * stride + stride / 2.0; }
  int cells() const { return height * width; }
};

struct LevelTargets {
  Eigen::VectorXd labels;      // 1 for positive cells
  Eigen::VectorXd centerness;  // target in (0, 1], zero off positives
  Eigen::MatrixXd sides;       // cells x 4 (l, t, r, b) in pixels, zero off positives
  std::vector<int> positives;  // cell indices
};

/// Positive cells lie strictly inside a ground-truth box assigned to their level; a box goes to
/// the first level whose height limit exceeds the box height (the last level takes the rest).
/// Ambiguous cells take the smallest box.
std::vector<LevelTargets> assign_targets(const std::vector<Box>& gt, const std::vector<FeatureLevel>& levels,
                                         const std::vector<double>& height_limits);

/// sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)).
double centerness(double l, double t, double r, double b);

struct DecodeSettings {
  double score_thresh = 0.1;
  double nms_iou = 0.5;
  int max_proposals = 100;
  int pre_nms = 1000;
};

/// Per-level head outputs as flat per-cell arrays. Scores are sqrt(sigmoid(cls) * sigmoid(ctr)),
/// boxes center -/+ exp(raw) * stride, clipped to the image.
ProposalSet decode_detections(const std::vector<FeatureLevel>& levels, const std::vector<Eigen::VectorXd>& cls_logits,
                              const std::vector<Eigen::MatrixXd>& reg_raw, const std::vector<Eigen::VectorXd>& ctr_logits,
                              int image_height, int image_width, const DecodeSettings& settings);

}  // namespace textret
