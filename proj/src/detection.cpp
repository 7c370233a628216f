#include "textret/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "textret/errors.hpp"

namespace textret {

double centerness(double l, double t, double r, double b) {
  return std::sqrt(std::min(l, r) / std::max(l, r) * (std::min(t, b) / std::max(t, b)));
}

std::vector<LevelTargets> assign_targets(const std::vector<Box>& gt, const std::vector<FeatureLevel>& levels,
                                         const std::vector<double>& height_limits) {
  if (height_limits.size() + 1 != levels.size()) throw InvalidInput("assign_targets: need one height limit per level boundary");
  std::vector<LevelTargets> out(levels.size());
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto& lv = levels[li];
    auto& tg = out[li];
    tg.labels = Eigen::VectorXd::Zero(lv.cells());
    tg.centerness = Eigen::VectorXd::Zero(lv.cells());
    tg.sides = Eigen::MatrixXd::Zero(lv.cells(), 4);
    std::vector<double> best_area(static_cast<std::size_t>(lv.cells()), std::numeric_limits<double>::infinity());
    for (const Box& box : gt) {
      std::size_t level = 0;
      while (level < height_limits.size() && box.height() >= height_limits[level]) ++level;
      if (level != li) continue;
      const int i0 = std::max(0, static_cast<int>(std::floor(box.y0 / lv.stride)) - 1);
      const int i1 = std::min(lv.height - 1, static_cast<int>(std::ceil(box.y1 / lv.stride)));
      const int j0 = std::max(0, static_cast<int>(std::floor(box.x0 / lv.stride)) - 1);
      const int j1 = std::min(lv.width - 1, static_cast<int>(std::ceil(box.x1 / lv.stride)));
      for (int i = i0; i <= i1; ++i)
        for (int j = j0; j <= j1; ++j) {
          const double l = lv.cx(j) - box.x0, t = lv.cy(i) - box.y0, r = box.x1 - lv.cx(j), b = box.y1 - lv.cy(i);
          if (std::min({l, t, r, b}) <= 0) continue;
          const int cell = i * lv.width + j;
          if (box.area() >= best_area[static_cast<std::size_t>(cell)]) continue;
          best_area[static_cast<std::size_t>(cell)] = box.area();
          tg.labels[cell] = 1;
          tg.sides.row(cell) << l, t, r, b;
          tg.centerness[cell] = centerness(l, t, r, b);
        }
    }
    for (int c = 0; c < lv.cells(); ++c)
      if (tg.labels[c] > 0) tg.positives.push_back(c);
  }
  return out;
}

ProposalSet decode_detections(const std::vector<FeatureLevel>& levels, const std::vector<Eigen::VectorXd>& cls_logits,
                              const std::vector<Eigen::MatrixXd>& reg_raw, const std::vector<Eigen::VectorXd>& ctr_logits,
                              int image_height, int image_width, const DecodeSettings& settings) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto& lv = levels[li];
    for (int i = 0; i < lv.height; ++i)
      for (int j = 0; j < lv.width; ++j) {
        const int cell = i * lv.width + j;
        const double score = std::sqrt(sig(cls_logits[li][cell]) * sig(ctr_logits[li][cell]));
        if (score < settings.score_thresh) continue;
        double d[4];
        for (int k = 0; k < 4; ++k) d[k] = std::exp(std::min(reg_raw[li](cell, k), 12.0)) * lv.stride;
        Box b = Box{lv.cx(j) - d[0], lv.cy(i) - d[1], lv.cx(j) + d[2], lv.cy(i) + d[3]}.clipped(image_width, image_height);
        if (b.width() < 1.0 || b.height() < 1.0) continue;
        boxes.push_back(b);
        scores.push_back(score);
      }
  }
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  if (static_cast<int>(order.size()) > settings.pre_nms) order.resize(static_cast<std::size_t>(settings.pre_nms));
  std::vector<Box> cand_boxes;
  std::vector<double> cand_scores;
  for (int o : order) {
    cand_boxes.push_back(boxes[static_cast<std::size_t>(o)]);
    cand_scores.push_back(scores[static_cast<std::size_t>(o)]);
  }
  ProposalSet out;
  for (int k : nms(cand_boxes, cand_scores, settings.nms_iou, settings.max_proposals)) {
    out.boxes.push_back(cand_boxes[static_cast<std::size_t>(k)]);
    out.scores.push_back(cand_scores[static_cast<std::size_t>(k)]);
  }
  return out;
}

}  // namespace textret
