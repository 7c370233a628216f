#include "textret/geometry.hpp"

#include <algorithm>
#include <numeric>

namespace textret {

Box Box::clipped(double w, double h) const {
  return {std::clamp(x0, 0.0, w), std::clamp(y0, 0.0, h), std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h)};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh,
                     int max_keep) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  std::vector<int> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (int i : order) {
    if (dead[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    if (static_cast<int>(keep.size()) >= max_keep) break;
    for (int j : order)
      if (!dead[static_cast<std::size_t>(j)] && j != i &&
          iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > iou_thresh)
        dead[static_cast<std::size_t>(j)] = 1;
  }
  return keep;
}

}  // namespace textret
