#pragma once

#include <vector>

namespace textret {

/// Axis-aligned rectangle in pixel coordinates; pixel (x, y) covers [x, x+1) x [y, y+1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x0 < x1 && y0 < y1; }
  Box scaled(double sx, double sy) const { return {x0 * sx, y0 * sy, x1 * sx, y1 * sy}; }
  Box clipped(double w, double h) const;

  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

/// Greedy non-maximum suppression over boxes sorted by descending score; returns kept indices.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh,
                     int max_keep);

}  // namespace textret
