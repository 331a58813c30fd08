// Procedural handwritten-style digits. Each class is a set of strokes in the
// unit square; every sample draws a random affine warp, stroke jitter, pen
// width and pixel noise, then rasterises with a one-pixel anti-aliased edge.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "chprune/dataset.hpp"
#include "chprune/errors.hpp"

namespace chprune {

namespace {

struct Point {
  double x, y;
};

using Stroke = std::vector<Point>;
using Glyph = std::vector<Stroke>;

Stroke line(Point a, Point b) { return {a, b}; }

Stroke polyline(std::initializer_list<Point> pts) { return pts; }

Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1) {
  const int segments = std::max(8, static_cast<int>(std::abs(deg1 - deg0) / 15.0));
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double t = (deg0 + (deg1 - deg0) * i / segments) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return s;
}

// Writing variants per class.
const std::vector<std::vector<Glyph>>& glyphs() {
  static const std::vector<std::vector<Glyph>> kGlyphs = {
      {{arc(0.5, 0.5, 0.28, 0.38, 0, 360)},
       {arc(0.5, 0.5, 0.22, 0.4, 0, 360), line({0.66, 0.22}, {0.34, 0.78})}},
      {{line({0.38, 0.24}, {0.54, 0.1}), line({0.54, 0.1}, {0.54, 0.9})},
       {line({0.5, 0.1}, {0.5, 0.9})},
       {line({0.36, 0.22}, {0.52, 0.1}), line({0.52, 0.1}, {0.52, 0.9}), line({0.34, 0.9}, {0.7, 0.9})}},
      {{arc(0.5, 0.33, 0.24, 0.22, 200, 380), line({0.725, 0.405}, {0.25, 0.9}),
        line({0.25, 0.9}, {0.78, 0.9})},
       {arc(0.5, 0.33, 0.24, 0.22, 200, 400), arc(0.5, 0.9, 0.25, 0.3, 190, 260),
        line({0.28, 0.88}, {0.8, 0.86})}},
      {{arc(0.48, 0.3, 0.22, 0.19, 200, 450), arc(0.48, 0.69, 0.25, 0.21, 270, 520)},
       {line({0.25, 0.1}, {0.72, 0.1}), line({0.72, 0.1}, {0.45, 0.45}),
        arc(0.48, 0.67, 0.26, 0.23, 270, 520)}},
      {{line({0.62, 0.9}, {0.62, 0.1}), line({0.62, 0.1}, {0.2, 0.64}),
        line({0.2, 0.64}, {0.8, 0.64})},
       {line({0.3, 0.1}, {0.25, 0.55}), line({0.25, 0.55}, {0.8, 0.55}), line({0.65, 0.25}, {0.65, 0.9})}},
      {{line({0.74, 0.1}, {0.34, 0.1}), line({0.34, 0.1}, {0.31, 0.46}),
        arc(0.5, 0.66, 0.25, 0.23, 230, 500)},
       {line({0.72, 0.12}, {0.32, 0.1}), line({0.32, 0.1}, {0.3, 0.48}),
        arc(0.48, 0.68, 0.25, 0.22, 250, 470)}},
      {{polyline({{0.68, 0.1}, {0.45, 0.3}, {0.3, 0.55}, {0.28, 0.7}}),
        arc(0.5, 0.68, 0.22, 0.21, 0, 360)},
       {arc(0.62, 0.55, 0.32, 0.45, 200, 270), arc(0.5, 0.7, 0.2, 0.19, 0, 360)}},
      {{line({0.22, 0.1}, {0.78, 0.1}), line({0.78, 0.1}, {0.42, 0.9})},
       {line({0.22, 0.1}, {0.78, 0.1}), line({0.78, 0.1}, {0.45, 0.9}), line({0.4, 0.5}, {0.75, 0.5})}},
      {{arc(0.5, 0.3, 0.19, 0.19, 0, 360), arc(0.5, 0.7, 0.23, 0.21, 0, 360)},
       {arc(0.5, 0.28, 0.17, 0.18, 0, 360), arc(0.5, 0.69, 0.26, 0.22, 0, 360)}},
      {{arc(0.5, 0.32, 0.22, 0.21, 0, 360), line({0.72, 0.34}, {0.6, 0.9})},
       {arc(0.48, 0.32, 0.22, 0.2, 0, 360), arc(0.4, 0.32, 0.3, 0.58, -10, 80)}},
  };
  return kGlyphs;
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0.0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

void render(const Glyph& glyph, Rng& rng, std::size_t size, std::uint8_t* out) {
  const double angle = rng.normal(0.0, 0.25);
  const double sx = rng.uniform(0.6, 1.05);
  const double sy = rng.uniform(0.7, 1.05);
  const double shear = rng.uniform(-0.4, 0.4);
  const double tx = rng.uniform(-0.12, 0.12);
  const double ty = rng.uniform(-0.12, 0.12);
  const double pen = rng.uniform(0.05, 0.14);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<Stroke> warped;
  warped.reserve(glyph.size());
  for (const Stroke& s : glyph) {
    const double ox = rng.normal(0.0, 0.035), oy = rng.normal(0.0, 0.035);
    Stroke w;
    w.reserve(s.size());
    for (const Point& p : s) {
      double x = p.x - 0.5 + ox + rng.normal(0.0, 0.015);
      double y = p.y - 0.5 + oy + rng.normal(0.0, 0.015);
      x = sx * (x + shear * y);
      y = sy * y;
      w.push_back({ca * x - sa * y + 0.5 + tx, sa * x + ca * y + 0.5 + ty});
    }
    warped.push_back(std::move(w));
  }
  // Stray mark unrelated to the digit.
  if (rng.bernoulli(0.2)) {
    const Point a{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    const double len = rng.uniform(0.1, 0.3), dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    warped.push_back({a, {a.x + len * std::cos(dir), a.y + len * std::sin(dir)}});
  }

  const double pixel = 1.0 / static_cast<double>(size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const Point p{(static_cast<double>(c) + 0.5) * pixel, (static_cast<double>(r) + 0.5) * pixel};
      double d = 1e9;
      for (const Stroke& s : warped) {
        for (std::size_t k = 0; k + 1 < s.size(); ++k) d = std::min(d, segment_distance(p, s[k], s[k + 1]));
      }
      double v = std::clamp((pen / 2.0 - d) / pixel + 0.5, 0.0, 1.0);
      v = std::clamp(v + rng.normal(0.0, 0.06), 0.0, 1.0);
      out[r * size + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
}

}  // namespace

RawImages generate_digits(const DigitsSpec& spec) {
  if (spec.size == 0 || spec.image_size < 8) {
    throw ConfigError("digits dataset needs size > 0 and image_size >= 8");
  }
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + 17 + spec.stream * 0xD1B54A32D192ED03ULL);
  RawImages raw;
  raw.count = spec.size;
  raw.channels = 1;
  raw.height = spec.image_size;
  raw.width = spec.image_size;
  const std::size_t per = spec.image_size * spec.image_size;
  raw.pixels.resize(spec.size * per);
  raw.labels.resize(spec.size);
  for (std::size_t i = 0; i < spec.size; ++i) {
    const std::size_t label = i % 10;
    raw.labels[i] = static_cast<std::uint8_t>(label);
    const auto& variants = glyphs()[label];
    render(variants[rng.below(variants.size())], rng, spec.image_size, raw.pixels.data() + i * per);
  }
  return raw;
}

}  // namespace chprune
