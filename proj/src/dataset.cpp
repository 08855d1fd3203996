#include "l2l/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace l2l::data {

Episode sample_task(const Dataset& ds, int n_way, int k_shot, Rng& rng) {
  if (ds.num_classes() < n_way)
    throw std::runtime_error("sample_task: dataset has " +
                             std::to_string(ds.num_classes()) +
                             " classes, need " + std::to_string(n_way));
  std::vector<int> cls(ds.num_classes());
  std::iota(cls.begin(), cls.end(), 0);
  std::shuffle(cls.begin(), cls.end(), rng.engine());
  cls.resize(n_way);

  const int64_t B = int64_t(n_way) * k_shot;
  const int64_t px = int64_t(kImageHw) * kImageHw;
  Episode ep;
  ep.support_x = Tensor({B, 1, kImageHw, kImageHw});
  ep.query_x = Tensor({B, 1, kImageHw, kImageHw});
  ep.support_y = Tensor({B, n_way});
  ep.query_y = Tensor({B, n_way});
  ep.class_ids = cls;

  for (int l = 0; l < n_way; ++l) {
    const auto& exs = ds.examples[cls[l]];
    if (static_cast<int>(exs.size()) < 2 * k_shot)
      throw std::runtime_error("sample_task: class " + ds.class_names[cls[l]] +
                               " has only " + std::to_string(exs.size()) +
                               " examples, need " + std::to_string(2 * k_shot));
    std::vector<int> order(exs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int k = 0; k < k_shot; ++k) {
      const int64_t row = int64_t(l) * k_shot + k;
      std::copy(exs[order[k]].begin(), exs[order[k]].end(),
                ep.support_x.data.begin() + row * px);
      std::copy(exs[order[k_shot + k]].begin(), exs[order[k_shot + k]].end(),
                ep.query_x.data.begin() + row * px);
      ep.support_y[row * n_way + l] = 1.0f;
      ep.query_y[row * n_way + l] = 1.0f;
    }
  }
  return ep;
}

Dataset slice_classes(const Dataset& ds, int begin, int end) {
  if (begin < 0 || end > ds.num_classes() || begin >= end)
    throw std::invalid_argument("slice_classes: bad range");
  Dataset out;
  out.class_names.assign(ds.class_names.begin() + begin, ds.class_names.begin() + end);
  out.examples.assign(ds.examples.begin() + begin, ds.examples.begin() + end);
  return out;
}

namespace {

std::vector<float> rotate90(const std::vector<float>& img, int quarter) {
  const int H = kImageHw;
  std::vector<float> out(img.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < H; ++x) {
      int sy = y, sx = x;
      switch (quarter) {
        case 1: sy = H - 1 - x; sx = y; break;
        case 2: sy = H - 1 - y; sx = H - 1 - x; break;
        case 3: sy = x; sx = H - 1 - y; break;
      }
      out[y * H + x] = img[sy * H + sx];
    }
  return out;
}

}  // namespace

Dataset augment_rotations(const Dataset& ds) {
  Dataset out;
  for (int q = 0; q < 4; ++q)
    for (int c = 0; c < ds.num_classes(); ++c) {
      out.class_names.push_back(ds.class_names[c] + "/rot" + std::to_string(90 * q));
      std::vector<std::vector<float>> exs;
      for (const auto& e : ds.examples[c]) exs.push_back(rotate90(e, q));
      out.examples.push_back(std::move(exs));
    }
  return out;
}

namespace {

// draw a thick anti-aliased segment into a H x H canvas
void draw_segment(std::vector<float>& img, double x0, double y0, double x1,
                  double y1, double thickness) {
  const int H = kImageHw;
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int steps = std::max(2, int(len * 3));
  for (int s = 0; s <= steps; ++s) {
    const double t = double(s) / steps;
    const double cx = x0 + t * (x1 - x0), cy = y0 + t * (y1 - y0);
    const int xlo = std::max(0, int(cx - thickness - 1));
    const int xhi = std::min(H - 1, int(cx + thickness + 1));
    const int ylo = std::max(0, int(cy - thickness - 1));
    const int yhi = std::min(H - 1, int(cy + thickness + 1));
    for (int y = ylo; y <= yhi; ++y)
      for (int x = xlo; x <= xhi; ++x) {
        const double d = std::hypot(x - cx, y - cy);
        const double v = std::clamp(thickness + 0.5 - d, 0.0, 1.0);
        img[y * H + x] = std::max(img[y * H + x], float(v));
      }
  }
}

std::vector<float> glyph_prototype(uint64_t class_seed) {
  Rng rng(class_seed);
  const int H = kImageHw;
  std::vector<float> img(H * H, 0.0f);
  const int strokes = int(rng.uniform_int(3, 5));
  double x = rng.uniform(6, H - 6), y = rng.uniform(6, H - 6);
  for (int s = 0; s < strokes; ++s) {
    double nx, ny;
    do {
      nx = rng.uniform(4, H - 4);
      ny = rng.uniform(4, H - 4);
    } while (std::hypot(nx - x, ny - y) < 8);
    draw_segment(img, x, y, nx, ny, 1.1);
    // sometimes lift the pen
    if (rng.uniform() < 0.4) {
      x = rng.uniform(6, H - 6);
      y = rng.uniform(6, H - 6);
    } else {
      x = nx;
      y = ny;
    }
  }
  return img;
}

float bilinear(const std::vector<float>& img, double x, double y) {
  const int H = kImageHw;
  if (x < 0 || y < 0 || x > H - 1 || y > H - 1) return 0.0f;
  const int x0 = int(x), y0 = int(y);
  const int x1 = std::min(x0 + 1, H - 1), y1 = std::min(y0 + 1, H - 1);
  const double fx = x - x0, fy = y - y0;
  return float((img[y0 * H + x0] * (1 - fx) + img[y0 * H + x1] * fx) * (1 - fy) +
               (img[y1 * H + x0] * (1 - fx) + img[y1 * H + x1] * fx) * fy);
}

std::vector<float> jittered(const std::vector<float>& proto, Rng& rng) {
  const int H = kImageHw;
  const double angle = rng.uniform(-0.25, 0.25);
  const double scale = rng.uniform(0.9, 1.1);
  const double dx = rng.uniform(-2.0, 2.0), dy = rng.uniform(-2.0, 2.0);
  const double c = std::cos(angle) / scale, s = std::sin(angle) / scale;
  const double cx = (H - 1) / 2.0, cy = (H - 1) / 2.0;
  std::vector<float> out(H * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < H; ++x) {
      const double rx = x - cx - dx, ry = y - cy - dy;
      const double sx = c * rx + s * ry + cx;
      const double sy = -s * rx + c * ry + cy;
      double v = bilinear(proto, sx, sy) + rng.normal(0.0, 0.03);
      out[y * H + x] = float(std::clamp(v, 0.0, 1.0));
    }
  return out;
}

}  // namespace

Dataset synthetic_glyphs(int num_classes, int per_class, uint64_t seed) {
  if (num_classes < 1 || per_class < 1)
    throw std::invalid_argument("synthetic_glyphs: need positive sizes");
  Dataset ds;
  for (int c = 0; c < num_classes; ++c) {
    auto proto = glyph_prototype(Rng::split(seed, 1, c).next());
    ds.class_names.push_back("glyph" + std::to_string(c));
    std::vector<std::vector<float>> exs;
    for (int e = 0; e < per_class; ++e) {
      Rng ex_rng = Rng::split(seed, 2, uint64_t(c) << 20 | unsigned(e));
      exs.push_back(jittered(proto, ex_rng));
    }
    ds.examples.push_back(std::move(exs));
  }
  return ds;
}

}  // namespace l2l::data
