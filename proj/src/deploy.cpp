#include "l2l/deploy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace l2l::deploy {

int64_t PlacementPlan::layer_devices(int layer) const {
  int64_t n = 0;
  for (const auto& f : fragments)
    if (f.layer == layer) n += int64_t(f.region.rows) * f.region.cols * 4;
  return n;
}

int64_t PlacementPlan::total_devices() const {
  int64_t n = 0;
  for (size_t l = 0; l < layers.size(); ++l) n += layer_devices(int(l));
  return n;
}

std::vector<Fragment> PlacementPlan::layer_fragments(int layer) const {
  std::vector<Fragment> out;
  for (const auto& f : fragments)
    if (f.layer == layer) out.push_back(f);
  return out;
}

std::string PlacementPlan::serialize() const {
  std::ostringstream os;
  os << "# layer fragment core row_offset col_offset rows cols layer_name\n";
  for (const auto& f : fragments)
    os << f.layer << " " << f.frag << " " << f.core << " " << f.row_off << " "
       << f.col_off << " " << f.region.rows << " " << f.region.cols << " "
       << layers[f.layer].name << "\n";
  return os.str();
}

namespace {

// skyline allocator per core: per-column occupied heights; a fragment lands
// at the leftmost column span whose skyline leaves room for its height
struct CoreSpace {
  std::array<int, xbar::kSize> height{};
};

bool place(std::vector<CoreSpace>& cores, int h, int w, int* core, int* row,
           int* col) {
  for (size_t ci = 0; ci < cores.size(); ++ci) {
    auto& sky = cores[ci].height;
    int best_x = -1, best_y = xbar::kSize + 1;
    for (int x = 0; x + w <= xbar::kSize; ++x) {
      int top = 0;
      for (int c = x; c < x + w; ++c) top = std::max(top, sky[c]);
      if (top + h <= xbar::kSize && top < best_y) {
        best_y = top;
        best_x = x;
        if (top == 0) break;
      }
    }
    if (best_x >= 0) {
      for (int c = best_x; c < best_x + w; ++c) sky[c] = best_y + h;
      *core = int(ci);
      *row = best_y;
      *col = best_x;
      return true;
    }
  }
  return false;
}

}  // namespace

PlacementPlan plan_placement(const std::vector<LayerShape>& layers,
                             int core_count) {
  if (core_count < 1) throw std::invalid_argument("plan_placement: need >= 1 core");
  PlacementPlan plan;
  plan.layers = layers;
  plan.scales.assign(layers.size(), 1.0f);
  std::vector<CoreSpace> space(core_count);
  for (size_t li = 0; li < layers.size(); ++li) {
    const int R = layers[li].matrix_rows(), C = layers[li].cols;
    if (R <= 0 || C <= 0)
      throw std::invalid_argument("plan_placement: empty layer " + layers[li].name);
    int frag = 0;
    for (int r0 = 0; r0 < R; r0 += xbar::kSize) {
      for (int c0 = 0; c0 < C; c0 += xbar::kSize) {
        const int h = std::min(xbar::kSize, R - r0);
        const int w = std::min(xbar::kSize, C - c0);
        Fragment f;
        f.layer = int(li);
        f.frag = frag++;
        f.row_off = r0;
        f.col_off = c0;
        f.region.rows = h;
        f.region.cols = w;
        if (!place(space, h, w, &f.core, &f.region.row0, &f.region.col0)) {
          std::ostringstream os;
          os << "plan_placement: capacity exhausted placing layer "
             << layers[li].name << " fragment " << f.frag << " (" << h << "x" << w
             << ") across " << core_count << " cores";
          throw std::runtime_error(os.str());
        }
        plan.fragments.push_back(f);
      }
    }
  }
  return plan;
}

namespace {

std::vector<float> assemble_matrix(const LayerShape& layer,
                                   const std::vector<float>& weights,
                                   const std::vector<float>* bias) {
  if (static_cast<int64_t>(weights.size()) != int64_t(layer.rows) * layer.cols)
    throw std::invalid_argument("deploy: weight shape mismatch for layer " +
                                layer.name);
  if (layer.bias_row) {
    if (!bias || static_cast<int>(bias->size()) != layer.cols)
      throw std::invalid_argument("deploy: bias missing/mismatched for layer " +
                                  layer.name);
  }
  std::vector<float> m = weights;
  if (layer.bias_row) m.insert(m.end(), bias->begin(), bias->end());
  return m;
}

}  // namespace

xbar::ProgramReport program_layer(PlacementPlan& plan,
                                  std::vector<xbar::CrossbarCore>& cores,
                                  int layer, const std::vector<float>& weights,
                                  const std::vector<float>* bias, Rng& rng) {
  const auto& shape = plan.layers.at(layer);
  std::vector<float> matrix = assemble_matrix(shape, weights, bias);
  float scale = 0;
  for (float v : matrix) scale = std::max(scale, std::abs(v));
  if (scale == 0) scale = 1.0f;
  plan.scales[layer] = scale;
  const int C = shape.cols;
  xbar::ProgramReport total;
  for (const auto& f : plan.layer_fragments(layer)) {
    std::vector<float> tile(int64_t(f.region.rows) * f.region.cols);
    for (int r = 0; r < f.region.rows; ++r)
      for (int c = 0; c < f.region.cols; ++c)
        tile[int64_t(r) * f.region.cols + c] =
            matrix[int64_t(f.row_off + r) * C + (f.col_off + c)] / scale;
    auto rep = cores.at(f.core).program(tile, f.region, rng);
    total.devices_touched += rep.devices_touched;
    total.max_residual = std::max(total.max_residual, rep.max_residual);
    total.residuals.insert(total.residuals.end(), rep.residuals.begin(),
                           rep.residuals.end());
  }
  return total;
}

xbar::ProgramReport reprogram_region(PlacementPlan& plan,
                                     std::vector<xbar::CrossbarCore>& cores,
                                     int layer, const std::vector<float>& weights,
                                     const std::vector<float>* bias, Rng& rng) {
  return program_layer(plan, cores, layer, weights, bias, rng);
}

std::vector<float> dispatch_mvm(const PlacementPlan& plan,
                                const std::vector<xbar::CrossbarCore>& cores,
                                int layer, const std::vector<float>& input) {
  const auto& shape = plan.layers.at(layer);
  if (static_cast<int>(input.size()) != shape.rows)
    throw std::invalid_argument("dispatch_mvm: input length mismatch for layer " +
                                shape.name);
  std::vector<float> full_in = input;
  if (shape.bias_row) full_in.push_back(1.0f);
  auto frags = plan.layer_fragments(layer);
  if (frags.empty())
    throw std::runtime_error("dispatch_mvm: layer has no fragments");
  for (const auto& f : frags)
    if (!cores.at(f.core).region_programmed(f.region))
      throw std::runtime_error("dispatch_mvm: fragment not programmed for layer " +
                               shape.name);
  std::vector<float> out(shape.cols, 0.0f);
  for (const auto& f : frags) {
    std::vector<float> slice(full_in.begin() + f.row_off,
                             full_in.begin() + f.row_off + f.region.rows);
    auto partial = cores[f.core].mvm(slice, f.region);
    for (int c = 0; c < f.region.cols; ++c) out[f.col_off + c] += partial[c];
  }
  const float s = plan.scales[layer];
  for (auto& v : out) v *= s;
  return out;
}

Im2colBuffer im2col(const float* image, int64_t C, int64_t H, int64_t W,
                    int kernel, int stride, bool bias_col) {
  if (H < 1 || W < 1 || C < 1) throw std::invalid_argument("im2col: empty input");
  Im2colBuffer buf;
  buf.out_h = (H + stride - 1) / stride;
  buf.out_w = (W + stride - 1) / stride;
  const int64_t pad_h = std::max<int64_t>((buf.out_h - 1) * stride + kernel - H, 0);
  const int64_t pad_w = std::max<int64_t>((buf.out_w - 1) * stride + kernel - W, 0);
  const int pad_top = int(pad_h / 2), pad_left = int(pad_w / 2);
  buf.rows = buf.out_h * buf.out_w;
  buf.cols = C * kernel * kernel + (bias_col ? 1 : 0);
  buf.data.assign(buf.rows * buf.cols, 0.0f);
  for (int64_t oy = 0; oy < buf.out_h; ++oy)
    for (int64_t ox = 0; ox < buf.out_w; ++ox) {
      float* row = buf.data.data() + (oy * buf.out_w + ox) * buf.cols;
      const int64_t iy0 = oy * stride - pad_top, ix0 = ox * stride - pad_left;
      int64_t idx = 0;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kernel; ++ky)
          for (int64_t kx = 0; kx < kernel; ++kx, ++idx) {
            const int64_t iy = iy0 + ky, ix = ix0 + kx;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
              row[idx] = image[(c * H + iy) * W + ix];
          }
      if (bias_col) row[buf.cols - 1] = 1.0f;
    }
  return buf;
}

}  // namespace l2l::deploy
