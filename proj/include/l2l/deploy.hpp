#pragma once

#include <string>
#include <vector>

#include "l2l/crossbar.hpp"
#include "l2l/tensor.hpp"

namespace l2l::deploy {

// Weight matrix of one MVM-bearing layer: `rows` input lines by `cols`
// outputs, plus an optional constant-one bias row.
struct LayerShape {
  std::string name;
  int rows = 0;
  int cols = 0;
  bool bias_row = false;

  int matrix_rows() const { return rows + (bias_row ? 1 : 0); }
};

struct Fragment {
  int layer = 0;
  int frag = 0;
  int core = 0;
  int row_off = 0;  // offsets within the layer's full matrix
  int col_off = 0;
  xbar::Region region;
};

struct PlacementPlan {
  std::vector<LayerShape> layers;
  std::vector<Fragment> fragments;
  std::vector<float> scales;  // per-layer max-abs, recorded at program time

  int64_t total_devices() const;
  int64_t layer_devices(int layer) const;
  std::vector<Fragment> layer_fragments(int layer) const;
  std::string serialize() const;  // one text record per fragment
};

// Greedy first-fit shelf placement; oversize matrices are tiled row-major
// into <=256-sized fragments.
PlacementPlan plan_placement(const std::vector<LayerShape>& layers, int core_count);

// Program a layer's weights (rows x cols, bias appended as an extra row when
// declared) onto the planned cores; records the layer's max-abs scale.
xbar::ProgramReport program_layer(PlacementPlan& plan,
                                  std::vector<xbar::CrossbarCore>& cores,
                                  int layer, const std::vector<float>& weights,
                                  const std::vector<float>* bias, Rng& rng);

// Re-program only the named layer; everything else is untouched.
xbar::ProgramReport reprogram_region(PlacementPlan& plan,
                                     std::vector<xbar::CrossbarCore>& cores,
                                     int layer, const std::vector<float>& weights,
                                     const std::vector<float>* bias, Rng& rng);

// y = x^T W (+ bias): per-fragment MVMs, row-partials summed, column
// partials concatenated, layer scale reapplied.
std::vector<float> dispatch_mvm(const PlacementPlan& plan,
                                const std::vector<xbar::CrossbarCore>& cores,
                                int layer, const std::vector<float>& input);

struct Im2colBuffer {
  int64_t out_h = 0, out_w = 0;
  int64_t rows = 0, cols = 0;  // rows = output positions, cols = C*KH*KW (+1)
  std::vector<float> data;     // row-major
};

// Patch extraction for one image (C x H x W), TF-style "same" zero padding;
// appends a constant-one column when bias_col is set.
Im2colBuffer im2col(const float* image, int64_t C, int64_t H, int64_t W,
                    int kernel, int stride, bool bias_col);

}  // namespace l2l::deploy
