#pragma once

#include <string>
#include <vector>

#include "l2l/rng.hpp"
#include "l2l/tensor.hpp"

namespace l2l::data {

inline constexpr int kImageHw = 28;

// Class-indexed image dataset: every example is a 28x28 grayscale image
// flattened row-major, ink ~1, background ~0.
struct Dataset {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::vector<float>>> examples;  // [class][ex][784]

  int num_classes() const { return static_cast<int>(examples.size()); }
};

struct Episode {
  Tensor support_x;  // (N*K, 1, 28, 28)
  Tensor support_y;  // (N*K, N) one-hot
  Tensor query_x;    // (N*K, 1, 28, 28)
  Tensor query_y;
  std::vector<int> class_ids;  // dataset class per episode label
};

// N classes without replacement, K disjoint support/query examples per
// class, random label permutation.
Episode sample_task(const Dataset& ds, int n_way, int k_shot, Rng& rng);

// Keep classes [begin, end).
Dataset slice_classes(const Dataset& ds, int begin, int end);

// Adds 90/180/270-degree rotations of every class as new classes.
Dataset augment_rotations(const Dataset& ds);

// Procedural stroke-glyph dataset: each class is a fixed random polyline
// prototype; examples apply small affine jitter and pixel noise. Stands in
// for handwritten characters when no image corpus is available.
Dataset synthetic_glyphs(int num_classes, int per_class, uint64_t seed);

}  // namespace l2l::data
