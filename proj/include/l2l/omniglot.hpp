#pragma once

#include <string>
#include <vector>

#include "l2l/dataset.hpp"

namespace l2l::data {

// Loads an alphabet/character/sample.png tree into a class-indexed dataset.
// Images are decoded as grayscale, resized to 28x28, inverted so ink ~ 1.
// Classes with a wrong example count and unreadable files are excluded with
// a warning. `manifest` (optional) lists one "alphabet/character" per line
// and restricts loading to those classes.
Dataset load_omniglot(const std::string& root, const std::string& manifest = "",
                      int expected_per_class = 20,
                      std::vector<std::string>* warnings = nullptr);

}  // namespace l2l::data
