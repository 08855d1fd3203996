#include "l2l/omniglot.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace l2l::data {

Dataset load_omniglot(const std::string& root, const std::string& manifest,
                      int expected_per_class,
                      std::vector<std::string>* warnings) {
  if (!fs::is_directory(root))
    throw std::runtime_error("omniglot: not a directory: " + root);

  std::set<std::string> wanted;
  if (!manifest.empty()) {
    std::ifstream mf(manifest);
    if (!mf) throw std::runtime_error("omniglot: cannot read manifest " + manifest);
    std::string line;
    while (std::getline(mf, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
        line.pop_back();
      if (!line.empty()) wanted.insert(line);
    }
  }
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
  };

  std::vector<std::string> class_dirs;
  for (const auto& alpha : fs::directory_iterator(root)) {
    if (!alpha.is_directory()) continue;
    for (const auto& ch : fs::directory_iterator(alpha.path())) {
      if (!ch.is_directory()) continue;
      std::string key = alpha.path().filename().string() + "/" +
                        ch.path().filename().string();
      if (!wanted.empty() && !wanted.count(key)) continue;
      class_dirs.push_back(key);
    }
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw std::runtime_error("omniglot: no character classes under " + root);

  Dataset ds;
  for (const auto& key : class_dirs) {
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(fs::path(root) / key))
      if (f.is_regular_file() && f.path().extension() == ".png")
        files.push_back(f.path().string());
    std::sort(files.begin(), files.end());

    std::vector<std::vector<float>> exs;
    for (const auto& file : files) {
      cv::Mat img = cv::imread(file, cv::IMREAD_GRAYSCALE);
      if (img.empty()) {
        warn("omniglot: unreadable image excluded: " + file);
        continue;
      }
      cv::Mat small;
      cv::resize(img, small, cv::Size(kImageHw, kImageHw), 0, 0, cv::INTER_AREA);
      std::vector<float> px(size_t(kImageHw) * kImageHw);
      for (int y = 0; y < kImageHw; ++y)
        for (int x = 0; x < kImageHw; ++x)
          px[size_t(y) * kImageHw + x] = 1.0f - small.at<uint8_t>(y, x) / 255.0f;
      exs.push_back(std::move(px));
    }
    if (expected_per_class > 0 &&
        static_cast<int>(exs.size()) != expected_per_class) {
      warn("omniglot: class " + key + " has " + std::to_string(exs.size()) +
           " usable examples, expected " + std::to_string(expected_per_class) +
           "; excluded");
      continue;
    }
    ds.class_names.push_back(key);
    ds.examples.push_back(std::move(exs));
  }
  if (ds.examples.empty())
    throw std::runtime_error("omniglot: no usable classes under " + root);
  return ds;
}

}  // namespace l2l::data
