#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protoalign/data.hpp"
#include "protoalign/linalg.hpp"

namespace protoalign {

/// Row i of `matrix` is the prototype of `classes[i]`.
struct PrototypeSet {
  std::vector<std::string> classes;
  linalg::Matrix matrix;

  std::size_t size() const { return classes.size(); }
};

using LabeledImage = std::pair<std::string, std::string>;  // (image id, class)

/// Mean support feature per class, classes in first-appearance order. Every
/// class must appear the same number of times.
PrototypeSet episode_prototypes(std::span<const LabeledImage> support,
                                const VisualFeatureStore& store);

/// Mean feature over all images assigned to each class, rows in `classes` order.
PrototypeSet global_prototypes(const VisualFeatureStore& store,
                               std::span<const std::string> classes);

}  // namespace protoalign
