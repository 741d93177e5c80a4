#include "protoalign/prototypes.hpp"

#include <algorithm>
#include <map>

#include "protoalign/errors.hpp"

namespace protoalign {

namespace {

// Sums in image-id order so the result does not depend on input order.
linalg::Vector mean_feature(std::vector<std::string> images, const VisualFeatureStore& store) {
  std::sort(images.begin(), images.end());
  linalg::Vector sum = linalg::Vector::Zero(store.dim());
  for (const auto& id : images) {
    if (!store.features().contains(id)) throw DataError("image \"" + id + "\" has no feature");
    sum += store.feature_row(store.row_of(id)).transpose();
  }
  return sum / static_cast<double>(images.size());
}

}  // namespace

PrototypeSet episode_prototypes(std::span<const LabeledImage> support,
                                const VisualFeatureStore& store) {
  if (support.empty()) throw DataError("episode_prototypes: empty support set");

  PrototypeSet out;
  std::map<std::string, std::vector<std::string>> members;
  for (const auto& [image, cls] : support) {
    auto [it, inserted] = members.try_emplace(cls);
    if (inserted) out.classes.push_back(cls);
    it->second.push_back(image);
  }

  const std::size_t shots = members.at(out.classes.front()).size();
  out.matrix.resize(static_cast<Eigen::Index>(out.classes.size()), store.dim());
  for (std::size_t i = 0; i < out.classes.size(); ++i) {
    auto& images = members.at(out.classes[i]);
    if (images.size() != shots) {
      throw DataError("episode_prototypes: class \"" + out.classes[i] + "\" has " +
                      std::to_string(images.size()) + " support images, expected " +
                      std::to_string(shots));
    }
    out.matrix.row(static_cast<Eigen::Index>(i)) = mean_feature(std::move(images), store).transpose();
  }
  return out;
}

PrototypeSet global_prototypes(const VisualFeatureStore& store,
                               std::span<const std::string> classes) {
  PrototypeSet out;
  out.classes.assign(classes.begin(), classes.end());
  out.matrix.resize(static_cast<Eigen::Index>(classes.size()), store.dim());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!store.has_class(classes[i])) {
      throw DataError("global_prototypes: class \"" + classes[i] + "\" has no images");
    }
    out.matrix.row(static_cast<Eigen::Index>(i)) =
        mean_feature(store.images_of(classes[i]), store).transpose();
  }
  return out;
}

}  // namespace protoalign
