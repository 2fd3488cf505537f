#pragma once

#include <map>
#include <string>

#include "fedl2p/model.hpp"

namespace fedl2p {

// Thrown when a required artifact file is absent or unreadable.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// JSON model checkpoints (parameters + running statistics).
void save_model(const ModelState& m, const std::string& path);
ModelState load_model(const std::string& path);

// Run manifest: stage name -> relative artifact path, rewritten after every
// completed stage so partial runs stay resumable.
struct Manifest {
  std::map<std::string, std::string> entries;

  void set(const std::string& stage, const std::string& rel_path);
  bool has(const std::string& stage) const;
  std::string require(const std::string& stage, const std::string& dir) const;
};

void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);  // missing file -> empty manifest

}  // namespace fedl2p
