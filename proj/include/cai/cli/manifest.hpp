#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace cai::cli {

struct ManifestEntry {
  std::string sha256;
  std::uintmax_t bytes = 0;
  std::string command;
};

// Index of emitted files keyed by path relative to the output directory.
struct ArtifactIndex {
  std::map<std::string, ManifestEntry> files;

  // Hashes `root / relative` and records it.
  void record(const std::filesystem::path& root, const std::string& relative, const std::string& command);
  void save(const std::filesystem::path& path) const;
  static ArtifactIndex load(const std::filesystem::path& path);  // missing file yields an empty index

  // Relative paths whose current content no longer matches the recorded hash.
  std::map<std::string, std::string> mismatches(const std::filesystem::path& root) const;
};

inline constexpr const char* kManifestName = "manifest.json";

}  // namespace cai::cli
