#include "cai/cli/manifest.hpp"

#include <fstream>

#include <json.hpp>

#include "cai/errors.hpp"
#include "cai/hash.hpp"

namespace cai::cli {

using nlohmann::json;

void ArtifactIndex::record(const std::filesystem::path& root, const std::string& relative,
                           const std::string& command) {
  const auto full = root / relative;
  files[relative] = {sha256_file(full), std::filesystem::file_size(full), command};
}

void ArtifactIndex::save(const std::filesystem::path& path) const {
  json list = json::array();
  for (const auto& [name, e] : files) {
    list.push_back({{"path", name}, {"sha256", e.sha256}, {"bytes", e.bytes}, {"command", e.command}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << json{{"schema_version", 1}, {"files", list}}.dump(2) << '\n';
}

ArtifactIndex ArtifactIndex::load(const std::filesystem::path& path) {
  ArtifactIndex index;
  std::ifstream in(path);
  if (!in) return index;
  try {
    const json j = json::parse(in);
    for (const auto& e : j.at("files")) {
      index.files[e.at("path").get<std::string>()] = {e.at("sha256").get<std::string>(),
                                                      e.at("bytes").get<std::uintmax_t>(),
                                                      e.at("command").get<std::string>()};
    }
  } catch (const json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  return index;
}

std::map<std::string, std::string> ArtifactIndex::mismatches(const std::filesystem::path& root) const {
  std::map<std::string, std::string> bad;
  for (const auto& [name, e] : files) {
    const auto full = root / name;
    if (!std::filesystem::exists(full)) {
      bad[name] = "missing";
    } else if (sha256_file(full) != e.sha256) {
      bad[name] = "hash mismatch";
    }
  }
  return bad;
}

}  // namespace cai::cli
