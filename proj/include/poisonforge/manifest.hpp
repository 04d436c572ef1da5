#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace poisonforge {

/// Hex SHA-1 of "blob <size>\0" + content, as `git hash-object` computes it.
std::string git_blob_hash(std::string_view content);
std::string git_blob_hash_file(const std::filesystem::path& path);

struct ManifestArtifact {
  std::string role;
  std::filesystem::path path;
  std::string hash;
};

/// Record of one CLI stage: what went in, what came out, and how long it took.
struct RunManifest {
  std::string stage;
  nlohmann::json config;
  std::vector<std::pair<std::string, std::uint64_t>> seeds;
  std::vector<ManifestArtifact> inputs;
  std::vector<ManifestArtifact> outputs;
  std::vector<std::pair<std::string, double>> timings;

  /// Hashes the file now; it must exist.
  void add_input(std::string role, const std::filesystem::path& path);
  void add_output(std::string role, const std::filesystem::path& path);

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace poisonforge
