#include "poisonforge/manifest.hpp"

#include <fstream>
#include <iterator>

#include <openssl/evp.h>

#include "poisonforge/common.hpp"

namespace poisonforge {

using nlohmann::json;

std::string git_blob_hash(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error(ErrorCode::kRuntime, "sha1: cannot allocate digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error(ErrorCode::kRuntime, "sha1 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int k = 0; k < len; ++k) {
    out += kHex[digest[k] >> 4];
    out += kHex[digest[k] & 0xf];
  }
  return out;
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return git_blob_hash(content);
}

void RunManifest::add_input(std::string role, const std::filesystem::path& path) {
  inputs.push_back({std::move(role), path, git_blob_hash_file(path)});
}

void RunManifest::add_output(std::string role, const std::filesystem::path& path) {
  outputs.push_back({std::move(role), path, git_blob_hash_file(path)});
}

json RunManifest::to_json() const {
  auto artifacts = [](const std::vector<ManifestArtifact>& list) {
    json out = json::array();
    for (const auto& a : list) out.push_back({{"role", a.role}, {"path", a.path.string()}, {"hash", a.hash}});
    return out;
  };
  json seeds_j = json::object();
  for (const auto& [name, value] : seeds) seeds_j[name] = value;
  json timings_j = json::object();
  for (const auto& [name, value] : timings) timings_j[name] = value;
  return json{{"version", 1},       {"stage", stage},
              {"config", config},   {"seeds", seeds_j},
              {"inputs", artifacts(inputs)}, {"outputs", artifacts(outputs)},
              {"timings", timings_j}};
}

void RunManifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

}  // namespace poisonforge
