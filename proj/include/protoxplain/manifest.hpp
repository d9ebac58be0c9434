#pragma once

// Run manifests: the resolved configuration plus SHA-256 checksums of every
// artifact a command wrote.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "protoxplain/image_io.hpp"
#include "protoxplain/keyvalue.hpp"

namespace protoxplain {

inline constexpr const char* kManifestName = "manifest.txt";

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("sha256 unavailable");
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_path;
  KeyValues config;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::chrono::system_clock::time_point started = std::chrono::system_clock::now();
  std::chrono::system_clock::time_point finished = started;

  /// Checksums of every regular file under out_dir except the manifest itself,
  /// keyed by path relative to out_dir.
  KeyValues checksums() const {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(out_dir)) {
      if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    KeyValues kv;
    for (const auto& f : files) kv.set(std::filesystem::relative(f, out_dir).generic_string(), sha256_file(f));
    return kv;
  }

  void write() {
    finished = std::chrono::system_clock::now();
    KeyValues kv;
    kv.set("command", command);
    kv.set("config_path", config_path);
    kv.set_number("seed", seed);
    kv.set("out", out_dir.string());
    kv.set("started_utc", utc_timestamp(started));
    kv.set("finished_utc", utc_timestamp(finished));
    for (const auto& [k, v] : config.entries()) kv.set("config." + k, v);
    const auto sums = checksums();
    for (const auto& [k, v] : sums.entries()) kv.set("sha256." + k, v);
    const auto path = out_dir / kManifestName;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << kv.to_string();
    if (!out) throw IoError("failed writing " + path.string());
  }
};

/// Config file contents; a manifest is accepted and reduced to its resolved config.
inline KeyValues load_config_file(const std::string& path) {
  const auto kv = KeyValues::load(path);
  if (!kv.contains("command")) return kv;
  KeyValues out;
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("config.", 0) == 0) out.set(k.substr(7), v);
  }
  return out;
}

}  // namespace protoxplain
