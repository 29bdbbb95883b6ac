#pragma once

// Download, checksum and unpack of the CIFAR-10 binary archive. Kept out of
// the library headers: only the CLI links curl, OpenSSL and zlib.

#include <curl/curl.h>
#include <openssl/evp.h>
#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "msr/data.hpp"
#include "msr/errors.hpp"

namespace msr::fetch {

inline constexpr const char* kCifarUrl = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
inline constexpr const char* kCifarMd5 = "c32a1d4ab5d03f1284b67883e8d87530";

inline std::string md5_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_md5(), nullptr) != 1) {
    throw DataError("md5: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::vector<std::uint8_t> download(const std::string& url) {
  CURL* curl = curl_easy_init();
  if (!curl) throw DataError("curl: init failed");
  std::vector<std::uint8_t> body;
  auto sink = +[](char* p, std::size_t size, std::size_t n, void* user) -> std::size_t {
    auto* v = static_cast<std::vector<std::uint8_t>*>(user);
    v->insert(v->end(), p, p + size * n);
    return size * n;
  };
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, sink);
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, &body);
  const CURLcode rc = curl_easy_perform(curl);
  curl_easy_cleanup(curl);
  if (rc != CURLE_OK) throw DataError("download of " + url + " failed: " + curl_easy_strerror(rc));
  return body;
}

inline std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> gz) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw DataError("gunzip: init failed");
  zs.next_in = const_cast<Bytef*>(gz.data());
  zs.avail_in = static_cast<uInt>(gz.size());
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof chunk;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataError("gunzip: corrupt stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof chunk - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw DataError("gunzip: truncated stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

struct TarEntry {
  std::string name;
  std::vector<std::uint8_t> data;
};

/// Regular files of a ustar/GNU tar archive; other entry types are skipped.
inline std::vector<TarEntry> untar(std::span<const std::uint8_t> tar) {
  std::vector<TarEntry> out;
  std::size_t pos = 0;
  while (pos + 512 <= tar.size()) {
    const std::uint8_t* h = tar.data() + pos;
    if (h[0] == 0) break;  // end-of-archive block
    auto field = [&](std::size_t off, std::size_t len) {
      std::string s(reinterpret_cast<const char*>(h + off), len);
      return s.substr(0, s.find('\0'));
    };
    std::string name = field(0, 100);
    const std::string prefix = field(345, 155);
    if (!prefix.empty()) name = prefix + "/" + name;
    const std::size_t size = std::stoull("0" + field(124, 12), nullptr, 8);
    const char type = static_cast<char>(h[156]);
    pos += 512;
    if (pos + size > tar.size()) throw DataError("untar: entry " + name + " is truncated");
    if (type == '0' || type == '\0') out.push_back({name, {tar.begin() + pos, tar.begin() + pos + size}});
    pos += (size + 511) / 512 * 512;
  }
  return out;
}

/// Fetches the archive, checks its MD5, and writes cifar-10-batches-bin/*
/// under `dest`. Every *_batch*.bin file is parsed before returning.
inline std::filesystem::path fetch_cifar10(const std::filesystem::path& dest, const std::string& url = kCifarUrl,
                                           const std::string& md5 = kCifarMd5) {
  const auto archive = download(url);
  const std::string got = md5_hex(archive);
  if (got != md5) throw DataError("checksum mismatch for " + url + ": expected md5 " + md5 + ", got " + got);
  std::size_t batches = 0;
  for (const auto& e : untar(gunzip(archive))) {
    const std::filesystem::path rel(e.name);
    for (const auto& part : rel) {
      if (part == "..") throw DataError("untar: refusing path " + e.name);
    }
    const auto target = dest / rel.relative_path();
    std::filesystem::create_directories(target.parent_path());
    write_file_bytes(target, e.data);
    if (rel.extension() == ".bin" && rel.filename().string().find("batch") != std::string::npos) {
      (void)parse_cifar10(e.data);
      ++batches;
    }
  }
  if (batches == 0) throw DataError("archive from " + url + " contains no batch files");
  return dest / "cifar-10-batches-bin";
}

}  // namespace msr::fetch
