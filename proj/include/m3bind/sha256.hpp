#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "m3bind/common.hpp"

namespace m3bind {

using Sha256Digest = std::array<std::uint8_t, 32>;

inline Sha256Digest sha256(const void* data, std::size_t len) {
  Sha256Digest out{};
  unsigned int out_len = 0;
  if (EVP_Digest(data, len, out.data(), &out_len, EVP_sha256(), nullptr) != 1 || out_len != 32) {
    throw Error("sha256: digest computation failed");
  }
  return out;
}

inline Sha256Digest sha256(std::string_view s) { return sha256(s.data(), s.size()); }

inline Sha256Digest sha256(const std::vector<std::uint8_t>& v) { return sha256(v.data(), v.size()); }

inline std::string to_hex(const Sha256Digest& d) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : d) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

// Incremental hasher for streaming tensor payloads.
class Sha256Stream {
 public:
  Sha256Stream() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw Error("Sha256Stream: init failed");
    }
  }
  ~Sha256Stream() { EVP_MD_CTX_free(ctx_); }
  Sha256Stream(const Sha256Stream&) = delete;
  Sha256Stream& operator=(const Sha256Stream&) = delete;

  void update(const void* data, std::size_t len) {
    if (EVP_DigestUpdate(ctx_, data, len) != 1) throw Error("Sha256Stream: update failed");
  }

  void update(std::string_view s) { update(s.data(), s.size()); }

  Sha256Digest finish() {
    Sha256Digest out{};
    unsigned int out_len = 0;
    if (EVP_DigestFinal_ex(ctx_, out.data(), &out_len) != 1 || out_len != 32) {
      throw Error("Sha256Stream: final failed");
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace m3bind
