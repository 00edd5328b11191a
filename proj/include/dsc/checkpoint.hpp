#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dsc/dsc_layer.hpp"

namespace dsc {

namespace detail {

inline void write_f64le(std::ostream& os, const double* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &src[i], 8);
    unsigned char buf[8];
    for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>(bits >> (8 * b));
    os.write(reinterpret_cast<const char*>(buf), 8);
  }
}

inline void read_f64le(std::istream& is, double* dst, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated payload");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
    std::memcpy(&dst[i], &bits, 8);
  }
}

}  // namespace detail

// Text header followed by flat little-endian f64 arrays in the declared
// field order. Round-trips bit-exactly.
inline void save_checkpoint(const std::string& path, const DscLayer& layer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os << "DSCCKPT 1\n";
  os << "d " << layer.d() << "\n";
  os << "M " << layer.M() << "\n";
  os << "K " << layer.K() << "\n";
  os << "gamma_mode "
     << (layer.config.gamma_mode == GammaMode::Scalar ? "scalar" : "channelwise")
     << "\n";
  os << "dtype f64le\n";
  os << "fields U_hat V_hat W_r gamma W0\n";
  os << "end_header\n";
  detail::write_f64le(os, layer.bank.U_hat.data.data(), layer.bank.U_hat.data.size());
  detail::write_f64le(os, layer.bank.V_hat.data.data(), layer.bank.V_hat.data.size());
  detail::write_f64le(os, layer.router.W_r.data.data(), layer.router.W_r.data.size());
  detail::write_f64le(os, layer.gamma.data(), layer.gamma.size());
  detail::write_f64le(os, layer.W0.data.data(), layer.W0.data.size());
  if (!os) throw std::runtime_error("save_checkpoint: write failed");
}

// Loads parameters into a layer built from `config`; dims must match.
inline void load_checkpoint(const std::string& path, DscLayer& layer) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string line;
  std::getline(is, line);
  if (line != "DSCCKPT 1") throw std::runtime_error("load_checkpoint: bad magic");
  std::size_t d = 0, M = 0, K = 0;
  std::string mode;
  while (std::getline(is, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "d") ls >> d;
    else if (key == "M") ls >> M;
    else if (key == "K") ls >> K;
    else if (key == "gamma_mode") ls >> mode;
    else if (key == "dtype") {
      std::string t;
      ls >> t;
      if (t != "f64le") throw std::runtime_error("load_checkpoint: unsupported dtype");
    } else if (key == "fields") {
      // fixed field order, validated below by payload sizes
    } else {
      throw std::runtime_error("load_checkpoint: unknown header key " + key);
    }
  }
  if (d != layer.d() || M != layer.M() || K != layer.K())
    throw std::runtime_error("load_checkpoint: dimension mismatch");
  const std::string expect_mode =
      layer.config.gamma_mode == GammaMode::Scalar ? "scalar" : "channelwise";
  if (mode != expect_mode)
    throw std::runtime_error("load_checkpoint: gamma mode mismatch");
  detail::read_f64le(is, layer.bank.U_hat.data.data(), layer.bank.U_hat.data.size());
  detail::read_f64le(is, layer.bank.V_hat.data.data(), layer.bank.V_hat.data.size());
  detail::read_f64le(is, layer.router.W_r.data.data(), layer.router.W_r.data.size());
  detail::read_f64le(is, layer.gamma.data(), layer.gamma.size());
  detail::read_f64le(is, layer.W0.data.data(), layer.W0.data.size());
}

}  // namespace dsc
