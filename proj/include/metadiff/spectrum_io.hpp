#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "metadiff/em_oracle.hpp"

namespace metadiff {

static_assert(std::endian::native == std::endian::little, "spectrum files are written in host order; port me");

/// Row-major float32 little-endian, 201 values per record.
inline void write_spectra(const std::filesystem::path& path, const std::vector<Spectrum>& spectra) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::vector<float> row(kSpectrumPoints);
  for (const auto& s : spectra) {
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(s[i]);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<Spectrum> read_spectra(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  constexpr std::size_t record = kSpectrumPoints * sizeof(float);
  if (bytes % record != 0) throw std::runtime_error(path.string() + ": size is not a multiple of 201 float32 values");
  in.seekg(0);
  std::vector<float> buf(bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  std::vector<Spectrum> out(bytes / record);
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t i = 0; i < kSpectrumPoints; ++i) out[r][i] = buf[r * kSpectrumPoints + i];
  return out;
}

}  // namespace metadiff
