#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "emq/data.hpp"
#include "emq/nn.hpp"
#include "emq/quantile.hpp"

// Versioned model container:
//   4-byte magic | u32 format version | u64 header length | JSON header |
//   u64 value count | little-endian f64 parameter blocks in declared order.
namespace emq::io {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Container {
  std::string magic;
  std::uint32_t version = 0;
  nlohmann::json header;
  std::vector<double> payload;
};

void write_container(const std::filesystem::path& path, const std::string& magic,
                     const nlohmann::json& header, std::span<const double> payload);

// Throws FormatError on a wrong magic or truncated/corrupt file, VersionError
// when the version field differs from kFormatVersion.
Container read_container(const std::filesystem::path& path, const std::string& expected_magic);

// Peeks at the 4-byte magic only.
std::string read_magic(const std::filesystem::path& path);

// Mlp shape descriptor for the header; parameters go to `payload`.
nlohmann::json write_mlp(const nn::Mlp& mlp, std::vector<double>& payload);
// Rebuilds an Mlp from its descriptor, consuming values from payload[offset...].
nn::Mlp read_mlp(const nlohmann::json& descriptor, std::span<const double> payload,
                 std::size_t& offset);

nlohmann::json to_json(const data::NormStats& stats);
data::NormStats norm_stats_from_json(const nlohmann::json& j);

}  // namespace emq::io
