#include "emq/container.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "emq/error.hpp"

namespace emq::io {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("model container: truncated file");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return value;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open model file '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_container(const std::filesystem::path& path, const std::string& magic,
                     const nlohmann::json& header, std::span<const double> payload) {
  if (magic.size() != 4) throw FormatError("model container: magic must be 4 bytes");
  const std::string text = header.dump();
  std::string bytes = magic;
  put_le<std::uint32_t>(bytes, kFormatVersion);
  put_le<std::uint64_t>(bytes, text.size());
  bytes += text;
  put_le<std::uint64_t>(bytes, payload.size());
  for (double v : payload) put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write model file '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing model file '" + path.string() + "'");
}

std::string read_magic(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open model file '" + path.string() + "'");
  std::string magic(4, '\0');
  in.read(magic.data(), 4);
  if (in.gcount() != 4) throw FormatError("model container: truncated file");
  return magic;
}

Container read_container(const std::filesystem::path& path, const std::string& expected_magic) {
  const std::string bytes = read_all(path);
  if (bytes.size() < 4) throw FormatError("model container: truncated file");
  Container c;
  c.magic = bytes.substr(0, 4);
  if (c.magic != expected_magic) {
    throw FormatError("model container: expected type '" + expected_magic + "', found '" +
                      c.magic + "'");
  }
  std::size_t pos = 4;
  c.version = get_le<std::uint32_t>(bytes, pos);
  if (c.version != kFormatVersion) {
    throw VersionError("model container: format version " + std::to_string(c.version) +
                       " is not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, pos);
  if (header_len > bytes.size() - pos) throw FormatError("model container: truncated header");
  try {
    c.header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model container: corrupt header: ") + e.what());
  }
  pos += header_len;
  const auto count = get_le<std::uint64_t>(bytes, pos);
  if (count > (bytes.size() - pos) / 8 || bytes.size() - pos != count * 8) {
    throw FormatError("model container: parameter block size does not match file size");
  }
  c.payload.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    c.payload.push_back(std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos)));
  }
  return c;
}

nlohmann::json write_mlp(const nn::Mlp& mlp, std::vector<double>& payload) {
  nlohmann::json j;
  j["layer_sizes"] = mlp.shape().layer_sizes;
  std::vector<std::string> hidden;
  for (auto a : mlp.shape().hidden) hidden.emplace_back(nn::to_string(a));
  j["hidden"] = hidden;
  j["softplus_outputs"] = mlp.shape().softplus_outputs;
  j["seed"] = mlp.seed();
  for (const auto& layer : mlp.params()) {
    payload.insert(payload.end(), layer.weight.values().begin(), layer.weight.values().end());
    payload.insert(payload.end(), layer.bias.begin(), layer.bias.end());
  }
  return j;
}

nn::Mlp read_mlp(const nlohmann::json& descriptor, std::span<const double> payload,
                 std::size_t& offset) {
  try {
    nn::MlpShape shape;
    shape.layer_sizes = descriptor.at("layer_sizes").get<std::vector<std::size_t>>();
    for (const auto& name : descriptor.at("hidden").get<std::vector<std::string>>()) {
      shape.hidden.push_back(nn::activation_from_string(name));
    }
    shape.softplus_outputs = descriptor.at("softplus_outputs").get<std::vector<bool>>();
    const auto seed = descriptor.at("seed").get<std::uint64_t>();
    if (shape.layer_sizes.size() < 2) throw FormatError("model container: bad layer list");
    nn::ParamSet params;
    for (std::size_t l = 0; l + 1 < shape.layer_sizes.size(); ++l) {
      const std::size_t in = shape.layer_sizes[l];
      const std::size_t out = shape.layer_sizes[l + 1];
      if (offset + in * out + out > payload.size()) {
        throw FormatError("model container: parameter payload too short");
      }
      nn::Dense layer{Matrix(in, out), std::vector<double>(out)};
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset), in * out,
                  layer.weight.values().begin());
      offset += in * out;
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(offset), out, layer.bias.begin());
      offset += out;
      params.push_back(std::move(layer));
    }
    return nn::Mlp(std::move(shape), std::move(params), seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model container: bad network descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model container: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("model container: ") + e.what());
  }
}

nlohmann::json to_json(const data::NormStats& stats) {
  nlohmann::json j;
  j["kept_features"] = stats.kept_features;
  j["feature_mean"] = stats.feature_mean;
  j["feature_std"] = stats.feature_std;
  j["label_mean"] = stats.label_mean;
  j["label_std"] = stats.label_std;
  return j;
}

data::NormStats norm_stats_from_json(const nlohmann::json& j) {
  try {
    data::NormStats s;
    s.kept_features = j.at("kept_features").get<std::vector<std::size_t>>();
    s.feature_mean = j.at("feature_mean").get<std::vector<double>>();
    s.feature_std = j.at("feature_std").get<std::vector<double>>();
    s.label_mean = j.at("label_mean").get<double>();
    s.label_std = j.at("label_std").get<double>();
    if (s.feature_mean.size() != s.kept_features.size() ||
        s.feature_std.size() != s.kept_features.size()) {
      throw FormatError("model container: inconsistent normalization statistics");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model container: bad normalization statistics: ") + e.what());
  }
}

}  // namespace emq::io
