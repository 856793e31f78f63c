#pragma once

// Parameter checkpoints.
//
// Layout (all integers little-endian):
//   bytes 0-3   "FLPT"
//   bytes 4-7   u32 format version (1)
//   bytes 8-15  u64 header length H
//   next H      UTF-8 JSON header
//   rest        blob of little-endian IEEE-754 float64 values
//
// The header lists the network structure ("loss", "layers") and every
// tensor as {"name", "rows", "cols", "offset"} where offset is the byte
// offset of the tensor inside the blob; values are row-major.

#include "flipout/net.hpp"
#include "flipout/params.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace flipout {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const std::string& in, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline nlohmann::json layer_json(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer))
    return {{"kind", "dense"},
            {"d_in", d->dist.rows()},
            {"d_out", d->dist.cols()},
            {"activation", to_string(d->activation)},
            {"mode", to_string(d->dist.mode)}};
  const auto& c = std::get<LstmCell>(layer);
  return {{"kind", "lstm"},
          {"d_in", c.step_input_size()},
          {"hidden", c.hidden_size()},
          {"steps", c.steps},
          {"return_sequences", c.return_sequences},
          {"mode", to_string(c.recurrent.mode)}};
}

inline Layer layer_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind");
  const Mode mode = parse_mode(j.at("mode").get<std::string>());
  if (kind == "dense") {
    const Index din = j.at("d_in"), dout = j.at("d_out");
    return DenseLayer{WeightDist{Matrix::Zero(din, dout), Matrix::Zero(din, dout), mode}, Vector::Zero(dout),
                      parse_activation(j.at("activation").get<std::string>())};
  }
  if (kind == "lstm") {
    const Index din = j.at("d_in"), h = j.at("hidden");
    LstmCell c;
    c.input_weights = Matrix::Zero(din, 4 * h);
    c.recurrent = WeightDist{Matrix::Zero(h, 4 * h), Matrix::Zero(h, 4 * h), mode};
    c.bias = Vector::Zero(4 * h);
    c.steps = j.at("steps");
    c.return_sequences = j.at("return_sequences");
    return c;
  }
  throw FormatError("checkpoint: unknown layer kind '" + kind + "'");
}

}  // namespace detail

inline std::string serialize_checkpoint(const Network& net) {
  nlohmann::json header;
  header["loss"] = to_string(net.loss);
  header["layers"] = nlohmann::json::array();
  for (const auto& l : net.layers) header["layers"].push_back(detail::layer_json(l));
  header["tensors"] = nlohmann::json::array();
  std::string blob;
  for (const auto& r : param_refs(net)) {
    header["tensors"].push_back({{"name", r.name}, {"rows", r.rows}, {"cols", r.cols}, {"offset", blob.size()}});
    for (Index i = 0; i < r.size(); ++i)
      detail::put_le(blob, std::bit_cast<std::uint64_t>(static_cast<double>(r.data[i])));
  }
  const std::string h = header.dump();
  std::string out = "FLPT";
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += blob;
  return out;
}

inline Network deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint: truncated preamble");
  if (bytes.compare(0, 4, "FLPT") != 0) throw FormatError("checkpoint: wrong magic");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, 8);
  if (hlen > bytes.size() - 16) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  const std::size_t blob_at = 16 + hlen;
  Network net;
  try {
    net.loss = parse_loss(header.at("loss").get<std::string>());
    for (const auto& l : header.at("layers")) net.layers.push_back(detail::layer_from_json(l));
    auto refs = param_refs(net);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != refs.size()) throw FormatError("checkpoint: tensor count does not match layers");
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const auto& t = tensors[k];
      if (t.at("name") != refs[k].name || t.at("rows") != refs[k].rows || t.at("cols") != refs[k].cols)
        throw FormatError("checkpoint: tensor " + std::to_string(k) + " does not match layer structure");
      const std::uint64_t off = t.at("offset");
      const std::uint64_t need = static_cast<std::uint64_t>(refs[k].size()) * 8;
      if (off > bytes.size() - blob_at || need > bytes.size() - blob_at - off)
        throw FormatError("checkpoint: truncated data for " + refs[k].name);
      for (Index i = 0; i < refs[k].size(); ++i)
        refs[k].data[i] = static_cast<Real>(
            std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, blob_at + off + 8 * static_cast<std::size_t>(i))));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  net.validate();
  return net;
}

inline void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot write " + path);
  const std::string bytes = serialize_checkpoint(net);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("io", "write failed: " + path);
}

inline Network load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace flipout
