#pragma once

// Checkpoint container:
//
//   MMDENSE-CHECKPOINT\n
//   header-bytes <n>\n
//   <n bytes of YAML header>
//   <payload: raw little-endian float32 tensors at the header's offsets>
//
// Offsets are relative to the first payload byte.

#include <yaml-cpp/yaml.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmdense/rmsprop.hpp"

namespace mmdense {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "MMDENSE-CHECKPOINT";

/// Trainer bookkeeping carried across resumes.
struct TrainProgress {
  std::uint64_t step = 0;
  double best_val = -1;  // < 0 until the first validation
  std::uint64_t stale_evals = 0;
  std::size_t frame_size = 2048;
  std::string instrument;
};

struct Checkpoint {
  Model<float> model;
  RmspropState optimizer;
  TrainProgress progress;
};

namespace detail {

struct TensorRecord {
  std::string name;
  std::string kind;  // param | bn_mean | bn_var | mean_square
  const Tensor<float>* value;
};

inline std::uint32_t bswap32(std::uint32_t u) {
  return (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
}

inline void append_le(std::string& out, const Tensor<float>& t) {
  const std::size_t at = out.size();
  out.resize(at + t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(t[i]);
    if constexpr (std::endian::native == std::endian::big) u = bswap32(u);
    std::memcpy(&out[at + 4 * i], &u, 4);
  }
}

inline void read_le(const char* src, Tensor<float>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, src + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) u = bswap32(u);
    t[i] = std::bit_cast<float>(u);
  }
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  using detail::TensorRecord;
  std::vector<TensorRecord> recs;
  for (const auto& e : ck.model.params.entries()) recs.push_back({e.name, "param", &e.value});
  for (const auto& [k, s] : ck.model.bn_states) {
    recs.push_back({k, "bn_mean", &s.running_mean});
    recs.push_back({k, "bn_var", &s.running_var});
  }
  for (const auto& [k, t] : ck.optimizer.mean_square) recs.push_back({k, "mean_square", &t});

  YAML::Emitter y;
  y << YAML::BeginMap;
  y << YAML::Key << "version" << YAML::Value << kCheckpointVersion;
  y << YAML::Key << "fingerprint" << YAML::Value << ck.model.fingerprint;
  y << YAML::Key << "arch" << YAML::Value << YAML::Literal << dump_arch(ck.model.spec);
  y << YAML::Key << "dtype" << YAML::Value << "f32-le";
  y << YAML::Key << "progress" << YAML::Value << YAML::BeginMap;
  y << YAML::Key << "step" << YAML::Value << ck.progress.step;
  y << YAML::Key << "best_val" << YAML::Value << ck.progress.best_val;
  y << YAML::Key << "stale_evals" << YAML::Value << ck.progress.stale_evals;
  y << YAML::Key << "frame_size" << YAML::Value << ck.progress.frame_size;
  y << YAML::Key << "instrument" << YAML::Value << ck.progress.instrument;
  y << YAML::EndMap;
  y << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
  y << YAML::Key << "rho" << YAML::Value << ck.optimizer.rho;
  y << YAML::Key << "epsilon" << YAML::Value << ck.optimizer.epsilon;
  y << YAML::Key << "lr" << YAML::Value << ck.optimizer.lr;
  y << YAML::EndMap;
  y << YAML::Key << "tensors" << YAML::Value << YAML::BeginSeq;
  std::size_t offset = 0;
  for (const auto& r : recs) {
    y << YAML::Flow << YAML::BeginMap;
    y << YAML::Key << "name" << YAML::Value << r.name;
    y << YAML::Key << "kind" << YAML::Value << r.kind;
    y << YAML::Key << "shape" << YAML::Value << YAML::Flow << r.value->shape();
    y << YAML::Key << "offset" << YAML::Value << offset;
    y << YAML::Key << "bytes" << YAML::Value << r.value->size() * 4;
    y << YAML::EndMap;
    offset += r.value->size() * 4;
  }
  y << YAML::EndSeq << YAML::EndMap;

  const std::string header = std::string(y.c_str()) + "\n";
  std::string out = std::string(kCheckpointMagic) + "\nheader-bytes " + std::to_string(header.size()) + "\n" + header;
  out.reserve(out.size() + offset);
  for (const auto& r : recs) detail::append_le(out, *r.value);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  MMDENSE_REQUIRE(bytes.compare(0, magic.size(), magic) == 0, Errc::malformed_header, what + ": bad magic line");
  const std::size_t eol = bytes.find('\n', magic.size());
  MMDENSE_REQUIRE(eol != std::string::npos, Errc::malformed_header, what + ": missing header size line");
  std::size_t header_bytes = 0;
  {
    std::istringstream line(bytes.substr(magic.size(), eol - magic.size()));
    std::string key;
    MMDENSE_REQUIRE((line >> key >> header_bytes) && key == "header-bytes", Errc::malformed_header,
                    what + ": malformed header size line");
  }
  const std::size_t header_at = eol + 1;
  MMDENSE_REQUIRE(header_at + header_bytes <= bytes.size(), Errc::truncated_payload, what + ": header runs past end of file");
  const std::size_t payload_at = header_at + header_bytes;
  const std::size_t payload_size = bytes.size() - payload_at;

  YAML::Node h;
  try {
    h = YAML::Load(bytes.substr(header_at, header_bytes));
  } catch (const YAML::Exception& e) {
    fail(Errc::malformed_header, what + ": " + e.what());
  }
  Checkpoint ck;
  try {
    const int version = h["version"].as<int>();
    MMDENSE_REQUIRE(version == kCheckpointVersion, Errc::version_mismatch,
                    what + ": format version " + std::to_string(version) + ", this build reads " +
                        std::to_string(kCheckpointVersion));
    MMDENSE_REQUIRE(h["dtype"].as<std::string>() == "f32-le", Errc::unsupported_format, what + ": unsupported dtype");
    ck.model.spec = parse_arch(h["arch"].as<std::string>());
    ck.model.fingerprint = h["fingerprint"].as<std::string>();
    const auto p = h["progress"];
    ck.progress.step = p["step"].as<std::uint64_t>();
    ck.progress.best_val = p["best_val"].as<double>();
    ck.progress.stale_evals = p["stale_evals"].as<std::uint64_t>();
    ck.progress.frame_size = p["frame_size"].as<std::size_t>();
    ck.progress.instrument = p["instrument"].as<std::string>("");
    const auto o = h["optimizer"];
    ck.optimizer.rho = o["rho"].as<double>();
    ck.optimizer.epsilon = o["epsilon"].as<double>();
    ck.optimizer.lr = o["lr"].as<double>();
  } catch (const YAML::Exception& e) {
    fail(Errc::malformed_header, what + ": " + e.what());
  }
  MMDENSE_REQUIRE(ck.model.fingerprint == fingerprint(ck.model.spec), Errc::fingerprint_mismatch,
                  what + ": stored fingerprint " + ck.model.fingerprint + " does not match its architecture (" +
                      fingerprint(ck.model.spec) + ")");

  // Shapes are validated against a freshly declared model of the same spec.
  const Model<float> ref = build_model<float>(ck.model.spec);
  std::map<std::string, Tensor<float>> params;
  try {
    for (const auto& t : h["tensors"]) {
      const auto name = t["name"].as<std::string>();
      const auto kind = t["kind"].as<std::string>();
      const auto shape = t["shape"].as<std::vector<std::size_t>>();
      const auto offset = t["offset"].as<std::size_t>();
      const auto nbytes = t["bytes"].as<std::size_t>();
      MMDENSE_REQUIRE(nbytes == shape_size(shape) * 4, Errc::malformed_header,
                      what + ": tensor '" + name + "' byte count disagrees with its shape");
      MMDENSE_REQUIRE(offset <= payload_size && nbytes <= payload_size - offset, Errc::truncated_payload,
                      what + ": tensor '" + name + "' ends at byte " + std::to_string(offset + nbytes) + " of a " +
                          std::to_string(payload_size) + "-byte payload");
      Tensor<float> value(shape);
      detail::read_le(bytes.data() + payload_at + offset, value);
      if (kind == "param") {
        MMDENSE_REQUIRE(ref.params.contains(name), Errc::shape_mismatch, what + ": unknown parameter '" + name + "'");
        MMDENSE_REQUIRE(ref.params.at(name).shape() == shape, Errc::shape_mismatch,
                        what + ": parameter '" + name + "' is " + to_string(shape) + ", architecture needs " +
                            to_string(ref.params.at(name).shape()));
        MMDENSE_REQUIRE(params.emplace(name, std::move(value)).second, Errc::malformed_header,
                        what + ": parameter '" + name + "' stored twice");
      } else if (kind == "bn_mean" || kind == "bn_var") {
        auto it = ref.bn_states.find(name);
        MMDENSE_REQUIRE(it != ref.bn_states.end() && it->second.running_mean.shape() == shape, Errc::shape_mismatch,
                        what + ": batch-norm statistics '" + name + "' do not fit the architecture");
        auto& st = ck.model.bn_states.emplace(name, it->second).first->second;
        (kind == "bn_mean" ? st.running_mean : st.running_var) = std::move(value);
      } else if (kind == "mean_square") {
        ck.optimizer.mean_square.emplace(name, std::move(value));
      } else {
        fail(Errc::malformed_header, what + ": unknown tensor kind '" + kind + "'");
      }
    }
  } catch (const YAML::Exception& e) {
    fail(Errc::malformed_header, what + ": " + e.what());
  }
  for (const auto& e : ref.params.entries()) {
    auto it = params.find(e.name);
    MMDENSE_REQUIRE(it != params.end(), Errc::shape_mismatch, what + ": parameter '" + e.name + "' missing");
    ck.model.params.add(e.name, e.group, std::move(it->second));
  }
  MMDENSE_REQUIRE(ck.model.bn_states.size() == ref.bn_states.size(), Errc::shape_mismatch,
                  what + ": batch-norm statistics incomplete");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = encode_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    MMDENSE_REQUIRE(out, Errc::io_error, "cannot write '" + tmp + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    MMDENSE_REQUIRE(out, Errc::io_error, "short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  MMDENSE_REQUIRE(!ec, Errc::io_error, "cannot move checkpoint into place at '" + path + "': " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  MMDENSE_REQUIRE(in, Errc::io_error, "cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

/// Copies a checkpoint's parameters into `target`, which must have been built
/// from the same architecture.
inline void load_into(Model<float>& target, const Checkpoint& ck) {
  MMDENSE_REQUIRE(target.fingerprint == ck.model.fingerprint, Errc::fingerprint_mismatch,
                  "checkpoint fingerprint " + ck.model.fingerprint + " does not match model fingerprint " +
                      target.fingerprint);
  target = ck.model;
}

}  // namespace mmdense
