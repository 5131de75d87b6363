#pragma once

// Declarative description of (multi-band) multi-scale dense networks and the
// two built-in presets. Specs round-trip through a small YAML dialect.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmdense/error.hpp"

namespace mmdense {

struct KernelSize {
  std::size_t kt = 3;  // along frames
  std::size_t kf = 3;  // along frequency bins
  friend bool operator==(const KernelSize&, const KernelSize&) = default;
};

struct ConvSpec {
  std::size_t kt = 3, kf = 3, ch = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct DenseBlockSpec {
  std::size_t k = 1;       // growth rate
  std::size_t layers = 1;  // L
  KernelSize kernel{};
  friend bool operator==(const DenseBlockSpec&, const DenseBlockSpec&) = default;
};

struct BandSpec {
  std::string name;
  // Half-open range of the bin axis as fractions of the input bin count;
  // the full band is [0, 1).
  double begin = 0.0, end = 1.0;
  ConvSpec initial_conv{};
  std::vector<DenseBlockSpec> blocks;  // down path 1..s, then up path s+1..2s-1

  bool is_full() const { return begin == 0.0 && end == 1.0 && name == "full"; }
  friend bool operator==(const BandSpec&, const BandSpec&) = default;
};

struct ArchSpec {
  std::string name;
  std::vector<BandSpec> bands;
  DenseBlockSpec final_block{};
  ConvSpec final_conv{};
  std::size_t scales = 4;
  std::size_t io_channels = 2;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;
  std::uint64_t seed = 0;

  std::size_t blocks_per_band() const { return 2 * scales - 1; }
  std::size_t pool_factor() const { return std::size_t{1} << (scales - 1); }
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

inline void validate(const ArchSpec& s) {
  auto bad = [](const std::string& field, const std::string& why) {
    fail(Errc::invalid_argument, "arch spec field '" + field + "': " + why);
  };
  if (s.scales < 1 || s.scales > 8) bad("scales", "must be in [1, 8]");
  if (s.io_channels < 1) bad("io_channels", "must be >= 1");
  if (!(s.bn_epsilon > 0)) bad("bn_epsilon", "must be positive");
  if (!(s.bn_momentum > 0 && s.bn_momentum < 1)) bad("bn_momentum", "must be in (0, 1)");
  if (s.bands.empty()) bad("bands", "at least one band is required");
  if (s.final_conv.ch != s.io_channels) bad("final_conv.ch", "must equal io_channels");
  if (s.final_conv.kt < 1 || s.final_conv.kf < 1) bad("final_conv", "kernel sizes must be >= 1");
  if (s.final_block.k < 1 || s.final_block.layers < 1) bad("final_block", "k and L must be >= 1");

  std::set<std::string> names;
  std::size_t full = 0;
  double cursor = 0.0;
  for (const auto& b : s.bands) {
    const std::string f = "bands[" + b.name + "]";
    if (b.name.empty()) bad("bands.name", "must be non-empty");
    if (!names.insert(b.name).second) bad(f + ".name", "duplicate band name");
    if (b.blocks.size() != s.blocks_per_band())
      bad(f + ".blocks", "expected " + std::to_string(s.blocks_per_band()) + " dense blocks, got " +
                             std::to_string(b.blocks.size()));
    if (b.initial_conv.kt < 1 || b.initial_conv.kf < 1 || b.initial_conv.ch < 1)
      bad(f + ".initial_conv", "sizes must be >= 1");
    for (const auto& blk : b.blocks)
      if (blk.k < 1 || blk.layers < 1 || blk.kernel.kt < 1 || blk.kernel.kf < 1)
        bad(f + ".blocks", "k, L and kernel sizes must be >= 1");
    if (!(b.begin >= 0.0 && b.end <= 1.0 && b.begin < b.end)) bad(f + ".range", "must satisfy 0 <= begin < end <= 1");
    if (b.name == "full") {
      if (b.begin != 0.0 || b.end != 1.0) bad(f + ".range", "the full band must cover [0, 1)");
      ++full;
    } else {
      if (b.begin != cursor) bad(f + ".range", "sub-bands must tile [0, 1) in order");
      cursor = b.end;
    }
  }
  if (full > 1) bad("bands", "at most one full band");
  if (cursor != 0.0 && cursor != 1.0) bad("bands", "sub-bands must end at 1");
  if (full == 0 && cursor == 0.0) bad("bands", "no band covers the input");
}

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline std::vector<DenseBlockSpec> blocks_of(std::initializer_list<std::pair<std::size_t, std::size_t>> kl) {
  std::vector<DenseBlockSpec> out;
  for (auto [k, l] : kl) out.push_back(DenseBlockSpec{k, l, {3, 3}});
  return out;
}

}  // namespace detail

inline ArchSpec mdensenet_table1() {
  ArchSpec s;
  s.name = "mdensenet-table1";
  s.bands.push_back(BandSpec{"full", 0.0, 1.0, {3, 4, 32},
                             detail::blocks_of({{12, 4}, {12, 4}, {12, 4}, {12, 4}, {12, 4}, {12, 4}, {12, 4}})});
  s.final_block = {4, 2, {3, 3}};
  s.final_conv = {1, 2, 2};
  return s;
}

inline ArchSpec mmdensenet_table1() {
  ArchSpec s;
  s.name = "mmdensenet-table1";
  s.bands.push_back(BandSpec{"low", 0.0, 0.5, {3, 4, 32},
                             detail::blocks_of({{14, 4}, {16, 4}, {16, 4}, {16, 4}, {16, 4}, {16, 4}, {16, 4}})});
  s.bands.push_back(BandSpec{"high", 0.5, 1.0, {3, 3, 32},
                             detail::blocks_of({{10, 3}, {10, 3}, {10, 3}, {10, 3}, {10, 3}, {10, 3}, {10, 3}})});
  s.bands.push_back(BandSpec{"full", 0.0, 1.0, {3, 4, 32},
                             detail::blocks_of({{6, 2}, {6, 2}, {6, 2}, {6, 4}, {6, 2}, {6, 2}, {6, 2}})});
  s.final_block = {4, 2, {3, 3}};
  s.final_conv = {1, 2, 2};
  return s;
}

inline std::vector<std::string> preset_names() { return {"mdensenet-table1", "mmdensenet-table1"}; }

inline bool is_preset(const std::string& name) {
  return name == "mdensenet-table1" || name == "mmdensenet-table1";
}

inline ArchSpec preset(const std::string& name) {
  if (name == "mdensenet-table1") return mdensenet_table1();
  if (name == "mmdensenet-table1") return mmdensenet_table1();
  fail(Errc::invalid_argument, "unknown architecture preset '" + name + "'");
}

/// Multiplies every width (growth rates and conv channel counts, not the
/// output channel count or layer counts) by `factor`, rounding to >= 1.
inline ArchSpec scale_widths(ArchSpec s, double factor) {
  auto sc = [factor](std::size_t v) { return std::max<std::size_t>(1, std::size_t(std::lround(double(v) * factor))); };
  for (auto& b : s.bands) {
    b.initial_conv.ch = sc(b.initial_conv.ch);
    for (auto& blk : b.blocks) blk.k = sc(blk.k);
  }
  s.final_block.k = sc(s.final_block.k);
  return s;
}

// ---------------------------------------------------------------------------
// YAML dialect

namespace detail {

inline YAML::Node kernel_node(std::size_t a, std::size_t b) {
  YAML::Node n;
  n.SetStyle(YAML::EmitterStyle::Flow);
  n.push_back(a);
  n.push_back(b);
  return n;
}

inline YAML::Node block_node(const DenseBlockSpec& b) {
  YAML::Node n;
  n.SetStyle(YAML::EmitterStyle::Flow);
  n["k"] = b.k;
  n["L"] = b.layers;
  n["kernel"] = kernel_node(b.kernel.kt, b.kernel.kf);
  return n;
}

inline YAML::Node conv_node(const ConvSpec& c) {
  YAML::Node n;
  n.SetStyle(YAML::EmitterStyle::Flow);
  n.push_back(c.kt);
  n.push_back(c.kf);
  n.push_back(c.ch);
  return n;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class F>
auto yaml_field(const YAML::Node& n, const std::string& key, F&& convert) {
  if (!n[key]) fail(Errc::malformed_header, "arch spec: missing field '" + key + "'");
  try {
    return convert(n[key]);
  } catch (const YAML::Exception& e) {
    fail(Errc::malformed_header, "arch spec field '" + key + "': " + e.what());
  }
}

inline DenseBlockSpec parse_block(const YAML::Node& n) {
  DenseBlockSpec b;
  b.k = yaml_field(n, "k", [](const YAML::Node& v) { return v.as<std::size_t>(); });
  b.layers = yaml_field(n, "L", [](const YAML::Node& v) { return v.as<std::size_t>(); });
  if (n["kernel"]) {
    auto k = n["kernel"].as<std::vector<std::size_t>>();
    if (k.size() != 2) fail(Errc::malformed_header, "arch spec: block kernel must be [kt, kf]");
    b.kernel = {k[0], k[1]};
  }
  return b;
}

inline ConvSpec parse_conv(const YAML::Node& n, const std::string& what) {
  auto v = n.as<std::vector<std::size_t>>();
  if (v.size() != 3) fail(Errc::malformed_header, "arch spec: " + what + " must be [kt, kf, ch]");
  return {v[0], v[1], v[2]};
}

}  // namespace detail

/// YAML text of `s`. With `canonical` the label fields (name, seed) are
/// omitted; that form feeds the fingerprint.
inline std::string dump_arch(const ArchSpec& s, bool canonical = false) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  if (!canonical) out << YAML::Key << "name" << YAML::Value << s.name;
  out << YAML::Key << "scales" << YAML::Value << s.scales;
  out << YAML::Key << "io_channels" << YAML::Value << s.io_channels;
  out << YAML::Key << "bn_epsilon" << YAML::Value << detail::fmt_double(s.bn_epsilon);
  out << YAML::Key << "bn_momentum" << YAML::Value << detail::fmt_double(s.bn_momentum);
  if (!canonical) out << YAML::Key << "seed" << YAML::Value << s.seed;
  out << YAML::Key << "bands" << YAML::Value << YAML::BeginSeq;
  for (const auto& b : s.bands) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << b.name;
    out << YAML::Key << "range" << YAML::Value << YAML::Flow << YAML::BeginSeq << detail::fmt_double(b.begin)
        << detail::fmt_double(b.end) << YAML::EndSeq;
    out << YAML::Key << "initial_conv" << YAML::Value << detail::conv_node(b.initial_conv);
    out << YAML::Key << "blocks" << YAML::Value << YAML::BeginSeq;
    for (const auto& blk : b.blocks) out << detail::block_node(blk);
    out << YAML::EndSeq;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "final_block" << YAML::Value << detail::block_node(s.final_block);
  out << YAML::Key << "final_conv" << YAML::Value << detail::conv_node(s.final_conv);
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

inline ArchSpec parse_arch(const std::string& text) {
  YAML::Node n;
  try {
    n = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(Errc::malformed_header, std::string("arch spec is not valid YAML: ") + e.what());
  }
  if (!n.IsMap()) fail(Errc::malformed_header, "arch spec must be a mapping");
  ArchSpec s;
  s.name = n["name"] ? n["name"].as<std::string>() : "custom";
  if (n["scales"]) s.scales = n["scales"].as<std::size_t>();
  if (n["io_channels"]) s.io_channels = n["io_channels"].as<std::size_t>();
  if (n["bn_epsilon"]) s.bn_epsilon = n["bn_epsilon"].as<double>();
  if (n["bn_momentum"]) s.bn_momentum = n["bn_momentum"].as<double>();
  if (n["seed"]) s.seed = n["seed"].as<std::uint64_t>();
  const auto bands = detail::yaml_field(n, "bands", [](const YAML::Node& v) { return v; });
  for (const auto& bn : bands) {
    BandSpec b;
    b.name = detail::yaml_field(bn, "name", [](const YAML::Node& v) { return v.as<std::string>(); });
    if (bn["range"]) {
      auto r = bn["range"].as<std::vector<double>>();
      if (r.size() != 2) fail(Errc::malformed_header, "arch spec: band range must be [begin, end]");
      b.begin = r[0];
      b.end = r[1];
    }
    b.initial_conv = detail::parse_conv(detail::yaml_field(bn, "initial_conv", [](const YAML::Node& v) { return v; }),
                                        "initial_conv");
    for (const auto& blk : detail::yaml_field(bn, "blocks", [](const YAML::Node& v) { return v; }))
      b.blocks.push_back(detail::parse_block(blk));
    s.bands.push_back(std::move(b));
  }
  s.final_block = detail::parse_block(detail::yaml_field(n, "final_block", [](const YAML::Node& v) { return v; }));
  s.final_conv =
      detail::parse_conv(detail::yaml_field(n, "final_conv", [](const YAML::Node& v) { return v; }), "final_conv");
  validate(s);
  return s;
}

/// Preset name or path to a YAML file.
inline ArchSpec load_arch(const std::string& preset_or_path) {
  if (is_preset(preset_or_path)) return preset(preset_or_path);
  std::ifstream in(preset_or_path);
  if (!in) fail(Errc::io_error, "cannot open arch spec '" + preset_or_path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_arch(ss.str());
}

// Layout conventions that change parameter shapes or semantics; part of the
// fingerprint so a checkpoint cannot be loaded under a different convention.
inline constexpr const char* kNamingScheme =
    "mmdense-naming-v1;block-out=last-k;down=avgpool2x2;up=tconv2x2-same-ch;even-pad=trailing;"
    "band-adapter=conv1x1;concat=up,skip;out=relu";

/// 64-bit FNV-1a digest, hex encoded.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string fingerprint(const ArchSpec& s) { return fnv1a_hex(dump_arch(s, true) + kNamingScheme); }

}  // namespace mmdense
