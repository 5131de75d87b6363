#pragma once

// RIFF/WAVE reader and writer: PCM 16-bit and IEEE float 32-bit, 1-2 channels.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mmdense/error.hpp"

namespace mmdense {

struct AudioClip {
  std::uint32_t sample_rate = 0;
  std::vector<std::vector<float>> samples;  // [channel][frame]

  AudioClip() = default;
  AudioClip(std::uint32_t rate, std::size_t channels, std::size_t length)
      : sample_rate(rate), samples(channels, std::vector<float>(length, 0.0f)) {}

  std::size_t channels() const noexcept { return samples.size(); }
  std::size_t length() const noexcept { return samples.empty() ? 0 : samples[0].size(); }
  bool empty() const noexcept { return length() == 0; }

  friend bool operator==(const AudioClip&, const AudioClip&) = default;
};

inline void validate(const AudioClip& c) {
  MMDENSE_REQUIRE(c.sample_rate > 0, Errc::invalid_argument, "audio clip has zero sample rate");
  MMDENSE_REQUIRE(!c.samples.empty(), Errc::empty_input, "audio clip has no channels");
  for (const auto& ch : c.samples)
    MMDENSE_REQUIRE(ch.size() == c.samples[0].size(), Errc::shape_mismatch, "audio channels differ in length");
}

enum class WavCodec { pcm16, float32 };

namespace detail {

inline std::uint32_t le_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t le_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back(v >> 8);
}

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xfffe;

}  // namespace detail

inline AudioClip decode_wav(const std::vector<unsigned char>& bytes, const std::string& what = "wav") {
  using namespace detail;
  const std::size_t n = bytes.size();
  const unsigned char* b = bytes.data();
  MMDENSE_REQUIRE(n >= 12 && std::memcmp(b, "RIFF", 4) == 0 && std::memcmp(b + 8, "WAVE", 4) == 0,
                  Errc::malformed_header, what + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const unsigned char* ck = b + pos;
    const std::uint32_t size = le_u32(ck + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(ck, "fmt ", 4) == 0) {
      MMDENSE_REQUIRE(size >= 16 && body + size <= n, Errc::malformed_header, what + ": short fmt chunk");
      format = le_u16(b + body);
      channels = le_u16(b + body + 2);
      rate = le_u32(b + body + 4);
      bits = le_u16(b + body + 14);
      if (format == kFormatExtensible) {
        MMDENSE_REQUIRE(size >= 26, Errc::malformed_header, what + ": short extensible fmt chunk");
        format = le_u16(b + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(ck, "data", 4) == 0) {
      MMDENSE_REQUIRE(have_fmt, Errc::malformed_header, what + ": data chunk before fmt chunk");
      MMDENSE_REQUIRE(channels >= 1 && channels <= 2, Errc::unsupported_format,
                      what + ": " + std::to_string(channels) + " channels (1 or 2 supported)");
      MMDENSE_REQUIRE(rate > 0, Errc::malformed_header, what + ": zero sample rate");
      const bool pcm16 = format == kFormatPcm && bits == 16;
      const bool f32 = format == kFormatFloat && bits == 32;
      MMDENSE_REQUIRE(pcm16 || f32, Errc::unsupported_format,
                      what + ": format tag " + std::to_string(format) + " with " + std::to_string(bits) +
                          " bits (PCM16 or float32 supported)");
      MMDENSE_REQUIRE(body + size <= n, Errc::truncated_payload,
                      what + ": data chunk declares " + std::to_string(size) + " bytes, " +
                          std::to_string(n - std::min(n, body)) + " present");
      const std::size_t width = bits / 8, frame = width * channels, frames = size / frame;
      AudioClip clip(rate, channels, frames);
      const unsigned char* d = b + body;
      for (std::size_t i = 0; i < frames; ++i)
        for (std::size_t c = 0; c < channels; ++c) {
          const unsigned char* s = d + i * frame + c * width;
          if (pcm16) {
            clip.samples[c][i] = float(std::int16_t(le_u16(s))) / 32768.0f;
          } else {
            clip.samples[c][i] = std::bit_cast<float>(le_u32(s));
          }
        }
      return clip;
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt) fail(Errc::malformed_header, what + ": missing fmt chunk");
  fail(Errc::truncated_payload, what + ": missing data chunk");
}

inline std::vector<unsigned char> encode_wav(const AudioClip& clip, WavCodec codec) {
  using namespace detail;
  validate(clip);
  MMDENSE_REQUIRE(clip.channels() <= 2, Errc::unsupported_format, "only mono and stereo clips can be written");
  const std::uint16_t ch = std::uint16_t(clip.channels());
  const std::uint16_t bits = codec == WavCodec::pcm16 ? 16 : 32;
  const std::uint32_t data_bytes = std::uint32_t(clip.length() * ch * (bits / 8));
  std::vector<unsigned char> b;
  b.reserve(44 + data_bytes);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put_u32(b, 36 + data_bytes);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(b, 16);
  put_u16(b, codec == WavCodec::pcm16 ? kFormatPcm : kFormatFloat);
  put_u16(b, ch);
  put_u32(b, clip.sample_rate);
  put_u32(b, clip.sample_rate * ch * (bits / 8));
  put_u16(b, std::uint16_t(ch * (bits / 8)));
  put_u16(b, bits);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put_u32(b, data_bytes);
  for (std::size_t i = 0; i < clip.length(); ++i)
    for (std::size_t c = 0; c < ch; ++c) {
      const float v = clip.samples[c][i];
      if (codec == WavCodec::pcm16) {
        const long q = std::lround(double(v) * 32768.0);
        put_u16(b, std::uint16_t(std::int16_t(std::clamp(q, -32768L, 32767L))));
      } else {
        put_u32(b, std::bit_cast<std::uint32_t>(v));
      }
    }
  return b;
}

inline AudioClip load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  MMDENSE_REQUIRE(in, Errc::io_error, "cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path);
}

inline void save_wav(const AudioClip& clip, const std::string& path, WavCodec codec = WavCodec::float32) {
  const auto bytes = encode_wav(clip, codec);
  std::ofstream out(path, std::ios::binary);
  MMDENSE_REQUIRE(out, Errc::io_error, "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  MMDENSE_REQUIRE(out, Errc::io_error, "short write to '" + path + "'");
}

}  // namespace mmdense
