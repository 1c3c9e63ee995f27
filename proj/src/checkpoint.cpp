// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"

namespace opadpo {

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::base: return "base";
    case Phase::opa: return "opa";
    case Phase::dpo: return "dpo";
    case Phase::opa_dpo: return "opa_dpo";
  }
  return "?";
}

Phase phase_from_string(const std::string& s) {
  if (s == "base") return Phase::base;
  if (s == "opa") return Phase::opa;
  if (s == "dpo") return Phase::dpo;
  if (s == "opa_dpo") return Phase::opa_dpo;
  fail(ErrorKind::parse, "unknown phase '" + s + "'");
}

namespace {

constexpr char kMagic[4] = {'O', 'P', 'D', 'P'};

template <class T>
void put(std::string& out, T v) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) bits = std::bit_cast<std::uint64_t>(v);
  else bits = static_cast<std::uint64_t>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <class T>
  T get(const char* what) {
    require(pos_ + sizeof(T) <= s_.size(), ErrorKind::parse,
            std::string("checkpoint truncated while reading ") + what);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) return std::bit_cast<double>(bits);
    else return static_cast<T>(bits);
  }

  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  const std::string& s_;
  std::size_t pos_ = 4;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  const auto& p = ck.params;
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  for (int c : {p.spec.vocab_size, p.spec.max_len, p.spec.image_dim, p.spec.embed_dim,
                p.spec.hidden_dim})
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(p.role));
  put<std::uint64_t>(out, p.values.size());
  put<std::uint8_t>(out, static_cast<std::uint8_t>(ck.meta.phase));
  put<std::uint32_t>(out, ck.meta.epoch);
  put<std::uint64_t>(out, ck.meta.step);
  put<std::uint64_t>(out, ck.meta.param_hash);
  put<std::uint64_t>(out, ck.meta.config_hash);
  for (double v : p.values) put<double>(out, v);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::parse,
          "not a checkpoint (bad magic)");
  Reader r(bytes);
  const auto version = r.get<std::uint16_t>("version");
  require(version == kCheckpointVersion, ErrorKind::parse,
          "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& spec = ck.params.spec;
  spec.vocab_size = static_cast<int>(r.get<std::uint32_t>("spec"));
  spec.max_len = static_cast<int>(r.get<std::uint32_t>("spec"));
  spec.image_dim = static_cast<int>(r.get<std::uint32_t>("spec"));
  spec.embed_dim = static_cast<int>(r.get<std::uint32_t>("spec"));
  spec.hidden_dim = static_cast<int>(r.get<std::uint32_t>("spec"));
  spec.validate();
  const auto role = r.get<std::uint8_t>("role");
  require(role <= 3, ErrorKind::parse, "bad role tag");
  ck.params.role = static_cast<policy::Role>(role);
  const auto count = r.get<std::uint64_t>("parameter count");
  require(count == policy::Layout::of(spec).total, ErrorKind::parse,
          "parameter count does not match the spec");
  const auto phase = r.get<std::uint8_t>("phase");
  require(phase <= 3, ErrorKind::parse, "bad phase tag");
  ck.meta.phase = static_cast<Phase>(phase);
  ck.meta.epoch = r.get<std::uint32_t>("epoch");
  ck.meta.step = r.get<std::uint64_t>("step");
  ck.meta.param_hash = r.get<std::uint64_t>("parameter hash");
  ck.meta.config_hash = r.get<std::uint64_t>("config hash");
  require(r.remaining() == count * 8, ErrorKind::parse, "checkpoint body has the wrong size");
  ck.params.values.resize(count);
  for (auto& v : ck.params.values) v = r.get<double>("values");
  require(ck.params.all_finite(), ErrorKind::numeric, "checkpoint holds non-finite values");
  require(ck.params.hash() == ck.meta.param_hash, ErrorKind::parse,
          "checkpoint parameter hash mismatch");
  return ck;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path);
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(static_cast<bool>(f), ErrorKind::io, "write failed for " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::io, "cannot rename into " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::missing_input, "cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

}  // namespace opadpo
