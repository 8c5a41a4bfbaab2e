#pragma once

// Checkpoint layout, all integers little-endian:
//
//   "PCNPROBE1"                      9 bytes, no terminator
//   u64 entry count
//   per entry:
//     u32 name length, name bytes (UTF-8)
//     u8  dtype code (1 = float32, 2 = float64)
//     u32 rank
//     u64 extent x rank
//     raw little-endian values
//
// Batchnorm running statistics are stored under "buffer/", optimizer state
// under "optim/".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "pcnprobe/model/model.hpp"
#include "pcnprobe/numerics/optim.hpp"

namespace pcnprobe {

inline constexpr std::string_view kCheckpointMagic = "PCNPROBE1";
inline constexpr std::string_view kBufferPrefix = "buffer/";
inline constexpr std::string_view kOptimizerPrefix = "optim/";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { float32 = 1, float64 = 2 };

struct CheckpointEntry {
  std::string name;
  std::variant<BasicTensor<float>, BasicTensor<double>> tensor;

  DType dtype() const { return tensor.index() == 0 ? DType::float32 : DType::float64; }
  const Shape& shape() const {
    return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, tensor);
  }
};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

template <typename F>
using bits_of = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const std::vector<CheckpointEntry>& entries) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype()));
    std::visit(
        [&](const auto& t) {
          using F = typename std::decay_t<decltype(t)>::value_type;
          detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
          for (const std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
          for (const F v : t.values()) detail::put_le(out, std::bit_cast<detail::bits_of<F>>(v));
        },
        e.tensor);
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& in) {
  std::string magic(kCheckpointMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw CheckpointError("not a checkpoint: bad magic");
  const auto count = detail::get_le<std::uint64_t>(in, "entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = detail::get_le<std::uint32_t>(in, "name length");
    e.name.resize(len);
    in.read(e.name.data(), len);
    if (!in) throw CheckpointError("checkpoint truncated in entry name");
    const auto dtype = detail::get_le<std::uint8_t>(in, "dtype");
    const auto rank = detail::get_le<std::uint32_t>(in, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(in, "extent");
    auto read_values = [&]<typename F>(F) {
      std::vector<F> values(shape_volume(shape));
      for (auto& v : values) v = std::bit_cast<F>(detail::get_le<detail::bits_of<F>>(in, "tensor data"));
      return BasicTensor<F>(shape, std::move(values));
    };
    if (dtype == static_cast<std::uint8_t>(DType::float32)) {
      e.tensor = read_values(float{});
    } else if (dtype == static_cast<std::uint8_t>(DType::float64)) {
      e.tensor = read_values(double{});
    } else {
      throw CheckpointError("unknown dtype code " + std::to_string(dtype) + " for entry '" + e.name + "'");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  write_checkpoint(out, entries);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Model and optimizer <-> entries

template <typename T>
void append_named(std::vector<CheckpointEntry>& out, const std::string& prefix,
                  const std::vector<ConstNamedTensor<T>>& named) {
  for (const auto& p : named) out.push_back({prefix + p.name, *p.tensor});
}

template <typename T>
void append_optimizer(std::vector<CheckpointEntry>& out, const std::string& tag, const OptimizerState<T>& s) {
  const std::string base = std::string(kOptimizerPrefix) + tag + ".";
  const auto& h = s.hyper;
  out.push_back({base + "hyper",
                 BasicTensor<double>(Shape{8}, {static_cast<double>(s.kind), h.learning_rate, h.weight_decay,
                                                h.momentum, h.beta1, h.beta2, h.epsilon,
                                                static_cast<double>(s.steps)})});
  for (std::size_t i = 0; i < s.first_moment.size(); ++i)
    out.push_back({base + "m." + std::to_string(i), s.first_moment[i]});
  for (std::size_t i = 0; i < s.second_moment.size(); ++i)
    out.push_back({base + "v." + std::to_string(i), s.second_moment[i]});
}

template <typename T>
std::vector<CheckpointEntry> model_entries(const PcnModel<T>& model) {
  std::vector<CheckpointEntry> out;
  append_named(out, "", model.parameters());
  append_named(out, std::string(kBufferPrefix) + "encoder.", model.encoder.buffers());
  return out;
}

/// Copies every model tensor out of `entries`; a missing or mis-shaped entry
/// is an error. Entries the model does not know are ignored.
template <typename T>
void load_model(PcnModel<T>& model, const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto fill = [&](const std::string& name, BasicTensor<T>& dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks entry '" + name + "'");
    std::visit(
        [&](const auto& src) {
          if (src.shape() != dst.shape()) {
            throw CheckpointError("entry '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                                  shape_string(dst.shape()));
          }
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
        },
        it->second->tensor);
  };
  for (auto& p : model.parameters()) fill(p.name, *p.tensor);
  for (auto& b : model.buffers()) fill(std::string(kBufferPrefix) + b.name, *b.tensor);
}

}  // namespace pcnprobe
