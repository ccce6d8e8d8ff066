#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/data.hpp>
#include <fedtta/hetero.hpp>
#include <fedtta/mlp.hpp>

namespace fedtta {

static_assert(std::endian::native == std::endian::little,
              "serialization is specified little-endian");

class SerializeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw SerializeError("unexpected end of stream");
  return v;
}

inline void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[4], const char* what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw SerializeError(std::string(what) + ": bad magic");
}

inline void write_doubles(std::ostream& os, std::span<const double> values) {
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw SerializeError("unexpected end of stream");
  return v;
}

}  // namespace detail

// model parameters: width header + one flat little-endian f64 vector
// (W0 row-major, b0, W1, b1, ...)
inline void write_model_params(std::ostream& os, const ModelParams& p) {
  detail::write_magic(os, "FTMP");
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.spec.widths.size()));
  for (std::size_t w : p.spec.widths) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(w));
  detail::write_pod<std::uint64_t>(os, p.parameter_count());
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    detail::write_doubles(os, p.weights[l].values());
    detail::write_doubles(os, p.biases[l].values());
  }
}

inline ModelParams read_model_params(std::istream& is) {
  detail::expect_magic(is, "FTMP", "model params");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1) throw SerializeError("model params: unsupported version");
  const auto n_widths = detail::read_pod<std::uint32_t>(is);
  MlpSpec spec;
  for (std::uint32_t i = 0; i < n_widths; ++i)
    spec.widths.push_back(detail::read_pod<std::uint32_t>(is));
  spec.validate();
  const auto count = detail::read_pod<std::uint64_t>(is);
  if (count != spec.parameter_count()) throw SerializeError("model params: count mismatch");
  ModelParams p;
  p.spec = spec;
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    const std::size_t fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
    p.weights.emplace_back(Shape{fan_in, fan_out}, detail::read_doubles(is, fan_in * fan_out));
    p.biases.emplace_back(Shape{fan_out}, detail::read_doubles(is, fan_out));
  }
  return p;
}

// server checkpoint: round index plus the prediction model and, for methods
// that carry one, the adaptation model
struct Checkpoint {
  std::uint32_t round = 0;
  ModelParams psi;
  std::optional<ModelParams> phi;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  detail::write_magic(os, "FTCK");
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint32_t>(os, c.round);
  detail::write_pod<std::uint8_t>(os, c.phi ? 1 : 0);
  write_model_params(os, c.psi);
  if (c.phi) write_model_params(os, *c.phi);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  detail::expect_magic(is, "FTCK", "checkpoint");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1) throw SerializeError("checkpoint: unsupported version");
  Checkpoint c;
  c.round = detail::read_pod<std::uint32_t>(is);
  const auto has_phi = detail::read_pod<std::uint8_t>(is);
  c.psi = read_model_params(is);
  if (has_phi) c.phi = read_model_params(is);
  return c;
}

// labeled dataset: (m, d, C) header, f64 features, i32 labels
inline void write_dataset(std::ostream& os, const LabeledDataset& ds) {
  detail::write_magic(os, "FTDS");
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint64_t>(os, ds.size());
  detail::write_pod<std::uint64_t>(os, ds.dim());
  detail::write_pod<std::uint64_t>(os, ds.classes);
  detail::write_doubles(os, ds.features.values());
  for (int y : ds.labels) detail::write_pod<std::int32_t>(os, y);
}

inline LabeledDataset read_dataset(std::istream& is) {
  detail::expect_magic(is, "FTDS", "dataset");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1) throw SerializeError("dataset: unsupported version");
  const auto m = detail::read_pod<std::uint64_t>(is);
  const auto d = detail::read_pod<std::uint64_t>(is);
  const auto classes = detail::read_pod<std::uint64_t>(is);
  LabeledDataset ds;
  ds.features = Tensor({static_cast<std::size_t>(m), static_cast<std::size_t>(d)},
                       detail::read_doubles(is, m * d));
  ds.labels.reserve(m);
  for (std::uint64_t i = 0; i < m; ++i) ds.labels.push_back(detail::read_pod<std::int32_t>(is));
  ds.classes = classes;
  ds.validate();
  return ds;
}

// ensemble knowledge: (m_p, C) header + row-major f64 logits, base then
// personalized; lets a saved run onboard new clients later
inline void write_knowledge(std::ostream& os, const EnsembleKnowledge& k) {
  detail::write_magic(os, "FTEK");
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint64_t>(os, k.f_base.shape()[0]);
  detail::write_pod<std::uint64_t>(os, k.f_base.shape()[1]);
  detail::write_doubles(os, k.f_base.values());
  detail::write_doubles(os, k.f_per.values());
}

inline EnsembleKnowledge read_knowledge(std::istream& is) {
  detail::expect_magic(is, "FTEK", "knowledge");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1) throw SerializeError("knowledge: unsupported version");
  const auto m_p = detail::read_pod<std::uint64_t>(is);
  const auto classes = detail::read_pod<std::uint64_t>(is);
  EnsembleKnowledge k;
  k.f_base = Tensor({static_cast<std::size_t>(m_p), static_cast<std::size_t>(classes)},
                    detail::read_doubles(is, m_p * classes));
  k.f_per = Tensor({static_cast<std::size_t>(m_p), static_cast<std::size_t>(classes)},
                   detail::read_doubles(is, m_p * classes));
  k.validate(m_p, classes);
  return k;
}

// file helpers

template <typename T, typename WriteFn>
void save_binary(const std::string& path, const T& value, WriteFn write_fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw SerializeError("cannot open " + path + " for writing");
  write_fn(os, value);
  if (!os) throw SerializeError("write failed: " + path);
}

template <typename ReadFn>
auto load_binary(const std::string& path, ReadFn read_fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SerializeError("cannot open " + path);
  return read_fn(is);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  save_binary(path, c, [](std::ostream& os, const Checkpoint& v) { write_checkpoint(os, v); });
}
inline Checkpoint load_checkpoint(const std::string& path) {
  return load_binary(path, [](std::istream& is) { return read_checkpoint(is); });
}
inline void save_dataset(const std::string& path, const LabeledDataset& ds) {
  save_binary(path, ds, [](std::ostream& os, const LabeledDataset& v) { write_dataset(os, v); });
}
inline LabeledDataset load_dataset(const std::string& path) {
  return load_binary(path, [](std::istream& is) { return read_dataset(is); });
}
inline void save_knowledge(const std::string& path, const EnsembleKnowledge& k) {
  save_binary(path, k,
              [](std::ostream& os, const EnsembleKnowledge& v) { write_knowledge(os, v); });
}
inline EnsembleKnowledge load_knowledge(const std::string& path) {
  return load_binary(path, [](std::istream& is) { return read_knowledge(is); });
}

}  // namespace fedtta
