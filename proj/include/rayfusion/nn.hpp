#pragma once

// Named parameters, MLPs, the AdamW optimizer and the checkpoint codec.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rayfusion/binio.hpp"
#include "rayfusion/rng.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Ordered, name-unique set of trainable leaves. Initialization draws from
/// an RNG seeded by (store seed, parameter name), so a parameter's initial
/// value does not depend on registration order.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  /// Uniform in +-bound.
  Tensor add_uniform(const std::string& name, Shape shape, double bound) {
    Rng rng(named_seed(seed_, name));
    std::vector<double> v(detail::numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return insert(name, std::move(shape), std::move(v));
  }

  Tensor add_constant(const std::string& name, Shape shape, double value) {
    std::vector<double> v(detail::numel(shape), value);
    return insert(name, std::move(shape), std::move(v));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
  }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::uint64_t seed() const { return seed_; }

 private:
  Tensor insert(const std::string& name, Shape shape, std::vector<double> v) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back({name, Tensor::from(std::move(shape), std::move(v), true)});
    return params_.back().tensor;
  }

  std::uint64_t seed_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Activation { relu, none };

struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation activation = Activation::relu;
  bool final_layernorm = false;

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec needs at least input and output widths");
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("MlpSpec widths must be positive");
  }
};

/// Affine layers with the spec's activation between them. Holds handles to
/// its parameters inside a ParamStore.
class Mlp {
 public:
  Mlp() = default;

  Mlp(ParamStore& store, const std::string& prefix, MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t i = 0; i + 1 < spec_.widths.size(); ++i) {
      const auto fan_in = spec_.widths[i];
      const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      const std::string l = prefix + ".l" + std::to_string(i);
      weights_.push_back(store.add_uniform(l + ".w", {fan_in, spec_.widths[i + 1]}, bound));
      biases_.push_back(store.add_uniform(l + ".b", {spec_.widths[i + 1]}, bound));
    }
    if (spec_.final_layernorm) {
      ln_gain_ = store.add_constant(prefix + ".ln.g", {spec_.widths.back()}, 1.0);
      ln_bias_ = store.add_constant(prefix + ".ln.b", {spec_.widths.back()}, 0.0);
    }
  }

  Tensor forward(const Tensor& x) const {
    if (x.last() != spec_.widths.front())
      throw DimensionError("mlp: input width " + std::to_string(x.last()) + " but spec expects " +
                           std::to_string(spec_.widths.front()));
    Tensor h = x;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      h = linear(h, weights_[i], biases_[i]);
      if (i + 1 < weights_.size() && spec_.activation == Activation::relu) h = relu(h);
    }
    if (spec_.final_layernorm) h = layernorm(h, ln_gain_, ln_bias_);
    return h;
  }

  const MlpSpec& spec() const { return spec_; }
  const std::vector<Tensor>& weights() const { return weights_; }
  const std::vector<Tensor>& biases() const { return biases_; }

 private:
  MlpSpec spec_;
  std::vector<Tensor> weights_, biases_;
  Tensor ln_gain_, ln_bias_;
};

/// Free-function form: looks the layers up by prefix in `params`.
inline Tensor mlp_forward(const MlpSpec& spec, const ParamStore& params, const std::string& prefix,
                          const Tensor& x) {
  spec.validate();
  if (x.last() != spec.widths.front())
    throw DimensionError("mlp: input width " + std::to_string(x.last()) + " but spec expects " +
                         std::to_string(spec.widths.front()));
  Tensor h = x;
  const std::size_t layers = spec.widths.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string l = prefix + ".l" + std::to_string(i);
    const Tensor& w = params.get(l + ".w");
    if (w.dim(0) != spec.widths[i] || w.dim(1) != spec.widths[i + 1])
      throw DimensionError("mlp: parameter " + l + ".w has shape " + shape_str(w.shape()));
    h = linear(h, w, params.get(l + ".b"));
    if (i + 1 < layers && spec.activation == Activation::relu) h = relu(h);
  }
  if (spec.final_layernorm) h = layernorm(h, params.get(prefix + ".ln.g"), params.get(prefix + ".ln.b"));
  return h;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Adaptive moments with decoupled weight decay. Moments and step counts
/// are kept per parameter name; parameters without a gradient are skipped
/// and counted.
class AdamW {
 public:
  struct Slot {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& store, double lr) {
    for (auto& p : store.params()) {
      if (!p.tensor.has_grad()) {
        ++skipped_;
        continue;
      }
      auto& slot = slots_[p.name];
      const std::size_t n = p.tensor.numel();
      if (slot.m.size() != n) {
        slot.m.assign(n, 0.0);
        slot.v.assign(n, 0.0);
      }
      ++slot.t;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(slot.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(slot.t));
      auto w = p.tensor.mutable_data();
      const auto g = p.tensor.grad();
      for (std::size_t i = 0; i < n; ++i) {
        w[i] -= lr * cfg_.weight_decay * w[i];
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g[i];
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::size_t skipped() const { return skipped_; }
  const AdamWConfig& config() const { return cfg_; }
  std::unordered_map<std::string, Slot>& slots() { return slots_; }
  const std::unordered_map<std::string, Slot>& slots() const { return slots_; }

 private:
  AdamWConfig cfg_;
  std::unordered_map<std::string, Slot> slots_;
  std::size_t skipped_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "RFCK", u32 version, u64 record count, then per record
// u32 name length, name bytes, u32 rank, u64 extents, f64 values.

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "RFCK";

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointRecord>& records) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put_u32(kCheckpointVersion);
  w.put_u64(records.size());
  for (const auto& r : records) {
    if (detail::numel(r.shape) != r.values.size())
      throw DimensionError("checkpoint record '" + r.name + "' shape/value mismatch");
    w.put_u32(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(r.name);
    w.put_u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) w.put_u64(e);
    for (double v : r.values) w.put_f64(v);
  }
  return w.take();
}

inline std::vector<CheckpointRecord> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.get_string(4) != kCheckpointMagic) throw BadMagicError("not a checkpoint (bad magic)");
  if (const auto v = r.get_u32(); v != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(v));
  const auto count = r.get_u64();
  std::vector<CheckpointRecord> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.get_string(r.get_u32());
    const auto rank = r.get_u32();
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.get_u64());
    const std::size_t n = detail::numel(rec.shape);
    if (r.remaining() / 8 < n) throw TruncationError("checkpoint truncated in record '" + rec.name + "'");
    rec.values.resize(n);
    for (auto& v : rec.values) v = r.get_f64();
    out.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after checkpoint records");
  return out;
}

inline std::vector<CheckpointRecord> param_records(const ParamStore& store) {
  std::vector<CheckpointRecord> out;
  for (const auto& p : store.params())
    out.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  return out;
}

/// Copies matching records into the store; every parameter must be present.
inline void load_params(ParamStore& store, const std::vector<CheckpointRecord>& records) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (auto& p : store.params()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ParseError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape())
      throw DimensionError("checkpoint shape for '" + p.name + "' is " + shape_str(it->second->shape) +
                           ", model expects " + shape_str(p.tensor.shape()));
    std::copy(it->second->values.begin(), it->second->values.end(), p.tensor.mutable_data().begin());
  }
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace rayfusion
