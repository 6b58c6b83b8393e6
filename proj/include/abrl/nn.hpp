#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "abrl/rng.hpp"

namespace abrl {

namespace detail {

inline void write_bytes_le(std::ostream& out, std::uint64_t v, int nbytes) {
  char buf[8];
  for (int i = 0; i < nbytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, nbytes);
}

inline std::uint64_t read_bytes_le(std::istream& in, int nbytes) {
  char buf[8];
  in.read(buf, nbytes);
  if (!in) throw std::runtime_error("checkpoint: unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

inline void write_f64_le(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_bytes_le(out, bits, 8);
}

inline double read_f64_le(std::istream& in) {
  const std::uint64_t bits = read_bytes_le(in, 8);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

/// Scratch space for one forward pass so backward() can reuse the
/// intermediate activations.  Reusable across calls to avoid churn.
struct FwdCache {
  std::vector<std::vector<double>> pre;   // pre-activation per layer
  std::vector<std::vector<double>> post;  // post[0] = input, post[l+1] = layer l output
};

/// Fully-connected net: affine layers with ReLU on hidden layers and
/// identity on the output (ReLU everywhere when relu_output is set, for use
/// as a shared trunk).  Parameters live in one flat vector, per layer
/// weights row-major (out x in) followed by biases — the same order as the
/// binary checkpoint format.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<int> dims, bool relu_output = false)
      : dims_(std::move(dims)), relu_output_(relu_output) {
    if (dims_.size() < 2) throw std::invalid_argument("mlp: need at least 2 dims");
    for (int d : dims_)
      if (d <= 0) throw std::invalid_argument("mlp: dims must be positive");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      w_off_.push_back(total);
      total += static_cast<std::size_t>(dims_[l + 1]) * dims_[l];
      b_off_.push_back(total);
      total += static_cast<std::size_t>(dims_[l + 1]);
    }
    params_.assign(total, 0.0);
  }

  /// He-uniform weights (+-sqrt(6/fan_in)), zero biases; deterministic in
  /// the seed with a fixed fill order.
  static Mlp he_init(std::vector<int> dims, std::uint64_t seed,
                     bool relu_output = false) {
    Mlp net(std::move(dims), relu_output);
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < net.dims_.size(); ++l) {
      const double limit = std::sqrt(6.0 / net.dims_[l]);
      double* w = net.params_.data() + net.w_off_[l];
      const std::size_t count =
          static_cast<std::size_t>(net.dims_[l + 1]) * net.dims_[l];
      for (std::size_t i = 0; i < count; ++i) w[i] = rng.uniform(-limit, limit);
    }
    return net;
  }

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  std::size_t layer_count() const { return dims_.size() - 1; }
  bool relu_output() const { return relu_output_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  double weight(std::size_t layer, int row, int col) const {
    return params_[w_off_[layer] + static_cast<std::size_t>(row) * dims_[layer] + col];
  }
  double& weight(std::size_t layer, int row, int col) {
    return params_[w_off_[layer] + static_cast<std::size_t>(row) * dims_[layer] + col];
  }
  double bias(std::size_t layer, int row) const {
    return params_[b_off_[layer] + row];
  }
  double& bias(std::size_t layer, int row) {
    return params_[b_off_[layer] + row];
  }

  /// Forward pass caching every intermediate; returns the output activation.
  const std::vector<double>& forward_cached(std::span<const double> x,
                                            FwdCache& cache) const {
    if (static_cast<int>(x.size()) != dims_.front())
      throw std::invalid_argument("mlp: input size mismatch");
    const std::size_t L = layer_count();
    cache.pre.resize(L);
    cache.post.resize(L + 1);
    cache.post[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < L; ++l) {
      const int in = dims_[l], out = dims_[l + 1];
      const double* w = params_.data() + w_off_[l];
      const double* b = params_.data() + b_off_[l];
      const std::vector<double>& a = cache.post[l];
      cache.pre[l].resize(out);
      cache.post[l + 1].resize(out);
      const bool relu = (l + 1 < L) || relu_output_;
      for (int r = 0; r < out; ++r) {
        double z = b[r];
        const double* wr = w + static_cast<std::size_t>(r) * in;
        for (int c = 0; c < in; ++c) z += wr[c] * a[c];
        cache.pre[l][r] = z;
        cache.post[l + 1][r] = relu ? (z > 0.0 ? z : 0.0) : z;
      }
    }
    return cache.post[L];
  }

  std::vector<double> forward(std::span<const double> x) const {
    FwdCache cache;
    return forward_cached(x, cache);
  }

  /// Exact reverse-mode gradients for the pass recorded in `cache`.
  /// Accumulates (+=) into `grads` (size = param_count); writes the gradient
  /// with respect to the input into `input_grad` when non-null, so chained
  /// nets (heads feeding a trunk) can propagate.  ReLU gradient at exactly
  /// zero is zero.
  void backward(const FwdCache& cache, std::span<const double> output_grad,
                std::span<double> grads,
                std::vector<double>* input_grad = nullptr) const {
    const std::size_t L = layer_count();
    if (static_cast<int>(output_grad.size()) != dims_.back())
      throw std::invalid_argument("mlp: output grad size mismatch");
    if (grads.size() != params_.size())
      throw std::invalid_argument("mlp: grads size mismatch");

    std::vector<double> da(output_grad.begin(), output_grad.end());
    std::vector<double> dz, da_prev;
    for (std::size_t l = L; l-- > 0;) {
      const int in = dims_[l], out = dims_[l + 1];
      const bool relu = (l + 1 < L) || relu_output_;
      dz.resize(out);
      for (int r = 0; r < out; ++r)
        dz[r] = relu ? (cache.pre[l][r] > 0.0 ? da[r] : 0.0) : da[r];

      const std::vector<double>& a = cache.post[l];
      double* gw = grads.data() + w_off_[l];
      double* gb = grads.data() + b_off_[l];
      for (int r = 0; r < out; ++r) {
        const double d = dz[r];
        if (d != 0.0) {
          double* gwr = gw + static_cast<std::size_t>(r) * in;
          for (int c = 0; c < in; ++c) gwr[c] += d * a[c];
        }
        gb[r] += d;
      }

      if (l > 0 || input_grad != nullptr) {
        da_prev.assign(in, 0.0);
        const double* w = params_.data() + w_off_[l];
        for (int r = 0; r < out; ++r) {
          const double d = dz[r];
          if (d == 0.0) continue;
          const double* wr = w + static_cast<std::size_t>(r) * in;
          for (int c = 0; c < in; ++c) da_prev[c] += wr[c] * d;
        }
        da.swap(da_prev);
      }
    }
    if (input_grad != nullptr) *input_grad = da;
  }

  /// Binary checkpoint block: magic, u32 version, u32 ndims, i32 dims
  /// (little-endian), then all parameters as little-endian 64-bit floats in
  /// layer order, weights row-major then biases.  Bit-exact round-trip.
  static constexpr char kMagic[8] = {'A', 'B', 'R', 'L', 'M', 'L', 'P', '1'};

  void save(std::ostream& out) const {
    out.write(kMagic, 8);
    detail::write_bytes_le(out, 1, 4);  // version
    detail::write_bytes_le(out, dims_.size(), 4);
    for (int d : dims_)
      detail::write_bytes_le(out, static_cast<std::uint32_t>(d), 4);
    for (double p : params_) detail::write_f64_le(out, p);
    if (!out) throw std::runtime_error("checkpoint: write failed");
  }

  static Mlp load(std::istream& in, bool relu_output = false) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
      throw std::runtime_error("checkpoint: bad magic");
    const auto version = detail::read_bytes_le(in, 4);
    if (version != 1)
      throw std::runtime_error("checkpoint: unsupported version " +
                               std::to_string(version));
    const auto ndims = detail::read_bytes_le(in, 4);
    if (ndims < 2 || ndims > 64)
      throw std::runtime_error("checkpoint: implausible layer count");
    std::vector<int> dims(ndims);
    for (auto& d : dims)
      d = static_cast<std::int32_t>(detail::read_bytes_le(in, 4));
    Mlp net(dims, relu_output);
    for (double& p : net.params_) p = detail::read_f64_le(in);
    return net;
  }

 private:
  std::vector<int> dims_;
  bool relu_output_ = false;
  std::vector<double> params_;
  std::vector<std::size_t> w_off_, b_off_;
};

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a flat parameter space, optionally split into
/// chunks (trunk/heads) updated within one logical step.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, AdamParams hp) : hp_(hp), m_(n, 0.0), v_(n, 0.0) {}

  const AdamParams& hyper() const { return hp_; }
  std::uint64_t step_count() const { return t_; }

  void begin_step() { ++t_; }

  /// Update one chunk of parameters living at `offset` in the flat space.
  void apply(std::size_t offset, std::span<double> params,
             std::span<const double> grads) {
    if (params.size() != grads.size() || offset + params.size() > m_.size())
      throw std::invalid_argument("adam: shape mismatch");
    if (t_ == 0) throw std::logic_error("adam: apply before begin_step");
    const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      double& m = m_[offset + i];
      double& v = v_[offset + i];
      const double g = grads[i];
      m = hp_.beta1 * m + (1.0 - hp_.beta1) * g;
      v = hp_.beta2 * v + (1.0 - hp_.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      params[i] -= hp_.lr * mhat / (std::sqrt(vhat) + hp_.eps);
    }
  }

 private:
  AdamParams hp_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

/// Single-chunk convenience: one whole optimizer step over `params`.
inline void adam_step(Adam& state, std::span<double> params,
                      std::span<const double> grads) {
  state.begin_step();
  state.apply(0, params, grads);
}

}  // namespace abrl
