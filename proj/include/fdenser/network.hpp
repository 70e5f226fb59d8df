#pragma once

// Differentiable networks compiled from phenotypes.
//
// Activations are stored as row-major (batch x features) matrices; spatial
// tensors use HWC order inside a row, so flattening is free and channel
// concatenation interleaves per pixel.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdenser/genotype.hpp"
#include "fdenser/rng.hpp"
#include "fdenser/util.hpp"

namespace fdenser {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class InvalidArchitecture : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  int height = 1;
  int width = 1;
  int channels = 1;
  bool spatial = false;

  static Shape flat(int n) { return {1, 1, n, false}; }
  static Shape image(int h, int w, int c) { return {h, w, c, true}; }

  int size() const { return height * width * channels; }
  int pixels() const { return height * width; }
  Shape flattened() const { return flat(size()); }

  std::string str() const {
    if (!spatial) return "[" + std::to_string(channels) + "]";
    return "[" + std::to_string(height) + "," + std::to_string(width) + "," + std::to_string(channels) + "]";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

enum class LayerKind { dense, dropout, conv2d, pool_max, pool_avg, batch_norm, flatten };
enum class Activation { linear, relu, sigmoid, softmax };
enum class Padding { same, valid };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;

/// Output length of a sliding window; 0 when the window does not fit.
inline int window_output_size(int n, int kernel, int stride, Padding padding) {
  if (padding == Padding::same) return (n + stride - 1) / stride;
  if (n < kernel) return 0;
  return (n - kernel) / stride + 1;
}

/// Leading padding for "same" windows; odd overhang goes to the bottom/right.
inline int same_padding_before(int n, int kernel, int stride) {
  const int out = window_output_size(n, kernel, stride, Padding::same);
  const int total = std::max((out - 1) * stride + kernel - n, 0);
  return total / 2;
}

enum class MergeKind { none, channels, columns };

template <class S>
struct LayerInstance {
  LayerKind kind = LayerKind::dense;
  std::vector<int> inputs;  // model layer indices, -1 is the network input
  MergeKind merge = MergeKind::none;
  std::vector<int> input_widths;  // channels (channel merge) or columns (column merge) per input
  Shape input_shape;
  Shape output_shape;

  // hyperparameters
  int units = 0;
  bool bias = true;
  Activation activation = Activation::linear;
  double rate = 0.0;
  int filters = 0;
  int kernel = 1;
  int stride = 1;
  Padding padding = Padding::valid;
  int pad_top = 0;
  int pad_left = 0;

  std::vector<Matrix<S>> params;   // dense/conv: W[, b]; batch_norm: gamma, beta
  std::vector<Matrix<S>> grads;    // aligned with params
  std::vector<Matrix<S>> buffers;  // batch_norm: running mean, running variance

  // forward caches
  Matrix<S> merged;  // concatenated input, multi-input layers only
  Matrix<S> mask;    // dropout
  Matrix<S> xhat;    // batch_norm
  Matrix<S> inv_std;
  std::vector<int> argmax;  // pool_max
  bool trained_forward = false;
};

template <class S>
class Network {
 public:
  Network() = default;

  const std::vector<LayerInstance<S>>& layers() const { return layers_; }
  std::vector<LayerInstance<S>>& layers() { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  int num_classes() const { return num_classes_; }
  const std::vector<int>& phenotype_layer_map() const { return phenotype_to_model_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      for (const auto& p : l.params) n += static_cast<std::size_t>(p.size());
    return n;
  }

  std::vector<Matrix<S>*> parameters() {
    std::vector<Matrix<S>*> out;
    for (auto& l : layers_)
      for (auto& p : l.params) out.push_back(&p);
    return out;
  }

  std::vector<Matrix<S>*> gradients() {
    std::vector<Matrix<S>*> out;
    for (auto& l : layers_)
      for (auto& g : l.grads) out.push_back(&g);
    return out;
  }

  /// Parameters followed by buffers, layer by layer.
  std::vector<Matrix<S>> state() const {
    std::vector<Matrix<S>> out;
    for (const auto& l : layers_) {
      for (const auto& p : l.params) out.push_back(p);
      for (const auto& b : l.buffers) out.push_back(b);
    }
    return out;
  }

  void load_state(const std::vector<Matrix<S>>& s) {
    std::size_t k = 0;
    for (auto& l : layers_) {
      for (auto* group : {&l.params, &l.buffers})
        for (auto& p : *group) {
          if (k >= s.size() || s[k].rows() != p.rows() || s[k].cols() != p.cols())
            throw std::invalid_argument("state does not match the network");
          p = s[k++];
        }
    }
    if (k != s.size()) throw std::invalid_argument("state does not match the network");
  }

  Matrix<S> forward(const Matrix<S>& x, bool training, Rng& rng) {
    if (x.cols() != input_shape_.size())
      throw std::invalid_argument("batch has " + std::to_string(x.cols()) + " features, network expects " +
                                  std::to_string(input_shape_.size()));
    input_ = x;
    outputs_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) forward_layer(static_cast<int>(i), training, rng);
    has_forward_ = true;
    return outputs_.back();
  }

  /// Backpropagate dL/d(output); gradients overwrite previous ones.
  void backward(const Matrix<S>& grad_output) { backward_impl(grad_output, false); }

  /// Backpropagate dL/d(logits) of the final softmax layer (skips the softmax Jacobian).
  void backward_logits(const Matrix<S>& grad_logits) { backward_impl(grad_logits, true); }

  const Matrix<S>& input_gradient() const { return input_grad_; }
  /// Activation of model layer `idx` from the last forward pass.
  const Matrix<S>& output(std::size_t idx) const { return outputs_.at(idx); }

  template <class T>
  friend Network<T> compile(const Phenotype&, Shape, int, Rng&);

 private:
  const Matrix<S>& source(int idx) const { return idx < 0 ? input_ : outputs_[static_cast<std::size_t>(idx)]; }
  Matrix<S>& source_grad(int idx) { return idx < 0 ? input_grad_ : out_grads_[static_cast<std::size_t>(idx)]; }
  Shape source_shape(int idx) const { return idx < 0 ? input_shape_ : layers_[static_cast<std::size_t>(idx)].output_shape; }

  const Matrix<S>& layer_input(const LayerInstance<S>& l) const {
    return l.merge == MergeKind::none ? source(l.inputs.front()) : l.merged;
  }

  void merge_inputs(LayerInstance<S>& l) {
    if (l.merge == MergeKind::none) return;
    const Eigen::Index n = source(l.inputs.front()).rows();
    l.merged.resize(n, l.input_shape.size());
    if (l.merge == MergeKind::columns) {
      Eigen::Index col = 0;
      for (std::size_t k = 0; k < l.inputs.size(); ++k) {
        l.merged.middleCols(col, l.input_widths[k]) = source(l.inputs[k]);
        col += l.input_widths[k];
      }
      return;
    }
    const int pixels = l.input_shape.pixels();
    const int total = l.input_shape.channels;
    int offset = 0;
    for (std::size_t k = 0; k < l.inputs.size(); ++k) {
      const auto& src = source(l.inputs[k]);
      const int c = l.input_widths[k];
      for (Eigen::Index r = 0; r < n; ++r)
        for (int p = 0; p < pixels; ++p)
          for (int j = 0; j < c; ++j) l.merged(r, p * total + offset + j) = src(r, p * c + j);
      offset += c;
    }
  }

  void split_gradient(const LayerInstance<S>& l, const Matrix<S>& g) {
    if (l.merge == MergeKind::none) {
      source_grad(l.inputs.front()) += g;
      return;
    }
    if (l.merge == MergeKind::columns) {
      Eigen::Index col = 0;
      for (std::size_t k = 0; k < l.inputs.size(); ++k) {
        source_grad(l.inputs[k]) += g.middleCols(col, l.input_widths[k]);
        col += l.input_widths[k];
      }
      return;
    }
    const int pixels = l.input_shape.pixels();
    const int total = l.input_shape.channels;
    int offset = 0;
    for (std::size_t k = 0; k < l.inputs.size(); ++k) {
      auto& dst = source_grad(l.inputs[k]);
      const int c = l.input_widths[k];
      for (Eigen::Index r = 0; r < g.rows(); ++r)
        for (int p = 0; p < pixels; ++p)
          for (int j = 0; j < c; ++j) dst(r, p * c + j) += g(r, p * total + offset + j);
      offset += c;
    }
  }

  static void activate(Matrix<S>& z, Activation a) {
    switch (a) {
      case Activation::linear: break;
      case Activation::relu: z = z.cwiseMax(S(0)); break;
      case Activation::sigmoid: z = (S(1) + (-z.array()).exp()).inverse().matrix(); break;
      case Activation::softmax:
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
          auto row = z.row(r);
          row.array() -= row.maxCoeff();
          row = row.array().exp().matrix();
          row /= row.sum();
        }
        break;
    }
  }

  /// dL/dz given dL/da and the activation output a.
  static Matrix<S> activation_backward(const Matrix<S>& grad, const Matrix<S>& a, Activation act) {
    switch (act) {
      case Activation::linear: return grad;
      case Activation::relu: return (a.array() > S(0)).select(grad.array(), S(0)).matrix();
      case Activation::sigmoid: return (grad.array() * a.array() * (S(1) - a.array())).matrix();
      case Activation::softmax: {
        Matrix<S> out = grad;
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
          const S dot = grad.row(r).dot(a.row(r));
          out.row(r) = (a.row(r).array() * (grad.row(r).array() - dot)).matrix();
        }
        return out;
      }
    }
    return grad;
  }

  // im2col for one sample: (out_pixels x kernel*kernel*channels)
  void patches(const LayerInstance<S>& l, const S* x, Matrix<S>& P) const {
    const auto& in = l.input_shape;
    const auto& out = l.output_shape;
    const int k = l.kernel, c = in.channels;
    P.setZero(out.pixels(), k * k * c);
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox) {
        const int row = oy * out.width + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * l.stride - l.pad_top + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * l.stride - l.pad_left + kx;
            if (ix < 0 || ix >= in.width) continue;
            const S* px = x + (iy * in.width + ix) * c;
            S* dst = P.data() + row * P.cols() + (ky * k + kx) * c;
            std::copy(px, px + c, dst);
          }
        }
      }
  }

  void col2im(const LayerInstance<S>& l, const Matrix<S>& dP, S* dx) const {
    const auto& in = l.input_shape;
    const auto& out = l.output_shape;
    const int k = l.kernel, c = in.channels;
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox) {
        const int row = oy * out.width + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * l.stride - l.pad_top + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * l.stride - l.pad_left + kx;
            if (ix < 0 || ix >= in.width) continue;
            S* px = dx + (iy * in.width + ix) * c;
            const S* src = dP.data() + row * dP.cols() + (ky * k + kx) * c;
            for (int j = 0; j < c; ++j) px[j] += src[j];
          }
        }
      }
  }

  void forward_layer(int i, bool training, Rng& rng) {
    auto& l = layers_[static_cast<std::size_t>(i)];
    merge_inputs(l);
    const Matrix<S>& x = layer_input(l);
    Matrix<S>& y = outputs_[static_cast<std::size_t>(i)];
    const Eigen::Index n = x.rows();
    l.trained_forward = training;

    switch (l.kind) {
      case LayerKind::flatten:
        y = x;
        break;

      case LayerKind::dense:
        y.noalias() = x * l.params[0];
        if (l.bias) y.rowwise() += l.params[1].row(0);
        activate(y, l.activation);
        break;

      case LayerKind::dropout:
        if (training && l.rate > 0.0) {
          const S keep = S(1.0 / (1.0 - l.rate));
          l.mask.resize(x.rows(), x.cols());
          for (Eigen::Index k = 0; k < l.mask.size(); ++k) l.mask.data()[k] = rng.uniform01() >= l.rate ? keep : S(0);
          y = x.cwiseProduct(l.mask);
        } else {
          l.mask.resize(0, 0);
          y = x;
        }
        break;

      case LayerKind::conv2d: {
        const auto& out = l.output_shape;
        y.resize(n, out.size());
        Matrix<S> P;
        for (Eigen::Index r = 0; r < n; ++r) {
          patches(l, x.data() + r * x.cols(), P);
          Eigen::Map<Matrix<S>> yr(y.data() + r * y.cols(), out.pixels(), out.channels);
          yr.noalias() = P * l.params[0];
          if (l.bias) yr.rowwise() += l.params[1].row(0);
        }
        activate(y, l.activation);
        break;
      }

      case LayerKind::pool_max:
      case LayerKind::pool_avg: {
        const auto& in = l.input_shape;
        const auto& out = l.output_shape;
        const int c = in.channels;
        const bool is_max = l.kind == LayerKind::pool_max;
        y.resize(n, out.size());
        if (is_max) l.argmax.assign(static_cast<std::size_t>(n * out.size()), -1);
        for (Eigen::Index r = 0; r < n; ++r) {
          const S* xr = x.data() + r * x.cols();
          S* yr = y.data() + r * y.cols();
          for (int oy = 0; oy < out.height; ++oy)
            for (int ox = 0; ox < out.width; ++ox)
              for (int ch = 0; ch < c; ++ch) {
                S best = -std::numeric_limits<S>::infinity();
                int best_idx = -1;
                S sum = 0;
                int count = 0;
                for (int ky = 0; ky < l.kernel; ++ky) {
                  const int iy = oy * l.stride - l.pad_top + ky;
                  if (iy < 0 || iy >= in.height) continue;
                  for (int kx = 0; kx < l.kernel; ++kx) {
                    const int ix = ox * l.stride - l.pad_left + kx;
                    if (ix < 0 || ix >= in.width) continue;
                    const int idx = (iy * in.width + ix) * c + ch;
                    if (xr[idx] > best || best_idx < 0) {
                      best = xr[idx];
                      best_idx = idx;
                    }
                    sum += xr[idx];
                    ++count;
                  }
                }
                const int o = (oy * out.width + ox) * c + ch;
                if (is_max) {
                  yr[o] = best;
                  l.argmax[static_cast<std::size_t>(r * out.size() + o)] = best_idx;
                } else {
                  yr[o] = count > 0 ? sum / S(count) : S(0);
                }
              }
        }
        break;
      }

      case LayerKind::batch_norm: {
        const int c = l.input_shape.spatial ? l.input_shape.channels : l.input_shape.size();
        const Eigen::Index m = x.size() / c;
        Eigen::Map<const Matrix<S>> xv(x.data(), m, c);
        y.resize(x.rows(), x.cols());
        Eigen::Map<Matrix<S>> yv(y.data(), m, c);
        auto& gamma = l.params[0];
        auto& beta = l.params[1];
        auto& running_mean = l.buffers[0];
        auto& running_var = l.buffers[1];
        Matrix<S> mean, var;
        if (training) {
          mean = xv.colwise().mean();
          var = (xv.rowwise() - mean.row(0)).array().square().colwise().mean().matrix();
          const S mom = S(kBatchNormMomentum);
          running_mean = mom * running_mean + (S(1) - mom) * mean;
          running_var = mom * running_var + (S(1) - mom) * var;
        } else {
          mean = running_mean;
          var = running_var;
        }
        l.inv_std = (var.array() + S(kBatchNormEpsilon)).rsqrt().matrix();
        l.xhat.resize(m, c);
        l.xhat = ((xv.rowwise() - mean.row(0)).array().rowwise() * l.inv_std.row(0).array()).matrix();
        yv = ((l.xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array()).matrix();
        break;
      }
    }
  }

  void backward_layer(int i, const Matrix<S>& dy_in, bool logits) {
    auto& l = layers_[static_cast<std::size_t>(i)];
    const Matrix<S>& x = layer_input(l);
    const Matrix<S>& y = outputs_[static_cast<std::size_t>(i)];
    const Eigen::Index n = x.rows();
    Matrix<S> dx;

    switch (l.kind) {
      case LayerKind::flatten:
        dx = dy_in;
        break;

      case LayerKind::dense: {
        const Matrix<S> dz = logits ? dy_in : activation_backward(dy_in, y, l.activation);
        l.grads[0].noalias() = x.transpose() * dz;
        if (l.bias) l.grads[1] = dz.colwise().sum();
        dx.noalias() = dz * l.params[0].transpose();
        break;
      }

      case LayerKind::dropout:
        dx = l.mask.size() ? Matrix<S>(dy_in.cwiseProduct(l.mask)) : dy_in;
        break;

      case LayerKind::conv2d: {
        const Matrix<S> dz = activation_backward(dy_in, y, l.activation);
        const auto& out = l.output_shape;
        dx.setZero(n, x.cols());
        l.grads[0].setZero();
        if (l.bias) l.grads[1].setZero();
        Matrix<S> P, dP;
        for (Eigen::Index r = 0; r < n; ++r) {
          patches(l, x.data() + r * x.cols(), P);
          Eigen::Map<const Matrix<S>> dzr(dz.data() + r * dz.cols(), out.pixels(), out.channels);
          l.grads[0].noalias() += P.transpose() * dzr;
          if (l.bias) l.grads[1] += dzr.colwise().sum();
          dP.noalias() = dzr * l.params[0].transpose();
          col2im(l, dP, dx.data() + r * dx.cols());
        }
        break;
      }

      case LayerKind::pool_max:
      case LayerKind::pool_avg: {
        const auto& in = l.input_shape;
        const auto& out = l.output_shape;
        const int c = in.channels;
        dx.setZero(n, x.cols());
        for (Eigen::Index r = 0; r < n; ++r) {
          const S* dyr = dy_in.data() + r * dy_in.cols();
          S* dxr = dx.data() + r * dx.cols();
          if (l.kind == LayerKind::pool_max) {
            for (int o = 0; o < out.size(); ++o) {
              const int idx = l.argmax[static_cast<std::size_t>(r * out.size() + o)];
              if (idx >= 0) dxr[idx] += dyr[o];
            }
            continue;
          }
          for (int oy = 0; oy < out.height; ++oy)
            for (int ox = 0; ox < out.width; ++ox) {
              int y0 = oy * l.stride - l.pad_top, x0 = ox * l.stride - l.pad_left;
              int ylo = std::max(y0, 0), yhi = std::min(y0 + l.kernel, in.height);
              int xlo = std::max(x0, 0), xhi = std::min(x0 + l.kernel, in.width);
              const int count = std::max(0, yhi - ylo) * std::max(0, xhi - xlo);
              if (count == 0) continue;
              for (int ch = 0; ch < c; ++ch) {
                const S g = dyr[(oy * out.width + ox) * c + ch] / S(count);
                for (int iy = ylo; iy < yhi; ++iy)
                  for (int ix = xlo; ix < xhi; ++ix) dxr[(iy * in.width + ix) * c + ch] += g;
              }
            }
        }
        break;
      }

      case LayerKind::batch_norm: {
        const int c = static_cast<int>(l.xhat.cols());
        const Eigen::Index m = l.xhat.rows();
        Eigen::Map<const Matrix<S>> dyv(dy_in.data(), m, c);
        const auto& gamma = l.params[0];
        l.grads[0] = (dyv.array() * l.xhat.array()).colwise().sum().matrix();
        l.grads[1] = dyv.colwise().sum();
        Matrix<S> dxhat = (dyv.array().rowwise() * gamma.row(0).array()).matrix();
        dx.resize(dy_in.rows(), dy_in.cols());
        Eigen::Map<Matrix<S>> dxv(dx.data(), m, c);
        if (l.trained_forward) {
          const Matrix<S> sum_dxhat = dxhat.colwise().sum();
          const Matrix<S> sum_dxhat_xhat = (dxhat.array() * l.xhat.array()).colwise().sum().matrix();
          const S inv_m = S(1) / S(m);
          dxv = ((dxhat.array() * S(m)).rowwise() - sum_dxhat.row(0).array() -
                 (l.xhat.array().rowwise() * sum_dxhat_xhat.row(0).array()))
                    .matrix();
          dxv = (dxv.array().rowwise() * (l.inv_std.row(0).array() * inv_m)).matrix();
        } else {
          dxv = (dxhat.array().rowwise() * l.inv_std.row(0).array()).matrix();
        }
        break;
      }
    }
    split_gradient(l, dx);
  }

  void backward_impl(const Matrix<S>& grad, bool logits) {
    if (!has_forward_) throw std::logic_error("backward called without a cached forward pass");
    const auto& last = outputs_.back();
    if (grad.rows() != last.rows() || grad.cols() != last.cols()) throw std::invalid_argument("gradient shape mismatch");
    out_grads_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) out_grads_[i].setZero(outputs_[i].rows(), outputs_[i].cols());
    input_grad_.setZero(input_.rows(), input_.cols());
    for (auto& l : layers_)
      for (auto& g : l.grads) g.setZero();
    out_grads_.back() = grad;
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i)
      backward_layer(i, out_grads_[static_cast<std::size_t>(i)], logits && i == static_cast<int>(layers_.size()) - 1);
  }

  std::vector<LayerInstance<S>> layers_;
  std::vector<int> phenotype_to_model_;
  Shape input_shape_;
  int num_classes_ = 0;

  Matrix<S> input_;
  Matrix<S> input_grad_;
  std::vector<Matrix<S>> outputs_;
  std::vector<Matrix<S>> out_grads_;
  bool has_forward_ = false;
};

namespace detail {

inline const std::set<std::string>& allowed_keys(LayerKind k) {
  static const std::map<LayerKind, std::set<std::string>> keys = {
      {LayerKind::dense, {"layer", "act", "num-units", "bias"}},
      {LayerKind::dropout, {"layer", "rate"}},
      {LayerKind::conv2d, {"layer", "num-filters", "filter-shape", "stride", "padding", "act", "bias"}},
      {LayerKind::pool_max, {"layer", "kernel-size", "stride", "padding"}},
      {LayerKind::pool_avg, {"layer", "kernel-size", "stride", "padding"}},
      {LayerKind::batch_norm, {"layer"}},
  };
  return keys.at(k);
}

inline LayerKind layer_kind(const std::string& s) {
  if (s == "fc") return LayerKind::dense;
  if (s == "dropput" || s == "dropout") return LayerKind::dropout;
  if (s == "conv") return LayerKind::conv2d;
  if (s == "pool-max") return LayerKind::pool_max;
  if (s == "pool-avg") return LayerKind::pool_avg;
  if (s == "batch-norm") return LayerKind::batch_norm;
  throw InvalidArchitecture("unknown layer type '" + s + "'");
}

inline Activation activation_from(const std::string* s) {
  if (!s || *s == "linear") return Activation::linear;
  if (*s == "relu") return Activation::relu;
  if (*s == "sigmoid") return Activation::sigmoid;
  if (*s == "softmax") return Activation::softmax;
  throw InvalidArchitecture("unknown activation '" + *s + "'");
}

inline bool bool_from(const std::string* s, bool fallback) {
  if (!s) return fallback;
  if (*s == "True" || *s == "true" || *s == "1") return true;
  if (*s == "False" || *s == "false" || *s == "0") return false;
  throw InvalidArchitecture("bad boolean '" + *s + "'");
}

inline int int_attr(const AttributeMap& a, const std::string& key, std::optional<int> fallback = std::nullopt) {
  const auto* s = a.get(key);
  if (!s) {
    if (fallback) return *fallback;
    throw InvalidArchitecture("missing attribute '" + key + "'");
  }
  auto v = parse_integer(*s);
  if (!v || *v < 1) throw InvalidArchitecture("attribute '" + key + "' must be a positive integer, got '" + *s + "'");
  return static_cast<int>(*v);
}

inline Padding padding_from(const std::string* s) {
  if (!s || *s == "valid") return Padding::valid;
  if (*s == "same") return Padding::same;
  throw InvalidArchitecture("unknown padding '" + *s + "'");
}

template <class S>
void glorot(Matrix<S>& w, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = static_cast<S>(rng.uniform(-limit, limit));
}

}  // namespace detail

/// Build a trainable network. The final layer must be a softmax dense layer;
/// its width is set to `num_classes`.
template <class S>
Network<S> compile(const Phenotype& phenotype, Shape input_shape, int num_classes, Rng& rng) {
  if (phenotype.layers.empty()) throw InvalidArchitecture("phenotype has no layers");
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  Network<S> net;
  net.input_shape_ = input_shape;
  net.num_classes_ = num_classes;

  auto shape_of = [&](int model_idx) {
    return model_idx < 0 ? input_shape : net.layers_[static_cast<std::size_t>(model_idx)].output_shape;
  };

  const int count = static_cast<int>(phenotype.layers.size());
  for (int i = 0; i < count; ++i) {
    const auto& desc = phenotype.layers[static_cast<std::size_t>(i)];
    const auto& a = desc.attributes;
    const auto* type = a.get("layer");
    if (!type) throw InvalidArchitecture("layer " + std::to_string(i) + " has no 'layer' attribute");
    LayerInstance<S> l;
    l.kind = detail::layer_kind(*type);
    for (const auto& [k, v] : a.entries())
      if (!detail::allowed_keys(l.kind).count(k))
        throw InvalidArchitecture("unknown attribute '" + k + "' for layer:" + *type);

    if (desc.inputs.empty()) throw InvalidArchitecture("layer " + std::to_string(i) + " has no inputs");
    for (int src : desc.inputs) {
      if (src < -1 || src >= i) throw InvalidArchitecture("layer " + std::to_string(i) + " has invalid input " + std::to_string(src));
      l.inputs.push_back(src < 0 ? -1 : net.phenotype_to_model_[static_cast<std::size_t>(src)]);
    }

    const bool needs_spatial = l.kind == LayerKind::conv2d || l.kind == LayerKind::pool_max || l.kind == LayerKind::pool_avg;
    std::vector<Shape> shapes;
    for (int src : l.inputs) shapes.push_back(shape_of(src));
    if (shapes.size() == 1) {
      l.merge = MergeKind::none;
      l.input_shape = shapes.front();
    } else {
      const bool all_spatial = std::all_of(shapes.begin(), shapes.end(), [](const Shape& s) { return s.spatial; });
      const bool any_spatial = std::any_of(shapes.begin(), shapes.end(), [](const Shape& s) { return s.spatial; });
      if (all_spatial) {
        int channels = 0;
        for (const auto& s : shapes) {
          if (s.height != shapes.front().height || s.width != shapes.front().width)
            throw InvalidArchitecture("layer " + std::to_string(i) + ": mismatched spatial input shapes " +
                                      shapes.front().str() + " and " + s.str());
          l.input_widths.push_back(s.channels);
          channels += s.channels;
        }
        l.merge = MergeKind::channels;
        l.input_shape = Shape::image(shapes.front().height, shapes.front().width, channels);
      } else {
        if (any_spatial && needs_spatial)
          throw InvalidArchitecture("layer " + std::to_string(i) + ": cannot merge flat and spatial inputs");
        int cols = 0;
        for (const auto& s : shapes) {
          l.input_widths.push_back(s.size());
          cols += s.size();
        }
        l.merge = MergeKind::columns;
        l.input_shape = Shape::flat(cols);
      }
    }
    if (needs_spatial && !l.input_shape.spatial)
      throw InvalidArchitecture("layer " + std::to_string(i) + " (" + *type + ") needs a spatial input");

    if (l.kind == LayerKind::dense && l.input_shape.spatial) {
      LayerInstance<S> flat;
      flat.kind = LayerKind::flatten;
      flat.inputs = l.inputs;
      flat.merge = l.merge;
      flat.input_widths = l.input_widths;
      flat.input_shape = l.input_shape;
      flat.output_shape = l.input_shape.flattened();
      net.layers_.push_back(std::move(flat));
      l.inputs = {static_cast<int>(net.layers_.size()) - 1};
      l.merge = MergeKind::none;
      l.input_widths.clear();
      l.input_shape = net.layers_.back().output_shape;
    }

    const Shape& in = l.input_shape;
    switch (l.kind) {
      case LayerKind::dense: {
        l.units = detail::int_attr(a, "num-units", 10);
        l.activation = detail::activation_from(a.get("act"));
        l.bias = detail::bool_from(a.get("bias"), true);
        if (i == count - 1) {
          if (l.activation != Activation::softmax) throw InvalidArchitecture("last layer must be a softmax dense layer");
          l.units = num_classes;
        }
        l.output_shape = Shape::flat(l.units);
        l.params.emplace_back(in.size(), l.units);
        detail::glorot(l.params[0], in.size(), l.units, rng);
        if (l.bias) l.params.push_back(Matrix<S>::Zero(1, l.units));
        break;
      }
      case LayerKind::dropout: {
        const auto* r = a.get("rate");
        auto v = r ? parse_number(*r) : std::optional<double>(0.0);
        if (!v || *v < 0.0 || *v >= 1.0) throw InvalidArchitecture("dropout rate must lie in [0, 1)");
        l.rate = *v;
        l.output_shape = in;
        break;
      }
      case LayerKind::conv2d: {
        l.filters = detail::int_attr(a, "num-filters");
        l.kernel = detail::int_attr(a, "filter-shape");
        l.stride = detail::int_attr(a, "stride", 1);
        l.padding = detail::padding_from(a.get("padding"));
        l.activation = detail::activation_from(a.get("act"));
        if (l.activation == Activation::softmax) throw InvalidArchitecture("softmax is only valid on dense layers");
        l.bias = detail::bool_from(a.get("bias"), true);
        [[fallthrough]];
      }
      case LayerKind::pool_max:
      case LayerKind::pool_avg: {
        if (l.kind != LayerKind::conv2d) {
          l.kernel = detail::int_attr(a, "kernel-size");
          l.stride = detail::int_attr(a, "stride", 1);
          l.padding = detail::padding_from(a.get("padding"));
        }
        const int oh = window_output_size(in.height, l.kernel, l.stride, l.padding);
        const int ow = window_output_size(in.width, l.kernel, l.stride, l.padding);
        if (oh <= 0 || ow <= 0)
          throw InvalidArchitecture("layer " + std::to_string(i) + ": window " + std::to_string(l.kernel) + "/" +
                                    std::to_string(l.stride) + " collapses input " + in.str());
        if (l.padding == Padding::same) {
          l.pad_top = same_padding_before(in.height, l.kernel, l.stride);
          l.pad_left = same_padding_before(in.width, l.kernel, l.stride);
        }
        const int channels = l.kind == LayerKind::conv2d ? l.filters : in.channels;
        l.output_shape = Shape::image(oh, ow, channels);
        if (l.kind == LayerKind::conv2d) {
          const int fan_in = l.kernel * l.kernel * in.channels;
          l.params.emplace_back(fan_in, l.filters);
          detail::glorot(l.params[0], fan_in, l.kernel * l.kernel * l.filters, rng);
          if (l.bias) l.params.push_back(Matrix<S>::Zero(1, l.filters));
        }
        break;
      }
      case LayerKind::batch_norm: {
        const int c = in.spatial ? in.channels : in.size();
        l.output_shape = in;
        l.params.push_back(Matrix<S>::Ones(1, c));
        l.params.push_back(Matrix<S>::Zero(1, c));
        l.buffers.push_back(Matrix<S>::Zero(1, c));
        l.buffers.push_back(Matrix<S>::Ones(1, c));
        break;
      }
      case LayerKind::flatten: break;
    }
    for (const auto& p : l.params) l.grads.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
    net.layers_.push_back(std::move(l));
    net.phenotype_to_model_.push_back(static_cast<int>(net.layers_.size()) - 1);
  }
  if (net.layers_.back().kind != LayerKind::dense || net.layers_.back().activation != Activation::softmax)
    throw InvalidArchitecture("last layer must be a softmax dense layer");
  return net;
}

inline constexpr double kProbabilityFloor = 1e-12;

template <class S>
struct LossGrad {
  double loss = 0.0;
  Matrix<S> grad;  // dL/d(probabilities)
};

/// Mean categorical cross-entropy of probability rows against one-hot targets.
template <class S>
LossGrad<S> cross_entropy(const Matrix<S>& probabilities, const Matrix<S>& one_hot) {
  if (probabilities.rows() != one_hot.rows() || probabilities.cols() != one_hot.cols())
    throw std::invalid_argument("cross_entropy: shape mismatch");
  const Eigen::Index n = probabilities.rows();
  if (n == 0) throw std::invalid_argument("cross_entropy: empty batch");
  for (Eigen::Index r = 0; r < n; ++r)
    if (std::abs(static_cast<double>(probabilities.row(r).sum()) - 1.0) > 1e-6)
      throw std::invalid_argument("cross_entropy: probability rows must sum to 1");
  LossGrad<S> out;
  out.grad.setZero(probabilities.rows(), probabilities.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < probabilities.cols(); ++c) {
      const double t = static_cast<double>(one_hot(r, c));
      if (t == 0.0) continue;
      const double p = std::max(static_cast<double>(probabilities(r, c)), kProbabilityFloor);
      total -= t * std::log(p);
      out.grad(r, c) = static_cast<S>(-t / (p * static_cast<double>(n)));
    }
  out.loss = total / static_cast<double>(n);
  return out;
}

template <class S>
Matrix<S> one_hot(const std::vector<int>& labels, int num_classes) {
  Matrix<S> m = Matrix<S>::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) m(static_cast<Eigen::Index>(i), labels[i]) = S(1);
  return m;
}

/// Summed (not averaged) cross-entropy and correct-prediction count for integer labels.
template <class S>
std::pair<double, int> loss_and_hits(const Matrix<S>& probabilities, const int* labels) {
  double loss = 0.0;
  int hits = 0;
  for (Eigen::Index r = 0; r < probabilities.rows(); ++r) {
    Eigen::Index arg;
    probabilities.row(r).maxCoeff(&arg);
    if (arg == labels[r]) ++hits;
    loss -= std::log(std::max(static_cast<double>(probabilities(r, labels[r])), kProbabilityFloor));
  }
  return {loss, hits};
}

}  // namespace fdenser
