#include "tightbox/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <Eigen/Core>

#include "tightbox/errors.hpp"

namespace tightbox::nn {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Upper bound on im2col buffer elements; batches are processed in chunks.
constexpr std::size_t kColumnBudget = std::size_t{1} << 23;

void fill_normal(FloatBuffer& v, Rng& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& x : v) x = static_cast<float>(d(rng));
}

std::string shape_string(const Tensor& t) {
  return "(" + std::to_string(t.n) + ", " + std::to_string(t.c) + ", " + std::to_string(t.h) + ", " +
         std::to_string(t.w) + ")";
}

}  // namespace

// ---- Sequential ----------------------------------------------------------------

Sequential::Sequential(const Sequential& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Saved* saved) const {
  if (saved) saved->children.assign(layers_.size(), Saved{});
  if (layers_.empty()) return x;
  Tensor cur = layers_[0]->forward(x, saved ? &saved->children[0] : nullptr);
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    cur = layers_[i]->forward(cur, saved ? &saved->children[i] : nullptr);
  }
  return cur;
}

Tensor Sequential::backward(const Tensor& dy, const Saved& saved) {
  if (layers_.empty()) return dy;
  Tensor cur = layers_.back()->backward(dy, saved.children.back());
  for (std::size_t i = layers_.size() - 1; i-- > 0;) cur = layers_[i]->backward(cur, saved.children[i]);
  return cur;
}

void Sequential::parameters(std::vector<Param*>& out) {
  for (auto& l : layers_) l->parameters(out);
}

void Sequential::initialize(Rng& rng) {
  for (auto& l : layers_) l->initialize(rng);
}

void Sequential::leaf_names(std::vector<std::string>& out) const {
  for (const auto& l : layers_) l->leaf_names(out);
}

std::unique_ptr<Layer> Sequential::clone() const { return std::make_unique<Sequential>(*this); }

// ---- Conv2d --------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, int groups, bool bias)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding), groups_(groups) {
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeMismatch("conv channels must be divisible by groups");
  }
  weight.resize(static_cast<std::size_t>(out_) * (in_ / groups_) * kernel_ * kernel_);
  if (bias) this->bias.resize(out_);
}

std::string Conv2d::name() const {
  return "conv" + std::to_string(kernel_) + "x" + std::to_string(kernel_) + "(" + std::to_string(in_) + "->" +
         std::to_string(out_) + ", s" + std::to_string(stride_) + (groups_ > 1 ? ", g" + std::to_string(groups_) : "") +
         ")";
}

void Conv2d::parameters(std::vector<Param*>& out) {
  out.push_back(&weight);
  if (!bias.value.empty()) out.push_back(&bias);
}

void Conv2d::initialize(Rng& rng) {
  const int fan_in = (in_ / groups_) * kernel_ * kernel_;
  fill_normal(weight.value, rng, std::sqrt(2.0 / fan_in));
  std::fill(bias.value.begin(), bias.value.end(), 0.0f);
}

namespace {

struct ConvGeometry {
  int h, w, ho, wo, k, stride, pad;
  std::size_t plane() const { return static_cast<std::size_t>(ho) * wo; }
};

// Rows: (channel, ky, kx); columns: (sample, oy, ox).
void im2col(const Tensor& x, int n0, int nb, int c0, int cn, const ConvGeometry& g, float* col) {
  const std::size_t P = g.plane();
  const std::size_t row_len = P * nb;
  for (int ci = 0; ci < cn; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = col + (static_cast<std::size_t>(ci * g.k + ky) * g.k + kx) * row_len;
        for (int s = 0; s < nb; ++s) {
          const float* src = x.sample(n0 + s) + static_cast<std::size_t>(c0 + ci) * g.h * g.w;
          float* dst = row + s * P;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            float* d = dst + static_cast<std::size_t>(oy) * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wo, 0.0f);
              continue;
            }
            const float* srow = src + static_cast<std::size_t>(iy) * g.w;
            if (g.stride == 1) {
              const int lo = std::clamp(g.pad - kx, 0, g.wo);
              const int hi = std::clamp(g.w + g.pad - kx, lo, g.wo);
              std::fill(d, d + lo, 0.0f);
              std::memcpy(d + lo, srow + lo - g.pad + kx, sizeof(float) * (hi - lo));
              std::fill(d + hi, d + g.wo, 0.0f);
            } else {
              for (int ox = 0; ox < g.wo; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                d[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0f;
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, int n0, int nb, int c0, int cn, const ConvGeometry& g, Tensor& dx) {
  const std::size_t P = g.plane();
  const std::size_t row_len = P * nb;
  for (int ci = 0; ci < cn; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = col + (static_cast<std::size_t>(ci * g.k + ky) * g.k + kx) * row_len;
        for (int s = 0; s < nb; ++s) {
          float* dst = dx.sample(n0 + s) + static_cast<std::size_t>(c0 + ci) * g.h * g.w;
          const float* src = row + s * P;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            float* drow = dst + static_cast<std::size_t>(iy) * g.w;
            const float* srow = src + static_cast<std::size_t>(oy) * g.wo;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, Saved* saved) const {
  if (x.c != in_) throw ShapeMismatch(name() + " got input " + shape_string(x));
  const ConvGeometry g{x.h, x.w, out_size(x.h), out_size(x.w), kernel_, stride_, padding_};
  if (g.ho <= 0 || g.wo <= 0) throw ShapeMismatch(name() + " input too small: " + shape_string(x));
  const int in_g = in_ / groups_;
  const int out_g = out_ / groups_;
  const std::size_t K = static_cast<std::size_t>(in_g) * kernel_ * kernel_;
  const std::size_t P = g.plane();
  const int chunk = static_cast<int>(std::clamp<std::size_t>(kColumnBudget / (K * P), 1, std::max(x.n, 1)));

  Tensor y(x.n, out_, g.ho, g.wo);
  FloatBuffer col(K * P * chunk);
  RowMatrix prod;
  for (int n0 = 0; n0 < x.n; n0 += chunk) {
    const int nb = std::min(chunk, x.n - n0);
    const std::size_t cols = P * nb;
    for (int gi = 0; gi < groups_; ++gi) {
      im2col(x, n0, nb, gi * in_g, in_g, g, col.data());
      ConstMatrixMap W(weight.value.data() + gi * out_g * K, out_g, K);
      ConstMatrixMap C(col.data(), K, cols);
      prod.noalias() = W * C;
      for (int o = 0; o < out_g; ++o) {
        const int oc = gi * out_g + o;
        const float b = bias.value.empty() ? 0.0f : bias.value[oc];
        const float* src = prod.data() + o * cols;
        for (int s = 0; s < nb; ++s) {
          float* dst = y.sample(n0 + s) + oc * P;
          for (std::size_t p = 0; p < P; ++p) dst[p] = src[s * P + p] + b;
        }
      }
    }
  }
  if (saved) saved->input = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, const Saved& saved) {
  const Tensor& x = saved.input;
  const ConvGeometry g{x.h, x.w, out_size(x.h), out_size(x.w), kernel_, stride_, padding_};
  const int in_g = in_ / groups_;
  const int out_g = out_ / groups_;
  const std::size_t K = static_cast<std::size_t>(in_g) * kernel_ * kernel_;
  const std::size_t P = g.plane();
  const int chunk = static_cast<int>(std::clamp<std::size_t>(kColumnBudget / (K * P), 1, std::max(x.n, 1)));

  Tensor dx(x.n, x.c, x.h, x.w);
  FloatBuffer col(K * P * chunk);
  RowMatrix dout, dcol;
  for (int n0 = 0; n0 < x.n; n0 += chunk) {
    const int nb = std::min(chunk, x.n - n0);
    const std::size_t cols = P * nb;
    for (int gi = 0; gi < groups_; ++gi) {
      dout.resize(out_g, cols);
      for (int o = 0; o < out_g; ++o) {
        const int oc = gi * out_g + o;
        float* dst = dout.data() + o * cols;
        for (int s = 0; s < nb; ++s) std::memcpy(dst + s * P, dy.sample(n0 + s) + oc * P, sizeof(float) * P);
        if (!bias.grad.empty()) bias.grad[oc] += Eigen::Map<const Eigen::VectorXf>(dst, cols).sum();
      }
      im2col(x, n0, nb, gi * in_g, in_g, g, col.data());
      ConstMatrixMap C(col.data(), K, cols);
      MatrixMap dW(weight.grad.data() + gi * out_g * K, out_g, K);
      dW.noalias() += dout * C.transpose();
      ConstMatrixMap W(weight.value.data() + gi * out_g * K, out_g, K);
      dcol.noalias() = W.transpose() * dout;
      col2im(dcol.data(), n0, nb, gi * in_g, in_g, g, dx);
    }
  }
  return dx;
}

// ---- Linear --------------------------------------------------------------------

Linear::Linear(int in_features, int out_features) : in_(in_features), out_(out_features) {
  weight.resize(static_cast<std::size_t>(out_) * in_);
  bias.resize(out_);
}

std::string Linear::name() const { return "linear(" + std::to_string(in_) + "->" + std::to_string(out_) + ")"; }

void Linear::parameters(std::vector<Param*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

void Linear::initialize(Rng& rng) {
  fill_normal(weight.value, rng, std::sqrt(init_gain_ / in_));
  std::fill(bias.value.begin(), bias.value.end(), 0.0f);
}

Tensor Linear::forward(const Tensor& x, Saved* saved) const {
  if (static_cast<int>(x.sample_size()) != in_) throw ShapeMismatch(name() + " got input " + shape_string(x));
  Tensor y(x.n, out_, 1, 1);
  ConstMatrixMap X(x.data.data(), x.n, in_);
  ConstMatrixMap W(weight.value.data(), out_, in_);
  MatrixMap Y(y.data.data(), x.n, out_);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.value.data(), out_);
  if (saved) saved->input = x;
  return y;
}

Tensor Linear::backward(const Tensor& dy, const Saved& saved) {
  const Tensor& x = saved.input;
  ConstMatrixMap X(x.data.data(), x.n, in_);
  ConstMatrixMap dY(dy.data.data(), dy.n, out_);
  MatrixMap dW(weight.grad.data(), out_, in_);
  dW.noalias() += dY.transpose() * X;
  Eigen::Map<Eigen::RowVectorXf>(bias.grad.data(), out_) += dY.colwise().sum();
  Tensor dx(x.n, x.c, x.h, x.w);
  MatrixMap dX(dx.data.data(), x.n, in_);
  ConstMatrixMap W(weight.value.data(), out_, in_);
  dX.noalias() = dY * W;
  return dx;
}

// ---- activations / pooling -----------------------------------------------------

Tensor ReLU::forward(const Tensor& x, Saved* saved) const {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
  if (saved) saved->input = x;
  return y;
}

Tensor ReLU::backward(const Tensor& dy, const Saved& saved) {
  Tensor dx = dy;
  const auto& x = saved.input.data;
  for (std::size_t i = 0; i < dx.data.size(); ++i) {
    if (x[i] <= 0.0f) dx.data[i] = 0.0f;
  }
  return dx;
}

std::string MaxPool2d::name() const {
  return "maxpool" + std::to_string(kernel_) + "(s" + std::to_string(stride_) + ")";
}

Tensor MaxPool2d::forward(const Tensor& x, Saved* saved) const {
  const int ho = (x.h + 2 * padding_ - kernel_) / stride_ + 1;
  const int wo = (x.w + 2 * padding_ - kernel_) / stride_ + 1;
  if (ho <= 0 || wo <= 0) throw ShapeMismatch(name() + " input too small: " + shape_string(x));
  Tensor y(x.n, x.c, ho, wo);
  std::vector<int> index;
  if (saved) index.resize(y.size());
  std::size_t out_i = 0;
  for (int n = 0; n < x.n; ++n) {
    for (int c = 0; c < x.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * x.c + c) * x.h * x.w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++out_i) {
          float best = -std::numeric_limits<float>::infinity();
          int best_i = -1;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - padding_ + kx;
              if (ix < 0 || ix >= x.w) continue;
              const int idx = iy * x.w + ix;
              const float v = x.data[base + idx];
              if (v > best || best_i < 0) {
                best = v;
                best_i = idx;
              }
            }
          }
          y.data[out_i] = best;
          if (saved) index[out_i] = static_cast<int>(base) + best_i;
        }
      }
    }
  }
  if (saved) {
    saved->index = std::move(index);
    saved->input = Tensor(x.n, x.c, x.h, x.w);  // shape only
    saved->input.data.clear();
    saved->input.data.shrink_to_fit();
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& dy, const Saved& saved) {
  const Tensor& shape = saved.input;
  Tensor dx(shape.n, shape.c, shape.h, shape.w);
  for (std::size_t i = 0; i < dy.data.size(); ++i) dx.data[saved.index[i]] += dy.data[i];
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, Saved* saved) const {
  Tensor y(x.n, x.c, 1, 1);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  for (int n = 0; n < x.n; ++n) {
    for (int c = 0; c < x.c; ++c) {
      const float* p = x.sample(n) + c * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      y.data[static_cast<std::size_t>(n) * x.c + c] = static_cast<float>(s / plane);
    }
  }
  if (saved) {
    saved->input = Tensor(x.n, x.c, x.h, x.w);
    saved->input.data.clear();
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy, const Saved& saved) {
  const Tensor& s = saved.input;
  Tensor dx(s.n, s.c, s.h, s.w);
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float g = dy.data[static_cast<std::size_t>(n) * s.c + c] / plane;
      float* p = dx.sample(n) + c * plane;
      std::fill(p, p + plane, g);
    }
  }
  return dx;
}

Tensor Flatten::forward(const Tensor& x, Saved* saved) const {
  Tensor y;
  y.n = x.n;
  y.c = static_cast<int>(x.sample_size());
  y.h = y.w = 1;
  y.data = x.data;
  if (saved) {
    saved->input = Tensor(x.n, x.c, x.h, x.w);
    saved->input.data.clear();
  }
  return y;
}

Tensor Flatten::backward(const Tensor& dy, const Saved& saved) {
  Tensor dx = dy;
  dx.c = saved.input.c;
  dx.h = saved.input.h;
  dx.w = saved.input.w;
  return dx;
}

// ---- ChannelAffine -------------------------------------------------------------

ChannelAffine::ChannelAffine(int channels, float initial_scale) : channels_(channels), initial_scale_(initial_scale) {
  scale.resize(channels);
  shift.resize(channels);
  std::fill(scale.value.begin(), scale.value.end(), initial_scale);
}

void ChannelAffine::parameters(std::vector<Param*>& out) {
  out.push_back(&scale);
  out.push_back(&shift);
}

void ChannelAffine::initialize(Rng&) {
  std::fill(scale.value.begin(), scale.value.end(), initial_scale_);
  std::fill(shift.value.begin(), shift.value.end(), 0.0f);
}

Tensor ChannelAffine::forward(const Tensor& x, Saved* saved) const {
  if (x.c != channels_) throw ShapeMismatch("channel_affine got input " + shape_string(x));
  Tensor y = x;
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  for (int n = 0; n < x.n; ++n) {
    for (int c = 0; c < x.c; ++c) {
      float* p = y.sample(n) + c * plane;
      const float a = scale.value[c], b = shift.value[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * a + b;
    }
  }
  if (saved) saved->input = x;
  return y;
}

Tensor ChannelAffine::backward(const Tensor& dy, const Saved& saved) {
  const Tensor& x = saved.input;
  Tensor dx = dy;
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  for (int n = 0; n < x.n; ++n) {
    for (int c = 0; c < x.c; ++c) {
      const float* g = dy.sample(n) + c * plane;
      const float* xi = x.sample(n) + c * plane;
      float* d = dx.sample(n) + c * plane;
      double ds = 0.0, db = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        ds += g[i] * xi[i];
        db += g[i];
        d[i] = g[i] * scale.value[c];
      }
      scale.grad[c] += static_cast<float>(ds);
      shift.grad[c] += static_cast<float>(db);
    }
  }
  return dx;
}

// ---- Residual ------------------------------------------------------------------

Tensor Residual::forward(const Tensor& x, Saved* saved) const {
  if (saved) saved->children.assign(2, Saved{});
  Tensor a = main_.forward(x, saved ? &saved->children[0] : nullptr);
  Tensor b = shortcut_.size() ? shortcut_.forward(x, saved ? &saved->children[1] : nullptr) : x;
  if (!a.same_shape(b)) throw ShapeMismatch("residual branches disagree: " + shape_string(a) + " vs " + shape_string(b));
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
  return a;
}

Tensor Residual::backward(const Tensor& dy, const Saved& saved) {
  Tensor da = main_.backward(dy, saved.children[0]);
  Tensor db = shortcut_.size() ? shortcut_.backward(dy, saved.children[1]) : dy;
  for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += db.data[i];
  return da;
}

void Residual::parameters(std::vector<Param*>& out) {
  main_.parameters(out);
  shortcut_.parameters(out);
}

void Residual::leaf_names(std::vector<std::string>& out) const {
  main_.leaf_names(out);
  std::vector<std::string> side;
  shortcut_.leaf_names(side);
  for (auto& n : side) out.push_back("shortcut:" + n);
}

void Residual::initialize(Rng& rng) {
  main_.initialize(rng);
  shortcut_.initialize(rng);
}

// ---- optimizers ----------------------------------------------------------------

void zero_grad(const std::vector<Param*>& params) {
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

void Sgd::step(const std::vector<Param*>& params) {
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= static_cast<float>(lr_ * p->grad[i]);
  }
}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k].assign(params[k]->value.size(), 0.0f);
      v_[k].assign(params[k]->value.size(), 0.0f);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr_ / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(eps_);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& val = params[k]->value;
    const auto& g = params[k]->grad;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      val[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

}  // namespace tightbox::nn
