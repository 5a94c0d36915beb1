#pragma once

// Minimal CPU layers with explicit backward passes. Forward is const so an
// inference model can be shared by concurrent readers; activations needed by
// backward live in caller-owned `Saved` records.

#include <cstddef>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "tightbox/random.hpp"

namespace tightbox::nn {

/// 64-byte aligned storage. Vectorized reductions peel differently depending
/// on the buffer address, so alignment has to be fixed for runs to be
/// bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense NCHW float tensor. Vectors are stored as (n, c, 1, 1).
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  FloatBuffer data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * h * w; }
  float* sample(int i) noexcept { return data.data() + i * sample_size(); }
  const float* sample(int i) const noexcept { return data.data() + i * sample_size(); }
  bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

struct Param {
  FloatBuffer value;
  FloatBuffer grad;

  void resize(std::size_t n) {
    value.assign(n, 0.0f);
    grad.assign(n, 0.0f);
  }
};

/// Activations a layer keeps for its backward pass.
struct Saved {
  Tensor input;
  std::vector<int> index;
  std::vector<Saved> children;
};

class Layer {
 public:
  virtual ~Layer() = default;
  /// `saved` is null in inference mode.
  virtual Tensor forward(const Tensor& x, Saved* saved) const = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor backward(const Tensor& dy, const Saved& saved) = 0;
  virtual void parameters(std::vector<Param*>& out) { (void)out; }
  virtual void initialize(Rng& rng) { (void)rng; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::string name() const = 0;
  /// Names of the leaf layers, depth first.
  virtual void leaf_names(std::vector<std::string>& out) const { out.push_back(name()); }
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  void add_layer(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  void parameters(std::vector<Param*>& out) override;
  void initialize(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override;
  std::string name() const override { return "sequential"; }
  void leaf_names(std::vector<std::string>& out) const override;

  std::vector<Param*> parameters_list() {
    std::vector<Param*> out;
    parameters(out);
    return out;
  }
  std::size_t size() const noexcept { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// 2-D convolution, square kernel, optional channel groups (groups ==
/// channels gives a depthwise convolution).
class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int padding = 0, int groups = 1,
         bool bias = true);

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  void parameters(std::vector<Param*>& out) override;
  void initialize(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
  std::string name() const override;

  int out_size(int in) const noexcept { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

  Param weight;  // [out, in/groups, k, k]
  Param bias;    // [out] or empty

 private:
  int in_, out_, kernel_, stride_, padding_, groups_;
};

class Linear final : public Layer {
 public:
  Linear(int in_features, int out_features);

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  void parameters(std::vector<Param*>& out) override;
  void initialize(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
  std::string name() const override;

  /// Overrides the default He initialization gain (used for the output layer).
  void set_init_gain(double gain) { init_gain_ = gain; }

  Param weight;  // [out, in]
  Param bias;    // [out]

 private:
  int in_, out_;
  double init_gain_ = 2.0;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
  std::string name() const override { return "relu"; }
};

class MaxPool2d final : public Layer {
 public:
  explicit MaxPool2d(int kernel = 2, int stride = 2, int padding = 0)
      : kernel_(kernel), stride_(stride), padding_(padding) {}

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }
  std::string name() const override;

 private:
  int kernel_, stride_, padding_;
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
  std::string name() const override { return "global_avg_pool"; }
};

class Flatten final : public Layer {
 public:
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }
  std::string name() const override { return "flatten"; }
};

/// Learnable per-channel scale and shift; stands in for batch norm in the
/// deep backbones.
class ChannelAffine final : public Layer {
 public:
  ChannelAffine(int channels, float initial_scale = 1.0f);

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  void parameters(std::vector<Param*>& out) override;
  void initialize(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ChannelAffine>(*this); }
  std::string name() const override { return "channel_affine"; }

  Param scale;
  Param shift;

 private:
  int channels_;
  float initial_scale_;
};

/// y = main(x) + shortcut(x); an empty shortcut is the identity.
class Residual final : public Layer {
 public:
  Residual(Sequential main, Sequential shortcut) : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& dy, const Saved& saved) override;
  void parameters(std::vector<Param*>& out) override;
  void initialize(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Residual>(*this); }
  std::string name() const override { return "residual"; }
  /// Shortcut leaves are prefixed with "shortcut:".
  void leaf_names(std::vector<std::string>& out) const override;

 private:
  Sequential main_;
  Sequential shortcut_;
};

// ---- optimizers -------------------------------------------------------------

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<Param*>& params) = 0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(const std::vector<Param*>& params) override;

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const std::vector<Param*>& params) override;

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

void zero_grad(const std::vector<Param*>& params);

}  // namespace tightbox::nn
