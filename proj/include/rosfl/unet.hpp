#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rosfl/layers.hpp"
#include "rosfl/param_set.hpp"

namespace rosfl {

enum class TaskHead { Regression, Segmentation };

struct UNetSpec {
  int depth = 3;  // resolution levels, the last one is the bottleneck
  Index base_channels = 8;
  Index in_channels = 1;
  Index out_channels = 1;
  Index height = 32;
  Index width = 32;
  TaskHead head = TaskHead::Regression;

  Index channels(int level) const { return base_channels << (level - 1); }

  void validate() const {
    if (depth < 2) throw ConfigError("model.depth must be >= 2");
    if (base_channels < 1 || in_channels < 1 || out_channels < 1) throw ConfigError("model channel counts must be >= 1");
    const Index factor = Index{1} << (depth - 1);
    if (height < 1 || width < 1 || height % factor != 0 || width % factor != 0) {
      throw ConfigError("model input " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by 2^(depth-1) = " + std::to_string(factor));
    }
    if (head == TaskHead::Segmentation && out_channels < 2) throw ConfigError("segmentation needs >= 2 classes");
  }

  friend bool operator==(const UNetSpec&, const UNetSpec&) = default;
};

/// Number of outer resolution levels held by the client (head encoders and
/// matching tail decoders).
struct SplitPlan {
  int level = 1;

  void validate(const UNetSpec& spec) const {
    if (level < 1 || level > spec.depth - 1) {
      throw ConfigError("split.level must be in [1, " + std::to_string(spec.depth - 1) + "], got " +
                        std::to_string(level));
    }
  }

  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

// Two conv3x3 + ReLU stages.
template <typename S>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& prefix, Index in, Index out)
      : conv_a_(prefix + ".conv_a", in, out), relu_a_(prefix + ".relu_a"),
        conv_b_(prefix + ".conv_b", out, out), relu_b_(prefix + ".relu_b") {}

  void init(std::uint64_t seed) {
    conv_a_.init(seed);
    conv_b_.init(seed);
  }

  Tensor<S> forward(const Tensor<S>& x) {
    return relu_b_.forward(conv_b_.forward(relu_a_.forward(conv_a_.forward(x))));
  }

  Tensor<S> backward(const Tensor<S>& g) {
    return conv_a_.backward(relu_a_.backward(conv_b_.backward(relu_b_.backward(g))));
  }

  template <typename F>
  void for_each_param(F&& f) {
    conv_a_.for_each_param(f);
    conv_b_.for_each_param(f);
  }

 private:
  Conv3x3<S> conv_a_;
  Relu<S> relu_a_;
  Conv3x3<S> conv_b_;
  Relu<S> relu_b_;
};

template <typename S>
class EncoderLevel {
 public:
  struct Output {
    Tensor<S> skip;  // pre-pool activation, feeds the decoder at this level
    Tensor<S> down;  // post-pool activation, enters the next level
  };

  EncoderLevel() = default;
  EncoderLevel(int level, Index in, Index out)
      : level_(level), block_("enc" + std::to_string(level), in, out),
        pool_("enc" + std::to_string(level) + ".pool") {}

  int level() const { return level_; }
  void init(std::uint64_t seed) { block_.init(seed); }

  Output forward(const Tensor<S>& x) {
    Tensor<S> skip = block_.forward(x);
    Tensor<S> down = pool_.forward(skip);
    return {std::move(skip), std::move(down)};
  }

  // The pre-pool activation fans out to the pool and the skip route, so its
  // gradient is the sum of both paths.
  Tensor<S> backward(const Tensor<S>& grad_down, const Tensor<S>& grad_skip) {
    Tensor<S> g = pool_.backward(grad_down);
    require_same_shape(g, grad_skip, "encoder skip gradient");
    g.values() += grad_skip.values();
    return block_.backward(g);
  }

  template <typename F>
  void for_each_param(F&& f) {
    block_.for_each_param(f);
  }

 private:
  int level_ = 0;
  ConvBlock<S> block_;
  MaxPool2x2<S> pool_;
};

template <typename S>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(Index in, Index out) : block_("mid", in, out) {}

  void init(std::uint64_t seed) { block_.init(seed); }
  Tensor<S> forward(const Tensor<S>& x) { return block_.forward(x); }
  Tensor<S> backward(const Tensor<S>& g) { return block_.backward(g); }

  template <typename F>
  void for_each_param(F&& f) {
    block_.for_each_param(f);
  }

 private:
  ConvBlock<S> block_;
};

// upsample -> conv3x3 (below channels -> level channels) -> concat [skip, up]
// -> conv block.
template <typename S>
class DecoderLevel {
 public:
  DecoderLevel() = default;
  DecoderLevel(int level, Index below_channels, Index channels)
      : level_(level),
        up_("dec" + std::to_string(level) + ".up"),
        up_conv_("dec" + std::to_string(level) + ".up_conv", below_channels, channels),
        concat_("dec" + std::to_string(level) + ".concat"),
        block_("dec" + std::to_string(level), 2 * channels, channels) {}

  int level() const { return level_; }

  void init(std::uint64_t seed) {
    up_conv_.init(seed);
    block_.init(seed);
  }

  Tensor<S> forward(const Tensor<S>& below, const Tensor<S>& skip) {
    return block_.forward(concat_.forward(skip, up_conv_.forward(up_.forward(below))));
  }

  // Returns {gradient w.r.t. the tensor from below, gradient w.r.t. the skip}.
  std::pair<Tensor<S>, Tensor<S>> backward(const Tensor<S>& g) {
    auto [g_skip, g_up] = concat_.backward(block_.backward(g));
    return {up_.backward(up_conv_.backward(g_up)), std::move(g_skip)};
  }

  template <typename F>
  void for_each_param(F&& f) {
    up_conv_.for_each_param(f);
    block_.for_each_param(f);
  }

 private:
  int level_ = 0;
  Upsample2x<S> up_;
  Conv3x3<S> up_conv_;
  ConcatChannels<S> concat_;
  ConvBlock<S> block_;
};

// conv1x1 projection, followed by a channel softmax for segmentation.
template <typename S>
class OutputHead {
 public:
  OutputHead() = default;
  OutputHead(Index in, Index out, TaskHead head) : proj_("out.proj", in, out) {
    if (head == TaskHead::Segmentation) softmax_.emplace("out.softmax");
  }

  void init(std::uint64_t seed) { proj_.init(seed); }

  Tensor<S> forward(const Tensor<S>& x) {
    Tensor<S> y = proj_.forward(x);
    return softmax_ ? softmax_->forward(y) : y;
  }

  Tensor<S> backward(const Tensor<S>& g) { return proj_.backward(softmax_ ? softmax_->backward(g) : g); }

  template <typename F>
  void for_each_param(F&& f) {
    proj_.for_each_param(f);
  }

 private:
  Conv1x1<S> proj_;
  std::optional<ChannelSoftmax<S>> softmax_;
};

namespace detail {

template <typename S>
std::vector<EncoderLevel<S>> make_encoders(const UNetSpec& spec, int first, int last) {
  std::vector<EncoderLevel<S>> out;
  for (int l = first; l <= last; ++l) {
    out.emplace_back(l, l == 1 ? spec.in_channels : spec.channels(l - 1), spec.channels(l));
  }
  return out;
}

// Decoders in execution order (deepest first).
template <typename S>
std::vector<DecoderLevel<S>> make_decoders(const UNetSpec& spec, int deepest, int shallowest) {
  std::vector<DecoderLevel<S>> out;
  for (int l = deepest; l >= shallowest; --l) out.emplace_back(l, spec.channels(l + 1), spec.channels(l));
  return out;
}

}  // namespace detail

template <typename Net>
auto params_of(Net& net) {
  using S = typename Net::Scalar;
  ParamSet<S> out(net.part());
  const std::string prefix = part_prefix(net.part());
  net.for_each_param([&](const std::string& name, Tensor<S>& v, Tensor<S>&) { out.add(prefix + name, v); });
  return out;
}

template <typename Net>
auto grads_of(Net& net) {
  using S = typename Net::Scalar;
  ParamSet<S> out(net.part());
  const std::string prefix = part_prefix(net.part());
  net.for_each_param([&](const std::string& name, Tensor<S>&, Tensor<S>& g) { out.add(prefix + name, g); });
  return out;
}

template <typename Net>
void assign_params(Net& net, const ParamSet<typename Net::Scalar>& params) {
  using S = typename Net::Scalar;
  const std::string prefix = part_prefix(net.part());
  std::size_t i = 0;
  net.for_each_param([&](const std::string& name, Tensor<S>& v, Tensor<S>&) {
    if (i >= params.size() || params[i].name != prefix + name || params[i].value.shape() != v.shape()) {
      throw ConfigError("assign_params: expected " + prefix + name + " at position " + std::to_string(i));
    }
    v = params[i++].value;
  });
  if (i != params.size()) throw ConfigError("assign_params: parameter count mismatch");
}

/// The complete encoder-decoder, executed as one unit.
template <typename S>
class UNet {
 public:
  using Scalar = S;

  explicit UNet(const UNetSpec& spec) : spec_(spec) {
    spec.validate();
    encoders_ = detail::make_encoders<S>(spec, 1, spec.depth - 1);
    mid_ = Bottleneck<S>(spec.channels(spec.depth - 1), spec.channels(spec.depth));
    decoders_ = detail::make_decoders<S>(spec, spec.depth - 1, 1);
    out_ = OutputHead<S>(spec.channels(1), spec.out_channels, spec.head);
  }

  const UNetSpec& spec() const { return spec_; }
  Part part() const { return Part::Full; }

  void init(std::uint64_t seed) {
    for (auto& e : encoders_) e.init(seed);
    mid_.init(seed);
    for (auto& d : decoders_) d.init(seed);
    out_.init(seed);
  }

  Tensor<S> forward(const Tensor<S>& x) {
    std::vector<Tensor<S>> skips;
    Tensor<S> h = x;
    for (auto& e : encoders_) {
      auto o = e.forward(h);
      skips.push_back(std::move(o.skip));
      h = std::move(o.down);
    }
    h = mid_.forward(h);
    for (auto& d : decoders_) h = d.forward(h, skips[static_cast<std::size_t>(d.level() - 1)]);
    return out_.forward(h);
  }

  // Returns the gradient w.r.t. the input; parameter gradients stay in the layers.
  Tensor<S> backward(const Tensor<S>& grad_out) {
    std::vector<Tensor<S>> grad_skips(encoders_.size());
    Tensor<S> g = out_.backward(grad_out);
    // decoders_ is deepest-first; backward runs shallowest-first.
    for (std::size_t i = decoders_.size(); i-- > 0;) {
      auto [g_below, g_skip] = decoders_[i].backward(g);
      grad_skips[static_cast<std::size_t>(decoders_[i].level() - 1)] = std::move(g_skip);
      g = std::move(g_below);
    }
    g = mid_.backward(g);
    for (std::size_t i = encoders_.size(); i-- > 0;) g = encoders_[i].backward(g, grad_skips[i]);
    return g;
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& e : encoders_) e.for_each_param(f);
    mid_.for_each_param(f);
    for (auto& d : decoders_) d.for_each_param(f);
    out_.for_each_param(f);
  }

 private:
  template <typename>
  friend class SplitUNet;

  UNetSpec spec_;
  std::vector<EncoderLevel<S>> encoders_;
  Bottleneck<S> mid_;
  std::vector<DecoderLevel<S>> decoders_;
  OutputHead<S> out_;
};

template <typename S>
UNet<S> build(const UNetSpec& spec, std::uint64_t seed) {
  UNet<S> net(spec);
  net.init(seed);
  return net;
}

/// Skip activations produced by the head for one batch. Lives on the
/// client between head forward and head backward, never serialized.
template <typename S>
class HeadContext {
 public:
  HeadContext() = default;
  explicit HeadContext(std::vector<Tensor<S>> skips) : skips_(std::move(skips)) {}
  HeadContext(HeadContext&&) noexcept = default;
  HeadContext& operator=(HeadContext&&) noexcept = default;
  HeadContext(const HeadContext&) = delete;
  HeadContext& operator=(const HeadContext&) = delete;

  bool valid() const { return !skips_.empty(); }
  const Tensor<S>& skip(int level) const { return skips_.at(static_cast<std::size_t>(level - 1)); }
  std::size_t size() const { return skips_.size(); }
  void clear() { skips_.clear(); }

 private:
  std::vector<Tensor<S>> skips_;
};

// Encoder levels 1..s.
template <typename S>
class HeadNet {
 public:
  using Scalar = S;

  HeadNet() = default;
  HeadNet(const UNetSpec& spec, SplitPlan plan) : spec_(spec), plan_(plan) {
    spec.validate();
    plan.validate(spec);
    encoders_ = detail::make_encoders<S>(spec, 1, plan.level);
  }

  Part part() const { return Part::Head; }
  void init(std::uint64_t seed) {
    for (auto& e : encoders_) e.init(seed);
  }

  Shape output_shape(Index batch) const {
    return {batch, spec_.channels(plan_.level), spec_.height >> plan_.level, spec_.width >> plan_.level};
  }

  std::pair<Tensor<S>, HeadContext<S>> forward(const Tensor<S>& x) {
    if (x.shape() != Shape{x.dim(0), spec_.in_channels, spec_.height, spec_.width}) {
      throw ConfigError("head input shape " + shape_str(x.shape()));
    }
    std::vector<Tensor<S>> skips;
    Tensor<S> h = x;
    for (auto& e : encoders_) {
      auto o = e.forward(h);
      skips.push_back(std::move(o.skip));
      h = std::move(o.down);
    }
    return {std::move(h), HeadContext<S>(std::move(skips))};
  }

  // Sums the body-path gradient (via grad_boundary) and the client-local
  // skip-path gradients. Consumes the context.
  void backward(const Tensor<S>& grad_boundary, const std::vector<Tensor<S>>& grad_skips, HeadContext<S>&& ctx) {
    if (!ctx.valid()) throw ProtocolError("head backward without a head context");
    ctx.clear();
    if (grad_skips.size() != encoders_.size()) throw ProtocolError("head backward: wrong number of skip gradients");
    if (grad_boundary.shape() != output_shape(grad_boundary.dim(0))) {
      throw ProtocolError("head backward: boundary gradient shape " + shape_str(grad_boundary.shape()));
    }
    Tensor<S> g = grad_boundary;
    for (std::size_t i = encoders_.size(); i-- > 0;) g = encoders_[i].backward(g, grad_skips[i]);
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& e : encoders_) e.for_each_param(f);
  }

 private:
  template <typename>
  friend class SplitUNet;

  UNetSpec spec_;
  SplitPlan plan_;
  std::vector<EncoderLevel<S>> encoders_;
};

// Encoder levels s+1..L-1, bottleneck, decoder levels L-1..s+1 with their
// internal skips.
template <typename S>
class BodyNet {
 public:
  using Scalar = S;

  BodyNet() = default;
  BodyNet(const UNetSpec& spec, SplitPlan plan) : spec_(spec), plan_(plan) {
    spec.validate();
    plan.validate(spec);
    encoders_ = detail::make_encoders<S>(spec, plan.level + 1, spec.depth - 1);
    mid_ = Bottleneck<S>(spec.channels(spec.depth - 1), spec.channels(spec.depth));
    decoders_ = detail::make_decoders<S>(spec, spec.depth - 1, plan.level + 1);
  }

  Part part() const { return Part::Body; }
  void init(std::uint64_t seed) {
    for (auto& e : encoders_) e.init(seed);
    mid_.init(seed);
    for (auto& d : decoders_) d.init(seed);
  }

  Shape input_shape(Index batch) const {
    return {batch, spec_.channels(plan_.level), spec_.height >> plan_.level, spec_.width >> plan_.level};
  }
  Shape output_shape(Index batch) const {
    return {batch, spec_.channels(plan_.level + 1), spec_.height >> plan_.level, spec_.width >> plan_.level};
  }

  Tensor<S> forward(const Tensor<S>& head_out) {
    if (head_out.rank() != 4 || head_out.shape() != input_shape(head_out.dim(0))) {
      throw ProtocolError("body input shape " + shape_str(head_out.shape()) + " does not match the split boundary");
    }
    skips_.clear();
    Tensor<S> h = head_out;
    for (auto& e : encoders_) {
      auto o = e.forward(h);
      skips_.push_back(std::move(o.skip));
      h = std::move(o.down);
    }
    h = mid_.forward(h);
    for (auto& d : decoders_) h = d.forward(h, skips_[static_cast<std::size_t>(d.level() - plan_.level - 1)]);
    return h;
  }

  Tensor<S> backward(const Tensor<S>& grad_out) {
    if (grad_out.rank() != 4 || grad_out.shape() != output_shape(grad_out.dim(0))) {
      throw ProtocolError("body gradient shape " + shape_str(grad_out.shape()) + " does not match the split boundary");
    }
    std::vector<Tensor<S>> grad_skips(encoders_.size());
    Tensor<S> g = grad_out;
    for (std::size_t i = decoders_.size(); i-- > 0;) {
      auto [g_below, g_skip] = decoders_[i].backward(g);
      grad_skips[static_cast<std::size_t>(decoders_[i].level() - plan_.level - 1)] = std::move(g_skip);
      g = std::move(g_below);
    }
    g = mid_.backward(g);
    for (std::size_t i = encoders_.size(); i-- > 0;) g = encoders_[i].backward(g, grad_skips[i]);
    skips_.clear();
    return g;
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& e : encoders_) e.for_each_param(f);
    mid_.for_each_param(f);
    for (auto& d : decoders_) d.for_each_param(f);
  }

 private:
  template <typename>
  friend class SplitUNet;

  UNetSpec spec_;
  SplitPlan plan_;
  std::vector<EncoderLevel<S>> encoders_;
  Bottleneck<S> mid_;
  std::vector<DecoderLevel<S>> decoders_;
  std::vector<Tensor<S>> skips_;
};

// Decoder levels s..1 and the task head.
template <typename S>
class TailNet {
 public:
  using Scalar = S;

  struct Grads {
    Tensor<S> boundary;                // w.r.t. the body output
    std::vector<Tensor<S>> skips;      // w.r.t. head skips, level 1 first
  };

  TailNet() = default;
  TailNet(const UNetSpec& spec, SplitPlan plan) : spec_(spec), plan_(plan) {
    spec.validate();
    plan.validate(spec);
    decoders_ = detail::make_decoders<S>(spec, plan.level, 1);
    out_ = OutputHead<S>(spec.channels(1), spec.out_channels, spec.head);
  }

  Part part() const { return Part::Tail; }
  void init(std::uint64_t seed) {
    for (auto& d : decoders_) d.init(seed);
    out_.init(seed);
  }

  Tensor<S> forward(const Tensor<S>& body_out, const HeadContext<S>& ctx) {
    if (!ctx.valid() || ctx.size() != decoders_.size()) throw ProtocolError("tail forward without a matching head context");
    const Shape expect{body_out.dim(0), spec_.channels(plan_.level + 1), spec_.height >> plan_.level,
                       spec_.width >> plan_.level};
    if (body_out.shape() != expect) {
      throw ProtocolError("tail input shape " + shape_str(body_out.shape()) + " does not match the split boundary");
    }
    Tensor<S> h = body_out;
    for (auto& d : decoders_) h = d.forward(h, ctx.skip(d.level()));
    return out_.forward(h);
  }

  Grads backward(const Tensor<S>& loss_grad) {
    Grads out;
    out.skips.resize(decoders_.size());
    Tensor<S> g = out_.backward(loss_grad);
    for (std::size_t i = decoders_.size(); i-- > 0;) {
      auto [g_below, g_skip] = decoders_[i].backward(g);
      out.skips[static_cast<std::size_t>(decoders_[i].level() - 1)] = std::move(g_skip);
      g = std::move(g_below);
    }
    out.boundary = std::move(g);
    return out;
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& d : decoders_) d.for_each_param(f);
    out_.for_each_param(f);
  }

 private:
  template <typename>
  friend class SplitUNet;

  UNetSpec spec_;
  SplitPlan plan_;
  std::vector<DecoderLevel<S>> decoders_;
  OutputHead<S> out_;
};

struct SkipRoute {
  int producer_level;  // head encoder level
  int consumer_level;  // tail decoder level
  Part producer = Part::Head;
  Part consumer = Part::Tail;
};

/// Head, body and tail of one U-Net plus the skip routes between head and
/// tail. Every skip route starts and ends on the client.
template <typename S>
class SplitUNet {
 public:
  SplitUNet(const UNetSpec& spec, SplitPlan plan)
      : head(spec, plan), body(spec, plan), tail(spec, plan), spec_(spec), plan_(plan) {
    for (int l = 1; l <= plan.level; ++l) routes_.push_back({l, l});
  }

  // Copies the levels of `model` into the three parts.
  SplitUNet(const UNet<S>& model, SplitPlan plan) : SplitUNet(model.spec(), plan) {
    plan.validate(model.spec());
    const auto s = static_cast<std::size_t>(plan.level);
    for (std::size_t i = 0; i < s; ++i) head.encoders_[i] = model.encoders_[i];
    for (std::size_t i = s; i < model.encoders_.size(); ++i) body.encoders_[i - s] = model.encoders_[i];
    body.mid_ = model.mid_;
    const std::size_t body_decoders = model.decoders_.size() - s;
    for (std::size_t i = 0; i < model.decoders_.size(); ++i) {
      if (i < body_decoders) {
        body.decoders_[i] = model.decoders_[i];
      } else {
        tail.decoders_[i - body_decoders] = model.decoders_[i];
      }
    }
    tail.out_ = model.out_;
  }

  void init(std::uint64_t seed) {
    head.init(seed);
    body.init(seed);
    tail.init(seed);
  }

  const UNetSpec& spec() const { return spec_; }
  const SplitPlan& plan() const { return plan_; }
  const std::vector<SkipRoute>& skip_routes() const { return routes_; }

  Tensor<S> forward(const Tensor<S>& x) {
    auto [yh, ctx] = head.forward(x);
    return tail.forward(body.forward(yh), ctx);
  }

  HeadNet<S> head;
  BodyNet<S> body;
  TailNet<S> tail;

 private:
  UNetSpec spec_;
  SplitPlan plan_;
  std::vector<SkipRoute> routes_;
};

template <typename S>
SplitUNet<S> split(const UNet<S>& model, SplitPlan plan) {
  return SplitUNet<S>(model, plan);
}

// Head, body and tail parameters merged back into monolithic naming and order.
template <typename S>
ParamSet<S> merge_parts(const ParamSet<S>& head, const ParamSet<S>& body, const ParamSet<S>& tail) {
  ParamSet<S> out(Part::Full, head.round());
  for (const ParamSet<S>* p : {&head, &body, &tail}) {
    const std::string prefix = part_prefix(p->part());
    for (const auto& e : *p) {
      if (e.name.rfind(prefix, 0) != 0) throw ConfigError("merge_parts: " + e.name + " lacks prefix " + prefix);
      out.add(e.name.substr(prefix.size()), e.value);
    }
  }
  return out;
}

// Partition monolithic parameters into a part by the part's own naming.
template <typename Net>
auto extract_part(Net& part_net, const ParamSet<typename Net::Scalar>& full) {
  using S = typename Net::Scalar;
  ParamSet<S> out(part_net.part(), full.round());
  const std::string prefix = part_prefix(part_net.part());
  part_net.for_each_param([&](const std::string& name, Tensor<S>&, Tensor<S>&) { out.add(prefix + name, full.at(name)); });
  return out;
}

}  // namespace rosfl
