#pragma once

// The four network blocks: F (embedding), C (pixel classifier), G (generator)
// and D (two-headed patch discriminator), each a named parameter group with
// its own Adam state. Architectures are small fully-convolutional stand-ins:
//
//   F: 3 blocks of {conv3x3, lrelu 0.2, conv3x3 stride 2, lrelu 0.2},
//      widths w1->w2->w3; output w3 x H/8 x W/8 (w3 is the embedding width)
//   C: conv3x3 + lrelu, conv3x3 -> N_c logits, then x8 bilinear upsample
//   G: 3 blocks of {nearest x2, conv3x3, relu, dropout 0.5} + tanh conv,
//      widths w3 -> w2/2 -> w1/2 -> 3
//   D: 3 stride-2 conv blocks (lrelu 0.2) -> 1x1-conv patch head (4 domain
//      classes per patch cell) and an aux head (2 convs + x8 bilinear) that
//      emits image-sized segmentation logits
//   D': 2-conv domain classifier on the embedding (feature-space ablation)

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "segada/adam.hpp"
#include "segada/rng.hpp"
#include "segada/tensor.hpp"

namespace segada {

// Patch-discriminator classes; codes are stable across serialization.
enum class DomainClass : std::uint8_t {
  SrcReal = 0,
  SrcFake = 1,
  TgtReal = 2,
  TgtFake = 3,
};

enum class Act { None, Relu, LeakyRelu, Tanh };

struct LayerSpec {
  int in_ch, out_ch, kernel, stride, pad;
  Act act = Act::None;
  double dropout_p = 0.0;
  int up_before = 1;  // nearest-neighbor upsample applied before the conv
};

struct NetworkDef {
  std::string name;
  std::vector<LayerSpec> layers;
  int final_up = 1;
  UpsampleMode final_up_mode = UpsampleMode::Bilinear;

  long long param_count() const {
    long long n = 0;
    for (const auto& l : layers)
      n += static_cast<long long>(l.out_ch) * l.in_ch * l.kernel * l.kernel + l.out_ch;
    return n;
  }
};

template <class T>
struct ParamGroup {
  std::string name;  // "F", "C", "G", "D", "Dp"
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;
  AdamState<T> adam;

  long long param_count() const {
    long long n = 0;
    for (const auto& p : params) n += static_cast<long long>(p.size());
    return n;
  }
};

struct BundleConfig {
  int height = 64;
  int width = 64;
  int n_classes = 5;
  std::array<int, 3> f_widths{32, 64, 64};  // f_widths[2] is the embedding width
  std::uint64_t seed = 1;
};

template <class T>
struct BoundGroup {
  std::vector<Tensor<T>> vars;  // tape-bound copies sharing the parameter buffers
};

template <class T>
struct NetworkBundle {
  BundleConfig cfg;
  NetworkDef def_f, def_c, def_g, def_d_trunk, def_d_patch, def_d_aux, def_dprime;
  ParamGroup<T> f, c, g, d, dprime;
  bool has_gd = false;
  bool has_dprime = false;

  int embed_ch() const { return cfg.f_widths[2]; }
};

namespace detail {

inline void check_spatial(int h, int w, const char* who) {
  if (h % 8 != 0 || w % 8 != 0)
    throw std::invalid_argument(std::string(who) + ": spatial size " + std::to_string(h) +
                                "x" + std::to_string(w) + " must be divisible by 8");
}

template <class T>
void append_layer_params(ParamGroup<T>& group, const NetworkDef& def,
                         std::uint64_t seed, long long& param_counter) {
  for (std::size_t li = 0; li < def.layers.size(); ++li) {
    const LayerSpec& l = def.layers[li];
    Tensor<T> w({l.out_ch, l.in_ch, l.kernel, l.kernel});
    RngStream rng(substream(seed, "init", static_cast<std::uint64_t>(param_counter++)));
    const double stddev = std::sqrt(2.0 / (double(l.in_ch) * l.kernel * l.kernel));
    for (auto& v : *w.data) v = static_cast<T>(rng.gaussian() * stddev);
    Tensor<T> b({l.out_ch});
    const std::string base = def.name + "." + std::to_string(li);
    group.names.push_back(base + ".w");
    group.params.push_back(std::move(w));
    group.names.push_back(base + ".b");
    group.params.push_back(std::move(b));
  }
}

}  // namespace detail

inline NetworkDef make_def_f(const BundleConfig& c) {
  const auto [w1, w2, w3] = std::tuple{c.f_widths[0], c.f_widths[1], c.f_widths[2]};
  NetworkDef d{"F",
               {{3, w1, 3, 1, 1, Act::LeakyRelu},
                {w1, w1, 3, 2, 1, Act::LeakyRelu},
                {w1, w2, 3, 1, 1, Act::LeakyRelu},
                {w2, w2, 3, 2, 1, Act::LeakyRelu},
                {w2, w3, 3, 1, 1, Act::LeakyRelu},
                {w3, w3, 3, 2, 1, Act::LeakyRelu}}};
  return d;
}

inline NetworkDef make_def_c(const BundleConfig& c) {
  const int w3 = c.f_widths[2];
  NetworkDef d{"C",
               {{w3, w3, 3, 1, 1, Act::LeakyRelu},
                {w3, c.n_classes, 3, 1, 1, Act::None}}};
  d.final_up = 8;
  d.final_up_mode = UpsampleMode::Bilinear;
  return d;
}

inline NetworkDef make_def_g(const BundleConfig& c) {
  const int w1 = c.f_widths[0], w2 = c.f_widths[1], w3 = c.f_widths[2];
  const int g2 = std::max(1, w2 / 2), g3 = std::max(1, w1 / 2);
  NetworkDef d{"G",
               {{w3, w3, 3, 1, 1, Act::Relu, 0.5, 2},
                {w3, g2, 3, 1, 1, Act::Relu, 0.5, 2},
                {g2, g3, 3, 1, 1, Act::Relu, 0.5, 2},
                {g3, 3, 3, 1, 1, Act::Tanh}}};
  return d;
}

inline NetworkDef make_def_d_trunk(const BundleConfig& c) {
  const auto [w1, w2, w3] = std::tuple{c.f_widths[0], c.f_widths[1], c.f_widths[2]};
  return NetworkDef{"D.trunk",
                    {{3, w1, 3, 2, 1, Act::LeakyRelu},
                     {w1, w2, 3, 2, 1, Act::LeakyRelu},
                     {w2, w3, 3, 2, 1, Act::LeakyRelu}}};
}

inline NetworkDef make_def_d_patch(const BundleConfig& c) {
  return NetworkDef{"D.patch", {{c.f_widths[2], 4, 1, 1, 0, Act::None}}};
}

inline NetworkDef make_def_d_aux(const BundleConfig& c) {
  const int w3 = c.f_widths[2];
  NetworkDef d{"D.aux",
               {{w3, w3, 3, 1, 1, Act::LeakyRelu},
                {w3, c.n_classes, 3, 1, 1, Act::None}}};
  d.final_up = 8;
  d.final_up_mode = UpsampleMode::Bilinear;
  return d;
}

inline NetworkDef make_def_dprime(const BundleConfig& c) {
  const int w3 = c.f_widths[2];
  return NetworkDef{"Dp",
                    {{w3, w3, 3, 1, 1, Act::LeakyRelu},
                     {w3, 2, 3, 1, 1, Act::None}}};
}

struct BundleParts {
  bool with_gd = true;
  bool with_dprime = false;
};

template <class T>
NetworkBundle<T> build_bundle(const BundleConfig& cfg, BundleParts parts = {}) {
  detail::check_spatial(cfg.height, cfg.width, "build_bundle");
  if (cfg.n_classes < 2) throw std::invalid_argument("build_bundle: need at least 2 classes");

  NetworkBundle<T> b;
  b.cfg = cfg;
  b.def_f = make_def_f(cfg);
  b.def_c = make_def_c(cfg);
  b.def_g = make_def_g(cfg);
  b.def_d_trunk = make_def_d_trunk(cfg);
  b.def_d_patch = make_def_d_patch(cfg);
  b.def_d_aux = make_def_d_aux(cfg);
  b.def_dprime = make_def_dprime(cfg);

  long long counter = 0;
  b.f.name = "F";
  detail::append_layer_params(b.f, b.def_f, cfg.seed, counter);
  b.c.name = "C";
  detail::append_layer_params(b.c, b.def_c, cfg.seed, counter);
  if (parts.with_gd) {
    b.g.name = "G";
    detail::append_layer_params(b.g, b.def_g, cfg.seed, counter);
    b.d.name = "D";
    detail::append_layer_params(b.d, b.def_d_trunk, cfg.seed, counter);
    detail::append_layer_params(b.d, b.def_d_patch, cfg.seed, counter);
    detail::append_layer_params(b.d, b.def_d_aux, cfg.seed, counter);
    b.has_gd = true;
  }
  if (parts.with_dprime) {
    b.dprime.name = "Dp";
    detail::append_layer_params(b.dprime, b.def_dprime, cfg.seed, counter);
    b.has_dprime = true;
  }

  // Group isolation: no parameter buffer or name may appear in two groups.
  std::vector<const void*> seen_ptr;
  std::vector<std::string> seen_name;
  for (const ParamGroup<T>* g : {&b.f, &b.c, &b.g, &b.d, &b.dprime}) {
    for (std::size_t i = 0; i < g->params.size(); ++i) {
      const void* p = g->params[i].data.get();
      for (const void* q : seen_ptr)
        if (p == q) throw std::logic_error("build_bundle: parameter shared between groups");
      for (const auto& n : seen_name)
        if (n == g->names[i]) throw std::logic_error("build_bundle: duplicate parameter name " + n);
      seen_ptr.push_back(p);
      seen_name.push_back(g->names[i]);
    }
  }
  return b;
}

// Runs def's layers against params[offset..]; two params (w, b) per layer.
template <class T>
Tensor<T> run_net(Tape<T>& tape, const NetworkDef& def,
                  const std::vector<Tensor<T>>& params, std::size_t offset,
                  const Tensor<T>& input, bool training = false,
                  RngStream* dropout_rng = nullptr) {
  Tensor<T> x = input;
  std::size_t pi = offset;
  for (const LayerSpec& l : def.layers) {
    if (l.up_before > 1) x = upsample(tape, x, l.up_before, UpsampleMode::Nearest);
    x = conv2d(tape, x, params.at(pi), params.at(pi + 1), l.stride, l.pad);
    pi += 2;
    switch (l.act) {
      case Act::None: break;
      case Act::Relu: x = relu(tape, x); break;
      case Act::LeakyRelu: x = leaky_relu(tape, x, T(0.2)); break;
      case Act::Tanh: x = tanh_op(tape, x); break;
    }
    if (l.dropout_p > 0.0 && training) {
      if (!dropout_rng)
        throw std::invalid_argument("run_net: training-mode dropout requires an rng stream");
      x = dropout(tape, x, l.dropout_p, true, *dropout_rng);
    }
  }
  if (def.final_up > 1) x = upsample(tape, x, def.final_up, def.final_up_mode);
  return x;
}

template <class T>
void check_image_input(const NetworkBundle<T>& b, const Tensor<T>& img, const char* who) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument(std::string(who) + ": expected a 3xHxW image");
  detail::check_spatial(img.dim(1), img.dim(2), who);
  (void)b;
}

// image [3,H,W] -> embedding [C_e, H/8, W/8]
template <class T>
Tensor<T> forward_F(Tape<T>& tape, const NetworkBundle<T>& b,
                    const std::vector<Tensor<T>>& fparams, const Tensor<T>& image) {
  check_image_input(b, image, "forward_F");
  return run_net(tape, b.def_f, fparams, 0, image);
}

// embedding -> segmentation logits [N_c, H, W]
template <class T>
Tensor<T> forward_C(Tape<T>& tape, const NetworkBundle<T>& b,
                    const std::vector<Tensor<T>>& cparams, const Tensor<T>& embedding) {
  if (embedding.rank() != 3 || embedding.dim(0) != b.embed_ch())
    throw std::invalid_argument("forward_C: embedding channel count mismatch");
  return run_net(tape, b.def_c, cparams, 0, embedding);
}

// embedding -> reconstruction [3, H, W] in [-1, 1]; eval mode is deterministic
template <class T>
Tensor<T> forward_G(Tape<T>& tape, const NetworkBundle<T>& b,
                    const std::vector<Tensor<T>>& gparams, const Tensor<T>& embedding,
                    bool training, RngStream* rng) {
  if (embedding.rank() != 3 || embedding.dim(0) != b.embed_ch())
    throw std::invalid_argument("forward_G: embedding channel count mismatch");
  return run_net(tape, b.def_g, gparams, 0, embedding, training, rng);
}

template <class T>
struct DiscOut {
  Tensor<T> patch;  // [4, H/8, W/8]
  Tensor<T> aux;    // [N_c, H, W]; empty when skipped
};

// image -> (patch logits, aux segmentation logits)
template <class T>
DiscOut<T> forward_D(Tape<T>& tape, const NetworkBundle<T>& b,
                     const std::vector<Tensor<T>>& dparams, const Tensor<T>& image,
                     bool want_aux = true) {
  check_image_input(b, image, "forward_D");
  const std::size_t trunk_n = 2 * b.def_d_trunk.layers.size();
  const std::size_t patch_n = 2 * b.def_d_patch.layers.size();
  Tensor<T> feat = run_net(tape, b.def_d_trunk, dparams, 0, image);
  DiscOut<T> out;
  out.patch = run_net(tape, b.def_d_patch, dparams, trunk_n, feat);
  if (want_aux)
    out.aux = run_net(tape, b.def_d_aux, dparams, trunk_n + patch_n, feat);
  return out;
}

// embedding -> 2-class domain logits (feature-space ablation discriminator)
template <class T>
Tensor<T> forward_Dprime(Tape<T>& tape, const NetworkBundle<T>& b,
                         const std::vector<Tensor<T>>& dpparams,
                         const Tensor<T>& embedding) {
  if (embedding.rank() != 3 || embedding.dim(0) != b.embed_ch())
    throw std::invalid_argument("forward_Dprime: embedding channel count mismatch");
  return run_net(tape, b.def_dprime, dpparams, 0, embedding);
}

// Eval-mode embedding descriptor: global average pool of F's output.
template <class T>
std::vector<T> feature_descriptor(const NetworkBundle<T>& b, const Tensor<T>& image) {
  Tape<T> tape;
  auto emb = forward_F(tape, b, b.f.params, image);
  auto pooled = global_avg_pool(tape, emb);
  return *pooled.data;
}

template <class T>
BoundGroup<T> bind_group(Tape<T>& tape, const ParamGroup<T>& g, bool requires_grad) {
  BoundGroup<T> out;
  out.vars.reserve(g.params.size());
  for (const auto& p : g.params) {
    Tensor<T> v = p;
    v.requires_grad = requires_grad;
    tape.leaf(v);
    out.vars.push_back(std::move(v));
  }
  return out;
}

template <class T>
void adam_step_group(ParamGroup<T>& g, Tape<T>& tape, const BoundGroup<T>& bound, T lr) {
  std::vector<const std::vector<T>*> grads;
  grads.reserve(bound.vars.size());
  for (const auto& v : bound.vars)
    grads.push_back(tape.has_grad(v.node) ? &tape.grad_view(v.node) : nullptr);
  adam_step(g.params, g.names, grads, g.adam, lr);
}

// Order-sensitive FNV over the raw parameter bytes; used by the phase-routing
// audits to prove which groups changed.
template <class T>
std::uint64_t group_checksum(const ParamGroup<T>& g) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : g.params) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p.ptr());
    for (std::size_t i = 0; i < p.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace segada
