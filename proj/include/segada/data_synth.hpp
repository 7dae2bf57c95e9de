#pragma once

// Procedural generator of appearance-shifted segmentation domains. All three
// domains share the label geometry machinery (scene layout: ground, sky band,
// building rectangles, circular objects, thin poles) and differ only in
// rendering style, so for matched seeds the label maps are identical across
// domains while the images are not. Images are quantized to u8 at creation
// time, making the on-disk "SGDS" round trip bit-exact by construction.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "segada/rng.hpp"
#include "segada/tensor.hpp"

namespace segada {

inline constexpr std::uint8_t kVoidLabel = 255;

enum class Domain : std::uint8_t { Source = 0, Target = 1, Third = 2 };

inline const char* domain_name(Domain d) {
  switch (d) {
    case Domain::Source: return "source";
    case Domain::Target: return "target";
    case Domain::Third: return "third";
  }
  return "?";
}

// Label geometry knobs, shared by all domains. Classes:
//   0 ground, 1 sky band, 2 building rectangles, 3 circular objects,
//   4 thin poles; boundary pixels of buildings/circles become void.
struct SceneParams {
  int height = 64;
  int width = 64;
  int n_classes = 5;
  double horizon_lo = 0.28, horizon_hi = 0.42;
  int buildings_lo = 1, buildings_hi = 3;
  double building_w_lo = 0.15, building_w_hi = 0.30;
  double building_h_lo = 0.20, building_h_hi = 0.45;
  int circles_lo = 1, circles_hi = 3;
  double circle_r_lo = 0.06, circle_r_hi = 0.12;
  int poles_lo = 2, poles_hi = 4;
  double pole_w = 0.035, pole_h_lo = 0.25, pole_h_hi = 0.50;
  // expected per-class pixel fractions at the defaults (measured over 10k
  // seeds); the generator test checks generated data stays within +-20%
  std::array<double, 5> target_class_freq{0.591, 0.215, 0.078, 0.036, 0.038};
};

// Per-domain appearance: flat per-class colors plus sinusoidal texture, a
// vertical brightness ramp and white noise.
struct DomainStyle {
  std::array<std::array<float, 3>, 5> base_color;
  float tex_amp = 0.0f;
  float tex_freq = 0.0f;
  float tex_phase = 0.0f;
  float tex_angle = 0.0f;
  float grad_strength = 0.0f;
  float noise_sigma = 0.0f;
};

inline DomainStyle source_style() {
  DomainStyle s;
  s.base_color = {{{-0.55f, 0.15f, -0.60f},    // ground: dark green
                   {-0.60f, -0.10f, 0.75f},    // sky: blue
                   {0.45f, -0.05f, -0.35f},    // building: red-brown
                   {0.70f, 0.55f, -0.50f},     // circle: yellow
                   {-0.75f, -0.75f, -0.75f}}}; // pole: near-black
  s.tex_amp = 0.08f;
  s.tex_freq = 5.0f;
  s.tex_phase = 0.0f;
  s.tex_angle = 0.35f;
  s.grad_strength = 0.15f;
  s.noise_sigma = 0.03f;
  return s;
}

inline DomainStyle target_style() {
  DomainStyle s;
  s.base_color = {{{0.50f, 0.30f, -0.10f},     // ground: sand
                   {0.75f, 0.25f, -0.30f},     // sky: sunset orange
                   {-0.40f, 0.05f, 0.55f},     // building: blue-grey
                   {-0.60f, 0.60f, 0.60f},     // circle: cyan
                   {0.55f, 0.55f, 0.55f}}};    // pole: light grey
  s.tex_amp = 0.18f;
  s.tex_freq = 9.0f;
  s.tex_phase = 2.1f;
  s.tex_angle = -0.6f;
  s.grad_strength = -0.25f;
  s.noise_sigma = 0.06f;
  return s;
}

inline DomainStyle third_style() {
  DomainStyle s;
  s.base_color = {{{-0.10f, -0.45f, 0.35f},    // ground: violet
                   {0.10f, 0.65f, 0.20f},      // sky: green
                   {0.65f, 0.45f, 0.15f},      // building: tan
                   {-0.20f, -0.70f, -0.20f},   // circle: dark green
                   {-0.10f, 0.10f, 0.75f}}};   // pole: blue
  s.tex_amp = 0.12f;
  s.tex_freq = 7.0f;
  s.tex_phase = 4.0f;
  s.tex_angle = 1.2f;
  s.grad_strength = 0.30f;
  s.noise_sigma = 0.045f;
  return s;
}

struct LabeledSample {
  std::shared_ptr<std::vector<float>> image;  // 3xHxW in [-1,1], u8-quantized
  std::vector<std::uint8_t> labels;           // HxW class ids, 255 = void
  Domain domain = Domain::Source;
};

inline std::uint8_t quantize_unit(float x) {
  const float v = x < -1.0f ? -1.0f : (x > 1.0f ? 1.0f : x);
  long q = std::lround((v + 1.0f) * 127.5f);
  if (q < 0) q = 0;
  if (q > 255) q = 255;
  return static_cast<std::uint8_t>(q);
}

inline float dequantize_unit(std::uint8_t q) {
  return float(q) / 127.5f - 1.0f;
}

namespace detail {

inline std::vector<std::uint8_t> render_geometry(std::uint64_t seed,
                                                 const SceneParams& p) {
  const int h = p.height, w = p.width;
  std::vector<std::uint8_t> lab(static_cast<std::size_t>(h) * w);
  RngStream geo(substream(seed, "geometry"));

  const int horizon = int(std::lround(h * geo.uniform(p.horizon_lo, p.horizon_hi)));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      lab[static_cast<std::size_t>(y) * w + x] = y < horizon ? 1 : 0;

  const int nb = geo.uniform_int(p.buildings_lo, p.buildings_hi);
  for (int i = 0; i < nb; ++i) {
    const int bw = std::max(2, int(std::lround(w * geo.uniform(p.building_w_lo, p.building_w_hi))));
    const int bh = std::max(2, int(std::lround(h * geo.uniform(p.building_h_lo, p.building_h_hi))));
    const int x0 = geo.uniform_int(0, std::max(0, w - bw));
    for (int y = std::max(0, horizon - bh); y < horizon; ++y)
      for (int x = x0; x < std::min(w, x0 + bw); ++x)
        lab[static_cast<std::size_t>(y) * w + x] = 2;
  }

  const int nc = geo.uniform_int(p.circles_lo, p.circles_hi);
  for (int i = 0; i < nc; ++i) {
    const int r = std::max(2, int(std::lround(h * geo.uniform(p.circle_r_lo, p.circle_r_hi))));
    const int cy_lo = std::min(horizon + r, h - 1 - r);
    const int cy = geo.uniform_int(cy_lo, std::max(cy_lo, h - 1 - r));
    const int cx = geo.uniform_int(r, std::max(r, w - 1 - r));
    for (int y = std::max(0, cy - r); y <= std::min(h - 1, cy + r); ++y)
      for (int x = std::max(0, cx - r); x <= std::min(w - 1, cx + r); ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
          lab[static_cast<std::size_t>(y) * w + x] = 3;
  }

  const int np = geo.uniform_int(p.poles_lo, p.poles_hi);
  const int pw = std::max(1, int(std::lround(w * p.pole_w)));
  for (int i = 0; i < np; ++i) {
    const int ph = int(std::lround(h * geo.uniform(p.pole_h_lo, p.pole_h_hi)));
    const int x0 = geo.uniform_int(0, std::max(0, w - pw));
    const int y1 = std::min(h, horizon + h / 10);
    for (int y = std::max(0, horizon - ph); y < y1; ++y)
      for (int x = x0; x < std::min(w, x0 + pw); ++x)
        lab[static_cast<std::size_t>(y) * w + x] = 4;
  }
  return lab;
}

}  // namespace detail

// Labels depend only on (seed, scene); the style touches nothing but the
// rendering, so matched seeds give identical label maps in every domain.
inline LabeledSample gen_sample(std::uint64_t seed, const SceneParams& scene,
                                const DomainStyle& style, Domain domain) {
  const int h = scene.height, w = scene.width;
  if (h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16)
    throw std::invalid_argument("gen_sample: image size must be >=16 and divisible by 8");
  if (scene.n_classes != 5)
    throw std::invalid_argument("gen_sample: the scene generator draws exactly 5 classes");

  const std::vector<std::uint8_t> render_labels = detail::render_geometry(seed, scene);

  LabeledSample out;
  out.domain = domain;
  out.labels = render_labels;
  // boundary pixels of buildings and circles become void (poles are too thin)
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t c = render_labels[static_cast<std::size_t>(y) * w + x];
      if (c != 2 && c != 3) continue;
      const bool edge =
          (y > 0 && render_labels[static_cast<std::size_t>(y - 1) * w + x] != c) ||
          (y < h - 1 && render_labels[static_cast<std::size_t>(y + 1) * w + x] != c) ||
          (x > 0 && render_labels[static_cast<std::size_t>(y) * w + x - 1] != c) ||
          (x < w - 1 && render_labels[static_cast<std::size_t>(y) * w + x + 1] != c);
      if (edge) out.labels[static_cast<std::size_t>(y) * w + x] = kVoidLabel;
    }

  out.image = std::make_shared<std::vector<float>>(static_cast<std::size_t>(3) * h * w);
  RngStream noise(substream(seed, "noise"));
  const float ca = std::cos(style.tex_angle), sa = std::sin(style.tex_angle);
  const float two_pi = 6.2831853f;
  const float scale = float(std::max(h, w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t c = render_labels[static_cast<std::size_t>(y) * w + x];
      const float tex =
          style.tex_amp *
          std::sin(two_pi * style.tex_freq * (x * ca + y * sa) / scale +
                   style.tex_phase + 1.7f * float(c));
      const float ramp = style.grad_strength * (float(y) / float(h - 1) - 0.5f);
      for (int ch = 0; ch < 3; ++ch) {
        const float n = style.noise_sigma * float(noise.gaussian());
        const float v = style.base_color[c][static_cast<std::size_t>(ch)] + tex + ramp + n;
        (*out.image)[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            dequantize_unit(quantize_unit(v));
      }
    }
  return out;
}

struct Dataset {
  int h = 0, w = 0, n_classes = 0;
  Domain domain = Domain::Source;
  std::vector<LabeledSample> samples;
  mutable long long label_reads = 0;  // taint counter for the leakage audit

  std::size_t size() const { return samples.size(); }

  Tensor<float> image(std::size_t i) const {
    Tensor<float> t;
    t.shape = {3, h, w};
    t.data = samples.at(i).image;
    return t;
  }

  const std::vector<std::uint8_t>& labels(std::size_t i) const {
    ++label_reads;
    return samples.at(i).labels;
  }
};

// Image-only access to a dataset whose labels are withheld during training.
class UnlabeledView {
 public:
  UnlabeledView() = default;
  explicit UnlabeledView(const Dataset* ds) : ds_(ds) {}

  std::size_t size() const { return ds_->size(); }
  int height() const { return ds_->h; }
  int width() const { return ds_->w; }
  Tensor<float> image(std::size_t i) const { return ds_->image(i); }

  [[noreturn]] const std::vector<std::uint8_t>& labels(std::size_t) const {
    throw std::logic_error(
        "target labels are withheld from training; use the labeled target "
        "view (variant target_only) for the supervised upper bound");
  }

  const Dataset* dataset() const { return ds_; }

 private:
  const Dataset* ds_ = nullptr;
};

// ------------------------- SGDS binary format -----------------------------
// magic "SGDS", version u16, count u32, H u32, W u32, N_c u8, domain u8,
// then per sample: image u8[3*H*W] (x -> round((x+1)*127.5)), labels u8[H*W].
// All integers little-endian.

namespace detail {

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xFF));
  s.push_back(char(v >> 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw std::runtime_error(std::string("truncated file while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return std::uint8_t(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = std::uint16_t(std::uint8_t(buf[pos])) |
                      std::uint16_t(std::uint8_t(buf[pos + 1])) << 8;
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, buf.data() + pos, n);
    pos += n;
  }
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace detail

inline constexpr std::uint16_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, const Dataset& ds) {
  for (const auto& s : ds.samples) {
    if (int(s.labels.size()) != ds.h * ds.w ||
        int(s.image->size()) != 3 * ds.h * ds.w || s.domain != ds.domain)
      throw std::invalid_argument("write_dataset: inhomogeneous sample in dataset");
  }
  std::string out;
  out.reserve(16 + ds.samples.size() * std::size_t(4) * ds.h * ds.w);
  out += "SGDS";
  detail::put_u16(out, kDatasetVersion);
  detail::put_u32(out, std::uint32_t(ds.samples.size()));
  detail::put_u32(out, std::uint32_t(ds.h));
  detail::put_u32(out, std::uint32_t(ds.w));
  out.push_back(char(std::uint8_t(ds.n_classes)));
  out.push_back(char(std::uint8_t(ds.domain)));
  for (const auto& s : ds.samples) {
    for (float v : *s.image) out.push_back(char(quantize_unit(v)));
    for (std::uint8_t l : s.labels) out.push_back(char(l));
  }
  detail::write_file_bytes(path, out);
}

inline Dataset read_dataset(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, "SGDS", 4) != 0)
    throw std::runtime_error("SGDS magic mismatch in " + path);
  const std::uint16_t version = r.u16("version");
  if (version != kDatasetVersion)
    throw std::runtime_error("unsupported SGDS version " + std::to_string(version) +
                             " in " + path);
  Dataset ds;
  const std::uint32_t count = r.u32("sample count");
  ds.h = int(r.u32("height"));
  ds.w = int(r.u32("width"));
  ds.n_classes = int(r.u8("class count"));
  ds.domain = Domain(r.u8("domain tag"));
  const std::size_t img_n = std::size_t(3) * ds.h * ds.w;
  const std::size_t lab_n = std::size_t(ds.h) * ds.w;
  ds.samples.reserve(count);
  std::vector<std::uint8_t> img_q(img_n);
  for (std::uint32_t i = 0; i < count; ++i) {
    LabeledSample s;
    s.domain = ds.domain;
    r.raw(img_q.data(), img_n, "image payload");
    s.image = std::make_shared<std::vector<float>>(img_n);
    for (std::size_t j = 0; j < img_n; ++j) (*s.image)[j] = dequantize_unit(img_q[j]);
    s.labels.resize(lab_n);
    r.raw(s.labels.data(), lab_n, "label payload");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ------------------------------ splits ------------------------------------

struct DataConfig {
  std::uint64_t seed = 12345;
  SceneParams scene;
  int n_source_train = 800;
  int n_source_val = 100;
  int n_target_train = 800;
  int n_target_test = 200;
  int n_third_test = 200;
  DomainStyle style_source = source_style();
  DomainStyle style_target = target_style();
  DomainStyle style_third = third_style();
};

struct SeedRange {
  std::uint64_t begin = 0;
  std::uint64_t count = 0;
  std::uint64_t end() const { return begin + count; }
};

struct SplitPlan {
  SeedRange source_train, source_val, target_train, target_test, third_test;

  std::array<const SeedRange*, 5> all() const {
    return {&source_train, &source_val, &target_train, &target_test, &third_test};
  }
};

inline SplitPlan default_split_plan(const DataConfig& cfg) {
  SplitPlan p;
  std::uint64_t at = 0;
  auto take = [&at](int n) {
    SeedRange r{at, std::uint64_t(n)};
    at += std::uint64_t(n);
    return r;
  };
  p.source_train = take(cfg.n_source_train);
  p.source_val = take(cfg.n_source_val);
  p.target_train = take(cfg.n_target_train);
  p.target_test = take(cfg.n_target_test);
  p.third_test = take(cfg.n_third_test);
  return p;
}

inline void validate_split_plan(const SplitPlan& plan) {
  const auto rs = plan.all();
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = i + 1; j < rs.size(); ++j) {
      const SeedRange* a = rs[i];
      const SeedRange* b = rs[j];
      if (a->count == 0 || b->count == 0) continue;
      if (a->begin < b->end() && b->begin < a->end())
        throw std::invalid_argument("overlapping seed ranges between splits");
    }
}

struct Splits {
  Dataset source_train, source_val, target_train, target_test, third_test;
};

inline Dataset make_split(const DataConfig& cfg, const SeedRange& range,
                          const DomainStyle& style, Domain domain) {
  Dataset ds;
  ds.h = cfg.scene.height;
  ds.w = cfg.scene.width;
  ds.n_classes = cfg.scene.n_classes;
  ds.domain = domain;
  ds.samples.reserve(range.count);
  for (std::uint64_t j = 0; j < range.count; ++j)
    ds.samples.push_back(gen_sample(substream(cfg.seed, "data", range.begin + j),
                                    cfg.scene, style, domain));
  return ds;
}

inline Splits make_splits(const DataConfig& cfg, const SplitPlan& plan) {
  validate_split_plan(plan);
  Splits s;
  s.source_train = make_split(cfg, plan.source_train, cfg.style_source, Domain::Source);
  s.source_val = make_split(cfg, plan.source_val, cfg.style_source, Domain::Source);
  s.target_train = make_split(cfg, plan.target_train, cfg.style_target, Domain::Target);
  s.target_test = make_split(cfg, plan.target_test, cfg.style_target, Domain::Target);
  s.third_test = make_split(cfg, plan.third_test, cfg.style_third, Domain::Third);
  return s;
}

inline Splits make_splits(const DataConfig& cfg) {
  return make_splits(cfg, default_split_plan(cfg));
}

}  // namespace segada
