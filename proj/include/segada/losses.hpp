#pragma once

// The loss algebra of the training scheme. Within-domain adversarial terms
// drive D and G, cross-domain terms drive F:
//
//   L_D = L^s_adv,D + L^t_adv,D + L^s_aux
//         real/fake classified in a domain-consistent manner, plus the
//         auxiliary pixel labeling of the *generated* source image
//   L_G = L^s_adv,G + L^t_adv,G + L^s_rec + L^t_rec
//         fakes pushed towards {src,tgt}-real, plus L1 reconstruction
//   L_F = L_seg + alpha * L^s_aux + beta * (L^s_adv,F + L^t_adv,F)
//         cross-domain: fake source -> tgt-real, fake target -> src-real
//
// All adversarial terms are per-pixel 4-class cross-entropy over the patch
// grid; the "pooled" flag averages the patch logits into a single 4-vector
// first (the no-patch-discriminator ablation).

#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>

#include "segada/networks.hpp"
#include "segada/tensor.hpp"

namespace segada {

struct LossWeights {
  double alpha = 0.1;  // aux weight in the F-update
  double beta = 0.1;   // adversarial weight in the F-update

  void validate() const {
    if (alpha < 0.0 || beta < 0.0)
      throw std::invalid_argument("loss weights alpha and beta must be non-negative");
  }
};

// K-class cross-entropy of a logit map against a constant target class.
template <class T>
Tensor<T> constant_target_ce(Tape<T>& tape, const Tensor<T>& logits, int target) {
  if (logits.rank() != 3)
    throw std::invalid_argument("constant_target_ce: logits must be rank 3");
  if (target < 0 || target >= logits.dim(0))
    throw std::invalid_argument("constant_target_ce: target class out of range");
  const int h = logits.dim(1), w = logits.dim(2);
  std::vector<std::uint8_t> tgt(static_cast<std::size_t>(h) * w,
                                static_cast<std::uint8_t>(target));
  return pixelwise_cross_entropy(tape, logits, tgt.data(), h, w, std::uint8_t(255));
}

// 4-class patch loss against one DomainClass, averaged over all patch cells.
template <class T>
Tensor<T> adv_patch_loss(Tape<T>& tape, const Tensor<T>& patch_logits,
                         DomainClass target) {
  if (patch_logits.rank() != 3 || patch_logits.dim(0) != 4)
    throw std::invalid_argument("adv_patch_loss: expected 4 logit channels, got " +
                                std::to_string(patch_logits.dim(0)));
  return constant_target_ce(tape, patch_logits, int(target));
}

// No-patch ablation: average the grid into one 4-vector before the CE.
template <class T>
Tensor<T> pool_patch_logits(Tape<T>& tape, const Tensor<T>& patch_logits) {
  return reshape(global_avg_pool(tape, patch_logits), {patch_logits.dim(0), 1, 1});
}

template <class T>
Tensor<T> adv_loss(Tape<T>& tape, const Tensor<T>& patch_logits, DomainClass target,
                   bool pooled) {
  return pooled ? adv_patch_loss(tape, pool_patch_logits(tape, patch_logits), target)
                : adv_patch_loss(tape, patch_logits, target);
}

template <class T>
struct LossSliceD {
  Tensor<T> adv_s, adv_t, aux, total;
};

// D-update loss. Fake inputs must already be detached from F/G.
template <class T>
LossSliceD<T> loss_D(Tape<T>& tape, const Tensor<T>& patch_real_s,
                     const Tensor<T>& patch_fake_s, const Tensor<T>& patch_real_t,
                     const Tensor<T>& patch_fake_t, const Tensor<T>& aux_fake_s,
                     const std::uint8_t* labels_s, int h, int w,
                     std::uint8_t void_id, bool pooled = false) {
  if (!labels_s)
    throw std::invalid_argument("loss_D: source labels are required for the aux term");
  LossSliceD<T> out;
  out.adv_s = add(tape, adv_loss(tape, patch_real_s, DomainClass::SrcReal, pooled),
                  adv_loss(tape, patch_fake_s, DomainClass::SrcFake, pooled));
  out.adv_t = add(tape, adv_loss(tape, patch_real_t, DomainClass::TgtReal, pooled),
                  adv_loss(tape, patch_fake_t, DomainClass::TgtFake, pooled));
  out.aux = pixelwise_cross_entropy(tape, aux_fake_s, labels_s, h, w, void_id);
  out.total = add(tape, add(tape, out.adv_s, out.adv_t), out.aux);
  return out;
}

template <class T>
struct LossSliceG {
  Tensor<T> adv_s, adv_t, rec_s, rec_t, total;
};

// G-update loss; D must be frozen so gradients reach G only.
template <class T>
LossSliceG<T> loss_G(Tape<T>& tape, const Tensor<T>& patch_fake_s,
                     const Tensor<T>& patch_fake_t, const Tensor<T>& recon_s,
                     const Tensor<T>& orig_s, const Tensor<T>& recon_t,
                     const Tensor<T>& orig_t, bool pooled = false) {
  LossSliceG<T> out;
  out.adv_s = adv_loss(tape, patch_fake_s, DomainClass::SrcReal, pooled);
  out.adv_t = adv_loss(tape, patch_fake_t, DomainClass::TgtReal, pooled);
  out.rec_s = l1_loss(tape, recon_s, orig_s);
  out.rec_t = l1_loss(tape, recon_t, orig_t);
  out.total = add(tape, add(tape, out.adv_s, out.adv_t),
                  add(tape, out.rec_s, out.rec_t));
  return out;
}

template <class T>
struct LossSliceF {
  Tensor<T> seg;
  Tensor<T> total;
  std::optional<Tensor<T>> aux;          // unweighted value, present when alpha > 0
  std::optional<Tensor<T>> adv_s, adv_t; // unweighted values, present when beta > 0
};

// F-update loss: supervised segmentation plus the domain-swapped adversarial
// terms routed through frozen G and D. aux/patch logits may be null whenever
// the corresponding weight is zero.
template <class T>
LossSliceF<T> loss_F(Tape<T>& tape, const Tensor<T>& seg_logits,
                     const std::uint8_t* labels_s, int h, int w, std::uint8_t void_id,
                     const Tensor<T>* aux_fake_s, const Tensor<T>* patch_fake_s,
                     const Tensor<T>* patch_fake_t, const LossWeights& weights,
                     bool pooled = false) {
  weights.validate();
  LossSliceF<T> out;
  out.seg = pixelwise_cross_entropy(tape, seg_logits, labels_s, h, w, void_id);
  out.total = out.seg;
  if (weights.alpha > 0.0) {
    if (!aux_fake_s)
      throw std::invalid_argument("loss_F: alpha > 0 requires the aux logits");
    out.aux = pixelwise_cross_entropy(tape, *aux_fake_s, labels_s, h, w, void_id);
    out.total = add(tape, out.total, scale(tape, *out.aux, T(weights.alpha)));
  }
  if (weights.beta > 0.0) {
    if (!patch_fake_s || !patch_fake_t)
      throw std::invalid_argument("loss_F: beta > 0 requires both patch logit maps");
    out.adv_s = adv_loss(tape, *patch_fake_s, DomainClass::TgtReal, pooled);
    out.adv_t = adv_loss(tape, *patch_fake_t, DomainClass::SrcReal, pooled);
    out.total = add(tape, out.total,
                    scale(tape, add(tape, *out.adv_s, *out.adv_t), T(weights.beta)));
  }
  return out;
}

// Per-iteration scalar record; absent fields stay empty in the CSV.
struct LossReport {
  std::optional<double> seg, aux_s, rec_s, rec_t;
  std::optional<double> adv_D_s, adv_D_t, adv_G_s, adv_G_t, adv_F_s, adv_F_t;
  std::optional<double> d_total, g_total, f_total;

  static std::string csv_header() {
    return "iteration,seg,aux_s,rec_s,rec_t,adv_D_s,adv_D_t,adv_G_s,adv_G_t,"
           "adv_F_s,adv_F_t,D_total,G_total,F_total";
  }

  std::string csv_row(long long iteration) const {
    std::string row = std::to_string(iteration);
    for (const auto* f : {&seg, &aux_s, &rec_s, &rec_t, &adv_D_s, &adv_D_t,
                          &adv_G_s, &adv_G_t, &adv_F_s, &adv_F_t, &d_total,
                          &g_total, &f_total}) {
      row += ',';
      if (f->has_value()) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.9g", **f);
        row += buf;
      }
    }
    return row;
  }
};

}  // namespace segada
