"""Training objectives and their per-stage composition.

Stage 1 fits color and geometry (reconstruction + sparsity), stage 2 adds
the normal supervision and smoothness terms, stage 3 adds the diffuse prior
with its decaying weight. The sparsity functional is the binary entropy
-(x log x + (1-x) log(1-x)), which is bounded, vanishes at 0 and 1, and
drives opacities and light visibilities toward opaque-or-clear.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .renderer import FrameBuffers, depth_to_pseudo_normal

SSIM_C1 = 1e-4   # (0.01)^2 at unit dynamic range
SSIM_C2 = 9e-4   # (0.03)^2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SMOOTH_WINDOW = 9
SMOOTH_SIGMA = 1.5
ENTROPY_CLAMP = 1e-4


@dataclass
class LossWeights:
    dssim_mix: float = 0.2            # lambda: share of D-SSIM in the rgb loss
    normal_pred: float = 0.1
    normal_residual: float = 0.001
    flatten: float = 1e-5
    opacity_sparse: float = 0.001
    visibility_sparse: float = 0.01
    smooth: float = 0.1
    diffuse_start: float = 0.02
    diffuse_end: float = 0.002
    diffuse_decay_iters: int = 1000


def diffuse_weight_at(iteration: int, weights: LossWeights) -> float:
    """Exponential decay from diffuse_start to diffuse_end, then constant."""
    frac = min(max(iteration, 0), weights.diffuse_decay_iters) / weights.diffuse_decay_iters
    return weights.diffuse_start * (weights.diffuse_end / weights.diffuse_start) ** frac


@lru_cache(maxsize=32)
def _band_matrix(n: int, window: int, sigma: float) -> np.ndarray:
    """Columns are the 1-D Gaussian placed at each valid output position."""
    k = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-0.5 * (k / sigma) ** 2)
    g /= g.sum()
    m = np.zeros((n, n - window + 1))
    for i in range(n - window + 1):
        m[i:i + window, i] = g
    return m


def _filter_valid(x, window: int, sigma: float):
    """Separable valid-mode Gaussian filtering of a 2-D map."""
    h, w = np.shape(ad.val(x))
    mh = _band_matrix(h, window, sigma)
    mw = _band_matrix(w, window, sigma)
    return ad.matmul(ad.matmul(mh.T, x), mw)


def _blur_same(x, window: int, sigma: float):
    """Same-size Gaussian blur with edge-replicate padding."""
    h, w = np.shape(ad.val(x))
    pad = window // 2
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    xp = ad.take(ad.take(x, rows, axis=0), cols, axis=1)
    return _filter_valid(xp, window, sigma)


def _channels(img):
    h, w = np.shape(ad.val(img))[:2]
    if np.ndim(ad.val(img)) == 2:
        return [img]
    return [ad.reshape(ad.take(img, [c], axis=2), (h, w)) for c in range(3)]


def ssim_index(a, b, c1: float = SSIM_C1, c2: float = SSIM_C2):
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), channel-averaged.

    Shared by the reconstruction loss and the evaluation metric; inputs of
    unit dynamic range."""
    if np.shape(ad.val(a)) != np.shape(ad.val(b)):
        raise ValueError("ssim inputs must share dimensions")
    chans_a, chans_b = _channels(a), _channels(b)
    total = 0.0
    for xa, xb in zip(chans_a, chans_b):
        mu_a = _filter_valid(xa, SSIM_WINDOW, SSIM_SIGMA)
        mu_b = _filter_valid(xb, SSIM_WINDOW, SSIM_SIGMA)
        var_a = ad.sub(_filter_valid(ad.mul(xa, xa), SSIM_WINDOW, SSIM_SIGMA),
                       ad.mul(mu_a, mu_a))
        var_b = ad.sub(_filter_valid(ad.mul(xb, xb), SSIM_WINDOW, SSIM_SIGMA),
                       ad.mul(mu_b, mu_b))
        cov = ad.sub(_filter_valid(ad.mul(xa, xb), SSIM_WINDOW, SSIM_SIGMA),
                     ad.mul(mu_a, mu_b))
        lum = ad.div(ad.add(ad.mul(2.0, ad.mul(mu_a, mu_b)), c1),
                     ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), c1))
        struct = ad.div(ad.add(ad.mul(2.0, cov), c2),
                        ad.add(ad.add(var_a, var_b), c2))
        total = ad.add(total, ad.mean(ad.mul(lum, struct)))
    return ad.div(total, float(len(chans_a)))


def rgb_loss(rendered, target, weights: LossWeights):
    """(1 - lambda) L1 + lambda (1 - SSIM)/2."""
    if np.shape(ad.val(rendered)) != np.shape(ad.val(target)):
        raise ValueError("rendered and target dimensions differ")
    lam = weights.dssim_mix
    l1 = ad.mean(ad.absolute(ad.sub(rendered, target)))
    if lam == 0.0:
        return l1
    dssim = ad.div(ad.sub(1.0, ssim_index(rendered, target)), 2.0)
    return ad.add(ad.mul(1.0 - lam, l1), ad.mul(lam, dssim))


def normal_losses(predicted_map, pseudo_map, valid_mask, residual_out,
                  residual_in, log_scales, weights: LossWeights):
    """Pseudo-normal supervision + residual shrinkage + flattening."""
    d = ad.sub(pseudo_map, predicted_map)
    sq = ad.sum_(ad.mul(d, d), axis=-1)
    valid = np.asarray(valid_mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid:
        pred_term = ad.div(ad.sum_(ad.where(valid, sq, 0.0)), float(n_valid))
    else:
        pred_term = 0.0
    res = ad.add(ad.sum_(ad.mul(residual_out, residual_out), axis=-1),
                 ad.sum_(ad.mul(residual_in, residual_in), axis=-1))
    res_term = ad.mean(res)
    flat_term = ad.mean(ad.min_reduce(ad.exp(log_scales), axis=1))
    return ad.add(ad.add(ad.mul(weights.normal_pred, pred_term),
                         ad.mul(weights.normal_residual, res_term)),
                  ad.mul(weights.flatten, flat_term))


def _binary_entropy(x):
    xc = ad.clamp(x, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    return ad.neg(ad.add(ad.mul(xc, ad.log(xc)),
                         ad.mul(ad.sub(1.0, xc), ad.log(ad.sub(1.0, xc)))))


def sparse_losses(opacities, light_visibilities, weights: LossWeights):
    """Binary-entropy push toward 0/1 for opacities and light visibilities."""
    total = ad.mul(weights.opacity_sparse, ad.mean(_binary_entropy(opacities)))
    if light_visibilities is not None and np.size(ad.val(light_visibilities)):
        total = ad.add(total, ad.mul(weights.visibility_sparse,
                                     ad.mean(_binary_entropy(light_visibilities))))
    return total


def smooth_loss(buffers: FrameBuffers, weights: LossWeights):
    """Mean L1 distance of each component map from its own (stop-gradient)
    9x9 Gaussian blur, summed over the normal map and the three components."""
    total = 0.0
    for img in (buffers.normal, buffers.ambient, buffers.diffuse, buffers.specular):
        for ch in _channels(img):
            blurred = ad.stop_gradient(_blur_same(ch, SMOOTH_WINDOW, SMOOTH_SIGMA))
            total = ad.add(total, ad.mean(ad.absolute(ad.sub(ch, blurred))))
    return ad.mul(weights.smooth, total)


def diffuse_prior_loss(ambient_colors, diffuse_colors, weight: float):
    """Penalty tying diffuse color to a per-channel multiple of ambient.

    The channel scale s_k solves the least-squares fit in closed form, with
    the ambient factor stop-gradiented and a guarded denominator."""
    num = ad.sum_(ad.mul(ad.stop_gradient(ambient_colors), diffuse_colors), axis=0)
    den = ad.maximum(ad.sum_(ad.mul(diffuse_colors, diffuse_colors), axis=0), 1e-12)
    s = ad.div(num, den)
    resid = ad.sub(ambient_colors, ad.mul(s, diffuse_colors))
    n = np.shape(ad.val(ambient_colors))[0]
    return ad.mul(weight, ad.div(ad.sum_(ad.mul(resid, resid)), float(n)))


def stage_loss_terms(stage: int, buffers: FrameBuffers, target, view, camera,
                     weights: LossWeights, iteration: int = 0,
                     visibilities=None) -> dict:
    """Named loss terms for one stage; their sum is the stage objective."""
    if stage not in (1, 2, 3):
        raise ValueError(f"unknown stage {stage}")
    terms = {"rgb": rgb_loss(buffers.composite, target, weights),
             "sparse": sparse_losses(view.opacity, visibilities, weights)}
    if stage >= 2:
        pseudo, valid = depth_to_pseudo_normal(buffers.depth, camera,
                                               alpha=buffers.alpha)
        terms["normal"] = normal_losses(buffers.normal, pseudo, valid,
                                        view.normal_residual_out,
                                        view.normal_residual_in,
                                        view.log_scale, weights)
        terms["smooth"] = smooth_loss(buffers, weights)
    if stage == 3:
        terms["diffuse"] = diffuse_prior_loss(
            view.ambient_color, view.diffuse_color,
            diffuse_weight_at(iteration, weights))
    return terms


def stage_loss(stage: int, buffers: FrameBuffers, target, view, camera,
               weights: LossWeights, iteration: int = 0, visibilities=None):
    """Per-stage objective over one rendered frame.

    Stages 1 and 2 shade visibility-free, so callers pass visibilities=None
    there; stage 3 supplies the per-Gaussian light transmittances (or None
    for its shadow-free variant).
    """
    terms = stage_loss_terms(stage, buffers, target, view, camera, weights,
                             iteration, visibilities)
    total = 0.0
    for t in terms.values():
        total = ad.add(total, t)
    return total
