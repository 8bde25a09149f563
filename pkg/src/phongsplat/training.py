"""Three-stage optimization with Adam and bilevel meta-training.

Stage 1 fits geometry and ambient color, stage 2 unfreezes normal residuals
against depth-derived pseudo-normals, stage 3 trains everything through a
meta loop over lighting tasks: per task, one plain gradient step adapts the
Phong attributes on a support capture (visibility-free shading), a second
step adapts the shadow coefficients (shadowed shading), and the query loss
of the adapted parameters is backpropagated to the shared parameters, inner
steps included.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .losses import LossWeights, stage_loss_terms
from .params import (ATTRIBUTES, ATTR_OFFSETS, ATTR_WIDTHS, PHONG_ATTRS,
                     POINT_SIZE, SHADOW_ATTRS, ParamSet, SceneView, attr_mask)
from .pipeline import RenderSettings, render_frame
from .scene import Dataset, save_checkpoint
from .visibility import build_bvh

log = logging.getLogger("phongsplat.train")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

STAGE1_ATTRS = ("position", "rotation", "log_scale", "opacity_logit", "ambient_color")
STAGE2_ATTRS = STAGE1_ATTRS + ("normal_residual_out", "normal_residual_in")


@dataclass
class TrainConfig:
    stage_iters: tuple = (10_000, 5_000, 2_000)
    tasks_per_meta_iter: int = 4          # m in the meta loop
    num_tasks: int = 8
    support_fraction: float = 0.5
    inner_lr_phong: float = 1e-8          # alpha_1
    inner_lr_shadow: float = 1e-8         # alpha_2
    first_order: bool = False             # stop gradients at the adapted params
    disable_shadows: bool = False         # ablation: stage 3 without visibility
    seed: int = 0
    shininess: float = 32.0
    background: tuple = (0.0, 0.0, 0.0)
    bvh_rebuild_interval: int = 100
    densify: bool = False
    densify_interval: int = 500
    prune_opacity: float = 0.005
    clone_grad_threshold: float = 2e-4
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3
    lr_shadow: float = 5e-3
    log_interval: int = 50
    checkpoint_interval: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)

    def attr_lr_row(self, progress: float) -> np.ndarray:
        """Per-attribute learning rates; position decays exponentially."""
        pos = self.lr_position * (self.lr_position_final / self.lr_position) ** min(
            max(progress, 0.0), 1.0)
        by_attr = {"position": pos, "rotation": self.lr_rotation,
                   "log_scale": self.lr_scale, "opacity_logit": self.lr_opacity,
                   "ambient_color": self.lr_color, "normal_residual_out": self.lr_color,
                   "normal_residual_in": self.lr_color, "diffuse_color": self.lr_color,
                   "specular_coeff": self.lr_color, "shadow_coeff_logit": self.lr_shadow}
        row = np.empty(POINT_SIZE)
        for name, w in ATTRIBUTES:
            off = ATTR_OFFSETS[name]
            row[off:off + w] = by_attr[name]
        return row


class AdamState:
    """First/second moment vectors plus the per-group learning-rate schedule."""

    def __init__(self, n_points: int, config: TrainConfig, total_iters: int):
        self.m = np.zeros(n_points * POINT_SIZE)
        self.v = np.zeros(n_points * POINT_SIZE)
        self.step = 0
        self.config = config
        self.total_iters = max(int(total_iters), 1)
        self.beta1, self.beta2, self.eps = ADAM_BETA1, ADAM_BETA2, ADAM_EPS

    def lr_vector(self) -> np.ndarray:
        row = self.config.attr_lr_row(self.step / self.total_iters)
        return np.tile(row, self.m.size // POINT_SIZE)

    def resize(self, keep: np.ndarray, n_new: int = 0):
        """Drop pruned rows and append zeroed rows for clones."""
        m = self.m.reshape(-1, POINT_SIZE)[keep]
        v = self.v.reshape(-1, POINT_SIZE)[keep]
        if n_new:
            m = np.concatenate([m, np.zeros((n_new, POINT_SIZE))])
            v = np.concatenate([v, np.zeros((n_new, POINT_SIZE))])
        self.m, self.v = m.reshape(-1), v.reshape(-1)


def _describe_param(idx: int) -> str:
    pid, off = divmod(int(idx), POINT_SIZE)
    for name, w in ATTRIBUTES:
        if ATTR_OFFSETS[name] <= off < ATTR_OFFSETS[name] + w:
            return f"point {pid} {name}[{off - ATTR_OFFSETS[name]}]"
    return f"offset {idx}"


def adam_step(state: AdamState, params: ParamSet, gradient: np.ndarray) -> ParamSet:
    """Bias-corrected Adam update with per-attribute-group learning rates."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ValueError("gradient length does not match parameters")
    bad = ~np.isfinite(g)
    if bad.any():
        raise FloatingPointError(
            f"non-finite gradient at {_describe_param(np.flatnonzero(bad)[0])}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    update = state.lr_vector() * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamSet(params.values - update)


def renormalize_rotations(params: ParamSet) -> None:
    rot = params.attr("rotation")
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# lighting tasks

@dataclass
class LightTask:
    task_id: int
    members: list
    support: list
    query: list


def partition_tasks(dataset: Dataset, num_tasks: int, support_fraction: float,
                    seed: int) -> list[LightTask]:
    """Cluster captures by light position (seeded k-means, 50 iterations),
    then split each cluster into disjoint support/query subsets."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 captures to build tasks")
    if not 1 <= num_tasks <= n:
        raise ValueError("num_tasks must lie in [1, n_captures]")
    if not 0.0 < support_fraction < 1.0:
        raise ValueError("support_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    lights = np.stack([c.light.position for c in dataset.captures])

    centroids = lights[rng.choice(n, size=num_tasks, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(50):
        d2 = np.sum((lights[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)  # ties: lowest cluster index
        for k in range(num_tasks):
            members = lights[assign == k]
            if members.size:
                centroids[k] = members.mean(axis=0)

    # fold clusters that are too small to split into their nearest neighbor
    sizes = np.bincount(assign, minlength=num_tasks)
    alive = [k for k in range(num_tasks) if sizes[k] > 0]
    for k in list(alive):
        if 0 < sizes[k] < 2 and len(alive) > 1:
            others = [j for j in alive if j != k]
            d = [np.sum((centroids[k] - centroids[j]) ** 2) for j in others]
            tgt = others[int(np.argmin(d))]
            assign[assign == k] = tgt
            sizes[tgt] += sizes[k]
            sizes[k] = 0
            alive.remove(k)

    tasks = []
    for tid, k in enumerate(sorted(alive)):
        members = np.flatnonzero(assign == k)
        shuffled = members[rng.permutation(members.size)]
        n_sup = min(int(np.ceil(support_fraction * members.size)), members.size - 1)
        n_sup = max(n_sup, 1)
        tasks.append(LightTask(task_id=tid,
                               members=sorted(members.tolist()),
                               support=sorted(shuffled[:n_sup].tolist()),
                               query=sorted(shuffled[n_sup:].tolist())))
    return tasks


# ---------------------------------------------------------------------------
# direct stages (1 and 2)

def _stage_settings(stage: int, config: TrainConfig) -> RenderSettings:
    shading = "ambient" if stage in (1, 2) else "shadowed"
    return RenderSettings(shading=shading, background=config.background,
                          shininess=config.shininess)


def _frame_loss_fn(stage, capture, n_points, config, iteration, bvh=None):
    settings = _stage_settings(stage, config)

    def loss_fn(flat):
        view = SceneView(flat, n_points)
        fb, vis = render_frame(view, capture.camera, capture.light, settings,
                               bvh=bvh)
        terms = stage_loss_terms(stage, fb, capture.image, view, capture.camera,
                                 config.weights, iteration=iteration,
                                 visibilities=vis)
        total = 0.0
        for t in terms.values():
            total = ad.add(total, t)
        loss_fn.terms = {k: float(ad.val(v)) for k, v in terms.items()}
        return total

    return loss_fn


class _Reporter:
    def __init__(self, config, out_dir):
        self.config = config
        self.out_dir = out_dir
        self.t0 = time.perf_counter()

    def maybe_log(self, global_iter, stage, terms):
        if global_iter % self.config.log_interval == 0:
            wall = time.perf_counter() - self.t0
            parts = " ".join(f"{k} {v:.6f}" for k, v in terms.items())
            total = sum(terms.values())
            log.info("iter %6d stage %d loss %.6f %s wall %.1fs",
                     global_iter, stage, total, parts, wall)

    def maybe_checkpoint(self, global_iter, params, final=False):
        if self.out_dir is None:
            return
        due = final or (global_iter > 0 and
                        global_iter % self.config.checkpoint_interval == 0)
        if due:
            path = os.path.join(self.out_dir, f"iter_{global_iter:06d}.ckpt")
            save_checkpoint(params, path)


def _train_direct(stage: int, params: ParamSet, dataset: Dataset,
                  config: TrainConfig, adam: AdamState, rng,
                  reporter: _Reporter | None = None, iter_offset: int = 0):
    """Shared loop for stages 1 and 2; returns (params, per-iteration losses)."""
    trainable = attr_mask(STAGE1_ATTRS if stage == 1 else STAGE2_ATTRS,
                          params.n_points).astype(np.float64)
    history = []
    pos_grad_accum = np.zeros((params.n_points, 3))
    pos_grad_count = 0
    iters = config.stage_iters[stage - 1]
    for it in range(iters):
        cap = dataset.captures[int(rng.integers(len(dataset)))]
        loss_fn = _frame_loss_fn(stage, cap, params.n_points, config, it)
        g = ad.grad(loss_fn, params.values)
        g = g * trainable
        history.append(sum(loss_fn.terms.values()))
        if config.densify and stage == 1:
            pos_grad_accum += g.reshape(params.n_points, POINT_SIZE)[:, :3]
            pos_grad_count += 1
        params = adam_step(adam, params, g)
        renormalize_rotations(params)
        if (config.densify and stage == 1 and (it + 1) % config.densify_interval == 0
                and pos_grad_count):
            params, trainable = _densify_resize(
                params, adam, pos_grad_accum / pos_grad_count, config, stage)
            pos_grad_accum = np.zeros((params.n_points, 3))
            pos_grad_count = 0
        if reporter:
            reporter.maybe_log(iter_offset + it, stage, loss_fn.terms)
            reporter.maybe_checkpoint(iter_offset + it, params)
    return params, history


def train_stage1(params: ParamSet, dataset: Dataset, config: TrainConfig,
                 adam: AdamState | None = None, rng=None, reporter=None,
                 iter_offset: int = 0):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    adam = adam or AdamState(params.n_points, config, sum(config.stage_iters))
    return _train_direct(1, params, dataset, config, adam, rng, reporter,
                         iter_offset)


def train_stage2(params: ParamSet, dataset: Dataset, config: TrainConfig,
                 adam: AdamState | None = None, rng=None, reporter=None,
                 iter_offset: int = 0):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    adam = adam or AdamState(params.n_points, config, sum(config.stage_iters))
    return _train_direct(2, params, dataset, config, adam, rng, reporter,
                         iter_offset)


# ---------------------------------------------------------------------------
# densify / prune

def densify_and_prune(params: ParamSet, adam: AdamState | None,
                      pos_grads: np.ndarray, config: TrainConfig):
    """Prune near-transparent Gaussians; clone those whose accumulated
    positional gradient is large, offset half a mean scale along it."""
    table = params.values.reshape(params.n_points, POINT_SIZE)
    opacity = np.asarray(ad.sigmoid(params.attr("opacity_logit")[:, 0]))
    keep = opacity >= config.prune_opacity
    norms = np.linalg.norm(np.asarray(pos_grads, dtype=np.float64), axis=-1)
    clone_ids = np.flatnonzero(keep & (norms > config.clone_grad_threshold))

    rows = [table[keep]]
    for pid in clone_ids:
        row = table[pid].copy()
        scale = float(np.exp(row[ATTR_OFFSETS["log_scale"]:
                                 ATTR_OFFSETS["log_scale"] + 3]).mean())
        row[:3] += 0.5 * scale * pos_grads[pid] / norms[pid]
        rows.append(row[None, :])
    new_table = np.concatenate(rows) if len(rows) > 1 else rows[0]
    new_params = ParamSet(new_table.reshape(-1))
    if adam is not None:
        adam.resize(keep, n_new=len(clone_ids))
    return new_params, int((~keep).sum()), len(clone_ids)


def _densify_resize(params, adam, stats, config, stage):
    params, n_pruned, n_cloned = densify_and_prune(params, adam, stats, config)
    if n_pruned or n_cloned:
        log.info("densify: pruned %d, cloned %d -> %d points",
                 n_pruned, n_cloned, params.n_points)
    trainable = attr_mask(STAGE1_ATTRS if stage == 1 else STAGE2_ATTRS,
                          params.n_points).astype(np.float64)
    return params, trainable


# ---------------------------------------------------------------------------
# stage 3: bilevel meta-training

def two_phase_adapt(p, loss_phong_fn, loss_shadow_fn, lr_phong, lr_shadow,
                    mask_phong, mask_shadow, first_order=False):
    """Inner adaptation of Alg-style meta training on one support capture.

    Phase A steps the Phong attributes against the visibility-free loss;
    phase B steps the shadow coefficients against the shadowed loss at the
    phase-A parameters. Returns (p_after_A, p_after_B), taped through both
    steps unless first_order."""
    g_a = ad.grad_var(loss_phong_fn(p), p, create_graph=not first_order)
    if first_order:
        g_a = np.asarray(g_a)
    p1 = ad.sub(p, ad.mul(float(lr_phong), ad.mul(g_a, mask_phong)))
    g_b = ad.grad_var(loss_shadow_fn(p1), p1, create_graph=not first_order)
    if first_order:
        g_b = np.asarray(g_b)
    p2 = ad.sub(p1, ad.mul(float(lr_shadow), ad.mul(g_b, mask_shadow)))
    return p1, p2


def meta_train(params: ParamSet, dataset: Dataset, tasks: list[LightTask],
               config: TrainConfig, adam: AdamState | None = None, rng=None,
               reporter: _Reporter | None = None, iter_offset: int = 0,
               loss_builder=None):
    """Outer loop of the meta stage; returns (params, query-loss history).

    loss_builder(stage_kind, capture, n_points, config, iteration, bvh)
    -> scalar loss fn; the default renders frames. stage_kind is "phong"
    (visibility-free) or "shadow" (transmittance-modulated). Tests inject
    synthetic losses through this seam.
    """
    if config.tasks_per_meta_iter > len(tasks):
        raise ValueError("fewer tasks than tasks_per_meta_iter")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    adam = adam or AdamState(params.n_points, config, sum(config.stage_iters))
    n = params.n_points
    mask_phong = attr_mask(PHONG_ATTRS, n).astype(np.float64)
    mask_shadow = attr_mask(SHADOW_ATTRS, n).astype(np.float64)

    if loss_builder is None:
        def loss_builder(kind, capture, n_points, cfg, iteration, bvh):
            use_shadow = kind == "shadow" and not cfg.disable_shadows
            settings = RenderSettings(
                shading="shadowed" if use_shadow else "phong",
                background=cfg.background, shininess=cfg.shininess)

            def loss_fn(flat):
                view = SceneView(flat, n_points)
                fb, vis = render_frame(view, capture.camera, capture.light,
                                       settings, bvh=bvh)
                terms = stage_loss_terms(3, fb, capture.image, view,
                                         capture.camera, cfg.weights,
                                         iteration=iteration, visibilities=vis)
                total = 0.0
                for t in terms.values():
                    total = ad.add(total, t)
                return total

            return loss_fn

    history = []
    bvh = None
    iters = config.stage_iters[2]
    for it in range(iters):
        if it % config.bvh_rebuild_interval == 0:
            bvh = build_bvh(params)
        chosen = np.sort(rng.choice(len(tasks), size=config.tasks_per_meta_iter,
                                    replace=False))
        grad_sum = np.zeros(params.values.size)
        loss_sum = 0.0
        for tid in chosen:
            task = tasks[tid]
            sup = dataset.captures[task.support[int(rng.integers(len(task.support)))]]
            qry = dataset.captures[task.query[int(rng.integers(len(task.query)))]]
            tape = ad.Tape()
            p = tape.leaf(params.values)
            _, p2 = two_phase_adapt(
                p,
                loss_builder("phong", sup, n, config, it, bvh),
                loss_builder("shadow", sup, n, config, it, bvh),
                config.inner_lr_phong, config.inner_lr_shadow,
                mask_phong, mask_shadow, first_order=config.first_order)
            outer = loss_builder("shadow", qry, n, config, it, bvh)(p2)
            loss_val = float(ad.val(outer))
            if not np.isfinite(loss_val):
                raise FloatingPointError(f"non-finite outer loss at iteration {it}")
            grad_sum += np.asarray(ad.val(ad.grad_var(outer, p)))
            loss_sum += loss_val
        m = float(config.tasks_per_meta_iter)
        history.append(loss_sum / m)
        params = adam_step(adam, params, grad_sum / m)
        renormalize_rotations(params)
        if reporter:
            reporter.maybe_log(iter_offset + it, 3, {"query": loss_sum / m})
            reporter.maybe_checkpoint(iter_offset + it, params)
    return params, history


# ---------------------------------------------------------------------------
# orchestration

def init_phong_attributes(params: ParamSet) -> None:
    """Stage-3 entry defaults: diffuse from ambient, dim specular, phi=0.5."""
    params.attr("diffuse_color")[:] = 0.5 * params.attr("ambient_color")
    params.attr("specular_coeff")[:] = 0.04
    params.attr("shadow_coeff_logit")[:] = 0.0


def train_full(params: ParamSet, dataset: Dataset, config: TrainConfig,
               out_dir: str | None = None, stages=(1, 2, 3)):
    """Run the requested stages in order; returns (params, histories dict)."""
    rng = np.random.default_rng(config.seed)
    adam = AdamState(params.n_points, config, sum(config.stage_iters))
    reporter = _Reporter(config, out_dir)
    histories = {}
    offset = 0
    full_run = tuple(stages) == (1, 2, 3)
    for stage in stages:
        if stage == 3:
            if full_run and config.stage_iters[2] > 0:
                init_phong_attributes(params)
            if config.stage_iters[2] > 0:
                m = min(config.num_tasks, max(len(dataset) // 2, 1))
                tasks = partition_tasks(dataset, m, config.support_fraction,
                                        config.seed)
                config_eff = config
                if config.tasks_per_meta_iter > len(tasks):
                    config_eff = replace(config, tasks_per_meta_iter=len(tasks))
                    log.info("clamping tasks per meta-iteration to %d", len(tasks))
                params, h = meta_train(params, dataset, tasks, config_eff, adam,
                                       rng, reporter, iter_offset=offset)
            else:
                h = []
        elif stage == 1:
            params, h = _train_direct(1, params, dataset, config, adam, rng,
                                      reporter, iter_offset=offset)
        elif stage == 2:
            params, h = _train_direct(2, params, dataset, config, adam, rng,
                                      reporter, iter_offset=offset)
        else:
            raise ValueError(f"unknown stage {stage}")
        histories[stage] = h
        offset += config.stage_iters[stage - 1]
        if out_dir is not None:
            save_checkpoint(params, os.path.join(out_dir, f"stage{stage}.ckpt"))
    if out_dir is not None:
        save_checkpoint(params, os.path.join(out_dir, "final.ckpt"))
    return params, histories
