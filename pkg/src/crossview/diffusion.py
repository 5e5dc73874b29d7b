"""Noise schedule, forward noising, multi-view loss, and the DDIM sampler.

The schedule is the standard linear-beta discrete diffusion: T steps,
``alpha_bar`` stored with the convention ``alpha_bar[0] = 1`` so step 0 is
the clean latent. Noising steps count from 1; the model embeds index
``t - 1``.

Sampling is deterministic DDIM (eta = 0) over 50 uniformly strided steps
by default. All N views advance in lockstep: one shared timestep, a joint
block-coupled forward per step, then independent per-view updates. Each
view's starting Gaussian latent comes from its own seed sequence derived
as (seed, view index), so sampling one view alone with the same derived
seed reproduces the multi-view draw exactly.
"""

from dataclasses import dataclass

import numpy as np

from crossview.engine import Tensor, no_grad
from crossview.unet import Conditioning, multiview_forward

__all__ = [
    "NoiseSchedule",
    "MultiViewBatch",
    "make_schedule",
    "q_sample",
    "single_view_loss",
    "loss_from_predictions",
    "multiview_loss",
    "ddim_timesteps",
    "ddim_step",
    "sample_multiview",
    "relative_pose",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bar`` has length T+1 with [0] = 1."""

    total_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def bar(self, t):
        """``alpha_bar`` at step t (0 <= t <= T)."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[t])


def make_schedule(total_steps, beta_min=1e-4, beta_max=0.02, kind="linear"):
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    betas = np.linspace(beta_min, beta_max, total_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    if not np.all(np.diff(alpha_bar) < 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    return NoiseSchedule(total_steps=total_steps, betas=betas, alphas=alphas,
                         alpha_bar=alpha_bar)


@dataclass
class MultiViewBatch:
    """N clean latents of one object plus poses and the reference view."""

    latents: np.ndarray
    poses: list
    ref_index: int
    object_id: int = 0

    def __post_init__(self):
        if self.latents.ndim != 4:
            raise ValueError("latents must be (N, C, h, w)")
        if len(self.poses) != self.latents.shape[0]:
            raise ValueError("need one pose per latent")
        if not 0 <= self.ref_index < self.latents.shape[0]:
            raise ValueError("reference index out of range")


def q_sample(x0, t, eps, schedule):
    """Closed-form forward noising ``sqrt(ab)*x0 + sqrt(1-ab)*eps``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {x0.shape}")
    if not 1 <= t <= schedule.total_steps:
        raise ValueError(f"noising step {t} outside [1, {schedule.total_steps}]")
    ab = schedule.bar(t)
    return float(np.sqrt(ab)) * x0 + float(np.sqrt(1.0 - ab)) * eps


def relative_pose(pose, ref_pose):
    """(d_azimuth, d_elevation, d_radius) of ``pose`` w.r.t. the reference."""
    return np.array(
        [
            pose.azimuth - ref_pose.azimuth,
            pose.elevation - ref_pose.elevation,
            pose.radius - ref_pose.radius,
        ],
        dtype=np.float64,
    )


def _conditionings(batch):
    ref = batch.latents[batch.ref_index]
    ref_pose = batch.poses[batch.ref_index]
    return [
        Conditioning(ref_latent=ref, rel_pose=relative_pose(p, ref_pose))
        for p in batch.poses
    ]


def loss_from_predictions(eps_list, preds):
    """Mean over views and elements of the squared prediction error."""
    n = len(eps_list)
    if n != len(preds) or n == 0:
        raise ValueError("need matching, non-empty prediction and noise lists")
    total = None
    count = 0
    for eps, pred in zip(eps_list, preds):
        d = pred - Tensor(np.asarray(eps, dtype=pred.dtype))
        sq = (d * d).sum()
        total = sq if total is None else total + sq
        count += int(np.prod(pred.shape))
    return total / float(count)


def single_view_loss(eps, pred):
    """Noise-prediction loss for one view; the N = 1 reduction."""
    return loss_from_predictions([eps], [pred])


def multiview_loss(batch, t, schedule, eps_list, params, ctx=None, pool=None):
    """Joint multi-view objective at one shared timestep.

    All views are noised with their own ``eps_list[i]`` at the same ``t``,
    predicted jointly through the block-coupled forward, and reduced to a
    scalar. Returns ``(loss, predictions)``.
    """
    n = batch.latents.shape[0]
    if len(eps_list) != n:
        raise ValueError("need one noise draw per view")
    xs = [q_sample(batch.latents[i], t, eps_list[i], schedule) for i in range(n)]
    conds = _conditionings(batch)
    preds = multiview_forward(
        xs, conds, t, params, poses=batch.poses, ctx=ctx,
        total_steps=schedule.total_steps, pool=pool,
    )
    return loss_from_predictions(eps_list, preds), preds


def ddim_timesteps(total_steps, steps):
    """Descending step sequence [T, ..., 0] with ``steps`` uniform strides."""
    if not 1 <= steps <= total_steps:
        raise ValueError(f"steps {steps} outside [1, {total_steps}]")
    seq = np.linspace(total_steps, 0, steps + 1)
    out = np.unique(np.round(seq).astype(np.int64))[::-1]
    if len(out) != steps + 1:
        raise ValueError("step sequence collapsed; reduce steps")
    return out


def ddim_step(x_t, eps_hat, t, t_prev, schedule, x0_clip=None):
    """One deterministic DDIM update (eta = 0).

    Predicts ``x0_hat = (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)`` and re-noises
    to ``t_prev``; with ``t_prev = 0`` the result is ``x0_hat`` itself.
    ``x0_clip=(lo, hi)`` clamps the clean estimate before re-noising; leave
    it ``None`` to keep the update exactly invertible.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    ab_t = schedule.bar(t)
    ab_p = schedule.bar(t_prev)
    x0_hat = (x_t - float(np.sqrt(1.0 - ab_t)) * eps_hat) / float(np.sqrt(ab_t))
    if x0_clip is not None:
        x0_hat = np.clip(x0_hat, x0_clip[0], x0_clip[1])
    return float(np.sqrt(ab_p)) * x0_hat + float(np.sqrt(1.0 - ab_p)) * eps_hat


def sample_multiview(
    ref_latent,
    ref_pose,
    poses,
    params,
    schedule,
    ctx=None,
    steps=50,
    seed=0,
    latent_shape=None,
    dtype=np.float32,
    view_seeds=None,
    pool=None,
    x0_clip=(-1.0, 1.0),
):
    """Jointly denoise N views conditioned on one reference latent.

    Per-view starting noise comes from ``SeedSequence([seed, i])`` (or the
    explicit ``view_seeds[i]`` entropy), so a single-view run given the
    same derived seed is bitwise reproducible. The clean estimate is
    clamped to ``x0_clip`` each step; the latent codec maps images into
    [-1, 1], so the default keeps trajectories inside the decoder domain.
    Returns a list of (C, h, w) latent arrays.
    """
    n = len(poses)
    if latent_shape is None:
        latent_shape = np.asarray(ref_latent).shape
    if view_seeds is None:
        view_seeds = [(seed, i) for i in range(n)]
    if len(view_seeds) != n:
        raise ValueError("need one seed entry per view")
    gens = [np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(vs))))
            for vs in view_seeds]
    xs = [g.standard_normal(latent_shape, dtype=dtype) for g in gens]
    ref = np.asarray(ref_latent, dtype=dtype)
    conds = [Conditioning(ref_latent=ref, rel_pose=relative_pose(p, ref_pose)) for p in poses]
    ts = ddim_timesteps(schedule.total_steps, steps)
    with no_grad():
        for k in range(len(ts) - 1):
            t, t_prev = int(ts[k]), int(ts[k + 1])
            preds = multiview_forward(
                xs, conds, t, params, poses=poses, ctx=ctx,
                total_steps=schedule.total_steps, pool=pool,
            )
            xs = [ddim_step(x, p.data, t, t_prev, schedule, x0_clip=x0_clip)
                  for x, p in zip(xs, preds)]
    return xs
