"""Toy conditional denoising UNet with consistency-block attachment points.

The network predicts the noise in a latent given the noisy latent, the
reference view's clean latent (channel-concatenated), the relative pose to
the reference, and the timestep. Architecture: three encoder stages
(widths 32/64/64, each followed by a 2x downsample), a mid stage, and
three decoder stages with skip connections; a consistency block can be
attached after every decoder stage.

Two forward paths share all stage code:

* :func:`forward_batch` runs a (B, C, h, w) minibatch without blocks, used
  for backbone pretraining;
* :func:`multiview_forward` runs N views strictly one at a time (B=1 per
  view) and rendezvous at every attachment point, so per-view numerics
  never depend on how many views run together or on a thread schedule.

Freezing sets ``requires_grad`` False on every backbone tensor; the
optimizer skips such parameters, and the freeze invariant is that their
bytes never change during block training.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from crossview.engine import (
    Tensor,
    avg_pool2d,
    cast,
    concat,
    conv2d,
    matmul,
    reshape,
    silu,
    upsample_nearest2d,
)
from crossview.block import block_forward_all
from crossview.geometry import pos_encode

__all__ = [
    "Conditioning",
    "ResBlockParams",
    "UNetParams",
    "BlockContext",
    "init_unet_params",
    "set_frozen",
    "embed_timestep",
    "unet_forward",
    "forward_batch",
    "multiview_forward",
]


@dataclass
class Conditioning:
    """Per-view conditioning: reference latent and pose relative to it.

    ``rel_pose`` is (delta azimuth deg, delta elevation deg, delta radius).
    """

    ref_latent: np.ndarray
    rel_pose: np.ndarray

    def __post_init__(self):
        self.rel_pose = np.asarray(self.rel_pose, dtype=np.float64)
        if self.rel_pose.shape != (3,):
            raise ValueError("rel_pose must be (d_az, d_el, d_radius)")


@dataclass
class ResBlockParams:
    conv1_k: Tensor
    conv1_b: Tensor
    emb_w: Tensor
    emb_b: Tensor
    conv2_k: Tensor
    conv2_b: Tensor
    skip_k: Tensor = None
    skip_b: Tensor = None

    def named(self, prefix):
        out = {
            prefix + "conv1_k": self.conv1_k,
            prefix + "conv1_b": self.conv1_b,
            prefix + "emb_w": self.emb_w,
            prefix + "emb_b": self.emb_b,
            prefix + "conv2_k": self.conv2_k,
            prefix + "conv2_b": self.conv2_b,
        }
        if self.skip_k is not None:
            out[prefix + "skip_k"] = self.skip_k
            out[prefix + "skip_b"] = self.skip_b
        return out


@dataclass
class UNetParams:
    latent_channels: int
    widths: tuple
    dec_width: int
    emb_dim: int
    t_dim: int
    pose_freq: int
    conv_in_k: Tensor
    conv_in_b: Tensor
    enc: list
    mid: ResBlockParams
    dec: list
    conv_out_k: Tensor
    conv_out_b: Tensor
    cond_w1: Tensor
    cond_b1: Tensor
    cond_w2: Tensor
    cond_b2: Tensor
    frozen: bool = field(default=False)

    def named(self):
        out = {
            "conv_in_k": self.conv_in_k,
            "conv_in_b": self.conv_in_b,
            "conv_out_k": self.conv_out_k,
            "conv_out_b": self.conv_out_b,
            "cond_w1": self.cond_w1,
            "cond_b1": self.cond_b1,
            "cond_w2": self.cond_w2,
            "cond_b2": self.cond_b2,
        }
        for i, rb in enumerate(self.enc):
            out.update(rb.named(f"enc{i}."))
        out.update(self.mid.named("mid."))
        for i, rb in enumerate(self.dec):
            out.update(rb.named(f"dec{i}."))
        return out

    def tensors(self):
        return list(self.named().values())


@dataclass
class BlockContext:
    """Everything the attachment points need besides the feature maps."""

    layers: list  # one BlockParams per decoder stage, or None to skip
    grid: object
    fspec: object

    def named(self):
        out = {}
        for i, bp in enumerate(self.layers):
            if bp is not None:
                out.update(bp.named(f"block{i}."))
        return out

    def tensors(self):
        return list(self.named().values())


def _init_resblock(rng, cin, cout, emb_dim, dtype):
    def kernel(shape):
        fan_in = int(np.prod(shape[1:]))
        s = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def lin(fi, fo):
        s = 1.0 / math.sqrt(fi)
        return Tensor(rng.uniform(-s, s, size=(fi, fo)).astype(dtype), requires_grad=True)

    skip_k = skip_b = None
    if cin != cout:
        skip_k = kernel((cout, cin, 1, 1))
        skip_b = zeros((cout,))
    # conv2 starts at zero so a fresh resblock reduces to its skip path.
    return ResBlockParams(
        conv1_k=kernel((cout, cin, 3, 3)),
        conv1_b=zeros((cout,)),
        emb_w=lin(emb_dim, cout),
        emb_b=zeros((cout,)),
        conv2_k=zeros((cout, cout, 3, 3)),
        conv2_b=zeros((cout,)),
        skip_k=skip_k,
        skip_b=skip_b,
    )


def init_unet_params(
    rng,
    latent_channels=12,
    widths=(32, 64, 64),
    dec_width=32,
    emb_dim=64,
    t_dim=64,
    pose_freq=4,
    dtype=np.float32,
):
    """Build fresh backbone parameters; ``conv_out`` starts at zero."""

    def kernel(shape):
        fan_in = int(np.prod(shape[1:]))
        s = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def lin(fi, fo):
        s = 1.0 / math.sqrt(fi)
        return Tensor(rng.uniform(-s, s, size=(fi, fo)).astype(dtype), requires_grad=True)

    w1, w2, w3 = widths
    enc = [
        _init_resblock(rng, w1, w1, emb_dim, dtype),
        _init_resblock(rng, w1, w2, emb_dim, dtype),
        _init_resblock(rng, w2, w3, emb_dim, dtype),
    ]
    mid = _init_resblock(rng, w3, w3, emb_dim, dtype)
    dec = [
        _init_resblock(rng, w3 + w3, dec_width, emb_dim, dtype),
        _init_resblock(rng, dec_width + w2, dec_width, emb_dim, dtype),
        _init_resblock(rng, dec_width + w1, dec_width, emb_dim, dtype),
    ]
    pose_dim = 5 * 2 * pose_freq
    return UNetParams(
        latent_channels=latent_channels,
        widths=tuple(widths),
        dec_width=dec_width,
        emb_dim=emb_dim,
        t_dim=t_dim,
        pose_freq=pose_freq,
        conv_in_k=kernel((w1, 2 * latent_channels, 3, 3)),
        conv_in_b=zeros((w1,)),
        enc=enc,
        mid=mid,
        dec=dec,
        conv_out_k=zeros((latent_channels, dec_width, 3, 3)),
        conv_out_b=zeros((latent_channels,)),
        cond_w1=lin(t_dim + pose_dim, emb_dim),
        cond_b1=zeros((emb_dim,)),
        cond_w2=lin(emb_dim, emb_dim),
        cond_b2=zeros((emb_dim,)),
        frozen=False,
    )


def set_frozen(params, flag):
    """Toggle the freeze flag and ``requires_grad`` of every tensor."""
    params.frozen = bool(flag)
    for t in params.tensors():
        t.requires_grad = not flag
    return params


def embed_timestep(t, dim, total_steps=1000):
    """Sinusoidal embedding of a step index in [0, total_steps).

    Built on :func:`crossview.geometry.pos_encode` of ``t / total_steps``;
    the first octave's cosine is strictly monotonic over the range, so
    distinct steps always embed distinctly. Values lie in [-1, 1].
    """
    if dim % 2:
        raise ValueError("dim must be even")
    if not 0 <= t < total_steps:
        raise ValueError(f"timestep {t} outside [0, {total_steps})")
    x = np.array([t / total_steps], dtype=np.float64)
    return pos_encode(x, dim // 2).reshape(dim)


def _pose_features(rel_pose, n_freq):
    az = math.radians(rel_pose[0])
    el = math.radians(rel_pose[1])
    base = np.array(
        [math.sin(az), math.cos(az), math.sin(el), math.cos(el), rel_pose[2]],
        dtype=np.float64,
    )
    return pos_encode(base, n_freq).reshape(-1)


def conditioning_embedding(cond, t, params, total_steps=1000):
    """Shared (emb_dim,) embedding fed to every residual stage.

    ``t`` counts noising steps from 1; the embedded index is ``t - 1``.
    """
    temb = embed_timestep(t - 1, params.t_dim, total_steps)
    pemb = _pose_features(cond.rel_pose, params.pose_freq)
    vec = Tensor(np.concatenate([temb, pemb]).astype(params.cond_w1.dtype))
    hidden = silu(matmul(reshape(vec, (1, -1)), params.cond_w1) + params.cond_b1)
    return matmul(hidden, params.cond_w2) + params.cond_b2  # (1, emb_dim)


def _resblock(x, emb, p):
    """Pre-activation residual block; ``emb`` is (B, emb_dim)."""
    h = conv2d(silu(x), p.conv1_k, p.conv1_b)
    shift = matmul(emb, p.emb_w) + p.emb_b
    h = h + reshape(shift, (shift.shape[0], shift.shape[1], 1, 1))
    h = conv2d(silu(h), p.conv2_k, p.conv2_b)
    if p.skip_k is not None:
        x = conv2d(x, p.skip_k, p.skip_b)
    return h + x


def _encode(x, ref, emb, params):
    """Input concat + encoder + mid; returns (mid output, skips)."""
    h = conv2d(concat([x, ref], axis=1), params.conv_in_k, params.conv_in_b)
    skips = []
    for rb in params.enc:
        h = _resblock(h, emb, rb)
        skips.append(h)
        h = avg_pool2d(h, 2)
    h = _resblock(h, emb, params.mid)
    return h, skips


def _decode_stage(i, h, skip, emb, params):
    h = upsample_nearest2d(h, 2)
    h = concat([h, skip], axis=1)
    return _resblock(h, emb, params.dec[i])


def _head(h, params):
    return conv2d(silu(h), params.conv_out_k, params.conv_out_b)


def forward_batch(x, ref, emb, params):
    """Noise prediction for a (B, C, h, w) batch, no blocks."""
    h, skips = _encode(x, ref, emb, params)
    for i in range(3):
        h = _decode_stage(i, h, skips[2 - i], emb, params)
    return _head(h, params)


def multiview_forward(xs, conds, t, params, poses=None, ctx=None, total_steps=1000,
                      pool=None):
    """Noise predictions for N views with optional consistency blocks.

    ``xs`` is a list of (C, h, w) tensors (or arrays); every view runs with
    batch size 1 so results are independent of N and of the dispatch
    schedule. At each decoder stage, if ``ctx`` provides a block for that
    layer, all views rendezvous and the block residuals are added.
    """
    n = len(xs)
    if len(conds) != n:
        raise ValueError("need one conditioning per view")
    if ctx is not None and poses is None:
        raise ValueError("blocks require per-view camera poses")
    xs = [x if isinstance(x, Tensor) else Tensor(x) for x in xs]
    embs = [conditioning_embedding(c, t, params, total_steps) for c in conds]
    refs = [
        Tensor(np.asarray(c.ref_latent, dtype=params.conv_in_k.dtype)[None])
        for c in conds
    ]
    if any(r.shape[2:] != x.shape[1:] for r, x in zip(refs, xs)):
        raise ValueError("reference latent spatial extents must match the input")

    def encode_one(i):
        return _encode(reshape(xs[i], (1,) + xs[i].shape), refs[i], embs[i], params)

    if pool is None:
        enc_out = [encode_one(i) for i in range(n)]
    else:
        enc_out = list(pool.map(encode_one, range(n)))
    hs = [e[0] for e in enc_out]
    skips = [e[1] for e in enc_out]
    for stage in range(3):
        def dec_one(i):
            return _decode_stage(stage, hs[i], skips[i][2 - stage], embs[i], params)

        if pool is None:
            hs = [dec_one(i) for i in range(n)]
        else:
            hs = list(pool.map(dec_one, range(n)))
        bp = ctx.layers[stage] if ctx is not None else None
        if bp is not None:
            maps = [h[0] for h in hs]  # drop the B=1 axis at the rendezvous
            residuals = block_forward_all(maps, poses, ctx.grid, ctx.fspec, bp, pool=pool)
            # Geometry runs in float64; rejoin the features in their own dtype.
            hs = [h + reshape(cast(r, h.dtype), (1,) + r.shape)
                  for h, r in zip(hs, residuals)]

    def head_one(i):
        return _head(hs[i], params)[0]

    if pool is None:
        return [head_one(i) for i in range(n)]
    return list(pool.map(head_one, range(n)))


def unet_forward(x, cond, t, params, pose=None, ctx=None, total_steps=1000):
    """Single-view noise prediction; blocks (if any) see just this view."""
    poses = [pose] if pose is not None else None
    return multiview_forward([x], [cond], t, params, poses=poses, ctx=ctx,
                             total_steps=total_steps)[0]
