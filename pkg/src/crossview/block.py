"""Plug-in cross-view consistency block.

One block refines the N per-view feature maps of a decoder layer so that
they agree in 3D. The pipeline per target view i:

1. every view's feature map is lifted into the shared voxel grid
   (:func:`crossview.geometry.unproject_features`), carrying a camera
   positional encoding;
2. view aggregation: per voxel, multi-head self-attention across the N
   views, then a two-layer 3D convolution trunk (channel preserving);
3. the aggregated volume is warped into view i's frustum
   (:func:`crossview.geometry.warp_to_frustum`), giving D depth tokens per
   pixel with a depth positional encoding;
4. ray aggregation: self-attention along each ray's depth tokens, then
   cross-attention with a single query projected from the view's own
   feature map pixel;
5. a per-pixel two-layer MLP whose final weights and biases start at
   exactly zero produces the residual, so a fresh block is the identity.

Masked tokens (voxels invisible to a view, depth samples outside the
grid) receive -inf attention logits; fully masked voxels or rays yield
zero output instead of NaN.
"""

import math
from dataclasses import dataclass

import numpy as np

from crossview.engine import (
    Tensor,
    concat,
    conv3d,
    matmul,
    reshape,
    silu,
    softmax,
    transpose,
)
from crossview.geometry import GridSpec, WorldVolume, unproject_features, warp_to_frustum

__all__ = [
    "FrustumSpec",
    "BlockParams",
    "init_block_params",
    "view_aggregate",
    "ray_aggregate",
    "block_forward",
    "block_forward_all",
]

_NEG = -1e30


@dataclass(frozen=True)
class FrustumSpec:
    """Number of uniform depth candidates sampled along each pixel ray."""

    depth_count: int = 16

    def __post_init__(self):
        if self.depth_count < 1:
            raise ValueError("depth_count must be >= 1")


@dataclass
class BlockParams:
    """Parameters of one consistency block (one decoder attachment)."""

    channels: int
    heads: int
    n_freq: int
    view_wq: Tensor
    view_wk: Tensor
    view_wv: Tensor
    view_wo: Tensor
    trunk1_k: Tensor
    trunk1_b: Tensor
    trunk2_k: Tensor
    trunk2_b: Tensor
    depth_wq: Tensor
    depth_wk: Tensor
    depth_wv: Tensor
    depth_wo: Tensor
    cross_wq: Tensor
    cross_wk: Tensor
    cross_wv: Tensor
    cross_wo: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix=""):
        """Name -> Tensor mapping, stable order, for checkpoints."""
        out = {}
        for name in (
            "view_wq", "view_wk", "view_wv", "view_wo",
            "trunk1_k", "trunk1_b", "trunk2_k", "trunk2_b",
            "depth_wq", "depth_wk", "depth_wv", "depth_wo",
            "cross_wq", "cross_wk", "cross_wv", "cross_wo",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        ):
            out[prefix + name] = getattr(self, name)
        return out

    def tensors(self):
        return list(self.named().values())


def init_block_params(rng, channels, heads=4, n_freq=6, dtype=np.float32):
    """Initialize one block; the residual MLP's last layer is exactly zero."""
    if channels % heads:
        raise ValueError(f"channels {channels} not divisible by heads {heads}")
    c = channels
    cam = c + 8 * n_freq  # unprojected features carry the camera encoding
    dep = c + 2 * n_freq  # depth tokens carry the depth encoding

    def lin(fan_in, fan_out):
        scale = 1.0 / math.sqrt(fan_in)
        return Tensor(
            rng.uniform(-scale, scale, size=(fan_in, fan_out)).astype(dtype),
            requires_grad=True,
        )

    def kernel(shape):
        fan_in = int(np.prod(shape[1:]))
        scale = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return BlockParams(
        channels=c,
        heads=heads,
        n_freq=n_freq,
        view_wq=lin(cam, c),
        view_wk=lin(cam, c),
        view_wv=lin(cam, c),
        view_wo=lin(c, c),
        trunk1_k=kernel((c, c, 3, 3, 3)),
        trunk1_b=zeros((c,)),
        trunk2_k=kernel((c, c, 3, 3, 3)),
        trunk2_b=zeros((c,)),
        depth_wq=lin(dep, c),
        depth_wk=lin(dep, c),
        depth_wv=lin(dep, c),
        depth_wo=lin(c, c),
        cross_wq=lin(c, c),
        cross_wk=lin(dep, c),
        cross_wv=lin(dep, c),
        cross_wo=lin(c, c),
        mlp_w1=lin(c, c),
        mlp_b1=zeros((c,)),
        mlp_w2=zeros((c, c)),
        mlp_b2=zeros((c,)),
    )


def _attention(q_in, kv_in, wq, wk, wv, wo, heads, key_mask, collect=None, tag=""):
    """Multi-head attention over token groups.

    ``q_in`` is (G, Tq, Dq), ``kv_in`` is (G, Tk, Dk), ``key_mask`` is a
    (G, Tk) 0/1 array. Masked keys get -inf logits; groups with no valid
    key produce exactly zero output. Returns (G, Tq, C).
    """
    g, tq, _ = q_in.shape
    tk = kv_in.shape[1]
    attn_dim = wq.shape[1]
    dh = attn_dim // heads
    dtype = q_in.dtype

    def split_heads(t, tlen):
        t = reshape(t, (g, tlen, heads, dh))
        return transpose(t, (0, 2, 1, 3))

    q = split_heads(matmul(q_in, wq), tq)
    k = split_heads(matmul(kv_in, wk), tk)
    v = split_heads(matmul(kv_in, wv), tk)
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mask = np.asarray(key_mask, dtype=dtype)
    bias = ((1.0 - mask) * _NEG).reshape(g, 1, 1, tk)
    weights = softmax(logits + Tensor(bias), axis=-1)
    any_valid = (mask.max(axis=1) > 0).astype(dtype).reshape(g, 1, 1, 1)
    weights = weights * Tensor(any_valid)
    if collect is not None:
        collect.append((tag, weights.data.copy(), mask.copy()))
    out = matmul(weights, v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (g, tq, attn_dim))
    return matmul(out, wo)


def view_aggregate(volumes, params, collect=None):
    """Cross-view aggregation: per-voxel attention over views + conv trunk.

    ``volumes`` is one :class:`WorldVolume` per view (equal channels, same
    grid). Returns one aggregated volume per view, each carrying the union
    validity mask; voxels visible in no view stay exactly zero.
    """
    n = len(volumes)
    if n < 1:
        raise ValueError("need at least one volume")
    cv = volumes[0].features.shape[0]
    grid = volumes[0].grid
    r = grid.resolution
    if any(v.features.shape[0] != cv for v in volumes):
        raise ValueError("volumes must share channel count")
    c = params.channels
    k = r * r * r
    tokens = concat(
        [reshape(transpose(reshape(v.features, (cv, k)), (1, 0)), (k, 1, cv)) for v in volumes],
        axis=1,
    )
    key_mask = np.concatenate([v.mask.reshape(1, k).T for v in volumes], axis=1)
    attn = _attention(
        tokens, tokens,
        params.view_wq, params.view_wk, params.view_wv, params.view_wo,
        params.heads, key_mask, collect=collect, tag="view",
    )
    vols = transpose(attn, (1, 2, 0))  # (N, C, K)
    vols = reshape(vols, (n, c, r, r, r))
    h = silu(conv3d(vols, params.trunk1_k, params.trunk1_b))
    h = conv3d(h, params.trunk2_k, params.trunk2_b)
    union = np.max(np.stack([v.mask for v in volumes]), axis=0)
    h = h * Tensor(union[None].astype(h.dtype))
    return [
        WorldVolume(features=h[i], mask=union.copy(), grid=grid)
        for i in range(n)
    ]


def ray_aggregate(x, frustum, params, collect=None):
    """Depth attention along each ray, then cross-attention from the view.

    ``x`` is the view's own (C, h, w) feature map used to build the single
    query per pixel; ``frustum`` holds the warped aggregated features and
    depth encoding. Pixels whose depth tokens are all masked return zero.
    """
    c, h, w = x.shape
    cf, d = frustum.features.shape[:2]
    if frustum.features.shape[2:] != (h, w):
        raise ValueError(
            f"frustum extents {frustum.features.shape[2:]} do not match feature map {(h, w)}"
        )
    hw = h * w
    feat_tokens = reshape(transpose(frustum.features, (2, 3, 1, 0)), (hw, d, cf))
    enc_tokens = Tensor(
        np.ascontiguousarray(frustum.depth_enc.transpose(2, 3, 1, 0).reshape(hw, d, -1))
    )
    tokens = concat([feat_tokens, enc_tokens], axis=2)
    key_mask = frustum.mask.reshape(d, hw).T
    refined = _attention(
        tokens, tokens,
        params.depth_wq, params.depth_wk, params.depth_wv, params.depth_wo,
        params.heads, key_mask, collect=collect, tag="depth",
    )
    kv = concat([refined, enc_tokens], axis=2)
    query = reshape(transpose(reshape(x, (c, hw)), (1, 0)), (hw, 1, c))
    out = _attention(
        query, kv,
        params.cross_wq, params.cross_wk, params.cross_wv, params.cross_wo,
        params.heads, key_mask, collect=collect, tag="cross",
    )
    return reshape(transpose(reshape(out, (hw, c)), (1, 0)), (c, h, w))


def _residual_mlp(y, params):
    """Per-pixel two-layer MLP; final layer starts at zero."""
    c, h, w = y.shape
    tokens = transpose(reshape(y, (c, h * w)), (1, 0))
    hidden = silu(matmul(tokens, params.mlp_w1) + params.mlp_b1)
    out = matmul(hidden, params.mlp_w2) + params.mlp_b2
    return reshape(transpose(out, (1, 0)), (c, h, w))


def _aggregate_views(feature_maps, poses, grid, params, collect=None):
    volumes = [
        unproject_features(x, pose, grid, n_freq=params.n_freq)
        for x, pose in zip(feature_maps, poses)
    ]
    return view_aggregate(volumes, params, collect=collect)


def _view_tail(x, vol, pose, fspec, params, collect=None):
    h, w = x.shape[1], x.shape[2]
    frustum = warp_to_frustum(vol, pose, fspec.depth_count, (h, w), n_freq=params.n_freq)
    refined = ray_aggregate(x, frustum, params, collect=collect)
    return _residual_mlp(refined, params)


def _check_input(feature_maps, poses):
    n = len(feature_maps)
    if n < 1 or len(poses) != n:
        raise ValueError("need one pose per feature map, at least one view")
    shape = feature_maps[0].shape
    if any(x.shape != shape for x in feature_maps):
        raise ValueError("feature maps must share shape")
    if len({(p.azimuth, p.elevation, p.radius) for p in poses}) != n:
        raise ValueError("poses must be distinct")


def block_forward(view_index, feature_maps, poses, grid, fspec, params, collect=None):
    """Residual for one view given all N feature maps; caller adds it.

    With freshly initialized parameters the result is exactly zero.
    """
    _check_input(feature_maps, poses)
    if not 0 <= view_index < len(feature_maps):
        raise ValueError(f"view index {view_index} out of range")
    aggregated = _aggregate_views(feature_maps, poses, grid, params, collect=collect)
    return _view_tail(
        feature_maps[view_index], aggregated[view_index], poses[view_index],
        fspec, params, collect=collect,
    )


def block_forward_all(feature_maps, poses, grid, fspec, params, collect=None, pool=None):
    """Residuals for every view, sharing the cross-view aggregation.

    The shared unprojection and view aggregation are computed once; the
    per-view tails are independent and may be dispatched on ``pool`` (a
    ``concurrent.futures`` executor) — numerics are identical either way
    because each tail runs the same per-view op sequence.
    """
    _check_input(feature_maps, poses)
    aggregated = _aggregate_views(feature_maps, poses, grid, params, collect=collect)

    def tail(i):
        return _view_tail(feature_maps[i], aggregated[i], poses[i], fspec, params,
                          collect=collect)

    if pool is None:
        return [tail(i) for i in range(len(feature_maps))]
    return list(pool.map(tail, range(len(feature_maps))))
