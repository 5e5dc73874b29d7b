"""Training, generation, and evaluation orchestration.

Two training stages share one checkpoint format. The backbone stage fits a
single-view noise predictor on batched random views. The block stage loads
that backbone, freezes every backbone tensor, attaches zero-initialized
consistency blocks at the decoder stages, and trains only the block
parameters on jointly noised view groups. Because the blocks start as exact
identities, the first block-stage loss equals the frozen backbone's own
loss on the same batch.

All randomness derives from ``numpy.random.SeedSequence`` spawns of the
config seed, so reruns of any stage are bitwise reproducible.
"""

import os

import numpy as np

from .block import FrustumSpec, init_block_params
from .config import ConfigError
from .diffusion import (
    MultiViewBatch,
    make_schedule,
    multiview_loss,
    q_sample,
    relative_pose,
    sample_multiview,
)
from .engine import Tensor, backward, concat
from .geometry import GridSpec, save_poses
from .metrics import MetricReport, ms_ssim, psnr, reprojection_consistency, ssim
from .optim import AdamW
from .synthdata import latent_decode, latent_encode
from .tensorio import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .unet import (
    BlockContext,
    Conditioning,
    conditioning_embedding,
    forward_batch,
    init_unet_params,
    set_frozen,
)

__all__ = [
    "DataError",
    "build_block_context",
    "evaluate_generated",
    "generate_views",
    "load_model",
    "pretrain_backbone",
    "save_model",
    "train_blocks",
    "write_generated",
]

_BACKBONE_STREAM = 101
_BLOCK_STREAM = 202
_SAMPLE_STREAM = 5


class DataError(RuntimeError):
    """Missing or inconsistent artifacts (datasets, checkpoints, outputs)."""


def _generator(*entropy):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def _check_dataset(cfg, reader, need_objects):
    if reader.config_hash not in ("-", cfg.content_hash()):
        raise DataError(
            f"dataset config hash {reader.config_hash} != run config {cfg.content_hash()}"
        )
    if reader.n_views != cfg.views:
        raise DataError(f"dataset has {reader.n_views} views per object, config wants {cfg.views}")
    if reader.image_size != cfg.image_size:
        raise DataError(f"dataset image size {reader.image_size} != config {cfg.image_size}")
    if reader.n_objects < need_objects:
        raise DataError(f"dataset has {reader.n_objects} objects, need {need_objects}")


def _load_latents(cfg, reader, count):
    """Encode the first ``count`` objects to latents held in memory."""
    lats = []
    poses = []
    for i in range(count):
        obj = reader.load_object(i)
        lats.append(
            np.stack([latent_encode(img, cfg.latent_patch) for img in obj.images])
        )
        poses.append(obj.poses)
    return np.stack(lats), poses


def _init_unet(cfg, rng):
    return init_unet_params(
        rng,
        latent_channels=cfg.latent_channels,
        widths=cfg.widths,
        dec_width=cfg.dec_width,
        emb_dim=cfg.emb_dim,
        t_dim=cfg.t_dim,
        pose_freq=cfg.pose_freq,
    )


def build_block_context(cfg, rng=None):
    """Zero-output blocks at every decoder stage, fresh or as a skeleton."""
    if rng is None:
        rng = _generator(0)
    layers = [
        init_block_params(rng, cfg.dec_width, heads=cfg.heads, n_freq=cfg.enc_freqs)
        for _ in range(3)
    ]
    return BlockContext(
        layers=layers,
        grid=GridSpec(resolution=cfg.grid_res, bound=cfg.grid_bound),
        fspec=FrustumSpec(depth_count=cfg.depth_count),
    )


def save_model(dirpath, cfg, params, ctx=None):
    """Write backbone (and optionally block) tensors as one checkpoint."""
    tensors = {}
    frozen = set()
    for name, t in params.named().items():
        key = "unet." + name
        tensors[key] = t.data
        if not t.requires_grad:
            frozen.add(key)
    if ctx is not None:
        for name, t in ctx.named().items():
            tensors[name] = t.data
    save_checkpoint(dirpath, tensors, frozen=frozen, config_hash=cfg.content_hash())


def load_model(dirpath, cfg, with_blocks=None):
    """Rebuild (params, ctx) from a checkpoint directory.

    ``with_blocks=None`` attaches blocks exactly when the checkpoint holds
    block tensors; ``False`` drops them; ``True`` requires them. Frozen
    flags from the manifest are restored onto the tensors.
    """
    try:
        tensors, frozen, config_hash = load_checkpoint(dirpath)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {dirpath}: {exc}") from exc
    if config_hash != cfg.content_hash():
        raise ConfigError(
            f"checkpoint {dirpath} was written under config hash {config_hash}, "
            f"run config hashes to {cfg.content_hash()}"
        )
    params = _init_unet(cfg, _generator(0))
    for name, t in params.named().items():
        key = "unet." + name
        if key not in tensors:
            raise DataError(f"checkpoint {dirpath} missing tensor {key}")
        if tensors[key].shape != t.data.shape:
            raise DataError(
                f"checkpoint tensor {key} shape {tensors[key].shape} != {t.data.shape}"
            )
        t.data = tensors[key]
        t.requires_grad = key not in frozen
    params.frozen = all("unet." + n in frozen for n in params.named())
    has_blocks = any(n.startswith("block") for n in tensors)
    if with_blocks is True and not has_blocks:
        raise DataError(f"checkpoint {dirpath} holds no block tensors")
    ctx = None
    if has_blocks and with_blocks is not False:
        ctx = build_block_context(cfg)
        for name, t in ctx.named().items():
            if name not in tensors:
                raise DataError(f"checkpoint {dirpath} missing tensor {name}")
            if tensors[name].shape != t.data.shape:
                raise DataError(
                    f"checkpoint tensor {name} shape {tensors[name].shape} != {t.data.shape}"
                )
            t.data = tensors[name]
    return params, ctx


def pretrain_backbone(cfg, reader, out_dir, log=None):
    """Stage one: single-view denoising on random (view, reference) pairs.

    Returns the loss history as a list of (step, loss) pairs; a checkpoint
    lands in ``out_dir`` every ``cfg.checkpoint_every`` steps and at the
    end.
    """
    _check_dataset(cfg, reader, cfg.train_objects)
    latents, poses = _load_latents(cfg, reader, cfg.train_objects)
    schedule = make_schedule(cfg.total_steps, cfg.beta_min, cfg.beta_max)
    rng = _generator(cfg.seed, _BACKBONE_STREAM)
    params = _init_unet(cfg, rng)
    opt = AdamW(
        params.tensors(),
        lr=cfg.backbone_lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    history = []
    for step in range(cfg.backbone_steps):
        o = int(rng.integers(cfg.train_objects))
        views = rng.choice(cfg.views, size=cfg.backbone_batch, replace=False)
        ref = int(rng.integers(cfg.views))
        ts = rng.integers(1, cfg.total_steps + 1, size=cfg.backbone_batch)
        eps = rng.standard_normal((cfg.backbone_batch,) + shape, dtype=np.float32)
        xt = np.stack(
            [q_sample(latents[o, v], int(ts[j]), eps[j], schedule) for j, v in enumerate(views)]
        )
        embs = []
        for j, v in enumerate(views):
            cond = Conditioning(
                ref_latent=latents[o, ref],
                rel_pose=relative_pose(poses[o][v], poses[o][ref]),
            )
            embs.append(conditioning_embedding(cond, int(ts[j]), params, cfg.total_steps))
        emb = concat(embs, axis=0)
        ref_b = np.broadcast_to(latents[o, ref], xt.shape).copy()
        pred = forward_batch(Tensor(xt), Tensor(ref_b), emb, params)
        d = pred - Tensor(eps)
        loss = (d * d).mean()
        opt.zero_grad()
        backward(loss)
        opt.step()
        history.append((step, float(loss.data)))
        if log is not None and (step % cfg.log_every == 0 or step == cfg.backbone_steps - 1):
            log(f"step {step} loss {float(loss.data):.6f}")
        if (step + 1) % cfg.checkpoint_every == 0:
            save_model(out_dir, cfg, params)
    save_model(out_dir, cfg, params)
    return history


def train_blocks(cfg, reader, backbone_dir, out_dir, log=None, pool=None):
    """Stage two: train consistency blocks against a frozen backbone."""
    _check_dataset(cfg, reader, cfg.train_objects)
    params, _ = load_model(backbone_dir, cfg, with_blocks=False)
    set_frozen(params, True)
    latents, poses = _load_latents(cfg, reader, cfg.train_objects)
    schedule = make_schedule(cfg.total_steps, cfg.beta_min, cfg.beta_max)
    rng = _generator(cfg.seed, _BLOCK_STREAM)
    ctx = build_block_context(cfg, rng)
    opt = AdamW(
        ctx.tensors(),
        lr=cfg.block_lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    history = []
    for step in range(cfg.block_steps):
        o = int(rng.integers(cfg.train_objects))
        views = rng.choice(cfg.views, size=cfg.train_views, replace=False)
        t = int(rng.integers(1, cfg.total_steps + 1))
        eps_list = [rng.standard_normal(shape, dtype=np.float32) for _ in views]
        batch = MultiViewBatch(
            latents=latents[o][views],
            poses=[poses[o][v] for v in views],
            ref_index=0,
            object_id=o,
        )
        loss, _ = multiview_loss(batch, t, schedule, eps_list, params, ctx=ctx, pool=pool)
        opt.zero_grad()
        backward(loss)
        opt.step()
        history.append((step, float(loss.data)))
        if log is not None and (step % cfg.log_every == 0 or step == cfg.block_steps - 1):
            log(f"step {step} loss {float(loss.data):.6f}")
        if (step + 1) % cfg.checkpoint_every == 0:
            save_model(out_dir, cfg, params, ctx)
    save_model(out_dir, cfg, params, ctx)
    return history


def generate_views(cfg, params, ctx, obj, seed, pool=None):
    """Sample every view of one object conditioned on its reference view.

    Per-view noise streams derive from (seed, object index, view index),
    so any single view can be re-sampled bitwise identically on its own.
    Returns (latents, images) with images decoded and clamped to [0, 1].
    """
    ref = cfg.eval_ref_view
    ref_latent = latent_encode(obj.images[ref], cfg.latent_patch)
    schedule = make_schedule(cfg.total_steps, cfg.beta_min, cfg.beta_max)
    view_seeds = [(seed, _SAMPLE_STREAM, obj.index, i) for i in range(len(obj.poses))]
    lats = sample_multiview(
        ref_latent,
        obj.poses[ref],
        obj.poses,
        params,
        schedule,
        ctx=ctx,
        steps=cfg.sample_steps,
        view_seeds=view_seeds,
        pool=pool,
    )
    imgs = [
        np.clip(latent_decode(lat, cfg.latent_patch), 0.0, 1.0).astype(np.float32)
        for lat in lats
    ]
    return lats, imgs


def write_generated(out_dir, cfg, obj, lats, imgs, seed, blocks):
    """Write one object's generated views plus pose table."""
    base = os.path.join(out_dir, f"obj_{obj.index:04d}")
    os.makedirs(base, exist_ok=True)
    save_poses(os.path.join(base, "poses.txt"), obj.poses)
    for v, (lat, img) in enumerate(zip(lats, imgs)):
        save_tensor(os.path.join(base, f"gen_{v:02d}.lat.ndt"), lat.astype(np.float32))
        save_tensor(os.path.join(base, f"gen_{v:02d}.img.ndt"), img)
    return f"object {obj.index} elevation {obj.elevation!r} views {len(imgs)} dir obj_{obj.index:04d}"


def write_generation_manifest(out_dir, cfg, lines, seed, blocks):
    os.makedirs(out_dir, exist_ok=True)
    head = [
        "kind generated",
        f"config_hash {cfg.content_hash()}",
        f"seed {seed}",
        f"steps {cfg.sample_steps}",
        f"blocks {int(blocks)}",
        f"ref_view {cfg.eval_ref_view}",
        f"objects {len(lines)}",
    ]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(head + lines) + "\n")


def read_generation_manifest(gen_dir):
    """Return (meta dict, object entries) for a generated directory."""
    path = os.path.join(gen_dir, "manifest.txt")
    if not os.path.isfile(path):
        raise DataError(f"{gen_dir}: missing manifest.txt")
    meta = {}
    objects = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            if fields[0] == "object":
                objects.append(
                    {
                        "index": int(fields[1]),
                        "elevation": float(fields[3]),
                        "views": int(fields[5]),
                        "dir": fields[7],
                    }
                )
            else:
                meta[fields[0]] = fields[1]
    return meta, objects


def evaluate_generated(cfg, reader, gen_dir):
    """Score a generated directory against ground truth.

    Returns (reports, meta). Aborts when the generated manifest or the
    dataset was produced under a different config hash.
    """
    meta, entries = read_generation_manifest(gen_dir)
    if meta.get("config_hash") != cfg.content_hash():
        raise ConfigError(
            f"generated dir {gen_dir} has config hash {meta.get('config_hash')}, "
            f"run config hashes to {cfg.content_hash()}"
        )
    _check_dataset(cfg, reader, 1)
    by_index = {reader.objects[i][0]: i for i in range(reader.n_objects)}
    reports = []
    for entry in entries:
        if entry["index"] not in by_index:
            raise DataError(f"generated object {entry['index']} not present in dataset")
        obj = reader.load_object(by_index[entry["index"]])
        if entry["views"] != len(obj.poses):
            raise DataError(
                f"object {entry['index']}: generated {entry['views']} views, "
                f"dataset has {len(obj.poses)}"
            )
        base = os.path.join(gen_dir, entry["dir"])
        gen = [
            load_tensor(os.path.join(base, f"gen_{v:02d}.img.ndt"))
            for v in range(entry["views"])
        ]
        psnrs = [psnr(g, gt) for g, gt in zip(gen, obj.images)]
        ssims = [ssim(g, gt) for g, gt in zip(gen, obj.images)]
        ms = [ms_ssim(g, gt) for g, gt in zip(gen, obj.images)]
        try:
            rmse, info = reprojection_consistency(gen, obj.depths, obj.poses)
        except ValueError as exc:
            raise DataError(f"object {entry['index']}: {exc}") from exc
        reports.append(
            MetricReport(
                object_id=entry["index"],
                psnr_values=psnrs,
                ssim_values=ssims,
                ms_ssim_values=ms,
                reproj_rmse=rmse,
                reproj_pixels=info["count"],
                reproj_skipped=info["skipped"],
            )
        )
    return reports, meta
