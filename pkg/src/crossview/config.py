"""Run configuration: a flat text format with a content hash.

Every hyperparameter that downstream artifacts depend on lives here. The
serialized form is one ``key value`` line per field in sorted order; its
SHA-256 prefix is the config hash recorded in dataset manifests,
checkpoints, and reports, and evaluation refuses to mix artifacts with
different hashes.
"""

import dataclasses
import hashlib
from dataclasses import dataclass

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config", "smoke_config"]


class ConfigError(ValueError):
    """Invalid configuration contents or field values."""


@dataclass
class RunConfig:
    # dataset
    seed: int = 0
    image_size: int = 64
    latent_patch: int = 2
    train_objects: int = 64
    eval_objects: int = 16
    views: int = 16
    train_views: int = 4
    elevation_max: float = 30.0
    eval_elevations: tuple = (0.0, 15.0, 30.0)
    radius: float = 2.6
    focal_scale: float = 0.6
    eval_ref_view: int = 0
    # geometry / block
    grid_res: int = 8
    depth_count: int = 8
    grid_bound: float = 1.0
    enc_freqs: int = 6
    heads: int = 4
    # backbone
    widths: tuple = (32, 64, 64)
    dec_width: int = 32
    emb_dim: int = 64
    t_dim: int = 64
    pose_freq: int = 4
    # diffusion
    total_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    sample_steps: int = 50
    # training
    backbone_steps: int = 3000
    backbone_batch: int = 8
    backbone_lr: float = 2e-4
    block_steps: int = 1500
    block_lr: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 25
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    @property
    def latent_channels(self):
        return 3 * self.latent_patch * self.latent_patch

    @property
    def latent_size(self):
        return self.image_size // self.latent_patch

    @property
    def focal(self):
        return self.focal_scale * self.image_size

    def validate(self):
        if self.image_size % (self.latent_patch * 8):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by {self.latent_patch * 8} "
                "(latent patch times the UNet downsampling factor)"
            )
        if not 0.0 <= self.elevation_max <= 89.0:
            raise ConfigError(f"elevation_max {self.elevation_max} outside [0, 89] degrees")
        for e in self.eval_elevations:
            if not 0.0 <= e <= 89.0:
                raise ConfigError(f"eval elevation {e} outside [0, 89] degrees")
        if self.radius <= 3.0**0.5 * self.grid_bound:
            raise ConfigError("radius must exceed sqrt(3) * grid_bound")
        if self.dec_width % self.heads:
            raise ConfigError("dec_width must be divisible by heads")
        if self.train_views < 1 or self.train_views > self.views:
            raise ConfigError("train_views must lie in [1, views]")
        if not (0 < self.beta_min <= self.beta_max < 1):
            raise ConfigError("betas must satisfy 0 < beta_min <= beta_max < 1")
        if self.views < 2:
            raise ConfigError("views must be >= 2")

    def to_text(self):
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} {v}")
        return "\n".join(lines) + "\n"

    def content_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def parse_config(text, **overrides):
    """Parse ``key value`` lines; unknown keys and bad values are config errors."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ConfigError(f"line {lineno}: expected 'key value', got {raw!r}")
        key, val = parts
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        ftype = fields[key].type
        tname = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", "")
        try:
            if tname == "tuple":
                items = [x for x in val.split(",") if x]
                conv = float if any("." in x or "e" in x.lower() for x in items) else int
                values[key] = tuple(conv(x) for x in items)
            elif tname == "int":
                values[key] = int(val)
            elif tname == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    values.update(overrides)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read(), **overrides)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def smoke_config(seed=0):
    """Minutes-scale end-to-end configuration: 4 objects, 16x16 latents."""
    return RunConfig(
        seed=seed,
        image_size=32,
        train_objects=4,
        eval_objects=2,
        views=8,
        train_views=2,
        grid_res=6,
        depth_count=4,
        backbone_steps=60,
        backbone_batch=4,
        block_steps=20,
        sample_steps=10,
        log_every=10,
        checkpoint_every=1000,
        heads=4,
    )
