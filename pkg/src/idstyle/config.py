"""Configuration dataclasses and the flat key-value config file format.

A single ``TrainConfig`` drives the whole pipeline; encoder and generator
configs are derived views of it.  Config files are flat JSON objects whose
keys match the flattened field names (``lambda_rec``, ``n_usm_blocks``, ...).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import IdstyleError, MalformedManifest

# Spatial stride of each texture-encoder tap relative to the input.
TAP_STRIDES = {
    "relu1_2": 1,
    "relu2_2": 2,
    "relu3_2": 4,
    "relu4_2": 8,
    "relu5_2": 16,
}

TEXTURE_ARCHS = ("vgg_like", "identity_like")
STYLE_SOURCES = ("mfm_like", "identity_like", "textimage_like")


@dataclass
class LossWeights:
    """Weights of the total training objective (all nonnegative)."""

    lambda_psu: float = 1.0
    lambda_rec: float = 100.0
    lambda_ccx: float = 0.5
    lambda_scx: float = 1.0
    lambda_id: float = 0.0
    lambda_textimage: float = 0.0
    lambda_cls: float = 0.0  # nonzero only when jointly training the classifier

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and v >= 0 and v == v and abs(v) != float("inf")):
                raise IdstyleError(f"loss weight {f.name} must be finite and >= 0, got {v!r}")


@dataclass
class ContextualConfig:
    """Knobs of the contextual feature-similarity kernel."""

    bandwidth: float = 0.5
    epsilon: float = 1e-5
    tap_names: tuple[str, ...] = ("relu3_2", "relu4_2")
    max_positions: int = 1024
    rng_seed: int = 0

    def validate(self):
        if not self.bandwidth > 0:
            raise IdstyleError(f"contextual bandwidth must be > 0, got {self.bandwidth}")
        if not self.epsilon > 0:
            raise IdstyleError(f"contextual epsilon must be > 0, got {self.epsilon}")
        if self.max_positions < 2:
            raise IdstyleError(f"contextual max_positions must be >= 2, got {self.max_positions}")
        for t in self.tap_names:
            if t not in TAP_STRIDES:
                raise IdstyleError(f"unknown contextual tap {t!r}")


@dataclass(frozen=True)
class EncoderConfig:
    """Texture-encoder geometry: stage widths, tap selection, code size."""

    input_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    content_tap: str = "relu4_2"
    div_tap: str = "relu4_2"
    code_dim: int = 128
    frozen: bool = True

    def validate(self):
        if self.code_dim <= 0:
            raise IdstyleError("code_dim must be > 0")
        for tap in (self.content_tap, self.div_tap):
            if tap not in TAP_STRIDES:
                raise IdstyleError(f"unknown tap name {tap!r}")
            if TAP_STRIDES[tap] > 2 ** (len(self.channels) - 1):
                raise IdstyleError(f"tap {tap!r} deeper than the {len(self.channels)}-stage stack")
        stride = TAP_STRIDES[self.content_tap]
        if stride not in (4, 8, 16):
            raise IdstyleError(
                f"content tap must sit at stride 4, 8 or 16, got {self.content_tap!r} (stride {stride})"
            )
        if self.input_size % stride != 0:
            raise IdstyleError("input size not divisible by the content-tap stride")

    @property
    def content_channels(self) -> int:
        return self.channels[_tap_stage(self.content_tap)]

    @property
    def content_size(self) -> int:
        return self.input_size // TAP_STRIDES[self.content_tap]


def _tap_stage(tap: str) -> int:
    return int(tap[4]) - 1  # "relu3_2" -> stage index 2


@dataclass(frozen=True)
class USMBlockConfig:
    """One style-modulated generator block."""

    level: int
    in_channels: int
    out_channels: int
    resolution: int  # output resolution of the block
    upsample: bool


@dataclass(frozen=True)
class GeneratorConfig:
    """Generator geometry: content feature shape, block ladder, code size."""

    content_channels: int = 128
    content_size: int = 8
    output_size: int = 64
    style_dim: int = 128
    n_blocks: int = 4
    use_ds: bool = True
    use_div: bool = True
    min_channels: int = 16

    def validate(self):
        if self.n_blocks < 1:
            raise IdstyleError("generator needs at least one block")
        if self.output_size % self.content_size != 0:
            raise IdstyleError("output size must be a multiple of the content feature size")
        ratio = self.output_size // self.content_size
        if ratio & (ratio - 1) != 0:
            raise IdstyleError("output/content size ratio must be a power of two")
        if ratio.bit_length() - 1 > self.n_blocks:
            raise IdstyleError(
                f"{self.n_blocks} blocks cannot upsample {self.content_size} -> {self.output_size}"
            )
        if self.style_dim <= 0:
            raise IdstyleError("style_dim must be > 0")

    def block_plan(self) -> list[USMBlockConfig]:
        """Distribute the required 2x upsamplings evenly across the blocks.

        Resolutions are nondecreasing and the final block lands exactly on
        the output resolution; channel width halves at each upsample down to
        ``min_channels``.
        """
        self.validate()
        n_up = (self.output_size // self.content_size).bit_length() - 1
        if n_up == 0:
            up_levels = set()
        elif n_up == self.n_blocks:
            up_levels = set(range(self.n_blocks))
        else:
            stride = self.n_blocks // (n_up + 1)
            up_levels = {stride * (k + 1) for k in range(n_up)}
        plan = []
        res = self.content_size
        ch = self.content_channels
        for level in range(self.n_blocks):
            upsample = level in up_levels
            in_ch = ch
            if upsample:
                res *= 2
                ch = max(self.min_channels, ch // 2)
            plan.append(USMBlockConfig(level, in_ch, ch, res, upsample))
        assert plan[-1].resolution == self.output_size
        return plan


@dataclass
class TrainConfig:
    """Master configuration for both training phases and evaluation."""

    # data
    image_size: int = 64
    p_same: float = 0.2
    batch_size: int = 4
    # generator
    output_size: int = 64
    style_dim: int = 128
    n_usm_blocks: int = 4
    content_tap: str = "relu4_2"
    div_tap: str = "relu4_2"
    use_ds: bool = True
    use_div: bool = True
    # encoder swaps (ablations)
    texture_arch: str = "vgg_like"
    style_source: str = "mfm_like"
    texture_channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    cls_channels: tuple[int, ...] = (32, 64, 128)
    # phase 2 (generator) optimization
    iterations: int = 2000
    lr: float = 1e-4
    eval_interval: int = 500
    track_metrics: bool = False
    joint_training: bool = False
    # phase 1 (classifier) optimization
    cls_iterations: int = 500
    cls_lr: float = 1e-3
    cls_batch_size: int = 16
    cls_target_accuracy: float = 0.98
    # losses
    weights: LossWeights = field(default_factory=LossWeights)
    contextual: ContextualConfig = field(default_factory=ContextualConfig)
    # metric/identity backends
    identity_backend: str = "fallback"
    textimage_backend: str = "fallback"
    content_per_domain: int = 2
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise IdstyleError("iterations must be >= 1")
        if not (1 <= self.eval_interval <= self.iterations):
            raise IdstyleError("eval_interval must lie in [1, iterations]")
        if self.output_size != self.image_size:
            raise IdstyleError(
                "output_size must equal image_size (generated images are re-encoded "
                "by the frozen feature extractors during training)"
            )
        if not 0.0 <= self.p_same <= 1.0:
            raise IdstyleError("p_same must lie in [0, 1]")
        if self.batch_size < 1:
            raise IdstyleError("batch_size must be >= 1")
        if self.texture_arch not in TEXTURE_ARCHS:
            raise IdstyleError(f"texture_arch must be one of {TEXTURE_ARCHS}")
        if self.style_source not in STYLE_SOURCES:
            raise IdstyleError(f"style_source must be one of {STYLE_SOURCES}")
        self.weights.validate()
        self.contextual.validate()
        self.encoder_config().validate()
        self.generator_config().validate()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_size=self.image_size,
            channels=tuple(self.texture_channels),
            content_tap=self.content_tap,
            div_tap=self.div_tap,
            code_dim=self.style_dim,
        )

    def generator_config(self) -> GeneratorConfig:
        enc = self.encoder_config()
        return GeneratorConfig(
            content_channels=enc.content_channels,
            content_size=enc.content_size,
            output_size=self.output_size,
            style_dim=self.style_dim,
            n_blocks=self.n_usm_blocks,
            use_ds=self.use_ds,
            use_div=self.use_div,
        )


def paper_scale_config() -> TrainConfig:
    """Full-resolution configuration: 256px, 8 blocks, 512-dim codes."""
    return TrainConfig(
        image_size=256,
        output_size=256,
        style_dim=512,
        n_usm_blocks=8,
        texture_channels=(64, 128, 256, 512, 512),
        cls_channels=(48, 96, 192),
    )


def desk_config(**overrides) -> TrainConfig:
    """Small configuration that trains in minutes on one CPU."""
    cfg = TrainConfig()
    return replace_config(cfg, **overrides) if overrides else cfg


def replace_config(cfg: TrainConfig, **overrides) -> TrainConfig:
    """Copy ``cfg`` with flat-key overrides (nested weight/contextual keys allowed)."""
    flat = to_flat_dict(cfg)
    for k, v in overrides.items():
        if k not in flat:
            raise IdstyleError(f"unknown config key {k!r}")
        flat[k] = v
    return from_flat_dict(flat)


# --- flat serialization ------------------------------------------------------

_CX_PREFIX = "cx_"


def to_flat_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "weights":
            out.update(dataclasses.asdict(v))
        elif f.name == "contextual":
            for cf in dataclasses.fields(v):
                val = getattr(v, cf.name)
                out[_CX_PREFIX + cf.name] = list(val) if isinstance(val, tuple) else val
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def from_flat_dict(flat: dict) -> TrainConfig:
    flat = dict(flat)
    weights = LossWeights()
    for f in dataclasses.fields(LossWeights):
        if f.name in flat:
            setattr(weights, f.name, float(flat.pop(f.name)))
    cx = ContextualConfig()
    for f in dataclasses.fields(ContextualConfig):
        key = _CX_PREFIX + f.name
        if key in flat:
            v = flat.pop(key)
            setattr(cx, f.name, tuple(v) if isinstance(v, list) else v)
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("weights", "contextual"):
            continue
        if f.name in flat:
            v = flat.pop(f.name)
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    if flat:
        raise IdstyleError(f"unknown config keys: {sorted(flat)}")
    return TrainConfig(weights=weights, contextual=cx, **kwargs)


def load_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise MalformedManifest(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise MalformedManifest(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise MalformedManifest(f"config file {path} must hold a flat JSON object")
    return from_flat_dict(raw)


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        json.dump(to_flat_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: TrainConfig) -> str:
    """Stable digest used to pair checkpoints with the config that built them."""
    blob = json.dumps(to_flat_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def classifier_hash(cfg: TrainConfig, n_domains: int) -> str:
    """Digest over the fields the pretrained classifier actually depends on.

    Ablations that only touch the generator or loss weights keep reusing the
    same phase-1 checkpoint.
    """
    relevant = {
        "image_size": cfg.image_size,
        "cls_channels": list(cfg.cls_channels),
        "style_dim": cfg.style_dim,
        "n_domains": n_domains,
        "seed": cfg.seed,
        "cls_lr": cfg.cls_lr,
        "cls_batch_size": cfg.cls_batch_size,
    }
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
