"""The single universal generator: content feature in, stylized image out.

A ladder of style-modulated conv blocks upsamples the content feature to the
output resolution.  At every level the two style codes are fused by a
per-level fully connected layer; the fused vector drives per-channel AdaIN
scale/shift inside the block.  A 1x1 conv + tanh head maps the last feature
map to a 3-channel image in [-1, 1].
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import GeneratorConfig, USMBlockConfig
from .encoders import DomainClassifier, TextureEncoder, _as_batch, seeded_init_
from .errors import (
    ChannelMismatch,
    DegenerateSpatial,
    DimensionMismatch,
    LevelOutOfRange,
    ShapeMismatch,
)


def adain(feat: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Per-channel instance renormalization.

    out[c] = gamma[c] * (feat[c] - mean_c) / (std_c + eps) + beta[c], with
    spatial (population) moments per channel.  Output spatial mean is beta
    and spatial std is |gamma| up to the eps correction.
    """
    if feat.dim() < 3:
        raise ShapeMismatch(f"expected (..., C, H, W) feature, got shape {tuple(feat.shape)}")
    h, w = feat.shape[-2], feat.shape[-1]
    if h * w < 2:
        raise DegenerateSpatial(f"need at least 2 spatial positions, got {h}x{w}")
    c = feat.shape[-3]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ChannelMismatch(
            f"modulation length {gamma.shape[-1]}/{beta.shape[-1]} does not match {c} channels"
        )
    mu = feat.mean(dim=(-2, -1), keepdim=True)
    sigma = feat.var(dim=(-2, -1), unbiased=False, keepdim=True).sqrt()
    g = gamma[..., None, None]
    b = beta[..., None, None]
    return g * (feat - mu) / (sigma + eps) + b


class StyleAffine(nn.Module):
    """Fused style vector -> per-channel (gamma, beta), gamma centered at 1."""

    def __init__(self, style_dim: int, channels: int):
        super().__init__()
        self.scale = nn.Linear(style_dim, channels, bias=False)
        self.shift = nn.Linear(style_dim, channels, bias=False)

    def forward(self, z_style: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if z_style.shape[-1] != self.scale.in_features:
            raise DimensionMismatch(
                f"style vector length {z_style.shape[-1]} != {self.scale.in_features}"
            )
        return 1.0 + self.scale(z_style), self.shift(z_style)


class StyledBlock(nn.Module):
    """One generator level: [2x nearest upsample] -> conv3x3 -> AdaIN -> leaky."""

    def __init__(self, block: USMBlockConfig, style_dim: int, eps: float = 1e-5):
        super().__init__()
        self.block = block
        self.eps = eps
        self.conv = nn.Conv2d(block.in_channels, block.out_channels, 3, padding=1)
        self.affine = StyleAffine(style_dim, block.out_channels)

    def forward(self, feat: torch.Tensor, z_style: torch.Tensor) -> torch.Tensor:
        if feat.shape[-3] != self.block.in_channels:
            raise ShapeMismatch(
                f"block {self.block.level} expects {self.block.in_channels} channels, "
                f"got {feat.shape[-3]}"
            )
        if self.block.upsample:
            feat = F.interpolate(feat, scale_factor=2, mode="nearest") if feat.dim() == 4 \
                else F.interpolate(feat[None], scale_factor=2, mode="nearest")[0]
        x = self.conv(feat)
        gamma, beta = self.affine(z_style)
        x = adain(x, gamma, beta, self.eps)
        return F.leaky_relu(x, 0.2)


class Generator(nn.Module):
    """Style-modulated decoder over the content feature."""

    def __init__(self, cfg: GeneratorConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        plan = cfg.block_plan()
        self.integrators = nn.ModuleList(
            nn.Linear(2 * cfg.style_dim, cfg.style_dim) for _ in plan
        )
        self.blocks = nn.ModuleList(StyledBlock(b, cfg.style_dim) for b in plan)
        self.to_rgb = nn.Conv2d(plan[-1].out_channels, 3, 1)
        seeded_init_(self, seed)
        for fc in self.integrators:
            with torch.no_grad():
                fc.bias.zero_()

    def integrate_styles(self, z_ds: torch.Tensor, z_div: torch.Tensor,
                         level: int) -> torch.Tensor:
        """Fuse the two codes with the level's own fully connected layer.

        Codes disabled by the ablation flags are replaced by zero vectors so
        parameter shapes never change.
        """
        if not 0 <= level < len(self.blocks):
            raise LevelOutOfRange(f"level {level} outside 0..{len(self.blocks) - 1}")
        d = self.cfg.style_dim
        if z_ds.shape[-1] != d or z_div.shape[-1] != d:
            raise DimensionMismatch(
                f"codes must have length {d}, got {z_ds.shape[-1]} and {z_div.shape[-1]}"
            )
        if not self.cfg.use_ds:
            z_ds = torch.zeros_like(z_ds)
        if not self.cfg.use_div:
            z_div = torch.zeros_like(z_div)
        return self.integrators[level](torch.cat([z_ds, z_div], dim=-1))

    def synthesize(self, con: torch.Tensor, z_ds: torch.Tensor,
                   z_div: torch.Tensor) -> torch.Tensor:
        single = con.dim() == 3
        if single:
            con, z_ds, z_div = con[None], z_ds[None], z_div[None]
        expect = (self.cfg.content_channels, self.cfg.content_size, self.cfg.content_size)
        if tuple(con.shape[-3:]) != expect:
            raise ShapeMismatch(f"content feature must be {expect}, got {tuple(con.shape[-3:])}")
        x = con
        for level, block in enumerate(self.blocks):
            x = block(x, self.integrate_styles(z_ds, z_div, level))
        img = torch.tanh(self.to_rgb(x))
        return img[0] if single else img

    def forward(self, con, z_ds, z_div):
        return self.synthesize(con, z_ds, z_div)


class DistinctiveSource(nn.Module):
    """Image -> distinctive style code, per the configured provider.

    ``mfm_like`` uses the domain classifier's penultimate embedding;
    ``identity_like`` / ``textimage_like`` project the corresponding backend
    embedding to the code dimension with a fixed seeded linear map.
    """

    def __init__(self, style_source: str, code_dim: int, classifier: DomainClassifier = None,
                 identity_backend=None, textimage_backend=None, seed: int = 0):
        super().__init__()
        self.style_source = style_source
        # plain-dict assignment keeps the shared classifier out of this
        # module's own state_dict (it is checkpointed under its own section)
        self.__dict__["classifier"] = classifier
        self.identity_backend = identity_backend
        self.textimage_backend = textimage_backend
        self.proj = None
        if style_source == "identity_like":
            if identity_backend is None:
                raise DimensionMismatch("identity_like source needs an identity backend")
            in_dim = identity_backend.embed(torch.zeros(3, 16, 16) + 0.1).shape[-1]
            self.proj = nn.Linear(in_dim, code_dim, bias=False)
        elif style_source == "textimage_like":
            if textimage_backend is None:
                raise DimensionMismatch("textimage_like source needs a text-image backend")
            self.proj = nn.Linear(classifier.n_domains, code_dim, bias=False)
        elif style_source != "mfm_like":
            raise DimensionMismatch(f"unknown style source {style_source!r}")
        if self.proj is not None:
            seeded_init_(self.proj, seed + 40961)
            for p in self.proj.parameters():
                p.requires_grad_(False)

    def codes(self, img: torch.Tensor) -> torch.Tensor:
        if self.style_source == "mfm_like":
            return self.classifier.embed(img)
        if self.style_source == "identity_like":
            return self.proj(self.identity_backend.embed(img))
        return self.proj(self.textimage_backend.embed_image(img))


class Stylizer(nn.Module):
    """Bundle of frozen encoders + generator realizing generate(content, style)."""

    def __init__(self, texture: TextureEncoder, ds_source: DistinctiveSource,
                 generator: Generator):
        super().__init__()
        self.texture = texture
        self.ds_source = ds_source
        self.generator = generator

    def style_codes(self, style_img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.ds_source.codes(style_img), self.texture.diversity_code(style_img)

    def generate(self, content_img: torch.Tensor, style_img: torch.Tensor) -> torch.Tensor:
        con = self.texture.content_feature(content_img)
        z_ds, z_div = self.style_codes(style_img)
        return self.generator.synthesize(con, z_ds, z_div)

    def forward(self, content_img, style_img):
        return self.generate(content_img, style_img)
