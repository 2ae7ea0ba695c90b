"""Training objectives.

The total objective combines a gated pixel reconstruction term, a cosine
consistency term on distinctive style codes, and two contextual
feature-similarity terms (style-side and content-side), with optional
identity-consistency and text-image terms for ablations.  All losses are
pure functions usable on single items or batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import ContextualConfig, LossWeights
from .encoders import TextureEncoder, embed_identity, embed_text_image
from .errors import (
    ChannelMismatch,
    DimensionMismatch,
    LabelOutOfRange,
    NonFiniteComponent,
    ShapeMismatch,
    TooFewPositions,
    ZeroVector,
)

# Canonical component order; also the order used to report non-finite values.
COMPONENT_ORDER = ("rec", "psu", "scx", "ccx", "cls", "id", "textimage")


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine of the last-dim vectors; raises on zero vectors."""
    if u.shape[-1] != v.shape[-1]:
        raise DimensionMismatch(f"vector lengths differ: {u.shape[-1]} vs {v.shape[-1]}")
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    if (nu < 1e-12).any() or (nv < 1e-12).any():
        raise ZeroVector("cosine undefined for zero vectors (dead encoder upstream?)")
    return (u * v).sum(dim=-1) / (nu * nv)


def loss_rec(output: torch.Tensor, content: torch.Tensor, same_pair: bool) -> torch.Tensor:
    """Half the summed squared pixel distance, gated to same-sample pairs."""
    if output.shape != content.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(output.shape)} vs {tuple(content.shape)}")
    if not same_pair:
        return output.sum() * 0.0
    return 0.5 * ((output - content) ** 2).sum()


def loss_rec_batch(outputs: torch.Tensor, contents: torch.Tensor, same_flags) -> torch.Tensor:
    """Mean over batch items of the gated reconstruction term."""
    if outputs.shape != contents.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(outputs.shape)} vs {tuple(contents.shape)}")
    per_item = 0.5 * ((outputs - contents) ** 2).flatten(1).sum(dim=1)
    gate = torch.tensor([1.0 if f else 0.0 for f in same_flags], dtype=per_item.dtype)
    return (per_item * gate).mean()


def loss_psu(z_out: torch.Tensor, z_style_ref: torch.Tensor) -> torch.Tensor:
    """Style-prior consistency: 1 - cosine of distinctive codes (in [0, 2])."""
    return (1.0 - cosine_similarity(z_out, z_style_ref)).mean()


def _positions(feat: torch.Tensor, rng, max_positions: int) -> torch.Tensor:
    """Spatial positions of a C x H x W map as rows, subsampled if needed."""
    rows = feat.flatten(1).transpose(0, 1)  # (H*W, C)
    n = rows.shape[0]
    if n > max_positions:
        idx = np.sort(rng.choice(n, size=max_positions, replace=False))
        rows = rows[torch.from_numpy(idx)]
    return rows


def contextual_similarity(f_gen: torch.Tensor, f_ref: torch.Tensor,
                          cfg: ContextualConfig) -> torch.Tensor:
    """Set-to-set feature similarity in (0, 1].

    Spatial positions become channel-length vectors; both sets are centered
    on the reference mean.  Relative cosine distances are softmax-weighted
    per generated position (rows sum to 1 over reference positions), and the
    score is the mean over reference positions of the best-matching
    generated position's weight.
    """
    if f_gen.shape[0] != f_ref.shape[0]:
        raise ChannelMismatch(
            f"channel counts differ: {f_gen.shape[0]} vs {f_ref.shape[0]}"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    g = _positions(f_gen, rng, cfg.max_positions)
    r = _positions(f_ref, rng, cfg.max_positions)
    if g.shape[0] < 2 or r.shape[0] < 2:
        raise TooFewPositions(
            f"need >= 2 spatial positions per set, got {g.shape[0]} and {r.shape[0]}"
        )
    mu = r.mean(dim=0, keepdim=True)
    g = g - mu
    r = r - mu
    g = g / g.norm(dim=1, keepdim=True).clamp_min(1e-12)
    r = r / r.norm(dim=1, keepdim=True).clamp_min(1e-12)
    d = 1.0 - g @ r.transpose(0, 1)  # (Ng, Nr)
    d_rel = d / (d.min(dim=1, keepdim=True).values + cfg.epsilon)
    w = torch.exp((1.0 - d_rel) / cfg.bandwidth)
    cx_ij = w / w.sum(dim=1, keepdim=True)
    return cx_ij.max(dim=0).values.mean()


def _contextual_image_loss(gen: torch.Tensor, ref: torch.Tensor,
                           encoder: TextureEncoder, cfg: ContextualConfig) -> torch.Tensor:
    single = gen.dim() == 3
    gen_b = gen[None] if single else gen
    ref_b = ref[None] if single else ref
    gen_taps = encoder.taps(gen_b, cfg.tap_names)
    ref_taps = encoder.taps(ref_b, cfg.tap_names)
    per_item = []
    for i in range(gen_b.shape[0]):
        total = gen_b.new_zeros(())
        for name in cfg.tap_names:
            cx = contextual_similarity(gen_taps[name][i], ref_taps[name][i], cfg)
            total = total - torch.log(cx.clamp_min(1e-20))
        per_item.append(total)
    return torch.stack(per_item).mean()


def loss_scx(gen: torch.Tensor, style: torch.Tensor, encoder: TextureEncoder,
             cfg: ContextualConfig) -> torch.Tensor:
    """Style contextual loss: sum over taps of -log similarity to the style image."""
    return _contextual_image_loss(gen, style, encoder, cfg)


def loss_ccx(gen: torch.Tensor, content: torch.Tensor, encoder: TextureEncoder,
             cfg: ContextualConfig) -> torch.Tensor:
    """Content contextual loss: same kernel with the content image as reference."""
    return _contextual_image_loss(gen, content, encoder, cfg)


def loss_cls(logits: torch.Tensor, label) -> torch.Tensor:
    """Negative log softmax probability of the true domain (batch mean)."""
    if logits.dim() == 1:
        logits = logits[None]
        labels = torch.tensor([int(label)])
    else:
        labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    n = logits.shape[-1]
    if (labels < 0).any() or (labels >= n).any():
        raise LabelOutOfRange(f"labels must lie in [0, {n}), got {labels.tolist()}")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp[torch.arange(len(labels)), labels].mean()


def loss_identity(gen: torch.Tensor, style: torch.Tensor, backend) -> torch.Tensor:
    """Identity-consistency ablation: 1 - cosine of identity embeddings."""
    return (1.0 - cosine_similarity(embed_identity(gen, backend),
                                    embed_identity(style, backend))).mean()


def loss_textimage(gen: torch.Tensor, prompt: str, backend) -> torch.Tensor:
    """Text-guidance ablation: 1 - cosine of image and prompt embeddings."""
    img = embed_text_image(gen, backend)
    txt = embed_text_image(prompt, backend).to(img.dtype)
    if img.dim() > txt.dim():
        txt = txt.expand_as(img)
    return (1.0 - cosine_similarity(img, txt)).mean()


@dataclass
class LossBreakdown:
    """Per-component values plus their weighted total (canonical order)."""

    rec: float
    psu: float
    scx: float
    ccx: float
    cls: float
    id: float
    textimage: float
    total: float

    def as_dict(self) -> dict:
        return {
            "rec": self.rec, "psu": self.psu, "scx": self.scx, "ccx": self.ccx,
            "cls": self.cls, "id": self.id, "textimage": self.textimage, "total": self.total,
        }


def weighted_total(components: dict, weights: LossWeights):
    """Weighted sum in the canonical order; works on floats and tensors alike."""
    c = {k: components.get(k, 0.0) for k in COMPONENT_ORDER}
    return (
        weights.lambda_psu * c["psu"]
        + weights.lambda_rec * c["rec"]
        + weights.lambda_ccx * c["ccx"]
        + weights.lambda_scx * c["scx"]
        + weights.lambda_id * c["id"]
        + weights.lambda_textimage * c["textimage"]
        + weights.lambda_cls * c["cls"]
    )


def total_loss(components: dict, weights: LossWeights) -> LossBreakdown:
    """Validate component finiteness and assemble the breakdown record."""
    vals = {}
    for name in COMPONENT_ORDER:
        v = float(components.get(name, 0.0))
        if not math.isfinite(v):
            raise NonFiniteComponent(f"loss component '{name}' is not finite: {v}")
        vals[name] = v
    return LossBreakdown(total=float(weighted_total(vals, weights)), **vals)
