"""Feature extractors feeding the generator and the losses.

Three families live here:

* a VGG-flavored texture encoder producing the spatial content feature and
  the pooled diversity code,
* a max-feature-map (MFM) domain classifier whose penultimate embedding is
  the distinctive domain-aware style code,
* pluggable identity / text-image embedding backends with dependency-free
  fallbacks, plus a guided-backpropagation diagnostic.

All encoders are frozen after construction (or after pretraining, for the
classifier) and behave as pure functions of (weights, input).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import TAP_STRIDES, EncoderConfig, _tap_stage
from .errors import (
    NoBackendRegistered,
    OddChannelCount,
    ShapeMismatch,
    UnsupportedActivation,
)


def mfm(x: torch.Tensor) -> torch.Tensor:
    """Max-feature-map: elementwise max of the two channel halves.

    Accepts (..., 2C, H, W); ties route gradient to the first half.
    """
    c = x.shape[-3]
    if c % 2 != 0:
        raise OddChannelCount(f"mfm needs an even channel count, got {c}")
    a, b = x.narrow(-3, 0, c // 2), x.narrow(-3, c // 2, c // 2)
    return torch.where(a >= b, a, b)


def global_avg_pool(feat: torch.Tensor) -> torch.Tensor:
    """Spatial mean of a (..., C, H, W) feature map -> (..., C)."""
    return feat.mean(dim=(-2, -1))


def _as_batch(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img[None], True
    if img.dim() == 4:
        return img, False
    raise ShapeMismatch(f"expected 3-D or 4-D image tensor, got shape {tuple(img.shape)}")


def seeded_init_(module: nn.Module, seed: int):
    """Re-initialize all parameters from an explicit generator.

    Conv/linear weights get Kaiming-style normals, biases and normalization
    offsets zero, normalization scales one.  Deterministic regardless of
    global RNG state.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.dim() > 2 else 1)
            std = math.sqrt(2.0 / max(1, fan_in))
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def freeze_(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


class TextureEncoder(nn.Module):
    """Multi-stage conv stack with named rectifier taps (relu1_2 .. relu5_2).

    Stage k's tap sits at stride 2**(k-1); average pooling halves the
    resolution between stages.  ``arch`` picks the normalization flavor used
    by encoder-swap ablations.  A weight-loading hook (``load_state_dict``)
    accepts externally pretrained weights of the same shape.
    """

    def __init__(self, cfg: EncoderConfig, arch: str = "vgg_like", seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.arch = arch
        norm = nn.InstanceNorm2d if arch == "vgg_like" else nn.BatchNorm2d
        self.stages = nn.ModuleList()
        in_ch = 3
        for ch in cfg.channels:
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, padding=1),
                    norm(ch, affine=True),
                    nn.ReLU(),
                    nn.Conv2d(ch, ch, 3, padding=1),
                    norm(ch, affine=True),
                    nn.ReLU(),
                )
            )
            in_ch = ch
        div_ch = cfg.channels[_tap_stage(cfg.div_tap)]
        self.div_proj = nn.Linear(div_ch, cfg.code_dim, bias=False)
        seeded_init_(self, seed if arch == "vgg_like" else seed + 7919)
        if cfg.frozen:
            freeze_(self)

    @property
    def tap_names(self) -> tuple[str, ...]:
        return tuple(f"relu{k + 1}_2" for k in range(len(self.stages)))

    def taps(self, img: torch.Tensor, names=None) -> dict[str, torch.Tensor]:
        """Feature maps at the requested taps for a batch or single image."""
        x, single = _as_batch(img)
        if x.shape[-1] != self.cfg.input_size or x.shape[-2] != self.cfg.input_size:
            raise ShapeMismatch(
                f"expected {self.cfg.input_size}px input, got {tuple(x.shape[-2:])}"
            )
        wanted = set(names if names is not None else self.tap_names)
        unknown = wanted - set(self.tap_names)
        if unknown:
            raise ShapeMismatch(f"unknown taps {sorted(unknown)}")
        out = {}
        for k, stage in enumerate(self.stages):
            x = stage(x)
            name = f"relu{k + 1}_2"
            if name in wanted:
                out[name] = x[0] if single else x
            x = F.avg_pool2d(x, 2)
        return out

    def content_feature(self, img: torch.Tensor) -> torch.Tensor:
        """Spatial content feature at the configured tap."""
        return self.taps(img, [self.cfg.content_tap])[self.cfg.content_tap]

    def diversity_code(self, img: torch.Tensor) -> torch.Tensor:
        """Pooled deep feature projected to the style-code dimension."""
        feat = self.taps(img, [self.cfg.div_tap])[self.cfg.div_tap]
        return self.div_proj(global_avg_pool(feat))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.content_feature(img)


class DomainClassifier(nn.Module):
    """MFM conv stack + global pool + linear embedding + domain logits head.

    The embedding (penultimate layer) is the distinctive style code; the
    zero-initialized head starts at the uniform prediction.
    """

    def __init__(self, n_domains: int, channels=(32, 64, 128), code_dim: int = 128,
                 input_size: int = 64, seed: int = 0):
        super().__init__()
        self.n_domains = n_domains
        self.input_size = input_size
        convs = []
        in_ch = 3
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, 2 * ch, 3, padding=1))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.embed_fc = nn.Linear(channels[-1], code_dim)
        self.head = nn.Linear(code_dim, n_domains)
        seeded_init_(self, seed)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def embed(self, img: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(img)
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise ShapeMismatch(
                f"expected {self.input_size}px input, got {tuple(x.shape[-2:])}"
            )
        for conv in self.convs:
            x = F.max_pool2d(mfm(conv(x)), 2)
        z = self.embed_fc(global_avg_pool(x))
        return z[0] if single else z

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(img)
        out = self.head(self.embed(x))
        return out[0] if single else out

    def probabilities(self, img: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(img), dim=-1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.logits(img)


def texture_encode(encoder: TextureEncoder, img: torch.Tensor) -> torch.Tensor:
    return encoder.content_feature(img)


def diversity_code(encoder: TextureEncoder, img: torch.Tensor) -> torch.Tensor:
    return encoder.diversity_code(img)


def distinctive_code(classifier: DomainClassifier, img: torch.Tensor) -> torch.Tensor:
    return classifier.embed(img)


def classify_domain(classifier: DomainClassifier, img: torch.Tensor) -> torch.Tensor:
    return classifier.probabilities(img)


# --- guided backpropagation ---------------------------------------------------

_FORBIDDEN_ACTIVATIONS = (
    nn.Sigmoid, nn.Tanh, nn.GELU, nn.SiLU, nn.ELU, nn.Softplus, nn.PReLU, nn.Hardswish,
)


def guided_backprop(model: nn.Module, img: torch.Tensor, target_index: int,
                    forward=None) -> torch.Tensor:
    """Saliency of one output scalar w.r.t. the input image.

    At every rectifier the backward signal is zeroed where the forward
    activation was <= 0 or the incoming gradient is <= 0; max-feature-map
    layers route gradient to the winning half.  ``forward`` maps
    (model, batch) to an (N, K) output matrix; defaults to ``model(batch)``.
    """
    for m in model.modules():
        if isinstance(m, _FORBIDDEN_ACTIVATIONS):
            raise UnsupportedActivation(
                f"guided backprop needs rectifier activations, found {type(m).__name__}"
            )

    saved = {}
    handles = []

    def fwd_hook(module, inputs, output):
        saved[module] = output

    def bwd_hook(module, grad_input, grad_output):
        out = saved[module]
        g = grad_output[0]
        gated = g * (out > 0) * (g > 0)
        return (gated,)

    for m in model.modules():
        if isinstance(m, (nn.ReLU, nn.LeakyReLU)):
            handles.append(m.register_forward_hook(fwd_hook))
            handles.append(m.register_full_backward_hook(bwd_hook))

    x, single = _as_batch(img)
    x = x.detach().clone().requires_grad_(True)
    try:
        out = forward(model, x) if forward is not None else model(x)
        if out.dim() == 1:
            out = out[None]
        scalar = out[:, target_index].sum()
        scalar.backward()
        grad = x.grad.detach().clone()
    finally:
        for h in handles:
            h.remove()
        saved.clear()
    return grad[0] if single else grad


# --- identity / text-image backends ---------------------------------------------


class FallbackIdentityBackend:
    """Dependency-free identity embedding: 8x8 grayscale downsample,
    mean-subtracted, L2-normalized.  Linear, hence embed(-x) = -embed(x)."""

    grid = 8

    def embed(self, img: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(img)
        gray = x.mean(dim=-3, keepdim=True)
        small = F.adaptive_avg_pool2d(gray, self.grid).flatten(1)
        centered = small - small.mean(dim=1, keepdim=True)
        out = centered / centered.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return out[0] if single else out


class ExternalTorchBackend:
    """TorchScript module mapping an image batch to embedding rows."""

    def __init__(self, path):
        self.module = torch.jit.load(path)
        self.module.eval()

    def embed(self, img: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(img)
        out = self.module(x)
        out = out / out.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return out[0] if single else out


def build_identity_backend(key: str):
    """Config key ``identity_backend`` -> backend object (or None for "none")."""
    if key == "fallback":
        return FallbackIdentityBackend()
    if key == "none":
        return None
    if key.startswith("external:"):
        return ExternalTorchBackend(key.split(":", 1)[1])
    raise NoBackendRegistered(f"unknown identity backend {key!r}")


def embed_identity(img: torch.Tensor, backend) -> torch.Tensor:
    if backend is None:
        raise NoBackendRegistered("no identity backend registered")
    return backend.embed(img)


class TextImageFallback:
    """Shared image/text embedding space at desk scale.

    Images embed as the (L2-normalized) domain-classifier probability
    vector; text embeds as a normalized bag of domain keywords.  Keyword set
    per domain: its registry name plus "domain_<id>".
    """

    def __init__(self, classifier: DomainClassifier, domain_names):
        self.classifier = classifier
        self.domain_names = list(domain_names)

    def embed_image(self, img: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(img)
        p = self.classifier.probabilities(x)
        out = p / p.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return out[0] if single else out

    def embed_text(self, text: str) -> torch.Tensor:
        low = text.lower()
        counts = torch.zeros(len(self.domain_names))
        for idx, name in enumerate(self.domain_names):
            for keyword in (name.lower(), f"domain_{idx}"):
                if keyword in low:
                    counts[idx] += 1.0
                    break
        return counts / counts.norm().clamp_min(1e-12)


def build_textimage_backend(key: str, classifier=None, domain_names=None):
    """Config key ``textimage_backend`` -> backend object (or None for "none")."""
    if key == "fallback":
        if classifier is None or domain_names is None:
            raise NoBackendRegistered(
                "fallback text-image backend needs a trained classifier and domain names"
            )
        return TextImageFallback(classifier, domain_names)
    if key == "none":
        return None
    if key.startswith("external:"):
        return ExternalTorchBackend(key.split(":", 1)[1])
    raise NoBackendRegistered(f"unknown text-image backend {key!r}")


def embed_text_image(x, backend) -> torch.Tensor:
    if backend is None:
        raise NoBackendRegistered("no text-image backend registered")
    if isinstance(x, str):
        return backend.embed_text(x)
    return backend.embed_image(x)
