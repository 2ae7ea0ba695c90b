"""Corpus ingestion, preprocessing, pair sampling and the synthetic corpus.

A corpus is a JSON manifest naming N style domains plus per-sample records
(path, domain_id, instance_id, split).  The synthetic generator renders a
small multi-domain corpus in which "identity" (blob layout, shared across
domains per instance index) and "style" (hue, grating texture) are
disentangled by construction, so stylization quality is measurable without
any external imagery.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import (
    DuplicateSample,
    EmptyCorpus,
    EmptyImage,
    InvalidBatchSize,
    InvalidCounts,
    IoFailure,
    MalformedManifest,
    MissingFile,
    UnknownDomainId,
    UnsupportedChannelCount,
)

SPLITS = ("train", "eval")


@dataclass(frozen=True)
class DomainRegistry:
    """Ordered list of (domain_id, name); ids are contiguous 0..N-1."""

    domains: tuple[tuple[int, str], ...]

    @property
    def n(self) -> int:
        return len(self.domains)

    def name(self, domain_id: int) -> str:
        return dict(self.domains)[domain_id]

    def validate(self):
        ids = [d for d, _ in self.domains]
        names = [n for _, n in self.domains]
        if ids != list(range(len(ids))):
            raise MalformedManifest(f"domain ids must be contiguous 0..N-1, got {ids}")
        if len(set(names)) != len(names):
            raise MalformedManifest("domain names must be unique")


@dataclass(frozen=True)
class SampleRecord:
    path: str
    domain_id: int
    instance_id: int
    split: str


def load_manifest(path):
    """Read and validate a corpus manifest.

    Returns (DomainRegistry, list[SampleRecord]).  Sample paths are stored
    resolved against the manifest's directory.
    """
    if not os.path.isfile(path):
        raise MissingFile(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise MalformedManifest(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or "domains" not in raw or "samples" not in raw:
        raise MalformedManifest("manifest must hold 'domains' and 'samples' keys")

    try:
        registry = DomainRegistry(tuple((int(d["id"]), str(d["name"])) for d in raw["domains"]))
    except (KeyError, TypeError) as e:
        raise MalformedManifest(f"malformed domain entry: {e}") from e
    registry.validate()

    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    for i, s in enumerate(raw["samples"]):
        try:
            rec = SampleRecord(
                path=str(s["path"]),
                domain_id=int(s["domain_id"]),
                instance_id=int(s["instance_id"]),
                split=str(s["split"]),
            )
        except (KeyError, TypeError) as e:
            raise MalformedManifest(f"malformed sample entry #{i}: {e}") from e
        if rec.split not in SPLITS:
            raise MalformedManifest(f"sample #{i}: split must be one of {SPLITS}, got {rec.split!r}")
        if not 0 <= rec.domain_id < registry.n:
            raise UnknownDomainId(f"sample #{i} references undeclared domain_id {rec.domain_id}")
        key = (rec.domain_id, rec.instance_id)
        if key in seen:
            raise DuplicateSample(f"duplicate (domain_id, instance_id) = {key}")
        seen.add(key)
        full = rec.path if os.path.isabs(rec.path) else os.path.join(base, rec.path)
        if not os.path.isfile(full):
            raise MissingFile(f"sample image not found: {full}")
        records.append(SampleRecord(full, rec.domain_id, rec.instance_id, rec.split))
    return registry, records


def write_manifest(registry: DomainRegistry, records, path):
    """Inverse of load_manifest (paths written relative to the manifest dir)."""
    base = os.path.dirname(os.path.abspath(path))
    doc = {
        "domains": [{"id": d, "name": n} for d, n in registry.domains],
        "samples": [
            {
                "path": os.path.relpath(r.path, base) if os.path.isabs(r.path) else r.path,
                "domain_id": r.domain_id,
                "instance_id": r.instance_id,
                "split": r.split,
            }
            for r in records
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --- image preprocessing -----------------------------------------------------


def preprocess(raw_image, size: int) -> torch.Tensor:
    """Decoded pixel array -> 3 x size x size float tensor in [-1, 1].

    Integer inputs are mapped via 2*x/255 - 1; float inputs are assumed
    already normalized.  Grayscale is replicated to 3 channels, resizing is
    bilinear.  Already-sized normalized inputs pass through unchanged, so the
    map is idempotent.
    """
    if isinstance(raw_image, torch.Tensor):
        a = raw_image.detach().cpu().numpy()
    else:
        a = np.asarray(raw_image)
    if a.size == 0:
        raise EmptyImage("image has no pixels")

    if a.ndim == 2:
        a = a[None, :, :]
    elif a.ndim == 3:
        # Accept HWC or CHW; prefer HWC (the decoder layout) when ambiguous.
        if a.shape[-1] in (1, 3):
            a = np.moveaxis(a, -1, 0)
        elif a.shape[0] not in (1, 3):
            raise UnsupportedChannelCount(f"cannot interpret image of shape {a.shape}")
    else:
        raise UnsupportedChannelCount(f"expected 2-D or 3-D pixel array, got shape {a.shape}")
    if a.shape[0] not in (1, 3):
        raise UnsupportedChannelCount(f"expected 1 or 3 channels, got {a.shape[0]}")

    if np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.float32) * (2.0 / 255.0) - 1.0
    else:
        a = a.astype(np.float32)

    t = torch.from_numpy(np.ascontiguousarray(a))
    if t.shape[0] == 1:
        t = t.expand(3, -1, -1).contiguous()
    if t.shape[1] != size or t.shape[2] != size:
        t = torch.nn.functional.interpolate(
            t[None], size=(size, size), mode="bilinear", align_corners=False
        )[0]
    return t


def load_image(path, size: int) -> torch.Tensor:
    """Decode a PNG and preprocess it."""
    if not os.path.isfile(path):
        raise MissingFile(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return preprocess(arr, size)


def save_image(tensor: torch.Tensor, path):
    """Write a 3 x H x W tensor in [-1, 1] as an 8-bit PNG."""
    a = tensor.detach().cpu().clamp(-1, 1).numpy()
    a = ((a + 1.0) * (255.0 / 2.0)).round().astype(np.uint8)
    Image.fromarray(np.moveaxis(a, 0, -1)).save(path)
    return path


class ImageStore:
    """Memoizing path -> preprocessed tensor loader."""

    def __init__(self, size: int):
        self.size = size
        self._cache: dict[str, torch.Tensor] = {}

    def get(self, path) -> torch.Tensor:
        t = self._cache.get(path)
        if t is None:
            t = load_image(path, self.size)
            self._cache[path] = t
        return t


# --- pair sampling -------------------------------------------------------------


@dataclass
class PairItem:
    image: torch.Tensor
    domain_id: int
    instance_id: int


@dataclass
class PairBatch:
    content: list[PairItem]
    style: list[PairItem]
    same_flags: list[bool]

    def __len__(self):
        return len(self.content)

    def content_images(self) -> torch.Tensor:
        return torch.stack([it.image for it in self.content])

    def style_images(self) -> torch.Tensor:
        return torch.stack([it.image for it in self.style])


def sample_pair_indices(records, batch_size, p_same, rng):
    """Draw (content_record, style_record, same_flag) triples.

    Content and style domains are chosen independently and uniformly over
    the domains that have train records; with probability ``p_same`` the
    style sample is the content sample itself.  The flag is true exactly
    when both ids coincide, so accidental collisions are flagged too.
    """
    if batch_size < 1:
        raise InvalidBatchSize(f"batch_size must be >= 1, got {batch_size}")
    train = [r for r in records if r.split == "train"]
    if not train:
        raise EmptyCorpus("no train records to sample from")
    by_domain: dict[int, list[SampleRecord]] = {}
    for r in train:
        by_domain.setdefault(r.domain_id, []).append(r)
    domains = sorted(by_domain)

    triples = []
    for _ in range(batch_size):
        cd = domains[rng.integers(len(domains))]
        content = by_domain[cd][rng.integers(len(by_domain[cd]))]
        if rng.random() < p_same:
            style = content
        else:
            sd = domains[rng.integers(len(domains))]
            style = by_domain[sd][rng.integers(len(by_domain[sd]))]
        same = content.domain_id == style.domain_id and content.instance_id == style.instance_id
        triples.append((content, style, same))
    return triples


class PairSampler:
    """Deterministic sequential stream of content/style pair batches."""

    def __init__(self, records, store: ImageStore, p_same: float, seed: int):
        self.records = list(records)
        self.store = store
        self.p_same = p_same
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def next_batch(self, batch_size: int) -> PairBatch:
        triples = sample_pair_indices(self.records, batch_size, self.p_same, self.rng)
        content, style, flags = [], [], []
        for c, s, same in triples:
            content.append(PairItem(self.store.get(c.path), c.domain_id, c.instance_id))
            style.append(PairItem(self.store.get(s.path), s.domain_id, s.instance_id))
            flags.append(same)
        return PairBatch(content, style, flags)


def sample_pair_batch(records, batch_size, p_same, rng_seed, store: ImageStore) -> PairBatch:
    """One deterministic batch (a fresh stream drained once)."""
    return PairSampler(records, store, p_same, rng_seed).next_batch(batch_size)


# --- synthetic corpus ------------------------------------------------------------

# Theme names for synthetic domains; index 0 is the bright low-texture domain
# used as the pristine reference corpus for no-reference quality scoring.
_DOMAIN_THEMES = (
    "daylike",
    "nightlike",
    "sketchlike",
    "animelike",
    "bronzelike",
    "frostlike",
    "emberlike",
    "mosslike",
    "duskline",
    "pearllike",
    "oxidelike",
    "irislike",
    "ashlike",
)


@dataclass
class _DomainStyle:
    rgb: tuple[float, float, float]  # base color, components in [0, 1]
    freq: float  # grating frequency in cycles per image
    theta: float  # grating orientation
    amplitude: float  # grating contrast
    skin_shift: float  # hue offset of the face region


@dataclass
class _Layout:
    cx: float
    cy: float
    rx: float
    ry: float
    eye_dx: float
    eye_dy: float
    eye_r: float
    has_mouth: bool
    mouth_dy: float
    mouth_w: float
    mouth_h: float
    has_nose: bool
    nose_r: float


def _domain_style(seed: int, domain: int, n_domains: int) -> _DomainStyle:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101, domain])))
    hue = (domain / n_domains + 0.02 * rng.random()) % 1.0
    if domain == 0:
        # bright, weakly textured: the natural-image analog
        sat, val, amp = 0.35, 0.92, 0.04
    else:
        sat = 0.5 + 0.4 * rng.random()
        val = 0.45 + 0.45 * rng.random()
        amp = 0.08 + 0.18 * rng.random()
    rgb = colorsys.hsv_to_rgb(hue, sat, val)
    return _DomainStyle(
        rgb=rgb,
        freq=float(rng.integers(2, 8)),
        theta=float(rng.random() * np.pi),
        amplitude=amp,
        skin_shift=0.04 + 0.05 * rng.random(),
    )


def _instance_layout(seed: int, instance: int) -> _Layout:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 202, instance])))
    return _Layout(
        cx=0.42 + 0.16 * rng.random(),
        cy=0.42 + 0.16 * rng.random(),
        rx=0.24 + 0.10 * rng.random(),
        ry=0.26 + 0.10 * rng.random(),
        eye_dx=0.09 + 0.06 * rng.random(),
        eye_dy=0.05 + 0.07 * rng.random(),
        eye_r=0.030 + 0.025 * rng.random(),
        has_mouth=rng.random() < 0.85,
        mouth_dy=0.10 + 0.07 * rng.random(),
        mouth_w=0.07 + 0.06 * rng.random(),
        mouth_h=0.018 + 0.022 * rng.random(),
        has_nose=rng.random() < 0.5,
        nose_r=0.020 + 0.018 * rng.random(),
    )


def _blob(xx, yy, cx, cy, rx, ry):
    """Soft-edged ellipse mask in [0, 1]."""
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    return np.clip((1.2 - d) / 0.4, 0.0, 1.0)


def _render(style: _DomainStyle, layout: _Layout, size: int, phase: float) -> np.ndarray:
    ax = np.linspace(0.0, 1.0, size, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")

    grating = np.sin(
        2 * np.pi * style.freq * (xx * np.cos(style.theta) + yy * np.sin(style.theta)) + phase
    )
    img = np.empty((size, size, 3), dtype=np.float64)
    base = np.asarray(style.rgb)
    shade = 1.0 + style.amplitude * grating
    for c in range(3):
        img[:, :, c] = base[c] * shade

    h, s, v = colorsys.rgb_to_hsv(*style.rgb)
    skin = np.asarray(colorsys.hsv_to_rgb((h + style.skin_shift) % 1.0, max(0.1, s * 0.7), min(1.0, v * 1.15)))
    dark = np.asarray(colorsys.hsv_to_rgb(h, min(1.0, s * 1.2), v * 0.35))

    def paint(mask, color):
        m = mask[:, :, None]
        np.copyto(img, img * (1 - m) + color[None, None, :] * m)

    paint(_blob(xx, yy, layout.cx, layout.cy, layout.rx, layout.ry), skin)
    paint(_blob(xx, yy, layout.cx - layout.eye_dx, layout.cy - layout.eye_dy, layout.eye_r, layout.eye_r), dark)
    paint(_blob(xx, yy, layout.cx + layout.eye_dx, layout.cy - layout.eye_dy, layout.eye_r, layout.eye_r), dark)
    if layout.has_nose:
        paint(_blob(xx, yy, layout.cx, layout.cy + 0.02, layout.nose_r, layout.nose_r * 1.4), dark * 0.5 + skin * 0.5)
    if layout.has_mouth:
        paint(_blob(xx, yy, layout.cx, layout.cy + layout.mouth_dy, layout.mouth_w, layout.mouth_h), dark)

    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_synthetic_corpus(out_dir, n_domains: int, per_domain: int, size: int, rng_seed: int):
    """Render a deterministic multi-domain corpus and write its manifest.

    Per-instance blob layouts are shared across domains, per-domain hue and
    grating are shared across instances.  Roughly the last quarter of each
    domain's instances land in the eval split.  Returns the manifest path.
    """
    if n_domains < 2 or per_domain < 2:
        raise InvalidCounts(f"need n_domains >= 2 and per_domain >= 2, got {n_domains}, {per_domain}")
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create corpus directory {img_dir}: {e}") from e

    n_eval = max(1, per_domain // 4)
    n_train = per_domain - n_eval

    names = [
        _DOMAIN_THEMES[d] if d < len(_DOMAIN_THEMES) else f"domain_{d}" for d in range(n_domains)
    ]
    registry = DomainRegistry(tuple((d, names[d]) for d in range(n_domains)))

    records = []
    for d in range(n_domains):
        style = _domain_style(rng_seed, d, n_domains)
        for n in range(per_domain):
            layout = _instance_layout(rng_seed, n)
            phase_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([rng_seed, 303, d, n])))
            arr = _render(style, layout, size, phase=float(phase_rng.random() * 2 * np.pi))
            fname = f"d{d:02d}_i{n:03d}.png"
            try:
                Image.fromarray(arr).save(os.path.join(img_dir, fname))
            except OSError as e:
                raise IoFailure(f"cannot write {fname}: {e}") from e
            records.append(
                SampleRecord(
                    path=os.path.join("images", fname),
                    domain_id=d,
                    instance_id=n,
                    split="train" if n < n_train else "eval",
                )
            )

    return write_manifest(registry, records, os.path.join(out_dir, "manifest.json"))
