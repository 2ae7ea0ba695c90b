"""Quantitative evaluation: distribution distances, identity distances and
the per-style-domain benchmark report.

Feature-space distances (Frechet, kernel MMD) run on a pluggable feature
extractor; the default desk-scale extractor is the frozen domain
classifier's penultimate embedding.  Kernel MMD is stored raw and scaled by
100 only at report time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    DimensionMismatch,
    EmptyEvalSplit,
    IncompleteGrid,
    NonPSDBeyondTolerance,
    TooFewSamples,
)
from .losses import cosine_similarity
from .niqe import NiqeModel, niqe_score, tensor_to_grayscale


@dataclass(frozen=True)
class FeatureStats:
    """Sufficient statistics of a feature set: mean, covariance, count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, x: np.ndarray) -> "FeatureStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise TooFewSamples(f"need >= 2 feature rows, got shape {x.shape}")
        return cls(x.mean(axis=0), np.cov(x, rowvar=False), x.shape[0])


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((s + s.T) / 2.0)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def _check_psd(s: np.ndarray, tol: float = 1e-6):
    w = np.linalg.eigvalsh((s + s.T) / 2.0)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -tol * scale:
        raise NonPSDBeyondTolerance(f"covariance has eigenvalue {w.min():.3g}")


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Frechet distance between two feature Gaussians (clamped at 0).

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), the matrix square
    root taken through a symmetric eigendecomposition with small negative
    eigenvalues clamped to zero.
    """
    if stats_a.mean.shape != stats_b.mean.shape:
        raise DimensionMismatch(
            f"feature dims differ: {stats_a.mean.shape} vs {stats_b.mean.shape}"
        )
    _check_psd(stats_a.cov)
    _check_psd(stats_b.cov)
    root_b = _psd_sqrt(stats_b.cov)
    inner = root_b @ stats_a.cov @ root_b
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.maximum(w, 0.0)).sum()
    delta = stats_a.mean - stats_b.mean
    value = float(delta @ delta + np.trace(stats_a.cov) + np.trace(stats_b.cov) - 2.0 * trace_sqrt)
    return max(0.0, value)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel (raw value)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] < 2 or y.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 rows per set, got {x.shape} and {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    n, m = x.shape[0], y.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def id_distance(a: torch.Tensor, b: torch.Tensor, backend) -> float:
    """1 - cosine of identity embeddings; 0 = same identity, 2 = opposite."""
    from .encoders import embed_identity

    ea = embed_identity(a, backend)
    eb = embed_identity(b, backend)
    val = float(1.0 - cosine_similarity(ea, eb).mean())
    return min(2.0, max(0.0, val))


@dataclass
class MatrixStats:
    """Per-column and overall identity distances of a stylization grid."""

    id_style_per_column: list[float]
    id_content_per_column: list[float]

    @property
    def id_style(self) -> float:
        return float(np.mean(self.id_style_per_column))

    @property
    def id_content(self) -> float:
        return float(np.mean(self.id_content_per_column))

    def as_dict(self) -> dict:
        return {
            "per_column": [
                {"id_style": s, "id_content": c}
                for s, c in zip(self.id_style_per_column, self.id_content_per_column)
            ],
            "overall": {"id_style": self.id_style, "id_content": self.id_content},
        }


def matrix_stats(grid, contents, styles, backend) -> MatrixStats:
    """Identity statistics of the full stylization grid.

    ``grid[i][j]`` is the result of applying style i to content j; column
    statistics average over the style axis.
    """
    n = len(styles)
    if len(contents) != n or len(grid) != n or any(len(row) != n for row in grid):
        raise IncompleteGrid("grid must be N x N with N contents and N styles")
    if any(cell is None for row in grid for cell in row):
        raise IncompleteGrid("grid has missing cells")
    id_style_cols, id_content_cols = [], []
    for j in range(n):
        id_style_cols.append(float(np.mean([
            id_distance(grid[i][j], styles[i], backend) for i in range(n)
        ])))
        id_content_cols.append(float(np.mean([
            id_distance(grid[i][j], contents[j], backend) for i in range(n)
        ])))
    return MatrixStats(id_style_cols, id_content_cols)


@dataclass
class EvalRow:
    domain: str
    fid: float
    kid: float  # raw; reports scale by 100
    niqe: float
    id_style: float
    id_content: float


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def mean_row(self) -> EvalRow:
        return EvalRow(
            domain="mean",
            fid=float(np.mean([r.fid for r in self.rows])),
            kid=float(np.mean([r.kid for r in self.rows])),
            niqe=float(np.mean([r.niqe for r in self.rows])),
            id_style=float(np.mean([r.id_style for r in self.rows])),
            id_content=float(np.mean([r.id_content for r in self.rows])),
        )


def classifier_feature_fn(classifier):
    """Default benchmark feature extractor: classifier penultimate embedding."""

    def fn(images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return classifier.embed(images).cpu().numpy().astype(np.float64)

    return fn


def benchmark_report(registry, records, stylizer, feature_fn, identity_backend,
                     niqe_model: NiqeModel, content_per_domain: int,
                     store) -> EvalReport:
    """Per-style-domain evaluation over the eval split.

    For each style domain: cross-domain eval contents are stylized toward
    it, then scored against the domain's real images (Frechet/kernel
    distances on extracted features), the pristine quality model, and the
    identity backend.
    """
    eval_by_domain: dict[int, list] = {d: [] for d, _ in registry.domains}
    all_by_domain: dict[int, list] = {d: [] for d, _ in registry.domains}
    for r in records:
        all_by_domain[r.domain_id].append(r)
        if r.split == "eval":
            eval_by_domain[r.domain_id].append(r)
    for d, recs in eval_by_domain.items():
        if not recs:
            raise EmptyEvalSplit(f"domain {d} has no eval records")
        recs.sort(key=lambda r: r.instance_id)
        all_by_domain[d].sort(key=lambda r: r.instance_id)

    rows = []
    for j, name in registry.domains:
        refs = eval_by_domain[j]
        contents = []
        for i, _ in registry.domains:
            if i != j:
                contents.extend(eval_by_domain[i][:content_per_domain])
        content_imgs = torch.stack([store.get(r.path) for r in contents])
        ref_imgs = torch.stack([store.get(refs[k % len(refs)].path) for k in range(len(contents))])
        with torch.no_grad():
            gen = stylizer.generate(content_imgs, ref_imgs)

        real_imgs = torch.stack([store.get(r.path) for r in all_by_domain[j]])
        gen_feats = feature_fn(gen)
        real_feats = feature_fn(real_imgs)
        row_fid = fid(FeatureStats.from_features(gen_feats),
                      FeatureStats.from_features(real_feats))
        row_kid = kid(gen_feats, real_feats)
        row_niqe = float(np.mean([
            niqe_score(tensor_to_grayscale(gen[k]), niqe_model) for k in range(gen.shape[0])
        ]))
        row_id_style = float(np.mean([
            id_distance(gen[k], ref_imgs[k], identity_backend) for k in range(gen.shape[0])
        ]))
        row_id_content = float(np.mean([
            id_distance(gen[k], content_imgs[k], identity_backend) for k in range(gen.shape[0])
        ]))
        rows.append(EvalRow(name, row_fid, row_kid, row_niqe, row_id_style, row_id_content))
    return EvalReport(rows)
