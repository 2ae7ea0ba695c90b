"""Two-phase training, checkpoint wiring, ablations and the collapse monitor.

Phase 1 pretrains the MFM domain classifier on domain labels; phase 2
freezes all encoders and optimizes the generator against the weighted
objective, logging one JSON record per iteration.  Per-domain metric
snapshots taken at every eval interval feed the collapse monitor.
"""

from __future__ import annotations

import copy
import json
import os
import re
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    TrainConfig,
    classifier_hash,
    config_hash,
    from_flat_dict,
    to_flat_dict,
)
from .dataset import ImageStore, PairSampler, load_manifest
from .encoders import (
    DomainClassifier,
    TextureEncoder,
    build_identity_backend,
    build_textimage_backend,
    freeze_,
)
from .errors import (
    DivergenceDetected,
    IdstyleError,
    NonFiniteComponent,
    NonFiniteLoss,
    SingleDomainCorpus,
    TooFewSnapshots,
    UnknownVariant,
    UntrainedCheckpoint,
)
from .generator import DistinctiveSource, Generator, Stylizer
from .losses import (
    loss_ccx,
    loss_cls,
    loss_identity,
    loss_psu,
    loss_rec_batch,
    loss_scx,
    loss_textimage,
    total_loss,
    weighted_total,
)
from .metrics import EvalReport, benchmark_report, classifier_feature_fn
from .niqe import niqe_fit, tensor_to_grayscale

PRISTINE_DOMAIN = 0  # synthetic domain 0 is the bright, low-texture one


def _train_domains(records) -> dict[int, list]:
    by_domain: dict[int, list] = {}
    for r in records:
        if r.split == "train":
            by_domain.setdefault(r.domain_id, []).append(r)
    return by_domain


def build_classifier(cfg: TrainConfig, n_domains: int) -> DomainClassifier:
    return DomainClassifier(
        n_domains=n_domains,
        channels=tuple(cfg.cls_channels),
        code_dim=cfg.style_dim,
        input_size=cfg.image_size,
        seed=cfg.seed + 1,
    )


def _classifier_accuracy(classifier, records, store, batch: int = 32) -> float:
    hits = 0
    with torch.no_grad():
        for k in range(0, len(records), batch):
            chunk = records[k:k + batch]
            imgs = torch.stack([store.get(r.path) for r in chunk])
            pred = classifier.logits(imgs).argmax(dim=1)
            hits += sum(int(p) == r.domain_id for p, r in zip(pred, chunk))
    return hits / len(records)


def pretrain_style_classifier(manifest_path, cfg: TrainConfig, out_path) -> str:
    """Phase 1: train the MFM encoder + head on domain labels, then freeze.

    Stops early once the train-split accuracy reaches the configured target.
    Returns the checkpoint path.
    """
    cfg.validate()
    registry, records = load_manifest(manifest_path)
    by_domain = _train_domains(records)
    if registry.n < 2 or len(by_domain) < 2:
        raise SingleDomainCorpus(
            f"classifier pretraining needs >= 2 domains with train samples, got {len(by_domain)}"
        )

    store = ImageStore(cfg.image_size)
    classifier = build_classifier(cfg, registry.n)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=cfg.cls_lr, betas=(0.9, 0.999))
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 11))
    train = [r for r in records if r.split == "train"]

    check_every = 25
    iteration = 0
    for iteration in range(1, cfg.cls_iterations + 1):
        idx = rng.integers(len(train), size=cfg.cls_batch_size)
        chunk = [train[i] for i in idx]
        imgs = torch.stack([store.get(r.path) for r in chunk])
        labels = torch.tensor([r.domain_id for r in chunk])
        loss = loss_cls(classifier.logits(imgs), labels)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"classifier loss became {float(loss)} at iteration {iteration}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if iteration % check_every == 0 or iteration == cfg.cls_iterations:
            if _classifier_accuracy(classifier, train, store) >= cfg.cls_target_accuracy:
                break

    freeze_(classifier)
    acc = _classifier_accuracy(classifier, train, store)
    save_checkpoint(
        out_path,
        config_hash=classifier_hash(cfg, registry.n),
        iteration=iteration,
        seed=cfg.seed,
        sections={"classifier": classifier.state_dict()},
        extra={
            "kind": "classifier",
            "n_domains": registry.n,
            "domain_names": [n for _, n in registry.domains],
            "train_accuracy": acc,
        },
    )
    return out_path


def load_pretrained_classifier(path, cfg: TrainConfig, force: bool = False):
    """Load a phase-1 checkpoint, verifying it matches this config."""
    data = load_checkpoint(path)
    n_domains = int(data.header["extra"]["n_domains"])
    if not force:
        load_checkpoint(path, expect_config_hash=classifier_hash(cfg, n_domains))
    classifier = build_classifier(cfg, n_domains)
    classifier.load_state_dict(data.sections["classifier"])
    freeze_(classifier)
    return classifier, data


def _build_parts(cfg: TrainConfig, classifier, domain_names):
    """Texture encoder, distinctive-code source and generator for this config."""
    texture = TextureEncoder(cfg.encoder_config(), arch=cfg.texture_arch, seed=cfg.seed + 2)
    identity_backend = build_identity_backend(cfg.identity_backend) \
        if cfg.identity_backend != "none" else None
    textimage_backend = None
    if cfg.textimage_backend != "none":
        textimage_backend = build_textimage_backend(
            cfg.textimage_backend, classifier, domain_names
        )
    ds_source = DistinctiveSource(
        cfg.style_source, cfg.style_dim, classifier,
        identity_backend=identity_backend, textimage_backend=textimage_backend,
        seed=cfg.seed + 3,
    )
    for p in ds_source.parameters():
        p.requires_grad_(False)
    generator = Generator(cfg.generator_config(), seed=cfg.seed + 4)
    return texture, ds_source, generator, identity_backend, textimage_backend


def fit_pristine_model(registry, records, store, patch: int = 16,
                       sharpness_quantile: float = 0.75):
    """Fit the no-reference quality model on the pristine-analog domain."""
    imgs = [
        tensor_to_grayscale(store.get(r.path))
        for r in records
        if r.domain_id == PRISTINE_DOMAIN and r.split == "train"
    ]
    return niqe_fit(imgs, patch, sharpness_quantile)


def train_generator(manifest_path, cfg: TrainConfig, classifier_ckpt, out_dir,
                    force: bool = False):
    """Phase 2: optimize the generator against the weighted objective.

    Writes a JSON-lines log (meta record, then one record per iteration,
    plus per-domain metric snapshots when tracking is on) and checkpoints at
    every eval interval.  Returns (checkpoint_path, log_path, snapshots).
    """
    cfg.validate()
    registry, records = load_manifest(manifest_path)
    if len(_train_domains(records)) < 2:
        raise SingleDomainCorpus("generator training needs >= 2 domains with train samples")
    domain_names = [n for _, n in registry.domains]

    classifier, _ = load_pretrained_classifier(classifier_ckpt, cfg, force=force)
    texture, ds_source, generator, identity_backend, textimage_backend = _build_parts(
        cfg, classifier, domain_names
    )
    w = cfg.weights
    if w.lambda_textimage > 0 and textimage_backend is None:
        raise IdstyleError("lambda_textimage > 0 requires a text-image backend")
    if w.lambda_id > 0 and identity_backend is None:
        raise IdstyleError("lambda_id > 0 requires an identity backend")

    params = list(generator.parameters())
    if cfg.joint_training:
        for p in classifier.parameters():
            p.requires_grad_(True)
        params += list(classifier.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999))

    store = ImageStore(cfg.image_size)
    sampler = PairSampler(records, store, cfg.p_same, seed=cfg.seed + 5)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    ckpt_path = os.path.join(out_dir, "generator.ckpt")
    snapshots: list[tuple[int, EvalReport]] = []

    niqe_model = None
    feature_fn = classifier_feature_fn(classifier)
    if cfg.track_metrics:
        niqe_model = fit_pristine_model(registry, records, store)

    def write_ckpt(path, iteration):
        save_checkpoint(
            path,
            config_hash=config_hash(cfg),
            iteration=iteration,
            seed=cfg.seed,
            sections={
                "classifier": classifier.state_dict(),
                "texture_encoder": texture.state_dict(),
                "style_source": ds_source.state_dict(),
                "generator": generator.state_dict(),
            },
            extra={
                "kind": "stylizer",
                "config": to_flat_dict(cfg),
                "n_domains": registry.n,
                "domain_names": domain_names,
            },
        )

    with open(log_path, "w") as log:
        log.write(json.dumps(
            {
                "type": "meta",
                "weights": {
                    "lambda_psu": w.lambda_psu, "lambda_rec": w.lambda_rec,
                    "lambda_ccx": w.lambda_ccx, "lambda_scx": w.lambda_scx,
                    "lambda_id": w.lambda_id, "lambda_textimage": w.lambda_textimage,
                    "lambda_cls": w.lambda_cls,
                },
                "config": to_flat_dict(cfg),
                "n_domains": registry.n,
            },
            sort_keys=True,
        ) + "\n")

        for it in range(1, cfg.iterations + 1):
            batch = sampler.next_batch(cfg.batch_size)
            content = batch.content_images()
            style = batch.style_images()
            with torch.no_grad():
                con = texture.content_feature(content)
                z_ds_ref = ds_source.codes(style)
                z_div_ref = texture.diversity_code(style)
            out = generator.synthesize(con, z_ds_ref, z_div_ref)

            comps = {
                "rec": loss_rec_batch(out, content, batch.same_flags),
                "scx": loss_scx(out, style, texture, cfg.contextual),
                "ccx": loss_ccx(out, content, texture, cfg.contextual),
            }
            # prior consistency on whichever code actually modulates
            if cfg.use_ds:
                comps["psu"] = loss_psu(ds_source.codes(out), z_ds_ref)
            elif cfg.use_div:
                comps["psu"] = loss_psu(texture.diversity_code(out), z_div_ref)
            else:
                comps["psu"] = out.new_zeros(())
            if cfg.joint_training:
                labels = torch.tensor([item.domain_id for item in batch.style])
                comps["cls"] = loss_cls(classifier.logits(style), labels)
            if w.lambda_id > 0:
                from .losses import loss_identity
                comps["id"] = loss_identity(out, style, identity_backend)
            if w.lambda_textimage > 0:
                prompts = [domain_names[item.domain_id] for item in batch.style]
                comps["textimage"] = torch.stack([
                    loss_textimage(out[k], prompts[k], textimage_backend)
                    for k in range(len(prompts))
                ]).mean()

            try:
                breakdown = total_loss({k: float(v) for k, v in comps.items()}, w)
            except NonFiniteComponent as e:
                raise NonFiniteLoss(f"aborting at iteration {it}: {e}") from e

            total = weighted_total(comps, w)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            log.write(json.dumps(
                {"type": "step", "iter": it, **breakdown.as_dict()}, sort_keys=True
            ) + "\n")

            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                write_ckpt(os.path.join(out_dir, f"checkpoint_{it:06d}.ckpt"), it)
                if cfg.track_metrics:
                    stylizer = Stylizer(texture, ds_source, generator)
                    report = benchmark_report(
                        registry, records, stylizer, feature_fn, identity_backend,
                        niqe_model, cfg.content_per_domain, store,
                    )
                    snapshots.append((it, report))
                    log.write(json.dumps(
                        {
                            "type": "snapshot",
                            "iter": it,
                            "rows": [vars(r) for r in report.rows],
                        },
                        sort_keys=True,
                    ) + "\n")

    write_ckpt(ckpt_path, cfg.iterations)
    return ckpt_path, log_path, snapshots


def load_stylizer(checkpoint_path, force: bool = False):
    """Rebuild the full inference bundle from a phase-2 checkpoint."""
    data = load_checkpoint(checkpoint_path)
    extra = data.header["extra"]
    if extra.get("kind") != "stylizer":
        raise UntrainedCheckpoint(f"{checkpoint_path} is not a generator checkpoint")
    cfg = from_flat_dict(extra["config"])
    if not force and data.header["config_hash"] != config_hash(cfg):
        raise UntrainedCheckpoint(f"checkpoint {checkpoint_path} header is inconsistent")
    classifier = build_classifier(cfg, int(extra["n_domains"]))
    classifier.load_state_dict(data.sections["classifier"])
    freeze_(classifier)
    texture, ds_source, generator, identity_backend, textimage_backend = _build_parts(
        cfg, classifier, extra["domain_names"]
    )
    texture.load_state_dict(data.sections["texture_encoder"])
    ds_source.load_state_dict(data.sections["style_source"])
    generator.load_state_dict(data.sections["generator"])
    freeze_(texture)
    freeze_(generator)
    stylizer = Stylizer(texture, ds_source, generator)
    return cfg, data, stylizer, classifier, identity_backend


def evaluate_benchmark(manifest_path, checkpoint_path, content_per_domain: int | None = None,
                       force: bool = False) -> EvalReport:
    """Benchmark a trained checkpoint over the manifest's eval split."""
    data = load_checkpoint(checkpoint_path)
    if int(data.header["iteration"]) < 1:
        raise UntrainedCheckpoint(f"checkpoint {checkpoint_path} was never trained")
    cfg, _, stylizer, classifier, identity_backend = load_stylizer(checkpoint_path, force=force)
    registry, records = load_manifest(manifest_path)
    store = ImageStore(cfg.image_size)
    niqe_model = fit_pristine_model(registry, records, store)
    return benchmark_report(
        registry, records, stylizer, classifier_feature_fn(classifier), identity_backend,
        niqe_model, content_per_domain or cfg.content_per_domain, store,
    )


# --- collapse monitor ---------------------------------------------------------


@dataclass
class CollapseRecord:
    """Per-domain metric curves plus deterioration flags."""

    curves: dict  # domain -> metric -> list[(iteration, value)]
    flags: list  # (domain, iteration, metric)


def monitor_collapse(snapshots, tolerance: float = 0.05) -> CollapseRecord:
    """Flag (domain, iteration, metric) where a fidelity metric deteriorates.

    A flag fires when FID or KID grows by more than a factor (1 + tolerance)
    between two consecutive snapshots; quality curves are recorded for all
    three metrics but only the two distribution distances are flagged.
    """
    if len(snapshots) < 2:
        raise TooFewSnapshots(f"need >= 2 snapshots, got {len(snapshots)}")
    iters = [it for it, _ in snapshots]
    if any(b <= a for a, b in zip(iters, iters[1:])):
        raise IdstyleError(f"snapshot iterations must strictly increase, got {iters}")

    domains = [row.domain for row in snapshots[0][1].rows]
    curves = {
        d: {"fid": [], "kid": [], "niqe": []} for d in domains
    }
    for it, report in snapshots:
        for row in report.rows:
            curves[row.domain]["fid"].append((it, row.fid))
            curves[row.domain]["kid"].append((it, row.kid))
            curves[row.domain]["niqe"].append((it, row.niqe))

    flags = []
    for d in domains:
        for metric in ("fid", "kid"):
            series = curves[d][metric]
            for (_, prev), (it, curr) in zip(series, series[1:]):
                if curr > prev * (1.0 + tolerance):
                    flags.append((d, it, metric))
    return CollapseRecord(curves, flags)


# --- ablation configurations -----------------------------------------------------

ABLATION_VARIANTS = (
    "full", "vgg_arc2", "arc1_lightcnn", "arc1_arc2", "arc1", "with_textimage",
    "only_vgg", "only_lightcnn", "only_textimage", "con16", "con32", "con64",
    "no_div", "no_ds",
)

# content-tap names keyed by the feature size they yield at 256px input
_CON_TAPS = {"con16": "relu5_2", "con32": "relu4_2", "con64": "relu3_2"}


def make_ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Return a copy of ``base`` with the named variant's switches applied."""
    cfg = copy.deepcopy(base)
    m = re.fullmatch(r"ccx_weight\(([^)]+)\)", variant.strip())
    if m:
        try:
            cfg.weights.lambda_ccx = float(m.group(1))
        except ValueError as e:
            raise UnknownVariant(f"bad ccx_weight argument {m.group(1)!r}") from e
        return cfg
    v = variant.strip().lower()
    if v == "full":
        return cfg
    if v == "vgg_arc2":
        cfg.style_source = "identity_like"
    elif v == "arc1_lightcnn":
        cfg.texture_arch = "identity_like"
    elif v == "arc1_arc2":
        cfg.texture_arch = "identity_like"
        cfg.style_source = "identity_like"
    elif v == "arc1":
        cfg.style_source = "identity_like"
        cfg.use_div = False
    elif v == "with_textimage":
        cfg.weights.lambda_textimage = 0.5
    elif v == "only_vgg":
        cfg.use_ds = False
    elif v == "only_lightcnn":
        cfg.use_div = False
    elif v == "only_textimage":
        cfg.style_source = "textimage_like"
        cfg.use_div = False
        cfg.weights.lambda_textimage = 0.5
    elif v in _CON_TAPS:
        cfg.content_tap = _CON_TAPS[v]
    elif v == "no_div":
        cfg.use_div = False
    elif v == "no_ds":
        cfg.use_ds = False
    else:
        raise UnknownVariant(f"unknown ablation variant {variant!r}")
    return cfg
