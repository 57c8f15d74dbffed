"""Progressive self-supervised pretraining and band-restricted fine-tuning.

The schedule has two phases:

1. Curriculum stages with global attention. Each stage ablates inputs to a
   keep band (wide early, shrinking to the certification width), and the
   loss couples classification with reconstruction of masked patch content:
   ``ce + lambda_rec * rec``. The reconstruction target is either discrete
   codebook ids of the clean patches (mode "vae") or frozen teacher features
   (mode "distill"). Reconstructed positions always include the keep band's
   tokens, widened to a per-stage share of the grid.

2. Band-unit fine-tuning. The encoder now only sees the tokens a
   certification window would gather, with a fresh random band per sample,
   trained with plain cross entropy. The reconstruction heads are dropped
   from the graph and frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tape, Tensor, record
from .errors import ContractError
from .model import (ModelConfig, ModelParams, RECON_PREFIXES, forward_band_rows,
                    forward_global, window_token_ids)
from .smoothing import BandSpec, ablate_batch, stage_masks
from .tokenizer import (Codebook, fit_codebook, image_patches, teacher_features,
                        tokenize_images, with_full_mask)


@dataclass
class StageConfig:
    keep_width: int          # ablation band width during this stage
    reconstruct_ratio: float  # share of patch tokens to reconstruct
    epochs: int
    lr: float

    def __post_init__(self):
        if self.keep_width < 1:
            raise ContractError(f"StageConfig: keep_width {self.keep_width} < 1")
        if not (0.0 < self.reconstruct_ratio <= 1.0):
            raise ContractError(f"StageConfig: reconstruct_ratio {self.reconstruct_ratio} "
                                f"outside (0, 1]")
        if self.epochs < 0:
            raise ContractError("StageConfig: negative epochs")


@dataclass
class TrainPlan:
    stages: list[StageConfig]
    band_width: int                # final certification band width
    mode: str = "vae"              # "vae" or "distill"
    lambda_rec: float = 1000.0
    batch_size: int = 16
    finetune_epochs: int = 6
    finetune_lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: int = 1         # linear lr ramp at the start of each phase
    teacher_epochs: int = 20
    teacher_lr: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("vae", "distill"):
            raise ContractError(f"TrainPlan: unknown mode '{self.mode}'")
        if self.lambda_rec < 0:
            raise ContractError("TrainPlan: negative lambda_rec")
        if self.batch_size < 1:
            raise ContractError("TrainPlan: batch_size < 1")


KEEP_RATIOS = (0.6, 0.3)
RECONSTRUCT_RATIOS = (1.0, 0.6, 0.3)


def build_default_plan(cfg: ModelConfig, band_width: int, epochs_per_stage: int = 8,
                       lr: float = 1e-3, **overrides) -> TrainPlan:
    """Three-stage schedule: keep width 0.6w, then 0.3w, then the
    certification band itself, with reconstruction shrinking 1.0/0.6/0.3.
    The narrowing only makes sense when the band is strictly inside the
    middle stage's keep width."""
    w = cfg.image_side
    if not (1 <= band_width <= w):
        raise ContractError(f"build_default_plan: band width {band_width} outside [1, {w}]")
    if band_width >= KEEP_RATIOS[1] * w:
        raise ContractError(f"build_default_plan: band width {band_width} is not "
                            f"below {KEEP_RATIOS[1]:.0%} of image width {w}; the "
                            f"curriculum would not narrow")
    widths = [round(KEEP_RATIOS[0] * w), round(KEEP_RATIOS[1] * w), band_width]
    stages = [StageConfig(keep_width=kw, reconstruct_ratio=rr,
                          epochs=epochs_per_stage, lr=lr)
              for kw, rr in zip(widths, RECONSTRUCT_RATIOS)]
    return TrainPlan(stages=stages, band_width=band_width, **overrides)


def stage_param_names(mode: str) -> tuple[str, ...]:
    """Prefix of the reconstruction head the stage loss does not touch."""
    if mode == "vae":
        return ("recon_proj.",)
    if mode == "distill":
        return ("recon_vocab.",)
    raise ContractError(f"stage_param_names: unknown mode '{mode}'")


def _trainable(params: ModelParams, exclude: tuple[str, ...]) -> dict[str, Tensor]:
    return {n: t for n, t in params.tensors.items() if not n.startswith(exclude)}


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _warmup_scale(step: int, steps_per_epoch: int, warmup_epochs: int) -> float:
    total = warmup_epochs * steps_per_epoch
    if total <= 0 or step >= total:
        return 1.0
    return (step + 1) / total


def _grouped_recon_terms(patch_rows: Tensor, index_groups: list[tuple[np.ndarray, np.ndarray]]):
    """Gather per-sample reconstruction positions, batching samples whose
    flagged-token counts agree. Yields (rows, gathered, weight) where weight
    is the group's share of all flagged tokens."""
    total = sum(rows.size * idx.shape[1] for rows, idx in index_groups)
    for rows, idx in index_groups:
        sub = ad.embedding_lookup(patch_rows, rows, axis=0)
        gathered = ad.embedding_lookup(sub, idx, axis=1)
        yield rows, idx, gathered, (rows.size * idx.shape[1]) / total


def _stage_recon_groups(positions: np.ndarray, stage: StageConfig, cfg: ModelConfig):
    """Per-sample reconstruction indices, grouped by count so each group
    batches rectangularly."""
    by_count: dict[int, list[tuple[int, np.ndarray]]] = {}
    for i, p in enumerate(positions):
        mask = stage_masks(stage.reconstruct_ratio, BandSpec(int(p), stage.keep_width),
                           cfg.patch_size, cfg.image_side, wrap=cfg.band_wrap)
        idx = mask.indices()
        by_count.setdefault(idx.size, []).append((i, idx))
    groups = []
    for count in sorted(by_count):
        entries = by_count[count]
        rows = np.asarray([i for i, _ in entries], dtype=np.int64)
        idx = np.stack([ix for _, ix in entries])
        groups.append((rows, idx))
    return groups


@dataclass
class PhaseResult:
    records: list[dict] = field(default_factory=list)


def run_stage(params: ModelParams, stage: StageConfig, plan: TrainPlan,
              images: np.ndarray, labels: np.ndarray,
              recon_targets: np.ndarray, stage_index: int,
              seed: int) -> list[dict]:
    """One curriculum stage. ``recon_targets`` is (B, N) int token ids in
    vae mode or (B, N, teacher_dim) float features in distill mode."""
    cfg = params.cfg
    rng = np.random.default_rng([int(seed), 0xA, stage_index])
    names = _trainable(params, stage_param_names(plan.mode))
    opt = AdamW(lr=stage.lr, weight_decay=plan.weight_decay)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / plan.batch_size)
    lam = Tensor(np.asarray(plan.lambda_rec, dtype=ad.TRAIN_DTYPE))
    records = []
    step = 0
    for epoch in range(stage.epochs):
        ce_sum = rec_sum = loss_sum = 0.0
        for batch in _epoch_batches(n, plan.batch_size, rng):
            imgs = images[batch]
            ys = labels[batch]
            positions = rng.integers(0, cfg.image_side, size=batch.size)
            abl = ablate_batch(imgs, positions, stage.keep_width, wrap=cfg.band_wrap)
            groups = _stage_recon_groups(positions, stage, cfg)
            targets = recon_targets[batch]

            tape = Tape()
            with record(tape):
                acts = forward_global(abl, params)
                ce = ad.cross_entropy(acts.logits, ys)
                seq = acts.tokens_out.shape[1]
                patch_rows = ad.slice_axis(acts.tokens_out, 1, 1, seq)
                rec = None
                for rows, idx, gathered, weight in _grouped_recon_terms(patch_rows, groups):
                    if plan.mode == "vae":
                        logits = ad.add(ad.matmul(gathered, params["recon_vocab.weight"]),
                                        params["recon_vocab.bias"])
                        tgt = np.take_along_axis(targets[rows], idx, axis=1)
                        term = ad.cross_entropy(logits, tgt)
                    else:
                        proj = ad.add(ad.matmul(gathered, params["recon_proj.weight"]),
                                      params["recon_proj.bias"])
                        feats = np.take_along_axis(
                            targets[rows], idx[:, :, None], axis=1)
                        term = ad.l2_distance(proj, Tensor(feats.astype(ad.TRAIN_DTYPE)))
                    term = ad.mul(term, Tensor(np.asarray(weight, dtype=ad.TRAIN_DTYPE)))
                    rec = term if rec is None else ad.add(rec, term)
                loss = ad.add(ce, ad.mul(rec, lam))
            grads = ad.backward(tape, loss)
            scale = _warmup_scale(step, steps_per_epoch, plan.warmup_epochs)
            fresh = opt.step(names, grads, lr_scale=scale)
            params.update(fresh)
            names = _trainable(params, stage_param_names(plan.mode))
            ce_sum += ce.item() * batch.size
            rec_sum += rec.item() * batch.size
            loss_sum += loss.item() * batch.size
            step += 1
        records.append({"phase": "stage", "stage": stage_index, "epoch": epoch,
                        "keep_width": stage.keep_width,
                        "loss": loss_sum / n, "ce": ce_sum / n, "rec": rec_sum / n})
    return records


def finetune_band(params: ModelParams, plan: TrainPlan,
                  images: np.ndarray, labels: np.ndarray, seed: int) -> list[dict]:
    """Band-unit fine-tuning: every sample sees only one random window's
    tokens; cross entropy only; reconstruction heads stay frozen."""
    cfg = params.cfg
    rng = np.random.default_rng([int(seed), 0xB])
    names = _trainable(params, RECON_PREFIXES)
    opt = AdamW(lr=plan.finetune_lr, weight_decay=plan.weight_decay)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / plan.batch_size)
    window_ids = [window_token_ids(cfg, BandSpec(p, plan.band_width))
                  for p in range(cfg.image_side)]
    records = []
    step = 0
    for epoch in range(plan.finetune_epochs):
        loss_sum = hits = 0.0
        for batch in _epoch_batches(n, plan.batch_size, rng):
            imgs = images[batch]
            ys = labels[batch]
            positions = rng.integers(0, cfg.image_side, size=batch.size)
            abl = ablate_batch(imgs, positions, plan.band_width, wrap=cfg.band_wrap)
            by_len: dict[int, list[int]] = {}
            for i, p in enumerate(positions):
                by_len.setdefault(window_ids[p].size, []).append(i)

            tape = Tape()
            with record(tape):
                loss = None
                for _, rows in sorted(by_len.items()):
                    rows_arr = np.asarray(rows, dtype=np.int64)
                    ids = np.stack([window_ids[positions[i]] for i in rows])
                    logits = forward_band_rows(abl[rows_arr], params, ids)
                    term = ad.cross_entropy(logits, ys[rows_arr])
                    term = ad.mul(term, Tensor(np.asarray(len(rows) / batch.size,
                                                          dtype=ad.TRAIN_DTYPE)))
                    loss = term if loss is None else ad.add(loss, term)
                    hits += (np.argmax(logits.data, axis=1) == ys[rows_arr]).sum()
            grads = ad.backward(tape, loss)
            scale = _warmup_scale(step, steps_per_epoch, plan.warmup_epochs)
            fresh = opt.step(names, grads, lr_scale=scale)
            params.update(fresh)
            names = _trainable(params, RECON_PREFIXES)
            loss_sum += loss.item() * batch.size
            step += 1
        records.append({"phase": "finetune", "epoch": epoch,
                        "band_width": plan.band_width,
                        "loss": loss_sum / n, "band_accuracy": float(hits) / n})
    return records


def train_teacher(cfg: ModelConfig, images: np.ndarray, labels: np.ndarray,
                  epochs: int, lr: float, batch_size: int, seed: int,
                  weight_decay: float = 0.01) -> tuple[ModelParams, list[dict]]:
    """Plain clean-image classifier used as the frozen distillation target."""
    teacher = ModelParams.init(cfg, seed=seed + 101)
    rng = np.random.default_rng([int(seed), 0xC])
    names = _trainable(teacher, RECON_PREFIXES)
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    full = with_full_mask(images)
    n = images.shape[0]
    records = []
    for epoch in range(epochs):
        loss_sum = hits = 0.0
        for batch in _epoch_batches(n, batch_size, rng):
            tape = Tape()
            with record(tape):
                acts = forward_global(full[batch], teacher)
                loss = ad.cross_entropy(acts.logits, labels[batch])
            grads = ad.backward(tape, loss)
            fresh = opt.step(names, grads)
            teacher.update(fresh)
            names = _trainable(teacher, RECON_PREFIXES)
            loss_sum += loss.item() * batch.size
            hits += (np.argmax(acts.logits.data, axis=1) == labels[batch]).sum()
        records.append({"phase": "teacher", "epoch": epoch,
                        "loss": loss_sum / n, "accuracy": float(hits) / n})
    return teacher, records


def train_full(cfg: ModelConfig, plan: TrainPlan, images: np.ndarray,
               labels: np.ndarray, seed: int,
               codebook: Codebook | None = None,
               teacher: ModelParams | None = None,
               ) -> tuple[ModelParams, list[dict], Codebook | ModelParams]:
    """Runs the whole schedule and returns (params, metric records, the
    reconstruction-target artifact). Builds the codebook or teacher when not
    supplied."""
    params = ModelParams.init(cfg, seed=seed)
    records: list[dict] = []
    if plan.mode == "vae":
        if codebook is None:
            codebook = fit_codebook(image_patches(images, cfg.patch_size),
                                    cfg.codebook_size, seed=seed)
        if codebook.size != cfg.codebook_size:
            raise ContractError(f"train_full: codebook has {codebook.size} entries, "
                                f"config wants {cfg.codebook_size}")
        recon_targets = tokenize_images(codebook, images, cfg.patch_size)
        artifact: Codebook | ModelParams = codebook
    else:
        if teacher is None:
            teacher, teacher_records = train_teacher(
                cfg, images, labels, epochs=plan.teacher_epochs,
                lr=plan.teacher_lr, batch_size=plan.batch_size, seed=seed)
            records.extend(teacher_records)
        recon_targets = teacher_features(teacher, images)
        artifact = teacher

    for si, stage in enumerate(plan.stages):
        records.extend(run_stage(params, stage, plan, images, labels,
                                 recon_targets, stage_index=si, seed=seed))
    records.extend(finetune_band(params, plan, images, labels, seed=seed))
    return params, records, artifact


def train_baseline(cfg: ModelConfig, plan: TrainPlan, images: np.ndarray,
                   labels: np.ndarray, seed: int) -> tuple[ModelParams, list[dict]]:
    """Ablation control: same epochs budget and the same fine-tuning phase,
    but pretraining is plain cross entropy on band-ablated inputs at the
    certification width, with no reconstruction loss."""
    params = ModelParams.init(cfg, seed=seed)
    rng = np.random.default_rng([int(seed), 0xD])
    names = _trainable(params, RECON_PREFIXES)
    opt = AdamW(lr=plan.stages[0].lr if plan.stages else plan.finetune_lr,
                weight_decay=plan.weight_decay)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / plan.batch_size)
    total_epochs = sum(s.epochs for s in plan.stages)
    records = []
    step = 0
    for epoch in range(total_epochs):
        loss_sum = 0.0
        for batch in _epoch_batches(n, plan.batch_size, rng):
            positions = rng.integers(0, cfg.image_side, size=batch.size)
            abl = ablate_batch(images[batch], positions, plan.band_width,
                               wrap=cfg.band_wrap)
            tape = Tape()
            with record(tape):
                acts = forward_global(abl, params)
                loss = ad.cross_entropy(acts.logits, labels[batch])
            grads = ad.backward(tape, loss)
            scale = _warmup_scale(step, steps_per_epoch, plan.warmup_epochs)
            fresh = opt.step(names, grads, lr_scale=scale)
            params.update(fresh)
            names = _trainable(params, RECON_PREFIXES)
            loss_sum += loss.item() * batch.size
            step += 1
        records.append({"phase": "baseline", "epoch": epoch,
                        "loss": loss_sum / n})
    records.extend(finetune_band(params, plan, images, labels, seed=seed))
    return params, records
