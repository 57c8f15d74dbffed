"""Independent checks for the quantities the certificate leans on.

Everything here recomputes a claim by brute force or a second method:

* geometry: how many band placements a patch can actually intersect,
  enumerated column by column, against the m + b - 1 closed form;
* vote arithmetic: exhaustive adversarial re-voting of corrupted positions,
  against the margin test;
* attacks: concrete randomized patches on certified images, re-scoring
  only the bands the patch touches;
* attention: the isolated window forward against the masked global one;
* gradients: finite differences against the tape for every primitive and
  for a whole encoder block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .certification import (CertifyConfig, VoteTable, affected_positions,
                            certified_against, per_band_scores, vote)
from .errors import ContractError
from .model import (ModelConfig, ModelParams, WindowPlan,
                    forward_band_unit, forward_global, window_token_ids)
from .smoothing import BandSpec, ablate_batch


# ---------------------------------------------------------------------------
# geometry


def max_band_patch_intersections(image_width: int, band_width: int,
                                 patch_width: int, wrap: bool = True) -> int:
    """Enumerated worst case of |{p : band(p) hits the patch}| over all
    patch placements. The closed form says min(w, m + b - 1) for wrapped
    bands."""
    w = image_width
    cols = np.arange(w)
    if wrap:
        band_hits = (cols[None, :] - cols[:, None]) % w < band_width  # (p, col)
    else:
        band_hits = (cols[None, :] >= cols[:, None]) & \
                    (cols[None, :] < cols[:, None] + band_width)
    patch_hits = (cols[None, :] >= cols[:, None]) & \
                 (cols[None, :] < cols[:, None] + patch_width)  # (q, col)
    inter = band_hits @ patch_hits.T.astype(np.int64) > 0  # (p, q)
    return int(inter.sum(axis=0).max())


def intersection_sweep(max_width: int = 64,
                       wrap: bool = True) -> tuple[int, list[tuple[int, int, int]]]:
    """Enumerate every (w, m, b) with w <= max_width, m, b >= 1 and
    m + b - 1 <= w, and compare the brute-forced worst-case intersection
    count against m + b - 1.

    Returns (cases checked, disagreeing (w, m, b) triples). One coverage
    matrix is built per (w, b); sliding each patch width over its column
    cumsum keeps the full grid fast enough to run on every test pass.
    """
    failures: list[tuple[int, int, int]] = []
    cases = 0
    for w in range(1, max_width + 1):
        cols = np.arange(w)
        for b in range(1, w + 1):
            if wrap:
                covered = (cols[None, :] - cols[:, None]) % w < b
            else:
                covered = (cols[None, :] >= cols[:, None]) & \
                          (cols[None, :] < cols[:, None] + b)
            span = np.zeros((w, w + 1), dtype=np.int64)
            np.cumsum(covered, axis=1, out=span[:, 1:])
            for m in range(1, w - b + 2):
                cases += 1
                overlap = span[:, m:] - span[:, :w - m + 1]  # (p, q) column hits
                counts = (overlap > 0).sum(axis=0)
                if counts.max() != m + b - 1:
                    failures.append((w, m, b))
    return cases, failures


# ---------------------------------------------------------------------------
# adversarial re-voting


def _argmax_lowest(counts: np.ndarray) -> int:
    return int(np.argmax(counts))


def worst_case_flip(vote_sets: np.ndarray, patch_width: int, band_width: int,
                    wrap: bool = True) -> bool:
    """Can a width-m patch change the voted prediction of this table?

    ``vote_sets`` is (w, C) bool: which classes cleared the threshold at
    each band position. The adversary owns every affected position and may
    set its votes to any subset of classes. Per corrupted position the best
    move against rival r is to drop the top class and vote r, so scanning
    single rivals (plus the drop-only move) is exhaustive.
    """
    vs = np.asarray(vote_sets, dtype=bool)
    w, c = vs.shape
    counts = vs.sum(axis=0).astype(np.int64)
    top = _argmax_lowest(counts)
    for q in range(w):
        hit = affected_positions(q, patch_width, band_width, w, wrap)
        lost_top = int(vs[hit, top].sum())
        base = counts.copy()
        base[top] -= lost_top
        if _argmax_lowest(base) != top:
            return True
        for r in range(c):
            if r == top:
                continue
            trial = base.copy()
            trial[r] += int((~vs[hit, r]).sum())
            if _argmax_lowest(trial) != top:
                return True
    return False


def exhaustive_flip_bitmask(vote_sets: np.ndarray, patch_width: int,
                            band_width: int, wrap: bool = True) -> bool:
    """Ground-truth flip check that literally tries every vote pattern at
    every corrupted position. Exponential; only for tiny tables."""
    vs = np.asarray(vote_sets, dtype=bool)
    w, c = vs.shape
    if (2 ** c) ** min(w, patch_width + band_width - 1) > 2_000_000:
        raise ContractError("exhaustive_flip_bitmask: table too large to enumerate")
    counts = vs.sum(axis=0).astype(np.int64)
    top = _argmax_lowest(counts)
    patterns = [np.array(bits, dtype=bool)
                for bits in itertools.product((False, True), repeat=c)]
    for q in range(w):
        hit = affected_positions(q, patch_width, band_width, w, wrap)
        base = counts - vs[hit].sum(axis=0)
        for combo in itertools.product(patterns, repeat=hit.size):
            trial = base + np.sum(combo, axis=0, dtype=np.int64) if combo \
                else base
            if _argmax_lowest(trial) != top:
                return True
    return False


def check_certificate_soundness(vote_sets: np.ndarray, patch_width: int,
                                band_width: int, wrap: bool = True,
                                delta_fn=None) -> dict:
    """Certified tables must be unflippable. ``delta_fn(m, b)`` overrides
    the intersection bound so tests can verify a wrong bound gets caught."""
    vs = np.asarray(vote_sets, dtype=bool)
    counts = vs.sum(axis=0).astype(np.int64)
    order = np.argsort(-counts, kind="stable")
    margin = int(counts[order[0]] - counts[order[1]])
    delta = (delta_fn(patch_width, band_width) if delta_fn is not None
             else patch_width + band_width - 1)
    certified = margin > 0 and margin > 2 * delta
    flippable = worst_case_flip(vs, patch_width, band_width, wrap=wrap)
    return {
        "margin": margin,
        "certified": bool(certified),
        "flippable": bool(flippable),
        "sound": (not certified) or (not flippable),
    }


def random_vote_tables(num: int, image_width: int, num_classes: int, seed: int,
                       near_boundary_margin: int | None = None) -> np.ndarray:
    """(num, w, C) random vote sets. When ``near_boundary_margin`` is given,
    tables are rejection-shaped so the top-two margin lands within 2 of it,
    where soundness errors would actually show up."""
    rng = np.random.default_rng([int(seed), 0xF11])
    out = np.zeros((num, image_width, num_classes), dtype=bool)
    made = 0
    while made < num:
        density = rng.uniform(0.1, 0.9)
        vs = rng.random((image_width, num_classes)) < density
        if near_boundary_margin is not None:
            counts = vs.sum(axis=0)
            top2 = np.sort(counts)[-2:]
            if abs(int(top2[1] - top2[0]) - near_boundary_margin) > 2:
                continue
        out[made] = vs
        made += 1
    return out


# ---------------------------------------------------------------------------
# concrete randomized patch attacks


@dataclass
class AttackReport:
    image_id: int
    patch_shape: tuple[int, int]
    locations: int
    trials_per_location: int
    certified: bool
    flips: int
    min_margin_seen: int
    positions_rescored: int
    forwards: int


def _recount_votes(base_table: VoteTable, base_scores: np.ndarray,
                   new_scores: np.ndarray, hit: np.ndarray,
                   cfg: CertifyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vote counts for T trials that replace rows ``hit`` of the base score
    table. Returns (counts (T, C), predicted (T,))."""
    thr = cfg.threshold
    base_votes_hit = (base_scores[hit] > thr).sum(axis=0).astype(np.int64)
    new_votes = (new_scores > thr).sum(axis=1).astype(np.int64)  # (T, C)
    counts = base_table.votes[None, :] - base_votes_hit[None, :] + new_votes
    return counts, np.argmax(counts, axis=1)


def patch_locations(image_side: int, shape: tuple[int, int], count: int) -> list[tuple[int, int]]:
    """Deterministic spread of patch anchors over the valid placement grid."""
    max_r = image_side - shape[0]
    max_c = image_side - shape[1]
    side = int(np.ceil(np.sqrt(count)))
    rs = np.unique(np.linspace(0, max_r, side).round().astype(int))
    cs = np.unique(np.linspace(0, max_c, side).round().astype(int))
    locs = [(int(r), int(c)) for r in rs for c in cs]
    return locs[:count]


def empirical_patch_attack(image: np.ndarray, params: ModelParams,
                           plan: WindowPlan, cfg: CertifyConfig,
                           patch_shape: tuple[int, int], locations: list[tuple[int, int]],
                           trials: int, seed: int,
                           image_id: int = 0) -> AttackReport:
    """Randomized patch contents at fixed anchors. Only the band positions
    whose columns meet the patch are re-scored; the rest of the vote table
    cannot change, which is exactly the structure the certificate uses."""
    img = np.asarray(image, dtype=ad.INFER_DTYPE)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"empirical_patch_attack: expected (3, h, w), got {img.shape}")
    w = plan.image_width
    base_scores, fw0 = per_band_scores(img[None], params, plan, cfg)
    base_table = vote(base_scores[0], cfg)
    certified = certified_against(base_table, patch_shape[1], cfg.band_width)
    rng = np.random.default_rng([int(seed), 0xA77, image_id])

    flips = 0
    min_margin = base_table.margin
    rescored = 0
    forwards = fw0
    for (r0, c0) in locations:
        hit = affected_positions(c0, patch_shape[1], cfg.band_width, w,
                                 wrap=params.cfg.band_wrap)
        rescored = max(rescored, hit.size)
        patched = np.repeat(img[None], trials, axis=0)
        patched[:, :, r0:r0 + patch_shape[0], c0:c0 + patch_shape[1]] = \
            rng.random((trials, 3, patch_shape[0], patch_shape[1]),
                       dtype=np.float32)
        new_scores, fw = per_band_scores(patched, params, plan, cfg,
                                         positions=hit.tolist())
        forwards += fw
        counts, preds = _recount_votes(base_table, base_scores[0], new_scores,
                                       hit, cfg)
        margins = np.sort(counts, axis=1)
        min_margin = min(min_margin, int((margins[:, -1] - margins[:, -2]).min()))
        flips += int((preds != base_table.predicted).sum())
    return AttackReport(
        image_id=image_id,
        patch_shape=tuple(patch_shape),
        locations=len(locations),
        trials_per_location=trials,
        certified=bool(certified),
        flips=flips,
        min_margin_seen=min_margin,
        positions_rescored=rescored,
        forwards=forwards,
    )


# ---------------------------------------------------------------------------
# attention restriction


def attention_equivalence(params: ModelParams, images: np.ndarray,
                          band: BandSpec) -> dict[str, float]:
    """Max |difference| between the isolated window forward and the masked
    global forward, over the shared token rows and the logits."""
    cfg = params.cfg
    abl = ablate_batch(images, np.full(images.shape[0], band.position),
                       band.width, wrap=cfg.band_wrap)
    abl = abl.astype(params.dtype)
    iso = forward_band_unit(abl, params, band)
    ids = window_token_ids(cfg, band)
    allowed = np.zeros(cfg.seq_len, dtype=bool)
    allowed[0] = True
    allowed[ids + 1] = True
    masked = forward_global(abl, params, allowed_tokens=allowed)
    rows = np.concatenate([[0], ids + 1])
    token_diff = np.abs(masked.tokens_out.data[:, rows, :] - iso.tokens_out.data).max()
    logit_diff = np.abs(masked.logits.data - iso.logits.data).max()
    return {"tokens": float(token_diff), "logits": float(logit_diff)}


# ---------------------------------------------------------------------------
# gradient spot checks


def _primitive_cases(rng: np.random.Generator):
    a34 = rng.normal(size=(3, 4))
    b45 = rng.normal(size=(4, 5))
    b54 = rng.normal(size=(5, 4))
    a43 = rng.normal(size=(4, 3))
    x24 = rng.normal(size=(2, 4))
    y24 = rng.normal(size=(2, 4))
    tab = rng.normal(size=(6, 3))
    idx2 = rng.integers(0, 6, size=(2, 5))
    tab3 = rng.normal(size=(2, 6, 3))
    idxin = rng.integers(0, 6, size=(2, 4))
    targets = rng.integers(0, 5, size=(3,))
    cases = {
        "matmul": (lambda t: ad.mean(ad.matmul(t, Tensor(b45))), a34),
        "matmul_ta": (lambda t: ad.mean(ad.matmul(t, Tensor(b45), transpose_a=True)), a43),
        "matmul_tb": (lambda t: ad.mean(ad.matmul(t, Tensor(b54), transpose_b=True)), a34),
        "add": (lambda t: ad.mean(ad.add(t, Tensor(y24[0]))), x24),
        "mul": (lambda t: ad.mean(ad.mul(t, Tensor(y24))), x24),
        "softmax_lastdim": (lambda t: ad.mean(ad.mul(ad.softmax_lastdim(t),
                                                     Tensor(y24))), x24),
        "layer_norm": (lambda t: ad.mean(ad.mul(ad.layer_norm(t), Tensor(y24))), x24),
        "gelu": (lambda t: ad.mean(ad.gelu(t)), x24),
        "embedding_axis0": (lambda t: ad.mean(ad.embedding_lookup(t, idx2, axis=0)), tab),
        "embedding_inner": (lambda t: ad.mean(ad.embedding_lookup(t, idxin, axis=1)), tab3),
        "reshape": (lambda t: ad.mean(ad.mul(ad.reshape(t, (4, 2)),
                                             Tensor(y24.reshape(4, 2)))), x24),
        "concat": (lambda t: ad.mean(ad.mul(ad.concat([t, Tensor(y24)], axis=0),
                                            Tensor(np.vstack([y24, x24])))), x24),
        "slice": (lambda t: ad.mean(ad.mul(ad.slice_axis(t, 1, 1, 3),
                                           Tensor(y24[:, 1:3]))), x24),
        "mean": (lambda t: ad.mean(t), x24),
        "cross_entropy": (lambda t: ad.cross_entropy(t, targets), rng.normal(size=(3, 5))),
        "l2_distance": (lambda t: ad.l2_distance(t, Tensor(y24)), x24 + 0.3),
    }
    return cases


def fd_gradient_report(seed: int = 0, probes: int = 4, h: float = 1e-5) -> dict[str, float]:
    """Max relative tape-vs-finite-difference error for every primitive and
    for a full encoder block driven end to end."""
    rng = np.random.default_rng([int(seed), 0xFD])
    report = {}
    for name, (fn, x) in _primitive_cases(rng).items():
        report[name] = ad.check_gradient(fn, x, probes=probes, seed=seed + 1, h=h)

    cfg = ModelConfig(image_side=8, patch_size=4, embed_dim=8, num_layers=1,
                      num_heads=2, mlp_ratio=2.0, num_classes=3, codebook_size=4)
    sp = ModelParams.init(cfg, seed=seed + 2)
    x = rng.random((2, 4, 8, 8))
    y = np.array([0, 2])

    # Probe the patch embedding: its gradient flows through every op in the
    # block (attention softmax, both norms, the MLP, the residuals, the
    # head), and its coordinates are large enough that the finite-difference
    # quotient is not roundoff-dominated. Query/key weights at random init
    # have gradients near the FD noise floor (~1e-11 absolute for h=1e-5),
    # which makes per-coordinate relative error meaningless there.
    def block_loss(t):
        old = sp.tensors["patch_embed.weight"]
        sp.tensors["patch_embed.weight"] = t
        try:
            acts = forward_global(x, sp)
            return ad.cross_entropy(acts.logits, y)
        finally:
            sp.tensors["patch_embed.weight"] = old

    report["encoder_block"] = ad.check_gradient(
        block_loss, sp.tensors["patch_embed.weight"].data, probes=probes,
        seed=seed + 3, h=h)
    return report
