"""Compact vision transformer with band-restricted attention.

Three forward paths share one encoder:

* ``forward_global``: full token sequence, optionally with an additive
  attention mask restricting which tokens may be attended to.
* ``forward_band_unit``: gathers the class token plus exactly the tokens
  whose patch columns intersect a retained pixel band, keeps their original
  position-embedding rows, and runs the encoder on the short sequence. By
  the restriction argument (attention is the only token-mixing op) this
  equals the masked global forward on the gathered rows.
* ``batched_certify_forward``: evaluates every band position through a
  WindowPlan that packs token-disjoint windows into shared forwards.

The checkpoint format is a little-endian binary container: magic "ECVT",
u32 version, then per tensor u32 name length, UTF-8 name, u32 rank, u64
dims, raw float32 data.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataFormatError, NumericError
from .smoothing import BandSpec, ablate_batch, band_token_columns

CHECKPOINT_MAGIC = b"ECVT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_side: int = 16
    patch_size: int = 4
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 3
    input_channels: int = 4  # RGB + ablation mask plane
    attention_mode: str = "band_unit"
    codebook_size: int = 64
    teacher_dim: int | None = None
    band_wrap: bool = True

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise ContractError(f"ModelConfig: patch {self.patch_size} does not divide "
                                f"side {self.image_side}")
        if self.embed_dim % self.num_heads != 0:
            raise ContractError(f"ModelConfig: heads {self.num_heads} do not divide "
                                f"dim {self.embed_dim}")
        if self.attention_mode not in ("global", "band_unit"):
            raise ContractError(f"ModelConfig: unknown attention_mode '{self.attention_mode}'")
        if self.num_classes < 2:
            raise ContractError("ModelConfig: need at least 2 classes")

    @property
    def grid(self) -> tuple[int, int]:
        s = self.image_side // self.patch_size
        return (s, s)

    @property
    def num_tokens(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def seq_len(self) -> int:
        return self.num_tokens + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.input_channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def teacher_width(self) -> int:
        return self.embed_dim if self.teacher_dim is None else self.teacher_dim


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    mlp = int(round(cfg.mlp_ratio * d))
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "cls_token": (d,),
        "pos_embed": (cfg.seq_len, d),
    }
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for nm in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{nm}"] = (d, d)
            shapes[p + f"attn.b{nm}"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.w1"] = (d, mlp)
        shapes[p + "mlp.b1"] = (mlp,)
        shapes[p + "mlp.w2"] = (mlp, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    shapes["recon_vocab.weight"] = (d, cfg.codebook_size)
    shapes["recon_vocab.bias"] = (cfg.codebook_size,)
    shapes["recon_proj.weight"] = (d, cfg.teacher_width)
    shapes["recon_proj.bias"] = (cfg.teacher_width,)
    return shapes

RECON_PREFIXES = ("recon_vocab.", "recon_proj.")


class ModelParams:
    """Named parameter tensors in a fixed order (the checkpoint order)."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        expected = _param_shapes(cfg)
        if list(tensors.keys()) != list(expected.keys()):
            raise ContractError("ModelParams: tensor names do not match the config's layout")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise ContractError(f"ModelParams: '{name}' has shape {t.shape}, "
                                    f"config wants {expected[name]}")
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=ad.TRAIN_DTYPE) -> "ModelParams":
        rng = np.random.default_rng([int(seed), 0x5eed])
        tensors: dict[str, Tensor] = {}
        for name, shape in _param_shapes(cfg).items():
            leaf = name.split(".")[-1]
            if leaf in ("beta", "bias", "bq", "bk", "bv", "bo", "b1", "b2"):
                arr = np.zeros(shape)
            elif leaf == "gamma":
                arr = np.ones(shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            tensors[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True)
        return cls(cfg, tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def cast(self, dtype, trainable: bool = False) -> "ModelParams":
        return ModelParams(self.cfg, {
            name: Tensor(np.ascontiguousarray(t.data, dtype=dtype),
                         requires_grad=trainable)
            for name, t in self.tensors.items()})

    def named(self, trainable_only_finetune: bool = False) -> dict[str, Tensor]:
        if not trainable_only_finetune:
            return dict(self.tensors)
        return {n: t for n, t in self.tensors.items()
                if not n.startswith(RECON_PREFIXES)}

    def update(self, fresh: dict[str, Tensor]) -> None:
        for name, t in fresh.items():
            if name not in self.tensors:
                raise ContractError(f"ModelParams.update: unknown parameter '{name}'")
            if t.shape != self.tensors[name].shape:
                raise ContractError(f"ModelParams.update: shape change for '{name}'")
            self.tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_params(cfg: ModelConfig, seed: int, dtype=ad.TRAIN_DTYPE) -> ModelParams:
    return ModelParams.init(cfg, seed, dtype=dtype)


# ---------------------------------------------------------------------------
# tokenization of the pixel grid


def patchify(inputs: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*P*P) patch vectors, row-major patch order."""
    x = np.asarray(inputs)
    if x.ndim != 4:
        raise ContractError(f"patchify: expected (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ContractError(f"patchify: patch {patch_size} does not divide {h}x{w}")
    rows, cols = h // patch_size, w // patch_size
    x = x.reshape(b, c, rows, patch_size, cols, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, rows * cols, c * patch_size * patch_size))


@dataclass
class EncoderActivations:
    tokens_in: Tensor    # H_I, the embedded input sequence
    tokens_out: Tensor   # H_O, after the final layer norm
    logits: Tensor       # class logits read from the class token
    token_ids: np.ndarray | None = None  # patch-token ids present (band mode)


def _affine_ln(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    y = ad.layer_norm(x)
    return ad.add(ad.mul(y, params[prefix + ".gamma"]), params[prefix + ".beta"])


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def _encoder(params: ModelParams, h: Tensor, attn_bias: Tensor | None) -> Tensor:
    cfg = params.cfg
    dh = cfg.head_dim
    scale = Tensor(np.asarray(1.0 / math.sqrt(dh), dtype=h.dtype))
    for i in range(cfg.num_layers):
        p = f"blocks.{i}"
        try:
            pre = _affine_ln(h, params, p + ".ln1")
            q = ad.add(ad.matmul(pre, params[p + ".attn.wq"]), params[p + ".attn.bq"])
            k = ad.add(ad.matmul(pre, params[p + ".attn.wk"]), params[p + ".attn.bk"])
            v = ad.add(ad.matmul(pre, params[p + ".attn.wv"]), params[p + ".attn.bv"])
            heads = []
            for j in range(cfg.num_heads):
                qh = ad.slice_axis(q, -1, j * dh, (j + 1) * dh)
                kh = ad.slice_axis(k, -1, j * dh, (j + 1) * dh)
                vh = ad.slice_axis(v, -1, j * dh, (j + 1) * dh)
                scores = ad.mul(ad.matmul(qh, kh, transpose_b=True), scale)
                if attn_bias is not None:
                    scores = ad.add(scores, attn_bias)
                att = ad.softmax_lastdim(scores)
                heads.append(ad.matmul(att, vh))
            o = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
            o = ad.add(ad.matmul(o, params[p + ".attn.wo"]), params[p + ".attn.bo"])
            h = ad.add(h, o)
            pre2 = _affine_ln(h, params, p + ".ln2")
            m = ad.add(ad.matmul(pre2, params[p + ".mlp.w1"]), params[p + ".mlp.b1"])
            m = ad.gelu(m)
            m = ad.add(ad.matmul(m, params[p + ".mlp.w2"]), params[p + ".mlp.b2"])
            h = ad.add(h, m)
        except NumericError as e:
            raise NumericError(f"encoder block {i}: {e}") from e
    return _affine_ln(h, params, "final_ln")


def _class_logits(params: ModelParams, h_out: Tensor) -> Tensor:
    # Keep the class row 3-d so the head matmul runs as a per-slice gufunc.
    # A 2-d (batch, dim) gemm picks different BLAS kernels at different row
    # counts, which breaks bit-identity between batched and lone forwards.
    cls = ad.slice_axis(h_out, 1, 0, 1)
    logits = _linear(cls, params, "head")
    return ad.reshape(logits, (h_out.shape[0], params.cfg.num_classes))


def embed_full(inputs: np.ndarray, params: ModelParams) -> Tensor:
    """H_I for the full sequence: [cls; E x_1; ...; E x_N] + pos rows."""
    cfg = params.cfg
    patches = patchify(inputs, cfg.patch_size)
    if patches.shape[1] != cfg.num_tokens or patches.shape[2] != cfg.patch_dim:
        raise ContractError(f"embed_full: input grid {patches.shape} does not match config")
    x = Tensor(np.ascontiguousarray(patches, dtype=params.dtype))
    proj = ad.matmul(x, params["patch_embed.weight"])
    b = patches.shape[0]
    cls = ad.reshape(params["cls_token"], (1, 1, cfg.embed_dim))
    zeros = Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=params.dtype))
    cls_rows = ad.add(zeros, cls)
    h = ad.concat([cls_rows, proj], axis=1)
    return ad.add(h, params["pos_embed"])


def forward_global(inputs: np.ndarray, params: ModelParams,
                   allowed_tokens: np.ndarray | None = None) -> EncoderActivations:
    """Full-sequence forward on 4-channel inputs (B, 4, H, W).

    ``allowed_tokens`` is an optional boolean (seq_len,) mask; when given,
    every token's attention is restricted to the allowed set via a large
    negative additive bias (used by the restriction-identity oracle).
    """
    h_in = embed_full(inputs, params)
    bias = None
    if allowed_tokens is not None:
        allowed = np.asarray(allowed_tokens, dtype=bool)
        if allowed.shape != (params.cfg.seq_len,):
            raise ContractError(f"forward_global: allowed mask shape {allowed.shape} "
                                f"!= ({params.cfg.seq_len},)")
        if not allowed.any():
            raise ContractError("forward_global: allowed mask is empty")
        bias = Tensor(np.where(allowed, 0.0, ad.MASK_OFF).astype(params.dtype))
    h_out = _encoder(params, h_in, bias)
    return EncoderActivations(tokens_in=h_in, tokens_out=h_out,
                              logits=_class_logits(params, h_out))


def window_token_ids(cfg: ModelConfig, band: BandSpec) -> np.ndarray:
    """Patch-token ids (0-based, class token excluded) whose columns intersect
    the band, ascending."""
    cols = band_token_columns(band, cfg.patch_size, cfg.image_side, wrap=cfg.band_wrap)
    rows, ncols = cfg.grid
    ids = sorted(r * ncols + c for r in range(rows) for c in cols)
    return np.asarray(ids, dtype=np.int64)


def forward_band_unit(inputs: np.ndarray, params: ModelParams,
                      band: BandSpec) -> EncoderActivations:
    """Isolated band forward: encoder runs only on [cls] + the band's tokens.

    ``inputs`` must already be ablated 4-channel images for this band.
    Projection happens after the gather, so nothing is spent embedding
    tokens that are dropped anyway.
    """
    cfg = params.cfg
    ids = window_token_ids(cfg, band)
    patches = patchify(inputs, cfg.patch_size)[:, ids, :]
    x = Tensor(np.ascontiguousarray(patches, dtype=params.dtype))
    proj = ad.matmul(x, params["patch_embed.weight"])
    b = proj.shape[0]
    cls = ad.reshape(params["cls_token"], (1, 1, cfg.embed_dim))
    zeros = Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=params.dtype))
    h = ad.concat([ad.add(zeros, cls), proj], axis=1)
    pos_rows = ad.embedding_lookup(params["pos_embed"],
                                   np.concatenate([[0], ids + 1]), axis=0)
    h_in = ad.add(h, pos_rows)
    h_out = _encoder(params, h_in, None)
    return EncoderActivations(tokens_in=h_in, tokens_out=h_out,
                              logits=_class_logits(params, h_out), token_ids=ids)


def forward_band_rows(inputs: np.ndarray, params: ModelParams,
                      token_ids_per_sample: np.ndarray) -> Tensor:
    """Band forward with a different window per sample (fine-tuning).

    ``token_ids_per_sample`` is (B, K) of patch-token ids; all rows must
    share one window size K. Returns class logits (B, num_classes).
    """
    cfg = params.cfg
    ids = np.asarray(token_ids_per_sample, dtype=np.int64)
    if ids.ndim != 2:
        raise ContractError(f"forward_band_rows: ids must be (B, K), got {ids.shape}")
    patches = patchify(inputs, cfg.patch_size)
    gathered = np.take_along_axis(patches, ids[:, :, None], axis=1)
    x = Tensor(np.ascontiguousarray(gathered, dtype=params.dtype))
    proj = ad.matmul(x, params["patch_embed.weight"])
    b = proj.shape[0]
    cls = ad.reshape(params["cls_token"], (1, 1, cfg.embed_dim))
    zeros = Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=params.dtype))
    h = ad.concat([ad.add(zeros, cls), proj], axis=1)
    with_cls = np.concatenate([np.zeros((b, 1), dtype=np.int64), ids + 1], axis=1)
    pos_rows = ad.embedding_lookup(params["pos_embed"], with_cls, axis=0)
    h_in = ad.add(h, pos_rows)
    h_out = _encoder(params, h_in, None)
    return _class_logits(params, h_out)


# ---------------------------------------------------------------------------
# window planning: pack token-disjoint windows into shared forwards


@dataclass
class WindowPlan:
    band_width: int
    image_width: int
    patch_size: int
    token_window_width: int          # worst-case columns: ceil(b/p) + 1
    adjacent_windows: int            # pixel-tiling figure: ceil(w/b)
    window_columns: list[tuple[int, ...]]  # per band position
    groups: list[list[int]]          # band positions packed per forward

    @property
    def num_forwards(self) -> int:
        return len(self.groups)


def _first_fit_groups(arcs: list[tuple[int, ...]]) -> list[list[int]]:
    groups: list[list[int]] = []
    used: list[set[int]] = []
    for p, cols in enumerate(arcs):
        s = set(cols)
        for gi, occ in enumerate(used):
            if occ.isdisjoint(s):
                groups[gi].append(p)
                occ |= s
                break
        else:
            groups.append([p])
            used.append(set(s))
    return groups


def _template_groups(arcs: list[tuple[int, ...]], n_cols: int) -> list[list[int]] | None:
    """Rotational chain packing. Window arcs are cyclic column spans whose
    length depends only on position mod patch_size, so the supply of spans
    is (nearly) identical at every start column. Repeatedly builds a chain
    of span lengths that saturates the scarcest length's per-group capacity,
    pads it with other lengths, and stamps it at every rotation that still
    has supply. Returns None when any window is not a contiguous span."""
    spans: dict[tuple[int, int], list[int]] = {}
    for p, cols in enumerate(arcs):
        length = len(cols)
        if cols != tuple((cols[0] + k) % n_cols for k in range(length)):
            return None
        spans.setdefault((cols[0], length), []).append(p)

    def supplies() -> dict[int, int]:
        out: dict[int, int] = {}
        for (_, length), ps in spans.items():
            if ps:
                out[length] = out.get(length, 0) + len(ps)
        return out

    def build_chain(supply: dict[int, int]) -> list[int]:
        # A group hosts at most floor(n_cols / length) spans of one length,
        # so supply / that cap lower-bounds the groups the length forces.
        # Start from the most demanding length and try every copy count,
        # filling the slack with the other lengths; densest chain wins.
        demand = {length: k / (n_cols // length) for length, k in supply.items()}
        order = sorted(demand, key=lambda length: (-demand[length], -length))
        binding = order[0]
        best: list[int] = []
        for copies in range(min(n_cols // binding, supply[binding]), 0, -1):
            chain = [binding] * copies
            space = n_cols - binding * copies
            for length in order[1:]:
                extra = min(n_cols // length, supply[length], space // length)
                chain.extend([length] * extra)
                space -= extra * length
            if sum(chain) > sum(best):
                best = chain
        return best

    groups: list[list[int]] = []
    while True:
        supply = supplies()
        if not supply:
            break
        chain = build_chain(supply)
        if not chain:
            break
        # spread the unused columns between consecutive spans so rotated
        # copies interleave (e.g. two len-3 spans on 8 columns sit at 0, 4)
        slack, k = n_cols - sum(chain), len(chain)
        extras = [slack // k + (1 if i < slack % k else 0) for i in range(k)]
        offsets = [0]
        for length, extra in zip(chain[:-1], extras[:-1]):
            offsets.append(offsets[-1] + length + extra)
        placed_any = False
        for s in range(n_cols):
            slots = [((s + o) % n_cols, length) for o, length in zip(offsets, chain)]
            if all(spans.get(slot) for slot in slots):
                groups.append([spans[slot].pop() for slot in slots])
                placed_any = True
        if not placed_any:
            break
    # asymmetric remainders: first-fit into any group with room
    leftover = sorted(p for ps in spans.values() for p in ps)
    if leftover:
        occupied = [set().union(*(arcs[p] for p in g)) for g in groups]
        for p in leftover:
            cols = set(arcs[p])
            for gi in range(len(groups)):
                if occupied[gi].isdisjoint(cols):
                    groups[gi].append(p)
                    occupied[gi] |= cols
                    break
            else:
                groups.append([p])
                occupied.append(cols)
    return groups


def plan_windows(cfg: ModelConfig, band_width: int) -> WindowPlan:
    """Assign every band position to one forward so that windows inside a
    forward are pairwise token-disjoint. Two deterministic packers run and
    the smaller plan wins."""
    w = cfg.image_side
    if not (1 <= band_width <= w):
        raise ContractError(f"plan_windows: band width {band_width} outside [1, {w}]")
    _, n_cols = cfg.grid
    arcs = [tuple(band_token_columns(BandSpec(p, band_width), cfg.patch_size, w,
                                     wrap=cfg.band_wrap))
            for p in range(w)]
    candidates = [_first_fit_groups(arcs)]
    tpl = _template_groups(arcs, n_cols)
    if tpl is not None:
        candidates.append(tpl)
    groups = min(candidates, key=len)
    groups = [sorted(g) for g in groups]

    flat = sorted(p for g in groups for p in g)
    if flat != list(range(w)):
        raise ContractError("plan_windows: positions are not partitioned exactly once")
    for g in groups:
        seen: set[int] = set()
        for p in g:
            s = set(arcs[p])
            if not seen.isdisjoint(s):
                raise ContractError("plan_windows: overlapping windows inside one forward")
            seen |= s

    return WindowPlan(
        band_width=band_width,
        image_width=w,
        patch_size=cfg.patch_size,
        token_window_width=math.ceil(band_width / cfg.patch_size) + 1,
        adjacent_windows=math.ceil(w / band_width),
        window_columns=arcs,
        groups=groups,
    )


def batched_certify_forward(images: np.ndarray, params: ModelParams, plan: WindowPlan,
                            positions: list[int] | None = None) -> tuple[np.ndarray, int]:
    """Class logits for every (image, band position) pair.

    Returns ((n_images, n_positions, num_classes) array, forwards used).
    The forwards count follows the plan: one per group of token-disjoint
    windows, which is the quantity bounded by band_width + patch_size.
    For throughput the actual encoder calls batch same-width windows across
    groups into one rectangular stack per width; every op in the encoder is
    row-local or a per-slice gufunc, so each sample's arithmetic stays
    bit-identical to a lone forward_band_unit call no matter how windows
    are stacked.
    """
    cfg = params.cfg
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[1] != 3:
        raise ContractError(f"batched_certify_forward: expected (n, 3, h, w), got {imgs.shape}")
    n_img = imgs.shape[0]
    wanted = list(range(plan.image_width)) if positions is None else list(positions)
    wanted_set = set(wanted)
    pos_index = {p: i for i, p in enumerate(wanted)}
    out = np.zeros((n_img, len(wanted), cfg.num_classes), dtype=params.dtype)
    forwards = 0

    by_len: dict[int, list[int]] = {}
    for group in plan.groups:
        active = [p for p in group if p in wanted_set]
        if not active:
            continue
        forwards += 1
        for p in active:
            by_len.setdefault(len(plan.window_columns[p]), []).append(p)

    order = [p for _, ps in sorted(by_len.items()) for p in ps]
    if not order:
        return out, forwards
    tiled = np.tile(imgs, (len(order), 1, 1, 1))
    pos_vec = np.repeat(np.asarray(order), n_img)
    ablated = ablate_batch(tiled, pos_vec, plan.band_width, wrap=cfg.band_wrap)
    patches_all = patchify(ablated, cfg.patch_size)

    row = 0
    for _, ps in sorted(by_len.items()):
        blocks = []
        id_list = []
        for p in ps:
            ids = window_token_ids(cfg, BandSpec(p, plan.band_width))
            id_list.append(ids)
            blocks.append(patches_all[row:row + n_img][:, ids, :])
            row += n_img
        stacked = np.concatenate(blocks, axis=0)
        pos_ids = np.concatenate(
            [np.repeat(np.concatenate([[0], ids + 1])[None, :], n_img, axis=0)
             for ids in id_list], axis=0)
        logits = _window_logits(params, stacked, pos_ids)
        for bi, p in enumerate(ps):
            out[:, pos_index[p], :] = logits[bi * n_img:(bi + 1) * n_img]
    return out, forwards


def _window_logits(params: ModelParams, patch_blocks: np.ndarray,
                   pos_ids: np.ndarray) -> np.ndarray:
    """Shared tail of the band forwards: project gathered patches, prepend
    the class token, add the original position rows, encode, read logits."""
    cfg = params.cfg
    x = Tensor(np.ascontiguousarray(patch_blocks, dtype=params.dtype))
    proj = ad.matmul(x, params["patch_embed.weight"])
    b = proj.shape[0]
    cls = ad.reshape(params["cls_token"], (1, 1, cfg.embed_dim))
    zeros = Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=params.dtype))
    h = ad.concat([ad.add(zeros, cls), proj], axis=1)
    pos_rows = ad.embedding_lookup(params["pos_embed"], np.asarray(pos_ids), axis=0)
    h_in = ad.add(h, pos_rows)
    h_out = _encoder(params, h_in, None)
    return _class_logits(params, h_out).data


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass
class FlopCount:
    attention: int        # score and value matmuls, 2*L*L*d MACs each -> flops
    fully_connected: int  # qkv/out projections and the MLP

    @property
    def total(self) -> int:
        return self.attention + self.fully_connected


def count_flops(cfg: ModelConfig, mode: str, band_width: int | None = None) -> FlopCount:
    """FLOPs of one encoder forward (multiply-adds counted as 2).

    ``global`` uses the full sequence; ``band_unit`` uses the worst-case
    window (ceil(b/p)+1 token columns) plus the class token, matching the
    planner's uniform window width.
    """
    if mode == "global":
        seq = cfg.seq_len
    elif mode == "band_unit":
        if band_width is None:
            raise ContractError("count_flops: band_unit mode needs band_width")
        rows, _ = cfg.grid
        t_w = math.ceil(band_width / cfg.patch_size) + 1
        seq = t_w * rows + 1
    else:
        raise ContractError(f"count_flops: unknown mode '{mode}'")
    d = cfg.embed_dim
    mlp = int(round(cfg.mlp_ratio * d))
    attn = cfg.num_layers * 4 * seq * seq * d
    fc = cfg.num_layers * (8 * seq * d * d + 4 * seq * d * mlp)
    return FlopCount(attention=attn, fully_connected=fc)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Write tensors as float32 in the documented container layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in params.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str, cfg: ModelConfig, dtype=ad.INFER_DTYPE) -> ModelParams:
    """Read a checkpoint and validate it against the config's geometry."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: checkpoint version {version}, this build "
                              f"reads version {CHECKPOINT_VERSION}")
    off = 8
    tensors: dict[str, np.ndarray] = {}
    while off < len(blob):
        if off + 4 > len(blob):
            raise DataFormatError(f"{path}: truncated tensor header")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        end = off + 4 * count
        if end > len(blob):
            raise DataFormatError(f"{path}: truncated data for tensor '{name}'")
        arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims)
        off = end
        tensors[name] = arr

    expected = _param_shapes(cfg)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise DataFormatError(f"{path}: tensor names do not match the config "
                              f"(missing {missing[:3]}, extra {extra[:3]})")
    out: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DataFormatError(f"{path}: '{name}' stored as {tensors[name].shape}, "
                                  f"config wants {shape}")
        out[name] = Tensor(np.ascontiguousarray(tensors[name], dtype=dtype),
                           requires_grad=False)
    return ModelParams(cfg, out)
