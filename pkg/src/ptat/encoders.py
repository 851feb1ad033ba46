"""Toy frozen dual encoders: a patch-sequence audio encoder with
layer-indexed prompt injection and a token-sequence text encoder with
prefix/postfix prompt slots, projecting into one shared retrieval space.

Desk-scale stand-ins for the large pretrained towers this mirrors: two
post-norm transformer blocks per side, learned positional encodings, and
a linear projection head whose output is L2-normalized.

A whole batch is carried as one row-stacked matrix (sample-major), with
per-sample attention expressed through block-diagonal matmuls, so the
graphs stay a few hundred nodes regardless of batch size.  The forward
code is written against an ops backend: graph ops while training, plain
arrays for teachers and evaluation, bit-identical either way.

Positional convention: the leading ``reserved`` rows of the positional
table belong to the prompt slots in every phase, pretraining included, so
content rows keep their positions whether or not prompts are present.
Prompt rows receive the leading encodings at their injection point.
Pooling averages content rows only; prompt rows steer the encoding
through attention, not by entering the pooled mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import ARRAY_OPS, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    mlp_hidden: int = 288
    max_seq_len: int = 64
    shared_dim: int = 32
    vocab_size: Optional[int] = None    # text encoder only
    spec_rows: Optional[int] = None     # audio encoder only
    spec_cols: Optional[int] = None
    patch_rows: Optional[int] = None
    patch_cols: Optional[int] = None

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.is_audio:
            if self.spec_rows % self.patch_rows or self.spec_cols % self.patch_cols:
                raise ValueError(
                    f"spectrogram {self.spec_rows}x{self.spec_cols} not tiled "
                    f"by {self.patch_rows}x{self.patch_cols} patches")

    @property
    def is_audio(self) -> bool:
        return self.spec_rows is not None

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_count(self) -> int:
        return (self.spec_rows // self.patch_rows) * (self.spec_cols // self.patch_cols)

    @property
    def patch_size(self) -> int:
        return self.patch_rows * self.patch_cols


def audio_config(**overrides) -> EncoderConfig:
    base = dict(spec_rows=32, spec_cols=16, patch_rows=8, patch_cols=4)
    base.update(overrides)
    return EncoderConfig(**base)


def text_config(**overrides) -> EncoderConfig:
    base = dict(vocab_size=64)
    base.update(overrides)
    return EncoderConfig(**base)


@dataclass
class EncoderState:
    """Named parameters plus a per-parameter frozen flag.

    Parameter arrays are kept read-only; an update replaces the array, so
    a frozen parameter is bit-identical by object identity.
    """

    config: EncoderConfig
    params: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.params.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            arr.setflags(write=False)
            self.params[name] = arr
            self.frozen.setdefault(name, True)

    def set_param(self, name: str, value: np.ndarray) -> None:
        if self.frozen[name]:
            raise ValueError(f"parameter {name!r} is frozen")
        if value.shape != self.params[name].shape:
            raise ShapeError(
                f"update for {name!r} has shape {value.shape}, "
                f"expected {self.params[name].shape}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        value.setflags(write=False)
        self.params[name] = value

    def copy(self) -> "EncoderState":
        return EncoderState(self.config, dict(self.params), dict(self.frozen))

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _block_names(i: int) -> list[str]:
    p = f"blk{i}."
    return [p + s for s in ("attn_wq", "attn_wk", "attn_wv", "attn_wo",
                            "ln1_g", "ln1_b", "mlp_w1", "mlp_b1",
                            "mlp_w2", "mlp_b2", "ln2_g", "ln2_b")]


def _init_block(rng, cfg: EncoderConfig, i: int) -> dict[str, np.ndarray]:
    d, h = cfg.embed_dim, cfg.mlp_hidden
    sd = d ** -0.5
    p = f"blk{i}."
    return {
        p + "attn_wq": rng.normal(0.0, sd, (d, d)),
        p + "attn_wk": rng.normal(0.0, sd, (d, d)),
        p + "attn_wv": rng.normal(0.0, sd, (d, d)),
        p + "attn_wo": rng.normal(0.0, sd, (d, d)),
        p + "ln1_g": np.ones((1, d)),
        p + "ln1_b": np.zeros((1, d)),
        p + "mlp_w1": rng.normal(0.0, sd, (d, h)),
        p + "mlp_b1": np.zeros((1, h)),
        p + "mlp_w2": rng.normal(0.0, h ** -0.5, (h, d)),
        p + "mlp_b2": np.zeros((1, d)),
        p + "ln2_g": np.ones((1, d)),
        p + "ln2_b": np.zeros((1, d)),
    }


def init_audio_encoder(cfg: EncoderConfig, seed: int) -> EncoderState:
    if not cfg.is_audio:
        raise ValueError("config lacks spectrogram geometry")
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    params = {
        "patch_w": rng.normal(0.0, cfg.patch_size ** -0.5, (cfg.patch_size, d)),
        "patch_b": np.zeros((1, d)),
        "pos": rng.normal(0.0, 0.1, (cfg.max_seq_len, d)),
        "head_w": rng.normal(0.0, d ** -0.5, (d, cfg.shared_dim)),
        "head_b": np.zeros((1, cfg.shared_dim)),
    }
    for i in range(cfg.num_layers):
        params.update(_init_block(rng, cfg, i))
    return EncoderState(cfg, params)


def init_text_encoder(cfg: EncoderConfig, seed: int) -> EncoderState:
    if cfg.vocab_size is None:
        raise ValueError("config lacks vocab_size")
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim
    params = {
        "embed": rng.normal(0.0, 0.5, (cfg.vocab_size, d)),
        "pos": rng.normal(0.0, 0.1, (cfg.max_seq_len, d)),
        "head_w": rng.normal(0.0, d ** -0.5, (d, cfg.shared_dim)),
        "head_b": np.zeros((1, cfg.shared_dim)),
    }
    for i in range(cfg.num_layers):
        params.update(_init_block(rng, cfg, i))
    return EncoderState(cfg, params)


# ---------------------------------------------------------------------------
# Input preparation (plain numpy; constants from the graph's viewpoint).
# ---------------------------------------------------------------------------

def extract_patches(spectrogram: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Split a time x freq spectrogram into flattened row-major patches."""
    t, f = spectrogram.shape
    if (t, f) != (cfg.spec_rows, cfg.spec_cols):
        raise ShapeError(
            f"spectrogram is {t}x{f}, expected {cfg.spec_rows}x{cfg.spec_cols}")
    pr, pc = cfg.patch_rows, cfg.patch_cols
    tiles = spectrogram.reshape(t // pr, pr, f // pc, pc)
    return tiles.transpose(0, 2, 1, 3).reshape(cfg.patch_count, cfg.patch_size)


def stack_audio_patches(spectrograms: Sequence[np.ndarray], cfg: EncoderConfig) -> np.ndarray:
    out = np.concatenate([extract_patches(s, cfg) for s in spectrograms], axis=0)
    out.setflags(write=False)
    return out


def stack_token_onehots(token_rows: Sequence[Sequence[int]], cfg: EncoderConfig) -> np.ndarray:
    lengths = {len(t) for t in token_rows}
    if len(lengths) != 1:
        raise ShapeError(f"token sequences must share a length, got {sorted(lengths)}")
    tokens = np.asarray(token_rows, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(
            f"token ids must lie in [0, {cfg.vocab_size}), "
            f"got range [{tokens.min()}, {tokens.max()}]")
    b, n = tokens.shape
    onehot = np.zeros((b * n, cfg.vocab_size))
    onehot[np.arange(b * n), tokens.reshape(-1)] = 1.0
    onehot.setflags(write=False)
    return onehot


# ---------------------------------------------------------------------------
# Forward pass, written once against the ops backend.
# ---------------------------------------------------------------------------

def _affine_ln(ops, x, params, prefix):
    normed = ops.layer_norm_rows(x)
    return ops.add(ops.mul(normed, params[prefix + "_g"]), params[prefix + "_b"])


def _col_block(ops, x_t, lo: int, hi: int):
    # column slice expressed through a pre-transposed operand; pure views
    return ops.transpose(ops.slice_rows(x_t, lo, hi))


def _attention(ops, x, params, prefix, cfg: EncoderConfig, batch: int,
               adapters=None):
    q = ops.matmul(x, params[prefix + "attn_wq"])
    k = ops.matmul(x, params[prefix + "attn_wk"])
    v = ops.matmul(x, params[prefix + "attn_wv"])
    if adapters is not None:
        # low-rank residual on the query/value projections; the base
        # weights stay untouched
        for name, out in (("wq", "q"), ("wv", "v")):
            key = f"{prefix}attn_{name}"
            if key + ".down" in adapters:
                delta = ops.matmul(adapters[key + ".down"], adapters[key + ".up"])
                bumped = ops.matmul(x, delta)
                if out == "q":
                    q = ops.add(q, bumped)
                else:
                    v = ops.add(v, bumped)
    q_t, k_t, v_t = ops.transpose(q), ops.transpose(k), ops.transpose(v)
    inv_sqrt = cfg.head_dim ** -0.5
    head_rows = []
    for h in range(cfg.num_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        # scaling the narrow query block is cheaper than scaling scores
        qh = ops.scale(_col_block(ops, q_t, lo, hi), inv_sqrt)
        kh = _col_block(ops, k_t, lo, hi)
        vh = _col_block(ops, v_t, lo, hi)
        scores = ops.matmul(qh, kh, transpose_b=True, blocks=batch)
        ctx_h = ops.matmul(ops.row_softmax(scores), vh, blocks=batch)
        head_rows.append(ops.transpose(ctx_h))
    ctx = ops.transpose(ops.concat_rows(head_rows))  # concat heads columnwise
    return ops.matmul(ctx, params[prefix + "attn_wo"])


_ONES_ROW_CACHE: dict[int, np.ndarray] = {}


def _ones_row(n: int) -> np.ndarray:
    if n not in _ONES_ROW_CACHE:
        row = np.ones((1, n))
        row.setflags(write=False)
        _ONES_ROW_CACHE[n] = row
    return _ONES_ROW_CACHE[n]


def _transformer_block(ops, x, params, prefix, cfg, batch, adapters=None):
    x = ops.add(x, _attention(ops, x, params, prefix, cfg, batch, adapters))
    x = _affine_ln(ops, x, params, prefix + "ln1")
    # first linear layer absorbs its bias as an appended ones column, which
    # avoids a separate elementwise pass over the widest activation
    rows = ops.raw(x).shape[0]
    x_aug = ops.transpose(ops.concat_rows(
        [ops.transpose(x), ops.constant(_ones_row(rows))]))
    w_aug = ops.concat_rows([params[prefix + "mlp_w1"], params[prefix + "mlp_b1"]])
    h = ops.relu(ops.matmul(x_aug, w_aug))
    h = ops.add(ops.matmul(h, params[prefix + "mlp_w2"]), params[prefix + "mlp_b2"])
    x = ops.add(x, h)
    return _affine_ln(ops, x, params, prefix + "ln2")


_POOL_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _mean_pool_matrix(batch: int, rows: int, lo: int, hi: int) -> np.ndarray:
    # averages rows [lo, hi) of each sample block
    key = (batch, rows, lo, hi)
    if key not in _POOL_CACHE:
        pool = np.zeros((batch, batch * rows))
        for i in range(batch):
            pool[i, i * rows + lo:i * rows + hi] = 1.0 / (hi - lo)
        pool.setflags(write=False)
        _POOL_CACHE[key] = pool
    return _POOL_CACHE[key]


def _interleave_prompts(ops, prompt_block, x, batch: int, rows: int):
    """Prepend the same prompt rows to every sample block of the stack."""
    pieces = []
    for i in range(batch):
        pieces.append(prompt_block)
        pieces.append(ops.slice_rows(x, i * rows, (i + 1) * rows))
    return ops.concat_rows(pieces)


def _strip_leading_rows(ops, x, batch: int, rows: int, n_strip: int):
    pieces = [ops.slice_rows(x, i * rows + n_strip, (i + 1) * rows)
              for i in range(batch)]
    return ops.concat_rows(pieces)


def _tile_pos(ops, pos, start: int, stop: int, batch: int):
    block = ops.slice_rows(pos, start, stop)
    if batch == 1:
        return block
    return ops.concat_rows([block] * batch)


def _finish(ops, x, params, batch: int, rows: int, lo: int, hi: int):
    pooled = ops.matmul(ops.constant(_mean_pool_matrix(batch, rows, lo, hi)), x)
    projected = ops.add(ops.matmul(pooled, params["head_w"]), params["head_b"])
    return ops.l2_normalize_rows(projected)


def encode_audio_batch(ops, params: Mapping, patches, cfg: EncoderConfig,
                       batch: int, prompts=None, inject_layer: int = 1,
                       deep_prompts: Optional[Sequence] = None,
                       adapters: Optional[Mapping] = None,
                       reserved: int = 0):
    """Embed a batch of spectrogram patch stacks into the shared space.

    ``patches`` is the (batch * patch_count) x patch_size constant stack.
    ``prompts`` (n_pre x embed_dim) enters before block ``inject_layer``;
    ``deep_prompts`` instead supplies one prompt block per layer, each
    replacing the previous layer's prompt rows.  ``reserved`` positional
    slots are skipped by the patch rows whether or not prompts arrive.
    """
    if prompts is not None and deep_prompts is not None:
        raise ValueError("single-layer and per-layer prompts are exclusive")
    n_tok = cfg.patch_count
    n_pre = 0
    if prompts is not None:
        n_pre = ops.raw(prompts).shape[0]
    elif deep_prompts is not None:
        n_pre = ops.raw(deep_prompts[0]).shape[0]
    reserved = max(reserved, n_pre)
    if not (1 <= inject_layer <= cfg.num_layers):
        raise ValueError(
            f"inject_layer {inject_layer} outside 1..{cfg.num_layers}")
    if n_pre and ops.raw(prompts if prompts is not None else deep_prompts[0]).shape[1] != cfg.embed_dim:
        raise ShapeError(
            f"prompt width {ops.raw(prompts if prompts is not None else deep_prompts[0]).shape[1]} "
            f"!= embed_dim {cfg.embed_dim}")
    if reserved + n_tok > cfg.max_seq_len:
        raise ShapeError(
            f"sequence of {reserved}+{n_tok} rows exceeds max_seq_len {cfg.max_seq_len}")

    pos = params["pos"]
    x = ops.add(ops.matmul(patches, params["patch_w"]), params["patch_b"])
    x = ops.add(x, _tile_pos(ops, pos, reserved, reserved + n_tok, batch))

    rows = n_tok
    pool_lo = 0
    injected = False
    for layer in range(1, cfg.num_layers + 1):
        if deep_prompts is not None:
            block = ops.add(deep_prompts[layer - 1], ops.slice_rows(pos, 0, n_pre))
            if layer == 1:
                x = _interleave_prompts(ops, block, x, batch, rows)
                rows += n_pre
                pool_lo = n_pre
            else:
                stripped = _strip_leading_rows(ops, x, batch, rows, n_pre)
                x = _interleave_prompts(ops, block, stripped, batch, rows - n_pre)
        elif prompts is not None and layer == inject_layer:
            if injected:
                raise ValueError("prompts already injected once")
            block = ops.add(prompts, ops.slice_rows(pos, 0, n_pre))
            x = _interleave_prompts(ops, block, x, batch, rows)
            rows += n_pre
            pool_lo = n_pre
            injected = True
        x = _transformer_block(ops, x, params, f"blk{layer - 1}.", cfg, batch,
                               adapters)
    return _finish(ops, x, params, batch, rows, pool_lo, rows)


def encode_text_batch(ops, params: Mapping, onehots, cfg: EncoderConfig,
                      batch: int, t_pre=None, t_post=None, reserved: int = 0):
    """Embed a batch of token rows; prefix/postfix prompts join at layer 1.

    Token rows sit at positions ``reserved`` onward; a prefix block, when
    present, occupies the leading positional slots.
    """
    n_tok = ops.raw(onehots).shape[0] // batch
    n_pre = 0 if t_pre is None else ops.raw(t_pre).shape[0]
    n_post = 0 if t_post is None else ops.raw(t_post).shape[0]
    reserved = max(reserved, n_pre)
    rows = n_pre + n_tok + n_post
    if reserved + n_tok + n_post > cfg.max_seq_len:
        raise ShapeError(
            f"sequence of {reserved}+{n_tok}+{n_post} rows exceeds "
            f"max_seq_len {cfg.max_seq_len}")

    pos = params["pos"]
    tok = ops.matmul(onehots, params["embed"])
    tok = ops.add(tok, _tile_pos(ops, pos, reserved, reserved + n_tok, batch))
    if n_pre or n_post:
        pre_block = None
        if t_pre is not None:
            pre_block = ops.add(t_pre, ops.slice_rows(pos, 0, n_pre))
        post_block = None
        if t_post is not None:
            post_block = ops.add(t_post, ops.slice_rows(
                pos, reserved + n_tok, reserved + n_tok + n_post))
        pieces = []
        for i in range(batch):
            if pre_block is not None:
                pieces.append(pre_block)
            pieces.append(ops.slice_rows(tok, i * n_tok, (i + 1) * n_tok))
            if post_block is not None:
                pieces.append(post_block)
        x = ops.concat_rows(pieces)
    else:
        x = tok
    for layer in range(cfg.num_layers):
        x = _transformer_block(ops, x, params, f"blk{layer}.", cfg, batch)
    return _finish(ops, x, params, batch, rows, n_pre, n_pre + n_tok)


# ---------------------------------------------------------------------------
# Single-sample conveniences (evaluation style, plain arrays).
# ---------------------------------------------------------------------------

def encode_audio(spectrogram: np.ndarray, state: EncoderState,
                 prompts: Optional[np.ndarray] = None, inject_layer: int = 1,
                 adapters: Optional[Mapping] = None, reserved: int = 0) -> np.ndarray:
    patches = stack_audio_patches([np.asarray(spectrogram, dtype=np.float64)],
                                  state.config)
    return encode_audio_batch(ARRAY_OPS, state.params, patches, state.config,
                              batch=1, prompts=prompts,
                              inject_layer=inject_layer, adapters=adapters,
                              reserved=reserved)


def encode_text(tokens: Sequence[int], state: EncoderState,
                t_pre: Optional[np.ndarray] = None,
                t_post: Optional[np.ndarray] = None, reserved: int = 0) -> np.ndarray:
    onehots = stack_token_onehots([list(tokens)], state.config)
    return encode_text_batch(ARRAY_OPS, state.params, onehots, state.config,
                             batch=1, t_pre=t_pre, t_post=t_post,
                             reserved=reserved)
