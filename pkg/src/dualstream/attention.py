"""Transformer stream: token reshaping, MHSA with content+position logits,
attention blocks, and the four positional-encoding variants.

Each block is per-token-linear -> multi-head self-attention -> per-token
linear, added back to the input map through a residual connection and passed
through a ReLU. Attention logits combine a content term (q k^T) and a
position term (q p^T), scaled by 1/sqrt(d_k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import SeededRng
from .tensor import (
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    relu,
    reshape,
    softmax_rows,
    tmean,
    tsum,
    transpose,
)

POS_KINDS = ("none", "sincos_abs", "learn_abs", "learn_rel")


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 128
    token_dim: int = 64
    heads: int = 4
    n_blocks: int = 2
    pos_kind: str = "learn_rel"
    grid: tuple[int, int] = (4, 4)

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("need at least one attention block")
        if self.token_dim % self.heads:
            raise ConfigError(
                f"token dim {self.token_dim} not divisible by {self.heads} heads"
            )
        if self.pos_kind not in POS_KINDS:
            raise ConfigError(f"unknown positional encoding kind {self.pos_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


def tokens_from_featuremap(fm: Tensor) -> Tensor:
    """(B,C,h,w) -> (B, h*w, C); token t is pixel (t // w, t % w)."""
    B, C, h, w = fm.shape
    return transpose(reshape(fm, (B, C, h * w)), (0, 2, 1))


def featuremap_from_tokens(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    B, n, C = tokens.shape
    h, w = grid
    return reshape(transpose(tokens, (0, 2, 1)), (B, C, h, w))


# ---------------------------------------------------------------------------
# positional encodings


def sincos_table(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table: row signal in the first dim/2 channels,
    column signal in the rest."""
    h, w = grid
    half = dim // 2
    rows = np.repeat(np.arange(h), w).astype(np.float64)
    cols = np.tile(np.arange(w), h).astype(np.float64)

    def encode(pos, d):
        out = np.zeros((pos.size, d))
        freqs = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / max(d, 1))
        ang = pos[:, None] * freqs[None, :]
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang[:, : out[:, 1::2].shape[1]])
        return out

    table = np.concatenate([encode(rows, half), encode(cols, dim - half)], axis=1)
    return table.astype(np.float32)


def relative_index_tables(grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(n,n) index maps into the row-offset and column-offset tables."""
    h, w = grid
    r = np.repeat(np.arange(h), w)
    c = np.tile(np.arange(w), h)
    ridx = r[:, None] - r[None, :] + (h - 1)
    cidx = c[:, None] - c[None, :] + (w - 1)
    return ridx, cidx


def init_position_params(cfg: AttentionConfig, np_rng: np.random.Generator) -> dict:
    h, w = cfg.grid
    d = cfg.token_dim
    if cfg.pos_kind == "learn_abs":
        return {"emb": Tensor(0.02 * np_rng.standard_normal((h * w, d)),
                              requires_grad=True)}
    if cfg.pos_kind == "learn_rel":
        return {
            "rows": Tensor(0.02 * np_rng.standard_normal((2 * h - 1, d)),
                           requires_grad=True),
            "cols": Tensor(0.02 * np_rng.standard_normal((2 * w - 1, d)),
                           requires_grad=True),
        }
    return {}


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """(B,n,d) -> (B,heads,n,d/heads)."""
    B, n, d = t.shape
    return transpose(reshape(t, (B, n, heads, d // heads)), (0, 2, 1, 3))


def _table_heads(table: Tensor, heads: int) -> Tensor:
    """(n,d) -> (heads,n,d/heads)."""
    n, d = table.shape
    return transpose(reshape(table, (n, heads, d // heads)), (1, 0, 2))


def _position_logits(pos: dict, cfg: AttentionConfig, q_heads: Tensor) -> Tensor:
    """q p^T per head: q_heads (B,heads,n,dh) -> logits (B,heads,n,n)."""
    n = cfg.n_tokens
    if cfg.pos_kind == "sincos_abs":
        table = Tensor(sincos_table(cfg.grid, cfg.token_dim))
    elif cfg.pos_kind == "learn_abs":
        table = pos["emb"]
        if table.shape[0] < n:
            raise ConfigError(
                f"grid {cfg.grid} needs {n} position embeddings, table has "
                f"{table.shape[0]}"
            )
    elif cfg.pos_kind == "learn_rel":
        ridx, cidx = relative_index_tables(cfg.grid)
        if ridx.max() >= pos["rows"].shape[0] or cidx.max() >= pos["cols"].shape[0]:
            raise ConfigError(f"grid {cfg.grid} exceeds relative embedding tables")
        rel = add(gather_rows(pos["rows"], ridx.ravel()),
                  gather_rows(pos["cols"], cidx.ravel()))
        # (n*n, d) -> (heads, n, n, dh); score(i,j) = q_i . (r_drow + c_dcol)
        rel = transpose(reshape(rel, (n, n, cfg.heads, cfg.head_dim)), (2, 0, 1, 3))
        q5 = reshape(q_heads, (q_heads.shape[0], cfg.heads, n, 1, cfg.head_dim))
        return tsum(mul_broadcast(q5, rel), axis=4)
    else:
        raise ConfigError(f"no position logits for kind {cfg.pos_kind!r}")
    return matmul(q_heads, transpose(_table_heads(table, cfg.heads), (0, 2, 1)))


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    # thin alias; elementwise mul already broadcasts
    from .tensor import mul

    return mul(a, b)


def position_scores(pos: dict, cfg: AttentionConfig, q: Tensor) -> Tensor:
    """Single-head score matrix (n,n) for a query matrix q of shape (n, dh)."""
    if cfg.pos_kind == "none":
        raise ConfigError("position_scores undefined for kind 'none'")
    one_head = AttentionConfig(
        channels=cfg.channels, token_dim=q.shape[1], heads=1,
        n_blocks=cfg.n_blocks, pos_kind=cfg.pos_kind, grid=cfg.grid,
    )
    q4 = reshape(q, (1, 1, q.shape[0], q.shape[1]))
    return reshape(_position_logits(pos, one_head, q4), (cfg.n_tokens, cfg.n_tokens))


# ---------------------------------------------------------------------------
# attention blocks


def init_attention_block(cfg: AttentionConfig, rng: SeededRng) -> dict:
    np_rng = rng.numpy_rng()
    C, d = cfg.channels, cfg.token_dim

    def linear(c_in, c_out):
        bound = math.sqrt(6.0 / c_in)
        return {
            "w": Tensor(np_rng.uniform(-bound, bound, size=(c_in, c_out)),
                        requires_grad=True),
            "b": Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True),
        }

    def qkv(dim):
        bound = math.sqrt(6.0 / dim)
        return Tensor(np_rng.uniform(-bound, bound, size=(dim, dim)),
                      requires_grad=True)

    return {
        "mlp_in": linear(C, d),
        "wq": qkv(d),
        "wk": qkv(d),
        "wv": qkv(d),
        "mlp_out": linear(d, C),
        "pos": init_position_params(cfg, np_rng),
    }


def init_transformer_params(cfg: AttentionConfig, rng: SeededRng) -> dict:
    return {"blocks": [init_attention_block(cfg, rng.derive(i))
                       for i in range(cfg.n_blocks)]}


def mhsa_forward(params: dict, cfg: AttentionConfig,
                 tokens: Tensor) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention over (B,n,d) tokens.

    Returns the attended tokens (B,n,d) and the attention weights
    (B,heads,n,n) for inspection.
    """
    if tokens.shape[2] != cfg.token_dim:
        raise ConfigError(
            f"mhsa expects token dim {cfg.token_dim}, got {tokens.shape[2]}"
        )
    q = _split_heads(matmul(tokens, params["wq"]), cfg.heads)
    k = _split_heads(matmul(tokens, params["wk"]), cfg.heads)
    v = _split_heads(matmul(tokens, params["wv"]), cfg.heads)

    logits = matmul(q, transpose(k, (0, 1, 3, 2)))
    if cfg.pos_kind != "none":
        logits = add(_position_logits(params["pos"], cfg, q), logits)
    weights = softmax_rows(mul_broadcast(logits, Tensor(1.0 / math.sqrt(cfg.head_dim))))

    out = matmul(weights, v)  # (B,heads,n,dh)
    B, _, n, dh = out.shape
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, n, cfg.token_dim))
    return out, weights


def _token_linear(p: dict, tokens: Tensor) -> Tensor:
    return add(matmul(tokens, p["w"]), p["b"])


def attention_block_forward(params: dict, cfg: AttentionConfig,
                            fm: Tensor) -> Tensor:
    """ReLU(fm + mlp_out(mhsa(mlp_in(tokens(fm)))))."""
    if fm.shape[1] != cfg.channels:
        raise ConfigError(
            f"attention block expects {cfg.channels} channels, got {fm.shape[1]}"
        )
    tokens = tokens_from_featuremap(fm)
    attended, _ = mhsa_forward(params, cfg, _token_linear(params["mlp_in"], tokens))
    back = featuremap_from_tokens(_token_linear(params["mlp_out"], attended),
                                  (fm.shape[2], fm.shape[3]))
    return relu(add(fm, back))


def transformer_forward(params: dict, cfg: AttentionConfig, fm: Tensor) -> Tensor:
    """n consecutive attention blocks, then global average pool -> (B,C)."""
    blocks = params["blocks"]
    if not blocks:
        raise ConfigError("transformer needs at least one block")
    x = fm
    for block in blocks:
        x = attention_block_forward(block, cfg, x)
    return tmean(tokens_from_featuremap(x), axis=1)
