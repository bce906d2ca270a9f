"""Toy vision-language transformer with inspectable bidirectional attention.

Two weight constructions share one forward path:

* ``init_random_model`` — seeded random weights with pre-norm residual layers,
  used for schedule, bookkeeping, and wall-clock experiments.
* ``build_copy_model`` — analytic weights realizing a pointer task: the prompt
  names a patch index, and masked response positions concentrate their
  attention on that visual token and decode the symbol stored there. This
  gives every attention-guided pruning experiment a known ground truth.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import Matrix, SeededRng, layer_norm, softmax_rows


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    embed_dim: int
    vision_dim: int
    ffn_dim: int
    vocab_size: int
    patch_grid: tuple[int, int]
    mask_token_id: int

    def __post_init__(self):
        counts = {
            "layers": self.layers,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "vision_dim": self.vision_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if len(self.patch_grid) != 2 or min(self.patch_grid) < 1:
            raise ValueError(f"patch_grid must be two positive ints, got {self.patch_grid}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ValueError(f"mask_token_id {self.mask_token_id} outside vocab {self.vocab_size}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class AttentionCapture:
    """Row-stochastic attention maps from one forward pass: maps[layer][head] is (n, n)."""

    maps: list[list[np.ndarray]]
    step_index: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.maps)

    @property
    def num_heads(self) -> int:
        return len(self.maps[0]) if self.maps else 0

    @property
    def seq_len(self) -> int:
        return self.maps[0][0].shape[0] if self.maps and self.maps[0] else 0


@dataclass
class LayerWeights:
    wq: np.ndarray  # (heads, d, head_dim)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (d, d), applied to the concatenated head outputs
    w1: np.ndarray  # (d, ffn_dim)
    b1: np.ndarray
    w2: np.ndarray  # (ffn_dim, d)
    b2: np.ndarray
    norm1: Optional[tuple[np.ndarray, np.ndarray]] = None  # (gain, bias) or identity skip
    norm2: Optional[tuple[np.ndarray, np.ndarray]] = None


class HashedPatchTable:
    """Per-symbol embedding derived from (seed, sha256(symbol)); no fixed alphabet."""

    def __init__(self, seed: int, dim: int):
        self.seed = int(seed)
        self.dim = int(dim)

    def vector(self, symbol: str) -> np.ndarray:
        digest = hashlib.sha256(symbol.encode("utf-8")).digest()
        key = int.from_bytes(digest[:8], "little")
        child = SeededRng(self.seed).split(key)
        return child.normal(size=self.dim)


class FixedPatchTable:
    """Explicit symbol -> vector lookup; unknown symbols are an error."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def vector(self, symbol: str) -> np.ndarray:
        if symbol not in self.table:
            raise ValueError(f"unknown patch symbol: {symbol!r}")
        return self.table[symbol]


@dataclass
class ModelWeights:
    config: ModelConfig
    patch_embed: object  # anything with .vector(symbol) -> (vision_dim,)
    projector: np.ndarray  # (vision_dim, d)
    token_embed: np.ndarray  # (vocab, d)
    positional: np.ndarray  # (positions, d); segments use disjoint base offsets
    prompt_pos_base: int
    response_pos_base: int
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: Optional[tuple[np.ndarray, np.ndarray]] = None
    output_w: np.ndarray = None
    output_b: np.ndarray = None

    @property
    def max_prompt_len(self) -> int:
        return self.response_pos_base - self.prompt_pos_base

    @property
    def max_response_len(self) -> int:
        return self.positional.shape[0] - self.response_pos_base


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Classic fixed sin/cos position table, values in [-1, 1]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def encode_image(image: Sequence[Sequence[str]], weights: ModelWeights,
                 cfg: Optional[ModelConfig] = None) -> Matrix:
    """Embed a patch-symbol grid into visual token rows (row-major patch order).

    Each row is the projected patch embedding plus that patch's position
    vector, so a visual token keeps its identity even after rows are sliced
    out by pruning.
    """
    cfg = cfg or weights.config
    rows, cols = cfg.patch_grid
    if len(image) != rows or any(len(r) != cols for r in image):
        raise ValueError(f"image grid does not match patch_grid {cfg.patch_grid}")
    out = np.zeros((cfg.num_patches, cfg.embed_dim))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            out[i] = weights.patch_embed.vector(image[r][c]) @ weights.projector
            out[i] += weights.positional[i]
    return out


def _embed_tokens(ids: Sequence[int], weights: ModelWeights, base: int, what: str) -> Matrix:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= weights.config.vocab_size):
        raise ValueError(f"{what} token id outside vocab of {weights.config.vocab_size}")
    if base + ids.size > weights.positional.shape[0]:
        raise ValueError(f"{what} of length {ids.size} exceeds positional capacity")
    if ids.size == 0:
        return np.zeros((0, weights.config.embed_dim))
    return weights.token_embed[ids] + weights.positional[base : base + ids.size]


def embed_prompt(tokens: Sequence[int], weights: ModelWeights) -> Matrix:
    """Token embeddings plus prompt-segment position offsets; empty prompts are legal."""
    return _embed_tokens(tokens, weights, weights.prompt_pos_base, "prompt")


def embed_response(ids: Sequence[int], weights: ModelWeights) -> Matrix:
    """Response-row embeddings; masked positions carry the mask token id."""
    return _embed_tokens(ids, weights, weights.response_pos_base, "response")


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def forward(x: Matrix, weights: ModelWeights,
            capture: bool = False) -> tuple[Matrix, Optional[AttentionCapture]]:
    """Full bidirectional self-attention over all rows; optionally keep every map.

    Capture is observation-only: logits are identical with it on or off.
    """
    cfg = weights.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim:
        raise ValueError(f"input must be (n, {cfg.embed_dim}), got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("need at least one input row")
    scale = 1.0 / np.sqrt(cfg.head_dim)
    h = x.copy()
    maps: list[list[np.ndarray]] = []
    for lw in weights.layers:
        a_in = layer_norm(h, *lw.norm1) if lw.norm1 is not None else h
        head_outs = []
        layer_maps = []
        for hd in range(cfg.heads):
            q = a_in @ lw.wq[hd]
            k = a_in @ lw.wk[hd]
            v = a_in @ lw.wv[hd]
            attn = softmax_rows((q @ k.T) * scale)
            if capture:
                layer_maps.append(attn)
            head_outs.append(attn @ v)
        if capture:
            maps.append(layer_maps)
        h = h + np.concatenate(head_outs, axis=1) @ lw.wo
        f_in = layer_norm(h, *lw.norm2) if lw.norm2 is not None else h
        h = h + gelu(f_in @ lw.w1 + lw.b1) @ lw.w2 + lw.b2
    if weights.final_norm is not None:
        h = layer_norm(h, *weights.final_norm)
    logits = h @ weights.output_w + weights.output_b
    return logits, (AttentionCapture(maps) if capture else None)


DEFAULT_MAX_PROMPT = 256
DEFAULT_MAX_RESPONSE = 512


def init_random_model(cfg: ModelConfig, seed: int,
                      max_prompt_len: int = DEFAULT_MAX_PROMPT,
                      max_response_len: int = DEFAULT_MAX_RESPONSE) -> ModelWeights:
    """Seeded random weights, scaled so pre-norm residual activations stay O(1)."""
    rng = SeededRng(seed)
    d, dv, mu, h, dh = cfg.embed_dim, cfg.vision_dim, cfg.ffn_dim, cfg.heads, cfg.head_dim
    n_pos = cfg.num_patches + max_prompt_len + max_response_len
    resid_scale = 1.0 / np.sqrt(2.0 * cfg.layers)
    layers = []
    for _ in range(cfg.layers):
        layers.append(LayerWeights(
            wq=rng.normal(size=(h, d, dh), scale=1.0 / np.sqrt(d)),
            wk=rng.normal(size=(h, d, dh), scale=1.0 / np.sqrt(d)),
            wv=rng.normal(size=(h, d, dh), scale=1.0 / np.sqrt(d)),
            wo=rng.normal(size=(d, d), scale=resid_scale / np.sqrt(d)),
            w1=rng.normal(size=(d, mu), scale=1.0 / np.sqrt(d)),
            b1=np.zeros(mu),
            w2=rng.normal(size=(mu, d), scale=resid_scale / np.sqrt(mu)),
            b2=np.zeros(d),
            norm1=(np.ones(d), np.zeros(d)),
            norm2=(np.ones(d), np.zeros(d)),
        ))
    return ModelWeights(
        config=cfg,
        patch_embed=HashedPatchTable(seed=rng.split(1).integers(0, 2**63), dim=dv),
        projector=rng.normal(size=(dv, d), scale=1.0 / np.sqrt(dv)),
        token_embed=rng.normal(size=(cfg.vocab_size, d)),
        positional=sinusoidal_table(n_pos, d),
        prompt_pos_base=cfg.num_patches,
        response_pos_base=cfg.num_patches + max_prompt_len,
        layers=layers,
        final_norm=(np.ones(d), np.zeros(d)),
        output_w=rng.normal(size=(d, cfg.vocab_size), scale=1.0 / np.sqrt(d)),
        output_b=np.zeros(cfg.vocab_size),
    )


@dataclass(frozen=True)
class CopyTaskVocab:
    """Token id layout shared by the copy model and the pointer-task generator.

    ids: [0, A) answer symbols, [A, A+N) patch-index tokens, A+N the abstain
    token the model emits when the pointed-at patch is gone, then the mask.
    """

    symbols: tuple[str, ...]
    num_patches: int

    @property
    def num_symbols(self) -> int:
        return len(self.symbols)

    def symbol_id(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def index_id(self, patch: int) -> int:
        if not 0 <= patch < self.num_patches:
            raise ValueError(f"patch index {patch} out of range")
        return self.num_symbols + patch

    @property
    def null_id(self) -> int:
        return self.num_symbols + self.num_patches

    @property
    def mask_id(self) -> int:
        return self.null_id + 1

    @property
    def required_vocab(self) -> int:
        return self.mask_id + 1


# Magnitudes for the analytic construction. Code/flag/fetch gains are large
# enough that every routing softmax saturates (logit gaps > 25 after the
# 1/sqrt(head_dim) scale at desk-scale widths); the abstain margin separates
# a fetched payload (~layers-1) from uniform-attention smear (<2).
_CODE = 20.0
_FLAG_GAIN = 20.0
_FETCH_GAIN = 20.0
_PAYLOAD = 1.0
_ABSTAIN = 4.0
_RAMP_STEP = 0.1

_MIN_COPY_LAYERS = 10  # layer-averaged mass on the target is ~(L-1)/L; 0.9 needs L >= 10


def copy_model_config(patch_grid: tuple[int, int], symbols: Sequence[str],
                      layers: int = 12, heads: int = 1) -> ModelConfig:
    """Smallest ModelConfig that hosts the copy construction for this task family."""
    n = patch_grid[0] * patch_grid[1]
    a = len(symbols)
    d_needed = max(2 * n + 4 + 2 * a, heads * max(n, a + 1))
    d = ((d_needed + heads - 1) // heads) * heads
    vocab = CopyTaskVocab(tuple(symbols), n).required_vocab
    return ModelConfig(
        layers=layers, heads=heads, embed_dim=d, vision_dim=a, ffn_dim=1,
        vocab_size=vocab, patch_grid=tuple(patch_grid),
        mask_token_id=vocab - 1,
    )


def build_copy_model(cfg: ModelConfig, patch_symbols: Sequence[str],
                     max_prompt_len: int = DEFAULT_MAX_PROMPT,
                     max_response_len: int = DEFAULT_MAX_RESPONSE) -> ModelWeights:
    """Analytic weights for the pointer task.

    Channel plan (d channels): per-patch position codes, pointer codes carried
    by index tokens, a target flag, marker channels for index/mask tokens, a
    response-position ramp, and two payload blocks (visual-side and fetched).

    Layer 1 routes each visual token's position code against the prompt's
    pointer code and writes the flag onto the matching visual token. Layers
    2..L route every still-masked row onto the flagged token and accumulate its
    symbol payload, which the output head reads. With L layers the layer/head-
    averaged attention from masked rows onto the target is at least (L-1)/L,
    so L >= 10 keeps it above 0.9. If no flagged token survives pruning, the
    constant abstain logit wins and the model emits the abstain token. A small
    per-position ramp on the abstain logit makes confidence-ordered decoding
    commit later response positions first, so position 0 resolves last.
    """
    vocab = CopyTaskVocab(tuple(patch_symbols), cfg.num_patches)
    n, a = cfg.num_patches, vocab.num_symbols
    d, h, dh = cfg.embed_dim, cfg.heads, cfg.head_dim

    if cfg.layers < _MIN_COPY_LAYERS:
        raise ValueError(f"copy construction needs >= {_MIN_COPY_LAYERS} layers, got {cfg.layers}")
    d_needed = 2 * n + 4 + 2 * a
    if d < d_needed:
        raise ValueError(f"copy construction needs embed_dim >= {d_needed}, got {d}")
    if dh < max(n, a + 1):
        raise ValueError(f"copy construction needs head_dim >= {max(n, a + 1)}, got {dh}")
    if cfg.vision_dim < a:
        raise ValueError(f"copy construction needs vision_dim >= {a}, got {cfg.vision_dim}")
    if cfg.vocab_size < vocab.required_vocab:
        raise ValueError(f"copy construction needs vocab >= {vocab.required_vocab}")
    if cfg.mask_token_id <= vocab.null_id:
        raise ValueError(f"mask_token_id must exceed {vocab.null_id} to avoid content ids")

    # Channel offsets.
    a1 = 0          # [a1, a1+n): position code of each visual token
    a2 = n          # [a2, a2+n): pointer code carried by index tokens
    flag_ch = 2 * n
    idx_mark = 2 * n + 1
    mask_mark = 2 * n + 2
    ramp_ch = 2 * n + 3
    pv = 2 * n + 4          # [pv, pv+a): visual symbol payload
    pr = 2 * n + 4 + a      # [pr, pr+a): fetched payload read by the head

    patch_table = {sym: np.eye(a)[j] for j, sym in enumerate(vocab.symbols)}
    projector = np.zeros((cfg.vision_dim, d))
    for j in range(a):
        projector[j, pv + j] = _PAYLOAD

    token_embed = np.zeros((cfg.vocab_size, d))
    for i in range(n):
        token_embed[vocab.index_id(i), a2 + i] = _CODE
        token_embed[vocab.index_id(i), idx_mark] = 1.0
    token_embed[cfg.mask_token_id, mask_mark] = 1.0

    n_pos = n + max_prompt_len + max_response_len
    positional = np.zeros((n_pos, d))
    for i in range(n):
        positional[i, a1 + i] = _CODE
    resp_base = n + max_prompt_len
    for p in range(max_response_len):
        positional[resp_base + p, ramp_ch] = _RAMP_STEP * p

    def attention_only_layer(wq, wk, wv, wo) -> LayerWeights:
        return LayerWeights(
            wq=wq, wk=wk, wv=wv, wo=wo,
            w1=np.zeros((d, cfg.ffn_dim)), b1=np.zeros(cfg.ffn_dim),
            w2=np.zeros((cfg.ffn_dim, d)), b2=np.zeros(d),
            norm1=None, norm2=None,
        )

    def broadcast_layer() -> LayerWeights:
        wq = np.zeros((h, d, dh))
        wk = np.zeros((h, d, dh))
        wv = np.zeros((h, d, dh))
        wo = np.zeros((d, d))
        for hd in range(h):
            for i in range(n):
                wq[hd, a1 + i, i] = 1.0
                wk[hd, a2 + i, i] = 1.0
            wv[hd, idx_mark, 0] = _FLAG_GAIN
            wo[hd * dh + 0, flag_ch] = 1.0 / h
        return attention_only_layer(wq, wk, wv, wo)

    def fetch_layer() -> LayerWeights:
        wq = np.zeros((h, d, dh))
        wk = np.zeros((h, d, dh))
        wv = np.zeros((h, d, dh))
        wo = np.zeros((d, d))
        for hd in range(h):
            wq[hd, mask_mark, 0] = _FETCH_GAIN
            wk[hd, flag_ch, 0] = 1.0
            for j in range(a):
                wv[hd, pv + j, 1 + j] = 1.0
                wo[hd * dh + 1 + j, pr + j] = 1.0 / h
        return attention_only_layer(wq, wk, wv, wo)

    output_w = np.zeros((d, cfg.vocab_size))
    for j in range(a):
        output_w[pr + j, j] = 1.0
    output_w[ramp_ch, vocab.null_id] = -1.0
    output_b = np.zeros(cfg.vocab_size)
    output_b[vocab.null_id] = _ABSTAIN

    return ModelWeights(
        config=cfg,
        patch_embed=FixedPatchTable(patch_table),
        projector=projector,
        token_embed=token_embed,
        positional=positional,
        prompt_pos_base=n,
        response_pos_base=resp_base,
        layers=[broadcast_layer()] + [fetch_layer() for _ in range(cfg.layers - 1)],
        final_norm=None,
        output_w=output_w,
        output_b=output_b,
    )
