"""Feature embeddings, the set-style transformer encoder, and the denoiser.

Token embedding follows y = f(w_x * M_x) + w_bx: a per-feature weight vector
scaled by the standardized magnitude, passed through GELU, plus a per-feature
bias.  A request token is the magnitude-free case, which collapses to the
bias alone.  The encoder has no positional encoding; to make permutation
invariance over conditions hold bit-for-bit, encode() first rewrites the
sequence into a canonical order (padding last, then feature id, then
magnitude), which fixes the summation order without changing the set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TokenizedRow
from .errors import ConfigError, ShapeError

MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyperparameters shared by the encoder and the head."""

    n_features: int
    d_model: int
    n_heads: int
    n_layers: int
    n_steps: int

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if min(self.n_features, self.d_model, self.n_heads, self.n_steps) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.n_layers < 0:
            raise ConfigError("layer count cannot be negative")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def d_time(self) -> int:
        return max(1, self.d_model // 4)

    @property
    def head_width(self) -> int:
        return 3 * self.d_model

    @property
    def head_depth(self) -> int:
        return 3

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "n_steps": self.n_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        return cls(**{k: int(d[k]) for k in
                      ("n_features", "d_model", "n_heads", "n_layers", "n_steps")})


def init_params(dims: ModelDims, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    """Freshly initialized named parameters in a stable (manifest) order."""
    D, Dff = dims.d_model, dims.d_ff
    p: dict[str, Tensor] = {}

    def normal(shape, std):
        return ad.parameter(rng.normal(0.0, std, size=shape), dtype=dtype)

    p["embed.w"] = normal((dims.n_features, D), 1.0 / np.sqrt(D))
    p["embed.w_b"] = normal((dims.n_features, D), 1.0 / np.sqrt(D))

    # Residual-branch output projections start small so deep stacks stay tame.
    res = 1.0 / np.sqrt(max(1, 2 * dims.n_layers))
    for l in range(dims.n_layers):
        pre = f"enc.{l}"
        p[f"{pre}.ln1.g"] = ad.parameter(np.ones(D), dtype=dtype)
        p[f"{pre}.ln1.b"] = ad.parameter(np.zeros(D), dtype=dtype)
        for nm in ("wq", "wk", "wv"):
            p[f"{pre}.attn.{nm}"] = normal((D, D), np.sqrt(1.0 / D))
        p[f"{pre}.attn.wo"] = normal((D, D), np.sqrt(1.0 / D) * res)
        p[f"{pre}.ln2.g"] = ad.parameter(np.ones(D), dtype=dtype)
        p[f"{pre}.ln2.b"] = ad.parameter(np.zeros(D), dtype=dtype)
        p[f"{pre}.ffn.w1"] = normal((D, Dff), np.sqrt(2.0 / (D + Dff)))
        p[f"{pre}.ffn.w2"] = normal((Dff, D), np.sqrt(2.0 / (D + Dff)) * res)
    if dims.n_layers:
        p["enc.final_ln.g"] = ad.parameter(np.ones(D), dtype=dtype)
        p["enc.final_ln.b"] = ad.parameter(np.zeros(D), dtype=dtype)

    p["time.table"] = normal((dims.n_steps, dims.d_time), 1.0)
    width = dims.head_width
    fan_in = 1 + dims.d_time + D
    for k in range(dims.head_depth):
        p[f"head.{k}.w"] = normal((fan_in, width), np.sqrt(2.0 / fan_in))
        p[f"head.{k}.b"] = ad.parameter(np.zeros(width), dtype=dtype)
        fan_in = width
    p["head.out.w"] = normal((fan_in, 1), 0.01)
    p["head.out.b"] = ad.parameter(np.zeros(1), dtype=dtype)
    return p


def detach_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Graph-free views sharing the same storage; use for inference."""
    return {k: Tensor(v.data) for k, v in params.items()}


def parameter_list(params: dict[str, Tensor]) -> list[Tensor]:
    return list(params.values())


def parameter_groups(params: dict[str, Tensor]) -> dict[str, int]:
    """Counts per top-level name ('embed', 'enc', 'time', 'head')."""
    groups: dict[str, int] = {}
    for name, t in params.items():
        g = name.split(".", 1)[0]
        groups[g] = groups.get(g, 0) + t.size
    return groups


# ---- embedding ---------------------------------------------------------------


def _one_hot(token_ids: np.ndarray, n_features: int, dtype) -> np.ndarray:
    """One-hot over real features only; the padding id maps to an all-zero
    row, so padded positions embed to exactly zero and never receive grad."""
    return (token_ids[..., None] == np.arange(n_features)).astype(dtype)


def embed_sequence(token_ids: np.ndarray, magnitudes: np.ndarray,
                   params: dict[str, Tensor], dims: ModelDims) -> Tensor:
    """Token sequences to embedding stacks, (B, L) ids and magnitudes in,
    (B, L, D) out."""
    w, w_b = params["embed.w"], params["embed.w_b"]
    onehot = Tensor(_one_hot(token_ids, dims.n_features, w.dtype))
    wx = ad.matmul(onehot, w)
    wb = ad.matmul(onehot, w_b)
    mags = Tensor(np.asarray(magnitudes, dtype=w.dtype)[..., None])
    return ad.add(ad.gelu(ad.mul(wx, mags)), wb)


def embed_token(feature: int, magnitude: float, params: dict[str, Tensor],
                dims: ModelDims) -> Tensor:
    if not 0 <= feature < dims.n_features:
        raise ShapeError(f"feature index {feature} out of range")
    ids = np.asarray([[feature]])
    mags = np.asarray([[magnitude]])
    return ad.reshape(embed_sequence(ids, mags, params, dims), (dims.d_model,))


def embed_request(feature: int, params: dict[str, Tensor], dims: ModelDims) -> Tensor:
    return embed_token(feature, 0.0, params, dims)


# ---- encoder ------------------------------------------------------------------


def canonical_order(token_ids: np.ndarray, magnitudes: np.ndarray,
                    mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stable-sort positions 1..L-1 by (padding last, feature id, magnitude).

    Any permutation of the conditions maps to the same canonical arrays, so
    downstream float arithmetic sees literally identical inputs.
    """
    B, L = token_ids.shape
    if L <= 2:
        return token_ids, magnitudes, mask
    pad = ~mask[:, 1:]
    rows = np.repeat(np.arange(B), L - 1)
    flat = np.lexsort((magnitudes[:, 1:].ravel(), token_ids[:, 1:].ravel(),
                       pad.ravel(), rows))
    cols = flat.reshape(B, L - 1) % (L - 1)
    out_ids = token_ids.copy()
    out_mag = magnitudes.copy()
    out_mask = mask.copy()
    out_ids[:, 1:] = np.take_along_axis(token_ids[:, 1:], cols, axis=1)
    out_mag[:, 1:] = np.take_along_axis(magnitudes[:, 1:], cols, axis=1)
    out_mask[:, 1:] = np.take_along_axis(mask[:, 1:], cols, axis=1)
    return out_ids, out_mag, out_mask


def _attention(x: Tensor, mask: np.ndarray, layer: str,
               params: dict[str, Tensor], dims: ModelDims,
               attention_out: list | None) -> Tensor:
    B, L, D = x.shape
    H, dh = dims.n_heads, dims.d_head

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

    q = split_heads(ad.matmul(x, params[f"{layer}.wq"]))
    k = split_heads(ad.matmul(x, params[f"{layer}.wk"]))
    v = split_heads(ad.matmul(x, params[f"{layer}.wv"]))

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    scores = ad.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=x.dtype)))
    key_pad = ~mask[:, None, None, :]
    scores = ad.masked_fill(scores, np.broadcast_to(key_pad, scores.shape), MASK_FILL)
    weights = ad.softmax_last(scores)
    if attention_out is not None:
        attention_out.append(weights.data.copy())
    mixed = ad.matmul(weights, v)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (B, L, D))
    return ad.matmul(merged, params[f"{layer}.wo"])


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm_last(x), gain), bias)


def encode_batch(token_ids: np.ndarray, magnitudes: np.ndarray, mask: np.ndarray,
                 params: dict[str, Tensor], dims: ModelDims,
                 attention_out: list | None = None) -> Tensor:
    """Run the encoder over a batch and return the request-position hidden
    states, shape (B, D).  Pre-norm residual blocks, masked self-attention,
    no positional encoding."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if token_ids.ndim != 2:
        raise ShapeError("encode_batch expects 2-d (batch, length) arrays")
    if not mask[:, 0].all():
        raise ShapeError("request position must be unmasked in every row")

    token_ids, magnitudes, mask = canonical_order(token_ids, magnitudes, mask)
    x = embed_sequence(token_ids, magnitudes, params, dims)
    for l in range(dims.n_layers):
        h = _layer_norm(x, params[f"enc.{l}.ln1.g"], params[f"enc.{l}.ln1.b"])
        x = ad.add(x, _attention(h, mask, f"enc.{l}.attn", params, dims, attention_out))
        h = _layer_norm(x, params[f"enc.{l}.ln2.g"], params[f"enc.{l}.ln2.b"])
        ff = ad.matmul(ad.gelu(ad.matmul(h, params[f"enc.{l}.ffn.w1"])),
                       params[f"enc.{l}.ffn.w2"])
        x = ad.add(x, ff)
    if dims.n_layers:
        x = _layer_norm(x, params["enc.final_ln.g"], params["enc.final_ln.b"])
    return ad.slice_(x, (slice(None), 0, slice(None)))


def encode(row: TokenizedRow, params: dict[str, Tensor], dims: ModelDims,
           attention_out: list | None = None) -> Tensor:
    """Single-sequence condition vector, shape (D,)."""
    out = encode_batch(row.token_ids[None, :], row.magnitudes[None, :],
                       row.mask[None, :], params, dims, attention_out)
    return ad.reshape(out, (dims.d_model,))


# ---- denoiser -----------------------------------------------------------------


def denoise(x_t: Tensor | np.ndarray, step_ids: np.ndarray, condition: Tensor,
            params: dict[str, Tensor], dims: ModelDims) -> Tensor:
    """Predicted noise for a batch: x_t (B,), step ids (B,), condition (B, D).

    The network is a GELU MLP over [x_t, timestep embedding, condition].
    """
    w0 = params["head.0.w"]
    if not isinstance(x_t, Tensor):
        x_t = Tensor(np.asarray(x_t, dtype=w0.dtype))
    B = x_t.shape[0]
    if condition.ndim != 2 or condition.shape[0] != B:
        raise ShapeError(f"condition shape {condition.shape} does not match batch {B}")
    step_ids = np.asarray(step_ids, dtype=np.int64)
    if np.any((step_ids < 0) | (step_ids >= dims.n_steps)):
        raise ShapeError("step index out of schedule range")

    step_hot = Tensor(_one_hot(step_ids, dims.n_steps, w0.dtype))
    t_emb = ad.matmul(step_hot, params["time.table"])
    h = ad.concat([ad.reshape(x_t, (B, 1)), t_emb, condition], axis=1)
    for k in range(dims.head_depth):
        h = ad.gelu(ad.add(ad.matmul(h, params[f"head.{k}.w"]), params[f"head.{k}.b"]))
    out = ad.add(ad.matmul(h, params["head.out.w"]), params["head.out.b"])
    return ad.reshape(out, (B,))
