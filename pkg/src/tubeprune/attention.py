"""Pre-norm transformer blocks with the dual-CLS attention mask.

Sequence layout is [act_CLS, priv_CLS, tubelet_1 .. tubelet_M]. The two CLS
tokens may not attend to each other; everything else is allowed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm

ACT, PRIV = 0, 1


def build_dual_cls_mask(num_tubelets: int) -> np.ndarray:
    """(M+2, M+2) 0/1 mask with zeros only at (act, priv) and (priv, act)."""
    if num_tubelets < 1:
        raise ValueError("dual-CLS mask needs at least one tubelet")
    mask = np.ones((num_tubelets + 2, num_tubelets + 2), dtype=np.int8)
    mask[ACT, PRIV] = 0
    mask[PRIV, ACT] = 0
    return mask


@dataclass
class AttentionRecord:
    """Post-softmax CLS rows, (B, heads, S) each, taken before attention dropout."""

    act: nm.Tensor
    priv: nm.Tensor

    @property
    def num_heads(self) -> int:
        return self.act.shape[-2]


def init_block(rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int = 4, std: float | None = None) -> dict:
    """Weights ~ N(0, 1/fan_in) unless ``std`` is given; biases 0; layernorm gain 1."""
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by {heads} heads")
    hidden = mlp_ratio * dim

    def w(*shape):
        sd = shape[0] ** -0.5 if std is None else std
        return nm.Tensor(rng.normal(0.0, sd, size=shape), requires_grad=True)

    def const(v, n):
        return nm.Tensor(np.full(n, v, dtype=np.float64), requires_grad=True)

    return {
        "ln1_g": const(1.0, dim), "ln1_b": const(0.0, dim),
        "qkv_w": w(dim, 3 * dim), "qkv_b": const(0.0, 3 * dim),
        "proj_w": w(dim, dim), "proj_b": const(0.0, dim),
        "ln2_g": const(1.0, dim), "ln2_b": const(0.0, dim),
        "fc1_w": w(dim, hidden), "fc1_b": const(0.0, hidden),
        "fc2_w": w(hidden, dim), "fc2_b": const(0.0, dim),
    }


def _split_heads(x: nm.Tensor, heads: int) -> nm.Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def masked_mhsa(x, params: dict, mask: np.ndarray, heads: int, attn_drop: float = 0.0,
                rng: np.random.Generator | None = None, train: bool = False):
    """Scaled dot-product attention over (B, S, D) with a (S, S) mask.

    Returns the projected output and the CLS attention record.
    """
    x = nm.as_tensor(x)
    b, s, d = x.shape
    if mask.shape != (s, s):
        raise nm.ShapeError(f"mask {mask.shape} does not match sequence length {s}")
    if params["qkv_w"].shape != (d, 3 * d):
        raise nm.ShapeError(f"qkv weight {params['qkv_w'].shape} for width {d}")
    qkv = nm.linear(x, params["qkv_w"], params["qkv_b"])
    q = _split_heads(qkv[:, :, :d], heads)
    k = _split_heads(qkv[:, :, d:2 * d], heads)
    v = _split_heads(qkv[:, :, 2 * d:], heads)
    logits = nm.scale(nm.matmul(q, k.transpose(0, 1, 3, 2)), (d // heads) ** -0.5)
    attn = nm.masked_softmax(logits, mask)
    record = AttentionRecord(act=attn[:, :, ACT, :], priv=attn[:, :, PRIV, :])
    attn = nm.dropout(attn, attn_drop, rng, train)
    out = nm.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return nm.linear(out, params["proj_w"], params["proj_b"]), record


def transformer_block(x, params: dict, mask: np.ndarray, heads: int, train: bool = False,
                      rng: np.random.Generator | None = None, drop: float = 0.2, attn_drop: float = 0.1):
    """x + MHSA(LN(x)), then + MLP(LN(.)); dropout only in train mode."""
    h, record = masked_mhsa(nm.layernorm(x, params["ln1_g"], params["ln1_b"]), params, mask, heads,
                            attn_drop=attn_drop, rng=rng, train=train)
    x = nm.add(x, nm.dropout(h, drop, rng, train))
    h = nm.linear(nm.layernorm(x, params["ln2_g"], params["ln2_b"]), params["fc1_w"], params["fc1_b"])
    h = nm.dropout(nm.gelu(h), drop, rng, train)
    h = nm.linear(h, params["fc2_w"], params["fc2_b"])
    return nm.add(x, nm.dropout(h, drop, rng, train)), record
