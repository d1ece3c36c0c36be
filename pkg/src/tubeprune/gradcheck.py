"""Central finite-difference checks for every differentiable op and a tiny full model.

Ops are looked up on the ``numeric`` module at call time, so a test can swap in a
broken op and watch the suite fail.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import anonymizer as an
from . import numeric as nm

OP_TOL = 1e-5
MODEL_TOL = 1e-3


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom < 1e-12 else float(np.linalg.norm(a - b) / denom)


def numerical_grad(f, arrays: list[np.ndarray], h: float = 1e-5, entries: dict | None = None) -> list[np.ndarray]:
    """d f / d arrays[i] by central differences; ``entries`` limits which flat indices are probed."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        idx = range(a.size) if entries is None or i not in entries else entries[i]
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            up = f(*arrays)
            flat[j] = old - h
            down = f(*arrays)
            flat[j] = old
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_fn(fn, arrays: list[np.ndarray], seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of sum(fn(...) * R)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(*xs):
        nonlocal probe
        out = fn(*[nm.Tensor(x) for x in xs])
        if probe is None:
            probe = nm.make_rng(seed, 99).normal(size=out.shape)
        return float((out.data * probe).sum())

    scalar(*arrays)
    ts = [nm.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward(probe)
    numeric = numerical_grad(scalar, arrays, h)
    return max(rel_err(t.grad, n) for t, n in zip(ts, numeric))


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol


def _op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every differentiable op."""
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    mask = rng.random((4, 6)) < 0.6
    mask[:, 0] = True
    gelu_in = r(3, 5)
    gelu_in[np.abs(gelu_in) < 1e-3] = 0.5
    labels = rng.integers(0, 5, size=4)
    targets = (rng.random((4, 3)) < 0.5).astype(float)
    idx = np.array([[2, 0, 3], [1, 1, 4]])
    drop_seed = int(rng.integers(1 << 30))
    return [
        ("matmul", lambda a, b: nm.matmul(a, b), [r(3, 4), r(4, 2)]),
        ("matmul_batched", lambda a, b: nm.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        ("masked_softmax", lambda z: nm.masked_softmax(z, mask), [r(4, 6)]),
        ("cross_entropy", lambda z: nm.cross_entropy(z, labels), [r(4, 5)]),
        ("bce_with_logits", lambda z: nm.bce_with_logits(z, targets), [r(4, 3)]),
        ("layernorm", lambda x, g, b: nm.layernorm(x, g, b), [r(3, 6), r(6), r(6)]),
        ("gelu", lambda x: nm.gelu(x), [gelu_in]),
        ("linear", lambda x, w, b: nm.linear(x, w, b), [r(2, 3, 4), r(4, 5), r(5)]),
        ("add", lambda a, b: nm.add(a, b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: nm.sub(a, b), [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: nm.mul(a, b), [r(3, 4), r(1, 4)]),
        ("div", lambda a, b: nm.div(a, b), [r(3, 4), 2.0 + rng.random((3, 4))]),
        ("scale", lambda a: nm.scale(a, -1.7), [r(3, 4)]),
        ("concat_rows", lambda a, b: nm.concat_rows([a, b]), [r(2, 3, 4), r(2, 1, 4)]),
        ("gather_rows", lambda x: nm.gather_rows(x, idx), [r(2, 5, 3)]),
        ("weighted_row_sum", lambda w, x: nm.weighted_row_sum(w, x), [r(2, 4), r(2, 4, 3)]),
        ("mean_over_axis", lambda x: nm.mean_over_axis(x, axis=1), [r(3, 4, 2)]),
        ("sum", lambda x: nm.sum_(x, axis=-1, keepdims=True), [r(3, 4)]),
        ("reshape_transpose", lambda x: nm.transpose(nm.reshape(x, (2, 3, 4)), (2, 0, 1)), [r(6, 4)]),
        ("getitem", lambda x: x[:, 1:3, 0], [r(2, 4, 3)]),
        ("dropout", lambda x: nm.dropout(x, 0.3, nm.make_rng(drop_seed), True), [r(4, 5)]),
    ]


def op_suite(seed: int = 0) -> list[CheckResult]:
    rng = nm.make_rng(seed, 7)
    return [CheckResult(name, check_fn(fn, inputs, seed=seed), OP_TOL) for name, fn, inputs in _op_cases(rng)]


def tiny_model_config() -> an.ModelConfig:
    """D=16, M=8 tubelets, 2 layers, one prune after layer 1."""
    return an.ModelConfig(frames=2, channels=1, height=8, width=16, dt=2, dh=4, dw=4, dim=16, heads=2,
                          depth=2, num_actions=3, num_attrs=2, prune_layers=(1,), keep_rate=0.75,
                          drop=0.0, attn_drop=0.0)


def selection_margin(videos, params, cfg: an.ModelConfig) -> float:
    """Smallest gap between the k-th and (k+1)-th score over all prune layers and samples."""
    with nm.no_grad():
        _, traces, _, _ = an.encode(videos, params, cfg)
    gaps = []
    for tr in traces:
        k = tr.kept_origin.shape[1]
        if tr.dropped_origin.shape[1] == 0:
            continue
        s = -np.sort(-tr.scores, axis=1)
        gaps.append((s[:, k - 1] - s[:, k]).min())
    return float(min(gaps)) if gaps else float("inf")


def model_check(seed: int = 0, min_margin: float = 1e-3, per_tensor: int = 12) -> CheckResult:
    """Finite-difference check of L_T + L_B through a tiny pruning model at a point with selection margin."""
    cfg = tiny_model_config()
    for attempt in range(100):
        rng = nm.make_rng(seed, 8, attempt)
        params = an.init_params(cfg, rng, std=0.5)
        videos = rng.random((2, *cfg.video_shape))
        if selection_margin(videos, params, cfg) > min_margin:
            break
    else:
        raise RuntimeError("no sample point with the required selection margin")
    y_t = rng.integers(0, cfg.num_actions, size=2)
    y_b = (rng.random((2, cfg.num_attrs)) < 0.5).astype(float)
    names = sorted(params)

    def loss_of(tensors):
        p = dict(zip(names, tensors))
        out = an.forward(videos, p, cfg, train=False)
        return nm.add(nm.cross_entropy(out.action_logits, y_t), nm.bce_with_logits(out.privacy_logits, y_b))

    arrays = [params[n].data.copy() for n in names]
    ts = [nm.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss_of(ts).backward()
    entries = {i: rng.choice(a.size, size=min(per_tensor, a.size), replace=False) for i, a in enumerate(arrays)}
    numeric = numerical_grad(lambda *xs: float(loss_of([nm.Tensor(x) for x in xs]).data), arrays, entries=entries)
    analytic = np.concatenate([t.grad.reshape(-1)[entries[i]] for i, t in enumerate(ts)])
    approx = np.concatenate([g.reshape(-1)[entries[i]] for i, g in enumerate(numeric)])
    return CheckResult("tiny_model", rel_err(analytic, approx), MODEL_TOL)


def full_suite(seed: int = 0) -> list[CheckResult]:
    return op_suite(seed) + [model_check(seed)]
