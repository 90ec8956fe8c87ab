"""Finite-difference checks for every differentiable layer type."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .nn import feed_forward, label_smoothed_ce, multi_head_attention
from .rng import Rng
from .tensor import Tensor

TOLERANCE = 1e-4


def _t(rng: Rng, *shape, scale: float = 0.5) -> Tensor:
    return Tensor(rng.normal(shape, scale=scale))


def _readout(rng: Rng, shape) -> Callable[[Tensor], Tensor]:
    # fixed random projection keeps the scalar loss sensitive to every output
    r = rng.normal(shape)
    return lambda y: (y * r).sum()


def check_conv1d(rng: Rng) -> float:
    x, w, b = _t(rng, 2, 3, 11), _t(rng, 4, 3, 3), _t(rng, 4)
    out = _readout(rng, (2, 4, T.conv_output_length(11, 3, 2, 1)))
    return T.grad_check(lambda x, w, b: out(T.conv1d(x, w, b, stride=2, padding=1)), [x, w, b])


def check_attention(rng: Rng) -> float:
    d, heads = 8, 2
    q, kv = _t(rng, 2, 3, d), _t(rng, 2, 4, d)
    ws = [_t(rng, d, d) for _ in range(4)]
    bq, bv, bo = _t(rng, d), _t(rng, d), _t(rng, d)
    # the key bias is left out: softmax shift invariance makes its gradient exactly zero
    bk = Tensor(np.zeros(d))
    pad = np.array([[False] * 4, [False, False, False, True]])
    out = _readout(rng, (2, 3, d))

    def fn(q, kv, wq, wk, wv, wo, bq, bv, bo):
        return out(multi_head_attention(q, kv, kv, heads, False, wq, wk, wv, wo, bq, bk, bv, bo, pad))

    def causal(q, wq, wk, wv, wo):
        return out(multi_head_attention(q, q, q, heads, True, wq, wk, wv, wo))

    cross = T.grad_check(fn, [q, kv, *ws, bq, bv, bo])
    self_ = T.grad_check(causal, [_t(rng, 2, 3, d), *[_t(rng, d, d) for _ in range(4)]])
    return max(cross, self_)


def check_layer_norm(rng: Rng) -> float:
    x, g, s = _t(rng, 3, 5, 6, scale=1.0), _t(rng, 6), _t(rng, 6)
    out = _readout(rng, (3, 5, 6))
    return T.grad_check(lambda x, g, s: out(T.layer_norm(x, g, s)), [x, g, s])


def check_embedding(rng: Rng) -> float:
    w = _t(rng, 7, 4)
    ids = np.array([[0, 3, 3], [6, 1, 3]])
    out = _readout(rng, (2, 3, 4))
    return T.grad_check(lambda w: out(T.tanh(T.embedding(w, ids))), [w])


def check_feed_forward(rng: Rng) -> float:
    x, w1, b1, w2, b2 = _t(rng, 2, 3, 4), _t(rng, 4, 8), _t(rng, 8), _t(rng, 8, 4), _t(rng, 4)
    out = _readout(rng, (2, 3, 4))
    return T.grad_check(lambda *a: out(feed_forward(*a)), [x, w1, b1, w2, b2])


def check_label_smoothed_ce(rng: Rng) -> float:
    logits = _t(rng, 3, 4, 9, scale=1.5)
    targets = np.array([[1, 4, 8, 0], [2, 2, 0, 0], [5, 6, 7, 3]])
    return T.grad_check(lambda z: label_smoothed_ce(z, targets, 0.3, ignore_index=0), [logits])


LAYER_CHECKS: dict[str, Callable[[Rng], float]] = {
    "conv1d": check_conv1d,
    "attention": check_attention,
    "layer_norm": check_layer_norm,
    "embedding": check_embedding,
    "feed_forward": check_feed_forward,
    "label_smoothed_ce": check_label_smoothed_ce,
}


def run_grad_checks(seed: int = 0) -> dict[str, float]:
    """Maximum relative error per layer type."""
    root = Rng(seed)
    return {name: fn(root.child(name)) for name, fn in LAYER_CHECKS.items()}
