import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechbridge import tensor as T
from speechbridge.adaptor import Adaptor, AdaptorConfig, adapt, adaptor_ablation_grid, output_length
from speechbridge.nn import ConfigurationError
from speechbridge.rng import Rng
from speechbridge.tensor import Tensor


def make(n=3, s=2, k=3, p=0.0, ln=False, dim=4, seed=0):
    return Adaptor(AdaptorConfig(n, s, k, p, ln, dim, dim), Rng(seed))


@pytest.mark.parametrize("t,n,s,k,expected", [(1000, 3, 2, 3, 125), (7, 3, 2, 3, 1), (3000, 3, 2, 3, 375),
                                              (81, 3, 3, 3, 3)])
def test_output_length_examples(t, n, s, k, expected):
    assert output_length(t, AdaptorConfig(n, s, k)) == expected


def test_halving_chain_and_all_dropped():
    cfg = AdaptorConfig(3, 2, 3)
    assert [output_length(7, AdaptorConfig(i, 2, 3)) for i in (1, 2, 3)] == [4, 2, 1]
    assert output_length(123, cfg, [True] * 3) == 123


def test_eval_adapt_gives_1000_to_125():
    out, lengths, dropped = adapt(Tensor(np.ones((1000, 4))), make().eval())
    assert out.shape == (125, 4) and lengths.tolist() == [125] and dropped == [False] * 3


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 600))
def test_eval_length_matches_formula(n, s, extra_k, extra_t):
    k = s + extra_k
    t = 2 ** n + extra_t
    a = Adaptor(AdaptorConfig(n, s, k, 0.0, False, 2, 2), Rng(0)).eval()
    out, lengths, _ = adapt(Tensor(np.ones((t, 2))), a)
    assert out.shape[0] == lengths[0] == output_length(t, a.config)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(8, 300), st.integers(0, 10_000))
def test_train_length_in_drop_achievable_set(n, t, seed):
    a = make(n=n, p=0.5, dim=2).train()
    achievable = {output_length(t, a.config, d) for d in itertools.product([False, True], repeat=n)}
    out, lengths, dropped = adapt(Tensor(np.ones((t, 2))), a, rng=Rng(seed))
    assert out.shape[0] in achievable
    assert out.shape[0] == output_length(t, a.config, dropped)


def test_zero_drop_train_equals_eval():
    a = make(p=0.0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 20, 4)))
    tr = adapt(x, a.train(), rng=Rng(1))[0].data
    ev = adapt(x, a.eval())[0].data
    np.testing.assert_array_equal(tr, ev)


def test_drop_frequency_matches_probability():
    a = make(p=0.3).train()
    rng = Rng(7)
    draws = np.array([a.sample_drops(rng) for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 0.3, atol=0.01)


def test_dropped_layer_gets_zero_gradient():
    a = make(p=0.5).train()
    x = Tensor(np.random.default_rng(0).normal(size=(16, 4)))
    for seed in range(20):
        for p in a.parameters():
            p.grad = None
        out, _, dropped = adapt(x, a, rng=Rng(seed))
        if not any(dropped) or all(dropped):
            continue
        T.backward((out * out).sum())
        for layer, d in zip(a.layers, dropped):
            if d:
                assert layer.weight.grad is None or not layer.weight.grad.any()
            else:
                assert layer.weight.grad is not None and layer.weight.grad.any()
        return
    pytest.fail("no mixed drop pattern drawn")


def test_batched_matches_single_utterance():
    a = make(ln=True).eval()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 30, 4))
    x[1, 17:] = 0.0
    batch, lengths, _ = adapt(Tensor(x), a, lengths=[30, 17])
    single, n, _ = adapt(Tensor(x[1, :17]), a)
    assert lengths.tolist() == [4, n[0]]
    np.testing.assert_allclose(batch.data[1, :n[0]], single.data, atol=1e-12)
    np.testing.assert_array_equal(batch.data[1, n[0]:], 0.0)


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        AdaptorConfig(0)
    with pytest.raises(ConfigurationError):
        AdaptorConfig(3, 3, 2)
    with pytest.raises(ConfigurationError):
        AdaptorConfig(3, layer_drop=1.0)
    with pytest.raises(ValueError, match="at least 1 frame"):
        adapt(Tensor(np.ones((0, 4))), make())


def test_ablation_grid_rows():
    grid = adaptor_ablation_grid()
    assert len(grid) == 8
    rows = {(r.stride, r.layers, r.layer_drop, r.layer_norm): r.reference_bleu for r in grid}
    assert rows[(2, 3, 0.3, False)] == 23.23 == max(rows.values())
    assert rows[(2, 4, 0.3, False)] == 0.14 == min(rows.values())
    for r in grid:
        assert r.config().layer_count == r.layers
