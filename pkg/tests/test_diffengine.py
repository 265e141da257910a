import numpy as np
import pytest
import torch

from bodyfit.diffengine import AdamState, ParamVector, adam_step, gradient, value_and_gradient
from bodyfit.errors import NumericError, ParameterError


def test_param_vector_layout():
    p = ParamVector({"beta": np.arange(3.0), "theta_frame_3": np.ones((2, 6)), "logvars": np.zeros(5)})
    assert len(p) == 20
    assert [(n, o, s) for n, o, s, _ in p.layout()] == [("beta", 0, 3), ("theta_frame_3", 3, 12),
                                                      ("logvars", 15, 5)]
    assert p["theta_frame_3"].shape == (2, 6)
    assert p.segment_of(15) == "logvars"
    with pytest.raises(ParameterError):
        p.with_values(np.zeros(3))


def test_gradient_of_squared_norm(rng):
    x = rng.standard_normal(7)
    p = ParamVector({"x": x})
    np.testing.assert_allclose(gradient(lambda s: (s["x"] ** 2).sum(), p), 2 * x, rtol=1e-15)


def test_gradient_across_segments(rng):
    p = ParamVector({"a": rng.standard_normal(3), "b": rng.standard_normal((2, 2))})
    value, g = value_and_gradient(lambda s: (s["a"].sum() * s["b"]).sum(), p)
    a, b = p["a"], p["b"]
    assert value == pytest.approx(a.sum() * b.sum())
    np.testing.assert_allclose(g[:3], np.full(3, b.sum()))
    np.testing.assert_allclose(g[3:], np.full(4, a.sum()))


def test_non_finite_gradient_names_segment():
    p = ParamVector({"ok": np.ones(2), "bad": np.zeros(1)})
    with pytest.raises(NumericError, match="bad"):
        gradient(lambda s: s["ok"].sum() + torch.sqrt(s["bad"]).sum(), p)
    with pytest.raises(NumericError):
        gradient(lambda s: s["ok"].sum() / 0.0, p)


def test_adam_first_step_is_signed_lr(rng):
    g = rng.standard_normal(50) * 10
    g[np.abs(g) < 0.1] = 1.0
    p = rng.standard_normal(50)
    new, state = adam_step(AdamState.zeros(50, 0.01), g, p)
    assert np.all(np.abs(new - p + 0.01 * np.sign(g)) < 0.01 * 1e-4)
    assert state.t == 1


def test_adam_zero_gradient_keeps_params(rng):
    p = rng.standard_normal(5)
    state = AdamState.zeros(5, 0.1)
    x = p
    for _ in range(100):
        x, state = adam_step(state, np.zeros(5), x)
    assert np.array_equal(x, p)


def test_adam_minimises_quadratic():
    x, state = np.zeros(1), AdamState.zeros(1, 0.1)
    for _ in range(500):
        x, state = adam_step(state, 2 * (x - 3.0), x)
    assert abs(x[0] - 3.0) < 1e-2


def test_adam_matches_recurrence(rng):
    grads = rng.standard_normal((20, 4))
    x, state = np.zeros(4), AdamState.zeros(4, 0.05)
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t, g in enumerate(grads, start=1):
        x, state = adam_step(state, g, x)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(x, ref, rtol=1e-14, atol=1e-15)


def test_adam_independent_of_segment_names(rng):
    g = rng.standard_normal(6)
    a = ParamVector({"x": np.ones(6)})
    b = ParamVector({"first": np.ones(2), "second": np.ones(4)})
    na, _ = adam_step(AdamState.zeros(6, 0.1), g, a)
    nb, _ = adam_step(AdamState.zeros(6, 0.1), g, b)
    assert np.array_equal(na.values, nb.values)
    assert nb.names == ["first", "second"]


def test_adam_rejects_length_mismatch():
    with pytest.raises(ParameterError):
        adam_step(AdamState.zeros(3, 0.1), np.zeros(2), np.zeros(3))
