import numpy as np
import pytest

from pockformer import kernels


needs_numba = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")


@pytest.fixture
def restore_backend():
    before = kernels.get_backend()
    yield
    kernels.set_backend(before)


def run_both(fn, *args):
    kernels.set_backend("numpy")
    a = fn(*args)
    kernels.set_backend("numba")
    b = fn(*args)
    return a, b


@needs_numba
class TestBackendParity:
    def test_layer_norm(self, restore_backend):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 16))
        g, b = rng.normal(size=16), rng.normal(size=16)
        (y1, m1, r1), (y2, m2, r2) = run_both(kernels.layer_norm_fwd, x, g, b)
        assert np.abs(y1 - y2).max() < 1e-12
        dy = rng.normal(size=x.shape)
        kernels.set_backend("numpy")
        dx1, dg1, db1 = kernels.layer_norm_bwd(dy, x, g, m1, r1)
        kernels.set_backend("numba")
        dx2, dg2, db2 = kernels.layer_norm_bwd(dy, x, g, m2, r2)
        for u, v in ((dx1, dx2), (dg1, dg2), (db1, db2)):
            assert np.abs(u - v).max() < 1e-11

    def test_gelu(self, restore_backend):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(7, 33)) * 3
        dy = rng.normal(size=x.shape)
        a, b = run_both(kernels.gelu_fwd, x)
        assert np.abs(a - b).max() < 1e-13
        da, db_ = run_both(kernels.gelu_bwd, dy, x)
        assert np.abs(da - db_).max() < 1e-13

    def test_causal_softmax(self, restore_backend):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=(6, 9, 9)) * 4
        a, b = run_both(kernels.causal_softmax, scores)
        assert np.abs(a - b).max() < 1e-13
        assert np.all(np.triu(a, k=1) == 0.0)
        assert np.abs(a.sum(axis=-1) - 1.0).max() < 1e-12
        dp = rng.normal(size=scores.shape)
        da, db_ = run_both(kernels.causal_softmax_bwd, dp, a)
        assert np.abs(da - db_).max() < 1e-13

    def test_adamw(self, restore_backend):
        rng = np.random.default_rng(3)

        def run(backend):
            kernels.set_backend(backend)
            p = rng_state["p"].copy()
            m = np.zeros_like(p)
            v = np.zeros_like(p)
            for t in (1, 2, 3):
                kernels.adamw_update(p, rng_state["g"], m, v, t, 1e-3,
                                     0.9, 0.999, 1e-8, 0.1)
            return p

        rng_state = {"p": rng.normal(size=(5, 8)), "g": rng.normal(size=(5, 8))}
        assert np.abs(run("numpy") - run("numba")).max() < 1e-14

    def test_full_model_agrees_across_backends(self, restore_backend):
        from pockformer.model import ModelConfig, forward, init_model

        cfg = ModelConfig(2, 2, 16, 64, 11)
        m = init_model(cfg, 0)
        rng = np.random.default_rng(4)
        tokens = rng.integers(0, 11, size=(2, 10))
        numbers = rng.normal(size=(2, 10))
        kernels.set_backend("numpy")
        a = forward(m, tokens, numbers)
        kernels.set_backend("numba")
        b = forward(m, tokens, numbers)
        assert np.abs(a.logits - b.logits).max() < 1e-11
        assert np.abs(a.numbers - b.numbers).max() < 1e-11


def test_env_resolution():
    assert kernels._resolve_backend("numpy") == "numpy"
    assert kernels._resolve_backend("auto") in ("numpy", "numba")
    with pytest.raises(ValueError):
        kernels._resolve_backend("cuda")


def test_set_backend_roundtrip(restore_backend):
    assert kernels.set_backend("numpy") == "numpy"
    assert kernels.get_backend() == "numpy"
