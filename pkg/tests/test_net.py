import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuromamba.errors import MalformedHeaderError, ParameterError, ShapeError
from neuromamba.net import (GateVectors, ModelConfig, MpfiIntermediates, NeuroMamba,
                            ResolutionPrior, apply_gates, bdfe_forward, cfi_forward,
                            compute_lambdas, decoder_block, default_downsample, encoder_block,
                            init_bdfe, init_decoder, init_encoder, init_mpfi, load_weights,
                            model_forward, mpfi_forward, save_weights, scfe_branches, scfe_forward,
                            strip_pool, upsample_nearest)
from neuromamba.ssm import MambaParams
from neuromamba.tensor import sigmoid

TINY = dict(widths=(2, 4), n_state=2, downsample=((1, 2, 2), (2, 2, 2)))


def test_strip_pool_examples():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    s = strip_pool(x)
    np.testing.assert_array_equal(s.y_d, [[1.5, 5.5]])
    np.testing.assert_array_equal(s.y_h, [[2.5, 4.5]])
    np.testing.assert_array_equal(s.y_w, [[3.0, 4.0]])
    c = strip_pool(np.full((2, 3, 4, 5), 7.0))
    for y, n in ((c.y_d, 3), (c.y_h, 4), (c.y_w, 5)):
        np.testing.assert_array_equal(y, np.full((2, n), 7.0))


def test_strip_pool_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    s = strip_pool(x)
    C, D, H, W = x.shape
    for c in range(C):
        for d in range(D):
            ref = sum(x[c, d, h, w] for h in range(H) for w in range(W)) / (H * W)
            assert abs(s.y_d[c, d] - ref) <= 1e-14
        for h in range(H):
            ref = sum(x[c, d, h, w] for d in range(D) for w in range(W)) / (D * W)
            assert abs(s.y_h[c, h] - ref) <= 1e-14
        for w in range(W):
            ref = sum(x[c, d, h, w] for d in range(D) for h in range(H)) / (D * H)
            assert abs(s.y_w[c, w] - ref) <= 1e-14


def test_gate_broadcast_oracle(rng):
    I = rng.normal(size=(2, 3, 4, 5))
    g = GateVectors(rng.uniform(size=(2, 3)), rng.uniform(size=(2, 4)), rng.uniform(size=(2, 5)))
    out = apply_gates(I, g)
    for c, d, h, w in np.ndindex(I.shape):
        ref = I[c, d, h, w] * g.z_d[c, d] * g.z_h[c, h] * g.z_w[c, w]
        assert out[c, d, h, w] == pytest.approx(ref, rel=1e-15)


def test_bdfe_gate_overrides(backend, rng):
    params = init_bdfe(rng, 2)
    x = rng.normal(size=(2, 3, 4, 4))
    rec = MpfiIntermediates()
    ones = GateVectors(np.ones(1), np.ones(1), np.ones(1))
    out = bdfe_forward(x, params, gates=ones, record=rec)
    assert np.array_equal(out, rec.I_prime)
    zero_d = GateVectors(np.zeros(1), np.ones(1), np.ones(1))
    assert not bdfe_forward(x, params, gates=zero_d).any()
    computed = bdfe_forward(x, params, record=rec)
    assert computed.shape == x.shape
    for z in (rec.gates.z_d, rec.gates.z_h, rec.gates.z_w):
        assert ((z > 0) & (z < 1)).all()


@pytest.mark.parametrize("res,expected", [((40, 4), (1.0, 1.0)), ((8, 8), (1.36, 0.64)),
                                          ((29, 6), (181 / 150, 119 / 150))])
def test_lambda_schedule(res, expected):
    lam = compute_lambdas(ResolutionPrior(*res))
    assert abs(lam[0] - expected[0]) <= 1e-9 and abs(lam[1] - expected[1]) <= 1e-9
    assert lam[0] + lam[1] == 2.0


def test_lambda_clipping_and_errors():
    assert compute_lambdas(ResolutionPrior(1000, 1)) == (0.0, 2.0)
    assert compute_lambdas(ResolutionPrior(1, 1, alpha=-1.0, beta=0.0)) == (2.0, 0.0)
    with pytest.raises(ParameterError):
        ResolutionPrior(0, 4)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1e4), st.floats(0.01, 1e4), st.floats(-2, 2), st.floats(-2, 2))
def test_lambdas_sum_to_two(ra, rt, alpha, beta):
    l1, l2 = compute_lambdas(ResolutionPrior(ra, rt, alpha, beta))
    assert 0 <= l2 <= 2 and abs(l1 + l2 - 2.0) <= 1e-15


def test_scfe_zero_lambda_keeps_axial_only(backend, rng):
    mixer = MambaParams.init(2, 2, rng=rng)
    x = rng.normal(size=(2, 3, 3, 4))
    variants = ("transverse-primary", "transverse-cross", "axial-primary", "axial-cross")
    br = scfe_branches(x, mixer, variants)
    out = scfe_forward(x, mixer, (0.0, 2.0), variants)
    np.testing.assert_allclose(out, 2.0 * (br[2] + br[3]), atol=1e-14)


def test_scfe_zero_input(backend, rng):
    mixer = MambaParams.init(2, 2, rng=rng)
    mixer.ssm.D = np.zeros(2)
    assert not scfe_forward(np.zeros((2, 2, 3, 3)), mixer, ResolutionPrior(40, 4)).any()


def test_scfe_linear_in_lambdas(rng):
    mixer = MambaParams.init(2, 2, rng=rng)
    x = rng.normal(size=(2, 2, 3, 3))
    t = scfe_forward(x, mixer, (1.0, 0.0))
    a = scfe_forward(x, mixer, (0.0, 1.0))
    for l1, l2 in [(1.0, 1.0), (1.36, 0.64), (0.2, 1.8), (2.0, 0.0), (0.5, 0.5)]:
        np.testing.assert_allclose(scfe_forward(x, mixer, (l1, l2)), l1 * t + l2 * a, atol=1e-13)


def test_scfe_hilbert_weight_is_one(rng):
    mixer = MambaParams.init(2, 2, rng=rng)
    x = rng.normal(size=(2, 2, 2, 2))
    (br,) = scfe_branches(x, mixer, ("hilbert3d",))
    assert np.array_equal(scfe_forward(x, mixer, (0.3, 1.7), ("hilbert3d",)), br)


def test_cfi_examples():
    assert cfi_forward(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1))).item() == 0.0
    a = np.full((1, 1, 1, 1), 2.0)
    assert cfi_forward(a, np.zeros_like(a)).item() == 1.0
    assert cfi_forward(a, a).item() == pytest.approx(4 * sigmoid(2.0), abs=1e-15)
    with pytest.raises(ShapeError):
        cfi_forward(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)))


def test_cfi_symmetric_and_oracle(rng):
    for _ in range(20):
        a, b = rng.normal(scale=3, size=(2, 2, 2, 3, 3))
        ab = cfi_forward(a, b)
        assert np.array_equal(ab, cfi_forward(b, a))
        for i in np.ndindex(a.shape):
            ref = a[i] / (1 + np.exp(-b[i])) + b[i] / (1 + np.exp(-a[i]))
            assert ab[i] == pytest.approx(ref, rel=1e-13, abs=1e-15)


def test_mpfi_records_intermediates(rng):
    params = init_mpfi(rng, 2, 2)
    x = rng.normal(size=(2, 2, 4, 4))
    rec = MpfiIntermediates()
    out = mpfi_forward(x, params, ResolutionPrior(40, 4), record=rec)
    np.testing.assert_array_equal(out, cfi_forward(rec.X_local, rec.X_global))
    np.testing.assert_array_equal(rec.O_mpfi, out)


def test_encoder_decoder_shapes(rng):
    params = init_encoder(rng, 1, 16, (1, 2, 2), 8)
    x = rng.normal(size=(1, 16, 64, 64))
    down, skip = encoder_block(x, params, (1, 2, 2), ResolutionPrior(40, 4))
    assert down.shape == (16, 16, 32, 32)
    assert skip.shape == (16, 16, 64, 64)
    dec = init_decoder(rng, 16, 16, 8)
    assert decoder_block(down, skip, dec, (1, 2, 2)).shape == (8, 16, 64, 64)
    with pytest.raises(ShapeError, match="height"):
        encoder_block(rng.normal(size=(1, 4, 5, 4)), params, (1, 2, 2), ResolutionPrior(40, 4))


def test_upsample_nearest():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    up = upsample_nearest(x, (2, 1, 2))
    assert up.shape == (1, 2, 2, 4)
    np.testing.assert_array_equal(up[0, 1], [[0, 0, 1, 1], [2, 2, 3, 3]])


def test_default_downsample():
    assert default_downsample(10.0) == ((1, 2, 2), (1, 2, 2), (2, 2, 2))
    assert default_downsample(1.0) == ((2, 2, 2),) * 3
    cfg = ModelConfig(prior=ResolutionPrior(29, 6))
    cfg.check_extents((18, 160, 160))
    with pytest.raises(ShapeError, match="stage 2"):
        cfg.check_extents((17, 160, 160))


def test_model_forward_contract(backend):
    cfg = ModelConfig(**TINY)
    model = NeuroMamba.init(cfg)
    x = np.random.default_rng(3).uniform(size=(1, 4, 8, 8))
    out = model_forward(x, model)
    assert out.shape == (3, 4, 8, 8)
    assert ((out > 0) & (out < 1)).all()
    again = model_forward(x, NeuroMamba.init(ModelConfig(**TINY)))
    assert np.array_equal(out, again)
    other = model_forward(x, NeuroMamba.init(ModelConfig(**TINY, seed=1)))
    assert not np.array_equal(out, other)
    with pytest.raises(ShapeError):
        model_forward(np.zeros((1, 4, 6, 8)), model)


def test_model_backends_agree():
    from neuromamba import _accel
    model = NeuroMamba.init(ModelConfig(**TINY))
    x = np.random.default_rng(4).uniform(size=(1, 2, 4, 4))
    prev = _accel.set_backend("numba")
    a = model_forward(x, model)
    _accel.set_backend("numpy")
    b = model_forward(x, model)
    _accel.set_backend(prev)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(**TINY)
    model = NeuroMamba.init(cfg)
    path = tmp_path / "w.nmwt"
    model.save(path)
    loaded = NeuroMamba.load(path, cfg)
    assert loaded.params.keys() == model.params.keys()
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
    x = np.random.default_rng(0).uniform(size=(1, 2, 4, 4))
    assert np.array_equal(model_forward(x, model), model_forward(x, loaded))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.nmwt"
    bad.write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(MalformedHeaderError):
        load_weights(bad)
    good = tmp_path / "good.nmwt"
    save_weights(good, {"a": np.ones(3)})
    good.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(MalformedHeaderError):
        load_weights(good)
    with pytest.raises(MalformedHeaderError):
        NeuroMamba.load(tmp_path / "good.nmwt", ModelConfig(**TINY))
