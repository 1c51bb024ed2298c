import json
import struct
from types import SimpleNamespace

import numpy as np
import pytest

from deepclean import container
from deepclean.nn import ShapeError
from deepclean.vae import (
    LatentGaussian,
    NumericalError,
    TrainHyper,
    TrainingError,
    build_model,
    decode,
    elbo_loss,
    encode,
    generate,
    kl_divergence,
    load_model,
    reparameterize,
    save_model,
    train,
    vae_grad_check,
    validation_loss,
)


def test_parameter_counts_ld5():
    m = build_model(5)
    assert m.arch.encoder_parameters == 21_802
    assert m.arch.decoder_parameters == 15_361
    assert sum(p.size for p in m.parameters().values()) == m.arch.parameter_count


@pytest.mark.parametrize("ld", [1, 2, 5, 20, 100])
def test_parameter_counts_follow_layer_table(ld):
    m = build_model(ld)
    conv = (5 * 1 * 16 + 16) + (5 * 16 * 32 + 32) + (3 * 32 * 32 + 32)
    assert m.arch.encoder_parameters == conv + 2 * (1600 * ld + ld)
    dec = (ld * 1600 + 1600) + (3 * 32 * 32 + 32) + (5 * 32 * 16 + 16) + (5 * 16 + 1)
    assert m.arch.decoder_parameters == dec


def test_parameter_counts_within_band_at_ld5():
    m = build_model(5)
    assert 15_000 <= m.arch.encoder_parameters <= 25_000
    assert 15_000 <= m.arch.decoder_parameters <= 25_000


def test_same_seed_same_init_and_zero_biases():
    a, b = build_model(3, seed=4), build_model(3, seed=4)
    for k, v in a.parameters().items():
        assert np.array_equal(v, b.parameters()[k])
        if k.endswith(".b"):
            assert not v.any()
    c = build_model(3, seed=5)
    assert not np.array_equal(a.parameters()["encoder.0.w"], c.parameters()["encoder.0.w"])


def test_latent_zero_rejected():
    with pytest.raises(ValueError):
        build_model(0)


def test_short_input_shape_error():
    with pytest.raises(ShapeError):
        build_model(2, input_length=10)


def test_encode_shapes_and_determinism():
    m = build_model(4, seed=1)
    x = np.random.default_rng(0).normal(size=1250)
    g1, g2 = encode(m, x), encode(m, x)
    assert g1.mu.shape == g1.log_var.shape == (4,)
    assert np.array_equal(g1.mu, g2.mu) and np.array_equal(g1.log_var, g2.log_var)
    with pytest.raises(ShapeError):
        encode(m, np.zeros(1000))


def test_encode_local_continuity():
    m = build_model(5, seed=2)
    x = np.random.default_rng(1).normal(size=1250)
    mu = encode(m, x).mu
    x2 = x.copy()
    x2[600] += 1e-6
    assert np.max(np.abs(encode(m, x2).mu - mu)) < 1e-3


def test_reparameterize_limits():
    g = LatentGaussian(np.array([0.3, -1.2]), np.array([0.5, -0.1]))
    assert np.array_equal(reparameterize(g, eps=np.zeros(2)), g.mu)
    tiny = LatentGaussian(g.mu, np.full(2, -50.0))
    assert np.allclose(reparameterize(tiny, seed=3), g.mu, atol=1e-10, rtol=0)


def test_reparameterize_monte_carlo_moments():
    mu = np.array([0.5, -1.0, 2.0])
    lv = np.array([0.0, -1.0, 0.7])
    g = LatentGaussian(np.broadcast_to(mu, (100_000, 3)), np.broadcast_to(lv, (100_000, 3)))
    z = reparameterize(g, seed=11)
    assert np.allclose(z.mean(axis=0), mu, atol=0.02 * np.exp(lv / 2) * 3)
    assert np.allclose(z.var(axis=0), np.exp(lv), rtol=0.02)


def test_decode_shape_and_determinism():
    m = build_model(3, seed=0)
    z = np.array([0.1, -0.2, 0.3])
    assert decode(m, z).shape == (1250,)
    assert np.array_equal(decode(m, z), decode(m, z))
    with pytest.raises(ShapeError):
        decode(m, np.zeros(4))


def test_kl_examples():
    assert kl_divergence(np.zeros(4), np.zeros(4)) == 0.0
    assert kl_divergence(np.array([1.0]), np.array([0.0])) == 0.5
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert kl_divergence(rng.normal(size=3), rng.normal(size=3)) >= 0


def test_elbo_terms_consistent():
    m = build_model(2, seed=0)
    x = np.random.default_rng(2).normal(size=1250)
    eps = np.array([0.3, -0.7])
    loss, recon, kl = elbo_loss(m, x, eps=eps)
    g = encode(m, x)
    xr = decode(m, reparameterize(g, eps=eps))
    assert recon == pytest.approx(0.5 * np.sum((x - xr) ** 2), rel=1e-12)
    assert kl == pytest.approx(kl_divergence(g.mu, g.log_var), rel=1e-12)
    assert loss == pytest.approx(recon + kl, rel=1e-15)
    assert elbo_loss(m, x, seed=9) == elbo_loss(m, x, seed=9)


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_elbo_non_finite_raises():
    m = build_model(2, seed=0)
    x = np.zeros(1250)
    x[0] = np.inf
    with pytest.raises(NumericalError):
        elbo_loss(m, x, eps=np.zeros(2))


def test_small_model_elbo_grad_check():
    m = build_model(2, input_length=60, seed=3)
    x = np.random.default_rng(4).normal(size=(2, 60))
    rep = vae_grad_check(m, x, eps=np.array([[0.4, -1.1], [0.2, 0.9]]))
    assert rep.checked > 0.9 * (rep.checked + rep.skipped)
    assert rep.passed, (rep.max_rel_error, rep.worst)


def _toy_bundle(n=48, length=250, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(length) / 125.0
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
    x = np.sin(2 * np.pi * 1.25 * t + phase) + 0.05 * rng.normal(size=(n, length))
    return SimpleNamespace(train=x[:40], validation=x[40:], standardizer=(80.0, 12.0))


def test_train_selects_minimum_validation_restart():
    b = _toy_bundle()
    m = train(b, 2, TrainHyper(epochs=8, batch_size=8), seeds=(0, 1, 2, 3, 4))
    meta = m.training_meta
    losses = [r["val_loss"] for r in meta["restarts"]]
    assert len(losses) == 5
    assert meta["val_loss"] == min(losses)
    assert validation_loss(m, b.validation) == pytest.approx(meta["val_loss"], rel=1e-12)
    assert all(r["val_loss"] < r["initial_val_loss"] for r in meta["restarts"])
    assert m.standardizer == (80.0, 12.0)


def test_train_deterministic():
    b = _toy_bundle()
    h = TrainHyper(epochs=2, batch_size=16)
    a = train(b, 2, h, seeds=(7, 8))
    c = train(b, 2, h, seeds=(7, 8))
    for k, v in a.parameters().items():
        assert np.array_equal(v, c.parameters()[k])


def test_train_all_diverged():
    b = _toy_bundle()
    b.train = b.train.copy()
    b.train[0, 0] = np.nan
    with pytest.raises(TrainingError):
        train(b, 2, TrainHyper(epochs=1, batch_size=16), seeds=(0, 1))


def test_generate_shapes_and_seed():
    m = build_model(3, seed=0)
    g = generate(m, 4, seed=2)
    assert g.shape == (4, 1250)
    assert np.array_equal(g, generate(m, 4, seed=2))


def test_save_load_round_trip(tmp_path):
    m = build_model(5, seed=6)
    m.standardizer = (90.0, 15.0)
    m.thresholds = {"sample_threshold": 0.2, "window_threshold": 0.5}
    m.training_meta = {"seed": 6}
    p = tmp_path / "m.dc"
    save_model(m, p)
    r = load_model(p)
    for k, v in m.parameters().items():
        assert v.tobytes() == r.parameters()[k].tobytes()
    assert r.standardizer == (90.0, 15.0)
    assert r.thresholds == m.thresholds
    assert r.training_meta == {"seed": 6}


def test_truncated_model_checksum_error(tmp_path):
    p = tmp_path / "m.dc"
    save_model(build_model(2), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(container.ChecksumError):
        load_model(p)


def test_edited_shape_is_rejected(tmp_path):
    p = tmp_path / "m.dc"
    save_model(build_model(2), p)
    data = p.read_bytes()
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    for entry in header["tensors"]:
        if entry["name"] == "encoder.0.w":
            entry["shape"] = entry["shape"][::-1]
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    p.write_bytes(data[:8] + struct.pack("<I", len(h)) + h + data[12 + hlen:])
    with pytest.raises(container.ShapeConsistencyError):
        load_model(p)
