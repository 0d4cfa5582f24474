import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskbf import beamformers as bf
from maskbf import linalg
from maskbf import signal as sig
from maskbf.errors import SingularMatrix
from maskbf.masks import assemble_covariance
from maskbf.metrics import sdr
from maskbf.properties import random_instance
from maskbf.scaling import resolve_gamma, scale_mdp


def _stack(x, m_s, m_n):
    return bf.CovarianceStack(assemble_covariance(x), assemble_covariance(x, m_s),
                              assemble_covariance(x, m_n))


@pytest.fixture(scope="module")
def scene():
    target, noise = sig.synth_scene(1, duration=1.0)
    return sig.mix_scenario(target, noise, 1.0, 0, sig.StftConfig(256, 64))


def test_variation_parsing_and_masks():
    v = bf.VariationSpec.parse("isev-ns")
    assert v.name == "ISEV-NS" and v.masks == ("n", "s") and not v.is_gev
    assert bf.VariationSpec.parse("MaxGEV-OS").masks == ("s",)
    assert bf.VariationSpec.parse("MinGEV-NO").masks == ("n",)
    assert len(bf.ALL_VARIATIONS) == 12 and len(bf.NINE_VARIATIONS) == 9
    with pytest.raises(ValueError):
        bf.VariationSpec.parse("SVD-NS")


def test_inv_os_unit_mask_is_unit_vector(rng):
    x, _, _ = random_instance(rng)
    phi_x = assemble_covariance(x)
    cov = bf.CovarianceStack(phi_x, assemble_covariance(x, np.ones(x.shape[:2])))
    for k in range(3):
        w = bf.estimate_filter("INV-OS", cov, k)
        np.testing.assert_allclose(w, np.broadcast_to(np.eye(3)[k], w.shape), atol=1e-12)


@pytest.mark.parametrize("suffix", bf.SUFFIXES)
def test_max_min_gev_collinear(rng, suffix):
    x, m_s, _ = random_instance(rng)
    cov = _stack(x, m_s, rng.uniform(0.05, 0.95, m_s.shape))
    w1 = bf.estimate_filter(f"MaxGEV-{suffix}", cov)
    w2 = bf.estimate_filter(f"MinGEV-{suffix}", cov)
    np.testing.assert_allclose(bf.collinearity(w1, w2), 1.0, atol=1e-8)
    np.testing.assert_allclose(np.linalg.norm(w1, axis=-1), 1.0)


def test_table_formulas(rng):
    x, m_s, m_n = random_instance(rng, freqs=1)
    cov = _stack(x, m_s, m_n)
    px, ps, pn = cov.phi_x[0], cov.phi_s[0], cov.phi_n[0]
    k = 1
    np.testing.assert_allclose(bf.estimate_filter("INV-NS", cov, k)[0],
                               np.linalg.solve(pn, ps[:, k]), rtol=1e-10)
    np.testing.assert_allclose(bf.estimate_filter("INV-OS", cov, k)[0],
                               np.linalg.solve(px, ps[:, k]), rtol=1e-10)
    np.testing.assert_allclose(bf.estimate_filter("INV-NO", cov, k)[0],
                               np.linalg.solve(pn, px[:, k]), rtol=1e-10)
    h = np.linalg.eigh(ps)[1][:, -1]
    isev = bf.estimate_filter("ISEV-OS", cov)[0]
    np.testing.assert_allclose(bf.collinearity(isev, np.linalg.solve(px, h)), 1.0, atol=1e-12)
    lam, vec = np.linalg.eig(np.linalg.solve(pn, ps))
    top = vec[:, np.argmax(lam.real)]
    np.testing.assert_allclose(bf.collinearity(bf.estimate_filter("MaxGEV-NS", cov)[0], top),
                               1.0, atol=1e-10)


def test_missing_covariance_and_singular(rng):
    x, m_s, _ = random_instance(rng)
    with pytest.raises(ValueError):
        bf.estimate_filter("INV-NS", bf.CovarianceStack(assemble_covariance(x),
                                                        assemble_covariance(x, m_s)))
    v = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    rank1 = np.broadcast_to(np.outer(v, v.conj()), (3, 3, 3)).copy()
    with pytest.raises(SingularMatrix):
        bf.estimate_filter("INV-OS", bf.CovarianceStack(rank1, assemble_covariance(x, m_s)))


@pytest.mark.parametrize("spec", [v.name for v in bf.ALL_VARIATIONS])
def test_unused_buffer_is_ignored(rng, spec):
    x, m_s, m_n = random_instance(rng)
    v = bf.VariationSpec.parse(spec)
    base = _stack(x, m_s, m_n)
    other = _stack(x, rng.uniform(0.05, 0.95, m_s.shape), rng.uniform(0.05, 0.95, m_s.shape))
    pert = bf.CovarianceStack(base.phi_x,
                              base.phi_s if "s" in v.masks else other.phi_s,
                              base.phi_n if "n" in v.masks else other.phi_n)
    w1 = bf.estimate_filter(v, base, 0)
    w2 = bf.estimate_filter(v, pert, 0)
    assert np.array_equal(w1, w2)


# expected factor on w when m_s -> a m_s and m_n -> b m_n
SCALE_FACTOR = {"INV-NS": lambda a, b: a / b, "INV-OS": lambda a, b: a,
                "INV-NO": lambda a, b: 1 / b, "ISEV-NS": lambda a, b: 1 / b,
                "ISEV-OS": lambda a, b: 1.0, "ISEV-NO": lambda a, b: 1 / b}


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10000), st.floats(0.1, 10), st.floats(0.1, 10))
def test_mask_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, m_s, m_n = random_instance(rng)
    base, scaled = _stack(x, m_s, m_n), _stack(x, a * m_s, b * m_n)
    for v in bf.ALL_VARIATIONS:
        w1 = bf.estimate_filter(v, base, 0)
        w2 = bf.estimate_filter(v, scaled, 0)
        factor = 1.0 if v.is_gev else SCALE_FACTOR[v.name](a, b)
        np.testing.assert_allclose(w2, factor * w1, rtol=1e-7, atol=1e-9)


def test_ideal_mmse_perfect_reconstruction(rng):
    x = rng.standard_normal((2, 50, 3)) + 1j * rng.standard_normal((2, 50, 3))
    w = bf.ideal_mmse(x, x[..., 1])
    np.testing.assert_allclose(bf.beamform(w, x), x[..., 1], atol=1e-9)
    np.testing.assert_allclose(bf.ideal_mmse(x, np.zeros((2, 50))), 0.0)


def test_ideal_mmse_beats_random_search(rng):
    x = rng.standard_normal((80, 2)) + 1j * rng.standard_normal((80, 2))
    s = 0.7 * x[:, 0] + rng.standard_normal(80) * 0.3
    w = bf.ideal_mmse(x, s)

    def mse(v):
        return np.mean(np.abs(s - x @ np.conj(v)) ** 2)

    best = mse(w)
    for _ in range(200):
        v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        v /= np.linalg.norm(v)
        # closed-form best scale of each random direction keeps the oracle honest
        c = np.vdot(x @ np.conj(v), s) / np.vdot(x @ np.conj(v), x @ np.conj(v))
        assert best <= mse(np.conj(c) * v) + 1e-12
    assert bf.ideal_mmse(x, s, f=0).shape == (2,)


def test_steering_vector_rank_one(rng):
    v = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    h = bf.steering_vector(np.outer(v, v.conj())[None])
    np.testing.assert_allclose(bf.collinearity(h[0], v), 1.0, atol=1e-12)


def test_sibf_mask_examples():
    np.testing.assert_array_equal(bf.sibf_noise_mask(np.ones(5), 3.0, 0.5), 1.0)
    np.testing.assert_array_equal(bf.sibf_noise_mask(np.zeros(3), 2.0, 1e-3), 1e3)
    with pytest.raises(ValueError):
        bf.sibf_noise_mask(-np.ones(2), 2.0, 1e-3)


def test_sibf_beats_mdp_passthrough(scene):
    x = scene.observation.per_freq()
    s_k = scene.target.per_freq()[..., 0]
    r = np.abs(s_k)
    eps = 1e-6 * np.max(r) ** 2
    w = bf.sibf(x, r, beta=2.0, eps=eps)
    y = bf.beamform(w, x)
    z = scale_mdp(y, x[..., 0])[:, None] * y
    cfg, n = scene.config, scene.length
    ref = scene.target_wave.samples[0]
    out = sig.istft_mono(z.T, cfg, n)
    passthrough = sig.istft_mono(x[..., 0].T, cfg, n)
    assert sdr(ref, out).sdr_db > sdr(ref, passthrough).sdr_db


def test_mvdr_distortionless(rng):
    from conftest import random_hpd
    phi = random_hpd(rng, 3, (4,))
    h = rng.standard_normal((4, 3)) + 1j * rng.standard_normal((4, 3))
    w = bf.mvdr(phi, h)
    np.testing.assert_allclose(np.sum(np.conj(w) * h, axis=-1), 1.0, atol=1e-12)
    ps = random_hpd(rng, 3, (4,))
    ws = bf.souden_mvdr(ps, phi, 1)
    expected = np.linalg.solve(phi, ps)[..., :, 1] / np.trace(np.linalg.solve(phi, ps),
                                                              axis1=-2, axis2=-1)[:, None]
    np.testing.assert_allclose(ws, expected)


def test_mldr_unit_variance_is_mpdr(rng):
    x = rng.standard_normal((2, 40, 3)) + 1j * rng.standard_normal((2, 40, 3))
    h = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    w, _ = bf.mldr_alternate(x, h, iterations=1, sigma2=np.ones((2, 40)))
    np.testing.assert_allclose(w, bf.mvdr(assemble_covariance(x), h), rtol=1e-10)


def test_mldr_distortionless_and_monotone(scene):
    x = scene.observation.per_freq()[4:40]
    h = bf.steering_vector(assemble_covariance(scene.target.per_freq()[4:40]))
    for it in range(1, 11):
        w, s2 = bf.mldr_alternate(x, h, iterations=it)
        np.testing.assert_allclose(np.sum(np.conj(w) * h, axis=-1), 1.0, atol=1e-9)
    assert np.all(s2 > 0)
    _, _, hist = bf.mldr_alternate(x, h, iterations=10, return_history=True)
    assert len(hist) == 10
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(hist, hist[1:]))


def test_trivial_masks_reproduce_ideal(scene):
    x = scene.observation.per_freq()[2:]
    s_k = scene.target.per_freq()[2:, :, 0]
    w_ideal = bf.ideal_mmse(x, s_k)
    phi_x = assemble_covariance(x)
    m, valid = bf.trivial_mask_from_target(s_k, x[..., 0])
    assert valid.all()
    w = bf.estimate_filter("INV-OS", bf.CovarianceStack(phi_x, assemble_covariance(x, m)))
    np.testing.assert_allclose(w, w_ideal, rtol=1e-6, atol=1e-9 * np.abs(w_ideal).max())
    m, _ = bf.trivial_mask_signal(x, w_ideal)
    w = bf.estimate_filter("INV-OS", bf.CovarianceStack(phi_x, assemble_covariance(x, m)))
    assert np.min(bf.collinearity(w, w_ideal)) >= 1 - 1e-6
    m, _ = bf.trivial_mask_noise(x, w_ideal)
    w = bf.estimate_filter("INV-NO", bf.CovarianceStack(phi_x, None, assemble_covariance(x, m)))
    assert np.min(bf.collinearity(w, w_ideal)) >= 1 - 1e-6


def test_trivial_mask_zero_reference_frames():
    x_k = np.array([1.0, 0.0, 2.0j])
    s_k = np.array([0.5, 1.0, 1.0])
    m, valid = bf.trivial_mask_from_target(s_k, x_k)
    assert valid.tolist() == [True, False, True]
    assert m[1] == 0
    np.testing.assert_allclose(m[[0, 2]], np.conj(s_k[[0, 2]]) / np.conj(x_k[[0, 2]]))


@pytest.mark.parametrize("prefix", ["MaxGEV", "MinGEV"])
def test_conversion_rules_preserve_filters(prefix):
    rng = np.random.default_rng(77)
    x, m_s, m_n = random_instance(rng)

    def gev(suffix, s=None, n=None):
        cov = bf.CovarianceStack(assemble_covariance(x),
                                 None if s is None else assemble_covariance(x, s),
                                 None if n is None else assemble_covariance(x, n))
        return bf.estimate_filter(f"{prefix}-{suffix}", cov)

    ns, os_, no = gev("NS", m_s, m_n), gev("OS", m_s), gev("NO", n=m_n)
    close = lambda a, b: np.testing.assert_allclose(bf.collinearity(a, b), 1.0, atol=1e-8)
    close(ns, gev("NS", *bf.convert_ns(m_s, m_n, 1.5, 0.3, 0.7, -0.02)))
    close(os_, gev("OS", bf.convert_os(m_s, 2.0, 0.4)))
    close(no, gev("NO", n=bf.convert_no(m_n, 0.5, 1.0)))
    n2 = bf.noise_from_signal(m_s, 1.3, 1.5)
    close(os_, gev("NO", n=n2))
    close(os_, gev("NS", m_s, n2))
    s2 = bf.signal_from_noise(m_n, 0.8, 1.0)
    close(no, gev("OS", s2))
    close(no, gev("NS", s2, m_n))


def test_conversion_errors():
    m = np.full(4, 0.5)
    with pytest.raises(ValueError):
        bf.convert_ns(m, m, 1.0, 2.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        bf.convert_os(m, 1.0, -1.0)
    with pytest.raises(ValueError):
        bf.noise_from_signal(m, 1.0, 0.1)


def test_filter_dump_sidecar(tmp_path, rng):
    w = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
    bank = bf.FilterBank(w, np.full(5, 2.0 - 1j))
    bf.dump_filters(tmp_path / "f", bank, "INV-NS")
    meta = json.loads((tmp_path / "f.json").read_text())
    assert meta["freqs"] == 5 and meta["mics"] == 3
    assert meta["variation"] == "INV-NS" and meta["gamma-included"] is True
    raw = np.fromfile(tmp_path / "f.bin", dtype="<c16").reshape(5, 3)
    x = rng.standard_normal((5, 4, 3)) + 1j * rng.standard_normal((5, 4, 3))
    np.testing.assert_allclose(bf.beamform(raw, x), bank.apply(x))


def test_rtf_scaling_distortionless_anechoic(rng):
    f, t, n = 4, 60, 3
    h = rng.standard_normal((f, n)) + 1j * rng.standard_normal((f, n))
    s0 = rng.standard_normal((f, t)) + 1j * rng.standard_normal((f, t))
    s = h[:, None, :] * s0[..., None]
    noise = 0.5 * (rng.standard_normal((f, t, n)) + 1j * rng.standard_normal((f, t, n)))
    x = s + noise
    phi_s = assemble_covariance(s)
    phi_n = assemble_covariance(noise)
    w = bf.estimate_filter("ISEV-NS", bf.CovarianceStack(assemble_covariance(x), phi_s, phi_n))
    h_est = bf.steering_vector(phi_s)
    gamma = resolve_gamma("rtf", None, x[..., 0], w=w, h=h_est, k=0)
    z = gamma[:, None] * bf.beamform(w, s)
    np.testing.assert_allclose(z, s[..., 0], atol=1e-6 * np.abs(s).max())
