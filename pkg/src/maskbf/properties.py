"""Seeded property suites: trivial INV masks, GEV mask conversion rules,
Max/Min GEV equivalence, pipeline gradients and scaling nesting."""

from dataclasses import dataclass, field

import numpy as np

from . import beamformers as bf
from . import optimize as op
from . import signal as sig
from .masks import MaskConstraint, assemble_covariance
from .scaling import scale_ideal, scale_mdp

SUITES = ("appendixB", "appendixC", "equivalence", "gradients", "scaling-nesting")
DESK_STFT = sig.StftConfig(256, 64)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float = float("nan")
    detail: str = ""


@dataclass
class PropertyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def add(self, suite, name, passed, value=float("nan"), detail=""):
        self.results.append(CheckResult(suite, name, bool(passed), float(value), detail))

    def lines(self):
        return [f"{'PASS' if r.passed else 'FAIL'} {r.suite}:{r.name} value={r.value:.3g}"
                f"{' ' + r.detail if r.detail else ''}" for r in self.results]


def _relative(w, ref):
    return float(np.max(np.linalg.norm(w - ref, axis=-1) / np.linalg.norm(ref, axis=-1)))


def _collinear_error(w1, w2):
    return float(np.max(1.0 - bf.collinearity(w1, w2)))


def small_scene(seed, duration=0.5, g=1.0, n_mics=3):
    target, noise = sig.synth_scene(seed, n_mics=n_mics, duration=duration)
    return sig.mix_scenario(target, noise, g, 0, DESK_STFT, name=f"synth{seed}")


def _trim_bins(scenario, lo=2):
    """Drop the lowest bins, where the synthetic target carries almost no energy."""
    x = scenario.observation.per_freq()[lo:]
    s = scenario.target.per_freq()[lo:, :, scenario.ref_mic]
    return x, s


def trivial_masks(report, seeds=range(20), tol=1e-6):
    """INV trivial masks reproduce the ideal MMSE filter."""
    worst = {"INV-OS": 0.0, "INV-NS": 0.0, "INV-NO": 0.0}
    for seed in seeds:
        scenario = small_scene(seed)
        x, s_k = _trim_bins(scenario)
        k = scenario.ref_mic
        w_ideal = bf.ideal_mmse(x, s_k)
        phi_x = assemble_covariance(x)
        m_s, _ = bf.trivial_mask_from_target(s_k, x[..., k])
        w = bf.estimate_filter("INV-OS", bf.CovarianceStack(phi_x, assemble_covariance(x, m_s)), k)
        worst["INV-OS"] = max(worst["INV-OS"], _relative(w, w_ideal))
        rng = np.random.default_rng(seed)
        m_n = rng.uniform(0.2, 1.0, x.shape[:2])
        ratio, _ = bf.trivial_mask_signal(x, w_ideal, k)
        cov = bf.CovarianceStack(phi_x, assemble_covariance(x, ratio * m_n),
                                 assemble_covariance(x, m_n))
        worst["INV-NS"] = max(worst["INV-NS"],
                              _collinear_error(bf.estimate_filter("INV-NS", cov, k), w_ideal))
        m_n, _ = bf.trivial_mask_noise(x, w_ideal, k)
        cov = bf.CovarianceStack(phi_x, None, assemble_covariance(x, m_n))
        worst["INV-NO"] = max(worst["INV-NO"],
                              _collinear_error(bf.estimate_filter("INV-NO", cov, k), w_ideal))
    for name, err in worst.items():
        report.add("appendixB", name, err <= tol, err)
    return report


def random_instance(rng, freqs=3, frames=200, mics=3):
    """Spatially coloured observations with complementary masks ``m_s + m_n = 1``."""
    mix = rng.standard_normal((freqs, mics, mics)) + 1j * rng.standard_normal((freqs, mics, mics))
    src = (rng.standard_normal((freqs, frames, mics))
           + 1j * rng.standard_normal((freqs, frames, mics)))
    env = rng.uniform(0.1, 2.0, (freqs, frames, mics))
    x = np.einsum("fnm,ftm->ftn", mix, src * env)
    m_s = rng.uniform(0.05, 0.95, (freqs, frames))
    return x, m_s, 1.0 - m_s


def _sample_ns(rng, m_s, m_n):
    while True:
        a1, a2 = rng.uniform(0.2, 2.0, 2)
        b1 = rng.uniform(-0.9 * a1 * np.min(m_s / m_n), 1.5)
        b2 = rng.uniform(-0.9 * a2 * np.min(m_n / m_s), 1.5)
        if a1 * a2 > b1 * b2:
            return a1, b1, a2, b2


def _gev(name, x, m_s=None, m_n=None):
    cov = bf.CovarianceStack(assemble_covariance(x),
                             None if m_s is None else assemble_covariance(x, m_s),
                             None if m_n is None else assemble_covariance(x, m_n))
    return bf.estimate_filter(name, cov)


def conversion_rules(report, seeds=range(20), tol=1e-8):
    """Conversion rules keep GEV filters collinear."""
    worst = {}

    def note(rule, w1, w2):
        worst[rule] = max(worst.get(rule, 0.0), _collinear_error(w1, w2))

    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        x, m_s, m_n = random_instance(rng)
        for prefix in ("MaxGEV", "MinGEV"):
            ns = _gev(f"{prefix}-NS", x, m_s, m_n)
            os_ = _gev(f"{prefix}-OS", x, m_s)
            no = _gev(f"{prefix}-NO", x, None, m_n)
            a1, b1, a2, b2 = _sample_ns(rng, m_s, m_n)
            s2, n2 = bf.convert_ns(m_s, m_n, a1, b1, a2, b2)
            note("NS", ns, _gev(f"{prefix}-NS", x, s2, n2))
            a1 = rng.uniform(0.2, 2.0)
            note("OS", os_, _gev(f"{prefix}-OS", x,
                                 bf.convert_os(m_s, a1, rng.uniform(-0.9 * a1 * m_s.min(), 1.5))))
            a2 = rng.uniform(0.2, 2.0)
            note("NO", no, _gev(f"{prefix}-NO", x, None,
                                bf.convert_no(m_n, a2, rng.uniform(-0.9 * a2 * m_n.min(), 1.5))))
            a2 = rng.uniform(0.2, 2.0)
            n_from_s = bf.noise_from_signal(m_s, a2, a2 * m_s.max() + rng.uniform(0.01, 1.0))
            note("NO-from-OS", os_, _gev(f"{prefix}-NO", x, None, n_from_s))
            note("NS-from-OS", os_, _gev(f"{prefix}-NS", x, m_s, n_from_s))
            a1 = rng.uniform(0.2, 2.0)
            s_from_n = bf.signal_from_noise(m_n, a1, a1 * m_n.max() + rng.uniform(0.01, 1.0))
            note("OS-from-NO", no, _gev(f"{prefix}-OS", x, s_from_n))
            note("NS-from-NO", no, _gev(f"{prefix}-NS", x, s_from_n, m_n))
    for rule, err in worst.items():
        report.add("appendixC", rule, err <= tol, err)
    return report


def equivalence(report, seeds=range(50), tol=1e-8, min_gap=1e-3):
    """MaxGEV and MinGEV variations with the same suffix give collinear filters."""
    worst = {s: 0.0 for s in bf.SUFFIXES}
    skipped = 0
    for seed in seeds:
        rng = np.random.default_rng(5000 + seed)
        x, m_s, _ = random_instance(rng, freqs=1)
        m_n = rng.uniform(0.05, 0.95, m_s.shape)
        cov = bf.CovarianceStack(assemble_covariance(x), assemble_covariance(x, m_s),
                                 assemble_covariance(x, m_n))
        for suffix in bf.SUFFIXES:
            num, den = bf._pair(bf.VariationSpec("MaxGEV", suffix), cov.phi_x, cov.phi_s,
                                cov.phi_n)
            lam = np.linalg.eigvals(np.linalg.solve(den, num))[0].real
            lam.sort()
            if min(lam[-1] - lam[-2], lam[1] - lam[0]) < min_gap * abs(lam[-1]):
                skipped += 1
                continue
            w_max = bf.estimate_filter(f"MaxGEV-{suffix}", cov)
            w_min = bf.estimate_filter(f"MinGEV-{suffix}", cov)
            worst[suffix] = max(worst[suffix], _collinear_error(w_max, w_min))
    for suffix, err in worst.items():
        report.add("equivalence", suffix, err <= tol, err, f"skipped={skipped}")
    return report


def gradients(report, seed=3, variations=bf.ALL_VARIATIONS, tol=1e-4):
    """Reverse-mode vs central differences on a cropped desk-scale problem."""
    target, noise = sig.synth_scene(seed)
    scenario = sig.mix_scenario(target, noise, 1.0, 0, DESK_STFT)
    for spec in variations:
        for scaling in ("ideal", "mask-based"):
            rep = op.pipeline_gradient_check(scenario, spec, scaling)
            ok = rep.passed and rep.parameter_count <= 2000
            report.add("gradients", f"{spec}/{scaling}", ok, rep.max_relative_error,
                       f"params={rep.parameter_count} flagged={rep.flagged}")
    return report


def scaling_nesting(report, seed=0, duration=1.0, iterations=300):
    """MSE(ideal) <= MSE(optimized L1-MN mask) <= MSE(MDP) with the ideal MMSE filter fixed."""
    scenario = small_scene(seed, duration=duration)
    x = scenario.observation.per_freq()
    s_k = scenario.target.per_freq()[..., 0]
    _, bank = op.ideal_mmse_sdr(scenario)
    y = bf.beamform(bank.w, x)

    def mse(gamma):
        return float(np.sum(np.abs(s_k - gamma[:, None] * y) ** 2))

    rec = op.optimize_scaling_mask(scenario, bank, MaskConstraint.L1_MN,
                                   op.OptimizationConfig(iterations=iterations))
    e_ideal = mse(scale_ideal(y, s_k))
    e_mask = mse(rec.filters.gamma)
    e_mdp = mse(scale_mdp(y, x[..., 0]))
    slack = 1e-12 * e_mdp
    report.add("scaling-nesting", "ideal<=mask", e_ideal <= e_mask + slack, e_mask - e_ideal)
    report.add("scaling-nesting", "mask<=mdp", e_mask <= e_mdp + slack, e_mdp - e_mask)
    return report


_RUNNERS = {"appendixB": trivial_masks, "appendixC": conversion_rules, "equivalence": equivalence,
            "gradients": gradients, "scaling-nesting": scaling_nesting}


def run_properties(suite="all"):
    """Run one suite name, a list of names, or ``"all"``; returns a PropertyReport."""
    names = SUITES if suite in ("all", None) else ([suite] if isinstance(suite, str) else suite)
    report = PropertyReport()
    for name in names:
        if name not in _RUNNERS:
            raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
        _RUNNERS[name](report)
    return report
