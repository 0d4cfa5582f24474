"""The twelve mask-based filter-estimation variations and related oracles.

A variation name is ``<prefix>-<suffix>``. The prefix names the operator
(``MaxGEV``/``MinGEV`` generalized eigenvector, ``INV`` matrix inversion,
``ISEV`` inversion applied to a principal eigenvector) and the suffix names
the covariance pair: ``NS`` (noise, signal), ``OS`` (observation, signal),
``NO`` (noise, observation).

Filters are computed per frequency from stacks of shape (F, N, N). GEV
filters are unit-norm with canonical phase; INV/ISEV filters keep their
natural scale. Any scale is resolved later by :mod:`maskbf.scaling`.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dumps, linalg
from .errors import SingularMatrix

PREFIXES = ("MaxGEV", "MinGEV", "INV", "ISEV")
SUFFIXES = ("NS", "OS", "NO")
MASKS_USED = {"NS": ("n", "s"), "OS": ("s",), "NO": ("n",)}
DENOM_FLOOR = 1e-12
TINY_REFERENCE = 1e-9


@dataclass(frozen=True)
class VariationSpec:
    prefix: str
    suffix: str

    def __post_init__(self):
        if self.prefix not in PREFIXES or self.suffix not in SUFFIXES:
            raise ValueError(f"unknown variation {self.prefix}-{self.suffix}")

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        prefix, _, suffix = str(name).partition("-")
        lookup = {p.lower(): p for p in PREFIXES}
        return cls(lookup.get(prefix.lower(), prefix), suffix.upper())

    @property
    def name(self):
        return f"{self.prefix}-{self.suffix}"

    @property
    def masks(self):
        """Mask roles consumed by this variation (``"s"`` and/or ``"n"``)."""
        return MASKS_USED[self.suffix]

    @property
    def is_gev(self):
        return self.prefix in ("MaxGEV", "MinGEV")

    def __str__(self):
        return self.name


ALL_VARIATIONS = tuple(VariationSpec(p, s) for p in PREFIXES for s in SUFFIXES)
NINE_VARIATIONS = tuple(v for v in ALL_VARIATIONS if v.prefix != "MaxGEV")


@dataclass
class CovarianceStack:
    """Per-frequency observation / target / interference covariances (F, N, N)."""

    phi_x: np.ndarray
    phi_s: np.ndarray = None
    phi_n: np.ndarray = None


@dataclass
class FilterBank:
    """Filters ``w`` (F, N) and scaling factors ``gamma`` (F,)."""

    w: np.ndarray
    gamma: np.ndarray = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=complex)
        if self.gamma is None:
            self.gamma = np.ones(self.w.shape[0], dtype=complex)
        self.gamma = np.asarray(self.gamma, dtype=complex)

    def apply(self, x):
        """``z(t) = gamma * w^H x(t)`` for an (F, T, N) observation; returns (F, T)."""
        return self.gamma[:, None] * beamform(self.w, x)


def beamform(w, x):
    """``y(t) = w^H x(t)`` per frequency; ``w`` (F, N), ``x`` (F, T, N)."""
    return np.einsum("fn,ftn->ft", np.conj(w), x)


def _pair(spec, phi_x, phi_s, phi_n):
    """(signal-like, noise-like) covariance pair selected by the suffix."""
    if spec.suffix == "NS":
        return phi_s, phi_n
    if spec.suffix == "OS":
        return phi_s, phi_x
    return phi_x, phi_n


def filter_node(spec, phi_x, phi_s, phi_n, k):
    """Graph version of :func:`estimate_filter`; arguments may be nodes or arrays."""
    spec = VariationSpec.parse(spec)
    num, den = _pair(spec, phi_x, phi_s, phi_n)
    if spec.prefix == "MaxGEV":
        return ad.normalize_canonical(ad.eigvec(num, den, "max"))
    if spec.prefix == "MinGEV":
        return ad.normalize_canonical(ad.eigvec(den, num, "min"))
    if spec.prefix == "INV":
        return ad.solve(den, ad.as_node(num)[..., :, k])
    h = ad.normalize_canonical(ad.eigvec(num))
    return ad.solve(den, h)


def estimate_filter(spec, cov, k=0):
    """Filters (F, N) of variation ``spec`` from a :class:`CovarianceStack`.

    Raises SingularMatrix for ill-conditioned inverse-bearing matrices and
    NotPositiveDefinite for a non-PD GEV denominator.
    """
    spec = VariationSpec.parse(spec)
    for role in spec.masks:
        if getattr(cov, f"phi_{role}") is None:
            raise ValueError(f"{spec.name} needs phi_{role}")
    if spec.prefix in ("INV", "ISEV"):
        _, den = _pair(spec, cov.phi_x, cov.phi_s, cov.phi_n)
        cond = np.linalg.cond(den)
        if np.any(~np.isfinite(cond)) or np.any(cond > linalg.COND_LIMIT):
            raise SingularMatrix(f"{spec.name}: matrix to invert is ill-conditioned")
    return filter_node(spec, cov.phi_x, cov.phi_s, cov.phi_n, k).value


def ideal_mmse(x, s_ref, f=None):
    """MSE-optimal filter ``Phi_x^-1 <x(t) conj(s_k(t))>`` given the true target.

    ``x`` is (F, T, N) (or a Spectrogram) and ``s_ref`` the target at the
    reference mic, (F, T). With ``f`` given, ``x`` may be (T, N) and ``s_ref`` (T,).
    """
    x = x.per_freq() if hasattr(x, "per_freq") else np.asarray(x)
    s_ref = np.asarray(s_ref)
    single = x.ndim == 2
    if single:
        x, s_ref = x[None], s_ref[None]
    elif f is not None:
        x, s_ref = x[f:f + 1], s_ref[f:f + 1]
    frames = x.shape[1]
    phi_x = np.einsum("ftn,ftm->fnm", x, np.conj(x)) / frames
    r = np.einsum("ftn,ft->fn", x, np.conj(s_ref)) / frames
    w = linalg.solve(phi_x, r)
    return w[0] if (single or f is not None) else w


def steering_vector(phi_s):
    """Principal eigenvector of the target covariance (unit norm, canonical phase)."""
    return linalg.sev_max(phi_s).vector


def mvdr(phi, h):
    """``Phi^-1 h / (h^H Phi^-1 h)``; MVDR with ``Phi_n``, MPDR with ``Phi_x``."""
    u = linalg.solve(phi, h)
    denom = np.sum(np.conj(h) * u, axis=-1)
    denom = np.where(np.abs(denom) < DENOM_FLOOR, DENOM_FLOOR, denom)
    return u / denom[..., None]


def souden_mvdr(phi_s, phi_n, k=0):
    """``Phi_n^-1 Phi_s e_k / tr(Phi_n^-1 Phi_s)``."""
    ratio = np.linalg.solve(phi_n, phi_s)
    tr = linalg.trace(ratio)
    tr = np.where(np.abs(tr) < DENOM_FLOOR, DENOM_FLOOR, tr)
    return ratio[..., :, k] / tr[..., None]


def sibf_noise_mask(r, beta, eps):
    """Noise-covariance weights ``1 / max(r^beta, eps)`` from a target magnitude reference."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or eps <= 0:
        raise ValueError("need r >= 0 and eps > 0")
    return 1.0 / np.maximum(r ** beta, eps)


def sibf(x, r, beta=2.0, eps=1e-6):
    """Reference-weighted minimum noise-to-observation filter (per frequency)."""
    x = x.per_freq() if hasattr(x, "per_freq") else np.asarray(x)
    m_n = sibf_noise_mask(r, beta, eps)
    phi_x = np.einsum("ftn,ftm->fnm", x, np.conj(x)) / x.shape[1]
    phi_n = np.einsum("ft,ftn,ftm->fnm", m_n, x, np.conj(x)) / x.shape[1]
    return linalg.gev_extreme(phi_n, phi_x, "min").vector


def mldr_alternate(x, h, iterations=10, eps_sigma=1e-10, k=0, sigma2=None,
                   return_history=False):
    """Alternating ML distortionless-response estimation.

    Repeats ``Phi_sigma = <x x^H / sigma^2>``, ``w = Phi_sigma^-1 h / (h^H
    Phi_sigma^-1 h)``, ``sigma^2 = |w^H x|^2`` for ``iterations`` rounds.
    ``x`` is (F, T, N) or (T, N); ``h`` matches its leading shape. The
    variance starts at ``|x_k|^2`` unless ``sigma2`` is given and is clamped
    below at ``max(eps_sigma, 1e-6 * mean power)``. With ``return_history``
    the objective ``<log sigma^2 + |y|^2 / sigma^2>`` after each round is
    returned as a third element.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
        h = np.asarray(h)[None]
        if sigma2 is not None:
            sigma2 = np.asarray(sigma2, dtype=float)[None]
    h = np.asarray(h)
    power = np.abs(x[..., k]) ** 2
    floor = np.maximum(eps_sigma, 1e-6 * np.mean(power, axis=-1, keepdims=True))
    if sigma2 is None:
        sigma2 = power
    sigma2 = np.maximum(np.broadcast_to(np.asarray(sigma2, dtype=float), power.shape), floor)
    history = []
    w = None
    for _ in range(iterations):
        phi = np.einsum("ft,ftn,ftm->fnm", 1.0 / sigma2, x, np.conj(x)) / x.shape[1]
        w = mvdr(phi, h)
        y2 = np.abs(beamform(w, x)) ** 2
        sigma2 = np.maximum(y2, floor)
        history.append(np.sum(np.mean(np.log(sigma2) + y2 / sigma2, axis=-1)))
    if single:
        w, sigma2 = w[0], sigma2[0]
    if return_history:
        return w, sigma2, history
    return w, sigma2


# ---------------------------------------------------------------- trivial optimal masks

def _guard(den, x_k):
    x_k = np.asarray(x_k)
    scale = np.max(np.abs(x_k), axis=-1, keepdims=True)
    valid = (np.abs(x_k) >= TINY_REFERENCE * scale) & (np.abs(den) > 0)
    return valid, np.where(valid, den, 1.0)


def trivial_mask_from_target(s_k, x_k):
    """INV-OS mask ``conj(s_k) / conj(x_k)`` reproducing the ideal MMSE filter.

    Frames where ``|x_k| < 1e-9 max|x_k|`` get mask 0; returns (mask, valid).
    """
    valid, den = _guard(np.conj(x_k), x_k)
    return np.where(valid, np.conj(s_k) / den, 0.0), valid


def trivial_mask_signal(x, w_ideal, k=0):
    """INV-OS mask (and INV-NS ratio ``m_s / m_n``) ``x^H w_ideal / conj(x_k)``.

    ``x`` is (F, T, N), ``w_ideal`` (F, N); returns (mask, valid).
    """
    x = np.asarray(x)
    num = np.einsum("ftn,fn->ft", np.conj(x), w_ideal)
    valid, den = _guard(np.conj(x[..., k]), x[..., k])
    return np.where(valid, num / den, 0.0), valid


def trivial_mask_noise(x, w_ideal, k=0):
    """INV-NO mask ``conj(x_k) / (x^H w_ideal)``; returns (mask, valid)."""
    x = np.asarray(x)
    den = np.einsum("ftn,fn->ft", np.conj(x), w_ideal)
    valid, safe = _guard(den, x[..., k])
    return np.where(valid, np.conj(x[..., k]) / safe, 0.0), valid


# ---------------------------------------------------------------- mask conversion rules

def _nonneg(*masks):
    for m in masks:
        if np.any(np.asarray(m) < 0):
            raise ValueError("converted mask must be non-negative")


def convert_ns(m_s, m_n, a1, b1, a2, b2):
    """``(a1 m_s + b1 m_n, a2 m_n + b2 m_s)`` for NS GEV variations.

    The extreme eigenvector is preserved only when ``a1 * a2 > b1 * b2``;
    otherwise the max/min roles swap.
    """
    if a1 < 0 or a2 < 0:
        raise ValueError("a1 and a2 must be non-negative")
    if a1 * a2 <= b1 * b2:
        raise ValueError("need a1 * a2 > b1 * b2 to keep the same extreme eigenvector")
    out = (a1 * m_s + b1 * m_n, a2 * m_n + b2 * m_s)
    _nonneg(*out)
    return out


def convert_os(m_s, a1, b1):
    if a1 <= 0:
        raise ValueError("a1 must be positive")
    out = a1 * m_s + b1
    _nonneg(out)
    return out


def convert_no(m_n, a2, b2):
    if a2 <= 0:
        raise ValueError("a2 must be positive")
    out = a2 * m_n + b2
    _nonneg(out)
    return out


def noise_from_signal(m_s, a2, b2):
    """NO (and NS, paired with ``m_s``) mask ``b2 - a2 m_s`` from an OS mask."""
    if a2 <= 0:
        raise ValueError("a2 must be positive")
    out = b2 - a2 * m_s
    _nonneg(out)
    return out


def signal_from_noise(m_n, a1, b1):
    """OS (and NS, paired with ``m_n``) mask ``b1 - a1 m_n`` from an NO mask."""
    if a1 <= 0:
        raise ValueError("a1 must be positive")
    out = b1 - a1 * m_n
    _nonneg(out)
    return out


def collinearity(w1, w2):
    """``|<w1, w2>| / (||w1|| ||w2||)`` per frequency."""
    w1, w2 = np.asarray(w1), np.asarray(w2)
    num = np.abs(np.sum(np.conj(w1) * w2, axis=-1))
    return num / (np.linalg.norm(w1, axis=-1) * np.linalg.norm(w2, axis=-1))


def dump_filters(path, bank, variation, gamma_included=True):
    w = bank.w * (np.conj(bank.gamma)[:, None] if gamma_included else 1.0)
    header = {"freqs": w.shape[0], "mics": w.shape[1], "variation": str(variation),
              "gamma-included": bool(gamma_included)}
    return dumps.write_array(path, w, header)
