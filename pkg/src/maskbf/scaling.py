"""Resolution of the per-frequency output scale ``gamma`` in ``z(t) = gamma * y(t)``.

All functions work per frequency with time on the last axis, so ``y`` may be
(T,) or (F, T); ``gamma`` then has shape () or (F,).
"""

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ZeroEnergy
from .masks import MaskConstraint

ZERO_ENERGY_RATIO = 1e-14


class ScalingMethod(str, enum.Enum):
    IDEAL = "ideal"
    MDP = "mdp"
    BAN = "ban"
    RTF = "rtf"
    SWF = "swf"
    MASK_BASED = "mask-based"


@dataclass(frozen=True)
class ScalingSpec:
    method: ScalingMethod = ScalingMethod.IDEAL
    constraint: MaskConstraint = None
    swf_variance: np.ndarray = None

    def __post_init__(self):
        method = self.method
        if not isinstance(method, ScalingMethod):
            method = ScalingMethod(str(method).lower())
        object.__setattr__(self, "method", method)
        if self.method is ScalingMethod.MASK_BASED:
            object.__setattr__(self, "constraint",
                               MaskConstraint.parse(self.constraint or MaskConstraint.L1_MN))
        if self.method is ScalingMethod.SWF and self.swf_variance is None:
            raise ValueError("swf scaling needs a target variance")

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            return cls(value.get("method", "ideal"), value.get("constraint"),
                       value.get("swf_variance"))
        return cls(value)

    @property
    def label(self):
        if self.method is ScalingMethod.MASK_BASED:
            return f"mask-based:{self.constraint.value}"
        return self.method.value


def _projection(target, y, reference=None):
    """``<target conj(y)> / <|y|^2>`` with a hard error on zero output energy."""
    y = np.asarray(y)
    energy = np.mean(np.abs(y) ** 2, axis=-1)
    ref = energy if reference is None else np.mean(np.abs(reference) ** 2, axis=-1)
    if np.any(energy <= ZERO_ENERGY_RATIO * np.maximum(ref, 1e-300)) or np.any(energy == 0):
        raise ZeroEnergy("beamformer output has zero energy")
    return np.mean(np.asarray(target) * np.conj(y), axis=-1) / energy


def scale_ideal(y, s_k):
    """MSE-optimal ``gamma = <s_k conj(y)> / <|y|^2>``."""
    return _projection(s_k, y)


def scale_mask_based(y, x_k, m_p):
    """``gamma = <p conj(y)> / <|y|^2>`` with the masked reference ``p = m_p x_k``."""
    return _projection(np.asarray(m_p) * np.asarray(x_k), y)


def scale_mdp(y, x_k):
    """Minimal distortion principle: project onto the reference-mic observation."""
    return _projection(x_k, y)


def _quad(w, phi, u=None):
    u = w if u is None else u
    return np.einsum("...n,...nm,...m->...", np.conj(w), phi, u)


def scale_ban(w, phi_n, n=None):
    """Blind analytic normalization ``sqrt(w^H Phi_n Phi_n w / N) / (w^H Phi_n w)``."""
    w, phi_n = np.asarray(w), np.asarray(phi_n)
    n = w.shape[-1] if n is None else n
    den = np.real(_quad(w, phi_n))
    if np.any(den <= 0):
        raise ZeroEnergy("w^H Phi_n w must be positive")
    pw = np.einsum("...nm,...m->...n", phi_n, w)
    num = np.sqrt(np.maximum(np.real(np.sum(np.conj(pw) * pw, axis=-1)), 0.0) / n)
    return num / den


def scale_rtf(h, k=0):
    """Relative transfer function ``h / h_k``."""
    h = np.asarray(h)
    hk = h[..., k]
    if np.any(np.abs(hk) <= 1e-12 * np.linalg.norm(h, axis=-1)):
        raise ZeroEnergy("reference entry of the steering vector vanishes")
    return h / hk[..., None]


def scale_swf(w, phi_n, sigma_s2):
    """Single-channel Wiener post gain ``sigma_s^2 / (sigma_s^2 + w^H Phi_n w)``."""
    sigma_s2 = np.asarray(sigma_s2, dtype=float)
    if np.any(sigma_s2 < 0):
        raise ValueError("target variance must be non-negative")
    noise = np.maximum(np.real(_quad(np.asarray(w), np.asarray(phi_n))), 0.0)
    total = sigma_s2 + noise
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, sigma_s2 / safe, 1.0)


def gamma_node(y, target, x_k, warn=None):
    """Graph version of ``<target conj(y)> / <|y|^2>`` per frequency.

    ``y`` and ``target`` are (F, T) nodes or arrays; ``x_k`` (F, T) sets the
    zero-energy threshold. Bins with ``<|y|^2> < 1e-14 <|x_k|^2>`` get
    ``gamma = 0`` and a message is appended to ``warn`` (a list) if given.
    """
    y = ad.as_node(y)
    energy = ad.mean(ad.abs2(y), axis=-1)
    ref = np.mean(np.abs(np.asarray(x_k)) ** 2, axis=-1)
    dead = energy.value < ZERO_ENERGY_RATIO * ref
    if np.any(dead):
        msg = f"zero output energy in {int(np.sum(dead))} bin(s); gamma set to 0"
        if warn is not None:
            warn.append(msg)
        else:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    cross = ad.mean(ad.as_node(target) * ad.conj(y), axis=-1)
    safe = ad.where(dead, np.ones(energy.shape), energy)
    return ad.where(dead, np.zeros(energy.shape, dtype=complex), cross / safe)


def resolve_gamma(spec, y, x_k, s_k=None, w=None, phi_n=None, h=None, k=0):
    """Numeric ``gamma`` (F,) for a non-optimized :class:`ScalingSpec`.

    ``mask-based`` is resolved here with the constant mask (MDP); optimized
    masks go through :mod:`maskbf.optimize`. For ``rtf`` the filter is
    already distortionless towards ``h / h_k`` and ``gamma`` is ``1 / (w^H h')``.
    """
    spec = ScalingSpec.parse(spec)
    m = spec.method
    if m is ScalingMethod.IDEAL:
        if s_k is None:
            raise ValueError("ideal scaling needs the target")
        return scale_ideal(y, s_k)
    if m in (ScalingMethod.MDP, ScalingMethod.MASK_BASED):
        return scale_mdp(y, x_k)
    if m is ScalingMethod.BAN:
        return scale_ban(w, phi_n).astype(complex)
    if m is ScalingMethod.SWF:
        return scale_swf(w, phi_n, spec.swf_variance).astype(complex)
    if m is ScalingMethod.RTF:
        hr = scale_rtf(h, k)
        resp = np.sum(np.conj(w) * hr, axis=-1)
        return 1.0 / np.where(np.abs(resp) > 0, resp, 1.0)
    raise ValueError(m)
