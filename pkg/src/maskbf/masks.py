"""Time-frequency mask parameterizations and masked covariance assembly.

Masks are stored per frequency as arrays of shape (F, T). Each mask is
produced from unconstrained real logits by an activation that enforces its
constraint class, optionally after a per-frequency batch normalization whose
statistics are taken over the frames of a single utterance.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dumps
from .errors import ZeroMaskSum

BN_EPS = 1e-5


class MaskConstraint(str, enum.Enum):
    COMPLEX = "complex"
    NON_NEGATIVE = "non-negative"
    RATIO = "ratio"
    L1_MN = "L1-MN"
    L2_MN = "L2-MN"
    BINARY = "binary"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"nonnegative": cls.NON_NEGATIVE, "abs": cls.NON_NEGATIVE,
                   "l1": cls.L1_MN, "l2": cls.L2_MN, "sigmoid": cls.RATIO}
        for member in cls:
            if member.value.lower() == key:
                return member
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown mask constraint {value!r}")


@dataclass
class MaskBuffer:
    """Logits for one mask plus its constraint and batch-norm affine terms.

    Complex masks use ``logits`` as the real part and ``imag`` as the
    imaginary part; they are not batch-normalized.
    """

    logits: np.ndarray
    constraint: MaskConstraint = MaskConstraint.RATIO
    bn: bool = False
    bn_scale: np.ndarray = None
    bn_shift: np.ndarray = None
    imag: np.ndarray = None

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=float)
        self.constraint = MaskConstraint.parse(self.constraint)
        f = self.logits.shape[0]
        if self.bn_scale is None:
            self.bn_scale = np.ones((f, 1))
        if self.bn_shift is None:
            self.bn_shift = np.zeros((f, 1))
        if self.constraint is MaskConstraint.COMPLEX and self.imag is None:
            self.imag = np.zeros_like(self.logits)

    def arrays(self):
        """Named real arrays that an optimizer may update."""
        out = {"logits": self.logits}
        if self.constraint is MaskConstraint.COMPLEX:
            out["imag"] = self.imag
        elif self.bn:
            out["bn_scale"] = self.bn_scale
            out["bn_shift"] = self.bn_shift
        return out


@dataclass
class MaskParameterSet:
    """Mask buffers keyed by role: ``"s"``, ``"n"`` (filter estimation), ``"p"`` (scaling)."""

    buffers: dict = field(default_factory=dict)

    def __getitem__(self, role):
        return self.buffers[role]

    def __contains__(self, role):
        return role in self.buffers

    def roles(self):
        return list(self.buffers)


def batch_norm(z, scale=None, shift=None, eps=BN_EPS):
    """Normalize each frequency row of ``z`` (F, T) over frames, then apply the affine terms."""
    z = ad.as_node(z)
    if z.shape[-1] < 2:
        return z
    centred = z - ad.mean(z, axis=-1, keepdims=True)
    var = ad.mean(ad.abs2(centred), axis=-1, keepdims=True)
    out = centred / ad.sqrt(var + eps)
    if scale is not None:
        out = out * scale
    if shift is not None:
        out = out + shift
    return out


def _binary(z):
    value = (z.value > 0).astype(float)
    # no adjoint: binary masks are not optimizable
    return ad.Node(value, (z,), None, op="binary", requires_grad=z.requires_grad)


def activation(constraint, z, imag=None):
    """Apply the activation for ``constraint`` to normalized logits ``z``."""
    constraint = MaskConstraint.parse(constraint)
    if constraint is MaskConstraint.RATIO:
        return ad.sigmoid(z)
    if constraint is MaskConstraint.NON_NEGATIVE:
        return ad.absolute(z)
    if constraint is MaskConstraint.L1_MN:
        a = ad.absolute(z)
        return a / ad.mean(a, axis=-1, keepdims=True)
    if constraint is MaskConstraint.L2_MN:
        a = ad.absolute(z)
        return a / ad.sqrt(ad.mean(ad.abs2(a), axis=-1, keepdims=True))
    if constraint is MaskConstraint.COMPLEX:
        return ad.to_complex(z, imag if imag is not None else np.zeros(z.shape))
    if constraint is MaskConstraint.BINARY:
        return _binary(ad.as_node(z))
    raise ValueError(constraint)


def mask_node(buffer, nodes=None):
    """Graph node for the activated mask of ``buffer``.

    ``nodes`` maps the names from :meth:`MaskBuffer.arrays` to parameter
    nodes; missing entries are treated as constants.
    """
    nodes = nodes or {}
    z = nodes.get("logits", ad.constant(buffer.logits))
    if buffer.constraint is MaskConstraint.COMPLEX:
        return activation(buffer.constraint, z, nodes.get("imag", ad.constant(buffer.imag)))
    if buffer.bn:
        z = batch_norm(z, nodes.get("bn_scale", buffer.bn_scale),
                       nodes.get("bn_shift", buffer.bn_shift))
    return activation(buffer.constraint, z)


def activate(params):
    """Numeric masks (F, T) for every buffer of a :class:`MaskParameterSet` (or one buffer)."""
    if isinstance(params, MaskBuffer):
        return mask_node(params).value
    return {role: mask_node(buf).value for role, buf in params.buffers.items()}


# ---------------------------------------------------------------- covariance

def _per_freq(x):
    """Accept a Spectrogram (T, F, N) or an array already shaped (F, T, N)."""
    if hasattr(x, "per_freq"):
        return x.per_freq()
    return np.asarray(x)


def outer_products(x):
    """Per-frame outer products ``x(t) x(t)^H`` with shape (F, T, N, N)."""
    x = _per_freq(x)
    return x[..., :, None] * np.conj(x)[..., None, :]


def assemble_covariance(x, mask=None, f=None, normalization="plain"):
    """Masked spatial covariance.

    ``plain`` gives ``<m(t) x(t) x(t)^H>_t`` (``Phi_x`` when ``mask`` is None);
    ``l1-normalized`` gives ``sum_t m x x^H / sum_t m``. ``x`` is a Spectrogram
    or an (F, T, N) array; ``mask`` is (F, T) or, with ``f`` given, (T,).
    Returns (F, N, N), or (N, N) for a single frequency ``f``.
    """
    x = _per_freq(x)
    if f is not None:
        x = x[f:f + 1]
        if mask is not None:
            mask = np.asarray(mask).reshape(1, -1)
    frames = x.shape[1]
    if mask is None:
        mask = np.ones(x.shape[:2])
    mask = np.asarray(mask)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape[:2]}")
    phi = np.einsum("ft,ftn,ftm->fnm", mask, x, np.conj(x)) / frames
    if normalization in ("l1", "l1-normalized"):
        total = np.sum(mask, axis=1) / frames
        if np.any(np.abs(total) * frames <= 1e-12):
            raise ZeroMaskSum("mask sums to zero")
        phi = phi / total[:, None, None]
    elif normalization != "plain":
        raise ValueError(f"unknown normalization {normalization!r}")
    return phi[0] if f is not None else phi


def dump_mask(path, mask, constraint):
    """Write an (F, T) mask as a frame-major (T, F) binary plus JSON sidecar."""
    mask = np.asarray(mask)
    header = {"constraint": MaskConstraint.parse(constraint).value,
              "frames": mask.shape[1], "freqs": mask.shape[0], "layout": "t-major"}
    return dumps.write_array(path, mask.T, header)


def load_mask(path):
    data, meta = dumps.read_array(path, ("frames", "freqs"))
    return data.T, meta
