"""Time-domain signal-to-distortion ratio."""

from dataclasses import dataclass

import numpy as np

from .errors import ZeroReference

SDR_CAP_DB = 120.0


@dataclass(frozen=True)
class SdrResult:
    sdr_db: float
    target_energy: float
    error_energy: float
    capped: bool = False

    def __float__(self):
        return self.sdr_db


def _mono(x, channel=None):
    if hasattr(x, "samples"):
        x = x.samples
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[channel or 0]
    return x


def sdr(reference, estimate, channel=None):
    """``10 log10(sum |s|^2 / sum |s - z|^2)`` over the full waveform.

    ``reference`` may be a multichannel wave (channel ``channel``, 0-based)
    or a 1-D array. The estimate is zero-padded or trimmed to its length.
    A zero error gives +120 dB with ``capped`` set.
    """
    ref = _mono(reference, channel)
    est = _mono(estimate)
    if est.size < ref.size:
        est = np.pad(est, (0, ref.size - est.size))
    est = est[:ref.size]
    target = float(np.sum(ref ** 2))
    if target == 0.0:
        raise ZeroReference("reference signal has zero energy")
    error = float(np.sum((ref - est) ** 2))
    if error == 0.0:
        return SdrResult(SDR_CAP_DB, target, error, capped=True)
    return SdrResult(min(10.0 * np.log10(target / error), SDR_CAP_DB), target, error,
                     capped=target / error >= 10 ** (SDR_CAP_DB / 10))
