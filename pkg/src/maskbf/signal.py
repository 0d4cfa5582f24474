"""Multichannel audio I/O, STFT/iSTFT and scenario construction."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from . import dumps
from .errors import ChannelMismatch, EmptyInput, NonColaWindow


@dataclass
class MultichannelWave:
    """Real samples with shape (channels, time) at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channels(self):
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 256
    window: str = "sqrt-hann"

    @property
    def freqs(self):
        return self.window_length // 2 + 1

    def frames(self, n_samples):
        """Frame count covering every sample by ``window_length / hop`` windows."""
        return -(-n_samples // self.hop) + self.window_length // self.hop - 1


@dataclass
class Spectrogram:
    """Complex STFT values with shape (frames, freqs, mics)."""

    values: np.ndarray
    config: StftConfig
    length: int = None

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def freqs(self):
        return self.values.shape[1]

    @property
    def mics(self):
        return self.values.shape[2]

    def per_freq(self):
        """View with shape (freqs, frames, mics) used by the beamformers."""
        return np.transpose(self.values, (1, 0, 2))


def make_window(length, kind):
    if kind == "sqrt-hann":
        return np.sqrt(sps.get_window("hann", length, fftbins=True))
    if kind == "hann":
        return sps.get_window("hann", length, fftbins=True)
    if kind in ("rect", "boxcar", "rectangular"):
        return np.ones(length)
    raise ValueError(f"unknown window kind {kind!r}")


def _validate(config):
    n = config.window_length
    if n < 2 or n & (n - 1):
        raise ValueError("window length must be a power of two")
    if config.hop <= 0 or n % config.hop:
        raise ValueError("hop must divide the window length")


def _wola_norm(config):
    win = make_window(config.window_length, config.window)
    folded = (win ** 2).reshape(-1, config.hop).sum(axis=0)
    if not np.allclose(folded, folded[0], rtol=1e-10, atol=1e-12) or folded[0] <= 0:
        raise NonColaWindow(
            f"{config.window} window with hop {config.hop} is not overlap-add invariant")
    return win, folded[0]


def stft(wave, config=StftConfig()):
    """Per-channel STFT of a :class:`MultichannelWave` (or array of shape (N, T))."""
    _validate(config)
    samples = wave.samples if isinstance(wave, MultichannelWave) else np.atleast_2d(wave)
    n_ch, n = samples.shape
    if n == 0:
        raise EmptyInput("cannot transform an empty signal")
    win = make_window(config.window_length, config.window)
    frames = config.frames(n)
    lead = config.window_length - config.hop
    total = (frames - 1) * config.hop + config.window_length
    padded = np.zeros((n_ch, total))
    padded[:, lead:lead + n] = samples
    idx = np.arange(frames)[:, None] * config.hop + np.arange(config.window_length)
    segments = padded[:, idx] * win
    spec = np.fft.rfft(segments, axis=-1)
    return Spectrogram(np.transpose(spec, (1, 2, 0)), config, n)


def istft(spec, length=None):
    """Weighted overlap-add inverse of :func:`stft`; returns a MultichannelWave."""
    config = spec.config
    _validate(config)
    win, norm = _wola_norm(config)
    values = np.asarray(spec.values)
    frames = values.shape[0]
    segments = np.fft.irfft(np.transpose(values, (2, 0, 1)), n=config.window_length, axis=-1)
    segments = segments * win
    total = (frames - 1) * config.hop + config.window_length
    out = np.zeros((values.shape[2], total))
    for j in range(frames):
        start = j * config.hop
        out[:, start:start + config.window_length] += segments[:, j]
    lead = config.window_length - config.hop
    if length is None:
        length = spec.length if spec.length is not None else total - 2 * lead
    return MultichannelWave(out[:, lead:lead + length] / norm)


def istft_mono(values, config, length):
    """Inverse transform of a single-channel (frames, freqs) spectrogram."""
    return istft(Spectrogram(np.asarray(values)[:, :, None], config, length)).samples[0]


# ---------------------------------------------------------------- scenarios

@dataclass
class Scenario:
    """Target, interference and the mixture ``target + g * interference``.

    ``ref_mic`` is 0-based; JSON manifests and the CLI use 1-based indices.
    """

    target: Spectrogram
    interference: Spectrogram
    observation: Spectrogram
    g: float
    ref_mic: int
    target_wave: MultichannelWave
    interference_wave: MultichannelWave
    name: str = "scene"

    @property
    def config(self):
        return self.observation.config

    @property
    def length(self):
        return len(self.target_wave)

    def observation_wave(self):
        return MultichannelWave(self.target_wave.samples + self.g * self.interference_wave.samples,
                                self.target_wave.sample_rate)


def fit_length(noise, length, sample_rate, crossfade=0.01):
    """Loop (with a linear crossfade) or truncate ``noise`` to ``length`` samples."""
    noise = np.atleast_2d(noise)
    n = noise.shape[1]
    if n == 0:
        raise EmptyInput("empty noise signal")
    if n >= length:
        return noise[:, :length].copy()
    fade = min(int(round(crossfade * sample_rate)), n // 2)
    out = noise.copy()
    ramp = np.linspace(0.0, 1.0, fade + 2)[1:-1]
    while out.shape[1] < length:
        if fade:
            head = out[:, -fade:] * (1 - ramp) + noise[:, :fade] * ramp
            out = np.concatenate([out[:, :-fade], head, noise[:, fade:]], axis=1)
        else:
            out = np.concatenate([out, noise], axis=1)
    return out[:, :length]


def mix_scenario(target_wave, noise_wave, g, k=0, config=StftConfig(), name="scene"):
    """Observation ``x = s + g * n`` in the STFT domain with reference mic ``k`` (0-based)."""
    if target_wave.channels != noise_wave.channels:
        raise ChannelMismatch(
            f"target has {target_wave.channels} channels, noise {noise_wave.channels}")
    if not 0 <= k < target_wave.channels:
        raise ValueError(f"reference mic {k} out of range")
    noise = fit_length(noise_wave.samples, len(target_wave), target_wave.sample_rate)
    interference_wave = MultichannelWave(noise, target_wave.sample_rate)
    target = stft(target_wave, config)
    interference = stft(interference_wave, config)
    observation = Spectrogram(target.values + g * interference.values, config, target.length)
    return Scenario(target, interference, observation, float(g), int(k),
                    target_wave, interference_wave, name)


def _fractional_delay(delay, taps=33):
    n = np.arange(taps) - (taps - 1) / 2
    h = np.sinc(n - (delay - int(delay))) * np.hamming(taps)
    return np.concatenate([np.zeros(int(delay)), h / h.sum()])


def _spatialize(source, n_mics, rng, max_delay=6.0):
    delays = rng.uniform(0.0, max_delay, n_mics)
    gains = rng.uniform(0.7, 1.0, n_mics)
    out = np.empty((n_mics, source.size))
    for m in range(n_mics):
        out[m] = gains[m] * sps.lfilter(_fractional_delay(delays[m]), [1.0], source)
    return out


def _speech_like(rng, n, sample_rate):
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100, 200) * (1 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t
                                                    + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(min(40, (0.45 * sample_rate) // 250))
    formants = rng.uniform(300, 3500, 3)
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        freq = h * np.mean(f0)
        env = np.sum(np.exp(-0.5 * ((freq - formants) / 250.0) ** 2)) + 0.1 / h
        x += env * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    syllables = np.clip(np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi)),
                        0, None) ** 2
    word = (np.sin(2 * np.pi * rng.uniform(0.4, 0.8) * t + rng.uniform(0, 2 * np.pi)) > -0.3)
    return x * (0.05 + syllables * word)


def synth_scene(seed, n_mics=3, n_sources=3, duration=2.0, sample_rate=16000, snr_db=5.0):
    """Deterministic synthetic (target, noise) multichannel pair.

    The target is a harmonic source with syllable-like amplitude modulation;
    the noise is ``n_sources`` independent band-filtered noises plus weak
    sensor noise. Every source reaches the mics through random fractional
    delays and gains. The noise is scaled to ``snr_db`` at the first mic.
    """
    if n_mics < 2:
        raise ValueError("need at least two microphones")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    target = _spatialize(_speech_like(rng, n, sample_rate), n_mics, rng)
    noise = np.zeros((n_mics, n))
    for _ in range(n_sources):
        lo, hi = sorted(rng.uniform(0.02, 0.9, 2))
        b, a = sps.butter(2, [lo, max(hi, lo + 0.05)], btype="band")
        src = sps.lfilter(b, a, rng.standard_normal(n))
        noise += _spatialize(src / np.std(src), n_mics, rng)
    noise += 0.05 * rng.standard_normal((n_mics, n))
    p_t = np.mean(target[0] ** 2)
    p_n = np.mean(noise[0] ** 2)
    noise *= np.sqrt(p_t / p_n / 10 ** (snr_db / 10))
    peak = max(np.max(np.abs(target)), np.max(np.abs(noise)))
    scale = 0.25 / peak
    return (MultichannelWave(target * scale, sample_rate),
            MultichannelWave(noise * scale, sample_rate))


# ---------------------------------------------------------------- files

def read_wav(paths):
    """Read one interleaved multichannel WAV or a list of mono files (one per channel)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    channels, rate = [], None
    for p in paths:
        sr, data = wavfile.read(p)
        if rate is not None and sr != rate:
            raise ChannelMismatch("channel files have different sample rates")
        rate = sr
        data = _to_float(data)
        channels.extend(np.atleast_2d(data.T) if data.ndim > 1 else [data])
    lengths = {len(c) for c in channels}
    if len(lengths) != 1:
        raise ChannelMismatch("channels have different lengths")
    return MultichannelWave(np.stack(channels), rate)


def _to_float(data):
    if data.dtype == np.uint8:
        return (data.astype(float) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(float) / float(-np.iinfo(data.dtype).min)
    return data.astype(float)


def write_wav(path, wave):
    samples = np.clip(np.atleast_2d(wave.samples), -1.0, 1.0).astype(np.float32)
    wavfile.write(path, int(wave.sample_rate), samples.T if samples.shape[0] > 1 else samples[0])


def read_manifest(path):
    """Waves of a JSON manifest ``{target, noise, g, reference_mic}``.

    Returns (target, noise, g, k) with ``k`` converted to 0-based.
    """
    path = Path(path)
    spec = json.loads(path.read_text())

    def resolve(entry):
        entry = entry if isinstance(entry, list) else [entry]
        return [str((path.parent / e).resolve()) if not Path(e).is_absolute() else e
                for e in entry]

    target = read_wav(resolve(spec["target"]))
    noise = read_wav(resolve(spec["noise"]))
    return target, noise, float(spec.get("g", 1.0)), int(spec.get("reference_mic", 1)) - 1


def load_manifest(path, config=StftConfig()):
    """Scenario from a JSON manifest (reference mic given 1-based)."""
    target, noise, g, k = read_manifest(path)
    return mix_scenario(target, noise, g, k, config, name=Path(path).stem)


def dump_spectrogram(path, spec):
    header = {"frames": spec.frames, "freqs": spec.freqs, "mics": spec.mics,
              "layout": "t-major", "window_length": spec.config.window_length,
              "hop": spec.config.hop, "window": spec.config.window}
    return dumps.write_array(path, spec.values, header)


def load_spectrogram(path):
    values, meta = dumps.read_array(path, ("frames", "freqs", "mics"))
    config = StftConfig(meta["window_length"], meta["hop"], meta["window"])
    return Spectrogram(values, config)
