"""Per-utterance gradient search for optimal filter-estimation and scaling masks.

Each run builds the differentiable pipeline

    masks -> masked covariances -> filter w -> y = w^H x -> gamma -> z = gamma y

and minimizes ``sum_{f,t} |s_k - z|^2 / sum_{f,t} |s_k|^2`` over the mask
logits (and batch-norm affine terms) with Adam or plain gradient descent.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import signal as sig
from .beamformers import FilterBank, VariationSpec, dump_filters, filter_node
from .errors import MaskBFError
from .masks import MaskBuffer, MaskConstraint, dump_mask, mask_node, outer_products
from .metrics import sdr
from .scaling import ScalingMethod, ScalingSpec, gamma_node

log = logging.getLogger(__name__)

ABS_FAMILY = (MaskConstraint.NON_NEGATIVE, MaskConstraint.L1_MN, MaskConstraint.L2_MN)
# mean-normalized scaling masks need long runs to concentrate weight in a few frames
SCALING_ITERATIONS = 2000
DEFAULT_STEP = 0.3


def default_iterations(spec):
    return 1000 if VariationSpec.parse(spec).name == "ISEV-OS" else 500


def default_bn(spec):
    """Batch norm on, except for GEV variations that do not use the NS pair."""
    spec = VariationSpec.parse(spec)
    return not (spec.is_gev and spec.suffix in ("OS", "NO"))


@dataclass(frozen=True)
class OptimizationConfig:
    """Optimizer settings. ``None`` fields are filled per variation."""

    iterations: int = None
    bn: bool = None
    step_size: float = DEFAULT_STEP
    optimizer: str = "adam"
    seed: int = 0
    loss_floor: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1e3
    anneal_fraction: float = 0.2
    init_scale: float = 1.0
    filter_constraint: MaskConstraint = MaskConstraint.RATIO
    scaling_bn: bool = None
    sdr_every: int = 0

    def __post_init__(self):
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if not 0 <= self.anneal_fraction < 1:
            raise ValueError("anneal fraction must be in [0, 1)")
        kind = {"adaptive-moment": "adam", "plain-gradient": "sgd", "gd": "sgd"}.get(
            self.optimizer, self.optimizer)
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "optimizer", kind)
        object.__setattr__(self, "filter_constraint",
                           MaskConstraint.parse(self.filter_constraint))

    def for_variation(self, spec):
        return replace(self,
                       iterations=self.iterations or default_iterations(spec),
                       bn=default_bn(spec) if self.bn is None else self.bn)

    def to_dict(self):
        return {"iterations": self.iterations, "bn": self.bn, "step_size": self.step_size,
                "optimizer": self.optimizer, "seed": self.seed, "loss_floor": self.loss_floor,
                "clip_norm": self.clip_norm, "anneal_fraction": self.anneal_fraction,
                "init_scale": self.init_scale,
                "filter_constraint": self.filter_constraint.value,
                "scaling_bn": self.scaling_bn, "sdr_every": self.sdr_every}

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        for key in ("bn_enabled", "bn-enabled"):
            if key in d:
                d["bn"] = d.pop(key)
        for key in ("step-size", "lr"):
            if key in d:
                d["step_size"] = d.pop(key)
        if "optimizer-kind" in d:
            d["optimizer"] = d.pop("optimizer-kind")
        if "loss-floor" in d:
            d["loss_floor"] = d.pop("loss-floor")
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown optimizer settings {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    kind: str
    variation: str
    constraint: str
    scaling: str
    iterations: int
    loss_curve: list
    sdr_db: float
    initial_sdr_db: float
    masks: dict
    filters: FilterBank
    warnings: list = field(default_factory=list)
    sdr_curve: list = field(default_factory=list)
    aborted: bool = False
    seed: int = 0
    scene: str = "scene"

    def to_dict(self):
        return {"kind": self.kind, "variation": self.variation, "constraint": self.constraint,
                "scaling": self.scaling, "iterations": self.iterations,
                "loss_curve": [float(v) for v in self.loss_curve],
                "sdr_db": float(self.sdr_db), "initial_sdr_db": float(self.initial_sdr_db),
                "sdr_curve": [[int(i), float(v)] for i, v in self.sdr_curve],
                "warnings": list(self.warnings), "aborted": self.aborted,
                "seed": self.seed, "scene": self.scene}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def save(self, directory, stem):
        """Write ``stem.json`` plus binary mask and filter dumps; returns the JSON path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for role, mask in self.masks.items():
            dump_mask(directory / f"{stem}.mask_{role}", mask["values"], mask["constraint"])
        dump_filters(directory / f"{stem}.filter", self.filters, self.variation)
        path = directory / f"{stem}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.to_json())
        tmp.replace(path)
        return path


# ---------------------------------------------------------------- problem setup

class _Problem:
    """Constant arrays of one scenario in (F, T, ...) layout."""

    def __init__(self, scenario):
        self.scenario = scenario
        self.k = scenario.ref_mic
        self.x = scenario.observation.per_freq()
        self.s_k = scenario.target.per_freq()[..., self.k]
        self.x_k = self.x[..., self.k]
        self.outer = outer_products(self.x)
        self.phi_x = np.mean(self.outer, axis=1)
        self.energy = float(np.sum(np.abs(self.s_k) ** 2))
        if self.energy == 0.0:
            self.energy = 1.0
        self.shape = self.x.shape[:2]

    def crop(self, freqs, frames):
        """Sub-problem restricted to the given frequency and frame slices."""
        out = object.__new__(_Problem)
        out.scenario, out.k = self.scenario, self.k
        out.x = self.x[freqs, frames]
        out.s_k = self.s_k[freqs, frames]
        out.x_k = out.x[..., self.k]
        out.outer = outer_products(out.x)
        out.phi_x = np.mean(out.outer, axis=1)
        out.energy = max(float(np.sum(np.abs(out.s_k) ** 2)), 1e-300)
        out.shape = out.x.shape[:2]
        return out

    def output(self, w):
        return ad.sum(ad.expand_dims(ad.conj(w), 1) * self.x, axis=-1)

    def loss(self, z):
        return ad.sum(ad.abs2(self.s_k - z)) * (1.0 / self.energy)

    def sdr(self, z):
        wave = sig.istft_mono(np.asarray(z).T, self.scenario.config, self.scenario.length)
        return sdr(self.scenario.target_wave.samples[self.k], wave).sdr_db


def _filter_buffers(spec, config, shape, rng):
    out = {}
    for role in ("s", "n"):
        if role in spec.masks:
            logits = config.init_scale * rng.standard_normal(shape)
            out[role] = MaskBuffer(logits, config.filter_constraint, bn=config.bn)
    return out


def _scaling_buffer(constraint, bn, shape):
    """Scaling-mask buffer whose activated mask starts constant (1 for the Abs family).

    ``bn=None`` enables batch norm for ratio masks only: for the Abs family
    it replaces the constant start by a standardized random mask and slows
    convergence considerably.
    """
    constraint = MaskConstraint.parse(constraint)
    if bn is None:
        bn = constraint is MaskConstraint.RATIO
    if constraint is MaskConstraint.COMPLEX:
        return MaskBuffer(np.ones(shape), constraint)
    if constraint in ABS_FAMILY:
        if bn:
            return MaskBuffer(np.zeros(shape), constraint, bn=True,
                              bn_shift=np.ones((shape[0], 1)))
        return MaskBuffer(np.ones(shape), constraint)
    return MaskBuffer(np.zeros(shape), constraint, bn=bn)


def _scaling_target(problem, scaling, m_p=None):
    method = scaling.method
    if method is ScalingMethod.IDEAL:
        return problem.s_k
    if method is ScalingMethod.MDP:
        return problem.x_k
    if method is ScalingMethod.MASK_BASED and m_p is not None:
        return m_p * problem.x_k
    raise MaskBFError(f"scaling {scaling.label} is not available inside optimization")


class _Adam:
    def __init__(self, config):
        self.config = config
        self.m, self.v, self.t = {}, {}, 0

    def rate(self):
        """Step size for update ``self.t``: constant, then linear decay over the final fraction."""
        c = self.config
        tail = int(round(c.anneal_fraction * c.iterations))
        left = c.iterations - self.t + 1
        if tail < 1 or left > tail:
            return c.step_size
        return c.step_size * left / (tail + 1)

    def step(self, arrays, grads):
        c = self.config
        self.t += 1
        lr = self.rate()
        for key, g in grads.items():
            p = arrays[key]
            if c.optimizer == "sgd":
                p -= lr * g
                continue
            b1, b2 = c.betas
            m = self.m.get(key, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(key, 0.0) * b2 + (1 - b2) * g * g
            self.m[key], self.v[key] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def _collect(buffers):
    """Flat {(role, name): array} view of every updatable array (shared, not copied)."""
    return {(role, name): arr for role, buf in buffers.items()
            for name, arr in buf.arrays().items()}


def _run(problem, buffers, forward, config, kind, variation, constraint, scaling_label):
    """Shared optimization loop; ``forward(masks, warn)`` returns (loss, z, w, gamma)."""
    arrays = _collect(buffers)
    opt = _Adam(config)
    warn_counts = {}

    def note(msg):
        warn_counts[msg] = warn_counts.get(msg, 0) + 1

    def evaluate(need_grad):
        nodes = {key: ad.parameter(arr, name=f"{key[0]}.{key[1]}") if need_grad
                 else ad.constant(arr) for key, arr in arrays.items()}
        masks = {role: mask_node(buf, {name: nodes[(role, name)] for name in buf.arrays()})
                 for role, buf in buffers.items()}
        msgs = []
        loss, z, w, gamma = forward(masks, msgs)
        for m in msgs:
            note(m)
        grads = None
        if need_grad:
            g = ad.backward(loss)
            for m in g.warnings:
                note(m)
            grads = {key: g.get(node, np.zeros_like(arrays[key])) for key, node in nodes.items()}
        return float(loss.value), z.value, w.value, gamma.value, grads

    loss, z, w, gamma, grads = evaluate(True)
    initial_sdr = problem.sdr(z)
    if not np.isfinite(loss):
        raise MaskBFError("initial loss is not finite")
    curve, sdr_curve = [], []
    if config.sdr_every:
        sdr_curve.append((0, initial_sdr))
    state = (z, w, gamma)
    aborted = False
    for it in range(1, config.iterations + 1):
        if loss > config.loss_floor:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > config.clip_norm:
                note(f"gradient norm clipped to {config.clip_norm:g}")
                grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
            backup = {k: a.copy() for k, a in arrays.items()}
            opt.step(arrays, grads)
        else:
            backup = None
        try:
            loss_new, z, w, gamma, grads = evaluate(it < config.iterations)
            ok = np.isfinite(loss_new)
        except (MaskBFError, np.linalg.LinAlgError, FloatingPointError) as exc:
            note(f"iteration {it}: {type(exc).__name__}: {exc}")
            ok = False
        if not ok:
            note(f"run aborted at iteration {it}: non-finite loss or numerical failure")
            log.warning("%s %s aborted at iteration %d", kind, variation, it)
            if backup is not None:
                for k, a in backup.items():
                    arrays[k][...] = a
            aborted = True
            break
        loss = loss_new
        state = (z, w, gamma)
        curve.append(loss)
        if config.sdr_every and (it % config.sdr_every == 0 or it == config.iterations):
            sdr_curve.append((it, problem.sdr(z)))
    z, w, gamma = state
    for msg, count in warn_counts.items():
        if msg.startswith("gradient norm clipped"):
            log.warning("%s %s: %s (%d times)", kind, variation, msg, count)
    masks = {role: {"values": mask_node(buf).value, "constraint": buf.constraint.value}
             for role, buf in buffers.items()}
    final_sdr = problem.sdr(z)
    return RunRecord(kind=kind, variation=variation, constraint=constraint,
                     scaling=scaling_label, iterations=config.iterations,
                     loss_curve=curve, sdr_db=final_sdr, initial_sdr_db=initial_sdr,
                     masks=masks, filters=FilterBank(w, gamma),
                     warnings=[f"{m} (x{c})" if c > 1 else m for m, c in warn_counts.items()],
                     sdr_curve=sdr_curve, aborted=aborted, seed=config.seed,
                     scene=problem.scenario.name)


def _covariances(problem, spec, masks):
    phi_s = phi_n = None
    if "s" in spec.masks:
        phi_s = ad.weighted_covariance(masks["s"], problem.outer)
    if "n" in spec.masks:
        phi_n = ad.weighted_covariance(masks["n"], problem.outer)
    return problem.phi_x, phi_s, phi_n


def pipeline_loss(problem, spec, masks, scaling, warn=None):
    """Loss node and intermediates for given mask nodes (exposed for gradient checks)."""
    phi_x, phi_s, phi_n = _covariances(problem, spec, masks)
    w = filter_node(spec, phi_x, phi_s, phi_n, problem.k)
    y = problem.output(w)
    target = _scaling_target(problem, scaling, masks.get("p"))
    gamma = gamma_node(y, target, problem.x_k, warn if warn is not None else [])
    z = ad.expand_dims(gamma, -1) * y
    return problem.loss(z), z, w, gamma


def optimize_filter_masks(scenario, spec, scaling="ideal", config=OptimizationConfig()):
    """Optimize the filter-estimation masks of ``spec`` with a fixed scaling method."""
    spec = VariationSpec.parse(spec)
    scaling = ScalingSpec.parse(scaling)
    if scaling.method not in (ScalingMethod.IDEAL, ScalingMethod.MDP):
        raise MaskBFError("filter-mask optimization supports ideal or MDP scaling")
    config = config.for_variation(spec)
    problem = _Problem(scenario)
    rng = np.random.default_rng(config.seed)
    buffers = _filter_buffers(spec, config, problem.shape, rng)

    def forward(masks, warn):
        return pipeline_loss(problem, spec, masks, scaling, warn)

    return _run(problem, buffers, forward, config, "filter", spec.name,
                config.filter_constraint.value, scaling.label)


def optimize_scaling_mask(scenario, fixed_filter, constraint="L1-MN",
                          config=OptimizationConfig()):
    """Optimize only the scaling mask ``m_p`` for a fixed filter bank."""
    constraint = MaskConstraint.parse(constraint)
    if config.iterations is None:
        config = replace(config, iterations=SCALING_ITERATIONS)
    problem = _Problem(scenario)
    w = np.asarray(fixed_filter.w if isinstance(fixed_filter, FilterBank) else fixed_filter)
    y = np.einsum("fn,ftn->ft", np.conj(w), problem.x)
    buffers = {"p": _scaling_buffer(constraint, config.scaling_bn, problem.shape)}
    scaling = ScalingSpec("mask-based", constraint)

    def forward(masks, warn):
        target = masks["p"] * problem.x_k
        gamma = gamma_node(y, target, problem.x_k, warn)
        z = ad.expand_dims(gamma, -1) * y
        return problem.loss(z), z, ad.constant(w), gamma

    return _run(problem, buffers, forward, config, "scaling", "fixed",
                constraint.value, scaling.label)


def optimize_joint(scenario, spec, constraint="L1-MN", config=OptimizationConfig()):
    """Jointly optimize the filter-estimation masks and the scaling mask."""
    spec = VariationSpec.parse(spec)
    constraint = MaskConstraint.parse(constraint)
    if config.iterations is None:
        # the scaling mask sets the pace, so joint runs get at least the scaling budget
        config = replace(config, iterations=max(default_iterations(spec), SCALING_ITERATIONS))
    config = config.for_variation(spec)
    problem = _Problem(scenario)
    rng = np.random.default_rng(config.seed)
    buffers = _filter_buffers(spec, config, problem.shape, rng)
    buffers["p"] = _scaling_buffer(constraint, config.scaling_bn, problem.shape)
    scaling = ScalingSpec("mask-based", constraint)

    def forward(masks, warn):
        return pipeline_loss(problem, spec, masks, scaling, warn)

    return _run(problem, buffers, forward, config, "joint", spec.name,
                constraint.value, scaling.label)


def ideal_mmse_sdr(scenario):
    """SDR of the ideal MMSE filter (ideal scaling is built in) and its filter bank."""
    from .beamformers import beamform, ideal_mmse
    problem = _Problem(scenario)
    w = ideal_mmse(problem.x, problem.s_k)
    return problem.sdr(beamform(w, problem.x)), FilterBank(w)


def mic_sdr(scenario):
    """SDR of the unprocessed reference-mic observation."""
    k = scenario.ref_mic
    return sdr(scenario.target_wave.samples[k], scenario.observation_wave().samples[k]).sdr_db


def fixed_filter_sdr(scenario, w, gamma):
    problem = _Problem(scenario)
    z = gamma[:, None] * np.einsum("fn,ftn->ft", np.conj(w), problem.x)
    return problem.sdr(z)


def pipeline_gradient_check(scenario, spec, scaling="ideal", config=OptimizationConfig(),
                            freqs=slice(20, 26), frames=slice(100, 200), step=1e-3):
    """Finite-difference check of the full mask -> loss pipeline on a cropped problem.

    Scaling ``mask-based`` adds an L1-MN scaling mask as in joint optimization.
    Returns an :class:`maskbf.autodiff.GradientReport`.
    """
    spec = VariationSpec.parse(spec)
    scaling = ScalingSpec.parse(scaling)
    config = config.for_variation(spec)
    problem = _Problem(scenario).crop(freqs, frames)
    rng = np.random.default_rng(config.seed)
    buffers = _filter_buffers(spec, config, problem.shape, rng)
    if scaling.method is ScalingMethod.MASK_BASED:
        buffers["p"] = MaskBuffer(1.0 + 0.3 * rng.standard_normal(problem.shape),
                                  scaling.constraint)
    keys = [(role, name) for role, buf in buffers.items() for name in buf.arrays()]
    for role, buf in buffers.items():
        if buf.bn:
            buf.bn_scale += 0.1 * rng.standard_normal(buf.bn_scale.shape)
            buf.bn_shift += 0.1 * rng.standard_normal(buf.bn_shift.shape)
    params = [ad.parameter(buffers[r].arrays()[n], name=f"{r}.{n}") for r, n in keys]

    def build(nodes):
        lookup = dict(zip(keys, nodes))
        masks = {role: mask_node(buf, {n: lookup[(role, n)] for n in buf.arrays()})
                 for role, buf in buffers.items()}
        return pipeline_loss(problem, spec, masks, scaling)[0]

    return ad.check_gradients(build, params, step=step)
