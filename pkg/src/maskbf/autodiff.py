"""Small reverse-mode differentiation engine for the mask -> filter -> loss pipeline.

Values are numpy arrays (real or complex). For a real scalar loss ``L`` the
gradient stored for a complex value ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``
(twice the conjugate Wirtinger derivative), so that a first-order change is
``dL = Re(sum(conj(grad) * dz))``. Gradients for real values are real.

Only the operations needed by the beamforming pipeline are provided; the
graph is rebuilt on every forward pass.
"""

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import GraphCycle, SingularMatrix, UnsupportedOp

EIGENGAP_CLAMP = 1e-10
DEGENERATE_GAP = 1e-6


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "vjp", "op", "name", "requires_grad", "info")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, op="constant", name=None,
                 requires_grad=False):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self.info = {}

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


def constant(value):
    return Node(np.asarray(value))


def parameter(value, name=None):
    """A real leaf that gradients are taken with respect to."""
    value = np.array(value, dtype=float)
    return Node(value, op="parameter", name=name, requires_grad=True)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _make(op, value, parents, vjp):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, op=op, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _fit(g, value):
    g = _unbroadcast(g, np.shape(value))
    if not np.iscomplexobj(value):
        g = np.real(g)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_node(a), as_node(b)
    return _make("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _make("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a):
    a = as_node(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (g * np.conj(bv), g * np.conj(av)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        ga = g / np.conj(bv)
        return ga, -ga * np.conj(out)

    return _make("div", out, (a, b), vjp)


def conj(a):
    a = as_node(a)
    return _make("conj", np.conj(a.value), (a,), lambda g: (np.conj(g),))


def real(a):
    a = as_node(a)
    return _make("real", np.real(a.value), (a,), lambda g: (np.real(g).astype(complex),))


def to_complex(re, im):
    re, im = as_node(re), as_node(im)
    return _make("complex", re.value + 1j * im.value, (re, im),
                 lambda g: (np.real(g), np.imag(g)))


def abs2(a):
    """Squared magnitude, real output."""
    a = as_node(a)
    av = a.value
    return _make("abs2", np.real(av * np.conj(av)), (a,), lambda g: (2.0 * g * av,))


def absolute(a):
    a = as_node(a)
    av = a.value
    mag = np.abs(av)

    def vjp(g):
        if np.iscomplexobj(av):
            safe = np.where(mag > 0, mag, 1.0)
            return (g * np.where(mag > 0, av / safe, 0.0),)
        return (g * np.sign(av),)

    return _make("abs", mag, (a,), vjp)


def sqrt(a):
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def sigmoid(a):
    a = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for real ``a`` and a constant floor."""
    a = as_node(a)
    keep = a.value >= floor
    return _make("maximum", np.where(keep, a.value, floor), (a,),
                 lambda g: (np.where(keep, g, 0.0),))


def where(cond, a, b):
    a, b = as_node(a), as_node(b)
    cond = np.asarray(cond, dtype=bool)
    return _make("where", np.where(cond, a.value, b.value), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ---------------------------------------------------------------- shape ops

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = np.shape(a.value)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    n = np.size(a.value) if axis is None else np.prod(
        [np.shape(a.value)[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_node(a)
    old = np.shape(a.value)
    return _make("reshape", np.reshape(a.value, shape), (a,),
                 lambda g: (np.reshape(g, old),))


def expand_dims(a, axis):
    a = as_node(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def index(a, key):
    a = as_node(a)
    av = a.value

    def vjp(g):
        out = np.zeros(np.shape(av), dtype=np.result_type(av, g))
        np.add.at(out, key, g)
        return (out,)

    return _make("index", av[key], (a,), vjp)


def gather(a, idx):
    """``a[..., idx[...]]`` along the last axis with one index per batch entry."""
    a = as_node(a)
    idx = np.asarray(idx)[..., None]
    av = a.value

    def vjp(g):
        out = np.zeros(np.shape(av), dtype=np.result_type(av, g))
        np.put_along_axis(out, idx, np.asarray(g)[..., None], axis=-1)
        return (out,)

    return _make("gather", np.take_along_axis(av, idx, axis=-1)[..., 0], (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def _herm(m):
    return 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))


def matvec(a, v):
    a, v = as_node(a), as_node(v)
    av, vv = a.value, v.value
    out = np.einsum("...nm,...m->...n", av, vv)

    def vjp(g):
        ga = g[..., :, None] * np.conj(vv)[..., None, :]
        gv = np.einsum("...nm,...n->...m", np.conj(av), g)
        return ga, gv

    return _make("matvec", out, (a, v), vjp)


def vdot(a, b):
    """``sum(conj(a) * b)`` over the last axis."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = np.sum(np.conj(av) * bv, axis=-1)

    def vjp(g):
        g = np.asarray(g)[..., None]
        return np.conj(g) * bv, g * av

    return _make("vdot", out, (a, b), vjp)


def hermitian(a):
    a = as_node(a)
    return _make("hermitize", _herm(a.value), (a,), lambda g: (_herm(g),))


def solve(a, b):
    """Batched ``A^-1 b`` for vector right-hand sides."""
    a, b = as_node(a), as_node(b)
    av = a.value
    try:
        x = np.linalg.solve(av, b.value[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc

    def vjp(g):
        gb = np.linalg.solve(np.conj(np.swapaxes(av, -1, -2)), g[..., None])[..., 0]
        ga = -gb[..., :, None] * np.conj(x)[..., None, :]
        return ga, gb

    return _make("solve", x, (a, b), vjp)


def weighted_covariance(mask, outer):
    """``<m(t) x(t) x(t)^H>_t`` per frequency.

    ``mask`` has shape (F, T) (real or complex); ``outer`` is the constant
    stack of per-frame outer products with shape (F, T, N, N).
    """
    mask = as_node(mask)
    f, t, n, _ = outer.shape
    flat = outer.reshape(f, t, n * n)
    mv = mask.value
    out = np.matmul(mv[:, None, :].astype(flat.dtype), flat)[:, 0, :].reshape(f, n, n) / t

    def vjp(g):
        gm = np.matmul(np.conj(flat), g.reshape(f, n * n, 1))[..., 0] / t
        return (gm,)

    return _make("covariance", out, (mask,), vjp)


def eigvec(a, b=None, which="max"):
    """Extreme eigenvector of ``A v = lam B v`` (or ``A v = lam v`` if b is None).

    The output is B-normalized (unit norm for the standard problem) with the
    arbitrary phase returned by the eigensolver; compose with
    :func:`normalize_canonical` for a gauge-independent result. Eigenvector
    adjoints use the simple-eigenpair formula; eigengap denominators below
    ``1e-10 * max|lam|`` are clamped and the node is flagged.
    """
    a = as_node(a)
    b = None if b is None else as_node(b)
    if b is None:
        lam, vecs = np.linalg.eigh(_herm(a.value))
    else:
        lam, vecs = linalg.gev_decompose(a.value, b.value)
    i = -1 if which == "max" else 0
    li = lam[..., i]
    v = vecs[..., i]
    gaps = li[..., None] - lam
    scale = np.maximum(np.max(np.abs(lam), axis=-1, keepdims=True), 1e-300)
    tol = EIGENGAP_CLAMP * scale
    n = lam.shape[-1]
    others = np.ones(n, dtype=bool)
    others[i] = False
    small = (np.abs(gaps) < tol) & others
    clamped = np.where(small, np.where(gaps >= 0, tol, -tol), gaps)
    inv_gaps = np.where(others, 1.0 / np.where(others, clamped, 1.0), 0.0)
    other_gaps = np.abs(gaps[..., others]) if n > 1 else np.full(li.shape + (1,), np.inf)

    def vjp(g):
        coeff = np.einsum("...nj,...n->...j", np.conj(vecs), g) * inv_gaps
        r = np.einsum("...nj,...j->...n", vecs, coeff)
        ga = _herm(r[..., :, None] * np.conj(v)[..., None, :])
        if b is None:
            return (ga,)
        along = np.real(np.sum(np.conj(v) * g, axis=-1))
        vv = v[..., :, None] * np.conj(v)[..., None, :]
        gb = -li[..., None, None] * ga - 0.5 * along[..., None, None] * vv
        return ga, gb

    parents = (a,) if b is None else (a, b)
    node = _make("sev" if b is None else "gev", v, parents, vjp)
    anorm = np.linalg.norm(a.value, axis=(-2, -1))
    node.info["min_gap"] = np.min(other_gaps, axis=-1)
    node.info["eigenvalues"] = lam
    node.info["clamped"] = bool(np.any(small))
    node.info["degenerate"] = bool(np.any(node.info["min_gap"] < DEGENERATE_GAP * anorm))
    return node


def normalize_canonical(v):
    """Unit-norm vector with its largest-magnitude entry made real non-negative."""
    v = as_node(v)
    idx = linalg.canonical_phase_index(v.value)
    pivot = gather(v, idx)
    phase = conj(pivot) / absolute(pivot)
    u = v * expand_dims(phase, -1)
    norm = sqrt(sum(abs2(u), axis=-1, keepdims=True))
    return u / norm


# ---------------------------------------------------------------- backward

def _topological(loss):
    order = []
    state = {}
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphCycle(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if not p.requires_grad:
                continue
            ps = state.get(id(p))
            if ps == 1:
                raise GraphCycle(f"cycle detected at {p!r}")
            if ps is None:
                stack.append((p, False))
    return order


class Gradients(dict):
    """Mapping parameter node -> gradient array, plus backward warnings."""

    def __init__(self, *args, warnings=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.warnings = list(warnings or [])


def backward(loss):
    """Gradients of a real scalar ``loss`` with respect to every reachable parameter."""
    if np.iscomplexobj(loss.value) or np.size(loss.value) != 1:
        raise ValueError("loss must be a real scalar")
    result = Gradients()
    if not loss.requires_grad:
        return result
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.value, dtype=float)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "parameter":
            result[node] = np.real(g)
            continue
        if node.info.get("clamped"):
            result.warnings.append(f"near-degenerate eigengap clamped in {node.op} node")
        if node.vjp is None:
            raise UnsupportedOp(f"no adjoint registered for op {node.op!r}")
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _fit(pg, parent.value)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return result


def nodes(loss):
    """All differentiable nodes reachable from ``loss`` in topological order."""
    return _topological(loss) if loss.requires_grad else []


@dataclass
class GradientReport:
    parameter_count: int
    max_relative_error: float
    errors: list = field(default_factory=list)
    flagged: bool = False

    @property
    def passed(self):
        return self.flagged or self.max_relative_error <= 1e-4


def check_gradients(build, params, step=1e-4, floor=1e-3):
    """Compare reverse-mode gradients with central finite differences.

    ``build`` maps the list of parameter nodes to a scalar loss node and is
    re-evaluated on perturbed copies. Per-parameter error is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor * max_j |g_fd_j|)``.
    Instances whose eigen-solves have a gap below ``1e-6 * ||A||_F`` are
    flagged rather than failed.
    """
    params = list(params)
    count = int(np.sum([p.value.size for p in params]))
    if count == 0:
        return GradientReport(0, 0.0, [], False)
    loss = build(params)
    grads = backward(loss)
    flagged = any(n.info.get("degenerate") for n in nodes(loss))
    analytic = np.concatenate([np.ravel(grads.get(p, np.zeros_like(p.value))) for p in params])
    numeric = np.empty(count)
    pos = 0
    for p_i, p in enumerate(params):
        base = p.value
        for j in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert.flat[j] += sign * step
                trial = [parameter(pert) if k == p_i else q for k, q in enumerate(params)]
                vals.append(float(build(trial).value))
            numeric[pos] = (vals[0] - vals[1]) / (2.0 * step)
            pos += 1
    scale = max(float(np.max(np.abs(numeric))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    errors = np.abs(analytic - numeric) / denom
    return GradientReport(count, float(np.max(errors)), errors.tolist(), flagged)
