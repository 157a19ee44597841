"""Minimal reverse-mode differentiation over a fixed operation set.

A :class:`Tape` records operations define-by-run; each node caches its
value (a float64 numpy array of rank 0..2) and a vector-Jacobian
closure. ``backward`` walks the node list in strict reverse id order
once, accumulating gradients additively, and returns one gradient per
registered parameter (zeros for parameters the loss never reached).

Hard Gumbel routing uses the straight-through convention: the forward
value is one-hot, the backward pass differentiates the underlying soft
weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ArgumentError, NumericalError

_LAYER_NORM_EPS = 1e-5


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    value: np.ndarray
    vjp: object = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim > 2:
        raise ArgumentError(f"tape values are rank 0..2, got shape {v.shape}")
    return v


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only operation record with a trainable-parameter registry."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    # -- node construction -------------------------------------------------

    def _push(self, op, inputs, value, vjp) -> Node:
        node = Node(len(self.nodes), op, tuple(inputs), _as_value(value), vjp)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        return self._push("leaf", (), value, None)

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ArgumentError(f"parameter {name!r} registered twice")
        node = self._push("param", (), value, None)
        self.params[name] = node.id
        return node

    # -- operations ---------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ArgumentError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        val = a.value @ b.value

        def vjp(g):
            return [(a, g @ b.value.T), (b, a.value.T @ g)]

        return self._push("matmul", (a.id, b.id), val, vjp)

    def matvec(self, a: Node, x: Node) -> Node:
        if a.value.ndim != 2 or x.value.ndim != 1 or a.shape[1] != x.shape[0]:
            raise ArgumentError(f"matvec shape mismatch: {a.shape} @ {x.shape}")
        val = a.value @ x.value

        def vjp(g):
            return [(a, np.outer(g, x.value)), (x, a.value.T @ g)]

        return self._push("matvec", (a.id, x.id), val, vjp)

    def transpose(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ArgumentError(f"transpose needs a 2-D value, got {a.shape}")
        return self._push("transpose", (a.id,), a.value.T, lambda g: [(a, g.T)])

    def add(self, a: Node, b: Node) -> Node:
        try:
            val = a.value + b.value
        except ValueError:
            raise ArgumentError(f"add shape mismatch: {a.shape} + {b.shape}") from None

        def vjp(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

        return self._push("add", (a.id, b.id), val, vjp)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("scale", (a.id,), a.value * c, lambda g: [(a, g * c)])

    def add_const(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("add_const", (a.id,), a.value + c, lambda g: [(a, g)])

    def smul(self, s: Node, a: Node) -> Node:
        if s.value.ndim != 0:
            raise ArgumentError(f"smul scalar operand must be rank 0, got {s.shape}")
        val = float(s.value) * a.value

        def vjp(g):
            return [(s, np.asarray(np.sum(g * a.value))), (a, float(s.value) * g)]

        return self._push("smul", (s.id, a.id), val, vjp)

    def pick(self, v: Node, i: int) -> Node:
        if v.value.ndim != 1:
            raise ArgumentError(f"pick needs a vector, got {v.shape}")
        i = int(i)

        def vjp(g):
            gv = np.zeros_like(v.value)
            gv[i] = float(g)
            return [(v, gv)]

        return self._push("pick", (v.id,), v.value[i], vjp)

    def gather(self, v: Node, indices) -> Node:
        if v.value.ndim != 1:
            raise ArgumentError(f"gather needs a vector, got {v.shape}")
        idx = np.asarray(indices, dtype=np.int64)

        def vjp(g):
            gv = np.zeros_like(v.value)
            np.add.at(gv, idx, g)
            return [(v, gv)]

        return self._push("gather", (v.id,), v.value[idx], vjp)

    def slice_cols(self, a: Node, j0: int, j1: int) -> Node:
        if a.value.ndim != 2:
            raise ArgumentError(f"slice_cols needs a matrix, got {a.shape}")

        def vjp(g):
            ga = np.zeros_like(a.value)
            ga[:, j0:j1] = g
            return [(a, ga)]

        return self._push("slice_cols", (a.id,), a.value[:, j0:j1], vjp)

    def concat_cols(self, parts: list) -> Node:
        if not parts:
            raise ArgumentError("concat_cols needs at least one part")
        widths = [p.shape[1] for p in parts]
        val = np.concatenate([p.value for p in parts], axis=1)

        def vjp(g):
            out, j = [], 0
            for p, w in zip(parts, widths):
                out.append((p, g[:, j : j + w]))
                j += w
            return out

        return self._push("concat_cols", tuple(p.id for p in parts), val, vjp)

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._push("relu", (a.id,), a.value * mask, lambda g: [(a, g * mask)])

    def sigmoid(self, a: Node) -> Node:
        val = 1.0 / (1.0 + np.exp(-a.value))
        return self._push("sigmoid", (a.id,), val, lambda g: [(a, g * val * (1.0 - val))])

    def row_softmax(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ArgumentError(f"row_softmax needs a matrix, got {a.shape}")
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            dot = np.sum(g * y, axis=1, keepdims=True)
            return [(a, y * (g - dot))]

        return self._push("row_softmax", (a.id,), y, vjp)

    def layer_norm(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ArgumentError(f"layer_norm needs a matrix, got {a.shape}")
        mu = a.value.mean(axis=1, keepdims=True)
        var = a.value.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LAYER_NORM_EPS)
        y = (a.value - mu) * inv

        def vjp(g):
            gm = g.mean(axis=1, keepdims=True)
            gy = np.sum(g * y, axis=1, keepdims=True) / a.shape[1]
            return [(a, inv * (g - gm - y * gy))]

        return self._push("layer_norm", (a.id,), y, vjp)

    def mean_pool_rows(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ArgumentError(f"mean_pool_rows needs a matrix, got {a.shape}")
        t = a.shape[0]

        def vjp(g):
            return [(a, np.tile(g / t, (t, 1)))]

        return self._push("mean_pool_rows", (a.id,), a.value.mean(axis=0), vjp)

    def cross_entropy(self, logits: Node, target: int) -> Node:
        if logits.value.ndim != 1:
            raise ArgumentError(f"cross_entropy needs a logits vector, got {logits.shape}")
        t = int(target)
        if not 0 <= t < logits.shape[0]:
            raise ArgumentError(f"target {t} out of range for {logits.shape[0]} classes")
        z = logits.value - logits.value.max()
        lse = np.log(np.sum(np.exp(z)))
        val = lse - z[t]
        probs = np.exp(z - lse)

        def vjp(g):
            gl = probs.copy()
            gl[t] -= 1.0
            return [(logits, float(g) * gl)]

        return self._push("cross_entropy", (logits.id,), val, vjp)

    def gumbel_softmax(self, logits: Node, temperature: float, noise, hard: bool) -> Node:
        """Gumbel-softmax with the straight-through estimator.

        ``noise`` must be pre-drawn (see numkit.gumbel_noise) so the node
        is a deterministic function of its input; hard mode emits the
        one-hot forward value but backpropagates through the soft weights.
        """
        if logits.value.ndim != 1:
            raise ArgumentError(f"gumbel_softmax needs a logits vector, got {logits.shape}")
        g_noise = np.asarray(noise, dtype=np.float64).ravel()
        soft = numkit.gumbel_softmax(logits.value, temperature, hard=False, noise=g_noise)
        if hard:
            val = np.zeros_like(soft)
            val[int(np.argmax(soft))] = 1.0
        else:
            val = soft

        def vjp(g):
            dot = np.sum(g * soft)
            return [(logits, soft * (g - dot) / temperature)]

        return self._push("gumbel_softmax", (logits.id,), val, vjp)

    def mean_scalars(self, parts: list) -> Node:
        if not parts:
            raise ArgumentError("mean_scalars needs at least one part")
        for p in parts:
            if p.value.ndim != 0:
                raise ArgumentError(f"mean_scalars got a non-scalar of shape {p.shape}")
        n = len(parts)
        val = sum(float(p.value) for p in parts) / n

        def vjp(g):
            return [(p, np.asarray(float(g) / n)) for p in parts]

        return self._push("mean_scalars", tuple(p.id for p in parts), val, vjp)

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        if loss.value.ndim != 0:
            raise ArgumentError(f"loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * (loss.id + 1)
        grads[loss.id] = np.asarray(1.0)
        for nid in range(loss.id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for inp, contrib in node.vjp(g):
                if grads[inp.id] is None:
                    grads[inp.id] = np.zeros_like(inp.value)
                grads[inp.id] = grads[inp.id] + contrib
        out = {}
        for name, nid in self.params.items():
            g = grads[nid] if nid <= loss.id else None
            out[name] = np.zeros_like(self.nodes[nid].value) if g is None else g
        return out


@dataclass
class GradReport:
    """Max relative error between analytic and central-difference gradients."""

    per_param: dict
    epsilon: float

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def __str__(self):
        lines = [f"grad check (epsilon={self.epsilon:g})"]
        for name in sorted(self.per_param):
            lines.append(f"  {name}: {self.per_param[name]:.3e}")
        return "\n".join(lines)


def grad_check(build_loss, params: dict, epsilon: float = 1e-5) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` maps a {name: array} dict to a (tape, loss node) pair
    and must be deterministic (freeze any sampling noise before calling).
    Every entry of ``params`` is probed coordinate by coordinate.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ArgumentError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")

    def loss_value(p):
        _, node = build_loss(p)
        v = float(node.value)
        if not np.isfinite(v):
            raise NumericalError("non-finite loss during finite-difference probe")
        return v

    tape, loss = build_loss(params)
    if not np.isfinite(float(loss.value)):
        raise NumericalError("non-finite loss at the base point")
    analytic = tape.backward(loss)

    report = {}
    for name, value in params.items():
        base = np.asarray(value, dtype=np.float64)
        ana = np.asarray(analytic.get(name, np.zeros_like(base)), dtype=np.float64)
        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            probe = {k: (v.copy() if k == name else v) for k, v in params.items()}
            pf = probe[name].reshape(-1)
            pf[i] = orig + epsilon
            up = loss_value(probe)
            pf[i] = orig - epsilon
            down = loss_value(probe)
            numeric = (up - down) / (2.0 * epsilon)
            a = float(ana.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return GradReport(report, epsilon)
