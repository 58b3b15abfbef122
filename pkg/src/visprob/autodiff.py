"""Reverse-mode automatic differentiation on an append-only scalar tape.

Nodes are stored as parallel lists (value, parent ids, local partials); the
append order is topological by construction, so the backward pass is a single
reverse sweep. Parameter leaves are keyed by ``(array name, flat index)`` and
deduplicated, so gradients accumulate per coordinate.

Program supports are tiny (dozens of candidates), so a scalar tape is simpler
and fast enough; ``softmax`` and ``weighted_sum`` are fused nodes to keep op
counts down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    NonFiniteGradientError,
    NonFiniteValueError,
    ShapeMismatchError,
)

Num = "DiffScalar | float"


class DiffScalar:
    """Handle to one tape node; supports arithmetic with floats and peers."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: "Tape", i: int):
        self.tape = tape
        self.i = i

    @property
    def value(self) -> float:
        return self.tape.vals[self.i]

    def __repr__(self) -> str:
        return f"DiffScalar({self.value:.6g})"

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        t = self.tape
        if isinstance(other, DiffScalar):
            return t._push(self.value + other.value, (self.i, other.i), (1.0, 1.0))
        return t._push(self.value + other, (self.i,), (1.0,))

    __radd__ = __add__

    def __sub__(self, other):
        t = self.tape
        if isinstance(other, DiffScalar):
            return t._push(self.value - other.value, (self.i, other.i), (1.0, -1.0))
        return t._push(self.value - other, (self.i,), (1.0,))

    def __rsub__(self, other):
        return self.tape._push(other - self.value, (self.i,), (-1.0,))

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, DiffScalar):
            return t._push(self.value * other.value, (self.i, other.i),
                           (other.value, self.value))
        return t._push(self.value * other, (self.i,), (float(other),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        if isinstance(other, DiffScalar):
            b = other.value
            return t._push(self.value / b, (self.i, other.i),
                           (1.0 / b, -self.value / (b * b)))
        return t._push(self.value / other, (self.i,), (1.0 / other,))

    def __rtruediv__(self, other):
        b = self.value
        return self.tape._push(other / b, (self.i,), (-other / (b * b),))

    def __neg__(self):
        return self.tape._push(-self.value, (self.i,), (-1.0,))

    def log(self) -> "DiffScalar":
        return self.tape._push(math.log(self.value), (self.i,), (1.0 / self.value,))

    def exp(self) -> "DiffScalar":
        v = math.exp(self.value)
        return self.tape._push(v, (self.i,), (v,))

    def sigmoid(self) -> "DiffScalar":
        x = self.value
        s = 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
        return self.tape._push(s, (self.i,), (s * (1.0 - s),))

    def clamp_min(self, floor: float) -> "DiffScalar":
        v = self.value
        if v >= floor:
            return self.tape._push(v, (self.i,), (1.0,))
        return self.tape._push(floor, (self.i,), (0.0,))


class Tape:
    """Append-only record of scalar operations for one forward pass."""

    __slots__ = ("vals", "args", "parts", "_leaf_ids", "_leaf_keys")

    def __init__(self):
        self.vals: list[float] = []
        self.args: list[tuple[int, ...]] = []
        self.parts: list[tuple[float, ...]] = []
        self._leaf_ids: dict[tuple[str, int], int] = {}
        self._leaf_keys: list[tuple[str, int]] = []  # aligned with insertion order

    def __len__(self) -> int:
        return len(self.vals)

    def _push(self, value: float, parents: tuple[int, ...],
              partials: tuple[float, ...]) -> DiffScalar:
        if not math.isfinite(value):
            raise NonFiniteValueError(f"non-finite value {value} on tape")
        self.vals.append(value)
        self.args.append(parents)
        self.parts.append(partials)
        return DiffScalar(self, len(self.vals) - 1)

    # leaves ---------------------------------------------------------------

    def leaf(self, name: str, index: int, value: float) -> DiffScalar:
        """Parameter leaf for coordinate ``index`` of array ``name`` (cached)."""
        key = (name, index)
        i = self._leaf_ids.get(key)
        if i is not None:
            return DiffScalar(self, i)
        node = self._push(float(value), (), ())
        self._leaf_ids[key] = node.i
        self._leaf_keys.append(key)
        return node

    def constant(self, value: float) -> DiffScalar:
        return self._push(float(value), (), ())

    # fused ops --------------------------------------------------------------

    def weighted_sum(self, terms: Sequence[tuple[DiffScalar, float]],
                     const: float = 0.0) -> DiffScalar:
        """``const + sum(coeff * scalar)`` as a single node."""
        total = const
        parents = []
        partials = []
        for s, c in terms:
            total += c * s.value
            parents.append(s.i)
            partials.append(c)
        return self._push(total, tuple(parents), tuple(partials))

    def sum(self, scalars: Iterable, const: float = 0.0) -> DiffScalar:
        """Sum of scalars and floats; floats fold into the constant."""
        total = const
        parents = []
        for s in scalars:
            if isinstance(s, DiffScalar):
                total += s.value
                parents.append(s.i)
            else:
                total += s
        return self._push(total, tuple(parents), (1.0,) * len(parents))

    def softmax(self, logits: Sequence[DiffScalar]) -> list[DiffScalar]:
        """Fused, max-shifted softmax; each output depends on every logit."""
        xs = [s.value for s in logits]
        m = max(xs)
        exps = [math.exp(x - m) for x in xs]
        z = sum(exps)
        ps = [e / z for e in exps]
        parents = tuple(s.i for s in logits)
        out = []
        for i, pi in enumerate(ps):
            partials = tuple(pi * ((1.0 if i == j else 0.0) - pj)
                             for j, pj in enumerate(ps))
            out.append(self._push(pi, parents, partials))
        return out

    # backward ----------------------------------------------------------------

    def backward(self, loss: DiffScalar, params: "ParamStore") -> dict[str, np.ndarray]:
        """Adjoint sweep from ``loss``; returns one gradient array per parameter.

        Parameters never touched by the forward pass get zero gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        adj = [0.0] * (loss.i + 1)
        adj[loss.i] = 1.0
        args = self.args
        parts = self.parts
        for i in range(loss.i, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            ps = args[i]
            if not ps:
                continue
            qs = parts[i]
            for k in range(len(ps)):
                adj[ps[k]] += a * qs[k]
        grads = {name: np.zeros(params.shape(name)) for name in params.names()}
        n = loss.i
        for name, index in self._leaf_keys:
            node = self._leaf_ids[(name, index)]
            if node <= n:
                grads[name].flat[index] += adj[node]
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}")
        return grads


# --- mixed float / DiffScalar arithmetic --------------------------------------


def mixed_mul(a, b):
    """Product of two probabilities, either floats or DiffScalars.

    Multiplications by exact 0.0/1.0 floats short-circuit so that indicator
    factor entries do not grow the tape.
    """
    if isinstance(a, DiffScalar):
        if isinstance(b, DiffScalar):
            return a * b
        if b == 0.0:
            return 0.0
        if b == 1.0:
            return a
        return a * b
    if a == 0.0:
        return 0.0
    if isinstance(b, DiffScalar):
        if a == 1.0:
            return b
        return b * a
    return a * b


def mixed_sum(terms):
    """Sum of floats and DiffScalars; pure-float input stays a float."""
    const = 0.0
    scalars = []
    for t in terms:
        if isinstance(t, DiffScalar):
            scalars.append(t)
        else:
            const += t
    if not scalars:
        return const
    return scalars[0].tape.sum(scalars, const=const)


def num(x) -> float:
    """Float view of a float-or-DiffScalar."""
    return x.value if isinstance(x, DiffScalar) else float(x)


# --- parameters ------------------------------------------------------------


CHECKPOINT_VERSION = 1


class ParamStore:
    """Named float64 arrays for the trainable module parameters."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def register(self, name: str, shape: tuple[int, ...], init: np.ndarray | None = None):
        if name in self._arrays:
            raise ValueError(f"parameter {name!r} already registered")
        if init is None:
            arr = np.zeros(shape, dtype=np.float64)
        else:
            arr = np.asarray(init, dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeMismatchError(f"{name}: init shape {arr.shape} != {shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"{name}: non-finite initial values")
        self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._arrays[name].shape

    def num_coords(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self._arrays.items():
            out._arrays[name] = arr.copy()
        return out

    # serialization ---------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "version": CHECKPOINT_VERSION,
            "params": {
                name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                for name, arr in self._arrays.items()
            },
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        payload = json.loads(text)
        version = payload.get("version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        store = cls()
        for name, entry in payload["params"].items():
            shape = tuple(entry["shape"])
            arr = np.array(entry["values"], dtype=np.float64).reshape(shape)
            store.register(name, shape, arr)
        return store

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# --- optimizers --------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: str = "adamw"  # adamw | sgd
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class SgdMomentum:
    """SGD with classical momentum; returns a fresh ParamStore per step."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._vel: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> ParamStore:
        out = params.copy()
        for name in params.names():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != params.shape(name):
                raise ShapeMismatchError(f"{name}: grad shape {g.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            v = self._vel.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self._vel[name] = v
            out[name][...] = params[name] - self.lr * v
        return out


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> ParamStore:
        self._t += 1
        out = params.copy()
        for name in params.names():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != params.shape(name):
                raise ShapeMismatchError(f"{name}: grad shape {g.shape}")
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            mhat = m / (1 - self.beta1 ** self._t)
            vhat = v / (1 - self.beta2 ** self._t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * params[name]
            out[name][...] = params[name] - self.lr * update
        return out


def make_optimizer(config: OptimizerConfig):
    if config.kind == "sgd":
        return SgdMomentum(lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)
    if config.kind == "adamw":
        return AdamW(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                     eps=config.eps, weight_decay=config.weight_decay)
    raise ValueError(f"unknown optimizer kind {config.kind!r}")


# --- finite-difference gradient checking --------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    failures: list = field(default_factory=list)  # (name, index, analytic, numeric, rel)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def grad_check(loss_fn: Callable[[ParamStore], DiffScalar],
               params: ParamStore,
               eps: float = 1e-5,
               tolerance: float = 1e-4,
               max_coords: int | None = None,
               rng=None,
               analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic gradients to central differences, coordinate-wise.

    ``loss_fn`` must build a fresh tape per call and be deterministic. When
    ``max_coords`` is set, coordinates with nonzero analytic gradient are
    checked first (they are where disagreements hide), and the remaining
    budget samples zero-gradient coordinates.
    """
    if analytic is None:
        loss = loss_fn(params)
        analytic = loss.tape.backward(loss, params)

    coords: list[tuple[str, int]] = []
    hot = []
    cold = []
    for name in params.names():
        flat = analytic[name].ravel()
        for idx in range(flat.size):
            (hot if flat[idx] != 0.0 else cold).append((name, idx))
    if max_coords is None:
        coords = hot + cold
    else:
        if rng is not None:
            rng.shuffle(hot)
            rng.shuffle(cold)
        coords = hot[:max_coords]
        coords += cold[: max(0, max_coords - len(coords))]

    report = GradCheckReport(max_rel_err=0.0, n_checked=0, tolerance=tolerance)
    for name, idx in coords:
        probe = params.copy()
        probe[name].flat[idx] += eps
        up = loss_fn(probe).value
        probe[name].flat[idx] -= 2 * eps
        down = loss_fn(probe).value
        numeric = (up - down) / (2 * eps)
        ana = float(analytic[name].flat[idx])
        rel = _rel_err(ana, numeric)
        report.n_checked += 1
        if rel > report.max_rel_err:
            report.max_rel_err = rel
        if rel > tolerance:
            report.failures.append((name, idx, ana, numeric, rel))
    return report
