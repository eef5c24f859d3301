"""Minimal neural kernel: a reverse-mode tape, dense/GRU layers, and Adam.

Tensors are plain float64 numpy arrays (shape plus row-major values).  The
tape records a Wengert-style graph of ``Node`` objects; ``tape_backward``
walks it once to produce gradients for every named parameter, which is all
the machinery backprop-through-time over the two smoothing passes needs.
The op set is deliberately small: matmuls, add/sub/mul, scaling, sigmoid,
tanh, relu, reshape, concatenate, slicing, and a full sum.

Batched vectors are rows, shape (B, d); affine layers compute x @ W^T + b so
both the forward product and the weight-gradient land on fast GEMM paths.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

Array = np.ndarray


class MissingGradientError(RuntimeError):
    """A parameter was requested in tape_backward but never recorded on the tape."""


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN or infinity; carries the offending parameter name."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or belongs to another architecture."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference mode)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Node:
    """One recorded value; parents and per-parent vector-Jacobian products."""

    __slots__ = ("value", "_parents", "_vjps")

    def __init__(self, value: Array, parents: tuple = (), vjps: tuple = ()):
        self.value = value
        if _GRAD_ENABLED[-1]:
            self._parents = parents
            self._vjps = vjps
        else:
            self._parents = ()
            self._vjps = ()

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def leaf(value) -> Node:
    """Wrap an array as a tape leaf (a parameter or a constant input)."""
    return Node(np.asarray(value, dtype=np.float64))


constant = leaf


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value + b.value,
        (a, b),
        (lambda g, s=a.value.shape: _unbroadcast(g, s),
         lambda g, s=b.value.shape: _unbroadcast(g, s)),
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value - b.value,
        (a, b),
        (lambda g, s=a.value.shape: _unbroadcast(g, s),
         lambda g, s=b.value.shape: -_unbroadcast(g, s)),
    )


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape),
         lambda g: _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), (lambda g: g * c,))


def matmul(a, b) -> Node:
    """Matrix product with numpy semantics (operands at least 2-D)."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return Node(
        av @ bv,
        (a, b),
        (lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
         lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)),
    )


def matmul_t(a, b) -> Node:
    """a @ b^T: the affine-layer product whose forward and adjoint are GEMMs."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim != 2:
        raise ValueError("matmul_t expects a batched 2-D left and a 2-D right operand")
    return Node(
        av @ bv.T,
        (a, b),
        (lambda g: _unbroadcast(g @ bv, av.shape),
         lambda g: np.swapaxes(g, -1, -2) @ av if g.ndim == 2
         else np.einsum("...o,...i->oi", g, av)),
    )


def matvec(a, b) -> Node:
    """Batched matrix-vector product: (..., m, n) with (..., n) -> (..., m)."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return Node(
        np.einsum("...mn,...n->...m", av, bv),
        (a, b),
        (lambda g: _unbroadcast(np.einsum("...m,...n->...mn", g, bv), av.shape),
         lambda g: _unbroadcast(np.einsum("...mn,...m->...n", av, g), bv.shape)),
    )


def sigmoid(a) -> Node:
    a = _as_node(a)
    y = expit(a.value)
    return Node(y, (a,), (lambda g: g * (y * (1.0 - y)),))


def tanh(a) -> Node:
    a = _as_node(a)
    y = np.tanh(a.value)
    return Node(y, (a,), (lambda g: g * (1.0 - y * y),))


def relu(a) -> Node:
    a = _as_node(a)
    y = np.maximum(a.value, 0.0)
    return Node(y, (a,), (lambda g, x=a.value: g * (x > 0),))


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def concat(parts: Sequence, axis: int = -1) -> Node:
    parts = [_as_node(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        nd = parts[i].value.ndim
        ax = axis if axis >= 0 else nd + axis
        sl = [slice(None)] * nd
        sl[ax] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Node(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def index(a, key) -> Node:
    """Basic slicing; the adjoint scatters the gradient back into zeros."""
    a = _as_node(a)
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[key] = g
        return out

    return Node(av[key], (a,), (vjp,))


def ssum(a) -> Node:
    """Sum of all elements, as a 0-d node (the usual loss head)."""
    a = _as_node(a)
    shp = a.value.shape
    return Node(np.asarray(a.value.sum()), (a,), (lambda g: np.broadcast_to(g, shp),))


def sumsq(a) -> Node:
    """Sum of squared elements."""
    a = _as_node(a)
    return ssum(mul(a, a))


def tape_backward(loss: Node, params: Mapping[str, Node]) -> dict[str, Array]:
    """Accumulate d(loss)/d(theta) for every named parameter node.

    The loss must be scalar.  Raises MissingGradientError if a requested
    parameter never entered the recorded computation.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")

    # Post-order DFS; the resulting order lists parents before children.
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        if node._parents:
            del grads[id(node)]

    out: dict[str, Array] = {}
    for name, node in params.items():
        g = grads.get(id(node))
        if g is None:
            raise MissingGradientError(f"parameter {name!r} was not recorded on the tape")
        if not (g.flags.owndata and g.flags.writeable):
            g = g.copy()  # callers may mutate (e.g. gradient clipping)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# Parameters and layers
# ---------------------------------------------------------------------------

def param_init(shape, scheme: str, seed: int, fan_in: Optional[int] = None) -> Array:
    """Fresh parameter tensor: 'zeros' or 'uniform-fan-in' (U(-1/sqrt(f), 1/sqrt(f)))."""
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "uniform-fan-in":
        rng = np.random.default_rng(seed)
        return _uniform_fan_in(rng, shape, fan_in)
    raise ValueError(f"unknown init scheme {scheme!r}")


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: Optional[int]) -> Array:
    f = int(fan_in) if fan_in is not None else int(shape[-1])
    bound = 1.0 / np.sqrt(max(f, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Ordered map of named parameter arrays.

    Arrays are shared with the layers that own them and updated in place by
    the optimizer, so layer attributes and the store never diverge.
    """

    def __init__(self):
        self._params: dict[str, Array] = {}

    def add(self, name: str, array: Array) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if array.dtype != np.float64:
            raise ValueError(f"parameter {name!r} must be float64")
        self._params[name] = array

    def __getitem__(self, name: str) -> Array:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_count(self) -> int:
        return int(sum(a.size for a in self._params.values()))

    def leaves(self) -> dict[str, Node]:
        """One leaf node per parameter, for building a fresh tape."""
        return {k: leaf(v) for k, v in self._params.items()}

    def copy_values(self) -> dict[str, Array]:
        return {k: v.copy() for k, v in self._params.items()}

    def load_values(self, values: Mapping[str, Array]) -> None:
        """Copy values into the existing arrays (shapes must match exactly)."""
        missing = set(self._params) ^ set(values)
        if missing:
            raise CheckpointError(f"parameter names do not match: {sorted(missing)}")
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._params[k].shape:
                raise CheckpointError(
                    f"shape mismatch for {k!r}: {v.shape} vs {self._params[k].shape}"
                )
            self._params[k][...] = v

    def scale_values(self, c: float) -> None:
        for v in self._params.values():
            v *= c

    def arch_hash(self, descriptor: str = "") -> str:
        """Stable hash of the parameter names/shapes plus an architecture descriptor."""
        h = hashlib.sha256()
        h.update(descriptor.encode())
        for k, v in self._params.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
        return h.hexdigest()[:16]


class DenseLayer:
    """Affine layer y = act(x W^T + b) on row-vector inputs (..., in_dim)."""

    def __init__(self, name: str, in_dim: int, out_dim: int, activation: str = "identity"):
        if activation not in ("identity", "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.W = np.zeros((out_dim, in_dim))
        self.b = np.zeros(out_dim)

    def register(self, store: ParamStore) -> None:
        store.add(f"{self.name}.W", self.W)
        store.add(f"{self.name}.b", self.b)

    def init_params(self, rng: np.random.Generator, out_scheme: str = "uniform-fan-in") -> None:
        if out_scheme == "zeros":
            self.W[...] = 0.0
            self.b[...] = 0.0
            return
        self.W[...] = _uniform_fan_in(rng, self.W.shape, self.in_dim)
        self.b[...] = _uniform_fan_in(rng, self.b.shape, self.in_dim)

    def __call__(self, x: Node, params: Mapping[str, Node]) -> Node:
        y = matmul_t(x, params[f"{self.name}.W"]) + params[f"{self.name}.b"]
        return relu(y) if self.activation == "relu" else y


def dense_forward(layer: DenseLayer, x: Array) -> Array:
    """Plain-array evaluation of a dense layer (no tape)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"expected input dim {layer.in_dim}, got {x.shape}")
    y = x @ layer.W.T + layer.b
    if layer.activation == "relu":
        y = np.maximum(y, 0.0)
    return y


class GruLayer:
    """Single GRU cell with the reset gate applied to the recurrent term.

        z  = sigmoid(W_z x + U_z h + b_z)
        r  = sigmoid(W_r x + U_r h + b_r)
        ht = tanh(W_h x + U_h (r * h) + b_h)
        h' = (1 - z) * h + z * ht

    All parameters are initialized uniform with fan-in = hidden size, the
    usual recurrent-layer convention.
    """

    GATES = ("z", "r", "h")

    def __init__(self, name: str, in_dim: int, hidden: int):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden
        for gate in self.GATES:
            setattr(self, f"W_{gate}", np.zeros((hidden, in_dim)))
            setattr(self, f"U_{gate}", np.zeros((hidden, hidden)))
            setattr(self, f"b_{gate}", np.zeros(hidden))

    def register(self, store: ParamStore) -> None:
        for gate in self.GATES:
            store.add(f"{self.name}.W_{gate}", getattr(self, f"W_{gate}"))
            store.add(f"{self.name}.U_{gate}", getattr(self, f"U_{gate}"))
            store.add(f"{self.name}.b_{gate}", getattr(self, f"b_{gate}"))

    def init_params(self, rng: np.random.Generator) -> None:
        for gate in self.GATES:
            for prefix in ("W", "U", "b"):
                arr = getattr(self, f"{prefix}_{gate}")
                arr[...] = _uniform_fan_in(rng, arr.shape, self.hidden)

    def __call__(self, x: Node, h: Node, params: Mapping[str, Node]) -> Node:
        p = {k: params[f"{self.name}.{k}"] for k in
             ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")}
        z = sigmoid(matmul_t(x, p["W_z"]) + matmul_t(h, p["U_z"]) + p["b_z"])
        r = sigmoid(matmul_t(x, p["W_r"]) + matmul_t(h, p["U_r"]) + p["b_r"])
        ht = tanh(matmul_t(x, p["W_h"]) + matmul_t(mul(r, h), p["U_h"]) + p["b_h"])
        one = leaf(np.ones_like(z.value))
        return mul(sub(one, z), h) + mul(z, ht)

    def zero_state(self, batch: Optional[int] = None) -> Array:
        if batch is None:
            return np.zeros(self.hidden)
        return np.zeros((batch, self.hidden))


def gru_cell(layer: GruLayer, x: Array, h: Array) -> Array:
    """Plain-array GRU step (no tape), matching GruLayer.__call__ exactly."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    z = expit(x @ layer.W_z.T + h @ layer.U_z.T + layer.b_z)
    r = expit(x @ layer.W_r.T + h @ layer.U_r.T + layer.b_r)
    ht = np.tanh(x @ layer.W_h.T + (r * h) @ layer.U_h.T + layer.b_h)
    return (1.0 - z) * h + z * ht


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators and the step counter."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in store.items()},
            v={k: np.zeros_like(p) for k, p in store.items()},
        )


def adam_step(
    params: Mapping[str, Array],
    grads: Mapping[str, Array],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """In-place adaptive-moment update with bias correction."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads: Mapping[str, Array], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm and total > 0.0:
        c = max_norm / total
        for g in grads.values():
            g *= c
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    path,
    store: ParamStore,
    arch: str = "",
    opt_state: Optional[AdamState] = None,
    extra: Optional[dict] = None,
    extra_arrays: Optional[Mapping[str, Array]] = None,
) -> None:
    """Write parameters (+ optimizer state, + JSON-able extras) as one archive."""
    payload: dict[str, Array] = {
        "version": np.array(_CHECKPOINT_FORMAT_VERSION),
        "arch_hash": np.frombuffer(store.arch_hash(arch).encode(), dtype=np.uint8),
    }
    for k, v in store.items():
        payload[f"param/{k}"] = v
    if opt_state is not None:
        payload["adam_step"] = np.array(opt_state.step)
        for k, v in opt_state.m.items():
            payload[f"adam_m/{k}"] = v
        for k, v in opt_state.v.items():
            payload[f"adam_v/{k}"] = v
    if extra is not None:
        payload["extra_json"] = np.frombuffer(json.dumps(extra).encode(), dtype=np.uint8)
    if extra_arrays is not None:
        for k, v in extra_arrays.items():
            payload[f"extra_arr/{k}"] = v
    np.savez(path, **payload)


def load_checkpoint(
    path, store: ParamStore, arch: str = ""
) -> tuple[Optional[AdamState], Optional[dict], dict[str, Array]]:
    """Restore parameters in place; returns (optimizer state, extras, extra arrays).

    Rejects version or architecture-hash mismatches and corrupt archives.
    """
    try:
        z = np.load(path)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with z:
        try:
            version = int(z["version"])
            if version != _CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            arch_hash = bytes(z["arch_hash"]).decode()
            if arch_hash != store.arch_hash(arch):
                raise CheckpointError("checkpoint architecture hash does not match this model")
            values = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
            store.load_values(values)
            opt_state = None
            if "adam_step" in z.files:
                opt_state = AdamState(
                    m={k[len("adam_m/"):]: z[k].copy() for k in z.files if k.startswith("adam_m/")},
                    v={k[len("adam_v/"):]: z[k].copy() for k in z.files if k.startswith("adam_v/")},
                    step=int(z["adam_step"]),
                )
            extra = None
            if "extra_json" in z.files:
                extra = json.loads(bytes(z["extra_json"]).decode())
            arrays = {k[len("extra_arr/"):]: z[k].copy() for k in z.files if k.startswith("extra_arr/")}
            return opt_state, extra, arrays
        except CheckpointError:
            raise
        except Exception as exc:
            raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
