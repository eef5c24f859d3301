"""RTSNet: the RTS smoother recursion with learned recurrent gains.

The forward pass mirrors a Kalman filter whose gain comes from three cascaded
GRUs fed observation/state difference features; the backward pass applies the
RTS correction with a gain produced by a two-layer GRU fed three difference
features of the smoothing recursion.  No noise statistics are consumed; the
networks learn their effect from labeled data.

Everything runs batched: states are rows of shape (B, m) flowing through tape
nodes, so one call smooths a whole set of equally long trajectories and the
same graph supports backprop-through-time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .neural import (
    DenseLayer,
    GruLayer,
    Node,
    ParamStore,
    concat,
    index,
    leaf,
    matmul,
    matmul_t,
    matvec,
    mul,
    no_grad,
    reshape,
    scale,
)
from .ssmodel import LorenzConfig, StateSpaceModel, numerical_jacobian

Array = np.ndarray

#: Width of the hidden head layer of the forward gain network.  Together with
#: the 5x input embeddings this puts the 3x3 configuration in the tens of
#: thousands of trainable parameters.
DEFAULT_HEAD_WIDTH = 1024

#: Input embedding width multiplier (embedding width = 5 x feature length).
DEFAULT_EMBED_MULT = 5


class InferenceDivergenceError(RuntimeError):
    """A state estimate became non-finite during inference."""


# ---------------------------------------------------------------------------
# Differentiable model functions
# ---------------------------------------------------------------------------

_LORENZ_A0 = np.array([[-10.0, 10.0, 0.0], [28.0, -1.0, 0.0], [0.0, 0.0, -8.0 / 3.0]])
_LORENZ_DA = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def lift_linear(M: Array) -> Callable[[Node], Node]:
    """Tape version of x -> M x on row-vector states."""
    M = np.asarray(M, dtype=float)
    return lambda x: matmul_t(x, leaf(M))


def lift_lorenz(cfg: LorenzConfig) -> Callable[[Node], Node]:
    """Tape version of the Taylor-discretized Lorenz step x -> F(x) x.

    Built from primitive ops (slice, scale, matmul), so gradients through the
    dynamics are exact.
    """

    def f(x: Node) -> Node:
        B = x.value.shape[0]
        x1 = reshape(index(x, (Ellipsis, slice(0, 1))), (B, 1, 1))
        Adt = scale(mul(x1, leaf(_LORENZ_DA)) + leaf(_LORENZ_A0), cfg.dtau)
        F = leaf(np.eye(3)) + Adt
        term = Adt
        for j in range(2, cfg.J + 1):
            term = scale(matmul(term, Adt), 1.0 / j)
            F = F + term
        return matvec(F, x)

    return f


def lift_generic(
    fn: Callable[[Array], Array], jac: Optional[Callable[[Array], Array]] = None
) -> Callable[[Node], Node]:
    """Tape version of an arbitrary pointwise state map via its Jacobian.

    The value is fn applied per batch row; the adjoint multiplies by the
    (analytic or finite-difference) Jacobian transpose.
    """
    jac_fn = jac if jac is not None else (lambda x: numerical_jacobian(fn, x))

    def f(x: Node) -> Node:
        rows = x.value
        vals = np.stack([np.asarray(fn(r), dtype=float) for r in rows])
        jacs = np.stack([np.asarray(jac_fn(r), dtype=float) for r in rows])
        return Node(vals, (x,), (lambda g: np.einsum("bkm,bk->bm", jacs, g),))

    return f


def lift_dynamics(model: StateSpaceModel) -> Callable[[Node], Node]:
    """Differentiable rollout function for a model's dynamics."""
    if model.F is not None:
        return lift_linear(model.F)
    if model.lorenz is not None:
        return lift_lorenz(model.lorenz)
    return lift_generic(model.f, model.f_jac)


def lift_observation(model: StateSpaceModel) -> Callable[[Node], Node]:
    """Differentiable version of a model's observation map."""
    if model.H is not None:
        return lift_linear(model.H)
    return lift_generic(model.h, model.h_jac)


# ---------------------------------------------------------------------------
# Gain networks
# ---------------------------------------------------------------------------

class ForwardGainNet:
    """Three cascaded GRUs producing the forward gain K_t (m x n).

    Feature routing: the lagged state differences drive GRU-Q, whose output
    joins the observation difference into GRU-Sigma, whose output joins the
    innovation into GRU-S; the head combines the GRU-Sigma and GRU-S states.
    Hidden sizes are m^2 / m^2 / n^2, standing in for the second moments the
    model-based filter would track.  The output layer starts at zero so the
    untrained filter is the pure-prediction rollout.
    """

    def __init__(
        self,
        m: int,
        n: int,
        store: ParamStore,
        head_width: int = DEFAULT_HEAD_WIDTH,
        embed_mult: int = DEFAULT_EMBED_MULT,
    ):
        self.m = m
        self.n = n
        e = embed_mult
        self.emb_obs_diff = DenseLayer("fwd.emb_obs_diff", n, e * n, "relu")
        self.emb_innovation = DenseLayer("fwd.emb_innovation", n, e * n, "relu")
        self.emb_update = DenseLayer("fwd.emb_update", m, e * m, "relu")
        self.emb_evolution = DenseLayer("fwd.emb_evolution", m, e * m, "relu")
        self.gru_q = GruLayer("fwd.gru_q", 2 * e * m, m * m)
        self.gru_sigma = GruLayer("fwd.gru_sigma", m * m + e * n, m * m)
        self.gru_s = GruLayer("fwd.gru_s", m * m + e * n, n * n)
        self.head_hidden = DenseLayer("fwd.head_hidden", m * m + n * n, head_width, "relu")
        self.head_out = DenseLayer("fwd.head_out", head_width, m * n)
        self.layers = (
            self.emb_obs_diff, self.emb_innovation, self.emb_update, self.emb_evolution,
            self.gru_q, self.gru_sigma, self.gru_s, self.head_hidden, self.head_out,
        )
        for layer in self.layers:
            layer.register(store)

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            if layer is self.head_out:
                layer.init_params(rng, out_scheme="zeros")
            else:
                layer.init_params(rng)

    def zero_hidden(self, batch: int) -> tuple[Node, Node, Node]:
        return (
            leaf(self.gru_q.zero_state(batch)),
            leaf(self.gru_sigma.zero_state(batch)),
            leaf(self.gru_s.zero_state(batch)),
        )

    def step(self, feats, hidden, params) -> tuple[Node, tuple[Node, Node, Node]]:
        f_obs_diff, f_innov, f_update, f_evolution = feats
        h_q, h_sigma, h_s = hidden
        upd = concat([self.emb_update(f_update, params), self.emb_evolution(f_evolution, params)])
        h_q = self.gru_q(upd, h_q, params)
        h_sigma = self.gru_sigma(concat([h_q, self.emb_obs_diff(f_obs_diff, params)]), h_sigma, params)
        h_s = self.gru_s(concat([h_sigma, self.emb_innovation(f_innov, params)]), h_s, params)
        flat = self.head_out(self.head_hidden(concat([h_sigma, h_s]), params), params)
        K = reshape(flat, flat.value.shape[:-1] + (self.m, self.n))
        return K, (h_q, h_sigma, h_s)


@dataclass
class BackwardFeatures:
    """The three backward-pass difference features (each length m).

    d1: update difference, smoothed minus forward prior at t+1.
    d2: backward-forward difference, smoothed minus forward posterior at t+1.
    d3: evolution difference between consecutive smoothed states (zero at the
        first backward step, where no later smoothed state exists).
    """

    d1: Array
    d2: Array
    d3: Array


class BackwardGainNet:
    """Two stacked GRUs (hidden m^2 each) producing the backward gain G_t (m x m).

    The output layer starts at zero so the untrained smoother reduces to the
    forward filter.
    """

    def __init__(
        self,
        m: int,
        store: ParamStore,
        embed_mult: int = DEFAULT_EMBED_MULT,
    ):
        self.m = m
        self.emb = DenseLayer("bwd.emb", 3 * m, embed_mult * 3 * m, "relu")
        self.gru1 = GruLayer("bwd.gru1", embed_mult * 3 * m, m * m)
        self.gru2 = GruLayer("bwd.gru2", m * m, m * m)
        self.out = DenseLayer("bwd.out", m * m, m * m)
        self.layers = (self.emb, self.gru1, self.gru2, self.out)
        for layer in self.layers:
            layer.register(store)

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            if layer is self.out:
                layer.init_params(rng, out_scheme="zeros")
            else:
                layer.init_params(rng)

    def zero_hidden(self, batch: int) -> tuple[Node, Node]:
        return (leaf(self.gru1.zero_state(batch)), leaf(self.gru2.zero_state(batch)))

    def step(self, feats: Node, hidden, params) -> tuple[Node, tuple[Node, Node]]:
        h1, h2 = hidden
        h1 = self.gru1(self.emb(feats, params), h1, params)
        h2 = self.gru2(h1, h2, params)
        flat = self.out(h2, params)
        G = reshape(flat, flat.value.shape[:-1] + (self.m, self.m))
        return G, (h1, h2)


def backward_features(
    x_smooth_next: Array,
    x_prior_next: Array,
    x_post_next: Array,
    x_smooth_next2: Optional[Array],
) -> BackwardFeatures:
    """Assemble the backward-pass features from stored forward/backward states."""
    x_smooth_next = np.asarray(x_smooth_next, dtype=float)
    d3 = (
        np.zeros_like(x_smooth_next)
        if x_smooth_next2 is None
        else np.asarray(x_smooth_next2, dtype=float) - x_smooth_next
    )
    return BackwardFeatures(
        d1=x_smooth_next - np.asarray(x_prior_next, dtype=float),
        d2=x_smooth_next - np.asarray(x_post_next, dtype=float),
        d3=d3,
    )


def forward_features(
    y_t: Array,
    y_prev: Optional[Array],
    x_post_prev: Array,
    x_prior_prev: Optional[Array],
    x_post_prev2: Optional[Array],
    y_pred: Array,
) -> tuple[Array, Array, Array, Array]:
    """Assemble the forward-pass features (observation difference, innovation,
    lagged update difference, lagged evolution difference).

    At t = 1 the lagged quantities do not exist and the corresponding
    features are zero.
    """
    y_t = np.asarray(y_t, dtype=float)
    x_post_prev = np.asarray(x_post_prev, dtype=float)
    f1 = np.zeros_like(y_t) if y_prev is None else y_t - np.asarray(y_prev, dtype=float)
    f2 = y_t - np.asarray(y_pred, dtype=float)
    f3 = (
        np.zeros_like(x_post_prev)
        if x_prior_prev is None
        else x_post_prev - np.asarray(x_prior_prev, dtype=float)
    )
    f4 = (
        np.zeros_like(x_post_prev)
        if x_post_prev2 is None
        else x_post_prev - np.asarray(x_post_prev2, dtype=float)
    )
    return f1, f2, f3, f4


def backward_gain_net(
    net: BackwardGainNet,
    feats: BackwardFeatures,
    hidden: tuple[Array, Array],
    store: ParamStore,
) -> tuple[Array, tuple[Array, Array]]:
    """Plain-array single step through the backward gain network."""
    d1 = np.atleast_2d(np.asarray(feats.d1, dtype=float))
    d2 = np.atleast_2d(np.asarray(feats.d2, dtype=float))
    d3 = np.atleast_2d(np.asarray(feats.d3, dtype=float))
    h1 = np.atleast_2d(np.asarray(hidden[0], dtype=float))
    h2 = np.atleast_2d(np.asarray(hidden[1], dtype=float))
    with no_grad():
        params = store.leaves()
        fv = np.concatenate([d1, d2, d3], axis=-1)
        G, new_hidden = net.step(leaf(fv), (leaf(h1), leaf(h2)), params)
    squeeze = np.asarray(feats.d1).ndim == 1
    if squeeze:
        return G.value[0], (new_hidden[0].value[0], new_hidden[1].value[0])
    return G.value, (new_hidden[0].value, new_hidden[1].value)


# ---------------------------------------------------------------------------
# The assembled model
# ---------------------------------------------------------------------------

GainOverride = Callable[[int], Array]


class RtsNetModel:
    """Hybrid smoother: known (or approximate) f/h plus the two gain networks.

    Consumes no noise covariances; construction only reads the dynamics and
    observation maps of the supplied model.
    """

    def __init__(
        self,
        m: int,
        n: int,
        f: Callable[[Array], Array],
        h: Callable[[Array], Array],
        f_lift: Callable[[Node], Node],
        h_lift: Callable[[Node], Node],
        seed: int = 0,
        head_width: int = DEFAULT_HEAD_WIDTH,
        embed_mult: int = DEFAULT_EMBED_MULT,
    ):
        self.m = m
        self.n = n
        self.f = f
        self.h = h
        self.f_lift = f_lift
        self.h_lift = h_lift
        self.head_width = head_width
        self.embed_mult = embed_mult
        self.params = ParamStore()
        self.forward_net = ForwardGainNet(m, n, self.params, head_width, embed_mult)
        self.backward_net = BackwardGainNet(m, self.params, embed_mult)
        rng = np.random.default_rng(seed)
        self.forward_net.init_params(rng)
        self.backward_net.init_params(rng)

    @classmethod
    def from_ssmodel(
        cls,
        model: StateSpaceModel,
        seed: int = 0,
        head_width: int = DEFAULT_HEAD_WIDTH,
        embed_mult: int = DEFAULT_EMBED_MULT,
    ) -> "RtsNetModel":
        """Build from a state-space model, using only its f/h (never Q/R)."""
        return cls(
            m=model.m,
            n=model.n,
            f=model.f,
            h=model.h,
            f_lift=lift_dynamics(model),
            h_lift=lift_observation(model),
            seed=seed,
            head_width=head_width,
            embed_mult=embed_mult,
        )

    @property
    def arch_descriptor(self) -> str:
        return (
            f"rtsnet(m={self.m},n={self.n},head={self.head_width},embed={self.embed_mult})"
        )

    def zero_params(self) -> None:
        self.params.scale_values(0.0)


def count_params(model: RtsNetModel) -> int:
    """Total trainable parameter count over both gain networks."""
    return model.params.total_count()


# ---------------------------------------------------------------------------
# Inference passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardPass:
    """Per-step nodes of the learned forward pass (lists indexed by t-1)."""

    priors: list[Node]
    posts: list[Node]
    gains: list[Node]
    hidden: tuple
    batched: bool

    def _stack(self, nodes: list[Node]) -> Array:
        arr = np.stack([nd.value for nd in nodes], axis=1)
        return arr if self.batched else arr[0]

    def prior_means(self) -> Array:
        return self._stack(self.priors)

    def post_means(self) -> Array:
        return self._stack(self.posts)


@dataclass
class SmoothPass:
    """Forward pass plus smoothed state nodes x_1..x_T (x_T = forward posterior)."""

    forward: ForwardPass
    smoothed: list[Node]
    gains: list[Node]

    def smoothed_means(self) -> Array:
        return self.forward._stack(self.smoothed)


def _as_batched(x0, Y, m: int, n: int) -> tuple[Array, Array, bool]:
    Y = np.asarray(Y, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if Y.ndim == 2:
        return x0.reshape(1, m), Y[None], False
    if Y.ndim != 3:
        raise ValueError(f"observations must be (T, n) or (B, T, n), got {Y.shape}")
    return x0.reshape(Y.shape[0], m), Y, True


def rtsnet_forward(
    model: RtsNetModel,
    x0: Array,
    Y: Array,
    params: Optional[dict[str, Node]] = None,
    gain_override: Optional[GainOverride] = None,
) -> ForwardPass:
    """Learned filtering pass over an observation block (no covariances tracked).

    x0/Y may be single ((m,), (T, n)) or batched ((B, m), (B, T, n)).  The
    override hook replaces the network gain at every step t with a supplied
    matrix, which is how the classical-gain equivalence is exercised.
    """
    x0b, Yb, batched = _as_batched(x0, Y, model.m, model.n)
    B, T, _ = Yb.shape
    if params is None:
        params = model.params.leaves()
    hidden = model.forward_net.zero_hidden(B)

    x_post = leaf(x0b)
    zeros_m = leaf(np.zeros((B, model.m)))
    zeros_n = leaf(np.zeros((B, model.n)))
    y_prev: Optional[Node] = None
    prior_prev: Optional[Node] = None
    post_prev2: Optional[Node] = None

    priors: list[Node] = []
    posts: list[Node] = []
    gains: list[Node] = []
    for t in range(1, T + 1):
        post_prev = x_post
        x_prior = model.f_lift(post_prev)
        y_pred = model.h_lift(x_prior)
        y_t = leaf(Yb[:, t - 1])

        f1 = (y_t - y_prev) if y_prev is not None else zeros_n
        f2 = y_t - y_pred
        f3 = (post_prev - prior_prev) if prior_prev is not None else zeros_m
        f4 = (post_prev - post_prev2) if post_prev2 is not None else zeros_m

        K, hidden = model.forward_net.step((f1, f2, f3, f4), hidden, params)
        if gain_override is not None:
            K = leaf(np.broadcast_to(np.asarray(gain_override(t), dtype=float),
                                     (B, model.m, model.n)))
        x_post = x_prior + matvec(K, f2)
        if not np.all(np.isfinite(x_post.value)):
            raise InferenceDivergenceError(f"state estimate diverged at t={t}")

        priors.append(x_prior)
        posts.append(x_post)
        gains.append(K)
        y_prev = y_t
        prior_prev = x_prior
        post_prev2 = post_prev
    return ForwardPass(priors=priors, posts=posts, gains=gains, hidden=hidden, batched=batched)


def rtsnet_smooth(
    model: RtsNetModel,
    x0: Array,
    Y: Array,
    params: Optional[dict[str, Node]] = None,
    gain_override: Optional[GainOverride] = None,
    bw_gain_override: Optional[GainOverride] = None,
    forward_pass: Optional[ForwardPass] = None,
) -> SmoothPass:
    """Two-pass learned smoothing; backward recursion runs t = T-1 .. 1.

    The smoothed sequence is x_1..x_T with x_T equal to the forward posterior.
    Backward GRU hidden states start at zero; the evolution-difference feature
    is zero at the first backward step.
    """
    if params is None:
        params = model.params.leaves()
    fwd = forward_pass
    if fwd is None:
        fwd = rtsnet_forward(model, x0, Y, params=params, gain_override=gain_override)
    T = len(fwd.posts)
    B = fwd.posts[0].value.shape[0]

    smoothed: list[Optional[Node]] = [None] * T
    smoothed[T - 1] = fwd.posts[T - 1]
    gains: list[Optional[Node]] = [None] * max(T - 1, 0)
    hidden = model.backward_net.zero_hidden(B)
    zeros_m = leaf(np.zeros((B, model.m)))

    for t in range(T - 1, 0, -1):
        x_next = smoothed[t]  # x̂_{t+1} (the list is 0-based)
        d1 = x_next - fwd.priors[t]
        d2 = x_next - fwd.posts[t]
        d3 = (smoothed[t + 1] - x_next) if t + 1 < T else zeros_m
        G, hidden = model.backward_net.step(concat([d1, d2, d3]), hidden, params)
        if bw_gain_override is not None:
            G = leaf(np.broadcast_to(np.asarray(bw_gain_override(t), dtype=float),
                                     (B, model.m, model.m)))
        x_sm = fwd.posts[t - 1] + matvec(G, d1)
        if not np.all(np.isfinite(x_sm.value)):
            raise InferenceDivergenceError(f"smoothed estimate diverged at t={t}")
        smoothed[t - 1] = x_sm
        gains[t - 1] = G
    return SmoothPass(forward=fwd, smoothed=smoothed, gains=gains)


def smooth_dataset(model: RtsNetModel, states0: Array, Y: Array) -> Array:
    """Batched no-grad smoothing of a whole dataset; returns (N, T, m) means."""
    with no_grad():
        out = rtsnet_smooth(model, states0, Y)
        return out.smoothed_means()
