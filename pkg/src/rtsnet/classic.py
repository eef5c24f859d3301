"""Model-based Kalman filtering and RTS smoothing, with extended variants.

The forward pass is a standard (extended) Kalman filter; the backward pass is
the RTS correction

    x_s[t] = x_post[t] + G_t (x_s[t+1] - f(x_post[t]))
    P_s[t] = P_post[t] + G_t (P_s[t+1] - P_prior[t+1]) G_t^T
    G_t    = P_post[t] F_t^T P_prior[t+1]^{-1}

Nonlinear f/h are handled by Jacobian linearization at the current estimate
(analytic Jacobians when the model supplies them, central differences
otherwise).  ``batch_map_oracle`` solves the full linear-Gaussian smoothing
problem jointly and serves as an exact reference for the recursive path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .ssmodel import StateSpaceModel, numerical_jacobian

Array = np.ndarray

_PIVOT_RTOL = 1e-12


class SingularMatrixError(RuntimeError):
    """A covariance/system matrix required by a linear solve is numerically singular."""


def _solve_spd(A: Array, B: Array, what: str = "matrix", t: Optional[int] = None) -> Array:
    """Solve A X = B for symmetric positive-definite A, with a pivoted-LU fallback."""
    A = np.atleast_2d(A)
    where = f" at time index {t}" if t is not None else ""
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
        return scipy.linalg.cho_solve((c, low), B, check_finite=False)
    except scipy.linalg.LinAlgError:
        pass
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= _PIVOT_RTOL * max(pivots.max(), 1.0):
        raise SingularMatrixError(f"singular {what}{where}")
    return scipy.linalg.lu_solve((lu, piv), B, check_finite=False)


def _symmetrize(S: Array) -> Array:
    return 0.5 * (S + S.T)


def _f_jacobian(model: StateSpaceModel, x: Array) -> Array:
    if model.f_jac is not None:
        return np.asarray(model.f_jac(x), dtype=float)
    return numerical_jacobian(model.f, x)


def _h_jacobian(model: StateSpaceModel, x: Array) -> Array:
    if model.h_jac is not None:
        return np.asarray(model.h_jac(x), dtype=float)
    return numerical_jacobian(model.h, x)


@dataclass
class FilterStep:
    """Quantities produced at one filter step t.

    ``kf_predict`` fills the prediction fields; ``kf_update`` completes the
    posterior ones.  F_hat is the dynamics Jacobian used to predict this step
    (evaluated at the previous posterior), H_hat the observation Jacobian at
    the prior.
    """

    x_post: Array
    Sigma_post: Optional[Array] = None
    x_prior: Optional[Array] = None
    Sigma_prior: Optional[Array] = None
    y_pred: Optional[Array] = None
    S: Optional[Array] = None
    K: Optional[Array] = None
    innovation: Optional[Array] = None
    F_hat: Optional[Array] = None
    H_hat: Optional[Array] = None


@dataclass
class SmoothedStep:
    """Smoothed mean/covariance at step t plus the backward-update ingredients.

    At the terminal step (t = T) there is no backward update and the gain
    fields are None.
    """

    x_smooth: Array
    Sigma_smooth: Array
    G: Optional[Array] = None
    bw_innovation: Optional[Array] = None
    dSigma: Optional[Array] = None


@dataclass
class SmootherOutput:
    """Full two-pass result: per-step filter quantities and smoothed states."""

    filtered: list[FilterStep]
    smoothed: list[SmoothedStep]

    def filtered_means(self) -> Array:
        return np.stack([s.x_post for s in self.filtered])

    def smoothed_means(self) -> Array:
        return np.stack([s.x_smooth for s in self.smoothed])

    def smoothed_covariances(self) -> Array:
        return np.stack([s.Sigma_smooth for s in self.smoothed])

    def to_arrays(self) -> dict[str, Array]:
        """Dense-array view (dataset-container compatible) including per-step gains."""
        out = {
            "x_prior": np.stack([s.x_prior for s in self.filtered]),
            "x_post": np.stack([s.x_post for s in self.filtered]),
            "Sigma_prior": np.stack([s.Sigma_prior for s in self.filtered]),
            "Sigma_post": np.stack([s.Sigma_post for s in self.filtered]),
            "K": np.stack([s.K for s in self.filtered]),
            "x_smooth": self.smoothed_means(),
            "Sigma_smooth": self.smoothed_covariances(),
        }
        if len(self.smoothed) > 1:
            out["G"] = np.stack([s.G for s in self.smoothed[:-1]])
        return out

    def save(self, path) -> None:
        np.savez(path, version=np.array(1), **self.to_arrays())


def kf_predict(model: StateSpaceModel, prev: FilterStep) -> FilterStep:
    """Propagate the previous posterior one step: priors, predicted output, S."""
    F_hat = _f_jacobian(model, prev.x_post)
    x_prior = np.asarray(model.f(prev.x_post), dtype=float)
    Sigma_prior = _symmetrize(F_hat @ prev.Sigma_post @ F_hat.T + model.Q)
    H_hat = _h_jacobian(model, x_prior)
    y_pred = np.asarray(model.h(x_prior), dtype=float)
    S = _symmetrize(H_hat @ Sigma_prior @ H_hat.T + model.R)
    return FilterStep(
        x_post=prev.x_post,  # placeholder until kf_update
        x_prior=x_prior,
        Sigma_prior=Sigma_prior,
        y_pred=y_pred,
        S=S,
        F_hat=F_hat,
        H_hat=H_hat,
    )


def forward_gain(Sigma_prior: Array, H_hat: Array, S: Array, t: Optional[int] = None) -> Array:
    """Forward Kalman gain K = Sigma_prior H^T S^{-1} via a linear solve."""
    return _solve_spd(S, H_hat @ Sigma_prior, what="innovation covariance S", t=t).T


def kf_update(step: FilterStep, y: Array) -> FilterStep:
    """Fuse observation y into a predicted step (forward gain already in step.K)."""
    if step.K is None:
        raise ValueError("forward gain must be computed before kf_update")
    innovation = np.asarray(y, dtype=float) - step.y_pred
    x_post = step.x_prior + step.K @ innovation
    Sigma_post = _symmetrize(step.Sigma_prior - step.K @ step.S @ step.K.T)
    return replace(step, innovation=innovation, x_post=x_post, Sigma_post=Sigma_post)


def kalman_filter(
    model: StateSpaceModel,
    x0: Array,
    Sigma0: Optional[Array],
    Y: Array,
) -> list[FilterStep]:
    """Run predict/update for t = 1..T from the initial belief (x0, Sigma0)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Sigma0 is None:
        Sigma0 = np.zeros((model.m, model.m))
    prev = FilterStep(x_post=np.asarray(x0, dtype=float).reshape(model.m),
                      Sigma_post=np.asarray(Sigma0, dtype=float))
    steps: list[FilterStep] = []
    for t in range(1, Y.shape[0] + 1):
        step = kf_predict(model, prev)
        step.K = forward_gain(step.Sigma_prior, step.H_hat, step.S, t=t)
        step = kf_update(step, Y[t - 1])
        steps.append(step)
        prev = step
    return steps


def backward_gain(
    Sigma_post: Array,
    F_hat: Array,
    Sigma_prior_next: Array,
    t: Optional[int] = None,
) -> Array:
    """Backward gain G = Sigma_post F^T Sigma_prior_next^{-1} via a linear solve."""
    return _solve_spd(Sigma_prior_next, F_hat @ Sigma_post,
                      what="predicted covariance", t=t).T


def rts_backward_step(
    filter_t: FilterStep,
    smoothed_next: SmoothedStep,
    model: StateSpaceModel,
    t: Optional[int] = None,
) -> SmoothedStep:
    """One backward correction: fuse the smoothed step t+1 into the filter step t.

    Re-derives the step-(t+1) prediction from the stored posterior, so it only
    needs the filter output at t and the smoothed result at t+1.
    """
    F_hat = _f_jacobian(model, filter_t.x_post)
    x_pred = np.asarray(model.f(filter_t.x_post), dtype=float)
    Sigma_pred = _symmetrize(F_hat @ filter_t.Sigma_post @ F_hat.T + model.Q)
    G = backward_gain(filter_t.Sigma_post, F_hat, Sigma_pred, t=t)
    bw_innovation = smoothed_next.x_smooth - x_pred
    dSigma = smoothed_next.Sigma_smooth - Sigma_pred
    x_smooth = filter_t.x_post + G @ bw_innovation
    Sigma_smooth = _symmetrize(filter_t.Sigma_post + G @ dSigma @ G.T)
    return SmoothedStep(
        x_smooth=x_smooth,
        Sigma_smooth=Sigma_smooth,
        G=G,
        bw_innovation=bw_innovation,
        dSigma=dSigma,
    )


def rts_smooth(
    model: StateSpaceModel,
    x0: Array,
    Sigma0: Optional[Array],
    Y: Array,
    x_final: Optional[Array] = None,
) -> SmootherOutput:
    """Forward filter then backward RTS recursion over the whole block Y.

    The backward pass starts from the filter posterior at T; passing x_final
    instead clamps the terminal state to a known value (zero covariance).
    Extended behavior falls out of the per-step Jacobian linearization.
    """
    filtered = kalman_filter(model, x0, Sigma0, Y)
    T = len(filtered)
    smoothed: list[Optional[SmoothedStep]] = [None] * T
    if x_final is not None:
        smoothed[T - 1] = SmoothedStep(
            x_smooth=np.asarray(x_final, dtype=float).reshape(model.m),
            Sigma_smooth=np.zeros((model.m, model.m)),
        )
    else:
        smoothed[T - 1] = SmoothedStep(
            x_smooth=filtered[T - 1].x_post,
            Sigma_smooth=filtered[T - 1].Sigma_post,
        )
    for t in range(T - 1, 0, -1):
        smoothed[t - 1] = rts_backward_step(filtered[t - 1], smoothed[t], model, t=t)
    return SmootherOutput(filtered=filtered, smoothed=smoothed)


def batch_map_oracle(
    F: Array,
    H: Array,
    Q: Array,
    R: Array,
    x0: Array,
    Sigma0: Optional[Array],
    Y: Array,
) -> Array:
    """Jointly solve the linear-Gaussian smoothing problem over all T states.

    Stacks the quadratic (MAP) objective into one block-tridiagonal normal
    system and solves it densely; for linear-Gaussian models this equals the
    smoothed mean sequence.  Q and R must be invertible.  Sigma0 of zero (or
    None) pins x_0 = x0 exactly.
    """
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    T = Y.shape[0]
    m = F.shape[0]

    Qi = _inv_psd(Q, "Q")
    Ri = _inv_psd(R, "R")
    HRiH = H.T @ Ri @ H
    HRi = H.T @ Ri
    FQiF = F.T @ Qi @ F
    QiF = Qi @ F

    free_x0 = Sigma0 is not None and np.any(np.asarray(Sigma0))
    k0 = 1 if free_x0 else 0  # number of leading unknowns before x_1
    nz = T + k0
    A = np.zeros((nz * m, nz * m))
    b = np.zeros(nz * m)

    def blk(i, j):
        return slice(i * m, (i + 1) * m), slice(j * m, (j + 1) * m)

    for t in range(1, T + 1):
        i = t - 1 + k0
        r, c = blk(i, i)
        A[r, c] += Qi + HRiH
        if t < T:
            A[r, c] += FQiF
        b[r] += HRi @ Y[t - 1]
        if t == 1 and not free_x0:
            b[r] += QiF @ x0
        else:
            j = i - 1
            A[blk(i, j)] += -QiF
            A[blk(j, i)] += -QiF.T

    if free_x0:
        S0i = _inv_psd(np.asarray(Sigma0, dtype=float), "Sigma0")
        r, c = blk(0, 0)
        A[r, c] += S0i + FQiF
        b[r] += S0i @ x0

    try:
        z = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "singular normal matrix in batch MAP solve (unobservable configuration)"
        ) from exc
    return z.reshape(nz, m)[k0:]


def _inv_psd(C: Array, what: str) -> Array:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return _solve_spd(C, np.eye(C.shape[0]), what=what)


def mse_db(estimates: Array, truth: Array, floor_db: float = -300.0) -> float:
    """Per-entry mean squared error in dB between aligned state arrays."""
    err = np.asarray(estimates, dtype=float) - np.asarray(truth, dtype=float)
    mse = float(np.mean(err**2))
    if mse <= 10.0 ** (floor_db / 10.0):
        return floor_db
    return float(10.0 * np.log10(mse))


def smooth_dataset_means(
    model: StateSpaceModel,
    states: Array,
    observations: Array,
    Sigma0: Optional[Array] = None,
) -> Array:
    """Run rts_smooth per trajectory (x0 taken from states[:, 0]); stacked means."""
    N, T, _ = observations.shape
    out = np.empty((N, T, model.m))
    for i in range(N):
        res = rts_smooth(model, states[i, 0], Sigma0, observations[i])
        out[i] = res.smoothed_means()
    return out
