"""Probability matrices, batch joint estimation, entropy and mutual information.

Value-level functions take and return numpy arrays.  The ``*_tensor``
variants build the same quantities inside the autograd graph so that losses
can be differentiated with respect to whatever produced the predictions.
All logarithms are natural.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

ROW_TOL = 1e-9
ZERO_WEIGHT = 1e-9


class ProbabilityError(ValueError):
    """Input is not a valid probability vector, matrix or joint."""


def as_prob_matrix(x, name: str = "X") -> np.ndarray:
    """Validate a row-stochastic n x K batch of predictions (K >= 2)."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2 or arr.shape[0] < 1:
        raise ProbabilityError(f"{name}: expected an n x K matrix with K >= 2, got shape {arr.shape}")
    if arr.min() < -1e-12:
        raise ProbabilityError(f"{name}: negative probability {arr.min():.3g}")
    err = np.abs(arr.sum(axis=1) - 1.0).max()
    if err > ROW_TOL:
        raise ProbabilityError(f"{name}: rows must sum to 1 (max deviation {err:.3g})")
    return arr


@dataclass(frozen=True)
class JointDistribution:
    """Nonnegative K x K matrix summing to one."""

    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ProbabilityError(f"joint must be square, got shape {P.shape}")
        if P.min() < -1e-12:
            raise ProbabilityError(f"joint has negative entry {P.min():.3g}")
        if abs(P.sum() - 1.0) > ROW_TOL:
            raise ProbabilityError(f"joint sums to {P.sum():.12g}, not 1")
        P = np.clip(P, 0.0, None)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def row_marginal(self) -> np.ndarray:
        return self.P.sum(axis=1)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.P.sum(axis=0)

    @classmethod
    def uniform(cls, K: int) -> "JointDistribution":
        return cls(np.full((K, K), 1.0 / (K * K)))


@dataclass(frozen=True)
class ConditionedJoints:
    """Per-class conditioned joints; ``active[k]`` is False for zero-weight classes."""

    weights: np.ndarray
    joints: tuple[JointDistribution, ...]
    active: np.ndarray

    def __iter__(self):
        return iter(zip(self.weights, self.joints))

    def __len__(self) -> int:
        return len(self.joints)


def _check_pair(X: np.ndarray, Y: np.ndarray) -> None:
    if X.shape != Y.shape:
        raise ShapeError("joint estimation", X.shape, Y.shape)


def _finish_joint(P: np.ndarray, symmetrize: bool) -> np.ndarray:
    if symmetrize:
        P = 0.5 * (P + P.T)
    P = np.clip(P, 0.0, None)
    return P / P.sum()


def estimate_joint(X, Y, symmetrize: bool = True) -> JointDistribution:
    """Plug-in batch joint ``X^T Y / n``, optionally symmetrized."""
    X, Y = as_prob_matrix(X, "X"), as_prob_matrix(Y, "Y")
    _check_pair(X, Y)
    return JointDistribution(_finish_joint(X.T @ Y / X.shape[0], symmetrize))


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.min() < -1e-12:
        raise ProbabilityError(f"negative probability {p.min():.3g}")
    if abs(p.sum() - 1.0) > ROW_TOL:
        raise ProbabilityError(f"probabilities sum to {p.sum():.12g}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mutual_information(P) -> float:
    """I(X;Y) of a joint distribution, in nats."""
    J = P if isinstance(P, JointDistribution) else JointDistribution(P)
    P = J.P
    outer = np.outer(J.row_marginal, J.col_marginal)
    nz = P > 0
    return float((P[nz] * (np.log(P[nz]) - np.log(outer[nz]))).sum())


def conditional_joints(X, Y, Z, symmetrize: bool = True) -> ConditionedJoints:
    """Joints of (X, Y) reweighted by each class column of the conditioning batch Z."""
    X, Y, Z = as_prob_matrix(X, "X"), as_prob_matrix(Y, "Y"), as_prob_matrix(Z, "Z")
    _check_pair(X, Y)
    _check_pair(X, Z)
    n, K = X.shape
    mass = Z.sum(axis=0)
    active = mass >= ZERO_WEIGHT
    joints = []
    for k in range(K):
        if not active[k]:
            joints.append(JointDistribution.uniform(K))
            continue
        Pk = (X * Z[:, k:k + 1]).T @ Y / mass[k]
        joints.append(JointDistribution(_finish_joint(Pk, symmetrize)))
    weights = mass / n
    weights = weights / weights.sum()
    return ConditionedJoints(weights, tuple(joints), active)


# ------------------------------------------------------------ graph versions

def joint_tensor(X: Tensor, Y: Tensor, symmetrize: bool = True) -> Tensor:
    """Differentiable ``estimate_joint``; returns a 1 x K x K stack."""
    X, Y = ag.as_tensor(X), ag.as_tensor(Y)
    if X.ndim != 2 or X.shape != Y.shape:
        raise ShapeError("joint estimation", X.shape, Y.shape)
    P = ag.scale(ag.matmul(ag.transpose(X), Y), 1.0 / X.shape[0])
    if symmetrize:
        P = ag.scale(P + ag.transpose(P), 0.5)
    P = P / ag.tsum(P)
    return ag.reshape(P, (1,) + P.shape)


def conditional_joint_tensor(X: Tensor, Y: Tensor, Z: Tensor, symmetrize: bool = True):
    """Differentiable ``conditional_joints``.

    Returns ``(stack, weights, active)``: a K x K x K stack of conditioned
    joints, a length-K weight tensor and a boolean mask of classes whose
    conditioning mass clears the zero-weight threshold.
    """
    X, Y, Z = ag.as_tensor(X), ag.as_tensor(Y), ag.as_tensor(Z)
    if X.ndim != 2 or X.shape != Y.shape or X.shape != Z.shape:
        raise ShapeError("conditional joint estimation", X.shape, Y.shape, Z.shape)
    n, K = X.shape
    W = ag.einsum("nk,ni,nj->kij", Z, X, Y)
    if symmetrize:
        W = ag.scale(W + ag.transpose(W), 0.5)
    mass = ag.tsum(W, axis=(1, 2), keepdims=True)
    active = mass.data.reshape(K) >= ZERO_WEIGHT
    P = W / ag.broadcast_to(ag.clamp_min(mass, ZERO_WEIGHT), W.shape)
    total = ag.tsum(mass)
    weights = ag.reshape(mass, (K,)) / ag.broadcast_to(ag.reshape(total, (1,)), (K,))
    return P, weights, active


def mutual_information_tensor(P: Tensor, floor: float = ag.LOG_FLOOR) -> Tensor:
    """MI of each joint in an m x s x s stack; returns shape (m,)."""
    P = ag.as_tensor(P)
    if P.ndim != 3 or P.shape[1] != P.shape[2]:
        raise ShapeError("mutual_information_tensor", P.shape)
    rows = ag.broadcast_to(ag.tsum(P, axis=2, keepdims=True), P.shape)
    cols = ag.broadcast_to(ag.tsum(P, axis=1, keepdims=True), P.shape)
    terms = P * (ag.safe_log(P, floor) - ag.safe_log(rows, floor) - ag.safe_log(cols, floor))
    return ag.tsum(terms, axis=(1, 2))


def entropy_rows_tensor(Q: Tensor, floor: float = ag.LOG_FLOOR) -> Tensor:
    """Entropy of each row of an n x K matrix; returns shape (n,)."""
    return ag.neg(ag.tsum(Q * ag.safe_log(Q, floor), axis=-1))
