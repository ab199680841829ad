"""Class centers on the unit sphere: offline uniformity optimization,
moving-average empirical class means, and exact center-to-class allocation.

The center geometry is computed once, offline, by minimizing

    L(psi) = sum_c log sum_{c'} exp(psi_c . psi_{c'} / tau)

over K unit vectors (self term included; it adds a constant per row and
does not move the argmin). For d >= K-1 the minimizer is the regular
K-vertex simplex with pairwise inner products -1/(K-1).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import RngStream, as_float_array, normalize_rows

EXHAUSTIVE_ASSIGNMENT_MAX_K = 8


class NotConvergedError(RuntimeError):
    """Center optimization hit max_iters above the gradient tolerance."""

    def __init__(self, grad_norm: float, max_iters: int):
        super().__init__(
            f"gradient norm {grad_norm:.3e} after {max_iters} iterations"
        )
        self.grad_norm = grad_norm
        self.max_iters = max_iters


class DegenerateBatchMeanError(ValueError):
    """A class's batch feature sum had (numerically) zero length."""


class UninitializedMeansError(ValueError):
    """Allocation requested before every class mean was observed."""

    def __init__(self, missing_classes):
        self.missing_classes = list(missing_classes)
        super().__init__(f"classes without an empirical mean: {self.missing_classes}")


@dataclass(frozen=True)
class UniformityConfig:
    """Knobs of the projected-gradient center search."""

    tau: float = 1.0
    learning_rate: float = 0.1
    max_iters: int = 20000
    grad_tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class ClassCenters:
    """K precomputed unit-norm center directions in R^d."""

    K: int
    d: int
    centers: np.ndarray  # K x d, unit rows
    tau_unif: float
    final_loss: float = float("nan")
    iterations: int = 0

    def __post_init__(self):
        if self.centers.shape != (self.K, self.d):
            raise ValueError("centers shape does not match (K, d)")
        norms = np.linalg.norm(self.centers, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("center rows must be unit-norm to 1e-9")

    def max_pairwise_inner_product(self) -> float:
        g = self.centers @ self.centers.T
        off = g[~np.eye(self.K, dtype=bool)]
        return float(np.max(off)) if off.size else float("nan")


@dataclass
class EmpiricalMeans:
    """Moving-average unit-norm feature mean per class (1-based class ids)."""

    K: int
    d: int
    eta: float = 0.1
    means: np.ndarray = None  # type: ignore[assignment]
    initialized: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("eta must be in (0, 1]")
        if self.means is None:
            self.means = np.zeros((self.K, self.d))
        if self.initialized is None:
            self.initialized = np.zeros(self.K, dtype=bool)
        if self.means.shape != (self.K, self.d):
            raise ValueError("means shape does not match (K, d)")

    def all_initialized(self) -> bool:
        return bool(np.all(self.initialized))


@dataclass(frozen=True)
class Assignment:
    """Permutation pi: class index c (0-based, class id c+1) -> center row pi[c]."""

    pi: tuple

    def __post_init__(self):
        if sorted(self.pi) != list(range(len(self.pi))):
            raise ValueError("pi must be a permutation of 0..K-1")

    def center_for_class(self, class_id: int, centers: ClassCenters) -> np.ndarray:
        """Assigned center direction for a 1-based class id."""
        return centers.centers[self.pi[class_id - 1]]


def uniformity_loss_and_grad(centers, tau: float):
    """Uniformity loss over K unit rows and its Euclidean gradient.

    Loss: sum_c log sum_{c'} exp(psi_c . psi_{c'} / tau), self term included.
    Gradient: with row-softmax P of the score matrix, grad = (P + P^T) Psi / tau
    (each row appears once as the query row and once as a key column).
    """
    psi = as_float_array(centers, "centers")
    if psi.ndim != 2:
        raise ValueError("centers must be a K x d matrix")
    if tau <= 0:
        raise ValueError("tau must be positive")
    scores = psi @ psi.T / tau
    smax = np.max(scores, axis=1, keepdims=True)
    exps = np.exp(scores - smax)
    row_sums = np.sum(exps, axis=1, keepdims=True)
    loss = float(np.sum(np.log(row_sums) + smax))
    probs = exps / row_sums
    grad = (probs + probs.T) @ psi / tau
    return loss, grad


def tangent_project(grad, psi):
    """Project Euclidean row gradients onto the sphere tangent: g - (g.psi) psi."""
    radial = np.sum(grad * psi, axis=1, keepdims=True)
    return grad - radial * psi


def precompute_centers(K: int, d: int, config: UniformityConfig = UniformityConfig()) -> ClassCenters:
    """Optimize K uniformly spread unit vectors in R^d by projected descent.

    Fixed-step descent on the tangent component, renormalizing each row after
    every step (the retraction). Deterministic given config.seed.

    Raises NotConvergedError when max_iters is reached above grad_tol.
    """
    if K < 2:
        raise ValueError("need K >= 2 centers")
    if d < K - 1:
        warnings.warn(
            f"d={d} < K-1={K - 1}: the regular simplex does not fit; "
            "optimization still runs but equal pairwise angles are unreachable",
            stacklevel=2,
        )
    gen = RngStream(config.seed).substream("centers-init", K, d).generator()
    psi = normalize_rows(gen.standard_normal((K, d)))
    loss = float("nan")
    grad_norm = float("inf")
    for it in range(1, config.max_iters + 1):
        loss, grad = uniformity_loss_and_grad(psi, config.tau)
        riem = tangent_project(grad, psi)
        grad_norm = float(np.linalg.norm(riem))
        if grad_norm <= config.grad_tol:
            return ClassCenters(
                K=K, d=d, centers=psi, tau_unif=config.tau,
                final_loss=loss, iterations=it,
            )
        psi = normalize_rows(psi - config.learning_rate * riem)
    raise NotConvergedError(grad_norm, config.max_iters)


def update_empirical_means(means: EmpiricalMeans, features, labels) -> EmpiricalMeans:
    """Fold a batch of unit features into the per-class moving averages.

    Per class present in the batch: batch mean = normalized feature sum, then
    mean <- normalize((1 - eta) * mean + eta * batch_mean). A class's first
    observation sets its mean to the batch mean directly. Absent classes keep
    their rows bitwise unchanged.

    Raises DegenerateBatchMeanError when a class's feature sum has norm
    below 1e-12.
    """
    phi = as_float_array(features, "features")
    labels = np.asarray(labels)
    if phi.ndim != 2 or phi.shape[1] != means.d:
        raise ValueError("features must be n x d")
    if labels.shape != (phi.shape[0],):
        raise ValueError("labels must align with features")
    if labels.size and (labels.min() < 1 or labels.max() > means.K):
        raise ValueError("labels must lie in 1..K")

    new_means = means.means.copy()
    new_flags = means.initialized.copy()
    for c in np.unique(labels):
        row = int(c) - 1
        s = phi[labels == c].sum(axis=0)
        norm = float(np.linalg.norm(s))
        if norm < 1e-12:
            raise DegenerateBatchMeanError(f"class {int(c)} batch feature sum is degenerate")
        batch_mean = s / norm
        if not new_flags[row]:
            new_means[row] = batch_mean
            new_flags[row] = True
        else:
            blended = (1.0 - means.eta) * new_means[row] + means.eta * batch_mean
            bnorm = float(np.linalg.norm(blended))
            if bnorm < 1e-12:
                raise DegenerateBatchMeanError(
                    f"class {int(c)} EMA blend collapsed to zero"
                )
            new_means[row] = blended / bnorm
    return EmpiricalMeans(
        K=means.K, d=means.d, eta=means.eta, means=new_means, initialized=new_flags
    )


def assignment_cost(centers: ClassCenters, means: EmpiricalMeans, pi) -> float:
    """Sum over classes of || center[pi[c]] - mean[c] ||_2 for permutation pi."""
    diffs = centers.centers[np.asarray(pi)] - means.means
    return float(np.sum(np.linalg.norm(diffs, axis=1)))


def allocate_centers(centers: ClassCenters, means: EmpiricalMeans) -> Assignment:
    """Exact argmin over permutations of the summed center-to-mean distances.

    Exhaustive search for K <= 8 (ties -> lexicographically smallest
    permutation); Hungarian assignment above that.

    Raises UninitializedMeansError when any class mean is missing.
    """
    if centers.K != means.K or centers.d != means.d:
        raise ValueError("centers and means disagree on (K, d)")
    if not means.all_initialized():
        missing = [int(i) + 1 for i in np.flatnonzero(~means.initialized)]
        raise UninitializedMeansError(missing)
    K = centers.K
    # cost[c, j] = distance from class c's mean to center j
    cost = np.linalg.norm(means.means[:, None, :] - centers.centers[None, :, :], axis=2)
    if K <= EXHAUSTIVE_ASSIGNMENT_MAX_K:
        best_pi = None
        best_cost = float("inf")
        for perm in itertools.permutations(range(K)):
            c = float(cost[np.arange(K), perm].sum())
            if c < best_cost:
                best_cost = c
                best_pi = perm
        return Assignment(pi=tuple(best_pi))
    rows, cols = linear_sum_assignment(cost)
    return Assignment(pi=tuple(int(cols[i]) for i in np.argsort(rows)))
