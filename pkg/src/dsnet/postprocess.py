"""Probability map -> lesion mask: ISODATA threshold, then largest 8-connected region."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

ISODATA_TOL = 1e-6
ISODATA_MAX_ITER = 100

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DegenerateMapWarning(UserWarning):
    """Probability map is constant; no threshold separates two classes."""


class IsodataCapWarning(UserWarning):
    """ISODATA hit its iteration cap before converging."""


class EmptyPredictionWarning(UserWarning):
    """Post-processing produced no foreground pixels."""


def _check_map(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("probability map contains NaN or Inf")
    if m.size == 0:
        raise ValueError("empty probability map")
    if m.min() < 0 or m.max() > 1:
        raise ValueError("probability map values must lie in [0, 1]")
    return m


def isodata_threshold(m, tol: float = ISODATA_TOL, max_iter: int = ISODATA_MAX_ITER,
                      return_iterations: bool = False):
    """Ridler-Calvard iterative threshold starting from the global mean.

    The threshold is moved to the midpoint of the means of the pixels at or
    below it and the pixels above it until it moves less than ``tol``.
    """
    m = _check_map(m).ravel()
    lo, hi = m.min(), m.max()
    if lo == hi:
        warnings.warn(f"constant probability map ({lo:g}); threshold is degenerate",
                      DegenerateMapWarning, stacklevel=2)
        return (float(lo), 0) if return_iterations else float(lo)
    tau = float(m.mean())
    for it in range(1, max_iter + 1):
        below = m <= tau
        # both sides are nonempty: min <= tau < max holds for every midpoint
        new = 0.5 * (m[below].mean() + m[~below].mean())
        delta = abs(new - tau)
        tau = float(new)
        if delta < tol:
            break
    else:
        warnings.warn(f"ISODATA did not converge within {max_iter} iterations",
                      IsodataCapWarning, stacklevel=2)
    return (tau, it) if return_iterations else tau


def binarize(m, tau: float) -> np.ndarray:
    if not 0 <= tau <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {tau}")
    return (np.asarray(m) > tau).astype(np.uint8)


def largest_connected_component(mask) -> np.ndarray:
    """Keep the largest 8-connected foreground region.

    Ties go to the component whose first pixel comes earliest in row-major
    order (``ndimage.label`` numbers components in that order).
    """
    mask = np.asarray(mask)
    labels, n = ndimage.label(mask > 0, structure=EIGHT_CONNECTED)
    if n == 0:
        warnings.warn("empty prediction: no foreground pixels", EmptyPredictionWarning,
                      stacklevel=2)
        return np.zeros(mask.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return (labels == int(np.argmax(sizes))).astype(np.uint8)


def postprocess(m) -> np.ndarray:
    m = _check_map(m)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    return largest_connected_component(binarize(m, isodata_threshold(m)))
