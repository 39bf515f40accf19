"""Applying a fixed sparsity-domain transform and its inverse.

The solvers need `psi^{-1} M` many times for one fixed psi.  A
:class:`PsiOperator` classifies psi once (identity / orthogonal / general)
and caches an LU factorization in the general case; orthogonal transforms
use the transpose instead of a solve.
"""

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad
from .errors import DimensionError, SingularMatrixError

ORTHO_TOL = 1e-10


class PsiOperator:
    """Fixed square transform with cached inverse application."""

    def __init__(self, mat: np.ndarray):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DimensionError(f"psi must be square, got {mat.shape}")
        self.mat = mat
        n = mat.shape[0]
        if np.array_equal(mat, np.eye(n)):
            self.mode = "identity"
            self._lu = None
        elif np.linalg.norm(mat.T @ mat - np.eye(n)) <= ORTHO_TOL:
            self.mode = "orthogonal"
            self._lu = None
        else:
            cond = np.linalg.cond(mat)
            if not np.isfinite(cond) or cond > ad.COND_LIMIT:
                raise SingularMatrixError(cond, "psi")
            self.mode = "general"
            self._lu = sla.lu_factor(mat)

    @property
    def is_identity(self) -> bool:
        return self.mode == "identity"

    def apply(self, m: np.ndarray) -> np.ndarray:
        """psi @ m"""
        if self.mode == "identity":
            return m
        return self.mat @ m

    def apply_inv(self, m: np.ndarray) -> np.ndarray:
        """psi^{-1} @ m"""
        if self.mode == "identity":
            return m
        if self.mode == "orthogonal":
            return self.mat.T @ m
        return sla.lu_solve(self._lu, m)

    def apply_inv_t(self, m: np.ndarray) -> np.ndarray:
        """psi^{-T} @ m (adjoint of apply_inv, used by backward rules)."""
        if self.mode == "identity":
            return m
        if self.mode == "orthogonal":
            return self.mat @ m
        return sla.lu_solve(self._lu, m, trans=1)


def psi_apply(op: PsiOperator, t: ad.Tensor) -> ad.Tensor:
    """Tape op: psi @ t for a fixed (non-trainable) psi."""
    if op.is_identity:
        return t
    vt = t.values
    out = op.mat @ vt

    def bwd(g, slots):
        ad._acc(slots, t.node, op.mat.T @ g)

    return t.tape._emit("psi_apply", out, (t.node,), bwd, t.requires_grad)


def psi_apply_inv(op: PsiOperator, t: ad.Tensor) -> ad.Tensor:
    """Tape op: psi^{-1} @ t for a fixed (non-trainable) psi."""
    if op.is_identity:
        return t
    out = op.apply_inv(t.values)

    def bwd(g, slots):
        ad._acc(slots, t.node, op.apply_inv_t(g))

    return t.tape._emit("psi_apply_inv", out, (t.node,), bwd, t.requires_grad)
