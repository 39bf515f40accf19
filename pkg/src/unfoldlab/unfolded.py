"""The four unfolded variants of the scaled-gradient RPCA solver.

All variants share one unrolled skeleton with fixed depth K: a
soft-threshold Y-update followed by Gram-preconditioned gradient steps on
the low-rank factors, with per-iteration trainable parameters.

    hyper       per-iteration step sizes and threshold (eta_L, eta_R, zeta)
    objective   hyper + a per-iteration learned transform psi_k used in the
                Y-update solve and in the residual
    correction  hyper + a two-layer conv net whose two output maps are
                projected onto factor space and added after the L/R steps
    inductive   hyper + a two-layer conv net replacing the psi^{-1}
                application inside the Y-update

Positivity of learned step sizes and thresholds is enforced by storing raw
values and materializing through softplus.  Conv nets consume a 4-channel
stack (X, L R^T, psi_hat Y, residual), each channel divided by
||X||_F / sqrt(n1 n2) so the net sees instance-independent scales.
"""

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .classical import RpcaSolverConfig, rpca_init
from .errors import DivergenceError, DomainError, SingularMatrixError
from .lista import NET_GROUP, SCALAR_GROUP, TrajPoint, softplus_inv
from .psi import PsiOperator, psi_apply, psi_apply_inv
from .rng import Rng, derive_seed

VARIANTS = ("hyper", "objective", "correction", "inductive")


@dataclass
class UnfoldContext:
    """Frozen per-model context: the (possibly mismatched) transform and dims."""

    psi_hat: np.ndarray
    rank_r: int
    n1: int
    n2: int
    depth_k: int = 10
    hidden_channels: int = 8
    shared_conv: bool = False
    init_zeta0: float = 1.0
    seed: int = 0


@dataclass
class UnfoldedRpcaModel:
    variant: str
    depth_k: int
    rank_r: int
    n1: int
    n2: int
    psi_hat: np.ndarray
    hidden_channels: int = 8
    shared_conv: bool = False
    init_zeta0: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}")
        if self.depth_k < 1:
            raise DomainError("depth must be positive")
        self._psi_op = PsiOperator(self.psi_hat)
        # spectral initialization depends only on the observation, never on
        # trainable parameters, so it is computed once per distinct input
        self._init_cache = {}

    # -- parameter metadata ------------------------------------------------

    def _conv_prefix(self, k: int) -> str:
        return "shared" if self.shared_conv else f"iter{k:02d}"

    def stage_of(self, name: str) -> int:
        if name.startswith("shared."):
            return 0
        return int(name[len("iter"):name.index(".")])

    def group_of(self, name: str) -> str:
        tail = name.split(".", 1)[1]
        return SCALAR_GROUP if tail in ("eta_l", "eta_r", "zeta") else NET_GROUP

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def make_leaves(self, tape: ad.Tape, trainable=()) -> dict:
        trainable = set(trainable)
        return {name: tape.leaf(arr, requires_grad=name in trainable)
                for name, arr in self.params.items()}

    def hyperparams(self, k: int) -> tuple:
        """Materialized (eta_l, eta_r, zeta) at iteration k, as floats."""
        sp = lambda v: float(np.logaddexp(0.0, v[0]))
        return (sp(self.params[f"iter{k:02d}.eta_l"]),
                sp(self.params[f"iter{k:02d}.eta_r"]),
                sp(self.params[f"iter{k:02d}.zeta"]))

    # -- forward -----------------------------------------------------------

    def _conv_net(self, tape, leaves, channels, k, scale_norm):
        prefix = self._conv_prefix(k)
        stacked = ad.stack_channels([ad.scale(c, 1.0 / scale_norm) for c in channels])
        h = ad.relu(ad.conv2d(stacked, leaves[f"{prefix}.conv1.kernels"],
                              leaves[f"{prefix}.conv1.bias"]))
        return ad.conv2d(h, leaves[f"{prefix}.conv2.kernels"],
                         leaves[f"{prefix}.conv2.bias"])

    def forward_tape(self, tape: ad.Tape, leaves: dict, x: np.ndarray,
                     depth: int | None = None) -> list:
        """Unroll `depth` iterations on the tape; returns per-iteration TrajPoints.

        The update mirrors the classical solver exactly: Y from the old
        factors, then L with the fresh Y and old R, then R with the fresh
        L and Y.  Variants only change where psi enters and whether conv
        corrections are added.
        """
        depth = self.depth_k if depth is None else depth
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n1, self.n2):
            raise DomainError(f"observation shape {x.shape} != ({self.n1}, {self.n2})")
        psi_op = self._psi_op
        key = x.tobytes()
        state0 = self._init_cache.get(key)
        if state0 is None:
            state0 = rpca_init(x, psi_op, self.rank_r, self.init_zeta0)
            self._init_cache[key] = state0
        tx = tape.leaf(x)
        tl = tape.leaf(state0.l)
        tr = tape.leaf(state0.r_fac)
        ty = tape.leaf(state0.y)
        scale_norm = float(np.linalg.norm(x)) / np.sqrt(self.n1 * self.n2)
        traj = []
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for k in range(1, depth + 1):
                try:
                    tl, tr, ty = self._iteration(tape, leaves, tx, tl, tr, ty,
                                                 k, scale_norm)
                except SingularMatrixError as e:
                    # a NaN condition estimate means the iterates blew up,
                    # not that the factors genuinely lost rank
                    if not np.isfinite(e.cond):
                        raise DivergenceError(f"unfolded {self.variant}",
                                              iteration=k) from e
                    raise
                traj.append(TrajPoint(estimate=ad.matmul(tl, ad.transpose(tr)),
                                      l=tl, r=tr, y=ty))
        return traj

    def _iteration(self, tape, leaves, tx, tl, tr, ty, k, scale_norm):
        psi_op = self._psi_op

        def finite_or_raise(t):
            if not np.all(np.isfinite(t.values)):
                raise DivergenceError(f"unfolded {self.variant}", iteration=k)
            return t

        eta_l = ad.softplus(leaves[f"iter{k:02d}.eta_l"])
        eta_r = ad.softplus(leaves[f"iter{k:02d}.eta_r"])
        zeta = ad.softplus(leaves[f"iter{k:02d}.zeta"])
        psi_k = leaves[f"iter{k:02d}.psi"] if self.variant == "objective" else None

        v = ad.matmul(tl, ad.transpose(tr))
        x_minus_v = ad.sub(tx, v)
        if self.variant == "inductive":
            py_old = psi_apply(psi_op, ty)
            resid_old = ad.sub(ad.add(v, py_old), tx)
            net_out = self._conv_net(tape, leaves, [tx, v, py_old, resid_old],
                                     k, scale_norm)
            ty = ad.soft_threshold(ad.take_channel(net_out, 0), zeta)
        elif self.variant == "objective":
            ty = ad.soft_threshold(ad.solve(psi_k, x_minus_v), zeta)
        else:
            ty = ad.soft_threshold(psi_apply_inv(psi_op, x_minus_v), zeta)
        finite_or_raise(ty)

        py = ad.matmul(psi_k, ty) if self.variant == "objective" else psi_apply(psi_op, ty)
        resid = ad.sub(ad.add(v, py), tx)
        if self.variant == "correction":
            net_out = self._conv_net(tape, leaves, [tx, v, py, resid], k, scale_norm)
            out1 = ad.take_channel(net_out, 0)
            out2 = ad.take_channel(net_out, 1)

        tl_new = ad.sub(tl, ad.scale(ad.gram_solve(tr, ad.matmul(resid, tr)), eta_l))
        if self.variant == "correction":
            tl_new = ad.add(tl_new, ad.gram_solve(tr, ad.matmul(out1, tr)))
        finite_or_raise(tl_new)

        resid2 = ad.sub(ad.add(ad.matmul(tl_new, ad.transpose(tr)), py), tx)
        tr_new = ad.sub(tr, ad.scale(
            ad.gram_solve(tl_new, ad.matmul(ad.transpose(resid2), tl_new)), eta_r))
        if self.variant == "correction":
            tr_new = ad.add(tr_new, ad.gram_solve(
                tl_new, ad.matmul(ad.transpose(out2), tl_new)))
        finite_or_raise(tr_new)
        return tl_new, tr_new, ty


def forward(model: UnfoldedRpcaModel, x: np.ndarray, depth: int | None = None):
    """Gradient-free forward pass; per-iteration (l, r, y, v) numpy arrays."""
    tape = ad.Tape(recording=False)
    traj = model.forward_tape(tape, model.make_leaves(tape), x, depth=depth)
    return [SimpleNamespace(l=p.l.values, r=p.r.values, y=p.y.values,
                            v=p.estimate.values) for p in traj]


def _conv_shapes(variant: str, hidden: int):
    out_ch = 2 if variant == "correction" else 1
    return {
        "conv1.kernels": (hidden, 4, 3, 3),
        "conv1.bias": (hidden,),
        "conv2.kernels": (out_ch, hidden, 3, 3),
        "conv2.bias": (out_ch,),
    }


def init_from_classical(variant: str, baseline: RpcaSolverConfig,
                        ctx: UnfoldContext) -> UnfoldedRpcaModel:
    """Unfolded model starting at the classical solver's parameters.

    Hyperparameter blocks take the baseline values at every iteration;
    psi_k starts at psi_hat; conv kernels start at a seeded normal with
    std 1e-3 (biases zero) so corrections begin near zero.
    """
    model = UnfoldedRpcaModel(
        variant=variant, depth_k=ctx.depth_k, rank_r=ctx.rank_r,
        n1=ctx.n1, n2=ctx.n2, psi_hat=np.asarray(ctx.psi_hat, dtype=np.float64),
        hidden_channels=ctx.hidden_channels, shared_conv=ctx.shared_conv,
        init_zeta0=baseline.init_zeta0,
    )
    raw = {
        "eta_l": np.array([softplus_inv(baseline.eta_l)]),
        "eta_r": np.array([softplus_inv(baseline.eta_r)]),
        "zeta": np.array([softplus_inv(baseline.zeta)]),
    }
    for k in range(1, ctx.depth_k + 1):
        for name, val in raw.items():
            model.params[f"iter{k:02d}.{name}"] = val.copy()
        if variant == "objective":
            model.params[f"iter{k:02d}.psi"] = model.psi_hat.copy()
    if variant in ("correction", "inductive"):
        shapes = _conv_shapes(variant, ctx.hidden_channels)
        prefixes = ["shared"] if ctx.shared_conv else [
            f"iter{k:02d}" for k in range(1, ctx.depth_k + 1)]
        for prefix in prefixes:
            rng = Rng(derive_seed(ctx.seed, "conv", variant, prefix))
            for name, shape in shapes.items():
                if name.endswith("kernels"):
                    if variant == "correction":
                        # corrections must start near zero so the model
                        # specializes to the classical trajectory
                        std = 1e-3
                    else:
                        # the inductive net feeds a soft threshold: its output
                        # must start at data scale or the threshold's dead
                        # zone blocks every gradient
                        std = np.sqrt(2.0 / (shape[1] * 9))
                    model.params[f"{prefix}.{name}"] = std * rng.normal(shape)
                else:
                    model.params[f"{prefix}.{name}"] = np.zeros(shape)
    return model


def param_count(model: UnfoldedRpcaModel) -> int:
    return model.param_count()
