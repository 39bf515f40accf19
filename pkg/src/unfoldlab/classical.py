"""Non-learned reference solvers: ISTA for LASSO and scaled-gradient RPCA.

These run on plain numpy arrays (no tape) and serve as the baselines the
unfolded models are measured against; the unfolded forward passes must
reproduce them exactly when specialized to classical parameters, so the
update expressions here mirror the tape ops' forward arithmetic.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import gram_solve_values
from .datagen import SparseRecoveryInstance
from .errors import DivergenceError, DomainError, TuningError
from .psi import PsiOperator


def soft_threshold_np(y: np.ndarray, zeta: float) -> np.ndarray:
    if zeta < 0:
        raise DomainError(f"soft threshold must be nonnegative, got {zeta}")
    return np.sign(y) * np.maximum(np.abs(y) - zeta, 0.0)


def gd_step(s: np.ndarray, grad: np.ndarray, mu: float) -> np.ndarray:
    if s.shape != grad.shape:
        raise DomainError(f"shape mismatch {s.shape} vs {grad.shape}")
    return s - mu * grad


# ---------------------------------------------------------------------------
# ISTA / LASSO


@dataclass
class IstaConfig:
    mu: float
    rho: float
    max_iters: int
    record_trajectory: bool = False

    def __post_init__(self):
        if self.mu <= 0:
            raise DomainError(f"step size mu must be positive, got {self.mu}")
        if self.rho < 0:
            raise DomainError(f"l1 weight rho must be nonnegative, got {self.rho}")
        if self.max_iters < 1:
            raise DomainError("max_iters must be positive")


@dataclass
class IstaResult:
    s: np.ndarray
    trajectory: list | None = None   # s after each iteration
    objectives: list | None = None   # LASSO objective after each iteration


def lasso_objective(s: np.ndarray, inst: SparseRecoveryInstance, rho: float) -> float:
    r = inst.x - inst.h @ s
    return 0.5 * float(r @ r) + rho * float(np.sum(np.abs(s)))


def ista_run(inst: SparseRecoveryInstance, cfg: IstaConfig) -> IstaResult:
    """Proximal-gradient iterations s <- T_{mu*rho}(s + mu H^T (x - H s)) from s=0."""
    h, x = inst.h, inst.x
    s = np.zeros(h.shape[1])
    traj = [] if cfg.record_trajectory else None
    objs = [] if cfg.record_trajectory else None
    thr = cfg.mu * cfg.rho
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(cfg.max_iters):
            s = soft_threshold_np(s + cfg.mu * (h.T @ (x - h @ s)), thr)
            if not np.all(np.isfinite(s)):
                raise DivergenceError("ista", iteration=k + 1)
            if cfg.record_trajectory:
                traj.append(s.copy())
                objs.append(lasso_objective(s, inst, cfg.rho))
    return IstaResult(s=s, trajectory=traj, objectives=objs)


# ---------------------------------------------------------------------------
# RPCA: alternating soft-threshold / scaled-gradient solver


@dataclass
class RpcaSolverConfig:
    eta_l: float
    eta_r: float
    zeta: float
    max_iters: int
    init_zeta0: float = 1.0

    def __post_init__(self):
        # eta = 0 is admitted so the L/R-freezing property is expressible;
        # solvers need strictly positive steps to make progress
        if self.eta_l < 0 or self.eta_r < 0:
            raise DomainError("step sizes must be nonnegative")
        if self.zeta < 0 or self.init_zeta0 < 0:
            raise DomainError("thresholds must be nonnegative")
        if self.max_iters < 1:
            raise DomainError("max_iters must be positive")


@dataclass
class RpcaState:
    l: np.ndarray      # n1 x r
    r_fac: np.ndarray  # n2 x r
    y: np.ndarray      # n1 x n2
    iter: int = 0


def rpca_init(x: np.ndarray, psi: PsiOperator, rank_r: int, init_zeta0: float) -> RpcaState:
    """Spectral initialization: threshold psi^{-1} X, then balanced rank-r SVD factors."""
    if rank_r > min(x.shape):
        raise DomainError(f"rank {rank_r} exceeds min dimension {min(x.shape)}")
    y0 = soft_threshold_np(psi.apply_inv(x), init_zeta0)
    w = x - psi.apply(y0)
    try:
        u, sv, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise DivergenceError("rpca_init SVD") from e
    root = np.sqrt(sv[:rank_r])
    l0 = u[:, :rank_r] * root
    r0 = vt[:rank_r].T * root
    return RpcaState(l=l0, r_fac=r0, y=y0, iter=0)


def rpca_iterate(state: RpcaState, x: np.ndarray, psi: PsiOperator,
                 cfg: RpcaSolverConfig) -> RpcaState:
    """One iteration: Y soft-threshold, then scaled-gradient steps on L and R.

    The L step uses the fresh Y with the old R; the R step uses the fresh
    L and Y.  Gradients are of 0.5 ||L R^T + psi Y - X||_F^2, each
    right-preconditioned by the opposite factor's inverse Gram matrix.
    """
    l, r = state.l, state.r_fac
    y = soft_threshold_np(psi.apply_inv(x - l @ r.T), cfg.zeta)
    py = psi.apply(y)
    resid = (l @ r.T + py) - x
    l_new = l - cfg.eta_l * gram_solve_values(r, resid @ r)[0]
    resid2 = (l_new @ r.T + py) - x
    r_new = r - cfg.eta_r * gram_solve_values(l_new, resid2.T @ l_new)[0]
    return RpcaState(l=l_new, r_fac=r_new, y=y, iter=state.iter + 1)


def rpca_objective(state: RpcaState, x: np.ndarray, psi: PsiOperator, lam: float) -> float:
    """Relaxed objective 0.5 ||L R^T + psi Y - X||_F^2 + lam ||Y||_1."""
    resid = (state.l @ state.r_fac.T + psi.apply(state.y)) - x
    return 0.5 * float(np.sum(resid * resid)) + lam * float(np.sum(np.abs(state.y)))


def supervised_loss_np(v_hat: np.ndarray, v_star: np.ndarray) -> float:
    d = v_hat - v_star
    return float(np.sum(d * d) / np.sum(v_star * v_star))


@dataclass
class RpcaRunResult:
    state: RpcaState
    losses: list          # supervised loss per iteration (when v_star given)
    objectives: list      # relaxed objective per iteration
    wall_ns: list
    converged_at: int | None = None


def rpca_run(x: np.ndarray, psi: PsiOperator, rank_r: int, cfg: RpcaSolverConfig,
             v_star: np.ndarray | None = None, rel_tol: float = 0.0) -> RpcaRunResult:
    """Init + up to max_iters iterations, recording per-iteration diagnostics.

    With rel_tol > 0 the run stops early once the relaxed objective's
    relative change drops below rel_tol.
    """
    state = rpca_init(x, psi, rank_r, cfg.init_zeta0)
    losses, objectives, wall = [], [], []
    prev_obj = None
    converged = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(cfg.max_iters):
            t0 = time.perf_counter_ns()
            state = rpca_iterate(state, x, psi, cfg)
            wall.append(time.perf_counter_ns() - t0)
            obj = rpca_objective(state, x, psi, cfg.zeta)
            if not np.isfinite(obj):
                raise DivergenceError("rpca", iteration=k + 1)
            objectives.append(obj)
            if v_star is not None:
                losses.append(supervised_loss_np(state.l @ state.r_fac.T, v_star))
            if rel_tol > 0 and prev_obj is not None:
                if abs(prev_obj - obj) <= rel_tol * max(abs(prev_obj), 1e-300):
                    converged = k + 1
                    break
            prev_obj = obj
    return RpcaRunResult(state=state, losses=losses, objectives=objectives,
                         wall_ns=wall, converged_at=converged)


# ---------------------------------------------------------------------------
# baseline tuning

ETA_GRID = (0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
ZETA_MULTIPLIERS = (0.5, 1.0, 2.0, 4.0, 8.0)


def residual_threshold_scale(instances, psi: PsiOperator, rank_r: int,
                             init_zeta0: float) -> float:
    """Median |psi^{-1}(X - L0 R0^T)| entry after init, averaged over instances."""
    meds = []
    for inst in instances:
        st = rpca_init(inst.x_obs, psi, rank_r, init_zeta0)
        resid = psi.apply_inv(inst.x_obs - st.l @ st.r_fac.T)
        meds.append(float(np.median(np.abs(resid))))
    return float(np.mean(meds))


def default_grid(instances, psi: PsiOperator, rank_r: int, init_zeta0: float):
    zhat = residual_threshold_scale(instances, psi, rank_r, init_zeta0)
    return [(eta, mult * zhat) for eta in ETA_GRID for mult in ZETA_MULTIPLIERS]


def tune_baseline(instances, psi: PsiOperator, rank_r: int, grid, iters: int,
                  init_zeta0: float = 1.0) -> RpcaSolverConfig:
    """Grid search minimizing mean final supervised loss over the instances.

    Divergent grid points are skipped; ties break toward smaller eta, then
    smaller zeta.  Raises TuningError when every point diverges.
    """
    if not grid:
        raise TuningError("empty tuning grid")
    best = None
    for eta, zeta in grid:
        cfg = RpcaSolverConfig(eta_l=eta, eta_r=eta, zeta=zeta, max_iters=iters,
                               init_zeta0=init_zeta0)
        total = 0.0
        ok = True
        for inst in instances:
            try:
                res = rpca_run(inst.x_obs, psi, rank_r, cfg, v_star=inst.v_star)
            except (DivergenceError, ArithmeticError):
                ok = False
                break
            total += res.losses[-1]
        if not ok:
            continue
        mean_loss = total / len(instances)
        key = (mean_loss, eta, zeta)
        if best is None or key < best[0]:
            best = (key, cfg)
    if best is None:
        raise TuningError("all grid points diverged")
    return best[1]


def dump_trajectory_csv(path, objectives, rel_err_v, rel_err_y, wall_ns) -> None:
    """Trajectory CSV: iter, objective, rel_err_V, rel_err_Y, wall_ns."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "objective", "rel_err_V", "rel_err_Y", "wall_ns"])
        for i, obj in enumerate(objectives, start=1):
            w.writerow([i, repr(obj),
                        repr(rel_err_v[i - 1]) if rel_err_v else "",
                        repr(rel_err_y[i - 1]) if rel_err_y else "",
                        wall_ns[i - 1]])
