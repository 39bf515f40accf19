"""LISTA-family unfolded sparse recovery.

A :class:`ListaModel` is K layers of ``s <- T_beta(W1 x + W2 s)``.  The
free variant trains per-layer (W1, W2, beta); the coupled variant pins
``W2 = I - W1 H`` to the generating operator and trains only (W1, beta).
Initializing from ISTA (``W1 = mu H^T``, ``W2 = I - mu H^T H``,
``beta = mu rho``) reproduces the classical solver layer by layer.

Thresholds stay nonnegative through the softplus reparameterization, so
models store a raw scalar per layer rather than beta itself.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, DomainError

SCALAR_GROUP = "scalar"
NET_GROUP = "net"


def softplus_np(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    """Raw value r with softplus(r) = y; y <= 0 maps to a floor giving ~0."""
    if y <= 0.0:
        return -745.0  # softplus underflows to a subnormal, numerically zero
    if y > 30.0:
        return float(y)  # softplus is the identity to double precision here
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class TrajPoint:
    """One iteration's outputs; solver-specific extras ride along."""

    estimate: ad.Tensor
    l: ad.Tensor | None = None
    r: ad.Tensor | None = None
    y: ad.Tensor | None = None


@dataclass
class ListaModel:
    k_layers: int
    m: int
    n: int
    coupled: bool
    tied: bool = False
    h_ref: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.coupled and self.h_ref is None:
            raise DomainError("coupled model requires the generating operator H")

    @property
    def depth_k(self) -> int:
        return self.k_layers

    def _key(self, k: int, name: str) -> str:
        return f"shared.{name}" if self.tied else f"layer{k:02d}.{name}"

    def stage_of(self, name: str) -> int:
        if name.startswith("shared."):
            return 0
        return int(name[len("layer"):name.index(".")])

    def group_of(self, name: str) -> str:
        return SCALAR_GROUP if name.endswith(".beta") else NET_GROUP

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def betas(self) -> list:
        """Materialized (nonnegative) per-layer thresholds."""
        return [float(softplus_np(self.params[self._key(k, "beta")][0]))
                for k in range(1, self.k_layers + 1)]

    def forward_tape(self, tape: ad.Tape, leaves: dict, x: np.ndarray,
                     depth: int | None = None) -> list:
        depth = self.k_layers if depth is None else depth
        xv = np.asarray(x, dtype=np.float64).reshape(self.m, 1)
        tx = tape.leaf(xv)
        s = tape.leaf(np.zeros((self.n, 1)))
        eye = tape.leaf(np.eye(self.n)) if self.coupled else None
        th = tape.leaf(self.h_ref) if self.coupled else None
        traj = []
        for k in range(1, depth + 1):
            w1 = leaves[self._key(k, "w1")]
            beta = ad.softplus(leaves[self._key(k, "beta")])
            if self.coupled:
                w2s = ad.sub(eye, ad.matmul(w1, th))
            else:
                w2s = leaves[self._key(k, "w2")]
            s = ad.soft_threshold(ad.add(ad.matmul(w1, tx), ad.matmul(w2s, s)), beta)
            traj.append(TrajPoint(estimate=s))
        return traj

    def make_leaves(self, tape: ad.Tape, trainable=()) -> dict:
        trainable = set(trainable)
        return {name: tape.leaf(arr, requires_grad=name in trainable)
                for name, arr in self.params.items()}


def lista_init_from_ista(h: np.ndarray, mu: float, rho: float, k_layers: int,
                         coupled: bool = False, tied: bool = False) -> ListaModel:
    """Every layer set to the analytic ISTA values for (H, mu, rho)."""
    if mu <= 0:
        raise DomainError(f"step size mu must be positive, got {mu}")
    h = np.asarray(h, dtype=np.float64)
    m, n = h.shape
    model = ListaModel(k_layers=k_layers, m=m, n=n, coupled=coupled, tied=tied,
                       h_ref=h.copy() if coupled else None)
    w1 = mu * h.T
    w2 = np.eye(n) - w1 @ h  # same expression the coupling residual uses
    raw_beta = np.array([softplus_inv(mu * rho)])
    layer_range = (1,) if tied else range(1, k_layers + 1)
    for k in layer_range:
        model.params[model._key(k, "w1")] = w1.copy()
        if not coupled:
            model.params[model._key(k, "w2")] = w2.copy()
        model.params[model._key(k, "beta")] = raw_beta.copy()
    return model


def lista_forward(x: np.ndarray, model: ListaModel):
    """Run the model; returns (s_final, [s_1 ... s_K]) as numpy vectors."""
    tape = ad.Tape(recording=False)
    leaves = model.make_leaves(tape)
    traj = model.forward_tape(tape, leaves, x)
    outs = [p.estimate.values.reshape(-1).copy() for p in traj]
    return outs[-1], outs


def materialized_w2(model: ListaModel, k: int) -> np.ndarray:
    if model.coupled:
        w1 = model.params[model._key(k, "w1")]
        return np.eye(model.n) - w1 @ model.h_ref
    return model.params[model._key(k, "w2")]


def coupling_residual(model: ListaModel, h: np.ndarray) -> list:
    """Per-layer ||W2_k - (I - W1_k H)||_F; identically zero when coupled."""
    h = np.asarray(h, dtype=np.float64)
    out = []
    for k in range(1, model.k_layers + 1):
        w1 = model.params[model._key(k, "w1")]
        w2 = materialized_w2(model, k)
        out.append(float(np.linalg.norm(w2 - (np.eye(model.n) - w1 @ h))))
    return out


def free_param_count(k_layers: int, m: int, n: int) -> int:
    return k_layers * (n * m + n * n + 1)


def coupled_param_count(k_layers: int, m: int, n: int) -> int:
    return k_layers * (n * m + 1)


def rate_fit(errors, noise_sigma: float):
    """Fit error_k ~ C exp(-c k) above the noise floor; returns (c, C).

    The floor is the final-layer error when noise_sigma > 0, else 0; only
    layers strictly above the floor enter the least-squares log fit.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if np.any(errors < 0):
        raise DomainError("layer errors must be nonnegative")
    floor = float(errors[-1]) if noise_sigma > 0 else 0.0
    ks, logs = [], []
    for k, e in enumerate(errors, start=1):
        if e - floor > 0:
            ks.append(k)
            logs.append(np.log(e - floor))
    if len(ks) < 3:
        raise DomainError(f"rate fit needs at least 3 usable layers, got {len(ks)}")
    a = np.stack([np.asarray(ks, dtype=np.float64), np.ones(len(ks))], axis=1)
    sol, *_ = np.linalg.lstsq(a, np.asarray(logs), rcond=None)
    slope, intercept = sol
    return float(-slope), float(np.exp(intercept))


def nmse(s: np.ndarray, s_star: np.ndarray) -> float:
    d = s - s_star
    return float((d @ d) / (s_star @ s_star))
