"""Deterministic synthetic problem generation and persistence.

Sparse-recovery instances follow x = H s* + e with unit-norm columns of H;
RPCA instances follow X = V* + psi Y* with V* an exact rank-r factor
product and Y* supported on an exact entry count.  All draws come from the
pinned generator in :mod:`unfoldlab.rng`; the draw order inside each
generator is part of the format and documented on the function.
"""

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import DomainError, FormatError
from .rng import Rng, derive_seed

DATASET_MAGIC = b"UNFDS1"


@dataclass(frozen=True)
class SparseRecoveryInstance:
    """One LASSO problem: observation x from ground-truth sparse s_star."""

    h: np.ndarray        # m x n measurement operator
    x: np.ndarray        # m observation
    s_star: np.ndarray   # n ground-truth sparse signal
    noise_sigma: float

    @property
    def target(self) -> np.ndarray:
        return self.s_star


@dataclass(frozen=True)
class RpcaInstance:
    """One RPCA problem: x_obs = v_star + psi @ y_star exactly."""

    x_obs: np.ndarray    # n1 x n2
    v_star: np.ndarray   # rank-r component
    y_star: np.ndarray   # sparse component
    psi: np.ndarray      # n1 x n1 transform
    rank_r: int
    sparse_frac: float

    @property
    def target(self) -> np.ndarray:
        return self.v_star


@dataclass(frozen=True)
class Dataset:
    """Ordered instances plus disjoint covering train/val/test splits."""

    kind: str  # "rpca" | "sparse"
    instances: tuple
    train_idx: tuple
    val_idx: tuple
    test_idx: tuple
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        all_idx = sorted(self.train_idx + self.val_idx + self.test_idx)
        if all_idx != list(range(len(self.instances))):
            raise DomainError("splits must be disjoint and cover all instances")

    @property
    def train(self):
        return [self.instances[i] for i in self.train_idx]

    @property
    def val(self):
        return [self.instances[i] for i in self.val_idx]

    @property
    def test(self):
        return [self.instances[i] for i in self.test_idx]


def gen_sparse_instance(m: int, n: int, k_nonzeros: int, noise_sigma: float,
                        seed: int, h: np.ndarray | None = None) -> SparseRecoveryInstance:
    """Draw order: H entries (row-major), support, magnitudes, signs, noise.

    H has standard-normal entries with columns rescaled to unit l2 norm;
    the support is uniform without replacement; nonzero magnitudes are
    uniform in [0.5, 1.5] with independent random signs; e is standard
    normal scaled by noise_sigma.  An explicit `h` overrides drawing one,
    letting a dataset share a single measurement operator.
    """
    if m < 1 or n < 1:
        raise DomainError(f"dimensions must be positive, got {m} x {n}")
    if k_nonzeros > n:
        raise DomainError(f"k_nonzeros {k_nonzeros} exceeds dimension {n}")
    if noise_sigma < 0:
        raise DomainError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    rng = Rng(seed)
    if h is None:
        h = rng.normal((m, n))
        h = h / np.linalg.norm(h, axis=0)
    else:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (m, n):
            raise DomainError(f"h shape {h.shape} != ({m}, {n})")
    support = rng.choose(n, k_nonzeros)
    mags = rng.uniform(k_nonzeros, low=0.5, high=1.5)
    signs = np.where(rng.uniform(k_nonzeros) < 0.5, -1.0, 1.0)
    s_star = np.zeros(n)
    s_star[support] = mags * signs
    e = noise_sigma * rng.normal(m)
    x = h @ s_star + e
    return SparseRecoveryInstance(h=h, x=x, s_star=s_star, noise_sigma=noise_sigma)


def gen_rpca_instance(n1: int, n2: int, rank_r: int, sparse_frac: float,
                      psi_mode: str = "identity", seed: int = 0,
                      psi: np.ndarray | None = None) -> RpcaInstance:
    """Draw order: A entries, B entries, support, magnitudes, psi (if drawn).

    V* = A B^T / sqrt(r) with A, B standard normal, so entry variance is
    independent of r.  Y* has exactly round(sparse_frac * n1 * n2) nonzero
    entries, uniform without replacement, with magnitudes uniform in
    [-c, c] where c is the mean |V*| entry.  An explicit `psi` overrides
    drawing one, letting a dataset share a single transform.
    """
    if rank_r > min(n1, n2):
        raise DomainError(f"rank {rank_r} exceeds min dimension {min(n1, n2)}")
    if not 0.0 < sparse_frac < 1.0:
        raise DomainError(f"sparse_frac must lie in (0, 1), got {sparse_frac}")
    if psi_mode not in ("identity", "orthogonal"):
        raise DomainError(f"unknown psi_mode {psi_mode!r}")
    rng = Rng(seed)
    a = rng.normal((n1, rank_r))
    b = rng.normal((n2, rank_r))
    v_star = (a @ b.T) / np.sqrt(rank_r)
    k = int(round(sparse_frac * n1 * n2))
    support = rng.choose(n1 * n2, k)
    c = float(np.mean(np.abs(v_star)))
    y_star = np.zeros(n1 * n2)
    y_star[support] = rng.uniform(k, low=-c, high=c)
    y_star = y_star.reshape(n1, n2)
    if psi is None:
        psi = np.eye(n1) if psi_mode == "identity" else rng.orthogonal(n1)
    else:
        psi = np.asarray(psi, dtype=np.float64)
        if psi.shape != (n1, n1):
            raise DomainError(f"psi shape {psi.shape} != ({n1}, {n1})")
    x_obs = v_star + (y_star if np.array_equal(psi, np.eye(n1)) else psi @ y_star)
    return RpcaInstance(x_obs=x_obs, v_star=v_star, y_star=y_star, psi=psi,
                        rank_r=rank_r, sparse_frac=sparse_frac)


def perturb_objective(psi: np.ndarray, delta: float, seed: int) -> np.ndarray:
    """Additive Gaussian perturbation with exact relative Frobenius size delta."""
    if delta < 0:
        raise DomainError(f"delta must be nonnegative, got {delta}")
    if delta == 0.0:
        return psi.copy()
    g = Rng(seed).normal(psi.shape)
    return psi + delta * (np.linalg.norm(psi) / np.linalg.norm(g)) * g


def gen_rpca_dataset(n1: int, n2: int, rank_r: int, sparse_frac: float,
                     psi_mode: str, seed: int,
                     counts: tuple[int, int, int]) -> Dataset:
    """Train/val/test RPCA dataset sharing one psi across all instances."""
    n_train, n_val, n_test = counts
    total = n_train + n_val + n_test
    if psi_mode == "identity":
        psi = np.eye(n1)
    else:
        psi = Rng(derive_seed(seed, "psi")).orthogonal(n1)
    instances = tuple(
        gen_rpca_instance(n1, n2, rank_r, sparse_frac, psi_mode,
                          seed=derive_seed(seed, "instance", i), psi=psi)
        for i in range(total)
    )
    return Dataset(
        kind="rpca", instances=instances,
        train_idx=tuple(range(n_train)),
        val_idx=tuple(range(n_train, n_train + n_val)),
        test_idx=tuple(range(n_train + n_val, total)),
        seed=seed,
        meta={"n1": n1, "n2": n2, "rank_r": rank_r, "sparse_frac": sparse_frac,
              "psi_mode": psi_mode},
    )


def gen_sparse_dataset(m: int, n: int, k_nonzeros: int, noise_sigma: float,
                       seed: int, counts: tuple[int, int, int]) -> Dataset:
    """Train/val/test LASSO dataset sharing one measurement operator."""
    n_train, n_val, n_test = counts
    total = n_train + n_val + n_test
    h_rng = Rng(derive_seed(seed, "h"))
    h = h_rng.normal((m, n))
    h = h / np.linalg.norm(h, axis=0)
    instances = tuple(
        gen_sparse_instance(m, n, k_nonzeros, noise_sigma,
                            seed=derive_seed(seed, "instance", i), h=h)
        for i in range(total)
    )
    return Dataset(
        kind="sparse", instances=instances,
        train_idx=tuple(range(n_train)),
        val_idx=tuple(range(n_train, n_train + n_val)),
        test_idx=tuple(range(n_train + n_val, total)),
        seed=seed,
        meta={"m": m, "n": n, "k_nonzeros": k_nonzeros, "noise_sigma": noise_sigma},
    )


_RPCA_FIELDS = ("x_obs", "v_star", "y_star", "psi")
_SPARSE_FIELDS = ("h", "x", "s_star")


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "kind": ds.kind,
        "count": len(ds.instances),
        "seed": ds.seed,
        "splits": {"train": list(ds.train_idx), "val": list(ds.val_idx),
                   "test": list(ds.test_idx)},
        "meta": ds.meta,
    }
    blocks = []
    if ds.kind == "rpca":
        header["instance_meta"] = [
            {"rank_r": inst.rank_r, "sparse_frac": inst.sparse_frac}
            for inst in ds.instances
        ]
        for i, inst in enumerate(ds.instances):
            for f in _RPCA_FIELDS:
                blocks.append((f"{i}.{f}", getattr(inst, f)))
    elif ds.kind == "sparse":
        header["instance_meta"] = [{"noise_sigma": inst.noise_sigma} for inst in ds.instances]
        for i, inst in enumerate(ds.instances):
            for f in _SPARSE_FIELDS:
                blocks.append((f"{i}.{f}", getattr(inst, f)))
    else:
        raise DomainError(f"unknown dataset kind {ds.kind!r}")
    write_container(path, DATASET_MAGIC, header, blocks)


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path, DATASET_MAGIC)
    kind = header.get("kind")
    count = header.get("count", 0)
    metas = header.get("instance_meta", [])
    if kind not in ("rpca", "sparse") or len(metas) != count:
        raise FormatError("inconsistent dataset header", offset=14)
    instances = []
    for i in range(count):
        try:
            if kind == "rpca":
                instances.append(RpcaInstance(
                    x_obs=arrays[f"{i}.x_obs"], v_star=arrays[f"{i}.v_star"],
                    y_star=arrays[f"{i}.y_star"], psi=arrays[f"{i}.psi"],
                    rank_r=int(metas[i]["rank_r"]),
                    sparse_frac=float(metas[i]["sparse_frac"])))
            else:
                instances.append(SparseRecoveryInstance(
                    h=arrays[f"{i}.h"], x=arrays[f"{i}.x"],
                    s_star=arrays[f"{i}.s_star"],
                    noise_sigma=float(metas[i]["noise_sigma"])))
        except KeyError as e:
            raise FormatError(f"missing block for instance {i}: {e}", offset=14) from e
    splits = header.get("splits", {})
    return Dataset(
        kind=kind, instances=tuple(instances),
        train_idx=tuple(splits.get("train", ())),
        val_idx=tuple(splits.get("val", ())),
        test_idx=tuple(splits.get("test", ())),
        seed=int(header.get("seed", 0)),
        meta=header.get("meta", {}),
    )
