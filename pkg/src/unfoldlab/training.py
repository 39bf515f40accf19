"""Losses and gradient-based training for unfolded models.

Three risk shapes over a model's per-iteration trajectory: end-to-end
(final iterate only), multi-iteration (weighted sum, default weights
log(1+k)), and sequential (stage k trains only iteration k's parameters
against the loss at iteration k, earlier stages frozen).  Supervision is
either a relative-Frobenius distance to the ground truth or the solver's
own relaxed objective (unsupervised).

Training runs per-sample tapes and reduces gradients in a fixed sample
order, so identical seeds give bitwise-identical reports.  Each sequential
stage keeps the best parameters seen at epoch boundaries (the stage-start
values included), which guarantees the stage-loss descent contract even
when raw optimizer steps oscillate.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DivergenceError, DomainError, TrainingError
from .lista import NET_GROUP, SCALAR_GROUP
from .psi import PsiOperator, psi_apply
from .rng import Rng, derive_seed


def default_alphas(depth_k: int) -> tuple:
    """Multi-iteration weights log(1+k), growing toward later iterations."""
    return tuple(math.log(1 + k) for k in range(1, depth_k + 1))


@dataclass
class LossSpec:
    supervision: str = "supervised"   # supervised | unsupervised
    shape: str = "end_to_end"         # end_to_end | multi_iteration | sequential
    alphas: tuple | None = None       # multi_iteration only; default log(1+k)
    lam: float = 0.0                  # l1 weight of the unsupervised objective

    def __post_init__(self):
        if self.supervision not in ("supervised", "unsupervised"):
            raise DomainError(f"unknown supervision {self.supervision!r}")
        if self.shape not in ("end_to_end", "multi_iteration", "sequential"):
            raise DomainError(f"unknown loss shape {self.shape!r}")
        if self.alphas is not None and any(a <= 0 for a in self.alphas):
            raise DomainError("multi-iteration weights must be positive")
        if self.lam < 0:
            raise DomainError("lambda must be nonnegative")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float = 1e-3
    optimizer: str = "adam"           # adam | sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 10.0
    seed: int = 0
    scalar_lr_scale: float = 10.0     # scalar hyperparameter blocks train faster

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise DomainError("learning rate must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise DomainError("grad_clip must be positive when set")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stages: list = field(default_factory=list)  # (stage id, epochs) pairs
    wall_seconds: float = 0.0
    model: object = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


# ---------------------------------------------------------------------------
# per-sample losses on a tape


def _input_of(instance):
    return instance.x_obs if hasattr(instance, "x_obs") else instance.x


def sample_loss_supervised(trajectory, instance, k: int | None = None) -> ad.Tensor:
    """Relative squared Frobenius distance of iterate k (default: last) to truth."""
    if not trajectory:
        raise ContractError("empty trajectory")
    target = getattr(instance, "target", None)
    if target is None:
        raise ContractError("instance has no ground truth; use the unsupervised loss")
    point = trajectory[-1 if k is None else k - 1]
    est = point.estimate
    tape = est.tape
    tgt = tape.leaf(np.asarray(target, dtype=np.float64).reshape(est.values.shape))
    denom = float(np.sum(np.asarray(target) ** 2))
    return ad.scale(ad.frobenius_sq(ad.sub(est, tgt)), 1.0 / denom)


def sample_loss_unsupervised(trajectory, x, psi_hat, lam: float,
                             k: int | None = None) -> ad.Tensor:
    """Relaxed objective 0.5 ||L R^T + psi_hat Y - X||_F^2 + lam ||Y||_1 at iterate k."""
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    point = trajectory[-1 if k is None else k - 1]
    if point.y is None:
        raise ContractError("trajectory carries no sparse component")
    op = psi_hat if isinstance(psi_hat, PsiOperator) else PsiOperator(psi_hat)
    tape = point.estimate.tape
    tx = tape.leaf(np.asarray(x, dtype=np.float64))
    resid = ad.sub(ad.add(point.estimate, psi_apply(op, point.y)), tx)
    loss = ad.scale(ad.frobenius_sq(resid), 0.5)
    if lam > 0:
        loss = ad.add(loss, ad.scale(ad.abs_sum(point.y), lam))
    return loss


def _loss_at(model, trajectory, instance, spec: LossSpec, k: int | None) -> ad.Tensor:
    if spec.supervision == "supervised":
        return sample_loss_supervised(trajectory, instance, k)
    return sample_loss_unsupervised(trajectory, _input_of(instance),
                                    model._psi_op, spec.lam, k)


def build_sample_loss(tape, model, leaves, instance, spec: LossSpec,
                      depth: int | None = None, at_k: int | None = None) -> ad.Tensor:
    """Forward one sample and reduce its trajectory per the loss shape."""
    traj = model.forward_tape(tape, leaves, _input_of(instance), depth=depth)
    if spec.shape == "multi_iteration" and at_k is None:
        alphas = spec.alphas if spec.alphas is not None else default_alphas(len(traj))
        if len(alphas) != len(traj):
            raise ContractError(f"{len(alphas)} weights for {len(traj)} iterations")
        total = None
        for k, alpha in enumerate(alphas, start=1):
            term = ad.scale(_loss_at(model, traj, instance, spec, k), float(alpha))
            total = term if total is None else ad.add(total, term)
        return total
    return _loss_at(model, traj, instance, spec, at_k)


def risk_end_to_end(batch, model, spec: LossSpec) -> ad.Tensor:
    """Mean final-iteration loss over a batch, on one fresh tape."""
    if spec.shape != "end_to_end":
        raise ContractError("risk_end_to_end needs an end_to_end LossSpec")
    return _batch_risk(batch, model, spec)


def risk_multi_iteration(batch, model, spec: LossSpec) -> ad.Tensor:
    """Mean weighted multi-iteration loss over a batch, on one fresh tape."""
    if spec.shape != "multi_iteration":
        raise ContractError("risk_multi_iteration needs a multi_iteration LossSpec")
    return _batch_risk(batch, model, spec)


def _batch_risk(batch, model, spec: LossSpec) -> ad.Tensor:
    if not batch:
        raise ContractError("empty batch")
    tape = ad.Tape()
    leaves = model.make_leaves(tape, trainable=model.params.keys())
    total = None
    for inst in batch:
        term = build_sample_loss(tape, model, leaves, inst, spec)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam update over named parameter arrays."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def sgd_step(params: dict, grads: dict, lr: float):
    for name, p in params.items():
        params[name] = p - lr * grads[name]
    return params


# ---------------------------------------------------------------------------
# training loops


def _zero_grads(names, model):
    return {name: np.zeros_like(model.params[name]) for name in names}


def _sample_gradients(model, instance, trainable, spec, depth, at_k):
    tape = ad.Tape()
    leaves = model.make_leaves(tape, trainable=trainable)
    loss = build_sample_loss(tape, model, leaves, instance, spec, depth=depth, at_k=at_k)
    store = ad.backward(tape, loss)
    return loss.item(), {name: store[leaves[name]] for name in trainable}


def eval_loss(model, instances, spec: LossSpec, depth: int | None = None,
              at_k: int | None = None) -> float:
    """Mean per-sample loss without recording gradients."""
    if not instances:
        return float("nan")
    total = 0.0
    for inst in instances:
        tape = ad.Tape(recording=False)
        leaves = model.make_leaves(tape)
        total += build_sample_loss(tape, model, leaves, inst, spec,
                                   depth=depth, at_k=at_k).item()
    return total / len(instances)


class _Optimizer:
    """Two parameter groups: scalar hyperparameters train at a faster rate."""

    def __init__(self, model, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = {SCALAR_GROUP: AdamState(), NET_GROUP: AdamState()}

    def apply(self, trainable, grads):
        cfg = self.config
        if cfg.grad_clip is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > cfg.grad_clip:
                factor = cfg.grad_clip / total
                grads = {name: g * factor for name, g in grads.items()}
        for group, lr in ((SCALAR_GROUP, cfg.learning_rate * cfg.scalar_lr_scale),
                          (NET_GROUP, cfg.learning_rate)):
            names = [n for n in trainable if self.model.group_of(n) == group]
            if not names:
                continue
            sub_params = {n: self.model.params[n] for n in names}
            sub_grads = {n: grads[n] for n in names}
            if cfg.optimizer == "adam":
                adam_step(sub_params, sub_grads, self.state[group], lr,
                          cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            else:
                sgd_step(sub_params, sub_grads, lr)
            for n in names:
                self.model.params[n] = sub_params[n]


def _run_epoch(model, instances, trainable, spec, config, opt, order_seed,
               depth=None, at_k=None, stage=None, epoch=None):
    """One pass over `instances` in seeded order; returns mean batch loss."""
    perm = Rng(order_seed).permutation(len(instances))
    losses = []
    for start in range(0, len(perm), config.batch_size):
        idx = perm[start:start + config.batch_size]
        acc = _zero_grads(trainable, model)
        batch_loss = 0.0
        for i in idx:  # fixed order: deterministic reduction
            try:
                loss, grads = _sample_gradients(model, instances[int(i)], trainable,
                                                spec, depth, at_k)
            except DivergenceError as e:
                raise TrainingError(f"divergence during training: {e}",
                                    stage=stage, epoch=epoch) from e
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", stage=stage, epoch=epoch)
            batch_loss += loss
            for name in trainable:
                acc[name] += grads[name]
        nb = len(idx)
        mean_grads = {name: acc[name] / nb for name in trainable}
        opt.apply(trainable, mean_grads)
        losses.append(batch_loss / nb)
    return float(np.mean(losses))


def _snapshot(model, names):
    return {name: model.params[name].copy() for name in names}


def _restore(model, snap):
    for name, arr in snap.items():
        model.params[name] = arr.copy()


def train_end_to_end(model, dataset, config: TrainConfig,
                     spec: LossSpec | None = None) -> TrainReport:
    """Minibatch training of all parameter blocks; returns the best-validation
    checkpoint (the model is left at those parameters)."""
    spec = spec or LossSpec()
    t0 = time.perf_counter()
    trainable = list(model.params.keys())
    opt = _Optimizer(model, config)
    report = TrainReport(model=model)
    best_val = math.inf
    best_snap = _snapshot(model, trainable)
    for epoch in range(1, config.epochs + 1):
        order_seed = derive_seed(config.seed, "e2e", epoch)
        train_loss = _run_epoch(model, dataset.train, trainable, spec, config,
                                opt, order_seed, epoch=epoch)
        val_loss = eval_loss(model, dataset.val, spec)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if dataset.val and val_loss < best_val:
            best_val = val_loss
            best_snap = _snapshot(model, trainable)
    if dataset.val:
        _restore(model, best_snap)
    report.stages.append(("end_to_end", config.epochs))
    report.wall_seconds = time.perf_counter() - t0
    return report


def train_sequential(model, dataset, config: TrainConfig,
                     supervision: str = "supervised", lam: float = 0.0) -> TrainReport:
    """Progressive per-iteration training: stage k updates only iteration k's
    blocks (plus shared ones) against the loss at iteration k.

    Each stage runs ceil(epochs / K) epochs and ends at the best parameters
    seen at an epoch boundary, stage-start included, so the stage's
    training loss never ends above its starting value.
    """
    t0 = time.perf_counter()
    depth_k = model.depth_k
    stage_epochs = -(-config.epochs // depth_k)
    spec = LossSpec(supervision=supervision, shape="end_to_end", lam=lam)
    report = TrainReport(model=model)
    for k in range(1, depth_k + 1):
        trainable = [n for n in model.params if model.stage_of(n) in (0, k)]
        opt = _Optimizer(model, config)
        best_loss = eval_loss(model, dataset.train, spec, depth=k, at_k=k)
        best_snap = _snapshot(model, trainable)
        for epoch in range(1, stage_epochs + 1):
            order_seed = derive_seed(config.seed, "seq", k, epoch)
            _run_epoch(model, dataset.train, trainable, spec, config, opt,
                       order_seed, depth=k, at_k=k, stage=k, epoch=epoch)
            stage_loss = eval_loss(model, dataset.train, spec, depth=k, at_k=k)
            report.train_loss.append(stage_loss)
            report.val_loss.append(eval_loss(model, dataset.val, spec, depth=k, at_k=k))
            if stage_loss < best_loss:
                best_loss = stage_loss
                best_snap = _snapshot(model, trainable)
        _restore(model, best_snap)
        report.stages.append((f"sequential_{k}", stage_epochs))
    report.wall_seconds = time.perf_counter() - t0
    return report


def train_two_stage(model, dataset, config: TrainConfig, spec: LossSpec | None = None,
                    sequential_fraction: float = 0.6) -> tuple:
    """The benchmark schedule: sequential warm-up, then end-to-end fine-tune."""
    spec = spec or LossSpec()
    seq_epochs = max(1, int(round(config.epochs * sequential_fraction)))
    e2e_epochs = max(1, config.epochs - seq_epochs)
    seq_cfg = TrainConfig(**{**config.__dict__, "epochs": seq_epochs})
    e2e_cfg = TrainConfig(**{**config.__dict__, "epochs": e2e_epochs})
    seq_report = train_sequential(model, dataset, seq_cfg,
                                  supervision=spec.supervision, lam=spec.lam)
    e2e_report = train_end_to_end(model, dataset, e2e_cfg, spec)
    return seq_report, e2e_report
