"""Experiment orchestration: the matched/mismatched RPCA comparative study
and the LISTA diagnostics, all deterministic under the config seed.

A study run: generate datasets, grid-tune the classical baseline, train
every requested unfolded variant with the two-stage schedule (sequential
warm-up, end-to-end fine-tune), then evaluate per-iteration test losses
for everything, including the baseline's first K iterations and its loss
at convergence.  Results are assembled in memory and written only on
success, so a failed stage leaves no partial outputs.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import classical as cl
from . import lista as ls
from . import training as tr
from . import unfolded as uf
from .config import ExperimentConfig
from .datagen import gen_rpca_dataset, gen_sparse_dataset, perturb_objective
from .errors import ConfigError
from .psi import PsiOperator
from .rng import derive_seed

log = logging.getLogger("unfoldlab.bench")


@dataclass
class MethodResult:
    name: str
    losses: np.ndarray          # n_test x K per-instance supervised losses
    param_count: int = 0
    train_seconds: float = 0.0
    infer_seconds: float = 0.0

    @property
    def mean(self) -> np.ndarray:
        return self.losses.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.losses.std(axis=0)


@dataclass
class ExperimentReport:
    kind: str
    config: ExperimentConfig
    methods: list = field(default_factory=list)   # baseline first, then variants
    baseline_converged: np.ndarray | None = None  # per-instance converged loss
    baseline_converged_iters: int = 0
    delta: float = 0.0
    tuned_eta: float = 0.0
    tuned_zeta: float = 0.0

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)


def _supervised_curve(model, inst) -> np.ndarray:
    """Per-iteration relative squared Frobenius loss of one forward pass."""
    traj = uf.forward(model, inst.x_obs)
    denom = float(np.sum(inst.v_star**2))
    return np.array([float(np.sum((p.v - inst.v_star) ** 2)) / denom for p in traj])


def _eval_variant(model, instances):
    t0 = time.perf_counter()
    losses = np.stack([_supervised_curve(model, inst) for inst in instances])
    per_instance = (time.perf_counter() - t0) / len(instances)
    return losses, per_instance


def _baseline_curves(psi_op, cfg, rank, instances, depth):
    run_cfg = cl.RpcaSolverConfig(eta_l=cfg.eta_l, eta_r=cfg.eta_r, zeta=cfg.zeta,
                                  max_iters=depth, init_zeta0=cfg.init_zeta0)
    curves, seconds = [], 0.0
    for inst in instances:
        t0 = time.perf_counter()
        res = cl.rpca_run(inst.x_obs, psi_op, rank, run_cfg, v_star=inst.v_star)
        seconds += time.perf_counter() - t0
        curves.append(res.losses)
    return np.asarray(curves), seconds / len(instances)


def _baseline_converged(psi_op, cfg, rank, instances, cap, tol):
    run_cfg = cl.RpcaSolverConfig(eta_l=cfg.eta_l, eta_r=cfg.eta_r, zeta=cfg.zeta,
                                  max_iters=cap, init_zeta0=cfg.init_zeta0)
    finals, iters = [], []
    for inst in instances:
        res = cl.rpca_run(inst.x_obs, psi_op, rank, run_cfg, v_star=inst.v_star,
                          rel_tol=tol)
        finals.append(res.losses[-1])
        iters.append(res.converged_at or cap)
    return np.asarray(finals), int(round(float(np.mean(iters))))


def _train_variant(variant, baseline_cfg, psi_hat, dataset, config: ExperimentConfig):
    p, m, t = config.problem, config.model, config.train
    ctx = uf.UnfoldContext(
        psi_hat=psi_hat, rank_r=p.rank_r, n1=p.n1, n2=p.n2, depth_k=m.depth_k,
        hidden_channels=m.hidden_channels, shared_conv=m.shared_conv,
        seed=derive_seed(config.seed, "init", variant),
    )
    model = uf.init_from_classical(variant, baseline_cfg, ctx)
    train_cfg = tr.TrainConfig(
        epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
        optimizer=t.optimizer, adam_beta1=t.adam_beta1, adam_beta2=t.adam_beta2,
        adam_eps=t.adam_eps, grad_clip=t.grad_clip if t.grad_clip > 0 else None,
        scalar_lr_scale=t.scalar_lr_scale,
        seed=derive_seed(config.seed, "train", variant),
    )
    spec = tr.LossSpec(supervision=config.loss.supervision, shape=config.loss.shape,
                       lam=config.loss.lam)
    t0 = time.perf_counter()
    seq_rep, e2e_rep = tr.train_two_stage(model, dataset, train_cfg, spec,
                                          sequential_fraction=t.sequential_fraction)
    wall = time.perf_counter() - t0
    return model, (seq_rep, e2e_rep), wall


def _study(config: ExperimentConfig, kind: str) -> ExperimentReport:
    p, d, m, s = config.problem, config.data, config.model, config.solver
    delta = p.mismatch_delta if kind == "mismatch" else 0.0
    if kind == "mismatch":
        # delta = 0 is admitted as the degenerate case identical to matched
        if p.psi_mode != "orthogonal":
            raise ConfigError("mismatch study needs psi_mode = orthogonal")

    log.info("%s study: generating %d+%d+%d instances at %dx%d r=%d",
             kind, d.train, d.val, d.test, p.n1, p.n2, p.rank_r)
    dataset = gen_rpca_dataset(p.n1, p.n2, p.rank_r, p.sparse_frac, p.psi_mode,
                               seed=derive_seed(config.seed, "data"),
                               counts=(d.train, d.val, d.test))
    psi_true = dataset.instances[0].psi
    psi_hat = (perturb_objective(psi_true, delta, derive_seed(config.seed, "mismatch"))
               if kind == "mismatch" else psi_true)
    psi_op = PsiOperator(psi_hat)

    log.info("tuning classical baseline (%d grid points, %d iters)",
             len(cl.ETA_GRID) * len(cl.ZETA_MULTIPLIERS), s.tune_iters)
    tune_insts = dataset.train[:s.tune_instances]
    grid = cl.default_grid(tune_insts, psi_op, p.rank_r, s.init_zeta0)
    baseline_cfg = cl.tune_baseline(tune_insts, psi_op, p.rank_r, grid,
                                    iters=s.tune_iters, init_zeta0=s.init_zeta0)
    log.info("tuned baseline: eta=%g zeta=%g", baseline_cfg.eta_l, baseline_cfg.zeta)

    report = ExperimentReport(kind=kind, config=config, delta=delta,
                              tuned_eta=baseline_cfg.eta_l, tuned_zeta=baseline_cfg.zeta)
    curves, per_inst = _baseline_curves(psi_op, baseline_cfg, p.rank_r,
                                        dataset.test, m.depth_k)
    report.methods.append(MethodResult(name="classical", losses=curves,
                                       param_count=0, infer_seconds=per_inst))
    report.baseline_converged, report.baseline_converged_iters = _baseline_converged(
        psi_op, baseline_cfg, p.rank_r, dataset.test, s.converge_cap, s.converge_tol)
    log.info("baseline converged loss %.3e (~%d iters)",
             float(report.baseline_converged.mean()), report.baseline_converged_iters)

    for variant in m.variants:
        log.info("training variant %s", variant)
        model, _reports, wall = _train_variant(variant, baseline_cfg, psi_hat,
                                               dataset, config)
        losses, per_inst = _eval_variant(model, dataset.test)
        report.methods.append(MethodResult(
            name=variant, losses=losses, param_count=uf.param_count(model),
            train_seconds=wall, infer_seconds=per_inst))
        log.info("variant %s: final mean test loss %.3e (%.1fs train)",
                 variant, float(losses[:, -1].mean()), wall)
    return report


def run_matched(config: ExperimentConfig) -> ExperimentReport:
    """Full-knowledge study: solvers see the transform the data was built with."""
    return _study(config.validate(), "matched")


def run_mismatch(config: ExperimentConfig) -> ExperimentReport:
    """Perturbed-transform study: solvers see psi_tilde, data uses true psi."""
    return _study(config.validate(), "mismatch")


# ---------------------------------------------------------------------------
# LISTA diagnostics


@dataclass
class ListaReport:
    config: ExperimentConfig
    mu: float = 0.0
    rho: float = 0.0
    nmse: dict = field(default_factory=dict)       # method -> per-layer mean NMSE
    l2_err: dict = field(default_factory=dict)     # method -> per-layer mean l2 error
    coupling: dict = field(default_factory=dict)   # method -> per-layer residuals
    rate: dict = field(default_factory=dict)       # method -> (c, amplitude)
    param_counts: dict = field(default_factory=dict)
    train_seconds: dict = field(default_factory=dict)


def _lista_curves(model, instances):
    nmse = np.zeros(model.k_layers)
    l2 = np.zeros(model.k_layers)
    for inst in instances:
        _, outs = ls.lista_forward(inst.x, model)
        for k, sk in enumerate(outs):
            nmse[k] += ls.nmse(sk, inst.s_star)
            l2[k] += float(np.linalg.norm(sk - inst.s_star))
    return nmse / len(instances), l2 / len(instances)


def _ista_curves(instances, mu, rho, depth):
    nmse = np.zeros(depth)
    l2 = np.zeros(depth)
    for inst in instances:
        res = cl.ista_run(inst, cl.IstaConfig(mu=mu, rho=rho, max_iters=depth,
                                              record_trajectory=True))
        for k, sk in enumerate(res.trajectory):
            nmse[k] += ls.nmse(sk, inst.s_star)
            l2[k] += float(np.linalg.norm(sk - inst.s_star))
    return nmse / len(instances), l2 / len(instances)


def run_lista_diag(config: ExperimentConfig) -> ListaReport:
    """Train free LISTA and LISTA-CP; report NMSE-vs-layer, coupling residuals,
    and the fitted per-layer decay rate."""
    config.validate()
    li = config.lista
    dataset = gen_sparse_dataset(li.m, li.n, li.k_nonzeros, li.noise_sigma,
                                 seed=derive_seed(config.seed, "lista_data"),
                                 counts=(li.train, li.val, li.test))
    h = dataset.instances[0].h
    mu = li.mu_scale / float(np.linalg.norm(h, 2) ** 2)
    report = ListaReport(config=config, mu=mu, rho=li.rho)

    report.nmse["ista"], report.l2_err["ista"] = _ista_curves(
        dataset.test, mu, li.rho, li.depth_k)
    report.param_counts["ista"] = 0

    spec = tr.LossSpec(shape="multi_iteration")
    for name, coupled in (("lista_free", False), ("lista_cp", True)):
        model = ls.lista_init_from_ista(h, mu, li.rho, li.depth_k, coupled=coupled)
        cfg = tr.TrainConfig(epochs=li.epochs, batch_size=li.batch_size,
                             learning_rate=li.learning_rate,
                             seed=derive_seed(config.seed, "lista_train", name))
        log.info("training %s (%d params)", name, model.param_count())
        t0 = time.perf_counter()
        tr.train_end_to_end(model, dataset, cfg, spec)
        report.train_seconds[name] = time.perf_counter() - t0
        report.nmse[name], report.l2_err[name] = _lista_curves(model, dataset.test)
        report.coupling[name] = ls.coupling_residual(model, h)
        report.param_counts[name] = model.param_count()
        try:
            report.rate[name] = ls.rate_fit(report.l2_err[name], li.noise_sigma)
        except Exception as e:  # diagnostics stay best-effort
            log.warning("rate fit failed for %s: %s", name, e)
            report.rate[name] = (float("nan"), float("nan"))
    return report
