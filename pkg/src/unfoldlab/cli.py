"""Command-line entry point.

Subcommands: gen, tune, train, bench {matched,mismatch,lista}, print-config.
Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
Set UNFOLD_LOG to error|info|debug to control logging verbosity.
"""

import argparse
import json
import logging
import os
import sys

from . import bench, classical as cl, report as rp
from . import training as tr
from . import unfolded as uf
from .checkpoints import save_checkpoint
from .config import ExperimentConfig, load_config, to_toml
from .datagen import gen_rpca_dataset, gen_sparse_dataset, save_dataset
from .errors import (ConfigError, DivergenceError, FormatError, SingularMatrixError,
                     TrainingError, TuningError, VersionError)
from .psi import PsiOperator
from .rng import derive_seed

log = logging.getLogger("unfoldlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _setup_logging():
    level = os.environ.get("UNFOLD_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"UNFOLD_LOG must be error|info|debug, got {level!r}")
    logging.basicConfig(level=levels[level],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "full", False):
        cfg.problem.n1 = cfg.problem.n2 = 1000
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be positive")
    return cfg.validate()


def _cmd_print_config(args) -> int:
    sys.stdout.write(to_toml(ExperimentConfig()))
    return EXIT_OK


def _cmd_gen(args) -> int:
    cfg = _load(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    p, d = cfg.problem, cfg.data
    ds = gen_rpca_dataset(p.n1, p.n2, p.rank_r, p.sparse_frac, p.psi_mode,
                          seed=derive_seed(cfg.seed, "data"),
                          counts=(d.train, d.val, d.test))
    rpca_path = os.path.join(cfg.out_dir, "rpca_dataset.unfds")
    save_dataset(ds, rpca_path)
    li = cfg.lista
    sds = gen_sparse_dataset(li.m, li.n, li.k_nonzeros, li.noise_sigma,
                             seed=derive_seed(cfg.seed, "lista_data"),
                             counts=(li.train, li.val, li.test))
    sparse_path = os.path.join(cfg.out_dir, "sparse_dataset.unfds")
    save_dataset(sds, sparse_path)
    print(rpca_path)
    print(sparse_path)
    return EXIT_OK


def _tune(cfg: ExperimentConfig):
    p, d, s = cfg.problem, cfg.data, cfg.solver
    ds = gen_rpca_dataset(p.n1, p.n2, p.rank_r, p.sparse_frac, p.psi_mode,
                          seed=derive_seed(cfg.seed, "data"),
                          counts=(d.train, d.val, d.test))
    psi_op = PsiOperator(ds.instances[0].psi)
    insts = ds.train[:s.tune_instances]
    grid = cl.default_grid(insts, psi_op, p.rank_r, s.init_zeta0)
    tuned = cl.tune_baseline(insts, psi_op, p.rank_r, grid, iters=s.tune_iters,
                             init_zeta0=s.init_zeta0)
    return ds, tuned


def _cmd_tune(args) -> int:
    cfg = _load(args)
    _, tuned = _tune(cfg)
    doc = {"eta": tuned.eta_l, "zeta": tuned.zeta, "init_zeta0": tuned.init_zeta0,
           "tune_iters": cfg.solver.tune_iters, "seed": cfg.seed}
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "tuned_baseline.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load(args)
    variant = args.variant or "hyper"
    if variant not in uf.VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {uf.VARIANTS}")
    ds, tuned = _tune(cfg)
    model, (seq_rep, e2e_rep), wall = bench._train_variant(
        variant, tuned, ds.instances[0].psi, ds, cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, f"{variant}.unfck")
    save_checkpoint(model, ckpt, training_stage="two_stage", seed=cfg.seed)
    log_path = os.path.join(cfg.out_dir, "training_log.csv")
    rows = []
    for rep in (seq_rep, e2e_rep):
        epoch_idx = 0
        for stage, count in rep.stages:
            for _ in range(count):
                if epoch_idx >= len(rep.train_loss):
                    break
                rows.append([stage, epoch_idx + 1, rep.train_loss[epoch_idx],
                             rep.val_loss[epoch_idx],
                             int(rep.wall_seconds * 1e9 / max(1, rep.epochs))])
                epoch_idx += 1
    rp._write_csv(log_path, ["stage", "epoch", "train_loss", "val_loss", "wall_ns"], rows)
    spec = tr.LossSpec(supervision=cfg.loss.supervision, shape=cfg.loss.shape,
                       lam=cfg.loss.lam)
    test_loss = tr.eval_loss(model, ds.test, spec)
    print(f"{variant}: test loss {test_loss:.6e} ({wall:.1f}s) -> {ckpt}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = _load(args)
    if args.study == "matched":
        report = bench.run_matched(cfg)
        paths = rp.emit_report(report, cfg.out_dir)
    elif args.study == "mismatch":
        report = bench.run_mismatch(cfg)
        paths = rp.emit_report(report, cfg.out_dir)
    else:
        report = bench.run_lista_diag(cfg)
        paths = rp.emit_lista_report(report, cfg.out_dir)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unfoldlab",
        description="Deep-unfolding laboratory: classical vs unfolded solvers.")
    parser.add_argument("--config", type=str, default=None, help="TOML config path")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=str, default=None, help="override output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for instance-level evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("print-config", help="print the default configuration")
    sub.add_parser("gen", help="generate and persist datasets")
    sub.add_parser("tune", help="grid-tune the classical baseline")
    p_train = sub.add_parser("train", help="train one unfolded variant")
    p_train.add_argument("--variant", type=str, default="hyper",
                         choices=list(uf.VARIANTS))
    p_bench = sub.add_parser("bench", help="run a full comparative study")
    p_bench.add_argument("study", choices=["matched", "mismatch", "lista"])
    p_bench.add_argument("--full", action="store_true",
                         help="paper-scale n1=n2=1000 instead of desk scale")
    return parser


_COMMANDS = {
    "print-config": _cmd_print_config,
    "gen": _cmd_gen,
    "tune": _cmd_tune,
    "train": _cmd_train,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, TrainingError, TuningError, SingularMatrixError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, VersionError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
