"""Experiment configuration: a strict TOML document with full round-trip.

Every key is validated against the schema below; unknown keys or sections
are rejected before any computation.  `to_toml` emits a document that
parses back to an equal config (floats via repr, so values survive
losslessly).
"""

from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .unfolded import VARIANTS


@dataclass
class ProblemConfig:
    n1: int = 100
    n2: int = 100
    rank_r: int = 5
    sparse_frac: float = 0.1
    psi_mode: str = "identity"
    mismatch_delta: float = 0.1


@dataclass
class DataConfig:
    train: int = 256
    val: int = 32
    test: int = 64


@dataclass
class ModelConfig:
    depth_k: int = 10
    hidden_channels: int = 8
    shared_conv: bool = False
    variants: list = field(default_factory=lambda: list(VARIANTS))


@dataclass
class SolverConfig:
    init_zeta0: float = 1.0
    tune_iters: int = 300
    tune_instances: int = 8
    converge_cap: int = 50_000
    converge_tol: float = 1e-10


@dataclass
class LossConfig:
    supervision: str = "supervised"
    shape: str = "end_to_end"
    lam: float = 0.0


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    scalar_lr_scale: float = 10.0
    sequential_fraction: float = 0.6


@dataclass
class ListaSection:
    m: int = 40
    n: int = 80
    k_nonzeros: int = 6
    noise_sigma: float = 0.0
    depth_k: int = 12
    train: int = 128
    val: int = 16
    test: int = 32
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    mu_scale: float = 0.9
    rho: float = 0.05


@dataclass
class ExperimentConfig:
    seed: int = 20240810
    out_dir: str = "results"
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    lista: ListaSection = field(default_factory=ListaSection)

    def validate(self) -> "ExperimentConfig":
        p = self.problem
        if p.n1 < 1 or p.n2 < 1 or p.rank_r < 1 or p.rank_r > min(p.n1, p.n2):
            raise ConfigError(f"bad dimensions n1={p.n1} n2={p.n2} r={p.rank_r}")
        if not 0.0 < p.sparse_frac < 1.0:
            raise ConfigError(f"sparse_frac must be in (0,1), got {p.sparse_frac}")
        if p.psi_mode not in ("identity", "orthogonal"):
            raise ConfigError(f"psi_mode must be identity|orthogonal, got {p.psi_mode!r}")
        if p.mismatch_delta < 0:
            raise ConfigError("mismatch_delta must be nonnegative")
        if min(self.data.train, self.data.val, self.data.test) < 1:
            raise ConfigError("dataset split counts must be positive")
        m = self.model
        if m.depth_k < 1 or m.hidden_channels < 1:
            raise ConfigError("depth_k and hidden_channels must be positive")
        for v in m.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
        s = self.solver
        if s.init_zeta0 < 0 or s.tune_iters < 1 or s.tune_instances < 1:
            raise ConfigError("bad solver section")
        if s.converge_cap < 1 or s.converge_tol <= 0:
            raise ConfigError("bad convergence budget")
        if self.loss.supervision not in ("supervised", "unsupervised"):
            raise ConfigError(f"bad supervision {self.loss.supervision!r}")
        if self.loss.shape not in ("end_to_end", "multi_iteration"):
            raise ConfigError(f"bad loss shape {self.loss.shape!r}")
        if self.loss.lam < 0:
            raise ConfigError("lam must be nonnegative")
        t = self.train
        if t.epochs < 1 or t.batch_size < 1 or t.learning_rate < 0:
            raise ConfigError("bad train section")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"bad optimizer {t.optimizer!r}")
        if not 0.0 < t.sequential_fraction < 1.0:
            raise ConfigError("sequential_fraction must be in (0,1)")
        li = self.lista
        if li.k_nonzeros > li.n or min(li.m, li.n, li.depth_k) < 1:
            raise ConfigError("bad lista section")
        if li.noise_sigma < 0 or li.rho < 0 or li.mu_scale <= 0:
            raise ConfigError("bad lista solver parameters")
        return self


_SECTIONS = {
    "problem": ProblemConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "solver": SolverConfig,
    "loss": LossConfig,
    "train": TrainSection,
    "lista": ListaSection,
}
_TOP_KEYS = ("seed", "out_dir")


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Strict construction: every unknown key or section is rejected."""
    cfg = ExperimentConfig()
    for key in doc:
        if key not in _TOP_KEYS and key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        cfg.seed = doc["seed"]
    if "out_dir" in doc:
        if not isinstance(doc["out_dir"], str):
            raise ConfigError("out_dir must be a string")
        cfg.out_dir = doc["out_dir"]
    for section, cls in _SECTIONS.items():
        if section not in doc:
            continue
        body = doc[section]
        if not isinstance(body, dict):
            raise ConfigError(f"section [{section}] must be a table")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(cls)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            current = getattr(target, key)
            if isinstance(current, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{section}.{key} must be a boolean")
            elif isinstance(current, int):
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"{section}.{key} must be an integer")
            elif isinstance(current, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{section}.{key} must be a number")
                value = float(value)
            elif isinstance(current, str):
                if not isinstance(value, str):
                    raise ConfigError(f"{section}.{key} must be a string")
            elif isinstance(current, list):
                if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                    raise ConfigError(f"{section}.{key} must be a list of strings")
            setattr(target, key, value)
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for section in _SECTIONS:
        doc[section] = asdict(getattr(cfg, section))
    return doc


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e
    return config_from_dict(doc)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        # repr round-trips doubles; TOML floats need a dot or exponent
        s = repr(value)
        if "." not in s and "e" not in s and "E" not in s and "n" not in s:
            s += ".0"
        return s
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__}")


def to_toml(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {_fmt(cfg.seed)}", f"out_dir = {_fmt(cfg.out_dir)}"]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(_SECTIONS[section]):
            lines.append(f"{f.name} = {_fmt(getattr(getattr(cfg, section), f.name))}")
    return "\n".join(lines) + "\n"
