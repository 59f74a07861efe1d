"""Run configuration and the ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from tsbo.bilevel import TsConfig
from tsbo.errors import ConfigError
from tsbo.objectives import OBJECTIVES

METHODS = (
    "tsbo-gaussian",
    "tsbo-gev",
    "tsbo-random",
    "tsbo-no-ua",
    "tsbo-no-feedback",
    "vanilla-bo",
    "sobol",
)

# method name -> overrides applied on top of the configured TsConfig
METHOD_OVERRIDES = {
    "tsbo-gaussian": {"sampler_kind": "gaussian"},
    "tsbo-gev": {"sampler_kind": "gev"},
    "tsbo-random": {"sampler_kind": "random"},
    "tsbo-no-ua": {"uncertainty_aware": False},
    "tsbo-no-feedback": {"feedback_enabled": False},
}

KEY_ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    objective: str = "ackley"
    dim: int = 10
    n_init: int = 10
    n_query: int = 50
    seed: int = 0
    method: str = "tsbo-gaussian"
    label_noise_std: float = 0.0
    box_half_width: float = 3.0
    gp_steps: int = 50
    gp_lr: float = 0.05
    acq_restarts: int = 32
    acq_maxiter: int = 100
    n_seeds: int = 5
    n_test: int = 100
    local_std: float = 0.01
    out: str = "runs"
    ts: TsConfig = field(default_factory=TsConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.n_init < 2:
            raise ConfigError("n_init must be >= 2")
        if self.n_query < 0:
            raise ConfigError("n_query must be >= 0")
        if self.label_noise_std < 0:
            raise ConfigError("label_noise_std must be >= 0")
        if self.dim < 1 or (self.objective == "branin" and self.dim < 2):
            raise ConfigError("dim too small for objective")

    @property
    def uses_teacher(self) -> bool:
        return self.method.startswith("tsbo")

    def resolved_ts(self) -> TsConfig:
        return replace(self.ts, **METHOD_OVERRIDES.get(self.method, {}))

    def with_(self, **kw) -> "RunConfig":
        ts_keys = {f.name for f in fields(TsConfig)}
        ts_kw = {k: v for k, v in kw.items() if k in ts_keys}
        run_kw = {k: v for k, v in kw.items() if k not in ts_keys}
        return replace(self, ts=replace(self.ts, **ts_kw), **run_kw)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(d.pop("ts"))
        return d


def _coerce(raw: str, kind: str, key: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys fail."""
    run_types = {f.name: f.type for f in fields(RunConfig) if f.name != "ts"}
    ts_types = {f.name: f.type for f in fields(TsConfig)}
    run_kw, ts_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = KEY_ALIASES.get(key, key)
        if key in run_types:
            run_kw[key] = _coerce(value, run_types[key], key)
        elif key in ts_types:
            ts_kw[key] = _coerce(value, ts_types[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return RunConfig(ts=TsConfig(**ts_kw), **run_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.as_dict().items():
        lines.append(f"{'lambda' if key == 'lam' else key} = {value}")
    return "\n".join(lines) + "\n"
