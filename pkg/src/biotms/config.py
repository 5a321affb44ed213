"""Experiment configuration: flat plain-text files plus CLI overrides.

Config files hold one ``key = value`` pair per line ('#' starts a
comment). Lists are comma separated. Recognized keys:

    fine_n          fine intervals per side (int, default 60)
    coarse_n        coarse intervals per side (int, default 5)
    case            coefficient case id, 1 or 2 (default 1)
    geometry        'default', 'generate:<seed>', or a raster file path
    scheme          'coupled' or 'fixed_stress' (default coupled)
    tau             time step (default 5.0)
    steps           number of time steps (default 20)
    t_max           optional; must equal tau * steps when given
    noff_p          list of pressure mode counts (default 2,4,8,12,16)
    noff_u          list of displacement mode counts (default 2,4,8,12,16)
    snapshots       'delta' or 'random' (default delta)
    snapshot_ratio  random snapshot budget ratio (default 0.36)
    oversample_t    list of oversampling layer counts (default 0)
    seed            random snapshot seed (default 0)
    pou             'multiscale' or 'linear' partition of unity
    fs_inner        fixed-stress inner iterations (default 1, the plain split)
    write_vtk       write VTK field snapshots (default true)
    output_dir      artifact directory (default 'runs/out')
    workers         sweep worker threads (default 1; env BIOTMS_WORKERS wins)
"""

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

WORKERS_ENV = "BIOTMS_WORKERS"


class ConfigError(ValueError):
    """Invalid configuration with a field-level message."""


def _parse_int_list(text: str) -> tuple:
    return tuple(int(tok) for tok in str(text).split(",") if tok.strip() != "")


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    fine_n: int = 60
    coarse_n: int = 5
    case: int = 1
    geometry: str = "default"
    scheme: str = "coupled"
    tau: float = 5.0
    steps: int = 20
    t_max: float | None = None
    noff_p: tuple = (2, 4, 8, 12, 16)
    noff_u: tuple = (2, 4, 8, 12, 16)
    snapshots: str = "delta"
    snapshot_ratio: float = 0.36
    oversample_t: tuple = (0,)
    seed: int = 0
    pou: str = "multiscale"
    fs_inner: int = 1
    write_vtk: bool = True
    output_dir: str = "runs/out"
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.fine_n < 1:
            raise ConfigError(f"fine_n: must be >= 1, got {self.fine_n}")
        if self.coarse_n < 1 or self.fine_n % self.coarse_n != 0:
            raise ConfigError(
                f"coarse_n: {self.coarse_n} must divide fine_n={self.fine_n}")
        if self.case not in (1, 2):
            raise ConfigError(f"case: expected 1 or 2, got {self.case}")
        if self.scheme not in ("coupled", "fixed_stress"):
            raise ConfigError(f"scheme: unknown scheme {self.scheme!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau: must be positive, got {self.tau}")
        if self.steps < 1:
            raise ConfigError(f"steps: must be >= 1, got {self.steps}")
        if self.t_max is not None and abs(self.tau * self.steps - self.t_max) > 1e-9:
            raise ConfigError(
                f"t_max: tau * steps = {self.tau * self.steps} != t_max = {self.t_max}")
        for name, values in (("noff_p", self.noff_p), ("noff_u", self.noff_u)):
            if len(values) == 0:
                raise ConfigError(f"{name}: list must not be empty")
            if any(v < 1 for v in values):
                raise ConfigError(f"{name}: mode counts must be >= 1, got {values}")
        if len(self.oversample_t) == 0:
            raise ConfigError("oversample_t: list must not be empty")
        if any(t < 0 for t in self.oversample_t):
            raise ConfigError(f"oversample_t: layer counts must be >= 0, got {self.oversample_t}")
        if self.snapshots not in ("delta", "random"):
            raise ConfigError(f"snapshots: expected 'delta' or 'random', got {self.snapshots!r}")
        if not 0 < self.snapshot_ratio <= 1:
            raise ConfigError(f"snapshot_ratio: must be in (0, 1], got {self.snapshot_ratio}")
        if self.pou not in ("multiscale", "linear"):
            raise ConfigError(f"pou: expected 'multiscale' or 'linear', got {self.pou!r}")
        if self.fs_inner < 1:
            raise ConfigError(f"fs_inner: must be >= 1, got {self.fs_inner}")
        if self.geometry not in ("default",) and not self.geometry.startswith("generate:"):
            if not Path(self.geometry).exists():
                raise ConfigError(f"geometry: file not found: {self.geometry}")
        return self

    @property
    def effective_workers(self) -> int:
        env = os.environ.get(WORKERS_ENV)
        if env is not None:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(f"{WORKERS_ENV}: not an integer: {env!r}") from exc
        return max(1, self.workers)

    def as_flat_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f.name] = v
        return out


_INT_KEYS = {"fine_n", "coarse_n", "case", "steps", "seed", "fs_inner", "workers"}
_FLOAT_KEYS = {"tau", "snapshot_ratio", "t_max"}
_LIST_KEYS = {"noff_p", "noff_u", "oversample_t"}
_BOOL_KEYS = {"write_vtk"}
_STR_KEYS = {"geometry", "scheme", "snapshots", "pou", "output_dir"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _LIST_KEYS | _BOOL_KEYS | _STR_KEYS


def _coerce(key: str, raw):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _LIST_KEYS:
        return _parse_int_list(raw)
    if key in _BOOL_KEYS:
        return _parse_bool(raw)
    return str(raw)


def parse_config(path) -> ExperimentConfig:
    """Read a flat key = value file into a validated config."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from exc
    return ExperimentConfig(**values).validate()


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Replace config fields from non-None override values (CLI flags)."""
    updates = {}
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown override key {key!r}")
        updates[key] = _coerce(key, raw)
    return replace(config, **updates).validate()


def write_config(config: ExperimentConfig, path, exclude: tuple = ()) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(config.as_flat_dict().items())
             if v is not None and k not in exclude]
    Path(path).write_text("\n".join(lines) + "\n")
