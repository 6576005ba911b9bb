"""Experiment configuration in INI format (``configparser`` dialect).

A complete annotated example::

    [experiment]
    seed = 20240601              ; master 64-bit seed
    N = 500, 2000, 8000          ; strictly increasing population sizes
    replicas = 20
    snapshot_times = 1, 5, 10    ; sorted, within [0, horizon]

    [model]
    p = 1.0                      ; recovery rate
    q = 6.0                      ; infection rate scale
    horizon = 10

    [kernel]
    kind = meanfield             ; or: local
    T = gaussian                 ; meanfield only: constant | gaussian | dot
    sigma = 0.2                  ; gaussian width
    ; beta = 0.25                ; local only, 0 < beta < 1/3
    ; exponent_divisor = 2

    [initial]
    spatial = uniform            ; or: gaussian (truncated to the unit square), plateau
    ; center = 0.5, 0.5          ; gaussian only
    ; sigma = 0.15               ; gaussian only
    ; margin = 0.2               ; plateau only: width of the C^2 taper to zero
    infected_base = 0.05         ; P(I | x) = base + amplitude * bump(x)
    infected_amplitude = 0.2
    infected_center = 0.3, 0.3
    infected_width = 0.1
    removed_base = 0.0

    [solver]
    grid = 64                    ; limit-solver grid
    dt = 1e-3

    [metrics]
    grid = 32                    ; aggregation lattice for transport distances
    commutator_grid = 64
    w1_replicas = 3              ; replicas that also compute W1(rho, mu)
    alpha = 0.25                 ; Hoelder exponent used for the reference rate

    [diagnostics]
    N = 250, 1000, 4000
    replicas = 200
    horizon = 1.0
    increment_N = 500, 2000, 8000
    increment_replicas = 40
    increment_start = 0.5
    thetas = 0.1, 0.25, 0.5, 1.0

Every section except ``[experiment]``, ``[model]`` and ``[kernel]`` is
optional.  Unknown keys are rejected with the offending line number.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..kernels import Local, kernel_from_dict
from ..model import CompartmentProfile, InitialDistribution, ModelParams, Plateau, TruncatedGaussian, Uniform

__all__ = ["ConfigError", "DiagnosticsConfig", "ExperimentConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message names file, line, section and key.

    ``where`` optionally holds the ``(section, key)`` at fault so the parser
    can attach a line number.
    """

    def __init__(self, msg: str, where: tuple | None = None):
        super().__init__(msg)
        self.where = where


@dataclass(frozen=True)
class DiagnosticsConfig:
    N: tuple = (250, 1000, 4000)
    replicas: int = 200
    horizon: float = 1.0
    increment_N: tuple = (500, 2000, 8000)
    increment_replicas: int = 40
    increment_start: float = 0.5
    thetas: tuple = (0.1, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    params: ModelParams
    kernel: object
    initial: InitialDistribution
    N: tuple
    replicas: int
    snapshot_times: tuple
    seed: int = 0
    grid: int = 64
    dt: float = 1e-3
    metric_grid: int = 32
    commutator_grid: int = 64
    w1_replicas: int | None = None
    alpha: float = 0.25
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def __post_init__(self):
        _validate(self)

    @property
    def n_steps(self) -> int:
        return int(round(self.params.horizon / self.dt))

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "params": {"p": self.params.p, "q": self.params.q, "horizon": self.params.horizon},
            "kernel": self.kernel.to_dict(),
            "initial": self.initial.to_dict(),
            "N": list(self.N),
            "replicas": self.replicas,
            "snapshot_times": list(self.snapshot_times),
            "seed": self.seed,
            "grid": self.grid,
            "dt": self.dt,
            "metric_grid": self.metric_grid,
            "commutator_grid": self.commutator_grid,
            "w1_replicas": self.w1_replicas,
            "alpha": self.alpha,
            "diagnostics": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.diagnostics).items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            diag = DiagnosticsConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in d.get("diagnostics", {}).items()})
            return cls(
                params=ModelParams(**d["params"]),
                kernel=kernel_from_dict(d["kernel"]),
                initial=InitialDistribution.from_dict(d["initial"]),
                N=tuple(int(n) for n in d["N"]),
                replicas=int(d["replicas"]),
                snapshot_times=tuple(float(t) for t in d["snapshot_times"]),
                seed=int(d["seed"]),
                grid=int(d["grid"]),
                dt=float(d["dt"]),
                metric_grid=int(d["metric_grid"]),
                commutator_grid=int(d["commutator_grid"]),
                w1_replicas=d.get("w1_replicas"),
                alpha=float(d["alpha"]),
                diagnostics=diag,
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed resolved config: {exc}") from exc


def _validate(cfg: ExperimentConfig) -> None:
    if not cfg.N or any(n < 1 for n in cfg.N):
        raise ConfigError("N must list positive integers", ("experiment", "n"))
    if any(b <= a for a, b in zip(cfg.N, cfg.N[1:])):
        raise ConfigError("N must be strictly increasing", ("experiment", "n"))
    if cfg.replicas < 1:
        raise ConfigError("replicas must be at least 1", ("experiment", "replicas"))
    ts = cfg.snapshot_times
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ConfigError("snapshot_times must be sorted", ("experiment", "snapshot_times"))
    if ts and (ts[0] < 0 or ts[-1] > cfg.params.horizon):
        raise ConfigError("snapshot_times must lie in [0, horizon]", ("experiment", "snapshot_times"))
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", ("experiment", "seed"))
    if cfg.grid < 2 or cfg.metric_grid < 2 or cfg.commutator_grid < 2:
        raise ConfigError("grid sizes must be at least 2", ("solver", "grid"))
    if not cfg.dt > 0:
        raise ConfigError("dt must be positive", ("solver", "dt"))
    if not 0 < cfg.alpha < 0.5:
        raise ConfigError("alpha must lie in (0, 1/2)", ("metrics", "alpha"))
    if cfg.w1_replicas is not None and cfg.w1_replicas < 0:
        raise ConfigError("w1_replicas must be non-negative", ("metrics", "w1_replicas"))
    d = cfg.diagnostics
    for name in ("N", "increment_N"):
        v = getattr(d, name)
        if any(b <= a for a, b in zip(v, v[1:])) or any(n < 1 for n in v):
            raise ConfigError(f"diagnostics {name} must be strictly increasing positive integers",
                              ("diagnostics", name.lower()))
    if d.replicas < 1 or d.increment_replicas < 1 or not d.horizon > 0:
        raise ConfigError("diagnostics replicas and horizon must be positive", ("diagnostics", "replicas"))
    if not d.thetas or any(t <= 0 for t in d.thetas):
        raise ConfigError("diagnostics thetas must be positive", ("diagnostics", "thetas"))


# ---------------------------------------------------------------------------
# INI parsing
# ---------------------------------------------------------------------------

_KNOWN = {
    "experiment": {"seed", "n", "replicas", "snapshot_times"},
    "model": {"p", "q", "horizon"},
    "kernel": {"kind", "t", "sigma", "value", "beta", "exponent_divisor"},
    "initial": {"spatial", "center", "sigma", "margin", "infected_base", "infected_amplitude", "infected_center",
                "infected_width", "removed_base"},
    "solver": {"grid", "dt"},
    "metrics": {"grid", "commutator_grid", "w1_replicas", "alpha"},
    "diagnostics": {"n", "replicas", "horizon", "increment_n", "increment_replicas", "increment_start", "thetas"},
}
_REQUIRED_SECTIONS = ("experiment", "model", "kernel")


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip().lower()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None:
            m = re.match(r"\s*([^=:;#\s]+)\s*[=:]", line)
            if m and m.group(1).lower() == key:
                return no
    return None


class _Reader:
    def __init__(self, cp, text, source):
        self.cp, self.text, self.source = cp, text, source

    def fail(self, section, key, msg):
        line = _line_of(self.text, section, key)
        where = f"{self.source}:{line}" if line else self.source
        what = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{where}: {what}: {msg}")

    def raw(self, section, key, default=None, required=False):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key).strip()
        if required:
            line = _line_of(self.text, section)
            where = f"{self.source}:{line}" if line else self.source
            raise ConfigError(f"{where}: [{section}] missing required key {key!r}")
        return default

    def conv(self, section, key, fn, default=None, required=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            return fn(v)
        except (ValueError, TypeError) as exc:
            self.fail(section, key, f"cannot parse {v!r}: {exc}")

    def floats(self, section, key, default=None, required=False):
        return self.conv(section, key, lambda v: tuple(float(x) for x in v.replace(",", " ").split()),
                         default, required)

    def ints(self, section, key, default=None, required=False):
        return self.conv(section, key, lambda v: tuple(int(x) for x in v.replace(",", " ").split()),
                         default, required)

    def pair(self, section, key, default):
        v = self.floats(section, key, None)
        if v is None:
            return default
        if len(v) != 2:
            self.fail(section, key, "expected two numbers")
        return v


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse INI text; every error names the line and key responsible."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    r = _Reader(cp, text, source)
    for sec in cp.sections():
        if sec not in _KNOWN:
            r.fail(sec, None, "unknown section")
        for key in cp.options(sec):
            if key not in _KNOWN[sec]:
                r.fail(sec, key, "unknown key")
    for sec in _REQUIRED_SECTIONS:
        if not cp.has_section(sec):
            raise ConfigError(f"{source}: missing section [{sec}]")

    def guarded(section, key, build):
        try:
            return build()
        except ConfigError:
            raise
        except ValueError as exc:
            r.fail(section, key, str(exc))

    params = guarded("model", None, lambda: ModelParams(
        p=r.conv("model", "p", float, required=True),
        q=r.conv("model", "q", float, required=True),
        horizon=r.conv("model", "horizon", float, required=True)))

    kind = r.raw("kernel", "kind", required=True).lower()
    if kind == "meanfield":
        kd = {"kind": "meanfield", "T": r.raw("kernel", "t", "constant").lower()}
        if cp.has_option("kernel", "sigma"):
            kd["sigma"] = r.conv("kernel", "sigma", float)
        if cp.has_option("kernel", "value"):
            kd["value"] = r.conv("kernel", "value", float)
        if cp.has_option("kernel", "beta"):
            r.fail("kernel", "beta", "beta only applies to kind = local")
        kernel = guarded("kernel", "t", lambda: kernel_from_dict(kd))
    elif kind == "local":
        beta = r.conv("kernel", "beta", float, required=True)
        div = r.conv("kernel", "exponent_divisor", float, 2.0)
        kernel = guarded("kernel", "beta", lambda: Local(beta=beta, exponent_divisor=div))
    else:
        r.fail("kernel", "kind", f"expected meanfield or local, got {kind!r}")

    spatial_kind = r.raw("initial", "spatial", "uniform").lower() if cp.has_section("initial") else "uniform"
    if spatial_kind == "uniform":
        spatial = Uniform()
    elif spatial_kind == "gaussian":
        spatial = guarded("initial", "sigma", lambda: TruncatedGaussian(
            center=r.pair("initial", "center", (0.5, 0.5)),
            sigma=r.conv("initial", "sigma", float, 0.15)))
    elif spatial_kind == "plateau":
        spatial = guarded("initial", "margin", lambda: Plateau(margin=r.conv("initial", "margin", float, 0.2)))
    else:
        r.fail("initial", "spatial", f"expected uniform, gaussian or plateau, got {spatial_kind!r}")
    profile = guarded("initial", None, lambda: CompartmentProfile(
        infected_base=r.conv("initial", "infected_base", float, 0.1),
        infected_amplitude=r.conv("initial", "infected_amplitude", float, 0.0),
        infected_center=r.pair("initial", "infected_center", (0.5, 0.5)),
        infected_width=r.conv("initial", "infected_width", float, 0.1),
        removed_base=r.conv("initial", "removed_base", float, 0.0)))

    diag = DiagnosticsConfig()
    diag = DiagnosticsConfig(
        N=r.ints("diagnostics", "n", diag.N),
        replicas=r.conv("diagnostics", "replicas", int, diag.replicas),
        horizon=r.conv("diagnostics", "horizon", float, diag.horizon),
        increment_N=r.ints("diagnostics", "increment_n", diag.increment_N),
        increment_replicas=r.conv("diagnostics", "increment_replicas", int, diag.increment_replicas),
        increment_start=r.conv("diagnostics", "increment_start", float, diag.increment_start),
        thetas=r.floats("diagnostics", "thetas", diag.thetas),
    )
    w1r = r.conv("metrics", "w1_replicas", int, None)
    fields = dict(
        params=params, kernel=kernel, initial=InitialDistribution(spatial, profile),
        N=r.ints("experiment", "n", required=True),
        replicas=r.conv("experiment", "replicas", int, 1),
        snapshot_times=r.floats("experiment", "snapshot_times", (params.horizon,)),
        seed=r.conv("experiment", "seed", int, 0),
        grid=r.conv("solver", "grid", int, 64),
        dt=r.conv("solver", "dt", float, 1e-3),
        metric_grid=r.conv("metrics", "grid", int, 32),
        commutator_grid=r.conv("metrics", "commutator_grid", int, 64),
        w1_replicas=w1r,
        alpha=r.conv("metrics", "alpha", float, 0.25),
        diagnostics=diag,
    )
    try:
        return ExperimentConfig(**fields)
    except ConfigError as exc:
        if exc.where is not None:
            r.fail(*exc.where, str(exc))
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))

