"""INI-style configuration for profiles, calibrations, traces and experiments.

The packaged ``configs/defaults.ini`` is always read first; a user file is
layered on top, so it only needs the sections it changes.  Section names:

``[profile.<name>]``      n_layers, hidden_size, precision_bytes, kv_multiplier,
                          per_token_bytes (optional override)
``[calibration.<name>]``  alpha_ms, beta_ms_per_token, reference_chunk_size
``[trace.<name>]``        mbps = <constant> | breakpoints = t:mbps, ... | csv = <path>
``[experiment]``          the matrix, see :class:`ExperimentConfig`
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

from .codecs import Codec, get_codec
from .model import BandwidthTrace, CostModel, ModelProfile

DEFAULTS_NAME = "defaults.ini"


class ConfigError(ValueError):
    pass


def _list(value: str) -> list[str]:
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


def read_ini(path: str | Path | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(resources.files("cake_kv.configs").joinpath(DEFAULTS_NAME).read_text())
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        cp.read(path)
        cp.set(configparser.DEFAULTSECT, "_config_dir", str(path.resolve().parent))
    return cp


def profile_from(cp: configparser.ConfigParser, name: str) -> ModelProfile:
    sec = f"profile.{name}"
    if not cp.has_section(sec):
        raise ConfigError(f"no [{sec}] section")
    s = cp[sec]
    override = s.get("per_token_bytes", fallback="").strip()
    return ModelProfile(
        name=name,
        n_layers=s.getint("n_layers"),
        hidden_size=s.getint("hidden_size"),
        precision_bytes=s.getint("precision_bytes", fallback=2),
        kv_multiplier=s.getint("kv_multiplier", fallback=2),
        per_token_bytes_override=int(override) if override else None,
    )


def calibration_from(cp: configparser.ConfigParser, name: str) -> CostModel:
    sec = f"calibration.{name}"
    if not cp.has_section(sec):
        raise ConfigError(f"no [{sec}] section")
    s = cp[sec]
    return CostModel(
        alpha_ms=s.getfloat("alpha_ms"),
        beta_ms_per_token=s.getfloat("beta_ms_per_token"),
        reference_chunk_size=s.getint("reference_chunk_size", fallback=512),
        name=name,
    )


def parse_breakpoints(text: str, name: str = "") -> BandwidthTrace:
    pairs = []
    for item in _list(text):
        t, sep, r = item.partition(":")
        if not sep:
            raise ConfigError(f"breakpoint {item!r} is not t_ms:mbps")
        pairs.append((float(t), float(r)))
    return BandwidthTrace(tuple(pairs), name=name)


def trace_from(cp: configparser.ConfigParser, ref: str) -> BandwidthTrace:
    """Resolve a trace reference: a ``[trace.x]`` name, a CSV path or a bare mbps number."""
    sec = f"trace.{ref}"
    if cp.has_section(sec):
        s = cp[sec]
        if "mbps" in s:
            return BandwidthTrace(((0.0, s.getfloat("mbps")),), name=ref)
        if "breakpoints" in s:
            return parse_breakpoints(s["breakpoints"], name=ref)
        if "csv" in s:
            return _csv_trace(cp, s["csv"], ref)
        raise ConfigError(f"[{sec}] needs mbps, breakpoints or csv")
    try:
        return BandwidthTrace.constant(float(ref))
    except ValueError:
        pass
    return _csv_trace(cp, ref, None)


def _csv_trace(cp: configparser.ConfigParser, ref: str, name: str | None) -> BandwidthTrace:
    path = Path(ref)
    if not path.is_absolute():
        base = cp.defaults().get("_config_dir")
        if base and (Path(base) / path).exists():
            path = Path(base) / path
    if not path.is_file():
        raise ConfigError(f"trace {ref!r} is neither a [trace.*] section nor a CSV file")
    trace = BandwidthTrace.from_csv(path)
    return BandwidthTrace(trace.breakpoints, name=name or trace.name)


@dataclass(frozen=True)
class RunSpec:
    profile: ModelProfile
    context_tokens: int
    trace: BandwidthTrace
    power_fraction: float
    codec: Codec
    mode: str

    @property
    def key(self) -> tuple:
        return (
            self.profile.name, self.context_tokens, self.trace.name,
            self.power_fraction, self.codec.id, self.mode,
        )


@dataclass
class ExperimentConfig:
    profiles: list[ModelProfile]
    calibration: CostModel
    context_lengths: list[int]
    chunk_size: int = 512
    traces: list[BandwidthTrace] = field(default_factory=list)
    power_fractions: list[float] = field(default_factory=lambda: [1.0])
    codecs: list[Codec] = field(default_factory=lambda: [get_codec("identity")])
    modes: list[str] = field(default_factory=lambda: ["cake", "compute_only", "io_only"])
    clock: str = "sim"
    seed: int = 0
    out: Path = Path("results.csv")
    store_root: Path = Path("kvstore")
    quantum_bytes: int = 4 * 1024 * 1024
    decode_us_per_mib: float = 0.0
    budget_per_step: int = 512

    def __post_init__(self) -> None:
        if not self.profiles or not self.context_lengths or not self.traces:
            raise ConfigError("experiment needs at least one profile, context length and trace")
        if self.clock not in ("sim", "live"):
            raise ConfigError(f"clock must be sim or live, got {self.clock!r}")
        if self.chunk_size > self.budget_per_step:
            raise ConfigError("chunk_size cannot exceed budget_per_step")
        bad = [m for m in self.modes if m not in ("cake", "compute_only", "io_only")]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        if any(not 0 < p <= 1 for p in self.power_fractions):
            raise ConfigError("power fractions must be in (0, 1]")
        if any(t < self.chunk_size for t in self.context_lengths):
            raise ConfigError("every context length must be >= chunk_size")
        names = [t.name for t in self.traces]
        if len(set(names)) != len(names):
            raise ConfigError(f"trace names must be unique, got {names}")

    def runs(self) -> Iterator[RunSpec]:
        """The full cross product, in a fixed order."""
        for prof, length, trace, power, codec, mode in itertools.product(
            self.profiles, self.context_lengths, self.traces,
            self.power_fractions, self.codecs, self.modes,
        ):
            yield RunSpec(prof, length, trace, power, codec, mode)

    def store_dir(self, profile: ModelProfile, codec: Codec) -> Path:
        return self.store_root / profile.name / codec.id.replace(":", "_")


def load_experiment(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    cp = read_ini(path)
    if not cp.has_section("experiment"):
        raise ConfigError("no [experiment] section")
    e = cp["experiment"]
    base = Path(cp.defaults().get("_config_dir", "."))
    traces = [trace_from(cp, ref) for ref in _list(e.get("traces", ""))]
    traces += [BandwidthTrace.constant(float(b)) for b in _list(e.get("bandwidths", ""))]

    def rel(p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    kwargs = dict(
        profiles=[profile_from(cp, n) for n in _list(e.get("profiles", ""))],
        calibration=calibration_from(cp, e.get("calibration", "a100")),
        context_lengths=[int(x) for x in _list(e.get("context_lengths", ""))],
        chunk_size=e.getint("chunk_size", fallback=512),
        traces=traces,
        power_fractions=[float(x) for x in _list(e.get("power_fractions", "1.0"))],
        codecs=[get_codec(c) for c in _list(e.get("codecs", "identity"))],
        modes=_list(e.get("modes", "cake, compute_only, io_only")),
        clock=e.get("clock", "sim"),
        seed=e.getint("seed", fallback=0),
        out=rel(e.get("out", "results.csv")),
        store_root=rel(e.get("store_root", "kvstore")),
        quantum_bytes=int(e.getfloat("quantum_mib", fallback=4.0) * 1024 * 1024),
        decode_us_per_mib=e.getfloat("decode_us_per_mib", fallback=0.0),
        budget_per_step=e.getint("budget_per_step", fallback=512),
    )
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kwargs)
