"""Experiment configuration: sectioned ``key = value [unit]`` text.

Four sections are recognised, ``[system]``, ``[noise]``, ``[experiment]``
and ``[output]``.  Each of the first three has a ``kind`` selecting a block
schema; every parameter in a schema has a default and a unit (``none`` for
dimensionless quantities).  A unit written in the file must match the
schema.  The resolved configuration, with every default filled in, is what
experiments serialise next to their outputs.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ParameterError
from ..noise import (
    AR1TentKernel,
    ConstantWeight,
    MovingAverageKernel,
    NoiseKernel,
    PeriodicBasisKernel,
    TanhWeight,
    box_kernel,
)
from ..systems import CGLKickMap, CGLSpectralSpec, ChainMap, LinearMap, OscillatorChainSpec, ScalarNonlinearMap
from ..systems.base import TimeOneMap

EXPERIMENTS = ("mix-rate", "couple", "kernel-converge", "verify", "controllability")


@dataclass(frozen=True)
class Param:
    kind: str  # int | float | floats | str
    default: object
    unit: str = "none"


SYSTEMS = {
    "chain": {
        "n": Param("int", 2),
        "a": Param("floats", (1.0,), "1/time^2"),
        "b": Param("floats", (1.0,), "1/time^2"),
        "perturbation": Param("str", "one_minus_cos"),
        "amp": Param("floats", (0.1,), "1/time^2"),
        "gamma1": Param("float", 1.0, "1/time"),
        "gamma_n": Param("float", 1.0, "1/time"),
        "h": Param("float", 1e-3, "time"),
        "n_basis": Param("int", 3),
    },
    "cgl": {
        "n_modes": Param("int", 16),
        "nu": Param("float", 0.1),
        "c": Param("float", 1.0),
        "s": Param("int", 1),
        "kick_scale": Param("float", 0.5),
        "substeps": Param("int", 64),
        "grid_factor": Param("int", 2),
    },
    "toy-linear": {
        "dim": Param("int", 1),
        "matrix": Param("floats", (0.5,)),
    },
    "toy-scalar": {
        "contraction": Param("float", 0.5),
        "beta": Param("float", 0.0),
    },
}

_COMMON_NOISE = {
    "base": Param("float", 2.0),
    "tol_tail": Param("float", 1e-9),
}

NOISES = {
    "ma": {
        "coeffs": Param("floats", (0.5,)),
        "scales": Param("floats", (0.2,), "noise"),
        "innovation": Param("str", "tent"),
        "split": Param("int", 0),
        **_COMMON_NOISE,
    },
    "ar1": {
        "lam": Param("float", 0.5),
        "scale": Param("floats", (0.2,), "noise"),
        **_COMMON_NOISE,
    },
    "periodic-basis": {
        "half_widths": Param("floats", (0.2,), "noise"),
        "weight": Param("str", "constant"),
        "strength": Param("float", 0.5),
        "weight_scale": Param("float", 1.0, "noise^2"),
        "split": Param("int", 0),
        **_COMMON_NOISE,
    },
    "kick": {
        "scales": Param("floats", (), "noise"),
        "innovation": Param("str", "tent"),
        **_COMMON_NOISE,
    },
    "box": {
        "lower": Param("floats", (0.5,), "noise"),
        "upper": Param("floats", (1.0,), "noise"),
        **_COMMON_NOISE,
    },
}

# Noise used when the file has no [noise] section.
DEFAULT_NOISE = {
    "chain": ("ma", {"coeffs": (0.5,), "scales": (0.2, 0.1, 0.07, 0.2, 0.1, 0.07)}),
    "cgl": ("kick", {}),
    "toy-linear": ("ma", {"coeffs": (0.5,), "scales": (0.5,)}),
    "toy-scalar": ("ma", {"coeffs": (0.5,), "scales": (0.5,)}),
}

_COMMON_EXPERIMENT = {
    "seed": Param("int", 0),
    "ensemble": Param("int", 10_000),
    "horizon": Param("int", 30),
    "burn_in": Param("int", 0),
}

EXPERIMENT_PARAMS = {
    "mix-rate": {
        "initial_distance": Param("float", 1.0, "state"),
        "fit_k_min": Param("int", 5),
        "fit_k_max": Param("int", 0),
        "floor_multiplier": Param("float", 2.0),
        "n_null": Param("int", 10),
        "max_support": Param("int", 2000),
        "r2_min": Param("float", 0.9),
        "joint": Param("int", 0),
    },
    "couple": {
        "n_pairs": Param("int", 2000),
        "tune_pairs": Param("int", 2000),
        "eps": Param("float", 0.05),
        "pair_scale": Param("float", 1e-2, "state"),
        "start_fraction": Param("float", 0.5),
        "max_halvings": Param("int", 12),
        "contraction_steps": Param("int", 5),
        "far_distance": Param("float", 1.0, "state"),
    },
    "kernel-converge": {
        "m": Param("int", 1),
        "past_a": Param("float", 0.0, "support fraction"),
        "past_b": Param("float", 1.0, "support fraction"),
        "n_boot": Param("int", 50),
        "max_support": Param("int", 2000),
        "tol_multiplier": Param("float", 3.0),
        "separation_multiplier": Param("float", 5.0),
        "forget_after": Param("int", -1),
        "floor_multiplier": Param("float", 2.0),
    },
    "verify": {
        "samples": Param("int", 100),
        "gd_k_max": Param("int", 20),
        "srz_n": Param("int", 1),
        "srz_s": Param("int", 1),
        "srz_delta": Param("float", 0.5, "noise diameter fraction"),
        "srz_pasts": Param("int", 8),
        "eps": Param("float", 0.05),
        "lipschitz_pairs": Param("int", 10_000),
        "normalization_tol": Param("float", 1e-3),
        "gcp_delta": Param("float", 0.05, "noise diameter fraction"),
        "gcp_epsilon": Param("float", 0.25, "lifted distance"),
        "gcp_steps": Param("int", 0),
        "gcp_trajectories": Param("int", 200),
    },
    "controllability": {
        "control_time": Param("float", 1.0, "time"),
        "rank_rtol": Param("float", 1e-8),
    },
}


# ---------------------------------------------------------------------------
# parsing

def _split_unit(raw: str) -> tuple[str, str | None]:
    raw = raw.strip()
    if raw.endswith("]") and "[" in raw:
        i = raw.rindex("[")
        return raw[:i].strip(), raw[i + 1 : -1].strip()
    return raw, None


def _parse(section: str, key: str, raw: str, p: Param):
    value, unit = _split_unit(raw)
    if unit is not None and unit != p.unit:
        raise ConfigError(f"[{section}] {key}: unit [{unit}] does not match expected [{p.unit}]")
    try:
        if p.kind == "int":
            return int(value)
        if p.kind == "float":
            return float(value)
        if p.kind == "floats":
            return tuple(float(v) for v in value.replace(",", " ").split())
        return value
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot read {value!r} as {p.kind}") from exc


def _format(value, p: Param) -> str:
    if p.kind == "floats":
        text = ", ".join(repr(float(v)) for v in value)
    elif p.kind == "float":
        text = repr(float(value))
    else:
        text = str(value)
    return f"{text} [{p.unit}]" if text else f"[{p.unit}]"


@dataclass(frozen=True)
class Block:
    kind: str
    params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]


def _block(section: str, kind: str, schema: dict, items: dict, overrides: dict | None = None) -> Block:
    unknown = set(items) - set(schema)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s) for kind {kind!r}: {', '.join(sorted(unknown))}")
    params = {k: p.default for k, p in schema.items()}
    params.update(overrides or {})
    for key, raw in items.items():
        params[key] = _parse(section, key, raw, schema[key])
    return Block(kind, params)


@dataclass(frozen=True)
class ExperimentConfig:
    system: Block
    noise: Block
    experiment: Block
    output: str = "results"

    @property
    def seed(self) -> int:
        return int(self.experiment["seed"])

    @property
    def ensemble(self) -> int:
        return int(self.experiment["ensemble"])

    @property
    def horizon(self) -> int:
        return int(self.experiment["horizon"])

    # -- construction --------------------------------------------------------

    @classmethod
    def from_string(cls, text: str, experiment: str | None = None) -> ExperimentConfig:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed configuration: {exc}") from exc
        unknown = set(cp.sections()) - {"system", "noise", "experiment", "output"}
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

        def items(name):
            return dict(cp.items(name)) if cp.has_section(name) else {}

        sys_items = items("system")
        sys_kind = sys_items.pop("kind", "chain")
        if sys_kind not in SYSTEMS:
            raise ConfigError(f"unknown system kind {sys_kind!r}; choose from {', '.join(SYSTEMS)}")
        system = _block("system", sys_kind, SYSTEMS[sys_kind], sys_items)

        noise_items = items("noise")
        default_kind, default_over = DEFAULT_NOISE[sys_kind]
        noise_kind = noise_items.pop("kind", default_kind)
        if noise_kind not in NOISES:
            raise ConfigError(f"unknown noise kind {noise_kind!r}; choose from {', '.join(NOISES)}")
        over = default_over if noise_kind == default_kind else {}
        noise = _block("noise", noise_kind, NOISES[noise_kind], noise_items, over)

        exp_items = items("experiment")
        exp_kind = exp_items.pop("kind", None)
        if experiment is not None:
            if exp_kind is not None and exp_kind not in (experiment, "verify-hypotheses" if experiment == "verify" else None):
                raise ConfigError(f"config describes experiment {exp_kind!r}, but {experiment!r} was requested")
            exp_kind = experiment
        if exp_kind == "verify-hypotheses":
            exp_kind = "verify"
        if exp_kind not in EXPERIMENT_PARAMS:
            raise ConfigError(f"unknown experiment kind {exp_kind!r}; choose from {', '.join(EXPERIMENTS)}")
        exp = _block("experiment", exp_kind, {**_COMMON_EXPERIMENT, **EXPERIMENT_PARAMS[exp_kind]}, exp_items)

        out_items = items("output")
        extra = set(out_items) - {"dir"}
        if extra:
            raise ConfigError(f"[output] unknown key(s): {', '.join(sorted(extra))}")
        cfg = cls(system, noise, exp, out_items.get("dir", "results"))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, experiment: str | None = None) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_string(text, experiment)

    @classmethod
    def default(cls, experiment: str = "mix-rate") -> ExperimentConfig:
        return cls.from_string("", experiment)

    def with_overrides(self, seed: int | None = None, output: str | None = None, **experiment) -> ExperimentConfig:
        params = dict(self.experiment.params)
        if seed is not None:
            params["seed"] = int(seed)
        for k, v in experiment.items():
            if k not in params:
                raise ConfigError(f"unknown experiment parameter {k!r}")
            params[k] = v
        cfg = ExperimentConfig(self.system, self.noise, Block(self.experiment.kind, params),
                               self.output if output is None else str(output))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        e = self.experiment
        if e["ensemble"] < 1 or e["horizon"] < 0:
            raise ConfigError("ensemble must be positive and horizon nonnegative")
        if e["burn_in"] < 0:
            raise ConfigError("burn_in must be nonnegative")
        # building the objects runs every parameter check once, up front
        smap = self.build_system()
        self.build_kernel(smap)

    # -- serialisation -------------------------------------------------------

    def to_string(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        sections = (
            ("system", self.system, SYSTEMS[self.system.kind]),
            ("noise", self.noise, NOISES[self.noise.kind]),
            ("experiment", self.experiment, {**_COMMON_EXPERIMENT, **EXPERIMENT_PARAMS[self.experiment.kind]}),
        )
        for name, block, schema in sections:
            cp[name] = {"kind": block.kind, **{k: _format(block.params[k], p) for k, p in schema.items()}}
        cp["output"] = {"dir": self.output}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_string())
        return path

    # -- object builders -----------------------------------------------------

    def build_system(self) -> TimeOneMap:
        s = self.system
        try:
            if s.kind == "chain":
                return ChainMap(OscillatorChainSpec(
                    n=s["n"], a=s["a"], b=s["b"], perturbation=s["perturbation"], amp=s["amp"],
                    gamma1=s["gamma1"], gamma_n=s["gamma_n"], h=s["h"], n_basis=s["n_basis"]))
            if s.kind == "cgl":
                return CGLKickMap(CGLSpectralSpec(
                    n_modes=s["n_modes"], nu=s["nu"], c=s["c"], s=s["s"], kick_scale=s["kick_scale"],
                    substeps=s["substeps"], grid_factor=s["grid_factor"]))
            if s.kind == "toy-linear":
                d, m = s["dim"], np.asarray(s["matrix"], dtype=float)
                if m.size == 1:
                    A = m[0] * np.eye(d)
                elif m.size == d * d:
                    A = m.reshape(d, d)
                else:
                    raise ConfigError(f"toy-linear matrix needs 1 or {d * d} entries, got {m.size}")
                return LinearMap(A)
            return ScalarNonlinearMap(s["contraction"], s["beta"])
        except (ParameterError, ValueError) as exc:
            raise ConfigError(f"[system] {exc}") from exc

    def build_kernel(self, smap: TimeOneMap | None = None) -> NoiseKernel:
        smap = self.build_system() if smap is None else smap
        n = self.noise
        dim = smap.dim_noise
        common = dict(base=n["base"], tol_tail=n["tol_tail"])
        split = (n.params.get("split") or None)
        try:
            if n.kind == "ma":
                k = MovingAverageKernel(n["coeffs"], _fit(n["scales"], dim, "scales"), innovation=n["innovation"],
                                        split=split, **common)
            elif n.kind == "ar1":
                k = AR1TentKernel(n["lam"], _fit(n["scale"], dim, "scale"), **common)
            elif n.kind == "periodic-basis":
                if n["weight"] == "constant":
                    weight = ConstantWeight()
                elif n["weight"] == "tanh":
                    weight = TanhWeight(n["strength"], n["weight_scale"])
                else:
                    raise ConfigError(f"unknown weight {n['weight']!r}; choose constant or tanh")
                k = PeriodicBasisKernel(_fit(n["half_widths"], dim, "half_widths"), weight, split=split, **common)
            elif n.kind == "kick":
                scales = n["scales"]
                if not scales:
                    bounds = getattr(smap, "noise_bounds", None)
                    if bounds is None:
                        raise ConfigError("kick noise without explicit scales needs a system with kick bounds")
                    scales = tuple(bounds)
                k = MovingAverageKernel((), _fit(scales, dim, "scales"), innovation=n["innovation"], **common)
            else:
                k = box_kernel(_fit(n["lower"], dim, "lower"), _fit(n["upper"], dim, "upper"), **common)
        except ParameterError as exc:
            raise ConfigError(f"[noise] {exc}") from exc
        if k.dim != dim:
            raise ConfigError(f"noise dimension {k.dim} does not match the system's {dim}")
        return k


def _fit(values, dim: int, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size == 1:
        return np.full(dim, v[0])
    if v.size != dim:
        raise ConfigError(f"[noise] {name} has {v.size} entries; the system needs 1 or {dim}")
    return v
