"""TOML run configurations and the objects built from them."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .gdomain import GWeight, Grid2, GWeightError, make_gweight
from .goperators import GalerkinBasis, cached_basis, leray_project_g, mean_project_g
from .solver import ForcingSpec, GalerkinSystem, PhysicsParams, assemble

BUNDLED = ("decay", "benard", "relaxation", "manufactured")


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, dict[str, type | tuple]] = {
    "case": {"kind": str},
    "grid": {"n": int},
    "basis": {"m": int, "cache_dir": str},
    "physics": {"alpha": float, "nu": float, "kappa": float, "xi": list},
    "weight": {"family": str, "amplitude": float, "mean": float, "kx": int, "ky": int, "phase": float, "p": int, "q": int, "value": float},
    "initial": {"kind": str, "amplitude": float, "theta_amplitude": float, "seed": int},
    "forcing": {"velocity": str, "temperature": str, "velocity_amplitude": float, "temperature_amplitude": float, "profile": str, "frequency": float, "alpha1": float, "alpha2": float},
    "time": {"t_end": float, "n_steps": int},
    "output": {"snapshot_every": int},
    "relaxation": {"rate": float},
    "manufactured": {"power": float, "seed": int, "amplitude": float},
    "converge": {"base_steps": int},
}


@dataclass(frozen=True)
class RunConfig:
    raw: dict[str, Any] = field(repr=False)
    source: str = ""

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.raw.get(section, {}).get(key, default)

    @property
    def kind(self) -> str:
        return self.get("case", "kind", "evolve")

    @property
    def n(self) -> int:
        return int(self.get("grid", "n", 64))

    @property
    def m(self) -> int:
        return int(self.get("basis", "m", 16))

    @property
    def t_end(self) -> float:
        return float(self.get("time", "t_end", 1.0))

    @property
    def n_steps(self) -> int:
        return int(self.get("time", "n_steps", 1024))

    @property
    def seed(self) -> int:
        return int(self.get("initial", "seed", 0))

    def with_overrides(self, **sections: dict[str, Any]) -> RunConfig:
        raw = {k: dict(v) for k, v in self.raw.items()}
        for sec, vals in sections.items():
            raw.setdefault(sec, {}).update(vals)
        validate(raw, self.source)
        return RunConfig(raw, self.source)

    def dumps(self) -> str:
        return tomli_w.dumps(self.raw)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def physics(self) -> PhysicsParams:
        xi = self.get("physics", "xi", [0.0, 1.0])
        try:
            return PhysicsParams(
                nu=float(self.get("physics", "nu", 0.05)),
                kappa=float(self.get("physics", "kappa", 0.05)),
                alpha=float(self.get("physics", "alpha", 0.5)),
                xi=tuple(float(x) for x in xi),
            )
        except ValueError as exc:
            raise ConfigError(f"{self.source}: [physics] {exc}") from None

    def weight(self) -> GWeight:
        params = dict(self.raw.get("weight", {}))
        family = params.pop("family", "constant")
        try:
            return make_gweight(family, Grid2(self.n), **params)
        except (GWeightError, TypeError) as exc:
            raise ConfigError(f"{self.source}: [weight] {exc}") from None


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None and re.match(rf"{re.escape(key)}\s*=", s):
            return no
    return None


def validate(raw: dict[str, Any], source: str = "<config>", text: str = "") -> None:
    def fail(section: str, key: str | None, msg: str):
        line = _line_of(text, section, key) if text else None
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {msg}")

    for section, body in raw.items():
        if section not in _SCHEMA:
            fail(section, None, f"unknown section [{section}]")
        if not isinstance(body, dict):
            fail(section, None, f"[{section}] must be a table")
        for key, value in body.items():
            expected = _SCHEMA[section].get(key)
            if expected is None:
                fail(section, key, f"unknown key '{key}' in [{section}]")
            ok = isinstance(value, expected) and not (expected is int and isinstance(value, bool))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                ok = True
            if not ok:
                fail(section, key, f"[{section}] {key} must be {expected.__name__}, got {type(value).__name__}")

    def positive(section, key):
        v = raw.get(section, {}).get(key)
        if v is not None and not v > 0:
            fail(section, key, f"[{section}] {key} must be positive, got {v}")

    for sec, key in [("grid", "n"), ("basis", "m"), ("time", "t_end"), ("time", "n_steps"), ("physics", "nu"), ("physics", "kappa")]:
        positive(sec, key)
    alpha = raw.get("physics", {}).get("alpha")
    if alpha is not None and not 0 < alpha <= 1:
        fail("physics", "alpha", f"[physics] alpha must lie in (0, 1], got {alpha}")
    n = raw.get("grid", {}).get("n")
    if n is not None and (n < 8 or n & (n - 1)):
        fail("grid", "n", f"[grid] n must be a power of two >= 8, got {n}")
    xi = raw.get("physics", {}).get("xi")
    if xi is not None and len(xi) != 2:
        fail("physics", "xi", "[physics] xi must have two entries")
    kind = raw.get("case", {}).get("kind", "evolve")
    if kind not in ("evolve", "relaxation", "manufactured"):
        fail("case", "kind", f"[case] kind must be evolve, relaxation or manufactured, got {kind!r}")


def loads(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    validate(raw, source, text)
    return RunConfig(raw, source)


def load_config(name_or_path: str | Path) -> RunConfig:
    """Load a TOML file, or one of the bundled configs by name."""
    p = Path(name_or_path)
    if p.exists():
        return loads(p.read_text(), str(p))
    if str(name_or_path) in BUNDLED:
        text = resources.files("gbenard.configs").joinpath(f"{name_or_path}.toml").read_text()
        return loads(text, f"{name_or_path}.toml")
    raise ConfigError(f"no such config file or bundled config: {name_or_path}")


# objects built from a config


def build_basis_for(cfg: RunConfig) -> GalerkinBasis:
    return cached_basis(cfg.weight(), cfg.m, cfg.get("basis", "cache_dir"))


def initial_fields(cfg: RunConfig, g: GWeight) -> tuple[np.ndarray, np.ndarray]:
    kind = cfg.get("initial", "kind", "taylor_green")
    amp = float(cfg.get("initial", "amplitude", 1.0))
    tamp = float(cfg.get("initial", "theta_amplitude", 0.5))
    x, y = g.grid.mesh
    tp = 2 * np.pi
    if kind == "zero":
        return np.zeros((2,) + x.shape), np.zeros(x.shape)
    if kind == "taylor_green":
        u = amp * np.stack([np.sin(tp * x) * np.cos(tp * y), -np.cos(tp * x) * np.sin(tp * y)])
        th = tamp * np.cos(tp * x) * np.sin(tp * y)
    elif kind == "random":
        rng = np.random.default_rng(cfg.seed)
        u = np.zeros((2,) + x.shape)
        th = np.zeros(x.shape)
        for a in range(-2, 3):
            for b in range(-2, 3):
                if (a, b) == (0, 0):
                    continue
                ph = tp * (a * x + b * y) + rng.uniform(0, tp)
                u += amp * rng.standard_normal((2, 1, 1)) * np.cos(ph) / (a * a + b * b)
                th += tamp * rng.standard_normal() * np.cos(ph + 1.0) / (a * a + b * b)
    else:
        raise ConfigError(f"{cfg.source}: [initial] unknown kind {kind!r}")
    return leray_project_g(u, g), mean_project_g(th, g)


def forcing_for(cfg: RunConfig, basis: GalerkinBasis) -> ForcingSpec:
    f = cfg.raw.get("forcing", {})
    x, y = basis.grid.mesh
    tp = 2 * np.pi
    vel = f.get("velocity", "zero")
    tmp = f.get("temperature", "zero")
    a1 = float(f.get("alpha1", 0.5))
    a2 = float(f.get("alpha2", 0.5))
    vf = tf = None
    if vel == "shear":
        vf = float(f.get("velocity_amplitude", 1.0)) * np.stack([np.sin(tp * y), np.zeros_like(y)])
    elif vel != "zero":
        raise ConfigError(f"{cfg.source}: [forcing] unknown velocity forcing {vel!r}")
    if tmp == "heat_source":
        tf = float(f.get("temperature_amplitude", 1.0)) * np.sin(tp * y)
    elif tmp != "zero":
        raise ConfigError(f"{cfg.source}: [forcing] unknown temperature forcing {tmp!r}")
    profile = f.get("profile", "constant")
    if profile == "constant":
        prof = lambda t: 1.0  # noqa: E731
    elif profile == "sine":
        w = float(f.get("frequency", 1.0))
        prof = lambda t: float(np.sin(2 * np.pi * w * t))  # noqa: E731
    else:
        raise ConfigError(f"{cfg.source}: [forcing] unknown profile {profile!r}")
    try:
        return ForcingSpec.from_fields(basis, vf, tf, prof, a1, a2)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [forcing] {exc}") from None


def system_for(cfg: RunConfig, basis: GalerkinBasis) -> GalerkinSystem:
    return assemble(basis, cfg.physics(), forcing_for(cfg, basis))


def initial_state(cfg: RunConfig, basis: GalerkinBasis) -> tuple[np.ndarray, float]:
    """Initial coefficients and the g-norm of the part the basis misses."""
    u0, th0 = initial_fields(cfg, basis.g)
    cu, ru = basis.project_velocity(u0)
    ct, rt = basis.project_temperature(th0)
    return np.concatenate([cu, ct]), float(np.hypot(ru, rt))
