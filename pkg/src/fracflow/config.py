"""Run configuration: a flat, diffable key-value format with sections.

Grammar (one statement per line)::

    # comment (also ';')
    [section]
    key = value

Sections and keys are fixed (see ``SCHEMA``); unknown names are errors
with their line number.  Scalar values are numbers with an optional unit
token (``0.1 darcy``, ``3 bar``, ``6 h``; bare numbers are SI).  Booleans
accept on/off, true/false, yes/no.  Composite values:

* ``fractures`` -- semicolon-separated polylines, each a flat list of
  x y coordinates (``5 0 5 20; 0 10 10 10``), or ``none``;
* ``dt_caps`` -- comma-separated step-size caps ``<dt> until <t>`` with
  the final segment's ``until`` optional (extends to the end of time);
* ``profile_times`` -- comma-separated times.

``parse_config``/``load_config`` resolve every key to SI units, validate
physical ranges (all violations reported together), and return a
``RunConfig``.  ``RunConfig.echo()`` renders the resolved state back in
the same grammar, byte-deterministically, so a run can persist exactly
what it used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .units import UnitError, parse_quantity

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Malformed or physically invalid configuration."""


# kind tokens: quantity (unit-aware float), float, int, bool, str|none,
# polylines, dt_caps, times
SCHEMA = {
    "mesh": {
        "file": ("path", None),
        "lx": ("quantity", 10.0),
        "ly": ("quantity", 20.0),
        "nx": ("int", 20),
        "ny": ("int", 40),
        "fractures": ("polylines", (((5.0, 0.0), (5.0, 20.0)),)),
        "fracture_width": ("quantity", 0.01),
    },
    "physics": {
        "perm_matrix": ("quantity", 0.1 * parse_quantity("1 darcy")),
        "perm_fracture": ("quantity", 100.0 * parse_quantity("1 darcy")),
        "porosity_matrix": ("float", 0.2),
        "porosity_fracture": ("float", 0.4),
        "a_matrix": ("quantity", parse_quantity("1 bar")),
        "a_fracture": ("quantity", 0.02 * parse_quantity("1 bar")),
        "rho_oil": ("float", 700.0),
        "rho_water": ("float", 1000.0),
        "mu_oil": ("float", 0.005),
        "mu_water": ("float", 0.001),
        "interface_porosity": ("float", 0.2),
        "theta": ("float", 0.5),
        "epsilon": ("float", 0.1),
        "gravity": ("bool", True),
        "mobility_floor": ("float", 0.0),
    },
    "boundary": {
        "bottom_water": ("quantity", 3.0 * parse_quantity("1 bar")),
        "bottom_capillary": ("quantity", 0.1 * parse_quantity("1 bar")),
        "top_water": ("quantity", parse_quantity("1 bar")),
        "top_capillary": ("quantity", 0.0),
    },
    "time": {
        "t_end": ("quantity", parse_quantity("1 d")),
        "dt_init": ("quantity", parse_quantity("0.01 d") / 16.0),
        "dt_caps": ("dt_caps", ((0.5 * parse_quantity("1 d"),
                                 parse_quantity("0.01 d")),
                                (math.inf, parse_quantity("0.19 d")))),
        "growth": ("float", 2.0),
        "chop": ("float", 4.0),
    },
    "newton": {
        "tol": ("float", 1.0e-6),
        "max_iters": ("int", 35),
    },
    "output": {
        "directory": ("str", "output"),
        "snapshot_interval": ("quantity", parse_quantity("1 h")),
        "profile_times": ("times", (6.0 * parse_quantity("1 h"),)),
        "front_threshold": ("float", 0.5),
        "save_trajectory": ("bool", False),
        "diagnostics": ("bool", False),
    },
}

# config attribute name per (section, key) where it differs from the key
_ATTR_OVERRIDES = {
    ("mesh", "file"): "mesh_file",
    ("newton", "tol"): "newton_tol",
    ("newton", "max_iters"): "newton_max_iters",
    ("output", "directory"): "output_dir",
}


def _attr_name(section: str, key: str) -> str:
    return _ATTR_OVERRIDES.get((section, key), key)


@dataclass(frozen=True)
class RunConfig:
    """Fully-resolved run settings, all scalars in SI units."""

    mesh_file: str | None
    lx: float
    ly: float
    nx: int
    ny: int
    fractures: tuple[tuple[tuple[float, float], ...], ...]
    fracture_width: float
    perm_matrix: float
    perm_fracture: float
    porosity_matrix: float
    porosity_fracture: float
    a_matrix: float
    a_fracture: float
    rho_oil: float
    rho_water: float
    mu_oil: float
    mu_water: float
    interface_porosity: float
    theta: float
    epsilon: float
    gravity: bool
    mobility_floor: float
    bottom_water: float
    bottom_capillary: float
    top_water: float
    top_capillary: float
    t_end: float
    dt_init: float
    dt_caps: tuple[tuple[float, float], ...]
    growth: float
    chop: float
    newton_tol: float
    newton_max_iters: int
    output_dir: str = "output"
    snapshot_interval: float = 3600.0
    profile_times: tuple[float, ...] = ()
    front_threshold: float = 0.5
    save_trajectory: bool = False
    diagnostics: bool = False
    warnings: tuple[str, ...] = ()

    def echo(self) -> str:
        """Render the resolved configuration in the input grammar.

        The rendering is canonical (fixed section and key order, repr
        floats in SI), so identical configurations echo byte-identically
        and the echo re-parses to an equal RunConfig.
        """
        lines = ["# resolved configuration (SI units)"]
        for w in self.warnings:
            lines.append(f"# warning: {w}")
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (kind, _) in keys.items():
                value = getattr(self, _attr_name(section, key))
                lines.append(f"{key} = {_render(kind, value)}")
        return "\n".join(lines) + "\n"


def _render(kind: str, value) -> str:
    if kind in ("quantity", "float"):
        return repr(float(value))
    if kind == "int":
        return str(int(value))
    if kind == "bool":
        return "on" if value else "off"
    if kind == "path":
        return "none" if value is None else str(value)
    if kind == "str":
        return str(value)
    if kind == "polylines":
        if not value:
            return "none"
        return "; ".join(" ".join(repr(float(c)) for pt in poly for c in pt)
                         for poly in value)
    if kind == "dt_caps":
        parts = []
        for until, cap in value:
            if math.isinf(until):
                parts.append(repr(float(cap)))
            else:
                parts.append(f"{float(cap)!r} until {float(until)!r}")
        return ", ".join(parts)
    if kind == "times":
        return ", ".join(repr(float(t)) for t in value)
    raise AssertionError(kind)


def _parse_scalar(kind: str, raw: str, where: str):
    if kind in ("quantity", "float"):
        try:
            value = parse_quantity(raw) if kind == "quantity" else float(raw)
        except (UnitError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
        return float(value)
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") \
                from None
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("on", "true", "yes", "1"):
            return True
        if lowered in ("off", "false", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if kind == "path":
        return None if raw.lower() in ("", "none") else raw
    if kind == "str":
        return raw
    if kind == "polylines":
        if raw.lower() == "none":
            return ()
        polys = []
        for chunk in raw.split(";"):
            coords = chunk.split()
            if len(coords) < 4 or len(coords) % 2:
                raise ConfigError(
                    f"{where}: each polyline needs an even number (>= 4) of "
                    f"coordinates, got {chunk.strip()!r}")
            try:
                vals = [float(c) for c in coords]
            except ValueError:
                raise ConfigError(f"{where}: bad coordinate in "
                                  f"{chunk.strip()!r}") from None
            polys.append(tuple((vals[i], vals[i + 1])
                               for i in range(0, len(vals), 2)))
        return tuple(polys)
    if kind == "dt_caps":
        segments = []
        chunks = raw.split(",")
        for i, chunk in enumerate(chunks):
            parts = [p.strip() for p in chunk.split("until")]
            if len(parts) == 1:
                if i != len(chunks) - 1:
                    raise ConfigError(
                        f"{where}: only the final step-size cap may omit "
                        f"'until <time>'")
                until = math.inf
            elif len(parts) == 2:
                until = _parse_scalar("quantity", parts[1], where)
            else:
                raise ConfigError(f"{where}: malformed cap segment "
                                  f"{chunk.strip()!r}")
            cap = _parse_scalar("quantity", parts[0], where)
            segments.append((until, cap))
        for (u0, _), (u1, _) in zip(segments, segments[1:]):
            if not u1 > u0:
                raise ConfigError(f"{where}: cap switch times must increase")
        return tuple(segments)
    if kind == "times":
        return tuple(_parse_scalar("quantity", part.strip(), where)
                     for part in raw.split(","))
    raise AssertionError(kind)


def _validate(values: dict) -> tuple[list[str], list[str]]:
    """Physical-range checks; returns (violations, warnings)."""
    bad: list[str] = []
    warn: list[str] = []

    def positive(*keys):
        for key in keys:
            if not values[key] > 0.0:
                bad.append(f"{key} must be positive, got {values[key]!r}")

    positive("lx", "ly", "fracture_width", "perm_matrix", "perm_fracture",
             "a_matrix", "a_fracture", "rho_oil", "rho_water", "mu_oil",
             "mu_water", "t_end", "dt_init", "snapshot_interval")
    for key in ("porosity_matrix", "porosity_fracture", "interface_porosity"):
        if not 0.0 < values[key] <= 1.0:
            bad.append(f"{key} must lie in (0, 1], got {values[key]!r}")
    if not 0.0 <= values["theta"] <= 1.0:
        bad.append(f"theta must lie in [0, 1], got {values['theta']!r}")
    if not 0.0 <= values["epsilon"] <= 1.0:
        bad.append(f"epsilon must lie in [0, 1], got {values['epsilon']!r}")
    elif values["epsilon"] == 0.0:
        warn.append("epsilon = 0 removes the interface storage: expect a "
                    "singular Jacobian once a fracture fills")
    if values["mobility_floor"] < 0.0:
        bad.append("mobility_floor must be nonnegative")
    if values["nx"] < 1 or values["ny"] < 1:
        bad.append(f"mesh resolution must be >= 1, got "
                   f"nx={values['nx']}, ny={values['ny']}")
    for key in ("growth", "chop"):
        if not values[key] > 1.0:
            bad.append(f"{key} must exceed 1, got {values[key]!r}")
    if not values["newton_tol"] > 0.0:
        bad.append(f"tol must be positive, got {values['newton_tol']!r}")
    if values["newton_max_iters"] < 1:
        bad.append("max_iters must be >= 1")
    for until, cap in values["dt_caps"]:
        if not cap > 0.0:
            bad.append(f"dt_caps entries must be positive, got {cap!r}")
    if not 0.0 < values["front_threshold"] < 1.0:
        bad.append("front_threshold must lie in (0, 1)")
    return bad, warn


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    """Parse configuration text; see the module docstring for the grammar."""
    values = {_attr_name(section, key): default
              for section, keys in SCHEMA.items()
              for key, (_, default) in keys.items()}
    seen: dict[str, int] = {}
    section = None
    errors: list[str] = []

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        where = f"{origin}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                errors.append(f"{where}: unterminated section header {line!r}")
                continue
            name = line[1:-1].strip()
            if name not in SCHEMA:
                errors.append(f"{where}: unknown section {name!r} (known: "
                              + ", ".join(SCHEMA) + ")")
                section = None
            else:
                section = name
            continue
        if "=" not in line:
            errors.append(f"{where}: expected 'key = value', got {line!r}")
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if section is None:
            errors.append(f"{where}: key {key!r} appears outside any section")
            continue
        if key not in SCHEMA[section]:
            errors.append(f"{where}: unknown key {key!r} in [{section}]")
            continue
        attr = _attr_name(section, key)
        if attr in seen:
            errors.append(f"{where}: duplicate key {key!r} "
                          f"(first set on line {seen[attr]})")
            continue
        seen[attr] = lineno
        kind = SCHEMA[section][key][0]
        try:
            values[attr] = _parse_scalar(kind, raw, f"{where}: {key}")
        except ConfigError as exc:
            errors.append(str(exc))

    if errors:
        raise ConfigError("\n".join(errors))

    violations, warns = _validate(values)
    if violations:
        raise ConfigError(
            f"{origin}: invalid configuration:\n  " + "\n  ".join(violations))
    values["warnings"] = tuple(warns)
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in values.items() if k in known})


def load_config(path) -> RunConfig:
    """Read and parse a configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, origin=str(path))
