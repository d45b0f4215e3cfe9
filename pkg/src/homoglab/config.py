"""Experiment configuration: flat key = value text with bracketed sections.

Unknown sections or keys are hard errors so that a misspelled tolerance can
never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield
from fractions import Fraction

import numpy as np

from .environment import TileEnsemble
from .operators import Bellman, Linear, SymMatrix


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


_KINDS = ("mu", "mu-decay", "effective", "error-rate")

_KEYS = {
    "experiment": {
        "kind", "seed", "N", "m", "m_range", "s_list", "A", "points",
        "optimize", "budget", "tol", "balance_m", "balance_N",
        "delta_schedule", "L", "points_per_unit", "eps_list", "f", "g",
        "points_per_cell", "solver_tol",
    },
    "ensemble": {"tiles", "probs", "lambda", "k0"},
    "output": {"dir", "workers"},
}

_DEFAULTS = {
    "seed": "1", "N": "32", "m": "1", "m_range": "0 1 2", "s_list": "0.0",
    "A": "1 0 1", "points": "28", "optimize": "off", "budget": "200",
    "tol": "0.05", "balance_m": "", "balance_N": "", "solver_tol": "1e-10",
    "delta_schedule": "0.5 0.25 0.125", "L": "6", "points_per_unit": "9",
    "eps_list": "1/3 1/9 1/27", "f": "1.0", "g": "zero",
    "points_per_cell": "9",
    "probs": "", "lambda": "", "k0": "",
    "dir": "runs/out", "workers": "1",
}


def _parse_sections(text: str) -> dict:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _KEYS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KEYS[current]:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{current}]")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        sections[current][key] = value.strip()
    return sections


def _num(value: str, key: str) -> float:
    try:
        if "/" in value:
            return float(Fraction(value))
        return float(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot parse number {value!r}") from exc


def _int(value: str, key: str) -> int:
    v = _num(value, key)
    if v != int(v):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return int(v)


def _num_list(value: str, key: str) -> list:
    parts = value.replace(",", " ").split()
    if not parts:
        raise ConfigError(f"{key}: empty list")
    return [_num(p, key) for p in parts]


def _bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {value!r}")


def _parse_tile(token: str, lam: float):
    token = token.strip()
    if token.startswith("linear(") and token.endswith(")"):
        inner = token[len("linear("):-1]
        if ";" not in inner:
            raise ConfigError(f"tiles: linear needs 'coeffs;c' in {token!r}")
        coeffs, _, c = inner.rpartition(";")
        vals = [_num(v, "tiles") for v in coeffs.replace(",", " ").split()]
        if len(vals) == 1:
            a = SymMatrix(np.eye(2) * vals[0])
        elif len(vals) == 3:
            a = SymMatrix(np.array([[vals[0], vals[1]], [vals[1], vals[2]]]))
        else:
            raise ConfigError(
                f"tiles: linear takes 1 (scalar) or 3 (a11 a12 a22) coefficients, "
                f"got {len(vals)} in {token!r}")
        return Linear(a, _num(c, "tiles"), lam)
    for mode in ("min", "max"):
        if token.startswith(mode + "[") and token.endswith("]"):
            inner = token[len(mode) + 1:-1]
            children = [_parse_tile(t, lam) for t in inner.split("|")]
            return Bellman(tuple(children), mode)
    raise ConfigError(f"tiles: cannot parse tile {token!r}")


def _split_tiles(value: str) -> list:
    # whitespace-separated at depth zero (tiles may contain spaces in brackets)
    out, depth, cur = [], 0, []
    for ch in value:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch.isspace() and depth == 0:
            if cur:
                out.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur))
    return out


@dataclass
class ExperimentConfig:
    kind: str
    text: str
    raw: dict
    values: dict = dfield(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        raw = _parse_sections(text)
        exp = raw.get("experiment", {})
        if "kind" not in exp:
            raise ConfigError("experiment.kind is required")
        kind = exp["kind"]
        if kind not in _KINDS:
            raise ConfigError(f"kind: unknown experiment {kind!r}; "
                              f"expected one of {', '.join(_KINDS)}")
        if "ensemble" not in raw or "tiles" not in raw.get("ensemble", {}):
            raise ConfigError("ensemble.tiles is required")
        cfg = cls(kind=kind, text=text, raw=raw)
        cfg._resolve()
        return cfg

    def _get(self, section: str, key: str) -> str:
        v = self.raw.get(section, {}).get(key, "")
        if not v:
            v = _DEFAULTS.get(key, "")
        return v

    def _resolve(self):
        v = self.values
        v["seed"] = _int(self._get("experiment", "seed"), "seed")
        v["N"] = _int(self._get("experiment", "N"), "N")
        if v["N"] < 2:
            raise ConfigError("N: need at least 2 realizations")
        v["m"] = _int(self._get("experiment", "m"), "m")
        v["m_range"] = [int(x) for x in _num_list(self._get("experiment", "m_range"), "m_range")]
        v["s_list"] = _num_list(self._get("experiment", "s_list"), "s_list")
        a = _num_list(self._get("experiment", "A"), "A")
        if len(a) != 3:
            raise ConfigError("A: expected 3 entries a11 a12 a22")
        v["A"] = SymMatrix(np.array([[a[0], a[1]], [a[1], a[2]]]))
        v["points"] = _int(self._get("experiment", "points"), "points")
        if v["points"] < 3:
            raise ConfigError("points: need at least 3 nodes per side")
        v["optimize"] = _bool(self._get("experiment", "optimize"), "optimize")
        v["budget"] = _int(self._get("experiment", "budget"), "budget")
        v["tol"] = _num(self._get("experiment", "tol"), "tol")
        if v["tol"] <= 0:
            raise ConfigError("tol: must be positive")
        v["solver_tol"] = _num(self._get("experiment", "solver_tol"), "solver_tol")
        bm = self._get("experiment", "balance_m")
        v["balance_m"] = _int(bm, "balance_m") if bm else None
        bn = self._get("experiment", "balance_N")
        v["balance_N"] = _int(bn, "balance_N") if bn else None
        v["delta_schedule"] = _num_list(self._get("experiment", "delta_schedule"),
                                        "delta_schedule")
        if any(b >= a for a, b in zip(v["delta_schedule"], v["delta_schedule"][1:])):
            raise ConfigError("delta_schedule: must be strictly decreasing")
        v["L"] = _int(self._get("experiment", "L"), "L")
        v["points_per_unit"] = _int(self._get("experiment", "points_per_unit"),
                                    "points_per_unit")
        v["eps_list"] = _num_list(self._get("experiment", "eps_list"), "eps_list")
        v["f"] = _num(self._get("experiment", "f"), "f")
        g = self._get("experiment", "g")
        if g != "zero":
            raise ConfigError("g: only 'zero' boundary data is configurable here")
        v["g"] = g
        v["points_per_cell"] = _int(self._get("experiment", "points_per_cell"),
                                    "points_per_cell")
        if v["points_per_cell"] < 9:
            raise ConfigError("points_per_cell: need at least 9 points per cell")
        v["workers"] = _int(self._get("output", "workers"), "workers")
        v["dir"] = self._get("output", "dir")

    def ensemble(self) -> TileEnsemble:
        ens = self.raw.get("ensemble", {})
        lam_s = ens.get("lambda", "")
        lam = _num(lam_s, "lambda") if lam_s else 0.0
        tokens = _split_tiles(ens["tiles"])
        if not tokens:
            raise ConfigError("tiles: at least one tile is required")
        tiles = [_parse_tile(t, lam) for t in tokens]
        if not lam:
            lam = max(t.ellipticity for t in tiles)
        probs_s = ens.get("probs", "")
        if probs_s:
            probs = _num_list(probs_s, "probs")
            if len(probs) != len(tiles):
                raise ConfigError(
                    f"probs: {len(probs)} probabilities for {len(tiles)} tiles")
        else:
            probs = [1.0 / len(tiles)] * len(tiles)
        if abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
            raise ConfigError(
                f"probs: must be nonnegative and sum to 1, got {probs}")
        k0_s = ens.get("k0", "")
        k0 = _num(k0_s, "k0") if k0_s else max(abs(t.f0()) for t in tiles)
        try:
            return TileEnsemble(tuple(tiles), tuple(probs), lam, k0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
