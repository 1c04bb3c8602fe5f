"""Experiment configuration: JSON validated against ``schema.json``.

Geometry gates (region containment, probe cone, probe resolution) run when
the configuration is prepared, so an invalid experiment is refused before
any solve.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import jsonschema
import numpy as np

from . import fem
from .errors import GateError
from .families import make_family
from .mesh import Patch, build_structured_mesh, eval_cutoff_chi, make_probe_spec, tag_boundary_regions
from .probes import check_resolution

DEFAULT_MAX_GAMMA0_DOFS = 400


class ConfigError(ValueError):
    """Malformed configuration (schema violation or inconsistent values)."""


def load_schema():
    return json.loads(resources.files("qdtn").joinpath("schema.json").read_text())


def validate(raw):
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return raw


def config_hash(raw):
    """SHA-256 of the canonical JSON form, ignoring ``output_dir``."""
    body = {k: v for k, v in raw.items() if k != "output_dir"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def boundary_function(spec, dimension):
    """Callable on points ``(m, n)`` from a ``boundary_data`` entry."""
    kind = spec["kind"]
    if kind == "constant":
        value = float(spec.get("value", 0.0))
        return lambda x: np.full(len(x), value)
    if kind == "affine":
        grad = np.asarray(spec.get("gradient", [1.0] + [0.0] * (dimension - 1)), dtype=float)
        if grad.shape != (dimension,):
            raise ConfigError(f"affine gradient needs {dimension} entries")
        off = float(spec.get("offset", 0.0))
        return lambda x: x @ grad + off
    freq = np.asarray(spec.get("frequency", [1.0] * dimension), dtype=float)
    if freq.shape != (dimension,):
        raise ConfigError(f"sine frequency needs {dimension} entries")
    amp = float(spec.get("amplitude", 1.0))
    off = float(spec.get("offset", 0.0))
    return lambda x: amp * np.sin(x @ freq) + off


def matrix_field(spec, dimension):
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return fem.identity_field(dimension)
    if kind == "constant":
        mat = np.asarray(spec.get("matrix"), dtype=float)
        if mat.shape != (dimension, dimension):
            raise ConfigError(f"A.matrix must be {dimension}x{dimension}")
        return fem.constant_field(mat)
    return fem.diagonal_variable_field(dimension, float(spec.get("amplitude", 0.25)))


@dataclass
class ExperimentConfig:
    raw: dict
    source: str = "<dict>"
    overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, **overrides):
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw, str(path), **overrides)

    @classmethod
    def from_dict(cls, raw, source="<dict>", **overrides):
        raw = dict(raw)
        for key, val in overrides.items():
            if val is not None:
                raw[key] = val
        validate(raw)
        return cls(raw, source, overrides)

    @property
    def hash(self):
        return config_hash(self.raw)

    @property
    def dimension(self):
        return 2 if self.raw["mesh"]["domain"] == "unit_square" else 3

    @property
    def threads(self):
        return int(self.raw.get("threads", 1))

    @property
    def seed(self):
        return int(self.raw.get("seed", 0))

    @property
    def output_dir(self):
        return self.raw.get("output_dir", "qdtn_out")

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def solver(self):
        s = {"picard_tol": 1e-12, "damping": 0.7, "max_iter": 200,
             "max_gamma0_dofs": DEFAULT_MAX_GAMMA0_DOFS}
        s.update(self.raw.get("solver", {}))
        return s

    @cached_property
    def mesh(self):
        m = build_structured_mesh(self.raw["mesh"]["domain"], self.raw["mesh"]["resolution"])
        reg = self.raw.get("regions")
        if reg is None:
            return m
        if len(reg["bounds"]) != self.dimension - 1:
            raise ConfigError(f"regions.bounds needs {self.dimension - 1} intervals")
        patch = Patch(int(reg["axis"]), float(reg["side"]), tuple(tuple(b) for b in reg["bounds"]))
        return tag_boundary_regions(m, patch, float(reg["margin"]))

    @cached_property
    def chi(self):
        reg = self.raw.get("regions")
        if reg is None:
            return None
        return eval_cutoff_chi(self.mesh, float(reg.get("chi_width", reg["margin"]))).chi_values

    @cached_property
    def A(self):
        return matrix_field(self.raw.get("A", {"kind": "identity"}), self.dimension)

    @property
    def family(self):
        if "family" not in self.raw:
            raise ConfigError("this command needs a 'family' entry")
        return make_family(self.raw["family"])

    @property
    def families(self):
        if "families" in self.raw:
            return [make_family(f) for f in self.raw["families"]]
        return [self.family]

    @property
    def pairs(self):
        if "pairs" not in self.raw:
            raise ConfigError("this command needs a 'pairs' entry")
        return [(make_family(a), make_family(b)) for a, b in self.raw["pairs"]]

    def boundary_trace(self):
        spec = self.raw.get("boundary_data")
        if spec is None:
            raise ConfigError("this command needs a 'boundary_data' entry")
        return fem.BoundaryTrace.from_function(self.mesh, boundary_function(spec, self.dimension))

    @property
    def deltas(self):
        return [float(d) for d in self.raw["probe"]["deltas"]]

    @cached_property
    def probe_spec(self):
        p = self.raw.get("probe")
        if p is None:
            raise ConfigError("this command needs a 'probe' entry")
        if self.mesh.regions is None:
            raise ConfigError("a probe needs tagged 'regions'")
        deltas = self.deltas
        for d in deltas:
            check_resolution(self.mesh, d)
        return make_probe_spec(self.mesh, p["x0"], p["xi"], p["r0"], min(deltas),
                               cone_c=p.get("cone_c", 1.0),
                               delta_max=p.get("delta_max", max(max(deltas), p["r0"])))

    def prepare(self):
        """Run every gate that applies to this configuration."""
        try:
            return self._prepare()
        except GateError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def _prepare(self):
        mesh = self.mesh
        if mesh.regions is not None:
            _ = self.chi
            cap = self.solver["max_gamma0_dofs"]
            if len(mesh.gamma0_dofs) > cap:
                raise GateError("gamma0-dof-cap", f"{len(mesh.gamma0_dofs)} GAMMA0 dofs exceed the cap {cap}")
        if "probe" in self.raw:
            _ = self.probe_spec
        for key in ("family", "families", "pairs"):
            if key in self.raw:
                _ = self.families if key != "pairs" else self.pairs
        return self
