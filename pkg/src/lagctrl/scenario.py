"""Scenario files: JSON descriptions of a controllability problem.

A scenario fixes the domain and control patch, the initial and target
surfaces, the isotopy joining them, the initial velocity and every
numerical parameter.  :meth:`Scenario.resolved` fills in defaults so the
echo written next to the results lists every value actually used.
"""

import copy
import json
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .control import SynthesisConfig, build_composite_isotopy, build_translation_isotopy
from .euler import CurlBumpField, EulerConfig, Lattice, LatticeField
from .exceptions import ParameterError, ValidationError
from .fields import ZeroField, divergence
from .geometry.domain import DomainSpec
from .geometry.mesh import enclosed_volume, mesh_sphere
from .geometry.samples import SEALED

SHIPPED = Path(__file__).parent / "scenarios"

VOLUME_TOLERANCE = 0.01

DEFAULTS = {
    "name": "unnamed",
    "seed": 0,
    "domain": {"shape": "ball", "center": [0.0, 0.0, 0.0], "radius": 2.0, "semi_axes": [1.0, 1.0, 1.0],
               "modes": [], "boundary_level": 4},
    "control_patch": {"cap_axis": [0.0, 0.0, 1.0], "cap_cos": 0.8},
    "gamma0": {"center": [-0.8, 0.0, 0.0], "radius": 0.5, "mesh_level": 3, "scales": [1.0, 1.0, 1.0]},
    "gamma1": {"center": [0.8, 0.0, 0.0], "radius": 0.5, "mesh_level": 3, "scales": [1.0, 1.0, 1.0]},
    "isotopy": {"kind": "translation", "tube_radius": 0.35, "waypoints": []},
    "u0": {"kind": "zero", "center": [0.0, -0.9, 0.0], "radius": 0.5, "amplitude": None,
           "amplitude_rel": None, "axis": [0.0, 0.0, 1.0], "path": None, "check_tolerance": 1e-6},
    "synthesis": {},
    "euler": {},
    "picard": {"nu": 1.0, "tol": 1e-4, "max_iter": 20, "damping": 1.0, "c_bar": None, "rho": None},
    "simulation": {"rk4_steps": 200, "record_every": 20},
    "diagnostics": {"residual_probes": 24, "residual_times": [0.3, 0.5, 0.7], "residual_dt": 2e-3,
                    "residual_h": 2e-2, "probe_clearance": 0.3},
    "acceptance": {"final_hausdorff_max": None},
    "sweep": {"parameter": None, "values": []},
    "output": {"lattice_spacing": 0.25},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """JSON literal when it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` to a nested dict in place and return it."""
    if "=" not in assignment:
        raise ParameterError(f"override {assignment!r} must look like key.path=value")
    key, value = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ParameterError(f"empty override key in {assignment!r}")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ParameterError(f"override path {key!r} crosses a non-object value")
    node[parts[-1]] = parse_value(value.strip())
    return data


def _check_keys(section, data, allowed):
    extra = set(data) - set(allowed)
    if extra:
        raise ValidationError(f"unknown keys in '{section}': {sorted(extra)}")


class Scenario:
    """Validated scenario; ``data`` holds the fully resolved configuration."""

    def __init__(self, data: dict, path=None):
        self.path = None if path is None else Path(path)
        raw = dict(data)
        _check_keys("scenario", raw, DEFAULTS)
        self.data = _merge(DEFAULTS, raw)
        for sec in ("domain", "control_patch", "gamma0", "gamma1", "isotopy", "u0", "picard",
                    "simulation", "diagnostics", "acceptance", "sweep", "output"):
            _check_keys(sec, self.data[sec], DEFAULTS[sec])
        _check_keys("synthesis", self.data["synthesis"], [f.name for f in dc_fields(SynthesisConfig)])
        _check_keys("euler", self.data["euler"], [f.name for f in dc_fields(EulerConfig)])
        self.validate()

    # -- loading -------------------------------------------------------------------

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        if not path.exists() and (SHIPPED / path.name).exists():
            path = SHIPPED / path.name
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ValidationError(f"scenario file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scenario file {path} is not valid JSON: {exc}") from None
        for o in overrides:
            apply_override(data, o)
        return cls(data, path)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def with_overrides(self, overrides) -> "Scenario":
        data = self.to_dict()
        for o in overrides:
            apply_override(data, o)
        return Scenario(data, self.path)

    @property
    def name(self) -> str:
        return str(self.data["name"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    # -- builders -------------------------------------------------------------------

    def domain(self) -> DomainSpec:
        d, cp = self.data["domain"], self.data["control_patch"]
        return DomainSpec(shape=d["shape"], center=tuple(d["center"]), radius=float(d["radius"]),
                          semi_axes=tuple(d["semi_axes"]), modes=tuple(tuple(m) for m in d["modes"]),
                          cap_axis=tuple(cp["cap_axis"]), cap_cos=float(cp["cap_cos"]),
                          boundary_level=int(d["boundary_level"]))

    def _surface(self, key):
        g = self.data[key]
        s = mesh_sphere(tuple(g["center"]), float(g["radius"]), int(g["mesh_level"]))
        scales = np.asarray(g["scales"], float)
        if np.any(scales != 1.0):
            c = np.asarray(g["center"], float)
            s = s.with_vertices(c + (s.vertices - c) * scales)
        return s

    def gamma0(self):
        return self._surface("gamma0")

    def gamma1(self):
        return self._surface("gamma1")

    def isotopy(self, domain=None, gamma0=None):
        domain = domain or self.domain()
        gamma0 = gamma0 if gamma0 is not None else self.gamma0()
        iso = self.data["isotopy"]
        g0, g1 = self.data["gamma0"], self.data["gamma1"]
        disp = np.asarray(g1["center"], float) - np.asarray(g0["center"], float)
        if iso["kind"] == "translation":
            return build_translation_isotopy(gamma0, disp, domain, float(iso["tube_radius"]))
        if iso["kind"] == "composite":
            wps = [(float(w["time"]), w["displacement"], w.get("scales", [1.0, 1.0, 1.0]))
                   for w in iso["waypoints"]]
            return build_composite_isotopy(gamma0, wps, domain, float(iso["tube_radius"]))
        raise ValidationError(f"unknown isotopy kind {iso['kind']!r}")

    def synthesis_config(self) -> SynthesisConfig:
        return SynthesisConfig(**self.data["synthesis"])

    def euler_config(self) -> EulerConfig:
        return EulerConfig(**self.data["euler"])

    def u0(self, ybar_sup=None):
        """Initial velocity; ``amplitude_rel`` needs ``ybar_sup`` (sup of the reference flow)."""
        u = self.data["u0"]
        kind = u["kind"]
        if kind == "zero":
            return ZeroField()
        if kind == "curl_bump":
            if u["amplitude"] is not None:
                peak = float(u["amplitude"])
            elif u["amplitude_rel"] is not None:
                if ybar_sup is None:
                    raise ParameterError("a relative u0 amplitude needs the reference flow sup norm")
                peak = float(u["amplitude_rel"]) * float(ybar_sup)
            else:
                raise ValidationError("curl_bump u0 needs 'amplitude' or 'amplitude_rel'")
            return CurlBumpField.with_peak(u["center"], float(u["radius"]), peak, u["axis"])
        if kind == "lattice":
            return read_lattice_csv(self._resolve_path(u["path"]))
        raise ValidationError(f"unknown u0 kind {kind!r}")

    def _resolve_path(self, p):
        if p is None:
            raise ValidationError("lattice u0 needs a 'path'")
        p = Path(p)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    # -- validation ----------------------------------------------------------------------

    def validate(self):
        d = self.data
        try:
            domain = self.domain()
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid domain: {exc}") from None
        if not d["control_patch"]["cap_cos"] < 1.0:
            raise ValidationError("the control patch Gamma is empty (cap_cos must be < 1)")
        positive = [("picard.nu", d["picard"]["nu"]), ("picard.tol", d["picard"]["tol"]),
                    ("picard.max_iter", d["picard"]["max_iter"]),
                    ("simulation.rk4_steps", d["simulation"]["rk4_steps"]),
                    ("isotopy.tube_radius", d["isotopy"]["tube_radius"]),
                    ("diagnostics.residual_dt", d["diagnostics"]["residual_dt"]),
                    ("diagnostics.residual_h", d["diagnostics"]["residual_h"])]
        for k, v in d["synthesis"].items():
            if k.endswith("tol") and v is not None:
                positive.append((f"synthesis.{k}", v))
        for k in ("compat_tol", "marker_spacing"):
            if k in d["euler"]:
                positive.append((f"euler.{k}", d["euler"][k]))
        for name, v in positive:
            if not (isinstance(v, (int, float)) and v > 0):
                raise ValidationError(f"{name} must be positive, got {v!r}")
        for key in ("gamma0", "gamma1"):
            g = d[key]
            if not float(g["radius"]) > 0:
                raise ValidationError(f"{key}.radius must be positive")
            if np.any(np.asarray(g["scales"], float) <= 0):
                raise ValidationError(f"{key}.scales must be positive")
        g0, g1 = self.gamma0(), self.gamma1()
        v0, v1 = enclosed_volume(g0), enclosed_volume(g1)
        rel = abs(v1 - v0) / v0
        if rel > VOLUME_TOLERANCE:
            raise ValidationError(
                f"volume condition violated: gamma0 encloses {v0:.6g} and gamma1 encloses {v1:.6g} "
                f"({100 * rel:.2f}% apart, limit {100 * VOLUME_TOLERANCE:g}%); the initial and target "
                "surfaces must enclose the same volume")
        for key, g in (("gamma0", g0), ("gamma1", g1)):
            if np.any(domain.signed_distance(g.vertices) >= 0):
                raise ValidationError(f"{key} is not contained in the domain")
        if d["isotopy"]["kind"] == "composite":
            self._check_composite(g1)

    def _check_composite(self, g1):
        wps = self.data["isotopy"]["waypoints"]
        if not wps:
            raise ValidationError("composite isotopy needs waypoints")
        last = wps[-1]
        c0 = np.asarray(self.data["gamma0"]["center"], float)
        c1 = np.asarray(self.data["gamma1"]["center"], float)
        if np.linalg.norm(c0 + np.asarray(last["displacement"], float) - c1) > 1e-9 * (1 + np.linalg.norm(c1)):
            raise ValidationError("the last waypoint displacement must carry gamma0's center to gamma1's")
        s0 = np.asarray(self.data["gamma0"]["scales"], float)
        s1 = np.asarray(self.data["gamma1"]["scales"], float)
        if np.any(np.abs(s0 * np.asarray(last.get("scales", [1, 1, 1]), float) - s1) > 1e-9):
            raise ValidationError("the last waypoint scales must carry gamma0's shape to gamma1's")

    def check_initial_velocity(self, u0, domain=None, tol=None) -> dict:
        """Solenoidality and sealed-boundary tangency of ``u0`` at samples.

        Returns the measured ratios; raises ``ValidationError`` above ``tol``.
        """
        domain = domain or self.domain()
        tol = float(self.data["u0"]["check_tolerance"] if tol is None else tol)
        if isinstance(u0, ZeroField):
            return {"divergence_ratio": 0.0, "normal_ratio": 0.0}
        pts = domain.interior_lattice(0.1 * domain.feature_size(), clearance=1e-3)
        vals = np.linalg.norm(u0(0.0, pts), axis=1)
        scale = float(vals.max())
        if scale == 0.0:
            return {"divergence_ratio": 0.0, "normal_ratio": 0.0}
        h = 1e-4 * domain.feature_size()
        div = np.abs(divergence(u0, 0.0, pts, h))
        grad_scale = scale / (0.1 * domain.feature_size())
        b = domain.boundary_samples()
        sealed = b.mask(SEALED)
        un = np.abs(np.einsum("ij,ij->i", u0(0.0, b.points[sealed]), b.normals[sealed]))
        out = {"divergence_ratio": float(div.max() / grad_scale), "normal_ratio": float(un.max() / scale)}
        if out["divergence_ratio"] > tol:
            raise ValidationError(f"u0 is not solenoidal: max |div u0| ratio {out['divergence_ratio']:.3e} > {tol:g}")
        if out["normal_ratio"] > tol:
            raise ValidationError(
                f"u0 is not tangent to the sealed boundary: max |u0 . n| ratio {out['normal_ratio']:.3e} > {tol:g}")
        return out


def load_scenario(path, overrides=()) -> Scenario:
    return Scenario.load(path, overrides)


def shipped_scenarios():
    return sorted(p.name for p in SHIPPED.glob("*.json"))


def read_lattice_csv(path) -> LatticeField:
    """Regular-lattice velocity samples from CSV columns x,y,z,ux,uy,uz."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[1] != 6:
        raise ValidationError(f"{path}: expected columns x,y,z,ux,uy,uz")
    axes = [np.unique(arr[:, i]) for i in range(3)]
    shape = tuple(len(a) for a in axes)
    if np.prod(shape) != len(arr):
        raise ValidationError(f"{path}: samples do not form a full regular lattice")
    steps = [np.diff(a) for a in axes if len(a) > 1]
    h = float(steps[0][0]) if steps else 1.0
    if any(np.ptp(s) > 1e-9 * h or abs(s[0] - h) > 1e-9 * h for s in steps):
        raise ValidationError(f"{path}: lattice must be uniform with equal spacing on all axes")
    order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
    vals = arr[order, 3:].reshape(shape + (3,))
    return LatticeField(Lattice(np.array([a[0] for a in axes]), h, shape), vals)


def write_lattice_csv(path, points, values):
    with open(path, "w") as fh:
        fh.write("x,y,z,ux,uy,uz\n")
        for p, v in zip(points, values):
            fh.write(",".join(repr(float(c)) for c in (*p, *v)) + "\n")
