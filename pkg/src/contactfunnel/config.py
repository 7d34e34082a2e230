"""Toolkit configuration: one JSON file with a section per pipeline stage.

Loading validates the document against a JSON schema and reports problems
with the line they occur on.  Artifacts carry a sha256 hash of the sections
that produced them so later stages can refuse stale inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from .controller import ControllerConfig
from .dynamics import PlantParams
from .funnel import FunnelOptions
from .harness import DisturbanceSpec
from .trajopt import TrajOptSpec, default_initial_state


class ConfigError(ValueError):
    def __init__(self, message, line=None, source=None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC8 = {"type": "array", "items": _NUM, "minItems": 8, "maxItems": 8}
_POS8 = {"type": "array", "items": _POS, "minItems": 8, "maxItems": 8}

_CONDITION = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "magnitude", "trigger"],
    "properties": {
        "kind": {"enum": ["ForcedRotation", "GripperOpen"]},
        "magnitude": _POS,
        "trigger": {"type": "integer", "minimum": 0},
        "ramp": {"type": "integer", "minimum": 1},
        "hold": {"type": "integer", "minimum": 0},
        "magnitude_jitter": {"type": "number", "minimum": 0, "maximum": 1},
        "trigger_jitter": {"type": "integer", "minimum": 0},
        "name": {"type": "string"},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["plant", "trajopt"],
    "properties": {
        "plant": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": _POS, "length": _POS, "mass": _POS,
                "inertia": {"anyOf": [_POS, {"type": "null"}]},
                "mu_ground": _POS, "mu_finger": _POS, "gravity": _POS, "dt": _POS,
                "contact_tol": _POS, "eps_comp": _POS, "finger_offset": _NUM,
                "bounds": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"force_max": _POS, "phid_max": _POS, "wd_max": _POS},
                },
            },
        },
        "trajopt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "phi0_deg": _NUM,
                "initial_state": _VEC8,
                "goal_deg": _NUM,
                "tol_goal_deg": _POS,
                "goal_margin_deg": {"type": "number", "minimum": 0},
                "angle_max_deg": _NUM,
                "thetad_max": _POS,
                "cone_margin": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "range_margin": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tol_dyn": _POS,
            },
        },
        "funnel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scale": _POS8,
                "shrink": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "dominance_weights": _POS8,
                "dominance_margin": _POS8,
                "offdiag_weight": {"type": "number", "minimum": 0},
                "sigma_min": _POS,
                "containment_tol": _POS,
                "verify_samples": {"type": "integer", "minimum": 1},
                "verify_seed": {"type": "integer", "minimum": 0},
            },
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": ["FunnelTrack", "PointTrack"]},
                "weights": _POS8,
                "alpha": {"type": "array", "items": {"type": "number", "minimum": 0},
                          "minItems": 8, "maxItems": 8},
                "c": _POS,
                "tol_goal_deg": _POS,
                "fallback_gain": _POS,
            },
        },
        "harness": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trials": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "max_steps": {"type": "integer", "minimum": 1},
                "conditions": {"type": "array", "items": _CONDITION, "minItems": 1},
            },
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "string", "minLength": 1}
                           for k in ("trajectory", "pwa", "policy", "schedule", "trace", "report")},
        },
    },
}

DEFAULT_PATHS = {
    "trajectory": "artifacts/trajectory.json",
    "pwa": "artifacts/pwa.json",
    "policy": "artifacts/policy.json",
    "schedule": "artifacts/schedule.json",
    "trace": "artifacts/trace.csv",
    "report": "artifacts/report.csv",
}


def canonical_hash(obj) -> str:
    """sha256 of the canonical JSON text (sorted keys, repr floats)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


# --- line lookup for schema errors -----------------------------------------

def _skip_ws(text, pos):
    while pos < len(text) and text[pos] in " \t\r\n":
        pos += 1
    return pos


def locate(text: str, path) -> int:
    """Character offset of the value at ``path`` (keys and indices) in a JSON
    text, or of the deepest enclosing value that exists."""
    dec = json.JSONDecoder()
    pos = _skip_ws(text, 0)
    for key in path:
        if pos >= len(text):
            break
        if text[pos] == "{" and isinstance(key, str):
            cur = _skip_ws(text, pos + 1)
            found = None
            while cur < len(text) and text[cur] != "}":
                name, cur = dec.raw_decode(text, cur)
                cur = _skip_ws(text, cur)
                cur = _skip_ws(text, cur + 1)  # the colon
                if name == key:
                    found = cur
                    break
                _, cur = dec.raw_decode(text, cur)
                cur = _skip_ws(text, cur)
                if text[cur] == ",":
                    cur = _skip_ws(text, cur + 1)
            if found is None:
                return pos
            pos = found
        elif text[pos] == "[" and isinstance(key, int):
            cur = _skip_ws(text, pos + 1)
            for _ in range(key):
                _, cur = dec.raw_decode(text, cur)
                cur = _skip_ws(text, cur)
                if text[cur] != ",":
                    return pos
                cur = _skip_ws(text, cur + 1)
            pos = cur
        else:
            break
    return pos


def _line_of(text, pos):
    return text.count("\n", 0, pos) + 1


# --- the config object -----------------------------------------------------

@dataclass
class ToolkitConfig:
    plant: PlantParams
    trajopt: TrajOptSpec
    funnel: FunnelOptions
    controller: ControllerConfig
    conditions: list
    trials: int = 10
    seed: int = 0
    max_steps: int = None
    verify_samples: int = 4096
    verify_seed: int = 0
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    raw: dict = field(default_factory=dict)

    @property
    def plan_hash(self) -> str:
        """Hash of everything the trajectory (and hence the PWA table) depends on."""
        return canonical_hash({"plant": self.raw.get("plant", {}), "trajopt": self.raw.get("trajopt", {})})

    @property
    def funnel_hash(self) -> str:
        return canonical_hash({"plan": self.plan_hash, "funnel": self.raw.get("funnel", {})})


def _deg(d, key, default):
    return math.radians(d[key]) if key in d else default


def from_document(doc: dict) -> ToolkitConfig:
    """Build a config from an already-validated document."""
    plant = PlantParams.from_dict(doc.get("plant", {}))
    t = doc.get("trajopt", {})
    base = TrajOptSpec()
    if "initial_state" in t:
        x0 = t["initial_state"]
    else:
        x0 = default_initial_state(plant, _deg(t, "phi0_deg", math.radians(60.0)))
    spec = TrajOptSpec(
        horizon=t.get("horizon", base.horizon), dt=plant.dt, initial_state=x0,
        goal_angle=_deg(t, "goal_deg", base.goal_angle),
        tol_goal=_deg(t, "tol_goal_deg", base.tol_goal),
        goal_margin=_deg(t, "goal_margin_deg", base.goal_margin),
        angle_max=_deg(t, "angle_max_deg", base.angle_max),
        eps_comp=plant.eps_comp, bounds=plant.bounds,
        thetad_max=t.get("thetad_max", base.thetad_max),
        cone_margin=t.get("cone_margin", base.cone_margin),
        range_margin=t.get("range_margin", base.range_margin),
        tol_dyn=t.get("tol_dyn", base.tol_dyn),
    )
    f = dict(doc.get("funnel", {}))
    verify_samples = f.pop("verify_samples", 4096)
    verify_seed = f.pop("verify_seed", 0)
    fopts = FunnelOptions(**{k: tuple(v) if isinstance(v, list) else v for k, v in f.items()})
    c = dict(doc.get("controller", {}))
    if "tol_goal_deg" in c:
        c["tol_goal"] = math.radians(c.pop("tol_goal_deg"))
    ctrl = ControllerConfig(**c)
    h = doc.get("harness", {})
    conds = [DisturbanceSpec.from_dict(cd) for cd in h.get("conditions", [])]
    paths = dict(DEFAULT_PATHS)
    paths.update(doc.get("paths", {}))
    return ToolkitConfig(plant, spec, fopts, ctrl, conds, h.get("trials", 10), h.get("seed", 0),
                         h.get("max_steps"), verify_samples, verify_seed, paths, doc)


def parse_config(text: str, source: str = None) -> ToolkitConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, source) from None
    validator = jsonschema.Draft202012Validator(SCHEMA)
    # report the error that comes first in the file
    errors = [(locate(text, list(e.absolute_path)), e) for e in validator.iter_errors(doc)]
    if errors:
        pos, err = min(errors, key=lambda pe: pe[0])
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ConfigError(f"{where}: {err.message}", _line_of(text, pos), source)
    try:
        cfg = from_document(doc)
        cfg.trajopt.validate(cfg.plant)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), source=source) from None
    return cfg


def load_config(path=None) -> ToolkitConfig:
    """Load ``path`` or, when None, the shipped flip-task config."""
    if path is None:
        return parse_config(shipped_config_text(), "flip.json")
    with open(path) as f:
        text = f.read()
    return parse_config(text, str(path))


def shipped_config_text() -> str:
    return resources.files("contactfunnel").joinpath("data/flip.json").read_text()
