"""Run configuration: TOML sections mirroring the module config types.

Every key has a default, unknown sections or keys are hard errors and the
fully resolved configuration (defaults included) is echoed into reports.
"""

import dataclasses
import math
from pathlib import Path
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import ConfigError, InvalidInputError
from .hardware import ResonatorModel, b1_factor, reflection_s11
from .nv_core import (
    REFERENCE_B0_DIRECTION,
    REFERENCE_B0_MAGNITUDE,
    EnsembleParams,
    MagneticEnvironment,
    PhysicalConstants,
)
from .signal_chain import DetectionConfig, MwDriveConfig, NoiseConfig

KINDS = ("odmr-sweep", "param-sweep", "testfield-trace", "allan", "track", "limits")
SWEEPABLE = ("f_depth", "P_MW", "t_int", "f_mod")
_MISSING = object()  # optional key without a default


def _fields(cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _schema():
    detection = _fields(DetectionConfig)
    detection["nv_lowpass_rate"] = DetectionConfig.nv_lowpass_rate  # 0 disables
    return {
        "": {"kind": _MISSING, "seed": 0, "out": "nvlab-out"},
        "constants": _fields(PhysicalConstants),
        "ensemble": _fields(EnsembleParams, skip=("constants", "orientations")),
        "environment": {"b0_magnitude": REFERENCE_B0_MAGNITUDE, "b0_direction": list(REFERENCE_B0_DIRECTION),
                        "delta_T": 0.0},
        "resonator": {"Q0": 117.12, "beta_c": 0.3, "f_res": 2.898e9, "apply_b1": False},
        "drive": {k: (list(v) if isinstance(v, tuple) else v) for k, v in _fields(MwDriveConfig).items()},
        "detection": detection,
        "noise": {**_fields(NoiseConfig, skip=("seed",)), "target_eta": 0.0, "target_sigma_field": 0.0},
        "sweep": {"f_start": 2.836e9, "f_stop": 2.904e9, "f_step": 2e3, "t_int": 20e-3,
                  "target": [3, 1, 0], "fit_span": 600e3, "slope_span": 60e3},
        "param_sweep": {"parameter": "f_depth", "values": [10e3, 20e3, 30e3, 40e3, 50e3, 60e3],
                        "t_int": 20e-3, "target": [3, 1, 0], "slope_span": 60e3, "slope_step": 1e3,
                        "line_span": 600e3, "line_step": 4e3},
        "testfield": {"frequency": 2.0, "amplitude": 333e-9, "n_windows": 2000, "t_int": 20e-3,
                      "axis_index": 3, "target": [3, 1, 0]},
        "allan": {"input": "", "column": "", "sample_period": 0.0, "n_windows": 20000, "t_int": 1e-3,
                  "per_decade": 10, "target": [3, 1, 0], "slope_m": 0.0},
        "limits": {"linewidth": _MISSING, "contrast": _MISSING, "photon_rate": _MISSING,
                   "u_shunt": _MISSING, "r_shunt": _MISSING, "measured_eta": _MISSING},
        "track": {"scenario": "elevator", "step_level": 8.92e-9, "duration": 1.0, "step_quantum": 250.0,
                  "t_int_per_iter": 1e-3, "error_deadband": _MISSING, "target": [3, 1, 0],
                  "lock_loss_linewidths": 3.0},
    }


SCHEMA = _schema()


def _find_line(text, section, key):
    """1-based line of ``key`` inside ``[section]`` (or the top level)."""
    if text is None:
        return None
    current = ""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"^\"?{re.escape(key)}\"?\s*=", line):
            return i
    return None


def _coerce(section, key, value, default, line):
    where = f"{section}.{key}" if section else key
    if default is _MISSING or default is None:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", line, where)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", line, where)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", line, where)
        if not math.isfinite(value):
            raise ConfigError("expected a finite number", line, where)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError("expected a string", line, where)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError("expected a list", line, where)
        return value
    return value


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


@dataclasses.dataclass
class RunConfig:
    """Resolved run configuration; ``sections`` holds every key."""

    kind: str
    seed: int
    out: str
    sections: dict

    # -- construction -----------------------------------------------------
    @classmethod
    def from_mapping(cls, data, text=None, kind=None, overrides=()):
        data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            if len(parts) == 1:
                data[parts[0]] = _parse_value(raw.strip())
            elif len(parts) == 2:
                data.setdefault(parts[0], {})
                if not isinstance(data[parts[0]], dict):
                    raise ConfigError(f"{parts[0]!r} is not a section", field=key)
                data[parts[0]][parts[1]] = _parse_value(raw.strip())
            else:
                raise ConfigError("keys are at most section.key", field=key)

        resolved = {name: {k: v for k, v in keys.items() if v is not _MISSING} for name, keys in SCHEMA.items()}
        for name, value in data.items():
            if isinstance(value, dict):
                if name not in SCHEMA or name == "":
                    raise ConfigError(f"unknown section [{name}]", _find_line(text, name, None), name)
                for key, v in value.items():
                    line = _find_line(text, name, key)
                    if key not in SCHEMA[name]:
                        raise ConfigError(f"unknown key in [{name}]", line, f"{name}.{key}")
                    resolved[name][key] = _coerce(name, key, v, SCHEMA[name][key], line)
            else:
                line = _find_line(text, "", name)
                if name not in SCHEMA[""]:
                    raise ConfigError("unknown top-level key", line, name)
                resolved[""][name] = _coerce("", name, value, SCHEMA[""][name], line)

        top = resolved.pop("")
        file_kind = top.get("kind")
        if kind is None:
            kind = file_kind
        elif file_kind is not None and file_kind != kind:
            raise ConfigError(f"config is for {file_kind!r} but the command is {kind!r}",
                              _find_line(text, "", "kind"), "kind")
        if kind not in KINDS:
            raise ConfigError(f"experiment kind must be one of {', '.join(KINDS)}", field="kind")
        seed = top["seed"]
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", _find_line(text, "", "seed"), "seed")
        cfg = cls(kind, int(seed), str(top["out"]), resolved)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, kind=None, overrides=(), seed=None, out=None):
        text = None
        data = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                m = re.search(r"line (\d+)", str(exc))
                raise ConfigError(f"TOML syntax error: {exc}", int(m.group(1)) if m else None) from None
        extra = list(overrides)
        if seed is not None:
            extra.append(f"seed={int(seed)}")
        if out is not None:
            extra.append(f"out={_toml_str(out)}")
        return cls.from_mapping(data, text, kind, extra)

    def validate(self):
        """Build every module object once so bad values fail early."""
        for name, build in (("constants", self.constants), ("ensemble", self.params),
                            ("environment", self.environment), ("drive", self.drive),
                            ("detection", self.detection), ("noise", self.noise),
                            ("resonator", self.resonator)):
            try:
                build()
            except InvalidInputError as exc:
                raise ConfigError(str(exc), field=name) from None
        ps = self.sections["param_sweep"]
        if self.kind == "param-sweep":
            if not isinstance(ps["parameter"], str):
                raise ConfigError("param-sweep takes exactly one parameter", field="param_sweep.parameter")
            if ps["parameter"] not in SWEEPABLE:
                raise ConfigError(f"parameter must be one of {', '.join(SWEEPABLE)}", field="param_sweep.parameter")
            if not ps["values"] or not all(isinstance(v, (int, float)) for v in ps["values"]):
                raise ConfigError("values must be a non-empty list of numbers", field="param_sweep.values")

    # -- module objects ----------------------------------------------------
    def constants(self):
        return PhysicalConstants(**self.sections["constants"])

    def params(self):
        return EnsembleParams(constants=self.constants(), **self.sections["ensemble"])

    def environment(self, test_field=None, test_axis=None):
        e = self.sections["environment"]
        d = np.asarray(e["b0_direction"], dtype=float)
        if d.shape != (3,) or not np.linalg.norm(d) > 0:
            raise InvalidInputError("b0_direction must be a nonzero 3-vector")
        b0 = e["b0_magnitude"] * d / np.linalg.norm(d)
        return MagneticEnvironment(tuple(b0), e["delta_T"], test_field, test_axis)

    def drive(self):
        d = dict(self.sections["drive"])
        d["tone_weights"] = tuple(d["tone_weights"])
        return MwDriveConfig(**d)

    def detection(self):
        d = dict(self.sections["detection"])
        if not d["nv_lowpass_rate"]:
            d["nv_lowpass_rate"] = None
        return DetectionConfig(**d)

    def noise(self):
        d = {k: v for k, v in self.sections["noise"].items() if k not in ("target_eta", "target_sigma_field")}
        return NoiseConfig(seed=self.seed, **d)

    def resonator(self):
        r = self.sections["resonator"]
        return ResonatorModel(r["Q0"], r["beta_c"], r["f_res"])

    def b1(self):
        """Contrast factor from the resonator dip, or 1 when not applied."""
        r = self.sections["resonator"]
        if not r["apply_b1"]:
            return 1.0
        res = self.resonator()
        return b1_factor(max(reflection_s11(res.f_res, res), -300.0))

    def echo(self):
        return {"kind": self.kind, "seed": self.seed, "out": self.out, **self.sections}


def _toml_str(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'
