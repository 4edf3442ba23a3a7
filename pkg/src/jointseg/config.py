"""Run configuration.

A run is configured by one YAML file. Every key is optional except the atlas
path for segmentation (which the command line may also supply). Grammar::

    atlas: atlas.nii.gz          # relative paths resolve against the config file
    lambda: 0.05                 # deformation stiffness
    resolution: 0.5              # working grid spacing (mm)
    control_spacing: 10          # control points every N working voxels
    seed: 0
    threads: 1
    deterministic: true
    background: [background]     # classes excluded from the analysis mask
    bbox: {threshold: null, margin_mm: 2.0}
    shell: 1000                  # DWI shell used for the tensor fit
    gem: {it_max: 100, tol: 1.0e-6, deform_every: 5, mstep_iter: 100,
          registration_iter: 20, grad_tol: 1.0e-6, var_floor: 1.0e-6, kappa_init: 10.0}
                                 # grad_tol: relative gradient stop of the deformation update
    registration: {levels: 3, bins: 32, dof: 12}
    classes:                     # optional per-class settings, matched by name
      - {name: blob_a, hypermean: [50.0], scale: null, template: 50.0,
         gaussian_group: a, beta_group: a, dsw_group: a}
    simulate: {shape: [32, 32, 32], spacing: 1.0, n_classes: 4, width: 5.0, peak: 8.0,
               displacement_mm: 0.0, truth: {}}

Unknown keys are rejected with the list of valid ones.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError


@dataclass
class ClassSpec:
    name: str
    hypermean: Optional[list] = None
    scale: Optional[float] = None  # n_c; defaults to the class prior volume (mm^3)
    template: Optional[float] = None  # intensity used for the registration template
    gaussian_group: Any = None
    beta_group: Any = None
    dsw_group: Any = None


@dataclass
class BBoxConfig:
    threshold: Optional[float] = None  # None keeps the full sMRI field of view
    margin_mm: float = 2.0


@dataclass
class GEMConfig:
    it_max: int = 100
    tol: float = 1e-6
    deform_every: int = 5
    mstep_iter: int = 100
    registration_iter: int = 20
    grad_tol: float = 1e-6
    var_floor: float = 1e-6
    kappa_init: float = 10.0


@dataclass
class RegistrationConfig:
    levels: int = 3
    bins: int = 32
    dof: int = 12


@dataclass
class SimulateConfig:
    shape: list = field(default_factory=lambda: [32, 32, 32])
    spacing: float = 1.0
    n_classes: int = 4
    width: float = 5.0
    peak: float = 8.0
    displacement_mm: float = 0.0  # amplitude of a random smooth deformation
    truth: dict = field(default_factory=dict)  # means, variances, alpha, beta, axes, kappa


@dataclass
class RunConfig:
    atlas: Optional[str] = None
    lambda_: float = 0.05
    resolution: float = 0.5
    control_spacing: int = 10
    seed: int = 0
    threads: int = 1
    deterministic: bool = True
    background: list = field(default_factory=list)
    bbox: BBoxConfig = field(default_factory=BBoxConfig)
    shell: Optional[float] = 1000.0
    gem: GEMConfig = field(default_factory=GEMConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    classes: list = field(default_factory=list)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def to_dict(self, drop=("threads",)):
        out = _to_plain(self)
        for key in drop:
            out.pop(key, None)
        return out

    def class_spec(self, name):
        for spec in self.classes:
            if spec.name == name:
                return spec
        return None


_TRUTH_KEYS = ("means", "variances", "alpha", "beta", "axes", "kappa")


def _key(f):
    return "lambda" if f.name == "lambda_" else f.name


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {_key(f): _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(value, default, where):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list) and not isinstance(value, list):
            raise TypeError
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}") from None
    return value


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {_key(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}; "
                          f"valid keys: {', '.join(sorted(fields))}")
    kwargs = {}
    for key, f in fields.items():
        if key not in data:
            continue
        value = data[key]
        path = f"{where}.{key}" if where else key
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, path)
        elif key == "classes":
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list of class entries")
            value = [_build(ClassSpec, v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif key == "truth":
            bad = sorted(set(value or {}) - set(_TRUTH_KEYS))
            if bad:
                raise ConfigError(f"unknown key {path}.{bad[0]}; valid keys: {', '.join(_TRUTH_KEYS)}")
        elif default is not dataclasses.MISSING:
            value = _coerce(value, default, path)
        kwargs[f.name] = value
    if cls is ClassSpec and "name" not in kwargs:
        raise ConfigError(f"{where}: every class entry needs a name")
    return cls(**kwargs)


def validate(cfg: RunConfig):
    if cfg.lambda_ <= 0:
        raise ConfigError("lambda must be positive")
    if cfg.resolution <= 0:
        raise ConfigError("resolution must be positive")
    if cfg.control_spacing < 2:
        raise ConfigError("control_spacing must be at least 2")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    if cfg.gem.it_max < 1 or cfg.gem.tol <= 0:
        raise ConfigError("gem.it_max must be >= 1 and gem.tol positive")
    if not 1 <= cfg.registration.dof <= 12:
        raise ConfigError("registration.dof must lie in 1..12")
    names = [c.name for c in cfg.classes]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate class names in classes")
    if cfg.simulate.n_classes < 1:
        raise ConfigError("simulate.n_classes must be at least 1")
    return cfg


def parse_config(text, source="<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc).splitlines()[0]
        raise ConfigError(f"{source}:{line}: parse error: {problem}") from None
    return validate(_build(RunConfig, data, ""))


def read_config(path=None, require_atlas=False, atlas=None) -> RunConfig:
    """Load a configuration file (or the defaults when ``path`` is None).

    ``atlas`` (e.g. from the command line) overrides the file; relative atlas
    paths in the file resolve against the file's directory.
    """
    if path is None:
        cfg = validate(RunConfig())
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config(text, str(path))
        if cfg.atlas is not None and not Path(cfg.atlas).is_absolute():
            cfg.atlas = str(path.parent / cfg.atlas)
    if atlas is not None:
        cfg.atlas = str(atlas)
    if require_atlas and not cfg.atlas:
        raise ConfigError("missing atlas path (set 'atlas' in the config or pass --atlas)")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(drop=()), sort_keys=False)
