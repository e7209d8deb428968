"""
Experiment configuration: TOML profiles shipped with the package, merged
with a user file and turned into typed, validated config blocks.
"""
import copy
import dataclasses
import functools
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import toml

from nikrecon import config
from nikrecon.classic import XDGraspConfig
from nikrecon.ico import ACRSpec, ICoConfig
from nikrecon.navigator import NavigatorSource
from nikrecon.nik import NIKArchitecture, TrainConfig
from nikrecon.simulator import PHANTOMS, MotionModel
from nikrecon.utils import ConfigError, JsonEncoder

LOG = logging.getLogger(__name__)

PROFILES_DIR = Path(__file__).parent / "profiles"

METHODS = ("inufft", "xdgrasp", "nik", "iconik")


@dataclasses.dataclass(frozen=True)
class SimulatorConfig:
    n_spokes: int = 200
    n_fe: int = 128
    n_coils: int = 4
    phantom: str = "default"
    # noise std as a fraction of the mean k-space center magnitude
    relative_noise: float = 0.02
    undersample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.phantom not in PHANTOMS:
            raise ConfigError(
                f"unknown phantom {self.phantom!r}, expected one of {sorted(PHANTOMS)}"
            )

        if self.relative_noise < 0:
            raise ConfigError("simulator.relative_noise must be non-negative")


@dataclasses.dataclass(frozen=True)
class NavigatorConfig:
    source: NavigatorSource = NavigatorSource.self
    smooth_window: int = 5
    n_bins: int = 4

    def __post_init__(self):
        if self.smooth_window < 1 or self.n_bins < 1:
            raise ConfigError("navigator.smooth_window and n_bins must be positive")


@dataclasses.dataclass(frozen=True)
class EvaluationConfig:
    reference: str = "truth"  # or "gated"
    state: int = 0
    n_states: int = 20
    methods: Tuple[str, ...] = METHODS

    def __post_init__(self):
        if self.reference not in ("truth", "gated"):
            raise ConfigError(f"evaluation.reference must be truth or gated, got {self.reference!r}")

        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods in evaluation.methods: {sorted(unknown)}")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    profile: str
    simulator: SimulatorConfig
    motion: MotionModel
    navigator: NavigatorConfig
    xdgrasp: XDGraspConfig
    nik: NIKArchitecture
    nik_train: TrainConfig
    ico: ICoConfig
    evaluation: EvaluationConfig
    output_dir: Path
    resolved: Dict[str, Any] = dataclasses.field(default_factory=dict, compare=False)

    @property
    def seed(self) -> int:
        return self.simulator.seed


def config_hash(block: Any) -> str:
    """
    Short stable digest of a config block.
    """
    if dataclasses.is_dataclass(block):
        block = dataclasses.asdict(block)
    encoded = json.dumps(block, sort_keys=True, cls=JsonEncoder).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()[:12]


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _load_toml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r") as fp:
            return toml.load(fp)

    except FileNotFoundError:
        raise ConfigError(f"can't find config at {path}")

    except toml.TomlDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}")


@functools.lru_cache(maxsize=None)
def _profile(name: str) -> Dict[str, Any]:
    path = PROFILES_DIR / f"{name}.toml"
    if not path.exists():
        available = sorted(p.stem for p in PROFILES_DIR.glob("*.toml"))
        raise ConfigError(f"unknown profile {name!r}, try one of {available!r}")
    return _load_toml(path)


def profile_config(name: str) -> Dict[str, Any]:
    return copy.deepcopy(_profile(name))


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}" if section else key

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value

    if isinstance(default, NavigatorSource):
        try:
            return NavigatorSource(value)
        except ValueError:
            raise ConfigError(
                f"{where} must be one of {[s.value for s in NavigatorSource]}, got {value!r}"
            )

    if isinstance(default, float) or (default is None and isinstance(value, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)

    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value

    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value

    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)

    return value


def build_block(cls, section: str, values: Dict[str, Any], **extra):
    """
    Instantiates the dataclass `cls` from a TOML table, rejecting unknown
    keys and values whose type does not match the field default.
    """
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")

    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields or key in extra:
            raise ConfigError(f"unknown key {section}.{key}")

        field = fields[key]
        default = field.default if field.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(section, key, value, default)

    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}")


def _split(table: Dict[str, Any], key: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    table = dict(table)
    nested = table.pop(key, {})
    return table, nested


SECTIONS = ("simulator", "motion", "navigator", "xdgrasp", "nik", "ico", "evaluation", "output")


def resolve_config(
    path: Optional[Path] = None,
    profile: Optional[str] = None,
    seed: Optional[int] = None,
    out: Optional[Path] = None,
) -> ExperimentConfig:
    """
    Loads the profile, merges the user config and command-line overrides
    over it and validates every block.
    """
    profile = profile or config.PROFILE
    resolved = profile_config(profile)
    if path is not None:
        resolved = deep_merge(resolved, _load_toml(Path(path)))

    if seed is not None:
        resolved.setdefault("simulator", {})["seed"] = seed
        for section in ("nik", "ico"):
            resolved.setdefault(section, {}).setdefault("train", {})["seed"] = seed

    if out is not None:
        resolved.setdefault("output", {})["dir"] = str(out)

    unknown = set(resolved) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    nik_table, nik_train = _split(resolved.get("nik", {}), "train")
    ico_table, ico_train = _split(resolved.get("ico", {}), "train")
    ico_table, ico_acr = dict(ico_table), {}
    if "radius" in ico_table:
        ico_acr["radius"] = ico_table.pop("radius")

    try:
        acr = ACRSpec(**{k: _coerce("ico", k, v, 0.4) for k, v in ico_acr.items()})
    except TypeError as exc:
        raise ConfigError(f"[ico]: {exc}")

    output = resolved.get("output", {})
    unknown_output = set(output) - {"dir"}
    if unknown_output:
        raise ConfigError(f"unknown keys in [output]: {sorted(unknown_output)}")

    cfg = ExperimentConfig(
        profile=profile,
        simulator=build_block(SimulatorConfig, "simulator", resolved.get("simulator", {})),
        motion=build_block(MotionModel, "motion", resolved.get("motion", {})),
        navigator=build_block(NavigatorConfig, "navigator", resolved.get("navigator", {})),
        xdgrasp=build_block(XDGraspConfig, "xdgrasp", resolved.get("xdgrasp", {})),
        nik=build_block(NIKArchitecture, "nik", nik_table),
        nik_train=build_block(TrainConfig, "nik.train", nik_train),
        ico=build_block(
            ICoConfig,
            "ico",
            ico_table,
            acr=acr,
            train=build_block(TrainConfig, "ico.train", ico_train),
        ),
        evaluation=build_block(EvaluationConfig, "evaluation", resolved.get("evaluation", {})),
        output_dir=Path(output.get("dir", f"runs/{profile}")),
        resolved=resolved,
    )
    LOG.debug(f"Resolved {profile} config {config_hash(resolved)}")
    return cfg


def write_resolved(cfg: ExperimentConfig, directory: Path) -> Path:
    """
    Stores the resolved configuration next to the outputs it produced.
    """
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.toml"
    resolved = deep_merge(cfg.resolved, {"output": {"dir": str(cfg.output_dir)}})
    with open(path, "w") as fp:
        fp.write(f"# profile: {cfg.profile}\n")
        toml.dump(resolved, fp)
    return path
