"""Engine configuration: one flat key=value text file, CLI-overridable.

Every subcommand resolves its configuration from (defaults, config file,
--set overrides) in that order and writes the resolved result next to its
outputs, so runs are reproducible from the artifacts alone. All randomness
flows from the single ``seed`` key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List

from .depthestim import ExtractionConfig
from .errors import InputError
from .tracker import TrackerConfig


@dataclass
class EngineConfig:
    seed: int = 0

    # tracking
    levels: int = 3
    hypotheses: int = 64
    gn_max_iterations: int = 10
    gn_update_tol: float = 1e-6
    init_rot_std_deg: float = 0.5
    init_trans_std_m: float = 0.005
    rot_switch_deg: float = 6.0
    trans_switch_m: float = 0.15
    min_valid_pixels: int = 100
    estimator: str = "photometric-gn"

    # mapping
    d_min: float = 0.01
    d_max: float = 2.5
    labels: int = 32
    sigma_nb: float = 0.0125
    alpha_conf: float = 50.0
    frames_window: int = 10
    nb_iters: int = 0
    extract_method: str = "wta"
    sgm_p1: float = 0.1
    sgm_p2: float = 0.5
    sgm_directions: int = 16
    median_filter: bool = True
    softargmin_temperature: float = 1.0

    # losses
    alpha_motion: float = 160.0
    bessel_order: float = 2.0

    # noise study
    noise_levels: str = "0,0.1,0.2,0.3,0.4,0.5,0.6"
    noise_extractors: str = "wta,sgm+wta,soft-argmin"

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            levels=self.levels, hypotheses=self.hypotheses,
            gn_max_iterations=self.gn_max_iterations,
            gn_update_tol=self.gn_update_tol,
            init_rot_std_deg=self.init_rot_std_deg,
            init_trans_std_m=self.init_trans_std_m,
            rot_switch_deg=self.rot_switch_deg,
            trans_switch_m=self.trans_switch_m,
            min_valid_pixels=self.min_valid_pixels,
            seed=self.seed, estimator=self.estimator)

    def extraction_config(self, method: str = None) -> ExtractionConfig:
        return ExtractionConfig(
            method=method or self.extract_method,
            p1=self.sgm_p1, p2=self.sgm_p2, directions=self.sgm_directions,
            median_filter=self.median_filter,
            temperature=self.softargmin_temperature)

    def noise_level_list(self) -> List[float]:
        return [float(v) for v in self.noise_levels.split(",") if v.strip()]

    def noise_extractor_list(self) -> List[str]:
        return [v.strip() for v in self.noise_extractors.split(",") if v.strip()]

    def to_text(self) -> str:
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def apply_overrides(cfg: EngineConfig, overrides: Dict[str, str]) -> EngineConfig:
    fields = {f.name: f.type for f in dataclasses.fields(cfg)}
    types = {f.name: type(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    for key, raw in overrides.items():
        if key not in fields:
            raise InputError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _parse_value(raw, types[key]))
        except ValueError as exc:
            raise InputError(f"bad value for {key!r}: {exc}") from exc
    return cfg


def load_config(path=None, overrides: Dict[str, str] = None) -> EngineConfig:
    """Defaults, then the config file, then explicit overrides."""
    cfg = EngineConfig()
    file_overrides: Dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as f:
                for lineno, raw in enumerate(f, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise InputError(f"{path}:{lineno}: expected 'key = value'")
                    key, _, value = line.partition("=")
                    file_overrides[key.strip()] = value.strip()
        except FileNotFoundError as exc:
            raise InputError(f"config file not found: {path}") from exc
    apply_overrides(cfg, file_overrides)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
