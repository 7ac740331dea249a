"""Typed configuration and the INI-style config file.

Sections: [data], [model], [train], [render]. Unknown keys are rejected
with a nearest-key suggestion. A fully annotated example lives in
configs/example.ini.
"""

from __future__ import annotations

import configparser
import difflib
from dataclasses import asdict, dataclass, field, fields


@dataclass
class DataConfig:
    root: str = "dataset"                 # dataset directory (synth output / train input)
    views: int = 4
    resolution: int = 64                  # dataset image size (square)
    frames_expressions: int = 90
    frames_nod: int = 60
    frames_shake: int = 60
    frames_free: int = 80
    hair_strands: int = 24
    hair_links: int = 10
    seed: int = 1234


@dataclass
class ModelConfig:
    expression_dim: int = 16
    feature_dim: int = 128
    channels: int = 32
    deform_hidden: int = 256
    deform_layers: int = 4
    color_hidden: int = 128
    color_layers: int = 3
    attr_hidden: int = 128
    attr_layers: int = 3
    hair_hidden: int = 128
    hair_layers: int = 3
    sdf_hidden: int = 128
    sdf_layers: int = 5
    sdf_octaves: int = 4                  # sinusoidal position encoding octaves
    grid: int = 48                        # marching-tets lattice cubes per axis
    t1: float = 0.15                      # landmark-distance ramp (expression weight)
    t2: float = 0.25
    t3: float = 0.05                      # scalp-distance ramp (hair weight)
    t4: float = 0.15
    head_sdf_radius: float = 0.35
    hair_shell_radius: float = 0.42
    hair_shell_width: float = 0.07


@dataclass
class TrainConfig:
    stage1_iters: int = 10000
    stage1_batch: int = 4
    stage2_iters: int = 20000
    lr_stage1_nets: float = 1e-3
    lr_stage1_landmarks: float = 1e-4
    lr_nets: float = 1e-4                 # color/deform/attribute nets, stage 2
    lr_positions: float = 1e-5            # X0
    lr_features: float = 1e-5             # F0
    lr_rotation: float = 1e-4             # Q0
    lr_scale: float = 3e-4                # S0
    lr_opacity: float = 1e-3              # A0
    lr_refiner: float = 1e-4
    lambda_vgg: float = 0.1               # weight of the perceptual proxy
    lambda_lr: float = 1.0                # weight of the low-res reconstruction term
    lambda_mask: float = 0.1
    w_sil: float = 0.1                    # stage-1 loss weights
    w_def: float = 1.0
    w_offset: float = 0.01
    w_lmk: float = 0.1
    w_lap: float = 100.0
    w_mask: float = 0.1
    checkpoint_every: int = 1000
    log_every: int = 50
    hair_window: int = 2                  # BPTT window (order of the recurrence)
    hair_enabled: bool = True
    seed: int = 0
    dtype: str = "f64"                    # f64 for checks, f32 for speed
    stage1_render: int = 0                # stage-1 render size; 0 = dataset resolution


@dataclass
class RenderConfig:
    size: int = 128                       # rasterizer output resolution (square)
    tile: int = 16
    refine_factor: int = 2                # super-resolution factor (2 or 4)
    sigma_sil: float = 1.5                # soft silhouette width, pixels


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def snapshot(self) -> str:
        """Serialize to INI text (round-trips through load_config)."""
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for key, val in asdict(getattr(self, sec.name)).items():
                lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)


def _coerce(current, text, section, key):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"[{section}] {key}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def parse_config_text(text: str) -> Config:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = Config()
    known_sections = {f.name for f in fields(cfg)}
    for section in parser.sections():
        if section not in known_sections:
            hint = difflib.get_close_matches(section, known_sections, n=1)
            extra = f"; did you mean [{hint[0]}]?" if hint else ""
            raise KeyError(f"unknown config section [{section}]{extra}")
        sub = getattr(cfg, section)
        known = {f.name for f in fields(sub)}
        for key, value in parser.items(section):
            if key not in known:
                hint = difflib.get_close_matches(key, known, n=1)
                extra = f"; did you mean '{hint[0]}'?" if hint else ""
                raise KeyError(f"unknown key '{key}' in [{section}]{extra}")
            setattr(sub, key, _coerce(getattr(sub, key), value, section, key))
    return cfg


def load_config(path) -> Config:
    with open(path) as f:
        return parse_config_text(f.read())
