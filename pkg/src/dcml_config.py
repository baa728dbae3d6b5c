#!/usr/bin/env python3
"""
DCML CONFIG v1.0.0
==================
Run configuration: a dataclass tree with three presets and JSON/env loading.

  desk   laptop-CPU scale, what the tests and acceptance runs use
  full   full-scale settings (batch 128, m 0.999, tau 0.07, bank 65536,
         r1 4, r2 2, SGD/Adam schedules); too large for a CPU
  tiny   smallest sizes that still exercise every stage (smoke tests)

A config file is JSON: {"preset": "desk", "dcml": {"epochs": 5}, ...}. Values
are merged section by section over the preset; unknown keys are rejected.
Environment overrides: DCML_SEED, DCML_OUT_DIR, DCML_PRECISION.
==================
"""

import os
import json
import logging
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

try:
    from .dcml_shared import ConfigError, atomic_write_json, get_base_data_dir
    from .dcml_nn import BackboneConfig, PatchGeometry
except ImportError:
    from dcml_shared import ConfigError, atomic_write_json, get_base_data_dir
    from dcml_nn import BackboneConfig, PatchGeometry

logger = logging.getLogger(__name__)

PRESETS = ('desk', 'full', 'tiny')
STAGES = ('race', 'deaging', 'dcml')
MODALITIES = ('face', 'race', 'deaging')

# ============= SECTIONS =============
@dataclass
class DataConfig:
    seed: int = 7
    num_families: int = 32
    members_per_family: int = 4
    image_size: int = 64
    noise_level: float = 0.05
    latent_dim: int = 16
    # age series used to train the race and de-aging extractors
    age_identities: int = 48
    age_images_per_identity: int = 8

@dataclass
class RaceConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        stem_channels=8, stage_block_counts=(1, 1, 1), stage_bottleneck=(4, 8, 16),
        stage_channels=(16, 32, 64), feature_dim=128, input_size=64))
    epochs: int = 15
    batch_size: int = 32
    rate: float = 0.003
    decay_epoch: int = 10

@dataclass
class DeagingConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        stem_channels=8, stage_block_counts=(1, 1, 1), stage_bottleneck=(4, 8, 16),
        stage_channels=(16, 32, 64), feature_dim=64, input_size=64))
    rounds: int = 4
    max_steps: int = 20
    min_steps: int = 50
    batch_size: int = 64
    lr_schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 0.002)])
    momentum: float = 0.9
    age_groups: int = 4
    age_weight: float = 1.0
    warmup_steps: int = 200         # identity + age CE only, before the first round
    warmup_rate: float = 0.002
    spread_ratio: float = 0.1
    spread_weight: float = 1.0

@dataclass
class DCMLConfig:
    patch_backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        stem_channels=8, stage_block_counts=(2, 2, 2), stage_bottleneck=(4, 8, 16),
        stage_channels=(16, 32, 64), feature_dim=64, input_size=48))
    patch_size: int = 48
    batch_size: int = 32
    lr_schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 0.03)])
    momentum: float = 0.9
    m: float = 0.999
    tau: float = 0.07
    bank_size: int = 512
    r1: float = 4.0
    r2: float = 2.0
    output_dim: int = 128
    gate_activation: str = 'relu'
    fusion_mode: str = 'adaptive'
    manual_weights: Dict[str, float] = field(default_factory=lambda: {'face': 1.0, 'race': 0.5, 'deaging': 0.5})
    epochs: int = 20
    modalities: List[str] = field(default_factory=lambda: ['face', 'race', 'deaging'])

@dataclass
class EvalConfig:
    topk: List[int] = field(default_factory=lambda: [1, 5])
    fold: int = 0
    cross_fold: bool = False
    curves: bool = True            # per-epoch test accuracy during stage 3

@dataclass
class PathsConfig:
    out_dir: str = ""              # empty: <data dir>/runs/<preset>
    data_dir: str = ""             # empty: generate the synthetic dataset in memory

@dataclass
class RunConfig:
    preset: str = 'desk'
    seed: int = 7
    precision: str = 'float32'
    num_folds: int = 5
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    data: DataConfig = field(default_factory=DataConfig)
    race: RaceConfig = field(default_factory=RaceConfig)
    deaging: DeagingConfig = field(default_factory=DeagingConfig)
    dcml: DCMLConfig = field(default_factory=DCMLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def out_path(self) -> Path:
        if self.paths.out_dir:
            return Path(self.paths.out_dir)
        return get_base_data_dir() / "runs" / self.preset

# ============= PRESETS =============
def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("unknown preset", preset=name, allowed=PRESETS)
    cfg = RunConfig(preset=name)
    if name == 'full':
        cfg.race = RaceConfig(backbone=BackboneConfig(stem_channels=64, stage_block_counts=(3, 4, 6),
                                                      stage_bottleneck=(64, 128, 256),
                                                      stage_channels=(256, 512, 1024),
                                                      feature_dim=2048, input_size=64),
                              epochs=10, batch_size=64, rate=0.0001, decay_epoch=2)
        cfg.deaging = DeagingConfig(backbone=BackboneConfig(stem_channels=64, stage_block_counts=(4, 10, 3),
                                                            stage_bottleneck=(64, 128, 256),
                                                            stage_channels=(256, 512, 1024),
                                                            feature_dim=512, input_size=64),
                                    rounds=50, batch_size=64, lr_schedule=[(0, 0.0005), (2, 0.001)],
                                    warmup_steps=2000, warmup_rate=0.0005)
        cfg.dcml = DCMLConfig(patch_backbone=BackboneConfig(), batch_size=128,
                              lr_schedule=[(0, 0.0001), (2, 0.001)], bank_size=65536,
                              output_dim=1024, epochs=100)
        cfg.data = DataConfig(num_families=1000, age_identities=2000, age_images_per_identity=10)
    elif name == 'tiny':
        small = dict(stem_channels=4, stage_block_counts=(1, 1, 1), stage_bottleneck=(2, 4, 4),
                     stage_channels=(4, 8, 8))
        cfg.data = DataConfig(num_families=10, members_per_family=4, image_size=24,
                              age_identities=6, age_images_per_identity=4)
        cfg.race = RaceConfig(backbone=BackboneConfig(feature_dim=8, input_size=24, **small),
                              epochs=2, batch_size=8)
        cfg.deaging = DeagingConfig(backbone=BackboneConfig(feature_dim=8, input_size=24, **small),
                                    rounds=1, max_steps=2, min_steps=3, batch_size=8, warmup_steps=2)
        cfg.dcml = DCMLConfig(patch_backbone=BackboneConfig(feature_dim=8, input_size=16, **small),
                              patch_size=16, batch_size=8, bank_size=16, output_dim=16, epochs=2)
    return cfg

def patch_geometry(cfg: RunConfig) -> PatchGeometry:
    """Four corner-anchored patches: offsets 0 and image_size - patch_size on each axis"""
    size, patch = cfg.data.image_size, cfg.dcml.patch_size
    o = size - patch
    return PatchGeometry(image_size=(size, size), patch_size=(patch, patch),
                         offsets=((0, 0), (0, o), (o, 0), (o, o)))

# ============= LOADING =============
def _merge(target: Any, values: Dict[str, Any], where: str) -> Any:
    """Merge a JSON dict into a dataclass instance, recursing into nested sections"""
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError("unknown config key", key=f"{where}{key}", allowed=sorted(known))
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError("config section must be an object", key=f"{where}{key}")
            _merge(current, value, f"{where}{key}.")
        elif isinstance(current, tuple):
            setattr(target, key, tuple(value))
        elif key == 'lr_schedule':
            setattr(target, key, [(int(e), float(r)) for e, r in value])
        else:
            setattr(target, key, value)
    return target

def _apply_env(cfg: RunConfig) -> RunConfig:
    if os.environ.get('DCML_SEED'):
        try:
            cfg.seed = int(os.environ['DCML_SEED'])
        except ValueError:
            raise ConfigError("DCML_SEED must be an integer", value=os.environ['DCML_SEED'])
        cfg.data.seed = cfg.seed
    if os.environ.get('DCML_OUT_DIR'):
        cfg.paths.out_dir = os.environ['DCML_OUT_DIR']
    if os.environ.get('DCML_PRECISION'):
        cfg.precision = os.environ['DCML_PRECISION']
    return cfg

def config_from_dict(values: Dict[str, Any]) -> RunConfig:
    values = dict(values)
    cfg = preset(values.pop('preset', 'desk'))
    return _merge(cfg, values, "")

def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Preset <- JSON file <- overrides <- environment, then validate"""
    values: Dict[str, Any] = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                values = json.load(f)
        except FileNotFoundError:
            raise ConfigError("config file not found", path=str(path))
        except json.JSONDecodeError as e:
            raise ConfigError("config file is not valid JSON", path=str(path), reason=str(e))
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object", path=str(path))
    cfg = config_from_dict(values)
    if overrides:
        _merge(cfg, overrides, "")
    cfg = _apply_env(cfg)
    validate(cfg)
    return cfg

# ============= VALIDATION =============
def validate(cfg: RunConfig) -> RunConfig:
    if cfg.precision not in ('float32', 'float64'):
        raise ConfigError("precision must be float32 or float64", precision=cfg.precision)
    unknown = [s for s in cfg.stages if s not in STAGES]
    if unknown:
        raise ConfigError("unknown stages", stages=unknown, allowed=STAGES)
    if cfg.num_folds < 2:
        raise ConfigError("need at least 2 folds", num_folds=cfg.num_folds)
    d = cfg.data
    if min(d.num_families, d.members_per_family, d.image_size, d.latent_dim,
           d.age_identities, d.age_images_per_identity) <= 0 or d.noise_level < 0:
        raise ConfigError("data sizes must be positive")
    for section, backbone in (('race', cfg.race.backbone), ('deaging', cfg.deaging.backbone)):
        backbone.validate()
        if backbone.input_size != d.image_size:
            raise ConfigError(f"{section} backbone input must match the image size",
                              input_size=backbone.input_size, image_size=d.image_size)
    g = cfg.deaging
    if g.warmup_steps < 0 or g.warmup_rate <= 0 or not 0.0 <= g.spread_ratio < 1.0 or g.spread_weight < 0:
        raise ConfigError("de-aging warm-up and spread settings out of range", warmup_steps=g.warmup_steps,
                          warmup_rate=g.warmup_rate, spread_ratio=g.spread_ratio)
    c = cfg.dcml
    c.patch_backbone.validate()
    if c.patch_backbone.input_size != c.patch_size or c.patch_size > d.image_size:
        raise ConfigError("patch size must match the patch backbone and fit the image",
                          patch_size=c.patch_size, image_size=d.image_size)
    patch_geometry(cfg).validate()
    if c.r1 < 1 or c.r2 < 1:
        raise ConfigError("reduction ratios must be >= 1", r1=c.r1, r2=c.r2)
    if not 0.0 <= c.m <= 1.0:
        raise ConfigError("momentum coefficient must lie in [0, 1]", m=c.m)
    if c.tau <= 0:
        raise ConfigError("temperature must be positive", tau=c.tau)
    if min(c.bank_size, c.batch_size, c.output_dim, c.epochs) <= 0:
        raise ConfigError("bank size, batch size, output dim and epochs must be positive")
    if 'face' not in c.modalities or any(m not in MODALITIES for m in c.modalities):
        raise ConfigError("modalities must include face and be drawn from face/race/deaging",
                          modalities=c.modalities)
    if c.fusion_mode not in ('adaptive', 'manual', 'concat'):
        raise ConfigError("unknown fusion mode", fusion_mode=c.fusion_mode)
    if not cfg.eval.topk or min(cfg.eval.topk) < 1:
        raise ConfigError("top-k values must be positive", topk=cfg.eval.topk)
    if not 0 <= cfg.eval.fold < cfg.num_folds:
        raise ConfigError("eval fold out of range", fold=cfg.eval.fold, num_folds=cfg.num_folds)
    return cfg

# ============= SERIALIZATION =============
def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    def plain(value):
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if isinstance(value, list):
            return [plain(v) for v in value]
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        return value
    return plain(asdict(cfg))

def save_config(cfg: RunConfig, path: Path):
    atomic_write_json(path, to_dict(cfg))
