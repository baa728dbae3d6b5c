#!/usr/bin/env python3
"""
DCML PIPELINE v1.0.0
====================
Three sequential stages, each controlled on its own:

  race     RaceEncoder on the age series (Adam), then frozen      -> race.dck
  deaging  DeagingModel on the age series (20/50 alternation)     -> deaging.dck
  dcml     contrastive patch + fusion pathway on family pairs     -> dcml.dck

Stage 3 consumes the frozen extractors through precomputed feature caches,
so their parameters cannot change. Every stage appends line-JSON records to
<out>/<stage>.log.jsonl; evaluation writes eval.json and eval.txt.
====================
"""

import copy
import logging
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

try:
    from .dcml_shared import DependencyError, ConfigError, RunLog, atomic_write_bytes, atomic_write_json
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
    from . import dcml_storage as storage
    from .dcml_config import RunConfig, patch_geometry, save_config, to_dict, validate
    from .dcml_synth import (FaceSample, Protocol, generate_age_series, generate_family_dataset,
                             load_dataset, make_protocol, stack_images)
    from .dcml_race import RaceEncoder, RaceSchedule, encode_race, train_race
    from .dcml_deaging import AdversarialSchedule, DeagingModel, adversarial_train, encode_deaging, measure_correlation
    from .dcml_contrastive import (ContrastiveState, EncoderConfig, build_contrastive_state,
                                   contrastive_step, warm_up_bank)
    from .dcml_eval import EvalReport, evaluate_topk, merge_reports
except ImportError:
    from dcml_shared import DependencyError, ConfigError, RunLog, atomic_write_bytes, atomic_write_json
    import dcml_tensor as T
    from dcml_tensor import Tensor
    import dcml_storage as storage
    from dcml_config import RunConfig, patch_geometry, save_config, to_dict, validate
    from dcml_synth import (FaceSample, Protocol, generate_age_series, generate_family_dataset,
                            load_dataset, make_protocol, stack_images)
    from dcml_race import RaceEncoder, RaceSchedule, encode_race, train_race
    from dcml_deaging import AdversarialSchedule, DeagingModel, adversarial_train, encode_deaging, measure_correlation
    from dcml_contrastive import (ContrastiveState, EncoderConfig, build_contrastive_state,
                                  contrastive_step, warm_up_bank)
    from dcml_eval import EvalReport, evaluate_topk, merge_reports

logger = logging.getLogger(__name__)

CHECKPOINTS = {'race': 'race.dck', 'deaging': 'deaging.dck', 'dcml': 'dcml.dck'}
FEATURE_BATCH = 64

# ============= CONTEXT =============
@dataclass
class PipelineContext:
    cfg: RunConfig
    out_dir: Path
    dataset: List[FaceSample]
    protocol: Protocol
    age_series: List[FaceSample]
    images: np.ndarray                   # family dataset, NHWC

    def checkpoint(self, stage: str) -> Path:
        return self.out_dir / CHECKPOINTS[stage]

    def log(self, stage: str) -> RunLog:
        return RunLog(self.out_dir / f"{stage}.log.jsonl")

@dataclass
class PipelineResult:
    out_dir: Path
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    report: Optional[EvalReport] = None
    checksums: Dict[str, Dict[str, str]] = field(default_factory=dict)   # stage -> before/after
    history: List[Dict[str, Any]] = field(default_factory=list)          # stage-3 epoch records

def load_family_dataset(cfg: RunConfig) -> List[FaceSample]:
    if cfg.paths.data_dir:
        return load_dataset(Path(cfg.paths.data_dir))
    d = cfg.data
    return generate_family_dataset(d.seed, d.num_families, d.members_per_family, d.image_size,
                                   d.noise_level, latent_dim=d.latent_dim)

def build_context(cfg: RunConfig, dataset: Optional[List[FaceSample]] = None) -> PipelineContext:
    validate(cfg)
    out_dir = cfg.out_path()
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else load_family_dataset(cfg)
    size = dataset[0].image.shape[0]
    if size != cfg.data.image_size:
        raise ConfigError("dataset image size differs from config", dataset=size, config=cfg.data.image_size)
    d = cfg.data
    age_series = generate_age_series(d.seed, d.age_identities, d.age_images_per_identity, d.image_size,
                                     d.noise_level, latent_dim=d.latent_dim)
    protocol = make_protocol(dataset, cfg.seed, cfg.num_folds)
    return PipelineContext(cfg=cfg, out_dir=out_dir, dataset=dataset, protocol=protocol,
                           age_series=age_series, images=stack_images(dataset))

# ============= MODEL FACTORIES =============
def new_race_encoder(cfg: RunConfig) -> RaceEncoder:
    return RaceEncoder(copy.deepcopy(cfg.race.backbone), np.random.default_rng([cfg.seed, 11]))

def new_deaging_model(cfg: RunConfig) -> DeagingModel:
    return DeagingModel(copy.deepcopy(cfg.deaging.backbone), cfg.data.age_identities,
                        np.random.default_rng([cfg.seed, 12]), age_groups=cfg.deaging.age_groups)

def encoder_config(cfg: RunConfig) -> EncoderConfig:
    extra = {}
    if 'race' in cfg.dcml.modalities:
        extra['race'] = cfg.race.backbone.feature_dim
    if 'deaging' in cfg.dcml.modalities:
        extra['deaging'] = cfg.deaging.backbone.feature_dim
    c = cfg.dcml
    return EncoderConfig(patch_backbone=copy.deepcopy(c.patch_backbone), geometry=patch_geometry(cfg),
                         patch_ratio=c.r1, modality_ratio=c.r2, modality_dims=extra,
                         output_dim=c.output_dim, fusion_mode=c.fusion_mode,
                         gate_activation=c.gate_activation, manual_weights=dict(c.manual_weights))

def _load_stage(ctx: PipelineContext, stage: str, model):
    path = ctx.checkpoint(stage)
    if not path.exists():
        raise DependencyError(f"{stage} checkpoint missing; run the {stage} stage first", path=str(path))
    model.load_state_dict(storage.load_checkpoint(path))
    model.freeze()
    return model

# ============= STAGE 1: RACE =============
def run_race_stage(ctx: PipelineContext) -> RaceEncoder:
    cfg = ctx.cfg
    encoder = new_race_encoder(cfg)
    schedule = RaceSchedule(epochs=cfg.race.epochs, batch_size=cfg.race.batch_size, rate=cfg.race.rate,
                            decay_epoch=cfg.race.decay_epoch, seed=cfg.seed)
    train_race(encoder, stack_images(ctx.age_series), [s.race for s in ctx.age_series], schedule, ctx.log('race'))
    encoder.freeze()
    storage.save_checkpoint(ctx.checkpoint('race'), encoder.state_dict())
    return encoder

# ============= STAGE 2: DE-AGING =============
def run_deaging_stage(ctx: PipelineContext) -> DeagingModel:
    cfg = ctx.cfg
    model = new_deaging_model(cfg)
    d = cfg.deaging
    schedule = AdversarialSchedule(rounds=d.rounds, max_steps=d.max_steps, min_steps=d.min_steps,
                                   batch_size=d.batch_size, lr_schedule=list(d.lr_schedule),
                                   momentum=d.momentum, age_weight=d.age_weight, seed=cfg.seed,
                                   warmup_steps=d.warmup_steps, warmup_rate=d.warmup_rate,
                                   spread_ratio=d.spread_ratio, spread_weight=d.spread_weight)
    images = stack_images(ctx.age_series)
    log = ctx.log('deaging')
    reference = images[:min(len(images), FEATURE_BATCH)]
    log.write(stage="deaging", phase="init", rho=measure_correlation(model, reference))
    adversarial_train(model, images, [s.person_id for s in ctx.age_series],
                      [s.age for s in ctx.age_series], schedule, log)
    log.write(stage="deaging", phase="final", rho=measure_correlation(model, reference))
    model.freeze()
    storage.save_checkpoint(ctx.checkpoint('deaging'), model.state_dict())
    return model

# ============= STAGE 3: CONTRASTIVE =============
def _batched(images: np.ndarray, size: int = FEATURE_BATCH) -> Iterator[np.ndarray]:
    for start in range(0, len(images), size):
        yield images[start:start + size]

def modality_features(ctx: PipelineContext, race: Optional[RaceEncoder],
                      deaging: Optional[DeagingModel]) -> Dict[str, np.ndarray]:
    """Frozen per-sample features for the whole family dataset"""
    feats: Dict[str, np.ndarray] = {}
    if race is not None:
        feats['race'] = np.concatenate([encode_race(race, Tensor(b)).data for b in _batched(ctx.images)])
    if deaging is not None:
        feats['deaging'] = np.concatenate([encode_deaging(deaging, Tensor(b)).data for b in _batched(ctx.images)])
    return feats

def embed_samples(state: ContrastiveState, ctx: PipelineContext, feats: Dict[str, np.ndarray],
                  indices: Sequence[int]) -> Dict[int, np.ndarray]:
    """Query-side embeddings, keyed by dataset index"""
    indices = list(indices)
    out: Dict[int, np.ndarray] = {}
    with T.no_grad():
        for start in range(0, len(indices), FEATURE_BATCH):
            idx = indices[start:start + FEATURE_BATCH]
            emb = state.query.embed(Tensor(ctx.images[idx]), {k: Tensor(v[idx]) for k, v in feats.items()})
            out.update(zip(idx, emb.data.copy()))
    return out

def _test_indices(protocol: Protocol, fold: int) -> List[int]:
    pairs = protocol.pairs(fold, 'test')
    return sorted({p.parent for p in pairs} | {p.child for p in pairs})

def _pair_margin(state: ContrastiveState, ctx: PipelineContext, feats, fold: int, epoch: int) -> float:
    """Mean positive minus mean negative cosine on the training side"""
    positives = ctx.protocol.pairs(fold, 'train')
    negatives = ctx.protocol.negative_pairs(fold, 'train', epoch)
    needed = sorted({i for p in positives for i in (p.parent, p.child)} | {i for pair in negatives for i in pair})
    emb = embed_samples(state, ctx, feats, needed)
    pos = np.mean([emb[p.parent] @ emb[p.child] for p in positives])
    neg = np.mean([emb[a] @ emb[b] for a, b in negatives]) if negatives else 0.0
    return float(pos - neg)

def _families(ctx: PipelineContext, indices: Sequence[int]) -> List[int]:
    return [ctx.dataset[i].family_id for i in indices]

def run_dcml_stage(ctx: PipelineContext, feats: Dict[str, np.ndarray], fold: int,
                   log: Optional[RunLog] = None, checkpoint: Optional[Path] = None) -> Tuple[ContrastiveState, List[Dict[str, Any]]]:
    cfg, c = ctx.cfg, ctx.cfg.dcml
    log = log or ctx.log('dcml')
    state = build_contrastive_state(encoder_config(cfg), cfg.seed, c.bank_size, c.m, c.tau,
                                    c.lr_schedule, c.momentum)
    children = sorted({p.child for p in ctx.protocol.pairs(fold, 'train')})
    warm_up_bank(state, ((ctx.images[b], {k: v[b] for k, v in feats.items()}, b, _families(ctx, b))
                         for b in (children[i:i + c.batch_size] for i in range(0, len(children), c.batch_size))))
    history = []
    for epoch in range(c.epochs):
        losses = []
        for batch in ctx.protocol.batches(fold, c.batch_size, epoch):
            parents = [p.parent for p in batch]
            kids = [p.child for p in batch]
            losses.append(contrastive_step(state, ctx.images[parents], ctx.images[kids],
                                           {k: v[parents] for k, v in feats.items()},
                                           {k: v[kids] for k, v in feats.items()}, epoch,
                                           child_ids=kids, family_ids=_families(ctx, kids)))
        if not losses:
            raise ConfigError("training fold yields no batches", fold=fold, batch_size=c.batch_size)
        record: Dict[str, Any] = {'stage': 'dcml', 'fold': fold, 'epoch': epoch,
                                  'loss': float(np.mean(losses)), 'loss_first': losses[0],
                                  'loss_last': losses[-1], 'lr': state.optimizer.state.rate_at(epoch)}
        if cfg.eval.curves:
            record['margin'] = _pair_margin(state, ctx, feats, fold, epoch)
            emb = embed_samples(state, ctx, feats, _test_indices(ctx.protocol, fold))
            curve = evaluate_fold_quiet(emb, ctx.protocol, fold, cfg.eval.topk)
            record.update({f"test_top{k}": v for k, v in curve.items()})
        history.append(log.write(**record))
        logger.info(f"[DCML] fold {fold} epoch {epoch}: loss {record['loss']:.4f}")
    if checkpoint is not None:
        params = state.query.state_dict("query.")
        params.update(state.key.state_dict("key."))
        storage.save_checkpoint(checkpoint, params)
    return state, history

def evaluate_fold_quiet(embeddings, protocol: Protocol, fold: int, ks: Sequence[int]) -> Dict[int, float]:
    report = evaluate_topk(embeddings, protocol, fold, ks)
    return {k: report.folds[0].cells['Avg'][k] for k in ks}

def evaluate_state(state: ContrastiveState, ctx: PipelineContext, feats: Dict[str, np.ndarray],
                   fold: int) -> EvalReport:
    emb = embed_samples(state, ctx, feats, _test_indices(ctx.protocol, fold))
    return evaluate_topk(emb, ctx.protocol, fold, ctx.cfg.eval.topk,
                         metadata={'preset': ctx.cfg.preset, 'seed': ctx.cfg.seed,
                                   'modalities': list(ctx.cfg.dcml.modalities),
                                   'fusion_mode': ctx.cfg.dcml.fusion_mode,
                                   'r1': ctx.cfg.dcml.r1, 'r2': ctx.cfg.dcml.r2})

# ============= PIPELINE =============
def _extractors(ctx: PipelineContext, trained: Dict[str, Any]) -> Tuple[Optional[RaceEncoder], Optional[DeagingModel]]:
    """Frozen extractors for the configured modalities, from this run or from checkpoints"""
    modalities = ctx.cfg.dcml.modalities
    race = deaging = None
    if 'race' in modalities:
        race = trained.get('race') or _load_stage(ctx, 'race', new_race_encoder(ctx.cfg))
    if 'deaging' in modalities:
        deaging = trained.get('deaging') or _load_stage(ctx, 'deaging', new_deaging_model(ctx.cfg))
    return race, deaging

def train_pipeline(cfg: RunConfig, dataset: Optional[List[FaceSample]] = None) -> PipelineResult:
    """Run the enabled stages in order; stage 3 also evaluates the configured fold(s)"""
    with T.precision(cfg.precision):
        ctx = build_context(cfg, dataset)
        save_config(cfg, ctx.out_dir / "config.json")
        result = PipelineResult(out_dir=ctx.out_dir)
        trained: Dict[str, Any] = {}
        if 'race' in cfg.stages:
            trained['race'] = run_race_stage(ctx)
            result.checkpoints['race'] = ctx.checkpoint('race')
        if 'deaging' in cfg.stages:
            trained['deaging'] = run_deaging_stage(ctx)
            result.checkpoints['deaging'] = ctx.checkpoint('deaging')
        if 'dcml' not in cfg.stages:
            return result

        race, deaging = _extractors(ctx, trained)
        before = {name: m.checksum() for name, m in (('race', race), ('deaging', deaging)) if m is not None}
        feats = modality_features(ctx, race, deaging)
        folds = list(range(cfg.num_folds)) if cfg.eval.cross_fold else [cfg.eval.fold]
        reports, log = [], ctx.log('dcml')
        for fold in folds:
            ckpt = ctx.checkpoint('dcml') if fold == cfg.eval.fold else ctx.out_dir / f"dcml.fold{fold}.dck"
            state, history = run_dcml_stage(ctx, feats, fold, log, ckpt)
            result.history.extend(history)
            reports.append(evaluate_state(state, ctx, feats, fold))
        result.checkpoints['dcml'] = ctx.checkpoint('dcml')
        for name, m in (('race', race), ('deaging', deaging)):
            if m is not None:
                result.checksums[name] = {'before': before[name], 'after': m.checksum()}
        result.report = merge_reports(reports, reports[0].metadata)
        result.report.save(ctx.out_dir)
        return result

def evaluate_checkpoint(cfg: RunConfig, checkpoint: Path, fold: int, ks: Sequence[int],
                        dataset: Optional[List[FaceSample]] = None) -> EvalReport:
    """Rebuild the query encoder from a dcml checkpoint and evaluate one fold"""
    cfg = copy.deepcopy(cfg)
    cfg.eval.topk, cfg.eval.fold = list(ks), fold
    with T.precision(cfg.precision):
        ctx = build_context(cfg, dataset)
        race, deaging = _extractors(ctx, {})
        feats = modality_features(ctx, race, deaging)
        c = cfg.dcml
        state = build_contrastive_state(encoder_config(cfg), cfg.seed, c.bank_size, c.m, c.tau, c.lr_schedule)
        try:
            params = storage.load_checkpoint(checkpoint)
        except FileNotFoundError:
            raise DependencyError("dcml checkpoint not found", path=str(checkpoint))
        state.query.load_state_dict(params, prefix="query.")
        report = evaluate_state(state, ctx, feats, fold)
        report.metadata['checkpoint'] = str(checkpoint)
        return report

# ============= ABLATION =============
MODALITY_SETS = {
    'face': ['face'],
    'face+race': ['face', 'race'],
    'face+deaging': ['face', 'deaging'],
    'face+race+deaging': ['face', 'race', 'deaging'],
}
RATIO_GRID = (2, 4, 8, 16)

@dataclass
class AblationEntry:
    label: str
    modalities: List[str]
    r1: float
    r2: float
    fusion_mode: str
    seed: int
    report: EvalReport

    def to_dict(self) -> Dict[str, Any]:
        return {'label': self.label, 'modalities': self.modalities, 'r1': self.r1, 'r2': self.r2,
                'fusion_mode': self.fusion_mode, 'seed': self.seed, 'report': self.report.to_dict()}

def parse_modality_set(text: str) -> List[str]:
    if text in MODALITY_SETS:
        return list(MODALITY_SETS[text])
    parts = [p for p in text.replace(',', '+').split('+') if p]
    if 'face' not in parts or any(p not in ('face', 'race', 'deaging') for p in parts):
        raise ConfigError("modality set must include face and use face/race/deaging", value=text)
    return parts

def ablation_run(cfg: RunConfig, modality_sets: Sequence[Sequence[str]],
                 grid: Optional[Sequence[Tuple[float, float]]] = None,
                 fusion_modes: Sequence[str] = ('adaptive',), seeds: Optional[Sequence[int]] = None,
                 prepare: bool = True, dataset: Optional[List[FaceSample]] = None) -> List[AblationEntry]:
    """Stage-3 runs over modality sets x (r1, r2) grid x fusion modes x seeds.

    Extractor checkpoints are shared from cfg's out dir; with prepare=True the
    missing ones are trained once first.
    """
    grid = list(grid) if grid else [(cfg.dcml.r1, cfg.dcml.r2)]
    seeds = list(seeds) if seeds else [cfg.seed]
    base_out = cfg.out_path()
    entries: List[AblationEntry] = []
    for seed in seeds:
        base = copy.deepcopy(cfg)
        base.seed = seed
        base.paths.out_dir = str(base_out / f"seed{seed}")
        needed = sorted({m for ms in modality_sets for m in ms} - {'face'})
        missing = [s for s in needed if not (Path(base.paths.out_dir) / CHECKPOINTS[s]).exists()]
        if missing:
            if not prepare:
                raise DependencyError("extractor checkpoints missing", stages=missing, out_dir=base.paths.out_dir)
            prep = copy.deepcopy(base)
            prep.stages = missing
            train_pipeline(prep, dataset)
        for modalities, (r1, r2), mode in itertools.product(modality_sets, grid, fusion_modes):
            run = copy.deepcopy(base)
            run.stages = ['dcml']
            run.dcml.modalities, run.dcml.r1, run.dcml.r2, run.dcml.fusion_mode = list(modalities), r1, r2, mode
            label = f"{'+'.join(modalities)}_r1-{r1:g}_r2-{r2:g}_{mode}"
            run.paths.out_dir = str(Path(base.paths.out_dir) / "ablation" / label)
            _link_extractors(Path(base.paths.out_dir), Path(run.paths.out_dir), modalities)
            result = train_pipeline(run, dataset)
            entries.append(AblationEntry(label, list(modalities), r1, r2, mode, seed, result.report))
            logger.info(f"[ABLATE] {label} seed {seed}: top1 {result.report.mean('Avg', cfg.eval.topk[0]):.1f}%")
    atomic_write_json(base_out / "ablation.json", {'config': to_dict(cfg), 'runs': [e.to_dict() for e in entries]})
    return entries

def _link_extractors(src: Path, dst: Path, modalities: Sequence[str]):
    """Copy shared extractor checkpoints into a variant's run dir"""
    for stage in ('race', 'deaging'):
        if stage in modalities:
            payload = (src / CHECKPOINTS[stage]).read_bytes()
            atomic_write_bytes(dst / CHECKPOINTS[stage], payload)

def ablation_table(entries: Sequence[AblationEntry], k: int = 5) -> str:
    """Mean top-k (Avg column) per variant, averaged over seeds"""
    groups: Dict[str, List[float]] = {}
    for e in entries:
        groups.setdefault(e.label, []).append(e.report.mean('Avg', k))
    width = max((len(label) for label in groups), default=7)
    lines = [f"{'variant'.ljust(width)}  top{k} mean   std  runs"]
    for label, values in groups.items():
        lines.append(f"{label.ljust(width)}  {np.mean(values):9.2f}  {np.std(values):5.2f}  {len(values):4d}")
    return '\n'.join(lines)
