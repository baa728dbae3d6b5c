#!/usr/bin/env python3
"""
DCML SYNTHETIC DATA v1.0.0
==========================
Seeded synthetic family images with controllable identity, family, age and
race factors, plus the five-fold family-disjoint protocol.

Rendering: every image is a fixed smooth linear map of
    [member latent | age * age directions | race embedding]
reshaped to HxWxC, offset to mid-grey, plus pixel noise, clipped to [0, 1].
A member latent is the family latent plus individual noise, so kinship is
visible in pixels; age and race enter through their own directions so the
de-aging and race modalities have something real to find.
==========================
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

try:
    from .dcml_shared import ConfigError, DimensionError, FormatError
    from . import dcml_storage as storage
except ImportError:
    from dcml_shared import ConfigError, DimensionError, FormatError
    import dcml_storage as storage

logger = logging.getLogger(__name__)

# Renderer constants (fixed across datasets so every split shares one pixel map)
RENDER_SEED = 20240
LATENT_DIM = 16
AGE_DIM = 4
RACE_DIM = 3
NUM_RACES = 3
MEMBER_SPREAD = 0.6
AGE_STRENGTH = 2.5
RACE_STRENGTH = 2.0
PIXEL_AMPLITUDE = 0.12
PARENT_AGE = (0.55, 0.95)
CHILD_AGE = (0.05, 0.45)
RELATIONS = ('F-S', 'F-D', 'M-S', 'M-D')

# ============= SAMPLES =============
@dataclass
class FaceSample:
    image: np.ndarray
    person_id: int
    family_id: int
    generation: str              # 'parent' | 'child'
    age: float
    race: int
    gender: str = 'M'            # 'M' | 'F'
    latent: Optional[np.ndarray] = None

    def annotations(self) -> Dict[str, Any]:
        return {
            'person_id': int(self.person_id),
            'family_id': int(self.family_id),
            'generation': self.generation,
            'age': float(self.age),
            'race': int(self.race),
            'gender': self.gender,
            'latent': [float(v) for v in self.latent] if self.latent is not None else None,
        }

# ============= RENDERER =============
class FaceRenderer:
    """Fixed smooth linear map from factor vectors to images"""

    def __init__(self, image_size: int = 64, channels: int = 3, latent_dim: int = LATENT_DIM,
                 seed: int = RENDER_SEED):
        if image_size < 4 or channels < 1 or latent_dim < 1:
            raise ConfigError("invalid renderer sizes", image_size=image_size, channels=channels)
        self.image_size, self.channels, self.latent_dim = image_size, channels, latent_dim
        rng = np.random.default_rng(seed)
        self.input_dim = latent_dim + AGE_DIM + RACE_DIM
        self.basis = np.stack([self._smooth_pattern(rng) for _ in range(self.input_dim)], axis=1)
        self.age_directions = rng.standard_normal(AGE_DIM)
        self.age_directions /= np.linalg.norm(self.age_directions)
        q, _ = np.linalg.qr(rng.standard_normal((RACE_DIM, RACE_DIM)))
        self.race_embeddings = q[:NUM_RACES] * RACE_STRENGTH

    def _smooth_pattern(self, rng: np.random.Generator) -> np.ndarray:
        size = self.image_size
        yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing='ij')
        pattern = np.zeros((size, size, self.channels))
        for _ in range(4):
            fy, fx = rng.integers(0, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
            pattern += wave[:, :, None] * rng.standard_normal(self.channels)
        pattern /= np.sqrt(np.mean(pattern ** 2)) + 1e-12
        return pattern.reshape(-1)

    def factor_vector(self, latent: np.ndarray, age: float, race: int) -> np.ndarray:
        return np.concatenate([latent, age * AGE_STRENGTH * self.age_directions, self.race_embeddings[race]])

    def render(self, latent: np.ndarray, age: float, race: int, noise_level: float,
               rng: np.random.Generator) -> np.ndarray:
        v = self.factor_vector(latent, age, race)
        flat = 0.5 + PIXEL_AMPLITUDE * (self.basis @ v) / np.sqrt(self.input_dim)
        flat = flat + noise_level * rng.standard_normal(flat.shape)
        image = np.clip(flat, 0.0, 1.0).reshape(self.image_size, self.image_size, self.channels)
        return image.astype(np.float32)

_RENDERERS: Dict[Tuple[int, int, int], FaceRenderer] = {}

def get_renderer(image_size: int, channels: int = 3, latent_dim: int = LATENT_DIM) -> FaceRenderer:
    key = (image_size, channels, latent_dim)
    if key not in _RENDERERS:
        _RENDERERS[key] = FaceRenderer(image_size, channels, latent_dim)
    return _RENDERERS[key]

# ============= GENERATORS =============
def _family_roles(members: int, rng: np.random.Generator) -> List[Tuple[str, str]]:
    """(generation, gender) per member: father, mother, then children"""
    if members == 2:
        return [('parent', str(rng.choice(['M', 'F']))), ('child', str(rng.choice(['M', 'F'])))]
    roles = [('parent', 'M'), ('parent', 'F')]
    roles += [('child', str(rng.choice(['M', 'F']))) for _ in range(members - 2)]
    return roles

def generate_family_dataset(seed: int, num_families: int, members_per_family: int,
                            image_size: int = 64, noise_level: float = 0.05,
                            channels: int = 3, latent_dim: int = LATENT_DIM) -> List[FaceSample]:
    """Deterministic list of FaceSamples, family by family"""
    if num_families < 2 or members_per_family < 2:
        raise ConfigError("need at least 2 families and 2 members per family",
                          num_families=num_families, members_per_family=members_per_family)
    if noise_level < 0:
        raise ConfigError("noise_level must be non-negative", noise_level=noise_level)
    renderer = get_renderer(image_size, channels, latent_dim)
    samples: List[FaceSample] = []
    person_id = 0
    for family in range(num_families):
        family_rng = np.random.default_rng([seed, family])
        family_latent = family_rng.standard_normal(latent_dim)
        race = int(family_rng.integers(0, NUM_RACES))
        for member, (generation, gender) in enumerate(_family_roles(members_per_family, family_rng)):
            rng = np.random.default_rng([seed, family, member])
            latent = family_latent + MEMBER_SPREAD * rng.standard_normal(latent_dim)
            low, high = PARENT_AGE if generation == 'parent' else CHILD_AGE
            age = float(rng.uniform(low, high))
            image = renderer.render(latent, age, race, noise_level, rng)
            samples.append(FaceSample(image, person_id, family, generation, age, race, gender, latent))
            person_id += 1
    logger.info(f"[DATA] Generated {len(samples)} samples in {num_families} families (seed {seed})")
    return samples

def generate_age_series(seed: int, num_identities: int, images_per_identity: int,
                        image_size: int = 64, noise_level: float = 0.05,
                        channels: int = 3, latent_dim: int = LATENT_DIM) -> List[FaceSample]:
    """Unrelated identities, each rendered across the age range (race/de-aging training set)"""
    if num_identities < 2 or images_per_identity < 2:
        raise ConfigError("need at least 2 identities with 2 images each",
                          num_identities=num_identities, images_per_identity=images_per_identity)
    renderer = get_renderer(image_size, channels, latent_dim)
    samples: List[FaceSample] = []
    for identity in range(num_identities):
        id_rng = np.random.default_rng([seed, 1_000_003, identity])
        latent = id_rng.standard_normal(latent_dim) * np.sqrt(1 + MEMBER_SPREAD ** 2)
        race = int(id_rng.integers(0, NUM_RACES))
        gender = str(id_rng.choice(['M', 'F']))
        for k in range(images_per_identity):
            rng = np.random.default_rng([seed, 1_000_003, identity, k])
            age = float(np.clip((k + rng.uniform()) / images_per_identity, 0.0, 1.0))
            image = renderer.render(latent, age, race, noise_level, rng)
            generation = 'parent' if age >= 0.5 else 'child'
            samples.append(FaceSample(image, identity, identity, generation, age, race, gender, latent))
    return samples

def stack_images(samples: Sequence[FaceSample]) -> np.ndarray:
    return np.stack([s.image for s in samples], axis=0)

# ============= PERSISTENCE =============
def save_dataset(out_dir: Path, samples: List[FaceSample], config: Dict[str, Any]):
    storage.save_dataset_dir(out_dir, samples, {'config': config, 'relations': list(RELATIONS)})

def load_dataset(data_dir: Path) -> List[FaceSample]:
    meta = storage.load_dataset_meta(data_dir)
    samples = []
    for record in meta.get('samples', []):
        image = storage.load_tns(Path(data_dir) / record['file'])
        latent = np.asarray(record['latent']) if record.get('latent') is not None else None
        samples.append(FaceSample(image, record['person_id'], record['family_id'], record['generation'],
                                  record['age'], record['race'], record.get('gender', 'M'), latent))
    if not samples:
        raise FormatError("dataset has no samples", path=str(data_dir))
    return samples

# ============= PROTOCOL =============
@dataclass(frozen=True)
class KinPair:
    parent: int          # sample index
    child: int           # sample index
    family_id: int
    relation: str        # F-S | F-D | M-S | M-D

def relation_of(parent: FaceSample, child: FaceSample) -> str:
    return f"{'F' if parent.gender == 'M' else 'M'}-{'S' if child.gender == 'M' else 'D'}"

@dataclass
class Protocol:
    seed: int
    folds: List[List[int]]                  # family ids per fold
    positive_pairs: List[KinPair]
    family_of: Dict[int, int] = field(default_factory=dict)   # sample index -> family id

    @property
    def num_folds(self) -> int:
        return len(self.folds)

    def _check_fold(self, fold: int):
        if not 0 <= fold < self.num_folds:
            raise ConfigError("fold out of range", fold=fold, num_folds=self.num_folds)

    def test_families(self, fold: int) -> List[int]:
        self._check_fold(fold)
        return list(self.folds[fold])

    def train_families(self, fold: int) -> List[int]:
        self._check_fold(fold)
        return [f for k, fam in enumerate(self.folds) if k != fold for f in fam]

    def pairs(self, fold: int, split: str) -> List[KinPair]:
        """Positive (parent, child) pairs of the train or test side of a fold"""
        if split not in ('train', 'test'):
            raise ConfigError("split must be 'train' or 'test'", split=split)
        families = set(self.test_families(fold) if split == 'test' else self.train_families(fold))
        return [p for p in self.positive_pairs if p.family_id in families]

    def negative_pairs(self, fold: int, split: str, epoch: int = 0) -> List[Tuple[int, int]]:
        """Each parent once, matched to a random child from another family"""
        positives = self.pairs(fold, split)
        parents = sorted({p.parent for p in positives})
        children = sorted({p.child for p in positives})
        rng = np.random.default_rng([self.seed, fold, epoch, 0 if split == 'train' else 1])
        negatives = []
        for parent in parents:
            candidates = [c for c in children if self.family_of[c] != self.family_of[parent]]
            if not candidates:
                continue
            negatives.append((parent, int(candidates[rng.integers(0, len(candidates))])))
        return negatives

    def batches(self, fold: int, batch_size: int, epoch: int) -> Iterator[List[KinPair]]:
        """Shuffled training batches of positive pairs; the rest of each batch and
        the memory bank act as the N negatives of the 1:N rule"""
        pairs = self.pairs(fold, 'train')
        order = np.random.default_rng([self.seed, fold, epoch, 7]).permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            chunk = [pairs[i] for i in order[start:start + batch_size]]
            if len(chunk) >= 2:
                yield chunk

def make_protocol(dataset: Sequence[FaceSample], seed: int, num_folds: int = 5) -> Protocol:
    """Family-disjoint folds; fold k is the 20% test side, the others the 80% train side"""
    families = sorted({s.family_id for s in dataset})
    if len(families) < num_folds:
        raise ConfigError("too few families for the fold count", families=len(families), folds=num_folds)
    rng = np.random.default_rng([seed, 5])
    shuffled = [families[i] for i in rng.permutation(len(families))]
    folds = [sorted(int(f) for f in chunk) for chunk in np.array_split(np.array(shuffled), num_folds)]

    members: Dict[int, List[int]] = {}
    for index, sample in enumerate(dataset):
        members.setdefault(sample.family_id, []).append(index)
    pairs = []
    for family in families:
        parents = [i for i in members[family] if dataset[i].generation == 'parent']
        children = [i for i in members[family] if dataset[i].generation == 'child']
        for p in parents:
            for c in children:
                pairs.append(KinPair(p, c, family, relation_of(dataset[p], dataset[c])))
    family_of = {i: s.family_id for i, s in enumerate(dataset)}
    return Protocol(seed=seed, folds=folds, positive_pairs=pairs, family_of=family_of)

# ============= SANITY MEASUREMENTS =============
def family_latent_distances(seed: int, num_families: int, members_per_family: int = 4,
                            latent_dim: int = LATENT_DIM) -> Tuple[np.ndarray, np.ndarray]:
    """Within-family and between-family member latent distances (no rendering)"""
    within, between = [], []
    previous = None
    for family in range(num_families):
        rng = np.random.default_rng([seed, family])
        base = rng.standard_normal(latent_dim)
        latents = base + MEMBER_SPREAD * rng.standard_normal((members_per_family, latent_dim))
        within.append(np.linalg.norm(latents[0] - latents[1]))
        if previous is not None:
            between.append(np.linalg.norm(latents[0] - previous))
        previous = latents[-1]
    return np.asarray(within), np.asarray(between)

def pair_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Probability a positive outranks a negative (ties count half)"""
    pos = np.asarray(pos_scores, dtype=np.float64)[:, None]
    neg = np.asarray(neg_scores, dtype=np.float64)[None, :]
    if pos.size == 0 or neg.size == 0:
        raise DimensionError("AUC needs positive and negative scores", pos=pos.size, neg=neg.size)
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))

def latent_pair_auc(dataset: Sequence[FaceSample], protocol: Protocol, fold: int = 0,
                    split: str = 'train') -> float:
    """Oracle scoring on ground-truth latents: negative latent distance as the score"""
    def score(a: int, b: int) -> float:
        return -float(np.linalg.norm(dataset[a].latent - dataset[b].latent))
    pos = [score(p.parent, p.child) for p in protocol.pairs(fold, split)]
    neg = [score(a, b) for a, b in protocol.negative_pairs(fold, split)]
    return pair_auc(pos, neg)
