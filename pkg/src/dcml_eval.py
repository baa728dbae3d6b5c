#!/usr/bin/env python3
"""
DCML EVALUATION v1.0.0
======================
Retrieval-style top-k accuracy. Each test parent queries the gallery of all
test children in its fold; a positive pair is a hit at k when its true child
ranks within the top k by cosine similarity. The parent's other children are left
out of its ranking, and ties with any remaining child count as misses.
ACC@k = TP / P * 100, the verification accuracy (TP + TN) / (P + N) with TN = N = 0.

Reports carry F-S, F-D, M-S, M-D and Avg cells per fold, plus mean and std
across folds, as JSON and as an aligned text table.
======================
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

try:
    from .dcml_shared import FLAGS, DimensionError, ConfigError, atomic_write_json, atomic_write_text
    from .dcml_synth import RELATIONS, Protocol
except ImportError:
    from dcml_shared import FLAGS, DimensionError, ConfigError, atomic_write_json, atomic_write_text
    from dcml_synth import RELATIONS, Protocol

logger = logging.getLogger(__name__)

AVG = 'Avg'
COLUMNS = RELATIONS + (AVG,)

# ============= METRIC =============
def verification_accuracy(tp: int, tn: int, p: int, n: int) -> float:
    """(TP + TN) / (P + N) * 100"""
    if p + n <= 0:
        raise DimensionError("accuracy needs at least one sample", p=p, n=n)
    return 100.0 * (tp + tn) / (p + n)

def accuracy(tp: int, p: int) -> float:
    return verification_accuracy(tp, 0, p, 0)

def topk_hits(queries: np.ndarray, gallery: np.ndarray, targets: Sequence[int], k: int,
              exclude: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean hit per query: fewer than k other gallery items score at least as high
    as the true item. Ties count against the query, so a collapsed encoder scores no
    better than chance. `exclude` (queries x gallery) drops the query's other true
    items from the competition.
    """
    queries, gallery = np.atleast_2d(queries), np.atleast_2d(gallery)
    if queries.shape[1] != gallery.shape[1]:
        raise DimensionError("query and gallery widths differ", query=queries.shape, gallery=gallery.shape)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size != queries.shape[0]:
        raise DimensionError("one target per query required", queries=queries.shape[0], targets=targets.size)
    sims = queries @ gallery.T
    rows = np.arange(targets.size)
    competing = sims >= sims[rows, targets][:, None]
    competing[rows, targets] = False
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != sims.shape:
            raise DimensionError("exclude mask must be queries x gallery", mask=exclude.shape, sims=sims.shape)
        competing &= ~exclude
    return competing.sum(axis=1) < k

# ============= REPORTS =============
@dataclass
class FoldReport:
    fold: int
    cells: Dict[str, Dict[int, float]]          # column -> k -> accuracy %
    counts: Dict[str, int]                      # positive pairs per relation
    gallery_size: int
    effective_k: Dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'fold': self.fold,
            'gallery_size': self.gallery_size,
            'counts': dict(self.counts),
            'effective_k': {str(k): v for k, v in self.effective_k.items()},
            'cells': {col: {f"top{k}": v for k, v in ks.items()} for col, ks in self.cells.items()},
        }

@dataclass
class EvalReport:
    ks: List[int]
    folds: List[FoldReport]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def _values(self, column: str, k: int) -> np.ndarray:
        return np.array([f.cells[column][k] for f in self.folds if column in f.cells])

    def mean(self, column: str = AVG, k: int = 1) -> float:
        values = self._values(column, k)
        return float(values.mean()) if values.size else float('nan')

    def std(self, column: str = AVG, k: int = 1) -> float:
        values = self._values(column, k)
        return float(values.std()) if values.size else float('nan')

    def summary(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        out: Dict[str, Dict[str, Dict[str, float]]] = {}
        for col in COLUMNS:
            if not any(col in f.cells for f in self.folds):
                continue
            out[col] = {f"top{k}": {'mean': self.mean(col, k), 'std': self.std(col, k)} for k in self.ks}
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            'ks': list(self.ks),
            'metadata': dict(self.metadata),
            'folds': [f.to_dict() for f in self.folds],
            'summary': self.summary(),
        }

    def to_text(self) -> str:
        """Aligned table: one row per fold and top-k, relation columns then Avg"""
        header = ['fold', 'k'] + list(COLUMNS)
        rows = []
        for f in self.folds:
            for k in self.ks:
                rows.append([str(f.fold), f"top{k}"] + [
                    f"{f.cells[c][k]:.2f}" if c in f.cells else '-' for c in COLUMNS])
        if len(self.folds) > 1:
            for k in self.ks:
                rows.append(['mean', f"top{k}"] + [
                    f"{self.mean(c, k):.2f}+-{self.std(c, k):.2f}" if any(c in f.cells for f in self.folds)
                    else '-' for c in COLUMNS])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ['  '.join(h.rjust(w) for h, w in zip(header, widths))]
        lines.append('  '.join('-' * w for w in widths))
        lines += ['  '.join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        return '\n'.join(lines)

    def save(self, out_dir: Path, name: str = "eval"):
        atomic_write_json(Path(out_dir) / f"{name}.json", self.to_dict())
        atomic_write_text(Path(out_dir) / f"{name}.txt", self.to_text() + "\n")

# ============= EVALUATION =============
Embeddings = Union[np.ndarray, Mapping[int, np.ndarray]]

def evaluate_fold(embeddings: Embeddings, protocol: Protocol, fold: int, ks: Sequence[int]) -> FoldReport:
    """Top-k accuracy of parent-to-child retrieval on one fold's test side.

    `embeddings` is indexed by dataset sample index (array rows or a mapping)
    and must hold unit-norm vectors for every test parent and child.
    """
    if not ks or min(ks) < 1:
        raise ConfigError("top-k values must be positive", ks=list(ks))
    pairs = protocol.pairs(fold, 'test')
    if not pairs:
        raise DimensionError("test fold has no positive pairs", fold=fold)
    children = sorted({p.child for p in pairs})
    position = {c: i for i, c in enumerate(children)}
    gallery = np.stack([np.asarray(embeddings[c]) for c in children])
    queries = np.stack([np.asarray(embeddings[p.parent]) for p in pairs])
    targets = [position[p.child] for p in pairs]
    relations = np.array([p.relation for p in pairs])
    # a parent's other children are also correct answers; they do not compete
    siblings = np.zeros((len(pairs), len(children)), dtype=bool)
    for i, p in enumerate(pairs):
        for other in pairs:
            if other.parent == p.parent and other.child != p.child:
                siblings[i, position[other.child]] = True

    cells: Dict[str, Dict[int, float]] = {}
    effective: Dict[int, int] = {}
    for k in ks:
        k_eff = min(k, len(children))
        if k_eff < k:
            FLAGS.raise_flag("k_clamped", f"top-{k} clamped to gallery size {len(children)}")
        effective[k] = k_eff
        hits = topk_hits(queries, gallery, targets, k_eff, exclude=siblings)
        relation_cells = []
        for rel in RELATIONS:
            mask = relations == rel
            if mask.any():
                cells.setdefault(rel, {})[k] = accuracy(int(hits[mask].sum()), int(mask.sum()))
                relation_cells.append(cells[rel][k])
        cells.setdefault(AVG, {})[k] = float(np.mean(relation_cells))
    counts = {rel: int(np.sum(relations == rel)) for rel in RELATIONS}
    return FoldReport(fold=fold, cells=cells, counts=counts, gallery_size=len(children), effective_k=effective)

def evaluate_topk(embeddings: Embeddings, protocol: Protocol, folds: Union[int, Sequence[int]],
                  ks: Sequence[int] = (1, 5), metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    folds = [folds] if isinstance(folds, int) else list(folds)
    reports = [evaluate_fold(embeddings, protocol, f, ks) for f in folds]
    report = EvalReport(ks=list(ks), folds=reports, metadata=dict(metadata or {}))
    for f in reports:
        logger.info(f"[EVAL] fold {f.fold}: " + ", ".join(f"top{k} {f.cells[AVG][k]:.1f}%" for k in ks))
    return report

def merge_reports(reports: Sequence[EvalReport], metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Combine per-fold reports (e.g. one training run per fold) into one"""
    if not reports:
        raise DimensionError("nothing to merge")
    ks = reports[0].ks
    return EvalReport(ks=list(ks), folds=[f for r in reports for f in r.folds], metadata=dict(metadata or {}))

def random_baseline(gallery_size: int, k: int = 1) -> float:
    """Expected top-k accuracy of a random ranking, in %"""
    return 100.0 * min(k, gallery_size) / gallery_size
