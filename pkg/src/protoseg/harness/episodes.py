"""Episode sampling: k-fold splits, Setting-1/2 filtering, pools.

Slices are split into k folds; test classes rotate over folds round-robin
in sorted class order. Setting-1 only keeps test slices out of the
training pool; Setting-2 additionally drops every training image that
contains any test-fold class, so test classes never appear in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..segmenter import Episode
from .superpixels import pseudo_labels


def kfold_split(slice_ids, k: int, seed) -> list:
    """Deterministic near-equal partition of slice ids into k folds."""
    ids = list(slice_ids)
    if k < 1 or k > len(ids):
        raise ConfigError(f"cannot split {len(ids)} slices into {k} folds")
    order = np.array(ids, dtype=np.int64)
    np.random.default_rng(seed).shuffle(order)
    return [fold.tolist() for fold in np.array_split(order, k)]


def fold_classes(class_ids, fold: int, k: int) -> set:
    """Test classes of a fold: sorted ids dealt round-robin over folds."""
    return {c for i, c in enumerate(sorted(class_ids)) if i % k == fold}


@dataclass
class _Entry:
    slice_id: int
    classes: frozenset


class EpisodeSampler:
    """Draws training episodes and enumerates evaluation episodes.

    source="labels" uses phantom ground-truth masks; source="pseudo"
    replaces the mask with a superpixel pseudo-label and reuses the support
    slice as its own query (self-supervised flavor, no augmentation).
    """

    def __init__(self, phantoms, folds: int, fold: int, setting: int, seed,
                 source: str = "labels"):
        if setting not in (1, 2):
            raise ConfigError(f"setting must be 1 or 2, got {setting}")
        if source not in ("labels", "pseudo"):
            raise ConfigError(f"episode source must be labels or pseudo, got {source!r}")
        if not 0 <= fold < folds:
            raise ConfigError(f"fold {fold} out of range for {folds} folds")
        self.phantoms = {p.id: p for p in phantoms}
        self.setting = setting
        self.fold = fold
        self.source = source
        self.seed = seed
        self.folds = kfold_split(sorted(self.phantoms), folds, seed)
        all_classes = sorted({c for p in phantoms for c in p.class_ids})
        self.test_classes = fold_classes(all_classes, fold, folds)
        test_ids = set(self.folds[fold])
        self.test_entries = [
            _Entry(p.id, frozenset(p.class_ids))
            for p in phantoms if p.id in test_ids
        ]
        self.train_entries = []
        for p in phantoms:
            if p.id in test_ids:
                continue
            if setting == 2 and set(p.class_ids) & self.test_classes:
                continue
            self.train_entries.append(_Entry(p.id, frozenset(p.class_ids)))
        self._by_class = {}
        for e in self.train_entries:
            for c in sorted(e.classes):
                if setting == 2 and c in self.test_classes:
                    continue
                self._by_class.setdefault(c, []).append(e.slice_id)
        if not self._by_class:
            raise ConfigError(
                f"empty training pool for setting {setting}, fold {fold}: every "
                f"candidate image contains a test class from {sorted(self.test_classes)}"
            )

    def sample(self, rng: np.random.Generator) -> Episode:
        """One training episode; deterministic given the rng state."""
        classes = sorted(self._by_class)
        cid = classes[int(rng.integers(len(classes)))]
        slices = self._by_class[cid]
        s_idx = int(rng.integers(len(slices)))
        if len(slices) >= 2:
            q_idx = int(rng.integers(len(slices) - 1))
            if q_idx >= s_idx:
                q_idx += 1
        else:
            q_idx = s_idx
        return self._make(cid, slices[s_idx], slices[q_idx])

    def _make(self, cid: int, sid: int, qid: int) -> Episode:
        sup = self.phantoms[sid]
        qry = self.phantoms[qid]
        if self.source == "pseudo":
            mask = pseudo_labels(sup.image, [int(self.seed), int(sid), int(cid)])
            return Episode(sup.image, mask, sup.image, mask,
                           class_id=-1, support_id=sid, query_id=sid)
        return Episode(sup.image, sup.masks[cid], qry.image, qry.masks[cid],
                       class_id=cid, support_id=sid, query_id=qid)

    def evaluation_episodes(self) -> list:
        """All test episodes of this fold: for each test class, every test
        slice containing it serves as query, supported by the next such
        slice in id order. Classes with fewer than two carriers are skipped
        (a lone slice would have to support itself)."""
        episodes = []
        for cid in sorted(self.test_classes):
            carriers = sorted(e.slice_id for e in self.test_entries if cid in e.classes)
            if len(carriers) < 2:
                continue
            for i, qid in enumerate(carriers):
                sid = carriers[(i + 1) % len(carriers)]
                sup, qry = self.phantoms[sid], self.phantoms[qid]
                episodes.append(Episode(sup.image, sup.masks[cid], qry.image,
                                        qry.masks[cid], class_id=cid,
                                        support_id=sid, query_id=qid))
        return episodes
