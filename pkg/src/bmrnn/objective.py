"""Storyline-constrained compatibility scoring and the contrastive loss.

A predicted sequence H and a sentence sequence V are scored by a weighted
sum of a global term (dot products along the timeline) and a local term
(per-sub-story means), where the sub-stories come from skip detection on
the photo stream.  Training pushes the score of the true pair above the
scores of sampled negative pairs by a margin, hinge-style, on both sides:
wrong sentences for the true photos, and wrong photos for the true
sentences.

Sequences of different lengths (negatives usually differ) are scored over
the common prefix.  The gradient is taken with respect to H only; negative
photo-stream predictions are treated as cached constants by the caller.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeMismatchError
from .numeric import SeededRng

__all__ = [
    "SubStoryPartition",
    "CompatibilityConfig",
    "SentenceSequence",
    "LossResult",
    "NegativeDraw",
    "compatibility",
    "compatibility_grad",
    "contrastive_loss",
    "sample_negatives",
]


@dataclass
class SubStoryPartition:
    """Disjoint groups of 0-based timestep indices (one group per sub-story)."""

    groups: list[list[int]]

    def __post_init__(self):
        seen: set[int] = set()
        cleaned = []
        for g in self.groups:
            members = sorted(int(i) for i in g)
            if not members:
                raise DataError("sub-story group must be non-empty")
            if members[0] < 0:
                raise DataError(f"negative timestep index {members[0]} in partition")
            overlap = seen.intersection(members)
            if overlap:
                raise DataError(f"timestep {min(overlap)} appears in more than one group")
            seen.update(members)
            cleaned.append(members)
        self.groups = cleaned

    @classmethod
    def from_clusters(cls, clusters: list[list[int]]) -> "SubStoryPartition":
        """Build from skip-detection clusters (singletons included)."""
        return cls(groups=[list(c) for c in clusters])


@dataclass
class CompatibilityConfig:
    alpha: float = 0.5
    gamma: float = 0.2
    negatives_per_positive: int = 127
    local_term_mode: str = "aligned"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.negatives_per_positive < 1:
            raise ConfigError(
                f"negatives_per_positive must be >= 1, got {self.negatives_per_positive}"
            )
        if self.local_term_mode not in ("aligned", "all-pairs"):
            raise ConfigError(
                f"local_term_mode must be 'aligned' or 'all-pairs', got {self.local_term_mode!r}"
            )


@dataclass
class SentenceSequence:
    """One story's sentence embeddings v_t."""

    story_id: str
    v: list[np.ndarray]

    def __post_init__(self):
        if len(self.v) < 1:
            raise DataError("sentence sequence must contain at least one step",
                            story_id=self.story_id)
        dim = self.v[0].shape
        for u in self.v[1:]:
            if u.shape != dim:
                raise ShapeMismatchError("sentence_sequence", dim, u.shape)

    @property
    def N(self) -> int:
        return len(self.v)


def _check_inputs(H, V: SentenceSequence) -> int:
    if len(H) < 1:
        raise DataError("compatibility needs a non-empty predicted sequence")
    if H[0].shape != V.v[0].shape:
        raise ShapeMismatchError("compatibility", H[0].shape, V.v[0].shape)
    # mismatched lengths (negatives usually differ) score the common prefix;
    # partition members beyond it simply do not contribute
    return min(len(H), V.N)


def compatibility(
    H: list[np.ndarray],
    V: SentenceSequence,
    partition: SubStoryPartition,
    cfg: CompatibilityConfig,
) -> float:
    """alpha-weighted global + per-sub-story local score over the common prefix."""
    L = _check_inputs(H, V)
    glob = sum(float(np.dot(H[t], V.v[t])) for t in range(L))
    local = 0.0
    for g in partition.groups:
        n_i = len(g)
        inside = [t for t in g if t < L]
        if cfg.local_term_mode == "aligned":
            local += sum(float(np.dot(H[t], V.v[t])) for t in inside) / n_i
        else:  # all-pairs
            local += sum(
                float(np.dot(H[a], V.v[b])) for a in inside for b in inside
            ) / n_i
    return cfg.alpha * glob + (1.0 - cfg.alpha) * local


def compatibility_grad(
    H: list[np.ndarray],
    V: SentenceSequence,
    partition: SubStoryPartition,
    cfg: CompatibilityConfig,
) -> list[np.ndarray]:
    """d compatibility / d h_t for every timestep of H."""
    L = _check_inputs(H, V)
    grad = [np.zeros_like(h) for h in H]
    for t in range(L):
        grad[t] += cfg.alpha * V.v[t]
    for g in partition.groups:
        n_i = len(g)
        inside = [t for t in g if t < L]
        if cfg.local_term_mode == "aligned":
            for t in inside:
                grad[t] += (1.0 - cfg.alpha) / n_i * V.v[t]
        else:
            v_sum = sum((V.v[b] for b in inside), start=np.zeros_like(H[0]))
            for a in inside:
                grad[a] += (1.0 - cfg.alpha) / n_i * v_sum
    return grad


@dataclass
class LossResult:
    loss: float
    dH: list[np.ndarray]
    active_v_hinges: int = 0
    active_h_hinges: int = 0


def contrastive_loss(
    H: list[np.ndarray],
    V: SentenceSequence,
    negatives_V: list[SentenceSequence],
    negatives_H: list[list[np.ndarray]],
    partition: SubStoryPartition,
    cfg: CompatibilityConfig,
) -> LossResult:
    """Two-sided margin loss and its exact subgradient w.r.t. H.

    loss = sum_{V'} max(0, gamma - c(H,V) + c(H,V'))
         + sum_{H'} max(0, gamma - c(H,V) + c(H',V))

    Hinges exactly at the boundary take the zero branch.  The H' sequences
    are constants here (the trainer refreshes them once per epoch), so only
    the -c(H,V) part of an active H'-hinge contributes to dH.
    """
    if len(negatives_V) != cfg.negatives_per_positive:
        raise ConfigError(
            f"expected {cfg.negatives_per_positive} sentence negatives, got {len(negatives_V)}"
        )
    if len(negatives_H) != cfg.negatives_per_positive:
        raise ConfigError(
            f"expected {cfg.negatives_per_positive} stream negatives, got {len(negatives_H)}"
        )

    base = compatibility(H, V, partition, cfg)
    base_grad = compatibility_grad(H, V, partition, cfg)

    loss = 0.0
    dH = [np.zeros_like(h) for h in H]
    active_v = active_h = 0

    for Vp in negatives_V:
        # grouped so an equal-scoring negative cancels exactly (hinge == gamma)
        hinge = cfg.gamma + (compatibility(H, Vp, partition, cfg) - base)
        if hinge > 0.0:
            loss += hinge
            active_v += 1
            neg_grad = compatibility_grad(H, Vp, partition, cfg)
            for t in range(len(H)):
                dH[t] += neg_grad[t] - base_grad[t]

    for Hp in negatives_H:
        # the sub-story structure lives on the positive pair's timeline, so
        # c(H', V) reuses the same partition over the common prefix
        hinge = cfg.gamma + (compatibility(Hp, V, partition, cfg) - base)
        if hinge > 0.0:
            loss += hinge
            active_h += 1
            for t in range(len(H)):
                dH[t] -= base_grad[t]

    return LossResult(loss=loss, dH=dH, active_v_hinges=active_v, active_h_hinges=active_h)


@dataclass
class NegativeDraw:
    """Stories drawn as negatives; V' and H' come from the same draw."""

    neg_V: list
    neg_H_sources: list


def sample_negatives(dataset, positive_id: str, count: int, rng: SeededRng) -> NegativeDraw:
    """Uniformly draw ``count`` distinct stories, never the positive one.

    ``dataset`` maps story_id -> record; the same drawn records serve as
    both the sentence-side and the stream-side negatives.  If fewer than
    ``count`` other stories exist, sampling falls back to replacement with
    a warning.
    """
    others = [sid for sid in dataset if sid != positive_id]
    if not others:
        raise DataError("cannot sample negatives from a single-story dataset")
    if len(others) >= count:
        idx = rng.choice_without_replacement(len(others), count)
        chosen = [others[i] for i in idx]
    else:
        warnings.warn(
            f"only {len(others)} candidate negatives for {count} requested; "
            "sampling with replacement",
            stacklevel=2,
        )
        chosen = [others[rng.integers(0, len(others))] for _ in range(count)]
    records = [dataset[sid] for sid in chosen]
    return NegativeDraw(neg_V=records, neg_H_sources=list(records))
