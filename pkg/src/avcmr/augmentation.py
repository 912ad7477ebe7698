"""Synthetic embedding points by same-class linear interpolation, and hard mining over them.

For a same-class pair ``(x_i, x_j)`` and an integer ``gamma`` the synthetic
points are ``x_k = (k * x_i + (gamma - k) * x_j) / gamma`` for
``k = 1..gamma`` (so ``k = gamma`` reproduces ``x_i``), each then scaled to
unit L2 norm.
"""

import warnings
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .errors import AdvisoryWarning, AugmentationLabelError, DimensionError
from .numeric import l2_normalize_rows, l2_normalize_rows_backward
from .triplets import Modality, TripletCategory, mine_pools

DEFAULT_MAX_PAIRS = 16


@dataclass
class SyntheticPointSet:
    source_pair: tuple
    modality: Modality
    gamma: int
    points: np.ndarray  # (gamma, dim)
    raw_points: np.ndarray  # before normalization
    normalized: bool = True
    degenerate: np.ndarray = None

    def __len__(self):
        return self.points.shape[0]


def interpolation_weights(gamma):
    """``(w_i, w_j)`` arrays of length ``gamma``: ``k/gamma`` and ``(gamma-k)/gamma``."""
    k = np.arange(1, gamma + 1, dtype=np.float64)
    return k / gamma, (gamma - k) / gamma


def _interpolate_raw(x_i, x_j, gamma):
    w_i, w_j = interpolation_weights(gamma)
    idx = np.zeros(gamma, dtype=np.int64)
    return synthesize(np.stack([x_i, x_j]), idx, idx + 1, w_i, w_j, normalize=False)[1]


def interpolate(x_i, x_j, gamma, label_i=None, label_j=None, normalize=True,
                source_pair=(0, 0), modality=Modality.AUDIO):
    """Generate ``gamma`` synthetic points between two same-class embeddings."""
    x_i = np.asarray(x_i, dtype=np.float64).reshape(-1)
    x_j = np.asarray(x_j, dtype=np.float64).reshape(-1)
    if x_i.shape != x_j.shape:
        raise DimensionError(f"endpoints have shapes {x_i.shape} and {x_j.shape}")
    if label_i is not None and label_j is not None and label_i != label_j:
        raise AugmentationLabelError(
            f"cannot interpolate across classes ({label_i} vs {label_j})"
        )
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        empty = np.zeros((0, x_i.size))
        return SyntheticPointSet(source_pair, modality, 0, empty, empty, normalize,
                                 np.zeros(0, dtype=bool))
    raw = _interpolate_raw(x_i, x_j, gamma)
    if normalize:
        pts, degenerate, _ = l2_normalize_rows(raw)
    else:
        pts, degenerate = raw.copy(), np.zeros(gamma, dtype=bool)
    return SyntheticPointSet(source_pair, modality, gamma, pts, raw, normalize, degenerate)


@dataclass
class SyntheticPoints:
    """Synthetic points of one modality plus their provenance."""

    points: np.ndarray
    labels: np.ndarray
    source_i: np.ndarray
    source_j: np.ndarray
    weight_i: np.ndarray
    weight_j: np.ndarray
    raw: np.ndarray = None  # before normalization
    normalized: bool = False
    advisories: list = field(default_factory=list)

    @classmethod
    def empty(cls, dim):
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, dim)), z, z, z, np.zeros(0), np.zeros(0), np.zeros((0, dim)))

    def __len__(self):
        return self.points.shape[0]


def select_pairs(members, max_pairs, rng):
    """All index pairs ``(i, j)``, ``i < j``, from ``members``; at most ``max_pairs``."""
    pairs = list(combinations(members.tolist(), 2))
    if max_pairs is not None and len(pairs) > max_pairs:
        keep = np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[k] for k in keep]
    return pairs


def synthesize(embeddings, source_i, source_j, weight_i, weight_j, normalize=True):
    """Synthetic points ``w_i * x[source_i] + w_j * x[source_j]`` (then normalized).

    Returns ``(points, raw)``.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    x_i = emb[source_i]
    x_j = emb[source_j]
    raw = weight_i[:, None] * x_i + weight_j[:, None] * x_j
    # Keep points on the closed segment despite rounding (exact when x_i == x_j).
    raw = np.clip(raw, np.minimum(x_i, x_j), np.maximum(x_i, x_j))
    points = l2_normalize_rows(raw)[0] if normalize else raw.copy()
    return points, raw


def augment_class(embeddings, labels, modality, gamma, max_pairs=DEFAULT_MAX_PAIRS,
                  rng=None, normalize=True):
    """Synthetic points for every class of one modality.

    Pairs are drawn per class in ascending class order; a class with a
    single member contributes nothing and is reported in ``advisories``.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if gamma <= 0:
        return SyntheticPoints.empty(emb.shape[1])
    rng = rng if rng is not None else np.random.default_rng(0)
    w_i, w_j = interpolation_weights(gamma)

    pairs, labs, notes = [], [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            notes.append(
                f"{Modality(modality).name.lower()} class {c}: single member, no pair to interpolate"
            )
            continue
        for pair in select_pairs(members, max_pairs, rng):
            pairs.append(pair)
            labs.append(c)
    for note in notes:
        warnings.warn(note, AdvisoryWarning, stacklevel=2)
    if not pairs:
        out = SyntheticPoints.empty(emb.shape[1])
        out.advisories = notes
        return out
    pairs = np.asarray(pairs, dtype=np.int64)
    src_i = np.repeat(pairs[:, 0], gamma)
    src_j = np.repeat(pairs[:, 1], gamma)
    wi = np.tile(w_i, len(pairs))
    wj = np.tile(w_j, len(pairs))
    points, raw = synthesize(emb, src_i, src_j, wi, wj, normalize)
    return SyntheticPoints(
        points, np.repeat(np.asarray(labs, dtype=labels.dtype), gamma), src_i, src_j,
        wi, wj, raw, normalize, notes,
    )


def rebuild(syn, embeddings):
    """Same provenance as ``syn`` but points recomputed from new source embeddings."""
    if len(syn) == 0:
        return syn
    points, raw = synthesize(embeddings, syn.source_i, syn.source_j, syn.weight_i,
                             syn.weight_j, syn.normalized)
    return replace(syn, points=points, raw=raw)


@dataclass
class AugmentedBatch:
    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray
    synthetic_audio: SyntheticPoints
    synthetic_visual: SyntheticPoints
    gamma: int = 0

    @property
    def n_real(self):
        return self.audio.shape[0]

    @property
    def audio_pool(self):
        return np.concatenate([self.audio, self.synthetic_audio.points])

    @property
    def visual_pool(self):
        return np.concatenate([self.visual, self.synthetic_visual.points])

    @property
    def audio_pool_labels(self):
        return np.concatenate([self.labels, self.synthetic_audio.labels])

    @property
    def visual_pool_labels(self):
        return np.concatenate([self.labels, self.synthetic_visual.labels])

    def provenance(self, modality):
        """Boolean mask over the pool of ``modality``: True for synthetic rows."""
        syn = self.synthetic_audio if modality == Modality.AUDIO else self.synthetic_visual
        return np.concatenate([np.zeros(self.n_real, dtype=bool), np.ones(len(syn), dtype=bool)])


def augment_batch(audio, visual, labels, gamma, max_pairs=DEFAULT_MAX_PAIRS, rng=None,
                  normalize=True):
    """Build an :class:`AugmentedBatch`; with ``gamma == 0`` it holds only the real points."""
    audio = np.asarray(audio, dtype=np.float64)
    visual = np.asarray(visual, dtype=np.float64)
    labels = np.asarray(labels)
    rng = rng if rng is not None else np.random.default_rng(0)
    syn_a = augment_class(audio, labels, Modality.AUDIO, gamma, max_pairs, rng, normalize)
    syn_v = augment_class(visual, labels, Modality.VISUAL, gamma, max_pairs, rng, normalize)
    return AugmentedBatch(audio, visual, labels, syn_a, syn_v, gamma)


def mine_hard_augmented(batch, margin):
    """Hard triplets over real and synthetic points, with real anchors only."""
    n = batch.n_real
    return mine_pools(
        batch.audio_pool, batch.audio_pool_labels,
        batch.visual_pool, batch.visual_pool_labels,
        (n, n), margin, TripletCategory.HARD,
    )


def synthetic_backward(syn, grad_points, n_real):
    """Route gradients on synthetic points back to their real source rows.

    Differentiates the normalization (when applied) and the convex
    combination; the segment clipping is treated as the identity.
    """
    g = np.asarray(grad_points, dtype=np.float64)
    out = np.zeros((n_real, g.shape[1]))
    if len(syn) == 0:
        return out
    if syn.normalized:
        unit, degenerate, norms = l2_normalize_rows(syn.raw)
        g = l2_normalize_rows_backward(unit, norms, degenerate, g)
    np.add.at(out, syn.source_i, syn.weight_i[:, None] * g)
    np.add.at(out, syn.source_j, syn.weight_j[:, None] * g)
    return out
