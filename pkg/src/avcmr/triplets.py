"""Cross-modal triplet categorization, in-batch mining and the hinge triplet loss.

Categories, for anchor-positive distance ``d_ap`` and anchor-negative
distance ``d_an``:

* easy:      ``d_an > d_ap + margin``  (hinge inactive)
* semi-hard: ``d_ap <= d_an <= d_ap + margin``
* hard:      ``d_an < d_ap``

Boundary ties go to semi-hard.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .errors import DimensionError


class Modality(IntEnum):
    AUDIO = 0
    VISUAL = 1

    @property
    def other(self):
        return Modality(1 - self)


class TripletCategory(IntEnum):
    EASY = 0
    SEMIHARD = 1
    HARD = 2


def distance(x, y):
    """Euclidean distance between two vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"cannot compare vectors of shape {x.shape} and {y.shape}")
    return float(np.sqrt(np.sum((x - y) ** 2)))


def pairwise_distances(a, b):
    """Euclidean distance matrix between the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"row dims differ: {a.shape[1]} vs {b.shape[1]}")
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2))


def classify_triplet(d_ap, d_an, margin):
    if d_ap < 0 or d_an < 0:
        raise ValueError(f"distances must be non-negative, got d_ap={d_ap}, d_an={d_an}")
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if d_an > d_ap + margin:
        return TripletCategory.EASY
    if d_an < d_ap:
        return TripletCategory.HARD
    return TripletCategory.SEMIHARD


def classify_array(d_ap, d_an, margin):
    """Vectorized :func:`classify_triplet` over broadcastable arrays (int codes)."""
    easy = d_an > d_ap + margin
    hard = d_an < d_ap
    cat = np.full(easy.shape, int(TripletCategory.SEMIHARD), dtype=np.int8)
    cat[easy] = TripletCategory.EASY
    cat[hard] = TripletCategory.HARD
    return cat


@dataclass(frozen=True)
class Triplet:
    anchor_modality: Modality
    anchor: int
    positive: int
    negative: int
    d_ap: float
    d_an: float
    category: TripletCategory
    positive_synthetic: bool = False
    negative_synthetic: bool = False

    @property
    def candidate_modality(self):
        return self.anchor_modality.other


def _empty_int():
    return np.zeros(0, dtype=np.int64)


@dataclass
class TripletSet:
    """Mined triplets stored column-wise.

    ``positive`` and ``negative`` index the candidate pool of the modality
    opposite the anchor; pool rows at or beyond ``n_real[modality]`` are
    synthetic points. Rows are ordered by (anchor modality, anchor,
    positive, negative).
    """

    anchor_modality: np.ndarray = field(default_factory=_empty_int)
    anchor: np.ndarray = field(default_factory=_empty_int)
    positive: np.ndarray = field(default_factory=_empty_int)
    negative: np.ndarray = field(default_factory=_empty_int)
    d_ap: np.ndarray = field(default_factory=lambda: np.zeros(0))
    d_an: np.ndarray = field(default_factory=lambda: np.zeros(0))
    category: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    n_real: tuple = (0, 0)
    census: dict = field(default_factory=lambda: {c: 0 for c in TripletCategory})
    degenerate: bool = False

    def __len__(self):
        return len(self.anchor)

    def __iter__(self):
        for i in range(len(self)):
            m = Modality(int(self.anchor_modality[i]))
            cut = self.n_real[m.other]
            yield Triplet(
                m,
                int(self.anchor[i]),
                int(self.positive[i]),
                int(self.negative[i]),
                float(self.d_ap[i]),
                float(self.d_an[i]),
                TripletCategory(int(self.category[i])),
                bool(self.positive[i] >= cut),
                bool(self.negative[i] >= cut),
            )

    def keys(self):
        """Set of ``(anchor_modality, anchor, positive, negative, category)`` tuples."""
        return set(
            zip(
                self.anchor_modality.tolist(),
                self.anchor.tolist(),
                self.positive.tolist(),
                self.negative.tolist(),
                self.category.tolist(),
            )
        )

    def subset(self, mask):
        """Rows selected by a boolean mask (census and flags carried over)."""
        cols = {k: getattr(self, k)[mask] for k in
                ("anchor_modality", "anchor", "positive", "negative", "d_ap", "d_an", "category")}
        return TripletSet(**cols, n_real=self.n_real, census=dict(self.census),
                          degenerate=self.degenerate)

    def synthetic_mask(self):
        cut = np.where(self.anchor_modality == Modality.AUDIO, self.n_real[1], self.n_real[0])
        return self.positive >= cut, self.negative >= cut


def _mine_direction(anchors, anchor_labels, pool, pool_labels, margin, filter):
    """Triplets for one anchor modality, ordered by (anchor, positive, negative)."""
    cols = [[] for _ in range(6)]
    census = np.zeros(3, dtype=np.int64)
    for c in np.unique(anchor_labels):
        anc = np.flatnonzero(anchor_labels == c)
        same = pool_labels == c
        pos = np.flatnonzero(same)
        neg = np.flatnonzero(~same)
        if pos.size == 0 or neg.size == 0:
            continue
        d = np.sqrt(np.sum((anchors[anc][:, None, :] - pool[None, :, :]) ** 2, axis=2))
        d_ap = d[:, pos]
        d_an = d[:, neg]
        # Same rules as classify_array, without materializing a category grid.
        hard = d_an[:, None, :] < d_ap[:, :, None]
        easy = d_an[:, None, :] > d_ap[:, :, None] + margin
        n_hard = np.count_nonzero(hard)
        n_easy = np.count_nonzero(easy)
        census += (n_easy, hard.size - n_easy - n_hard, n_hard)
        if filter is None:
            ai, pi, ni = np.indices(hard.shape).reshape(3, -1)
        elif filter == TripletCategory.HARD:
            ai, pi, ni = np.nonzero(hard)
        elif filter == TripletCategory.EASY:
            ai, pi, ni = np.nonzero(easy)
        else:
            ai, pi, ni = np.nonzero(~(hard | easy))
        if ai.size == 0:
            continue
        cols[0].append(anc[ai])
        cols[1].append(pos[pi])
        cols[2].append(neg[ni])
        cols[3].append(d_ap[ai, pi])
        cols[4].append(d_an[ai, ni])
        if filter is None:
            cols[5].append(classify_array(cols[3][-1], cols[4][-1], margin))
        else:
            cols[5].append(np.full(ai.size, int(filter), dtype=np.int8))
    if cols[0]:
        merged = [np.concatenate(col) for col in cols]
        # Within one anchor rows are already (positive, negative)-ordered.
        order = np.argsort(merged[0], kind="stable")
        cols = [[col[order]] for col in merged]
    return cols, census


def mine_pools(audio_pool, audio_labels, visual_pool, visual_labels, n_real, margin, filter):
    """Mine cross-modal triplets over candidate pools of both modalities.

    Anchors are restricted to the first ``n_real[m]`` rows of each pool;
    positives and negatives may be any pool row of the other modality.
    ``filter`` is a :class:`TripletCategory` or ``None`` for every category.
    """
    pools = (np.asarray(audio_pool, dtype=np.float64), np.asarray(visual_pool, dtype=np.float64))
    labels = (np.asarray(audio_labels), np.asarray(visual_labels))
    if pools[0].shape[1] != pools[1].shape[1]:
        raise DimensionError(
            f"audio embeddings dim {pools[0].shape[1]} != visual embeddings dim {pools[1].shape[1]}"
        )
    for m in Modality:
        if len(labels[m]) != pools[m].shape[0]:
            raise DimensionError(
                f"{m.name.lower()}: {len(labels[m])} labels for {pools[m].shape[0]} embeddings"
            )
    if not margin > 0:
        raise ValueError("margin must be positive")

    real_labels = np.concatenate([labels[0][: n_real[0]], labels[1][: n_real[1]]])
    out = TripletSet(n_real=tuple(n_real))
    if np.unique(real_labels).size < 2:
        out.degenerate = True
        return out

    parts = []
    census = np.zeros(3, dtype=np.int64)
    for m in Modality:
        cols, c = _mine_direction(
            pools[m][: n_real[m]], labels[m][: n_real[m]],
            pools[m.other], labels[m.other], margin, filter,
        )
        census += c
        if cols[0]:
            cat = [np.concatenate(col) for col in cols]
            parts.append((np.full(cat[0].size, int(m), dtype=np.int64), *cat))
    out.census = {cat: int(census[cat]) for cat in TripletCategory}
    if parts:
        out.anchor_modality, out.anchor, out.positive, out.negative, out.d_ap, out.d_an, out.category = (
            np.concatenate(col) for col in zip(*parts)
        )
        out.category = out.category.astype(np.int8)
    return out


def mine_triplets(audio_emb, visual_emb, labels, margin, filter=TripletCategory.SEMIHARD):
    """All cross-modal triplets of a paired batch whose category matches ``filter``.

    Both directions are mined (audio anchors against visual candidates, then
    visual anchors against audio candidates). A batch with fewer than two
    classes yields an empty set with ``degenerate=True``.
    """
    labels = np.asarray(labels)
    audio_emb = np.asarray(audio_emb, dtype=np.float64)
    visual_emb = np.asarray(visual_emb, dtype=np.float64)
    if audio_emb.shape[0] != visual_emb.shape[0] or audio_emb.shape[0] != len(labels):
        raise DimensionError(
            f"unaligned batch: {audio_emb.shape[0]} audio, {visual_emb.shape[0]} visual, "
            f"{len(labels)} labels"
        )
    n = len(labels)
    return mine_pools(audio_emb, labels, visual_emb, labels, (n, n), margin, filter)


class TripletLoss(NamedTuple):
    loss: float
    grad_audio: np.ndarray
    grad_visual: np.ndarray
    n_active: int
    empty: bool
    active: np.ndarray = None  # per-triplet hinge > 0, in set order


def triplet_loss(triplets, audio_pool, visual_pool, margin, with_grad=True, normalizer=None,
                 clamp=True):
    """Mean hinge ``max(0, d_ap - d_an + margin)`` over active triplets.

    Distances are recomputed from the given pools, so ``triplets`` may have
    been mined on an earlier snapshot. Gradients are returned for every row
    of both pools; inactive triplets contribute nothing. An empty triplet
    set gives ``(0, zeros, zeros, 0, True)``. With ``with_grad=False`` the
    gradient arrays are left at zero.

    ``normalizer`` replaces the active count as the divisor. Holding it fixed
    makes the loss continuous in the embeddings (the active count jumps when
    a hinge crosses zero), which is what a finite-difference check needs.
    """
    pools = (np.asarray(audio_pool, dtype=np.float64), np.asarray(visual_pool, dtype=np.float64))
    grads = [np.zeros_like(pools[0]), np.zeros_like(pools[1])]
    if len(triplets) == 0:
        return TripletLoss(0.0, grads[0], grads[1], 0, True)

    # Work per anchor modality on the (anchor x candidate) distance matrix:
    # each triplet adds +1 to the coefficient of d(a, p) and -1 to d(a, n),
    # so the gradient reduces to two matrix products per direction.
    per_dir = []
    n_active = 0
    active_all = np.zeros(len(triplets), dtype=bool)
    for m in Modality:
        sel = np.flatnonzero(triplets.anchor_modality == m)
        if sel.size == 0:
            continue
        anc = triplets.anchor[sel]
        pos = triplets.positive[sel]
        neg = triplets.negative[sel]
        X = pools[m][: anc.max() + 1]
        Y = pools[m.other]
        D = pairwise_distances(X, Y)
        hinge = D[anc, pos] - D[anc, neg] + margin
        active = hinge > 0 if clamp else np.ones(hinge.shape, dtype=bool)
        active_all[sel] = active
        n_active += int(active.sum())
        per_dir.append((m, anc, pos, neg, active, hinge, X, Y, D))

    if n_active == 0:
        return TripletLoss(0.0, grads[0], grads[1], 0, False, active_all)
    denom = n_active if normalizer is None else normalizer

    loss = 0.0
    for m, anc, pos, neg, active, hinge, X, Y, D in per_dir:
        loss += float(hinge[active].sum())
        if not with_grad:
            continue
        size = D.size
        coef = (np.bincount(anc[active] * D.shape[1] + pos[active], minlength=size)
                - np.bincount(anc[active] * D.shape[1] + neg[active], minlength=size))
        coef = coef.reshape(D.shape) / denom
        # d/dx |x - y| is undefined at x == y; use 0 there.
        W = np.divide(coef, D, out=np.zeros_like(D), where=D > 0)
        grads[m][: X.shape[0]] += W.sum(axis=1)[:, None] * X - W @ Y
        grads[m.other] += W.sum(axis=0)[:, None] * Y - W.T @ X
    return TripletLoss(loss / denom, grads[0], grads[1], n_active, False, active_all)
