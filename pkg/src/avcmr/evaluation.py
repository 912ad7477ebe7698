"""Cross-modal retrieval metrics: ranked lists, AP, AP@k and MAP."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AdvisoryWarning, DimensionError


@dataclass
class RankedList:
    order: np.ndarray  # gallery indices, most similar first
    relevance: np.ndarray  # bool, aligned with order
    scores: np.ndarray  # similarity, aligned with order
    query_label: int = None


def similarity(query, gallery, metric="euclidean"):
    """Similarity of ``query`` (d,) or (q, d) to every gallery row; larger is closer."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("gallery is empty")
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    if metric == "euclidean":
        s = -np.sqrt(np.sum((q[:, None, :] - g[None, :, :]) ** 2, axis=2))
    elif metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        s = qn @ gn.T
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return s


def _rank(scores):
    # Stable sort on negated scores: equal scores keep ascending gallery index.
    return np.argsort(-scores, axis=-1, kind="stable")


def rank_gallery(query_emb, gallery_embs, query_label=None, gallery_labels=None, metric="euclidean"):
    s = similarity(query_emb, gallery_embs, metric)[0]
    order = _rank(s)
    if gallery_labels is not None and query_label is not None:
        rel = np.asarray(gallery_labels)[order] == query_label
    else:
        rel = np.zeros(order.size, dtype=bool)
    return RankedList(order, rel, s[order], query_label)


def average_precision(relevance, k=None):
    """AP of a ranked relevance vector.

    Full AP divides the summed precision-at-hit by the number of relevant
    items ``R``. With a cutoff ``k`` only the first ``k`` ranks are scanned
    and the sum is divided by ``min(R, k)``. Zero relevant items gives 0.0
    with an advisory.
    """
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        warnings.warn("query has no relevant gallery item; AP defined as 0", AdvisoryWarning, stacklevel=2)
        return 0.0
    if k is not None:
        if k < 1:
            raise ValueError("k must be >= 1")
        denom = min(n_rel, k)
        rel = rel[:k]
    else:
        denom = n_rel
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum((hits / ranks)[rel]) / denom)


def _ap_rows(rel):
    """Full AP for each row of a boolean relevance matrix (rows already ranked)."""
    hits = np.cumsum(rel, axis=1)
    prec = hits / np.arange(1, rel.shape[1] + 1)
    n_rel = rel.sum(axis=1)
    total = np.where(rel, prec, 0.0).sum(axis=1)
    return np.divide(total, n_rel, out=np.zeros(rel.shape[0]), where=n_rel > 0), n_rel


def per_query_ap(query_emb, query_labels, gallery_emb, gallery_labels, metric="euclidean"):
    s = similarity(query_emb, gallery_emb, metric)
    order = _rank(s)
    rel = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    ap, n_rel = _ap_rows(rel)
    missing = int(np.sum(n_rel == 0))
    if missing:
        warnings.warn(
            f"{missing} queries have no relevant gallery item; their AP is 0",
            AdvisoryWarning, stacklevel=2,
        )
    return ap


@dataclass
class RetrievalReport:
    ap_audio_to_visual: np.ndarray
    ap_visual_to_audio: np.ndarray = None
    ap_at_k: dict = field(default_factory=dict)

    @property
    def map_audio_to_visual(self):
        return float(np.mean(self.ap_audio_to_visual))

    @property
    def map_visual_to_audio(self):
        return float(np.mean(self.ap_visual_to_audio))

    @property
    def map_average(self):
        return (self.map_audio_to_visual + self.map_visual_to_audio) / 2.0

    def summary(self):
        return (
            f"audio->visual MAP {self.map_audio_to_visual:.3f}  "
            f"visual->audio MAP {self.map_visual_to_audio:.3f}  "
            f"average {self.map_average:.3f}"
        )

    def to_csv(self, path, comments=()):
        with open(path, "w") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            fh.write("direction,query,ap\n")
            for name, aps in (("a2v", self.ap_audio_to_visual), ("v2a", self.ap_visual_to_audio)):
                for i, ap in enumerate(aps):
                    fh.write(f"{name},{i},{ap!r}\n")
            fh.write(f"map,a2v,{self.map_audio_to_visual!r}\n")
            fh.write(f"map,v2a,{self.map_visual_to_audio!r}\n")
            fh.write(f"map,average,{self.map_average!r}\n")


def mean_average_precision(query_emb, query_labels, gallery_emb, gallery_labels, metric="euclidean"):
    """MAP of one retrieval direction (mean of full-list per-query APs)."""
    return float(np.mean(per_query_ap(query_emb, query_labels, gallery_emb, gallery_labels, metric)))


def evaluate_retrieval(audio_emb, visual_emb, labels, metric="euclidean"):
    """Both directions over a paired set: audio queries vs the visual gallery and vice versa."""
    labels = np.asarray(labels)
    return RetrievalReport(
        per_query_ap(audio_emb, labels, visual_emb, labels, metric),
        per_query_ap(visual_emb, labels, audio_emb, labels, metric),
    )


def case_study(query_emb, query_label, gallery_emb, gallery_labels, k=5, gallery_ids=None,
               metric="euclidean", title="query"):
    """Text dump of the top-``k`` gallery items for one query.

    The first line is a header carrying AP@k; each following line is one
    retrieved item with a match mark.
    """
    gallery_labels = np.asarray(gallery_labels)
    if not 1 <= k <= len(gallery_labels):
        raise ValueError(f"k must be in [1, {len(gallery_labels)}], got {k}")
    ranked = rank_gallery(query_emb, gallery_emb, query_label, gallery_labels, metric)
    ids = np.arange(len(gallery_labels)) if gallery_ids is None else np.asarray(gallery_ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdvisoryWarning)
        ap = average_precision(ranked.relevance, k=k)
    lines = [f"# {title} label={query_label} AP@{k}={ap:.4f}"]
    for r in range(k):
        g = ranked.order[r]
        mark = "MATCH" if ranked.relevance[r] else "MISS"
        lines.append(
            f"{r + 1}\tid={ids[g]}\tlabel={gallery_labels[g]}\tscore={ranked.scores[r]:.6f}\t{mark}"
        )
    return "\n".join(lines) + "\n", ap
