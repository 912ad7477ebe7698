"""Two-stage curriculum training: semi-hard triplets first, then hard triplets
mined over an interpolation-augmented embedding set.

The per-batch objective is ``label_loss(audio) + label_loss(visual) +
triplet_weight * triplet_loss``.
"""

import csv
import io
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from .augmentation import (
    AugmentedBatch,
    augment_batch,
    mine_hard_augmented,
    rebuild,
    synthetic_backward,
)
from .data import PairedDataset, split
from .errors import AdvisoryWarning, NumericalDivergenceError, PoisonedGradientError
from .evaluation import evaluate_retrieval
from .model import ModelPair, label_loss, save_checkpoint
from .numeric import (
    Optimizer,
    finite_diff_check,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)
from .triplets import TripletCategory, mine_triplets, triplet_loss

log = logging.getLogger(__name__)


class Stage(str, Enum):
    SEMIHARD = "semihard"
    HARD = "hard"  # hard triplets over the augmented embedding set
    ALL = "all"  # no category filter


SCHEDULES = {
    "semi-to-hard": (Stage.SEMIHARD, Stage.HARD),
    "semi-only": (Stage.SEMIHARD, Stage.SEMIHARD),
    "hard-only": (Stage.HARD, Stage.HARD),
    "hard-to-semi": (Stage.HARD, Stage.SEMIHARD),
    "hard-to-all": (Stage.HARD, Stage.ALL),
}


@dataclass
class TrainConfig:
    margin: float = 0.2
    gamma: int = 2
    total_epochs: int = 200
    stage_switch_epoch: Optional[int] = None  # None -> total_epochs // 2
    batch_size: int = 400
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 10
    augmentation_enabled: bool = True
    gradient_flow_through_synthetics: bool = False
    normalize_augmented: bool = True
    max_pairs_per_class: int = 16
    triplet_weight: float = 1.0
    reset_optimizer_at_switch: bool = False
    hidden_dim: int = 32
    n_hidden: int = 3
    metric: str = "euclidean"

    def __post_init__(self):
        if self.stage_switch_epoch is None:
            self.stage_switch_epoch = max(1, self.total_epochs // 2)

    @property
    def effective_gamma(self):
        return self.gamma if self.augmentation_enabled else 0

    def validate(self):
        if not 0 < self.stage_switch_epoch < self.total_epochs:
            raise ValueError(
                f"stage_switch_epoch must satisfy 0 < {self.stage_switch_epoch} < "
                f"total_epochs={self.total_epochs}"
            )
        if self.batch_size < 4:
            raise ValueError(f"batch_size must be >= 4 (got {self.batch_size})")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        return self


def stage_for_epoch(epoch, switch_epoch, schedule=SCHEDULES["semi-to-hard"]):
    """Epochs ``[1, switch)`` use the first stage, ``[switch, total]`` the second."""
    return schedule[0] if epoch < switch_epoch else schedule[1]


# --- per-batch objective ----------------------------------------------------


class BatchPlan(NamedTuple):
    """Triplet selection (and synthetic provenance) frozen at one parameter snapshot."""

    triplets: object
    synthetic_audio: object = None
    synthetic_visual: object = None
    normalizer: Optional[int] = None  # active-triplet count at the snapshot
    clamp: bool = True  # False: triplets are the frozen active set, hinge unclamped


@dataclass
class BatchResult:
    label_loss: float
    triplet_loss: float
    total_loss: float
    census: dict
    n_triplets: int
    grads: list
    plan: BatchPlan
    degenerate: bool = False
    n_active: int = 0
    active: np.ndarray = None


def batch_objective(models, audio, visual, labels, stage, config, rng=None, plan=None,
                    with_grad=True):
    """Forward, mine, and backward for one batch.

    With ``plan`` given, mining is skipped and the frozen triplets (and
    synthetic provenance) are re-evaluated at the current parameters.
    ``with_grad=False`` skips every backward computation (``grads`` is None).
    """
    stage = Stage(stage)
    A = models.audio_net.forward(audio)
    V = models.visual_net.forward(visual)
    la, ga = label_loss(A, labels)
    lv, gv = label_loss(V, labels)
    w = config.triplet_weight

    if stage is Stage.HARD:
        if config.normalize_augmented:
            An, deg_a, norm_a = l2_normalize_rows(A)
            Vn, deg_v, norm_v = l2_normalize_rows(V)
        else:
            An, Vn = A, V
        if plan is None:
            aug = augment_batch(
                An, Vn, labels, config.effective_gamma, config.max_pairs_per_class, rng,
                normalize=True,
            )
            triplets = mine_hard_augmented(aug, config.margin)
            plan = BatchPlan(triplets, aug.synthetic_audio, aug.synthetic_visual)
        else:
            syn_a, syn_v = plan.synthetic_audio, plan.synthetic_visual
            if config.gradient_flow_through_synthetics:
                syn_a, syn_v = rebuild(syn_a, An), rebuild(syn_v, Vn)
            # otherwise synthetic points stay the constants they were at mining time
            aug = AugmentedBatch(An, Vn, np.asarray(labels), syn_a, syn_v, config.effective_gamma)
            triplets = plan.triplets
        tl = triplet_loss(triplets, aug.audio_pool, aug.visual_pool, config.margin, with_grad,
                          plan.normalizer, plan.clamp)
        if not with_grad:
            return _result(la + lv, w * tl.loss, triplets, None, plan, tl)
        n = aug.n_real
        g_an = tl.grad_audio[:n].copy()
        g_vn = tl.grad_visual[:n].copy()
        if config.gradient_flow_through_synthetics:
            g_an += synthetic_backward(aug.synthetic_audio, tl.grad_audio[n:], n)
            g_vn += synthetic_backward(aug.synthetic_visual, tl.grad_visual[n:], n)
        if config.normalize_augmented:
            g_ta = l2_normalize_rows_backward(An, norm_a, deg_a, g_an)
            g_tv = l2_normalize_rows_backward(Vn, norm_v, deg_v, g_vn)
        else:
            g_ta, g_tv = g_an, g_vn
    else:
        if plan is None:
            filt = TripletCategory.SEMIHARD if stage is Stage.SEMIHARD else None
            triplets = mine_triplets(A, V, labels, config.margin, filt)
            plan = BatchPlan(triplets)
        triplets = plan.triplets
        tl = triplet_loss(triplets, A, V, config.margin, with_grad, plan.normalizer,
                          plan.clamp)
        if not with_grad:
            return _result(la + lv, w * tl.loss, triplets, None, plan, tl)
        g_ta, g_tv = tl.grad_audio, tl.grad_visual

    grads = models.audio_net.backward(ga + w * g_ta) + models.visual_net.backward(gv + w * g_tv)
    return _result(la + lv, w * tl.loss, triplets, grads, plan, tl)


def _result(label_term, trip_term, triplets, grads, plan, tl):
    return BatchResult(
        label_term, trip_term, label_term + trip_term, dict(triplets.census),
        len(triplets), grads, plan, triplets.degenerate, tl.n_active, tl.active,
    )


# --- logging ----------------------------------------------------------------

CSV_COLUMNS = [
    "epoch", "stage", "label_loss", "triplet_loss", "total_loss",
    "n_easy", "n_semihard", "n_hard", "map_a2v", "map_v2a", "map_avg",
]


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    label_loss: float
    triplet_loss: float
    total_loss: float
    n_easy: int
    n_semihard: int
    n_hard: int
    map_a2v: Optional[float] = None
    map_v2a: Optional[float] = None
    map_avg: Optional[float] = None


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    advisories: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def stages(self):
        return [r.stage for r in self.records]

    def evaluated(self):
        return [r for r in self.records if r.map_avg is not None]

    @property
    def final_map(self):
        ev = self.evaluated()
        return ev[-1].map_avg if ev else None

    def to_csv(self, path=None, header=None):
        """Serialize; ``header`` lines are written first as ``#`` comments."""
        buf = io.StringIO()
        for line in header or []:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            row = asdict(r)
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in CSV_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# --- loops -------------------------------------------------------------------


@dataclass
class EpochStats:
    label_loss: float
    triplet_loss: float
    total_loss: float
    census: dict
    n_triplets: int
    degenerate_batches: int
    n_batches: int


def iterate_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_epoch(models, optimizer, data, stage, config, rng):
    """One pass over ``data`` (a :class:`PairedDataset`) with seeded shuffling."""
    names = models.parameter_names()
    params = models.parameters()
    ll, tl = [], []
    census = {c: 0 for c in TripletCategory}
    n_trip = degenerate = n_batches = 0
    for idx in iterate_batches(len(data), config.batch_size, rng):
        res = batch_objective(models, data.audio[idx], data.visual[idx], data.labels[idx],
                              stage, config, rng)
        optimizer.step(params, res.grads, names)
        ll.append(res.label_loss)
        tl.append(res.triplet_loss)
        for c in TripletCategory:
            census[c] += res.census[c]
        n_trip += res.n_triplets
        degenerate += res.degenerate or res.n_triplets == 0
        n_batches += 1
    label_mean = float(np.mean(ll))
    trip_mean = float(np.mean(tl))
    return EpochStats(label_mean, trip_mean, label_mean + trip_mean, census, n_trip,
                      degenerate, n_batches)


def _with_split(data):
    if data.train_mask is None:
        data = split(data)
    return data


def _should_eval(epoch, config):
    return epoch == 1 or epoch % config.eval_every == 0 or epoch == config.total_epochs


def evaluate_models(models, data, metric="euclidean"):
    A, V = models.embed(data.audio, data.visual)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdvisoryWarning)
        return evaluate_retrieval(A, V, data.labels, metric)


def run_schedule(data, config, schedule, models=None, checkpoint_dir=None, eval_data=None):
    """Train with ``schedule = (first_stage, second_stage)``. Returns ``(models, MetricsLog)``."""
    config.validate()
    data = _with_split(data)
    train = data.train
    test = eval_data if eval_data is not None else (data.test if (~data.train_mask).any() else train)
    if models is None:
        models = ModelPair.build(data.audio_dim, data.visual_dim, config.hidden_dim,
                                 data.num_classes, seed=config.seed, n_hidden=config.n_hidden)
    opt = Optimizer(config.optimizer, config.learning_rate)
    metrics = MetricsLog()
    names = {Stage.SEMIHARD: "semihard", Stage.HARD: "hard", Stage.ALL: "all"}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdvisoryWarning)
        for epoch in range(1, config.total_epochs + 1):
            stage = stage_for_epoch(epoch, config.stage_switch_epoch, schedule)
            if epoch == config.stage_switch_epoch:
                if checkpoint_dir:
                    save_checkpoint(models, os.path.join(checkpoint_dir, "stage1.npz"),
                                    {"epoch": epoch - 1})
                if config.reset_optimizer_at_switch:
                    opt.reset()
            rng = np.random.default_rng([config.seed, epoch])
            try:
                stats = train_epoch(models, opt, train, stage, config, rng)
            except PoisonedGradientError as exc:
                raise NumericalDivergenceError(epoch, f"gradient ({exc.name})") from exc
            if not np.isfinite(stats.total_loss):
                raise NumericalDivergenceError(epoch)
            if stats.degenerate_batches == stats.n_batches:
                note = f"epoch {epoch}: no triplets mined in any batch; label loss only"
                metrics.advisories.append(note)
                log.info(note)
            rec = EpochRecord(
                epoch, names[stage], stats.label_loss, stats.triplet_loss, stats.total_loss,
                stats.census[TripletCategory.EASY], stats.census[TripletCategory.SEMIHARD],
                stats.census[TripletCategory.HARD],
            )
            if _should_eval(epoch, config):
                rep = evaluate_models(models, test, config.metric)
                rec.map_a2v = rep.map_audio_to_visual
                rec.map_v2a = rep.map_visual_to_audio
                rec.map_avg = rep.map_average
                log.debug("epoch %d %s loss %.4f map %.4f", epoch, rec.stage, rec.total_loss, rec.map_avg)
            metrics.append(rec)
    if checkpoint_dir:
        save_checkpoint(models, os.path.join(checkpoint_dir, "final.npz"),
                        {"epoch": config.total_epochs})
    return models, metrics


def run_curriculum(data, config, checkpoint_dir=None):
    """Semi-hard stage, then hard mining over the augmented set."""
    return run_schedule(data, config, SCHEDULES["semi-to-hard"], checkpoint_dir=checkpoint_dir)


def run_ablation(data, config, mode, checkpoint_dir=None):
    if mode not in SCHEDULES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {sorted(SCHEDULES)}")
    return run_schedule(data, config, SCHEDULES[mode], checkpoint_dir=checkpoint_dir)[1]


def run_gamma_ablation(data, config, gammas=(0, 1, 2, 4), path=None):
    """Run the curriculum once per ``gamma`` and tabulate the final MAPs."""
    rows = []
    for g in gammas:
        _, m = run_curriculum(data, replace(config, gamma=g))
        last = m.evaluated()[-1]
        rows.append({"gamma": g, "map_a2v": last.map_a2v, "map_v2a": last.map_v2a,
                     "map_avg": last.map_avg})
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["gamma", "map_a2v", "map_v2a", "map_avg"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    if path is not None:
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
    return rows, buf.getvalue()


# --- gradient verification ------------------------------------------------------


def gradient_check(models, audio, visual, labels, config, stages=(Stage.ALL, Stage.SEMIHARD, Stage.HARD),
                   h=1e-4, corrupt=False):
    """Max relative error between analytic and central-difference gradients.

    Each stage's triplet selection, active hinges and loss divisor are frozen
    at the starting parameters, so the checked objective is smooth away from
    ReLU kinks. ``corrupt`` perturbs the
    analytic gradient (detector self-test).
    """
    worst = {}
    for stage in stages:
        rng = np.random.default_rng(config.seed)
        start = batch_objective(models, audio, visual, labels, stage, config, rng)
        plan = start.plan
        if start.active is not None:
            plan = plan._replace(triplets=plan.triplets.subset(start.active),
                                 normalizer=max(start.n_active, 1), clamp=False)

        def loss_fn(net, batch, stage=stage, plan=plan):
            res = batch_objective(net, *batch, stage, config, plan=plan)
            grads = res.grads
            if corrupt:
                grads = [g.copy() for g in grads]
                grads[0].flat[0] += 1.0
            return res.total_loss, grads

        def value_fn(net, batch, stage=stage, plan=plan):
            return batch_objective(net, *batch, stage, config, plan=plan, with_grad=False).total_loss

        worst[Stage(stage).value] = finite_diff_check(
            models, loss_fn, (audio, visual, labels), h, value_fn
        )
    return worst


CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
