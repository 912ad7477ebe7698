"""Paired audio/visual feature datasets: synthetic generation, CSV files, splitting."""

import csv
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import AdvisoryWarning, DataFormatError, LabelError
from .triplets import Modality


@dataclass(frozen=True)
class Sample:
    id: int
    modality: Modality
    features: np.ndarray
    label: int


@dataclass
class PairedDataset:
    """Row ``i`` of ``audio`` and ``visual`` form one pair with label ``labels[i]``.

    ``train_mask`` is None until :func:`split` assigns the partition.
    """

    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray = None
    train_mask: np.ndarray = None

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        if self.audio.shape[0] != n or self.visual.shape[0] != n or len(self.ids) != n:
            raise DataFormatError(
                f"unpaired dataset: {self.audio.shape[0]} audio rows, "
                f"{self.visual.shape[0]} visual rows, {n} labels"
            )
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.size:
            raise LabelError(
                f"label {self.labels[bad[0]]} of pair {self.ids[bad[0]]} outside [0, {self.num_classes})"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def audio_dim(self):
        return self.audio.shape[1]

    @property
    def visual_dim(self):
        return self.visual.shape[1]

    def subset(self, mask_or_index):
        return PairedDataset(
            self.audio[mask_or_index], self.visual[mask_or_index], self.labels[mask_or_index],
            self.num_classes, self.ids[mask_or_index],
        )

    @property
    def train(self):
        if self.train_mask is None:
            raise ValueError("dataset has no split; call split() first")
        return self.subset(self.train_mask)

    @property
    def test(self):
        if self.train_mask is None:
            raise ValueError("dataset has no split; call split() first")
        return self.subset(~self.train_mask)


@dataclass(frozen=True)
class SyntheticSpec:
    n_pairs: int = 200
    num_classes: int = 5
    audio_dim: int = 16
    visual_dim: int = 24
    cluster_spread: float = 1.0
    noise_scale: float = 0.3
    seed: int = 7

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.n_pairs < self.num_classes:
            raise ValueError(
                f"n_pairs ({self.n_pairs}) must be >= num_classes ({self.num_classes}) "
                "so every class is populated"
            )
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.audio_dim < 1 or self.visual_dim < 1:
            raise ValueError("feature dims must be positive")


# Standard desk-scale benchmark and its split fraction.
STANDARD_BENCHMARK = SyntheticSpec()
STANDARD_TRAIN_FRACTION = 0.8


def random_orthogonal(rows, cols, rng):
    """A ``rows x cols`` matrix with orthonormal columns (rows >= cols) or rows."""
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def generate_synthetic(spec=STANDARD_BENCHMARK):
    """Clustered audio features and an orthogonally rotated visual copy of the same clusters.

    Class centroids live in the audio coordinate system; each visual feature
    is the image of its class centroid under a fixed random orthogonal map
    plus independent noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centroids = rng.normal(0.0, spec.cluster_spread, size=(spec.num_classes, spec.audio_dim))
    rotation = random_orthogonal(spec.visual_dim, spec.audio_dim, rng)
    labels = rng.permutation(np.arange(spec.n_pairs) % spec.num_classes)
    audio = centroids[labels] + spec.noise_scale * rng.standard_normal((spec.n_pairs, spec.audio_dim))
    visual = centroids[labels] @ rotation.T + spec.noise_scale * rng.standard_normal(
        (spec.n_pairs, spec.visual_dim)
    )
    return PairedDataset(audio, visual, labels, spec.num_classes)


def split(dataset, train_fraction=STANDARD_TRAIN_FRACTION, seed=0):
    """Stratified train/test partition of the pairs.

    Each class with at least two members lands in both splits; a singleton
    class goes to train with an advisory.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(dataset), dtype=bool)
    classes = np.unique(dataset.labels)
    members = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in classes]
    sizes = np.array([m.size for m in members])
    # Largest-remainder allocation: per-class counts within 1 of the exact
    # share while the total matches round(train_fraction * n).
    exact = train_fraction * sizes
    counts = np.floor(exact).astype(int)
    short = int(round(train_fraction * sizes.sum())) - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: max(short, 0)]] += 1
    for c, m, n_train in zip(classes, members, counts):
        if m.size == 1:
            warnings.warn(f"class {c} has a single pair; assigned to train", AdvisoryWarning, stacklevel=2)
            mask[m] = True
            continue
        n_train = min(max(n_train, 1), m.size - 1)
        mask[m[:n_train]] = True
    return replace(dataset, train_mask=mask)


# --- CSV feature files -----------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_features(path, ids, labels, features, comments=()):
    """Write ``id,label,f0..f{d-1}`` rows; floats use shortest round-trip repr.

    ``comments`` are written first as ``#`` lines.
    """
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{k}" for k in range(features.shape[1])])
        for i, y, row in zip(ids, labels, features):
            w.writerow([int(i), int(y)] + [_fmt(v) for v in row])


def _parse_int(text, what, path, line):
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{path}:{line}: {what} {text!r} is not an integer") from None


def load_features(path, modality, expected_dim=None):
    """Read a feature CSV into a list of :class:`Sample`."""
    modality = Modality[modality.upper()] if isinstance(modality, str) else Modality(modality)
    samples = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    first = 0
    while first < len(lines) and lines[first].startswith("#"):
        first += 1
    reader = csv.reader(lines[first:])
    header = next(reader, None)
    if header is None or header[:2] != ["id", "label"]:
        raise DataFormatError(f"{path}:{first + 1}: header must start with 'id,label'")
    dim = len(header) - 2
    if header[2:] != [f"f{k}" for k in range(dim)]:
        raise DataFormatError(f"{path}:{first + 1}: feature columns must be named f0..f{dim - 1}")
    if expected_dim is not None and dim != expected_dim:
        raise DataFormatError(
            f"{path}: {modality.name.lower()} features have dim {dim}, expected {expected_dim}"
        )
    for line, row in enumerate(reader, start=first + 2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise DataFormatError(
                f"{path}:{line}: row has {len(row) - 2} features, header declares {dim}"
            )
        sid = _parse_int(row[0], "id", path, line)
        label = _parse_int(row[1], "label", path, line)
        try:
            feats = np.array([float(v) for v in row[2:]], dtype=np.float64)
        except ValueError:
            raise DataFormatError(f"{path}:{line}: non-numeric feature value") from None
        samples.append(Sample(sid, modality, feats, label))
    return samples


def pair_samples(audio_samples, visual_samples, num_classes):
    """Join two sample lists on ``id`` into a :class:`PairedDataset` (ordered by audio file)."""
    vis = {s.id: s for s in visual_samples}
    if len(vis) != len(visual_samples):
        raise DataFormatError("duplicate ids in visual features")
    audio, visual, labels, ids = [], [], [], []
    for s in audio_samples:
        v = vis.pop(s.id, None)
        if v is None:
            raise DataFormatError(f"audio id {s.id} has no visual counterpart")
        if v.label != s.label:
            raise DataFormatError(f"pair {s.id}: audio label {s.label} != visual label {v.label}")
        audio.append(s.features)
        visual.append(v.features)
        labels.append(s.label)
        ids.append(s.id)
    if vis:
        raise DataFormatError(f"visual ids without audio counterpart: {sorted(vis)[:5]}")
    if not ids:
        raise DataFormatError("no samples")
    return PairedDataset(np.array(audio), np.array(visual), np.array(labels), num_classes, np.array(ids))


# --- manifest --------------------------------------------------------------

MANIFEST_KEYS = {
    "audio": str,
    "visual": str,
    "num_classes": int,
    "audio_dim": int,
    "visual_dim": int,
    "train_fraction": float,
    "split_seed": int,
}


def read_keyvalue(path):
    """Parse a ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_manifest(path, comments=(), **values):
    with open(path, "w") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        for key in MANIFEST_KEYS:
            if key in values:
                fh.write(f"{key}={values[key]}\n")


def read_manifest(path):
    raw = read_keyvalue(path)
    unknown = set(raw) - set(MANIFEST_KEYS)
    if unknown:
        raise DataFormatError(f"{path}: unknown manifest keys {sorted(unknown)}")
    missing = {"audio", "visual", "num_classes"} - set(raw)
    if missing:
        raise DataFormatError(f"{path}: missing manifest keys {sorted(missing)}")
    try:
        return {k: MANIFEST_KEYS[k](v) for k, v in raw.items()}
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def save_dataset(dataset, directory, train_fraction=STANDARD_TRAIN_FRACTION, split_seed=0,
                 comments=()):
    """Write ``audio.csv``, ``visual.csv`` and ``manifest.txt`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    write_features(os.path.join(directory, "audio.csv"), dataset.ids, dataset.labels,
                   dataset.audio, comments)
    write_features(os.path.join(directory, "visual.csv"), dataset.ids, dataset.labels,
                   dataset.visual, comments)
    path = os.path.join(directory, "manifest.txt")
    write_manifest(
        path, comments, audio="audio.csv", visual="visual.csv", num_classes=dataset.num_classes,
        audio_dim=dataset.audio_dim, visual_dim=dataset.visual_dim,
        train_fraction=train_fraction, split_seed=split_seed,
    )
    return path


def load_dataset(manifest_path, apply_split=True):
    """Load a dataset from its manifest, optionally applying the recorded split."""
    m = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    audio = load_features(os.path.join(base, m["audio"]), Modality.AUDIO, m.get("audio_dim"))
    visual = load_features(os.path.join(base, m["visual"]), Modality.VISUAL, m.get("visual_dim"))
    ds = pair_samples(audio, visual, m["num_classes"])
    if apply_split:
        ds = split(ds, m.get("train_fraction", STANDARD_TRAIN_FRACTION), m.get("split_seed", 0))
    return ds
