"""Per-modality projection networks into the common label space."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, DimensionError, LabelError
from .numeric import Activation, DenseLayer, dense_backward, dense_forward

CHECKPOINT_VERSION = 1

# Layer widths and class counts used for the AVE / VEGAS feature sets.
PRESETS = {
    "desk": dict(audio_dim=16, visual_dim=24, hidden_dim=32, num_classes=5),
    "ave": dict(audio_dim=128, visual_dim=1024, hidden_dim=1024, num_classes=15),
    "vegas": dict(audio_dim=128, visual_dim=1024, hidden_dim=1024, num_classes=10),
}


class ProjectionNetwork:
    """A stack of dense layers: ReLU hidden layers followed by a linear label head."""

    def __init__(self, layers, modality="audio"):
        self.layers = list(layers)
        self.modality = modality
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(
                    f"{modality}: layer widths {prev.weight.shape} -> {nxt.weight.shape} do not chain"
                )
        self._cache = None

    @classmethod
    def build(cls, input_dim, hidden_dim, num_classes, rng, n_hidden=3, modality="audio"):
        layers = []
        width = input_dim
        for _ in range(n_hidden):
            layers.append(DenseLayer.init(width, hidden_dim, Activation.RELU, rng))
            width = hidden_dim
        layers.append(DenseLayer.init(width, num_classes, Activation.IDENTITY, rng))
        return cls(layers, modality)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def num_classes(self):
        return self.layers[-1].out_dim

    @property
    def hidden_dim(self):
        return self.layers[0].out_dim if len(self.layers) > 1 else None

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def parameter_names(self):
        names = []
        for i in range(len(self.layers)):
            names.extend((f"{self.modality}.layer{i}.weight", f"{self.modality}.layer{i}.bias"))
        return names

    def forward(self, x):
        """Project a batch and keep the layer inputs for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"{self.modality} features have shape {x.shape}; expected dim {self.input_dim}"
            )
        inputs = []
        h = x
        for layer in self.layers:
            inputs.append(h)
            h = dense_forward(layer, h)
        self._cache = inputs
        return h

    def backward(self, grad_out):
        """Gradients for :meth:`parameters` given d loss / d output of the last forward."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        grads = []
        g = grad_out
        for layer, x in zip(reversed(self.layers), reversed(self._cache)):
            (gw, gb), g = dense_backward(layer, x, g)
            grads.append((gw, gb))
        flat = []
        for gw, gb in reversed(grads):
            flat.extend((gw, gb))
        return flat

    def copy(self):
        layers = [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return ProjectionNetwork(layers, self.modality)


def project(net, features):
    return net.forward(features)


@dataclass
class ModelPair:
    audio_net: ProjectionNetwork
    visual_net: ProjectionNetwork

    def __post_init__(self):
        if self.audio_net.num_classes != self.visual_net.num_classes:
            raise DimensionError(
                f"audio head has {self.audio_net.num_classes} classes, "
                f"visual head has {self.visual_net.num_classes}"
            )

    @classmethod
    def build(cls, audio_dim, visual_dim, hidden_dim, num_classes, seed=0, n_hidden=3):
        rng = np.random.default_rng(seed)
        return cls(
            ProjectionNetwork.build(audio_dim, hidden_dim, num_classes, rng, n_hidden, "audio"),
            ProjectionNetwork.build(visual_dim, hidden_dim, num_classes, rng, n_hidden, "visual"),
        )

    @classmethod
    def from_preset(cls, name, seed=0):
        return cls.build(**PRESETS[name], seed=seed)

    @property
    def num_classes(self):
        return self.audio_net.num_classes

    def parameters(self):
        return self.audio_net.parameters() + self.visual_net.parameters()

    def parameter_names(self):
        return self.audio_net.parameter_names() + self.visual_net.parameter_names()

    def embed(self, audio, visual):
        return project(self.audio_net, audio), project(self.visual_net, visual)

    def copy(self):
        return ModelPair(self.audio_net.copy(), self.visual_net.copy())


def label_loss(embeddings, labels):
    """Mean softmax cross-entropy of label-space embeddings against class indices.

    Returns ``(loss, grad)`` where ``grad = (softmax - onehot) / batch``.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise LabelError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} embeddings")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, labels]))
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def save_checkpoint(models, path, extra=None):
    """Write both networks to an ``.npz`` container; round-trip is bit-exact."""
    arrays = {}
    meta = {"version": CHECKPOINT_VERSION, "extra": extra or {}}
    for key, net in (("audio", models.audio_net), ("visual", models.visual_net)):
        meta[key] = [
            {"shape": list(l.weight.shape), "activation": l.activation.value} for l in net.layers
        ]
        for i, layer in enumerate(net.layers):
            arrays[f"{key}_{i}_weight"] = layer.weight
            arrays[f"{key}_{i}_bias"] = layer.bias
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(ModelPair, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(bytes(data["meta"]).decode())
        except KeyError:
            raise DataFormatError(f"{path}: not a model checkpoint (no meta record)") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        nets = []
        for key in ("audio", "visual"):
            layers = []
            for i, spec in enumerate(meta[key]):
                w = data[f"{key}_{i}_weight"]
                if list(w.shape) != spec["shape"]:
                    raise DataFormatError(f"{path}: {key} layer {i} shape mismatch")
                layers.append(DenseLayer(w.copy(), data[f"{key}_{i}_bias"].copy(), spec["activation"]))
            nets.append(ProjectionNetwork(layers, key))
    return ModelPair(*nets), meta["extra"]
