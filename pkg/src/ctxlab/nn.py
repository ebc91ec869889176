"""Small feed-forward networks with hand-rolled backprop and Adam.

Two architectures: a plain MLP over (visible context bits, control bits),
and a split model whose context encoder maps the visible bits to a fixed
80-dimensional feature vector that is concatenated with the control bits
before decoding — the feature vector is what the spectrum analyses consume.

Training is binary cross-entropy on the logit, Adam with decoupled weight
decay, and early stopping on validation loss.  Everything is float64 and
deterministic given the seeds, so repeated runs produce bitwise-identical
histories.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NumericalError
from .parity import Dataset

_CHECKPOINT_MAGIC = b"CTXM"
_CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Plain MLP: layer_dims runs input -> hidden... -> 1 (logit output).

    Leaky-linear activations (slope 0.01) sit after the first
    ``n_activations`` linear layers; remaining junctions are linear.  The
    default of two activations leaves the third junction of a four-layer
    stack linear.
    """

    layer_dims: tuple[int, ...]
    seed: int = 0
    negative_slope: float = 0.01
    n_activations: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 3:
            raise ValueError("need at least 2 linear layers")
        if self.layer_dims[-1] != 1:
            raise ValueError("final layer must emit a single logit")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dimensions must be positive")
        n_linear = len(self.layer_dims) - 1
        k = self.n_activations
        if k is None:
            k = min(2, n_linear - 1)
        if not (0 <= k <= n_linear - 1):
            raise ValueError("activation count must leave the output junction linear")
        object.__setattr__(self, "n_activations", int(k))

    def activation_flags(self) -> list[bool]:
        n_linear = len(self.layer_dims) - 1
        return [i < self.n_activations for i in range(n_linear)]


@dataclass(frozen=True)
class SplitModelSpec:
    """Context encoder + decoder pair of Fig-style split architecture.

    The encoder consumes exactly the first ``visible_context`` context bits
    and emits ``feature_dim`` values; the decoder consumes the concatenation
    (context feature, control bits).  Both stacks activate every junction
    except their output layer.
    """

    visible_context: int
    n_control: int
    encoder_hidden: tuple[int, ...] = (400,)
    feature_dim: int = 80
    decoder_hidden: tuple[int, ...] = (200,)
    seed: int = 0
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(d) for d in self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(d) for d in self.decoder_hidden))
        if self.visible_context < 1:
            raise ValueError("encoder needs at least one visible context bit")
        if self.n_control < 1:
            raise ValueError("need at least one control bit")
        if self.feature_dim < 1:
            raise ValueError("feature dimension must be positive")

    def encoder_dims(self) -> tuple[int, ...]:
        return (self.visible_context, *self.encoder_hidden, self.feature_dim)

    def decoder_dims(self) -> tuple[int, ...]:
        return (self.feature_dim + self.n_control, *self.decoder_hidden, 1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 2000
    max_epochs: int = 200
    patience: int = 25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ValueError("rates, batch size and epoch bounds must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


# ---------------------------------------------------------------------------
# Parameter stacks
# ---------------------------------------------------------------------------


class _Stack:
    """A chain of affine layers with optional leaky activations per junction."""

    def __init__(self, weights, biases, act_flags, slope):
        self.weights = weights      # list of (d_in, d_out) arrays
        self.biases = biases        # list of (d_out,) arrays
        self.act_flags = act_flags  # list[bool], len == n layers
        self.slope = slope

    @classmethod
    def init(cls, dims, act_flags, slope, rng):
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(rng.uniform(-bound, bound, size=d_out))
        return cls(weights, biases, list(act_flags), slope)

    def forward(self, x):
        for w, b, act in zip(self.weights, self.biases, self.act_flags):
            x = x @ w + b
            if act:
                x = np.where(x > 0, x, self.slope * x)
        return x

    def forward_cached(self, x):
        """Forward pass keeping the layer inputs and pre-activations."""
        inputs, pre = [], []
        for w, b, act in zip(self.weights, self.biases, self.act_flags):
            inputs.append(x)
            z = x @ w + b
            pre.append(z)
            x = np.where(z > 0, z, self.slope * z) if act else z
        return x, (inputs, pre)

    def backward(self, grad_out, cache):
        """Grad of the cached forward; returns (per-layer grads, grad wrt input)."""
        inputs, pre = cache
        grads = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if self.act_flags[i]:
                g = g * np.where(pre[i] > 0, 1.0, self.slope)
            gw = inputs[i].T @ g
            gb = g.sum(axis=0)
            grads[i] = (gw, gb)
            if i > 0:
                g = g @ self.weights[i].T
            else:
                g = g @ self.weights[i].T  # grad wrt stack input, for chaining
        return grads, g

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy_parameters(self):
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, params):
        own = self.parameters()
        if len(own) != len(params):
            raise ValueError("parameter list length mismatch")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise ValueError("parameter shape mismatch")
            dst[...] = src


class Mlp:
    """Plain MLP over a concatenated (visible context, control) input row."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.stack = _Stack.init(spec.layer_dims, spec.activation_flags(),
                                 spec.negative_slope, rng)

    @property
    def input_dim(self) -> int:
        return self.spec.layer_dims[0]

    def forward(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {x.shape[1]}")
        return self.stack.forward(x)[:, 0]

    def predict_proba(self, x) -> np.ndarray:
        z = self.forward(x)
        return 1.0 / (1.0 + np.exp(-z))

    def loss_and_grads(self, x, y):
        """Mean BCE-with-logits loss (nats) and its exact parameter gradients."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(x) == 0:
            raise ValueError("empty batch")
        z, cache = self.stack.forward_cached(x)
        z = z[:, 0]
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        sig = 1.0 / (1.0 + np.exp(-z))
        gz = ((sig - y) / len(y))[:, None]
        grads, _ = self.stack.backward(gz, cache)
        return loss, [g for pair in grads for g in pair]

    def parameters(self):
        return self.stack.parameters()

    def copy_parameters(self):
        return self.stack.copy_parameters()

    def load_parameters(self, params):
        self.stack.load_parameters(params)


class SplitModel:
    """Encoder over the visible context bits, decoder over (feature, control)."""

    def __init__(self, spec: SplitModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        enc_dims = spec.encoder_dims()
        dec_dims = spec.decoder_dims()
        enc_acts = [True] * (len(enc_dims) - 2) + [False]
        dec_acts = [True] * (len(dec_dims) - 2) + [False]
        self.encoder = _Stack.init(enc_dims, enc_acts, spec.negative_slope, rng)
        self.decoder = _Stack.init(dec_dims, dec_acts, spec.negative_slope, rng)

    @property
    def input_dim(self) -> int:
        return self.spec.visible_context + self.spec.n_control

    def _split(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {x.shape[1]}")
        l = self.spec.visible_context
        return x[:, :l], x[:, l:]

    def features(self, x) -> np.ndarray:
        ctx, _ = self._split(x)
        return self.encoder.forward(ctx)

    def forward(self, x) -> np.ndarray:
        ctx, ctl = self._split(x)
        feat = self.encoder.forward(ctx)
        return self.decoder.forward(np.concatenate([feat, ctl], axis=1))[:, 0]

    def predict_proba(self, x) -> np.ndarray:
        z = self.forward(x)
        return 1.0 / (1.0 + np.exp(-z))

    def loss_and_grads(self, x, y):
        ctx, ctl = self._split(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        if len(ctx) == 0:
            raise ValueError("empty batch")
        feat, enc_cache = self.encoder.forward_cached(ctx)
        z, dec_cache = self.decoder.forward_cached(np.concatenate([feat, ctl], axis=1))
        z = z[:, 0]
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        sig = 1.0 / (1.0 + np.exp(-z))
        gz = ((sig - y) / len(y))[:, None]
        dec_grads, g_in = self.decoder.backward(gz, dec_cache)
        g_feat = g_in[:, : self.spec.feature_dim]
        enc_grads, _ = self.encoder.backward(g_feat, enc_cache)
        flat = [g for pair in enc_grads for g in pair]
        flat += [g for pair in dec_grads for g in pair]
        return loss, flat

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def copy_parameters(self):
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, params):
        n_enc = len(self.encoder.parameters())
        self.encoder.load_parameters(params[:n_enc])
        self.decoder.load_parameters(params[n_enc:])


def build_model(spec):
    if isinstance(spec, MlpSpec):
        return Mlp(spec)
    if isinstance(spec, SplitModelSpec):
        return SplitModel(spec)
    raise TypeError(f"unknown model spec type {type(spec).__name__}")


def forward(model, x) -> np.ndarray:
    """Logit(s) of a model on one input row or a batch of rows."""
    single = np.asarray(x).ndim == 1
    z = model.forward(x)
    return float(z[0]) if single else z


def backward(model, batch, labels):
    """Exact gradients of the mean BCE-with-logits loss for one batch."""
    _, grads = model.loss_and_grads(batch, labels)
    return grads


def extract_context_features(model, inputs) -> np.ndarray:
    """Encoder outputs (one row per input) of a split model."""
    if not isinstance(model, SplitModel):
        raise TypeError("context features exist only for split models")
    return model.features(inputs)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.adam_beta1**self.t
        b2c = 1.0 - cfg.adam_beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)
            # Decoupled decay: pulls parameters toward zero outside the
            # gradient path, with force weight_decay * parameter.
            p -= cfg.learning_rate * (update + cfg.weight_decay * p)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _bce_with_labels(model, dataset: Dataset, l: int, chunk: int = 20000) -> float:
    """Validation BCE (nats) against the sampled labels, streamed in chunks."""
    n = len(dataset)
    total = 0.0
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        x = dataset.inputs(l, idx)
        z = model.forward(x)
        y = dataset.labels[idx].astype(float)
        total += float(np.sum(np.logaddexp(0.0, z) - y * z))
    return total / n


def predict_proba_dataset(model, dataset: Dataset, l: int, chunk: int = 20000) -> np.ndarray:
    n = len(dataset)
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        out[idx] = model.predict_proba(dataset.inputs(l, idx))
    return out


def train(spec, cfg: TrainConfig, train_set: Dataset, val_set: Dataset,
          context_length: int | None = None):
    """Train a model spec on disjoint train/validation parity datasets.

    Returns ``(model, history)`` with the parameters of the best validation
    epoch restored.  Stops early once validation loss has not improved for
    ``cfg.patience`` epochs; aborts with NumericalError on NaN loss.
    """
    if train_set.config is not val_set.config and train_set.config != val_set.config:
        raise ValueError("train and validation sets must come from the same config")
    T = train_set.config.n_control_bits
    model = build_model(spec)
    if isinstance(spec, SplitModelSpec):
        l = spec.visible_context
    else:
        l = spec.layer_dims[0] - T
    if context_length is not None and context_length != l:
        raise ValueError(f"spec expects context length {l}, got {context_length}")
    if not (0 <= l <= train_set.config.n_context_bits):
        raise ValueError(f"context length {l} outside the config's bit range")

    params = model.parameters()
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    history = TrainHistory()
    best_val = math.inf
    best_params = model.copy_parameters()

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = train_set.inputs(l, idx)
            y = train_set.labels[idx].astype(float)
            loss, grads = model.loss_and_grads(x, y)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"training loss became non-finite at epoch {epoch} "
                    "(learning-rate or data pathology)"
                )
            opt.step(params, grads)
            epoch_loss += loss * len(idx)
        history.train_loss.append(epoch_loss / n)

        val_loss = _bce_with_labels(model, val_set, l)
        if not math.isfinite(val_loss):
            raise NumericalError(f"validation loss became non-finite at epoch {epoch}")
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_params = model.copy_parameters()
        elif epoch - history.best_epoch >= cfg.patience:
            history.stopped_early = True
            break

    model.load_parameters(best_params)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _spec_to_doc(spec) -> dict:
    if isinstance(spec, MlpSpec):
        return {
            "kind": "mlp",
            "layer_dims": list(spec.layer_dims),
            "seed": spec.seed,
            "negative_slope": spec.negative_slope,
            "n_activations": spec.n_activations,
        }
    if isinstance(spec, SplitModelSpec):
        return {
            "kind": "split",
            "visible_context": spec.visible_context,
            "n_control": spec.n_control,
            "encoder_hidden": list(spec.encoder_hidden),
            "feature_dim": spec.feature_dim,
            "decoder_hidden": list(spec.decoder_hidden),
            "seed": spec.seed,
            "negative_slope": spec.negative_slope,
        }
    raise TypeError(f"unknown model spec type {type(spec).__name__}")


def _spec_from_doc(doc: dict):
    kind = doc.get("kind")
    if kind == "mlp":
        return MlpSpec(
            layer_dims=tuple(doc["layer_dims"]), seed=int(doc["seed"]),
            negative_slope=float(doc["negative_slope"]),
            n_activations=int(doc["n_activations"]),
        )
    if kind == "split":
        return SplitModelSpec(
            visible_context=int(doc["visible_context"]), n_control=int(doc["n_control"]),
            encoder_hidden=tuple(doc["encoder_hidden"]), feature_dim=int(doc["feature_dim"]),
            decoder_hidden=tuple(doc["decoder_hidden"]), seed=int(doc["seed"]),
            negative_slope=float(doc["negative_slope"]),
        )
    raise ValueError(f"unknown checkpoint spec kind {kind!r}")


def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    """Versioned binary blob (spec echo + flat little-endian float64 params)
    plus a JSON sidecar holding caller-supplied training metadata."""
    path = Path(path)
    spec_doc = json.dumps(_spec_to_doc(model.spec), sort_keys=True).encode()
    flat = np.concatenate([p.reshape(-1) for p in model.parameters()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(spec_doc)))
        fh.write(spec_doc)
        fh.write(flat.tobytes())
    sidecar = {
        "format_version": _CHECKPOINT_VERSION,
        "n_parameters": int(flat.size),
        "metadata": metadata or {},
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint file")
    version, spec_len = struct.unpack_from("<II", blob, 4)
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec_doc = json.loads(blob[12:12 + spec_len].decode())
    model = build_model(_spec_from_doc(spec_doc))
    flat = np.frombuffer(blob, dtype="<f8", offset=12 + spec_len).copy()
    params = model.parameters()
    expected = sum(p.size for p in params)
    if flat.size != expected:
        raise ValueError(f"checkpoint holds {flat.size} parameters, expected {expected}")
    offset = 0
    restored = []
    for p in params:
        restored.append(flat[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    model.load_parameters(restored)
    return model
