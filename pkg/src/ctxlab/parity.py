"""Position-weighted multitask sparse-parity benchmark.

An input is T one-hot control bits plus L context bits; the label is the XOR
of the two context bits belonging to the selected subtask.  Subtask bit
positions follow a power-law-in-position schedule, so the number of subtasks
solvable within a visible window of length l grows like 50 - 50/(l/20)**1.2
for the canonical 50-task system.

Because the generator is fully known, the minimum achievable binary
cross-entropy (and the full per-sample posterior) is computable exactly:
a subtask whose larger bit falls outside the visible window contributes a
fair coin flip, everything else is deterministic.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LN2 = math.log(2.0)

# Bit pairs (larger, smaller) of the canonical 50-task system, in order.
# The smaller bits are tuned so the solvable subtasks stay XOR-independent,
# keeping the effective dimension equal to the solvable count for l >= 23.
_CANONICAL_PAIRS = (
    (21, 20), (21, 1), (21, 2), (22, 3), (22, 4), (22, 5),
    (23, 6), (23, 7), (24, 8), (24, 9), (25, 10), (25, 11),
    (26, 12), (26, 13), (27, 14), (27, 15), (28, 16),
    (29, 17), (30, 18), (30, 19), (31, 20), (32, 1), (33, 3),
    (34, 6), (35, 8), (36, 10), (37, 12), (39, 14), (40, 16),
    (42, 38), (43, 41), (45, 44), (47, 46), (50, 48), (52, 51),
    (55, 54), (58, 57), (62, 61), (66, 65), (71, 70), (77, 76),
    (84, 83), (93, 92), (103, 102), (118, 87), (137, 25),
    (165, 20), (209, 34), (293, 128), (522, 353),
)


@dataclass(frozen=True)
class TaskSpec:
    """One XOR subtask over two 1-based context-bit positions."""

    bit_hi: int
    bit_lo: int
    frequency: float = 1.0

    def __post_init__(self):
        if self.bit_lo < 1:
            raise ValueError("bit positions are 1-based")
        if self.bit_hi <= self.bit_lo:
            raise ValueError("bit_hi must be the strictly larger position")
        if not (self.frequency > 0):
            raise ValueError("task frequency must be positive")


@dataclass(frozen=True)
class MaskPolicy:
    """Random-suffix masking: a sample keeps a uniformly drawn visible prefix
    in [min_visible, max_visible]; masked context entries read 0.5.

    ``unmasked_fraction`` of samples bypass masking entirely (full prefix).
    """

    min_visible: int
    max_visible: int
    unmasked_fraction: float = 0.5

    def __post_init__(self):
        if not (1 <= self.min_visible <= self.max_visible):
            raise ValueError("need 1 <= min_visible <= max_visible")
        if not (0.0 <= self.unmasked_fraction <= 1.0):
            raise ValueError("unmasked_fraction must lie in [0, 1]")

    def prob_visible_below(self, position: int, n_context_bits: int) -> float:
        """P[visible length < position] under this policy."""
        if position <= self.min_visible:
            masked_part = 0.0
        else:
            span = self.max_visible - self.min_visible + 1
            below = min(position - self.min_visible, span)
            masked_part = below / span
        if position > n_context_bits:
            # Even fully unmasked samples cannot reveal a nonexistent bit.
            return 1.0
        return (1.0 - self.unmasked_fraction) * masked_part


@dataclass(frozen=True)
class ParityConfig:
    """Task list, bit counts, masking policy and base seed of one benchmark."""

    tasks: tuple[TaskSpec, ...]
    n_context_bits: int
    mask_policy: MaskPolicy | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("config needs at least one task")
        top = max(t.bit_hi for t in self.tasks)
        if self.n_context_bits < top:
            raise ValueError(f"n_context_bits must cover bit {top}")
        if self.mask_policy is not None and self.mask_policy.max_visible > self.n_context_bits:
            raise ValueError("mask policy visible range exceeds context length")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")

    @property
    def n_control_bits(self) -> int:
        return len(self.tasks)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([t.frequency for t in self.tasks], dtype=float)

    def bit_hi_array(self) -> np.ndarray:
        return np.array([t.bit_hi for t in self.tasks], dtype=np.int64)

    def bit_lo_array(self) -> np.ndarray:
        return np.array([t.bit_lo for t in self.tasks], dtype=np.int64)


def canonical_task_set() -> ParityConfig:
    """The 50-task equal-frequency system on 522 context bits."""
    tasks = tuple(TaskSpec(hi, lo, 1.0) for hi, lo in _CANONICAL_PAIRS)
    return ParityConfig(tasks=tasks, n_context_bits=522, mask_policy=None, seed=0)


def solvable_tasks(config: ParityConfig, l: int) -> int:
    """Number of subtasks whose larger bit falls inside the first l bits."""
    if l < 0:
        raise ValueError("context length must be non-negative")
    return int(sum(1 for t in config.tasks if t.bit_hi <= l))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One materialized sample: one-hot control, masked context, label."""

    control: np.ndarray       # (T,) floats, exactly one entry 1.0
    context: np.ndarray       # (L,) floats in {0.0, 1.0} or 0.5 where masked
    label: int
    active_task: int


@dataclass
class Dataset:
    """Column store of parity samples.

    Generator bits are kept unmasked in ``context_bits``; ``visible_len``
    records how many leading bits a consumer may reveal (the rest read 0.5).
    Labels always come from the unmasked generator bits.
    """

    config: ParityConfig
    context_bits: np.ndarray   # (n, L) uint8
    visible_len: np.ndarray    # (n,) int32
    active_task: np.ndarray    # (n,) int32
    labels: np.ndarray         # (n,) uint8

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self, l: int, indices: np.ndarray | None = None) -> np.ndarray:
        """Materialize model inputs: first l context bits (masked entries as
        0.5) followed by the one-hot control block."""
        cfg = self.config
        if not (0 <= l <= cfg.n_context_bits):
            raise ValueError(f"context length {l} outside [0, {cfg.n_context_bits}]")
        sel = slice(None) if indices is None else indices
        ctx = self.context_bits[sel, :l].astype(float)
        vis = self.visible_len[sel]
        masked = np.arange(l)[None, :] >= vis[:, None]
        ctx[masked] = 0.5
        control = np.zeros((ctx.shape[0], cfg.n_control_bits))
        control[np.arange(ctx.shape[0]), self.active_task[sel]] = 1.0
        return np.concatenate([ctx, control], axis=1)

    def sample(self, i: int) -> Sample:
        cfg = self.config
        ctx = self.context_bits[i].astype(float)
        ctx[self.visible_len[i]:] = 0.5
        control = np.zeros(cfg.n_control_bits)
        control[self.active_task[i]] = 1.0
        return Sample(
            control=control, context=ctx,
            label=int(self.labels[i]), active_task=int(self.active_task[i]),
        )

    def input_hashes(self) -> np.ndarray:
        """Stable 128-bit digest per materialized input vector (mask-aware)."""
        out = np.empty(len(self), dtype="<U32")
        for i in range(len(self)):
            v = int(self.visible_len[i])
            h = hashlib.blake2s(digest_size=16)
            h.update(struct.pack("<iii", int(self.active_task[i]), v,
                                 self.config.n_context_bits))
            h.update(self.context_bits[i, :v].tobytes())
            out[i] = h.hexdigest()
        return out


def _resolve_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _draw(config: ParityConfig, n: int, rng: np.random.Generator):
    freqs = config.frequencies
    probs = freqs / freqs.sum()
    active = rng.choice(len(config.tasks), size=n, p=probs).astype(np.int32)
    context = rng.integers(0, 2, size=(n, config.n_context_bits), dtype=np.uint8)
    hi = config.bit_hi_array()[active] - 1
    lo = config.bit_lo_array()[active] - 1
    rows = np.arange(n)
    labels = (context[rows, hi] ^ context[rows, lo]).astype(np.uint8)
    policy = config.mask_policy
    if policy is None:
        visible = np.full(n, config.n_context_bits, dtype=np.int32)
    else:
        visible = rng.integers(policy.min_visible, policy.max_visible + 1,
                               size=n).astype(np.int32)
        unmasked = rng.random(n) < policy.unmasked_fraction
        visible[unmasked] = config.n_context_bits
    return context, visible, active, labels


def distinct_input_space(config: ParityConfig) -> int:
    """Number of distinct materialized input vectors the generator can emit."""
    T = config.n_control_bits
    L = config.n_context_bits
    policy = config.mask_policy
    if policy is None:
        return T * 2**L
    total = T * 2**L  # unmasked samples
    for v in range(policy.min_visible, policy.max_visible + 1):
        if v == L:
            continue  # already counted by the unmasked term
        total += T * 2**v
    return total


def gen_dataset(config: ParityConfig, n: int, seed=None, *, dedup: bool = False) -> Dataset:
    """Draw n i.i.d. samples: task proportional to frequency, fair-coin
    context bits, XOR label, then suffix masking.  Deterministic given seed.

    With ``dedup`` every materialized input vector is unique; that is refused
    when n exceeds the distinct-input space.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = _resolve_rng(config.seed if seed is None else seed)
    if not dedup:
        context, visible, active, labels = _draw(config, n, rng)
        return Dataset(config, context, visible, active, labels)

    if n > distinct_input_space(config):
        raise ValueError(
            f"dedup requested but n={n} exceeds the {distinct_input_space(config)} "
            "distinct input vectors this config can produce"
        )
    parts = []
    seen: set[bytes] = set()
    remaining = n
    while remaining > 0:
        chunk = max(remaining * 2, 64)
        ds = Dataset(config, *_draw(config, chunk, rng))
        keep = []
        for i in range(chunk):
            v = int(ds.visible_len[i])
            key = struct.pack("<ii", int(ds.active_task[i]), v) + ds.context_bits[i, :v].tobytes()
            if key not in seen:
                seen.add(key)
                keep.append(i)
                if len(keep) == remaining:
                    break
        keep = np.array(keep, dtype=int)
        parts.append((ds.context_bits[keep], ds.visible_len[keep],
                      ds.active_task[keep], ds.labels[keep]))
        remaining -= len(keep)
    context = np.concatenate([p[0] for p in parts])
    visible = np.concatenate([p[1] for p in parts])
    active = np.concatenate([p[2] for p in parts])
    labels = np.concatenate([p[3] for p in parts])
    return Dataset(config, context, visible, active, labels)


def split_disjoint(config: ParityConfig, n_train: int, n_val: int, seed) -> tuple[Dataset, Dataset]:
    """Generate train/validation sets with no shared input vector.

    The train split is drawn first; validation candidates colliding with any
    train vector (exact hash of task + visible prefix) are rejected and
    redrawn.  Deterministic given seed.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("both split sizes must be positive")
    space = distinct_input_space(config)
    if n_train + n_val > space:
        raise ValueError(
            f"cannot build disjoint splits of {n_train}+{n_val} samples from "
            f"{space} distinct input vectors"
        )
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng_train, rng_val = (np.random.default_rng(c) for c in ss.spawn(2))
    train = gen_dataset(config, n_train, rng_train)

    taken: set[bytes] = set()
    for i in range(n_train):
        v = int(train.visible_len[i])
        taken.add(struct.pack("<ii", int(train.active_task[i]), v)
                  + train.context_bits[i, :v].tobytes())

    parts = []
    remaining = n_val
    while remaining > 0:
        chunk = max(remaining, 64)
        cand = Dataset(config, *_draw(config, chunk, rng_val))
        keep = []
        for i in range(chunk):
            v = int(cand.visible_len[i])
            key = struct.pack("<ii", int(cand.active_task[i]), v) + cand.context_bits[i, :v].tobytes()
            if key not in taken:
                keep.append(i)
                if len(keep) == remaining:
                    break
        keep = np.array(keep, dtype=int)
        parts.append((cand.context_bits[keep], cand.visible_len[keep],
                      cand.active_task[keep], cand.labels[keep]))
        remaining -= len(keep)
    val = Dataset(
        config,
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
    )
    return train, val


# ---------------------------------------------------------------------------
# Exact oracles
# ---------------------------------------------------------------------------


def bayes_posterior(sample: Sample, l: int, config: ParityConfig) -> float:
    """P(label = 1 | the first l input bits), which is 0, 0.5 or 1.

    The posterior is deterministic exactly when both of the active subtask's
    bits are inside the window and unmasked; any hidden uniform bit XORed in
    turns the answer into a fair coin.
    """
    if l < 0:
        raise ValueError("context length must be non-negative")
    task = config.tasks[sample.active_task]
    if task.bit_hi <= l:
        b_hi = float(sample.context[task.bit_hi - 1])
        b_lo = float(sample.context[task.bit_lo - 1])
        if b_hi != 0.5 and b_lo != 0.5:
            return float(int(b_hi) ^ int(b_lo))
    return 0.5


def bayes_posteriors(dataset: Dataset, l: int) -> np.ndarray:
    """Vectorized exact posterior P(label=1 | visible input) per sample."""
    cfg = dataset.config
    if l < 0:
        raise ValueError("context length must be non-negative")
    hi = cfg.bit_hi_array()[dataset.active_task]
    visible = np.minimum(l, dataset.visible_len)
    known = hi <= visible
    return np.where(known, dataset.labels.astype(float), 0.5)


def bayes_risk(config: ParityConfig, l: int) -> float:
    """Exact minimum binary cross-entropy (nats) at context length l.

    Each subtask contributes ln 2 times the probability that its larger bit
    is hidden (outside the window or masked), weighted by task frequency.
    """
    if l < 0:
        raise ValueError("context length must be non-negative")
    freqs = config.frequencies
    policy = config.mask_policy
    total = 0.0
    for t, f in zip(config.tasks, freqs):
        if t.bit_hi > l:
            p_hidden = 1.0
        elif policy is None:
            p_hidden = 0.0
        else:
            p_hidden = policy.prob_visible_below(t.bit_hi, config.n_context_bits)
        total += f * p_hidden
    return LN2 * total / freqs.sum()


@dataclass(frozen=True)
class LossDecomposition:
    total_ce: float
    bayes_risk: float
    approx_loss: float
    clamped: int = 0


def decompose_loss(predictions, dataset: Dataset, l: int,
                   *, use_exact_posterior: bool = True) -> LossDecomposition:
    """Split an evaluation into irreducible risk plus model-approximation loss.

    With ``use_exact_posterior`` the total is measured against the exact
    per-sample posterior, so total == bayes + approx holds to float precision;
    against sampled labels the identity holds only up to sampling noise.
    Predictions at exactly 0 or 1 are clamped to 1e-12 and counted.
    """
    q = np.asarray(predictions, dtype=float)
    if q.shape != (len(dataset),):
        raise ValueError("need one probability per dataset sample")
    clamped = int(np.count_nonzero((q < 1e-12) | (q > 1 - 1e-12)))
    q = np.clip(q, 1e-12, 1 - 1e-12)

    p = bayes_posteriors(dataset, l)
    # H(p*, q), H(p*) and KL(p* || q) per sample; 0 log 0 terms vanish.
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = -(p * np.log(q) + (1 - p) * np.log(1 - q))
        ent = np.where((p > 0) & (p < 1),
                       -(p * np.log(np.clip(p, 1e-300, None))
                         + (1 - p) * np.log(np.clip(1 - p, 1e-300, None))),
                       0.0)
    kl = cross - ent
    if use_exact_posterior:
        total = float(np.mean(cross))
    else:
        y = dataset.labels.astype(float)
        total = float(np.mean(-(y * np.log(q) + (1 - y) * np.log(1 - q))))
    return LossDecomposition(
        total_ce=total,
        bayes_risk=float(np.mean(ent)),
        approx_loss=float(np.mean(kl)),
        clamped=clamped,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"PBD1"
_BINARY_VERSION = 1


def config_to_json(config: ParityConfig) -> str:
    doc = {
        "tasks": [{"bit_hi": t.bit_hi, "bit_lo": t.bit_lo, "frequency": t.frequency}
                  for t in config.tasks],
        "n_context_bits": config.n_context_bits,
        "mask_policy": None if config.mask_policy is None else {
            "min_visible": config.mask_policy.min_visible,
            "max_visible": config.mask_policy.max_visible,
            "unmasked_fraction": config.mask_policy.unmasked_fraction,
        },
        "seed": config.seed,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def config_from_json(text: str) -> ParityConfig:
    doc = json.loads(text)
    try:
        tasks = tuple(TaskSpec(int(t["bit_hi"]), int(t["bit_lo"]),
                               float(t.get("frequency", 1.0)))
                      for t in doc["tasks"])
        policy = doc.get("mask_policy")
        mask = None if policy is None else MaskPolicy(
            min_visible=int(policy["min_visible"]),
            max_visible=int(policy["max_visible"]),
            unmasked_fraction=float(policy.get("unmasked_fraction", 0.5)),
        )
        if "seed" not in doc:
            raise KeyError("seed")
        return ParityConfig(
            tasks=tasks,
            n_context_bits=int(doc["n_context_bits"]),
            mask_policy=mask,
            seed=int(doc["seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed parity config document: {exc}") from exc


def save_csv(dataset: Dataset, path) -> None:
    """Columnar export: task index, context bits, mask flags, label."""
    L = dataset.config.n_context_bits
    header = (["task"]
              + [f"ctx_{i + 1}" for i in range(L)]
              + [f"mask_{i + 1}" for i in range(L)]
              + ["label"])
    n = len(dataset)
    mask = (np.arange(L)[None, :] >= dataset.visible_len[:, None]).astype(np.uint8)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            row = [str(int(dataset.active_task[i]))]
            row += [str(int(b)) for b in dataset.context_bits[i]]
            row += [str(int(b)) for b in mask[i]]
            row.append(str(int(dataset.labels[i])))
            fh.write(",".join(row) + "\n")


def save_binary(dataset: Dataset, path) -> None:
    """Compact export: 16-byte header (magic, version, T, L, n) followed by
    task ids (u16), visible lengths (u16), labels (u8) and bit-packed context."""
    cfg = dataset.config
    n = len(dataset)
    header = struct.pack("<4sHHII", _BINARY_MAGIC, _BINARY_VERSION,
                         cfg.n_control_bits, cfg.n_context_bits, n)
    packed = np.packbits(dataset.context_bits, axis=1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.active_task.astype("<u2").tobytes())
        fh.write(dataset.visible_len.astype("<u2").tobytes())
        fh.write(dataset.labels.astype("u1").tobytes())
        fh.write(packed.tobytes())


def load_binary(path, config: ParityConfig) -> Dataset:
    """Read a dataset written by :func:`save_binary`; the config must match
    the stored T and L fields."""
    blob = Path(path).read_bytes()
    magic, version, t, l, n = struct.unpack_from("<4sHHII", blob, 0)
    if magic != _BINARY_MAGIC:
        raise ValueError("not a parity dataset file")
    if version != _BINARY_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    if (t, l) != (config.n_control_bits, config.n_context_bits):
        raise ValueError("dataset header does not match the supplied config")
    off = 16
    active = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int32)
    off += 2 * n
    visible = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int32)
    off += 2 * n
    labels = np.frombuffer(blob, dtype="u1", count=n, offset=off).astype(np.uint8)
    off += n
    row_bytes = (l + 7) // 8
    packed = np.frombuffer(blob, dtype="u1", count=n * row_bytes, offset=off)
    context = np.unpackbits(packed.reshape(n, row_bytes), axis=1)[:, :l].astype(np.uint8)
    return Dataset(config, context, visible, active, labels)
