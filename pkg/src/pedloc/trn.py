"""Multi-scale temporal relation network over per-frame feature vectors.

For each scale ``d`` a relation function ``g_d`` (two ReLU layers) is applied
to the concatenation of ``d`` time-ordered frames, the outputs are summed over
a set of index tuples, and a per-scale linear readout ``h_d`` maps the sum to
class logits.  The multi-scale logits are the sum of the per-scale logits.

Feature files
-------------
Binary (little-endian)::

    magic      8 bytes  b"PLTRNF1\\0"
    count      uint32   number of sequences
    n_frames   uint32
    dim        uint32   features per frame per stream
    streams    uint32
    labelled   uint32   0 or 1
    then per sequence: int32 label (-1 when unlabelled), followed by
    n_frames*streams*dim float64 values, frame-major (frame, stream, feature)

Text::

    # pedloc-features v1 n_frames=8 dim=32 streams=1
    <label> <value> <value> ...      (one sequence per line, same ordering)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from ._nn import Adam, he_uniform, log_softmax
from .locnet import ModelFormatError, TrainingDivergence, TrainSpec

SINGLE = "single"
CONCAT_TWO_STREAM = "concat_two_stream"

FEATURE_MAGIC = b"PLTRNF1\0"
_HEADER = struct.Struct("<5I")
TEXT_HEADER = "# pedloc-features v1"


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray  # (N, D)
    label: Optional[int] = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2:
            raise ValueError("frames must be an (N, D) array")
        if frames.shape[0] < 2:
            raise ValueError("a sequence needs at least 2 frames")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def fuse_streams(seq_a: FeatureSequence, seq_b: FeatureSequence) -> FeatureSequence:
    """Per-frame concatenation of two aligned streams."""
    if seq_a.n_frames != seq_b.n_frames:
        raise ValueError(f"stream lengths differ: {seq_a.n_frames} vs {seq_b.n_frames}")
    if seq_a.label is not None and seq_b.label is not None and seq_a.label != seq_b.label:
        raise ValueError("streams carry different labels")
    label = seq_a.label if seq_a.label is not None else seq_b.label
    return FeatureSequence(np.concatenate([seq_a.frames, seq_b.frames], axis=1), label)


def enumerate_tuples(n_frames: int, d: int, k: int, seed: int = 0) -> np.ndarray:
    """Strictly increasing ``d``-tuples of frame indices.

    All ``C(n_frames, d)`` tuples are returned when there are at most ``k`` of
    them; otherwise ``k`` distinct tuples are drawn with a generator seeded by
    ``(seed, d)``.  Rows are in lexicographic order either way.
    """
    if not 2 <= d <= n_frames:
        raise ValueError(f"scale {d} outside [2, {n_frames}]")
    if k < 1:
        raise ValueError("k must be >= 1")
    total = math.comb(n_frames, d)
    if total <= k:
        return np.array(list(combinations(range(n_frames), d)), dtype=np.int64)
    rng = np.random.default_rng([seed, d])
    chosen = set()
    while len(chosen) < k:
        chosen.add(tuple(sorted(rng.choice(n_frames, size=d, replace=False).tolist())))
    return np.array(sorted(chosen), dtype=np.int64)


@dataclass(frozen=True)
class TrnConfig:
    max_scale: int = 8
    tuples_per_scale: int = 8
    g_hidden: int = 256
    num_classes: int = 8
    feature_dim: int = 256
    fusion: str = SINGLE
    seed: int = 0
    # restrict to a subset of scales (e.g. (2,) for a pairwise-only model)
    scales: Optional[tuple] = None

    def validate(self):
        if self.max_scale < 2:
            raise ValueError("max_scale must be >= 2")
        if self.tuples_per_scale < 1 or self.g_hidden < 1 or self.feature_dim < 1:
            raise ValueError("tuples_per_scale, g_hidden and feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.fusion not in (SINGLE, CONCAT_TWO_STREAM):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        for d in self.active_scales:
            if not 2 <= d <= self.max_scale:
                raise ValueError(f"scale {d} outside [2, {self.max_scale}]")

    @property
    def n_frames(self):
        return self.max_scale

    @property
    def active_scales(self):
        if self.scales is None:
            return tuple(range(2, self.max_scale + 1))
        return tuple(sorted(set(self.scales)))


@dataclass(eq=False)
class ScaleBlock:
    tuples: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w_out, self.b_out]

    def copy(self):
        return ScaleBlock(self.tuples.copy(), *[p.copy() for p in self.params()])


@dataclass(eq=False)
class TrnModel:
    config: TrnConfig
    blocks: dict  # scale -> ScaleBlock
    metadata: dict = field(default_factory=dict)

    def params(self):
        out = []
        for d in sorted(self.blocks):
            out += self.blocks[d].params()
        return out

    def copy(self):
        return TrnModel(self.config, {d: b.copy() for d, b in self.blocks.items()}, dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, TrnModel):
            return NotImplemented
        return (self.config == other.config and self.metadata == other.metadata
                and sorted(self.blocks) == sorted(other.blocks)
                and all(np.array_equal(self.blocks[d].tuples, other.blocks[d].tuples) for d in self.blocks)
                and all(np.array_equal(a, b) for a, b in zip(self.params(), other.params())))


def init_trn(config: TrnConfig = TrnConfig()) -> TrnModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    blocks = {}
    h, dim = config.g_hidden, config.feature_dim
    for d in config.active_scales:
        blocks[d] = ScaleBlock(
            tuples=enumerate_tuples(config.n_frames, d, config.tuples_per_scale, config.seed),
            w1=he_uniform(rng, d * dim, h), b1=np.zeros(h),
            w2=he_uniform(rng, h, h), b2=np.zeros(h),
            w_out=rng.uniform(-1.0, 1.0, size=(h, config.num_classes)) / math.sqrt(h),
            b_out=np.zeros(config.num_classes),
        )
    return TrnModel(config, blocks, {"init_seed": config.seed})


def _as_batch(model, x):
    if isinstance(x, FeatureSequence):
        x = x.frames
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    cfg = model.config
    if x.ndim != 3 or x.shape[1] != cfg.n_frames or x.shape[2] != cfg.feature_dim:
        raise ValueError(f"expected sequences of shape ({cfg.n_frames}, {cfg.feature_dim}), got {x.shape[1:]}")
    return x


def _scale_forward(block, x):
    b, n_t = x.shape[0], len(block.tuples)
    inp = x[:, block.tuples, :].reshape(b * n_t, -1)
    a1 = np.maximum(inp @ block.w1 + block.b1, 0.0)
    a2 = np.maximum(a1 @ block.w2 + block.b2, 0.0)
    pooled = a2.reshape(b, n_t, -1).sum(axis=1)
    logits = pooled @ block.w_out + block.b_out
    return logits, (inp, a1, a2, pooled)


def _scale_backward(block, cache, d_logits):
    inp, a1, a2, pooled = cache
    b = d_logits.shape[0]
    n_t = len(block.tuples)
    g_wout = pooled.T @ d_logits
    g_bout = d_logits.sum(axis=0)
    d_pooled = d_logits @ block.w_out.T
    d_a2 = np.broadcast_to(d_pooled[:, None, :], (b, n_t, d_pooled.shape[1])).reshape(b * n_t, -1)
    d_z2 = d_a2 * (a2 > 0)
    g_w2 = a1.T @ d_z2
    g_b2 = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ block.w2.T) * (a1 > 0)
    g_w1 = inp.T @ d_z1
    g_b1 = d_z1.sum(axis=0)
    return [g_w1, g_b1, g_w2, g_b2, g_wout, g_bout]


def relation_scale(model: TrnModel, seq, d: int) -> np.ndarray:
    """Logits of the scale-``d`` relation term; 1-D for one sequence, 2-D for a batch."""
    if d not in model.blocks:
        raise ValueError(f"scale {d} not in model (has {sorted(model.blocks)})")
    x = _as_batch(model, seq)
    logits, _ = _scale_forward(model.blocks[d], x)
    return logits[0] if np.ndim(getattr(seq, "frames", seq)) == 2 else logits


def multiscale(model: TrnModel, seq) -> np.ndarray:
    """Sum of the per-scale logits, accumulated in ascending scale order."""
    x = _as_batch(model, seq)
    total = np.zeros((x.shape[0], model.config.num_classes))
    for d in sorted(model.blocks):
        total = total + _scale_forward(model.blocks[d], x)[0]
    return total[0] if np.ndim(getattr(seq, "frames", seq)) == 2 else total


def softmax(logits):
    return np.exp(log_softmax(np.asarray(logits, dtype=float)))


def classify(model: TrnModel, seq):
    """(label, probabilities); ties go to the lowest class index."""
    probs = softmax(multiscale(model, seq))
    return int(np.argmax(probs)), probs


def predict_labels(model: TrnModel, x, batch_size: int = 256) -> np.ndarray:
    x = _as_batch(model, x)
    out = []
    for start in range(0, len(x), batch_size):
        out.append(np.argmax(multiscale(model, x[start:start + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def loss_and_grad(model: TrnModel, x, labels):
    """Mean cross-entropy of the multi-scale logits and its gradient (``model.params()`` order)."""
    x = _as_batch(model, x)
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(x) or len(labels) == 0:
        raise ValueError("need one label per sequence and a non-empty batch")
    c = model.config.num_classes
    if np.any((labels < 0) | (labels >= c)):
        raise ValueError(f"labels must be in [0, {c})")
    logits = np.zeros((len(x), c))
    caches = {}
    for d in sorted(model.blocks):
        out, caches[d] = _scale_forward(model.blocks[d], x)
        logits = logits + out
    logp = log_softmax(logits)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d_logits = np.exp(logp)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    grads = []
    for d in sorted(model.blocks):
        grads += _scale_backward(model.blocks[d], caches[d], d_logits)
    return float(loss), grads


def mean_loss(model: TrnModel, x, labels, batch_size: int = 512) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], labels[start:start + batch_size]
        total += _batch_loss(model, xb, yb) * len(yb)
    return total / len(x)


def _batch_loss(model, x, labels):
    logits = multiscale(model, x)
    if logits.ndim == 1:
        logits = logits[None]
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), np.asarray(labels, dtype=int)].mean())


@dataclass
class TrnHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = -1


def trn_train(model: TrnModel, train_set, val_set, spec: TrainSpec = TrainSpec()):
    """Adam on cross-entropy with early stopping on validation loss.

    ``train_set``/``val_set`` are ``(x[n, N, D], labels[n])``.
    """
    spec.validate()
    x_tr, y_tr = _as_batch(model, train_set[0]), np.asarray(train_set[1], dtype=int)
    x_va, y_va = _as_batch(model, val_set[0]), np.asarray(val_set[1], dtype=int)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ValueError("train and validation sets must be non-empty")
    c = model.config.num_classes
    for labels in (y_tr, y_va):
        if np.any((labels < 0) | (labels >= c)):
            raise ValueError(f"labels must be in [0, {c})")

    work = model.copy()
    opt = Adam(work.params(), lr=spec.learning_rate)
    rng = np.random.default_rng(spec.seed)
    history = TrnHistory()
    best, best_val, stale = None, math.inf, 0
    n = len(y_tr)
    for epoch in range(spec.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            loss, grads = loss_and_grad(work, x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
            opt.step(grads)
            total += loss * len(idx)
        val = mean_loss(work, x_va, y_va)
        acc = float(np.mean(predict_labels(work, x_va) == y_va))
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        history.val_accuracy.append(acc)
        if val < best_val:
            best_val, best, stale = val, work.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
        if stale >= spec.patience:
            break
        opt.lr *= spec.lr_decay
    best.metadata.update({
        "train_seed": spec.seed,
        "epochs": len(history.val_loss),
        "best_epoch": history.best_epoch,
        "final_val_loss": best_val,
        "train_spec": asdict(spec),
    })
    return best, history


# ---------------------------------------------------------------------------
# synthetic motif task

POSITION = "position"
SPAN = "span"


def synth_motif(n: int, seed: int, n_frames: int = 8, dim: int = 32, num_classes: int = 8,
                variant: str = POSITION, amplitude: float = 5.0, noise: float = 1.0,
                motif_seed: int = 0):
    """Labelled feature sequences with a planted motif vector.

    ``position``: one motif copy at frame ``label``.
    ``span``: two identical copies at frames ``p < q`` with ``label = q - p - 1``;
    a pairwise-only model sees just the sum of the copy positions, so the
    label needs relations among three or more frames.

    The motif vector depends only on ``motif_seed``, so train and validation
    sets drawn with different ``seed`` values share it.  Labels are balanced
    (``i mod num_classes``, shuffled).  Returns ``(x, labels)``.
    """
    if variant == POSITION and num_classes > n_frames:
        raise ValueError("position variant needs num_classes <= n_frames")
    if variant == SPAN and num_classes > n_frames - 1:
        raise ValueError("span variant needs num_classes <= n_frames - 1")
    if variant not in (POSITION, SPAN):
        raise ValueError(f"unknown variant {variant!r}")
    motif = np.random.default_rng([motif_seed, dim]).normal(size=dim)
    motif *= amplitude / np.linalg.norm(motif)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    x = noise * rng.normal(size=(n, n_frames, dim))
    for i, lab in enumerate(labels):
        if variant == POSITION:
            x[i, lab] += motif
        else:
            span = lab + 1
            p = rng.integers(0, n_frames - span)
            x[i, p] += motif
            x[i, p + span] += motif
    return x, labels


# ---------------------------------------------------------------------------
# feature files


def write_features(path, x: np.ndarray, labels=None, text: bool = False):
    """``x`` has shape (count, N, streams, D) or (count, N, D)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x = x[:, :, None, :]
    count, n_frames, streams, dim = x.shape
    labs = np.full(count, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if text:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{TEXT_HEADER} n_frames={n_frames} dim={dim} streams={streams}\n")
            for lab, seq in zip(labs, x):
                f.write(" ".join([str(int(lab))] + [repr(float(v)) for v in seq.reshape(-1)]) + "\n")
        return
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(_HEADER.pack(count, n_frames, dim, streams, int(labels is not None)))
        for lab, seq in zip(labs, x):
            f.write(struct.pack("<i", int(lab)))
            row = np.ascontiguousarray(seq, dtype="<f8")
            f.write(row.tobytes())


def read_features(path):
    """Returns ``(x[count, N, streams, D], labels or None)``; format is sniffed."""
    with open(path, "rb") as f:
        head = f.read(len(FEATURE_MAGIC))
        if head == FEATURE_MAGIC:
            raw = f.read(_HEADER.size)
            if len(raw) != _HEADER.size:
                raise FeatureFormatError("truncated header")
            count, n_frames, dim, streams, labelled = _HEADER.unpack(raw)
            per = n_frames * streams * dim
            x = np.empty((count, n_frames, streams, dim))
            labels = np.empty(count, dtype=np.int64)
            for i in range(count):
                lab = f.read(4)
                payload = f.read(8 * per)
                if len(lab) != 4 or len(payload) != 8 * per:
                    raise FeatureFormatError(f"truncated payload at sequence {i}")
                labels[i] = struct.unpack("<i", lab)[0]
                x[i] = np.frombuffer(payload, dtype="<f8").reshape(n_frames, streams, dim)
            if f.read(1):
                raise FeatureFormatError("trailing bytes after last sequence")
            return x, (labels if labelled else None)
    return _read_text_features(path)


def _read_text_features(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith(TEXT_HEADER):
            raise FeatureFormatError("not a feature file")
        try:
            meta = dict(item.split("=") for item in header[len(TEXT_HEADER):].split())
            n_frames, dim, streams = int(meta["n_frames"]), int(meta["dim"]), int(meta["streams"])
        except (KeyError, ValueError):
            raise FeatureFormatError(f"bad header: {header!r}") from None
        rows, labels = [], []
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 1 + n_frames * streams * dim:
                raise FeatureFormatError(f"line {line_no}: expected {1 + n_frames * streams * dim} values, got {len(vals)}")
            labels.append(int(vals[0]))
            rows.append([float(v) for v in vals[1:]])
    x = np.array(rows, dtype=float).reshape(len(rows), n_frames, streams, dim)
    labels = np.array(labels, dtype=np.int64)
    return x, (None if np.all(labels < 0) and len(labels) else labels)


def flatten_streams(x: np.ndarray) -> np.ndarray:
    """(count, N, streams, D) -> (count, N, streams*D): per-frame stream concatenation."""
    return x.reshape(x.shape[0], x.shape[1], -1)


# ---------------------------------------------------------------------------
# persistence (JSON, same conventions as the locnet model file)

TRN_FORMAT = "pedloc-trn"
TRN_VERSION = 1


def save_trn(model: TrnModel, stream):
    cfg = asdict(model.config)
    doc = {
        "format": TRN_FORMAT,
        "version": TRN_VERSION,
        "config": cfg,
        "metadata": model.metadata,
        "scales": {str(d): {"tuples": b.tuples.tolist(), "w1": b.w1.tolist(), "b1": b.b1.tolist(),
                            "w2": b.w2.tolist(), "b2": b.b2.tolist(),
                            "w_out": b.w_out.tolist(), "b_out": b.b_out.tolist()}
                   for d, b in sorted(model.blocks.items())},
    }
    json.dump(doc, stream, sort_keys=True, allow_nan=False)
    stream.write("\n")


def load_trn(stream) -> TrnModel:
    try:
        doc = json.load(stream)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt or truncated model file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != TRN_FORMAT:
        raise ModelFormatError("not a TRN model file")
    if doc.get("version") != TRN_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        cfg = dict(doc["config"])
        if cfg.get("scales") is not None:
            cfg["scales"] = tuple(cfg["scales"])
        config = TrnConfig(**cfg)
        config.validate()
        blocks = {}
        for key, b in doc["scales"].items():
            blocks[int(key)] = ScaleBlock(
                np.array(b["tuples"], dtype=np.int64),
                *[np.array(b[name], dtype=float) for name in ("w1", "b1", "w2", "b2", "w_out", "b_out")])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid model file: {exc}") from None
    if sorted(blocks) != list(config.active_scales):
        raise ModelFormatError("scales do not match config")
    h, c = config.g_hidden, config.num_classes
    for d, b in blocks.items():
        shapes = [p.shape for p in b.params()]
        if shapes != [(d * config.feature_dim, h), (h,), (h, h), (h,), (h, c), (c,)]:
            raise ModelFormatError(f"scale {d}: parameter shapes do not match config")
        if b.tuples.ndim != 2 or b.tuples.shape[1] != d:
            raise ModelFormatError(f"scale {d}: bad tuple table")
        if not all(np.all(np.isfinite(p)) for p in b.params()):
            raise ModelFormatError(f"scale {d}: non-finite weights")
    return TrnModel(config, blocks, doc.get("metadata", {}))
