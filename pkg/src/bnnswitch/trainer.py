"""Synthetic traffic, straight-through training, and model evaluation.

The generator draws labeled 1024-byte payloads with class-conditional
per-bit probabilities, so a linear-threshold rule separates the classes
to a tunable degree; a majority-bit oracle built from the same bias
vectors provides an independent sanity classifier.

Training keeps real-valued shadow parameters and binarizes on the forward
pass (sign for the hidden weights and activations), passing gradients
straight through the sign with a clip at |pre-activation| <= d. The loss
is logistic on the scalar score with a configurable weight on the
malicious class; the per-epoch checkpoint maximizing the configured
validation metric is exported in quantized form (packed hidden weights,
saturating int8 hidden bias, float32 output layer).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .bnn import ModelWeights, infer_reference
from .packet_format import PAYLOAD_BITS, PAYLOAD_LEN, PayloadView

CHUNK_ROWS = 512


class DegenerateParams(ValueError):
    """Generator parameters cannot produce a separable dataset."""


class NonFiniteLoss(RuntimeError):
    """Training diverged; carries epoch/batch diagnostics in the message."""


@dataclass(frozen=True)
class GeneratorParams:
    """Seeded description of the synthetic traffic distribution.

    bias_benign[j] and bias_malicious[j] are P(bit j = 1) for each class.
    """

    seed: int
    n_samples: int
    class_prior: float = 0.5
    bias_benign: np.ndarray = field(default=None, repr=False)
    bias_malicious: np.ndarray = field(default=None, repr=False)

    @staticmethod
    def default(seed: int, n_samples: int, *, class_prior: float = 0.5,
                informative_bits: int = 1024, delta: float = 0.03,
                profile_seed: int = 7) -> "GeneratorParams":
        """Standard profile: a seeded subset of positions leans towards 1
        under malicious traffic and towards 0 under benign, the rest are
        fair coin flips."""
        rng = np.random.default_rng(profile_seed)
        positions = rng.choice(PAYLOAD_BITS, size=informative_bits, replace=False)
        benign = np.full(PAYLOAD_BITS, 0.5)
        malicious = np.full(PAYLOAD_BITS, 0.5)
        benign[positions] -= delta
        malicious[positions] += delta
        return GeneratorParams(seed=seed, n_samples=n_samples,
                               class_prior=class_prior,
                               bias_benign=benign, bias_malicious=malicious)

    @staticmethod
    def flat(seed: int, n_samples: int, class_prior: float = 0.5) -> "GeneratorParams":
        """Identical class distributions; only useful for null checks."""
        bias = np.full(PAYLOAD_BITS, 0.5)
        return GeneratorParams(seed=seed, n_samples=n_samples,
                               class_prior=class_prior,
                               bias_benign=bias, bias_malicious=bias.copy())


@dataclass
class SyntheticDataset:
    """Packed payloads with labels (0 benign, 1 malicious)."""

    payloads: np.ndarray  # (n, PAYLOAD_LEN) uint8
    labels: np.ndarray    # (n,) uint8
    params: GeneratorParams | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "SyntheticDataset":
        return SyntheticDataset(self.payloads[idx], self.labels[idx], self.params)

    def payload_bytes(self, i: int) -> bytes:
        return self.payloads[i].tobytes()


def generate_dataset(params: GeneratorParams, *,
                     require_separable: bool = False) -> SyntheticDataset:
    """Draw the dataset; byte-identical across calls with equal params."""
    if require_separable and np.array_equal(params.bias_benign,
                                            params.bias_malicious):
        raise DegenerateParams("class bit distributions are identical")
    if not 0.0 < params.class_prior < 1.0:
        raise DegenerateParams(f"class prior {params.class_prior} leaves one "
                               "class empty in expectation")
    rng = np.random.default_rng(params.seed)
    n = params.n_samples
    labels = (rng.random(n) < params.class_prior).astype(np.uint8)
    biases = np.stack([params.bias_benign, params.bias_malicious])
    payloads = np.empty((n, PAYLOAD_LEN), dtype=np.uint8)
    for lo in range(0, n, CHUNK_ROWS):
        hi = min(lo + CHUNK_ROWS, n)
        u = rng.random((hi - lo, PAYLOAD_BITS))
        bits = (u < biases[labels[lo:hi]]).astype(np.uint8)
        payloads[lo:hi] = np.packbits(bits, axis=1, bitorder="little")
    return SyntheticDataset(payloads, labels, params)


def unpack_bits(payloads: np.ndarray) -> np.ndarray:
    """(n, bytes) packed rows -> (n, bits) 0/1 rows, LSB-first."""
    return np.unpackbits(payloads, axis=1, bitorder="little")


class MajorityBitOracle:
    """Independent linear-threshold sanity classifier built from the
    generator's bias vectors: one vote per biased position, thresholded at
    the midpoint of the class-conditional expected vote counts."""

    def __init__(self, params: GeneratorParams):
        diff = params.bias_malicious - params.bias_benign
        self.positions = np.nonzero(diff)[0]
        self.toward_one = diff[self.positions] > 0
        pm = params.bias_malicious[self.positions]
        pb = params.bias_benign[self.positions]
        expected_mal = np.where(self.toward_one, pm, 1.0 - pm).sum()
        expected_ben = np.where(self.toward_one, pb, 1.0 - pb).sum()
        self.threshold = (expected_mal + expected_ben) / 2.0

    def votes(self, payloads: np.ndarray) -> np.ndarray:
        if len(self.positions) == 0:
            return np.zeros(len(payloads))
        bits = unpack_bits(payloads)[:, self.positions]
        return (bits == self.toward_one).sum(axis=1)

    def predict(self, payloads: np.ndarray) -> np.ndarray:
        return (self.votes(payloads) > self.threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class EvalMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def from_counts(tp: int, fp: int, tn: int, fn: int) -> "EvalMetrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        return EvalMetrics(precision, recall, f1, tp, fp, tn, fn)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall,
                "f1": self.f1, "tp": self.tp, "fp": self.fp, "tn": self.tn,
                "fn": self.fn}


def metrics_from_predictions(predicted: np.ndarray,
                             labels: np.ndarray) -> EvalMetrics:
    predicted = predicted.astype(bool)
    actual = labels.astype(bool)
    return EvalMetrics.from_counts(
        tp=int((predicted & actual).sum()),
        fp=int((predicted & ~actual).sum()),
        tn=int((~predicted & ~actual).sum()),
        fn=int((~predicted & actual).sum()))


def batch_scores(model: ModelWeights, payloads: np.ndarray) -> np.ndarray:
    """Scores for packed payload rows, bit-identical to running the scalar
    reference on each row.

    The hidden matmul runs in float32: every partial sum is an integer of
    magnitude <= d < 2**24, so it is exact regardless of accumulation
    order. The output layer accumulates per-row in float64 in ascending
    unit order (cumsum), matching the reference exactly.
    """
    w_bits = np.unpackbits(model.w1_packed, axis=1, bitorder="little")
    w_signs = w_bits.astype(np.float32) * 2.0 - 1.0
    b1 = model.b1.astype(np.float32)
    out = np.empty(len(payloads), dtype=np.float64)
    for lo in range(0, len(payloads), CHUNK_ROWS):
        hi = min(lo + CHUNK_ROWS, len(payloads))
        x_signs = unpack_bits(payloads[lo:hi]).astype(np.float32) * 2.0 - 1.0
        pre = x_signs @ w_signs.T + b1
        hidden = np.where(pre >= 0.0, 1.0, -1.0)
        out[lo:hi] = np.cumsum(hidden * model._w2_f64, axis=1)[:, -1] \
            + model._b2_f64
    return out


def evaluate(model: ModelWeights, dataset: SyntheticDataset) -> EvalMetrics:
    """Score every sample with the scalar reference path and apply the
    forwarding policy threshold (score > 0 means malicious)."""
    predictions = np.empty(len(dataset), dtype=np.uint8)
    for i in range(len(dataset)):
        score = infer_reference(model, PayloadView(dataset.payload_bytes(i)))
        predictions[i] = 1 if score > 0.0 else 0
    return metrics_from_predictions(predictions, dataset.labels)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    pos_weight: float = 4.0
    epochs: int = 20
    learning_rate: float = 0.025
    seed: int = 0
    selection_metric: str = "recall"
    hidden: int = 32
    batch_size: int = 128
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.pos_weight <= 0:
            raise ValueError(f"pos_weight must be positive, got {self.pos_weight}")
        if self.selection_metric not in ("recall", "precision"):
            raise ValueError(f"selection_metric must be recall or precision, "
                             f"got {self.selection_metric!r}")


def split_dataset(dataset: SyntheticDataset, val_fraction: float,
                  seed: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Disjoint seeded train/validation partition."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_val = max(1, int(len(dataset) * val_fraction))
    return dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])


def _sigmoid(y: np.ndarray) -> np.ndarray:
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    e = np.exp(y[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _quantize(w1_real: np.ndarray, b1_real: np.ndarray, w2_real: np.ndarray,
              b2_real: float, d: int, h: int) -> ModelWeights:
    w1_packed = np.packbits((w1_real >= 0.0).astype(np.uint8), axis=1,
                            bitorder="little")
    b1 = np.clip(np.rint(b1_real), -128, 127).astype(np.int8)
    return ModelWeights(d, h, w1_packed, b1,
                        w2_real.astype(np.float32), float(np.float32(b2_real)))


def train_bnn(dataset: SyntheticDataset, config: TrainConfig) -> ModelWeights:
    """Train on the seeded split and return the quantized checkpoint that
    maximizes the configured validation metric (later epochs win ties)."""
    labels = dataset.labels
    if labels.min() == labels.max():
        raise DegenerateParams("training data must contain both classes")
    d, h = PAYLOAD_BITS, config.hidden
    train_ds, val_ds = split_dataset(dataset, config.val_fraction, config.seed)

    rng = np.random.default_rng(config.seed)
    w1 = rng.normal(scale=0.01, size=(h, d)).astype(np.float32)
    b1 = np.zeros(h, dtype=np.float32)
    w2 = rng.normal(scale=1.0 / np.sqrt(h), size=h).astype(np.float32)
    b2 = np.float32(0.0)

    adam_m = [np.zeros_like(p) for p in (w1, b1, w2)] + [0.0]
    adam_v = [np.zeros_like(p) for p in (w1, b1, w2)] + [0.0]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    y_train = train_ds.labels.astype(np.float32)
    sample_weight = np.where(y_train == 1, config.pos_weight, 1.0).astype(np.float32)

    best_metric = -1.0
    best_model: ModelWeights | None = None

    # arithmetic in a diverged state is allowed to overflow; the per-batch
    # finiteness check below is the canary that stops the run
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(len(train_ds))
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                xb = unpack_bits(train_ds.payloads[idx]).astype(np.float32) * 2.0 - 1.0
                tb = y_train[idx]
                wb = sample_weight[idx]

                w1_bin = np.where(w1 >= 0.0, 1.0, -1.0).astype(np.float32)
                pre = xb @ w1_bin.T + b1
                hidden = np.where(pre >= 0.0, 1.0, -1.0).astype(np.float32)
                y = hidden @ w2 + b2
                # weighted logistic loss on the scalar score
                loss = float(np.mean(wb * (np.maximum(y, 0.0) - y * tb
                                           + np.log1p(np.exp(-np.abs(y))))))
                if not np.isfinite(loss):
                    raise NonFiniteLoss(
                        f"epoch {epoch}, batch at {lo}: loss={loss!r}, "
                        f"|y|max={float(np.abs(y).max())!r}")

                dy = wb * (_sigmoid(y) - tb) / len(idx)
                dw2 = hidden.T @ dy
                db2 = float(dy.sum())
                dhidden = np.outer(dy, w2)
                dpre = dhidden * (np.abs(pre) <= d)  # straight-through, clipped
                db1 = dpre.sum(axis=0)
                dw1 = dpre.T @ xb

                step += 1
                scale = np.sqrt(1.0 - beta2 ** step) / (1.0 - beta1 ** step)
                for slot_i, (param, grad) in enumerate(
                        [(w1, dw1), (b1, db1), (w2, dw2)]):
                    adam_m[slot_i] = beta1 * adam_m[slot_i] + (1 - beta1) * grad
                    adam_v[slot_i] = beta2 * adam_v[slot_i] + (1 - beta2) * grad ** 2
                    param -= config.learning_rate * scale * adam_m[slot_i] \
                        / (np.sqrt(adam_v[slot_i]) + eps)
                adam_m[3] = beta1 * adam_m[3] + (1 - beta1) * db2
                adam_v[3] = beta2 * adam_v[3] + (1 - beta2) * db2 ** 2
                b2 = np.float32(b2 - config.learning_rate * scale * adam_m[3]
                                / (np.sqrt(adam_v[3]) + eps))
                np.clip(w1, -1.0, 1.0, out=w1)

            candidate = _quantize(w1, b1, w2, float(b2), d, h)
            scores = batch_scores(candidate, val_ds.payloads)
            metrics = metrics_from_predictions((scores > 0.0), val_ds.labels)
            value = getattr(metrics, config.selection_metric)
            if value >= best_metric:
                best_metric = value
                best_model = candidate

    assert best_model is not None
    return best_model


# ---------------------------------------------------------------------------
# dataset container file: u64 record count, then (label u8, payload) records

def save_dataset(path, dataset: SyntheticDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(dataset)))
        for i in range(len(dataset)):
            fh.write(struct.pack("B", int(dataset.labels[i])))
            fh.write(dataset.payload_bytes(i))


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError(f"dataset file is {len(data)} bytes, header needs 8")
    (count,) = struct.unpack_from("<Q", data, 0)
    expected = 8 + count * (1 + PAYLOAD_LEN)
    if len(data) != expected:
        raise ValueError(f"dataset file is {len(data)} bytes, "
                         f"{count} records need {expected}")
    labels = np.empty(count, dtype=np.uint8)
    payloads = np.empty((count, PAYLOAD_LEN), dtype=np.uint8)
    pos = 8
    for i in range(count):
        labels[i] = data[pos]
        payloads[i] = np.frombuffer(data, dtype=np.uint8, count=PAYLOAD_LEN,
                                    offset=pos + 1)
        pos += 1 + PAYLOAD_LEN
    return SyntheticDataset(payloads, labels)
