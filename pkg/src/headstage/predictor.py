"""Detection-error predictor: a 48-24 ReLU MLP trained with plain SGD.

The model maps a candidate (rate, threshold) pair plus the electrode's
template to expected miss and false-alarm rates.  Training data come from
simulating the headstage pipeline on a template embedded in white noise.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .acquisition import FactorSet
from .evaluation import match_template_events
from .signal_core import (
    DEAD_TIME_S,
    TEMPLATE_LEN,
    NeuralTrace,
    SpikeTemplate,
    condition,
    detect_spikes,
    estimate_noise_sigma,
    resample_trace,
)
from .synthetic import FIRING_RATE_HZ, NOISE_SIGMA_UV, SEGMENT_S, insert_templates, poisson_spike_times

log = logging.getLogger(__name__)

HIDDEN = (48, 24)
N_OUT = 2
N_FEATURES = 3 + TEMPLATE_LEN
MODEL_MAGIC = b"AQMLP1"
DEFAULT_THRESHOLDS_SIGMA = (-3.0, -3.5, -4.0, -4.5, -5.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# Inputs and targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorInput:
    """Model input for one electrode configuration.

    ``threshold_norm`` is the threshold in units of the electrode's broadband
    noise sigma, sign flipped so that larger means stricter.  ``peak_snr`` is
    the template's peak magnitude over the same sigma; the template itself is
    stored scaled to unit peak magnitude.
    """

    rate_norm: float
    threshold_norm: float
    peak_snr: float
    template: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 0 < self.rate_norm <= 1:
            raise ValueError(f"rate_norm must lie in (0, 1], got {self.rate_norm}")
        t = np.asarray(self.template, dtype=float)
        if t.shape != (TEMPLATE_LEN,):
            raise ValueError("template has the wrong length")
        if not np.isclose(np.max(np.abs(t)), 1.0):
            raise ValueError("template must be normalised to unit peak magnitude")
        object.__setattr__(self, "template", t)

    @classmethod
    def make(cls, template: SpikeTemplate, rate_hz: float, threshold_uv: float,
             noise_sigma_uv: float) -> "PredictorInput":
        peak = template.peak_uv
        return cls(
            rate_norm=rate_hz / template.base_rate_hz,
            threshold_norm=-threshold_uv / noise_sigma_uv,
            peak_snr=peak / noise_sigma_uv,
            template=template.waveform / peak,
        )

    def features(self) -> np.ndarray:
        head = [self.rate_norm, self.threshold_norm, np.log(max(self.peak_snr, 1e-6))]
        return np.concatenate([head, self.template])


@dataclass(frozen=True)
class ErrorEstimate:
    fnr: float
    fpr: float

    def __post_init__(self):
        if not (0 <= self.fnr <= 1 and 0 <= self.fpr <= 1):
            raise ValueError(f"error rates must lie in [0, 1]: {self.fnr}, {self.fpr}")

    @property
    def total(self) -> float:
        return self.fnr + self.fpr


@dataclass(frozen=True)
class TrainingSample:
    input: PredictorInput
    target: ErrorEstimate


def generate_training_sample(template: SpikeTemplate, factor: int, threshold_uv: float,
                             noise_sigma_uv: float = NOISE_SIGMA_UV,
                             firing_rate_hz: float = FIRING_RATE_HZ, seed: int = 0,
                             duration_s: float = SEGMENT_S, factors: FactorSet = FactorSet(),
                             dead_time_s: float = DEAD_TIME_S) -> TrainingSample:
    """Measure detection error for one configuration on simulated data.

    The template is added to seeded white noise at refractory Poisson times,
    the result is re-digitised at ``base_rate / factor``, band-passed and
    thresholded, and detections are matched against the latency-corrected
    insertion times.
    """
    if factor not in factors:
        raise ValueError(f"factor {factor} not in {tuple(factors)}")
    base = template.base_rate_hz
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * base))
    x = rng.standard_normal(n) * noise_sigma_uv
    times = np.rint(poisson_spike_times(firing_rate_hz, duration_s, rng) * base) / base
    insert_templates(x, template.waveform, times, base)

    raw = NeuralTrace.from_array(x, base)
    sigma = estimate_noise_sigma(raw)
    rate = base / factor
    filtered = condition(resample_trace(raw, 0, rate))
    events = detect_spikes(filtered, threshold_uv, dead_time_s)

    report = match_template_events(template, rate, threshold_uv, times, events,
                                   dead_time_s=dead_time_s)
    inp = PredictorInput.make(template, rate, threshold_uv, sigma)
    return TrainingSample(inp, ErrorEstimate(report.fnr, report.fpr))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, targets and the generation parameters of each row."""

    X: np.ndarray
    Y: np.ndarray
    template_index: np.ndarray
    factor: np.ndarray
    threshold_sigma: np.ndarray
    seed: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.Y[idx], self.template_index[idx], self.factor[idx],
                       self.threshold_sigma[idx], self.seed[idx])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["template", "factor", "threshold_sigma", "seed", "rate_norm",
                        "threshold_norm", "log_snr", "fnr", "fpr"])
            for i in range(len(self)):
                w.writerow([int(self.template_index[i]), int(self.factor[i]),
                            float(self.threshold_sigma[i]), int(self.seed[i]),
                            *(float(v) for v in self.X[i, :3]), *(float(v) for v in self.Y[i])])
        return path

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        np.savez(path, X=self.X, Y=self.Y, template_index=self.template_index, factor=self.factor,
                 threshold_sigma=self.threshold_sigma, seed=self.seed)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["X"], z["Y"], z["template_index"], z["factor"], z["threshold_sigma"],
                       z["seed"])


def build_dataset(templates: Sequence[SpikeTemplate],
                  grid: tuple[Sequence[int], Sequence[float]] | None = None,
                  n_samples: int = 2000, seed: int = 0,
                  noise_sigma_uv: float = NOISE_SIGMA_UV,
                  firing_rate_hz: float = FIRING_RATE_HZ,
                  train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """Draw ``n_samples`` (template, factor, threshold) cells and simulate each.

    ``grid`` is (factors, thresholds in noise sigmas).  Returns the train and
    test splits of a seeded shuffle.  A bank with ``n_samples`` templates
    gives every sample its own waveform, so the test split then measures
    accuracy on unseen templates.
    """
    if grid is None:
        grid = (FactorSet().factors, DEFAULT_THRESHOLDS_SIGMA)
    factors, thresholds = list(grid[0]), list(grid[1])
    if not templates or not factors or not thresholds:
        raise ValueError("templates and both grid axes must be non-empty")
    if n_samples < 10:
        raise ValueError("need at least 10 samples")
    fset = FactorSet(tuple(sorted(factors)))
    rng = np.random.default_rng(seed)
    # cycle through the bank so every template is used equally often
    ti = rng.permutation(n_samples) % len(templates)
    fi = np.asarray(factors)[rng.integers(len(factors), size=n_samples)]
    th = np.asarray(thresholds, dtype=float)[rng.integers(len(thresholds), size=n_samples)]
    seeds = rng.integers(0, 2**31 - 1, size=n_samples)

    X = np.empty((n_samples, N_FEATURES))
    Y = np.empty((n_samples, N_OUT))
    for i in range(n_samples):
        s = generate_training_sample(templates[ti[i]], int(fi[i]), th[i] * noise_sigma_uv,
                                     noise_sigma_uv, firing_rate_hz, int(seeds[i]), factors=fset)
        X[i] = s.input.features()
        Y[i] = (s.target.fnr, s.target.fpr)
        if (i + 1) % 250 == 0:
            log.info("generated %d/%d samples", i + 1, n_samples)

    full = Dataset(X, Y, ti, fi, th, seeds)
    order = rng.permutation(n_samples)
    n_train = int(round(train_fraction * n_samples))
    return full.subset(np.sort(order[:n_train])), full.subset(np.sort(order[n_train:]))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpModel:
    """Weights and biases for input -> 48 -> 24 -> 2.

    Hidden layers use ReLU, the output layer a logistic squash so both
    predicted rates stay inside [0, 1].
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "logistic"

    def __post_init__(self):
        dims = self.dims
        if len(self.weights) != 3 or tuple(dims[1:3]) != HIDDEN or dims[-1] != N_OUT:
            raise ValueError(f"unsupported topology {dims}")
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[1],):
                raise ValueError("bias does not match weight matrix")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("layer dimensions do not chain")

    @classmethod
    def init(cls, n_in: int = N_FEATURES, seed: int = 0) -> "MlpModel":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = (n_in, *HIDDEN, N_OUT)
        weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims, dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(W.shape[1] for W in self.weights))

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def fold_input_scaling(self, mean: np.ndarray, scale: np.ndarray) -> "MlpModel":
        """Model on raw inputs equivalent to this one on ``(x - mean) / scale``."""
        W0 = self.weights[0] / scale[:, None]
        b0 = self.biases[0] - (mean / scale) @ self.weights[0]
        return MlpModel([W0, *(W.copy() for W in self.weights[1:])],
                        [b0, *(b.copy() for b in self.biases[1:])])

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return outputs and the activations of every layer (input first)."""
        acts = [X]
        a = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = _relu(a @ W + b)
            acts.append(a)
        out = _sigmoid(a @ self.weights[-1] + self.biases[-1])
        acts.append(out)
        return out, acts

    def loss_and_grads(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean squared error over all outputs and its parameter gradients."""
        out, acts = self.forward(X)
        diff = out - Y
        loss = float(np.mean(diff ** 2))
        delta = 2.0 * diff / diff.size * out * (1.0 - out)
        grads_w, grads_b = [], []
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w.append(acts[layer].T @ delta)
            grads_b.append(delta.sum(axis=0))
            if layer:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        grads_w.reverse()
        grads_b.reverse()
        return loss, [g for pair in zip(grads_w, grads_b) for g in pair]

    # serialisation -------------------------------------------------------

    def to_bytes(self) -> bytes:
        dims = self.dims
        parts = [MODEL_MAGIC, struct.pack("<I", len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
        for W, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpModel":
        if data[:6] != MODEL_MAGIC:
            raise ValueError("not an AQMLP1 model file")
        (n_dims,) = struct.unpack_from("<I", data, 6)
        dims = struct.unpack_from(f"<{n_dims}I", data, 10)
        off = 10 + 4 * n_dims
        weights, biases = [], []
        for a, b in zip(dims, dims[1:]):
            W = np.frombuffer(data, dtype="<f8", count=a * b, offset=off).reshape(a, b)
            off += 8 * a * b
            bias = np.frombuffer(data, dtype="<f8", count=b, offset=off)
            off += 8 * b
            weights.append(W.astype(float))
            biases.append(bias.astype(float))
        if off != len(data):
            raise ValueError(f"model file has {len(data) - off} trailing bytes")
        return cls(weights, biases)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MlpModel":
        return cls.from_bytes(Path(path).read_bytes())


def predict_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dims[0]:
        raise ValueError(f"expected {model.dims[0]} features, got {X.shape[1]}")
    return model.forward(X)[0]


def predict(model: MlpModel, inp: PredictorInput) -> ErrorEstimate:
    y = predict_batch(model, inp.features()[None, :])[0]
    return ErrorEstimate(float(y[0]), float(y[1]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyperparams:
    """SGD settings.

    Plain SGD at the textbook defaults stalls on the mean-prediction plateau
    for this data; heavy-ball momentum and a long patience get it past.
    """

    learning_rate: float = 0.05
    batch_size: int = 32
    max_epochs: int = 3000
    patience: int = 1000
    validation_fraction: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    standardize: bool = True


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _mse(model: MlpModel, X, Y) -> float:
    return float(np.mean((predict_batch(model, X) - Y) ** 2))


def train(dataset: Dataset, hyperparams: Hyperparams = Hyperparams(),
          history: TrainingHistory | None = None) -> MlpModel:
    """Minibatch SGD on MSE with early stopping on a held-back slice.

    The returned model is the checkpoint with the lowest validation loss,
    which may be the untrained initialisation.  With ``standardize`` the
    features are centred and scaled by training-split statistics during
    optimisation and the scaling is folded into the first layer afterwards,
    so the returned model takes raw features.
    """
    hp = hyperparams
    if len(dataset) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(hp.seed)
    X, Y = dataset.X.copy(), dataset.Y.copy()
    order = rng.permutation(len(X))
    n_val = int(round(hp.validation_fraction * len(X)))
    if len(X) - n_val < 1:
        n_val = 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    Xv, Yv = (X[val_idx], Y[val_idx]) if n_val else (X[tr_idx], Y[tr_idx])
    Xt, Yt = X[tr_idx], Y[tr_idx]
    mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    if hp.standardize:
        mean = Xt.mean(axis=0)
        scale = Xt.std(axis=0)
        scale[scale < 1e-9] = 1.0
        Xt, Xv = (Xt - mean) / scale, (Xv - mean) / scale

    model = MlpModel.init(X.shape[1], seed=hp.seed)
    velocity = [np.zeros_like(p) for p in model.params()]
    best = model.copy()
    best_loss = _mse(model, Xv, Yv)
    hist = history if history is not None else TrainingHistory()
    stale = 0
    for epoch in range(hp.max_epochs):
        perm = rng.permutation(len(Xt))
        running = 0.0
        for start in range(0, len(Xt), hp.batch_size):
            idx = perm[start:start + hp.batch_size]
            loss, grads = model.loss_and_grads(Xt[idx], Yt[idx])
            running += loss * len(idx)
            for p, g, v in zip(model.params(), grads, velocity):
                v *= hp.momentum
                v -= hp.learning_rate * g
                p += v
        train_loss = running / len(Xt)
        val_loss = _mse(model, Xv, Yv)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged(epoch)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        if val_loss < best_loss:
            best_loss, best, stale = val_loss, model.copy(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= hp.patience:
                break
    return best.fold_input_scaling(mean, scale) if hp.standardize else best


def evaluate(model: MlpModel, dataset: Dataset) -> dict:
    """Held-out mean absolute error and MSE per output."""
    P = predict_batch(model, dataset.X)
    err = P - dataset.Y
    return {
        "mae_fnr": float(np.mean(np.abs(err[:, 0]))),
        "mae_fpr": float(np.mean(np.abs(err[:, 1]))),
        "mse": float(np.mean(err ** 2)),
        "n": len(dataset),
    }


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def gradient_check(model: MlpModel, X: np.ndarray, Y: np.ndarray, step: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    Relative gap is ``|a - n| / max(|a|, |n|, floor)``.  Parameters whose
    +/- perturbation flips any ReLU unit are skipped: the loss is not
    differentiable across that kink, so the difference quotient is
    meaningless there.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    _, analytic = model.loss_and_grads(X, Y)

    def probe():
        out, acts = model.forward(X)
        return float(np.mean((out - Y) ** 2)), [a > 0 for a in acts[1:-1]]

    _, base_masks = probe()
    worst = 0.0
    for p, g in zip(model.params(), analytic):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, mp = probe()
            flat[i] = orig - step
            lm, mm = probe()
            flat[i] = orig
            if any((a != b).any() or (a != c).any() for a, b, c in zip(base_masks, mp, mm)):
                continue
            num = (lp - lm) / (2 * step)
            rel = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, rel)
    return worst
