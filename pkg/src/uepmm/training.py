"""Coded backpropagation: a small dense network whose weight gradients go through the straggler pipeline.

Each SGD step computes the three weight-gradient products
``activation.T @ delta`` through :func:`coded_matmul`: rows and columns are
permuted by descending norm, the product is cut into a 3x3 block grid,
encoded, subjected to random worker completion with deadline ``t_max`` and
decoded with zero fill. The baseline uses the exact gradient.
"""

from __future__ import annotations

import csv
import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from uepmm.blockmat import build_class_profile, classify_by_norm, default_class_merge, norm_permutation, partition
from uepmm.coding import check_strategy, make_tasks, worker_product
from uepmm.decode import ReceivedSet, decode
from uepmm.latency import ExponentialLatency

log = logging.getLogger(__name__)

LAYER_SIZES = (784, 100, 200, 10)
GRID = 3  # blocks per side of every gradient product
UNCODED_WORKERS = 9
# workers per encoding; completion rate is scaled by UNCODED_WORKERS / workers
WORKERS = {"UNCODED": 9, "NOW": 15, "EW": 15, "BLOCKREP": 18, "MDS": 15}
BASELINE = "BASELINE"
TRAIN_STRATEGIES = (BASELINE, "NOW", "EW", "UNCODED", "BLOCKREP")
T_MAX_GRID = (0.25, 0.5, 1.0, 2.0)
DEFAULT_GAMMA = (0.35, 0.35, 0.3)


def train_strategy(name: str) -> str:
    s = str(name).upper()
    return BASELINE if s in (BASELINE, "EXACT", "FULL") else check_strategy(s)


def rate_scale(strategy: str) -> float:
    """Per-worker completion-rate multiplier at a fixed total compute budget."""
    return UNCODED_WORKERS / WORKERS[check_strategy(strategy)]


# --------------------------------------------------------------------------- network


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, rng, sizes=LAYER_SIZES) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (a + b))
            ws.append(rng.uniform(-lim, lim, size=(a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, sizes=LAYER_SIZES) -> "DenseNet":
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def parameters(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]


@dataclass
class Forward:
    activations: list[np.ndarray]  # input plus every hidden output (post-ReLU)
    probs: np.ndarray
    loss: float
    accuracy: float


def forward(net: DenseNet, x, y=None) -> Forward:
    """Forward pass; ``y`` holds integer labels (loss and accuracy are NaN without them)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise ValueError(f"expected a batch of {net.sizes[0]}-wide rows, got shape {x.shape}")
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
    probs = softmax(z)
    if y is None:
        return Forward(acts, probs, float("nan"), float("nan"))
    y = np.asarray(y)
    p = probs[np.arange(len(y)), y]
    loss = float(-np.mean(np.log(np.maximum(p, 1e-300))))
    acc = float(np.mean(probs.argmax(axis=1) == y))
    return Forward(acts, probs, loss, acc)


def backward(net: DenseNet, fwd: Forward, y, matmul=None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the mean cross-entropy.

    ``matmul(layer, a, b)`` computes the weight-gradient product ``a @ b``;
    the default is the exact product.
    """
    y = np.asarray(y)
    n = len(y)
    delta = fwd.probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in reversed(range(len(net.weights))):
        a = fwd.activations[i]
        gw[i] = a.T @ delta if matmul is None else matmul(i, a.T, delta)
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ net.weights[i].T) * (fwd.activations[i] > 0)
    return gw, gb


def sgd_update(net: DenseNet, gw, gb, lr: float) -> None:
    for w, b, dw, db in zip(net.weights, net.biases, gw, gb):
        w -= lr * dw
        b -= lr * db


def gradient_check(net: DenseNet, x, y, count: int = 20, eps: float = 1e-6, rng=None) -> float:
    """Worst relative error between backprop and central differences over ``count`` random weights."""
    rng = np.random.default_rng(0) if rng is None else rng
    gw, _ = backward(net, forward(net, x, y), y)
    worst = 0.0
    for _ in range(count):
        layer = int(rng.integers(len(net.weights)))
        w = net.weights[layer]
        idx = tuple(int(rng.integers(s)) for s in w.shape)
        old = w[idx]
        w[idx] = old + eps
        up = forward(net, x, y).loss
        w[idx] = old - eps
        down = forward(net, x, y).loss
        w[idx] = old
        num = (up - down) / (2 * eps)
        ana = gw[layer][idx]
        scale = max(abs(num), abs(ana), 1e-8)
        worst = max(worst, abs(num - ana) / scale)
    return worst


# --------------------------------------------------------------------------- coded product


@dataclass
class CodedProduct:
    estimate: np.ndarray
    recovered: np.ndarray  # (GRID, GRID) in permuted block coordinates
    received: int


def _pad(m, rows, cols):
    out = np.zeros((rows, cols))
    out[: m.shape[0], : m.shape[1]] = m
    return out


def coded_matmul(
    a,
    b,
    strategy: str,
    latency: ExponentialLatency,
    t_max: float,
    rng,
    workers: int | None = None,
    gamma=DEFAULT_GAMMA,
    window: str = "pair",
    S: int = 3,
    grid: int = GRID,
) -> CodedProduct:
    """Approximate ``a @ b`` from the workers that finish before ``t_max``.

    Both dimensions are zero-padded up to a multiple of ``grid`` and stripped
    after decoding. Block importance is recomputed from the permuted operands.
    """
    strategy = check_strategy(strategy)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    rows, cols = a.shape[0], b.shape[1]
    rp, ri = norm_permutation(a, "rows")
    cp, ci = norm_permutation(b, "columns")
    R, C = -(-rows // grid) * grid, -(-cols // grid) * grid
    pa = partition(_pad(a[rp], R, a.shape[1]), grid, R // grid, "left")
    pb = partition(_pad(b[:, cp], b.shape[0], C), grid, C // grid, "right")
    profile = build_class_profile(classify_by_norm(pa, S), classify_by_norm(pb, S), S, default_class_merge(S))
    if workers is None:
        workers = WORKERS.get(strategy, grid * grid)
    tasks = make_tasks(strategy, profile, workers, rng, gamma=gamma, window=window)
    times = latency.sample(workers, rng)
    keep = [i for i in range(workers) if times[i] < t_max]
    products = {i: worker_product(tasks[i], pa, pb) for i in keep}
    rec = ReceivedSet.from_results(tasks, products, times, t_max)
    rep = decode(rec, profile, block_shape=(pa.block_size, pb.block_size))
    est = rep.estimate[:rows, :cols][ri][:, ci]
    return CodedProduct(est, rep.recovered, len(keep))


def coded_grad_step(
    net: DenseNet,
    x,
    y,
    strategy: str,
    latency: ExponentialLatency,
    t_max: float,
    rng,
    lr: float = 0.01,
    gamma=DEFAULT_GAMMA,
    window: str = "pair",
    code_grad_input: bool = False,
) -> Forward:
    """One SGD step with coded weight-gradient products; updates ``net`` in place.

    The baseline strategy uses exact products. ``code_grad_input`` also routes
    the backpropagated ``delta @ W.T`` products through the coded pipeline.
    """
    strategy = train_strategy(strategy)
    fwd = forward(net, x, y)
    if strategy == BASELINE:
        gw, gb = backward(net, fwd, y)
        sgd_update(net, gw, gb, lr)
        return fwd
    lat = latency.scaled(latency.scale * rate_scale(strategy))

    def mm(_, a, b):
        return coded_matmul(a, b, strategy, lat, t_max, rng, gamma=gamma, window=window).estimate

    if code_grad_input:
        gw, gb = _backward_all_coded(net, fwd, y, mm)
    else:
        gw, gb = backward(net, fwd, y, matmul=mm)
    sgd_update(net, gw, gb, lr)
    return fwd


def _backward_all_coded(net, fwd, y, mm):
    y = np.asarray(y)
    n = len(y)
    delta = fwd.probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in reversed(range(len(net.weights))):
        gw[i] = mm(i, fwd.activations[i].T, delta)
        gb[i] = delta.sum(axis=0)
        if i:
            delta = mm(i, delta, net.weights[i].T) * (fwd.activations[i] > 0)
    return gw, gb


# --------------------------------------------------------------------------- data

IDX_FILES = {
    "train_x": "train-images-idx3-ubyte",
    "train_y": "train-labels-idx1-ubyte",
    "test_x": "t10k-images-idx3-ubyte",
    "test_y": "t10k-labels-idx1-ubyte",
}


def read_idx(path) -> np.ndarray:
    """Read an MNIST IDX file (optionally gzipped)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    magic, count = struct.unpack(">II", data[:8])
    if magic == 2051:
        rows, cols = struct.unpack(">II", data[8:16])
        return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    if magic == 2049:
        return np.frombuffer(data, dtype=np.uint8, offset=8)[:count]
    raise ValueError(f"{path}: bad IDX magic number {magic} (expected 2051 or 2049)")


def _find(root: Path, name: str) -> Path | None:
    for cand in (root / name, root / (name + ".gz")):
        if cand.exists():
            return cand
    return None


def load_mnist(root) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(x_train, y_train, x_test, y_test)`` scaled to [0, 1]."""
    root = Path(root)
    paths = {k: _find(root, v) for k, v in IDX_FILES.items()}
    missing = [str(root / IDX_FILES[k]) for k, p in paths.items() if p is None]
    if missing:
        raise FileNotFoundError("MNIST IDX files not found: " + ", ".join(missing) + " (optionally .gz)")
    xtr, ytr, xte, yte = (read_idx(paths[k]) for k in ("train_x", "train_y", "test_x", "test_y"))
    return xtr / 255.0, ytr.astype(np.int64), xte / 255.0, yte.astype(np.int64)


def synthetic_digits(n_train: int, n_test: int, seed: int = 0, noise: float = 1.0):
    """784-dim, 10-class Gaussian blobs with very uneven feature scales.

    Feature scales decay geometrically (like MNIST's mostly-dark border) so the
    weight-gradient rows differ strongly in norm.
    """
    rng = np.random.default_rng([seed, 784])
    d, k = LAYER_SIZES[0], LAYER_SIZES[-1]
    scale = 0.02 + np.exp(-np.arange(d) / 120.0)
    scale = scale[rng.permutation(d)]
    means = rng.normal(size=(k, d)) * scale * 0.6

    def draw(n):
        y = rng.integers(k, size=n)
        x = means[y] + noise * rng.normal(size=(n, d)) * scale
        return x, y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return xtr, ytr, xte, yte


# --------------------------------------------------------------------------- experiment


@dataclass
class TrainConfig:
    strategies: list = field(default_factory=lambda: list(TRAIN_STRATEGIES))
    t_max: list = field(default_factory=lambda: list(T_MAX_GRID))
    rate: float = 0.5
    lr: float = 0.01
    batch: int = 64
    epochs: int = 1
    samples: int = 10_000
    test_samples: int = 2_000
    eval_every: int = 50
    gamma: list = field(default_factory=lambda: list(DEFAULT_GAMMA))
    window: str = "pair"
    code_grad_input: bool = False
    mnist_dir: str | None = None  # None: $UEPMM_MNIST if set, else synthetic data
    seed: int = 0
    repeats: int = 3  # independent seeds averaged per curve

    def validate(self):
        for s in self.strategies:
            train_strategy(s)
        if any(t < 0 for t in self.t_max):
            raise ValueError("t_max values must be non-negative")
        if self.batch < 1 or self.epochs < 1 or self.samples < self.batch:
            raise ValueError("need batch >= 1, epochs >= 1 and samples >= batch")


def load_data(cfg: TrainConfig):
    root = cfg.mnist_dir or os.environ.get("UEPMM_MNIST")
    if root:
        xtr, ytr, xte, yte = load_mnist(root)
        return xtr[: cfg.samples], ytr[: cfg.samples], xte[: cfg.test_samples], yte[: cfg.test_samples]
    return synthetic_digits(cfg.samples, cfg.test_samples, cfg.seed)


def train_and_evaluate(cfg: TrainConfig, strategy: str, t_max: float, data=None, repeat: int = 0) -> list[tuple[int, float]]:
    """Accuracy on the held-out set every ``eval_every`` iterations (and at the end).

    Initial weights and batch order depend only on ``(seed, repeat)``, so all
    strategies and deadlines share them. The coding randomness depends on the
    strategy but not on ``t_max``.
    """
    strategy = train_strategy(strategy)
    xtr, ytr, xte, yte = load_data(cfg) if data is None else data
    base = [cfg.seed, repeat]
    net = DenseNet.init(np.random.default_rng(base + [0]))
    order_rng = np.random.default_rng(base + [1])
    code_rng = np.random.default_rng(base + [2, TRAIN_STRATEGIES.index(strategy)])
    latency = ExponentialLatency(cfg.rate)
    points = []
    it = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(xtr))
        for start in range(0, len(order) - cfg.batch + 1, cfg.batch):
            idx = order[start : start + cfg.batch]
            coded_grad_step(
                net, xtr[idx], ytr[idx], strategy, latency, t_max, code_rng, cfg.lr, cfg.gamma, cfg.window, cfg.code_grad_input
            )
            it += 1
            if it % cfg.eval_every == 0:
                points.append((it, forward(net, xte, yte).accuracy))
    if not points or points[-1][0] != it:
        points.append((it, forward(net, xte, yte).accuracy))
    return points


def run_training(cfg: TrainConfig) -> dict[tuple[str, float], list[tuple[int, float]]]:
    """Accuracy curves, averaged over ``repeats``, keyed by ``(strategy, t_max)``."""
    cfg.validate()
    data = load_data(cfg)
    out = {}
    for t in cfg.t_max:
        for s in cfg.strategies:
            curves = [train_and_evaluate(cfg, s, t, data, r) for r in range(cfg.repeats)]
            its = [i for i, _ in curves[0]]
            acc = np.mean([[a for _, a in c] for c in curves], axis=0)
            out[(train_strategy(s), float(t))] = list(zip(its, acc.tolist()))
            log.info("%s t_max=%g final accuracy %.4f", s, t, acc[-1])
    return out


def write_accuracy_csv(path, strategy: str, t_max: float, points) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("# uepmm accuracy v1\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["iteration", "strategy", "t_max", "accuracy"])
        for it, acc in points:
            out.writerow([it, strategy, repr(float(t_max)), repr(float(acc))])
    return path
