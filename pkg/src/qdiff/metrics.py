"""Sample-quality metrics (FID, KID, IS) over a small repo-trained MNIST classifier.

The classifier stands in for an ImageNet backbone: its 64-d penultimate
activations feed FID and KID, its softmax feeds IS. Values are therefore only
comparable with other numbers computed by this module.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices, denormalize
from .tensor import ParamTree

FEATURE_DIM = 64
N_CLASSES = 10


class ExtractorQualityError(RuntimeError):
    """The feature extractor is too inaccurate for its metrics to mean anything."""


@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be (N, D), got {self.features.shape}")


@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    is_mean: float
    is_std: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


# -------------------------------------------------------------- extractor


class FeatureExtractor:
    """conv3x3(16) -> conv3x3/2(32) -> conv3x3/2(32) -> fc(64) -> fc(10), SiLU between layers."""

    def __init__(self, in_channels: int = 1):
        self.in_channels = in_channels

    def init(self, seed: int = 0) -> ParamTree:
        rng = np.random.default_rng(seed)
        shapes = [("conv1", (16, self.in_channels, 3, 3)), ("conv2", (32, 16, 3, 3)), ("conv3", (32, 32, 3, 3)),
                  ("fc1", (FEATURE_DIM, 32 * 7 * 7)), ("fc2", (N_CLASSES, FEATURE_DIM))]
        tree = ParamTree()
        for name, shape in shapes:
            bound = 1.0 / math.sqrt(int(np.prod(shape[1:])))
            tree[f"{name}.w"] = rng.uniform(-bound, bound, shape)
            tree[f"{name}.b"] = rng.uniform(-bound, bound, shape[:1])
        return tree

    def __call__(self, P, x):
        h = T.silu(T.conv2d(x, P["conv1.w"], P["conv1.b"], 1, 1))
        h = T.silu(T.conv2d(h, P["conv2.w"], P["conv2.b"], 2, 1))
        h = T.silu(T.conv2d(h, P["conv3.w"], P["conv3.b"], 2, 1))
        feats = T.silu(T.linear(T.reshape(h, (h.shape[0], -1)), P["fc1.w"], P["fc1.b"]))
        return feats, T.linear(feats, P["fc2.w"], P["fc2.b"])

    def features_and_probs(self, params: ParamTree, images: np.ndarray, batch_size: int = 500):
        images = replicate_channels(images, self.in_channels)
        P = params.constants()
        feats, probs = [], []
        for lo in range(0, images.shape[0], batch_size):
            f, logits = self(P, T.constant(images[lo : lo + batch_size]))
            feats.append(f.data)
            probs.append(_softmax(logits.data))
        if not feats:
            return np.zeros((0, FEATURE_DIM)), np.zeros((0, N_CLASSES))
        return np.concatenate(feats), np.concatenate(probs)

    def accuracy(self, params: ParamTree, ds: Dataset) -> float:
        _, probs = self.features_and_probs(params, ds.images)
        return float((probs.argmax(axis=1) == ds.labels).mean())


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    B = labels.size
    logp = T.reshape(T.log_softmax(logits, axis=1), (-1,))
    return T.scale(T.sum(T.take(logp, np.arange(B) * logits.shape[1] + labels, axis=0)), -1.0 / B)


def train_feature_extractor(train: Dataset, test: Dataset | None = None, epochs: int = 2, batch_size: int = 128,
                            lr: float = 1e-3, seed: int = 0, min_accuracy: float = 0.97, log=None):
    """Train the classifier with Adam; raises if test accuracy stays below ``min_accuracy``."""
    from .diffusion import adam_init, adam_step

    net = FeatureExtractor(train.images.shape[1])
    params = net.init(seed)
    state = adam_init(params, lr=lr, beta2=0.999)
    for epoch in range(epochs):
        for idx in batch_indices(len(train), batch_size, seed, epoch):
            P = params.leaves()
            _, logits = net(P, T.constant(train.images[idx]))
            loss = _cross_entropy(logits, train.labels[idx])
            grads = T.backward(loss, P)
            params, state = adam_step(params, grads, state)
        if log:
            log({"epoch": epoch, "loss": float(loss.data)})
    acc = net.accuracy(params, test) if test is not None else None
    if acc is not None and acc < min_accuracy:
        raise ExtractorQualityError(f"extractor test accuracy {acc:.4f} is below {min_accuracy}")
    return params, acc


def replicate_channels(images: np.ndarray, channels: int) -> np.ndarray:
    """Repeat a single grey channel to ``channels`` channels (no-op when they already match)."""
    if images.shape[1] == channels:
        return images
    if images.shape[1] != 1:
        raise ValueError(f"cannot map {images.shape[1]} channels to {channels}")
    return np.repeat(images, channels, axis=1)


# ---------------------------------------------------------------- metrics


def _psd_floor(w):
    """Zero eigenvalues at round-off level (the ``matrix_rank`` cutoff) so rank-deficient inputs stay exact."""
    cut = w.size * np.finfo(float).eps * np.abs(w).max(initial=0.0)
    return np.where(w > cut, w, 0.0)


def _sqrtm_psd(S):
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(_psd_floor(w))) @ V.T


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ``Tr sqrt(Sa Sb)`` is computed as the sum of square roots of the
    eigenvalues of the symmetric ``Sa^1/2 Sb Sa^1/2``; eigenvalues at
    round-off level are set to zero.
    """
    X, Y = a.features, b.features
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dims differ: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ValueError("FID needs at least two samples per set")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("non-finite features")
    mu_a, mu_b = X.mean(axis=0), Y.mean(axis=0)
    Sa = np.atleast_2d(np.cov(X, rowvar=False))
    Sb = np.atleast_2d(np.cov(Y, rowvar=False))
    ra = _sqrtm_psd(Sa)
    M = ra @ Sb @ ra
    ev = np.linalg.eigvalsh((M + M.T) / 2)
    tr_sqrt = np.sqrt(_psd_floor(ev)).sum()
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(Sa) + np.trace(Sb) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def polynomial_kernel(X, Y, degree: int = 3):
    return (X @ Y.T / X.shape[1] + 1.0) ** degree


def mmd2_unbiased(X, Y, degree: int = 3) -> float:
    """Paired U-statistic ``1/(m(m-1)) sum_{i != j} h(i, j)`` with
    ``h = k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i)`` (equal set sizes)."""
    m = X.shape[0]
    if Y.shape[0] != m or m < 2:
        raise ValueError("paired MMD needs two sets of the same size >= 2")
    Kxx, Kyy, Kxy = polynomial_kernel(X, X, degree), polynomial_kernel(Y, Y, degree), polynomial_kernel(X, Y, degree)
    off = lambda K: K.sum() - np.trace(K)  # noqa: E731
    return float((off(Kxx) + off(Kyy) - 2.0 * off(Kxy)) / (m * (m - 1)))


def kid(a: FeatureSet, b: FeatureSet, subset_size: int = 1000, n_subsets: int = 100, seed: int = 0):
    """Mean and std of unbiased MMD^2 over random subsets.

    Equal-sized sets reuse one index draw for both, so identical sets score exactly zero.
    """
    X, Y = a.features, b.features
    if subset_size > min(X.shape[0], Y.shape[0]):
        raise ValueError(f"subset size {subset_size} exceeds set sizes {X.shape[0]}, {Y.shape[0]}")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        ia = rng.choice(X.shape[0], subset_size, replace=False)
        ib = ia if X.shape[0] == Y.shape[0] else rng.choice(Y.shape[0], subset_size, replace=False)
        vals.append(mmd2_unbiased(X[ia], Y[ib]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std())


def inception_score(probs: np.ndarray, n_splits: int = 10):
    """``exp(E_x KL(p(y|x) || p(y)))`` per split; returns mean and std over contiguous splits."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ValueError("inception score needs rows that are probability vectors")
    if not 1 <= n_splits <= p.shape[0]:
        raise ValueError(f"cannot make {n_splits} splits of {p.shape[0]} rows")
    scores = []
    for part in np.array_split(p, n_splits):
        py = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(py)), 0.0)
        scores.append(math.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def metric_report(real_feats, gen_feats, gen_probs, kid_subset=1000, kid_subsets=100, is_splits=10, seed=0):
    n = gen_feats.shape[0]
    sub = min(kid_subset, n, real_feats.shape[0])
    km, ks = kid(FeatureSet(real_feats), FeatureSet(gen_feats, "generated"), sub, kid_subsets, seed) if sub >= 2 else (0.0, 0.0)
    im, istd = inception_score(gen_probs, min(is_splits, n))
    return MetricReport(fid(FeatureSet(real_feats), FeatureSet(gen_feats, "generated")), km, ks, im, istd, n)


def evaluate(sample_fn, n_generate: int, real: Dataset, extractor: FeatureExtractor, extractor_params: ParamTree,
             seed: int = 0, **kw) -> tuple[MetricReport, np.ndarray]:
    """Draw ``n_generate`` images with ``sample_fn(n)`` and score them against as many real images."""
    if n_generate > len(real):
        raise ValueError(f"need {n_generate} real images, dataset has {len(real)}")
    gen = sample_fn(n_generate)
    real_imgs = real.subset(n_generate, seed=seed).images
    rf, _ = extractor.features_and_probs(extractor_params, real_imgs)
    gf, gp = extractor.features_and_probs(extractor_params, gen)
    return metric_report(rf, gf, gp, seed=seed, **kw), gen


# ----------------------------------------------------------------- images


def image_grid(images: np.ndarray, cols: int | None = None) -> np.ndarray:
    """Tile (N, 1, H, W) images in [-1, 1] into a uint8 grid with 1-pixel gutters."""
    n, _, h, w = images.shape
    cols = cols or max(1, int(math.ceil(math.sqrt(n))))
    rows = max(1, int(math.ceil(n / cols)))
    grid = np.zeros((rows * (h + 1) + 1, cols * (w + 1) + 1), dtype=np.uint8)
    pix = denormalize(images[:, 0])
    for i in range(n):
        r, c = divmod(i, cols)
        grid[1 + r * (h + 1) : 1 + r * (h + 1) + h, 1 + c * (w + 1) : 1 + c * (w + 1) + w] = pix[i]
    return grid


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray, dtype=np.uint8)
    Path(path).write_bytes(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode() + gray.tobytes())


def write_png(path, gray: np.ndarray):
    """Minimal 8-bit greyscale PNG writer (stdlib zlib only)."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    raw = b"".join(b"\x00" + gray[r].tobytes() for r in range(h))
    body = chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)) + chunk(b"IDAT", zlib.compress(raw, 9))
    Path(path).write_bytes(b"\x89PNG\r\n\x1a\n" + body + chunk(b"IEND", b""))
