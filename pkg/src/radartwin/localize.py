"""Target localization over range-Doppler maps.

Three estimator families share the (n, 2) = (range_bin, doppler_bin)
output convention:

* :func:`argmax_localize` - peak-pixel baseline;
* :class:`CfarDetector` - cell-averaging CFAR with clustered centroids,
  the variable-detection-count algorithm (so false-positive/negative
  rates are exercised);
* :class:`CnnLocalizer` - small convolutional regressor trained on
  log-scaled maps.

``CfarDetector`` and ``CnnLocalizer`` follow the scikit-learn estimator
protocol (``fit`` / ``predict`` / ``get_params``).
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from . import io as rtio
from . import nnet
from .errors import CompatibilityError, ConfigurationError, TrainingFailure
from .nnet.training import bce_loss, iter_batches, mse_loss
from .validation import check_map_stack, check_power_map


@dataclass(frozen=True)
class Estimate:
    """One localization estimate in bin coordinates (may be fractional)."""

    range_bin: float
    doppler_bin: float
    score: float = 0.0

    def as_array(self):
        return np.array([self.range_bin, self.doppler_bin], dtype=np.float64)


# ---------------------------------------------------------------------------
# ArgMax baseline
# ---------------------------------------------------------------------------


def argmax_localize(power) -> Estimate:
    """Location of the global maximum pixel.

    Ties break to the lowest (range, then Doppler) index - row-major
    ``argmax`` order.  Works on any monotone rescaling of the map (linear,
    log, dB); the argmax is invariant.
    """
    arr = check_power_map(power, allow_negative=True)
    idx = np.unravel_index(int(np.argmax(arr)), arr.shape)
    return Estimate(float(idx[0]), float(idx[1]), score=float(arr[idx]))


class ArgMaxLocalizer(BaseEstimator):
    """Estimator wrapper around :func:`argmax_localize` (stateless)."""

    def fit(self, X, y=None):
        return self

    def predict(self, X):
        maps = check_map_stack(X)
        return np.array([argmax_localize(m).as_array() for m in maps])


# ---------------------------------------------------------------------------
# CA-CFAR
# ---------------------------------------------------------------------------


class CfarDetector(BaseEstimator):
    """Cell-averaging CFAR with clustering to centroids.

    The local background is the mean over a square training ring
    (half-width ``train_cells``) excluding a guard square (half-width
    ``guard_cells``); a cell is an exceedance when its power is above
    ``scale`` times that mean.  Exceedances are clustered (8-connected)
    to power-weighted centroids and near-duplicates within
    ``merge_radius`` (Chebyshev) are suppressed, strongest first.

    Boundary handling per axis: range edges replicate, the Doppler axis
    wraps (it is circular).
    """

    def __init__(self, train_cells=8, guard_cells=2, scale=10.0,
                 merge_radius=1.0, range_mode="nearest", doppler_mode="wrap"):
        self.train_cells = train_cells
        self.guard_cells = guard_cells
        self.scale = scale
        self.merge_radius = merge_radius
        self.range_mode = range_mode
        self.doppler_mode = doppler_mode

    # -- protocol ------------------------------------------------------------
    def fit(self, X=None, y=None):
        return self

    def predict(self, X):
        """Detections for a stack of maps -> list of lists of Estimates."""
        maps = check_map_stack(X)
        return [self.detect(m) for m in maps]

    # -- core ------------------------------------------------------------
    def _validate(self, shape):
        t, g = int(self.train_cells), int(self.guard_cells)
        if t < 1 or g < 0 or t <= g:
            raise ConfigurationError(
                f"need train_cells > guard_cells >= 0, got {t} / {g}"
            )
        if self.scale <= 0:
            raise ConfigurationError("scale must be positive")
        window = 2 * t + 1
        if window > shape[0] or window > shape[1]:
            raise ConfigurationError(
                f"CFAR window {window} exceeds map dimensions {shape}"
            )

    @property
    def n_training_cells(self) -> int:
        t, g = int(self.train_cells), int(self.guard_cells)
        return (2 * t + 1) ** 2 - (2 * g + 1) ** 2

    @property
    def theoretical_pfa(self) -> float:
        """Per-cell false-alarm probability on exponential (complex Gaussian
        power) background: (1 + scale/N)^-N."""
        n = self.n_training_cells
        return float((1.0 + self.scale / n) ** (-n))

    def threshold_map(self, power) -> np.ndarray:
        """Per-cell CA-CFAR threshold."""
        arr = check_power_map(power)
        self._validate(arr.shape)
        t, g = int(self.train_cells), int(self.guard_cells)
        mode = (self.range_mode, self.doppler_mode)
        box = ndimage.uniform_filter(arr, size=2 * t + 1, mode=mode)
        guard = ndimage.uniform_filter(arr, size=2 * g + 1, mode=mode)
        n_box = (2 * t + 1) ** 2
        n_guard = (2 * g + 1) ** 2
        ring_mean = (box * n_box - guard * n_guard) / (n_box - n_guard)
        return self.scale * ring_mean

    def exceedance_mask(self, power) -> np.ndarray:
        return check_power_map(power) > self.threshold_map(power)

    def detect(self, power):
        """Cluster exceedances into a list of :class:`Estimate` centroids."""
        arr = check_power_map(power)
        mask = arr > self.threshold_map(arr)
        if not mask.any():
            return []
        labels, n_clusters = ndimage.label(mask, structure=np.ones((3, 3)))
        detections = []
        for lab in range(1, n_clusters + 1):
            ys, xs = np.nonzero(labels == lab)
            weights = arr[ys, xs]
            total = weights.sum()
            cy = float((ys * weights).sum() / total)
            cx = float((xs * weights).sum() / total)
            detections.append(Estimate(cy, cx, score=float(weights.max())))
        # suppress near-duplicates (e.g. clusters split across the Doppler seam)
        detections.sort(key=lambda d: (-d.score, d.range_bin, d.doppler_bin))
        kept = []
        for det in detections:
            if all(
                max(abs(det.range_bin - k.range_bin),
                    abs(det.doppler_bin - k.doppler_bin)) > self.merge_radius
                for k in kept
            ):
                kept.append(det)
        return kept

    def point_estimate(self, power) -> Estimate:
        """Single-location reduction: strongest detection, or the map argmax
        when nothing exceeds the threshold."""
        detections = self.detect(power)
        if detections:
            return detections[0]
        return argmax_localize(power)


# ---------------------------------------------------------------------------
# Preprocessing shared by training and inference
# ---------------------------------------------------------------------------


def preprocess_maps(maps, input_shape, log_epsilon=1e-12) -> np.ndarray:
    """Two per-map min-max channels: log10(power + eps) and linear power.

    The log channel carries the clutter structure over its full dynamic
    range; the linear channel preserves peak saliency (log compression
    leaves the target bump only marginally above the texture, which is
    not learnable at desk scale).  Maps are block-mean downsampled when
    larger than ``input_shape``; non-integer factors raise
    :class:`CompatibilityError`.  Returns float32 NCHW with 2 channels.
    """
    maps = check_map_stack(maps)
    n, h, w = maps.shape
    th, tw = input_shape
    if (h, w) != (th, tw):
        if h % th or w % tw:
            raise CompatibilityError(
                f"map shape {(h, w)} is not an integer multiple of the model "
                f"input {(th, tw)}"
            )
        maps = maps.reshape(n, th, h // th, tw, w // tw).mean(axis=(2, 4))

    def minmax(x):
        lo = x.min(axis=(1, 2), keepdims=True)
        hi = x.max(axis=(1, 2), keepdims=True)
        return (x - lo) / np.maximum(hi - lo, 1e-30)

    logp = minmax(np.log10(maps + log_epsilon))
    linp = minmax(maps)
    return np.stack([logp, linp], axis=1).astype(np.float32)


N_MAP_CHANNELS = 2


def preprocessing_spec(input_shape, log_epsilon) -> dict:
    return {
        "transform": "log10-minmax+linear-minmax",
        "log_epsilon": log_epsilon,
        "input_shape": list(input_shape),
    }


def default_architecture(pool_blocks=3, tail_channels=(32,)):
    """Conv blocks (3x3 + batch norm + ReLU + 2x2 max pool) + dense head.

    The block recipe (convolution, ReLU activation, batch normalization,
    max pooling) follows the halving ladder; pooling, not striding, does
    the downsampling so single-pixel target returns survive to the deep
    layers.  ``pool_blocks`` halvings are followed by stride-1 conv
    layers, then dense 128 + dense 2 with a sigmoid head in [0, 1].
    """
    channels = (8, 16, 32, 64, 64)[:pool_blocks]
    arch = []
    for c in channels:
        arch += [
            {"type": "conv2d", "out_channels": c, "kernel": 3, "stride": 1,
             "padding": 1},
            {"type": "batch_norm"},
            {"type": "relu"},
            {"type": "max_pool", "size": 2},
        ]
    for c in tail_channels:
        arch += [
            {"type": "conv2d", "out_channels": c, "kernel": 3, "stride": 1,
             "padding": 1},
            {"type": "batch_norm"},
            {"type": "relu"},
        ]
    arch += [
        {"type": "dense", "out_features": 128},
        {"type": "relu"},
        {"type": "dense", "out_features": 2},
        {"type": "sigmoid"},
    ]
    return arch


def coordinate_channels(shape) -> np.ndarray:
    """Normalized row/column index planes, shape (2, H, W).

    Concatenated to the input so the dense head can read positions out of
    convolutional activations (plain conv stacks cannot regress
    coordinates from translation-invariant features alone).
    """
    h, w = shape
    rows = np.broadcast_to((np.arange(h, dtype=np.float32) / h)[:, None], (h, w))
    cols = np.broadcast_to((np.arange(w, dtype=np.float32) / w)[None, :], (h, w))
    return np.stack([rows, cols])


# ---------------------------------------------------------------------------
# CNN localizer
# ---------------------------------------------------------------------------


class CnnLocalizer(BaseEstimator):
    """Convolutional regressor from a power map to (range_bin, doppler_bin).

    The head emits two values in [0, 1] scaled to bin coordinates of the
    full map.  Two desk-scale levers make the regression trainable on a
    few hundred samples: coordinate channels appended to the input (so
    positions are readable from conv features), and circular roll
    augmentation on both axes, which makes the bump-to-label mapping
    translation-equivariant instead of memorizable.  The loss is binary
    cross-entropy against the normalized coordinates: its gradient at the
    sigmoid pre-activation is (p - t), which cannot saturate the way a
    squared error does.
    """

    def __init__(self, arch=None, input_shape=(128, 64), epochs=250,
                 batch_size=16, lr=1e-3, seed=0, log_epsilon=1e-12,
                 augment_rolls=True, coord_channels=True, loss="bce"):
        self.arch = arch
        self.input_shape = input_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.log_epsilon = log_epsilon
        self.augment_rolls = augment_rolls
        self.coord_channels = coord_channels
        self.loss = loss

    # -- helpers -------------------------------------------------------------
    def _arch(self):
        return self.arch if self.arch is not None else default_architecture()

    @property
    def n_input_channels(self) -> int:
        return N_MAP_CHANNELS + (2 if self.coord_channels else 0)

    @property
    def preprocessing(self) -> dict:
        spec = preprocessing_spec(self.input_shape, self.log_epsilon)
        spec["coord_channels"] = bool(self.coord_channels)
        return spec

    @property
    def preprocessing_hash(self) -> str:
        return rtio.json_hash(self.preprocessing)

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise CompatibilityError("CnnLocalizer is not fitted")

    def _with_coords(self, xp: np.ndarray) -> np.ndarray:
        if not self.coord_channels:
            return xp
        coords = coordinate_channels(self.input_shape)[None]
        coords = np.broadcast_to(coords, (len(xp), 2, *self.input_shape))
        return np.concatenate([xp, coords], axis=1).astype(np.float32)

    # -- protocol ------------------------------------------------------------
    def fit(self, X, y):
        """Train on maps X (n, rows, cols) and truth bins y (n, 2)."""
        maps = check_map_stack(X)
        truths = np.asarray(y, dtype=np.float64)
        if truths.shape != (len(maps), 2):
            raise ConfigurationError(f"y must be (n, 2), got {truths.shape}")
        self.map_shape_ = maps.shape[1:]
        xp = preprocess_maps(maps, self.input_shape, self.log_epsilon)
        yn = (truths / np.array(self.map_shape_, dtype=np.float64)).astype(np.float32)

        loss_fn = {"bce": bce_loss, "mse": mse_loss}.get(self.loss)
        if loss_fn is None:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        net = nnet.Network(self._arch(), (self.n_input_channels, *self.input_shape),
                           seed=self.seed)
        opt = nnet.Adam(lr=self.lr)
        history = nnet.LossHistory()
        n_row, n_col = self.input_shape

        for epoch in range(self.epochs):
            rng = rtio.rng_from(self.seed, "epoch", epoch)
            total, count = 0.0, 0
            for batch in iter_batches(len(xp), self.batch_size, rng):
                xb = xp[batch]
                yb = yn[batch]
                if self.augment_rolls:
                    xb = xb.copy()
                    yb = yb.copy()
                    row_shift = rng.integers(0, n_row, size=len(batch))
                    col_shift = rng.integers(0, n_col, size=len(batch))
                    for j in range(len(batch)):
                        xb[j] = np.roll(
                            np.roll(xb[j], row_shift[j], axis=1),
                            col_shift[j], axis=2,
                        )
                        yb[j, 0] = (yb[j, 0] + row_shift[j] / n_row) % 1.0
                        yb[j, 1] = (yb[j, 1] + col_shift[j] / n_col) % 1.0
                pred = net.forward(self._with_coords(xb), training=True)
                value, grad = loss_fn(pred, yb)
                if not math.isfinite(value):
                    raise TrainingFailure(
                        f"training diverged at epoch {epoch}", epoch
                    )
                net.backward(grad)
                opt.step(net.parameters(), net.gradients())
                total += value * len(batch)
                count += len(batch)
            history.train.append(total / count)
        self.net_ = net
        self.history_ = history
        return self

    def predict(self, X):
        """Estimates (n, 2) in bin coordinates, clamped to map bounds."""
        self._check_fitted()
        maps = check_map_stack(X)
        xp = preprocess_maps(maps, self.input_shape, self.log_epsilon)
        out = self.net_.forward(self._with_coords(xp)).astype(np.float64)
        bins = out * np.array(self.map_shape_, dtype=np.float64)
        upper = np.array(self.map_shape_, dtype=np.float64) - 1.0
        return np.clip(bins, 0.0, upper)

    # -- explainability --------------------------------------------------------
    def feature_maps(self, power_map, layer_index):
        """Post-activation grids of one convolutional block, shape (C, h, w).

        ``layer_index`` counts convolutional layers (0 = first conv); the
        returned activations are taken after that block's activation.
        """
        self._check_fitted()
        conv_positions = [i for i, layer in enumerate(self.net_.layers)
                          if isinstance(layer, nnet.Conv2d)]
        if not (0 <= layer_index < len(conv_positions)):
            raise ConfigurationError(
                f"layer_index {layer_index} is not a convolutional layer "
                f"(network has {len(conv_positions)})"
            )
        # take the output of the activation that closes the block
        start = conv_positions[layer_index]
        end = start
        while end + 1 < len(self.net_.layers) and isinstance(
            self.net_.layers[end + 1], (nnet.ReLU, nnet.LeakyReLU, nnet.BatchNorm)
        ):
            end += 1
        xp = preprocess_maps(
            np.asarray(power_map)[None], self.input_shape, self.log_epsilon
        )
        acts = self.net_.activations(self._with_coords(xp))
        return np.asarray(acts[end][0], dtype=np.float32)

    def export_feature_maps(self, power_map, layer_index, directory):
        """Write per-channel grids as raw float32 + a manifest; returns manifest."""
        grids = self.feature_maps(power_map, layer_index)
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        channels = []
        for ch in range(grids.shape[0]):
            name = f"feature_{layer_index:02d}_{ch:03d}.f32"
            digest = rtio.write_raw_array(directory / name, grids[ch], np.float32)
            channels.append({"file": name, "sha256": digest})
        manifest = {
            "format": "radartwin-feature-maps",
            "layer_index": layer_index,
            "shape": list(grids.shape[1:]),
            "dtype": "float32",
            "channels": channels,
        }
        rtio.write_json(directory / "feature_maps.json", manifest)
        return manifest

    # -- persistence --------------------------------------------------------
    def save(self, directory, extra=None):
        """Write ``model.bin`` (network) + ``model.json`` (compatibility data)."""
        self._check_fitted()
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nnet.save_network(self.net_, directory / "model.bin")
        sidecar = {
            "format": "radartwin-localizer",
            "version": 1,
            "preprocessing": self.preprocessing,
            "preprocessing_hash": self.preprocessing_hash,
            "map_shape": list(self.map_shape_),
            "params": {
                "input_shape": list(self.input_shape),
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "lr": self.lr,
                "seed": self.seed,
                "log_epsilon": self.log_epsilon,
                "augment_rolls": self.augment_rolls,
                "coord_channels": self.coord_channels,
                "loss": self.loss,
            },
            "loss_history": getattr(self, "history_", nnet.LossHistory()).train,
            "extra": extra or {},
        }
        rtio.write_json(directory / "model.json", sidecar)

    @classmethod
    def load(cls, directory) -> "CnnLocalizer":
        directory = Path(directory)
        sidecar = rtio.read_json(directory / "model.json")
        if sidecar.get("format") != "radartwin-localizer":
            raise CompatibilityError(f"{directory}: not a localizer model")
        params = sidecar["params"]
        params["input_shape"] = tuple(params["input_shape"])
        model = cls(**params)
        if sidecar["preprocessing_hash"] != model.preprocessing_hash:
            raise CompatibilityError(
                "preprocessing spec hash mismatch between model.json and loader"
            )
        model.net_ = nnet.load_network(directory / "model.bin")
        model.map_shape_ = tuple(sidecar["map_shape"])
        history = nnet.LossHistory()
        history.train = list(sidecar.get("loss_history", []))
        model.history_ = history
        return model


# ---------------------------------------------------------------------------
# k-fold training
# ---------------------------------------------------------------------------


def kfold_split(n: int, folds: int, seed: int):
    """Deterministic shuffled k-fold partition.

    ``folds=1`` is a single 80/20 train/validation split.  Validation folds
    are disjoint and cover all indices for ``folds >= 2``.
    """
    if n < max(folds, 2):
        raise ConfigurationError(f"dataset of {n} samples cannot make {folds} folds")
    perm = rtio.rng_from(seed, "kfold").permutation(n)
    if folds == 1:
        cut = max(1, int(round(0.2 * n)))
        return [(np.sort(perm[cut:]), np.sort(perm[:cut]))]
    splits = []
    val_chunks = np.array_split(perm, folds)
    for k in range(folds):
        val = np.sort(val_chunks[k])
        train = np.sort(np.concatenate([val_chunks[j] for j in range(folds) if j != k]))
        splits.append((train, val))
    return splits


def fold_assignment_hash(splits) -> str:
    payload = [[s[0].tolist(), s[1].tolist()] for s in splits]
    return rtio.json_hash(payload)


@dataclass
class FoldResult:
    fold: int
    model: CnnLocalizer
    train_indices: np.ndarray
    val_indices: np.ndarray
    report: "object"  # metrics.MetricReport
    loss_history: list


def cross_validate(maps, truths, folds=5, seed=0, localizer_params=None,
                   workers=1):
    """Train one :class:`CnnLocalizer` per fold.

    Returns (list of FoldResult, assignment_hash).  Each fold's report is
    computed on its held-out validation split.  Folds are independent
    (per-fold derived seeds), so ``workers > 1`` trains them concurrently
    with identical results.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .metrics import compute_report

    maps = check_map_stack(maps)
    truths = np.asarray(truths, dtype=np.float64)
    splits = kfold_split(len(maps), folds, seed)
    params = dict(localizer_params or {})
    params.pop("seed", None)  # per-fold seeds are derived from ``seed``

    def run_fold(k):
        train_idx, val_idx = splits[k]
        model = CnnLocalizer(**params, seed=rtio.derive_seed(seed, "fold", k))
        model.fit(maps[train_idx], truths[train_idx])
        estimates = model.predict(maps[val_idx])
        report = compute_report(f"cnn_fold{k}", estimates, truths[val_idx])
        return FoldResult(
            fold=k,
            model=model,
            train_indices=train_idx,
            val_indices=val_idx,
            report=report,
            loss_history=model.history_.train,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_fold, range(len(splits))))
    else:
        results = [run_fold(k) for k in range(len(splits))]
    return results, fold_assignment_hash(splits)
