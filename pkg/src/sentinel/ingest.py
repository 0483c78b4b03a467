"""NSL-KDD parsing, feature encoding, PCA and the safe reference model.

Records are comma-separated lines of 41 features, a label and an optional
difficulty score (KDDTrain+.txt / KDDTest+.txt layout, no header). Columns
1-3 are categorical; everything else is numeric.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from sentinel.geometry import DEFAULT_RIDGE, DimensionMismatchError, GaussianModel, fit_gaussian

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate",
    "srv_serror_rate", "rerror_rate", "srv_rerror_rate", "same_srv_rate",
    "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)
N_FEATURES = len(FEATURE_NAMES)
CATEGORICAL_INDICES = (1, 2, 3)
CATEGORICAL_NAMES = tuple(FEATURE_NAMES[i] for i in CATEGORICAL_INDICES)
NUMERIC_INDICES = tuple(i for i in range(N_FEATURES) if i not in CATEGORICAL_INDICES)

SCHEMA_VERSION = 1
DEFAULT_PCA_DIMS = 10
DEFAULT_BANDWIDTH = 0.5
MAX_KDE_POINTS = 20_000


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ModelFormatError(ValueError):
    """A serialized pipeline is malformed or has an unsupported schema version."""


@dataclass(frozen=True, eq=False)
class FlowRecord:
    numeric: np.ndarray
    categorical: tuple
    label: str
    difficulty: Optional[int] = None

    @property
    def features(self) -> list:
        """The 41 raw fields in file order."""
        out: list = []
        num = iter(self.numeric.tolist())
        cat = iter(self.categorical)
        for i in range(N_FEATURES):
            out.append(next(cat) if i in CATEGORICAL_INDICES else next(num))
        return out

    @property
    def is_attack(self) -> int:
        return binarize_label(self.label)


def binarize_label(label: str) -> int:
    """0 for ``normal``, 1 for anything else (unknown labels count as attacks)."""
    if not label:
        raise ValueError("empty label")
    return 0 if label.strip().lower() == "normal" else 1


def parse_line(line: str, lineno: Optional[int] = None) -> FlowRecord:
    fields = [f.strip() for f in line.rstrip("\r\n").split(",")]
    if len(fields) not in (N_FEATURES + 1, N_FEATURES + 2):
        raise ParseError(
            f"expected {N_FEATURES + 1} or {N_FEATURES + 2} fields, got {len(fields)}", lineno
        )
    numeric = np.empty(len(NUMERIC_INDICES))
    for j, i in enumerate(NUMERIC_INDICES):
        try:
            v = float(fields[i])
        except ValueError:
            raise ParseError(
                f"non-numeric value {fields[i]!r} in column {FEATURE_NAMES[i]}", lineno
            ) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite value in column {FEATURE_NAMES[i]}", lineno)
        numeric[j] = v
    numeric.setflags(write=False)
    label = fields[N_FEATURES]
    if not label:
        raise ParseError("empty label", lineno)
    difficulty = None
    if len(fields) == N_FEATURES + 2:
        try:
            difficulty = int(fields[N_FEATURES + 1])
        except ValueError:
            raise ParseError(f"bad difficulty {fields[N_FEATURES + 1]!r}", lineno) from None
    categorical = tuple(fields[i] for i in CATEGORICAL_INDICES)
    return FlowRecord(numeric, categorical, label, difficulty)


def iter_nslkdd(stream: Union[IO, Iterable]) -> Iterator[FlowRecord]:
    """Lazily parse records from a text or binary stream (or any iterable of lines)."""
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        if not line.strip():
            continue
        yield parse_line(line, lineno)


def parse_nslkdd(stream: Union[IO, bytes, str, Iterable]) -> list[FlowRecord]:
    if isinstance(stream, bytes):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    return list(iter_nslkdd(stream))


def load_nslkdd(path) -> list[FlowRecord]:
    with open(path, "rb") as fh:
        return parse_nslkdd(fh)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Encoding


@dataclass(frozen=True, eq=False)
class EncoderModel:
    categorical_vocab: dict
    feature_means: np.ndarray
    feature_stds: np.ndarray

    @property
    def width(self) -> int:
        return self.feature_means.shape[0]

    def feature_names(self) -> list[str]:
        names = []
        for i, name in enumerate(FEATURE_NAMES):
            if i in CATEGORICAL_INDICES:
                names.extend(f"{name}={v}" for v in self.categorical_vocab[name])
            else:
                names.append(name)
        return names

    def to_dict(self) -> dict:
        return {
            "categorical_vocab": {k: list(v) for k, v in self.categorical_vocab.items()},
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> EncoderModel:
        return cls(
            categorical_vocab={k: list(v) for k, v in data["categorical_vocab"].items()},
            feature_means=np.asarray(data["feature_means"], dtype=float),
            feature_stds=np.asarray(data["feature_stds"], dtype=float),
        )


def _one_hot_raw(vocab: dict, records: Sequence[FlowRecord]) -> np.ndarray:
    """Unstandardized matrix: numeric columns and one-hot blocks in file column order."""
    index = {name: {v: j for j, v in enumerate(vocab[name])} for name in CATEGORICAL_NAMES}
    widths = [len(vocab[name]) for name in CATEGORICAL_NAMES]
    width = len(NUMERIC_INDICES) + sum(widths)
    out = np.zeros((len(records), width))
    # Offsets of each raw column in the encoded layout.
    offsets, pos, num_cols = {}, 0, []
    for i, name in enumerate(FEATURE_NAMES):
        offsets[i] = pos
        if i in CATEGORICAL_INDICES:
            pos += len(vocab[name])
        else:
            num_cols.append(pos)
            pos += 1
    num_cols = np.asarray(num_cols)
    for r, rec in enumerate(records):
        out[r, num_cols] = rec.numeric
        for c, (i, name) in enumerate(zip(CATEGORICAL_INDICES, CATEGORICAL_NAMES)):
            j = index[name].get(rec.categorical[c])
            if j is not None:
                out[r, offsets[i] + j] = 1.0
    return out


def fit_encoder(records: Sequence[FlowRecord]) -> EncoderModel:
    if not records:
        raise ValueError("cannot fit encoder on an empty record list")
    vocab = {
        name: sorted({rec.categorical[c] for rec in records})
        for c, name in enumerate(CATEGORICAL_NAMES)
    }
    raw = _one_hot_raw(vocab, records)
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)
    # Zero-variance columns keep their slot and encode to 0 after centering.
    stds[stds <= 1e-12 * np.maximum(1.0, np.abs(means))] = 1.0
    return EncoderModel(vocab, means, stds)


def encode_records(model: EncoderModel, records: Sequence[FlowRecord]) -> np.ndarray:
    """Encode many records at once; unseen categories give an all-zero one-hot block."""
    raw = _one_hot_raw(model.categorical_vocab, records)
    out = (raw - model.feature_means) / model.feature_stds
    # Unseen categories: zero the whole block rather than leaving centered -mean/std values.
    if records:
        pos = 0
        for i, name in enumerate(FEATURE_NAMES):
            if i not in CATEGORICAL_INDICES:
                pos += 1
                continue
            width = len(model.categorical_vocab[name])
            block = raw[:, pos:pos + width]
            unseen = block.sum(axis=1) == 0
            out[unseen, pos:pos + width] = 0.0
            pos += width
    return out


def apply_encoder(model: EncoderModel, record: FlowRecord) -> np.ndarray:
    return encode_records(model, [record])[0]


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True, eq=False)
class PcaModel:
    components: np.ndarray
    explained_variance: np.ndarray
    center: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def to_dict(self) -> dict:
        return {
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "center": self.center.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PcaModel:
        return cls(
            np.asarray(data["components"], dtype=float),
            np.asarray(data["explained_variance"], dtype=float),
            np.asarray(data["center"], dtype=float),
        )


def fit_pca(X, k: int) -> PcaModel:
    """Top-``k`` eigenvectors of the unbiased sample covariance of ``X``.

    Each component is flipped so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    n, D = X.shape
    if k < 1 or k > min(n - 1, D):
        raise ValueError(f"k={k} must be in [1, min(n-1, D)] = [1, {min(n - 1, D)}]")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    center = X.mean(axis=0)
    Xc = X - center
    cov = Xc.T @ Xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    explained = np.clip(evals[order], 0.0, None)
    return PcaModel(comps, explained, center)


def project(model: PcaModel, x) -> np.ndarray:
    """Project a D-vector (or rows of an n×D matrix) onto the principal axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.center.shape[0]:
        raise DimensionMismatchError(
            f"input has dimension {x.shape[-1]}, expected {model.center.shape[0]}"
        )
    return (x - model.center) @ model.components.T


# --------------------------------------------------------------------------
# Safe model


@dataclass(frozen=True, eq=False)
class SafeModel:
    gaussian: GaussianModel
    kde_points: np.ndarray
    kde_bandwidth: float = DEFAULT_BANDWIDTH

    @property
    def dim(self) -> int:
        return self.gaussian.dim

    def to_dict(self, include_kde: bool = True) -> dict:
        out = {"gaussian": self.gaussian.to_dict(), "kde_bandwidth": self.kde_bandwidth}
        if include_kde:
            out["kde_points"] = self.kde_points.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> SafeModel:
        gaussian = GaussianModel.from_dict(data["gaussian"])
        points = np.asarray(data.get("kde_points", np.empty((0, gaussian.dim))), dtype=float)
        return cls(gaussian, points.reshape(-1, gaussian.dim), float(data["kde_bandwidth"]))


def fit_safe_model(
    projections,
    bandwidth: float = DEFAULT_BANDWIDTH,
    ridge: float = DEFAULT_RIDGE,
    max_kde_points: int = MAX_KDE_POINTS,
    seed: int = 0,
) -> SafeModel:
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    pts = np.asarray(projections, dtype=float)
    gaussian = fit_gaussian(pts, ridge)
    pts = pts.reshape(len(pts), -1)
    if len(pts) > max_kde_points:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), size=max_kde_points, replace=False))]
    return SafeModel(gaussian, pts.copy(), float(bandwidth))


def kde_log_density(model: SafeModel, x) -> float:
    """Log of the Gaussian-kernel density estimate at ``x``; stable far from the data."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != model.dim:
        raise DimensionMismatchError(f"x has dimension {x.shape[0]}, expected {model.dim}")
    pts = model.kde_points
    if len(pts) == 0:
        raise ValueError("safe model carries no KDE points")
    h2 = model.kde_bandwidth ** 2
    sq = np.sum((pts - x) ** 2, axis=1)
    log_kernel = -0.5 * sq / h2 - 0.5 * model.dim * math.log(2 * math.pi * h2)
    return float(logsumexp(log_kernel) - math.log(len(pts)))


# --------------------------------------------------------------------------
# Whole pipeline


@dataclass(frozen=True, eq=False)
class Pipeline:
    """Encoder, PCA and safe model, plus held-out normal projections.

    The held-out points calibrate the static baseline; they are kept rather
    than their KL values because window KL depends on the window size.
    """

    encoder: EncoderModel
    pca: PcaModel
    safe: SafeModel
    holdout: np.ndarray
    meta: dict

    def calibration_kl(self, window_size: Optional[int] = None, ridge: Optional[float] = None) -> np.ndarray:
        """Disjoint-window KL of the held-out normals (defaults: fit-time settings)."""
        w = self.meta.get("window_size", 100) if window_size is None else window_size
        r = self.meta.get("ridge", DEFAULT_RIDGE) if ridge is None else ridge
        if len(self.holdout) < w:
            return np.empty(0)
        return calibration_windows_kl(self.safe, self.holdout, w, r)

    def transform(self, records: Sequence[FlowRecord]) -> np.ndarray:
        if not records:
            return np.empty((0, self.pca.k))
        return project(self.pca, encode_records(self.encoder, records))

    def transform_one(self, record: FlowRecord) -> np.ndarray:
        return project(self.pca, apply_encoder(self.encoder, record))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "encoder": self.encoder.to_dict(),
            "pca": self.pca.to_dict(),
            "safe": self.safe.to_dict(),
            "holdout": self.holdout.tolist(),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> Pipeline:
        if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
            raise ModelFormatError(
                f"unsupported model schema version {data.get('schema_version') if isinstance(data, dict) else None!r}"
            )
        try:
            encoder = EncoderModel.from_dict(data["encoder"])
            pca = PcaModel.from_dict(data["pca"])
            safe = SafeModel.from_dict(data["safe"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model: {exc}") from None
        if pca.components.shape[1] != encoder.width or safe.dim != pca.k:
            raise ModelFormatError("encoder, PCA and safe model dimensions are inconsistent")
        holdout = np.asarray(data.get("holdout", []), dtype=float).reshape(-1, pca.k)
        return cls(encoder, pca, safe, holdout, dict(data.get("meta", {})))

    @classmethod
    def load(cls, path) -> Pipeline:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"cannot read model {path}: {exc}") from None
        return cls.from_dict(data)


def calibration_windows_kl(safe: SafeModel, projections, window_size: int, ridge: float) -> np.ndarray:
    """KL of consecutive disjoint windows of held-out normal projections against the safe model."""
    from sentinel.geometry import kl_gaussian

    pts = np.asarray(projections, dtype=float)
    out = []
    for start in range(0, len(pts) - window_size + 1, window_size):
        window = fit_gaussian(pts[start:start + window_size], ridge)
        out.append(kl_gaussian(window, safe.gaussian).nats)
    return np.asarray(out)


def fit_pipeline(
    records: Sequence[FlowRecord],
    pca_dims: int = DEFAULT_PCA_DIMS,
    bandwidth: float = DEFAULT_BANDWIDTH,
    ridge: float = DEFAULT_RIDGE,
    holdout_fraction: float = 0.1,
    window_size: int = 100,
    seed: int = 0,
) -> Pipeline:
    """Fit encoder, PCA and safe model on the normal records only.

    A seeded ``holdout_fraction`` of the normal records is kept out of the
    fit; scored in disjoint windows, they calibrate the static baseline.
    """
    normals = [r for r in records if r.is_attack == 0]
    if len(normals) < 2:
        raise ValueError(f"need at least 2 normal records, got {len(normals)}")
    rng = np.random.default_rng(seed)
    n_hold = int(len(normals) * holdout_fraction)
    if len(normals) - n_hold <= pca_dims + 1:
        n_hold = 0
    mask = np.zeros(len(normals), dtype=bool)
    if n_hold:
        mask[rng.choice(len(normals), size=n_hold, replace=False)] = True
    fit_set = [r for r, m in zip(normals, mask) if not m]
    hold_set = [r for r, m in zip(normals, mask) if m]

    encoder = fit_encoder(fit_set)
    X = encode_records(encoder, fit_set)
    pca = fit_pca(X, pca_dims)
    Z = project(pca, X)
    safe = fit_safe_model(Z, bandwidth, ridge, seed=seed)
    holdout = project(pca, encode_records(encoder, hold_set)) if hold_set else np.empty((0, pca_dims))
    meta = {
        "n_records": len(records),
        "n_normal": len(normals),
        "n_fit": len(fit_set),
        "n_holdout": len(hold_set),
        "pca_dims": pca_dims,
        "bandwidth": bandwidth,
        "ridge": ridge,
        "window_size": window_size,
        "seed": seed,
        "encoded_width": encoder.width,
        "explained_variance": pca.explained_variance.tolist(),
        "condition_number": float(np.linalg.cond(safe.gaussian.covariance)),
    }
    logger.info("fitted pipeline on %d normal records (%d held out)", len(fit_set), len(hold_set))
    return Pipeline(encoder, pca, safe, holdout, meta)
