"""Streaming sliding-window KL detector with an adaptive threshold.

Each emitted window is summarized as a Gaussian, scored by its KL divergence
from the safe model, and compared against ``δ(t) = μ(t) + κ·σ(t)`` where μ
and σ are the mean and unbiased standard deviation of the last ``L`` KL
values from windows that did *not* alarm.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, Optional

import numpy as np

from sentinel.geometry import (
    DEFAULT_RIDGE,
    DimensionMismatchError,
    GaussianModel,
    GeometryError,
    KlValue,
    fim_surrogate,
    fit_gaussian,
    kl_gaussian,
    landauer_bound,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_FLOOR = 10 * DEFAULT_RIDGE


@dataclass(frozen=True)
class DetectorConfig:
    window_size: int = 100
    history_len: int = 200
    kappa: float = 3.0
    ridge: float = DEFAULT_RIDGE
    stride: int = 1
    threshold_floor: float = DEFAULT_THRESHOLD_FLOOR
    drift_patience: int = 25
    static_k: Optional[float] = None

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {self.window_size}")
        if self.history_len < 10:
            raise ValueError(f"history_len must be >= 10, got {self.history_len}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.threshold_floor < 0:
            raise ValueError(f"threshold_floor must be >= 0, got {self.threshold_floor}")
        if self.drift_patience < 1:
            raise ValueError(f"drift_patience must be >= 1, got {self.drift_patience}")
        if self.static_k is not None and not self.static_k > 0:
            raise ValueError(f"static_k must be positive, got {self.static_k}")

    def check_dimension(self, dim: int) -> None:
        if self.window_size < dim + 2:
            raise ValueError(
                f"window_size {self.window_size} too small for dimension {dim} "
                f"(need >= {dim + 2})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> DetectorConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class DetectionEvent:
    """One scored window. ``step`` is the index of the newest sample in it.

    ``kl`` is ``None`` only for degenerate windows whose covariance could not
    be factorized; those are alarmed (fail-closed) once warmup is over.
    """

    step: int
    kl: Optional[KlValue]
    threshold: float
    alarmed: bool
    is_fpt: bool
    fim: float
    landauer: float
    warmup: bool
    static_threshold: Optional[float] = None
    static_alarmed: Optional[bool] = None
    drift: bool = False
    degenerate: bool = False

    @property
    def kl_nats(self) -> float:
        return math.inf if self.kl is None else self.kl.nats

    @property
    def margin(self) -> float:
        return self.kl_nats - self.threshold

    def to_dict(self) -> dict:
        out = {
            "step": self.step,
            "kl": None if self.kl is None else self.kl.nats,
            "threshold": self.threshold,
            "alarmed": self.alarmed,
            "is_fpt": self.is_fpt,
            "fim": self.fim,
            "landauer": self.landauer,
            "warmup": self.warmup,
            "drift": self.drift,
            "degenerate": self.degenerate,
        }
        if self.static_threshold is not None:
            out["static_threshold"] = self.static_threshold
            out["static_alarmed"] = self.static_alarmed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class DriftTracker:
    """Length of the current strictly increasing run of KL values.

    A run reaching ``patience`` values is the discrete stand-in for a
    Lyapunov derivative that stays positive longer than the relaxation time.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.run = 0
        self._last: Optional[float] = None

    def update(self, value: float) -> bool:
        if self._last is not None and value > self._last:
            self.run += 1
        else:
            self.run = 1
        self._last = value
        return self.triggered

    @property
    def triggered(self) -> bool:
        return self.run >= self.patience

    def reset(self) -> None:
        self.run = 0
        self._last = None


@dataclass
class DetectorState:
    window_size: int
    history_len: int
    dim: int
    buffer: np.ndarray = field(init=False)
    buffer_count: int = 0
    kl_history: deque = field(init=False)
    steps_seen: int = 0
    fpt: Optional[int] = None
    drift_run: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.buffer = np.zeros((self.window_size, self.dim))
        self.kl_history = deque(maxlen=self.history_len)

    @property
    def buffer_full(self) -> bool:
        return self.buffer_count >= self.window_size

    def clear(self) -> None:
        self.buffer[:] = 0.0
        self.buffer_count = 0
        self.kl_history.clear()
        self.steps_seen = 0
        self.fpt = None
        self.drift_run = 0
        self.frozen = False


def history_threshold(history, kappa: float, floor: float) -> tuple[float, float, float]:
    """Return ``(μ, σ, δ)`` from a KL history: sample mean, unbiased std, ``max(μ + κσ, floor)``."""
    values = np.fromiter(history, dtype=float)
    if values.size == 0:
        return 0.0, 0.0, floor
    mu = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return mu, sigma, max(mu + kappa * sigma, floor)


def static_threshold(safe, k: float) -> float:
    """Static Fisher threshold ``k·√det(g)`` with ``g = Σ_safe⁻¹`` (surrogate), i.e. ``k·exp(-log_det/2)``.

    ``safe`` may be a SafeModel or a bare GaussianModel.
    """
    if not k > 0:
        raise ValueError(f"k must be positive, got {k}")
    gaussian = getattr(safe, "gaussian", safe)
    return k * math.exp(-0.5 * gaussian.log_det)


def calibrate_static_k(safe, normal_kl, quantile: float = 0.95) -> float:
    """Pick k so that the static threshold sits at the given quantile of normal KL."""
    values = np.asarray(list(normal_kl), dtype=float)
    if values.size == 0:
        raise ValueError("need at least one normal KL value to calibrate")
    gaussian = getattr(safe, "gaussian", safe)
    target = float(np.quantile(values, quantile))
    k = target / math.exp(-0.5 * gaussian.log_det)
    if not k > 0:
        # All-zero calibration KL; fall back to the threshold floor scale.
        k = DEFAULT_THRESHOLD_FLOOR / math.exp(-0.5 * gaussian.log_det)
    return k


class Detector:
    """Single-stream detector. Feed samples in order with :meth:`step`."""

    def __init__(self, safe, config: DetectorConfig | None = None, temperature: float = 1.0):
        self.safe_gaussian: GaussianModel = getattr(safe, "gaussian", safe)
        self.config = config or DetectorConfig()
        self.config.check_dimension(self.safe_gaussian.dim)
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.temperature = temperature
        self.state = DetectorState(
            self.config.window_size, self.config.history_len, self.safe_gaussian.dim
        )
        self._drift = DriftTracker(self.config.drift_patience)
        self._static = (
            static_threshold(self.safe_gaussian, self.config.static_k)
            if self.config.static_k is not None
            else None
        )

    @property
    def dim(self) -> int:
        return self.safe_gaussian.dim

    @property
    def threshold(self) -> float:
        cfg = self.config
        return history_threshold(self.state.kl_history, cfg.kappa, cfg.threshold_floor)[2]

    def reset(self) -> Detector:
        self.state.clear()
        self._drift.reset()
        return self

    def drift_monitor(self) -> bool:
        return self.state.drift_run >= self.config.drift_patience

    def step(self, x, temperature: float | None = None) -> Optional[DetectionEvent]:
        cfg = self.config
        st = self.state
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim:
            raise DimensionMismatchError(f"sample has length {x.shape[0]}, expected {self.dim}")
        temperature = self.temperature if temperature is None else temperature

        index = st.steps_seen
        st.buffer[index % cfg.window_size] = x
        st.buffer_count = min(st.buffer_count + 1, cfg.window_size)
        st.steps_seen += 1
        if not st.buffer_full or (index + 1 - cfg.window_size) % cfg.stride:
            return None

        warmup = len(st.kl_history) < cfg.history_len
        mu, _, threshold = history_threshold(st.kl_history, cfg.kappa, cfg.threshold_floor)
        try:
            window = fit_gaussian(st.buffer, cfg.ridge)
            kl: Optional[KlValue] = kl_gaussian(window, self.safe_gaussian)
            fim = fim_surrogate(window)
        except GeometryError as exc:
            logger.warning("degenerate window at step %d: %s", index, exc)
            kl, fim = None, 0.0

        degenerate = kl is None
        kl_nats = math.inf if degenerate else kl.nats
        alarmed = (kl_nats >= threshold) and not warmup
        landauer = 0.0 if degenerate else landauer_bound(kl_nats - mu, temperature)
        is_fpt = alarmed and st.fpt is None
        if is_fpt:
            st.fpt = index
        if not alarmed and not degenerate:
            st.kl_history.append(kl_nats)
        st.frozen = alarmed
        self._drift.update(kl_nats)
        st.drift_run = self._drift.run

        static_alarmed = None
        if self._static is not None:
            static_alarmed = kl_nats >= self._static

        return DetectionEvent(
            step=index,
            kl=kl,
            threshold=threshold,
            alarmed=alarmed,
            is_fpt=is_fpt,
            fim=fim,
            landauer=landauer,
            warmup=warmup,
            static_threshold=self._static,
            static_alarmed=static_alarmed,
            drift=self.drift_monitor(),
            degenerate=degenerate,
        )

    def run(self, samples: Iterable) -> Iterator[DetectionEvent]:
        for x in samples:
            event = self.step(x)
            if event is not None:
                yield event


def run_detector(safe, samples, config: DetectorConfig | None = None,
                 temperature: float = 1.0) -> list[DetectionEvent]:
    """Convenience wrapper: fresh detector over an array of samples."""
    return list(Detector(safe, config, temperature).run(samples))


def write_events(events: Iterable[DetectionEvent], path) -> int:
    """Write events as newline-delimited JSON; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event.to_json())
            fh.write("\n")
            n += 1
    return n
