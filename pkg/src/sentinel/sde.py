"""Ornstein-Uhlenbeck drift-diffusion simulator and first-passage experiments.

The state follows ``dx = -a x dt + sqrt(2 D) dW`` (stationary law
``N(0, D/a · I)``) discretized by Euler-Maruyama. A perturbation schedule
inflates the diffusion and/or weakens the drift from a given onset time.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from sentinel.detector import DetectionEvent, DetectorConfig, run_detector
from sentinel.geometry import KlValue, fit_gaussian

logger = logging.getLogger(__name__)

_CHUNK_FLOATS = 20_000_000


@dataclass(frozen=True)
class SdeConfig:
    """Drift-diffusion parameters. Defaults describe the UAV-style FPT scenario.

    The defaults are chosen so that 200 disjoint windows of 100 samples
    (the detector's history) fill exactly the 160 s before the default
    perturbation onset.
    """

    dim: int = 6
    drift_rate: float = 50.0
    diffusion: float = 50.0
    dt: float = 0.008
    duration: float = 164.0
    init_mean: tuple = (0.0,) * 6
    init_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init_mean", tuple(float(v) for v in self.init_mean))
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if len(self.init_mean) != self.dim:
            raise ValueError(f"init_mean has length {len(self.init_mean)}, expected {self.dim}")
        for name in ("drift_rate", "diffusion", "dt", "duration", "init_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.drift_rate * self.dt < 0.5:
            raise ValueError(
                f"drift_rate * dt = {self.drift_rate * self.dt:g} violates the 0.5 stability margin"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def stationary_variance(self) -> float:
        return self.diffusion / self.drift_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init_mean"] = list(self.init_mean)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> SdeConfig:
        data = dict(data)
        if "init_mean" not in data and "dim" in data:
            data["init_mean"] = (0.0,) * int(data["dim"])
        return cls(**data)


@dataclass(frozen=True)
class PerturbationSchedule:
    onset_time: float = 160.0
    diffusion_factor: float = 1.0
    drift_factor: float = 1.0

    def __post_init__(self):
        if self.onset_time < 0:
            raise ValueError(f"onset_time must be >= 0, got {self.onset_time}")
        if self.diffusion_factor < 1:
            raise ValueError(f"diffusion_factor must be >= 1, got {self.diffusion_factor}")
        if not 0 < self.drift_factor <= 1:
            raise ValueError(f"drift_factor must be in (0, 1], got {self.drift_factor}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    config: SdeConfig
    schedule: Optional[PerturbationSchedule] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time"] + [f"x{i}" for i in range(self.states.shape[1])])
            for t, row in zip(self.times, self.states):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one path; paths never share state."""
    return np.random.Generator(np.random.Philox(key=seed + index))


def _step_params(config: SdeConfig, schedule: Optional[PerturbationSchedule]):
    """Per-step drift and noise scale arrays (params at the left endpoint)."""
    n = config.n_steps
    t_left = np.arange(n) * config.dt
    a = np.full(n, config.drift_rate)
    diff = np.full(n, config.diffusion)
    if schedule is not None:
        after = t_left >= schedule.onset_time - 1e-9 * config.dt
        a[after] *= schedule.drift_factor
        diff[after] *= schedule.diffusion_factor
    return a, np.sqrt(2.0 * diff * config.dt)


def simulate(
    config: SdeConfig,
    schedule: Optional[PerturbationSchedule] = None,
    n_paths: int = 1,
) -> list[Trajectory]:
    """Euler-Maruyama sample paths; path ``i`` uses the stream ``seed + i``."""
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    n, dim, dt = config.n_steps, config.dim, config.dt
    a, noise_scale = _step_params(config, schedule)
    times = np.arange(n + 1) * dt
    times.setflags(write=False)
    mean0 = np.asarray(config.init_mean)

    out: list[Trajectory] = []
    chunk = max(1, _CHUNK_FLOATS // ((n + 1) * dim))
    for start in range(0, n_paths, chunk):
        idx = range(start, min(start + chunk, n_paths))
        draws = np.stack([path_rng(config.seed, i).standard_normal((n + 1, dim)) for i in idx])
        states = np.empty_like(draws)
        states[:, 0] = mean0 + config.init_std * draws[:, 0]
        for k in range(n):
            x = states[:, k]
            states[:, k + 1] = x - a[k] * x * dt + noise_scale[k] * draws[:, k + 1]
        for j in range(len(idx)):
            s = states[j]
            s.setflags(write=False)
            out.append(Trajectory(times=times, states=s, config=config, schedule=schedule))
    return out


def _kl_1d(mean: float, var: float, ref_var: float) -> float:
    return 0.5 * (var / ref_var + mean * mean / ref_var - 1.0 + math.log(ref_var / var))


def analytic_ou_kl(config: SdeConfig, t: float) -> KlValue:
    """KL from the exact time-t law of the unperturbed process to its stationary law.

    Uses the continuous-time moments ``μ(t) = μ₀ e^{-at}`` and
    ``σ²(t) = D/a + (σ₀² − D/a) e^{-2at}``.
    """
    a = config.drift_rate
    v_inf = config.stationary_variance
    var_t = v_inf + (config.init_std**2 - v_inf) * math.exp(-2.0 * a * t)
    decay = math.exp(-a * t)
    total = sum(_kl_1d(m * decay, var_t, v_inf) for m in config.init_mean)
    return KlValue.from_raw(total)


def ensemble_kl(trajectories: Sequence[Trajectory], step: int, ridge: float = 0.0) -> KlValue:
    """KL of the Gaussian fitted across paths at one time index against the stationary law."""
    from sentinel.geometry import GaussianModel, kl_gaussian

    cfg = trajectories[0].config
    cross = np.stack([tr.states[step] for tr in trajectories])
    fitted = fit_gaussian(cross, ridge)
    ref = GaussianModel.from_moments(np.zeros(cfg.dim), cfg.stationary_variance * np.eye(cfg.dim))
    return kl_gaussian(fitted, ref)


@dataclass
class FptExperimentResult:
    onset_time: float
    dt: float
    fpt_steps: list = field(default_factory=list)
    event_logs: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)

    @property
    def fpt_times(self) -> list:
        return [None if s is None else s * self.dt for s in self.fpt_steps]

    @property
    def detected(self) -> list:
        return [t for t in self.fpt_times if t is not None]

    def absent_fraction(self) -> float:
        return sum(s is None for s in self.fpt_steps) / len(self.fpt_steps)

    def median_fpt(self) -> float:
        """Median FPT time with missing detections counted as +inf."""
        values = [math.inf if t is None else t for t in self.fpt_times]
        return float(np.median(values))

    def summary(self) -> dict:
        det = self.detected
        return {
            "onset_time": self.onset_time,
            "n_trials": len(self.fpt_steps),
            "n_detected": len(det),
            "absent_fraction": self.absent_fraction(),
            "median_fpt": None if math.isinf(self.median_fpt()) else self.median_fpt(),
            "fpt_times": self.fpt_times,
        }


def run_fpt_experiment(
    config: SdeConfig,
    schedule: PerturbationSchedule,
    detector_config: DetectorConfig,
    safe_fit_time: float,
    n_trials: int,
    temperature: float = 1.0,
    keep_trajectories: bool = False,
) -> FptExperimentResult:
    """Simulate ``n_trials`` paths and run the detector over each.

    For each path, the safe model is fitted to the states at times up to
    ``safe_fit_time`` (which must precede the onset) and the detector then
    scans the whole path. A trial's FPT is the step of its first alarm.
    """
    if not safe_fit_time < schedule.onset_time:
        raise ValueError(
            f"safe_fit_time {safe_fit_time} must precede onset {schedule.onset_time}"
        )
    if not safe_fit_time > 0:
        raise ValueError(f"safe_fit_time must be positive, got {safe_fit_time}")
    result = FptExperimentResult(onset_time=schedule.onset_time, dt=config.dt)
    n_fit = int(math.floor(safe_fit_time / config.dt + 1e-9)) + 1
    for traj in simulate(config, schedule, n_trials):
        safe = fit_gaussian(traj.states[:n_fit], detector_config.ridge)
        events = run_detector(safe, traj.states, detector_config, temperature)
        fpt = next((e.step for e in events if e.is_fpt), None)
        result.fpt_steps.append(fpt)
        result.event_logs.append(events)
        if keep_trajectories:
            result.trajectories.append(traj)
    logger.info(
        "FPT experiment: %d trials, %d detections",
        n_trials,
        sum(s is not None for s in result.fpt_steps),
    )
    return result


def window_labels_after_onset(
    events: Sequence[DetectionEvent], window_size: int, onset_step: int, quorum: float = 0.5
) -> list:
    """1 for windows whose fraction of post-onset samples exceeds ``quorum``."""
    labels = []
    for e in events:
        first = e.step - window_size + 1
        post = max(0, e.step - max(first, onset_step) + 1)
        labels.append(int(post / window_size > quorum))
    return labels
