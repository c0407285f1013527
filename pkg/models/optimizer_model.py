import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from models.errors import ConfigurationError, NumericalError
from models.sampler_model import SamplingPlan, sample_points
from models.similarity_model import ResolutionLevel, SimilarityMetric
from models.transform_model import Transform


class Evaluation(NamedTuple):
    value: float
    gradient: np.ndarray
    rejected: int = 0


@dataclass
class GainSchedule:
    """a(t) = a / (A + t)^alpha with adaptive time t driven by a bounded sigmoid"""

    a: float = 1.0
    A: float = 20.0
    alpha: float = 0.602
    f_max: float = 1.0
    f_min: float = -0.8
    t: float = 0.0
    omega: float = 0.0
    _inner_count: int = 0

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigurationError(f"Base gain must be positive, got {self.a}")
        if self.A < 1:
            raise ConfigurationError(f"SP_A must be >= 1, got {self.A}")
        if not 0 < self.alpha <= 1:
            raise ConfigurationError(f"SP_alpha must be in (0, 1], got {self.alpha}")
        if not self.f_min < 0 < self.f_max:
            raise ConfigurationError(f"Sigmoid bounds must satisfy min < 0 < max, got {self.f_min}, {self.f_max}")

    def gain(self, t: Optional[float] = None) -> float:
        t = self.t if t is None else t
        return self.a / (self.A + t) ** self.alpha

    def sigmoid(self, x: float) -> float:
        """Logistic curve from f_min to f_max, midway at x = 0"""
        if self.omega <= 0:
            return 0.5 * (self.f_min + self.f_max) if x == 0 else (self.f_max if x > 0 else self.f_min)
        exponent = float(np.clip(-x / self.omega, -700.0, 700.0))
        return self.f_min + (self.f_max - self.f_min) / (1.0 + np.exp(exponent))

    def advance(self, inner_product: float):
        """Update the running scale and adaptive time from <g_i, g_(i-1)>"""
        self._inner_count += 1
        self.omega += (abs(inner_product) - self.omega) / self._inner_count
        self.t = max(0.0, self.t + self.sigmoid(-inner_product))


@dataclass
class IterationRecord:
    level: int
    iteration: int
    cost: float
    gain: float
    t: float
    rejected: int
    gradient_norm: float

    def to_dict(self):
        """Convert record to dictionary for JSON serialization"""
        return {
            "level": self.level,
            "iteration": self.iteration,
            "cost": self.cost,
            "gain": self.gain,
            "t": self.t,
            "rejected": self.rejected,
            "gradient_norm": self.gradient_norm,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in cls.__dataclass_fields__})


@dataclass
class OptimizerState:
    parameters: np.ndarray
    schedule: GainSchedule
    level: int = 0
    iteration: int = 0
    previous_gradient: Optional[np.ndarray] = None
    trace: List[IterationRecord] = field(default_factory=list)
    rejected: int = 0


def _finite(evaluation: Evaluation) -> bool:
    return bool(np.isfinite(evaluation.value) and np.all(np.isfinite(evaluation.gradient)))


def asgd_step(state: OptimizerState, cost_and_grad: Callable[[np.ndarray], Evaluation]) -> OptimizerState:
    """One adaptive stochastic gradient descent update"""
    evaluation = cost_and_grad(state.parameters)
    if not _finite(evaluation):
        state.schedule.a /= 2.0
        logging.warning(f"Non-finite cost or gradient at iteration {state.iteration}; halving gain to {state.schedule.a}")
        evaluation = cost_and_grad(state.parameters)
        if not _finite(evaluation):
            recent = [record.to_dict() for record in state.trace[-5:]]
            raise NumericalError(f"Gradient still non-finite after retry at iteration {state.iteration}; trace {recent}")

    gradient = np.asarray(evaluation.gradient, dtype=np.float64)
    t = state.schedule.t
    gain = state.schedule.gain(t)
    state.parameters = state.parameters - gain * gradient
    if state.previous_gradient is not None:
        state.schedule.advance(float(gradient @ state.previous_gradient))

    state.trace.append(
        IterationRecord(
            level=state.level,
            iteration=state.iteration,
            cost=float(evaluation.value),
            gain=float(gain),
            t=float(t),
            rejected=int(evaluation.rejected),
            gradient_norm=float(np.linalg.norm(gradient)),
        )
    )
    state.previous_gradient = gradient
    state.rejected += int(evaluation.rejected)
    state.iteration += 1
    return state


def estimate_base_gain(
    cost_and_grad: Callable[[np.ndarray], Evaluation],
    transform: Transform,
    check_points: np.ndarray,
    delta_max: float,
    trials: int = 10,
    A: float = 20.0,
    alpha: float = 0.602,
    fallback: float = 1.0,
) -> float:
    """Base gain so that the first step (t = 0) moves no check point by more than delta_max mm"""
    if not delta_max > 0:
        raise ConfigurationError(f"Maximum step length must be positive, got {delta_max}")
    if trials < 1:
        raise ConfigurationError(f"Gain estimation needs at least one trial, got {trials}")

    parameters = transform.get_parameters()
    largest = 0.0
    for _ in range(trials):
        evaluation = cost_and_grad(parameters)
        if not _finite(evaluation):
            continue
        displacement = transform.displacement_of_step(check_points, evaluation.gradient)
        largest = max(largest, float(np.max(np.linalg.norm(displacement, axis=1))))
    transform.set_parameters(parameters)

    if largest <= 0:
        logging.warning(f"All {trials} gradient measurements were zero; using fallback gain {fallback}")
        return fallback
    gain = delta_max * (A**alpha) / largest
    logging.debug(f"Estimated base gain {gain:.6g} (max step displacement {largest:.6g} mm per unit gain)")
    return gain


@dataclass
class LevelSettings:
    """Optimisation settings of one resolution level"""

    iterations: int = 500
    samples: int = 2000
    bending_weight: float = 0.0
    A: float = 20.0
    alpha: float = 0.602
    f_max: float = 1.0
    f_min: float = -0.8
    base_gain: Optional[float] = None
    delta_max: Optional[float] = None
    gain_trials: int = 10
    update_interval: int = -1
    jitter: bool = True
    retry_factor: int = 50


@dataclass
class ResolutionResult:
    transform: Transform
    trace: List[IterationRecord]
    rejected: int
    base_gain: float
    seconds: float


class AsgdOptimizer:
    """Runs the fixed-iteration ASGD loop of one resolution level"""

    def __init__(self):
        self._observers: List[Callable[[IterationRecord], None]] = []

    def add_observer(self, observer: Callable[[IterationRecord], None]):
        """Observer pattern: Add an observer to be notified after each iteration"""
        self._observers.append(observer)

    def notify_observers(self, record: IterationRecord):
        """Notify all observers of a completed iteration"""
        for observer in self._observers:
            observer(record)

    @staticmethod
    def _check_points(level: ResolutionLevel, limit: int = 8000) -> np.ndarray:
        points = level.fixed.grid.points().reshape(-1, 3)
        stride = max(1, len(points) // limit)
        return points[::stride]

    @staticmethod
    def _default_delta_max(transform: Transform, level: ResolutionLevel) -> float:
        bspline = getattr(transform, "bspline", transform)
        spacing = getattr(bspline, "grid_spacing", None)
        if spacing is not None:
            return float(np.min(spacing)) / 4.0
        return float(np.max(level.fixed.spacing))

    def run_resolution(
        self,
        settings: LevelSettings,
        level: ResolutionLevel,
        transform: Transform,
        metric: SimilarityMetric,
        rng: np.random.Generator,
    ) -> ResolutionResult:
        """Exactly `settings.iterations` ASGD steps on one pyramid level"""
        started = time.perf_counter()
        if settings.iterations <= 0:
            return ResolutionResult(transform, [], 0, 0.0, time.perf_counter() - started)

        sampling_seed, metric_seed = rng.integers(0, np.iinfo(np.int64).max, size=2)
        sampling_rng = np.random.default_rng(sampling_seed)
        metric_rng = np.random.default_rng(metric_seed)
        fixed_offsets, moving_offsets = metric.sample_extent()
        plan = SamplingPlan(
            samples=settings.samples,
            fixed_mask=level.fixed_mask,
            moving_mask=level.moving_mask,
            fixed_offsets=fixed_offsets,
            moving_offsets=moving_offsets,
            retry_factor=settings.retry_factor,
            jitter=settings.jitter,
        )

        def cost_and_grad(parameters: np.ndarray) -> Evaluation:
            transform.set_parameters(parameters)
            sample = sample_points(plan, level.fixed.grid, transform, sampling_rng, level.moving.grid, metric)
            value = metric.evaluate(transform, sample.points, metric_rng)
            cost, gradient = value.value, value.gradient
            if settings.bending_weight > 0:
                energy, energy_gradient = transform.bending_energy(sample.points)
                cost += settings.bending_weight * energy
                gradient = gradient + settings.bending_weight * energy_gradient
            return Evaluation(cost, gradient, sample.rejected)

        if settings.update_interval > 0:
            metric.refresh(transform)

        base_gain = settings.base_gain
        if base_gain is None:
            delta_max = settings.delta_max or self._default_delta_max(transform, level)
            base_gain = estimate_base_gain(
                cost_and_grad,
                transform,
                self._check_points(level),
                delta_max,
                settings.gain_trials,
                settings.A,
                settings.alpha,
            )

        schedule = GainSchedule(
            a=base_gain, A=settings.A, alpha=settings.alpha, f_max=settings.f_max, f_min=settings.f_min
        )
        state = OptimizerState(parameters=transform.get_parameters(), schedule=schedule, level=level.index)
        for iteration in range(settings.iterations):
            if settings.update_interval > 0 and iteration > 0 and iteration % settings.update_interval == 0:
                transform.set_parameters(state.parameters)
                metric.refresh(transform)
            asgd_step(state, cost_and_grad)
            self.notify_observers(state.trace[-1])

        transform.set_parameters(state.parameters)
        seconds = time.perf_counter() - started
        logging.info(
            f"Level {level.index}: {settings.iterations} iterations, final cost {state.trace[-1].cost:.6g}, "
            f"{state.rejected} rejected samples, {seconds:.2f}s"
        )
        return ResolutionResult(transform, state.trace, state.rejected, base_gain, seconds)


def run_resolution(
    settings: LevelSettings,
    level: ResolutionLevel,
    transform: Transform,
    metric: SimilarityMetric,
    rng: np.random.Generator,
    observers: Optional[List[Callable[[IterationRecord], None]]] = None,
) -> ResolutionResult:
    optimizer = AsgdOptimizer()
    for observer in observers or []:
        optimizer.add_observer(observer)
    return optimizer.run_resolution(settings, level, transform, metric, rng)
