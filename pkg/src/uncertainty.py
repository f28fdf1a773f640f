"""Estimation-error sampling and empirical quantiles for robust utilities."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.errors import EmptySampleError
from src.netmodel import (
    Allocation,
    NetworkState,
    StateBatch,
    SystemConfig,
    batch_metrics,
    complex_normal,
    effective_gains,
    metrics_from_arrays,
)
from src.objectives import UtilitySpec, evaluate_utility

Tail = Literal["lower", "upper"]

# Maximized utilities are judged by their bad (lower) tail, minimized ones by the upper tail
DEFAULT_TAIL_RULE: Dict[str, Tail] = {"maximize": "lower", "minimize": "upper"}


class ErrorModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_h_sq: float = Field(0.15, ge=0, lt=1)
    sigma_w_sq: float = Field(3200.0, ge=0)
    m_samples: int = Field(200, ge=1)
    omega_floor: float = Field(1.0, gt=0)
    tail_rule: Dict[str, Tail] = Field(default_factory=lambda: dict(DEFAULT_TAIL_RULE))
    # utility family -> tail, wins over tail_rule
    tail_overrides: Dict[str, Tail] = Field(default_factory=dict)

    @classmethod
    def from_config(
        cls,
        config: SystemConfig,
        m_samples: int = 200,
        tail_overrides: Optional[Dict[str, Tail]] = None,
    ) -> "ErrorModel":
        return cls(
            sigma_h_sq=config.sigma_h_sq,
            sigma_w_sq=config.sigma_w_sq,
            m_samples=m_samples,
            omega_floor=config.omega_floor,
            tail_overrides=dict(tail_overrides or {}),
        )

    def tail_for(self, family: str, sense: str) -> Tail:
        return self.tail_overrides.get(family, self.tail_rule[sense])


@dataclass(frozen=True)
class UtilitySamples:
    values: np.ndarray  # (..., M)
    sense: str


def nearest_rank(m: int, gamma: float, tail: Tail) -> int:
    """1-based rank of the gamma-quantile of m sorted samples."""
    if m <= 0:
        raise EmptySampleError("Cannot take a quantile of zero samples")
    level = gamma if tail == "lower" else 1.0 - gamma
    # rounding absorbs float noise such as 0.07 * 100 = 7.000000000000001
    rank = math.ceil(round(level * m, 9))
    return min(max(rank, 1), m)


def empirical_quantile(samples: np.ndarray, gamma: float, tail: Tail) -> np.ndarray:
    """
    Nearest-rank quantile along the last axis.

    lower: the ceil(gamma*M)-th smallest sample. upper: the ceil((1-gamma)*M)-th
    smallest, i.e. the value exceeded by at most a gamma share of the samples.
    """
    values = np.asarray(samples, dtype=float)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise EmptySampleError("Cannot take a quantile of zero samples")
    rank = nearest_rank(values.shape[-1], gamma, tail)
    ordered = np.sort(values, axis=-1)
    result = ordered[..., rank - 1]
    return float(result) if result.ndim == 0 else result


def sample_realizations(
    h_est: np.ndarray,
    omega_est: np.ndarray,
    model: ErrorModel,
    rng: np.random.Generator,
    m_samples: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    M plausible true parameter sets around the estimates.

    h_est (..., K, L) and omega_est (..., K) gain an axis of size M before the
    user axis: (..., M, K, L) and (..., M, K).
    """
    m = m_samples or model.m_samples
    h_est = np.asarray(h_est)
    omega_est = np.asarray(omega_est, dtype=float)
    h_shape = h_est.shape[:-2] + (m,) + h_est.shape[-2:]
    w_shape = omega_est.shape[:-1] + (m,) + omega_est.shape[-1:]

    h = h_est[..., None, :, :] + complex_normal(rng, model.sigma_h_sq, h_shape)
    omega_err = rng.normal(0.0, math.sqrt(model.sigma_w_sq), size=w_shape)
    omega = np.maximum(omega_est[..., None, :] + omega_err, model.omega_floor)
    return h, omega


def sample_perturbed_state(state: NetworkState, model: ErrorModel, rng: np.random.Generator) -> NetworkState:
    """One plausible realization; the estimates and the beamformer stay fixed."""
    h, omega = sample_realizations(state.h_est, state.omega_est, model, rng, m_samples=1)
    return NetworkState(
        h_true=h[0],
        h_est=state.h_est,
        omega_true=omega[0],
        omega_est=state.omega_est,
        beamformer=state.beamformer,
        overloaded=state.overloaded,
    )


def utility_samples(
    spec: UtilitySpec,
    state: NetworkState,
    alloc: Allocation,
    model: ErrorModel,
    config: SystemConfig,
    rng: np.random.Generator,
) -> UtilitySamples:
    """Nominal utility of `spec` on M perturbed realizations of one state."""
    h, omega = sample_realizations(state.h_est, state.omega_est, model, rng)
    gains = effective_gains(h, state.beamformer)
    metrics = metrics_from_arrays(gains, omega, alloc.p_tx, alloc.f_co, alloc.kind, config)
    return UtilitySamples(values=np.asarray(evaluate_utility(spec, metrics)), sense=spec.sense)


def robust_utility(
    spec: UtilitySpec,
    state: NetworkState,
    alloc: Allocation,
    model: ErrorModel,
    config: SystemConfig,
    rng: np.random.Generator,
) -> float:
    """Empirical gamma-quantile of the utility over perturbed realizations, on the sense-appropriate tail."""
    samples = utility_samples(spec, state, alloc, model, config, rng)
    gamma = spec.gamma if spec.gamma is not None else config.gamma
    return float(empirical_quantile(samples.values, gamma, model.tail_for(spec.family, spec.sense)))


@dataclass(frozen=True)
class Realizations:
    """Perturbed effective gains and workloads for a state batch, shared by every evaluated candidate."""

    gains: np.ndarray  # (N, M, K, K)
    omega: np.ndarray  # (N, M, K)


def draw_realizations(batch: StateBatch, model: ErrorModel, rng: np.random.Generator) -> Realizations:
    h, omega = sample_realizations(batch.h_est, batch.omega_est, model, rng)
    gains = effective_gains(h, batch.beamformer[:, None, :, :])
    return Realizations(gains=gains, omega=omega)


def batch_utility(
    spec: UtilitySpec,
    batch: StateBatch,
    alloc: Allocation,
    config: SystemConfig,
    use_true: bool = True,
    realizations: Optional[Realizations] = None,
    model: Optional[ErrorModel] = None,
) -> np.ndarray:
    """
    Per-state utility over a batch.

    Nominal specs are evaluated on the true (or estimated) parameters; robust
    specs take the gamma-quantile over the given realizations.
    """
    if not spec.robust:
        return np.asarray(evaluate_utility(spec, batch_metrics(batch, alloc, config, use_true)))
    if realizations is None:
        raise ValueError(f"Robust utility {spec.name} needs perturbation realizations")
    metrics = metrics_from_arrays(
        realizations.gains,
        realizations.omega,
        np.expand_dims(alloc.p_tx, -2),
        np.expand_dims(alloc.f_co, -2),
        alloc.kind,
        config,
    )
    values = evaluate_utility(spec, metrics)
    gamma = spec.gamma if spec.gamma is not None else config.gamma
    tail = model.tail_for(spec.family, spec.sense) if model else DEFAULT_TAIL_RULE[spec.sense]
    return np.asarray(empirical_quantile(values, gamma, tail))
