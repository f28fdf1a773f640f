"""
Multi-user MISO downlink with per-user edge computing.

Every array helper here accepts arbitrary leading batch axes, so the same code
evaluates one state, a batch of N states, or N states times M uncertainty
realizations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import SingularMatrixError

Kind = Literal["comm", "comp", "joint"]
KINDS: Tuple[str, ...] = ("comm", "comp", "joint")

# Fields each allocation kind may set to nonzero values
ACTIVE_FIELDS: Dict[str, Tuple[str, ...]] = {
    "comm": ("p_tx",),
    "comp": ("p_co", "f_co"),
    "joint": ("p_tx", "p_co", "f_co"),
}

FEASIBILITY_TOL = 1e-9


def dbm_to_watts(value_dbm: float) -> float:
    return 10.0 ** (value_dbm / 10.0) / 1000.0


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, key...) so parallel work never shares a stream."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *[int(k) for k in keys]]))


class SystemConfig(BaseModel):
    """
    System parameters in linear SI units.

    Keys ending in `_dbm` or `_db` are converted on load, e.g. `p_max_dbm: 34`
    becomes `p_max` in watts. The per-domain budgets default to the shared
    budget `p_max`.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_antennas: int = Field(4, ge=1)
    num_users: int = Field(4, ge=1)
    p_max: float = Field(gt=0)
    p_max_tx: float = Field(gt=0)
    p_max_co: float = Field(gt=0)
    bandwidth: float = Field(5e6, gt=0)
    noise_psd: float = Field(gt=0)
    sinr_gap: float = Field(gt=0)
    f_max: float = Field(4.6e9, gt=0)
    tau: float = Field(1e-28, gt=0)
    mu: float = Field(3.0, ge=1)
    d_out: float = Field(2.5e4, gt=0)
    d_in: float = Field(5e4, gt=0)
    sigma_h_sq: float = Field(0.15, ge=0, lt=1)
    sigma_w_sq: float = Field(3200.0, ge=0)
    gamma: float = Field(0.05, gt=0, lt=1)
    rzf_alpha: float = Field(0.2, ge=0)
    omega_floor: float = Field(1.0, gt=0)
    t_feas: float = Field(0.1, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _convert_units(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        for key in list(data):
            if key.endswith("_dbm"):
                data[key[: -len("_dbm")]] = dbm_to_watts(float(data.pop(key)))
            elif key.endswith("_db"):
                data[key[: -len("_db")]] = db_to_linear(float(data.pop(key)))
        data.setdefault("p_max", dbm_to_watts(34.0))
        data.setdefault("p_max_tx", data["p_max"])
        data.setdefault("p_max_co", data["p_max"])
        data.setdefault("noise_psd", dbm_to_watts(-75.0))
        data.setdefault("sinr_gap", db_to_linear(9.5))
        return data

    @property
    def noise_power(self) -> float:
        return self.noise_psd * self.bandwidth

    @property
    def frequency_cap(self) -> float:
        """Total CPU frequency reachable with the full shared budget."""
        return min(self.f_max, (self.p_max / self.tau) ** (1.0 / self.mu))


@dataclass(frozen=True)
class NetworkState:
    """One network realization: true and estimated channels/workloads plus the RZF beamformer."""

    h_true: np.ndarray  # (K, L) complex, row k is h_k
    h_est: np.ndarray
    omega_true: np.ndarray  # (K,) cycles per bit
    omega_est: np.ndarray
    beamformer: np.ndarray  # (L, K) unit-norm columns
    overloaded: bool = False


@dataclass(frozen=True)
class StateBatch:
    """N stacked states; arrays carry a leading batch axis."""

    h_true: np.ndarray  # (N, K, L)
    h_est: np.ndarray
    omega_true: np.ndarray  # (N, K)
    omega_est: np.ndarray
    beamformer: np.ndarray  # (N, L, K)
    overloaded: bool = False

    def __len__(self) -> int:
        return int(self.h_true.shape[0])

    def state(self, i: int) -> NetworkState:
        return NetworkState(
            h_true=self.h_true[i],
            h_est=self.h_est[i],
            omega_true=self.omega_true[i],
            omega_est=self.omega_est[i],
            beamformer=self.beamformer[i],
            overloaded=self.overloaded,
        )

    @classmethod
    def from_states(cls, states: Sequence[NetworkState]) -> "StateBatch":
        return cls(
            h_true=np.stack([s.h_true for s in states]),
            h_est=np.stack([s.h_est for s in states]),
            omega_true=np.stack([s.omega_true for s in states]),
            omega_est=np.stack([s.omega_est for s in states]),
            beamformer=np.stack([s.beamformer for s in states]),
            overloaded=any(s.overloaded for s in states),
        )


@dataclass(frozen=True)
class Allocation:
    """
    A resource decision. Fields may carry a leading batch axis (one row per state).

    Fields outside the kind's active set are zero.
    """

    p_tx: np.ndarray  # (..., K) W
    p_co: np.ndarray  # (...,) W
    f_co: np.ndarray  # (..., K) Hz
    kind: Kind

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown allocation kind '{self.kind}'")
        for name in ("p_tx", "p_co", "f_co"):
            value = np.asarray(getattr(self, name), dtype=float)
            if np.any(value < 0) or not np.all(np.isfinite(value)):
                raise ValueError(f"Allocation field {name} must be finite and non-negative")
            if name not in ACTIVE_FIELDS[self.kind] and np.any(value != 0):
                raise ValueError(f"Field {name} must be zero for a '{self.kind}' allocation")
            object.__setattr__(self, name, value)

    @classmethod
    def zeros(cls, kind: Kind, num_users: int, batch: Tuple[int, ...] = ()) -> "Allocation":
        return cls(
            p_tx=np.zeros(batch + (num_users,)),
            p_co=np.zeros(batch),
            f_co=np.zeros(batch + (num_users,)),
            kind=kind,
        )

    @property
    def num_users(self) -> int:
        return int(self.p_tx.shape[-1])

    def row(self, i: int) -> "Allocation":
        """Allocation of state i of a batched allocation."""
        return Allocation(p_tx=self.p_tx[i], p_co=self.p_co[i], f_co=self.f_co[i], kind=self.kind)


@dataclass(frozen=True)
class PerUserMetrics:
    sinr: np.ndarray
    r_tx: np.ndarray  # bit/s
    r_co: np.ndarray  # bit/s
    r_joint: np.ndarray
    t_tx: np.ndarray  # s, +inf where the rate is zero
    t_co: np.ndarray
    t_joint: np.ndarray
    p_co_required: np.ndarray  # W


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    used: float
    limit: float
    margin: float  # limit - used
    relative_margin: float  # margin / limit
    satisfied: bool


@dataclass(frozen=True)
class FeasibilityReport:
    checks: Tuple[ConstraintCheck, ...] = field(default_factory=tuple)

    @property
    def feasible(self) -> bool:
        return all(c.satisfied for c in self.checks)

    @property
    def violated(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.checks if not c.satisfied)

    def __getitem__(self, name: str) -> ConstraintCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)


# --- Channel and beamformer ---

def rzf_beamformer(h_est: np.ndarray, alpha: float) -> np.ndarray:
    """
    Regularized zero-forcing directions V = H^T (conj(H) H^T + alpha I)^-1.

    h_est has shape (..., K, L) with row k the channel of user k; the result has
    shape (..., L, K) with every column normalized to unit norm.
    """
    h_est = np.asarray(h_est, dtype=complex)
    num_users = h_est.shape[-2]
    g = np.conj(h_est)  # row k is h_k^H
    gram = g @ np.swapaxes(h_est, -1, -2)
    identity = np.eye(num_users)
    if alpha == 0 and np.any(np.linalg.matrix_rank(gram) < num_users):
        raise SingularMatrixError(
            f"Channel Gram matrix is rank deficient (K={num_users}, L={h_est.shape[-1]}); "
            "use a positive regularization"
        )
    try:
        x = np.linalg.solve(gram + alpha * identity, g)  # (..., K, L)
    except np.linalg.LinAlgError as e:
        raise SingularMatrixError(f"Regularized Gram matrix is singular: {e}") from e
    v = np.conj(np.swapaxes(x, -1, -2))  # (..., L, K)
    norms = np.linalg.norm(v, axis=-2, keepdims=True)
    if np.any(norms == 0):
        raise SingularMatrixError("Zero beamforming direction (all-zero channel)")
    return v / norms


def effective_channels(h: np.ndarray, beamformer: np.ndarray) -> np.ndarray:
    """Entry (k, j) is h_k^H v_j."""
    return np.conj(h) @ beamformer


def effective_gains(h: np.ndarray, beamformer: np.ndarray) -> np.ndarray:
    return np.abs(effective_channels(h, beamformer)) ** 2


# --- State generation ---

def complex_normal(rng: np.random.Generator, variance: float, shape: Tuple[int, ...]) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def generate_batch(config: SystemConfig, rng: np.random.Generator, n: int) -> StateBatch:
    """
    Draws n states.

    The estimate is CN(0, 1 - sigma_h^2) and the true channel adds an independent
    CN(0, sigma_h^2) error, so the true channel keeps unit variance. Workloads are
    Gamma(2, 200) cycles/bit and the estimate is off by a N(0, sigma_w^2) error,
    both clamped at the workload floor.
    """
    K, L = config.num_users, config.num_antennas
    overloaded = K > L
    if overloaded:
        print(f"ℹ️  Overloaded network: {K} users on {L} antennas")

    h_est = complex_normal(rng, 1.0 - config.sigma_h_sq, (n, K, L))
    h_true = h_est + complex_normal(rng, config.sigma_h_sq, (n, K, L))
    omega_true = np.maximum(rng.gamma(2.0, 200.0, size=(n, K)), config.omega_floor)
    omega_err = rng.normal(0.0, math.sqrt(config.sigma_w_sq), size=(n, K))
    omega_est = np.maximum(omega_true - omega_err, config.omega_floor)
    beamformer = rzf_beamformer(h_est, config.rzf_alpha)

    return StateBatch(
        h_true=h_true,
        h_est=h_est,
        omega_true=omega_true,
        omega_est=omega_est,
        beamformer=beamformer,
        overloaded=overloaded,
    )


def generate_state(config: SystemConfig, rng: np.random.Generator) -> NetworkState:
    return generate_batch(config, rng, 1).state(0)


# --- Per-user metrics ---

def _delay(payload: float, rate: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(rate > 0, payload / np.where(rate > 0, rate, 1.0), np.inf)


def comm_metrics_from_gains(
    gains: np.ndarray, p_tx: np.ndarray, config: SystemConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SINR, rate and transmission delay; p_tx must broadcast against gains[..., 0, :]."""
    num_users = gains.shape[-1]
    p = np.asarray(p_tx, dtype=float)[..., None, :]
    signal = np.diagonal(gains, axis1=-2, axis2=-1) * np.asarray(p_tx, dtype=float)
    cross = gains * (1.0 - np.eye(num_users))
    interference = np.sum(cross * p, axis=-1)
    sinr = signal / (interference + config.noise_power)
    r_tx = config.bandwidth * np.log2(1.0 + sinr / config.sinr_gap)
    return sinr, r_tx, _delay(config.d_out, r_tx)


def comm_metrics(
    state: NetworkState, p_tx: np.ndarray, config: SystemConfig, use_true: bool = True
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = state.h_true if use_true else state.h_est
    return comm_metrics_from_gains(effective_gains(h, state.beamformer), p_tx, config)


def required_compute_power(f_co: np.ndarray, config: SystemConfig) -> np.ndarray:
    return config.tau * np.sum(np.asarray(f_co, dtype=float), axis=-1) ** config.mu


def comp_metrics(
    f_co: np.ndarray, omega: np.ndarray, config: SystemConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Computing rate f/omega, processing delay and the power the frequencies need."""
    f = np.asarray(f_co, dtype=float)
    r_co = f / np.asarray(omega, dtype=float)
    return r_co, _delay(config.d_in, r_co), required_compute_power(f, config)


def metrics_from_arrays(
    gains: np.ndarray,
    omega: np.ndarray,
    p_tx: np.ndarray,
    f_co: np.ndarray,
    kind: Kind,
    config: SystemConfig,
) -> PerUserMetrics:
    """Metrics for arbitrary batch shapes; fields the kind leaves inactive are evaluated as zero."""
    active = ACTIVE_FIELDS[kind]
    p_tx = np.asarray(p_tx, dtype=float) if "p_tx" in active else np.zeros_like(p_tx, dtype=float)
    f_co = np.asarray(f_co, dtype=float) if "f_co" in active else np.zeros_like(f_co, dtype=float)

    sinr, r_tx, t_tx = comm_metrics_from_gains(gains, p_tx, config)
    r_co, t_co, p_co_required = comp_metrics(f_co, omega, config)
    r_co = np.broadcast_to(r_co, r_tx.shape) if r_co.ndim < r_tx.ndim else r_co
    t_co = np.broadcast_to(t_co, t_tx.shape) if t_co.ndim < t_tx.ndim else t_co
    return PerUserMetrics(
        sinr=sinr,
        r_tx=r_tx,
        r_co=r_co,
        r_joint=r_tx + r_co,
        t_tx=t_tx,
        t_co=t_co,
        t_joint=t_tx + t_co,
        p_co_required=p_co_required,
    )


def joint_metrics(
    state: NetworkState, alloc: Allocation, config: SystemConfig, use_true: bool = True
) -> PerUserMetrics:
    """Per-user metrics of one state; estimates are used when use_true is False."""
    h = state.h_true if use_true else state.h_est
    omega = state.omega_true if use_true else state.omega_est
    gains = effective_gains(h, state.beamformer)
    return metrics_from_arrays(gains, omega, alloc.p_tx, alloc.f_co, alloc.kind, config)


def batch_metrics(
    batch: StateBatch, alloc: Allocation, config: SystemConfig, use_true: bool = True
) -> PerUserMetrics:
    """Metrics of a batched allocation (one row per state) over a state batch."""
    h = batch.h_true if use_true else batch.h_est
    omega = batch.omega_true if use_true else batch.omega_est
    gains = effective_gains(h, batch.beamformer)
    return metrics_from_arrays(gains, omega, alloc.p_tx, alloc.f_co, alloc.kind, config)


# --- Feasibility ---

def _check(name: str, used: np.ndarray, limit: float) -> ConstraintCheck:
    used = np.atleast_1d(np.asarray(used, dtype=float))
    margins = limit - used
    relative = margins / limit
    worst = int(np.argmin(relative))
    return ConstraintCheck(
        name=name,
        used=float(used[worst]),
        limit=float(limit),
        margin=float(margins[worst]),
        relative_margin=float(relative[worst]),
        satisfied=bool(relative[worst] >= -FEASIBILITY_TOL),
    )


def check_feasibility(alloc: Allocation, config: SystemConfig) -> FeasibilityReport:
    """
    Budget checks for the allocation's kind.

    comm: sum of transmit powers within p_max_tx. comp: required compute power
    within p_max_co and total frequency within f_max. joint: frequency cap and
    transmit plus compute power within the shared p_max. Batched allocations
    report their worst row per constraint.
    """
    p_tx_total = np.sum(alloc.p_tx, axis=-1)
    f_total = np.sum(alloc.f_co, axis=-1)
    p_co_required = required_compute_power(alloc.f_co, config)

    checks = []
    if alloc.kind == "comm":
        checks.append(_check("P_comm", p_tx_total, config.p_max_tx))
    elif alloc.kind == "comp":
        checks.append(_check("P_comp", p_co_required, config.p_max_co))
        checks.append(_check("F_max", f_total, config.f_max))
    else:
        checks.append(_check("F_max", f_total, config.f_max))
        checks.append(_check("P_joint", p_tx_total + p_co_required, config.p_max))
    return FeasibilityReport(checks=tuple(checks))


def state_summary(state: NetworkState) -> Dict[str, float]:
    """Compact numbers describing a state, optionally appended to gate queries."""
    gains = np.sum(np.abs(state.h_est) ** 2, axis=-1)
    return {
        "mean_channel_gain": float(np.mean(gains)),
        "min_channel_gain": float(np.min(gains)),
        "mean_workload": float(np.mean(state.omega_est)),
        "max_workload": float(np.max(state.omega_est)),
    }
