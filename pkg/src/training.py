"""
Unsupervised training of the expert policy networks.

The loss is the expert's own utility evaluated through the mapping layer, so no
labels or solver outputs are needed. Channel gains are computed once per
minibatch in numpy; the network, mapping and utility run in torch (float64)
and are differentiated end to end.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
import torch
from torch import nn

from src.errors import TrainingDivergedError
from src.experts import (
    ExpertRecord,
    MlpArchitecture,
    PolicyParameters,
    TrainConfig,
    build_features,
    map_tensor,
)
from src.netmodel import StateBatch, SystemConfig, derive_rng, effective_gains, generate_batch
from src.objectives import UtilitySpec
from src.uncertainty import ErrorModel, nearest_rank, sample_realizations

# Rates enter the loss in Mbps, delays in ms
RATE_SCALE = 1e-6
DELAY_SCALE = 1e3


class PolicyNetwork(nn.Module):
    """Dense ReLU trunk with a linear output layer."""

    def __init__(self, arch: MlpArchitecture, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.arch = arch
        layers: List[nn.Module] = []
        for i, (fan_in, fan_out) in enumerate(arch.layer_dims):
            layers.append(nn.Linear(fan_in, fan_out, dtype=torch.float64))
            if i < len(arch.layer_dims) - 1:
                layers.append(nn.ReLU())
        self.body = nn.Sequential(*layers)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        # uniform fan-in scaling
        with torch.no_grad():
            for module in self.body:
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def linear_layers(self) -> List[nn.Linear]:
        return [m for m in self.body if isinstance(m, nn.Linear)]

    def to_parameters(self, seed: Optional[int] = None, epochs: int = 0, loss_trace: Optional[List[float]] = None) -> PolicyParameters:
        layers = self.linear_layers()
        return PolicyParameters(
            weights=[m.weight.detach().numpy().copy() for m in layers],
            biases=[m.bias.detach().numpy().copy() for m in layers],
            seed=seed,
            epochs=epochs,
            loss_trace=list(loss_trace or []),
        )

    @classmethod
    def from_parameters(cls, arch: MlpArchitecture, params: PolicyParameters) -> "PolicyNetwork":
        net = cls(arch)
        with torch.no_grad():
            for module, w, b in zip(net.linear_layers(), params.weights, params.biases):
                module.weight.copy_(torch.from_numpy(w))
                module.bias.copy_(torch.from_numpy(b))
        return net


def init_parameters(arch: MlpArchitecture, seed: int) -> PolicyParameters:
    """Initial parameters for a seed, identical to what training starts from."""
    net = PolicyNetwork(arch, torch.Generator().manual_seed(seed))
    return net.to_parameters(seed=seed)


@dataclass
class TrainingBatch:
    """Tensors one loss evaluation needs. Robust batches carry an M axis on gains and omega."""

    features: torch.Tensor  # (N, in)
    gains: torch.Tensor  # (N, K, K) or (N, M, K, K)
    omega: torch.Tensor  # (N, K) or (N, M, K)
    robust: bool


def prepare_batch(
    batch: StateBatch,
    spec: UtilitySpec,
    model: ErrorModel,
    rng: np.random.Generator,
) -> TrainingBatch:
    """Regular experts see the estimated parameters, robust ones M realizations around them."""
    features = build_features(batch, spec.domain)
    if spec.robust:
        h, omega = sample_realizations(batch.h_est, batch.omega_est, model, rng)
        gains = effective_gains(h, batch.beamformer[:, None, :, :])
    else:
        gains = effective_gains(batch.h_est, batch.beamformer)
        omega = batch.omega_est
    return TrainingBatch(
        features=torch.from_numpy(np.ascontiguousarray(features)),
        gains=torch.from_numpy(np.ascontiguousarray(gains)),
        omega=torch.from_numpy(np.ascontiguousarray(omega, dtype=float)),
        robust=spec.robust,
    )


def utility_tensor(
    spec: UtilitySpec,
    gains: torch.Tensor,
    omega: torch.Tensor,
    p_tx: torch.Tensor,
    f_co: torch.Tensor,
    config: SystemConfig,
) -> torch.Tensor:
    """Torch mirror of the netmodel metrics followed by the utility reduction over users."""
    r_tx = r_co = None
    if spec.domain in ("comm", "joint"):
        K = gains.shape[-1]
        signal = torch.diagonal(gains, dim1=-2, dim2=-1) * p_tx
        cross = gains * (1.0 - torch.eye(K, dtype=gains.dtype))
        interference = (cross * p_tx[..., None, :]).sum(dim=-1)
        sinr = signal / (interference + config.noise_power)
        r_tx = config.bandwidth * torch.log2(1.0 + sinr / config.sinr_gap)
    if spec.domain in ("comp", "joint"):
        r_co = f_co / omega

    if spec.family in ("maxT", "sumT"):
        t = 0.0
        if r_tx is not None:
            t = t + config.d_out / r_tx
        if r_co is not None:
            t = t + config.d_in / r_co
        return t.amax(dim=-1) if spec.family == "maxT" else t.sum(dim=-1)

    r = r_tx if r_co is None else (r_co if r_tx is None else r_tx + r_co)
    if spec.family == "sumR":
        return r.sum(dim=-1)
    if spec.family == "minR":
        return r.amin(dim=-1)
    return torch.log(r).sum(dim=-1)


def quantile_tensor(values: torch.Tensor, gamma: float, tail: str) -> torch.Tensor:
    """Nearest-rank order statistic along the last axis; the gradient flows through the selected sample."""
    rank = nearest_rank(values.shape[-1], gamma, tail)
    ordered, _ = torch.sort(values, dim=-1, stable=True)
    return ordered[..., rank - 1]


def expert_loss(
    net: PolicyNetwork,
    tb: TrainingBatch,
    spec: UtilitySpec,
    config: SystemConfig,
    model: ErrorModel,
) -> torch.Tensor:
    """Mean over states of -utility (maximize) or +utility (minimize), in loss units."""
    z = net(tb.features)
    p_tx, _, f_co = map_tensor(z, spec.domain, config)
    if tb.robust:
        p_tx, f_co = p_tx[:, None, :], f_co[:, None, :]
    u = utility_tensor(spec, tb.gains, tb.omega, p_tx, f_co, config)
    if tb.robust:
        gamma = spec.gamma if spec.gamma is not None else config.gamma
        u = quantile_tensor(u, gamma, model.tail_for(spec.family, spec.sense))

    if spec.family in ("sumR", "minR"):
        u = u * RATE_SCALE
    elif spec.family in ("maxT", "sumT"):
        u = u * DELAY_SCALE
    return -u.mean() if spec.sense == "maximize" else u.mean()


def _make_optimizer(net: PolicyNetwork, train_cfg: TrainConfig) -> torch.optim.Optimizer:
    if train_cfg.optimizer == "sgd":
        return torch.optim.SGD(net.parameters(), lr=train_cfg.learning_rate, momentum=train_cfg.momentum)
    return torch.optim.Adam(net.parameters(), lr=train_cfg.learning_rate)


def train_expert(
    record: ExpertRecord,
    train_cfg: TrainConfig,
    config: SystemConfig,
    rng: np.random.Generator,
) -> PolicyParameters:
    """
    Trains one expert and returns its parameters.

    The loss trace holds the validation loss at initialization and after every
    epoch. The validation set (and, for robust experts, its realizations) is
    drawn once up front. Fully determined by `rng`.
    """
    spec = record.utility_spec
    model = ErrorModel.from_config(config, m_samples=train_cfg.m_samples)
    seed = int(rng.integers(0, 2**31 - 1))
    net = PolicyNetwork(record.architecture, torch.Generator().manual_seed(seed))

    print(f"🚀 Starting: training expert {record.index} {record.name} ({train_cfg.epochs} epochs)")
    start = time.time()

    val_tb = prepare_batch(generate_batch(config, rng, train_cfg.validation_size), spec, model, rng)

    def validation_loss() -> float:
        with torch.no_grad():
            return float(expert_loss(net, val_tb, spec, config, model))

    trace = [validation_loss()]
    optimizer = _make_optimizer(net, train_cfg)
    for epoch in range(train_cfg.epochs):
        for _ in range(train_cfg.minibatches):
            tb = prepare_batch(generate_batch(config, rng, train_cfg.batch_size), spec, model, rng)
            loss = expert_loss(net, tb, spec, config, model)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"{record.name}: non-finite loss {float(loss)} in epoch {epoch + 1}"
                )
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), train_cfg.grad_clip)
            optimizer.step()
        trace.append(validation_loss())
        if not math.isfinite(trace[-1]):
            raise TrainingDivergedError(f"{record.name}: non-finite validation loss after epoch {epoch + 1}")

    elapsed = time.time() - start
    print(f"✅ Finished: training {record.name} in {elapsed:.2f}s (validation loss {trace[0]:.4f} -> {trace[-1]:.4f})")
    return net.to_parameters(seed=seed, epochs=train_cfg.epochs, loss_trace=trace)


def train_experts(
    records: Iterable[ExpertRecord],
    train_cfg: TrainConfig,
    config: SystemConfig,
    seed: int,
    workers: int = 1,
) -> Dict[str, PolicyParameters]:
    """
    Trains several experts, each from its own generator derived from (seed, index).

    Results do not depend on the worker count.
    """
    records = list(records)

    def job(record: ExpertRecord) -> PolicyParameters:
        return train_expert(record, train_cfg, config, derive_rng(seed, record.index))

    if workers <= 1:
        results = [job(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, records))
    for record, params in zip(records, results):
        record.parameters = params
    return {r.name: p for r, p in zip(records, results)}
