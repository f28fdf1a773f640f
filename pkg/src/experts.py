"""
Expert template and the 30-expert registry.

An expert is a dense ReLU network from state features to logits, followed by a
mapping layer that turns logits into an allocation that meets its budgets by
construction. Training lives in src/training.py.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import MODEL_FORMAT, MODEL_FORMAT_VERSION
from src.errors import ExportError, ModelFileError, ShapeMismatchError, UntrainedExpertError
from src.netmodel import (
    Allocation,
    NetworkState,
    StateBatch,
    SystemConfig,
    effective_channels,
)
from src.objectives import (
    UtilitySpec,
    all_specs,
    constraint_tags,
    utility_formula,
    variables_for,
)

# Workload features are divided by the Gamma(2, 200) mean
OMEGA_SCALE = 400.0

FULL_SCALE: Dict[str, Any] = {
    "hidden_layers": 10,
    "hidden_width": 400,
    "epochs": 500,
    "minibatches": 50,
    "batch_size": 1000,
    "validation_size": 2000,
    "test_size": 4000,
}

ROLE = {
    "sumR": "sum rate max.",
    "minR": "min rate max.",
    "logR": "log rate max.",
    "maxT": "max delay min.",
    "sumT": "sum delay min.",
}
IMPACT = {
    "sumR": "Throughput",
    "minR": "Fairness",
    "logR": "Balanced",
    "maxT": "Responsiveness",
    "sumT": "Latency",
}
EMPHASIS = {
    "sumR": "throughput",
    "minR": "fairness",
    "logR": "balanced",
    "maxT": "fairness",
    "sumT": "throughput",
}


class TrainConfig(BaseModel):
    """
    Training sizes and optimizer settings.

    Defaults are the desk scale. `desk_scale=False` fills every size that is not
    given explicitly from the full-scale setup (10x400 network, 500 epochs of 50
    minibatches of 1000 states, 2000 validation and 4000 test states).
    """

    model_config = ConfigDict(extra="forbid")

    desk_scale: bool = True
    epochs: int = Field(50, ge=0)
    minibatches: int = Field(20, ge=1)
    batch_size: int = Field(256, ge=1)
    validation_size: int = Field(512, ge=1)
    test_size: int = Field(1024, ge=1)
    hidden_layers: int = Field(3, ge=1)
    hidden_width: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    momentum: float = Field(0.0, ge=0, lt=1)
    grad_clip: float = Field(10.0, gt=0)
    m_samples: int = Field(200, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _fill_full_scale(cls, data):
        if isinstance(data, dict) and data.get("desk_scale") is False:
            data = {**FULL_SCALE, **data}
        return data

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(desk_scale=False, **overrides)


class MlpArchitecture(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(ge=1)
    hidden_layers: int = Field(ge=1)
    hidden_width: int = Field(ge=1)
    output_dim: int = Field(ge=1)
    activation: Literal["relu"] = "relu"

    @classmethod
    def for_domain(cls, domain: str, num_users: int, hidden_layers: int = 3, hidden_width: int = 64) -> "MlpArchitecture":
        K = num_users
        dims = {"comm": (2 * K * K, K), "comp": (K, K + 1), "joint": (2 * K * K + K, 2 * K + 1)}
        input_dim, output_dim = dims[domain]
        return cls(input_dim=input_dim, hidden_layers=hidden_layers, hidden_width=hidden_width, output_dim=output_dim)

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of every dense layer."""
        widths = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))


def param_count(arch: MlpArchitecture) -> int:
    h, w = arch.hidden_layers, arch.hidden_width
    return arch.input_dim * w + (h - 1) * w * w + arch.output_dim * w + h * w + arch.output_dim


@dataclass
class PolicyParameters:
    """Layer weights (out x in, torch convention) and biases plus training metadata."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    seed: Optional[int] = None
    epochs: int = 0
    loss_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeMismatchError("Every layer needs one weight matrix and one bias vector")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatchError(f"Inconsistent layer shapes {w.shape} / {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("Policy parameters must be finite")

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.weights[-1].shape[0])

    def matches(self, arch: MlpArchitecture) -> bool:
        return [tuple(w.shape) for w in self.weights] == [(o, i) for i, o in arch.layer_dims]


@dataclass
class ExpertRecord:
    index: int
    name: str
    role: str
    impact: str
    tags: Dict[str, Any]
    utility_spec: UtilitySpec
    architecture: MlpArchitecture
    num_users: int
    parameters: Optional[PolicyParameters] = None

    @property
    def domain(self) -> str:
        return self.utility_spec.domain

    @property
    def trained(self) -> bool:
        return self.parameters is not None

    @property
    def description(self) -> str:
        return describe_expert(self.utility_spec)


# --- Registry ---

def role_text(spec: UtilitySpec) -> str:
    if spec.domain == "joint":
        text = ROLE[spec.family]
        return text[0].upper() + text[1:]
    return f"{'Comm.' if spec.domain == 'comm' else 'Comp.'} {ROLE[spec.family]}"


def expert_tags(spec: UtilitySpec) -> Dict[str, Any]:
    return {
        "robust": spec.robust,
        "domain": spec.domain,
        "metric": spec.metric_class,
        "emphasis": EMPHASIS[spec.family],
    }


_DOMAIN_WORDS = {
    "comm": ("communication", "Communication"),
    "comp": ("computing", "Computing"),
    "joint": ("joint communication and computing", "Joint communication and computing"),
}


def describe_expert(spec: UtilitySpec) -> str:
    """One-paragraph card text for the gate prompt."""
    word, title = _DOMAIN_WORDS[spec.domain]
    objective = {
        "sumR": f"maximization of sum-{word.replace(' ', '-')}-rates of all users in network",
        "minR": f"maximization of the minimum {word} rate among all users in network",
        "logR": f"maximization of the sum of logarithmic {word} rates of all users in network",
        "maxT": f"minimization of the maximum (worst-case) {word} delay among all users in network",
        "sumT": f"minimization of the sum of {word} delays of all users in network",
    }[spec.family]
    focus = {
        "sumR": "throughput focused",
        "minR": "fairness focused, every user gets a guaranteed rate",
        "logR": "balanced between throughput and fairness",
        "maxT": "responsiveness focused, fair delay for every user",
        "sumT": "total latency focused",
    }[spec.family]
    if spec.robust:
        condition = {
            "comm": "impaired conditions, robust against imperfect channel state information with estimation errors",
            "comp": "impaired conditions, robust against estimation errors of the computing requirements",
            "joint": "impaired conditions, robust against channel estimation errors and estimation errors "
            "of the computing requirements",
        }[spec.domain]
    else:
        condition = {
            "comm": "regular conditions, with accurate channel estimations and perfectly known channel state information",
            "comp": "regular conditions, with accurately known computing requirements",
            "joint": "regular conditions, with accurate channel estimations, perfectly known channel state "
            "information and accurately known computing requirements",
        }[spec.domain]
    return f"Expert for {objective}. {title} {focus}. Optimized solution accounts for {condition}."


def build_record(spec: UtilitySpec, config: SystemConfig, train_cfg: Optional[TrainConfig] = None) -> ExpertRecord:
    train_cfg = train_cfg or TrainConfig()
    return ExpertRecord(
        index=spec.index,
        name=spec.name,
        role=role_text(spec),
        impact=IMPACT[spec.family],
        tags=expert_tags(spec),
        utility_spec=spec,
        architecture=MlpArchitecture.for_domain(
            spec.domain, config.num_users, train_cfg.hidden_layers, train_cfg.hidden_width
        ),
        num_users=config.num_users,
    )


def registry_build(config: SystemConfig, train_cfg: Optional[TrainConfig] = None) -> List[ExpertRecord]:
    """The 30 untrained experts in registry order."""
    return [build_record(spec, config, train_cfg) for spec in all_specs()]


def registry_rows(records: Iterable[ExpertRecord]) -> List[Dict[str, Any]]:
    """Serializable view of the registry, compared against the committed golden file."""
    rows = []
    for record in records:
        spec = record.utility_spec
        kind, fields = variables_for(spec)
        rows.append(
            {
                "index": record.index,
                "name": record.name,
                "role": record.role,
                "impact": record.impact,
                "kind": kind,
                "variables": list(fields),
                "utility": utility_formula(spec),
                "constraints": sorted(tag.value for tag in constraint_tags(spec)),
                "robust": spec.robust,
                "tags": record.tags,
            }
        )
    return rows


def records_by_name(records: Iterable[ExpertRecord]) -> Dict[str, ExpertRecord]:
    return {r.name: r for r in records}


# --- Features, forward pass, mapping ---

def features_from_arrays(h_est: np.ndarray, beamformer: np.ndarray, omega_est: np.ndarray, domain: str) -> np.ndarray:
    """
    comm: real parts of the K x K effective estimated channels (row-major over
    (k, j)) followed by their imaginary parts. comp: workloads / 400.
    joint: comm features then comp features.
    """
    parts = []
    if domain in ("comm", "joint"):
        eff = effective_channels(h_est, beamformer)
        flat = eff.reshape(eff.shape[:-2] + (-1,))
        parts += [flat.real, flat.imag]
    if domain in ("comp", "joint"):
        parts.append(np.asarray(omega_est, dtype=float) / OMEGA_SCALE)
    return np.concatenate(parts, axis=-1)


def build_features(state: Union[NetworkState, StateBatch], domain: str) -> np.ndarray:
    return features_from_arrays(state.h_est, state.beamformer, state.omega_est, domain)


def forward(params: PolicyParameters, features: np.ndarray) -> np.ndarray:
    """Dense pass with ReLU hidden layers and a linear output; accepts a leading batch axis."""
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != params.input_dim:
        raise ShapeMismatchError(f"Expected {params.input_dim} features, got {x.shape[-1]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w.T + b
        if i < last:
            x = np.maximum(x, 0.0)
    return x


def output_dim(domain: str, num_users: int) -> int:
    return {"comm": num_users, "comp": num_users + 1, "joint": 2 * num_users + 1}[domain]


def _frequency_total(p_co: torch.Tensor, config: SystemConfig) -> torch.Tensor:
    # F_pow = (p_co / tau)^(1/mu), capped at the CPU limit
    f_pow = (p_co / config.tau) ** (1.0 / config.mu)
    return torch.clamp(f_pow, max=config.f_max)


def map_tensor(z: torch.Tensor, domain: str, config: SystemConfig) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable mapping layer: logits (..., out) -> (p_tx, p_co, f_co)."""
    K = config.num_users
    expected = output_dim(domain, K)
    if z.shape[-1] != expected:
        raise ShapeMismatchError(f"{domain} mapping expects {expected} logits, got {z.shape[-1]}")
    batch = z.shape[:-1]
    zeros_k = torch.zeros(batch + (K,), dtype=z.dtype)

    if domain == "comm":
        p_tx = config.p_max_tx * torch.softmax(z, dim=-1)
        return p_tx, torch.zeros(batch, dtype=z.dtype), zeros_k

    if domain == "comp":
        p_co = config.p_max_co * torch.sigmoid(z[..., 0])
        f_co = _frequency_total(p_co, config)[..., None] * torch.softmax(z[..., 1:], dim=-1)
        return zeros_k, p_co, f_co

    split = config.p_max * torch.softmax(z[..., : K + 1], dim=-1)
    p_tx, p_co = split[..., :K], split[..., K]
    f_co = _frequency_total(p_co, config)[..., None] * torch.softmax(z[..., K + 1 :], dim=-1)
    return p_tx, p_co, f_co


def map_outputs(z: np.ndarray, domain: str, config: SystemConfig) -> Allocation:
    with torch.no_grad():
        p_tx, p_co, f_co = map_tensor(torch.as_tensor(np.asarray(z, dtype=float)), domain, config)
    return Allocation(p_tx=p_tx.numpy(), p_co=p_co.numpy(), f_co=f_co.numpy(), kind=domain)


def uniform_allocation(domain: str, config: SystemConfig, batch: Tuple[int, ...] = ()) -> Allocation:
    """Zero-logit output of the mapping layer: equal shares within each budget."""
    return map_outputs(np.zeros(batch + (output_dim(domain, config.num_users),)), domain, config)


def infer(record: ExpertRecord, state: Union[NetworkState, StateBatch], config: SystemConfig) -> Allocation:
    """Allocation of a trained expert; a StateBatch gives a batched allocation."""
    if record.parameters is None:
        raise UntrainedExpertError(f"Expert {record.name} has no trained parameters")
    logits = forward(record.parameters, build_features(state, record.domain))
    return map_outputs(logits, record.domain, config)


# --- Persistence ---

def _encode(array: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(array, dtype="<f8").tobytes()).decode("ascii")


def _decode(payload: str, shape: Sequence[int]) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype="<f8").reshape(tuple(shape)).astype(float)


def _checksum(weights: List[np.ndarray], biases: List[np.ndarray]) -> str:
    digest = hashlib.sha256()
    for w, b in zip(weights, biases):
        digest.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return digest.hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise ExportError(f"Could not write model file {path}: {e}") from e


def expert_filename(record: ExpertRecord) -> str:
    return f"{record.index:02d}_{record.name}.json"


def save_expert(record: ExpertRecord, path: Union[str, Path]) -> Path:
    """Writes a deterministic JSON model file (parameters as little-endian float64, base64)."""
    if record.parameters is None:
        raise UntrainedExpertError(f"Expert {record.name} has no parameters to save")
    params = record.parameters
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "index": record.index,
        "name": record.name,
        "num_users": record.num_users,
        "architecture": record.architecture.model_dump(),
        "utility_spec": record.utility_spec.model_dump(),
        "training": {"seed": params.seed, "epochs": params.epochs, "loss_trace": list(params.loss_trace)},
        "parameters": {
            "dtype": "<f8",
            "layers": [
                {"weight_shape": list(w.shape), "weight": _encode(w), "bias": _encode(b)}
                for w, b in zip(params.weights, params.biases)
            ],
            "sha256": _checksum(params.weights, params.biases),
        },
    }
    path = Path(path)
    _write_atomic(path, json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path


def load_expert(path: Union[str, Path], config: SystemConfig) -> ExpertRecord:
    """Reads a model file; any inconsistency raises ModelFileError and nothing is returned."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError as e:
        raise ModelFileError(f"Model file not found: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ModelFileError(f"Model file {path} is corrupt or truncated: {e}") from e

    try:
        if document.get("format") != MODEL_FORMAT or document.get("version") != MODEL_FORMAT_VERSION:
            raise ModelFileError(
                f"{path}: unsupported model format {document.get('format')} v{document.get('version')}"
            )
        if document["num_users"] != config.num_users:
            raise ModelFileError(
                f"{path}: model was trained for K={document['num_users']}, config has K={config.num_users}"
            )
        spec = UtilitySpec.model_validate(document["utility_spec"])
        architecture = MlpArchitecture.model_validate(document["architecture"])
        if spec.name != document["name"] or spec.index != document["index"]:
            raise ModelFileError(f"{path}: name/index do not match the utility spec")

        layers = document["parameters"]["layers"]
        weights = [_decode(layer["weight"], layer["weight_shape"]) for layer in layers]
        biases = [_decode(layer["bias"], (layer["weight_shape"][0],)) for layer in layers]
        if _checksum(weights, biases) != document["parameters"]["sha256"]:
            raise ModelFileError(f"{path}: parameter checksum mismatch")
        training = document["training"]
        params = PolicyParameters(
            weights=weights,
            biases=biases,
            seed=training.get("seed"),
            epochs=training.get("epochs", 0),
            loss_trace=list(training.get("loss_trace", [])),
        )
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"{path}: malformed model file: {e}") from e

    if not params.matches(architecture):
        raise ModelFileError(f"{path}: parameter shapes do not match the architecture")

    record = build_record(spec, config)
    record.architecture = architecture
    record.parameters = params
    return record


REGISTRY_MANIFEST = "registry.json"


def save_registry(records: Iterable[ExpertRecord], model_dir: Union[str, Path]) -> Path:
    """Saves every trained record and a manifest mapping names to files."""
    model_dir = Path(model_dir)
    manifest = {}
    for record in records:
        if record.parameters is None:
            continue
        filename = expert_filename(record)
        save_expert(record, model_dir / filename)
        manifest[record.name] = filename
    manifest_path = model_dir / REGISTRY_MANIFEST
    existing = {}
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as f:
            existing = json.load(f).get("experts", {})
    existing.update(manifest)
    document = {"format": MODEL_FORMAT, "version": MODEL_FORMAT_VERSION, "experts": dict(sorted(existing.items()))}
    _write_atomic(manifest_path, json.dumps(document, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_registry(
    model_dir: Union[str, Path],
    config: SystemConfig,
    names: Optional[Iterable[str]] = None,
    train_cfg: Optional[TrainConfig] = None,
) -> List[ExpertRecord]:
    """
    Registry with trained parameters loaded where a model file exists.

    Missing models leave the record untrained; a listed but unreadable file raises.
    """
    records = registry_build(config, train_cfg)
    manifest_path = Path(model_dir) / REGISTRY_MANIFEST
    if not manifest_path.exists():
        return records
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)["experts"]
    except (json.JSONDecodeError, KeyError) as e:
        raise ModelFileError(f"Registry manifest {manifest_path} is corrupt: {e}") from e

    wanted = set(names) if names is not None else None
    for i, record in enumerate(records):
        if record.name in manifest and (wanted is None or record.name in wanted):
            records[i] = load_expert(Path(model_dir) / manifest[record.name], config)
    return records
