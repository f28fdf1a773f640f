"""
The five utility families over the comm/comp/joint domains.

Inference, the gate pipeline and the benchmarks go through `evaluate_utility`.
Training needs gradients and uses the torch mirror `utility_tensor` in
src/training.py, which is tested against this function for every family and
domain.
"""
from __future__ import annotations

from enum import Enum
from typing import Dict, FrozenSet, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.netmodel import ACTIVE_FIELDS, PerUserMetrics

Family = Literal["sumR", "minR", "logR", "maxT", "sumT"]
Domain = Literal["comm", "comp", "joint"]

FAMILIES: Tuple[str, ...] = ("sumR", "minR", "logR", "maxT", "sumT")
DOMAINS: Tuple[str, ...] = ("comm", "comp", "joint")
RATE_FAMILIES = frozenset({"sumR", "minR", "logR"})
DELAY_FAMILIES = frozenset({"maxT", "sumT"})

DOMAIN_PREFIX = {"comm": "Comm", "comp": "Comp", "joint": "JCC"}
FAMILY_LABEL = {"sumR": "SumR", "minR": "MinR", "logR": "LogR", "maxT": "MaxT", "sumT": "SumT"}

_RATE_FIELD = {"comm": "r_tx", "comp": "r_co", "joint": "r_joint"}
_DELAY_FIELD = {"comm": "t_tx", "comp": "t_co", "joint": "t_joint"}


class ConstraintTag(str, Enum):
    D_COMM = "D_comm"
    D_COMP = "D_comp"
    D_JOINT = "D_joint"
    P_COMM = "P_comm"
    P_COMP = "P_comp"
    P_JOINT = "P_joint"
    T_COMM = "T_comm"
    T_COMP = "T_comp"
    T_JOINT = "T_joint"
    R_COMM = "R_comm"
    R_COMP = "R_comp"
    R_JOINT = "R_joint"


# A joint set carries the definitions of both single-domain sets
IMPLIED_TAGS: Dict[ConstraintTag, FrozenSet[ConstraintTag]] = {
    ConstraintTag.D_JOINT: frozenset({ConstraintTag.D_COMM, ConstraintTag.D_COMP}),
    ConstraintTag.P_JOINT: frozenset({ConstraintTag.P_COMM, ConstraintTag.P_COMP}),
    ConstraintTag.T_JOINT: frozenset({ConstraintTag.T_COMM, ConstraintTag.T_COMP}),
    ConstraintTag.R_JOINT: frozenset({ConstraintTag.R_COMM, ConstraintTag.R_COMP}),
}


class UtilitySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Family
    domain: Domain
    robust: bool = False
    gamma: Optional[float] = Field(None, gt=0, lt=1)

    @property
    def sense(self) -> str:
        return "maximize" if self.family in RATE_FAMILIES else "minimize"

    @property
    def metric_class(self) -> str:
        return "rate" if self.family in RATE_FAMILIES else "delay"

    @property
    def name(self) -> str:
        """Registry name, e.g. JCC_MaxT_Rob."""
        suffix = "Rob" if self.robust else "Reg"
        return f"{DOMAIN_PREFIX[self.domain]}_{FAMILY_LABEL[self.family]}_{suffix}"

    @property
    def index(self) -> int:
        """1-based registry row."""
        return 6 * FAMILIES.index(self.family) + 2 * DOMAINS.index(self.domain) + int(self.robust) + 1

    @property
    def metric_key(self) -> str:
        """Column label used by benchmarks and exports, e.g. maxT_joint or sumR_joint_rob."""
        return f"{self.family}_{self.domain}" + ("_rob" if self.robust else "")

    def nominal(self) -> "UtilitySpec":
        return self.model_copy(update={"robust": False})

    @classmethod
    def from_name(cls, name: str) -> "UtilitySpec":
        try:
            prefix, label, suffix = name.split("_")
            domain = next(d for d, p in DOMAIN_PREFIX.items() if p == prefix)
            family = next(f for f, l in FAMILY_LABEL.items() if l == label)
        except (ValueError, StopIteration) as e:
            raise KeyError(f"Not an expert name: '{name}'") from e
        if suffix not in ("Reg", "Rob"):
            raise KeyError(f"Not an expert name: '{name}'")
        return cls(family=family, domain=domain, robust=suffix == "Rob")

    @classmethod
    def from_index(cls, index: int) -> "UtilitySpec":
        if not 1 <= index <= 30:
            raise KeyError(f"Expert index out of range: {index}")
        family_idx, rest = divmod(index - 1, 6)
        domain_idx, robust = divmod(rest, 2)
        return cls(family=FAMILIES[family_idx], domain=DOMAINS[domain_idx], robust=bool(robust))

    @classmethod
    def from_metric_key(cls, key: str) -> "UtilitySpec":
        parts = key.split("_")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "rob"):
            raise KeyError(f"Not a metric key: '{key}'")
        try:
            return cls(family=parts[0], domain=parts[1], robust=len(parts) == 3)
        except ValueError as e:
            raise KeyError(f"Not a metric key: '{key}'") from e


def all_specs() -> List[UtilitySpec]:
    """The 30 experts in registry order."""
    return [UtilitySpec.from_index(i) for i in range(1, 31)]


def evaluate_utility(spec: UtilitySpec, metrics: PerUserMetrics):
    """
    Reduces per-user metrics over the user (last) axis.

    sumR/minR/logR read the domain's rate column, maxT/sumT its delay column.
    logR with a zero rate returns -inf; delays of zero-rate users are +inf.
    Results keep any leading batch axes.
    """
    if spec.family in RATE_FAMILIES:
        r = np.asarray(getattr(metrics, _RATE_FIELD[spec.domain]), dtype=float)
        if spec.family == "sumR":
            value = np.sum(r, axis=-1)
        elif spec.family == "minR":
            value = np.min(r, axis=-1)
        else:
            with np.errstate(divide="ignore"):
                value = np.sum(np.log(r), axis=-1)
    else:
        t = np.asarray(getattr(metrics, _DELAY_FIELD[spec.domain]), dtype=float)
        value = np.max(t, axis=-1) if spec.family == "maxT" else np.sum(t, axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def constraint_tags(spec: UtilitySpec) -> FrozenSet[ConstraintTag]:
    """
    Constraint set of a registry row.

    Joint experts always carry the joint definition and power sets; the table's
    comp-only entries for the regular joint rows cannot constrain p_tx.
    """
    tags = {ConstraintTag(f"D_{spec.domain}"), ConstraintTag(f"P_{spec.domain}")}
    if spec.family in DELAY_FAMILIES:
        tags.add(ConstraintTag(f"T_{spec.domain}"))
    if spec.robust:
        tags.add(ConstraintTag(f"R_{spec.domain}"))
    return frozenset(tags)


def expand_tags(tags: FrozenSet[ConstraintTag]) -> FrozenSet[ConstraintTag]:
    expanded = set(tags)
    for tag in tags:
        expanded |= IMPLIED_TAGS.get(tag, frozenset())
    return frozenset(expanded)


def variables_for(spec: UtilitySpec) -> Tuple[str, Tuple[str, ...]]:
    """Allocation kind and the fields the expert decides."""
    return spec.domain, ACTIVE_FIELDS[spec.domain]


def utility_formula(spec: UtilitySpec) -> str:
    """Human-readable utility column of the registry table."""
    sym = {"comm": "r_tx", "comp": "r_co", "joint": "r_tx + r_co"}[spec.domain]
    tsym = {"comm": "t_tx", "comp": "t_co", "joint": "t_tx + t_co"}[spec.domain]
    nominal = {
        "sumR": f"sum_k({sym})",
        "minR": f"min_k({sym})",
        "logR": f"sum_k(log({sym}))",
        "maxT": f"max_k({tsym})",
        "sumT": f"sum_k({tsym})",
    }[spec.family]
    return f"quantile_gamma[{nominal}]" if spec.robust else nominal
