import os
import sys

import numpy as np
import pytest
import torch

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.netmodel import PerUserMetrics, SystemConfig, derive_rng, effective_gains, generate_batch, metrics_from_arrays
from src.objectives import (
    DOMAINS,
    FAMILIES,
    ConstraintTag,
    UtilitySpec,
    all_specs,
    constraint_tags,
    evaluate_utility,
    expand_tags,
    utility_formula,
    variables_for,
)
from src.training import utility_tensor


def make_metrics(r_tx, r_co):
    r_tx, r_co = np.asarray(r_tx, dtype=float), np.asarray(r_co, dtype=float)
    with np.errstate(divide="ignore"):
        t_tx = np.where(r_tx > 0, 2.5e4 / np.where(r_tx > 0, r_tx, 1), np.inf)
        t_co = np.where(r_co > 0, 5e4 / np.where(r_co > 0, r_co, 1), np.inf)
    return PerUserMetrics(
        sinr=np.zeros_like(r_tx),
        r_tx=r_tx,
        r_co=r_co,
        r_joint=r_tx + r_co,
        t_tx=t_tx,
        t_co=t_co,
        t_joint=t_tx + t_co,
        p_co_required=np.zeros(r_tx.shape[:-1]),
    )


@pytest.mark.parametrize("index, name", [
    (1, "Comm_SumR_Reg"),
    (2, "Comm_SumR_Rob"),
    (6, "JCC_SumR_Rob"),
    (10, "Comp_MinR_Rob"),
    (12, "JCC_MinR_Rob"),
    (19, "Comm_MaxT_Reg"),
    (21, "Comp_MaxT_Reg"),
    (22, "Comp_MaxT_Rob"),
    (24, "JCC_MaxT_Rob"),
    (30, "JCC_SumT_Rob"),
])
def test_names_and_indices(index, name):
    """
    Test 1: Expert names and 1-based indices convert both ways.
    """
    print(f"\n🔹 Test: Expert {index} = {name}")
    spec = UtilitySpec.from_index(index)
    assert spec.name == name
    assert UtilitySpec.from_name(name).index == index


def test_all_specs_in_table_order():
    """
    Test 2: 30 distinct experts, indices 1..30 in order.
    """
    print("\n🔹 Test: Registry Order")
    specs = all_specs()
    assert [s.index for s in specs] == list(range(1, 31))
    assert len({s.name for s in specs}) == 30
    assert sum(s.robust for s in specs) == 15


@pytest.mark.parametrize("bad", ["Comm_SumR", "Net_SumR_Reg", "Comm_AvgR_Reg", "Comm_SumR_Robust"])
def test_unknown_names(bad):
    """
    Test 3: Malformed names are rejected.
    """
    print(f"\n🔹 Test: Bad Name {bad}")
    with pytest.raises(KeyError):
        UtilitySpec.from_name(bad)


def test_metric_keys():
    """
    Test 4: Metric keys round-trip and name the benchmark columns.
    """
    print("\n🔹 Test: Metric Keys")
    spec = UtilitySpec.from_metric_key("maxT_joint_rob")
    assert spec.name == "JCC_MaxT_Rob" and spec.metric_key == "maxT_joint_rob"
    assert UtilitySpec.from_metric_key("sumR_comm").name == "Comm_SumR_Reg"
    assert spec.sense == "minimize" and spec.metric_class == "delay"
    assert not spec.nominal().robust


def test_evaluate_rate_utilities():
    """
    Test 5: Sum, min and log-sum over the user axis on the domain's rate column.
    """
    print("\n🔹 Test: Rate Utilities")
    m = make_metrics([1e6, 2e6, 3e6, 4e6], [1e5, 1e5, 1e5, 1e5])
    assert evaluate_utility(UtilitySpec(family="sumR", domain="comm"), m) == pytest.approx(1e7)
    assert evaluate_utility(UtilitySpec(family="minR", domain="comp"), m) == pytest.approx(1e5)
    assert evaluate_utility(UtilitySpec(family="sumR", domain="joint"), m) == pytest.approx(1.04e7)
    expected_log = np.sum(np.log([1e6, 2e6, 3e6, 4e6]))
    assert evaluate_utility(UtilitySpec(family="logR", domain="comm"), m) == pytest.approx(expected_log)


def test_evaluate_delay_utilities():
    """
    Test 6: Max and sum of the domain's delay column; the joint delay adds both stages.
    """
    print("\n🔹 Test: Delay Utilities")
    m = make_metrics([2.5e6, 1.25e6, 2.5e6, 2.5e6], [5e6, 5e6, 2.5e6, 5e6])
    assert evaluate_utility(UtilitySpec(family="maxT", domain="comm"), m) == pytest.approx(0.02)
    assert evaluate_utility(UtilitySpec(family="sumT", domain="comp"), m) == pytest.approx(0.05)
    assert evaluate_utility(UtilitySpec(family="maxT", domain="joint"), m) == pytest.approx(0.03)


def test_zero_rate_edge_cases():
    """
    Test 7: A zero rate gives -inf log-rate and +inf delay, without warnings escaping.
    """
    print("\n🔹 Test: Zero Rates")
    m = make_metrics([0.0, 1e6, 1e6, 1e6], [1e5, 1e5, 1e5, 1e5])
    assert evaluate_utility(UtilitySpec(family="logR", domain="comm"), m) == -np.inf
    assert evaluate_utility(UtilitySpec(family="maxT", domain="comm"), m) == np.inf
    assert evaluate_utility(UtilitySpec(family="minR", domain="comm"), m) == 0.0


def test_batched_evaluation_keeps_leading_axes():
    """
    Test 8: Leading axes survive the reduction.
    """
    print("\n🔹 Test: Batched Evaluation")
    r = np.full((3, 7, 4), 1e6)
    m = make_metrics(r, r)
    value = evaluate_utility(UtilitySpec(family="sumR", domain="joint"), m)
    assert value.shape == (3, 7)
    np.testing.assert_allclose(value, 8e6)


@pytest.mark.parametrize("name, tags", [
    ("Comm_SumR_Reg", {"D_comm", "P_comm"}),
    ("Comp_LogR_Rob", {"D_comp", "P_comp", "R_comp"}),
    ("JCC_MaxT_Reg", {"D_joint", "P_joint", "T_joint"}),
    ("JCC_SumT_Rob", {"D_joint", "P_joint", "T_joint", "R_joint"}),
])
def test_constraint_tags(name, tags):
    """
    Test 9: Constraint sets per expert; delay experts add T, robust experts add R.
    """
    print(f"\n🔹 Test: Constraints of {name}")
    spec = UtilitySpec.from_name(name)
    assert {t.value for t in constraint_tags(spec)} == tags


def test_joint_tags_imply_single_domain_tags():
    """
    Test 10: Expanding a joint set adds the comm and comp definitions.
    """
    print("\n🔹 Test: Tag Expansion")
    expanded = expand_tags(frozenset({ConstraintTag.D_JOINT, ConstraintTag.P_JOINT}))
    assert ConstraintTag.D_COMM in expanded and ConstraintTag.P_COMP in expanded
    assert ConstraintTag.T_COMM not in expanded


def test_variables_and_formula():
    """
    Test 11: Decision variables per domain and the readable utility text.
    """
    print("\n🔹 Test: Variables and Formula")
    assert variables_for(UtilitySpec.from_name("Comm_SumR_Reg")) == ("comm", ("p_tx",))
    assert variables_for(UtilitySpec.from_name("JCC_MinR_Rob")) == ("joint", ("p_tx", "p_co", "f_co"))
    assert utility_formula(UtilitySpec.from_name("Comp_MaxT_Reg")) == "max_k(t_co)"
    assert utility_formula(UtilitySpec.from_name("JCC_SumR_Rob")) == "quantile_gamma[sum_k(r_tx + r_co)]"


def test_sense_follows_family():
    """
    Test 12: Rate families are maximized and delay families minimized, in every domain.
    """
    print("\n🔹 Test: Optimization Sense")
    for spec in all_specs():
        expected = "maximize" if spec.family in ("sumR", "minR", "logR") else "minimize"
        assert spec.sense == expected, spec.name
        assert spec.metric_class == ("rate" if expected == "maximize" else "delay")


@pytest.mark.parametrize("domain", ["comm", "comp", "joint"])
def test_log_rate_scaling_shifts_utility(domain):
    """
    Test 13: Scaling every rate by c shifts the log-rate utility by K log(c) and scales the sum-rate by c.
    """
    print(f"\n🔹 Test: Log-Rate Shift ({domain})")
    rng = np.random.default_rng(8)
    r_tx, r_co = rng.uniform(1e5, 1e7, size=(5, 4)), rng.uniform(1e5, 1e7, size=(5, 4))
    c = 3.7
    base, scaled = make_metrics(r_tx, r_co), make_metrics(c * r_tx, c * r_co)
    log_spec = UtilitySpec(family="logR", domain=domain)
    np.testing.assert_allclose(
        evaluate_utility(log_spec, scaled), evaluate_utility(log_spec, base) + 4 * np.log(c), rtol=1e-12
    )
    sum_spec = UtilitySpec(family="sumR", domain=domain)
    np.testing.assert_allclose(evaluate_utility(sum_spec, scaled), c * evaluate_utility(sum_spec, base), rtol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("domain", DOMAINS)
def test_training_utility_matches_evaluate_utility(family, domain):
    """
    Test 14: The torch utility used for training equals evaluate_utility on the same metrics.
    """
    print(f"\n🔹 Test: Training Utility Parity ({family}, {domain})")
    config = SystemConfig()
    K = config.num_users
    batch = generate_batch(config, derive_rng(21), 8)
    rng = np.random.default_rng(22)
    gains = effective_gains(batch.h_est, batch.beamformer)
    p_tx = rng.uniform(0.1, 1.0, size=(8, K)) * config.p_max_tx / K
    f_co = rng.uniform(0.1, 1.0, size=(8, K)) * config.f_max / K
    spec = UtilitySpec(family=family, domain=domain)

    expected = evaluate_utility(spec, metrics_from_arrays(gains, batch.omega_est, p_tx, f_co, domain, config))
    value = utility_tensor(
        spec,
        torch.from_numpy(gains),
        torch.from_numpy(batch.omega_est),
        torch.from_numpy(p_tx),
        torch.from_numpy(f_co),
        config,
    )
    assert value.shape == (8,)
    np.testing.assert_allclose(value.numpy(), expected, rtol=1e-10)
