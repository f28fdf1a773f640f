import json
import os
import sys

import numpy as np
import pytest
import torch

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.config import REGISTRY_GOLDEN_PATH
from src.errors import ExportError, ModelFileError, ShapeMismatchError, UntrainedExpertError
from src.experts import (
    MlpArchitecture,
    PolicyParameters,
    TrainConfig,
    build_features,
    describe_expert,
    expert_filename,
    forward,
    infer,
    load_expert,
    load_registry,
    param_count,
    records_by_name,
    registry_build,
    registry_rows,
    save_expert,
    save_registry,
)
from src.netmodel import SystemConfig, check_feasibility, derive_rng, generate_batch, generate_state
from src.objectives import UtilitySpec
from src.training import PolicyNetwork, _make_optimizer, expert_loss, init_parameters, prepare_batch
from src.uncertainty import ErrorModel


@pytest.fixture
def config():
    return SystemConfig()


@pytest.fixture
def registry(config):
    return registry_build(config)


def with_parameters(record, seed=0):
    record.parameters = init_parameters(record.architecture, seed)
    return record


@pytest.mark.parametrize("dims, expected", [
    ((36, 10, 400, 9), 1_462_009),
    ((32, 10, 400, 4), 1_458_404),
])
def test_param_count_golden(dims, expected):
    """
    Test 1: Parameter counts of the full-scale joint and comm networks.
    """
    print(f"\n🔹 Test: Parameter Count {dims}")
    input_dim, layers, width, output_dim = dims
    arch = MlpArchitecture(input_dim=input_dim, hidden_layers=layers, hidden_width=width, output_dim=output_dim)
    assert param_count(arch) == expected
    net = PolicyNetwork(arch)
    assert sum(p.numel() for p in net.parameters()) == expected


def test_architecture_per_domain(config):
    """
    Test 2: Input and output sizes follow the domain (K = 4).
    """
    print("\n🔹 Test: Architectures")
    assert MlpArchitecture.for_domain("comm", 4).input_dim == 32
    assert MlpArchitecture.for_domain("comp", 4).output_dim == 5
    joint = MlpArchitecture.for_domain("joint", 4, 10, 400)
    assert (joint.input_dim, joint.output_dim) == (36, 9)
    assert joint.layer_dims[0] == (36, 400) and joint.layer_dims[-1] == (400, 9)


def test_registry_matches_golden(registry):
    """
    Test 3: The registry table equals the committed golden file.
    """
    print("\n🔹 Test: Registry Golden")
    with open(REGISTRY_GOLDEN_PATH, "r", encoding="utf-8") as f:
        golden = json.load(f)
    rows = registry_rows(registry)
    assert len(rows) == 30
    for row, expected in zip(rows, golden):
        assert row == expected, f"Row {expected['index']} differs"


def test_registry_cards(registry):
    """
    Test 4: Roles and card text reflect domain, objective and robustness.
    """
    print("\n🔹 Test: Expert Cards")
    by_name = records_by_name(registry)
    assert by_name["Comm_SumR_Reg"].role == "Comm. sum rate max."
    assert by_name["JCC_MaxT_Rob"].role == "Max delay min."
    assert by_name["Comp_MinR_Rob"].impact == "Fairness"

    text = describe_expert(UtilitySpec.from_name("JCC_SumT_Rob"))
    assert text.startswith("Expert for minimization of the sum of joint communication and computing delays")
    assert "robust against channel estimation errors" in text
    assert "regular conditions" in by_name["Comm_SumR_Reg"].description
    assert len({r.description for r in registry}) == 30


def test_full_scale_config():
    """
    Test 5: The full-scale switch fills every unset size.
    """
    print("\n🔹 Test: Training Scales")
    desk = TrainConfig()
    assert (desk.hidden_layers, desk.hidden_width, desk.epochs) == (3, 64, 50)
    full = TrainConfig.full_scale()
    assert (full.hidden_layers, full.hidden_width, full.epochs, full.batch_size) == (10, 400, 500, 1000)
    assert TrainConfig.full_scale(epochs=5).epochs == 5
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")

    assert (desk.optimizer, desk.learning_rate, desk.grad_clip) == ("adam", 1e-3, 10.0)
    net = PolicyNetwork(MlpArchitecture.for_domain("comm", 4, 1, 4), torch.Generator().manual_seed(0))
    assert isinstance(_make_optimizer(net, desk), torch.optim.Adam)
    sgd = _make_optimizer(net, TrainConfig(optimizer="sgd", momentum=0.5))
    assert isinstance(sgd, torch.optim.SGD) and sgd.defaults["momentum"] == 0.5


def test_features(config):
    """
    Test 6: Feature sizes per domain and the workload scaling.
    """
    print("\n🔹 Test: Features")
    batch = generate_batch(config, derive_rng(1), 3)
    assert build_features(batch, "comm").shape == (3, 32)
    comp = build_features(batch, "comp")
    np.testing.assert_allclose(comp, batch.omega_est / 400.0)
    joint = build_features(batch.state(0), "joint")
    assert joint.shape == (36,)
    np.testing.assert_allclose(joint[32:], batch.omega_est[0] / 400.0)


def test_numpy_forward_matches_torch(config):
    """
    Test 7: The numpy inference pass equals the torch network the parameters came from.
    """
    print("\n🔹 Test: Forward Pass")
    arch = MlpArchitecture.for_domain("joint", 4, 2, 8)
    params = init_parameters(arch, seed=3)
    x = np.random.default_rng(0).normal(size=(5, 36))
    net = PolicyNetwork.from_parameters(arch, params)
    with torch.no_grad():
        expected = net(torch.from_numpy(x)).numpy()
    np.testing.assert_allclose(forward(params, x), expected, rtol=1e-12, atol=1e-12)
    with pytest.raises(ShapeMismatchError):
        forward(params, np.zeros((2, 35)))


def test_forward_by_hand():
    """
    Test 7b: A 2-1-1 network gives the hand-worked values; all-zero parameters give zero logits.
    """
    print("\n🔹 Test: Forward By Hand")
    params = PolicyParameters(
        weights=[np.array([[1.0, -2.0]]), np.array([[3.0]])],
        biases=[np.array([0.5]), np.array([-1.0])],
    )
    # hidden 2 - 2 + 0.5 = 0.5, output 3 * 0.5 - 1 = 0.5
    np.testing.assert_allclose(forward(params, np.array([2.0, 1.0])), [0.5])
    # hidden 1 - 4 + 0.5 < 0 is cut to 0, output is the bias
    np.testing.assert_allclose(forward(params, np.array([[2.0, 1.0], [1.0, 2.0]])), [[0.5], [-1.0]])

    arch = MlpArchitecture.for_domain("joint", 4, 2, 8)
    zeros = PolicyParameters(
        weights=[np.zeros((o, i)) for i, o in arch.layer_dims],
        biases=[np.zeros(o) for _, o in arch.layer_dims],
    )
    x = np.random.default_rng(5).normal(size=(3, 36))
    np.testing.assert_array_equal(forward(zeros, x), np.zeros((3, 9)))


def test_init_is_seeded():
    """
    Test 8: Initialization depends only on the seed.
    """
    print("\n🔹 Test: Seeded Init")
    arch = MlpArchitecture.for_domain("comm", 4, 2, 8)
    a, b, c = init_parameters(arch, 1), init_parameters(arch, 1), init_parameters(arch, 2)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.weights[0], c.weights[0])
    bound = 1 / np.sqrt(32)
    assert np.all(np.abs(a.weights[0]) <= bound)


def test_infer_is_feasible(config, registry):
    """
    Test 9: Any expert's output is feasible, for one state and for a batch.
    """
    print("\n🔹 Test: Inference Feasibility")
    state = generate_state(config, derive_rng(2))
    batch = generate_batch(config, derive_rng(3), 64)
    for record in registry:
        with_parameters(record, seed=record.index)
        single = infer(record, state, config)
        assert single.kind == record.domain and single.p_tx.shape == (4,)
        assert check_feasibility(single, config).feasible
        assert check_feasibility(infer(record, batch, config), config).feasible


def test_infer_untrained(config, registry):
    """
    Test 10: An expert without parameters cannot be inferred.
    """
    print("\n🔹 Test: Untrained Expert")
    with pytest.raises(UntrainedExpertError):
        infer(registry[0], generate_state(config, derive_rng(0)), config)


def test_save_and_load_expert(config, registry, tmp_path):
    """
    Test 11: A saved expert loads back bit-exact and infers identically.
    """
    print("\n🔹 Test: Model Files")
    record = with_parameters(registry[23], seed=5)
    record.parameters.loss_trace = [3.0, 2.0, 1.5]
    path = save_expert(record, tmp_path / expert_filename(record))
    assert path.name == "24_JCC_MaxT_Rob.json"

    loaded = load_expert(path, config)
    assert loaded.name == record.name and loaded.index == 24
    for w, v in zip(record.parameters.weights, loaded.parameters.weights):
        np.testing.assert_array_equal(w, v)
    assert loaded.parameters.loss_trace == [3.0, 2.0, 1.5]

    state = generate_state(config, derive_rng(4))
    np.testing.assert_array_equal(infer(record, state, config).f_co, infer(loaded, state, config).f_co)

    # saving twice gives the same bytes
    first = path.read_bytes()
    save_expert(record, path)
    assert path.read_bytes() == first


def test_load_expert_rejects_bad_files(config, registry, tmp_path):
    """
    Test 12: Missing, truncated, tampered and foreign-K files raise ModelFileError.
    """
    print("\n🔹 Test: Bad Model Files")
    record = with_parameters(registry[0], seed=1)
    path = save_expert(record, tmp_path / "model.json")
    text = path.read_text()

    with pytest.raises(ModelFileError):
        load_expert(tmp_path / "missing.json", config)

    truncated = tmp_path / "truncated.json"
    truncated.write_text(text[: len(text) // 2])
    with pytest.raises(ModelFileError):
        load_expert(truncated, config)

    document = json.loads(text)
    document["parameters"]["sha256"] = "0" * 64
    tampered = tmp_path / "tampered.json"
    tampered.write_text(json.dumps(document))
    with pytest.raises(ModelFileError):
        load_expert(tampered, config)

    document = json.loads(text)
    document["version"] = 99
    future = tmp_path / "future.json"
    future.write_text(json.dumps(document))
    with pytest.raises(ModelFileError):
        load_expert(future, config)

    with pytest.raises(ModelFileError):
        load_expert(path, SystemConfig(num_users=3, num_antennas=4))


def test_registry_directory(config, registry, tmp_path):
    """
    Test 13: save_registry writes trained experts only; load_registry fills them back in.
    """
    print("\n🔹 Test: Registry Directory")
    trained = [with_parameters(registry[0]), with_parameters(registry[5])]
    save_registry(registry, tmp_path)
    manifest = json.loads((tmp_path / "registry.json").read_text())
    assert sorted(manifest["experts"]) == ["Comm_SumR_Reg", "JCC_SumR_Rob"]

    loaded = load_registry(tmp_path, config)
    assert len(loaded) == 30
    assert [r.name for r in loaded if r.trained] == [r.name for r in trained]

    (tmp_path / "registry.json").write_text("{not json")
    with pytest.raises(ModelFileError):
        load_registry(tmp_path, config)

    blocker = tmp_path / "occupied"
    blocker.write_text("file")
    with pytest.raises(ExportError):
        save_registry(trained, blocker / "models")
    assert blocker.read_text() == "file"


def central_difference_check(spec, arch, config, seed):
    torch.manual_seed(0)
    net = PolicyNetwork(arch, torch.Generator().manual_seed(seed))
    model = ErrorModel.from_config(config)
    tb = prepare_batch(generate_batch(config, derive_rng(seed), 16), spec, model, derive_rng(seed + 1))

    loss = expert_loss(net, tb, spec, config, model)
    net.zero_grad()
    loss.backward()

    eps = 1e-6
    checked = 0
    for param in net.parameters():
        flat, grad = param.data.view(-1), param.grad.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 6)):
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + eps
                up = float(expert_loss(net, tb, spec, config, model))
                flat[i] = original - eps
                down = float(expert_loss(net, tb, spec, config, model))
                flat[i] = original
            numeric = (up - down) / (2 * eps)
            analytic = grad[i].item()
            assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-7, (
                f"{spec.name}: analytic {analytic} vs numeric {numeric}"
            )
            checked += 1
    return checked


@pytest.mark.parametrize("name", ["Comm_SumR_Reg", "JCC_MaxT_Reg"])
def test_gradients_match_finite_differences(config, name):
    """
    Test 14: Back-propagated gradients through network, mapping and utility match central differences.
    """
    print(f"\n🔹 Test: Gradient Check ({name})")
    spec = UtilitySpec.from_name(name)
    arch = MlpArchitecture.for_domain(spec.domain, config.num_users, 2, 8)
    checked = central_difference_check(spec, arch, config, seed=7)
    print(f"   checked {checked} partial derivatives")
    assert checked > 10
