# pylint: disable=invalid-name
import numpy as np
import pytest

from tamba.errors import CheckpointError, ContractError
from tamba.gradcheck import grad_check
from tamba.nn import Adam, GRUCell, LayerNorm, Linear, Module, ReduceLROnPlateau
from tamba.tensor import Tensor


class Pair(Module):
    def __init__(self, rng):
        super().__init__()
        self.first = Linear(3, 2, rng)
        self.second = Linear(2, 1, rng, bias=False)
        self.parameter("offset", np.zeros(1))


def test_parameters_are_named_by_path(rng):
    names = [name for name, _ in Pair(rng).named_parameters()]

    assert names == ["offset", "first.weight", "first.bias", "second.weight"]


def test_shared_tensor_keeps_first_name(rng):
    model = Pair(rng)
    model.add_module("alias", model.first)

    names = [name for name, _ in model.named_parameters()]

    assert "alias.weight" not in names
    assert model.num_parameters() == 1 + 6 + 2 + 2


def test_state_dict_round_trip(rng):
    source, target = Pair(rng), Pair(np.random.default_rng(99))

    target.load_state_dict(source.state_dict())

    for (_, left), (_, right) in zip(source.named_parameters(), target.named_parameters()):
        np.testing.assert_array_equal(left.data, right.data)


def test_load_state_dict_rejects_missing_names(rng):
    state = Pair(rng).state_dict()
    del state["offset"]

    with pytest.raises(CheckpointError, match="offset"):
        Pair(rng).load_state_dict(state)


def test_load_state_dict_rejects_shape_change(rng):
    state = Pair(rng).state_dict()
    state["first.bias"] = np.zeros(3)

    with pytest.raises(CheckpointError, match="first.bias"):
        Pair(rng).load_state_dict(state)


def test_zero_grad_clears_every_parameter(rng):
    model = Pair(rng)
    model.first(Tensor(np.ones((1, 3)))).sum().backward()

    model.zero_grad()

    assert all(tensor.grad is None for tensor in model.parameters())

def test_layer_norm_normalizes(rng):
    out = LayerNorm(6)(Tensor(rng.standard_normal((3, 6)) * 5.0 + 2.0)).data

    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)


def test_gru_cell_grad_check(rng):
    cell = GRUCell(3, 2, rng)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    h = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    weights = rng.standard_normal((2, 2))

    report = grad_check(
        lambda a, b, _w: (cell(a, b) * weights).sum(), {"x": x, "h": h, "w": cell.input_map.weight}
    )

    assert report.passed, report.max_relative_error


def test_adam_first_step_moves_by_learning_rate():
    weight = Tensor([1.0, -1.0], requires_grad=True)
    optimizer = Adam([("w", weight)], lr=0.01)

    optimizer.step({"w": np.array([0.5, -2.0])})

    np.testing.assert_allclose(weight.data, [0.99, -0.99], rtol=1e-6)
    assert optimizer.steps == 1


def test_adam_reads_grad_field_and_treats_missing_as_zero():
    first, second = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    optimizer = Adam([("first", first), ("second", second)], lr=0.1)
    first.grad = np.array([1.0])

    optimizer.step()

    np.testing.assert_allclose(first.data, [0.9], rtol=1e-6)
    np.testing.assert_array_equal(second.data, [1.0])
    optimizer.zero_grad()
    assert first.grad is None


def test_adam_minimizes_quadratic():
    x = Tensor([0.0, 6.0], requires_grad=True)
    optimizer = Adam([("x", x)], lr=0.05)

    for _ in range(2000):
        optimizer.step({"x": 2.0 * (x.data - 3.0)})

    np.testing.assert_allclose(x.data, [3.0, 3.0], atol=0.05)


def test_adam_rejects_non_positive_learning_rate():
    with pytest.raises(ContractError):
        Adam([], lr=0.0)


def test_plateau_reduces_after_patience():
    optimizer = Adam([("w", Tensor([0.0], requires_grad=True))], lr=1e-3)
    scheduler = ReduceLROnPlateau(optimizer, factor=0.1, patience=5)

    assert scheduler.step(1.0) is False
    reductions = [scheduler.step(1.0) for _ in range(5)]

    assert reductions == [False, False, False, False, True]
    assert optimizer.lr == pytest.approx(1e-4)


def test_plateau_ignores_improvement_below_threshold():
    optimizer = Adam([("w", Tensor([0.0], requires_grad=True))], lr=1e-3)
    scheduler = ReduceLROnPlateau(optimizer, factor=0.5, patience=2, threshold=1e-4)

    scheduler.step(1.0)
    scheduler.step(1.0 - 5e-5)
    scheduler.step(0.5)

    assert scheduler.best == 0.5
    assert scheduler.bad_epochs == 0
    assert optimizer.lr == 1e-3


@pytest.mark.parametrize("factor", [0.0, 1.0, 1.5])
def test_plateau_rejects_factor(factor):
    optimizer = Adam([], lr=1e-3)

    with pytest.raises(ContractError):
        ReduceLROnPlateau(optimizer, factor=factor)
