import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hprosody.errors import ConfigError, NumericalError, ShapeError, StateError
from hprosody.nn import (LAYER_KINDS, Conv1d, Dropout, Linear, ReLU, Sequential,
                         TrainConfig, adam_step, build_layer, checkpoint, init_adam_state,
                         lr_at, mae_loss, mse_loss)

from oracles import LAYER_CASES as CASES
from oracles import gradcheck, numeric_grad, rel_error

TOL = 1e-4


@pytest.mark.parametrize("name", sorted(CASES))
def test_layer_gradients(name, rng):
    specs, shape, ctx = CASES[name]
    net = Sequential.from_specs(specs, seed=11)
    x = rng.normal(size=shape)
    assert gradcheck(net, x, ctx=ctx, train=True) <= TOL


def test_embedding_gradient():
    net = Sequential.from_specs([{"kind": "embedding_lookup", "vocab": 6, "dim": 4},
                                 {"kind": "linear", "in_dim": 4, "out_dim": 2}], seed=2)
    idx = np.array([0, 3, 3, 5, 1])
    assert gradcheck(net, idx, wrt_input=False) <= TOL


def test_every_kind_is_covered():
    covered = {s["kind"] for specs, _, _ in CASES.values() for s in specs} | {"embedding_lookup"}
    assert covered == set(LAYER_KINDS)


@pytest.mark.parametrize("loss", [mae_loss, mse_loss])
def test_loss_gradients(loss, rng):
    pred, target = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    _, g = loss(pred, target)
    num = numeric_grad(lambda: loss(pred, target)[0], pred)
    assert rel_error(g, num) <= TOL


# -- forward examples -------------------------------------------------------------

def test_identity_linear():
    lin = Linear(3, 3)
    lin.params["weight"][...] = np.eye(3)
    lin.params["bias"][...] = 0
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(lin.forward(x), x)


def test_relu_example():
    assert ReLU().forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


def test_conv1d_delay_kernel_shifts():
    conv = Conv1d(1, 1, kernel=3)
    conv.params["weight"][...] = np.array([1.0, 0.0, 0.0])[:, None, None]
    conv.params["bias"][...] = 0
    x = np.arange(1.0, 6.0)[:, None]
    assert conv.forward(x)[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_sum_loss_linear_grad_is_outer_with_ones(rng):
    lin = Linear(4, 3, rng)
    x = rng.normal(size=4)
    lin.forward(x)
    lin.backward(np.ones(3))
    np.testing.assert_allclose(lin.grads["weight"], np.outer(x, np.ones(3)))


def test_zero_upstream_gives_zero_grads(rng):
    net = Sequential.from_specs(CASES["layer_norm"][0], seed=1)
    net.zero_grad()
    net.forward(rng.normal(size=(4, 5)), train=True)
    net.backward(np.zeros((4, 5)))
    assert all(np.all(g == 0) for g in net.named_grads().values())


@pytest.mark.parametrize("kind", ["linear", "conv1d", "layer_norm", "token_mean_pool", "flatten",
                                  "embedding_lookup"])
def test_backward_without_forward(kind):
    spec = {"linear": {"in_dim": 2, "out_dim": 2}, "conv1d": {"in_ch": 2, "out_ch": 2},
            "layer_norm": {"dim": 2}, "embedding_lookup": {"vocab": 3, "dim": 2}}.get(kind, {})
    layer = build_layer({"kind": kind, **spec})
    with pytest.raises(StateError):
        layer.backward(np.zeros((3, 2)))


def test_dropout_backward_without_forward():
    with pytest.raises(StateError):
        Dropout(0.5).backward(np.zeros(3))


def test_shape_error_names_the_layer():
    net = Sequential.from_specs([{"kind": "relu"}, {"kind": "linear", "in_dim": 4, "out_dim": 2}])
    with pytest.raises(ShapeError, match="layer 1"):
        net.forward(np.zeros((2, 3)))


@pytest.mark.parametrize("spec", [
    {"kind": "conv1d", "in_ch": 1, "out_ch": 1, "kernel": 0},
    {"kind": "dropout", "rate": 1.0},
    {"kind": "attention"},
    {"kind": "linear", "in_dim": 3},
])
def test_bad_layer_specs(spec):
    with pytest.raises(ConfigError):
        build_layer(spec)


# -- dropout and determinism ---------------------------------------------------------

def test_dropout_mean_converges_to_eval():
    d = Dropout(0.5, seed=9)
    x = np.linspace(0.5, 2.0, 16)
    acc = np.zeros_like(x)
    for _ in range(10_000):
        acc += d.forward(x, train=True)
    # norm-wise over the output; per element the standard error alone is ~1%
    assert np.linalg.norm(acc / 10_000 - x) / np.linalg.norm(x) <= 0.02
    np.testing.assert_array_equal(d.forward(x, train=False), x)


def test_seeded_masks_repeat():
    a, b = Dropout(0.3, seed=4), Dropout(0.3, seed=4)
    x = np.ones(50)
    for _ in range(3):
        np.testing.assert_array_equal(a.forward(x, train=True), b.forward(x, train=True))
    c = Dropout(0.3, seed=5)
    assert not np.array_equal(c.forward(x, train=True), Dropout(0.3, seed=4).forward(x, True))


def test_eval_forward_is_pure(rng):
    net = Sequential.from_specs(CASES["dropout"][0] + [{"kind": "layer_norm", "dim": 6}], seed=3)
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(net.forward(x), net.forward(x))


def test_same_seed_same_init():
    specs = CASES["conv2d"][0] + [{"kind": "flatten"}]
    a, b = Sequential.from_specs(specs, seed=7), Sequential.from_specs(specs, seed=7)
    for k, v in a.named_params().items():
        np.testing.assert_array_equal(v, b.named_params()[k])


def test_freeze_makes_params_read_only():
    net = Sequential.from_specs(CASES["linear"][0])
    net.freeze()
    with pytest.raises(ValueError):
        net.named_params()["0.weight"][0, 0] = 1.0


# -- optimizer -------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    st_ = init_adam_state(p)
    adam_step(p, {"w": np.zeros(2)}, st_, TrainConfig(schedule="constant"), 1)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    cfg = TrainConfig(schedule="constant", learning_rate=1e-3)
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.ones(3)}, init_adam_state(p), cfg, 1)
    np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-9), rtol=1e-12)


def test_adam_rejects_nonfinite_and_leaves_params():
    p = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(NumericalError, match="b"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, init_adam_state(p),
                  TrainConfig(), 1)
    assert p["a"].tolist() == [1.0, 1.0]


def test_adam_step_zero_is_an_error():
    p = {"a": np.ones(1)}
    with pytest.raises(ConfigError):
        adam_step(p, {"a": np.ones(1)}, init_adam_state(p), TrainConfig(), 0)


def test_lr_examples():
    assert lr_at("warmup_inverse_sqrt", 4000, 256, 4000) == pytest.approx(256 ** -0.5 * 4000 ** -0.5)
    assert lr_at("warmup_inverse_sqrt", 1, 256, 4000) == pytest.approx(256 ** -0.5 * 4000 ** -1.5)
    assert lr_at("constant", 1234, learning_rate=1e-4) == 1e-4
    with pytest.raises(ConfigError):
        lr_at("constant", 0)


@given(st.integers(1, 100_000), st.integers(1, 10_000))
@settings(max_examples=200)
def test_warmup_peak(step, warmup):
    assert lr_at("warmup_inverse_sqrt", step, 256, warmup) <= lr_at(
        "warmup_inverse_sqrt", warmup, 256, warmup) * (1 + 1e-12)


@pytest.mark.parametrize("bad", [{"beta1": 1.0}, {"batch_size": 0}, {"schedule": "cosine"},
                                 {"momentum": 0.9}])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(bad)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    specs = CASES["dropout"][0] + [{"kind": "layer_norm", "dim": 6}]
    net = Sequential.from_specs(specs, seed=5)
    net.forward(rng.normal(size=(5, 3)), train=True)
    opt = init_adam_state(net.named_params())
    opt["m"]["0.weight"] += 0.25
    checkpoint.save(tmp_path / "c.json", {"net": checkpoint.network_state(net, opt, step=7)})
    back = checkpoint.load(tmp_path / "c.json")["net"]
    net2 = checkpoint.restore_network(back)
    assert back["step"] == 7 and net2.rng_state() == net.rng_state() == [1]
    for k, v in net.named_params().items():
        np.testing.assert_array_equal(net2.named_params()[k], v)
    np.testing.assert_array_equal(back["optimizer"]["m"]["0.weight"], opt["m"]["0.weight"])
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(net.forward(x, train=True), net2.forward(x, train=True))


def test_checkpoint_dumps_is_deterministic(rng):
    net = Sequential.from_specs(CASES["conv1d"][0], seed=1)
    s = {"net": checkpoint.network_state(net)}
    assert checkpoint.dumps(s) == checkpoint.dumps(s)
