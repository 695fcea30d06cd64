import json
import math

import numpy as np
import pytest

from bbadapt.errors import ContractError, DimensionError
from bbadapt.nets import (
    BatchNorm,
    Linear,
    SGD,
    SourceNet,
    TargetNet,
    WeightNormLinear,
    clone_net,
    load_checkpoint,
    lr_factor,
    ls_cross_entropy,
    make_sgd,
    minibatch_indices,
    net_from_state,
    net_state,
    save_checkpoint,
    train_source_net,
)
from bbadapt.tensor import GradTape, Tensor, softmax

from conftest import make_blobs


def test_linear_init_he_scale_zero_bias():
    rng = np.random.default_rng(0)
    layer = Linear(400, 50, rng)
    assert np.all(layer.bias.data == 0.0)
    observed = layer.weight.data.std()
    expected = math.sqrt(2.0 / 400)
    assert abs(observed - expected) / expected < 0.05
    assert layer.weight.requires_grad and layer.bias.requires_grad


def test_linear_deterministic_from_seed():
    a = Linear(4, 3, np.random.default_rng(7))
    b = Linear(4, 3, np.random.default_rng(7))
    assert np.array_equal(a.weight.data, b.weight.data)


def test_batchnorm_train_standardizes(rng):
    bn = BatchNorm(3)
    x = Tensor(rng.normal(5.0, 2.0, (200, 3)))
    out = bn(x, train=True, update_stats=True).data
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-3)


def test_batchnorm_running_stats_update_rule(rng):
    bn = BatchNorm(2, momentum=0.1)
    x = rng.normal(3.0, 1.5, (50, 2))
    mean0 = bn.running_mean.copy()
    var0 = bn.running_var.copy()
    bn(Tensor(x), train=True, update_stats=True)
    batch_mean = x.mean(axis=0)
    batch_var = x.var(axis=0, ddof=1)  # Bessel-corrected into the running stats
    assert np.allclose(bn.running_mean, 0.9 * mean0 + 0.1 * batch_mean, atol=1e-12)
    assert np.allclose(bn.running_var, 0.9 * var0 + 0.1 * batch_var, atol=1e-12)


def test_batchnorm_update_stats_switch(rng):
    bn = BatchNorm(2)
    x = Tensor(rng.normal(1.0, 1.0, (20, 2)))
    before = (bn.running_mean.copy(), bn.running_var.copy())
    bn(x, train=True, update_stats=False)
    assert np.array_equal(bn.running_mean, before[0])
    assert np.array_equal(bn.running_var, before[1])


def test_batchnorm_eval_uses_running_stats(rng):
    bn = BatchNorm(2, eps=1e-5)
    x = rng.normal(0.0, 1.0, (10, 2))
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 9.0])
    out = bn(Tensor(x), train=False, update_stats=False).data
    expected = (x - bn.running_mean) / np.sqrt(bn.running_var + 1e-5)
    assert np.allclose(out, expected, atol=1e-12)


def test_weightnorm_rows_have_scale_norm(rng):
    layer = WeightNormLinear(6, 4, np.random.default_rng(3))
    x = rng.normal(size=(5, 6))
    # perturb the direction away from unit norm; forward must renormalize
    layer.direction.data *= rng.uniform(0.5, 2.0, (4, 1))
    out_before = layer(Tensor(x)).data
    layer.renorm()
    assert np.allclose(np.linalg.norm(layer.direction.data, axis=1), 1.0, atol=1e-12)
    out_after = layer(Tensor(x)).data
    # renorm is a pure reparameterization
    assert np.allclose(out_before, out_after, atol=1e-12)


def test_weightnorm_gradient_flows_to_direction_and_scale(rng):
    layer = WeightNormLinear(3, 2, np.random.default_rng(1))
    x = rng.normal(size=(4, 3))
    with GradTape() as tape:
        loss = (layer(Tensor(x)) ** 2.0).sum()
    grads = tape.gradient(loss, layer.params)
    assert all(np.any(g != 0.0) for g in grads)


@pytest.mark.parametrize("cls", [SourceNet, TargetNet])
def test_net_forward_shapes_and_validation(cls, rng):
    net = cls(2, 3, hidden=(8, 8), rng=np.random.default_rng(0))
    x = rng.normal(size=(5, 2))
    out = net.forward(x, mode="eval")
    assert out.shape == (5, 3)
    with pytest.raises(DimensionError):
        net.forward(rng.normal(size=(5, 4)))
    with pytest.raises(ContractError):
        net.forward(x, mode="test")


def test_eval_forward_is_deterministic(rng):
    net = TargetNet(2, 3, hidden=(8,), bottleneck_dim=4, rng=np.random.default_rng(0))
    x = rng.normal(size=(7, 2))
    a = net.predict_proba(x)
    b = net.predict_proba(x)
    assert np.array_equal(a, b)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_target_train_forward_uses_batch_stats(rng):
    net = TargetNet(2, 3, hidden=(8,), bottleneck_dim=4, rng=np.random.default_rng(0))
    x = rng.normal(3.0, 2.0, (16, 2))
    train_out = net.forward(x, mode="train", update_stats=False).data
    eval_out = net.forward(x, mode="eval").data
    assert not np.allclose(train_out, eval_out)


def test_post_update_renorms_target_classifier(rng):
    net = TargetNet(2, 3, rng=np.random.default_rng(0))
    net.classifier.direction.data *= 3.0
    net.post_update()
    assert np.allclose(np.linalg.norm(net.classifier.direction.data, axis=1), 1.0, atol=1e-12)


def test_lr_factor_schedule():
    assert lr_factor(0.0) == 1.0
    assert abs(lr_factor(1.0) - 11.0 ** -0.75) < 1e-15
    ps = np.linspace(0.0, 1.0, 11)
    vals = [lr_factor(p) for p in ps]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_sgd_matches_manual_update(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    opt = SGD([([w], 0.01), ([b], 0.1)], momentum=0.9, weight_decay=1e-3)

    ref_w, ref_b = w.data.copy(), b.data.copy()
    vel_w, vel_b = np.zeros_like(ref_w), np.zeros_like(ref_b)
    for step, progress in enumerate((0.0, 0.25)):
        gw = rng.normal(size=ref_w.shape)
        gb = rng.normal(size=ref_b.shape)
        opt.step([gw, gb], progress=progress)
        factor = (1.0 + 10.0 * progress) ** -0.75
        vel_w = 0.9 * vel_w + gw + 1e-3 * ref_w
        vel_b = 0.9 * vel_b + gb + 1e-3 * ref_b
        ref_w = ref_w - 0.01 * factor * vel_w
        ref_b = ref_b - 0.1 * factor * vel_b
    assert np.allclose(w.data, ref_w, atol=1e-15)
    assert np.allclose(b.data, ref_b, atol=1e-15)


def test_sgd_validates_gradients(rng):
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    opt = SGD([([w], 0.01)])
    with pytest.raises(DimensionError):
        opt.step([], progress=0.0)
    with pytest.raises(DimensionError):
        opt.step([np.zeros((3, 3))], progress=0.0)


def test_make_sgd_group_rates():
    net = TargetNet(2, 3, rng=np.random.default_rng(0))
    opt = make_sgd(net, lr_backbone=1e-3)
    n_backbone = len(net.backbone_params())
    assert opt.params == net.backbone_params() + net.new_params()
    assert all(lr == 1e-3 for lr in opt.base_lrs[:n_backbone])
    assert all(lr == 1e-2 for lr in opt.base_lrs[n_backbone:])


def test_ls_cross_entropy_matches_manual(rng):
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, 6)
    loss = ls_cross_entropy(Tensor(logits), labels, alpha=0.1).item()

    log_probs = logits - np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) - logits.max(axis=1, keepdims=True)
    targets = np.full((6, 4), 0.1 / 4)
    targets[np.arange(6), labels] += 0.9
    manual = -(targets * log_probs).sum(axis=1).mean()
    assert abs(loss - manual) < 1e-12


def test_ls_cross_entropy_alpha_zero_is_plain_ce(rng):
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, 5)
    loss = ls_cross_entropy(Tensor(logits), labels, alpha=0.0).item()
    probs = softmax(Tensor(logits)).data
    manual = -np.log(probs[np.arange(5), labels]).mean()
    assert abs(loss - manual) < 1e-12


def test_minibatch_indices_cover_once():
    rng = np.random.default_rng(0)
    batches = list(minibatch_indices(103, 10, rng))
    sizes = [len(b) for b in batches]
    assert sizes == [10] * 10 + [3]
    assert sorted(np.concatenate(batches)) == list(range(103))


def test_minibatch_indices_drop_small_tail():
    rng = np.random.default_rng(0)
    batches = list(minibatch_indices(65, 64, rng, min_size=2))
    assert [len(b) for b in batches] == [64]
    batches = list(minibatch_indices(66, 64, rng, min_size=2))
    assert [len(b) for b in batches] == [64, 2]


def test_minibatch_indices_deterministic():
    a = list(minibatch_indices(20, 6, np.random.default_rng(5)))
    b = list(minibatch_indices(20, 6, np.random.default_rng(5)))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_train_source_net_learns_blobs(rng):
    x, y = make_blobs(60, [(-2.0, 0.0), (2.0, 0.0)], 0.3, rng)
    net = SourceNet(2, 2, hidden=(16, 16), rng=np.random.default_rng(1))
    history = train_source_net(net, x, y, epochs=10, batch_size=32, seed=3)
    assert len(history) == 10
    assert history[-1] < history[0]
    pred = net.predict_proba(x).argmax(axis=1)
    assert (pred == y).mean() == 1.0


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    net = TargetNet(2, 4, hidden=(8, 8), bottleneck_dim=5, rng=np.random.default_rng(2))
    # give the running stats non-default values
    net.forward(rng.normal(size=(32, 2)), mode="train")
    path = tmp_path / "net.json"
    save_checkpoint(net, str(path), seed=123)
    loaded = load_checkpoint(str(path))
    assert type(loaded) is TargetNet
    assert loaded.arch() == net.arch()
    for name, param in net.named_params().items():
        assert np.array_equal(loaded.named_params()[name].data, param.data), name
    for name, stat in net.running_stats().items():
        assert np.array_equal(loaded.running_stats()[name], stat), name
    x = rng.normal(size=(6, 2))
    assert np.array_equal(net.predict_proba(x), loaded.predict_proba(x))


def test_checkpoint_source_round_trip(tmp_path):
    net = SourceNet(3, 2, hidden=(4,), rng=np.random.default_rng(0))
    path = tmp_path / "src.json"
    save_checkpoint(net, str(path))
    loaded = load_checkpoint(str(path))
    assert type(loaded) is SourceNet
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(net.predict_proba(x), loaded.predict_proba(x))


def test_net_state_version_check():
    net = SourceNet(2, 2, rng=np.random.default_rng(0))
    state = net_state(net)
    state["format_version"] = 999
    with pytest.raises(ContractError):
        net_from_state(state)


def test_checkpoint_unknown_kind(tmp_path):
    net = SourceNet(2, 2, rng=np.random.default_rng(0))
    state = net_state(net)
    state["arch"]["kind"] = "mystery"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(state))
    with pytest.raises(ContractError):
        load_checkpoint(str(path))


def test_clone_net_is_independent(rng):
    net = TargetNet(2, 3, hidden=(4,), rng=np.random.default_rng(0))
    twin = clone_net(net)
    x = rng.normal(size=(5, 2))
    assert np.array_equal(net.predict_proba(x), twin.predict_proba(x))
    net.bottleneck.weight.data += 1.0
    net.bn.running_mean += 5.0
    assert not np.array_equal(net.predict_proba(x), twin.predict_proba(x))
