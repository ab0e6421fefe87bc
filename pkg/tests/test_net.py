import numpy as np
import pytest
from conftest import (enumerate_captions, finite_difference_grads,
                      max_relative_grad_error, randomized_params)

from prefdiff import autodiff as ad
from prefdiff import diffusion as df
from prefdiff import net
from prefdiff import toyworld as tw

SMALL = net.NetConfig(grid=4, channels=3, hidden=8, time_dim=8)


def test_encoding_differs_in_exactly_one_block():
    a = tw.Caption(dimension="color",
                   objects=(tw.ObjectSlot("square", color="red"),
                            tw.ObjectSlot("disc", color="blue")))
    b = tw.Caption(dimension="color",
                   objects=(tw.ObjectSlot("square", color="green"),
                            tw.ObjectSlot("disc", color="blue")))
    va, vb = net.encode_caption(a).vector, net.encode_caption(b).vector
    changed = np.nonzero(va != vb)[0]
    color_block = slice(len(tw.SHAPES), len(tw.SHAPES) + len(tw.COLORS))
    assert len(changed) == 2               # one bit cleared, one set
    assert all(color_block.start <= i < color_block.stop for i in changed)


def test_encoding_single_object_leaves_second_slot_zero():
    cap = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="red"),))
    vec = net.encode_caption(cap).vector
    block = len(tw.SHAPES) + len(tw.COLORS) + len(tw.TEXTURES)
    assert np.all(vec[block:2 * block] == 0.0)
    assert vec[:block].sum() == 2.0        # shape hot + color hot


def test_encoding_injective_over_full_grammar():
    captions = enumerate_captions()
    assert len(captions) < 10_000
    seen = {}
    for cap in captions:
        key = net.encode_caption(cap).vector.tobytes()
        assert key not in seen, f"{cap} collides with {seen.get(key)}"
        seen[key] = cap
    # one hot entry per filled slot
    for cap in captions[:200]:
        vec = net.encode_caption(cap).vector
        filled = sum(1 + (s.color is not None) + (s.texture is not None)
                     for s in cap.objects)
        filled += (cap.relation is not None) + (cap.count is not None)
        assert vec.sum() == filled


def test_encoding_rejects_unknown_vocabulary():
    bad = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="mauve"),))
    with pytest.raises(net.VocabularyError):
        net.encode_caption(bad)


def test_forward_zero_final_layer_outputs_zero():
    params = net.init_params(SMALL, seed=0)
    sched = df.make_schedule(10, 0.05, 0.3)
    cap = tw.Caption(dimension="shape", objects=(tw.ObjectSlot("disc"),))
    rng = np.random.default_rng(0)
    out = net.forward(params, rng.standard_normal((4, 4, 3)), 3,
                      net.encode_caption(cap), sched)
    assert np.all(out == 0.0)
    assert out.shape == (4, 4, 3)


def test_forward_is_pure():
    params = randomized_params(net.init_params(SMALL, seed=1), seed=2)
    sched = df.make_schedule(10, 0.05, 0.3)
    cap = tw.Caption(dimension="shape", objects=(tw.ObjectSlot("disc"),))
    x = np.random.default_rng(3).standard_normal((4, 4, 3))
    enc = net.encode_caption(cap)
    a = net.forward(params, x, 5, enc, sched)
    b = net.forward(params, x, 5, enc, sched)
    assert np.array_equal(a, b)


def test_forward_directional_derivative_matches_probe():
    # reverse-mode input gradient of v . f(x) against a central difference
    params = randomized_params(net.init_params(SMALL, seed=4), seed=5)
    sched = df.make_schedule(10, 0.05, 0.3)
    cap = tw.Caption(dimension="shape", objects=(tw.ObjectSlot("disc"),))
    enc = net.encode_caption(cap)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 4, 3))
    v = rng.standard_normal(48)

    rows = net.assemble_input(params, x[None], np.array([5]), enc.vector[None], sched)
    x_leaf = ad.param(rows)
    h = x_leaf
    for i, (w, b) in enumerate(params.layers):
        h = ad.add(ad.matmul(h, ad.constant(w)), ad.constant(b))
        if i < len(params.layers) - 1:
            h = ad.silu(h)
    root = ad.tsum(ad.mul(h, ad.constant(v[None, :])))
    ad.backward(root)

    delta = 1e-6
    for cell in (0, 13, 47):
        bumped = rows.copy()
        bumped[0, cell] += delta
        dimmed = rows.copy()
        dimmed[0, cell] -= delta
        fd = (float(net.forward_rows(params, bumped)[0] @ v)
              - float(net.forward_rows(params, dimmed)[0] @ v)) / (2 * delta)
        assert fd == pytest.approx(x_leaf.grad[0, cell], rel=1e-4)


def test_backward_constant_loss_gives_zero_grads():
    params = randomized_params(net.init_params(SMALL, seed=7), seed=8)
    pt = net.ParamTensors.wrap(params)
    root = ad.mul(ad.tsum(pt.layers[0][0]), 0.0)
    ad.backward(root)
    for w, b in pt.layers:
        assert w.grad is None or np.all(w.grad == 0.0)


def test_backward_sum_of_squares_gradient_is_two_w():
    params = randomized_params(net.init_params(SMALL, seed=9), seed=10)
    pt = net.ParamTensors.wrap(params)
    w0 = pt.layers[0][0]
    root = ad.tsum(ad.mul(w0, w0))
    ad.backward(root)
    assert np.allclose(w0.grad, 2.0 * params.layers[0][0], rtol=0, atol=0)


@pytest.mark.parametrize("seed", [0, 1])
def test_loss_family_gradients_match_finite_differences(seed):
    from prefdiff import losses
    cfg = net.NetConfig(grid=3, channels=2, hidden=6, time_dim=4)
    theta = randomized_params(net.init_params(cfg, seed=seed), seed=100 + seed)
    ref = net.clone_frozen(randomized_params(net.init_params(cfg, seed=seed), seed=200 + seed))
    assert theta.param_count() <= 1000
    sched = df.make_schedule(6, 0.05, 0.3)
    rng = np.random.default_rng(300 + seed)
    x0 = rng.uniform(-1, 1, (3, 3, 2))
    eps = rng.standard_normal((3, 3, 2))
    y_w = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="red"),))
    y_l = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="cyan"),))

    def loss_fn():
        return losses.text_dpo_loss(theta, ref, x0, y_w, y_l, 2, eps, 0.3, sched).value

    analytic = losses.text_dpo_loss(theta, ref, x0, y_w, y_l, 2, eps, 0.3, sched).backward()
    numeric = finite_difference_grads(loss_fn, theta)
    assert max_relative_grad_error(analytic.layers, numeric) < 1e-4


def test_x0_parameterization_gradients_and_identity():
    from prefdiff import losses
    cfg = net.NetConfig(grid=3, channels=2, hidden=6, time_dim=4, parameterization="x0")
    theta = randomized_params(net.init_params(cfg, seed=40), seed=41)
    ref = net.clone_frozen(randomized_params(net.init_params(cfg, seed=42), seed=43))
    sched = df.make_schedule(6, 0.05, 0.3)
    rng = np.random.default_rng(44)
    x0 = rng.uniform(-1, 1, (3, 3, 2))
    eps = rng.standard_normal((3, 3, 2))
    y_w = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="red"),))
    y_l = tw.Caption(dimension="color", objects=(tw.ObjectSlot("square", color="cyan"),))

    def loss_fn():
        return losses.text_dpo_loss(theta, ref, x0, y_w, y_l, 3, eps, 0.3, sched).value

    analytic = losses.text_dpo_loss(theta, ref, x0, y_w, y_l, 3, eps, 0.3, sched).backward()
    numeric = finite_difference_grads(loss_fn, theta)
    # near-zero entries sit at the finite-difference noise floor
    assert max_relative_grad_error(analytic.layers, numeric, floor=1e-5) < 2e-4
    aliased = losses.text_dpo_loss(theta, theta, x0, y_w, y_l, 3, eps, 0.3, sched)
    assert aliased.value == pytest.approx(np.log(2.0), abs=1e-12)
    assert aliased.backward().global_norm() < 1e-9


def test_clone_frozen_is_independent_and_equal():
    params = randomized_params(net.init_params(SMALL, seed=11), seed=12)
    clone = net.clone_frozen(params)
    assert not clone.trainable
    assert net.params_equal(params, clone)
    sched = df.make_schedule(8, 0.05, 0.3)
    cap = tw.Caption(dimension="shape", objects=(tw.ObjectSlot("triangle"),))
    x = np.random.default_rng(13).standard_normal((4, 4, 3))
    assert np.array_equal(net.forward(params, x, 1, net.encode_caption(cap), sched),
                          net.forward(clone, x, 1, net.encode_caption(cap), sched))
    params.layers[0][0][:] += 1.0   # mutate the original
    assert not net.params_equal(params, clone)


def test_clone_survives_training_untouched():
    from prefdiff import datapipe as dp
    from prefdiff import trainer
    pairs, _ = dp.generate_dataset({"color": 6}, seed=1, grid=8)
    cfg = trainer.TrainConfig(method="sft", steps=100, batch_size=4, grid=8,
                              hidden=16, time_dim=8, T=10, seed=5, dtype="float64")
    init = net.init_params(cfg.net_config(), seed=5)
    frozen = net.clone_frozen(init)
    before = net.checkpoint_checksum(frozen)
    trainer.train(cfg, pairs, init_params=init)
    assert net.checkpoint_checksum(frozen) == before
    assert net.checkpoint_checksum(init) == before   # train copies, never mutates


def test_param_count_matches_analytic_formula():
    for cfg in (SMALL, net.NetConfig(grid=6, channels=1, hidden=32, time_dim=16)):
        params = net.init_params(cfg, seed=0)
        assert params.param_count() == net.expected_param_count(cfg)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = randomized_params(net.init_params(SMALL, seed=14), seed=15)
    path = tmp_path / "ckpt.json"
    net.save_checkpoint(params, path)
    loaded = net.load_checkpoint(path)
    assert net.params_equal(params, loaded)
    assert loaded.cfg == params.cfg
    assert net.checkpoint_checksum(loaded) == net.checkpoint_checksum(params)


def test_checkpoint_rejects_corruption_and_bad_version(tmp_path):
    import json
    params = net.init_params(SMALL, seed=16)
    path = tmp_path / "ckpt.json"
    net.save_checkpoint(params, path)
    record = json.loads(path.read_text())
    record["checksum"] = "0" * 64
    path.write_text(json.dumps(record))
    with pytest.raises(net.CheckpointError, match="checksum"):
        net.load_checkpoint(path)
    record["version"] = 999
    path.write_text(json.dumps(record))
    with pytest.raises(net.CheckpointError, match="unsupported"):
        net.load_checkpoint(path)
