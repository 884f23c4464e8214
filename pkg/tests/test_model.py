"""Network pair mechanics: forward contracts, momentum rule, gradient flow,
checkpoint round trips."""

import numpy as np
import pytest

import ncc.autograd as ag
from ncc.model import (
    EncoderConfig, NetworkPair, forward_online, forward_target, init_pair,
    load_checkpoint, momentum_update, predict, save_checkpoint,
)

CFG = EncoderConfig(input_dim=6, backbone_hidden=(8,), projector_hidden=10,
                    projection_dim=4)


def make_pair(seed=0, m=0.996):
    return init_pair(CFG, seed=seed, m=m)


def batch(n=5, seed=1):
    return np.random.default_rng(seed).normal(size=(n, 6))


def test_outputs_are_unit_rows():
    pair = make_pair()
    x = batch()
    q = forward_online(pair, x, training=True)
    k = forward_target(pair, x, training=True)
    np.testing.assert_allclose(np.linalg.norm(q.data, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(k.data, axis=1), 1.0, atol=1e-12)
    p = predict(pair, q, training=True)
    np.testing.assert_allclose(np.linalg.norm(p.data, axis=1), 1.0, atol=1e-12)


def test_init_pair_target_equals_online_in_eval():
    pair = make_pair()
    x = batch()
    q = forward_online(pair, x, training=False)
    k = forward_target(pair, x)
    np.testing.assert_array_equal(q.data, k.data)


def test_forward_target_is_detached():
    pair = make_pair()
    tape = ag.Tape()
    with pair.recording(tape):
        k = forward_target(pair, batch(), training=True)
    assert k.node is None and k.tape is None


def test_online_gradients_flow_to_every_encoder_weight():
    pair = make_pair()
    x = batch(n=8)
    tape = ag.Tape()
    with pair.recording(tape) as rec:
        q = forward_online(pair, x, training=True)
        p = predict(pair, q, training=True)
        loss = ag.mse_rowwise(p, forward_target(pair, x, training=True))
    grads = tape.backward(loss)
    for name, t in rec.items():
        g = grads[t]
        assert g.shape == t.data.shape
        assert np.isfinite(g).all(), name


def test_deterministic_init_and_disjoint_seeds():
    a, b = make_pair(seed=3), make_pair(seed=3)
    for n in a.trainable_names():
        np.testing.assert_array_equal(a._store_for(n).weights[n], b._store_for(n).weights[n])
    c = make_pair(seed=4)
    assert any(
        not np.array_equal(a._store_for(n).weights[n], c._store_for(n).weights[n])
        for n in a.trainable_names())


def test_momentum_update_convex_rule_and_geometric_decay():
    pair = make_pair(m=0.9)
    # freeze theta at a distinct point so the gap contracts by exactly m each step
    for arr in pair.theta.weights.values():
        arr += 0.5
    name = "projector.fc1.W"
    gap0 = np.linalg.norm(pair.theta_prime.weights[name] - pair.theta.weights[name])
    gaps = []
    for _ in range(5):
        momentum_update(pair)
        gaps.append(np.linalg.norm(pair.theta_prime.weights[name] - pair.theta.weights[name]))
    for t, g in enumerate(gaps, start=1):
        assert g == pytest.approx(gap0 * 0.9 ** t, rel=1e-9)


def test_momentum_update_leaves_predictor_alone():
    pair = make_pair()
    before = {n: a.copy() for n, a in pair.phi.weights.items()}
    for arr in pair.theta.weights.values():
        arr += 1.0
    momentum_update(pair)
    for n, a in pair.phi.weights.items():
        np.testing.assert_array_equal(a, before[n])


def test_m_equals_one_freezes_target():
    pair = make_pair(m=1.0)
    before = {n: a.copy() for n, a in pair.theta_prime.weights.items()}
    for arr in pair.theta.weights.values():
        arr += 2.0
    momentum_update(pair)
    for n, a in pair.theta_prime.weights.items():
        np.testing.assert_array_equal(a, before[n])


def test_bn_running_stats_update_only_in_training():
    pair = make_pair()
    state = pair.theta.bn["backbone.0"]
    rm = state.running_mean.copy()
    forward_online(pair, batch(), training=False)
    np.testing.assert_array_equal(state.running_mean, rm)
    forward_online(pair, batch(), training=True)
    assert not np.array_equal(state.running_mean, rm)


def test_target_bn_state_updates_during_its_training_forwards():
    pair = make_pair()
    state = pair.theta_prime.bn["backbone.0"]
    rm = state.running_mean.copy()
    forward_target(pair, batch(), training=True)
    assert not np.array_equal(state.running_mean, rm)
    # and the online stats were not touched by the target forward
    pair2 = make_pair()
    forward_target(pair2, batch(), training=True)
    np.testing.assert_array_equal(pair2.theta.bn["backbone.0"].running_mean,
                                  np.zeros_like(rm))


def test_eval_forward_is_batch_size_invariant():
    pair = make_pair()
    x = batch(n=7)
    forward_online(pair, batch(n=16, seed=9), training=True)  # move running stats
    full = forward_online(pair, x, training=False).data
    split = np.vstack([
        forward_online(pair, x[:3], training=False).data,
        forward_online(pair, x[3:], training=False).data,
    ])
    np.testing.assert_allclose(full, split, atol=1e-12)


def test_recording_from_vector_matches_leaf_gradients():
    pair = make_pair()
    x = batch(n=8)

    tape = ag.Tape()
    with pair.recording(tape) as rec:
        loss = ag.mse_rowwise(predict(pair, forward_online(pair, x, training=True), training=True),
                              forward_target(pair, x, training=True))
    leaf_grads = tape.backward(loss)
    flat_leaf = np.concatenate([leaf_grads[rec[n]].ravel() for n in pair.trainable_names()])

    vec = pair.params_vector()
    tape2 = ag.Tape()
    vt = tape2.watch(vec)
    with pair.recording_from_vector(vt):
        loss2 = ag.mse_rowwise(predict(pair, forward_online(pair, x, training=True), training=True),
                               forward_target(pair, x, training=True))
    vec_grad = tape2.backward(loss2)[vt]
    np.testing.assert_allclose(vec_grad, flat_leaf, atol=1e-12)


def test_nested_recordings_rejected():
    pair = make_pair()
    tape = ag.Tape()
    with pair.recording(tape):
        with pytest.raises(RuntimeError):
            with pair.recording(tape):
                pass


def test_checkpoint_roundtrip_bitwise(tmp_path):
    pair = make_pair(seed=11)
    forward_online(pair, batch(), training=True)  # perturb running stats
    momentum_update(pair)
    path = tmp_path / "ckpt.json"
    save_checkpoint(pair, path)
    back = load_checkpoint(path)
    assert back.cfg == pair.cfg
    assert back.m == pair.m
    for store_name in ("theta", "theta_prime", "phi"):
        a, b = getattr(pair, store_name), getattr(back, store_name)
        assert set(a.weights) == set(b.weights)
        for n in a.weights:
            np.testing.assert_array_equal(a.weights[n], b.weights[n])
        for n in a.bn:
            np.testing.assert_array_equal(a.bn[n].running_mean, b.bn[n].running_mean)
            np.testing.assert_array_equal(a.bn[n].running_var, b.bn[n].running_var)
    x = batch()
    np.testing.assert_array_equal(forward_online(pair, x, training=False).data,
                                  forward_online(back, x, training=False).data)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.json"
    path.write_text('{"format": "something-else", "version": 1}')
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    path2 = tmp_path / "future.json"
    path2.write_text('{"format": "ncc-checkpoint", "version": 999}')
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path2)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, backbone_hidden=())
    with pytest.raises(ValueError):
        NetworkPair(CFG, None, None, None, m=1.5)


def test_input_width_validation():
    pair = make_pair()
    with pytest.raises(ValueError):
        forward_online(pair, np.ones((3, 5)), training=False)
    with pytest.raises(ValueError):
        predict(pair, np.ones((3, 5)), training=False)
