import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from traversim.cloud import PointCloud
from traversim.datagen import ImuFeature
from traversim.datagen.samples import Sample, make_sample_id
from traversim.geometry import Pose
from traversim.traversenet import (
    ABLATION_ARCHS, ArchConfig, CheckpointError, NetworkParams, OptimState, StaleCacheError, adam_step, backward,
    evaluate, forward, forward_batch, init_network, l1_loss, load_checkpoint, mae, mean_baseline_mae, overfit,
    predict, prepare, read_history, run_ablation, save_checkpoint, train, write_history,
)
from traversim.traversenet.gradcheck import gradient_check

SMALL = dict(point_mlp_widths=(8, 12), imu_mlp_widths=(6,), head_widths=(5, 1), points_per_sample=16)


def batch(arch, b=4, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (b, arch.points_per_sample, arch.in_features)).astype(np.float32)
    imu = rng.normal(0, 0.3, (b, 13)).astype(np.float32) if arch.uses_imu else None
    return pts, imu, rng.uniform(0, 1, b)


def make_samples(n, n_eps=None, seed=0):
    """Crops whose label tracks the height of a bump, so the task is learnable."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        h = rng.uniform(0, 0.4)
        xy = rng.uniform(-0.5, 0.5, (60, 2))
        z = h * np.exp(-((xy ** 2).sum(1)) / 0.05) + rng.normal(0, 0.005, 60)
        imu = ImuFeature(np.eye(3) * (0.01 + h), np.array([0.0, 0.0, 0.0, 1.0]))
        ep = i % n_eps if n_eps else i
        out.append(Sample(make_sample_id(ep, float(i)), PointCloud(np.column_stack([xy, z])), imu,
                          round(h / 0.4, 3), ep, float(i), Pose()))
    return out


# --- architecture ------------------------------------------------------------

def test_head_input_dimensions():
    assert ArchConfig("xyz+c", "mid").head_input == 320
    assert ArchConfig("xyz", "direct").head_input == 269
    assert ArchConfig("xyz", "none").head_input == 256
    p = init_network(ArchConfig("xyz", "direct"))
    assert p["head.0.W"].shape == (269, 128)
    assert "imu.0.W" not in p.names()


def test_ablation_rows():
    labels = [a.label for a in ABLATION_ARCHS]
    assert labels == ["XYZ", "XYZ+N", "XYZ+C", "D-F IMU+XYZ+N", "M-F IMU+XYZ", "M-F IMU+XYZ+C", "M-F IMU+XYZ+N"]
    assert [ArchConfig.parse(s) for s in labels] == list(ABLATION_ARCHS)
    assert ArchConfig.parse("mid:xyz+n") == ArchConfig("xyz+n", "mid")


@pytest.mark.parametrize("kwargs", [
    {"head_widths": (8, 2)}, {"point_mlp_widths": (0, 4)}, {"point_features": "rgb"}, {"fusion": "late"},
    {"point_mlp_widths": ()},
])
def test_invalid_arch_rejected(kwargs):
    with pytest.raises(ValueError):
        ArchConfig(**kwargs)


def test_init_is_seeded_and_bounded():
    arch = ArchConfig()
    a, b, c = init_network(arch, 3), init_network(arch, 3), init_network(arch, 4)
    assert a.equals(b) and not a.equals(c)
    for name, shape in arch.layer_shapes().items():
        if name.endswith(".b"):
            assert not a[name].any()
        else:
            assert np.abs(a[name]).max() <= np.sqrt(6.0 / shape[0])
    assert a.dtype == np.float32


def test_params_validate_shapes_and_values():
    arch = ArchConfig(**SMALL)
    p = init_network(arch)
    with pytest.raises(ValueError, match="shape mismatch"):
        p.replace({"head.0.W": np.zeros((3, 3))})
    with pytest.raises(ValueError, match="non-finite"):
        p.replace({"head.0.b": np.full(5, np.nan)})


# --- forward -----------------------------------------------------------------

@pytest.mark.parametrize("arch", ABLATION_ARCHS, ids=lambda a: a.label)
def test_forward_range_and_permutation(arch):
    params = init_network(arch, 1)
    pts, imu, _ = batch(arch, 1)
    cost, cache = forward(params, pts[0], None if imu is None else imu[0])
    assert 0.0 < cost < 1.0
    perm = np.random.default_rng(2).permutation(arch.points_per_sample)
    again, _ = forward(params, pts[0][perm], None if imu is None else imu[0])
    assert again == cost
    assert cache.argmax.shape == (1, 256)


def test_zero_params_give_half():
    arch = ArchConfig()
    zero = NetworkParams(arch, {k: np.zeros(s, np.float32) for k, s in arch.layer_shapes().items()})
    pts, imu, _ = batch(arch, 3)
    np.testing.assert_array_equal(forward_batch(zero, pts, imu)[0], 0.5)


def test_forward_shape_errors():
    arch = ArchConfig("xyz+n", "mid", **SMALL)
    params = init_network(arch)
    pts, imu, _ = batch(arch, 2)
    with pytest.raises(ValueError):
        forward_batch(params, pts[:, :, :3], imu)
    with pytest.raises(ValueError, match="IMU"):
        forward_batch(params, pts, None)
    with pytest.raises(ValueError):
        forward_batch(params, pts, imu[:, :12])


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.sampled_from(["none", "direct", "mid"]))
def test_cost_in_open_interval(seed, fusion):
    arch = ArchConfig("xyz+n+c", fusion, **SMALL)
    params = init_network(arch, seed)
    pts, imu, _ = batch(arch, 3, seed)
    pts *= 50.0  # large inputs push the logit hard
    pred, _ = forward_batch(params, pts, imu)
    assert np.all((pred > 0) & (pred < 1))


# --- loss and backward -------------------------------------------------------

def test_loss_examples():
    assert mae([0.2, 0.5], [0.2, 0.5]) == 0.0
    assert mae([0.3, 0.6], [0.2, 0.8]) == pytest.approx(0.15)
    assert mae([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert l1_loss(0.7, 0.2) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="mismatch"):
        mae([0.1, 0.2], [0.1])


def test_maxpool_ties_route_to_lowest_index():
    arch = ArchConfig("xyz", "none", point_mlp_widths=(4,), head_widths=(1,), points_per_sample=5)
    params = init_network(arch, 0).astype(np.float64)
    pts = np.tile(np.array([[0.3, -0.2, 0.5]]), (1, 5, 1))
    _, cache = forward_batch(params, pts)
    assert not cache.argmax.any()
    grads, _ = backward(params, np.array([0.0]), cache)
    # identical points: gradient equals that of a single-point input
    _, single = forward_batch(params, pts[:, :1])
    g1, _ = backward(params, np.array([0.0]), single)
    for k in grads:
        np.testing.assert_allclose(grads[k], g1[k], rtol=1e-12)


def test_tie_gives_zero_subgradient():
    arch = ArchConfig("xyz", "none", **SMALL)
    params = init_network(arch, 0).astype(np.float64)
    pts, _, _ = batch(arch, 1)
    pred, cache = forward_batch(params, pts)
    grads, loss = backward(params, pred.copy(), cache)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


@pytest.mark.parametrize("fusion", ["none", "direct", "mid"])
def test_duplicated_batch_same_gradient(fusion):
    arch = ArchConfig("xyz+n", fusion, **SMALL)
    params = init_network(arch, 5).astype(np.float64)
    pts, imu, y = batch(arch, 3, 1)
    g1, _ = backward(params, y, forward_batch(params, pts, imu)[1])
    dup_imu = None if imu is None else np.concatenate([imu, imu])
    g2, _ = backward(params, np.concatenate([y, y]), forward_batch(params, np.concatenate([pts, pts]), dup_imu)[1])
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-15)


def test_stale_cache_rejected():
    arch = ArchConfig(**SMALL)
    params = init_network(arch)
    pts, imu, y = batch(arch)
    _, cache = forward_batch(params, pts, imu)
    newer = params.replace({"head.1.b": np.ones(1, np.float32)})
    with pytest.raises(StaleCacheError):
        backward(newer, y, cache)
    with pytest.raises(ValueError):
        backward(params, y[:2], cache)


@pytest.mark.parametrize("arch", ABLATION_ARCHS, ids=lambda a: a.label)
def test_gradient_check_small_widths(arch):
    small = ArchConfig(arch.point_features, arch.fusion, **SMALL)
    params = init_network(small, 7)
    pts, imu, y = batch(small, 4, 3)
    res = gradient_check(params, pts, imu, y, probes=200, step=1e-4, seed=1)
    assert res.probes == 200
    assert res.max_rel_error < 1e-4


def test_gradient_check_detects_a_wrong_gradient(monkeypatch):
    from traversim.traversenet import gradcheck
    arch = ArchConfig("xyz", "mid", **SMALL)
    real = gradcheck.backward

    def broken(params, labels, cache):
        g, loss = real(params, labels, cache)
        g["imu.0.W"] = g["imu.0.W"] * 1.01
        return g, loss

    monkeypatch.setattr(gradcheck, "backward", broken)
    pts, imu, y = batch(arch, 4, 3)
    res = gradient_check(init_network(arch, 7), pts, imu, y, probes=200, seed=1)
    assert res.max_rel_error > 1e-3


# --- adam ----------------------------------------------------------------------

def scalar_params(value=0.0):
    arch = ArchConfig("xyz", "none", point_mlp_widths=(1,), head_widths=(1,), points_per_sample=1)
    return NetworkParams(arch, {k: np.full(s, value, np.float64) for k, s in arch.layer_shapes().items()})


def test_adam_first_step_is_lr():
    p = scalar_params(0.0)
    g = {k: np.ones_like(v) for k, v in p.tensors.items()}
    p2, opt = adam_step(p, g, OptimState.zeros(p))
    for k in p.names():
        np.testing.assert_allclose(p2[k], -1e-3, rtol=1e-6)
    assert opt.step == 1


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = scalar_params(0.5)
    ones = {k: np.ones_like(v) for k, v in p.tensors.items()}
    zeros = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    p1, opt1 = adam_step(p, ones, OptimState.zeros(p))
    p2, opt2 = adam_step(p1, zeros, opt1)
    k = p.names()[0]
    assert opt2.m[k][0, 0] == pytest.approx(0.9 * opt1.m[k][0, 0])
    assert opt2.v[k][0, 0] == pytest.approx(0.999 * opt1.v[k][0, 0])
    pz, _ = adam_step(p, zeros, OptimState.zeros(p))
    assert pz.equals(p)


def test_adam_rejects_bad_gradients_and_is_deterministic():
    p = scalar_params(0.1)
    g = {k: np.full_like(v, 0.3) for k, v in p.tensors.items()}
    a, _ = adam_step(p, g, OptimState.zeros(p))
    b, _ = adam_step(p, g, OptimState.zeros(p))
    assert a.equals(b)
    g[p.names()[0]] = g[p.names()[0]] * np.inf
    with pytest.raises(ValueError, match="non-finite"):
        adam_step(p, g, OptimState.zeros(p))


# --- training ------------------------------------------------------------------

def test_train_zero_epochs_returns_init():
    arch = ArchConfig("xyz", "mid", **SMALL)
    samples = make_samples(8)
    params, hist = train((samples, None), arch, epochs=0, seed=3)
    assert hist == []
    from traversim import seeding
    assert params.equals(init_network(arch, seeding.derive_seed(3, seeding.TRAIN, 0)))


def test_train_is_deterministic_and_learns():
    arch = ArchConfig("xyz", "mid", point_mlp_widths=(32, 64), imu_mlp_widths=(16,), head_widths=(32, 1),
                      points_per_sample=64)
    data = (make_samples(120, seed=1), make_samples(30, seed=2))
    p1, h1 = train(data, arch, epochs=30, batch_size=16, seed=2)
    p2, h2 = train(data, arch, epochs=30, batch_size=16, seed=2)
    assert h1 == h2 and p1.equals(p2)
    assert h1[-1]["train_loss"] < 0.5 * h1[0]["train_loss"]
    assert set(h1[0]) == {"epoch", "train_loss", "train_mae", "test_mae"}


@pytest.mark.parametrize("warmup, expected", [(None, 1e-3), (0, 1e-3), (10, 1e-4)])
def test_warmup_scales_the_first_step(warmup, expected):
    # the first bias-corrected ADAM step moves every parameter with a nonzero gradient by exactly lr
    arch = ArchConfig("xyz", "mid", **SMALL)
    samples = make_samples(8)
    init = init_network(arch, 1)
    params, _ = train((samples[:4], None), arch, epochs=1, batch_size=4, init=init, warmup_steps=warmup)
    # the default ramp spans one epoch, here a single step, which therefore runs at full lr
    step = max(float(np.max(np.abs(params[k].astype(np.float64) - init[k]))) for k in init.names())
    assert step == pytest.approx(expected, rel=1e-3)


def test_warmup_validation():
    with pytest.raises(ValueError, match="warmup"):
        train((make_samples(4), None), ArchConfig(**SMALL), epochs=1, warmup_steps=-1)


def test_train_and_evaluate_reject_empty():
    arch = ArchConfig(**SMALL)
    with pytest.raises(ValueError):
        train(([], None), arch, epochs=1)
    with pytest.raises(ValueError):
        evaluate(init_network(arch), [])


def test_overfit_ten_samples():
    arch = ArchConfig("xyz+n", "mid")
    samples = make_samples(10, seed=4)
    params, trace = overfit(samples, arch, steps=2000)
    assert evaluate(params, samples) < 0.05
    assert trace[-1] < trace[0]


def test_mean_baseline():
    assert mean_baseline_mae([0.0, 1.0], [0.5, 0.5]) == 0.0
    assert mean_baseline_mae([0.2, 0.2], [0.0, 0.4]) == pytest.approx(0.2)


def test_ablation_rows_and_csv(tmp_path):
    data = (make_samples(40, seed=5), make_samples(12, seed=6))
    archs = [ArchConfig("xyz", "none", **SMALL), ArchConfig("xyz+c", "mid", **SMALL)]
    res = run_ablation(data, archs, epochs=2)
    assert [r["architecture"] for r in res.rows] == ["XYZ", "M-F IMU+XYZ+C"]
    text = res.to_csv()
    assert text.splitlines()[0] == "architecture,features,fusion,final_loss,train_mae_peak,test_mae,mean_baseline_mae"
    assert len(text.splitlines()) == 3
    with pytest.raises(ValueError):
        run_ablation(data, [])
    with pytest.raises(ValueError, match="test split"):
        run_ablation((data[0], None), archs, epochs=1)


def test_history_round_trip(tmp_path):
    hist = [{"epoch": 1, "train_loss": 0.25, "train_mae": 0.125, "test_mae": 0.5}]
    write_history(tmp_path / "h.csv", hist)
    assert read_history(tmp_path / "h.csv") == hist


def test_prepare_blocks_are_unit_sphere():
    prep = prepare(make_samples(5), n_points=32)
    assert prep.blocks.shape == (5, 32, 7)
    r = np.linalg.norm(prep.blocks[:, :, :3], axis=2)
    np.testing.assert_allclose(r.max(axis=1), 1.0, rtol=1e-6)
    np.testing.assert_allclose(prep.blocks[:, :, :3].mean(axis=1), 0.0, atol=1e-6)


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    arch = ArchConfig("xyz+n", "mid")
    params = init_network(arch, 9)
    path = tmp_path / "ck.json"
    save_checkpoint(path, params, {"epochs": 3})
    back = load_checkpoint(path)
    assert back.equals(params)
    pts, imu, _ = batch(arch, 5)
    assert predict(back, pts, imu).tobytes() == predict(params, pts, imu).tobytes()
    assert json.loads(path.read_text())["version"] == 1


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(path, init_network(ArchConfig(**SMALL)))
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointError, match="corrupt checkpoint"):
        load_checkpoint(path)


def test_direct_checkpoint_into_mid_config(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(path, init_network(ArchConfig("xyz+n", "direct")))
    with pytest.raises(CheckpointError, match="shape error"):
        load_checkpoint(path, ArchConfig("xyz+n", "mid"))


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(path, init_network(ArchConfig(**SMALL)))
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
