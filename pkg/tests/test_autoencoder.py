import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactile_recon.autoencoder import tensor as T
from tactile_recon.autoencoder.model import (
    PRESETS,
    Architecture,
    _Graph,
    attention_weights,
    chamfer_loss_and_grad,
    forward,
    init_params,
    load_params,
    pooled_features,
    reconstruct,
    save_params,
    self_attention,
)
from tactile_recon.autoencoder.train import (
    DatasetConfig,
    TrainConfig,
    bn_decay,
    draw_target,
    generate_dataset,
    history_csv,
    sparse_input,
    train,
)
from tactile_recon.errors import ModelError, ModelFormatError
from tactile_recon.geometry import PointCloud
from tactile_recon.shapes import generate_category

# Central differences with step 1e-5 on a loss of order 1e2 carry about 1e-9 of
# round-off. The absolute floor keeps near-zero entries (a bias feeding a
# train-mode normalisation cancels exactly) from dividing that noise by itself.
FD_STEP = 1e-5
GRAD_FLOOR = 1e-5


def tiny_arch(rng):
    n_enc = int(rng.integers(2, 4))
    enc = tuple(int(c) for c in rng.integers(3, 6, n_enc))
    n_dec = int(rng.integers(1, 4))
    dec = tuple(int(c) for c in rng.integers(2, 4, n_dec - 1)) + (3,)
    return Architecture(enc, int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4)), dec)


def numeric_grad(mp, batch, alpha, name, eps=FD_STEP):
    p = mp.params[name]
    g = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        old = p[i]
        p[i] = old + eps
        up = chamfer_loss_and_grad(mp, batch, alpha)[0]
        p[i] = old - eps
        down = chamfer_loss_and_grad(mp, batch, alpha)[0]
        p[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), GRAD_FLOOR)))


def gradient_check(seed):
    rng = np.random.default_rng(seed)
    arch = tiny_arch(rng)
    mp = init_params(arch, seed)
    # non-trivial normalisation parameters so gamma/beta paths are exercised
    for k in mp.params:
        if k.endswith(".gamma") or k.endswith(".beta"):
            mp.params[k] = mp.params[k] + rng.normal(scale=0.3, size=mp.params[k].shape)
    batch = [(rng.uniform(0, 1, (int(rng.integers(4, 8)), 3)), rng.uniform(0, 1, (int(rng.integers(5, 10)), 3)))
             for _ in range(int(rng.integers(2, 4)))]
    _, grads, _ = chamfer_loss_and_grad(mp, batch, 100.0)
    return {name: max_relative_error(grads[name], numeric_grad(mp, batch, 100.0, name)) for name in mp.params}


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    errs = gradient_check(seed)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])


def test_gradient_check_covers_every_layer():
    mp = init_params(tiny_arch(np.random.default_rng(0)))
    kinds = {k.split(".")[0] + "." + k.split(".")[1] if k.startswith(("sa", "dec")) else k.split(".")[0]
             for k in mp.params}
    assert {"enc", "sa.G", "sa.H", "sa.K", "agg", "dec.fc", "dec.deconv"} <= kinds
    assert any(k.endswith(".gamma") for k in mp.params)


def test_primitive_gradients():
    rng = np.random.default_rng(1)
    a0 = rng.normal(size=(4, 5))

    def loss_of(x):
        a = T.param(x)
        w = T.softmax_rows(a)
        y = T.sigmoid(T.matmul(w, T.transpose(a)))
        return T.scale(T.segment_max(y, [0, 2, 4]), 1.0), a

    def scalar(x):
        out, _ = loss_of(x)
        return float((out.data * np.arange(out.data.size).reshape(out.shape)).sum())

    out, a = loss_of(a0)
    out.backward(np.arange(out.data.size, dtype=float).reshape(out.shape))
    fd = np.zeros_like(a0)
    for i in np.ndindex(a0.shape):
        x = a0.copy()
        x[i] += 1e-6
        up = scalar(x)
        x[i] -= 2e-6
        fd[i] = (up - scalar(x)) / 2e-6
    assert max_relative_error(a.grad, fd) < 1e-6


def test_conv_transpose_length():
    x = T.param(np.ones((1, 2, 5)))
    w = T.param(np.ones((2, 3, 4)))
    assert T.conv_transpose1d(x, w).shape == (1, 3, 10)


def test_non_finite_is_refused():
    with pytest.raises(ModelError):
        T.scale(T.param([1e308]), 1e10)


def features(rng, n, mp):
    return rng.normal(size=(n, mp.arch.width))


def test_softmax_rows_sum_to_one():
    mp = init_params(PRESETS["desk"], 0)
    W = attention_weights(mp, features(np.random.default_rng(2), 50, mp))
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-6)
    assert W.shape == (50, 50)


def test_zero_value_map_is_identity():
    mp = init_params(PRESETS["desk"], 0)
    mp.params["sa.K.W"][:] = 0.0
    mp.params["sa.K.b"][:] = 0.0
    f = features(np.random.default_rng(3), 30, mp)
    out = self_attention(T.constant(f), _Graph(mp, train=False))
    np.testing.assert_array_equal(out.data, f)


def test_attention_permutation_equivariant():
    mp = init_params(PRESETS["desk"], 1)
    rng = np.random.default_rng(4)
    f = features(rng, 40, mp)
    perm = rng.permutation(40)
    g = _Graph(mp, train=False)
    a = self_attention(T.constant(f), g).data
    b = self_attention(T.constant(f[perm]), g).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_attention_shape_mismatch():
    mp = init_params(PRESETS["desk"], 0)
    with pytest.raises(ModelError):
        self_attention(T.constant(np.zeros((5, 7))), _Graph(mp, train=False))


def test_output_shape_desk():
    mp = init_params(PRESETS["desk"], 0)
    rng = np.random.default_rng(5)
    for n in (40, 77, 120):
        out = forward(mp, PointCloud(rng.uniform(0, 1, (n, 3))))
        assert out.points.shape == (512, 3)


def test_output_shape_full_preset():
    mp = init_params(PRESETS["paper"], 0)
    assert mp.arch.n_out == 2048
    assert mp.arch.width == 1024
    out = reconstruct(mp, PointCloud(np.random.default_rng(6).uniform(0, 1, (120, 3))), n_min=20)
    assert out.points.shape == (2048, 3)


def test_reconstruct_requires_n_min():
    mp = init_params(PRESETS["desk"], 0)
    with pytest.raises(ModelError, match="N_min = 20"):
        reconstruct(mp, PointCloud(np.zeros((19, 3))), n_min=20)
    with pytest.raises(ModelError):
        forward(mp, PointCloud(np.zeros((0, 3))))


def test_output_inside_unit_cube_margin():
    mp = init_params(PRESETS["desk"], 3)
    out = forward(mp, PointCloud(np.random.default_rng(7).uniform(0, 1, (60, 3)))).points
    assert out.min() >= -0.1 and out.max() <= 1.1


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    mp = init_params(PRESETS["desk"], 2)
    x = rng.uniform(0, 1, (int(rng.integers(40, 121)), 3))
    a = forward(mp, PointCloud(x)).points
    b = forward(mp, PointCloud(x[rng.permutation(len(x))])).points
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_forward_deterministic():
    mp = init_params(PRESETS["desk"], 2)
    x = PointCloud(np.random.default_rng(8).uniform(0, 1, (50, 3)))
    np.testing.assert_array_equal(forward(mp, x).points, forward(mp, x).points)


def test_duplicates_leave_max_pool_unchanged():
    mp = init_params(PRESETS["desk"], 4)
    x = np.random.default_rng(9).uniform(0, 1, (50, 3))
    dup = np.concatenate([x, x[:20]])
    pooled_a, att_a = pooled_features(mp, x)
    pooled_b, att_b = pooled_features(mp, dup)
    np.testing.assert_array_equal(pooled_a, pooled_b)
    # the attention branch sees the extra copies in its softmax, so it may move
    assert att_a.shape == att_b.shape


def test_loss_single_point_example():
    mp = init_params(Architecture((3, 3), 2, 1, 2, (3,)), 0)
    # bypass the network: the loss head on its own
    pred = T.param(np.array([[[0.0, 0.0, 0.0]]]))
    from tactile_recon.metrics import nearest_neighbors
    cd = T.chamfer_batch(pred, [np.array([[3.0, 4.0, 0.0]])], nearest_neighbors)
    assert 100.0 * float(cd.data) == pytest.approx(1000.0, abs=1e-12)
    assert mp.arch.n_out == 2


def test_loss_scales_with_alpha():
    rng = np.random.default_rng(10)
    mp = init_params(PRESETS["desk"], 0)
    batch = [(rng.uniform(0, 1, (40, 3)), rng.uniform(0, 1, (100, 3))) for _ in range(2)]
    l1, g1, _ = chamfer_loss_and_grad(mp, batch, 1.0)
    l100, g100, _ = chamfer_loss_and_grad(mp, batch, 100.0)
    assert l100 == pytest.approx(100 * l1, rel=1e-12)
    np.testing.assert_allclose(g100["agg.W"], 100 * g1["agg.W"], rtol=1e-10, atol=1e-14)


def test_zero_loss_when_output_is_target():
    mp = init_params(PRESETS["desk"], 0)
    x = np.random.default_rng(11).uniform(0, 1, (40, 3))
    target = forward(mp, PointCloud(x), "train")
    # train mode with a batch of one sets BN statistics from that single cloud
    loss, grads, _ = chamfer_loss_and_grad(mp, [(x, target.points)], 100.0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_empty_batch():
    with pytest.raises(ModelError):
        chamfer_loss_and_grad(init_params(PRESETS["desk"], 0), [], 100.0)


def test_save_load_bitwise(tmp_path):
    mp = init_params(PRESETS["desk"], 5)
    mp.buffers["enc.0.bn.running_mean"][:] = np.random.default_rng(12).normal(size=16)
    path = tmp_path / "m.actr"
    save_params(mp, path)
    back = load_params(path)
    assert back.arch == mp.arch
    for k, v in mp.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32).astype(np.float64))
    for k, v in mp.buffers.items():
        np.testing.assert_array_equal(back.buffers[k], v.astype(np.float32).astype(np.float64))
    save_params(back, tmp_path / "again.actr")
    assert (tmp_path / "again.actr").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:4] == b"ACTR"


def test_load_errors(tmp_path):
    mp = init_params(PRESETS["desk"], 0)
    path = tmp_path / "m.actr"
    save_params(mp, path)
    raw = path.read_bytes()
    (tmp_path / "bad.actr").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelFormatError, match="bad magic"):
        load_params(tmp_path / "bad.actr")
    (tmp_path / "ver.actr").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ModelFormatError, match="unsupported version"):
        load_params(tmp_path / "ver.actr")
    (tmp_path / "short.actr").write_bytes(raw[:-5])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_params(tmp_path / "short.actr")


@pytest.fixture(scope="module")
def toy_samples():
    meshes = generate_category("cylinder", 6, 0)
    return generate_dataset(DatasetConfig(categories=("cylinder",), seed=0), meshes).samples


def test_dataset_counts(toy_samples):
    meshes = generate_category("cylinder", 30, 3)
    samples = generate_dataset(DatasetConfig(seed=3), meshes).samples
    assert len(samples) == 30
    for s in samples:
        assert s.cloud.points.shape == (2048, 3)
        assert s.cloud.points.min() >= 0.0 and s.cloud.points.max() <= 1.0 + 1e-12
    again = generate_dataset(DatasetConfig(seed=3), meshes).samples
    for a, b in zip(samples, again):
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)


def test_subsample_targets_in_range(toy_samples):
    rng = np.random.default_rng(13)
    targets = [draw_target(rng, 40, 120) for _ in range(2000)]
    assert min(targets) == 40 and max(targets) == 120
    counts = [len(sparse_input(toy_samples[0].cloud, t, i)) for i, t in enumerate(targets[:20])]
    assert all(30 <= c <= 140 for c in counts)


def test_dataset_needs_meshes():
    with pytest.raises(ModelError):
        generate_dataset(DatasetConfig(), [])
    with pytest.raises(ModelError):
        DatasetConfig(n_in=100, target_lo=50, target_hi=200)


def small_cfg(**kw):
    base = dict(lr=1e-3, batch_size=3, epochs=2, preset="desk", bn_decay_step=10)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_keeps_parameters(toy_samples):
    init = init_params(PRESETS["desk"], 0)
    mp, _ = train(toy_samples[:4], small_cfg(lr=0.0), toy_samples[4:], init=init)
    for k, v in init.params.items():
        np.testing.assert_array_equal(mp.params[k], v)


def test_training_is_deterministic(toy_samples):
    _, h1 = train(toy_samples[:4], small_cfg(), toy_samples[4:])
    _, h2 = train(toy_samples[:4], small_cfg(), toy_samples[4:])
    assert history_csv(h1) == history_csv(h2)
    assert [h.epoch for h in h1] == [0, 1, 2]


def test_zero_epochs(toy_samples):
    mp, h = train(toy_samples[:4], small_cfg(epochs=0), toy_samples[4:])
    assert len(h) == 1 and h[0].epoch == 0
    assert history_csv(h).splitlines()[0] == "epoch,train_loss,val_loss,val_cd"


def test_training_needs_two_samples(toy_samples):
    with pytest.raises(ModelError):
        train(toy_samples[:1], small_cfg())


def test_bn_decay_schedule():
    cfg = TrainConfig(bn_decay_step=100)
    assert bn_decay(cfg, 0) == 0.5
    assert bn_decay(cfg, 100) == 0.75
    assert bn_decay(cfg, 10**6) == 0.99
