import numpy as np
import pytest

from mvsc import fusion
from mvsc.branches import build_branch, build_branches, encode, pretrain, reconstruction_loss
from mvsc.data import ConstraintSet, MultiViewDataset, generate_constraints, make_blobs, rescale
from mvsc.errors import CheckpointError, ConfigError, DivergenceError, PreconditionError, ShapeError
from mvsc.metrics import acc
from mvsc.trainer import (
    Finetuner,
    TrainingConfig,
    finetune,
    format_record_csv,
    inertia,
    init_cluster_state,
    kmeans,
    load_checkpoint,
    save_checkpoint,
    save_finetuner,
    stopping_check,
)


@pytest.fixture(scope="module")
def small():
    """Rescaled 3-cluster blobs with briefly pretrained branches."""
    ds = rescale(make_blobs(90, 2, 3, seed=4))
    branches = build_branches(ds.dims, seed=4)
    pretrain(branches, ds, epochs=30, batch_size=32, seed=4)
    cs = generate_constraints(ds.labels, 1.0, seed=4)
    return ds, branches, cs


def make_config(**kw):
    base = dict(k=3, batch_size=32, update_interval=5, max_iter=40, seed=1)
    base.update(kw)
    return TrainingConfig(**base)


def lloyd_oracle(points, k, rng):
    """Plain Lloyd from k distinct random points; no k-means++."""
    centers = points[rng.choice(len(points), k, replace=False)].copy()
    for _ in range(200):
        labels = np.argmin(((points[:, None] - centers[None]) ** 2).sum(-1), axis=1)
        new = np.array([points[labels == j].mean(0) if np.any(labels == j) else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    labels = np.argmin(((points[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    return inertia(points, centers, labels)


# ------------------------------------------------------------------ k-means


def test_kmeans_exact_locations():
    locs = np.array([[0.0, 0.0], [5.0, 5.0], [-3.0, 7.0]])
    pts = np.repeat(locs, [4, 6, 5], axis=0)
    centers, labels = kmeans(pts, 3, seed=2)
    assert inertia(pts, centers, labels) == 0.0
    assert sorted(map(tuple, centers)) == sorted(map(tuple, locs))


def test_kmeans_single_cluster_is_mean(rng):
    pts = rng.normal(size=(25, 4))
    centers, labels = kmeans(pts, 1)
    np.testing.assert_allclose(centers[0], pts.mean(axis=0), rtol=0, atol=1e-12)
    assert np.all(labels == 0)


def test_kmeans_close_to_restart_oracle():
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        pts = r.normal(size=(20, 2))
        best = min(lloyd_oracle(pts, 3, r) for _ in range(100))
        centers, labels = kmeans(pts, 3, seed=seed)
        assert inertia(pts, centers, labels) <= best * 1.01


def test_kmeans_deterministic_and_precondition(rng):
    pts = rng.normal(size=(30, 3))
    a = kmeans(pts, 4, seed=9)
    b = kmeans(pts, 4, seed=9)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(PreconditionError):
        kmeans(pts[:2], 3)


def test_kmeans_more_clusters_than_locations_stays_nonempty():
    pts = np.array([[0.0], [0.0], [0.0], [1.0], [1.0], [2.0]])
    _, labels = kmeans(pts, 3, seed=0, n_init=1)
    assert set(labels) == {0, 1, 2}


# ---------------------------------------------------------- initialization


def test_init_single_view_matches_kmeans():
    ds = rescale(make_blobs(60, 1, 3, dims=[12], seed=3))
    branches = build_branches(ds.dims, seed=3)
    state, labels = init_cluster_state(branches, ds, 3, seed=5)
    centers, km_labels = kmeans(encode(branches[0], ds.views[0]), 3, seed=5)
    np.testing.assert_array_equal(state.centers[0], centers)
    np.testing.assert_array_equal(labels, km_labels)
    np.testing.assert_array_equal(state.weight_logits, np.zeros((3, 1)))


def test_init_zero_noise_is_perfect():
    ds = rescale(make_blobs(120, 2, 3, noise=0.0, seed=8))
    branches = build_branches(ds.dims, seed=8)
    pretrain(branches, ds, epochs=5, batch_size=32)
    _, labels = init_cluster_state(branches, ds, 3, seed=0)
    assert acc(ds.labels, labels) == 1.0


def test_init_slicing_reassembles_centers(small):
    ds, branches, _ = small
    state, _ = init_cluster_state(branches, ds, 3, seed=7)
    z = np.hstack([encode(b, x) for b, x in zip(branches, ds.views)])
    centers, _ = kmeans(z, 3, seed=7)
    np.testing.assert_array_equal(np.hstack(state.centers), centers)
    assert state.view_dims == [b.embedding_dim for b in branches]
    np.testing.assert_array_equal(fusion.view_weights(state.weight_logits), np.full((3, 2), 0.5))


def test_init_needs_enough_samples():
    ds = MultiViewDataset([np.zeros((2, 4))])
    with pytest.raises(PreconditionError):
        init_cluster_state([build_branch(4, [3], 2)], ds, 3)


# ----------------------------------------------------------------- stopping


def test_stopping_examples():
    s = np.arange(1000) % 7
    assert stopping_check(s, s, 1e-4) == (True, 0.0)
    assert stopping_check(s, s + 1, 1e-4) == (False, 1.0)
    t = s.copy()
    t[17] += 1
    halt, frac = stopping_check(s, t, 1e-4)
    assert frac == 1e-3 and not halt
    assert stopping_check(s, t, 1e-3)[0]
    with pytest.raises(ShapeError):
        stopping_check(s, s[:-1], 1e-4)


# ----------------------------------------------------------------- finetune


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(k=0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(k=2, delta=1.0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(k=2, update_interval=0).validate()
    cfg = TrainingConfig(k=2, semi=False)
    assert cfg.effective_lam == 0.0 and not cfg.uses_constraints
    assert TrainingConfig(k=2, batch_size=256).interval_for(600) == 3


def test_pure_reconstruction_finetuning_lowers_loss(small):
    ds, branches, _ = small
    cfg = make_config(gamma=0.0, lam=0.0, update_interval=40, max_iter=40)
    res = finetune(branches, ds, None, cfg)
    before = sum(reconstruction_loss(b, x) for b, x in zip(branches, ds.views))
    after = sum(reconstruction_loss(b, x) for b, x in zip(res.branches, ds.views))
    assert res.iterations == 40
    assert after < before


def test_frozen_parameters_halt_at_next_refresh(small):
    ds, branches, cs = small
    cfg = make_config(lr=0.0, update_interval=7, max_iter=100)
    res = finetune(branches, ds, cs, cfg)
    assert res.halted and res.iterations == 7
    assert [r.iteration for r in res.history] == [0, 7]
    assert res.history[0].change_fraction is None
    assert res.history[-1].change_fraction == 0.0


def test_iteration_cap(small):
    ds, branches, cs = small
    res = finetune(branches, ds, cs, make_config(max_iter=13, update_interval=5))
    assert res.iterations <= 13
    if not res.halted:
        assert res.iterations == 13
    else:
        assert res.history[-1].change_fraction <= 1e-4


def test_no_fsp_freezes_decoders(small):
    ds, branches, cs = small
    res = finetune(branches, ds, cs, make_config(fsp=False, max_iter=20))
    for old, new in zip(branches, res.branches):
        for a, b in zip(old.decoder_params(), new.decoder_params()):
            assert a.tobytes() == b.tobytes()
    assert any(
        not np.array_equal(a, b)
        for old, new in zip(branches, res.branches)
        for a, b in zip(old.encoder_params(), new.encoder_params())
    )
    assert all(r.losses.L_rec == 0.0 for r in res.history)


def test_inputs_not_mutated(small):
    ds, branches, cs = small
    snapshot = [p.copy() for b in branches for p in b.params()]
    finetune(branches, ds, cs, make_config(max_iter=10))
    for a, b in zip(snapshot, [p for b in branches for p in b.params()]):
        np.testing.assert_array_equal(a, b)


def test_target_constant_between_refreshes(small):
    ds, branches, cs = small
    state, labels = init_cluster_state(branches, ds, 3, seed=0)
    ft = Finetuner(branches, ds, cs, make_config(update_interval=4, max_iter=12), state, labels)
    seen = []
    while ft.step():
        seen.append((ft.t - 1, id(ft.P), ft.P.copy()))
    for t, ident, p in seen:
        block = [s for s in seen if s[0] // 4 == t // 4]
        assert all(s[1] == ident and np.array_equal(s[2], p) for s in block)
    # the first refresh uses the full dataset
    z = [encode(b, x) for b, x in zip(branches, ds.views)]
    first = [s for s in seen if s[0] == 0][0][2]
    np.testing.assert_allclose(first, fusion.target_distribution(fusion.soft_assignment(z, state)), atol=0)


def test_missing_constraints_is_config_error(small):
    ds, branches, _ = small
    with pytest.raises(ConfigError):
        finetune(branches, ds, None, make_config())
    empty = ConstraintSet([], [], [], ds.n)
    with pytest.raises(ConfigError):
        finetune(branches, ds, empty, make_config())
    # the toggles lift the requirement
    finetune(branches, ds, None, make_config(semi=False, max_iter=3))
    finetune(branches, ds, None, make_config(lam=0.0, max_iter=3))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises_divergence(small):
    ds, branches, cs = small
    state, labels = init_cluster_state(branches, ds, 3)
    state.centers[0][0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        Finetuner(branches, ds, cs, make_config(), state, labels).run()
    assert info.value.iteration == 0


def test_constraint_gradient_matches_finite_differences(small):
    ds, branches, _ = small
    cs = ConstraintSet([0, 3, 5], [1, 4, 40], [1, -1, 1], ds.n)
    cfg = make_config(lam=0.3, gamma=0.0, batch_size=8)
    state, labels = init_cluster_state(branches, ds, 3)
    ft = Finetuner(branches, ds, cs, cfg, state, labels)
    grads = [[np.zeros_like(p) for p in b.encoder_params()] for b in ft.branches]
    scale = 0.25
    value = ft._constraint_grads(grads, scale)

    def objective():
        z = np.hstack([encode(b, x) for b, x in zip(ft.branches, ds.views)])
        return cfg.lam * scale * fusion.constraint_loss(z, cs)

    assert value == pytest.approx(objective(), rel=1e-12)
    r = np.random.default_rng(0)
    h = 1e-6
    for v, b in enumerate(ft.branches):
        params = b.encoder_params()
        for pi in r.choice(len(params), 2, replace=False):
            p = params[pi]
            flat = p.reshape(-1)
            for idx in r.choice(flat.size, 3, replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = objective()
                flat[idx] = orig - h
                down = objective()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = grads[v][pi].reshape(-1)[idx]
                assert an == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_record_csv(small):
    ds, branches, cs = small
    res = finetune(branches, ds, cs, make_config(max_iter=10))
    text = format_record_csv(res.history)
    lines = text.strip().split("\n")
    assert lines[0] == "iteration,L_rec,L_clu,L_con,L,change_fraction,ACC,NMI,ARI"
    assert len(lines) == len(res.history) + 1
    first = lines[1].split(",")
    assert first[0] == "0" and first[5] == ""
    assert float(first[6]) == res.history[0].metrics["ACC"]


def test_history_is_ordered(small):
    ds, branches, cs = small
    res = finetune(branches, ds, cs, make_config(max_iter=30))
    its = [r.iteration for r in res.history]
    assert its == sorted(its) and its[0] == 0
    for r in res.history:
        expected = r.losses.L_rec + 0.1 * r.losses.L_clu + 1e-6 * r.losses.L_con
        assert r.losses.L == pytest.approx(expected, rel=1e-12)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_post_pretrain_roundtrip(small, tmp_path):
    ds, branches, _ = small
    save_checkpoint(tmp_path / "a.ckpt", branches)
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.state is None and ck.progress is None
    for a, b in zip(branches, ck.branches):
        for p, q in zip(a.params(), b.params()):
            assert p.tobytes() == q.tobytes()


def test_checkpoint_empty_history_roundtrip(small, tmp_path):
    ds, branches, cs = small
    state, labels = init_cluster_state(branches, ds, 3)
    ft = Finetuner(branches, ds, cs, make_config(), state, labels)
    save_finetuner(tmp_path / "f.ckpt", ft)
    ck = load_checkpoint(tmp_path / "f.ckpt")
    back = Finetuner.resume(ck, ds, cs)
    assert back.history == [] and back.t == 0
    for p, q in zip(state.params(), ck.state.params()):
        assert p.tobytes() == q.tobytes()
    assert back.progress_dict() == ft.progress_dict()


def test_mid_finetune_resume_identical_trajectory(small, tmp_path):
    ds, branches, cs = small
    cfg = make_config(max_iter=30, update_interval=6)
    state, labels = init_cluster_state(branches, ds, 3)
    ref = Finetuner(branches, ds, cs, cfg, state, labels).run()

    ft = Finetuner(branches, ds, cs, cfg, state, labels)
    for _ in range(14):
        ft.step()
    save_finetuner(tmp_path / "mid.ckpt", ft)
    resumed = Finetuner.resume(load_checkpoint(tmp_path / "mid.ckpt"), ds, cs).run()

    assert resumed.iterations == ref.iterations
    np.testing.assert_array_equal(resumed.labels, ref.labels)
    assert [r.to_dict() for r in resumed.history] == [r.to_dict() for r in ref.history]
    for a, b in zip(ref.state.params(), resumed.state.params()):
        assert a.tobytes() == b.tobytes()
    for x, y in zip(ref.branches, resumed.branches):
        for a, b in zip(x.params(), y.params()):
            assert a.tobytes() == b.tobytes()


def test_checkpoint_errors(small, tmp_path):
    ds, branches, _ = small
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, branches)
    text = path.read_text()
    (tmp_path / "v.ckpt").write_text(text.replace("MVSC-CHECKPOINT 1", "MVSC-CHECKPOINT 2", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    with pytest.raises(PreconditionError):
        Finetuner.resume(load_checkpoint(path), ds)
