"""Diffusion harness: schedules, noising, the denoiser, training machinery."""

import numpy as np
import pytest

from moelab.denoiser import DenoiserConfig, denoiser_forward, init_denoiser
from moelab.diffusion import DiffusionBatch, SyntheticTask, build_schedule, forward_diffuse, make_target
from moelab.routing import ConfigError, StateError
from moelab.training import Trainer, TrainerConfig, load_checkpoint, save_checkpoint
from moelab.losses import LossWeights


SMALL = DenoiserConfig(
    layers=2, model_dim=16, tokens=8, num_classes=3, num_experts=4, k=2,
    dense_hidden=32, total_steps=40,
)


def small_trainer(seed=0, **model_overrides):
    from dataclasses import replace

    model = replace(SMALL, **model_overrides) if model_overrides else SMALL
    return Trainer(TrainerConfig(model=model, batch_size=6, seed=seed))


# ----------------------------------------------------------------------
# schedules


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_endpoints_and_monotonic(kind):
    sched = build_schedule(100, kind)
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[-1] < 1e-3
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.alpha_bar > 0)


def test_schedule_rejects_tiny_t():
    with pytest.raises(ConfigError):
        build_schedule(1)


def test_forward_diffuse_identity_at_t0():
    sched = build_schedule(50)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4, 5))
    eps = rng.normal(size=(3, 4, 5))
    x_t = forward_diffuse(x0, np.zeros(3, dtype=int), eps, sched)
    assert np.array_equal(x_t, x0)


def test_forward_diffuse_pure_noise_at_terminal():
    sched = build_schedule(50)
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(2, 3, 4))
    eps = rng.normal(size=(2, 3, 4))
    x_T = forward_diffuse(x0, np.full(2, 50), eps, sched)
    floor = np.sqrt(sched.alpha_bar[-1])
    assert np.allclose(x_T, eps, atol=floor * np.abs(x0).max() + 1e-6)


def test_forward_diffuse_rejects_out_of_range_t():
    sched = build_schedule(10)
    with pytest.raises(ConfigError):
        forward_diffuse(np.zeros((1, 2, 2)), np.array([11]), np.zeros((1, 2, 2)), sched)


def test_forward_diffuse_second_moment_monte_carlo():
    # E||x_t||^2 = ab*||x0||^2 + (1-ab)*dim for unit Gaussian noise
    sched = build_schedule(100)
    rng = np.random.default_rng(2)
    t = 60
    dim = 8
    x0 = rng.normal(size=dim)
    n = 10_000
    eps = rng.normal(size=(n, dim))
    ab = sched.alpha_bar[t]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    observed = (x_t**2).sum(axis=1)
    expected = ab * (x0**2).sum() + (1 - ab) * dim
    stderr = observed.std() / np.sqrt(n)
    assert abs(observed.mean() - expected) < 3 * stderr


def test_make_target_three_parameterizations():
    sched = build_schedule(20)
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(2, 3, 4))
    eps = rng.normal(size=(2, 3, 4))
    t = np.array([5, 15])
    assert np.array_equal(make_target(x0, eps, t, sched, "eps"), eps)
    assert np.array_equal(make_target(x0, eps, t, sched, "x0"), x0)
    v = make_target(x0, eps, t, sched, "v")
    ab = sched.alpha_bar[t][:, None, None]
    assert np.allclose(v, np.sqrt(1 - ab) * eps - np.sqrt(ab) * x0, atol=1e-15)
    with pytest.raises(ConfigError):
        make_target(x0, eps, t, sched, "score")


def test_velocity_endpoints():
    # alpha_bar = 1 -> v = -x0 ; alpha_bar ~ 0 -> v ~ eps
    sched = build_schedule(30)
    x0 = np.ones((1, 2, 2))
    eps = np.full((1, 2, 2), 2.0)
    v0 = make_target(x0, eps, np.array([0]), sched, "v")
    assert np.allclose(v0, -x0, atol=1e-12)
    vT = make_target(x0, eps, np.array([30]), sched, "v")
    assert np.allclose(vT, eps, atol=0.1)


# ----------------------------------------------------------------------
# synthetic task


def test_synthetic_task_deterministic():
    a = SyntheticTask(num_classes=3, tokens=6, dim=4, seed=9)
    b = SyntheticTask(num_classes=3, tokens=6, dim=4, seed=9)
    ra, rb = np.random.default_rng(1), np.random.default_rng(1)
    xa, ca = a.sample_x0(ra, 5)
    xb, cb = b.sample_x0(rb, 5)
    assert np.array_equal(xa, xb) and np.array_equal(ca, cb)


def test_synthetic_task_class_separation():
    task = SyntheticTask(num_classes=2, tokens=4, dim=16, seed=11, class_separation=5.0)
    gap = np.linalg.norm(task.means[0] - task.means[1])
    assert gap > 2.0


def test_synthetic_task_variance_profile():
    task = SyntheticTask(num_classes=2, tokens=5, dim=3, seed=13)
    rng = np.random.default_rng(17)
    x0, c = task.sample_x0(rng, 10_000)
    centered = x0 - task.means[c]
    observed = centered.std(axis=(0, 2))
    assert np.allclose(observed, task.token_sigma, rtol=0.05)


# ----------------------------------------------------------------------
# denoiser


def test_denoiser_initial_prediction_is_zero():
    params = init_denoiser(SMALL, 3)
    rng = np.random.default_rng(5)
    x_t = rng.normal(size=(4, SMALL.tokens, SMALL.model_dim))
    pred, outs = denoiser_forward(x_t, np.array([3, 7, 1, 9]), np.array([0, 1, 2, 0]), params)
    assert np.array_equal(pred.data, np.zeros_like(pred.data))
    assert len(outs) == SMALL.layers


def test_denoiser_prediction_shape_matches_target():
    params = init_denoiser(SMALL, 4)
    x_t = np.random.default_rng(6).normal(size=(2, SMALL.tokens, SMALL.model_dim))
    pred, _ = denoiser_forward(x_t, np.array([1, 2]), np.array([0, 1]), params)
    assert pred.shape == x_t.shape


def test_dense_twin_forward_matches_one_in_one():
    from dataclasses import replace

    moe_cfg = replace(SMALL, num_experts=1, k=1, force_unit_gate=True)
    moe = init_denoiser(moe_cfg, 21)
    dense = init_denoiser(replace(SMALL, dense=True, num_experts=1, k=1), 22)
    # graft the MoE expert weights into the dense twin
    for blk_moe, blk_dense in zip(moe.blocks, dense.blocks):
        blk_dense.ffn.w_in.data = blk_moe.moe.experts[0].w_in.data.copy()
        blk_dense.ffn.w_out.data = blk_moe.moe.experts[0].w_out.data.copy()
    for name in ("in_w", "in_b", "class_emb", "t_w1", "t_b1", "t_w2", "t_b2",
                 "final_mod_w", "final_mod_b", "out_w", "out_b"):
        getattr(dense, name).data = getattr(moe, name).data.copy()
    for blk_moe, blk_dense in zip(moe.blocks, dense.blocks):
        blk_dense.mod_w.data = blk_moe.mod_w.data.copy()
        blk_dense.mod_b.data = blk_moe.mod_b.data.copy()
        blk_dense.mix_w.data = blk_moe.mix_w.data.copy()
    # make the comparison non-trivial: randomize the adaptive layers
    rng = np.random.default_rng(23)
    for blk_moe, blk_dense in zip(moe.blocks, dense.blocks):
        w = rng.normal(scale=0.1, size=blk_moe.mod_w.data.shape)
        blk_moe.mod_w.data = w
        blk_dense.mod_w.data = w.copy()
    out_w = rng.normal(scale=0.1, size=moe.out_w.data.shape)
    moe.out_w.data = out_w
    dense.out_w.data = out_w.copy()

    x_t = rng.normal(size=(3, SMALL.tokens, SMALL.model_dim))
    t = np.array([5, 9, 2])
    c = np.array([0, 1, 2])
    pred_moe, _ = denoiser_forward(x_t, t, c, moe, mode="train")
    pred_dense, _ = denoiser_forward(x_t, t, c, dense)
    assert np.abs(pred_moe.data - pred_dense.data).max() < 1e-10


# ----------------------------------------------------------------------
# trainer


def test_zero_learning_rate_keeps_params_bit_exact():
    trainer = small_trainer()
    trainer.opt.lr = 0.0
    before = {name: t.data.copy() for name, t in trainer.params.named_tensors()}
    trainer.train_step()
    for name, t in trainer.params.named_tensors():
        assert np.array_equal(before[name], t.data), name


@pytest.mark.slow
def test_loss_decreases_over_training():
    first, last = [], []
    for seed in (0, 1, 2):
        trainer = small_trainer(seed=seed)
        records = [trainer.train_step() for _ in range(120)]
        first.append(np.mean([r.total for r in records[:10]]))
        last.append(np.mean([r.total for r in records[-10:]]))
    assert np.median(last) < np.median(first)


def test_log_record_schema():
    record = small_trainer().train_step()
    for col in ("step", "diffusion", "plr", "sim", "blc", "total", "max_vio", "comb_usage", "mean_active"):
        assert hasattr(record, col)
    row = record.csv_row()
    assert len(row.split(",")) == len(record.CSV_COLUMNS)


def test_checkpoint_resume_bit_exact(tmp_path):
    config = TrainerConfig(model=SMALL, batch_size=6, seed=3)
    straight = Trainer(config)
    for _ in range(8):
        straight.train_step()
    reference = straight.train_step()

    resumed = Trainer(config)
    for _ in range(8):
        resumed.train_step()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, resumed)
    restored = load_checkpoint(path, config)
    record = restored.train_step()
    assert record.total == reference.total
    for (name, a), (_, b) in zip(straight.params.named_tensors(), restored.params.named_tensors()):
        assert np.array_equal(a.data, b.data), name


def test_checkpoint_rejects_config_mismatch(tmp_path):
    config = TrainerConfig(model=SMALL, batch_size=6, seed=3)
    trainer = Trainer(config)
    trainer.train_step()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, trainer)
    other = TrainerConfig(model=SMALL, batch_size=12, seed=3)
    with pytest.raises(ConfigError) as err:
        load_checkpoint(path, other)
    assert "batch_size" in str(err.value)


def test_sampling_requires_thresholds():
    trainer = small_trainer(seed=5)
    with pytest.raises(StateError):
        trainer.sample(2, 0)


def test_sampling_smoke_and_determinism():
    trainer = small_trainer(seed=6)
    for _ in range(5):
        trainer.train_step()
    xa, alloc = trainer.sample(2, 1, rng=np.random.default_rng(99))
    xb, _ = trainer.sample(2, 1, rng=np.random.default_rng(99))
    assert np.array_equal(xa, xb)
    assert np.all(np.isfinite(xa))
    assert len(alloc) == SMALL.total_steps
    assert all(len(e["mean_active_per_layer"]) == SMALL.layers for e in alloc)


def test_sampler_allocation_matches_profile_on_same_masks():
    from moelab.metrics import allocation_profile

    trainer = small_trainer(seed=7)
    for _ in range(5):
        trainer.train_step()
    _, alloc = trainer.sample(3, 0, rng=np.random.default_rng(1), record_masks=True)
    entry = alloc[len(alloc) // 2]
    masks = entry["masks"][0]
    t = np.full(masks.shape[0], entry["t"])
    profile = allocation_profile(masks, t, SMALL.total_steps, buckets=4)
    assert abs(profile.overall_mean - entry["mean_active_per_layer"][0]) < 1e-12


@pytest.mark.slow
def test_infer_activation_rate_tracks_k_over_e():
    # small version of the threshold-consistency contract
    trainer = small_trainer(seed=8)
    cfg = trainer.config.model
    for _ in range(400):
        trainer.train_step()
    rng = np.random.default_rng(123)
    rates = []
    for _ in range(10):
        batch = trainer.task.sample_batch(rng, 16, trainer.schedule, cfg.parameterization)
        _, outs = trainer.forward(batch, mode="infer")
        for out in outs:
            rates.append(out.route.mask.mean())
    target = cfg.k / cfg.num_experts
    assert abs(np.mean(rates) - target) / target < 0.15


def test_end_to_end_gradients_match_finite_differences():
    from moelab import losses as L
    from moelab.losses import aux_inputs_from_routing
    from moelab.tensor import Tensor, backward, finite_difference_grad
    from moelab.denoiser import denoiser_forward

    trainer = small_trainer(seed=9)
    for _ in range(3):  # move off the zero-init point
        trainer.train_step()
    cfg = trainer.config
    batch = trainer.task.sample_batch(np.random.default_rng(7), 4, trainer.schedule, "eps")

    def total_for_current_params():
        pred, outs = denoiser_forward(batch.x_t, batch.t, batch.c, trainer.params, mode="eval")
        diff = L.diffusion_loss(pred, batch.y)
        aux = [aux_inputs_from_routing(o.route.mask, o.logits, cfg.model.k) for o in outs]
        plr = L.per_layer_reg_loss([o.y_hat for o in outs], batch.y)
        sim_terms = [L.router_similarity_loss(a) for a in aux]
        sim = sim_terms[0]
        for term in sim_terms[1:]:
            sim = sim + term
        sim = sim * (1.0 / len(sim_terms))
        total, _ = L.total_loss(diff, plr, sim, None, cfg.weights)
        return total

    loss = total_for_current_params()
    backward(loss, trainer.params.parameters())

    rng = np.random.default_rng(31)
    named = trainer.params.named_tensors()
    checked = 0
    for name, p in named:
        if p.data.size == 0 or rng.random() > 0.12:
            continue
        flat_idx = int(rng.integers(p.data.size))
        saved = p.data.copy()
        h = 1e-5

        def loss_at(value):
            mutated = saved.copy().reshape(-1)
            mutated[flat_idx] = value
            p.data = mutated.reshape(saved.shape)
            try:
                return total_for_current_params().item()
            finally:
                p.data = saved

        base_val = saved.reshape(-1)[flat_idx]
        fd = (loss_at(base_val + h) - loss_at(base_val - h)) / (2 * h)
        got = (p.grad if p.grad is not None else np.zeros_like(saved)).reshape(-1)[flat_idx]
        denom = max(abs(fd), abs(got), 1e-6)
        assert abs(fd - got) / denom < 1e-3, f"{name}[{flat_idx}]: fd={fd} got={got}"
        checked += 1
    assert checked >= 5
