import math
import time

import numpy as np
import pandas as pd
import pytest

from conftest import front_camera, random_cloud
from errors import SceneFormatError, TrainingDivergedError, ValidationError
from gaussians import GaussianCloud, RenderSettings, logit, rasterize
from imaging import BinaryMask, Raster
from metrics import fps_benchmark, l1_metric, psnr
from scene_io import SyntheticSpec, generate_synthetic, load_scene, load_splats
from training import (LOSS_COLUMNS, Adam, GradientAccumulator, TrainConfig, TrainingView, attention_prune,
                      attention_score_splats, densify, train, view_attention, write_loss_csv)


def quiet(**overrides):
    """Config with pruning pushed out of the way"""
    base = dict(iterations=10, prune_interval=10 ** 6, final_prune=False, report_interval=1)
    base.update(overrides)
    return TrainConfig(**base)


def fixture_views(rng, n_target=5, size=16):
    cam = front_camera(size)
    target = rasterize(random_cloud(rng, n_target), cam, RenderSettings(size, size))
    return [TrainingView(target, cam)]


def one_splat(position=(0.0, 0.0, 0.0), log_scale=-3.0, opacity=0.5):
    return GaussianCloud(np.array([position], dtype=float), [[1.0, 0.0, 0.0, 0.0]], np.full((1, 3), log_scale),
                         [logit(opacity)], np.zeros((1, 3)))


# ========== SCORING AND PRUNING ==========

def test_score_is_mean_over_views():
    cams = [front_camera(16), front_camera(16, distance=4.0)]
    maps = [Raster(np.full((16, 16), 0.25)), Raster(np.full((16, 16), 0.75))]
    assert attention_score_splats(one_splat(), cams, maps)[0] == pytest.approx(0.5)
    assert attention_score_splats(one_splat(), cams, maps, reduce="max")[0] == pytest.approx(0.75)
    assert attention_score_splats(one_splat(), cams[:1], [Raster(np.ones((16, 16)))])[0] == pytest.approx(1.0)


def test_invisible_splat_scores_zero():
    behind = one_splat(position=(0.0, 0.0, -10.0))
    assert attention_score_splats(behind, [front_camera(16)], [Raster(np.ones((16, 16)))])[0] == 0.0


def test_score_alignment_is_checked():
    with pytest.raises(ValidationError):
        attention_score_splats(one_splat(), [front_camera(16)], [])


def test_prune_known_values(rng):
    cloud = random_cloud(rng, 3, opacity=(0.5, 0.9))
    pruned = attention_prune(cloud, np.array([0.9, 0.04, 0.5]), TrainConfig())
    assert len(pruned) == 2
    assert np.array_equal(pruned.positions, cloud.positions[[0, 2]])
    assert len(attention_prune(cloud, np.zeros(3), TrainConfig())) == 0
    identity = attention_prune(cloud, np.zeros(3), TrainConfig(prune_attention_threshold=0.0,
                                                               prune_opacity_threshold=0.0))
    assert np.array_equal(identity.positions, cloud.positions)


def test_prune_drops_transparent_splats(rng):
    cloud = random_cloud(rng, 2)
    cloud.opacity_logits[0] = logit(0.001)
    assert len(attention_prune(cloud, np.ones(2), TrainConfig())) == 1


# ========== DENSIFICATION ==========

def _accum(values):
    return GradientAccumulator(np.asarray(values, dtype=float), np.ones(len(values), dtype=int))


def test_densify_below_threshold_is_identity():
    cloud = one_splat()
    out = densify(cloud, _accum([1e-5]), TrainConfig())
    assert len(out) == 1 and np.array_equal(out.positions, cloud.positions)


def test_small_splat_is_cloned():
    cloud = one_splat(log_scale=math.log(0.001))
    out = densify(cloud, _accum([1e-3]), TrainConfig(), extent=1.0)
    assert len(out) == 2
    assert np.array_equal(out.positions[0], out.positions[1])
    assert np.array_equal(out.log_scales[0], out.log_scales[1])


def test_large_splat_is_split():
    cloud = one_splat(log_scale=math.log(0.5))
    out = densify(cloud, _accum([1e-3]), TrainConfig(), extent=1.0, seed=2)
    assert len(out) == 2
    np.testing.assert_allclose(out.log_scales, math.log(0.5) - math.log(1.6))
    assert not np.array_equal(out.positions[0], out.positions[1])


def test_densify_respects_max_splats(rng):
    cloud = random_cloud(rng, 4, scale=(0.001, 0.002))
    out = densify(cloud, _accum([1.0] * 4), TrainConfig(max_splats=6))
    assert len(out) == 6
    assert len(densify(cloud, _accum([1.0] * 4), TrainConfig(max_splats=4))) == 4


def test_gradient_accumulator_mean():
    acc = GradientAccumulator.zeros(3)
    acc.add(np.array([1.0, 2.0, 3.0]), np.array([True, False, True]))
    acc.add(np.array([3.0, 2.0, 5.0]), np.array([True, False, False]))
    np.testing.assert_allclose(acc.mean(), [2.0, 0.0, 3.0])


# ========== OPTIMIZER ==========

def test_adam_first_step_moves_by_learning_rate(rng):
    cloud = random_cloud(rng, 2)
    before = cloud.copy()
    grads = random_cloud(rng, 2)
    opt = Adam(TrainConfig().learning_rates, 2)
    opt.step(cloud, grads)
    np.testing.assert_allclose(before.positions - cloud.positions, 1.6e-4 * np.sign(grads.positions), rtol=1e-9)


def test_adam_state_follows_pruning():
    opt = Adam(TrainConfig().learning_rates, 4)
    opt.m["positions"][:] = np.arange(4)[:, None]
    opt.subset(np.array([True, False, True, False]))
    opt.extend(3)
    assert opt.m["positions"].shape == (5, 3)
    np.testing.assert_allclose(opt.m["positions"][:, 0], [0, 2, 0, 0, 0])
    assert opt.v["opacity_logits"].shape == (5,)


# ========== TRAINING LOOP ==========

def test_zero_iterations_returns_init(rng):
    init = random_cloud(rng, 4)
    cloud, reports = train(fixture_views(rng), init, TrainConfig(iterations=0), RenderSettings(16, 16))
    assert reports == []
    assert np.array_equal(cloud.positions, init.positions)
    assert cloud is not init


def test_reports_follow_interval(rng):
    _, reports = train(fixture_views(rng), random_cloud(rng, 4), quiet(iterations=7, report_interval=3),
                       RenderSettings(16, 16))
    assert [r.iteration for r in reports] == [0, 3, 6]
    assert all(r.splat_count == 4 for r in reports)
    assert all(-1.0 <= r.ssim <= 1.0 and r.combined >= 0 for r in reports)


def test_disabled_attention_equals_all_ones_weights(rng):
    views = fixture_views(rng)
    init = random_cloud(rng, 5)
    ones = [TrainingView(views[0].image, views[0].camera, attention=Raster(np.ones((16, 16))))]
    off = train(views, init, quiet(attention_enabled=False), RenderSettings(16, 16))
    on = train(ones, init, quiet(attention_enabled=True), RenderSettings(16, 16))
    assert off[1] == on[1]
    assert np.array_equal(off[0].positions, on[0].positions)


def test_training_is_deterministic(rng):
    views = fixture_views(rng) * 2
    init = random_cloud(rng, 5)
    a = train(views, init, quiet(seed=3), RenderSettings(16, 16))
    b = train(views, init, quiet(seed=3), RenderSettings(16, 16))
    assert a[1] == b[1]


def test_short_fit_lowers_loss(rng):
    views = fixture_views(rng)
    init = random_cloud(rng, 5)
    cfg = quiet(iterations=150, report_interval=149, attention_enabled=False, lr_position=1e-3, lr_color=1e-2)
    _, reports = train(views, init, cfg, RenderSettings(16, 16))
    assert reports[-1].combined < reports[0].combined


def test_densified_training_stays_under_cap(rng):
    cfg = quiet(iterations=20, densify_enabled=True, densify_interval=5, densify_grad_threshold=0.0,
                max_splats=9)
    cloud, _ = train(fixture_views(rng), random_cloud(rng, 5), cfg, RenderSettings(16, 16))
    assert len(cloud) <= 9


def test_final_prune_uses_attention(rng):
    views = [TrainingView(v.image, v.camera, attention=Raster(np.zeros((16, 16)))) for v in fixture_views(rng)]
    cloud, _ = train(views, random_cloud(rng, 5), TrainConfig(iterations=2), RenderSettings(16, 16))
    assert len(cloud) == 0


def test_non_finite_target_aborts(rng):
    view = fixture_views(rng)[0]
    data = view.image.data.copy()
    data[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train([TrainingView(Raster(data), view.camera)], random_cloud(rng, 3), quiet(), RenderSettings(16, 16))
    assert err.value.report.iteration == 0


def test_training_validates_views(rng):
    with pytest.raises(ValidationError):
        train([], random_cloud(rng, 3), quiet(), RenderSettings(16, 16))
    with pytest.raises(ValidationError):
        train(fixture_views(rng, size=8), random_cloud(rng, 3), quiet(), RenderSettings(16, 16))


def test_view_attention_sources(rng):
    view = fixture_views(rng)[0]
    assert np.all(view_attention([view], TrainConfig(attention_enabled=False))[0].data == 1.0)
    attn = view_attention([view], TrainConfig())[0]
    assert attn.channels == 1 and attn.data.max() == 1.0


def test_explicit_attention_source_overrides_sidecar(rng):
    size = 16
    image = Raster(np.kron(rng.uniform(size=(4, 4, 3)), np.ones((4, 4, 1))))
    bits = np.zeros((size, size), dtype=bool)
    bits[4:12, 4:12] = True
    view = TrainingView(image, front_camera(size), BinaryMask(bits), attention=Raster(np.zeros((size, size))))
    sidecar = view_attention([view], TrainConfig(attention_source="sidecar"))[0]
    composited = view_attention([view], TrainConfig(attention_source="composited"))[0]
    original = view_attention([view], TrainConfig(attention_source="original"))[0]
    assert np.all(sidecar.data == 0.0)
    assert composited.data.max() == 1.0 and original.data.max() == 1.0
    assert not np.array_equal(composited.data, original.data)
    # outside the mask the composited image is flat white
    assert np.all(composited.plane[0:2, :] == 0.0) and original.plane[0:2, :].max() > 0.0
    with pytest.raises(ValidationError):
        TrainConfig(attention_source="saliency")


# ========== CONFIG AND OUTPUT ==========

def test_config_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk preset\niterations = 2000\nattention_enabled = off\nssim_weight = 0.3\n")
    cfg = TrainConfig.from_file(str(path))
    assert cfg.iterations == 2000 and cfg.attention_enabled is False and cfg.ssim_weight == 0.3
    path.write_text("iterations = 10\n\nwarmup = 3\n")
    with pytest.raises(SceneFormatError, match="line 3: unknown key 'warmup'"):
        TrainConfig.from_file(str(path))
    path.write_text("iterations = many\n")
    with pytest.raises(SceneFormatError, match="line 1: bad value for iterations"):
        TrainConfig.from_file(str(path))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr_position=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(prune_attention_threshold=1.5)
    with pytest.raises(ValidationError):
        TrainConfig(iterations=-1)


def test_loss_csv(tmp_path, rng):
    _, reports = train(fixture_views(rng), random_cloud(rng, 3), quiet(iterations=3), RenderSettings(16, 16))
    write_loss_csv(reports, str(tmp_path / "loss.csv"))
    frame = pd.read_csv(tmp_path / "loss.csv")
    assert list(frame.columns) == LOSS_COLUMNS
    assert frame["iteration"].tolist() == [0, 1, 2]


# ========== ACCEPTANCE ==========

def _split(scene, name):
    return [TrainingView(v.image, v.camera, v.mask, v.attention) for v in scene.split(name)]


def _perturbed(truth, sigma, seed=0, zero_colors=False):
    rng = np.random.default_rng(seed)
    init = truth.copy()
    init.positions += rng.normal(0.0, sigma, init.positions.shape)
    if zero_colors:
        init.colors = np.zeros_like(init.colors)
    else:
        init.colors += rng.normal(0.0, sigma, init.colors.shape)
    return init


@pytest.mark.slow
def test_self_consistency_fit(phantom_dir):
    scene = load_scene(str(phantom_dir / "scene.json"))
    truth = load_splats(str(phantom_dir / "truth" / "cloud.ply"))
    assert len(truth) == 20 and len(scene.split("train")) == 4
    settings = RenderSettings(64, 64)
    cfg = TrainConfig(iterations=2000, attention_enabled=False, final_prune=False, prune_interval=10 ** 6,
                      report_interval=500)
    start = time.perf_counter()
    cloud, _ = train(_split(scene, "train"), _perturbed(truth, 0.05), cfg, settings)
    assert time.perf_counter() - start < 600
    (held_out,) = _split(scene, "eval")
    rendered = rasterize(cloud, held_out.camera, settings)
    assert l1_metric(rendered, held_out.image) < 0.01
    assert psnr(rendered, held_out.image) > 30.0


@pytest.mark.slow
def test_attention_improves_detail_regions(tmp_path):
    spec = SyntheticSpec(seed=21, object="phantom", views=4, size=64, splats=30, arc=90.0)
    generate_synthetic(spec, str(tmp_path))
    scene = load_scene(str(tmp_path / "scene.json"))
    truth = load_splats(str(tmp_path / "truth" / "cloud.ply"))
    init = _perturbed(truth, 0.05, zero_colors=True)
    views = _split(scene, "train")
    settings = RenderSettings(64, 64)
    # weighted L1 alone; the SSIM term carries no attention weight
    common = dict(iterations=600, ssim_weight=0.0, final_prune=False, prune_interval=10 ** 6, report_interval=100)
    plain, _ = train(views, init, TrainConfig(attention_enabled=False, **common), settings)
    focused, _ = train(views, init, TrainConfig(attention_enabled=True, **common), settings)
    attn = view_attention(views, TrainConfig())

    def errors(cloud):
        detail, overall = [], []
        for view, a in zip(views, attn):
            diff = np.abs(rasterize(cloud, view.camera, settings).data - view.image.data)
            detail.append(diff[a.plane > 0.5].mean())
            overall.append(diff.mean())
        return float(np.mean(detail)), float(np.mean(overall))

    plain_detail, plain_overall = errors(plain)
    focused_detail, focused_overall = errors(focused)
    assert focused_detail < plain_detail
    assert focused_overall <= 1.1 * plain_overall


@pytest.mark.slow
def test_attention_pruning_shrinks_model(tmp_path):
    spec = SyntheticSpec(seed=5, object="phantom", views=4, eval_views=1, size=64, splats=20, arc=90.0,
                         background="clutter")
    generate_synthetic(spec, str(tmp_path))
    scene = load_scene(str(tmp_path / "scene.json"))
    truth = load_splats(str(tmp_path / "truth" / "cloud.ply"))
    # splats behind every camera of the ring, as a background pass can leave them
    rng = np.random.default_rng(3)
    hidden = random_cloud(rng, 8)
    hidden.positions = np.column_stack([rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8), rng.uniform(-12, -10, 8)])
    full = truth.concat(hidden)
    views = _split(scene, "train")
    cfg = TrainConfig()
    scores = attention_score_splats(full, [v.camera for v in views], view_attention(views, cfg))
    pruned = attention_prune(full, scores, cfg)
    assert len(pruned) <= 0.8 * len(full)

    settings = RenderSettings(64, 64)
    (held_out,) = _split(scene, "eval")
    before = psnr(rasterize(full, held_out.camera, settings), held_out.image)
    after = psnr(rasterize(pruned, held_out.camera, settings), held_out.image)
    assert before - after < 1.0

    cams = [v.camera for v in views]
    fps_full = max(fps_benchmark(full, cams, settings, 20) for _ in range(3))
    fps_pruned = max(fps_benchmark(pruned, cams, settings, 20) for _ in range(3))
    # timing noise
    assert fps_pruned >= 0.9 * fps_full
