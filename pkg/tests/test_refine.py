import numpy as np
import pytest

from conftest import front_view, random_scene, ring_views
from freefix.config import RefineConfig
from freefix.errors import InvariantError, RefinementError, ShapeMismatchError
from freefix.images import AttributeImage
from freefix.metrics import psnr
from freefix.refine import (ROLE_CURRENT, ROLE_FIXED, ROLE_TRAIN, AffineColor, FixedViewSet, SceneOptimizer,
                            ViewChoice, affine_apply, current_period, fit_scene, photometric_loss, refine_3d,
                            refine_step, sample_view)
from freefix.render import ParamGradients, render_color
from freefix.scene import GaussianScene, ViewSet
from freefix.seeding import make_rng
from freefix.synthetic import make_synthetic_scene

PLANTED_A_F = np.diag([0.92, 1.06, 0.96])
PLANTED_A_B = np.array([0.03, -0.02, 0.02])


def _train_set(scene, count=3, size=24):
    views = ring_views(count, size)
    return views.with_images([render_color(v, scene) for v in views])


# ============================================================================
# LOSS AND AFFINE
# ============================================================================

def test_affine_apply_identity_and_planted():
    img = AttributeImage(np.full((2, 2, 3), 0.5))
    assert np.array_equal(affine_apply(img, AffineColor.identity()).data, img.data)
    planted = affine_apply(img, AffineColor(PLANTED_A_F, PLANTED_A_B)).data[0, 0]
    assert np.allclose(planted, 0.5 * np.diag(PLANTED_A_F) + PLANTED_A_B)


def test_affine_rejects_non_finite():
    with pytest.raises(InvariantError):
        AffineColor(np.full((3, 3), np.nan), np.zeros(3))


@pytest.mark.parametrize("lambda_s", [0.0, 0.2, 1.0])
def test_photometric_loss_gradient(lambda_s):
    rng = make_rng(2)
    pred = AttributeImage(rng.uniform(0, 1, (12, 12, 3)))
    target = AttributeImage(rng.uniform(0, 1, (12, 12, 3)))
    loss, adjoint = photometric_loss(pred, target, lambda_s)
    assert loss >= 0.0
    h = 1e-7
    for i, j, c in [(0, 0, 0), (5, 7, 1), (11, 3, 2)]:
        plus, minus = pred.data.copy(), pred.data.copy()
        plus[i, j, c] += h
        minus[i, j, c] -= h
        numeric = (photometric_loss(AttributeImage(plus), target, lambda_s)[0]
                   - photometric_loss(AttributeImage(minus), target, lambda_s)[0]) / (2 * h)
        assert adjoint.data[i, j, c] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_photometric_loss_is_zero_on_target():
    img = AttributeImage(np.full((12, 12, 3), 0.3))
    loss, _ = photometric_loss(img, img, 0.2)
    assert loss == pytest.approx(0.0, abs=1e-12)


# ============================================================================
# SAMPLING
# ============================================================================

def test_current_period_thirds():
    assert [current_period(s, 9) for s in range(9)] == [3, 3, 3, 5, 5, 5, 8, 8, 8]


def test_current_view_cadence():
    scene = random_scene(0)
    train = _train_set(scene)
    fixed = FixedViewSet()
    for k in range(2):
        fixed.append(front_view(24, name=f"f{k}"), AttributeImage(np.zeros((24, 24, 3))))
    rng = make_rng(0)
    total = 30
    roles = [sample_view(s, total, train, fixed, 1, rng).role for s in range(total)]
    current_steps = [s for s, r in enumerate(roles) if r == ROLE_CURRENT]
    assert current_steps == [0, 3, 6, 9, 10, 15, 24]
    assert {ROLE_TRAIN, ROLE_FIXED} & set(roles)


def test_fixed_set_draw_frequency_matches_p_fixed():
    blank = AttributeImage(np.zeros((8, 8, 3)))
    train = ring_views(2, 8).with_images([blank, blank])
    fixed = FixedViewSet()
    for k in range(3):
        fixed.append(front_view(8, name=f"f{k}"), blank)
    rng = make_rng(4)
    draws = 100_000
    # step 1 of 300 is never a current-view step
    choices = [sample_view(1, 300, train, fixed, 2, rng, p_fixed=0.25) for _ in range(draws)]
    from_fixed = [c for c in choices if c.role == ROLE_FIXED]
    assert all(c.index != 2 for c in from_fixed)
    assert abs(len(from_fixed) - 0.25 * draws) <= 3.0 * np.sqrt(draws * 0.25 * 0.75)


def test_sampling_without_training_views_uses_fixed_entries():
    fixed = FixedViewSet()
    fixed.append(front_view(16), AttributeImage(np.zeros((16, 16, 3))))
    choice = sample_view(1, 10, ViewSet([]), fixed, 0, make_rng(0))
    assert choice.role == ROLE_CURRENT
    with pytest.raises(InvariantError):
        sample_view(0, 10, ViewSet([]), FixedViewSet(), None, make_rng(0))


def test_fixed_set_checks_image_size():
    with pytest.raises(ShapeMismatchError):
        FixedViewSet().append(front_view(16), AttributeImage(np.zeros((8, 8, 3))))


# ============================================================================
# OPTIMIZER AND STEPS
# ============================================================================

def test_optimizer_keeps_parameters_valid():
    scene = random_scene(1)
    opt = SceneOptimizer(scene, RefineConfig(lr_eta=10.0, lr_rgb=10.0, lr_s=10.0))
    huge = ParamGradients.zeros(len(scene))
    huge.eta[:] = -1.0
    huge.rgb[:] = 1.0
    huge.s[:] = 1.0
    huge.q[:] = 0.3
    opt.apply(huge)
    updated = opt.scene()
    assert np.all(updated.eta <= 1.0) and np.all(updated.rgb >= 0.0)
    assert np.all(updated.s >= 1e-6)
    assert np.allclose(np.linalg.norm(updated.q, axis=1), 1.0)


def test_frozen_groups_do_not_move():
    scene = random_scene(2)
    opt = SceneOptimizer(scene, RefineConfig(frozen_groups=("mu", "q")))
    grads = ParamGradients.zeros(len(scene))
    grads.mu[:] = 1.0
    grads.eta[:] = 1.0
    opt.apply(grads)
    assert np.array_equal(opt.scene().mu, scene.mu)
    assert not np.array_equal(opt.scene().eta, scene.eta)


def test_refine_step_rejects_non_finite_loss(monkeypatch):
    scene = random_scene(3)
    view = front_view(16)
    choice = ViewChoice(view, AttributeImage(np.zeros((16, 16, 3))), ROLE_TRAIN, 0)
    opt = SceneOptimizer(scene, RefineConfig())
    monkeypatch.setattr("freefix.refine.photometric_loss",
                        lambda pred, target, lam: (float("nan"), AttributeImage(np.zeros(pred.shape))))
    with pytest.raises(RefinementError):
        refine_step(opt, choice, RefineConfig())
    assert opt.scene().fields_equal(scene)


def test_refine_step_lowers_loss_on_its_view():
    truth = random_scene(4)
    start = truth.replace(rgb=np.clip(truth.rgb + 0.2, 0.0, 1.0))
    view = front_view(16)
    choice = ViewChoice(view, render_color(view, truth), ROLE_TRAIN, 0)
    config = RefineConfig(lambda_s=0.0, lr_rgb=1e-2, frozen_groups=("mu", "q", "s", "eta"))
    opt = SceneOptimizer(start, config)
    first = refine_step(opt, choice, config)
    for step in range(1, 30):
        last = refine_step(opt, choice, config, step=step)
    assert last.loss < first.loss


def test_zero_steps_return_the_input_scene():
    scene = random_scene(5)
    assert refine_3d(scene, _train_set(scene), FixedViewSet(), None, RefineConfig(steps=0)) is scene


def test_current_index_must_exist():
    with pytest.raises(InvariantError):
        refine_3d(random_scene(5), ViewSet([]), FixedViewSet(), 0, RefineConfig(steps=1))


def test_single_gaussian_color_converges():
    truth = GaussianScene(mu=[[0, 0, 0]], q=[[1, 0, 0, 0]], s=[[0.4, 0.4, 0.4]], eta=[0.9],
                          rgb=[[0.8, 0.3, 0.1]])
    start = truth.replace(rgb=[[0.4, 0.6, 0.5]])
    train = _train_set(truth, count=2, size=16)
    config = RefineConfig(steps=500, lambda_s=0.0, lr_rgb=2e-2, lr_final_ratio=1e-3,
                          frozen_groups=("mu", "q", "s", "eta"))
    fitted = fit_scene(start, train, config)
    assert np.allclose(fitted.rgb, truth.rgb, atol=1e-3, rtol=0.0)


def test_refinement_is_deterministic(tmp_path):
    truth = random_scene(6)
    start = truth.replace(rgb=np.clip(truth.rgb * 0.8, 0.0, 1.0))
    train = _train_set(truth)
    config = RefineConfig(steps=10, seed=3)
    a = fit_scene(start, train, config, log_path=tmp_path / "a.csv")
    b = fit_scene(start, train, config, log_path=tmp_path / "b.csv")
    assert a.fields_equal(b)
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_stage_keeps_training_views_and_fits_the_current_view(small_spec):
    gt, train, extrapolated = make_synthetic_scene(small_spec)
    noise = make_rng(9).uniform(-0.08, 0.08, gt.rgb.shape)
    start = gt.replace(rgb=np.clip(gt.rgb + noise, 0.0, 1.0))
    fixed = FixedViewSet()
    fixed.append(extrapolated[0], extrapolated.images[0])

    def train_psnr(scene):
        return np.mean([psnr(render_color(v, scene).clamped(), img) for v, img in zip(train, train.images)])

    def current_psnr(scene):
        return psnr(render_color(extrapolated[0], scene).clamped(), extrapolated.images[0])

    refined = refine_3d(start, train, fixed, 0, RefineConfig(steps=60, lr_final_ratio=0.1))
    assert train_psnr(refined) >= train_psnr(start) - 0.5
    assert current_psnr(refined) > current_psnr(start)


@pytest.mark.slow
def test_planted_affine_is_absorbed_by_the_correction():
    truth = random_scene(7, 12)
    start = truth.replace(rgb=np.clip(truth.rgb + make_rng(7).uniform(-0.03, 0.03, truth.rgb.shape), 0.0, 1.0))
    train = _train_set(truth, count=3, size=24)
    planted = AffineColor(PLANTED_A_F, PLANTED_A_B)

    fixed = FixedViewSet()
    for k, eye in enumerate(((1.2, 0.3, -2.8), (-1.2, -0.3, -2.8))):
        view = front_view(24, eye=eye, name=f"gen_{k}")
        fixed.append(view, affine_apply(render_color(view, truth), planted))

    config = RefineConfig(steps=600, lambda_s=0.0, lr_rgb=5e-3, lr_affine=1e-2, w_g=1.0, p_fixed=0.5,
                          frozen_groups=("mu", "q", "s", "eta"))
    refined = refine_3d(start, train, fixed, 1, config)

    for entry in fixed:
        assert np.allclose(entry.affine.A_f, PLANTED_A_F, atol=5e-2)
        assert np.allclose(entry.affine.A_b, PLANTED_A_B, atol=5e-2)
    assert np.allclose(refined.rgb, truth.rgb, atol=5e-2)
    assert psnr(render_color(train[0], refined), train.images[0]) > 30.0
