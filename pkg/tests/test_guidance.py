import json
import os
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from freefix.config import GuidanceConfig
from freefix.confidence import ConfidenceMap
from freefix.errors import BridgeTimeoutError, ConfigError, DenoiserError, InvariantError
from freefix.guidance import (BridgeProvider, ConstantProvider, ExternalDenoiserBridge, IdentityDenoiser,
                              OracleProvider, PixelLatentCodec, add_noise, denoise_with_guidance, guided_step,
                              guided_x0, identity_denoiser, make_schedule, noisy_oracle_denoiser,
                              oracle_denoiser, predict_x0, provider_from_name)
from freefix.images import AttributeImage, read_pfm, write_pfm
from freefix.metrics import sign_test
from freefix.render import render_color
from freefix.seeding import make_rng

CONFIG = GuidanceConfig(steps=12, sigma_start=0.8, beta=0.5, rho=0.25, seed=5)


def _image(seed, shape=(16, 16, 3)):
    return AttributeImage(make_rng(seed).uniform(0.0, 1.0, shape))


def _masks(value, config=CONFIG, size=16):
    return {g: AttributeImage(np.full((size, size, 1), value)) for g in config.gammas}


# ============================================================================
# SCHEDULE AND STEP ALGEBRA
# ============================================================================

def test_linear_schedule():
    schedule = make_schedule(4, 0.8)
    assert schedule.sigmas == pytest.approx((0.8, 0.6, 0.4, 0.2, 0.0))
    assert schedule.sigma(4) == pytest.approx(0.8) and schedule.sigma(0) == 0.0
    assert schedule.schedule_id == "linear-T4-s0.8"
    with pytest.raises(InvariantError):
        make_schedule(1, 0.5)
    with pytest.raises(InvariantError):
        make_schedule(10, 1.5)


def test_guided_step_equals_substitution_form():
    rng = make_rng(123)
    for _ in range(1000):
        sigma_t = rng.uniform(0.01, 1.0)
        sigma_prev = rng.uniform(0.0, sigma_t * 0.999)
        x_t = AttributeImage(rng.standard_normal((2, 2, 3)))
        x0 = AttributeImage(rng.standard_normal((2, 2, 3)))
        stepped = guided_step(x_t, x0, sigma_t, sigma_prev).data
        substituted = x0.data + sigma_prev * (x_t.data - x0.data) / sigma_t
        assert np.allclose(stepped, substituted, rtol=1e-6, atol=1e-12)


def test_guided_step_rejects_non_decreasing_sigmas():
    x = _image(0)
    with pytest.raises(InvariantError):
        guided_step(x, x, 0.5, 0.5)
    with pytest.raises(InvariantError):
        guided_step(x, x, 0.0, 0.0)


def test_noise_and_prediction_invert():
    x0 = _image(1)
    x_t = add_noise(x0, 0.6, seed=3)
    velocity = oracle_denoiser(x0)(x_t, 5, 0.6)
    assert np.allclose(predict_x0(x_t, velocity, 0.6).data, x0.data)
    assert np.array_equal(add_noise(x0, 0.6, seed=3).data, x_t.data)


def test_noiseless_noisy_oracle_is_the_oracle():
    target, x_t = _image(14), _image(15)
    exact = oracle_denoiser(target)(x_t, 3, 0.4).data
    assert np.array_equal(noisy_oracle_denoiser(target, 0.0, seed=8)(x_t, 3, 0.4).data, exact)


def test_guided_x0_blends():
    pred, ref = _image(2), _image(3)
    ones = AttributeImage(np.ones((16, 16, 1)))
    zeros = AttributeImage(np.zeros((16, 16, 1)))
    assert np.array_equal(guided_x0(pred, ref, ones, zeros, 0.5, True).data, ref.data)
    assert np.array_equal(guided_x0(pred, ref, zeros, zeros, 0.5, True).data, pred.data)
    # overall phase with full opacity and beta 1 pulls all the way to the render
    assert np.allclose(guided_x0(pred, ref, zeros, ones, 1.0, True).data, ref.data)
    # outside the overall phase opacity is ignored
    assert np.array_equal(guided_x0(pred, ref, zeros, ones, 1.0, False).data, pred.data)


# ============================================================================
# GUIDED DENOISING FIXPOINTS
# ============================================================================

def test_full_confidence_returns_the_render():
    render = _image(4)
    out = denoise_with_guidance(render, _masks(1.0), AttributeImage(np.ones((16, 16, 1))),
                                noisy_oracle_denoiser(_image(5), 0.2, seed=1), CONFIG)
    assert np.allclose(out.data, render.data, atol=1e-6)


def test_zero_confidence_without_overall_guidance_returns_the_oracle_target():
    render, target = _image(6), _image(7)
    config = CONFIG.model_copy(update={"beta": 0.0})
    out = denoise_with_guidance(render, _masks(0.0), AttributeImage(np.ones((16, 16, 1))),
                                oracle_denoiser(target), config)
    assert np.allclose(out.data, target.data, atol=1e-5)


def test_more_confidence_in_a_correct_render_never_adds_error():
    opacity = AttributeImage(np.ones((16, 16, 1)))
    levels = (0.0, 0.25, 0.5, 0.75)
    errors = {level: [] for level in levels}
    for seed in range(20):
        target = _image(100 + seed)
        for level in levels:
            out = denoise_with_guidance(target, _masks(level), opacity,
                                        noisy_oracle_denoiser(target, 0.1, seed=seed), CONFIG)
            errors[level].append(float(np.mean(np.abs(out.data - target.data))))
    means = [np.mean(errors[level]) for level in levels]
    assert all(a >= b for a, b in zip(means, means[1:]))
    assert sign_test(errors[0.25], errors[0.75]) < 0.05


def test_confidence_maps_accept_confidence_map_objects():
    render, target = _image(8), _image(9)
    maps = {g: ConfidenceMap(AttributeImage(np.zeros((16, 16, 1))), g) for g in CONFIG.gammas}
    out = denoise_with_guidance(render, maps, AttributeImage(np.zeros((16, 16, 1))), oracle_denoiser(target),
                                CONFIG)
    assert np.allclose(out.data, target.data, atol=1e-5)


def test_missing_gamma_level_is_rejected():
    maps = _masks(0.5)
    maps.pop(CONFIG.gamma_hi)
    with pytest.raises(InvariantError):
        denoise_with_guidance(_image(0), maps, AttributeImage(np.ones((16, 16, 1))), identity_denoiser(), CONFIG)


def test_callback_sees_every_step():
    seen = []
    denoise_with_guidance(_image(0), _masks(0.3), AttributeImage(np.ones((16, 16, 1))), IdentityDenoiser(),
                          CONFIG, callback=lambda state: seen.append(state.t))
    assert seen == list(range(CONFIG.steps - 1, -1, -1))


def test_latent_codec_downsamples_and_restores_size():
    render, target = _image(10, (32, 32, 3)), _image(11, (32, 32, 3))
    codec = PixelLatentCodec(2)
    config = CONFIG.model_copy(update={"beta": 0.0, "latent_scale": 2})
    out = denoise_with_guidance(render, _masks(0.0, size=32), AttributeImage(np.ones((32, 32, 1))),
                                oracle_denoiser(codec.encode(target)), config)
    assert out.shape == (32, 32, 3)
    assert np.allclose(out.data, codec.decode(codec.encode(target), 32, 32).data, atol=1e-5)


def test_bad_denoiser_outputs_raise_denoiser_error():
    def wrong_shape(x_t, t, sigma_t):
        return AttributeImage(np.zeros((4, 4, 3)))

    def broken(x_t, t, sigma_t):
        raise RuntimeError("model crashed")

    def not_finite(x_t, t, sigma_t):
        return np.full(x_t.shape, np.nan)

    for denoiser in (wrong_shape, broken, not_finite):
        with pytest.raises(DenoiserError) as info:
            denoise_with_guidance(_image(0), _masks(0.5), AttributeImage(np.ones((16, 16, 1))), denoiser, CONFIG)
        assert info.value.context["step"] == 0


# ============================================================================
# PROVIDERS
# ============================================================================

def test_provider_from_name(scene):
    assert isinstance(provider_from_name("identity"), ConstantProvider)
    assert isinstance(provider_from_name("oracle", scene), OracleProvider)
    assert isinstance(provider_from_name("bridge:/tmp/exchange"), BridgeProvider)
    with pytest.raises(ConfigError):
        provider_from_name("noisy-oracle")
    with pytest.raises(ConfigError):
        provider_from_name("sdxl")


def test_noisy_oracle_provider_is_seeded_per_view(scene, view):
    provider = OracleProvider(scene, noise_sigma=0.1, seed=4)
    a = provider.for_view(0, view).target.data
    b = OracleProvider(scene, noise_sigma=0.1, seed=4).for_view(0, view).target.data
    c = provider.for_view(1, view).target.data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_color_biased_oracle_targets(scene, view):
    clean = render_color(view, scene).data
    biased = OracleProvider(scene, color_gain=(0.9, 1.1, 1.0), color_offset=(0.05, 0.0, -0.02))
    expected = np.clip(clean * [0.9, 1.1, 1.0] + [0.05, 0.0, -0.02], 0.0, 1.0)
    assert np.allclose(biased.for_view(0, view).target.data, expected)
    assert np.array_equal(OracleProvider(scene).for_view(0, view).target.data, clean)


# ============================================================================
# EXTERNAL BRIDGE
# ============================================================================

def _oracle_responder(directory: Path, target: AttributeImage, stop: threading.Event):
    """Serve oracle velocities through the exchange directory until stopped."""
    n = 0
    while not stop.is_set():
        request = directory / f"req_{n}.json"
        if not request.exists():
            time.sleep(0.002)
            continue
        meta = json.loads(request.read_text())
        x_t = read_pfm(directory / f"req_{n}.pfm")
        velocity = AttributeImage((x_t.data - target.data) / meta["sigma_t"])
        tmp = directory / f"res_{n}.tmp.pfm"
        write_pfm(velocity, tmp)
        os.replace(tmp, directory / f"res_{n}.pfm")
        n += 1


def test_bridge_loopback_matches_in_process_oracle(tmp_path):
    render, target = _image(12), _image(13)
    stop = threading.Event()
    responder = threading.Thread(target=_oracle_responder, args=(tmp_path, target, stop), daemon=True)
    responder.start()
    try:
        bridge = ExternalDenoiserBridge(tmp_path, timeout=10.0, poll=0.002, schedule_id="test", view_id="v0")
        via_bridge = denoise_with_guidance(render, _masks(0.2), AttributeImage(np.ones((16, 16, 1))), bridge,
                                           CONFIG)
    finally:
        stop.set()
        responder.join(timeout=5.0)
    in_process = denoise_with_guidance(render, _masks(0.2), AttributeImage(np.ones((16, 16, 1))),
                                       oracle_denoiser(target), CONFIG)
    assert np.allclose(via_bridge.data, in_process.data, atol=1e-5)
    assert not list(tmp_path.glob("req_*")) and not list(tmp_path.glob("res_*"))


def test_bridge_request_metadata(tmp_path):
    bridge = ExternalDenoiserBridge(tmp_path, timeout=1.0, schedule_id="linear-T12-s0.8", view_id="extrap_000")
    _, req_json = bridge._write_request(7, _image(0), 3, 0.25)
    meta = json.loads(req_json.read_text())
    assert meta == {"t": 3, "sigma_t": 0.25, "shape": [16, 16, 3], "schedule_id": "linear-T12-s0.8",
                    "view_id": "extrap_000"}


def test_bridge_times_out_and_cleans_up(tmp_path):
    bridge = ExternalDenoiserBridge(tmp_path, timeout=0.1, poll=0.01)
    with pytest.raises(BridgeTimeoutError) as info:
        bridge(_image(0), 4, 0.5)
    assert info.value.context["step"] == 4
    assert not list(tmp_path.glob("req_*"))
