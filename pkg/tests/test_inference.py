import numpy as np
import pytest
import torch

from attrdiff.diffusion import NoiseSchedule
from attrdiff.errors import ConfigurationError, ScheduleMismatchError
from attrdiff.inference import (
    AttentionTrace,
    InferenceConfig,
    attribute_sweep_run,
    generate,
    generate_batch,
    generate_with_trace_replay,
    initial_noise,
    to_image,
)
from attrdiff.latent_space import AttributeDirection
from tiny import tiny_inputs, tiny_model

S = NoiseSchedule.linear()
CFG = InferenceConfig(steps=8, seed=3)


@pytest.fixture(scope="module")
def setup():
    m = tiny_model(seed=1, randomize=True).eval()
    _, f, w, lm = tiny_inputs(m, batch=1, seed=1)
    d = AttributeDirection.from_offset("g", np.random.default_rng(0).standard_normal((6, 64)))
    return m, f[0].numpy(), lm[0], w[0].numpy().astype(np.float64), d


def test_generation_deterministic_and_traced(setup):
    m, f, lm, w, _ = setup
    a, tr = generate(m, S, f, lm, w, "a person", CFG)
    b, _ = generate(m, S, f, lm, w, "a person", CFG)
    assert torch.equal(a, b)
    assert tr.timesteps == S.sampling_timesteps(8)
    assert tr.sites() == ["down1", "mid", "up1"]   # every 4x4 level
    assert len(tr.maps) == 8 * 3
    assert next(iter(tr.maps.values())).shape[0] == 2   # conditional and unconditional rows


def test_trace_replay_fixed_point_is_bit_exact(setup):
    m, f, lm, w, _ = setup
    a, tr = generate(m, S, f, lm, w, "a person", CFG)
    assert torch.equal(generate_with_trace_replay(m, S, f, lm, w, "a person", tr, CFG), a)


def test_trace_survives_serialization(setup):
    m, f, lm, w, _ = setup
    a, tr = generate(m, S, f, lm, w, "a person", CFG)
    tr2 = AttentionTrace.from_bytes(tr.to_bytes())
    assert tr2.to_bytes() == tr.to_bytes()
    assert torch.equal(generate_with_trace_replay(m, S, f, lm, w, "a person", tr2, CFG), a)


def test_trace_from_other_schedule_is_rejected(setup):
    m, f, lm, w, _ = setup
    _, tr = generate(m, S, f, lm, w, "a person", CFG)
    with pytest.raises(ScheduleMismatchError):
        generate_with_trace_replay(m, S, f, lm, w, "a person", tr, InferenceConfig(steps=6, seed=3))


def test_replay_changes_edited_output(setup):
    m, f, lm, w, d = setup
    _, tr = generate(m, S, f, lm, w, "a person", CFG)
    w2 = w + 2.0 * d.delta * d.calibration_scale
    free, _ = generate(m, S, f, lm, w2, "a person", CFG)
    locked = generate_with_trace_replay(m, S, f, lm, w2, "a person", tr, CFG)
    assert not torch.equal(free, locked)


def test_partial_replay_window(setup):
    m, f, lm, w, d = setup
    _, tr = generate(m, S, f, lm, w, "a person", CFG)
    w2 = w + d.delta * 3
    none = generate_with_trace_replay(m, S, f, lm, w2, "a person", tr,
                                      InferenceConfig(steps=8, seed=3, replay_steps=0))
    free, _ = generate(m, S, f, lm, w2, "a person", CFG)
    assert torch.equal(none, free)


def test_sweep_single_zero_alpha_is_plain_generation(setup):
    m, f, lm, w, d = setup
    res = attribute_sweep_run(m, S, f, lm, w, d, [0.0], "a person", CFG)
    plain, _ = generate(m, S, f, lm, w, "a person", CFG)
    assert len(res.images) == 1 and torch.equal(res.images[0], plain)


def test_sweep_shares_initial_noise_and_trace(setup):
    m, f, lm, w, d = setup
    res = attribute_sweep_run(m, S, f, lm, w, d, [0.0, 0.5, 1.0], "a person", CFG)
    assert torch.equal(res.noise, initial_noise(3, (1, 3, 8, 8)))
    assert res.trace is not None and len(res.images) == 3
    # batched replay of alpha 0 reproduces the recorded image up to float reassociation
    again = generate_batch(m, S, np.stack([f, f]), np.stack([lm, lm]), np.stack([w, w]), ["a person"] * 2, CFG,
                           res.trace)
    assert torch.allclose(again[0], res.images[0], atol=1e-5)
    assert torch.equal(again[0], again[1])


def test_sweep_without_layout_lock(setup):
    m, f, lm, w, d = setup
    cfg = InferenceConfig(steps=8, seed=3, layout_lock=False)
    res = attribute_sweep_run(m, S, f, lm, w, d, [0.0, 1.0], "a person", cfg)
    assert res.trace is None


def test_initial_noise_depends_only_on_seed():
    assert torch.equal(initial_noise(5, (1, 3, 4, 4)), initial_noise(5, (1, 3, 4, 4)))
    assert not torch.equal(initial_noise(5, (1, 3, 4, 4)), initial_noise(6, (1, 3, 4, 4)))


def test_config_and_image_helpers():
    with pytest.raises(ConfigurationError):
        InferenceConfig(steps=0)
    img = to_image(torch.tensor([[[2.0]], [[-1.0]], [[0.5]]]))
    assert img.shape == (1, 1, 3) and img.tolist() == [[[1.0, 0.0, 0.5]]]
