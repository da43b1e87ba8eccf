import numpy as np
import pytest
import torch

from attrdiff.diffusion import (
    CLEAN,
    NoiseSchedule,
    add_noise,
    cfg_combine,
    ddim_step,
    ddim_x0_approx,
    landmark_heatmap,
)
from attrdiff.errors import ConfigurationError, UsageError

S = NoiseSchedule.linear()


def test_schedule_bounds_and_monotonicity():
    assert S.T == 200
    assert torch.all((S.betas > 0) & (S.betas < 1))
    assert torch.all(S.alpha_bars[1:] < S.alpha_bars[:-1])
    assert S.alpha_bars[0].item() == pytest.approx(1 - 1e-4)
    with pytest.raises(ConfigurationError):
        NoiseSchedule(torch.tensor([0.5, 1.0]))


def test_add_noise_limits():
    x0 = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(x0)
    bound = (1 - S.alpha_bars[0]).sqrt().item()
    assert (add_noise(S, x0, 0, eps) - x0).abs().max() <= bound * eps.abs().max() + 1e-3
    ab = S.alpha_bars[50].item()
    assert torch.equal(add_noise(S, x0, 50, torch.zeros_like(x0)), ab ** 0.5 * x0)
    with pytest.raises(UsageError):
        add_noise(S, x0, 200, eps)


def test_add_noise_variance_monte_carlo():
    t = 120
    x0 = torch.full((10_000, 4), 0.3, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    out = add_noise(S, x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64))
    expected = 1 - S.alpha_bars[t].item()
    assert np.allclose(out.var(0).numpy(), expected, rtol=0.05)


@pytest.mark.parametrize("t", [0, 17, 100, 199])
def test_x0_inversion_is_exact(t):
    g = torch.Generator().manual_seed(t)
    x0 = torch.rand(3, 3, 16, 16, generator=g)
    eps = torch.randn(x0.shape, generator=g)
    assert (ddim_x0_approx(S, add_noise(S, x0, t, eps), t, eps) - x0).abs().max() < 1e-5


def test_x0_approx_near_t0_is_close_to_input():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(x)
    ab = S.alpha_bars[0].item()
    bound = ((1 - ab) ** 0.5 * eps.abs().max().item() + (1 - ab ** 0.5)) / ab ** 0.5
    assert (ddim_x0_approx(S, x, 0, eps) - x).abs().max() <= bound + 1e-12
    assert bound < 0.06


def test_x0_error_shrinks_along_interpolation():
    g = torch.Generator().manual_seed(4)
    x0 = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    wrong = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    x_t = add_noise(S, x0, 150, eps)
    errs = [(ddim_x0_approx(S, x_t, 150, (1 - s) * wrong + s * eps) - x0).norm().item()
            for s in np.linspace(0, 1, 5)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_one_step_ddim_equals_x0_estimate():
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    e = torch.randn_like(x)
    assert torch.allclose(ddim_step(S, x, 150, CLEAN, e), ddim_x0_approx(S, x, 150, e), atol=1e-12)


def test_closed_loop_reconstruction_with_true_noise():
    g = torch.Generator().manual_seed(5)
    x0 = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    ts = S.sampling_timesteps(50)
    x = add_noise(S, x0, ts[0], eps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else CLEAN
        # with eta = 0 the noise component stays exactly eps along the path
        x = ddim_step(S, x, t, t_prev, eps)
    assert (x - x0).abs().max() < 1e-4


def test_ddim_step_ordering_error():
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(UsageError):
        ddim_step(S, x, 10, 10, x)


def test_ddim_stochastic_step_is_seeded():
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    e = torch.randn_like(x)
    a = ddim_step(S, x, 100, 80, e, eta=1.0, generator=torch.Generator().manual_seed(1))
    b = ddim_step(S, x, 100, 80, e, eta=1.0, generator=torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


def test_cfg_combine_identities():
    c, u = torch.randn(2, 3), torch.randn(2, 3)
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    for s in (0.5, 5.0, -2.0):
        assert torch.equal(cfg_combine(c, c.clone(), s), c)
    assert torch.allclose(cfg_combine(c, u, 5.0), u + 5 * (c - u))


def test_sampling_timesteps():
    ts = S.sampling_timesteps(50)
    assert len(ts) == 50 and ts[0] == 199 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ConfigurationError):
        S.sampling_timesteps(0)


def test_landmark_heatmap_peaks_at_points():
    pts = np.array([[[3.5, 4.5], [10.5, 12.5]]])
    h = landmark_heatmap(pts, 16, sigma=1.5)
    assert h.shape == (1, 2, 16, 16)
    assert tuple(np.unravel_index(h[0, 0].argmax().item(), (16, 16))) == (4, 3)
    assert h[0, 1, 12, 10].item() == pytest.approx(1.0)


def test_clipped_step_matches_plain_step_inside_data_range():
    g = torch.Generator().manual_seed(6)
    x0 = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 0.8 + 0.1
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    x = add_noise(S, x0, 120, eps)
    assert torch.allclose(ddim_step(S, x, 120, 100, eps, clip=(0.0, 1.0)), ddim_step(S, x, 120, 100, eps), atol=1e-12)


def test_clipped_final_step_lands_in_data_range():
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64) * 3
    e = torch.randn_like(x)
    out = ddim_step(S, x, 150, CLEAN, e, clip=(0.0, 1.0))
    assert out.min() >= 0 and out.max() <= 1
