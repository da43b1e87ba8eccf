"""Test-time generation: guided DDIM sampling, attention traces and attribute sweeps.

Every generation runs the conditional and unconditional passes as one batch
of two and routes self-attention through a controller, so a recorded trace
can be substituted back verbatim (the fixed point is exact to the bit).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint
from .diffusion import CLEAN, NoiseSchedule, cfg_combine, ddim_step
from .errors import ConfigurationError, ScheduleMismatchError
from .latent_space import AttributeDirection, apply_edit
from .tdca import ConditioningBundle
from .unet import UNet


@dataclass
class InferenceConfig:
    steps: int = 50
    cfg_scale: float = 5.0
    lambda1: float = 1.0
    lambda2: float = 0.5
    seed: int = 0
    layout_lock: bool = True
    replay_steps: Optional[int] = None   # None: replay at every step
    clip_x0: bool = True                 # clamp clean estimates to [0, 1] while sampling

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")


@dataclass
class AttentionTrace:
    """Self-attention probabilities keyed by ``(step_index, site)``."""
    timesteps: list
    maps: dict = field(default_factory=dict)

    def sites(self) -> list[str]:
        return sorted({s for _, s in self.maps})

    def to_bytes(self) -> bytes:
        tensors = {f"{i:04d}/{s}": v for (i, s), v in self.maps.items()}
        return checkpoint.to_bytes(tensors, {"kind": "attention_trace", "timesteps": list(self.timesteps)})

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AttentionTrace":
        tensors, meta = checkpoint.from_bytes(blob)
        maps = {}
        for key, v in tensors.items():
            i, s = key.split("/", 1)
            maps[(int(i), s)] = v
        return cls(list(meta["timesteps"]), maps)


class _Recorder:
    def __init__(self, trace: AttentionTrace):
        self.trace, self.step = trace, 0

    def __call__(self, site, probs):
        self.trace.maps[(self.step, site)] = probs.detach().clone()
        return probs


class _Replayer:
    def __init__(self, trace: AttentionTrace, replay_steps: Optional[int]):
        self.trace, self.replay_steps, self.step = trace, replay_steps, 0

    def __call__(self, site, probs):
        if self.replay_steps is not None and self.step >= self.replay_steps:
            return probs
        stored = self.trace.maps.get((self.step, site))
        if stored is None:
            return probs
        if stored.shape[0] != probs.shape[0]:
            # one recorded (cond, uncond) pair shared by a batch laid out as [cond..., uncond...]
            stored = stored.repeat_interleave(probs.shape[0] // stored.shape[0], dim=0)
        return stored.to(probs.dtype)


def initial_noise(seed: int, shape, dtype=torch.float32) -> torch.Tensor:
    """Starting latent; depends only on the seed and shape."""
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)


def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)


def _sample(model: UNet, schedule: NoiseSchedule, cfg: InferenceConfig, cond: ConditioningBundle,
            uncond: ConditioningBundle, landmarks: np.ndarray, controller) -> torch.Tensor:
    """Guided DDIM loop over a batch of ``n`` generations sharing one seed."""
    n = cond.text_tokens.shape[0]
    size = model.cfg.image_size
    dt = model.conv_in.weight.dtype
    x = initial_noise(cfg.seed, (1, 3, size, size), dt).expand(n, -1, -1, -1).contiguous()
    ts = schedule.sampling_timesteps(cfg.steps)
    bundle = ConditioningBundle.cat([cond, uncond])
    lms = np.concatenate([landmarks, landmarks])
    heat = model.heatmap(lms)
    for i, t in enumerate(ts):
        if controller is not None:
            controller.step = i
        t_prev = ts[i + 1] if i + 1 < len(ts) else CLEAN
        if t_prev == t:
            continue
        est = model(torch.cat([x, x]), t, bundle, heat, controller)
        x = ddim_step(schedule, x, t, t_prev, cfg_combine(est[:n], est[n:], cfg.cfg_scale),
                      clip=(0.0, 1.0) if cfg.clip_x0 else None)
    return x


@torch.no_grad()
def _run(model, schedule, cfg, faces, landmarks, latents, prompts, controller):
    saved = (model.lambda1, model.lambda2)
    model.lambda1, model.lambda2 = cfg.lambda1, cfg.lambda2
    try:
        dt = model.conv_in.weight.dtype
        cond = model.encode(prompts, _as_tensor(faces, dt), _as_tensor(latents, dt))
        uncond = model.encode_null(len(prompts))
        x = _sample(model, schedule, cfg, cond, uncond, np.asarray(landmarks, dtype=np.float64), controller)
    finally:
        model.lambda1, model.lambda2 = saved
    return x


def generate(model: UNet, schedule: NoiseSchedule, face, landmarks, w, prompt: str, cfg: InferenceConfig):
    """One image ``(3, S, S)`` in model space plus the self-attention trace it produced."""
    trace = AttentionTrace(schedule.sampling_timesteps(cfg.steps))
    x = _run(model, schedule, cfg, np.asarray(face)[None], np.asarray(landmarks)[None], np.asarray(w)[None],
             [prompt], _Recorder(trace))
    return x[0], trace


def _check_trace(schedule, cfg, trace):
    expected = schedule.sampling_timesteps(cfg.steps)
    if list(trace.timesteps) != expected:
        raise ScheduleMismatchError(
            f"trace was recorded over {len(trace.timesteps)} steps {trace.timesteps[:3]}..., "
            f"config expects {len(expected)} steps"
        )


def generate_with_trace_replay(model: UNet, schedule: NoiseSchedule, face, landmarks, w, prompt: str,
                               trace: AttentionTrace, cfg: InferenceConfig):
    _check_trace(schedule, cfg, trace)
    x = _run(model, schedule, cfg, np.asarray(face)[None], np.asarray(landmarks)[None], np.asarray(w)[None],
             [prompt], _Replayer(trace, cfg.replay_steps))
    return x[0]


def generate_batch(model, schedule, faces, landmarks, latents, prompts, cfg: InferenceConfig,
                   trace: Optional[AttentionTrace] = None):
    """Several generations sharing one seed; with ``trace`` they all replay it."""
    controller = None
    if trace is not None:
        _check_trace(schedule, cfg, trace)
        controller = _Replayer(trace, cfg.replay_steps)
    return _run(model, schedule, cfg, np.asarray(faces), np.asarray(landmarks), np.asarray(latents), list(prompts),
                controller)


@dataclass
class SweepResult:
    alphas: list
    images: list             # (3, S, S) tensors, one per alpha
    noise: torch.Tensor      # the shared initial noise
    trace: Optional[AttentionTrace]


def attribute_sweep_run(model: UNet, schedule: NoiseSchedule, face, landmarks, w, direction: AttributeDirection,
                        alphas: Sequence[float], prompt: str, cfg: InferenceConfig) -> SweepResult:
    """Generate the unedited image first (recording its trace), then each alpha with the same seed and trace."""
    alphas = [float(a) for a in alphas]
    size = model.cfg.image_size
    noise = initial_noise(cfg.seed, (1, 3, size, size), model.conv_in.weight.dtype)
    base, trace = generate(model, schedule, face, landmarks, apply_edit(w, direction, alphas[0]), prompt, cfg)
    images = [base]
    rest = alphas[1:]
    if rest:
        n = len(rest)
        edited = np.stack([apply_edit(w, direction, a) for a in rest])
        out = generate_batch(model, schedule, np.repeat(np.asarray(face)[None], n, 0),
                             np.repeat(np.asarray(landmarks)[None], n, 0), edited, [prompt] * n, cfg,
                             trace if cfg.layout_lock else None)
        images.extend(out)
    return SweepResult(alphas, images, noise, trace if cfg.layout_lock else None)


def to_image(x: torch.Tensor) -> np.ndarray:
    """Model output ``(3, S, S)`` to an ``(S, S, 3)`` array in [0, 1]."""
    return x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy().astype(np.float32)
