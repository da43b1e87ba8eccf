"""Procedural face renderer and its analytic geometry.

Coordinates are normalized to the unit square (x to the right, y down) and
scaled to pixels at the very end, so the same face can be rendered at any
resolution. Pixel ``i`` covers ``[i, i + 1)``; landmark coordinates use the
same continuous convention.

Edges are anti-aliased by rendering at ``SUPERSAMPLE`` times the target
resolution and box-filtering down.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .factors import WorldParams

SUPERSAMPLE = 4

FACE_CENTER = (0.5, 0.54)
FACE_RX = 0.24
POSE_UNIT = 0.035          # horizontal shift per unit of pose
EYE_HALF_SPACING = 0.095
EYE_SPACING_UNIT = 0.02    # half-spacing change per unit of eye_spacing
EYE_RX = 0.045
EYE_RY = 0.024
EYE_DY = -0.10
NOSE_DY = 0.03
MOUTH_DY = 0.15
MOUTH_HALF_WIDTH = 0.085
MOUTH_THICKNESS = 0.03
SMILE_LIFT = 0.032          # corner lift per unit of smile
GLASSES_RADIUS = 0.07
GLASSES_THICKNESS = 0.022
WRINKLE_ROWS = (-0.21, -0.17)
WRINKLE_HALF_WIDTH = 0.11
WRINKLE_THICKNESS = 0.026

# Eye-centre distance grows by this many pixels per unit of eye_spacing.
EYE_DISTANCE_PX_PER_UNIT = 2 * EYE_SPACING_UNIT  # multiply by image size

BACKGROUND_TOP = np.array([0.56, 0.66, 0.78])
BACKGROUND_BOTTOM = np.array([0.30, 0.38, 0.50])
SKIN_DARK = np.array([0.42, 0.30, 0.22])
SKIN_LIGHT = np.array([0.93, 0.80, 0.68])
EYE_COLOR = np.array([0.08, 0.08, 0.12])
MOUTH_COLOR = np.array([0.55, 0.12, 0.14])
NOSE_COLOR = np.array([0.35, 0.20, 0.15])
GLASSES_COLOR = np.array([0.04, 0.04, 0.05])
WRINKLE_DARKNESS = 0.75

LANDMARK_NAMES = ("left_eye", "right_eye", "nose_tip", "mouth_left", "mouth_right")


@dataclass(frozen=True)
class FaceGeometry:
    cx: float
    cy: float
    rx: float
    ry: float
    eye_half: float
    eye_ry: float
    smile: float
    glasses_opacity: float
    brightness: float
    wrinkle_strength: float
    hair_rgb: tuple
    skin_rgb: tuple

    @property
    def eye_y(self) -> float:
        return self.cy + EYE_DY

    @property
    def mouth_y(self) -> float:
        return self.cy + MOUTH_DY


def geometry(theta: WorldParams) -> FaceGeometry:
    t, _ = theta.clamped()
    d = t.to_dict()
    rx = FACE_RX
    hue = (0.08 + 0.12 * d["hue"]) % 1.0
    hair = colorsys.hsv_to_rgb(hue, 0.65, 0.42)
    tone = 0.5 + 0.45 * d["skin_tone"]
    skin = SKIN_DARK + (SKIN_LIGHT - SKIN_DARK) * tone
    return FaceGeometry(
        cx=FACE_CENTER[0] + POSE_UNIT * d["pose"],
        cy=FACE_CENTER[1],
        rx=rx,
        ry=rx * (1.25 + 0.12 * d["aspect"]),
        eye_half=EYE_HALF_SPACING + EYE_SPACING_UNIT * d["eye_spacing"],
        eye_ry=max(EYE_RY * (1.0 + 0.3 * d["eye_openness"]), 0.002),
        smile=d["smile"],
        glasses_opacity=d["glasses"] / 2.5,
        brightness=d["brightness"],
        wrinkle_strength=d["wrinkles"] / 3.0,
        hair_rgb=tuple(hair),
        skin_rgb=tuple(skin),
    )


@lru_cache(maxsize=8)
def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(c, c, indexing="ij")
    xx.setflags(write=False)
    yy.setflags(write=False)
    return xx, yy


def _downsample(hi: np.ndarray, size: int) -> np.ndarray:
    s = SUPERSAMPLE
    if hi.ndim == 2:
        return hi.reshape(size, s, size, s).mean(axis=(1, 3))
    return hi.reshape(size, s, size, s, hi.shape[-1]).mean(axis=(1, 3))


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _mouth_curve(g: FaceGeometry, xx):
    u = (xx - g.cx) / MOUTH_HALF_WIDTH
    return g.mouth_y - SMILE_LIFT * g.smile * u ** 2


def _masks(g: FaceGeometry, size: int) -> dict[str, np.ndarray]:
    xx, yy = _grid(size)
    face = _ellipse(xx, yy, g.cx, g.cy, g.rx, g.ry)
    hair = _ellipse(xx, yy, g.cx, g.cy, g.rx * 1.1, g.ry * 1.08) & (yy < g.cy - 0.72 * g.ry)
    eyes = np.zeros_like(face)
    ring = np.zeros_like(face)
    for sx in (-1.0, 1.0):
        ex = g.cx + sx * g.eye_half
        eyes |= _ellipse(xx, yy, ex, g.eye_y, EYE_RX, g.eye_ry)
        r = np.hypot(xx - ex, yy - g.eye_y)
        ring |= np.abs(r - GLASSES_RADIUS) <= GLASSES_THICKNESS / 2
    bridge_half = max(g.eye_half - GLASSES_RADIUS, 0.0)
    ring |= (np.abs(xx - g.cx) <= bridge_half) & (np.abs(yy - g.eye_y) <= GLASSES_THICKNESS / 2)
    mouth = (np.abs(xx - g.cx) <= MOUTH_HALF_WIDTH) & (
        np.abs(yy - _mouth_curve(g, xx)) <= MOUTH_THICKNESS / 2
    )
    nose = _ellipse(xx, yy, g.cx, g.cy + NOSE_DY, 0.022, 0.016)
    wrinkle = np.zeros_like(face)
    for dy in WRINKLE_ROWS:
        wrinkle |= (np.abs(xx - g.cx) <= WRINKLE_HALF_WIDTH) & (
            np.abs(yy - (g.cy + dy)) <= WRINKLE_THICKNESS / 2
        )
    return {
        "face": face,
        "hair": hair,
        "eyes": eyes & face,
        "glasses": ring,
        "mouth": mouth & face,
        "nose": nose & face,
        "wrinkles": wrinkle & face & ~hair,
    }


def render_flagged(theta: WorldParams, size: int = 32) -> tuple[np.ndarray, tuple[str, ...]]:
    """Render ``theta`` and report which factors were clamped."""
    _, flags = theta.clamped()
    g = geometry(theta)
    xx, yy = _grid(size)
    m = _masks(g, size)

    t = yy[..., None]
    img = BACKGROUND_TOP * (1 - t) + BACKGROUND_BOTTOM * t
    skin = np.asarray(g.skin_rgb)
    img = np.where(m["face"][..., None], skin, img)
    img = np.where(m["wrinkles"][..., None], skin * (1 - WRINKLE_DARKNESS * g.wrinkle_strength), img)
    img = np.where(m["nose"][..., None], NOSE_COLOR * 0.5 + skin * 0.5, img)
    img = np.where(m["eyes"][..., None], EYE_COLOR, img)
    img = np.where(m["mouth"][..., None], MOUTH_COLOR, img)
    a = g.glasses_opacity
    img = np.where(m["glasses"][..., None], img * (1 - a) + GLASSES_COLOR * a, img)
    # Face lighting: monotone in brightness, never leaves [0, 1].
    lit = 1.0 - (1.0 - img) * np.exp(-0.2 * g.brightness)
    img = np.where((m["face"] & ~m["hair"])[..., None], lit, img)
    img = np.where(m["hair"][..., None], np.asarray(g.hair_rgb), img)
    return np.clip(_downsample(img, size), 0.0, 1.0), flags


def render(theta: WorldParams, size: int = 32) -> np.ndarray:
    """Render one face as an ``(size, size, 3)`` float array in ``[0, 1]``."""
    return render_flagged(theta, size)[0]


def render_batch(thetas, size: int = 32) -> np.ndarray:
    """Render a sequence of params into ``(N, 3, size, size)`` float32, channels first."""
    out = np.empty((len(thetas), 3, size, size), dtype=np.float32)
    for i, th in enumerate(thetas):
        out[i] = render(th, size).transpose(2, 0, 1)
    return out


def landmarks(theta: WorldParams, size: int = 32) -> np.ndarray:
    """Five analytic keypoints in pixel coordinates, shape ``(5, 2)`` as (x, y)."""
    g = geometry(theta)
    corner_y = g.mouth_y - SMILE_LIFT * g.smile
    pts = np.array(
        [
            [g.cx - g.eye_half, g.eye_y],
            [g.cx + g.eye_half, g.eye_y],
            [g.cx, g.cy + NOSE_DY],
            [g.cx - MOUTH_HALF_WIDTH, corner_y],
            [g.cx + MOUTH_HALF_WIDTH, corner_y],
        ]
    )
    return pts * size


def region_mask(theta: WorldParams, region: str, size: int = 32) -> np.ndarray:
    """Pixel mask of a renderer region, dilated to cover anti-aliased edges.

    ``"mouth"`` covers the mouth for every smile value in the calibrated range,
    so two renders differing only in smile agree outside it.
    """
    g = geometry(theta)
    xx, yy = _grid(size)
    if region == "mouth":
        pad = MOUTH_THICKNESS / 2 + 1.0 / size
        lo = g.mouth_y - SMILE_LIFT * 3.0 - pad
        hi = g.mouth_y + SMILE_LIFT * 1.0 + pad
        hi_res = (np.abs(xx - g.cx) <= MOUTH_HALF_WIDTH + 1.0 / size) & (yy >= lo) & (yy <= hi)
    elif region in ("face", "eyes", "glasses", "hair", "nose", "wrinkles"):
        hi_res = _masks(g, size)[region]
    else:
        raise KeyError(f"unknown region {region!r}")
    return _downsample(hi_res.astype(np.float64), size) > 0


def face_region_from_landmarks(points: np.ndarray, size: int = 32) -> np.ndarray:
    """Boolean face box anchored on the five landmarks.

    Horizontal centre comes from the landmark mean and vertical placement from
    the eye line; extents use the world's fixed face scale so the box always
    contains hair and chin.
    """
    pts = np.asarray(points, dtype=np.float64) / size
    cx = pts[:, 0].mean()
    eye_y = pts[:2, 1].mean()
    half_w = FACE_RX * 1.1 + 0.02
    top = eye_y - 0.29
    bottom = eye_y + 0.47
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return (np.abs(xx - cx) <= half_w) & (yy >= top) & (yy <= bottom)
