"""Ground-truth generative factors of the synthetic face world."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY_NAMES = ("hue", "aspect", "eye_spacing", "skin_tone")
ATTRIBUTE_NAMES = ("smile", "eye_openness", "glasses", "brightness", "pose", "wrinkles")

# Calibrated ranges; the renderer clamps outside these.
IDENTITY_RANGES = {
    "hue": (-1.0, 1.0),
    "aspect": (-1.0, 1.0),
    "eye_spacing": (-1.0, 1.0),
    "skin_tone": (-1.0, 1.0),
}
ATTRIBUTE_RANGES = {
    "smile": (-1.0, 3.0),
    "eye_openness": (-3.0, 3.0),
    "glasses": (0.0, 2.5),
    "brightness": (-1.5, 3.0),
    "pose": (-3.0, 3.0),
    "wrinkles": (0.0, 3.0),
}

# Distribution of the "natural" photo collection. Glasses never occur
# naturally, so the attribute is only ever seen through augmentation.
NATURAL_ATTRIBUTE_RANGES = {
    "smile": (-0.5, 0.5),
    "eye_openness": (-0.5, 0.5),
    "glasses": (0.0, 0.0),
    "brightness": (-0.5, 0.5),
    "pose": (-0.5, 0.5),
    "wrinkles": (0.0, 0.5),
}

N_IDENTITY = len(IDENTITY_NAMES)
N_ATTRIBUTE = len(ATTRIBUTE_NAMES)
N_FACTORS = N_IDENTITY + N_ATTRIBUTE


@dataclass(frozen=True)
class WorldParams:
    identity_factors: np.ndarray = field(default_factory=lambda: np.zeros(N_IDENTITY))
    attribute_factors: np.ndarray = field(default_factory=lambda: np.zeros(N_ATTRIBUTE))

    def __post_init__(self):
        idf = np.asarray(self.identity_factors, dtype=np.float64).reshape(-1)
        atf = np.asarray(self.attribute_factors, dtype=np.float64).reshape(-1)
        if idf.shape != (N_IDENTITY,) or atf.shape != (N_ATTRIBUTE,):
            raise ValueError(
                f"expected {N_IDENTITY} identity and {N_ATTRIBUTE} attribute factors, "
                f"got {idf.shape} and {atf.shape}"
            )
        object.__setattr__(self, "identity_factors", idf)
        object.__setattr__(self, "attribute_factors", atf)

    @classmethod
    def from_vector(cls, v) -> "WorldParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:N_IDENTITY], v[N_IDENTITY:])

    @classmethod
    def from_dict(cls, d: dict) -> "WorldParams":
        return cls([d[n] for n in IDENTITY_NAMES], [d[n] for n in ATTRIBUTE_NAMES])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.identity_factors, self.attribute_factors])

    def to_dict(self) -> dict:
        names = IDENTITY_NAMES + ATTRIBUTE_NAMES
        return {n: float(x) for n, x in zip(names, self.vector())}

    def get(self, name: str) -> float:
        return self.to_dict()[name]

    def replace(self, **updates) -> "WorldParams":
        d = self.to_dict()
        unknown = set(updates) - set(d)
        if unknown:
            raise KeyError(f"unknown factors: {sorted(unknown)}")
        d.update({k: float(v) for k, v in updates.items()})
        return WorldParams.from_dict(d)

    def clamped(self) -> tuple["WorldParams", tuple[str, ...]]:
        """Return params clamped to the calibrated ranges and the names that were clamped."""
        d = self.to_dict()
        flagged = []
        for name, (lo, hi) in {**IDENTITY_RANGES, **ATTRIBUTE_RANGES}.items():
            x = d[name]
            if not np.isfinite(x):
                raise ValueError(f"factor {name!r} is not finite")
            c = min(max(x, lo), hi)
            if c != x:
                flagged.append(name)
            d[name] = c
        return WorldParams.from_dict(d), tuple(flagged)


def attribute_index(name: str) -> int:
    try:
        return ATTRIBUTE_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown attribute {name!r}; known: {list(ATTRIBUTE_NAMES)}") from None


def sample_identity(rng: np.random.Generator, n: int) -> np.ndarray:
    lo = np.array([IDENTITY_RANGES[k][0] for k in IDENTITY_NAMES])
    hi = np.array([IDENTITY_RANGES[k][1] for k in IDENTITY_NAMES])
    return rng.uniform(lo, hi, size=(n, N_IDENTITY))


def sample_attributes(rng: np.random.Generator, n: int, natural: bool = True) -> np.ndarray:
    table = NATURAL_ATTRIBUTE_RANGES if natural else ATTRIBUTE_RANGES
    lo = np.array([table[k][0] for k in ATTRIBUTE_NAMES])
    hi = np.array([table[k][1] for k in ATTRIBUTE_NAMES])
    return rng.uniform(lo, hi, size=(n, N_ATTRIBUTE))


def sample_params(rng: np.random.Generator, n: int, natural: bool = True) -> list[WorldParams]:
    ids = sample_identity(rng, n)
    attrs = sample_attributes(rng, n, natural=natural)
    return [WorldParams(i, a) for i, a in zip(ids, attrs)]
