"""Analytic factor <-> W+ map standing in for GAN inversion.

``W = broadcast_layers(A @ theta)`` with ``A`` a ``(d_latent, n_factors)``
matrix with orthonormal columns, drawn once from the experiment seed.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..latent_space import AttributeDirection, DirectionBank, extract_direction
from .factors import ATTRIBUTE_NAMES, N_FACTORS, N_IDENTITY, WorldParams, attribute_index


class LatentMap:
    def __init__(self, matrix: np.ndarray, n_layers: int = 6):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != N_FACTORS or matrix.shape[0] < N_FACTORS:
            raise ValueError(f"map matrix must be (d_latent >= {N_FACTORS}, {N_FACTORS}), got {matrix.shape}")
        self.matrix = matrix
        self.n_layers = int(n_layers)
        self._pinv = np.linalg.pinv(matrix)

    @classmethod
    def from_seed(cls, seed: int, n_layers: int = 6, d_latent: int = 64) -> "LatentMap":
        rng = np.random.default_rng([seed, 0xA11A])
        q, r = np.linalg.qr(rng.standard_normal((d_latent, N_FACTORS)))
        # Fix the sign ambiguity of QR so the map is a pure function of the seed.
        q = q * np.sign(np.diag(r))
        return cls(q, n_layers)

    @property
    def d_latent(self) -> int:
        return self.matrix.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_layers, self.d_latent)

    def embed(self, theta: WorldParams) -> np.ndarray:
        row = self.matrix @ theta.vector()
        return np.tile(row, (self.n_layers, 1))

    def embed_many(self, thetas) -> np.ndarray:
        v = np.stack([t.vector() for t in thetas])
        rows = v @ self.matrix.T
        return np.repeat(rows[:, None, :], self.n_layers, axis=1)

    def recover(self, w) -> WorldParams:
        return WorldParams.from_vector(self.recover_vector(w))

    def recover_vector(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return self._pinv @ w.mean(axis=-2) if w.ndim == 2 else np.einsum("fd,nd->nf", self._pinv, w.mean(axis=-2))

    def analytic_direction(self, attribute: str) -> AttributeDirection:
        k = N_IDENTITY + attribute_index(attribute)
        offset = np.tile(self.matrix[:, k], (self.n_layers, 1))
        return AttributeDirection.from_offset(attribute, offset)

    def analytic_bank(self, attributes=ATTRIBUTE_NAMES) -> DirectionBank:
        return DirectionBank([self.analytic_direction(a) for a in attributes])

    def paired_latents(self, thetas, attribute: str, alphas, rng=None, noise: float = 0.0):
        """Latents of ``thetas`` before and after moving one attribute factor.

        ``noise`` adds i.i.d. Gaussian error to every latent, mimicking an
        imperfect inversion encoder.
        """
        k = attribute_index(attribute)
        edited, unedited = [], []
        for th, a in zip(thetas, alphas):
            attrs = th.attribute_factors.copy()
            attrs[k] += a
            e = self.embed(WorldParams(th.identity_factors, attrs))
            u = self.embed(th)
            if noise:
                e = e + noise * rng.standard_normal(e.shape)
                u = u + noise * rng.standard_normal(u.shape)
            edited.append(e)
            unedited.append(u)
        return edited, unedited

    def extracted_bank(self, thetas, rng, noise: float = 0.0, attributes=ATTRIBUTE_NAMES) -> DirectionBank:
        """Bank built the data-driven way: mean latent difference over unit edits."""
        dirs = []
        for name in attributes:
            e, u = self.paired_latents(thetas, name, np.ones(len(thetas)), rng=rng, noise=noise)
            dirs.append(extract_direction(e, u, name))
        return DirectionBank(dirs)

    def save(self, path) -> None:
        np.save(Path(path), self.matrix.astype("<f8"), allow_pickle=False)

    @classmethod
    def load(cls, path, n_layers: int = 6) -> "LatentMap":
        return cls(np.load(Path(path), allow_pickle=False), n_layers)
