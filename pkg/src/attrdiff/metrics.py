"""Identity-similarity evaluation: cosines, strength curves, paired ablation reports.

All similarities come from the synthetic identity probe, so absolute numbers
are not comparable to a real face-recognition model; every emitted report
carries ``probe=synthetic`` to say so.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError

BANNER = "probe=synthetic"
FILTER_THRESHOLD = 0.6
STRENGTH_GRID = tuple(round(0.2 * i, 10) for i in range(13))   # 0, 0.2, ..., 2.4


def cosine_similarity(a, b) -> float:
    """Dot product of unit embeddings, clipped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.clip(a @ b, -1.0, 1.0))


def embed(probe, images) -> np.ndarray:
    """Unit embeddings for a list of ``(3, S, S)`` images (tensors or arrays)."""
    x = torch.stack([torch.as_tensor(np.asarray(i, dtype=np.float32)) for i in images])
    with torch.no_grad():
        e = probe(x.clamp(0, 1).to(next(probe.parameters()).dtype))
    e = e.double().numpy()
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def sweep_similarity_curve(images, reference, probe) -> np.ndarray:
    e = embed(probe, list(images) + [reference])
    return np.clip(e[:-1] @ e[-1], -1.0, 1.0)


def filtered_mean(values, threshold: float = FILTER_THRESHOLD) -> float:
    """Mean over values at or above ``threshold`` (all values if none qualify)."""
    v = np.asarray(values, dtype=np.float64)
    kept = v[v >= threshold]
    return float(kept.mean()) if kept.size else float(v.mean())


@dataclass
class SimilarityReport:
    """Cosines on a (reference, attribute, strength) grid."""
    attributes: list
    alphas: list
    values: np.ndarray           # (n_refs, n_attributes, n_alphas)
    config_hash: str = ""
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[1:] != (len(self.attributes), len(self.alphas)):
            raise ConfigurationError(f"grid shape {self.values.shape} does not match attributes x alphas")
        if np.any(np.abs(self.values) > 1.0):
            raise ConfigurationError("cosines must lie in [-1, 1]")

    @property
    def per_attribute(self) -> dict:
        return {a: float(self.values[:, i, :].mean()) for i, a in enumerate(self.attributes)}

    @property
    def per_strength(self) -> list:
        return [float(m) for m in self.values.mean(axis=(0, 1))]

    @property
    def aggregate(self) -> float:
        return float(self.values.mean())

    @property
    def filtered_aggregate(self) -> float:
        return filtered_mean(self.values.ravel())

    def to_dict(self) -> dict:
        return {
            "banner": BANNER,
            "label": self.label,
            "config_hash": self.config_hash,
            "attributes": list(self.attributes),
            "alphas": [float(a) for a in self.alphas],
            "values": self.values.tolist(),
            "per_attribute": self.per_attribute,
            "per_strength": self.per_strength,
            "aggregate": self.aggregate,
            "filtered_aggregate": self.filtered_aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_text(self) -> str:
        lines = [f"# {BANNER}  {self.label}  config={self.config_hash}",
                 "attribute".ljust(14) + " ".join(f"{a:>6.2f}" for a in self.alphas) + "    mean"]
        for i, name in enumerate(self.attributes):
            row = self.values[:, i, :].mean(axis=0)
            lines.append(name.ljust(14) + " ".join(f"{v:6.3f}" for v in row) + f"  {row.mean():6.3f}")
        lines.append(f"aggregate {self.aggregate:.4f}  filtered(>= {FILTER_THRESHOLD}) {self.filtered_aggregate:.4f}")
        return "\n".join(lines)


@dataclass
class AblationReport:
    a: SimilarityReport
    b: SimilarityReport
    per_attribute_delta: dict = field(default_factory=dict)
    per_strength_delta: list = field(default_factory=list)
    aggregate_delta: float = 0.0

    @property
    def sign_summary(self) -> dict:
        d = np.asarray(list(self.per_attribute_delta.values()))
        return {"positive": int((d > 0).sum()), "zero": int((d == 0).sum()), "negative": int((d < 0).sum())}

    def to_dict(self) -> dict:
        return {
            "banner": BANNER,
            "a": self.a.to_dict(),
            "b": self.b.to_dict(),
            "per_attribute_delta": self.per_attribute_delta,
            "per_strength_delta": self.per_strength_delta,
            "aggregate_delta": self.aggregate_delta,
            "sign_summary": self.sign_summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_text(self) -> str:
        lines = [self.a.to_text(), "", self.b.to_text(), "", f"# {BANNER}  delta ({self.a.label} - {self.b.label})"]
        for k, v in self.per_attribute_delta.items():
            lines.append(f"{k.ljust(14)}{v:+.4f}")
        lines.append("per strength " + " ".join(f"{v:+.3f}" for v in self.per_strength_delta))
        lines.append(f"aggregate {self.aggregate_delta:+.4f}  signs {self.sign_summary}")
        return "\n".join(lines)


def paired_deltas(a: SimilarityReport, b: SimilarityReport) -> AblationReport:
    if a.attributes != b.attributes or list(a.alphas) != list(b.alphas) or a.values.shape != b.values.shape:
        raise ConfigurationError("ablation reports must share the same evaluation grid")
    return AblationReport(
        a, b,
        per_attribute_delta={k: a.per_attribute[k] - b.per_attribute[k] for k in a.attributes},
        per_strength_delta=[x - y for x, y in zip(a.per_strength, b.per_strength)],
        aggregate_delta=a.aggregate - b.aggregate,
    )


def similarity_grid(generate_sweep, eval_set, bank, alphas, probe) -> np.ndarray:
    """Cosine grid ``(n_refs, n_attributes, n_alphas)``.

    ``generate_sweep(item, direction, alphas)`` returns one image per alpha;
    ``eval_set`` items carry a ``reference`` image.
    """
    out = np.zeros((len(eval_set), len(bank), len(alphas)))
    for r, item in enumerate(eval_set):
        for k, name in enumerate(bank.attribute_names):
            images = generate_sweep(item, bank[name], alphas)
            out[r, k] = sweep_similarity_curve(images, item["reference"], probe)
    return out


def ablation_report(sweep_a, sweep_b, eval_set, bank, alphas, probe, config_hash: str = "",
                    labels=("tdca", "concat")) -> AblationReport:
    """Paired evaluation of two generators on identical inputs and seeds."""
    ra = SimilarityReport(list(bank.attribute_names), list(alphas),
                          similarity_grid(sweep_a, eval_set, bank, alphas, probe), config_hash, labels[0])
    rb = SimilarityReport(list(bank.attribute_names), list(alphas),
                          similarity_grid(sweep_b, eval_set, bank, alphas, probe), config_hash, labels[1])
    return paired_deltas(ra, rb)


def write_report(report, out_dir, stem: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.json", out / f"{stem}.txt"]
    paths[0].write_text(report.to_json() + "\n")
    paths[1].write_text(report.to_text() + "\n")
    return paths


def plot_strength_curves(reports, path) -> Path:
    """Similarity against attribute strength, one line per report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in reports:
        ax.plot(r.alphas, r.per_strength, marker="o", label=r.label or "model")
    ax.set_xlabel("attribute strength")
    ax.set_ylabel("identity similarity")
    ax.set_title(BANNER, fontsize=8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_per_attribute(reports, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = reports[0].attributes
    x = np.arange(len(names))
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, r in enumerate(reports):
        ax.bar(x + i * width, [r.per_attribute[n] for n in names], width, label=r.label or f"model {i}")
    ax.set_xticks(x + width * (len(reports) - 1) / 2, names, rotation=30, fontsize=7)
    ax.set_ylabel("identity similarity")
    ax.set_title(BANNER, fontsize=8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
