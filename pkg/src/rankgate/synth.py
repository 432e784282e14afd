"""Synthetic embedding stores with controllable identity structure.

Each identity gets a mean direction drawn uniformly on the unit sphere
(an isotropic Gaussian draw, normalized). Images are the mean plus
isotropic Gaussian noise, re-normalized. This is a deliberate small-bias
stand-in for a spherical cluster distribution; what matters downstream is
only that images of one identity cluster and clusters are well spread.

Generation is single-stream and ordered (groups in declared order, then
identity index, then capture index), so a fixed seed reproduces the store
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import EmbeddingRecord, EmbeddingStore, l2_normalize, unit_f32


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 100
    images_per_identity: int = 5
    dimension: int = 64
    within_noise_sigma: float = 0.1
    groups: tuple[tuple[str, int], ...] = ()
    degradation_levels: tuple[tuple[str, float], ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1:
            raise ValueError("n_identities must be >= 1")
        if self.images_per_identity < 1:
            raise ValueError("images_per_identity must be >= 1")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.within_noise_sigma < 0:
            raise ValueError("within_noise_sigma must be >= 0")
        raw_groups = self.groups.items() if isinstance(self.groups, dict) else self.groups
        groups = tuple((str(g), int(c)) for g, c in raw_groups)
        if not groups:
            groups = (("synth", self.n_identities),)
        object.__setattr__(self, "groups", groups)
        if any(c < 1 for _, c in groups):
            raise ValueError("every group needs a positive identity count")
        if len({g for g, _ in groups}) != len(groups):
            raise ValueError("group labels must be unique")
        total = sum(c for _, c in groups)
        if total != self.n_identities:
            raise ValueError(
                f"group counts sum to {total}, expected n_identities="
                f"{self.n_identities}"
            )
        raw_levels = (
            self.degradation_levels.items()
            if isinstance(self.degradation_levels, dict)
            else self.degradation_levels
        )
        levels = tuple((str(t), float(s)) for t, s in raw_levels)
        object.__setattr__(self, "degradation_levels", levels)
        sigmas = [s for _, s in levels]
        if any(s < 0 for s in sigmas):
            raise ValueError("degradation sigmas must be >= 0")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise ValueError("degradation sigmas must be strictly increasing")


def generate(config: SynthConfig) -> EmbeddingStore:
    """Build the synthetic store described by ``config``."""
    rng = np.random.default_rng(config.rng_seed)
    d = config.dimension
    records = []
    for group, count in config.groups:
        for i in range(count):
            identity_id = f"{group}-{i:05d}"
            mean = _unit_draw(rng, d)
            for j in range(1, config.images_per_identity + 1):
                vec = _noisy_unit(rng, mean, config.within_noise_sigma, d)
                records.append(
                    EmbeddingRecord(
                        identity_id=identity_id,
                        image_id=f"im{j:03d}",
                        group=group,
                        capture_index=j,
                        vector=vec,
                    )
                )
    return EmbeddingStore(d, records)


def _unit_draw(rng: np.random.Generator, d: int) -> np.ndarray:
    for _ in range(100):
        v = rng.standard_normal(d)
        if float(np.dot(v, v)) > 0:
            return l2_normalize(v)
    raise RuntimeError("could not draw a nonzero direction")


def _noisy_unit(
    rng: np.random.Generator, mean: np.ndarray, sigma: float, d: int
) -> np.ndarray:
    for _ in range(100):
        v = mean + sigma * rng.standard_normal(d)
        if float(np.dot(v, v)) > 0:
            return unit_f32(v)
    raise RuntimeError("could not draw a nonzero image vector")


def degrade_probe(
    vector: np.ndarray, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Add isotropic Gaussian noise to a probe and re-normalize.

    ``sigma == 0`` returns the input unchanged (as float64), so an
    undegraded condition is bit-stable.
    """
    v = np.asarray(vector, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return v.copy()
    for _ in range(100):
        w = v + sigma * rng.standard_normal(v.shape[0])
        if float(np.dot(w, w)) > 0:
            return l2_normalize(w)
    raise RuntimeError("degradation kept producing zero vectors")


def config_to_json(config: SynthConfig, path) -> None:
    payload = {
        "n_identities": config.n_identities,
        "images_per_identity": config.images_per_identity,
        "dimension": config.dimension,
        "within_noise_sigma": config.within_noise_sigma,
        "groups": [[g, c] for g, c in config.groups],
        "degradation_levels": [[t, s] for t, s in config.degradation_levels],
        "rng_seed": config.rng_seed,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def config_from_dict(payload: dict) -> SynthConfig:
    cfg = SynthConfig(
        n_identities=int(payload["n_identities"]),
        images_per_identity=int(payload["images_per_identity"]),
        dimension=int(payload.get("dimension", 64)),
        within_noise_sigma=float(payload.get("within_noise_sigma", 0.1)),
        groups=tuple((g, int(c)) for g, c in payload.get("groups", [])),
        degradation_levels=tuple(
            (t, float(s)) for t, s in payload.get("degradation_levels", [])
        ),
        rng_seed=int(payload.get("rng_seed", 0)),
    )
    return cfg


def config_from_json(path) -> SynthConfig:
    return config_from_dict(json.loads(Path(path).read_text()))
