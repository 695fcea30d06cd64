"""Synthetic covariate-shift scenarios and their evaluation.

Two plane families: the interleaved two-moons pair (2 classes) and
Gaussian clusters spread evenly on a circle (any class count). A domain
is the base distribution pushed through its own affine shift (rotation,
translation, noise rescaling), so source and target share structure but
not geometry. Everything is a pure function of the ScenarioSpec: the
same ScenarioSpec always yields bit-identical datasets.

Labels exist for evaluation only. Training code receives bare feature
arrays and an evaluation callback; nothing in the adaptation path can
read a target label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .predictors import init_teacher

# rng stream indices reserved per domain kind; sources use their index m
TARGET_STREAM = 7919
HOLDOUT_STREAM = 104729

FAMILIES = ("moons", "gaussians")
REGIMES = ("closed", "partial")


@dataclass(frozen=True)
class Shift:
    """Affine domain transform: rotate about the origin, translate, and
    rescale the generator's noise level."""

    rotation_deg: float = 0.0
    translation: tuple = (0.0, 0.0)
    noise_scale: float = 1.0

    def matrix(self) -> np.ndarray:
        theta = np.deg2rad(self.rotation_deg)
        c, s = np.cos(theta), np.sin(theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix().T + np.asarray(self.translation, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "rotation_deg": self.rotation_deg,
            "translation": list(self.translation),
            "noise_scale": self.noise_scale,
        }

    @staticmethod
    def from_dict(obj: dict) -> "Shift":
        return Shift(
            rotation_deg=float(obj.get("rotation_deg", 0.0)),
            translation=tuple(float(v) for v in obj.get("translation", (0.0, 0.0))),
            noise_scale=float(obj.get("noise_scale", 1.0)),
        )


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one domain-shift experiment."""

    family: str
    num_classes: int
    n_source: int = 1000
    n_target: int = 1000
    source_shifts: tuple = (Shift(),)
    target_shift: Shift = field(default_factory=Shift)
    regime: str = "closed"
    k_target: int = 0  # partial regime only; 0 means "all classes"
    seed: int = 2020
    noise: float = 0.12
    radius: float = 2.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.regime not in REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if self.family == "moons" and self.num_classes != 2:
            raise ContractError("the moons family has exactly 2 classes")
        if self.num_classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.num_classes}")
        if self.n_source < 1 or self.n_target < 1:
            raise ContractError("sample counts must be positive")
        if not self.source_shifts:
            raise ContractError("at least one source domain is required")
        if self.regime == "partial":
            if not 1 <= self.k_target < self.num_classes:
                raise ContractError(
                    f"partial regime needs 1 <= k_target < {self.num_classes}, got {self.k_target}"
                )
        elif self.k_target not in (0, self.num_classes):
            raise ContractError("k_target is only meaningful in the partial regime")

    @property
    def num_sources(self) -> int:
        return len(self.source_shifts)

    @property
    def target_classes(self) -> tuple:
        k = self.k_target if self.regime == "partial" else self.num_classes
        return tuple(range(k))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "num_classes": self.num_classes,
            "n_source": self.n_source,
            "n_target": self.n_target,
            "source_shifts": [s.to_dict() for s in self.source_shifts],
            "target_shift": self.target_shift.to_dict(),
            "regime": self.regime,
            "k_target": self.k_target,
            "seed": self.seed,
            "noise": self.noise,
            "radius": self.radius,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ScenarioSpec":
        return ScenarioSpec(
            family=obj["family"],
            num_classes=int(obj["num_classes"]),
            n_source=int(obj.get("n_source", 1000)),
            n_target=int(obj.get("n_target", 1000)),
            source_shifts=tuple(Shift.from_dict(s) for s in obj.get("source_shifts", [{}])),
            target_shift=Shift.from_dict(obj.get("target_shift", {})),
            regime=obj.get("regime", "closed"),
            k_target=int(obj.get("k_target", 0)),
            seed=int(obj.get("seed", 2020)),
            noise=float(obj.get("noise", 0.12)),
            radius=float(obj.get("radius", 2.0)),
        )


@dataclass
class DomainData:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.features.shape[0]


def _class_counts(n: int, classes) -> list:
    base, rem = divmod(n, len(classes))
    return [base + (1 if i < rem else 0) for i in range(len(classes))]


def _sample_moons(n: int, classes, rng, noise: float):
    """Two opposing half-circles, centered at the origin. Class 0 arcs
    upward, class 1 downward, offset so the arc tips interleave. The
    arcs sit 0.5 apart vertically so the between-class valley survives
    moderate rotations."""
    counts = _class_counts(n, classes)
    points, labels = [], []
    for cls, count in zip(classes, counts):
        t = rng.uniform(0.0, np.pi, count)
        if cls == 0:
            base = np.stack([np.cos(t), np.sin(t) + 0.25], axis=1)
        else:
            base = np.stack([1.0 - np.cos(t), -np.sin(t) - 0.25], axis=1)
        base = base - np.array([0.5, 0.0])
        base += rng.normal(0.0, noise, base.shape)
        points.append(base)
        labels.append(np.full(count, cls, dtype=np.int64))
    return np.concatenate(points), np.concatenate(labels)


def _sample_gaussians(n: int, num_classes: int, classes, rng, radius: float, noise: float):
    """One isotropic cluster per class, centers evenly spaced on a circle
    of the given radius. Only the requested classes are drawn."""
    counts = _class_counts(n, classes)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points, labels = [], []
    for cls, count in zip(classes, counts):
        block = centers[cls] + rng.normal(0.0, noise, (count, 2))
        points.append(block)
        labels.append(np.full(count, cls, dtype=np.int64))
    return np.concatenate(points), np.concatenate(labels)


def _sample_domain(spec: ScenarioSpec, shift: Shift, n: int, classes, rng) -> DomainData:
    sigma = spec.noise * shift.noise_scale
    if spec.family == "moons":
        points, labels = _sample_moons(n, classes, rng, sigma)
    else:
        points, labels = _sample_gaussians(n, spec.num_classes, classes, rng, spec.radius, sigma)
    return DomainData(shift.apply(points), labels)


def generate(spec: ScenarioSpec):
    """All source domains plus the target domain, deterministically.

    Each domain draws from its own seeded stream, so adding a source
    domain never perturbs the others or the target.
    """
    all_classes = tuple(range(spec.num_classes))
    sources = [
        _sample_domain(spec, shift, spec.n_source, all_classes, np.random.default_rng([spec.seed, m]))
        for m, shift in enumerate(spec.source_shifts)
    ]
    target = _sample_domain(
        spec,
        spec.target_shift,
        spec.n_target,
        spec.target_classes,
        np.random.default_rng([spec.seed, TARGET_STREAM]),
    )
    return sources, target


def holdout(spec: ScenarioSpec, domain: int, n: int) -> DomainData:
    """A fresh draw from source domain `domain`, disjoint from the
    training stream; used to report source test accuracy."""
    shift = spec.source_shifts[domain]
    rng = np.random.default_rng([spec.seed, HOLDOUT_STREAM + domain])
    return _sample_domain(spec, shift, n, tuple(range(spec.num_classes)), rng)


def evaluate(net, data: DomainData) -> dict:
    """Accuracy (percent) of the net's argmax predictions, plus the mean
    of per-class accuracies over the classes present.

    The argmax always spans the full K-way head; in the partial regime
    the target simply contains no samples of the dropped classes.
    """
    probs = net.predict_proba(data.features)
    pred = probs.argmax(axis=1)
    acc = 100.0 * float(np.mean(pred == data.labels))
    per_class = {}
    for cls in np.unique(data.labels):
        mask = data.labels == cls
        per_class[int(cls)] = 100.0 * float(np.mean(pred[mask] == cls))
    return {
        "accuracy": acc,
        "per_class_accuracy": float(np.mean(list(per_class.values()))),
        "class_accuracy": per_class,
    }


def bank_accuracy(rows: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy (percent) of argmax over teacher rows."""
    pred = np.asarray(rows).argmax(axis=1)
    return 100.0 * float(np.mean(pred == np.asarray(labels)))


def no_adapt_baseline(handles, data: DomainData, r: int, hard_mode: str = "ls") -> float:
    """Accuracy of the averaged smoothed source predictions, no training."""
    bank = init_teacher(handles, data.features, r=r, hard_mode=hard_mode)
    return bank_accuracy(bank.rows, data.labels)


# fixed reference scenarios ---------------------------------------------


def _moons_rot30(seed: int) -> ScenarioSpec:
    return ScenarioSpec(
        family="moons",
        num_classes=2,
        source_shifts=(Shift(),),
        target_shift=Shift(rotation_deg=30.0),
        seed=seed,
        noise=0.12,
    )


def _gauss4_rot30(seed: int) -> ScenarioSpec:
    return ScenarioSpec(
        family="gaussians",
        num_classes=4,
        source_shifts=(Shift(),),
        target_shift=Shift(rotation_deg=30.0),
        seed=seed,
        noise=0.45,
        radius=2.0,
    )


def _multi3_gauss4(seed: int) -> ScenarioSpec:
    return ScenarioSpec(
        family="gaussians",
        num_classes=4,
        source_shifts=(Shift(rotation_deg=-20.0), Shift(), Shift(rotation_deg=20.0)),
        target_shift=Shift(rotation_deg=35.0),
        seed=seed,
        noise=0.45,
        radius=2.0,
    )


def _partial_gauss8(seed: int) -> ScenarioSpec:
    return ScenarioSpec(
        family="gaussians",
        num_classes=8,
        source_shifts=(Shift(),),
        target_shift=Shift(rotation_deg=18.0),
        regime="partial",
        k_target=4,
        seed=seed,
        noise=0.18,
        radius=2.2,
    )


_PRESETS = {
    "moons-rot30": _moons_rot30,
    "gauss4-rot30": _gauss4_rot30,
    "multi3-gauss4": _multi3_gauss4,
    "partial-gauss8": _partial_gauss8,
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def preset(name: str, seed: int = 2020) -> ScenarioSpec:
    if name not in _PRESETS:
        raise ContractError(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")
    return _PRESETS[name](seed)
