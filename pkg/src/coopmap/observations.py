"""Observation records shared by the map model, estimator, fusion and simulator.

Every measurement in the system, no matter which sensor produced it, is carried
as an :class:`ObservationRecord`: a timestamped value with a source class and a
covariance. The source class selects the measurement model used by the
estimator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = ["SourceClass", "ObservationRecord", "CovarianceError"]


class SourceClass(str, Enum):
    """Which sensor/relation produced a measurement.

    V_O   vehicle observes an obstacle (2D position in the observer body frame)
    V_V   vehicle observes another vehicle (same model as V_O)
    V_F   vehicle observes a map feature (same model, against the reference point)
    M_F   map prior on a feature position (3D, map frame)
    M_O   map-frame obstacle position prior (2D; used for transmitted estimates)
    M_V   full 6-DOF pose pseudo-measurement (map matching or transmitted prior)
    G     GNSS planar position (2D, map frame)
    """

    V_O = "V-O"
    V_V = "V-V"
    V_F = "V-F"
    M_F = "M-F"
    M_O = "M-O"
    M_V = "M-V"
    G = "G"


# value dimension demanded by each class' measurement model
_CLASS_DIM = {
    SourceClass.V_O: 2,
    SourceClass.V_V: 2,
    SourceClass.V_F: 2,
    SourceClass.M_F: 3,
    SourceClass.M_O: 2,
    SourceClass.M_V: 6,
    SourceClass.G: 2,
}


class CovarianceError(ValueError):
    """Covariance matrix is not symmetric positive definite."""


def _check_covariance(cov: np.ndarray, dim: int) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (dim, dim):
        raise CovarianceError(f"covariance shape {cov.shape}, expected ({dim}, {dim})")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise CovarianceError("covariance is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("covariance is not positive definite") from exc
    return cov


@dataclass
class ObservationRecord:
    """One measurement z with source class, covariance and provenance ids.

    ``observer_id`` is the sensing vehicle for V-* classes and the subject of
    G / M-V records; it is None for map priors (M-F, M-O). ``subject_id`` is
    the observed entity (obstacle, vehicle or feature id).
    """

    source_class: SourceClass
    observer_id: str | None
    subject_id: str
    stamp: float
    value: np.ndarray
    covariance: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.source_class = SourceClass(self.source_class)
        self.value = np.asarray(self.value, dtype=float).ravel()
        dim = _CLASS_DIM[self.source_class]
        if self.value.shape != (dim,):
            raise ValueError(
                f"{self.source_class.value} value has dimension {self.value.size}, "
                f"expected {dim}"
            )
        if not np.all(np.isfinite(self.value)):
            raise ValueError("observation value must be finite")
        self.covariance = _check_covariance(self.covariance, dim)

    @property
    def dim(self) -> int:
        return self.value.size

    def to_dict(self) -> dict:
        return {
            "class": self.source_class.value,
            "observer": self.observer_id,
            "subject": self.subject_id,
            "stamp": self.stamp,
            "value": [float(v) for v in self.value],
            "covariance": [[float(c) for c in row] for row in self.covariance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationRecord":
        return cls(
            source_class=SourceClass(d["class"]),
            observer_id=d.get("observer"),
            subject_id=d["subject"],
            stamp=float(d["stamp"]),
            value=np.asarray(d["value"], dtype=float),
            covariance=np.asarray(d["covariance"], dtype=float),
        )


def class_dimension(source_class: SourceClass) -> int:
    """Value dimension enforced for the given source class."""
    return _CLASS_DIM[SourceClass(source_class)]
