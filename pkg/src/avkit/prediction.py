"""Constant-velocity trajectory prediction from tracks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tracking import Track

__all__ = ["PredictedTrajectory", "kinematic_predict"]


@dataclass(frozen=True)
class PredictedTrajectory:
    track_id: int
    horizon: float
    step: float
    timestamps: np.ndarray
    positions: np.ndarray

    @property
    def waypoints(self) -> list[tuple[float, np.ndarray]]:
        return list(zip(self.timestamps.tolist(), self.positions))

    def to_dict(self, frame: int | None = None) -> dict:
        d = {
            "track_id": self.track_id,
            "horizon": self.horizon,
            "step": self.step,
            "waypoints": [[t, *p] for t, p in zip(self.timestamps.tolist(), self.positions.tolist())],
        }
        if frame is not None:
            d = {"frame": frame, **d}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictedTrajectory":
        wp = np.asarray(d["waypoints"], dtype=float).reshape(-1, 4)
        return cls(int(d["track_id"]), float(d["horizon"]), float(d["step"]), wp[:, 0], wp[:, 1:])


def kinematic_predict(track: Track, horizon: float = 3.0, step: float = 0.5) -> PredictedTrajectory:
    """Roll the track forward at constant velocity.

    Produces ``floor(horizon / step)`` waypoints at ``t0 + k * step``;
    a 1e-9 slack absorbs ratios like 0.3 / 0.1.
    """
    if horizon <= 0 or step <= 0:
        raise ValueError("horizon and step must be positive")
    n = int(math.floor(horizon / step + 1e-9))
    offsets = step * np.arange(1, n + 1)
    positions = track.position[None, :] + offsets[:, None] * track.velocity[None, :]
    return PredictedTrajectory(track.id, horizon, step, track.timestamp + offsets, positions)
