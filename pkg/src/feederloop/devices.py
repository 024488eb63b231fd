"""Inverter capability regions and the exact projection used by every primal step.

A device's feasible set is the intersection of an active-power box
``p_min <= p <= p_av`` with an apparent-power disc ``p^2 + q^2 <= s^2``.  The
default is curtailment-only (p_min = 0); a negative p_min models storage.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEAS_SLACK = 1e-15


@dataclass(frozen=True)
class DerCapability:
    node: int
    p_av: float
    s_rating: float
    p_min: float = 0.0

    def __post_init__(self):
        if self.s_rating <= 0:
            raise ValueError(f"node {self.node}: s_rating must be positive")
        if self.p_av < 0:
            raise ValueError(f"node {self.node}: p_av must be nonnegative")
        if self.p_min > 0:
            raise ValueError(f"node {self.node}: p_min must be <= 0")


def project_feasible(setpoint, cap: DerCapability) -> np.ndarray:
    """Euclidean projection of a (p, q) setpoint onto the capability region.

    Case analysis: feasible points are returned unchanged; otherwise scale
    radially onto the disc, and if the scaled active power leaves the box,
    clamp it to the violated face and cap |q| by the disc at that face.
    """
    p, q = float(setpoint[0]), float(setpoint[1])
    s = cap.s_rating
    lo, hi = cap.p_min, cap.p_av
    if lo <= p <= hi and p * p + q * q <= s * s * (1.0 + FEAS_SLACK):
        return np.array([p, q])
    nrm = np.hypot(p, q)
    if nrm > s:
        pd, qd = p * s / nrm, q * s / nrm
    else:
        pd, qd = p, q
    if lo <= pd <= hi:
        return np.array([pd, qd])
    pf = lo if pd < lo else hi
    q_cap = np.sqrt(max(s * s - pf * pf, 0.0))
    return np.array([pf, np.sign(q) * min(abs(q), q_cap)])


def project_fleet_arrays(p, q, p_min, p_av, s) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``project_feasible`` over aligned arrays (one row per device)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    feas = (p >= p_min) & (p <= p_av) & (p * p + q * q <= s * s * (1.0 + FEAS_SLACK))
    nrm = np.hypot(p, q)
    scale = np.where(nrm > s, s / np.where(nrm == 0, 1.0, nrm), 1.0)
    pd, qd = p * scale, q * scale
    in_box = (pd >= p_min) & (pd <= p_av)
    pf = np.clip(pd, p_min, p_av)
    q_cap = np.sqrt(np.maximum(s * s - pf * pf, 0.0))
    qf = np.sign(q) * np.minimum(np.abs(q), q_cap)
    p_out = np.where(feas, p, np.where(in_box, pd, pf))
    q_out = np.where(feas, q, np.where(in_box, qd, qf))
    return p_out, q_out


def fleet_project(points, fleet) -> np.ndarray:
    """Project per-device setpoints independently (the joint set is a product).

    ``points`` has one (p, q) row per device, aligned with ``fleet``.
    """
    points = np.asarray(points, dtype=float)
    if points.shape != (len(fleet), 2):
        raise ValueError(f"expected {(len(fleet), 2)} setpoints, got {points.shape}")
    p_min = np.array([c.p_min for c in fleet])
    p_av = np.array([c.p_av for c in fleet])
    s = np.array([c.s_rating for c in fleet])
    p_out, q_out = project_fleet_arrays(points[:, 0], points[:, 1], p_min, p_av, s)
    return np.column_stack([p_out, q_out])


def load_fleet(path) -> list[DerCapability]:
    """Read a fleet CSV (``node,s_rating_pu`` rows, # comments ignored).

    Available power is time-varying and comes from the scenario; entries are
    returned with p_av = 0.
    """
    path = Path(path)
    fleet = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#") or stripped.lower().startswith("node"):
            continue
        fields = [f.strip() for f in stripped.split(",")]
        if len(fields) != 2:
            raise ValueError(f"{path}:{lineno}: expected node,s_rating_pu")
        try:
            node, s = int(fields[0]), float(fields[1])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        fleet.append(DerCapability(node=node, p_av=0.0, s_rating=s))
    if not fleet:
        raise ValueError(f"{path}: fleet file has no devices")
    return fleet
