"""Radial feeder model, nonlinear branch-flow plant, and linear voltage sensitivities.

The plant solves the recursive branch-flow equations of a radial network
(flows accumulate losses backward, squared voltages propagate forward, and
the squared branch current is evaluated at the upstream node).  The linear
model is the loss-free path-impedance sensitivity: voltage magnitudes are an
affine map ``v = R p + X q + v0`` where entry (i, j) of R sums the line
resistances shared by the substation paths of nodes i and j, divided by the
substation voltage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SWEEP_TOL = 1e-10
SWEEP_MAX_ITERS = 200


class FeederError(ValueError):
    """Malformed feeder file or invalid feeder topology."""


class VoltageCollapseError(RuntimeError):
    """The power-flow sweep drove a squared voltage to zero or below."""


@dataclass(frozen=True)
class Line:
    from_node: int
    to_node: int
    r: float
    x: float


@dataclass(frozen=True)
class FeederModel:
    """Tree rooted at node 0 (substation), nodes densely indexed 0..N.

    ``parent[i-1]``, ``r[i-1]``, ``x[i-1]`` describe the single line feeding
    node i.  Impedances are per unit; ``base_mva``/``base_kv`` are carried for
    documentation only and never used in computations.
    """

    v_sub: float
    parent: np.ndarray
    r: np.ndarray
    x: np.ndarray
    base_mva: float = 1.0
    base_kv: float = 1.0

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def lines(self) -> list[Line]:
        return [
            Line(int(self.parent[i]), i + 1, float(self.r[i]), float(self.x[i]))
            for i in range(self.n_nodes)
        ]

    def validate(self) -> None:
        n = self.n_nodes
        if self.v_sub <= 0:
            raise FeederError(f"substation voltage must be positive, got {self.v_sub}")
        if len(self.r) != n or len(self.x) != n:
            raise FeederError("parent/r/x arrays must have equal length")
        if np.any(self.r < 0) or np.any(self.x < 0):
            bad = int(np.argmax((self.r < 0) | (self.x < 0))) + 1
            raise FeederError(f"negative impedance on line into node {bad}")
        seen = np.zeros(n + 1, dtype=bool)
        seen[0] = True
        for node in self._topological_order():
            up = int(self.parent[node - 1])
            if not seen[up]:
                raise FeederError(f"node {node} not reachable from the substation")
            seen[node] = True
        if not seen.all():
            missing = int(np.argmin(seen))
            raise FeederError(f"node {missing} not reachable from the substation")

    def _topological_order(self) -> list[int]:
        """Nodes 1..N ordered so every parent precedes its children."""
        children: list[list[int]] = [[] for _ in range(self.n_nodes + 1)]
        for i in range(self.n_nodes):
            children[int(self.parent[i])].append(i + 1)
        order, stack = [], [0]
        while stack:
            node = stack.pop()
            if node > 0:
                order.append(node)
            stack.extend(reversed(children[node]))
        if len(order) != self.n_nodes:
            raise FeederError("feeder graph contains a cycle")
        return order


@dataclass(frozen=True)
class InjectionVector:
    """Nodal active/reactive injections in p.u. (generation > 0, load < 0)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if len(self.p) != len(self.q):
            raise ValueError("p and q must have the same length")

    @classmethod
    def zeros(cls, n: int) -> "InjectionVector":
        return cls(np.zeros(n), np.zeros(n))

    def __add__(self, other: "InjectionVector") -> "InjectionVector":
        return InjectionVector(self.p + other.p, self.q + other.q)


@dataclass(frozen=True)
class BranchFlows:
    """Sending-end flows and squared current per line, aligned with node index."""

    P: np.ndarray
    Q: np.ndarray
    l_sq: np.ndarray


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    flows: BranchFlows
    converged: bool
    iterations: int
    residual: float


def parse_feeder(text: str, source: str = "<string>") -> FeederModel:
    """Parse the feeder CSV format.

    Header comment: ``# base_mva=<f>, base_kv=<f>, v_sub=<f>``.  Branch rows:
    ``from,to,r_pu,x_pu``.  Node 0 is the substation; other ids are arbitrary
    and re-indexed densely 0..N preserving file order.
    """
    header: dict[str, float] = {}
    raw_lines: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            for part in stripped.lstrip("#").split(","):
                if "=" in part:
                    key, _, val = part.partition("=")
                    try:
                        header[key.strip()] = float(val)
                    except ValueError:
                        pass
            continue
        raw_lines.append((lineno, [f.strip() for f in stripped.split(",")]))

    if "v_sub" not in header:
        raise FeederError(f"{source}: header must declare v_sub")
    v_sub = header["v_sub"]

    edges: list[tuple[int, int, float, float, int]] = []
    index: dict[int, int] = {0: 0}
    for lineno, fields in raw_lines:
        if len(fields) != 4:
            raise FeederError(f"{source}:{lineno}: expected from,to,r_pu,x_pu")
        try:
            a, b = int(fields[0]), int(fields[1])
            r, x = float(fields[2]), float(fields[3])
        except ValueError as exc:
            raise FeederError(f"{source}:{lineno}: {exc}") from None
        if r < 0 or x < 0:
            raise FeederError(f"{source}:{lineno}: negative impedance on line {a},{b}")
        for node in (a, b):
            if node not in index:
                index[node] = len(index)
        edges.append((index[a], index[b], r, x, lineno))

    n = len(index) - 1
    if len(edges) != n:
        raise FeederError(
            f"{source}: {len(edges)} lines over {n} non-substation nodes; "
            "a tree needs exactly one line per node (cycle or parallel line present)"
        )

    # Orient edges away from the root; a visit of an already-claimed node is a cycle.
    adjacency: list[list[tuple[int, int]]] = [[] for _ in range(n + 1)]
    for k, (a, b, _, _, _) in enumerate(edges):
        adjacency[a].append((b, k))
        adjacency[b].append((a, k))
    parent = np.full(n, -1, dtype=int)
    r_arr = np.zeros(n)
    x_arr = np.zeros(n)
    visited = np.zeros(n + 1, dtype=bool)
    visited[0] = True
    stack = [0]
    used = set()
    while stack:
        node = stack.pop()
        for nxt, k in adjacency[node]:
            if k in used:
                continue
            used.add(k)
            if visited[nxt]:
                raise FeederError(f"{source}: cycle detected at node {nxt}")
            visited[nxt] = True
            parent[nxt - 1] = node
            r_arr[nxt - 1] = edges[k][2]
            x_arr[nxt - 1] = edges[k][3]
            stack.append(nxt)
    if not visited.all():
        missing = int(np.argmin(visited))
        raise FeederError(f"{source}: node {missing} not reachable from the substation")

    feeder = FeederModel(
        v_sub=v_sub,
        parent=parent,
        r=r_arr,
        x=x_arr,
        base_mva=header.get("base_mva", 1.0),
        base_kv=header.get("base_kv", 1.0),
    )
    feeder.validate()
    return feeder


def load_feeder(path) -> FeederModel:
    path = Path(path)
    return parse_feeder(path.read_text(), source=str(path))


class DistflowSolver:
    """Backward/forward sweep on a fixed feeder.

    Precomputes the subtree incidence S (S[e, j] = 1 iff node j lies at or
    below the line into node e+1), so one sweep iteration is three matrix
    products.  ``solve_distflow`` wraps this for one-shot use.
    """

    def __init__(self, feeder: FeederModel):
        feeder.validate()
        self.feeder = feeder
        n = feeder.n_nodes
        order = feeder._topological_order()
        subtree = np.eye(n)
        for node in reversed(order):
            up = int(feeder.parent[node - 1])
            if up > 0:
                subtree[up - 1] += subtree[node - 1]
        self.subtree = subtree
        self.parent_idx = feeder.parent - 1  # -1 marks substation-fed lines
        self.r = feeder.r
        self.x = feeder.x
        self.z_sq = feeder.r**2 + feeder.x**2

    def solve(
        self,
        inj: InjectionVector,
        tol: float = SWEEP_TOL,
        max_iters: int = SWEEP_MAX_ITERS,
    ) -> PowerFlowSolution:
        f = self.feeder
        n = f.n_nodes
        if len(inj.p) != n:
            raise ValueError(f"injection length {len(inj.p)} != {n} nodes")
        if not (np.all(np.isfinite(inj.p)) and np.all(np.isfinite(inj.q))):
            raise ValueError("injections must be finite")

        S = self.subtree
        v_sq = np.full(n, f.v_sub**2)
        l_sq = np.zeros(n)
        P = np.zeros(n)
        Q = np.zeros(n)
        residual = np.inf
        for it in range(1, max_iters + 1):
            P = S @ (-inj.p) + S @ (self.r * l_sq)
            Q = S @ (-inj.q) + S @ (self.x * l_sq)
            drop = -2.0 * (self.r * P + self.x * Q) + self.z_sq * l_sq
            v_sq_new = f.v_sub**2 + S.T @ drop
            if np.any(v_sq_new <= 0):
                bad = int(np.argmax(v_sq_new <= 0)) + 1
                raise VoltageCollapseError(
                    f"squared voltage non-positive at node {bad} (iteration {it})"
                )
            v_up = np.where(self.parent_idx >= 0, v_sq_new[self.parent_idx], f.v_sub**2)
            l_sq = (P**2 + Q**2) / v_up
            residual = float(np.max(np.abs(v_sq_new - v_sq)))
            v_sq = v_sq_new
            if residual < tol:
                return PowerFlowSolution(
                    v=np.sqrt(v_sq),
                    flows=BranchFlows(P=P, Q=Q, l_sq=l_sq),
                    converged=True,
                    iterations=it,
                    residual=residual,
                )
        return PowerFlowSolution(
            v=np.sqrt(v_sq),
            flows=BranchFlows(P=P, Q=Q, l_sq=l_sq),
            converged=False,
            iterations=max_iters,
            residual=residual,
        )


def solve_distflow(
    feeder: FeederModel,
    inj: InjectionVector,
    tol: float = SWEEP_TOL,
    max_iters: int = SWEEP_MAX_ITERS,
) -> PowerFlowSolution:
    """Solve the nonlinear branch-flow fixed point by backward/forward sweep."""
    return DistflowSolver(feeder).solve(inj, tol=tol, max_iters=max_iters)


@dataclass(frozen=True)
class LinearVoltageModel:
    """Affine voltage map ``v(p, q) = R p + X q + v0`` (all per unit)."""

    R: np.ndarray
    X: np.ndarray
    v0: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.v0)


def build_linear_model(feeder: FeederModel) -> LinearVoltageModel:
    """Path-impedance sensitivities: R[i, j] sums r over the shared root path."""
    solver = DistflowSolver(feeder)
    S = solver.subtree
    # S.T[i, e] flags line e on the path to node i, so S.T diag(r) S sums shared lines.
    R = S.T @ (feeder.r[:, None] * S) / feeder.v_sub
    X = S.T @ (feeder.x[:, None] * S) / feeder.v_sub
    v0 = np.full(feeder.n_nodes, feeder.v_sub)
    return LinearVoltageModel(R=R, X=X, v0=v0)


def predict_voltage(model: LinearVoltageModel, inj: InjectionVector) -> np.ndarray:
    if len(inj.p) != model.n_nodes:
        raise ValueError(f"injection length {len(inj.p)} != {model.n_nodes} nodes")
    return model.R @ inj.p + model.X @ inj.q + model.v0
