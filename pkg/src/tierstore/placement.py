"""Optimal field-to-device placement.

Minimizes the expected access cost of all fields

    sum_i sum_j (F_i * C_ij + F_i * R_ij * P_j) * a_ij

over binary a with exactly one device per field, subject to
``X * sum_i B_i * a_ij <= S_j`` for every device.  ``solve`` is an exact
depth-first branch and bound; ``brute_force`` enumerates every assignment
and serves as its oracle.  Both walk assignments in lexicographic device
order and keep the first strict minimum, so ties go to the lower device
index.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from tierstore.schema import ObjectSchema, SchemaError


class Infeasible(Exception):
    def __init__(self, message: str, constraint: str):
        self.constraint = constraint
        super().__init__(message)


class TooLarge(ValueError):
    pass


def _tuple2(rows) -> tuple[tuple, ...]:
    return tuple(tuple(r) for r in rows)


@dataclass(frozen=True)
class PlacementProblem:
    fields: tuple[str, ...]
    devices: tuple[str, ...]
    F: tuple[float, ...]
    B: tuple[float, ...]
    S: tuple[float, ...]
    P: tuple[float, ...]
    C: tuple[tuple[float, ...], ...]
    R: tuple[tuple[float, ...], ...]
    X: int = 1

    def __post_init__(self):
        for name in ("fields", "devices", "F", "B", "S", "P"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "C", _tuple2(self.C))
        object.__setattr__(self, "R", _tuple2(self.R))
        n, m = len(self.fields), len(self.devices)
        if n == 0 or m == 0:
            raise ValueError("need at least one field and one device")
        if len(self.F) != n or len(self.B) != n:
            raise ValueError(f"F and B must have {n} entries")
        if len(self.S) != m or len(self.P) != m:
            raise ValueError(f"S and P must have {m} entries")
        for name in ("C", "R"):
            mat = getattr(self, name)
            if len(mat) != n or any(len(row) != m for row in mat):
                raise ValueError(f"{name} must be {n}x{m}")
        if self.X < 1:
            raise ValueError("X must be at least 1")
        if any(not 0 <= p <= 1 for p in self.P):
            raise ValueError("failure probabilities must lie in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.fields)

    @property
    def m(self) -> int:
        return len(self.devices)

    def costs(self) -> list[list[float]]:
        """Per-(field, device) contribution F_i*C_ij + F_i*R_ij*P_j."""
        return [
            [self.F[i] * self.C[i][j] + self.F[i] * self.R[i][j] * self.P[j] for j in range(self.m)]
            for i in range(self.n)
        ]

    def scaled(self, k: float) -> PlacementProblem:
        """Same problem with every C and R multiplied by ``k``."""
        return replace(
            self,
            C=[[c * k for c in row] for row in self.C],
            R=[[r * k for r in row] for row in self.R],
        )

    def with_entry(self, param: str, value: float, i: int | None = None, j: int | None = None) -> PlacementProblem:
        if param == "X":
            return replace(self, X=int(value))
        if param in ("C", "R"):
            mat = [list(row) for row in getattr(self, param)]
            mat[i][j] = value
            return replace(self, **{param: mat})
        vec = list(getattr(self, param))
        vec[i if param in ("F", "B") else j] = value
        return replace(self, **{param: vec})


@dataclass(frozen=True)
class PlacementSolution:
    problem: PlacementProblem
    assignment: tuple[int, ...]
    objective: float

    @property
    def matrix(self) -> list[list[int]]:
        return [[int(self.assignment[i] == j) for j in range(self.problem.m)] for i in range(self.problem.n)]

    @property
    def used(self) -> list[float]:
        return device_loads(self.problem, self.assignment)

    def device_of(self, field: str) -> str:
        i = self.problem.fields.index(field)
        return self.problem.devices[self.assignment[i]]

    @property
    def mapping(self) -> dict[str, str]:
        return {f: self.problem.devices[j] for f, j in zip(self.problem.fields, self.assignment)}

    def contributions(self) -> list[tuple[str, str, float]]:
        costs = self.problem.costs()
        return [
            (f, self.problem.devices[j], costs[i][j])
            for i, (f, j) in enumerate(zip(self.problem.fields, self.assignment))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["field", "device", "cost_contribution"])
        for f, d, c in self.contributions():
            w.writerow([f, d, repr(float(c))])
        return buf.getvalue()


def _as_assignment(problem: PlacementProblem, a) -> tuple[int, ...]:
    rows = list(a)
    if len(rows) != problem.n:
        raise ValueError(f"assignment has {len(rows)} rows, problem has {problem.n} fields")
    if rows and isinstance(rows[0], (list, tuple, np.ndarray)):
        out = []
        for i, row in enumerate(rows):
            if len(row) != problem.m or sorted(int(x) for x in row) != [0] * (problem.m - 1) + [1]:
                raise ValueError(f"row {i} of the assignment must select exactly one device")
            out.append(int(list(row).index(1)))
        return tuple(out)
    out = tuple(int(j) for j in rows)
    if any(not 0 <= j < problem.m for j in out):
        raise ValueError("assignment names a device index out of range")
    return out


def objective(problem: PlacementProblem, a) -> float:
    """Total cost of an assignment (device index per field, or 0/1 matrix)."""
    assignment = _as_assignment(problem, a)
    costs = problem.costs()
    total = 0.0
    for i, j in enumerate(assignment):
        total = total + costs[i][j]
    return total


def device_loads(problem: PlacementProblem, a) -> list[float]:
    """Bytes used on each device: X * sum of B over the fields placed there."""
    assignment = _as_assignment(problem, a)
    loads = [0.0] * problem.m
    for i, j in enumerate(assignment):
        loads[j] = loads[j] + problem.B[i]
    return [problem.X * load for load in loads]


def is_feasible(problem: PlacementProblem, a) -> bool:
    return all(u <= s for u, s in zip(device_loads(problem, a), problem.S))


def _diagnose(problem: PlacementProblem) -> Infeasible:
    X = problem.X
    biggest = max(problem.S)
    for f, b in zip(problem.fields, problem.B):
        if X * b > biggest:
            return Infeasible(
                f"field {f!r} needs X*B = {X * b} bytes but the largest device holds {biggest}",
                f"field:{f}",
            )
    demand, supply = X * sum(problem.B), sum(problem.S)
    if demand > supply:
        return Infeasible(
            f"total demand X*sum(B) = {demand} exceeds total capacity sum(S) = {supply}",
            "aggregate",
        )
    tight = min(range(problem.m), key=lambda j: problem.S[j])
    return Infeasible(
        "no packing of fields satisfies every device capacity "
        f"(tightest device {problem.devices[tight]!r}, S = {problem.S[tight]})",
        f"device:{problem.devices[tight]}",
    )


def solve(problem: PlacementProblem) -> PlacementSolution:
    """Exact branch and bound over fields in order, devices in index order.

    The bound adds, for each unassigned field, its cheapest device cost
    ignoring capacity.
    """
    n, m, X = problem.n, problem.m, problem.X
    costs = problem.costs()
    B = [float(b) for b in problem.B]
    S = problem.S
    rest = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        rest[i] = rest[i + 1] + min(costs[i])

    best_val = math.inf
    best: tuple[int, ...] | None = None
    loads = [0.0] * m
    assign = [0] * n

    def dfs(i: int, g: float) -> None:
        nonlocal best_val, best
        if i == n:
            if g < best_val:
                best_val, best = g, tuple(assign)
            return
        for j in range(m):
            load = loads[j] + B[i]
            if X * load > S[j]:
                continue
            ng = g + costs[i][j]
            # slack keeps float rounding in the bound from cutting an optimal branch
            if ng + rest[i + 1] > best_val + 1e-9 * abs(best_val) + 1e-12:
                continue
            prev = loads[j]
            loads[j] = load
            assign[i] = j
            dfs(i + 1, ng)
            loads[j] = prev

    dfs(0, 0.0)
    if best is None:
        raise _diagnose(problem)
    return PlacementSolution(problem, best, objective(problem, best))


BRUTE_FORCE_LIMIT = 10**7


def brute_force(problem: PlacementProblem) -> PlacementSolution:
    """Enumerate all m**n assignments; first (lexicographic) minimum wins."""
    n, m = problem.n, problem.m
    if m**n > BRUTE_FORCE_LIMIT:
        raise TooLarge(f"{m}**{n} assignments exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    dtype = np.int8 if m < 128 else np.int16
    idx = np.indices((m,) * n, dtype=dtype).reshape(n, -1)
    costs = np.array(problem.costs(), dtype=np.float64)
    total = np.zeros(idx.shape[1])
    for i in range(n):
        total = total + costs[i][idx[i]]
    feasible = np.ones(idx.shape[1], dtype=bool)
    for j in range(m):
        load = np.zeros(idx.shape[1])
        for i in range(n):
            load = load + np.where(idx[i] == j, float(problem.B[i]), 0.0)
        feasible &= problem.X * load <= problem.S[j]
    if not feasible.any():
        raise _diagnose(problem)
    k = int(np.argmin(np.where(feasible, total, np.inf)))
    assignment = tuple(int(x) for x in idx[:, k])
    return PlacementSolution(problem, assignment, objective(problem, assignment))


# parameter sweeps ---------------------------------------------------------


@dataclass(frozen=True)
class Axis:
    label: str
    values: tuple[float, ...]
    apply: Callable[[PlacementProblem, float], PlacementProblem]


def param_axis(problem: PlacementProblem, param: str, values: Sequence[float],
               field: str | None = None, device: str | None = None) -> Axis:
    """Axis that overwrites one entry of F, B, S, P, C, R or X."""
    if param not in ("F", "B", "S", "P", "C", "R", "X"):
        raise ValueError(f"unknown parameter {param!r}")
    i = problem.fields.index(field) if field is not None else None
    j = problem.devices.index(device) if device is not None else None
    if param in ("F", "B", "C", "R") and i is None:
        raise ValueError(f"{param} needs a field")
    if param in ("S", "P", "C", "R") and j is None:
        raise ValueError(f"{param} needs a device")
    label = param + "".join(f"[{x}]" for x in (field, device) if x is not None)
    return Axis(label, tuple(values), lambda p, v: p.with_entry(param, v, i, j))


@dataclass(frozen=True)
class SweepCell:
    v1: float
    v2: float
    solution: PlacementSolution | None
    error: str | None = None


def sweep(problem: PlacementProblem, axis1: Axis, axis2: Axis) -> list[SweepCell]:
    """Solve the problem at every grid point; infeasible cells are marked, not raised."""
    cells = []
    for v1 in axis1.values:
        for v2 in axis2.values:
            p = axis2.apply(axis1.apply(problem, v1), v2)
            try:
                cells.append(SweepCell(v1, v2, solve(p)))
            except Infeasible as e:
                cells.append(SweepCell(v1, v2, None, str(e)))
    return cells


def sweep_csv(cells: Sequence[SweepCell], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis1", "axis2", "field", "choice", "objective"])
    for c in cells:
        for f in fields:
            if c.solution is None:
                w.writerow([repr(c.v1), repr(c.v2), f, "INFEASIBLE", ""])
            else:
                w.writerow([repr(c.v1), repr(c.v2), f, c.solution.device_of(f), repr(float(c.solution.objective))])
    return buf.getvalue()


def iterative_recompute_problem(
    iterations: Sequence[float] = (1, 10),
    access_ns: Sequence[float] = (100.0, 1000.0),
    fail_prob: float = 0.01,
    per_iteration_ns: float = 100_000.0,
    durable_recompute_ns: float = 10_000.0,
    frequency: float = 10,
    devices: Sequence[str] = ("dram", "pmem"),
    volatile: Sequence[bool] = (True, False),
    size: float = 8,
    capacity: float = 1 << 30,
) -> PlacementProblem:
    """Fields that each run an iterative computation, on a volatile and a durable device.

    Losing a field on a volatile device costs ``iterations * per_iteration_ns``
    to recompute; on a durable device the cost is a constant.
    """
    n = len(iterations)
    R = [
        [it * per_iteration_ns if vol else durable_recompute_ns for vol in volatile]
        for it in iterations
    ]
    return PlacementProblem(
        fields=[f"field{i + 1}" for i in range(n)],
        devices=list(devices),
        F=[frequency] * n,
        B=[size] * n,
        S=[capacity] * len(devices),
        P=[fail_prob] * len(devices),
        C=[list(access_ns) for _ in range(n)],
        R=R,
        X=1,
    )


def iterations_axis(field_index: int, values: Sequence[float], per_iteration_ns: float = 100_000.0,
                    volatile: Sequence[bool] = (True, False)) -> Axis:
    """Axis scaling a field's recomputation time on the volatile devices with iteration count."""

    def apply(p: PlacementProblem, v: float) -> PlacementProblem:
        R = [list(row) for row in p.R]
        for j, vol in enumerate(volatile):
            if vol:
                R[field_index][j] = v * per_iteration_ns
        return replace(p, R=R)

    return Axis(f"iterations[{field_index + 1}]", tuple(values), apply)


def crossover_recompute(problem: PlacementProblem, i: int, ja: int, jb: int) -> float:
    """R_i,ja at which field i costs the same on devices ja and jb (all else fixed)."""
    C, R, P = problem.C, problem.R, problem.P
    if P[ja] == 0:
        return math.inf
    return (C[i][jb] - C[i][ja] + R[i][jb] * P[jb]) / P[ja]


def emit_tags(solution: PlacementSolution, schema: ObjectSchema) -> str:
    """Schema text with every field tagged with its solved device only."""
    names = set(schema.field_names)
    fields = set(solution.problem.fields)
    if names != fields:
        raise SchemaError(
            f"solution fields {sorted(fields)} do not match schema fields {sorted(names)}"
        )
    return schema.with_tags({f: (d,) for f, d in solution.mapping.items()}).to_text()
