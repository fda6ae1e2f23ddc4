import itertools
import math
import random

import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import PERSON
from tierstore.placement import (
    Infeasible,
    PlacementProblem,
    TooLarge,
    brute_force,
    crossover_recompute,
    device_loads,
    emit_tags,
    is_feasible,
    iterations_axis,
    iterative_recompute_problem,
    objective,
    param_axis,
    solve,
    sweep,
    sweep_csv,
)
from tierstore.schema import compute_layout, parse_schema

US = 1000.0


def problem(**kw):
    n = len(kw["F"])
    m = len(kw["S"])
    base = dict(
        fields=[f"f{i}" for i in range(n)],
        devices=[f"d{j}" for j in range(m)],
        B=[8] * n,
        P=[0.0] * m,
        R=[[0.0] * m for _ in range(n)],
        X=1,
    )
    base.update(kw)
    return PlacementProblem(**base)


def enumerate_best(p):
    """Independent oracle: plain itertools enumeration, kept separate from brute_force."""
    best = None
    for a in itertools.product(range(p.m), repeat=p.n):
        if not all(p.X * sum(p.B[i] for i in range(p.n) if a[i] == j) <= p.S[j] for j in range(p.m)):
            continue
        cost = math.fsum(p.F[i] * p.C[i][a[i]] + p.F[i] * p.R[i][a[i]] * p.P[a[i]] for i in range(p.n))
        if best is None or cost < best[0] - 1e-9 * abs(cost):
            best = (cost, a)
    return best


def test_single_term():
    p = problem(F=[1], S=[100], C=[[5]])
    assert objective(p, [0]) == 5
    assert objective(p, [[1]]) == 5


def test_failure_term_vanishes_without_failures():
    p = problem(F=[2, 3], S=[100, 100], C=[[5, 7], [11, 13]], R=[[1e6, 1e6], [1e6, 1e6]])
    assert objective(p, [1, 0]) == 2 * 7 + 3 * 11


def fig5_field2():
    return problem(F=[10], S=[1e9, 1e9], C=[[0.1 * US, 1 * US]], P=[0.01, 0.01], R=[[1000 * US, 10 * US]])


def test_fig5_branch_costs():
    p = fig5_field2()
    assert objective(p, [0]) == pytest.approx(101 * US)
    assert objective(p, [1]) == pytest.approx(11 * US)
    assert solve(p).assignment == (1,)
    assert brute_force(p).assignment == (1,)


def test_separable_when_no_failures():
    rng = random.Random(3)
    C = [[rng.uniform(1, 100) for _ in range(4)] for _ in range(5)]
    p = problem(F=[1] * 5, S=[1e9] * 4, C=C)
    assert list(solve(p).assignment) == [min(range(4), key=row.__getitem__) for row in C]


def test_capacity_pushes_lower_frequency_field_away():
    p = problem(F=[5, 3], B=[8, 8], S=[100, 1e6], C=[[1, 10], [1, 10]], X=10)
    assert solve(p).assignment == (0, 1)
    p2 = problem(F=[3, 5], B=[8, 8], S=[100, 1e6], C=[[1, 10], [1, 10]], X=10)
    assert solve(p2).assignment == (1, 0)
    assert enumerate_best(p)[1] == (0, 1)


def test_tie_goes_to_lower_device():
    p = problem(F=[1, 1], S=[100, 100, 100], C=[[4, 4, 4], [9, 3, 3]])
    assert solve(p).assignment == brute_force(p).assignment == (0, 1)


def test_infeasible_names_binding_constraint():
    p = problem(F=[1], B=[200], S=[100, 50], C=[[1, 1]])
    for fn in (solve, brute_force):
        with pytest.raises(Infeasible) as exc:
            fn(p)
        assert "f0" in str(exc.value)
    p = problem(F=[1, 1], B=[60, 60], S=[100], C=[[1], [1]])
    with pytest.raises(Infeasible, match="total capacity"):
        solve(p)


def test_brute_force_size_limit():
    p = problem(F=[1] * 12, S=[1e9] * 4, C=[[1] * 4] * 12)
    with pytest.raises(TooLarge):
        brute_force(p)
    assert solve(p).assignment == (0,) * 12


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        problem(F=[1, 2], S=[1], C=[[1]])
    with pytest.raises(ValueError):
        problem(F=[1], S=[1], C=[[1]], X=0)
    p = problem(F=[1], S=[10, 10], C=[[1, 2]])
    with pytest.raises(ValueError):
        objective(p, [0, 1])


@st.composite
def instances(draw, max_n=6, max_m=4):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(1, max_m))
    num = st.floats(0, 1e4, allow_nan=False)
    F = draw(st.lists(st.floats(0, 100), min_size=n, max_size=n))
    B = draw(st.lists(st.integers(1, 64), min_size=n, max_size=n))
    X = draw(st.integers(1, 20))
    total = X * sum(B)
    S = draw(st.lists(st.integers(1, total + 1), min_size=m, max_size=m))
    P = draw(st.lists(st.sampled_from([0.0, 0.001, 0.01, 0.1, 0.5, 1.0]), min_size=m, max_size=m))
    C = draw(st.lists(st.lists(st.floats(0.01, 1e4), min_size=m, max_size=m), min_size=n, max_size=n))
    R = draw(st.lists(st.lists(num, min_size=m, max_size=m), min_size=n, max_size=n))
    return problem(F=F, B=B, S=S, P=P, C=C, R=R, X=X)


def outcome(fn, p):
    try:
        s = fn(p)
    except Infeasible:
        return None
    return s


@settings(max_examples=150, deadline=None)
@given(instances())
def test_solve_matches_oracles(p):
    a, b = outcome(solve, p), outcome(brute_force, p)
    ref = enumerate_best(p)
    assert (a is None) == (b is None) == (ref is None)
    if a is None:
        return
    assert a.objective == b.objective
    assert a.assignment == b.assignment
    assert a.objective == pytest.approx(ref[0], rel=1e-9, abs=1e-9)
    assert is_feasible(p, a.assignment)
    assert all(sum(row) == 1 for row in a.matrix)
    assert all(u <= s for u, s in zip(device_loads(p, a.assignment), p.S))


@settings(max_examples=80, deadline=None)
@given(instances(), st.integers(-10, 10))
def test_argmin_scale_invariance(p, e):
    s = outcome(solve, p)
    assume(s is not None)
    k = 2.0**e
    t = solve(p.scaled(k))
    assert t.assignment == s.assignment
    assert t.objective == pytest.approx(k * s.objective, rel=1e-12, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(instances(), st.floats(1.5, 1000.0))
def test_scale_by_arbitrary_factor_keeps_optimum(p, k):
    s = outcome(solve, p)
    assume(s is not None)
    t = solve(p.scaled(k))
    assert objective(p, t.assignment) == pytest.approx(s.objective, rel=1e-9, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(instances(), st.data())
def test_raising_recompute_never_attracts(p, data):
    s = outcome(solve, p)
    assume(s is not None)
    i = data.draw(st.integers(0, p.n - 1))
    j = data.draw(st.integers(0, p.m - 1))
    bump = data.draw(st.floats(1, 1e6))
    t = solve(p.with_entry("R", p.R[i][j] + bump, i, j))
    if s.assignment[i] != j:
        assert t.assignment[i] != j


def test_solution_csv():
    s = solve(fig5_field2())
    assert s.to_csv().splitlines() == ["field,device,cost_contribution", "f0,d1,11000.0"]


# sweeps ---------------------------------------------------------------------


def test_sweep_single_flip_matches_closed_form():
    p = fig5_field2()
    step = 1 * US
    values = [i * step for i in range(0, 201)]
    cells = sweep(p, param_axis(p, "R", values, "f0", "d0"), param_axis(p, "X", [1]))
    choices = [c.solution.assignment[0] for c in cells]
    flips = sum(1 for a, b in zip(choices, choices[1:]) if a != b)
    assert flips == 1 and choices[0] == 0 and choices[-1] == 1
    threshold = crossover_recompute(p, 0, 0, 1)
    # closed form: (1 us - 0.1 us + 10 us * 0.01) / 0.01 = 100 us
    assert threshold == pytest.approx(100 * US)
    first_b = values[choices.index(1)]
    assert first_b - step <= threshold <= first_b


def test_sweep_zero_failure_row_uses_min_access():
    p = iterative_recompute_problem()
    cells = sweep(p, param_axis(p, "P", [0.0], device="dram"), iterations_axis(1, [1, 5, 50]))
    assert all(c.solution.assignment[1] == 0 for c in cells)


def test_sweep_marks_infeasible_cells():
    p = problem(F=[1], B=[10], S=[100, 100], C=[[1, 2]])
    cells = sweep(p, param_axis(p, "X", [1, 50]), param_axis(p, "F", [1], "f0"))
    assert cells[0].solution is not None and cells[1].solution is None
    lines = sweep_csv(cells, p.fields).splitlines()
    assert lines[0] == "axis1,axis2,field,choice,objective"
    assert lines[2].split(",")[3] == "INFEASIBLE"


def test_preset_high_recompute_corner_is_durable():
    p = iterative_recompute_problem()
    its = [float(i) for i in range(1, 21)]
    cells = sweep(p, iterations_axis(0, its), iterations_axis(1, its))
    corner = cells[-1].solution
    assert corner.mapping == {"field1": "pmem", "field2": "pmem"}
    at10 = next(c for c in cells if c.v1 == 1 and c.v2 == 10)
    assert at10.solution.device_of("field2") == "pmem"


# tags -----------------------------------------------------------------------


def person_problem(C_disk_image):
    names = ["age", "image", "place", "name"]
    C = [[1000, 20_000] for _ in names]
    C[1] = [1000, C_disk_image]
    return PlacementProblem(
        fields=names, devices=["pmem", "disk"], F=[1] * 4, B=[4, 8, 8, 8],
        S=[1e9, 1e9], P=[0, 0], C=C, R=[[0, 0]] * 4, X=1,
    )


def test_emit_all_pmem():
    schema = parse_schema(PERSON)
    text = emit_tags(solve(person_problem(20_000)), schema)
    assert all(f.tags == ("pmem",) for f in parse_schema(text).fields)


def test_emit_image_on_disk_roundtrip():
    schema = parse_schema(PERSON)
    sol = solve(person_problem(10))
    back = parse_schema(emit_tags(sol, schema))
    assert back.field("image").tags == ("disk",)
    assert compute_layout(back).assignment == sol.mapping


def test_emit_mismatch():
    with pytest.raises(ValueError):
        emit_tags(solve(fig5_field2()), parse_schema(PERSON))
