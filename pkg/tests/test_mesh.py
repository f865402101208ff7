import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tissue_isp.errors import OutOfDomainError, ParameterError
from tissue_isp.mesh import build_square_mesh, candidate_at, export_mesh, nearest_node


@pytest.fixture(scope="module")
def mesh21():
    return build_square_mesh(100.0, 21)


def test_counts_21(mesh21):
    assert mesh21.n_nodes == 441
    assert len(mesh21.triangles) == 800
    assert len(mesh21.left_candidates) == 19
    assert len(mesh21.right_candidates) == 19


def test_smallest_grid():
    m = build_square_mesh(100.0, 3)
    assert m.n_nodes == 9
    assert len(m.triangles) == 8
    assert m.fixed_nodes == {0, 2, 6, 8}


@pytest.mark.parametrize("res", [0, 1, 2, -4])
def test_bad_resolution(res):
    with pytest.raises(ParameterError):
        build_square_mesh(100.0, res)


def test_bad_side():
    with pytest.raises(ParameterError):
        build_square_mesh(0.0, 5)


def _connected(mesh):
    adj = [set() for _ in range(mesh.n_nodes)]
    for a, b, c in mesh.triangles:
        adj[a] |= {b, c}
        adj[b] |= {a, c}
        adj[c] |= {a, b}
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == mesh.n_nodes


@pytest.mark.parametrize("res", [3, 4, 7, 11, 21])
def test_invariants(res):
    m = build_square_mesh(100.0, res)
    tri = m.triangles
    assert np.all(tri >= 0) and np.all(tri < m.n_nodes)
    assert all(len(set(t)) == 3 for t in tri.tolist())
    assert np.all(m.triangle_areas() > 0)
    corners = {0, res - 1, res * (res - 1), res * res - 1}
    assert m.fixed_nodes == corners
    left, right = set(m.left_candidates), set(m.right_candidates)
    assert not left & right
    assert not (left | right) & corners
    assert all(m.node_positions[k, 0] == 0.0 for k in left)
    assert all(m.node_positions[k, 0] == 100.0 for k in right)
    assert not m.interior_nodes & (left | right | corners)
    assert _connected(m)


def test_alternating_diagonals():
    m = build_square_mesh(10.0, 3)
    # the four cells must not all share the same diagonal direction
    diags = set()
    for a, b, c in m.triangles[::2].tolist():
        p = m.node_positions[[a, c]]
        diags.add(np.sign((p[1] - p[0]).prod()))
    assert len(diags) == 2


@given(side=st.floats(0.5, 500.0), res=st.integers(3, 25))
@settings(max_examples=40, deadline=None)
def test_area_sum(side, res):
    m = build_square_mesh(side, res)
    assert abs(m.triangle_areas().sum() - side * side) <= 1e-9 * side * side


def test_interior_region_is_central_40_percent(mesh21):
    pts = mesh21.node_positions[sorted(mesh21.interior_nodes)]
    assert pts.min() == pytest.approx(30.0) and pts.max() == pytest.approx(70.0)
    assert len(mesh21.interior_nodes) == 81


def test_nearest_node_exact(mesh21):
    for k in (0, 17, 220, 440):
        assert nearest_node(mesh21, mesh21.node_positions[k]) == k


def test_nearest_node_tie_break(mesh21):
    mid = 0.5 * (mesh21.node_positions[5] + mesh21.node_positions[6])
    assert nearest_node(mesh21, mid) == 5


def test_nearest_node_center(mesh21):
    assert nearest_node(mesh21, (50.0, 50.0)) == mesh21.node_index(10, 10)


@pytest.mark.parametrize("pt", [(-6.0, 50.0), (50.0, 105.1), (np.nan, 3.0)])
def test_nearest_node_out_of_domain(mesh21, pt):
    with pytest.raises(OutOfDomainError):
        nearest_node(mesh21, pt)


def test_nearest_node_inside_expanded_box(mesh21):
    assert nearest_node(mesh21, (-4.9, -4.9)) == 0


@given(x=st.floats(-5.0, 105.0), y=st.floats(-5.0, 105.0))
@settings(max_examples=100, deadline=None)
def test_nearest_node_idempotent(x, y):
    m = build_square_mesh(100.0, 21)
    k = nearest_node(m, (x, y))
    assert nearest_node(m, m.node_positions[k]) == k


def test_candidate_endpoints(mesh21):
    assert candidate_at(mesh21, "left", 0.0) == mesh21.left_candidates[0]
    assert candidate_at(mesh21, "left", 1.0) == mesh21.left_candidates[-1]
    assert candidate_at(mesh21, "right", 0.5) == mesh21.right_candidates[9]


@pytest.mark.parametrize("u", [-0.01, 1.01])
def test_candidate_bad_u(mesh21, u):
    with pytest.raises(ParameterError):
        candidate_at(mesh21, "left", u)


def test_candidate_bad_side(mesh21):
    with pytest.raises(ParameterError):
        candidate_at(mesh21, "top", 0.5)


@given(us=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=20), side=st.sampled_from(["left", "right"]))
@settings(max_examples=60, deadline=None)
def test_candidate_monotone(us, side):
    m = build_square_mesh(100.0, 21)
    cands = m.left_candidates if side == "left" else m.right_candidates
    positions = [cands.index(candidate_at(m, side, u)) for u in sorted(us)]
    assert positions == sorted(positions)


def test_export(tmp_path):
    m = build_square_mesh(100.0, 3)
    path = tmp_path / "mesh.txt"
    export_mesh(m, path)
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 9 + 8
    assert lines[4].split() == ["4", "50", "50"]
    assert len(lines[9].split()) == 4
