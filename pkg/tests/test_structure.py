import itertools

import numpy as np
import pytest
import torch

from partflow import scenesim as ss
from partflow.structure import (
    InvalidStructureError,
    PartHierarchy,
    StructureParams,
    binarize_structure,
    compose_global,
    extract_hierarchy,
    hierarchy_to_text,
    overall_motion,
    structure_penalty,
    transitive_closure,
)


def fields_from_vectors(vectors, h=1, w=1):
    """(B=1, d, 2, h, w) constant fields from per-dimension 2-vectors."""
    t = torch.zeros(1, len(vectors), 2, h, w, dtype=torch.float64)
    for k, (dx, dy) in enumerate(vectors):
        t[0, k, 0] = dx
        t[0, k, 1] = dy
    return t


def vec(globals_, k):
    return tuple(globals_[0, k, :, 0, 0].tolist())


class TestComposeGlobal:
    def test_one_level_tree(self):
        locals_ = fields_from_vectors([(2, 2), (3, 0), (0, 3)])
        s = torch.zeros(3, 3, dtype=torch.float64)
        s[0, 1] = s[0, 2] = 1.0
        g = compose_global(locals_, s)
        assert vec(g, 0) == (2, 2)
        assert vec(g, 1) == (5, 2)
        assert vec(g, 2) == (2, 5)

    def test_chain(self):
        locals_ = fields_from_vectors([(1, 1), (2, 0), (0, -3)])
        s = torch.zeros(3, 3, dtype=torch.float64)
        s[0, 1] = s[0, 2] = s[1, 2] = 1.0
        g = compose_global(locals_, s)
        assert vec(g, 0) == (1, 1)
        assert vec(g, 1) == (3, 1)
        assert vec(g, 2) == (3, -2)

    def test_zero_structure_is_identity(self):
        locals_ = fields_from_vectors([(1, 2), (3, 4)])
        g = compose_global(locals_, torch.zeros(2, 2, dtype=torch.float64))
        assert torch.equal(g, locals_)

    def test_relaxed_entry(self):
        locals_ = fields_from_vectors([(2, 2), (3, 0)])
        s = torch.zeros(2, 2, dtype=torch.float64)
        s[0, 1] = 0.5
        g = compose_global(locals_, s)
        assert vec(g, 1) == (3 + 0.5 * 2, 0 + 0.5 * 2)

    def test_exact_linearity(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            d = int(rng.integers(2, 6))
            l1 = torch.tensor(rng.integers(-8, 9, (1, d, 2, 3, 3)), dtype=torch.float64)
            l2 = torch.tensor(rng.integers(-8, 9, (1, d, 2, 3, 3)), dtype=torch.float64)
            s = torch.tensor(rng.choice([0.0, 0.5, 1.0], (d, d)), dtype=torch.float64)
            s.fill_diagonal_(0)
            a, b = 2.0, 3.0
            left = compose_global(a * l1 + b * l2, s)
            right = a * compose_global(l1, s) + b * compose_global(l2, s)
            assert torch.equal(left, right)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            compose_global(torch.zeros(2, 2, 4, 4), torch.zeros(2, 2))
        with pytest.raises(ValueError):
            compose_global(torch.zeros(1, 3, 2, 4, 4), torch.zeros(2, 2))


class TestOverallMotion:
    def test_single_active(self):
        g = fields_from_vectors([(0, 0), (2, -1), (0, 0)])
        assert torch.equal(overall_motion(g), g[:, 1])

    def test_all_zero(self):
        g = torch.zeros(1, 4, 2, 5, 5)
        assert not overall_motion(g).any()

    def test_disjoint_supports_restrict_to_sources(self):
        g = torch.zeros(1, 2, 2, 1, 4, dtype=torch.float64)
        g[0, 0, :, 0, :2] = torch.tensor([[1.0], [2.0]])
        g[0, 1, :, 0, 2:] = torch.tensor([[3.0], [-1.0]])
        total = overall_motion(g)
        assert torch.equal(total[0, :, 0, :2], g[0, 0, :, 0, :2])
        assert torch.equal(total[0, :, 0, 2:], g[0, 1, :, 0, 2:])


class TestRoundTrip:
    @pytest.mark.parametrize("family", ["shapes3", "shapes9", "squares_generalization"])
    def test_scene_flow_reassembly(self, family):
        # Constant local fields composed through the ground-truth ancestor
        # matrix give each part its exact global motion; restricting each
        # global field to its (disjoint) mask reassembles the flow exactly.
        spec = ss.DatasetSpec(family=family, n_pairs=3, canvas=(48, 48), rng_seed=21)
        for i in range(3):
            scene = ss.sample_scene(spec, i)
            pair = ss.render_pair(scene)
            n = len(scene.parts)
            locals_ = fields_from_vectors(
                [p.local_motion for p in scene.parts], *scene.canvas)
            a = torch.tensor(scene.ancestor_matrix, dtype=torch.float64)
            globals_ = compose_global(locals_, a)
            want_globals = scene.global_motions()
            for k in range(n):
                assert np.array_equal(
                    globals_[0, k, :, 0, 0].numpy(), want_globals[k])
            masked = torch.zeros_like(globals_)
            for k, mask in enumerate(pair.masks):
                m = torch.tensor(mask)
                masked[0, k, :, m] = globals_[0, k, :, m]
            total = overall_motion(masked)[0]
            flow = torch.tensor(pair.flow.values, dtype=torch.float64).permute(2, 0, 1)
            assert torch.equal(total.to(torch.float32).to(torch.float64), flow)


class TestBinarize:
    def test_threshold_cases(self):
        s = np.array([[0.0, 0.73], [0.12, 0.0]])
        b = binarize_structure(s)
        assert b[0, 1] == 1 and b[1, 0] == 0

    def test_boundary_is_strict(self):
        s = np.array([[0.0, 0.5], [0.5001, 0.0]])
        b = binarize_structure(s)
        assert b[0, 1] == 0 and b[1, 0] == 1

    def test_diagonal_zeroed(self):
        b = binarize_structure(np.ones((3, 3)))
        assert np.all(np.diag(b) == 0)

    def test_logit_sign_equivalence(self):
        logits = torch.tensor([[0.0, 0.2, -0.3], [-4.0, 0.0, 1e-3], [2.0, -1e-3, 0.0]])
        params = StructureParams(3)
        with torch.no_grad():
            params.logits.copy_(logits)
        b = binarize_structure(params.matrix())
        want = (logits.numpy() > 0).astype(np.uint8)
        np.fill_diagonal(want, 0)
        assert np.array_equal(b, want)


def all_forests(n):
    """Every parent-pointer forest on n labeled nodes."""
    for parents in itertools.product(*[[None] + [p for p in range(n)] for _ in range(n)]):
        ok = True
        for k in range(n):
            seen = {k}
            j = parents[k]
            while j is not None:
                if j in seen:
                    ok = False
                    break
                seen.add(j)
                j = parents[j]
            if not ok:
                break
        if ok and all(parents[k] != k for k in range(n)):
            yield parents


def closure_of_parents(parents):
    n = len(parents)
    a = np.zeros((n, n), dtype=np.uint8)
    for k in range(n):
        j = parents[k]
        while j is not None:
            a[j, k] = 1
            j = parents[j]
    return a


class TestExtractHierarchy:
    def test_three_node_chain(self):
        a = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=np.uint8)
        h = extract_hierarchy(a, [0, 1, 2])
        assert h.parent == {0: None, 1: 0, 2: 1}

    def test_all_zero_matrix(self):
        h = extract_hierarchy(np.zeros((4, 4), dtype=np.uint8), [0, 1, 2, 3])
        assert h.parent == {0: None, 1: None, 2: None, 3: None}
        assert h.roots() == [0, 1, 2, 3]

    def test_cycle_reported(self):
        a = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        with pytest.raises(InvalidStructureError, match="cycle"):
            extract_hierarchy(a, [0, 1])

    def test_missing_closure_reported(self):
        # 0->1 and 1->2 without 0->2
        a = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=np.uint8)
        with pytest.raises(InvalidStructureError, match="not transitively closed"):
            extract_hierarchy(a, [0, 1, 2])

    def test_non_chain_ancestors_reported(self):
        # 0 and 1 both ancestors of 2 but unordered
        a = np.array([[0, 0, 1], [0, 0, 1], [0, 0, 0]], dtype=np.uint8)
        with pytest.raises(InvalidStructureError, match="not a chain"):
            extract_hierarchy(a, [0, 1, 2])

    def test_respects_active_dim_subset(self):
        a = np.zeros((5, 5), dtype=np.uint8)
        a[1, 3] = 1
        a[0, 2] = a[0, 4] = 1   # dims 0/2/4 are not active; must be ignored
        h = extract_hierarchy(a, [1, 3])
        assert h.parent == {1: None, 3: 1}

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
    def test_exhaustive_roundtrip(self, n):
        # extract(closure(F)) == F for every forest on n nodes
        count = 0
        for parents in all_forests(n):
            a = closure_of_parents(parents)
            h = extract_hierarchy(a, list(range(n)))
            assert tuple(h.parent[k] for k in range(n)) == parents
            count += 1
        assert count >= 1

    def test_brute_force_uniqueness_three_nodes(self):
        # the closure of each 3-node forest maps back to exactly that forest
        a = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=np.uint8)
        matches = [p for p in all_forests(3) if np.array_equal(closure_of_parents(p), a)]
        assert matches == [(None, 0, 1)]


class TestTransitiveClosure:
    def test_chain_closure(self):
        a = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=np.uint8)
        c = transitive_closure(a)
        assert c[0, 2] == 1

    def test_cycle_marks_diagonal(self):
        a = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        c = transitive_closure(a)
        assert c[0, 0] == 1 and c[1, 1] == 1


class TestStructurePenalty:
    def test_zero_fields(self):
        assert structure_penalty(torch.zeros(1, 3, 2, 4, 4)).item() == 0.0

    def test_closed_form_ones(self):
        fields = torch.zeros(1, 2, 2, 5, 5)
        fields[0, 0] = 1.0
        want = np.sqrt(2 * 25)
        assert structure_penalty(fields).item() == pytest.approx(want, rel=1e-6)

    def test_chain_encoding_beats_flat(self):
        # shapes-style motions: parent diagonal (2,2), children (3,0) and (0,3).
        # flat: every dimension carries its full global motion.
        h = w = 8
        flat = fields_from_vectors([(2, 2), (5, 2), (2, 5)], h, w)
        chained = fields_from_vectors([(2, 2), (3, 0), (0, 3)], h, w)
        assert structure_penalty(chained).item() < structure_penalty(flat).item()

    def test_gradient_finite_at_zero(self):
        fields = torch.zeros(1, 2, 2, 3, 3, requires_grad=True)
        structure_penalty(fields).backward()
        assert torch.isfinite(fields.grad).all()


class TestStructureParams:
    def test_matrix_range_and_diagonal(self):
        p = StructureParams(4)
        s = p.matrix()
        assert s.shape == (4, 4)
        assert torch.all(s >= 0) and torch.all(s <= 1)
        assert torch.all(torch.diag(s) == 0)

    def test_init_near_zero(self):
        s = StructureParams(4, logit_init=-2.0).matrix()
        off = s[~torch.eye(4, dtype=torch.bool)]
        assert torch.allclose(off, torch.full_like(off, 0.11920292))


def test_hierarchy_export_format():
    h = PartHierarchy(active_dims=(2, 5, 7), parent={2: None, 5: 2, 7: 5},
                      ancestor_sets={2: frozenset(), 5: frozenset({2}),
                                     7: frozenset({2, 5})})
    text = hierarchy_to_text(h, labels={2: "circle", 5: "triangle", 7: "square"})
    assert "triangle <- circle" in text
    assert "square <- triangle" in text
    assert "circle <- (root)" in text
