import dataclasses
import hashlib

import numpy as np
import pytest

from partflow import scenesim as ss
from conftest import make_scene, part


def ancestor_walk_flow(scene):
    """Independent per-pixel oracle: find the owning part by z-order, then
    walk its parent chain summing local motions."""
    h, w = scene.canvas
    values = np.zeros((h, w, 2), dtype=np.float64)
    by_z = sorted(range(len(scene.parts)), key=lambda k: scene.parts[k].z_order,
                  reverse=True)
    sils = [p.silhouette() for p in scene.parts]
    for y in range(h):
        for x in range(w):
            for k in by_z:
                p = scene.parts[k]
                px, py = p.position
                if (px <= x < px + p.size_px and py <= y < py + p.size_px
                        and sils[k][y - py, x - px]):
                    j = k
                    while j is not None:
                        values[y, x] += scene.parts[j].local_motion
                        j = scene.parts[j].parent_index
                    break
    return values


def assert_forest(anc):
    n = anc.shape[0]
    assert np.all(np.diag(anc) == 0)
    # transitively closed
    closure = anc.astype(bool).copy()
    for j in range(n):
        closure |= np.outer(closure[:, j], closure[j, :])
    assert np.array_equal(closure.astype(np.uint8), anc)
    # each column's ancestor set is a chain
    for k in range(n):
        ancestors = np.nonzero(anc[:, k])[0]
        for i in ancestors:
            for j in ancestors:
                assert i == j or anc[i, j] or anc[j, i]


class TestFamilies:
    def test_shapes3_motion_rules(self, shapes3_spec):
        for i in range(20):
            scene = ss.sample_scene(shapes3_spec, i)
            circle, triangle, square = scene.parts
            assert circle.parent_index is None
            assert triangle.parent_index == 0 and square.parent_index == 0
            assert abs(circle.local_motion[0]) == abs(circle.local_motion[1]) > 0
            assert triangle.local_motion[1] == 0 and triangle.local_motion[0] != 0
            assert square.local_motion[0] == 0 and square.local_motion[1] != 0

    def test_shapes9_groups(self):
        spec = dataclasses.replace(shapes3_spec_64(), family="shapes9")
        scene = ss.sample_scene(spec, 0)
        parents = [p.parent_index for p in scene.parts]
        assert parents == [None, 0, 0, None, 3, 4, None, 6, None]
        assert len(scene.parts) == 9
        assert_forest(scene.ancestor_matrix)

    def test_digits6_structure(self, fake_glyphs):
        spec = ss.DatasetSpec(family="digits6", n_pairs=5, canvas=(64, 64), rng_seed=1)
        scene = ss.sample_scene(spec, 0, glyphs=fake_glyphs)
        parents = [p.parent_index for p in scene.parts]
        assert parents == [None, 0, 0, None, 3, 4]
        for p in scene.parts:
            assert p.kind == "digit"
            assert set(np.unique(p.glyph.astype(int))) <= {0, 1}
        # second group is a chain: 3 diagonal, 4 horizontal, 5 vertical
        d3, d4, d5 = scene.parts[3:]
        assert abs(d3.local_motion[0]) == abs(d3.local_motion[1])
        assert d4.local_motion[1] == 0
        assert d5.local_motion[0] == 0

    def test_digits_require_glyphs(self):
        spec = ss.DatasetSpec(family="digits6", n_pairs=1, canvas=(64, 64), rng_seed=1)
        with pytest.raises(ValueError, match="glyph"):
            ss.sample_scene(spec, 0)

    def test_squares_generalization_shared_motion(self):
        spec = ss.DatasetSpec(family="squares_generalization", n_pairs=5,
                              canvas=(64, 64), rng_seed=2, n_squares=3)
        scene = ss.sample_scene(spec, 0)
        assert len(scene.parts) == 5
        squares = scene.parts[2:]
        assert all(s.kind == "square" and s.parent_index == 0 for s in squares)
        motions = {s.local_motion for s in squares}
        assert len(motions) == 1


def shapes3_spec_64():
    return ss.DatasetSpec(family="shapes3", n_pairs=10, canvas=(64, 64), rng_seed=3)


class TestSampling:
    def test_determinism(self, shapes3_spec):
        a = ss.sample_scene(shapes3_spec, 4)
        b = ss.sample_scene(shapes3_spec, 4)
        for pa, pb in zip(a.parts, b.parts):
            assert pa == pb
        pa = ss.render_pair(a)
        pb = ss.render_pair(b)
        assert np.array_equal(pa.frame1, pb.frame1)
        assert np.array_equal(pa.frame2, pb.frame2)
        assert np.array_equal(pa.flow.values, pb.flow.values)

    def test_pairs_differ_across_indices(self, shapes3_spec):
        a = ss.sample_scene(shapes3_spec, 0)
        b = ss.sample_scene(shapes3_spec, 1)
        assert any(pa.position != pb.position or pa.local_motion != pb.local_motion
                   for pa, pb in zip(a.parts, b.parts))

    def test_containment_both_frames(self, shapes3_spec):
        for i in range(20):
            scene = ss.sample_scene(shapes3_spec, i)
            h, w = scene.canvas
            for k, p in enumerate(scene.parts):
                g = scene.global_motions()[k]
                for shift in ((0.0, 0.0), g, np.rint(g)):
                    x, y = p.position[0] + shift[0], p.position[1] + shift[1]
                    assert 0 <= x and x + p.size_px <= w
                    assert 0 <= y and y + p.size_px <= h

    def test_placement_failure_names_pair(self):
        spec = ss.DatasetSpec(family="shapes3", n_pairs=3, canvas=(32, 32),
                              motion_magnitude_range=(30.0, 40.0), rng_seed=0)
        with pytest.raises(ss.SceneGenerationError, match="pair 1"):
            ss.sample_scene(spec, 1)

    def test_bad_specs_rejected(self):
        with pytest.raises(ValueError):
            ss.DatasetSpec(family="nope", n_pairs=1)
        with pytest.raises(ValueError):
            ss.DatasetSpec(family="shapes3", n_pairs=0)
        with pytest.raises(ValueError):
            ss.DatasetSpec(family="shapes3", n_pairs=1, canvas=(16, 16))
        with pytest.raises(ValueError):
            ss.DatasetSpec(family="shapes3", n_pairs=1,
                           motion_magnitude_range=(0.0, 2.0))

    def test_ancestor_matrix_is_closed_forest(self, fake_glyphs):
        for family in ss.FAMILIES:
            spec = ss.DatasetSpec(family=family, n_pairs=2, canvas=(64, 64),
                                  rng_seed=5)
            scene = ss.sample_scene(spec, 0, glyphs=fake_glyphs)
            assert_forest(scene.ancestor_matrix)


class TestFlow:
    def test_hand_computed_chain(self):
        scene = make_scene([
            part("circle", size=6, pos=(2, 2), z=0, motion=(2.0, 2.0)),
            part("triangle", size=6, pos=(12, 12), z=1, parent=0, motion=(3.0, 0.0)),
        ])
        flow = ss.ground_truth_flow(scene).values
        assert tuple(flow[15, 15]) == (5.0, 2.0)   # triangle pixel
        assert tuple(flow[4, 4]) == (2.0, 2.0)     # circle pixel
        assert tuple(flow[0, 31]) == (0.0, 0.0)    # background

    @pytest.mark.parametrize("family", ["shapes3", "shapes9", "squares_generalization"])
    def test_oracle_agreement(self, family):
        spec = ss.DatasetSpec(family=family, n_pairs=8, canvas=(48, 48), rng_seed=9)
        for i in range(8):
            scene = ss.sample_scene(spec, i)
            got = ss.ground_truth_flow(scene).values.astype(np.float64)
            want = ancestor_walk_flow(scene).astype(np.float32).astype(np.float64)
            assert np.array_equal(got, want)


class TestRender:
    def test_static_scene_identity(self):
        scene = make_scene([part("square", motion=(0.0, 0.0))])
        pair = ss.render_pair(scene)
        assert np.array_equal(pair.frame1, pair.frame2)
        assert not pair.flow.values.any()

    def test_occlusion_winner(self):
        lower = part("square", size=8, pos=(4, 4), color=(1.0, 0.0, 0.0), z=0,
                     motion=(2.0, 0.0))
        upper = part("square", size=8, pos=(8, 4), color=(0.0, 1.0, 0.0), z=1,
                     motion=(0.0, 2.0))
        pair = ss.render_pair(make_scene([lower, upper]))
        # overlap column range [8, 12): upper wins color and motion
        assert tuple(pair.frame1[6, 9]) == (0.0, 1.0, 0.0)
        assert tuple(pair.flow.values[6, 9]) == (0.0, 2.0)
        assert tuple(pair.frame1[6, 5]) == (1.0, 0.0, 0.0)
        assert tuple(pair.flow.values[6, 5]) == (2.0, 0.0)
        # per-pixel winner oracle over the full canvas
        owner = ss.resolve_occlusion(pair.scene)
        for y in range(4, 12):
            for x in range(4, 16):
                inside_low = 4 <= x < 12 and 4 <= y < 12
                inside_up = 8 <= x < 16 and 4 <= y < 12
                want = 1 if inside_up else (0 if inside_low else -1)
                assert owner[y, x] == want

    def test_masks_disjoint_and_complete(self, shapes3_spec):
        for i in range(10):
            pair = ss.render_pair(ss.sample_scene(shapes3_spec, i))
            stack = np.stack(pair.masks).astype(int)
            assert stack.sum(axis=0).max() <= 1
            assert all(m.any() for m in pair.masks)

    def test_frame2_translates_by_rounded_global(self):
        scene = make_scene([part("square", size=5, pos=(3, 3), motion=(5.6, -1.4))])
        pair = ss.render_pair(scene)
        # rint(5.6) = 6, rint(-1.4) = -1
        assert (pair.frame2[2:7, 9:14, 0] == 1.0).all()
        assert not pair.frame2[3:8, 3:8, 0].any()  # old location vacated
        assert np.allclose(pair.flow.values[pair.masks[0]], (5.6, -1.4), atol=1e-6)


class TestDatasetIO:
    def test_write_read_roundtrip(self, tmp_path, shapes3_spec):
        spec = dataclasses.replace(shapes3_spec, n_pairs=6)
        manifest = ss.write_dataset(spec, tmp_path / "ds")
        lines = manifest.read_text().splitlines()
        assert sum(1 for ln in lines if ln.startswith("pair ")) == 6
        rec = ss.read_pair_dir(tmp_path / "ds" / "pairs" / "3")
        want = ss.render_pair(ss.sample_scene(spec, 3))
        assert np.array_equal(rec["flow"], want.flow.values)
        assert np.array_equal(np.stack(rec["masks"]), np.stack(want.masks))
        # 8-bit png quantization
        assert np.abs(rec["frame1"] - want.frame1).max() <= 0.5 / 255

    def test_regeneration_is_byte_identical(self, tmp_path, shapes3_spec):
        spec = dataclasses.replace(shapes3_spec, n_pairs=4)
        ss.write_dataset(spec, tmp_path / "a")
        respec = ss.spec_from_manifest(tmp_path / "a" / "manifest")
        assert respec == spec
        ss.write_dataset(respec, tmp_path / "b")
        for sub in sorted((tmp_path / "a").rglob("*")):
            other = tmp_path / "b" / sub.relative_to(tmp_path / "a")
            if sub.is_file():
                a = hashlib.sha256(sub.read_bytes()).hexdigest()
                b = hashlib.sha256(other.read_bytes()).hexdigest()
                assert a == b, sub.name

    def test_flow_codec_endianness(self, tmp_path):
        flow = np.array([[[1.5, -2.0], [0.0, 3.25]]], dtype=np.float32)
        ss.write_flow(tmp_path / "f.f32", flow)
        raw = (tmp_path / "f.f32").read_bytes()
        assert raw == np.array([1.5, -2.0, 0.0, 3.25], dtype="<f4").tobytes()
        back = ss.read_flow(tmp_path / "f.f32", (1, 2))
        assert np.array_equal(back, flow)

    def test_flow_size_mismatch(self, tmp_path):
        (tmp_path / "f.f32").write_bytes(b"\x00" * 12)
        with pytest.raises(ss.DatasetIOError, match="expected"):
            ss.read_flow(tmp_path / "f.f32", (2, 2))

    def test_external_flow_accepted_verbatim(self, tmp_path, shapes3_spec):
        pair = ss.render_pair(ss.sample_scene(shapes3_spec, 0))
        d = tmp_path / "pair0"
        ss.write_pair_dir(pair, d)
        custom = np.full_like(pair.flow.values, 0.125)
        ss.write_flow(d / "flow.f32", custom)
        rec = ss.read_pair_dir(d)
        assert np.array_equal(rec["flow"], custom)

    def test_load_dataset_arrays(self, tmp_path, shapes3_spec):
        spec = dataclasses.replace(shapes3_spec, n_pairs=3)
        ss.write_dataset(spec, tmp_path / "ds")
        arrays = ss.load_dataset_arrays(tmp_path / "ds")
        assert arrays["frame1"].shape == (3, 32, 32, 3)
        assert arrays["flow"].shape == (3, 32, 32, 2)
        with pytest.raises(ss.DatasetIOError):
            ss.load_dataset_arrays(tmp_path / "missing")
