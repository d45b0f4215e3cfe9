import numpy as np
import pytest

from homoglab.grid import (Box, GridFunction, GridFormatError,
                           MisalignedGridError, TriadicCube, cube_of,
                           load_gridfunction, restrict, save_gridfunction,
                           subcubes)


class TestCubeOf:
    def test_interior_point(self):
        assert cube_of(0, (0.4, 0.4)).k == (0, 0)

    def test_neighbor_cell(self):
        assert cube_of(0, (0.6, 0.0)).k == (1, 0)

    def test_level_one(self):
        c = cube_of(1, (2.0, 0.0))
        assert c.k == (1, 0)
        assert c.center == (3.0, 0.0)

    def test_tiebreak_toward_plus_infinity(self):
        # the shared face at 0.5 belongs to the upper cube
        assert cube_of(0, (0.5, 0.0)).k == (1, 0)

    def test_contains_sample(self):
        rng = np.random.default_rng(1)
        for m in (-1, 0, 2):
            for _ in range(200):
                x = rng.uniform(-20, 20, size=2)
                assert cube_of(m, x).contains(x)

    def test_same_cube_iff_same_index(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = rng.uniform(-5, 5, size=2)
            y = rng.uniform(-5, 5, size=2)
            same = cube_of(1, x) == cube_of(1, y)
            assert same == cube_of(1, x).contains(y) or not same


class TestSubcubes:
    def test_count_one_level(self):
        assert len(subcubes(TriadicCube(1, (0, 0)))) == 9

    def test_count_two_levels(self):
        assert len(subcubes(TriadicCube(2, (0, 0)), 2)) == 81

    def test_nesting(self):
        parent = TriadicCube(2, (1, -1))
        two_step = {(c.m, c.k) for c in subcubes(parent, 2)}
        one_then_one = {(g.m, g.k)
                        for c in subcubes(parent)
                        for g in subcubes(c)}
        assert two_step == one_then_one

    def test_partition_volume(self):
        parent = TriadicCube(1, (2, 3))
        kids = subcubes(parent)
        assert sum(c.box().volume() for c in kids) == pytest.approx(
            parent.box().volume(), rel=1e-12)

    def test_children_inside_parent(self):
        parent = TriadicCube(1, (0, 0))
        pb = parent.box()
        centers = set()
        for c in subcubes(parent):
            cb = c.box()
            assert all(pl <= cl and ch <= ph + 1e-12
                       for pl, cl, ch, ph in zip(pb.lo, cb.lo, cb.hi, pb.hi))
            centers.add(cb.center)
        assert len(centers) == 9


class TestGridFunction:
    def test_from_callable(self, unit_box):
        u = GridFunction.from_callable(unit_box, 4, lambda x, y: x + 2 * y)
        assert u.values[0, 0] == pytest.approx(-0.5 - 1.0)
        assert u.h == pytest.approx(1.0 / 3.0)

    def test_rejects_nonfinite(self, unit_box):
        with pytest.raises(ValueError):
            GridFunction(unit_box, np.full((3, 3), np.nan))

    def test_restrict_constant(self):
        parent = TriadicCube(1, (0, 0))
        u = GridFunction.constant(parent.box(), 10, 3.5)
        for child in subcubes(parent):
            v = restrict(u, child)
            assert np.all(v.values == 3.5)
            assert v.n == 4  # (10-1)/3 + 1

    def test_restrict_twice_matches_two_levels(self):
        parent = TriadicCube(2, (0, 0))
        u = GridFunction.from_callable(parent.box(), 28,
                                       lambda x, y: np.sin(x) + y ** 2)
        mid = subcubes(parent)[4]
        small = subcubes(mid)[7]
        via_mid = restrict(restrict(u, mid), small)
        direct = restrict(u, small)
        assert np.array_equal(via_mid.values, direct.values)

    def test_restrict_shares_boundary(self):
        parent = TriadicCube(0, (0, 0))
        u = GridFunction.from_callable(parent.box(), 10,
                                       lambda x, y: x * y + x ** 2)
        child = subcubes(parent)[0]
        v = restrict(u, child)
        assert v.values[0, 0] == u.values[0, 0]

    def test_restrict_misaligned_resolution(self):
        parent = TriadicCube(0, (0, 0))
        u = GridFunction.constant(parent.box(), 9, 0.0)  # n-1 = 8, not divisible
        with pytest.raises(MisalignedGridError):
            restrict(u, subcubes(parent)[0])

    def test_restrict_outside(self):
        parent = TriadicCube(0, (0, 0))
        u = GridFunction.constant(parent.box(), 10, 0.0)
        with pytest.raises(MisalignedGridError):
            restrict(u, TriadicCube(-1, (5, 5)))


class TestGridIO:
    def test_roundtrip(self, tmp_path, unit_box):
        u = GridFunction.from_callable(unit_box, 7,
                                       lambda x, y: np.cos(x) * y + 0.125)
        path = tmp_path / "u.grid"
        save_gridfunction(u, path)
        v = load_gridfunction(path)
        assert np.array_equal(u.values, v.values)
        assert v.box.lo == u.box.lo
        assert v.box.side == u.box.side

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_text("NOT-A-GRID\n2 3 0 0 1\n" + "0\n" * 9)
        with pytest.raises(GridFormatError):
            load_gridfunction(path)

    def test_truncated(self, tmp_path, unit_box):
        u = GridFunction.constant(unit_box, 4, 1.0)
        path = tmp_path / "t.grid"
        save_gridfunction(u, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(GridFormatError):
            load_gridfunction(path)
