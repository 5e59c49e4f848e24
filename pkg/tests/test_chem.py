import numpy as np
import pytest

from pockformer import chem
from pockformer.chem import (ComplexRecord, SmilesError, coordinate_range_ok,
                             denormalize_complex, normalize_complex,
                             parse_smiles, random_rotation, randomize_smiles,
                             rmsd, rotate_record, write_smiles)

from conftest import graphs_isomorphic


class TestParse:
    def test_chain(self):
        g = parse_smiles("CCO")
        assert [a.element for a in g.atoms] == ["C", "C", "O"]
        assert [(b.i, b.j, b.order) for b in g.bonds] == [(0, 1, 1.0), (1, 2, 1.0)]

    def test_benzene(self):
        g = parse_smiles("c1ccccc1")
        assert len(g.atoms) == 6
        assert all(a.aromatic and a.element == "C" for a in g.atoms)
        assert len(g.bonds) == 6
        assert all(b.order == 1.5 for b in g.bonds)

    def test_branch_and_double(self):
        g = parse_smiles("C(=O)N")
        assert [a.element for a in g.atoms] == ["C", "O", "N"]
        orders = {(b.i, b.j): b.order for b in g.bonds}
        assert orders == {(0, 1): 2.0, (0, 2): 1.0}

    def test_bracket_atoms(self):
        g = parse_smiles("[NH2+]C[O-]")
        assert g.atoms[0].charge == 1 and g.atoms[0].hcount == 2
        assert g.atoms[2].charge == -1 and g.atoms[2].hcount == 0

    def test_percent_ring_closure(self):
        g = parse_smiles("C%10CC%10")
        assert len(g.bonds) == 3

    def test_source_order_skips_syntax_tokens(self):
        g = parse_smiles("C(=O)N")
        assert g.source_order == [0, 3, 5]

    @pytest.mark.parametrize("bad,fragment", [
        ("C1CC", "dangling ring closure"),
        ("C(C", "unmatched"),
        ("CC)", "unmatched"),
        ("C/C=C/C", "unsupported character"),
        ("[C@H]", "stereo"),
        ("CC.CC", "unsupported character"),
        ("C=", "dangling bond"),
        ("[H]", "hydrogen"),
        ("[Cq]", "bad bracket"),
    ])
    def test_errors(self, bad, fragment):
        with pytest.raises(SmilesError) as e:
            parse_smiles(bad)
        assert fragment in str(e.value)

    def test_error_carries_position(self):
        with pytest.raises(SmilesError) as e:
            parse_smiles("CC?C")
        assert e.value.position == 2

    def test_no_dot_means_connected(self, small_corpus):
        for r in small_corpus:
            assert parse_smiles(r.ligand_smiles).is_connected()


class TestWrite:
    def test_start_atom_reverses_chain(self):
        g = parse_smiles("CCO")
        assert write_smiles(g, start_atom=2) == "OCC"

    def test_single_atom(self):
        assert write_smiles(parse_smiles("C")) == "C"

    def test_roundtrip_isomorphic_on_corpus(self, small_corpus):
        for r in small_corpus:
            g = parse_smiles(r.ligand_smiles)
            g2 = parse_smiles(write_smiles(g))
            assert graphs_isomorphic(g, g2)

    def test_disconnected_rejected(self):
        g = chem.MolGraph(atoms=[chem.Atom("C"), chem.Atom("C")], bonds=[],
                          source_order=[0, 1])
        with pytest.raises(chem.ChemError):
            write_smiles(g)

    def test_aromatic_and_bracket_roundtrip(self):
        for s in ("c1ccccc1", "Cc1cc[nH]c1", "[NH2+]CC[O-]", "C#N", "O=C=O"):
            g = parse_smiles(s)
            assert graphs_isomorphic(g, parse_smiles(write_smiles(g)))


class TestRandomize:
    def test_identity_path(self):
        s, perm = randomize_smiles("CCO")
        assert s == "CCO" and perm == [0, 1, 2]

    def test_known_reversal(self):
        # seed 5 starts the traversal at the oxygen
        s, perm = randomize_smiles("CCO", seed=5)
        assert s == "OCC" and perm == [2, 1, 0]

    def test_isomorphic_and_permutation_consistent(self, small_corpus):
        for i, r in enumerate(small_corpus):
            s2, perm = randomize_smiles(r.ligand_smiles, seed=i)
            g, g2 = parse_smiles(r.ligand_smiles), parse_smiles(s2)
            assert graphs_isomorphic(g, g2)
            assert sorted(perm) == list(range(len(g.atoms)))
            old_elements = [a.element for a in g.atoms]
            assert [old_elements[p] for p in perm] == [a.element for a in g2.atoms]


class TestNormalize:
    def test_symmetric_pair(self):
        r = ComplexRecord(["C", "C"], [[3, 4, 5], [7, 4, 5]], "", np.zeros((0, 3)))
        n = normalize_complex(r, q=5)
        assert np.allclose(n.center, [5, 4, 5])
        assert np.allclose(n.pocket_coords, [[-0.4, 0, 0], [0.4, 0, 0]])
        assert n.normalized and n.q == 5

    def test_mean_at_origin(self, small_corpus):
        for r in small_corpus:
            n = normalize_complex(r, q=5.0)
            assert np.abs(n.all_coords().mean(axis=0)).max() < 1e-6

    def test_roundtrip(self, small_corpus):
        for r in small_corpus:
            back = denormalize_complex(normalize_complex(r, q=5.0))
            assert np.abs(back.all_coords() - r.all_coords()).max() < 1e-6

    def test_pocket_only_centering(self):
        r = ComplexRecord(["C"], [[2, 0, 0]], "C", [[10, 0, 0]])
        n = normalize_complex(r, q=1.0, center_on="pocket")
        assert np.allclose(n.pocket_coords, [[0, 0, 0]])
        assert np.allclose(n.ligand_coords, [[8, 0, 0]])

    def test_empty_record_rejected(self):
        r = ComplexRecord([], np.zeros((0, 3)), "", np.zeros((0, 3)))
        with pytest.raises(chem.ChemError):
            normalize_complex(r, q=5.0)

    def test_double_normalize_rejected(self, small_corpus):
        n = normalize_complex(small_corpus[0], q=5.0)
        with pytest.raises(chem.ChemError):
            normalize_complex(n, q=5.0)


class TestRangeFilter:
    def test_over_limit(self):
        coords = [[0, 0, 0], [45, 0, 0]]
        r = ComplexRecord(["C", "C"], coords, "", np.zeros((0, 3)))
        assert not coordinate_range_ok(r)

    def test_coincident(self):
        r = ComplexRecord(["C", "C"], [[1, 1, 1], [1, 1, 1]], "", np.zeros((0, 3)))
        assert coordinate_range_ok(r)

    def test_boundary_inclusive(self):
        r = ComplexRecord(["C", "C"], [[0, 0, 0], [40, 0, 0]], "", np.zeros((0, 3)))
        assert coordinate_range_ok(r)

    def test_translation_invariant(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-10, 10, size=(6, 3))
        r1 = ComplexRecord(["C"] * 6, coords, "", np.zeros((0, 3)))
        r2 = ComplexRecord(["C"] * 6, coords + 1e4, "", np.zeros((0, 3)))
        assert coordinate_range_ok(r1) == coordinate_range_ok(r2)


class TestRotation:
    def test_orthonormal_det_one(self):
        for seed in range(20):
            R = random_rotation(seed)
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_preserves_distances(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(30, 3))
        R = random_rotation(rng)
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        rot = pts @ R.T
        d1 = np.linalg.norm(rot[:, None] - rot[None, :], axis=-1)
        assert np.abs(d0 - d1).max() < 1e-6

    def test_uniformity_smoke(self):
        rng = np.random.default_rng(2)
        acc = np.zeros(3)
        for _ in range(10_000):
            acc += random_rotation(rng) @ np.array([1.0, 0, 0])
        assert np.linalg.norm(acc / 10_000) < 0.05

    def test_rotate_record_keeps_rmsd(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(9, 3))
        ref = rng.normal(size=(9, 3))
        R = random_rotation(rng)
        assert abs(rmsd(pred @ R.T, ref @ R.T) - rmsd(pred, ref)) < 1e-6

    def test_rotate_record_units_guard(self, small_corpus):
        n = normalize_complex(small_corpus[0], 5.0)
        with pytest.raises(chem.ChemError):
            rotate_record(n, random_rotation(0))


class TestRmsd:
    def test_identical(self):
        pts = np.arange(12, dtype=float).reshape(4, 3)
        assert rmsd(pts, pts) == 0.0

    def test_uniform_translation(self):
        pts = np.zeros((5, 3))
        assert rmsd(pts + [1, 0, 0], pts) == pytest.approx(1.0)

    def test_single_displacement(self):
        ref = np.zeros((25, 3))
        pred = ref.copy()
        pred[7] = [3, 4, 0]
        assert rmsd(pred, ref) == pytest.approx(1.0)

    def test_length_mismatch(self):
        with pytest.raises(chem.ChemError):
            rmsd(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_permutation_consistency(self, small_corpus):
        r = small_corpus[0]
        s2, perm = randomize_smiles(r.ligand_smiles, seed=9)
        assert rmsd(r.ligand_coords[perm], r.ligand_coords[perm]) == 0.0
