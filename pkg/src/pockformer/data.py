"""Dataset file formats and synthetic test corpora.

Dataset files are JSON Lines, one record per line, coordinates in
Angstrom, unnormalized:

    {"pocket_atoms": [...], "pocket_coords": [[x,y,z],...],
     "ligand_smiles": "...", "ligand_coords": [[x,y,z],...]}

Pocket-only / ligand-only records leave the other part empty. Pockets can
also be ingested from a simplified PDB subset (ATOM/HETATM element and
coordinates, alpha carbons detected by atom name, hydrogens dropped).
"""

import json

import numpy as np

from .chem import Atom, Bond, ChemError, ComplexRecord, MolGraph, write_smiles


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- records --


def record_to_json(r):
    if r.normalized:
        raise DataError("dataset records are stored unnormalized")
    return json.dumps({
        "pocket_atoms": list(r.pocket_atoms),
        "pocket_coords": [[float(v) for v in row] for row in r.pocket_coords],
        "ligand_smiles": r.ligand_smiles,
        "ligand_coords": [[float(v) for v in row] for row in r.ligand_coords],
    })


def record_from_json(line):
    obj = json.loads(line)
    try:
        return ComplexRecord(
            pocket_atoms=list(obj["pocket_atoms"]),
            pocket_coords=np.array(obj["pocket_coords"], dtype=np.float64).reshape(-1, 3),
            ligand_smiles=obj["ligand_smiles"],
            ligand_coords=np.array(obj["ligand_coords"], dtype=np.float64).reshape(-1, 3),
        )
    except (KeyError, ChemError, ValueError) as e:
        raise DataError(f"bad dataset record: {e}") from e


def write_records(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(record_to_json(r))
            f.write("\n")


def read_records(path):
    out = []
    with open(path) as f:
        for i, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(line))
            except (DataError, json.JSONDecodeError) as e:
                raise DataError(f"{path}:{i}: {e}") from e
    return out


# -------------------------------------------------------------- PDB input --


def parse_pocket_pdb(text):
    """Extract heavy pocket atoms from ATOM/HETATM lines of a PDB file.

    Returns (atom_tokens, coords). Alpha carbons become the 'CA' token,
    everything else its element symbol; hydrogens are skipped.
    """
    atoms = []
    coords = []
    for ln, line in enumerate(text.splitlines(), 1):
        tag = line[:6].strip()
        if tag not in ("ATOM", "HETATM"):
            continue
        if len(line) < 54:
            raise DataError(f"line {ln}: truncated coordinate record")
        name = line[12:16].strip()
        element = line[76:78].strip() if len(line) >= 78 else ""
        if not element:
            element = "".join(c for c in name if c.isalpha())[:1]
        element = element.capitalize()
        if not element:
            raise DataError(f"line {ln}: cannot determine element")
        if element in ("H", "D"):
            continue
        try:
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError as e:
            raise DataError(f"line {ln}: bad coordinates: {e}") from e
        atoms.append("CA" if (name == "CA" and element == "C") else element)
        coords.append(xyz)
    return atoms, np.array(coords, dtype=np.float64).reshape(-1, 3)


def read_pocket_pdb(path):
    with open(path) as f:
        return parse_pocket_pdb(f.read())


# -------------------------------------------------------------- pose text --


def write_pose(path, elements, coords):
    """Minimal pose format: one 'element x y z' line per atom, SMILES order."""
    with open(path, "w") as f:
        for el, (x, y, z) in zip(elements, coords):
            f.write(f"{el} {x:.6f} {y:.6f} {z:.6f}\n")


def read_pose(path):
    elements = []
    coords = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{ln}: expected 'element x y z'")
            elements.append(parts[0])
            coords.append([float(v) for v in parts[1:]])
    return elements, np.array(coords, dtype=np.float64).reshape(-1, 3)


# -------------------------------------------------------------- synthetic --

POCKET_ELEMENTS = ("C", "CA", "N", "O", "S")


def random_molecule(rng, min_atoms=3, max_atoms=9, elements="CCCCNOF",
                    ring_prob=0.25, double_prob=0.15):
    """Random connected heavy-atom graph (tree plus at most one ring edge)."""
    n = int(rng.integers(min_atoms, max_atoms + 1))
    g = MolGraph(source_order=list(range(n)))
    for i in range(n):
        g.atoms.append(Atom(elements[int(rng.integers(len(elements)))]))
        if i > 0:
            parent = int(rng.integers(i))
            order = 2.0 if rng.random() < double_prob else 1.0
            g.bonds.append(Bond(parent, i, order))
    if n >= 4 and rng.random() < ring_prob:
        bonded = {(min(b.i, b.j), max(b.i, b.j)) for b in g.bonds}
        for _ in range(8):
            i, j = int(rng.integers(n)), int(rng.integers(n))
            if i != j and (min(i, j), max(i, j)) not in bonded:
                g.bonds.append(Bond(min(i, j), max(i, j), 1.0))
                break
    return g


def random_smiles(rng, **kwargs):
    return write_smiles(random_molecule(rng, **kwargs))


def random_complex(rng, pocket_atoms=(4, 10), ligand_atoms=(3, 8),
                   pocket_radius=4.0, ligand_radius=2.0, offset=1.0,
                   center_ligand=False, **mol_kwargs):
    """Random pocket-ligand record in Angstrom.

    With center_ligand=True the ligand cloud is translated so its mean
    coincides with the pocket mean (joint and pocket-only centering then
    agree, which keeps docking train/inference frames identical).
    """
    n_poc = int(rng.integers(*pocket_atoms)) if isinstance(pocket_atoms, tuple) else pocket_atoms
    atoms = [POCKET_ELEMENTS[int(rng.integers(len(POCKET_ELEMENTS)))] for _ in range(n_poc)]
    pocket_coords = rng.normal(scale=pocket_radius, size=(n_poc, 3))

    mol = random_molecule(rng, min_atoms=ligand_atoms[0], max_atoms=ligand_atoms[1],
                          **mol_kwargs)
    smiles = write_smiles(mol)
    m = len(mol.atoms)
    ligand_coords = rng.normal(scale=ligand_radius, size=(m, 3))
    if center_ligand and n_poc:
        ligand_coords += pocket_coords.mean(axis=0) - ligand_coords.mean(axis=0)
    else:
        ligand_coords += rng.normal(scale=offset, size=3)
    return ComplexRecord(
        pocket_atoms=atoms,
        pocket_coords=pocket_coords,
        ligand_smiles=smiles,
        ligand_coords=ligand_coords,
    )


def random_corpus(rng, n, **kwargs):
    return [random_complex(rng, **kwargs) for _ in range(n)]
