import json
import os

import numpy as np
import pytest

from pockformer import chem, data, seqcodec

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def reference():
    """A real pocket-ligand complex used as the format conformance target:
    189 pocket atoms, a 40-token / 21-atom ligand SMILES, 867 positions
    total. Stored with normalized coordinates and q."""
    with open(os.path.join(DATA_DIR, "reference_complex.json")) as f:
        fix = json.load(f)
    record = chem.ComplexRecord(
        pocket_atoms=fix["pocket_atoms"],
        pocket_coords=np.array(fix["pocket_coords_normalized"]) * fix["q"],
        ligand_smiles=fix["ligand_smiles"],
        ligand_coords=np.array(fix["ligand_coords_normalized"]) * fix["q"],
    )
    return fix, record


@pytest.fixture(scope="session")
def small_corpus():
    rng = np.random.default_rng(12345)
    return data.random_corpus(rng, 24)


@pytest.fixture(scope="session")
def vocab(small_corpus):
    return seqcodec.build_vocabulary(small_corpus)


def graphs_isomorphic(g1, g2):
    """Independent structure check via networkx (element/aromatic/charge on
    nodes, bond order on edges)."""
    import networkx as nx

    def to_nx(g):
        n = nx.Graph()
        for i, a in enumerate(g.atoms):
            n.add_node(i, el=a.element, ar=a.aromatic, chg=a.charge)
        for b in g.bonds:
            n.add_edge(b.i, b.j, order=b.order)
        return n

    return nx.is_isomorphic(
        to_nx(g1), to_nx(g2),
        node_match=lambda a, b: (a["el"], a["ar"], a["chg"]) == (b["el"], b["ar"], b["chg"]),
        edge_match=lambda a, b: a["order"] == b["order"],
    )
