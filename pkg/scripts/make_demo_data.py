#!/usr/bin/env python3
"""Generate the synthetic demo dataset used by configs/demo.json:
records.jsonl (pocket-ligand complexes), a target pocket.pdb, and a
reference pose for the first complex."""

import argparse
import os

import numpy as np

from pockformer import data


def pocket_to_pdb(atoms, coords):
    lines = []
    for i, (a, (x, y, z)) in enumerate(zip(atoms, coords), 1):
        name = a if a == "CA" else a[:1]
        element = "C" if a == "CA" else a
        lines.append(
            f"ATOM  {i:5d} {name:>4s} POC A   1    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {element:>2s}"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="data/demo")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--seed", type=int, default=9)
    args = ap.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    corpus = data.random_corpus(
        rng, args.n, pocket_atoms=(4, 7), ligand_atoms=(3, 7),
        ring_prob=0.0, double_prob=0.0, elements="CCCCCCCNO",
        center_ligand=True,
    )
    data.write_records(os.path.join(args.out_dir, "records.jsonl"), corpus)

    target = corpus[0]
    with open(os.path.join(args.out_dir, "pocket.pdb"), "w") as f:
        f.write(pocket_to_pdb(target.pocket_atoms, target.pocket_coords))
    from pockformer.chem import parse_smiles

    elements = [a.element for a in parse_smiles(target.ligand_smiles).atoms]
    data.write_pose(os.path.join(args.out_dir, "reference_pose.xyz"),
                    elements, target.ligand_coords)
    with open(os.path.join(args.out_dir, "target_smiles.txt"), "w") as f:
        f.write(target.ligand_smiles + "\n")
    print(f"wrote {args.n} records, pocket.pdb and reference pose to {args.out_dir}")


if __name__ == "__main__":
    main()
