"""Minimal cheminformatics and geometry.

SMILES support is a deliberate subset: organic-subset atoms
(B, C, N, O, P, S, F, Cl, Br, I), aromatic b/c/n/o/p/s, bracket atoms with
optional H count and charge, bonds - = # :, branches, and ring closures
1-9 / %nn. Stereo markers, isotopes, explicit hydrogens and multi-fragment
'.' are rejected. Aromaticity is purely syntactic (lowercase = aromatic);
there is no valence model or kekulization.
"""

import re
from dataclasses import dataclass, field

import numpy as np


class ChemError(ValueError):
    pass


class SmilesError(ChemError):
    """SMILES scanning/parsing failure at a known string position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (position {position})")
        self.position = position


# ------------------------------------------------------------ tokenizing ---

ORGANIC_ATOMS = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ATOMS = ("b", "c", "n", "o", "p", "s")
BOND_ORDERS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5}

# element symbols accepted inside bracket atoms (hydrogen excluded: the
# format is heavy-atom only)
ELEMENTS = frozenset(
    "He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te "
    "I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os "
    "Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra U".split()
)

_TOKEN_RE = re.compile(
    r"\[[^\]]*\]|Cl|Br|[BCNOPSFI]|[bcnops]|%\d\d|\d|[-=#:()]"
)
_BRACKET_RE = re.compile(
    r"\[(?P<el>[A-Z][a-z]?|[bcnops])(?P<h>H\d*)?(?P<chg>\+\d+|-\d+|\++|-+)?\]"
)


def scan_smiles(s):
    """Split a SMILES string into atom-level tokens.

    Returns a list of (token, position) pairs; raises SmilesError on the
    first character that does not start a supported token.
    """
    out = []
    pos = 0
    while pos < len(s):
        m = _TOKEN_RE.match(s, pos)
        if m is None:
            raise SmilesError(f"unsupported character {s[pos]!r}", pos)
        out.append((m.group(0), pos))
        pos = m.end()
    return out


def is_atom_token(tok):
    return tok.startswith("[") or tok in ORGANIC_ATOMS or tok in AROMATIC_ATOMS


# ----------------------------------------------------------- graph model ---


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    hcount: int | None = None  # None = implicit (bare atom)


@dataclass
class Bond:
    i: int
    j: int
    order: float  # 1, 2, 3 or 1.5 for aromatic


@dataclass
class MolGraph:
    atoms: list = field(default_factory=list)
    bonds: list = field(default_factory=list)
    source_order: list = field(default_factory=list)  # atom idx -> token idx

    def neighbors(self):
        adj = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append((b.j, b.order))
            adj[b.j].append((b.i, b.order))
        return adj

    def is_connected(self):
        if not self.atoms:
            return True
        adj = self.neighbors()
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == len(self.atoms)


def _atom_from_token(tok, pos):
    if not tok.startswith("["):
        if tok in AROMATIC_ATOMS:
            return Atom(tok.upper(), aromatic=True)
        return Atom(tok)
    m = _BRACKET_RE.fullmatch(tok)
    if m is None:
        raise SmilesError(f"bad bracket atom {tok!r}", pos)
    el = m.group("el")
    aromatic = el in AROMATIC_ATOMS
    if aromatic:
        el = el.upper()
    if el == "H":
        raise SmilesError("explicit hydrogen atoms are unsupported", pos)
    if el not in ELEMENTS:
        raise SmilesError(f"bad bracket atom {tok!r}: unknown element {el!r}", pos)
    h = m.group("h")
    hcount = 0 if h is None else (1 if h == "H" else int(h[1:]))
    chg = m.group("chg")
    if chg is None:
        charge = 0
    elif chg in ("+", "-") or chg.strip("+") == "" or chg.strip("-") == "":
        charge = len(chg) if chg[0] == "+" else -len(chg)
    else:
        charge = int(chg)
    return Atom(el, aromatic=aromatic, charge=charge, hcount=hcount)


def parse_smiles(s):
    """Parse a SMILES string (supported subset) into a MolGraph.

    Atoms appear in SMILES order; an aromatic bond is assumed between two
    aromatic atoms joined without an explicit bond symbol.
    """
    tokens = scan_smiles(s)
    for tok, pos in tokens:
        if tok in ("/", "\\") or "@" in tok:
            raise SmilesError("stereo markers are unsupported", pos)

    g = MolGraph()
    bond_keys = set()

    def add_bond(i, j, order, pos):
        if i == j:
            raise SmilesError("ring closure bonds an atom to itself", pos)
        key = (min(i, j), max(i, j))
        if key in bond_keys:
            raise SmilesError("duplicate bond", pos)
        bond_keys.add(key)
        g.bonds.append(Bond(i, j, order))

    def default_order(i, j):
        return 1.5 if g.atoms[i].aromatic and g.atoms[j].aromatic else 1.0

    prev = None
    pending = None  # (order, position) of an explicit bond symbol
    stack = []
    rings = {}  # label -> (atom, pending order or None, position)

    for ti, (tok, pos) in enumerate(tokens):
        if is_atom_token(tok):
            atom = _atom_from_token(tok, pos)
            idx = len(g.atoms)
            g.atoms.append(atom)
            g.source_order.append(ti)
            if prev is not None:
                order = pending[0] if pending else default_order(prev, idx)
                add_bond(prev, idx, order, pos)
            prev = idx
            pending = None
        elif tok in BOND_ORDERS:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", pos)
            if prev is None:
                raise SmilesError("bond symbol before any atom", pos)
            pending = (BOND_ORDERS[tok], pos)
        elif tok == "(":
            if prev is None:
                raise SmilesError("branch before any atom", pos)
            if pending is not None:
                raise SmilesError("bond symbol before branch", pos)
            stack.append(prev)
        elif tok == ")":
            if not stack:
                raise SmilesError("unmatched ')'", pos)
            if pending is not None:
                raise SmilesError("dangling bond at branch close", pos)
            prev = stack.pop()
        else:  # ring closure digit or %nn
            if prev is None:
                raise SmilesError("ring closure before any atom", pos)
            label = tok[1:] if tok.startswith("%") else tok
            if label in rings:
                other, opened_order, _ = rings.pop(label)
                order = None
                if opened_order is not None and pending is not None:
                    if opened_order != pending[0]:
                        raise SmilesError("conflicting ring closure bond orders", pos)
                    order = opened_order
                elif opened_order is not None:
                    order = opened_order
                elif pending is not None:
                    order = pending[0]
                if order is None:
                    order = default_order(other, prev)
                add_bond(other, prev, order, pos)
            else:
                rings[label] = (prev, pending[0] if pending else None, pos)
            pending = None

    if stack:
        raise SmilesError("unmatched '('", len(s))
    if rings:
        label, (_, _, pos) = next(iter(rings.items()))
        raise SmilesError(f"dangling ring closure {label!r}", pos)
    if pending is not None:
        raise SmilesError("dangling bond symbol", pending[1])
    return g


# -------------------------------------------------------------- writing ----


def _atom_text(atom):
    symbol = atom.element.lower() if atom.aromatic else atom.element
    bare_ok = (
        atom.charge == 0
        and atom.hcount is None
        and (
            (atom.aromatic and symbol in AROMATIC_ATOMS)
            or (not atom.aromatic and atom.element in ORGANIC_ATOMS)
        )
    )
    if bare_ok:
        return symbol
    h = ""
    if atom.hcount:
        h = "H" if atom.hcount == 1 else f"H{atom.hcount}"
    elif atom.hcount == 0:
        h = ""
    chg = ""
    if atom.charge == 1:
        chg = "+"
    elif atom.charge == -1:
        chg = "-"
    elif atom.charge > 1:
        chg = f"+{atom.charge}"
    elif atom.charge < -1:
        chg = str(atom.charge)
    return f"[{symbol}{h}{chg}]"


def _bond_text(order, a, b):
    if order == 1.0:
        return "-" if (a.aromatic and b.aromatic) else ""
    if order == 1.5:
        return "" if (a.aromatic and b.aromatic) else ":"
    if order == 2.0:
        return "="
    if order == 3.0:
        return "#"
    raise ChemError(f"cannot serialize bond order {order}")


def _ring_digit(n):
    return str(n) if n <= 9 else f"%{n:02d}"


def write_smiles_with_order(g, start_atom=0, rng=None):
    """Serialize a MolGraph to SMILES by depth-first traversal.

    Neighbor order is shuffled by `rng` when given, otherwise bonds are
    followed in insertion order. Returns (smiles, atom_order) where
    atom_order lists original atom indices in output-atom order.
    """
    n = len(g.atoms)
    if n == 0:
        return "", []
    if not 0 <= start_atom < n:
        raise ChemError(f"start atom {start_atom} out of range")
    if not g.is_connected():
        raise ChemError("cannot serialize a disconnected molecule")

    adj = g.neighbors()
    order_of = {}
    for b in g.bonds:
        order_of[(b.i, b.j)] = b.order
        order_of[(b.j, b.i)] = b.order
    nbr_order = []
    for u in range(n):
        nbrs = [v for v, _ in adj[u]]
        if rng is not None:
            nbrs = [nbrs[k] for k in rng.permutation(len(nbrs))]
        nbr_order.append(nbrs)

    # Pass 1: classify edges into tree/ring along the fixed traversal.
    visited = [False] * n
    tree_children = [[] for _ in range(n)]
    ring_edges_at = [[] for _ in range(n)]  # atom -> ring edge ids in emit order
    ring_edges = []
    used = set()

    def explore(u):
        visited[u] = True
        for v in nbr_order[u]:
            key = (min(u, v), max(u, v))
            if key in used:
                continue
            if visited[v]:
                used.add(key)
                eid = len(ring_edges)
                ring_edges.append(key)
                ring_edges_at[v].append(eid)
                ring_edges_at[u].append(eid)
            else:
                used.add(key)
                tree_children[u].append(v)
                explore(v)

    explore(start_atom)

    # Pass 2: emit text in the same order, allocating ring digits on the fly.
    pieces = []
    atom_order = []
    digit_of = {}
    free_digits = list(range(99, 0, -1))

    def emit(u, bond_from_parent):
        pieces.append(bond_from_parent)
        pieces.append(_atom_text(g.atoms[u]))
        atom_order.append(u)
        for eid in ring_edges_at[u]:
            a, b = ring_edges[eid]
            v = b if a == u else a
            if eid not in digit_of:
                digit_of[eid] = free_digits.pop()
                pieces.append(_bond_text(order_of[(u, v)], g.atoms[u], g.atoms[v]))
            else:
                free_digits.append(digit_of[eid])
            pieces.append(_ring_digit(digit_of[eid]))
        children = tree_children[u]
        for v in children[:-1]:
            pieces.append("(")
            emit(v, _bond_text(order_of[(u, v)], g.atoms[u], g.atoms[v]))
            pieces.append(")")
        if children:
            v = children[-1]
            emit(v, _bond_text(order_of[(u, v)], g.atoms[u], g.atoms[v]))

    emit(start_atom, "")
    return "".join(pieces), atom_order


def write_smiles(g, start_atom=0, rng=None):
    smiles, _ = write_smiles_with_order(g, start_atom, rng)
    return smiles


def randomize_smiles(s, seed=None):
    """Re-serialize a molecule with a random atom ordering.

    Returns (smiles, permutation); permutation[k] is the original atom
    index of output atom k, so permuted coordinates are coords[permutation].
    With seed=None the traversal is the identity path (start atom 0,
    natural neighbor order).
    """
    g = parse_smiles(s)
    if not g.atoms:
        raise ChemError("cannot randomize an empty SMILES")
    if seed is None:
        smiles, order = write_smiles_with_order(g)
    else:
        rng = np.random.default_rng(seed)
        start = int(rng.integers(len(g.atoms)))
        smiles, order = write_smiles_with_order(g, start, rng)
    return smiles, order


# --------------------------------------------------------------- records ---


@dataclass
class ComplexRecord:
    """A protein pocket paired with a ligand, in Angstrom unless normalized.

    Either part may be empty (pocket-only or ligand-only records share the
    same container). When normalized, coordinates are dimensionless:
    (x - center) / q.
    """

    pocket_atoms: list
    pocket_coords: np.ndarray
    ligand_smiles: str
    ligand_coords: np.ndarray
    normalized: bool = False
    q: float = 1.0
    center: np.ndarray = None

    def __post_init__(self):
        self.pocket_coords = np.asarray(self.pocket_coords, dtype=np.float64).reshape(-1, 3)
        self.ligand_coords = np.asarray(self.ligand_coords, dtype=np.float64).reshape(-1, 3)
        if self.center is None:
            self.center = np.zeros(3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if len(self.pocket_atoms) != len(self.pocket_coords):
            raise ChemError(
                f"pocket has {len(self.pocket_atoms)} atoms but "
                f"{len(self.pocket_coords)} coordinates"
            )

    def all_coords(self):
        return np.vstack([self.pocket_coords, self.ligand_coords])

    def n_atoms(self):
        return len(self.pocket_coords) + len(self.ligand_coords)


def ligand_atom_count(smiles):
    return len(parse_smiles(smiles).atoms)


def normalize_complex(r, q, center_on="joint"):
    """Translate the unweighted mean of the atom cloud to the origin and
    scale all coordinates by 1/q.

    center_on="pocket" centers on the pocket atoms alone (used at docking
    inference time, when ligand coordinates are not yet known).
    """
    if q <= 0:
        raise ChemError(f"scale factor must be positive, got {q}")
    if r.normalized:
        raise ChemError("record is already normalized")
    if center_on == "joint":
        cloud = r.all_coords()
    elif center_on == "pocket":
        cloud = r.pocket_coords
    else:
        raise ChemError(f"unknown centering mode {center_on!r}")
    if len(cloud) == 0:
        raise ChemError("cannot normalize a record with no atoms")
    center = cloud.mean(axis=0)
    return ComplexRecord(
        pocket_atoms=list(r.pocket_atoms),
        pocket_coords=(r.pocket_coords - center) / q,
        ligand_smiles=r.ligand_smiles,
        ligand_coords=(r.ligand_coords - center) / q,
        normalized=True,
        q=q,
        center=center,
    )


def denormalize_complex(r):
    """Inverse of normalize_complex: coords * q + center, back in Angstrom."""
    if not r.normalized:
        raise ChemError("record is not normalized")
    return ComplexRecord(
        pocket_atoms=list(r.pocket_atoms),
        pocket_coords=r.pocket_coords * r.q + r.center,
        ligand_smiles=r.ligand_smiles,
        ligand_coords=r.ligand_coords * r.q + r.center,
        normalized=False,
        q=1.0,
        center=np.zeros(3),
    )


def rotate_record(r, rotation):
    """Apply a rotation matrix to all coordinates (original units)."""
    if r.normalized:
        raise ChemError("rotate before normalization")
    return ComplexRecord(
        pocket_atoms=list(r.pocket_atoms),
        pocket_coords=r.pocket_coords @ rotation.T,
        ligand_smiles=r.ligand_smiles,
        ligand_coords=r.ligand_coords @ rotation.T,
    )


def coordinate_range_ok(r, limit=40.0):
    """True iff every axis span (max - min over all atoms) is <= limit."""
    cloud = r.all_coords()
    if len(cloud) <= 1:
        return True
    span = cloud.max(axis=0) - cloud.min(axis=0)
    return bool(np.all(span <= limit))


# -------------------------------------------------------------- geometry ---


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def random_rotation(seed_or_rng=None):
    """Uniformly distributed 3x3 rotation matrix via a random unit quaternion."""
    rng = _as_rng(seed_or_rng)
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rmsd(pred, ref):
    """Root-mean-square deviation between two order-matched point sets.

    No superposition is applied: poses are compared in the frame they are
    given in. Graph-symmetry equivalences are ignored.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ChemError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if pred.size == 0:
        raise ChemError("rmsd of empty point sets")
    return float(np.sqrt(np.mean(np.sum((pred - ref) ** 2, axis=1))))
