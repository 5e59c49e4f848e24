"""Paired token/number sequence format for pockets, ligands and complexes.

A sequence is two aligned channels of equal length: discrete tokens and
floating-point numbers. Coordinate slots (tokens [x]/[y]/[z]) carry the
scaled coordinate values; every other slot carries exactly 1.0, which is
the multiplicative identity for the model's embedding fusion.

Layout:
    [PS] atom... [PE] [PCS] ([x][y][z])*n [PCE]      pocket block
    [LS] smiles-token... [LE] [LCS] ([x][y][z])*m [LCE]   ligand block

A complex is the pocket block followed by the ligand block; pocket-only
and ligand-only sequences simply omit the absent block.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import chem


class CodecError(ValueError):
    pass


SPECIALS = (
    "[PS]", "[PE]", "[PCS]", "[PCE]",
    "[LS]", "[LE]", "[LCS]", "[LCE]",
    "[x]", "[y]", "[z]", "[PAD]",
)
XYZ = ("[x]", "[y]", "[z]")
PAD = "[PAD]"


# ------------------------------------------------------------ vocabulary ---


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    index: dict
    pocket_atoms: frozenset = frozenset()
    smiles_tokens: frozenset = frozenset()

    @property
    def size(self):
        return len(self.tokens)

    def encode(self, toks):
        """Map token strings to dense int32 ids; unknown tokens are an error
        (the vocabulary is closed, there is no [UNK])."""
        ids = np.empty(len(toks), dtype=np.int32)
        for i, t in enumerate(toks):
            j = self.index.get(t)
            if j is None:
                raise CodecError(f"token {t!r} not in vocabulary")
            ids[i] = j
        return ids

    def decode_ids(self, ids):
        return [self.tokens[int(i)] for i in ids]

    def to_json(self):
        return json.dumps(list(self.tokens))

    def sha256(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @staticmethod
    def from_tokens(tokens, pocket_atoms=(), smiles_tokens=()):
        tokens = tuple(tokens)
        for s in SPECIALS:
            if tokens.count(s) != 1:
                raise CodecError(f"special token {s} must appear exactly once")
        if len(set(tokens)) != len(tokens):
            raise CodecError("duplicate tokens in vocabulary")
        return Vocabulary(
            tokens=tokens,
            index={t: i for i, t in enumerate(tokens)},
            pocket_atoms=frozenset(pocket_atoms),
            smiles_tokens=frozenset(smiles_tokens),
        )

    @staticmethod
    def load(path):
        with open(path) as f:
            return Vocabulary.from_tokens(json.load(f))


def build_vocabulary(corpus):
    """Collect the token set of a record corpus: all special tokens, every
    pocket atom token observed and every SMILES token observed.

    Ordering is deterministic: specials first, then lexicographic.
    """
    pocket_atoms = set()
    smiles_tokens = set()
    n = 0
    for record in corpus:
        n += 1
        pocket_atoms.update(record.pocket_atoms)
        if record.ligand_smiles:
            smiles_tokens.update(tokenize_smiles(record.ligand_smiles).tokens)
    if n == 0:
        raise CodecError("cannot build a vocabulary from an empty corpus")
    observed = pocket_atoms | smiles_tokens
    clash = observed & set(SPECIALS)
    if clash:
        raise CodecError(f"corpus tokens collide with special tokens: {sorted(clash)}")
    tokens = list(SPECIALS) + sorted(observed)
    return Vocabulary.from_tokens(tokens, pocket_atoms, smiles_tokens)


# ------------------------------------------------------------- sequences ---


@dataclass
class TokenizedSmiles:
    tokens: list
    atom_mask: list
    atom_count: int


def tokenize_smiles(smiles):
    """Atom-level SMILES tokenization: one token per atom, ring digit, bond
    symbol or parenthesis. atom_mask flags the tokens that carry an atom
    (and therefore a coordinate triplet)."""
    scanned = chem.scan_smiles(smiles)
    tokens = [t for t, _ in scanned]
    atom_mask = [chem.is_atom_token(t) for t in tokens]
    return TokenizedSmiles(tokens, atom_mask, sum(atom_mask))


@dataclass
class ParallelSequence:
    tokens: list
    numbers: np.ndarray

    def __post_init__(self):
        self.numbers = np.asarray(self.numbers, dtype=np.float64)
        if len(self.tokens) != len(self.numbers):
            raise CodecError(
                f"token/number length mismatch: {len(self.tokens)} vs {len(self.numbers)}"
            )

    def __len__(self):
        return len(self.tokens)

    def __add__(self, other):
        return ParallelSequence(
            self.tokens + other.tokens,
            np.concatenate([self.numbers, other.numbers]),
        )

    def segments(self):
        marks, problems = _scan_structure(self.tokens)
        if problems:
            d = problems[0]
            raise CodecError(f"[{d.rule}] {d.message} (position {d.position})")
        return marks


@dataclass
class SegmentMarks:
    """Half-open token index spans of the four content sections; a span is
    None when its block is absent."""

    pocket_atoms: tuple = None
    pocket_coords: tuple = None
    ligand_smiles: tuple = None
    ligand_coords: tuple = None


@dataclass
class Diagnostic:
    position: int
    rule: str
    message: str


def _xyz_span(tokens, start, end, problems, span_name):
    length = end - start
    if length % 3 != 0:
        problems.append(Diagnostic(
            start, "triplet-structure",
            f"{span_name} coordinate span length {length} is not a multiple of 3",
        ))
    for k in range(start, end):
        if tokens[k] != XYZ[(k - start) % 3]:
            problems.append(Diagnostic(
                k, "xyz-pattern",
                f"expected {XYZ[(k - start) % 3]} in {span_name} coordinate span, got {tokens[k]!r}",
            ))
            break


def _scan_structure(tokens):
    """Parse the delimiter grammar. Returns (SegmentMarks, problems)."""
    marks = SegmentMarks()
    problems = []

    def fail(pos, message):
        problems.append(Diagnostic(pos, "delimiter-order", message))
        return marks, problems

    delim_positions = [(i, t) for i, t in enumerate(tokens)
                       if t in ("[PS]", "[PE]", "[PCS]", "[PCE]", "[LS]", "[LE]", "[LCS]", "[LCE]")]
    expected_blocks = []
    if any(t in ("[PS]", "[PE]", "[PCS]", "[PCE]") for _, t in delim_positions):
        expected_blocks += ["[PS]", "[PE]", "[PCS]", "[PCE]"]
    if any(t in ("[LS]", "[LE]", "[LCS]", "[LCE]") for _, t in delim_positions):
        expected_blocks += ["[LS]", "[LE]", "[LCS]", "[LCE]"]
    if not expected_blocks:
        return fail(0, "sequence contains no section delimiters")
    got = [t for _, t in delim_positions]
    if got != expected_blocks:
        pos = delim_positions[0][0] if delim_positions else 0
        for k, (i, t) in enumerate(delim_positions):
            if k >= len(expected_blocks) or t != expected_blocks[k]:
                pos = i
                break
        return fail(pos, f"delimiters appear as {got}, expected {expected_blocks}")

    where = {t: i for i, t in delim_positions}
    if "[PS]" in where:
        if where["[PS]"] != 0:
            return fail(0, "tokens precede [PS]")
        marks.pocket_atoms = (where["[PS]"] + 1, where["[PE]"])
        if where["[PCS]"] != where["[PE]"] + 1:
            return fail(where["[PE]"] + 1, "tokens between [PE] and [PCS]")
        marks.pocket_coords = (where["[PCS]"] + 1, where["[PCE]"])
    if "[LS]" in where:
        lead = where["[PCE]"] + 1 if "[PCE]" in where else 0
        if where["[LS]"] != lead:
            return fail(lead, "tokens precede [LS]")
        marks.ligand_smiles = (where["[LS]"] + 1, where["[LE]"])
        if where["[LCS]"] != where["[LE]"] + 1:
            return fail(where["[LE]"] + 1, "tokens between [LE] and [LCS]")
        marks.ligand_coords = (where["[LCS]"] + 1, where["[LCE]"])
        if where["[LCE]"] != len(tokens) - 1:
            return fail(where["[LCE]"] + 1, "tokens follow [LCE]")
    else:
        if where["[PCE]"] != len(tokens) - 1:
            return fail(where["[PCE]"] + 1, "tokens follow [PCE]")

    for span, name in ((marks.pocket_atoms, "pocket atom"), (marks.ligand_smiles, "ligand SMILES")):
        if span is None:
            continue
        for k in range(*span):
            if tokens[k] in SPECIALS:
                return fail(k, f"special token {tokens[k]!r} inside {name} section")
    return marks, problems


def validate(seq, vocab=None):
    """Check every structural invariant; returns a list of diagnostics
    (empty iff the sequence is well formed). Never raises."""
    problems = []
    if len(seq.tokens) != len(seq.numbers):
        problems.append(Diagnostic(
            min(len(seq.tokens), len(seq.numbers)), "length-parity",
            f"{len(seq.tokens)} tokens vs {len(seq.numbers)} numbers",
        ))
        return problems

    if vocab is not None:
        for i, t in enumerate(seq.tokens):
            if t not in vocab.index:
                problems.append(Diagnostic(i, "unknown-token", f"token {t!r} not in vocabulary"))
    for i, t in enumerate(seq.tokens):
        if t == PAD:
            problems.append(Diagnostic(i, "pad-token", "[PAD] inside a stored sequence"))

    marks, structural = _scan_structure(seq.tokens)
    problems.extend(structural)
    if structural:
        return problems

    if marks.pocket_coords:
        _xyz_span(seq.tokens, *marks.pocket_coords, problems, "pocket")
        n_atoms = marks.pocket_atoms[1] - marks.pocket_atoms[0]
        n_coords = marks.pocket_coords[1] - marks.pocket_coords[0]
        if n_coords != 3 * n_atoms:
            problems.append(Diagnostic(
                marks.pocket_coords[0], "coord-count",
                f"pocket has {n_atoms} atoms but {n_coords} coordinate slots",
            ))
    if marks.ligand_coords:
        _xyz_span(seq.tokens, *marks.ligand_coords, problems, "ligand")
        smiles = "".join(seq.tokens[marks.ligand_smiles[0]:marks.ligand_smiles[1]])
        try:
            ts = tokenize_smiles(smiles)
        except chem.SmilesError as e:
            problems.append(Diagnostic(
                marks.ligand_smiles[0], "smiles-tokens", f"ligand SMILES does not tokenize: {e}"
            ))
            ts = None
        if ts is not None:
            if ts.tokens != seq.tokens[marks.ligand_smiles[0]:marks.ligand_smiles[1]]:
                problems.append(Diagnostic(
                    marks.ligand_smiles[0], "smiles-tokens",
                    "ligand token list does not retokenize to itself",
                ))
            else:
                n_coords = marks.ligand_coords[1] - marks.ligand_coords[0]
                if n_coords != 3 * ts.atom_count:
                    problems.append(Diagnostic(
                        marks.ligand_coords[0], "coord-count",
                        f"ligand has {ts.atom_count} atoms but {n_coords} coordinate slots",
                    ))

    coord_slot = np.zeros(len(seq.tokens), dtype=bool)
    for span in (marks.pocket_coords, marks.ligand_coords):
        if span:
            coord_slot[span[0]:span[1]] = True
    for i in np.nonzero(~coord_slot)[0]:
        if seq.numbers[i] != 1.0:
            problems.append(Diagnostic(
                int(i), "padding-value",
                f"number at non-coordinate slot is {seq.numbers[i]!r}, expected 1.0",
            ))
            break
    return problems


# -------------------------------------------------------------- encoding ---


def _xyz_tokens(n):
    return list(XYZ) * n


def encode_pocket(pocket_atoms, coords, q):
    """Encode a pocket block. `coords` are centered coordinates (Angstrom,
    translated to the shared frame); values written are coords / q."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(pocket_atoms) != len(coords):
        raise CodecError(
            f"pocket has {len(pocket_atoms)} atoms but {len(coords)} coordinates"
        )
    if q <= 0:
        raise CodecError(f"scale factor must be positive, got {q}")
    for a in pocket_atoms:
        if a in SPECIALS:
            raise CodecError(f"pocket atom token {a!r} collides with a special token")
    n = len(pocket_atoms)
    tokens = ["[PS]"] + list(pocket_atoms) + ["[PE]", "[PCS]"] + _xyz_tokens(n) + ["[PCE]"]
    numbers = np.ones(len(tokens))
    if n:
        numbers[n + 3:n + 3 + 3 * n] = (coords / q).ravel()
    return ParallelSequence(tokens, numbers)


def encode_ligand(smiles, coords, q):
    """Encode a ligand block; coordinates follow SMILES atom order."""
    ts = tokenize_smiles(smiles)
    if ts.atom_count == 0:
        raise CodecError("ligand SMILES has no atoms")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) != ts.atom_count:
        raise CodecError(
            f"ligand has {ts.atom_count} atoms but {len(coords)} coordinates"
        )
    if q <= 0:
        raise CodecError(f"scale factor must be positive, got {q}")
    m = len(ts.tokens)
    tokens = ["[LS]"] + ts.tokens + ["[LE]", "[LCS]"] + _xyz_tokens(ts.atom_count) + ["[LCE]"]
    numbers = np.ones(len(tokens))
    numbers[m + 3:m + 3 + 3 * ts.atom_count] = (coords / q).ravel()
    return ParallelSequence(tokens, numbers)


def encode_complex(record, q, max_len=2048):
    """Encode a record as pocket block followed by ligand block.

    Unnormalized records are centered here on the joint unweighted mean and
    scaled by 1/q; already-normalized records are written verbatim.
    """
    has_pocket = len(record.pocket_atoms) > 0
    has_ligand = bool(record.ligand_smiles)
    if not has_pocket and not has_ligand:
        raise CodecError("record has neither pocket nor ligand")
    if not has_ligand and len(record.ligand_coords):
        raise CodecError("record has ligand coordinates but no SMILES")

    if record.normalized:
        pocket_xyz, ligand_xyz, scale = record.pocket_coords, record.ligand_coords, 1.0
    else:
        center = record.all_coords().mean(axis=0)
        pocket_xyz = record.pocket_coords - center
        ligand_xyz = record.ligand_coords - center
        scale = q

    parts = []
    if has_pocket:
        parts.append(encode_pocket(record.pocket_atoms, pocket_xyz, scale))
    if has_ligand:
        parts.append(encode_ligand(record.ligand_smiles, ligand_xyz, scale))
    seq = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    if len(seq) > max_len:
        raise CodecError(f"encoded length {len(seq)} exceeds max_len {max_len}")
    return seq


def decode(seq, vocab, q):
    """Inverse of encode_complex, up to the lost translation: coordinates
    come back multiplied by q, in the centered frame (center = origin)."""
    problems = validate(seq, vocab)
    if problems:
        d = problems[0]
        raise CodecError(f"[{d.rule}] {d.message} (position {d.position})")
    marks = seq.segments()

    pocket_atoms, pocket_coords = [], np.zeros((0, 3))
    smiles, ligand_coords = "", np.zeros((0, 3))
    if marks.pocket_atoms:
        pocket_atoms = list(seq.tokens[marks.pocket_atoms[0]:marks.pocket_atoms[1]])
        s, e = marks.pocket_coords
        pocket_coords = seq.numbers[s:e].reshape(-1, 3) * q
    if marks.ligand_smiles:
        smiles = "".join(seq.tokens[marks.ligand_smiles[0]:marks.ligand_smiles[1]])
        s, e = marks.ligand_coords
        ligand_coords = seq.numbers[s:e].reshape(-1, 3) * q
    return chem.ComplexRecord(
        pocket_atoms=pocket_atoms,
        pocket_coords=pocket_coords,
        ligand_smiles=smiles,
        ligand_coords=ligand_coords,
    )


# --------------------------------------------------------------- file IO ---


def sequence_to_json(seq):
    # numbers are stored at float32 precision
    numbers = [float(np.float32(v)) for v in seq.numbers]
    return json.dumps({"tokens": list(seq.tokens), "numbers": numbers})


def sequence_from_json(line):
    obj = json.loads(line)
    return ParallelSequence(obj["tokens"], np.array(obj["numbers"], dtype=np.float64))


def write_sequences(path, seqs):
    with open(path, "w") as f:
        for s in seqs:
            f.write(sequence_to_json(s))
            f.write("\n")


def read_sequences(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(sequence_from_json(line))
    return out
