"""Molecule file parsing, chemical features, and the directed-edge graph.

Covers MOL/SDF V2000 and the QM9 flavor of extended XYZ, a fixed
13-feature atom encoding over the H/C/N/O/F species set, 4-bit bond-type
one-hots, and construction of the directed bond graph whose per-edge
incoming lists exclude the reverse edge (non-backtracking).

Everything here is pure and reentrant; parsing distinct inputs from many
threads is safe.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

ELEMENTS = ("H", "C", "N", "O", "F")
ATOMIC_NUMBER = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}
BOND_ORDERS = ("single", "double", "triple", "aromatic")

HARTREE_TO_EV = 27.211386  # single conversion constant used everywhere

TARGET_NAMES = ("mu", "alpha", "homo", "lumo", "gap", "r2", "zpve", "u0", "u", "h", "g", "cv")
# Raw-file targets stored in Hartree that we convert to eV on parse.
_HARTREE_TARGETS = frozenset({"homo", "lumo", "gap", "zpve", "u0", "u", "h", "g"})

ATOM_FEATURE_COLUMNS = (
    "is_h", "is_c", "is_n", "is_o", "is_f",
    "atomic_number", "acceptor", "donor", "aromatic",
    "sp", "sp2", "sp3", "num_h_neighbors",
)

N_ATOM_FEATURES = 13
N_BOND_FEATURES = 4


class MoleculeParseError(ValueError):
    """Raised for malformed molecule files; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Atom:
    element: str
    position: tuple[float, float, float]

    def __post_init__(self):
        if self.element not in ELEMENTS:
            raise ValueError(f"unsupported element {self.element!r}")
        if not all(math.isfinite(c) for c in self.position):
            raise ValueError(f"non-finite coordinate in {self.position}")


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"bond endpoints must differ, got {self.a}-{self.b}")
        if self.order not in BOND_ORDERS:
            raise ValueError(f"unknown bond order {self.order!r}")

    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


@dataclass(frozen=True)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    identifier: str = ""

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValueError("a molecule needs at least one atom")
        n = len(self.atoms)
        seen = set()
        for bond in self.bonds:
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ValueError(f"bond {bond.a}-{bond.b} out of range for {n} atoms")
            if bond.key() in seen:
                raise ValueError(f"duplicate bond {bond.key()}")
            seen.add(bond.key())
        if n > 1 and not self.is_connected():
            warnings.warn(f"molecule {self.identifier!r} has a disconnected bond graph")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    def species_counts(self) -> np.ndarray:
        """Counts per species in the fixed H, C, N, O, F order."""
        counts = np.zeros(len(ELEMENTS))
        for atom in self.atoms:
            counts[ELEMENTS.index(atom.element)] += 1
        return counts

    def is_connected(self) -> bool:
        n = len(self.atoms)
        adjacency: list[list[int]] = [[] for _ in range(n)]
        for bond in self.bonds:
            adjacency[bond.a].append(bond.b)
            adjacency[bond.b].append(bond.a)
        seen = {0}
        stack = [0]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == n

    def with_positions(self, positions: np.ndarray) -> "Molecule":
        atoms = tuple(
            Atom(a.element, tuple(float(c) for c in pos))
            for a, pos in zip(self.atoms, positions)
        )
        return Molecule(atoms, self.bonds, self.identifier)


@dataclass(frozen=True)
class QM9Record:
    """One molecule plus its 12 property targets (energies already in eV)."""

    molecule: Molecule
    targets: dict[str, float]

    def __post_init__(self):
        missing = [t for t in TARGET_NAMES if t not in self.targets]
        if missing:
            raise ValueError(f"missing targets: {missing}")
        bad = [t for t in TARGET_NAMES if not math.isfinite(self.targets[t])]
        if bad:
            raise ValueError(f"non-finite targets: {bad}")


# ---------------------------------------------------------------------------
# MOL/SDF V2000
# ---------------------------------------------------------------------------

_SDF_BOND_CODES = {1: "single", 2: "double", 3: "triple", 4: "aromatic"}
_SDF_BOND_NUMBERS = {v: k for k, v in _SDF_BOND_CODES.items()}


def _as_text(data) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="replace")
    return data


def parse_sdf(data) -> list[Molecule]:
    """Parse MOL/SDF V2000 content (bytes or str); records split on $$$$."""
    text = _as_text(data)
    lines = text.split("\n")
    molecules = []
    start = 0
    while start < len(lines):
        # skip blank padding between records
        while start < len(lines) and not lines[start].strip() and not _has_content(lines, start):
            start += 1
        if start >= len(lines):
            break
        end = start
        while end < len(lines) and lines[end].strip() != "$$$$":
            end += 1
        if any(line.strip() for line in lines[start:end]):
            molecules.append(_parse_molblock(lines, start, end))
        start = end + 1
    return molecules


def _has_content(lines, start) -> bool:
    return any(line.strip() for line in lines[start:])


def _parse_molblock(lines: list[str], start: int, end: int) -> Molecule:
    if end - start < 4:
        raise MoleculeParseError("record too short for a V2000 header", start + 1)
    identifier = lines[start].strip()
    counts_idx = start + 3
    counts_line = lines[counts_idx]
    try:
        n_atoms = int(counts_line[0:3])
        n_bonds = int(counts_line[3:6])
    except (ValueError, IndexError):
        raise MoleculeParseError(f"malformed counts line {counts_line!r}", counts_idx + 1)
    if n_atoms < 1:
        raise MoleculeParseError(f"counts line declares {n_atoms} atoms", counts_idx + 1)

    atoms = []
    for i in range(n_atoms):
        idx = counts_idx + 1 + i
        if idx >= end:
            raise MoleculeParseError(f"expected atom line {i + 1} of {n_atoms}", idx + 1)
        fields = lines[idx].split()
        if len(fields) < 4:
            raise MoleculeParseError(f"malformed atom line {lines[idx]!r}", idx + 1)
        try:
            x, y, z = (float(fields[0]), float(fields[1]), float(fields[2]))
        except ValueError:
            raise MoleculeParseError(f"unparsable coordinates in {lines[idx]!r}", idx + 1)
        element = fields[3]
        if element not in ELEMENTS:
            raise MoleculeParseError(f"unsupported element {element!r}", idx + 1)
        atoms.append(Atom(element, (x, y, z)))

    bonds = []
    seen_keys = set()
    for i in range(n_bonds):
        idx = counts_idx + 1 + n_atoms + i
        if idx >= end:
            raise MoleculeParseError(f"expected bond line {i + 1} of {n_bonds}", idx + 1)
        fields = lines[idx].split()
        if len(fields) < 3:
            raise MoleculeParseError(f"malformed bond line {lines[idx]!r}", idx + 1)
        try:
            a, b, code = int(fields[0]), int(fields[1]), int(fields[2])
        except ValueError:
            raise MoleculeParseError(f"unparsable bond line {lines[idx]!r}", idx + 1)
        if not (1 <= a <= n_atoms and 1 <= b <= n_atoms):
            raise MoleculeParseError(f"bond indices {a}-{b} out of range", idx + 1)
        if a == b:
            raise MoleculeParseError(f"bond {a}-{b} joins an atom to itself", idx + 1)
        if code not in _SDF_BOND_CODES:
            raise MoleculeParseError(f"unsupported bond type {code}", idx + 1)
        key = (min(a, b), max(a, b))
        if key in seen_keys:
            raise MoleculeParseError(f"duplicate bond {a}-{b}", idx + 1)
        seen_keys.add(key)
        bonds.append(Bond(a - 1, b - 1, _SDF_BOND_CODES[code]))

    return Molecule(tuple(atoms), tuple(bonds), identifier)


def molecule_to_sdf(molecule: Molecule) -> str:
    """Serialize to a canonical V2000 block (4-decimal coordinates)."""
    lines = [molecule.identifier, "", ""]
    lines.append(f"{molecule.n_atoms:3d}{len(molecule.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
    for atom in molecule.atoms:
        x, y, z = atom.position
        lines.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {atom.element:<3s} 0  0  0  0  0  0  0  0  0  0  0  0")
    for bond in molecule.bonds:
        code = _SDF_BOND_NUMBERS[bond.order]
        lines.append(f"{bond.a + 1:3d}{bond.b + 1:3d}{code:3d}  0  0  0  0")
    lines.append("M  END")
    lines.append("$$$$")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# QM9 extended XYZ
# ---------------------------------------------------------------------------

def _parse_float(token: str, line_no: int) -> float:
    """Accept plain and Fortran 'D' exponent notation."""
    try:
        return float(token.replace("D", "E").replace("d", "e"))
    except ValueError:
        raise MoleculeParseError(f"unparsable float {token!r}", line_no)


def parse_qm9_xyz(data, perceive_bond_orders: bool = True) -> QM9Record:
    """Parse one QM9-style extended XYZ record.

    Layout: atom count; property line (tag, index, three rotational
    constants, then the 12 targets); per-atom element/x/y/z/charge lines;
    then frequency, SMILES and InChI lines, which are tolerated but not
    interpreted. Hartree quantities are converted to eV. XYZ files carry
    no bond table, so bonds are perceived from interatomic distances.
    """
    text = _as_text(data)
    lines = text.split("\n")
    if len(lines) < 2:
        raise MoleculeParseError("record too short", 1)
    try:
        n_atoms = int(lines[0].strip())
    except ValueError:
        raise MoleculeParseError(f"bad atom count {lines[0]!r}", 1)
    if n_atoms < 1:
        raise MoleculeParseError(f"bad atom count {n_atoms}", 1)

    props = lines[1].split()
    # tag, index, A, B, C, then the 12 targets
    if len(props) < 2 + 3 + len(TARGET_NAMES):
        raise MoleculeParseError(
            f"property line has {len(props)} fields, need at least {5 + len(TARGET_NAMES)}", 2
        )
    identifier = f"{props[0]}_{props[1]}"
    raw = [_parse_float(tok, 2) for tok in props[5:5 + len(TARGET_NAMES)]]
    targets = {}
    for name, value in zip(TARGET_NAMES, raw):
        targets[name] = value * HARTREE_TO_EV if name in _HARTREE_TARGETS else value

    if len(lines) < 2 + n_atoms:
        raise MoleculeParseError(f"expected {n_atoms} atom lines", len(lines))
    atoms = []
    for i in range(n_atoms):
        line_no = 3 + i
        fields = lines[2 + i].split()
        if len(fields) < 4:
            raise MoleculeParseError(f"malformed atom line {lines[2 + i]!r}", line_no)
        element = fields[0]
        if element not in ELEMENTS:
            raise MoleculeParseError(f"unsupported element {element!r}", line_no)
        x, y, z = (_parse_float(fields[k], line_no) for k in (1, 2, 3))
        atoms.append(Atom(element, (x, y, z)))

    bonds = perceive_bonds(atoms, with_orders=perceive_bond_orders)
    molecule = Molecule(tuple(atoms), tuple(bonds), identifier)
    return QM9Record(molecule, targets)


def write_qm9_xyz(record: QM9Record) -> str:
    """Serialize a record back to the QM9 XYZ layout (eV targets -> Hartree)."""
    mol = record.molecule
    parts = mol.identifier.split("_")
    tag = parts[0] if len(parts) == 2 else "gdb"
    index = parts[1] if len(parts) == 2 else "0"
    values = []
    for name in TARGET_NAMES:
        v = record.targets[name]
        if name in _HARTREE_TARGETS:
            v = v / HARTREE_TO_EV
        values.append(f"{v:.12g}")
    lines = [str(mol.n_atoms), "\t".join([tag, index, "0", "0", "0"] + values)]
    for atom in mol.atoms:
        x, y, z = atom.position
        lines.append(f"{atom.element}\t{x:.8f}\t{y:.8f}\t{z:.8f}\t0.0")
    lines.append("0.0")
    lines.append("N/A\tN/A")
    lines.append("InChI=N/A\tInChI=N/A")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Bond perception for XYZ input (no bond table in the format)
# ---------------------------------------------------------------------------

# Reference bond lengths (angstrom) per unordered element pair and order.
BOND_LENGTHS: dict[tuple[str, str], dict[str, float]] = {
    ("H", "H"): {"single": 0.74},
    ("C", "H"): {"single": 1.09},
    ("N", "H"): {"single": 1.01},
    ("O", "H"): {"single": 0.96},
    ("F", "H"): {"single": 0.92},
    ("C", "C"): {"single": 1.54, "double": 1.34, "triple": 1.20},
    ("C", "N"): {"single": 1.47, "double": 1.29, "triple": 1.16},
    ("C", "O"): {"single": 1.43, "double": 1.21},
    ("C", "F"): {"single": 1.35},
    ("N", "N"): {"single": 1.45, "double": 1.25, "triple": 1.10},
    ("N", "O"): {"single": 1.40, "double": 1.21},
    ("O", "O"): {"single": 1.48, "double": 1.21},
    ("F", "N"): {"single": 1.36},
    ("F", "O"): {"single": 1.42},
    ("F", "F"): {"single": 1.41},
}

_BOND_SLACK = 0.25  # tolerance around the reference length when bonding


def _pair_key(a: str, b: str) -> tuple[str, str]:
    return tuple(sorted((a, b)))  # type: ignore[return-value]


def perceive_bonds(atoms: list[Atom], with_orders: bool = True) -> list[Bond]:
    """Infer bonds (and orders) by nearest reference bond length per pair."""
    bonds = []
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            table = BOND_LENGTHS.get(_pair_key(atoms[i].element, atoms[j].element))
            if table is None:
                continue
            d = math.dist(atoms[i].position, atoms[j].position)
            best_order, best_gap = None, _BOND_SLACK
            for order, ref in table.items():
                gap = abs(d - ref)
                if gap < best_gap:
                    best_order, best_gap = order, gap
            if best_order is not None:
                bonds.append(Bond(i, j, best_order if with_orders else "single"))
    return bonds


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def featurize(molecule: Molecule, atom_features: np.ndarray | None = None):
    """Compute the (n_atoms, 13) atom matrix and (n_bonds, 4) bond one-hots.

    Atom columns: element one-hot over H/C/N/O/F, atomic number, acceptor
    flag (N or O), donor flag (N or O with a bonded H), aromatic flag,
    hybridization one-hot (sp/sp2/sp3 for C/N/O by bond-order rule), and
    the count of bonded hydrogens. ``atom_features`` overrides the rule-based
    atom matrix with precomputed rows (bond features are always computed).
    """
    n = molecule.n_atoms
    bond_feats = np.zeros((len(molecule.bonds), N_BOND_FEATURES))
    for k, bond in enumerate(molecule.bonds):
        bond_feats[k, BOND_ORDERS.index(bond.order)] = 1.0

    if atom_features is not None:
        feats = np.asarray(atom_features, dtype=np.float64)
        if feats.shape != (n, N_ATOM_FEATURES):
            raise ValueError(
                f"precomputed atom features have shape {feats.shape}, "
                f"expected {(n, N_ATOM_FEATURES)}"
            )
        return feats.copy(), bond_feats

    neighbor_orders: list[list[str]] = [[] for _ in range(n)]
    h_neighbors = np.zeros(n)
    aromatic = np.zeros(n, dtype=bool)
    for bond in molecule.bonds:
        for here, there in ((bond.a, bond.b), (bond.b, bond.a)):
            neighbor_orders[here].append(bond.order)
            if molecule.atoms[there].element == "H":
                h_neighbors[here] += 1
            if bond.order == "aromatic":
                aromatic[here] = True

    feats = np.zeros((n, N_ATOM_FEATURES))
    for i, atom in enumerate(molecule.atoms):
        feats[i, ELEMENTS.index(atom.element)] = 1.0
        feats[i, 5] = ATOMIC_NUMBER[atom.element]
        is_n_or_o = atom.element in ("N", "O")
        feats[i, 6] = 1.0 if is_n_or_o else 0.0
        feats[i, 7] = 1.0 if is_n_or_o and h_neighbors[i] >= 1 else 0.0
        feats[i, 8] = 1.0 if aromatic[i] else 0.0
        if atom.element in ("C", "N", "O"):
            n_double = neighbor_orders[i].count("double")
            n_triple = neighbor_orders[i].count("triple")
            if n_triple >= 1 or n_double >= 2:
                feats[i, 9] = 1.0  # sp
            elif aromatic[i] or n_double == 1:
                feats[i, 10] = 1.0  # sp2
            else:
                feats[i, 11] = 1.0  # sp3
        feats[i, 12] = h_neighbors[i]
    return feats, bond_feats


def write_atom_features_csv(features: np.ndarray) -> str:
    rows = [",".join(ATOM_FEATURE_COLUMNS)]
    for row in np.asarray(features, dtype=np.float64):
        rows.append(",".join(f"{v:.12g}" for v in row))
    return "\n".join(rows) + "\n"


def read_atom_features_csv(data) -> np.ndarray:
    """Read a precomputed 13-column atom feature file (header required)."""
    lines = [ln for ln in _as_text(data).splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty feature file")
    header = tuple(h.strip() for h in lines[0].split(","))
    if header != ATOM_FEATURE_COLUMNS:
        raise ValueError(f"feature header {header} does not match {ATOM_FEATURE_COLUMNS}")
    rows = [[float(tok) for tok in ln.split(",")] for ln in lines[1:]]
    feats = np.array(rows, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != N_ATOM_FEATURES:
        raise ValueError(f"expected {N_ATOM_FEATURES} feature columns, got {feats.shape}")
    return feats


# ---------------------------------------------------------------------------
# Directed edge graph
# ---------------------------------------------------------------------------

@dataclass
class DirectedEdgeGraph:
    """Directed bond graph: two edges per bond, plus non-backtracking
    incoming lists (edges k->j feeding edge j->i, with k != i)."""

    n_atoms: int
    sources: np.ndarray          # (E,) int, source atom j of edge j->i
    targets: np.ndarray          # (E,) int, target atom i
    edge_features: np.ndarray    # (E, 4) bond one-hot per directed edge
    source_features: np.ndarray  # (E, 13) features of the source atom
    edge_vectors: np.ndarray     # (E, 3) target minus source position
    incoming: list[list[int]]    # per-edge incoming edge indices
    atom_features: np.ndarray    # (N, 13)
    positions: np.ndarray        # (N, 3)
    identifier: str = ""

    @property
    def n_edges(self) -> int:
        return len(self.sources)

    def reverse_edge(self, e: int) -> int:
        return e ^ 1

    def edges_into_atom(self, i: int) -> list[int]:
        return [e for e in range(self.n_edges) if self.targets[e] == i]


def build_directed_graph(
    molecule: Molecule,
    atom_features: np.ndarray,
    bond_features: np.ndarray,
) -> DirectedEdgeGraph:
    """Expand bonds to directed edge pairs; edge 2k runs a->b of bond k and
    edge 2k+1 runs b->a, so reverse(e) == e ^ 1."""
    positions = molecule.positions()
    n_bonds = len(molecule.bonds)
    sources = np.empty(2 * n_bonds, dtype=np.intp)
    targets = np.empty(2 * n_bonds, dtype=np.intp)
    edge_feats = np.empty((2 * n_bonds, N_BOND_FEATURES))
    for k, bond in enumerate(molecule.bonds):
        sources[2 * k], targets[2 * k] = bond.a, bond.b
        sources[2 * k + 1], targets[2 * k + 1] = bond.b, bond.a
        edge_feats[2 * k] = bond_features[k]
        edge_feats[2 * k + 1] = bond_features[k]

    into: list[list[int]] = [[] for _ in range(molecule.n_atoms)]
    for e in range(2 * n_bonds):
        into[targets[e]].append(e)
    incoming = []
    for e in range(2 * n_bonds):
        reverse = e ^ 1
        incoming.append([f for f in into[sources[e]] if f != reverse])

    edge_vectors = positions[targets] - positions[sources] if n_bonds else np.zeros((0, 3))
    return DirectedEdgeGraph(
        n_atoms=molecule.n_atoms,
        sources=sources,
        targets=targets,
        edge_features=edge_feats,
        source_features=atom_features[sources] if n_bonds else np.zeros((0, N_ATOM_FEATURES)),
        edge_vectors=edge_vectors,
        incoming=incoming,
        atom_features=atom_features,
        positions=positions,
        identifier=molecule.identifier,
    )


def graph_from_molecule(molecule: Molecule, atom_features: np.ndarray | None = None) -> DirectedEdgeGraph:
    feats, bond_feats = featurize(molecule, atom_features)
    return build_directed_graph(molecule, feats, bond_feats)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def center_molecule(molecule: Molecule) -> Molecule:
    """Translate so the unweighted mean atom position is the origin."""
    positions = molecule.positions()
    return molecule.with_positions(positions - positions.mean(axis=0))


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly from SO(3) via a normalized random quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(molecule: Molecule, rng: np.random.Generator) -> Molecule:
    """Apply one uniformly random rotation to all coordinates."""
    rot = random_rotation_matrix(rng)
    return molecule.with_positions(molecule.positions() @ rot.T)
