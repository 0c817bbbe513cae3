"""Synthetic QM9-format molecules for demos and desk-scale experiments.

Generates random acyclic H/C/N/O/F molecules with 3D geometry laid out at
tabulated bond lengths, and property values built the way the real data
behaves: total energies are dominated by per-species free-atom reference
constants (the published values ship in DEFAULT_ATOMREF) plus bond-scale
contributions, the dipole is the norm of a charge-weighted position sum so
it is a learnable function of geometry, and the remaining targets follow
plausible composition trends. Records can be written as QM9-style .xyz
files, optionally using Fortran 'D' exponents.

This is stand-in data: quantitative results on it say nothing about the
real dataset, but every pipeline stage consumes it exactly as it would
consume real records.
"""

from __future__ import annotations

import math

import numpy as np

from .molgraph import (
    BOND_LENGTHS,
    HARTREE_TO_EV,
    Atom,
    Bond,
    Molecule,
    QM9Record,
    TARGET_NAMES,
    _pair_key,
)

VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2, "F": 1}

# Published per-species free-atom reference energies (Hartree), converted
# to eV below; these dominate every total-energy column.
_ATOMREF_HARTREE = {
    "u0": {"H": -0.500273, "C": -37.846772, "N": -54.583861, "O": -75.064579, "F": -99.718730},
    "u": {"H": -0.498857, "C": -37.845355, "N": -54.582445, "O": -75.063163, "F": -99.717314},
    "h": {"H": -0.497912, "C": -37.844411, "N": -54.581501, "O": -75.062219, "F": -99.716370},
    "g": {"H": -0.510927, "C": -37.861317, "N": -54.598897, "O": -75.079532, "F": -99.733544},
}

DEFAULT_ATOMREF: dict[str, dict[str, float]] = {
    element: {key: _ATOMREF_HARTREE[key][element] * HARTREE_TO_EV for key in _ATOMREF_HARTREE}
    for element in VALENCE
}


def default_atomref_csv() -> str:
    lines = ["element,U0,U,H,G"]
    for element in ("H", "C", "N", "O", "F"):
        row = DEFAULT_ATOMREF[element]
        lines.append(f"{element},{row['u0']:.6f},{row['u']:.6f},{row['h']:.6f},{row['g']:.6f}")
    return "\n".join(lines) + "\n"


# Bond formation energies (eV, negative = stabilizing) per pair and order.
_BOND_ENERGY = {
    ("H", "H"): {"single": -4.5},
    ("C", "H"): {"single": -4.5},
    ("H", "N"): {"single": -4.0},
    ("H", "O"): {"single": -4.8},
    ("F", "H"): {"single": -5.9},
    ("C", "C"): {"single": -3.6, "double": -6.3, "triple": -8.7},
    ("C", "N"): {"single": -3.0, "double": -6.4, "triple": -9.2},
    ("C", "O"): {"single": -3.7, "double": -7.7},
    ("C", "F"): {"single": -5.0},
    ("N", "N"): {"single": -1.7, "double": -4.3, "triple": -9.8},
    ("N", "O"): {"single": -2.1, "double": -4.1},
    ("O", "O"): {"single": -1.5, "double": -5.1},
    ("F", "N"): {"single": -2.8},
    ("F", "O"): {"single": -1.9},
    ("F", "F"): {"single": -1.6},
}

_BOND_ZPVE = {"single": 0.12, "double": 0.09, "triple": 0.08}
_XH_ZPVE = 0.28  # bonds to hydrogen vibrate fastest

# Species partial charges feeding the synthetic dipole.
_CHARGE = {"H": 0.06, "C": -0.02, "N": -0.35, "O": -0.42, "F": -0.22}
_POLARIZABILITY = {"H": 2.0, "C": 9.5, "N": 7.5, "O": 5.5, "F": 3.5}
_ATOMIC_NUMBER = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}

EA_TO_DEBYE = 4.80320  # 1 electron * angstrom in Debye
ANGSTROM_TO_BOHR = 1.8897259886

_HEAVY = ("C", "N", "O", "F")
_HEAVY_WEIGHTS = np.array([0.62, 0.13, 0.16, 0.09])


def _safe_distance(el_a: str, el_b: str) -> float:
    """Below this separation the pair would be perceived as bonded."""
    table = BOND_LENGTHS.get(_pair_key(el_a, el_b))
    if table is None:
        return 0.0
    return max(table.values()) + 0.25 + 0.03


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _bond_length(el_a: str, el_b: str, order: str) -> float:
    return BOND_LENGTHS[_pair_key(el_a, el_b)][order]


def _principal_frame(positions: np.ndarray) -> np.ndarray:
    """Rotate into the principal axes of the centered coordinates, with a
    deterministic sign convention, so every molecule has a canonical pose."""
    centered = positions - positions.mean(axis=0)
    if len(centered) == 1:
        return centered
    _, _, vt = np.linalg.svd(centered, full_matrices=True)
    rot = vt.T
    for col in range(3):
        pivot = np.argmax(np.abs(rot[:, col]))
        if rot[pivot, col] < 0:
            rot[:, col] = -rot[:, col]
    if np.linalg.det(rot) < 0:
        rot[:, 2] = -rot[:, 2]
    return centered @ rot


def _try_build_molecule(rng: np.random.Generator, n_heavy: int, identifier: str) -> Molecule | None:
    elements = ["C"]
    elements += list(rng.choice(_HEAVY, size=n_heavy - 1, p=_HEAVY_WEIGHTS))
    free = [VALENCE[el] for el in elements]
    bonds: list[tuple[int, int, str]] = []

    # random tree over the heavy atoms
    for child in range(1, n_heavy):
        open_parents = [i for i in range(child) if free[i] >= 1]
        if not open_parents:
            return None
        parent = int(rng.choice(open_parents))
        bonds.append((parent, child, "single"))
        free[parent] -= 1
        free[child] -= 1

    # opportunistic order upgrades where valence allows
    upgraded = []
    for a, b, order in bonds:
        pair = _pair_key(elements[a], elements[b])
        orders = BOND_LENGTHS.get(pair, {})
        if "triple" in orders and free[a] >= 2 and free[b] >= 2 and rng.random() < 0.06:
            order = "triple"
            free[a] -= 2
            free[b] -= 2
        elif "double" in orders and free[a] >= 1 and free[b] >= 1 and rng.random() < 0.22:
            order = "double"
            free[a] -= 1
            free[b] -= 1
        upgraded.append((a, b, order))
    bonds = upgraded

    # saturate remaining valence with hydrogens
    for i in range(n_heavy):
        for _ in range(free[i]):
            h_index = len(elements)
            elements.append("H")
            bonds.append((i, h_index, "single"))
        free[i] = 0

    # geometry: walk the tree, rejecting placements that would read as
    # spurious bonds between non-bonded pairs
    n = len(elements)
    adjacency: dict[int, list[tuple[int, str]]] = {i: [] for i in range(n)}
    for a, b, order in bonds:
        adjacency[a].append((b, order))
        adjacency[b].append((a, order))
    positions = np.zeros((n, 3))
    placed = [False] * n
    placed[0] = True
    queue = [0]
    while queue:
        here = queue.pop(0)
        for child, order in adjacency[here]:
            if placed[child]:
                continue
            length = _bond_length(elements[here], elements[child], order) + rng.uniform(-0.008, 0.008)
            for _ in range(200):
                candidate = positions[here] + length * _random_direction(rng)
                ok = True
                for other in range(n):
                    if not placed[other] or other == here:
                        continue
                    if np.linalg.norm(candidate - positions[other]) < _safe_distance(
                        elements[child], elements[other]
                    ):
                        ok = False
                        break
                if ok:
                    positions[child] = candidate
                    placed[child] = True
                    queue.append(child)
                    break
            else:
                return None

    positions = _principal_frame(positions)
    atoms = tuple(Atom(el, tuple(float(c) for c in pos)) for el, pos in zip(elements, positions))
    bond_objs = tuple(Bond(a, b, order) for a, b, order in bonds)
    return Molecule(atoms, bond_objs, identifier)


def generate_molecule(
    rng: np.random.Generator,
    min_heavy: int = 1,
    max_heavy: int = 9,
    identifier: str = "",
) -> Molecule:
    while True:
        n_heavy = int(rng.integers(min_heavy, max_heavy + 1))
        molecule = _try_build_molecule(rng, n_heavy, identifier)
        if molecule is not None:
            return molecule


def _targets_for(molecule: Molecule, rng: np.random.Generator) -> dict[str, float]:
    counts = {el: 0 for el in VALENCE}
    for atom in molecule.atoms:
        counts[atom.element] += 1
    n_atoms = molecule.n_atoms

    bond_energy = 0.0
    zpve = 0.0
    n_double = n_triple = 0
    for bond in molecule.bonds:
        ea = molecule.atoms[bond.a].element
        eb = molecule.atoms[bond.b].element
        bond_energy += _BOND_ENERGY[_pair_key(ea, eb)][bond.order]
        zpve += _XH_ZPVE if "H" in (ea, eb) else _BOND_ZPVE[bond.order]
        n_double += bond.order == "double"
        n_triple += bond.order == "triple"
    zpve += rng.normal(0.0, 0.01)

    ref = {key: sum(DEFAULT_ATOMREF[el][key] * counts[el] for el in counts) for key in ("u0", "u", "h", "g")}
    u0 = ref["u0"] + bond_energy + rng.normal(0.0, 0.12)
    u = u0 + (ref["u"] - ref["u0"]) + 0.0015 * n_atoms + 0.038 + rng.normal(0.0, 0.01)
    h = u + 0.0257
    g = h - (0.30 + 0.016 * n_atoms) + rng.normal(0.0, 0.02)

    positions = molecule.positions()
    charges = np.array([_CHARGE[a.element] for a in molecule.atoms])
    charges -= charges.mean()  # net-neutral, so the dipole is origin-free
    dipole = charges @ positions + rng.normal(0.0, 0.004, size=3)
    mu = EA_TO_DEBYE * float(np.linalg.norm(dipole))

    alpha = sum(_POLARIZABILITY[a.element] for a in molecule.atoms) + rng.normal(0.0, 0.3)
    gap = max(1.5, 7.0 - 0.45 * n_double - 0.8 * n_triple - 0.08 * n_atoms + rng.normal(0.0, 0.25))
    homo = -6.2 - 0.12 * counts["O"] - 0.08 * counts["N"] + rng.normal(0.0, 0.2)
    lumo = homo + gap

    centered = positions - positions.mean(axis=0)
    weights = np.array([_ATOMIC_NUMBER[a.element] for a in molecule.atoms], dtype=float)
    r2 = float((weights * (centered ** 2).sum(axis=1)).sum()) * ANGSTROM_TO_BOHR ** 2
    r2 += 8.0 * weights.sum() / 6.0 + rng.normal(0.0, 2.0)

    cv = 2.8 + 1.05 * n_atoms + rng.normal(0.0, 0.3)

    return {
        "mu": mu, "alpha": alpha, "homo": homo, "lumo": lumo, "gap": gap,
        "r2": r2, "zpve": zpve, "u0": u0, "u": u, "h": h, "g": g, "cv": cv,
    }


# Internal-energy range documented for the real dataset; enforced here so
# the stand-in corpus stays inside it.
U0_RANGE_EV = (-19444.385, -1101.488)


def generate_record(rng: np.random.Generator, min_heavy: int = 1, max_heavy: int = 9,
                    identifier: str = "") -> QM9Record:
    while True:
        molecule = generate_molecule(rng, min_heavy, max_heavy, identifier)
        targets = _targets_for(molecule, rng)
        if U0_RANGE_EV[0] <= targets["u0"] <= U0_RANGE_EV[1]:
            return QM9Record(molecule, targets)


def generate_corpus(n: int, seed: int, min_heavy: int = 1, max_heavy: int = 9) -> list[QM9Record]:
    rng = np.random.default_rng(seed)
    return [
        generate_record(rng, min_heavy, max_heavy, identifier=f"gdb_{i + 1}")
        for i in range(n)
    ]


def record_to_xyz(record: QM9Record, d_exponents: bool = False) -> str:
    """QM9-style .xyz text; ``d_exponents`` writes floats Fortran-style."""

    def fmt(v: float) -> str:
        if d_exponents:
            return f"{v:.10E}".replace("E", "D")
        return f"{v:.10f}"

    mol = record.molecule
    parts = mol.identifier.split("_")
    tag, index = (parts[0], parts[1]) if len(parts) == 2 else ("gdb", "0")
    values = []
    for name in TARGET_NAMES:
        v = record.targets[name]
        if name in ("homo", "lumo", "gap", "zpve", "u0", "u", "h", "g"):
            v = v / HARTREE_TO_EV
        values.append(fmt(v))
    lines = [str(mol.n_atoms), "\t".join([tag, index, fmt(1.0), fmt(1.0), fmt(1.0)] + values)]
    for atom in mol.atoms:
        x, y, z = atom.position
        lines.append(f"{atom.element}\t{fmt(x)}\t{fmt(y)}\t{fmt(z)}\t{fmt(0.0)}")
    lines.append(fmt(100.0))
    lines.append("N/A\tN/A")
    lines.append("InChI=N/A\tInChI=N/A")
    return "\n".join(lines) + "\n"


def write_corpus_xyz(records: list[QM9Record], directory, d_exponent_every: int = 7) -> list[str]:
    """One .xyz file per record; every ``d_exponent_every``-th record uses
    'D' exponents to keep that parser path exercised. Returns file names."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, record in enumerate(records):
        use_d = d_exponent_every > 0 and (i % d_exponent_every) == d_exponent_every - 1
        name = f"{record.molecule.identifier or f'mol_{i}'}.xyz"
        (directory / name).write_text(record_to_xyz(record, d_exponents=use_d))
        names.append(name)
    return names
