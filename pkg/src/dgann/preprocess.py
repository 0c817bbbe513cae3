"""Target preprocessing, dataset splitting, and batch assembly.

Energy-like targets are residualized against a least-squares fit on
per-species atom counts plus a bias (the model then learns the residual);
every target is standardized with training-split statistics so one Huber
delta makes sense across targets. Both stages invert exactly.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .molgraph import (
    ELEMENTS,
    Molecule,
    QM9Record,
    center_molecule,
    graph_from_molecule,
    random_rotation,
)

# Residualized against species counts; everything else is standardized only.
LSM_TARGET_NAMES = ("zpve", "u0_atom", "u_atom", "h_atom", "g_atom")

# CLI-facing target names and how they map onto raw record fields.
PREDICTION_TARGETS = (
    "mu", "alpha", "homo", "lumo", "gap", "r2", "zpve",
    "u0_atom", "u_atom", "h_atom", "g_atom", "cv",
)
_ATOMIZATION_BASE = {"u0_atom": "u0", "u_atom": "u", "h_atom": "h", "g_atom": "g"}


def counts_matrix(molecules: list[Molecule]) -> np.ndarray:
    """(n, 5) per-species atom counts in H, C, N, O, F order."""
    return np.array([m.species_counts() for m in molecules])


# ---------------------------------------------------------------------------
# Least-squares species baseline
# ---------------------------------------------------------------------------

@dataclass
class LsmModel:
    """Per-species coefficients (H, C, N, O, F order) plus a bias term."""

    theta: np.ndarray
    target: str = ""
    fitted: bool = False

    def design_matrix(self, counts: np.ndarray) -> np.ndarray:
        counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
        if counts.shape[1] != len(ELEMENTS):
            raise ValueError(f"counts must have {len(ELEMENTS)} columns, got {counts.shape[1]}")
        return np.hstack([counts, np.ones((counts.shape[0], 1))])

    def predict(self, counts: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise ValueError("LSM model is not fitted")
        return self.design_matrix(counts) @ self.theta

    def residualize(self, counts: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) - self.predict(counts)

    def inverse(self, counts: np.ndarray, residual: np.ndarray) -> np.ndarray:
        return np.asarray(residual, dtype=np.float64) + self.predict(counts)


def fit_lsm(counts: np.ndarray, targets: np.ndarray, target: str = "") -> LsmModel:
    """Least-squares fit of targets on [species counts | 1].

    Solved by orthogonal decomposition rather than the normal-equations
    inverse; a rank-deficient design falls back to the pseudo-inverse
    solution with a warning.
    """
    counts = np.asarray(counts, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[1] != len(ELEMENTS):
        raise ValueError(f"counts must be (n, {len(ELEMENTS)}), got {counts.shape}")
    n = counts.shape[0]
    if n < len(ELEMENTS) + 1:
        raise ValueError(f"need at least {len(ELEMENTS) + 1} training rows, got {n}")
    if y.shape != (n,):
        raise ValueError(f"targets must be ({n},), got {y.shape}")
    design = np.hstack([counts, np.ones((n, 1))])
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        warnings.warn(
            f"species design matrix is rank deficient ({rank} < {design.shape[1]}); "
            "using the pseudo-inverse solution"
        )
    theta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return LsmModel(theta=theta, target=target, fitted=True)


# ---------------------------------------------------------------------------
# Target transform: optional LSM residual, then optional standardization
# ---------------------------------------------------------------------------

@dataclass
class TargetTransform:
    target: str
    lsm: LsmModel | None = None
    mean: float | None = None
    std: float | None = None

    @classmethod
    def fit(
        cls,
        target: str,
        counts: np.ndarray,
        y_train: np.ndarray,
        use_lsm: bool | None = None,
        standardize: bool = True,
    ) -> "TargetTransform":
        """Fit on training-split data only. By default LSM applies exactly to
        the energy-like targets and standardization to everything."""
        if use_lsm is None:
            use_lsm = target in LSM_TARGET_NAMES
        lsm = fit_lsm(counts, y_train, target) if use_lsm else None
        mean = std = None
        if standardize:
            values = lsm.residualize(counts, y_train) if lsm else np.asarray(y_train, dtype=np.float64)
            mean = float(values.mean())
            spread = float(values.std())
            std = spread if spread > 0.0 else 1.0
        return cls(target=target, lsm=lsm, mean=mean, std=std)

    def transform(self, y: np.ndarray, counts: np.ndarray) -> np.ndarray:
        values = np.asarray(y, dtype=np.float64)
        if self.lsm is not None:
            values = self.lsm.residualize(counts, values)
        if self.mean is not None:
            values = (values - self.mean) / self.std
        return values

    def inverse(self, values: np.ndarray, counts: np.ndarray) -> np.ndarray:
        out = np.asarray(values, dtype=np.float64)
        if self.mean is not None:
            out = out * self.std + self.mean
        if self.lsm is not None:
            out = self.lsm.inverse(counts, out)
        return out

    def state(self) -> dict:
        return {
            "target": self.target,
            "theta": None if self.lsm is None else self.lsm.theta.tolist(),
            "mean": self.mean,
            "std": self.std,
        }

    @classmethod
    def from_state(cls, state: dict) -> "TargetTransform":
        lsm = None
        if state.get("theta") is not None:
            lsm = LsmModel(theta=np.array(state["theta"], dtype=np.float64),
                           target=state["target"], fitted=True)
        return cls(target=state["target"], lsm=lsm, mean=state.get("mean"), std=state.get("std"))


# ---------------------------------------------------------------------------
# Raw target extraction (atomization energies derived from a reference table)
# ---------------------------------------------------------------------------

def read_atomref_csv(data) -> dict[str, dict[str, float]]:
    """Free-atom reference energies: CSV with columns element, U0, U, H, G (eV)."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.DictReader(io.StringIO(text))
    table: dict[str, dict[str, float]] = {}
    if reader.fieldnames is None:
        raise ValueError("empty atom reference table")
    fields = {name.strip().lower(): name for name in reader.fieldnames}
    for needed in ("element", "u0", "u", "h", "g"):
        if needed not in fields:
            raise ValueError(f"atom reference table is missing column {needed!r}")
    for row in reader:
        element = row[fields["element"]].strip()
        table[element] = {key: float(row[fields[key]]) for key in ("u0", "u", "h", "g")}
    missing = [el for el in ELEMENTS if el not in table]
    if missing:
        raise ValueError(f"atom reference table is missing elements {missing}")
    return table


def target_column(
    records: list[QM9Record],
    name: str,
    atomref: dict[str, dict[str, float]] | None = None,
    precomputed: np.ndarray | None = None,
) -> np.ndarray:
    """Raw target vector in original units for one of the prediction targets.

    Atomization energies are either supplied precomputed or derived from the
    raw totals minus summed free-atom reference energies.
    """
    if name not in PREDICTION_TARGETS:
        raise ValueError(f"unknown target {name!r}; valid: {', '.join(PREDICTION_TARGETS)}")
    if precomputed is not None:
        values = np.asarray(precomputed, dtype=np.float64)
        if values.shape != (len(records),):
            raise ValueError(f"precomputed targets must be ({len(records)},), got {values.shape}")
        return values
    if name not in _ATOMIZATION_BASE:
        return np.array([r.targets[name] for r in records])
    if atomref is None:
        raise ValueError(f"target {name!r} needs an atom reference-energy table")
    base = _ATOMIZATION_BASE[name]
    out = np.empty(len(records))
    for i, record in enumerate(records):
        reference = sum(atomref[a.element][base] for a in record.molecule.atoms)
        out[i] = record.targets[base] - reference
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_dataset(n: int, seed: int) -> DatasetSplit:
    """Seeded shuffle, then 0.9/0.05/0.05 slicing. The val and test sizes are
    the rounded 5% shares; leftover rows land in the training split."""
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    n_val = int(math.floor(0.05 * n + 0.5))
    n_test = int(math.floor(0.05 * n + 0.5))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        train=np.sort(order[:n_train]),
        val=np.sort(order[n_train:n_train + n_val]),
        test=np.sort(order[n_train + n_val:]),
        seed=seed,
    )


def split_to_csv(split: DatasetSplit) -> str:
    lines = ["index,split"]
    for name in ("train", "val", "test"):
        for idx in getattr(split, name):
            lines.append(f"{int(idx)},{name}")
    return "\n".join(lines) + "\n"


def split_from_csv(data, seed: int = -1) -> DatasetSplit:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    buckets: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    reader = csv.DictReader(io.StringIO(text))
    for row in reader:
        name = row["split"].strip()
        if name not in buckets:
            raise ValueError(f"unknown split name {name!r}")
        buckets[name].append(int(row["index"]))
    return DatasetSplit(
        train=np.array(sorted(buckets["train"]), dtype=np.intp),
        val=np.array(sorted(buckets["val"]), dtype=np.intp),
        test=np.array(sorted(buckets["test"]), dtype=np.intp),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Up to batch_size molecules, centered (and optionally rotated), with
    graphs built on the augmented coordinates and padding masks sized to the
    largest molecule in the batch."""

    graphs: list
    indices: np.ndarray
    n_atoms: list[int]
    padded_len: int
    masks: list[np.ndarray]
    y: np.ndarray
    y_raw: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.graphs)


def make_batches(
    molecules: list[Molecule],
    y_raw: np.ndarray,
    transform: TargetTransform | None,
    indices: np.ndarray,
    batch_size: int = 64,
    augment: bool = False,
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
):
    """Yield Batch objects over ``indices`` for one epoch.

    Molecules are always centered; a fresh random rotation is applied per
    molecule per epoch iff ``augment``. Order and rotations are driven by
    ``rng``, so a seeded generator makes epochs reproducible.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    indices = np.asarray(indices, dtype=np.intp)
    order = rng.permutation(indices) if shuffle else indices.copy()
    y_raw = np.asarray(y_raw, dtype=np.float64)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        prepared = []
        for idx in chunk:
            mol = center_molecule(molecules[idx])
            if augment:
                mol = random_rotation(mol, rng)
            prepared.append(mol)
        graphs = [graph_from_molecule(m) for m in prepared]
        n_atoms = [m.n_atoms for m in prepared]
        padded_len = max(n_atoms)
        masks = [np.arange(padded_len) < n for n in n_atoms]
        counts = counts_matrix(prepared)
        raw = y_raw[chunk]
        y = transform.transform(raw, counts) if transform is not None else raw.copy()
        yield Batch(
            graphs=graphs,
            indices=chunk,
            n_atoms=n_atoms,
            padded_len=padded_len,
            masks=masks,
            y=y,
            y_raw=raw,
            counts=counts,
        )
