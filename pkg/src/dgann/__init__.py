"""Directed graph attention network for molecular property prediction.

A numpy library with a self-checking reverse-mode autodiff core: molecule
parsing (MOL/SDF V2000 and QM9-style XYZ), directed-edge graphs with
non-backtracking incoming sets, the attention architecture, least-squares
target preprocessing, and a reproducible training loop.
"""

from .checkpoint import Checkpoint
from .model import (
    GraphBatch,
    ModelConfig,
    ModelParams,
    fingerprints,
    forward_graphs,
    init_edge_hidden,
    interaction_layer,
    output_block,
    predict,
    readout,
)
from .molgraph import (
    Atom,
    Bond,
    DirectedEdgeGraph,
    HARTREE_TO_EV,
    Molecule,
    MoleculeParseError,
    QM9Record,
    build_directed_graph,
    center_molecule,
    featurize,
    graph_from_molecule,
    molecule_to_sdf,
    parse_qm9_xyz,
    parse_sdf,
    random_rotation,
)
from .preprocess import (
    Batch,
    DatasetSplit,
    LsmModel,
    TargetTransform,
    fit_lsm,
    make_batches,
    split_dataset,
    target_column,
)
from .tensor import Tape, Tensor
from .train import (
    Adam,
    EvalResult,
    Metrics,
    TrainConfig,
    TrainResult,
    evaluate,
    huber_loss,
    lr_at_epoch,
    prepare_data,
    train,
)

__version__ = "0.1.0"
