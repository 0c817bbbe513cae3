"""The directed graph attention network.

Pipeline: initial edge embedding from chemical features plus the bond
position vector, a stack of edge-wise attention layers over each edge's
non-backtracking incoming set (queries always come from the initial edge
state, and that state also joins every key/value group, so each initial
edge message enters a given trajectory exactly once), an output block
blending embedded atom features with their incoming edge states, an
attention readout over the atom sequence with a learned leading token
whose final state is the molecular fingerprint, and a 2-layer head.

Parameters are immutable during a forward/backward pass; updates require
exclusive access between passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .molgraph import (
    DirectedEdgeGraph,
    Molecule,
    N_ATOM_FEATURES,
    center_molecule,
    graph_from_molecule,
)

EDGE_INPUT_DIM = 17  # 4 bond bits + 13 source-atom features
SQRT_HALF = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    n_heads: int = 8
    n_interaction: int = 5
    n_transformer: int = 6
    ffn_multiplier: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_heads", "n_interaction", "n_transformer", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def d_out(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_interaction": self.n_interaction,
            "n_transformer": self.n_transformer,
            "ffn_multiplier": self.ffn_multiplier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _layer_norm_shapes(table: dict, prefix: str, dim: int) -> None:
    table[f"{prefix}.gain"] = (dim,)
    table[f"{prefix}.bias"] = (dim,)


def _attention_block_shapes(table: dict, prefix: str, cfg: ModelConfig) -> None:
    d, do = cfg.d_model, cfg.d_out
    hidden = cfg.ffn_multiplier * d
    for h in range(cfg.n_heads):
        table[f"{prefix}.head{h}.w_q"] = (do, d)
        table[f"{prefix}.head{h}.w_k"] = (do, d)
        table[f"{prefix}.head{h}.w_v"] = (do, d)
    table[f"{prefix}.w_o"] = (d, d)
    _layer_norm_shapes(table, f"{prefix}.ln_attn", d)
    table[f"{prefix}.ffn.w_1"] = (hidden, d)
    table[f"{prefix}.ffn.b_1"] = (hidden,)
    table[f"{prefix}.ffn.w_2"] = (d, hidden)
    _layer_norm_shapes(table, f"{prefix}.ln_ffn", d)


class ModelParams:
    """All named weight tensors, in a fixed creation order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, T.Tensor]):
        self.config = config
        self.tensors = tensors

    @staticmethod
    def shape_table(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, do = cfg.d_model, cfg.d_out
        table: dict[str, tuple[int, ...]] = {}
        # initial edge embedding: chemical branch then position branch
        table["edge.w_e1"] = (do, EDGE_INPUT_DIM)
        _layer_norm_shapes(table, "edge.ln_e1", do)
        table["edge.w_e2"] = (d, do)
        _layer_norm_shapes(table, "edge.ln_e2", d)
        table["edge.w_p1"] = (do, 3)
        _layer_norm_shapes(table, "edge.ln_p1", do)
        table["edge.w_p2"] = (do, do)
        _layer_norm_shapes(table, "edge.ln_p2", do)
        table["edge.w_p3"] = (d, do)
        _layer_norm_shapes(table, "edge.ln_p3", d)
        for layer in range(cfg.n_interaction):
            _attention_block_shapes(table, f"interaction{layer}", cfg)
        # atom embedding feeding the output block
        table["output.atom.w_a1"] = (do, N_ATOM_FEATURES)
        _layer_norm_shapes(table, "output.atom.ln_a1", do)
        table["output.atom.w_a2"] = (d, do)
        _layer_norm_shapes(table, "output.atom.ln_a2", d)
        _attention_block_shapes(table, "output", cfg)
        # readout: position embedding, leading token, transformer stack
        table["readout.pos.w_p1"] = (do, 3)
        _layer_norm_shapes(table, "readout.pos.ln_p1", do)
        table["readout.pos.w_p2"] = (do, do)
        _layer_norm_shapes(table, "readout.pos.ln_p2", do)
        table["readout.pos.w_p3"] = (d, do)
        _layer_norm_shapes(table, "readout.pos.ln_p3", d)
        table["readout.cls"] = (d,)
        for layer in range(cfg.n_transformer):
            _attention_block_shapes(table, f"transformer{layer}", cfg)
        table["head.w_1"] = (d, d)
        table["head.b_1"] = (d,)
        table["head.w_2"] = (1, d)
        table["head.b_2"] = (1,)
        return table

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Variance-scaled uniform for matrices, ones/zeros for norm gains and
        biases, and a unit-norm random vector for the leading readout token."""
        rng = np.random.default_rng(seed)
        tensors: dict[str, T.Tensor] = {}
        for name, shape in cls.shape_table(config).items():
            if name == "readout.cls":
                vec = rng.standard_normal(shape[0])
                values = vec / np.linalg.norm(vec)
            elif name.endswith(".gain"):
                values = np.ones(shape)
            elif len(shape) == 1:
                values = np.zeros(shape)
            else:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                values = rng.uniform(-bound, bound, size=shape)
            tensors[name] = T.Tensor(values, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def parameters(self) -> list[T.Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def n_scalars(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.tensors):
            raise ValueError("parameter name sets differ")
        for name, arr in values.items():
            if arr.shape != self.tensors[name].values.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.tensors[name].values.shape}")
            self.tensors[name].values = np.array(arr, dtype=np.float64)


class GraphBatch:
    """Numeric view of one or more molecules' graphs merged into a disjoint
    union, with flattened incoming-edge index arrays for segment attention."""

    def __init__(self, graphs: list[DirectedEdgeGraph]):
        if not graphs:
            raise ValueError("need at least one graph")
        self.graphs = graphs
        atom_mats, pos_mats, edge_in, edge_vec = [], [], [], []
        inc_src: list[int] = []
        inc_dst: list[int] = []
        atom_in_src: list[int] = []
        atom_in_dst: list[int] = []
        self.mol_atom_ranges: list[tuple[int, int]] = []
        atom_base = 0
        edge_base = 0
        for g in graphs:
            if g.source_features.shape[1] != N_ATOM_FEATURES:
                raise ValueError(f"atom feature dim {g.source_features.shape[1]} != {N_ATOM_FEATURES}")
            if g.edge_vectors.shape[1] != 3:
                raise ValueError(f"edge vector dim {g.edge_vectors.shape[1]} != 3")
            atom_mats.append(g.atom_features)
            pos_mats.append(g.positions)
            edge_in.append(np.hstack([g.edge_features, g.source_features])
                           if g.n_edges else np.zeros((0, EDGE_INPUT_DIM)))
            edge_vec.append(g.edge_vectors)
            for e, inc in enumerate(g.incoming):
                for f in inc:
                    inc_src.append(edge_base + f)
                    inc_dst.append(edge_base + e)
            for e in range(g.n_edges):
                atom_in_src.append(edge_base + e)
                atom_in_dst.append(atom_base + int(g.targets[e]))
            self.mol_atom_ranges.append((atom_base, g.n_atoms))
            atom_base += g.n_atoms
            edge_base += g.n_edges
        self.n_atoms = atom_base
        self.n_edges = edge_base
        self.atom_features = np.vstack(atom_mats)
        self.positions = np.vstack(pos_mats)
        self.edge_inputs = np.vstack(edge_in)
        self.edge_vectors = np.vstack(edge_vec)
        self.inc_src = np.asarray(inc_src, dtype=np.intp)
        self.inc_dst = np.asarray(inc_dst, dtype=np.intp)
        self.atom_in_src = np.asarray(atom_in_src, dtype=np.intp)
        self.atom_in_dst = np.asarray(atom_in_dst, dtype=np.intp)


def _ln(x: T.Tensor, params: ModelParams, prefix: str) -> T.Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _position_mlp(pos: T.Tensor, params: ModelParams, prefix: str) -> T.Tensor:
    t = T.gelu(_ln(T.linear(pos, params[f"{prefix}.w_p1"]), params, f"{prefix}.ln_p1"))
    t = T.gelu(_ln(T.linear(t, params[f"{prefix}.w_p2"]), params, f"{prefix}.ln_p2"))
    return _ln(T.linear(t, params[f"{prefix}.w_p3"]), params, f"{prefix}.ln_p3")


def init_edge_hidden(batch: GraphBatch, params: ModelParams) -> T.Tensor:
    """Initial per-edge state: chemical embedding plus position embedding,
    scaled by 1/sqrt(2) so the sum keeps roughly unit variance."""
    if batch.edge_inputs.shape[1] != EDGE_INPUT_DIM:
        raise ValueError(f"edge input dim {batch.edge_inputs.shape[1]} != {EDGE_INPUT_DIM}")
    feats = T.Tensor(batch.edge_inputs)
    chem = T.gelu(_ln(T.linear(feats, params["edge.w_e1"]), params, "edge.ln_e1"))
    chem = _ln(T.linear(chem, params["edge.w_e2"]), params, "edge.ln_e2")
    pos = _position_mlp(T.Tensor(batch.edge_vectors), params, "edge")
    return T.scalar_multiply(T.add(chem, pos), SQRT_HALF)


def _ffn(x: T.Tensor, params: ModelParams, prefix: str, dropout=None) -> T.Tensor:
    hidden = T.gelu(T.add(T.linear(x, params[f"{prefix}.ffn.w_1"]), params[f"{prefix}.ffn.b_1"]))
    if dropout is not None:
        hidden = dropout(hidden)
    return _ln(T.add(x, T.linear(hidden, params[f"{prefix}.ffn.w_2"])), params, f"{prefix}.ln_ffn")


def _grouped_attention_block(
    query_src: T.Tensor,
    kv_rows: T.Tensor,
    segments: np.ndarray,
    params: ModelParams,
    prefix: str,
    cfg: ModelConfig,
    dropout=None,
) -> T.Tensor:
    heads = []
    for h in range(cfg.n_heads):
        q = T.linear(query_src, params[f"{prefix}.head{h}.w_q"])
        k = T.linear(kv_rows, params[f"{prefix}.head{h}.w_k"])
        v = T.linear(kv_rows, params[f"{prefix}.head{h}.w_v"])
        heads.append(T.segment_attend(q, k, v, segments))
    mixed = T.linear(T.concat(heads, axis=-1), params[f"{prefix}.w_o"])
    if dropout is not None:
        mixed = dropout(mixed)
    mixed = _ln(mixed, params, f"{prefix}.ln_attn")
    return _ffn(mixed, params, prefix, dropout)


def interaction_layer(
    h_prev: T.Tensor,
    h0: T.Tensor,
    batch: GraphBatch,
    params: ModelParams,
    layer: int,
    dropout=None,
) -> T.Tensor:
    """One edge-wise attention layer. Queries come from the initial edge
    state; each edge attends over its non-backtracking incoming edges'
    previous-layer states plus its own initial state, all mapped by the
    same key/value matrices."""
    cfg = params.config
    kv_rows = T.concat([T.gather_rows(h_prev, batch.inc_src), h0], axis=0)
    segments = np.concatenate([batch.inc_dst, np.arange(batch.n_edges, dtype=np.intp)])
    return _grouped_attention_block(
        h0, kv_rows, segments, params, f"interaction{layer}", cfg, dropout
    )


def embed_atoms(batch: GraphBatch, params: ModelParams) -> T.Tensor:
    """Map raw atom features to model width (queries and the self member of
    the output block's key/value groups)."""
    x = T.Tensor(batch.atom_features)
    t = T.gelu(_ln(T.linear(x, params["output.atom.w_a1"]), params, "output.atom.ln_a1"))
    return _ln(T.linear(t, params["output.atom.w_a2"]), params, "output.atom.ln_a2")


def output_block(
    h_last: T.Tensor,
    batch: GraphBatch,
    params: ModelParams,
    dropout=None,
) -> T.Tensor:
    """Blend each atom's embedded features with its incoming final-layer edge
    states; one shared key map and one shared value map cover both."""
    cfg = params.config
    h_init = embed_atoms(batch, params)
    kv_rows = T.concat([T.gather_rows(h_last, batch.atom_in_src), h_init], axis=0)
    segments = np.concatenate([batch.atom_in_dst, np.arange(batch.n_atoms, dtype=np.intp)])
    return _grouped_attention_block(h_init, kv_rows, segments, params, "output", cfg, dropout)


def _dense_attention_block(
    tokens: T.Tensor,
    key_mask: np.ndarray,
    params: ModelParams,
    prefix: str,
    cfg: ModelConfig,
    dropout=None,
) -> T.Tensor:
    scale = 1.0 / math.sqrt(cfg.d_out)
    heads = []
    for h in range(cfg.n_heads):
        q = T.linear(tokens, params[f"{prefix}.head{h}.w_q"])
        k = T.linear(tokens, params[f"{prefix}.head{h}.w_k"])
        v = T.linear(tokens, params[f"{prefix}.head{h}.w_v"])
        scores = T.scalar_multiply(T.linear(q, k), scale)
        probs = T.softmax(scores, mask=key_mask)
        heads.append(T.matmul(probs, v))
    mixed = T.linear(T.concat(heads, axis=-1), params[f"{prefix}.w_o"])
    if dropout is not None:
        mixed = dropout(mixed)
    mixed = _ln(mixed, params, f"{prefix}.ln_attn")
    return _ffn(mixed, params, prefix, dropout)


def readout(
    h_atoms: T.Tensor,
    positions: np.ndarray,
    mask: np.ndarray,
    params: ModelParams,
    dropout=None,
) -> T.Tensor:
    """Aggregate a (possibly padded) atom sequence into a fingerprint.

    ``mask`` is True for real atoms. A learned token is prepended, the
    stack of self-attention layers runs with padding excluded from every
    softmax, and the final state of the leading token is returned (1, d).
    """
    cfg = params.config
    mask = np.asarray(mask, dtype=bool)
    if h_atoms.values.shape[0] != mask.shape[0]:
        raise ValueError(f"mask length {mask.shape[0]} != sequence length {h_atoms.values.shape[0]}")
    if not mask.any():
        raise ValueError("readout needs at least one real atom")
    pos_embed = _position_mlp(T.Tensor(positions), params, "readout.pos")
    h_input = T.scalar_multiply(T.add(h_atoms, pos_embed), SQRT_HALF)
    cls_row = T.reshape(params["readout.cls"], (1, cfg.d_model))
    tokens = T.concat([cls_row, h_input], axis=0)
    key_mask = np.concatenate([[True], mask])
    for layer in range(cfg.n_transformer):
        tokens = _dense_attention_block(tokens, key_mask, params, f"transformer{layer}", cfg, dropout)
    return T.gather_rows(tokens, [0])


def _head(fingerprint: T.Tensor, params: ModelParams) -> T.Tensor:
    hidden = T.gelu(T.add(T.linear(fingerprint, params["head.w_1"]), params["head.b_1"]))
    return T.add(T.linear(hidden, params["head.w_2"]), params["head.b_2"])


def make_dropout(p: float, rng: np.random.Generator):
    """Inverted-dropout closure for training; None disables it."""
    if p <= 0.0:
        return None
    keep = 1.0 - p

    def apply(x: T.Tensor) -> T.Tensor:
        mask = (rng.random(x.values.shape) < keep) / keep
        return T.multiply(x, T.Tensor(mask))

    return apply


def forward_graphs(
    graphs: list[DirectedEdgeGraph],
    params: ModelParams,
    padded_len: int | None = None,
    dropout=None,
) -> tuple[T.Tensor, T.Tensor]:
    """Run the full pipeline over already-centered graphs.

    Returns (predictions (B, 1), fingerprints (B, d_model)). Molecules are
    merged into one disjoint union for the edge and atom phases; the
    readout runs per molecule, padded to ``padded_len`` when given.
    """
    cfg = params.config
    batch = GraphBatch(graphs)
    h0 = init_edge_hidden(batch, params)
    h = h0
    for layer in range(cfg.n_interaction):
        h = interaction_layer(h, h0, batch, params, layer, dropout)
    h_atoms = output_block(h, batch, params, dropout)

    preds, fps = [], []
    for start, count in batch.mol_atom_ranges:
        length = max(padded_len or count, count)
        rows = T.gather_rows(h_atoms, np.arange(start, start + count, dtype=np.intp))
        positions = batch.positions[start:start + count]
        if length > count:
            pad = length - count
            rows = T.concat([rows, T.Tensor(np.zeros((pad, cfg.d_model)))], axis=0)
            positions = np.vstack([positions, np.zeros((pad, 3))])
        mask = np.arange(length) < count
        fp = readout(rows, positions, mask, params, dropout)
        fps.append(fp)
        preds.append(_head(fp, params))
    return T.concat(preds, axis=0), T.concat(fps, axis=0)


def _prepared_graphs(molecules: list[Molecule]) -> list[DirectedEdgeGraph]:
    return [graph_from_molecule(center_molecule(m)) for m in molecules]


def predict(molecules: list[Molecule], params: ModelParams) -> np.ndarray:
    """Predictions for raw molecules; centering happens internally."""
    preds, _ = forward_graphs(_prepared_graphs(molecules), params)
    return preds.values.reshape(-1).copy()


def fingerprints(molecules: list[Molecule], params: ModelParams) -> np.ndarray:
    """(B, d_model) fingerprint matrix for raw molecules."""
    _, fps = forward_graphs(_prepared_graphs(molecules), params)
    return fps.values.copy()
