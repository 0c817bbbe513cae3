"""Command-line surface: train, eval, predict, fingerprint, gradcheck, lsm.

Runs are driven by a RunConfig assembled from defaults, an optional
key=value config file, and command-line overrides (in that order). The
effective configuration is echoed into the run directory so any run can
be reproduced from its echo file alone.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import Checkpoint
from .model import ModelConfig
from .molgraph import Molecule, QM9Record, parse_qm9_xyz, parse_sdf
from .preprocess import (
    PREDICTION_TARGETS,
    counts_matrix,
    read_atomref_csv,
    split_dataset,
    split_from_csv,
    split_to_csv,
    target_column,
)
from .train import TrainConfig, evaluate, prepare_data, train


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    data: str = ""
    target: str = "mu"
    seed: int = 1
    out: str = "run"
    ckpt: str = ""
    input: str = ""
    augment: bool = True
    d_model: int = 512
    heads: int = 8
    interaction_blocks: int = 5
    transformer_blocks: int = 6
    ffn_multiplier: int = 2
    epochs: int = 600
    batch: int = 64
    lr0: float = 1e-5
    decay_every: int = 150
    decay: float = 0.5
    huber_delta: float = 1.0
    n_seeds: int = 5
    dropout: float = 0.0
    warmup_steps: int = 0
    patience: int = -1          # -1 disables early stopping
    atomref: str = ""
    split: str = ""             # optional split-manifest CSV to reuse

    def echo(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.heads,
            n_interaction=self.interaction_blocks,
            n_transformer=self.transformer_blocks,
            ffn_multiplier=self.ffn_multiplier,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            target=self.target,
            epochs=self.epochs,
            lr0=self.lr0,
            decay_every=self.decay_every,
            decay=self.decay,
            batch=self.batch,
            huber_delta=self.huber_delta,
            seeds=tuple(self.seed + k for k in range(self.n_seeds)),
            augment=self.augment,
            patience=None if self.patience < 0 else self.patience,
            dropout=self.dropout,
            warmup_steps=self.warmup_steps,
        )


def _coerce(name: str, text: str, kind: type):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise CliError(f"config key {name}: cannot read boolean from {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise CliError(f"config key {name}: cannot read {kind.__name__} from {text!r}")


def parse_config_file(text: str) -> dict:
    """Plain key=value lines; '#' starts a comment; unknown keys rejected."""
    types = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"str": str, "int": int, "float": float, "bool": bool}
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise CliError(f"config line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, value, kinds[str(types[key])])
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        for key, value in parse_config_file(path.read_text()).items():
            setattr(cfg, key, value)
    overrides = {
        "data": "data", "target": "target", "seed": "seed", "out": "out",
        "ckpt": "ckpt", "input": "input", "augment": "augment",
        "d_model": "d_model", "heads": "heads",
        "interaction_blocks": "interaction_blocks",
        "transformer_blocks": "transformer_blocks",
        "epochs": "epochs", "batch": "batch", "lr0": "lr0",
        "n_seeds": "n_seeds", "atomref": "atomref", "split": "split",
    }
    for arg_name, key in overrides.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------

def _check_target(name: str) -> None:
    if name not in PREDICTION_TARGETS:
        raise CliError(
            f"unknown target {name!r}; valid names: {', '.join(PREDICTION_TARGETS)}"
        )


def load_records(data_dir: str) -> list[QM9Record]:
    path = Path(data_dir)
    if not path.is_dir():
        raise CliError(f"data directory not found: {data_dir!r}")
    files = sorted(path.glob("*.xyz"))
    if not files:
        raise CliError(f"no .xyz records under {data_dir!r}")
    records = []
    for f in files:
        try:
            records.append(parse_qm9_xyz(f.read_bytes()))
        except ValueError as exc:
            raise CliError(f"{f}: {exc}")
    return records


def load_molecules(input_path: str) -> list[Molecule]:
    path = Path(input_path)
    if path.is_dir():
        files = sorted(list(path.glob("*.xyz")) + list(path.glob("*.sdf")))
        if not files:
            raise CliError(f"no .xyz or .sdf inputs under {input_path!r}")
    elif path.is_file():
        files = [path]
    else:
        raise CliError(f"input not found: {input_path!r}")
    molecules: list[Molecule] = []
    for f in files:
        try:
            if f.suffix == ".sdf" or f.suffix == ".mol":
                molecules.extend(parse_sdf(f.read_bytes()))
            else:
                molecules.append(parse_qm9_xyz(f.read_bytes()).molecule)
        except ValueError as exc:
            raise CliError(f"{f}: {exc}")
    if not molecules:
        raise CliError(f"no molecules parsed from {input_path!r}")
    return molecules


def _load_atomref(cfg: RunConfig):
    if not cfg.atomref:
        return None
    path = Path(cfg.atomref)
    if not path.is_file():
        raise CliError(f"atom reference table not found: {cfg.atomref!r}")
    return read_atomref_csv(path.read_text())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _check_target(cfg.target)
    records = load_records(cfg.data)
    molecules = [r.molecule for r in records]
    y_raw = target_column(records, cfg.target, atomref=_load_atomref(cfg))

    if cfg.split:
        split = split_from_csv(Path(cfg.split).read_text(), seed=cfg.seed)
    else:
        split = split_dataset(len(records), cfg.seed)
    data = prepare_data(molecules, y_raw, cfg.target, split)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo())
    (out / "split.csv").write_text(split_to_csv(split))

    result = train(cfg.model_config(), cfg.train_config(), data)
    result.checkpoint.save(out / "model.dgnn")
    (out / "metrics.csv").write_text(result.metrics.to_csv())
    for seed, metrics in result.seed_metrics.items():
        (out / f"metrics_seed{seed}.csv").write_text(metrics.to_csv())
    print(
        f"trained target={cfg.target} seeds={len(result.seed_metrics)} "
        f"best_seed={result.checkpoint.seed} best_epoch={result.checkpoint.best_epoch} "
        f"val_mae={result.checkpoint.best_val_mae:.6g}"
    )
    print(f"wrote {out / 'model.dgnn'}")
    return 0


def _load_checkpoint(cfg: RunConfig) -> Checkpoint:
    if not cfg.ckpt:
        raise CliError("--ckpt is required")
    path = Path(cfg.ckpt)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {cfg.ckpt!r}")
    return Checkpoint.load(path)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ckpt = _load_checkpoint(cfg)
    if getattr(args, "target", None):
        _check_target(args.target)
        if args.target != ckpt.target:
            raise CliError(f"checkpoint was trained for {ckpt.target!r}, not {args.target!r}")
    records = load_records(cfg.data)
    if not records:
        raise CliError("no records to evaluate")
    molecules = [r.molecule for r in records]
    y_raw = target_column(records, ckpt.target, atomref=_load_atomref(cfg))
    result = evaluate(ckpt, molecules, y_raw, batch=cfg.batch)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_size_mae.csv").write_text(result.per_size_csv())
    print(f"target={ckpt.target} n={len(records)} mae={result.mae:.6g}")
    print(f"wrote {out / 'per_size_mae.csv'}")
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    ckpt = _load_checkpoint(cfg)
    if not cfg.input:
        raise CliError("--input is required")
    molecules = load_molecules(cfg.input)
    params = ckpt.build_params()
    from .train import predict_original_units

    preds = predict_original_units(molecules, params, ckpt.transform, batch=cfg.batch)
    lines = ["id,prediction"]
    for mol, value in zip(molecules, preds):
        lines.append(f"{mol.identifier},{value:.12g}")
    text = "\n".join(lines) + "\n"
    _write_or_print(cfg.out, text, default_name="predictions.csv")
    return 0


def cmd_fingerprint(args) -> int:
    cfg = resolve_config(args)
    ckpt = _load_checkpoint(cfg)
    if not cfg.input:
        raise CliError("--input is required")
    molecules = load_molecules(cfg.input)
    params = ckpt.build_params()
    from .model import fingerprints

    matrix = np.empty((len(molecules), ckpt.model_config.d_model))
    for start in range(0, len(molecules), cfg.batch):
        chunk = molecules[start:start + cfg.batch]
        matrix[start:start + len(chunk)] = fingerprints(chunk, params)
    header = ["id"] + [f"f{i}" for i in range(ckpt.model_config.d_model)]
    lines = [",".join(header)]
    for mol, row in zip(molecules, matrix):
        lines.append(",".join([mol.identifier] + [f"{v:.12g}" for v in row]))
    _write_or_print(cfg.out, "\n".join(lines) + "\n", default_name="fingerprints.csv")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_all(perturb_op=getattr(args, "perturb_op", None))
    failed = False
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status}  {report.name:<18s} worst_rel_err={report.worst_error:.3e} "
              f"(tolerance {report.tolerance:g})")
        failed = failed or not report.passed
    if failed:
        print("gradient check FAILED")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_lsm(args) -> int:
    cfg = resolve_config(args)
    name = cfg.target
    records = load_records(cfg.data)
    molecules = [r.molecule for r in records]
    if name in PREDICTION_TARGETS:
        y = target_column(records, name, atomref=_load_atomref(cfg))
    elif name in ("u0", "u", "h", "g"):
        y = np.array([r.targets[name] for r in records])
    else:
        raise CliError(
            f"unknown target {name!r}; valid: {', '.join(PREDICTION_TARGETS)} "
            "plus raw u0, u, h, g"
        )
    from .preprocess import fit_lsm

    counts = counts_matrix(molecules)
    lsm = fit_lsm(counts, y, target=name)
    residual = lsm.residualize(counts, y)
    raw_std = float(np.std(y))
    res_std = float(np.std(residual))
    ratio = raw_std / res_std if res_std > 0 else float("inf")
    labels = ["H", "C", "N", "O", "F", "bias"]
    for label, value in zip(labels, lsm.theta):
        print(f"theta[{label}] = {value:.8g}")
    print(f"raw_std = {raw_std:.8g}")
    print(f"residual_std = {res_std:.8g}")
    print(f"contraction = {ratio:.8g}x")
    return 0


def _write_or_print(out: str, text: str, default_name: str) -> None:
    if not out:
        sys.stdout.write(text)
        return
    path = Path(out)
    if path.is_dir() or out.endswith("/"):
        path.mkdir(parents=True, exist_ok=True)
        path = path / default_name
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", help="directory of QM9-style .xyz records")
    p.add_argument("--target", help=f"one of: {', '.join(PREDICTION_TARGETS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--input", help="molecule file or directory (.xyz/.sdf)")
    p.add_argument("--atomref", help="atom reference-energy CSV (element,U0,U,H,G)")
    p.add_argument("--split", help="split manifest CSV to reuse")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--interaction-blocks", dest="interaction_blocks", type=int)
    p.add_argument("--transformer-blocks", dest="transformer_blocks", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--n-seeds", dest="n_seeds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgann", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("predict", cmd_predict),
        ("fingerprint", cmd_fingerprint),
        ("lsm", cmd_lsm),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
    g = sub.add_parser("gradcheck")
    g.add_argument("--perturb-op", dest="perturb_op", help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
