"""Command-line surface: convert, encode, decode, validate, pretrain,
finetune-dock, design, dock, eval.

Configuration comes from JSON files with flag overrides (flags win);
unknown config keys are rejected. Exit codes: 0 success, 1 validation or
configuration error, 2 runtime failure.
"""

import argparse
import json
import sys
from dataclasses import fields

import numpy as np

from . import chem, data, design, evaluate, seqcodec, train
from .model import (Model, ModelConfig, ModelError, generate_coordinates,
                    init_model, load_checkpoint)
from .seqcodec import ParallelSequence


class ConfigError(ValueError):
    pass


def _dataclass_from(cls, obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _load_config(path, required, optional=(), section=None):
    """Load a JSON config. A file may either be a single-command config or
    bundle several commands under sections named after them."""
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if section and section in cfg:
        cfg = cfg[section]
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
    allowed = set(required) | set(optional)
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    missing = sorted(set(required) - set(cfg))
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")
    return cfg


def _apply_seed(cfg_obj, seed):
    if seed is not None:
        cfg_obj.seed = seed
    return cfg_obj


# ---------------------------------------------------------------- convert --


def cmd_convert(args):
    records = []
    errors = 0
    filtered = 0
    if args.records:
        for path in args.records:
            try:
                records.extend(data.read_records(path))
            except data.DataError as e:
                errors += 1
                print(f"error: {e}", file=sys.stderr)
    if args.pocket_pdb:
        try:
            atoms, coords = data.read_pocket_pdb(args.pocket_pdb)
            smiles = args.ligand_smiles or ""
            lig_coords = np.zeros((0, 3))
            if args.ligand_pose:
                _, lig_coords = data.read_pose(args.ligand_pose)
            if smiles:
                n = chem.ligand_atom_count(smiles)
                if n != len(lig_coords):
                    raise data.DataError(
                        f"ligand has {n} atoms but pose file has {len(lig_coords)}"
                    )
            records.append(chem.ComplexRecord(atoms, coords, smiles, lig_coords))
        except (data.DataError, chem.ChemError) as e:
            errors += 1
            print(f"error: {args.pocket_pdb}: {e}", file=sys.stderr)

    kept = []
    for r in records:
        if chem.coordinate_range_ok(r, args.range_limit):
            kept.append(r)
        else:
            filtered += 1
    data.write_records(args.out, kept)
    print(f"wrote {len(kept)} records to {args.out} "
          f"({filtered} filtered by {args.range_limit:g} A range, {errors} input errors)")
    if not kept:
        print("warning: no records written", file=sys.stderr)
    return 0


# ----------------------------------------------------------- encode/decode --


def cmd_encode(args):
    records = data.read_records(args.records)
    if args.build_vocab:
        vocab = seqcodec.build_vocabulary(records)
        vocab.save(args.vocab)
        print(f"wrote vocabulary ({vocab.size} tokens) to {args.vocab}")
    else:
        vocab = seqcodec.Vocabulary.load(args.vocab)
    seqs = []
    for i, r in enumerate(records):
        seq = seqcodec.encode_complex(r, args.q, max_len=args.max_len)
        vocab.encode(seq.tokens)  # closed-vocabulary check
        problems = seqcodec.validate(seq, vocab)
        if problems:
            d = problems[0]
            raise seqcodec.CodecError(f"record {i}: [{d.rule}] {d.message}")
        seqs.append(seq)
    seqcodec.write_sequences(args.out, seqs)
    print(f"encoded {len(seqs)} sequences to {args.out}")
    return 0


def _print_diagnostics(seqs, vocab):
    n_bad = 0
    for i, seq in enumerate(seqs):
        for d in seqcodec.validate(seq, vocab):
            print(f"sequence {i}: [{d.rule}] {d.message} (position {d.position})")
            n_bad += 1
    return n_bad


def cmd_decode(args):
    vocab = seqcodec.Vocabulary.load(args.vocab)
    seqs = seqcodec.read_sequences(args.seqs)
    if args.validate_only:
        n_bad = _print_diagnostics(seqs, vocab)
        print(f"{len(seqs)} sequences, {n_bad} diagnostics")
        return 1 if n_bad else 0
    records = [seqcodec.decode(s, vocab, args.q) for s in seqs]
    data.write_records(args.out, records)
    print(f"decoded {len(records)} records to {args.out}")
    return 0


def cmd_validate(args):
    vocab = seqcodec.Vocabulary.load(args.vocab)
    seqs = seqcodec.read_sequences(args.seqs)
    n_bad = _print_diagnostics(seqs, vocab)
    print(f"{len(seqs)} sequences, {n_bad} diagnostics")
    return 1 if n_bad else 0


# ----------------------------------------------------------------- training --


def cmd_pretrain(args):
    cfg = _load_config(args.config, required=("model", "train", "sequences", "vocab"),
                       optional=("out_dir",), section="pretrain")
    vocab = seqcodec.Vocabulary.load(cfg["vocab"])
    sequences = seqcodec.read_sequences(cfg["sequences"])
    model_cfg = dict(cfg["model"])
    model_cfg.setdefault("vocab_size", vocab.size)
    mc = _dataclass_from(ModelConfig, model_cfg, "model")
    tc = _apply_seed(_dataclass_from(train.TrainConfig, cfg["train"], "train"), args.seed)
    out_dir = args.out_dir or cfg.get("out_dir")
    start_step = 0
    opt_state = None
    if args.resume:
        model, meta, opt_state = load_checkpoint(args.resume, vocab.sha256())
        start_step = meta["extra"].get("step", 0)
    else:
        model = init_model(mc, seed=tc.seed)
    report = train.train_pretrain(model, sequences, vocab, tc, out_dir=out_dir,
                                  start_step=start_step, opt_state=opt_state)
    last = report.metrics[-1] if report.metrics else {}
    print(f"pretrain done: {report.steps} steps, "
          f"final total loss {last.get('total', float('nan')):.6f}")
    for p in report.checkpoints:
        print(f"checkpoint: {p}")
    return 0


def cmd_finetune_dock(args):
    cfg = _load_config(args.config,
                       required=("init_checkpoint", "records", "vocab", "train"),
                       optional=("out_dir", "q", "max_len", "augment"),
                       section="finetune-dock")
    vocab = seqcodec.Vocabulary.load(cfg["vocab"])
    records = data.read_records(cfg["records"])
    tc = _apply_seed(_dataclass_from(train.TrainConfig, cfg["train"], "train"), args.seed)
    augment = cfg.get("augment", {})
    unknown = sorted(set(augment) - {"smiles", "rotation"})
    if unknown:
        raise ConfigError(f"augment: unknown keys {unknown}")
    start_step = 0
    opt_state = None
    if args.resume:
        model, meta, opt_state = load_checkpoint(args.resume, vocab.sha256())
        start_step = meta["extra"].get("step", 0)
    else:
        model, _, _ = load_checkpoint(cfg["init_checkpoint"], vocab.sha256())
    report = train.train_docking(
        model, records, vocab, tc,
        q=cfg.get("q", 5.0),
        augment_smiles=augment.get("smiles", True),
        augment_rotation=augment.get("rotation", True),
        max_len=cfg.get("max_len", 2048),
        out_dir=args.out_dir or cfg.get("out_dir"),
        start_step=start_step, opt_state=opt_state,
    )
    last = report.metrics[-1] if report.metrics else {}
    print(f"docking fine-tune done: {report.steps} steps, "
          f"final mse {last.get('mse', float('nan')):.6f}, "
          f"{report.skipped_augment} samples skipped by augmentation")
    for p in report.checkpoints:
        print(f"checkpoint: {p}")
    return 0


# ------------------------------------------------------------------ design --


def _load_pocket(path):
    if path.endswith(".pdb"):
        atoms, coords = data.read_pocket_pdb(path)
        return chem.ComplexRecord(atoms, coords, "", np.zeros((0, 3)))
    records = data.read_records(path)
    if not records:
        raise data.DataError(f"{path}: no records")
    return records[0]


def cmd_design(args):
    cfg = _load_config(args.config,
                       required=("agent_checkpoint", "docking_checkpoint",
                                 "pocket", "vocab", "rl"),
                       optional=("out_dir", "q", "oracle"), section="design")
    vocab = seqcodec.Vocabulary.load(cfg["vocab"])
    rl = _apply_seed(_dataclass_from(design.RLConfig, cfg["rl"], "rl"), args.seed)
    if args.mock_oracle:
        oracle = design.MockOracle()
    elif "oracle" in cfg and cfg["oracle"].get("command"):
        oracle = design.CommandOracle(cfg["oracle"]["command"])
    else:
        raise ConfigError("no oracle: set oracle.command or pass --mock-oracle")
    agent, _, _ = load_checkpoint(cfg["agent_checkpoint"], vocab.sha256())
    docking, _, _ = load_checkpoint(cfg["docking_checkpoint"], vocab.sha256())
    pocket = _load_pocket(cfg["pocket"])
    out_dir = args.out_dir or cfg.get("out_dir")
    report = design.rl_run(agent, docking, pocket, oracle, vocab, rl,
                           q=cfg.get("q", 5.0), out_dir=out_dir)
    first = report.metrics[0]["mean_reward"] if report.metrics else float("nan")
    last = report.metrics[-1]["mean_reward"] if report.metrics else float("nan")
    print(f"design done: {rl.steps} steps, mean reward {first:.4f} -> {last:.4f}, "
          f"{report.archive_size} unique molecules, {report.invalid_total} invalid samples")
    if report.top:
        rep = evaluate.design_report(report.top)
        print(rep.to_text())
    return 0


def cmd_dock(args):
    vocab = seqcodec.Vocabulary.load(args.vocab)
    model, _, _ = load_checkpoint(args.checkpoint, vocab.sha256())
    pocket = _load_pocket(args.pocket)
    graph = chem.parse_smiles(args.smiles)
    if not graph.atoms:
        raise chem.ChemError("ligand SMILES has no atoms")
    prefix, center = design.pocket_prefix(pocket, args.q)
    ts = seqcodec.tokenize_smiles(args.smiles)
    lig = ParallelSequence(["[LS]"] + ts.tokens + ["[LE]"], np.ones(len(ts.tokens) + 2))
    seq = generate_coordinates(model, vocab, prefix + lig, ts.atom_count)
    marks = seq.segments()
    s, e = marks.ligand_coords
    coords = seq.numbers[s:e].reshape(-1, 3) * args.q + center
    elements = [a.element for a in graph.atoms]
    data.write_pose(args.out, elements, coords)
    print(f"wrote pose ({len(coords)} atoms) to {args.out}")
    if args.reference:
        _, ref = data.read_pose(args.reference)
        print(f"rmsd: {chem.rmsd(coords, ref):.6f}")
    return 0


# -------------------------------------------------------------------- eval --


def cmd_eval(args):
    if not args.rmsd_csv and not args.scores:
        raise ConfigError("eval needs --rmsd-csv and/or --scores")
    reports = {}
    if args.rmsd_csv:
        rmsds = evaluate.read_rmsd_csv(args.rmsd_csv)
        if not rmsds:
            raise evaluate.EvaluateError(f"{args.rmsd_csv}: no RMSD values")
        rep = evaluate.docking_report(rmsds)
        print(rep.to_text())
        reports["docking"] = json.loads(rep.to_json())
    if args.scores:
        with open(args.scores) as f:
            lines = f.read().splitlines()
        lines = [ln for ln in lines if ln.strip()]
        scores = design.parse_response_rows(lines, len(lines))
        rep = evaluate.design_report(scores)
        print(rep.to_text())
        reports["design"] = json.loads(rep.to_json())
    if args.out_json:
        with open(args.out_json, "w") as f:
            json.dump(reports, f, sort_keys=True, indent=1)
        print(f"wrote {args.out_json}")
    return 0


# ------------------------------------------------------------------ parser --


def build_parser():
    p = argparse.ArgumentParser(prog="pockformer",
                                description="pocket-ligand docking and design pipeline")
    p.add_argument("--seed", type=int, default=None,
                   help="override the seed in any loaded config")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="build a dataset JSONL from PDB/pose/JSONL inputs")
    c.add_argument("--records", nargs="*", default=[], help="existing dataset JSONL files")
    c.add_argument("--pocket-pdb")
    c.add_argument("--ligand-smiles")
    c.add_argument("--ligand-pose", help="'element x y z' lines, SMILES atom order")
    c.add_argument("--range-limit", type=float, default=40.0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_convert)

    c = sub.add_parser("encode", help="encode dataset records to parallel sequences")
    c.add_argument("--records", required=True)
    c.add_argument("--vocab", required=True)
    c.add_argument("--build-vocab", action="store_true")
    c.add_argument("--q", type=float, default=5.0)
    c.add_argument("--max-len", type=int, default=2048)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_encode)

    c = sub.add_parser("decode", help="decode parallel sequences back to records")
    c.add_argument("--seqs", required=True)
    c.add_argument("--vocab", required=True)
    c.add_argument("--q", type=float, default=5.0)
    c.add_argument("--out")
    c.add_argument("--validate-only", action="store_true")
    c.set_defaults(fn=cmd_decode)

    c = sub.add_parser("validate", help="print diagnostics for sequence files")
    c.add_argument("--seqs", required=True)
    c.add_argument("--vocab", required=True)
    c.set_defaults(fn=cmd_validate)

    c = sub.add_parser("pretrain", help="self-supervised pre-training")
    c.add_argument("--config", required=True)
    c.add_argument("--out-dir")
    c.add_argument("--resume", help="checkpoint to resume from")
    c.set_defaults(fn=cmd_pretrain)

    c = sub.add_parser("finetune-dock", help="supervised docking fine-tuning")
    c.add_argument("--config", required=True)
    c.add_argument("--out-dir")
    c.add_argument("--resume")
    c.set_defaults(fn=cmd_finetune_dock)

    c = sub.add_parser("design", help="RL fine-tuning for pocket-aware design")
    c.add_argument("--config", required=True)
    c.add_argument("--out-dir")
    c.add_argument("--mock-oracle", action="store_true")
    c.set_defaults(fn=cmd_design)

    c = sub.add_parser("dock", help="predict a ligand pose for a pocket")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--vocab", required=True)
    c.add_argument("--pocket", required=True, help=".pdb pocket or dataset JSONL")
    c.add_argument("--smiles", required=True)
    c.add_argument("--q", type=float, default=5.0)
    c.add_argument("--out", required=True)
    c.add_argument("--reference", help="pose file to compute RMSD against")
    c.set_defaults(fn=cmd_dock)

    c = sub.add_parser("eval", help="docking / design metric reports")
    c.add_argument("--rmsd-csv")
    c.add_argument("--scores", help="TSV rows: index vina_dock qed sa [vina_score]")
    c.add_argument("--out-json")
    c.set_defaults(fn=cmd_eval)
    return p


VALIDATION_ERRORS = (ConfigError, seqcodec.CodecError, chem.ChemError,
                     data.DataError, train.TrainError, ModelError,
                     design.DesignError, evaluate.EvaluateError,
                     FileNotFoundError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (train.TrainingDiverged, design.OracleProtocolError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
