"""Losses, optimizer, schedule, and the pre-training / docking loops.

The composite pre-training loss is mean next-token cross-entropy over the
whole token sequence plus alpha times the mean squared error of the
number channel at coordinate targets. Docking fine-tuning restricts the
MSE to the ligand coordinate span and drops the CE term entirely.

Gradient accumulation is exact: target counts are taken over the full
effective batch before the micro-batch loop, so accumulated gradients
equal the single-large-batch gradient up to float addition order.
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import chem, kernels
from .model import backward, forward, save_checkpoint
from .seqcodec import PAD, XYZ, CodecError, encode_complex
from .model import log_softmax


class TrainError(ValueError):
    pass


class OptimizerError(TrainError):
    pass


class NonFiniteLossError(TrainError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}"
        )
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    micro_batch: int = 8
    accum_steps: int = 1
    max_lr: float = 5e-4
    warmup_frac: float = 0.01
    total_steps: int = 1000
    weight_decay: float = 0.1
    alpha: float = 1.0
    seed: int = 0
    schedule: str = "warmup-cosine"
    epochs: int = 0  # when > 0, total_steps is derived from the data size
    grad_clip: float = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise TrainError(f"warmup_frac must be in (0,1), got {self.warmup_frac}")
        if self.alpha < 0:
            raise TrainError(f"alpha must be >= 0, got {self.alpha}")
        if self.micro_batch * self.accum_steps < 1:
            raise TrainError("effective batch must be >= 1")
        if self.schedule not in ("warmup-cosine", "constant"):
            raise TrainError(f"unknown schedule {self.schedule!r}")


@dataclass
class LossBreakdown:
    ce: float
    mse: float
    total: float
    n_token_targets: int
    n_coord_targets: int


def lr_at(step, cfg):
    """Learning rate at an optimizer step: linear warmup to max_lr over
    warmup_frac of total_steps, cosine decay to exactly 0 at total_steps.
    The constant schedule always returns max_lr."""
    if cfg.schedule == "constant":
        return cfg.max_lr
    if not 0 <= step <= cfg.total_steps:
        raise TrainError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup_frac * cfg.total_steps
    if step < warm:
        return cfg.max_lr * step / warm
    if step >= cfg.total_steps:
        return 0.0
    progress = (step - warm) / (cfg.total_steps - warm)
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------- batching --


@dataclass
class EncodedBatch:
    tokens: np.ndarray  # (B,T) int64, PAD-filled
    numbers: np.ndarray  # (B,T) float64, 1.0-filled
    token_target: np.ndarray  # (B,T) bool, True at real next-token targets
    coord_target: np.ndarray  # (B,T) bool, True at number targets in scope


def _coord_positions(seq, scope):
    """Boolean mask over token positions that are coordinate values within
    `scope`: 'all' (pocket + ligand) or 'ligand' (ligand span only)."""
    mask = np.zeros(len(seq), dtype=bool)
    if scope == "all":
        for i, t in enumerate(seq.tokens):
            if t in XYZ:
                mask[i] = True
        return mask
    marks = seq.segments()
    if marks.ligand_coords is None:
        raise TrainError("sequence has no ligand coordinate span")
    s, e = marks.ligand_coords
    mask[s:e] = True
    return mask


def make_batch(seqs, vocab, scope="all"):
    if not seqs:
        raise TrainError("empty batch")
    B = len(seqs)
    T = max(len(s) for s in seqs)
    pad_id = vocab.index[PAD]
    tokens = np.full((B, T), pad_id, dtype=np.int64)
    numbers = np.ones((B, T))
    token_target = np.zeros((B, T), dtype=bool)
    coord_target = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        tokens[b, :n] = vocab.encode(s.tokens)
        numbers[b, :n] = s.numbers
        token_target[b, 1:n] = True
        coord_target[b, :n] = _coord_positions(s, scope)
    coord_target[:, 0] = False  # position 0 has no predecessor to predict it
    return EncodedBatch(tokens, numbers, token_target, coord_target)


def count_targets(seqs, scope):
    n_tok = sum(max(len(s) - 1, 0) for s in seqs)
    n_coord = 0
    for s in seqs:
        m = _coord_positions(s, scope)
        m[0] = False
        n_coord += int(m.sum())
    return n_tok, n_coord


# ----------------------------------------------------------------- losses --


def _loss_sums(out, batch):
    """Sum-form CE and MSE with their output gradients (of the sums).

    Position t is predicted from t-1, so masks index targets and the
    corresponding output rows are shifted one position left.
    """
    logits, nums = out.logits, out.numbers
    B, T, V = logits.shape
    tgt = batch.token_target[:, 1:]
    lp = log_softmax(logits[:, :-1, :])
    gather = np.take_along_axis(lp, batch.tokens[:, 1:, None], axis=2)[..., 0]
    ce_sum = float(-(gather * tgt).sum())
    dlogits = np.zeros_like(logits)
    soft = np.exp(lp)
    onehot_grad = soft.copy()
    np.put_along_axis(
        onehot_grad, batch.tokens[:, 1:, None],
        np.take_along_axis(onehot_grad, batch.tokens[:, 1:, None], axis=2) - 1.0, axis=2,
    )
    dlogits[:, :-1, :] = onehot_grad * tgt[..., None]

    ctgt = batch.coord_target[:, 1:]
    resid = (nums[:, :-1] - batch.numbers[:, 1:]) * ctgt
    mse_sum = float((resid**2).sum())
    dnums = np.zeros_like(nums)
    dnums[:, :-1] = 2.0 * resid
    return ce_sum, mse_sum, dlogits, dnums


def pretrain_loss(output, target, vocab, alpha):
    """Composite loss for one sequence: mean CE over all next-token targets
    plus alpha * mean squared error over coordinate-valued targets."""
    if len(target) < 2:
        raise TrainError("sequence has no token targets")
    batch = make_batch([target], vocab, scope="all")
    out = output if output.logits.ndim == 3 else type(output)(
        output.logits[None], output.numbers[None]
    )
    ce_sum, mse_sum, _, _ = _loss_sums(out, batch)
    n_tok = int(batch.token_target.sum())
    n_coord = int(batch.coord_target.sum())
    ce = ce_sum / n_tok
    mse = mse_sum / n_coord if n_coord else 0.0
    return LossBreakdown(ce, mse, ce + alpha * mse, n_tok, n_coord)


def docking_loss(output, target, vocab):
    """Mean squared error over the ligand coordinate span only; pocket
    coordinates and all token logits contribute nothing."""
    batch = make_batch([target], vocab, scope="ligand")
    n_coord = int(batch.coord_target.sum())
    if n_coord == 0:
        raise TrainError("sequence has no ligand coordinate targets")
    out = output if output.logits.ndim == 3 else type(output)(
        output.logits[None], output.numbers[None]
    )
    _, mse_sum, _, _ = _loss_sums(out, batch)
    return mse_sum / n_coord


def accumulate_gradients(model, seqs, vocab, alpha, mode, micro_batch):
    """Gradient of the effective-batch mean loss, computed in micro-batches.

    Target counts are taken over all of `seqs` up front, so the result is
    identical (to float addition order) whatever micro_batch divides it.
    mode 'pretrain' = CE + alpha*MSE over all coordinates; mode 'docking'
    = MSE over the ligand span only.
    """
    scope = "all" if mode == "pretrain" else "ligand"
    n_tok, n_coord = count_targets(seqs, scope)
    if mode == "pretrain" and n_tok == 0:
        raise TrainError("batch has no token targets")
    if mode == "docking" and n_coord == 0:
        raise TrainError("batch has no ligand coordinate targets")

    grads = None
    ce_total = 0.0
    mse_total = 0.0
    for i in range(0, len(seqs), micro_batch):
        batch = make_batch(seqs[i:i + micro_batch], vocab, scope)
        out, cache = forward(model, batch.tokens, batch.numbers, want_cache=True)
        ce_sum, mse_sum, dlogits, dnums = _loss_sums(out, batch)
        if not (math.isfinite(ce_sum) and math.isfinite(mse_sum)):
            raise NonFiniteLossError(f"non-finite loss (ce={ce_sum}, mse={mse_sum})")
        ce_total += ce_sum
        mse_total += mse_sum
        if mode == "pretrain":
            dlogits /= n_tok
            dnums *= alpha / n_coord if n_coord else 0.0
        else:
            dlogits[:] = 0.0
            dnums /= n_coord
        g = backward(model, cache, dlogits, dnums)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]

    ce = ce_total / n_tok if n_tok else 0.0
    mse = mse_total / n_coord if n_coord else 0.0
    if mode == "pretrain":
        total = ce + alpha * mse
    else:
        total = mse
    stats = {"ce": ce, "mse": mse, "total": total,
             "n_token_targets": n_tok, "n_coord_targets": n_coord}
    return grads, stats


def evaluate_loss(model, seqs, vocab, alpha, mode, micro_batch=8):
    """Forward-only loss with the same denominators as accumulate_gradients
    (used by the finite-difference gradient check)."""
    scope = "all" if mode == "pretrain" else "ligand"
    n_tok, n_coord = count_targets(seqs, scope)
    ce_total = 0.0
    mse_total = 0.0
    for i in range(0, len(seqs), micro_batch):
        batch = make_batch(seqs[i:i + micro_batch], vocab, scope)
        out = forward(model, batch.tokens, batch.numbers)
        ce_sum, mse_sum, _, _ = _loss_sums(out, batch)
        ce_total += ce_sum
        mse_total += mse_sum
    if mode == "pretrain":
        return ce_total / n_tok + (alpha * mse_total / n_coord if n_coord else 0.0)
    return mse_total / n_coord


# -------------------------------------------------------------- optimizer --


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params):
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def optimizer_step(params, grads, state, lr, weight_decay,
                   beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update in place: decoupled weight decay is applied
    multiplicatively before the moment update."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    for name, p in params.items():
        kernels.adamw_update(p, grads[name], state.m[name], state.v[name],
                             state.t, lr, beta1, beta2, eps, weight_decay)
    return state


def global_grad_norm(grads):
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads, max_norm):
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ------------------------------------------------------------ train loops --


@dataclass
class TrainReport:
    steps: int
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    skipped_augment: int = 0


def _write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "ce", "mse", "total"])
        for r in rows:
            w.writerow([r["step"], r["lr"], r["ce"], r["mse"], r["total"]])


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _maybe_checkpoint(out_dir, model, vocab_hash, opt_state, step, cfg, report, final=False):
    if out_dir is None:
        return
    due = final or (cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0)
    if not due:
        return
    name = "final.npz" if final else f"ckpt_{step + 1:06d}.npz"
    path = os.path.join(out_dir, name)
    save_checkpoint(path, model, vocab_hash, opt_state=opt_state,
                    extra={"step": step + 1})
    report.checkpoints.append(path)
    _write_metrics_csv(os.path.join(out_dir, "metrics.csv"), report.metrics)


def _resolve_total_steps(cfg, n_samples):
    effective = cfg.micro_batch * cfg.accum_steps
    steps_per_epoch = math.ceil(n_samples / effective)
    if cfg.epochs:
        return replace(cfg, total_steps=cfg.epochs * steps_per_epoch), steps_per_epoch
    return cfg, steps_per_epoch


def train_pretrain(model, sequences, vocab, cfg, out_dir=None,
                   start_step=0, opt_state=None):
    """Autoregressive pre-training over a mix of pocket-only, ligand-only
    and complex sequences. Micro-batches accumulate into one optimizer
    step per effective batch; periodic checkpoints carry optimizer state
    so runs resume bit-identically under the same seed."""
    if not sequences:
        raise TrainError("no training sequences")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    cfg, steps_per_epoch = _resolve_total_steps(cfg, len(sequences))
    effective = cfg.micro_batch * cfg.accum_steps
    state = opt_state or init_adam(model.params)
    report = TrainReport(steps=cfg.total_steps)
    vocab_hash = vocab.sha256()
    perm = None
    last_ckpt = None
    for step in range(start_step, cfg.total_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if pos == 0 or perm is None:
            perm = _epoch_order(cfg.seed, epoch, len(sequences))
        idx = perm[pos * effective:(pos + 1) * effective]
        seqs = [sequences[i] for i in idx]
        try:
            grads, stats = accumulate_gradients(
                model, seqs, vocab, cfg.alpha, "pretrain", cfg.micro_batch
            )
        except NonFiniteLossError as e:
            raise TrainingDiverged(step, last_ckpt) from e
        clip_gradients(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        optimizer_step(model.params, grads, state, lr, cfg.weight_decay)
        report.metrics.append({"step": step, "lr": lr, **stats})
        _maybe_checkpoint(out_dir, model, vocab_hash, state, step, cfg, report)
        if report.checkpoints:
            last_ckpt = report.checkpoints[-1]
    _maybe_checkpoint(out_dir, model, vocab_hash, state, cfg.total_steps - 1,
                      cfg, report, final=True)
    return report


def augment_record(record, rng, augment_smiles=True, augment_rotation=True):
    """Fresh per-epoch augmentation: rotate the whole complex in original
    units, then rewrite the ligand SMILES with a random atom order and
    permute its coordinates to match."""
    r = record
    if augment_rotation:
        r = chem.rotate_record(r, chem.random_rotation(rng))
    if augment_smiles and r.ligand_smiles:
        smiles, perm = chem.randomize_smiles(r.ligand_smiles, seed=rng)
        r = chem.ComplexRecord(
            pocket_atoms=list(r.pocket_atoms),
            pocket_coords=r.pocket_coords,
            ligand_smiles=smiles,
            ligand_coords=r.ligand_coords[perm],
        )
    return r


def train_docking(model, records, vocab, cfg, q=5.0, augment_smiles=True,
                  augment_rotation=True, max_len=2048, out_dir=None,
                  start_step=0, opt_state=None):
    """Supervised fine-tuning on complexes with the ligand-coordinate MSE.

    Every sample is independently re-augmented each time it is drawn; a
    sample whose augmentation fails to encode (e.g. a randomized SMILES
    introducing tokens outside the vocabulary) is skipped and counted.
    """
    if not records:
        raise TrainError("no training complexes")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    cfg, steps_per_epoch = _resolve_total_steps(cfg, len(records))
    effective = cfg.micro_batch * cfg.accum_steps
    state = opt_state or init_adam(model.params)
    report = TrainReport(steps=cfg.total_steps)
    vocab_hash = vocab.sha256()
    perm = None
    last_ckpt = None
    for step in range(start_step, cfg.total_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if pos == 0 or perm is None:
            perm = _epoch_order(cfg.seed, epoch, len(records))
        rng = np.random.default_rng([cfg.seed, epoch, pos])
        seqs = []
        for i in perm[pos * effective:(pos + 1) * effective]:
            try:
                r = augment_record(records[i], rng, augment_smiles, augment_rotation)
                seq = encode_complex(r, q, max_len=max_len)
                vocab.encode(seq.tokens)  # closed vocabulary check
                seqs.append(seq)
            except (chem.ChemError, CodecError):
                report.skipped_augment += 1
        if not seqs:
            continue
        try:
            grads, stats = accumulate_gradients(
                model, seqs, vocab, cfg.alpha, "docking", cfg.micro_batch
            )
        except NonFiniteLossError as e:
            raise TrainingDiverged(step, last_ckpt) from e
        clip_gradients(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        optimizer_step(model.params, grads, state, lr, cfg.weight_decay)
        report.metrics.append({"step": step, "lr": lr, **stats})
        _maybe_checkpoint(out_dir, model, vocab_hash, state, step, cfg, report)
        if report.checkpoints:
            last_ckpt = report.checkpoints[-1]
    _maybe_checkpoint(out_dir, model, vocab_hash, state, cfg.total_steps - 1,
                      cfg, report, final=True)
    return report
