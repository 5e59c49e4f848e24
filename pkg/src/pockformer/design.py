"""Pocket-aware molecule design by RL fine-tuning.

The agent (token weights, updated) samples ligand SMILES conditioned on an
encoded pocket; 3D coordinates for each sample come from a separate,
frozen docking-fine-tuned model. Each sample is pushed toward the
augmented likelihood target log pi_prior + sigma * reward via the squared
regularized-MLE loss.

Scoring goes through a file protocol so an external docking/property
stack can be plugged in: one request line per candidate
(index TAB smiles TAB x,y,z;x,y,z;... in Angstrom), the configured command
is invoked with the request path and an output path, and the response has
one line per candidate (index TAB vina_dock TAB qed TAB sa, optionally a
fifth vina_score column). The built-in mock oracle speaks the same rows
in-process and is deliberately simple: it favors nitrogen/oxygen-rich
molecules, which makes improvement under RL testable.
"""

import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import chem
from .model import (Model, clone_params, forward, log_softmax,
                    generate_coordinate_batch, sample_token_batch)
from .seqcodec import ParallelSequence, encode_pocket, tokenize_smiles
from .train import TrainError, clip_gradients, init_adam, optimizer_step
from .model import backward


class DesignError(ValueError):
    pass


class OracleProtocolError(RuntimeError):
    pass


@dataclass
class RLConfig:
    sigma: float = 100.0
    steps: int = 500
    batch: int = 128
    lr: float = 1e-4
    temperature: float = 1.0
    max_smiles_tokens: int = 128
    seed: int = 0
    top_k: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise DesignError(f"sigma must be > 0, got {self.sigma}")
        if self.batch < 1:
            raise DesignError("batch must be >= 1")
        if self.max_smiles_tokens < 1:
            raise DesignError("max_smiles_tokens must be >= 1")


@dataclass
class OracleScores:
    vina_dock: float  # kcal/mol, lower is better
    qed: float  # [0,1]
    sa: float  # [0,1], already transformed so higher is better
    vina_score: float = None

    def __post_init__(self):
        if not math.isfinite(self.vina_dock):
            raise DesignError("vina_dock must be finite")
        if not 0.0 <= self.qed <= 1.0:
            raise DesignError(f"qed must be in [0,1], got {self.qed}")
        if not 0.0 <= self.sa <= 1.0:
            raise DesignError(f"sa must be in [0,1], got {self.sa}")


@dataclass
class DesignCandidate:
    smiles: str
    tokens: list  # sampled tokens, includes the closing [LE] when emitted
    valid: bool
    coords: np.ndarray = None  # (n_atoms, 3), Angstrom
    scores: OracleScores = None
    reward: float = None
    agent_loglik: float = 0.0
    pretrained_loglik: float = 0.0


# ---------------------------------------------------------------- rewards --

QED_THRESHOLD = 0.25
SA_THRESHOLD = 0.59
SUCCESS_VINA_DOCK = -8.18


def reward_dock(vina_dock):
    """Reverse sigmoid mapping a docking score to (0,1); -10 maps to 0.5."""
    exponent = 0.625 * (vina_dock + 10.0)
    if exponent > 300.0:
        return 0.0
    return 1.0 / (1.0 + 10.0**exponent)


def reward_qed(qed):
    if not 0.0 <= qed <= 1.0:
        raise DesignError(f"qed must be in [0,1], got {qed}")
    return 1.0 if qed > QED_THRESHOLD else 0.0


def reward_sa(sa):
    if not 0.0 <= sa <= 1.0:
        raise DesignError(f"sa must be in [0,1], got {sa}")
    return 1.0 if sa > SA_THRESHOLD else 0.0


def reward_total(scores):
    return (reward_dock(scores.vina_dock) + reward_qed(scores.qed) + reward_sa(scores.sa)) / 3.0


def rl_loss(pretrained_loglik, agent_loglik, reward, sigma):
    """Squared gap to the augmented likelihood target."""
    for v in (pretrained_loglik, agent_loglik, reward, sigma):
        if not math.isfinite(v):
            raise DesignError("rl_loss inputs must be finite")
    return (pretrained_loglik + sigma * reward - agent_loglik) ** 2


# ----------------------------------------------------------------- oracle --


def encode_request_rows(candidates):
    rows = []
    for i, c in enumerate(candidates):
        coords = ";".join(f"{x:.6f},{y:.6f},{z:.6f}" for x, y, z in c.coords)
        rows.append(f"{i}\t{c.smiles}\t{coords}")
    return rows


def parse_response_rows(lines, n_expected):
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) != n_expected:
        raise OracleProtocolError(
            f"oracle returned {len(lines)} rows for {n_expected} candidates"
        )
    out = [None] * n_expected
    for ln_no, line in enumerate(lines, 1):
        parts = line.rstrip("\n").split("\t")
        if len(parts) not in (4, 5):
            raise OracleProtocolError(f"response line {ln_no}: expected 4 or 5 fields: {line!r}")
        try:
            idx = int(parts[0])
            vina, qed, sa = float(parts[1]), float(parts[2]), float(parts[3])
            vina_score = float(parts[4]) if len(parts) == 5 else None
        except ValueError as e:
            raise OracleProtocolError(f"response line {ln_no}: {e}: {line!r}") from e
        if not 0 <= idx < n_expected or out[idx] is not None:
            raise OracleProtocolError(f"response line {ln_no}: bad or duplicate index {idx}")
        try:
            out[idx] = OracleScores(vina, qed, sa, vina_score)
        except DesignError as e:
            raise OracleProtocolError(f"response line {ln_no}: {e}") from e
    return out


def _worker_count():
    env = os.environ.get("POCKFORMER_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


class MockOracle:
    """Deterministic in-process oracle speaking the same row format.

    vina_dock = -2.0 * (nitrogen count + oxygen count); qed = 0.5 for
    molecules of at most 40 heavy atoms, else 0.2; sa = 0.7. Monotone in a
    controllable SMILES feature, so RL improvement is observable.
    """

    def _score_one(self, row):
        parts = row.split("\t")
        if len(parts) != 3:
            raise OracleProtocolError(f"request row has {len(parts)} fields: {row!r}")
        idx, smiles = parts[0], parts[1]
        g = chem.parse_smiles(smiles)
        n_no = sum(1 for a in g.atoms if a.element in ("N", "O"))
        vina = -2.0 * n_no
        qed = 0.5 if len(g.atoms) <= 40 else 0.2
        return f"{idx}\t{vina}\t{qed}\t{0.7}"

    def score_rows(self, rows):
        from concurrent.futures import ThreadPoolExecutor

        if len(rows) <= 1:
            return [self._score_one(r) for r in rows]
        with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
            return list(pool.map(self._score_one, rows))


class CommandOracle:
    """Scores candidates by invoking an external command as
    `command <request_path> <response_path>`."""

    def __init__(self, command):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)

    def score_rows(self, rows):
        with tempfile.TemporaryDirectory(prefix="pockformer-oracle-") as tmp:
            req = os.path.join(tmp, "request.tsv")
            resp = os.path.join(tmp, "response.tsv")
            with open(req, "w") as f:
                f.write("\n".join(rows))
                if rows:
                    f.write("\n")
            proc = subprocess.run(self.command + [req, resp], capture_output=True, text=True)
            if proc.returncode != 0:
                raise OracleProtocolError(
                    f"oracle command exited with {proc.returncode}: {proc.stderr.strip()}"
                )
            if not os.path.exists(resp):
                raise OracleProtocolError("oracle command wrote no response file")
            with open(resp) as f:
                return f.read().splitlines()


def score_batch(candidates, oracle):
    """Attach OracleScores and rewards. Invalid candidates never reach the
    oracle; they are assigned reward 0 and still participate in the loss."""
    valid = [c for c in candidates if c.valid]
    if valid:
        rows = encode_request_rows(valid)
        scores = parse_response_rows(oracle.score_rows(rows), len(valid))
        for c, s in zip(valid, scores):
            c.scores = s
            c.reward = reward_total(s)
    for c in candidates:
        if not c.valid:
            c.scores = None
            c.reward = 0.0
    return candidates


# --------------------------------------------------------------- sampling --


def pocket_prefix(pocket_record, q):
    """Encode the pocket section alone, centered on the pocket atoms
    (ligand coordinates are unknown at design time). Returns the sequence
    and the center used, for de-normalizing generated poses."""
    if len(pocket_record.pocket_atoms) == 0:
        raise DesignError("record has no pocket atoms")
    center = pocket_record.pocket_coords.mean(axis=0)
    seq = encode_pocket(pocket_record.pocket_atoms,
                        pocket_record.pocket_coords - center, q)
    return seq, center


def _with_ls(prefix):
    return prefix + ParallelSequence(["[LS]"], np.ones(1))


def sample_batch(agent, docking, pretrained, prefix, vocab, cfg, rng, q=5.0,
                 center=None):
    """Sample one design batch.

    SMILES tokens are drawn with the agent (token mode, stop at [LE]);
    coordinates for parseable samples come from the frozen docking weights
    (numerical mode); per-sample log-likelihoods over the sampled span are
    computed under both the agent and the pretrained prior. Unparseable or
    unterminated samples are marked invalid but still returned.
    """
    if center is None:
        center = np.zeros(3)
    start = _with_ls(prefix)
    sampled = sample_token_batch(agent, vocab, start, cfg.batch, "[LE]",
                                 cfg.max_smiles_tokens, cfg.temperature, rng)
    candidates = []
    for tokens, completed in sampled:
        body = tokens[:-1] if (completed and tokens and tokens[-1] == "[LE]") else tokens
        smiles = "".join(body)
        valid = completed and bool(body)
        atom_count = 0
        if valid:
            try:
                atom_count = len(chem.parse_smiles(smiles).atoms)
                valid = atom_count > 0
            except chem.ChemError:
                valid = False
        candidates.append(DesignCandidate(smiles=smiles, tokens=list(tokens), valid=valid))
        candidates[-1]._atom_count = atom_count

    ids, numbers, spans = _candidate_batch(start, candidates, vocab)
    for m, attr in ((agent, "agent_loglik"), (pretrained, "pretrained_loglik")):
        out = forward(m, ids, numbers)
        lp = log_softmax(out.logits)
        for b, c in enumerate(candidates):
            s, e = spans[b]
            pick = lp[b, np.arange(s - 1, e - 1), ids[b, s:e]]
            setattr(c, attr, float(pick.sum()))

    todo = [c for c in candidates if c.valid]
    if todo:
        prefixes = []
        for c in todo:
            lig = ParallelSequence(list(c.tokens), np.ones(len(c.tokens)))
            prefixes.append(start + lig)
        coords = generate_coordinate_batch(docking, vocab, prefixes,
                                           [c._atom_count for c in todo])
        for c, xyz in zip(todo, coords):
            c.coords = xyz * q + center
    return candidates


def _candidate_batch(start, candidates, vocab):
    """Right-padded id/number arrays for prefix+sampled sequences, plus the
    half-open span of sampled positions per row."""
    from .seqcodec import PAD

    t0 = len(start)
    widths = [t0 + len(c.tokens) for c in candidates]
    T = max(widths)
    pad_id = vocab.index[PAD]
    ids = np.full((len(candidates), T), pad_id, dtype=np.int64)
    numbers = np.ones((len(candidates), T))
    prefix_ids = vocab.encode(start.tokens)
    spans = []
    for b, c in enumerate(candidates):
        ids[b, :t0] = prefix_ids
        numbers[b, :t0] = start.numbers
        if c.tokens:
            ids[b, t0:t0 + len(c.tokens)] = vocab.encode(c.tokens)
        spans.append((t0, t0 + len(c.tokens)))
    return ids, numbers, spans


def _rl_gradients(agent, start, candidates, vocab, sigma):
    """Gradient of the batch-mean squared regularized-MLE loss wrt the
    agent parameters (prior, reward and the number channel are constants)."""
    ids, numbers, spans = _candidate_batch(start, candidates, vocab)
    out, cache = forward(agent, ids, numbers, want_cache=True)
    lp = log_softmax(out.logits)
    dlogits = np.zeros_like(out.logits)
    B = len(candidates)
    for b, c in enumerate(candidates):
        coef = 2.0 * (c.agent_loglik - c.pretrained_loglik - sigma * c.reward) / B
        s, e = spans[b]
        if e <= s:
            continue
        # d(agent_ll)/d(logits) = onehot - softmax at the predicting positions
        rows = -np.exp(lp[b, s - 1:e - 1])
        rows[np.arange(e - s), ids[b, s:e]] += 1.0
        dlogits[b, s - 1:e - 1] = coef * rows
    dnums = np.zeros_like(out.numbers)
    return backward(agent, cache, dlogits, dnums)


def canonical_key(smiles):
    """Dedup key: the SMILES re-serialized from its parsed graph with the
    default traversal (not a full canonicalization, but stable under the
    generator's own orderings)."""
    return chem.write_smiles(chem.parse_smiles(smiles))


@dataclass
class RLReport:
    metrics: list = field(default_factory=list)
    top: list = field(default_factory=list)
    archive_size: int = 0
    invalid_total: int = 0

    @property
    def mean_rewards(self):
        return [m["mean_reward"] for m in self.metrics]


def rl_run(agent, docking, pocket_record, oracle, vocab, cfg, q=5.0,
           out_dir=None):
    """RL fine-tuning against one pocket.

    The agent starts from pretrained weights; a frozen copy serves as the
    prior in the loss, and `docking` (never touched) supplies coordinates.
    Keeps a deduplicated archive of scored molecules and returns the top
    `cfg.top_k` unique ones by reward.
    """
    prior = Model(agent.config, clone_params(agent.params))
    prefix, center = pocket_prefix(pocket_record, q)
    start = _with_ls(prefix)
    state = init_adam(agent.params)
    archive = {}
    report = RLReport()
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        candidates = sample_batch(agent, docking, prior, prefix, vocab, cfg,
                                  rng, q=q, center=center)
        score_batch(candidates, oracle)
        losses = [rl_loss(c.pretrained_loglik, c.agent_loglik, c.reward, cfg.sigma)
                  for c in candidates]
        n_invalid = sum(1 for c in candidates if not c.valid)
        report.invalid_total += n_invalid
        grads = _rl_gradients(agent, start, candidates, vocab, cfg.sigma)
        clip_gradients(grads, cfg.grad_clip)
        optimizer_step(agent.params, grads, state, cfg.lr, cfg.weight_decay)
        for c in candidates:
            if not c.valid:
                continue
            key = canonical_key(c.smiles)
            best = archive.get(key)
            if best is None or c.reward > best.reward:
                archive[key] = c
        report.metrics.append({
            "step": step,
            "mean_reward": float(np.mean([c.reward for c in candidates])),
            "mean_loss": float(np.mean(losses)),
            "invalid": n_invalid,
        })
    report.archive_size = len(archive)
    report.top = sorted(archive.values(), key=lambda c: (-c.reward, c.smiles))[:cfg.top_k]
    if out_dir:
        _write_rl_outputs(out_dir, report)
    return report


def _write_rl_outputs(out_dir, report):
    import csv
    import json

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "rl_metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mean_reward", "mean_loss", "invalid"])
        for m in report.metrics:
            w.writerow([m["step"], m["mean_reward"], m["mean_loss"], m["invalid"]])
    with open(os.path.join(out_dir, "top_molecules.jsonl"), "w") as f:
        for c in report.top:
            f.write(json.dumps({
                "smiles": c.smiles,
                "reward": c.reward,
                "vina_dock": c.scores.vina_dock,
                "qed": c.scores.qed,
                "sa": c.scores.sa,
                "coords": [[float(v) for v in row] for row in c.coords],
            }))
            f.write("\n")
