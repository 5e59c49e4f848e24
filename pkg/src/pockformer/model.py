"""Dual-channel autoregressive transformer.

A GPT-style causal decoder over the token channel, with a parallel numeric
channel: at the input, each token embedding is multiplied by the aligned
number (1.0 at non-coordinate slots, so those positions reduce to plain
token embeddings); at the output, a scalar number head sits next to the
token logits head and regresses the next value.

Everything is float64 numpy with hand-written backprop. Two inference
modes are provided: token sampling (appended numbers are all 1.0) and
deterministic coordinate generation (tokens forced to the known
[LCS] ([x][y][z])*n [LCE] pattern, values taken from the number head).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .seqcodec import PAD, XYZ, ParallelSequence


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    max_len: int
    vocab_size: int
    dropout: float = 0.0
    tied_embeddings: bool = False  # kept untied; flag documents the choice

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if min(self.n_layers, self.n_heads, self.d_model, self.max_len, self.vocab_size) <= 0:
            raise ModelError("all size fields must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0,1), got {self.dropout}")

    def to_dict(self):
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_model": self.d_model, "max_len": self.max_len,
            "vocab_size": self.vocab_size, "dropout": self.dropout,
            "tied_embeddings": self.tied_embeddings,
        }


@dataclass
class Model:
    config: ModelConfig
    params: dict


@dataclass
class ForwardOutput:
    logits: np.ndarray  # (..., T, vocab)
    numbers: np.ndarray  # (..., T) next-value predictions, normalized units


def init_model(config, seed=0):
    """Deterministic initialization: weights ~ normal(0, 0.02), biases 0,
    layer-norm gains 1."""
    rng = np.random.default_rng(seed)
    d, v = config.d_model, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    p = {}
    p["wte"] = w(v, d)
    p["wpe"] = w(config.max_len, d)
    for i in range(config.n_layers):
        p[f"h{i}.ln1.g"] = np.ones(d)
        p[f"h{i}.ln1.b"] = np.zeros(d)
        p[f"h{i}.attn.w_qkv"] = w(d, 3 * d)
        p[f"h{i}.attn.b_qkv"] = np.zeros(3 * d)
        p[f"h{i}.attn.w_o"] = w(d, d)
        p[f"h{i}.attn.b_o"] = np.zeros(d)
        p[f"h{i}.ln2.g"] = np.ones(d)
        p[f"h{i}.ln2.b"] = np.zeros(d)
        p[f"h{i}.mlp.w_fc"] = w(d, 4 * d)
        p[f"h{i}.mlp.b_fc"] = np.zeros(4 * d)
        p[f"h{i}.mlp.w_proj"] = w(4 * d, d)
        p[f"h{i}.mlp.b_proj"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    p["tok_head.w"] = w(d, v)
    p["tok_head.b"] = np.zeros(v)
    p["num_head.w"] = w(d)
    p["num_head.b"] = np.zeros(1)
    return Model(config, p)


def param_count(model):
    return sum(a.size for a in model.params.values())


def clone_params(params):
    return {k: v.copy() for k, v in params.items()}


def params_fingerprint(params):
    """Order-independent content hash of a parameter dict."""
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- forward --


def _check_inputs(model, tokens, numbers):
    cfg = model.config
    if tokens.ndim == 1:
        tokens = tokens[None, :]
        numbers = None if numbers is None else np.asarray(numbers, dtype=np.float64)[None, :]
        squeeze = True
    else:
        squeeze = False
        if numbers is not None:
            numbers = np.asarray(numbers, dtype=np.float64)
    if numbers is not None and numbers.shape != tokens.shape:
        raise ModelError(f"token/number shape mismatch {tokens.shape} vs {numbers.shape}")
    if tokens.shape[1] > cfg.max_len:
        raise ModelError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        bad = int(np.argmax((tokens < 0) | (tokens >= cfg.vocab_size)))
        raise ModelError(f"token id out of range at flat position {bad}")
    return tokens, numbers, squeeze


def _softmax_full(scores):
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    hd = d // n_heads
    return x.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def forward(model, tokens, numbers, causal=True, want_cache=False, train_rng=None):
    """Run the network. `numbers=None` selects the token-only path (no
    input fusion at all), which is bit-identical to passing all ones.

    Outputs at position i predict position i+1 in both channels.
    """
    tokens = np.asarray(tokens)
    tokens, numbers, squeeze = _check_inputs(model, tokens, numbers)
    cfg, p = model.config, model.params
    B, T = tokens.shape
    d = cfg.d_model
    hd = d // cfg.n_heads
    scale = 1.0 / np.sqrt(hd)
    drop = cfg.dropout if train_rng is not None else 0.0

    cache = {"tokens": tokens, "numbers": numbers, "causal": causal,
             "layers": [], "dropout_masks": []}

    def dropout(x):
        if drop == 0.0:
            return x
        mask = (train_rng.random(x.shape) >= drop) / (1.0 - drop)
        cache["dropout_masks"].append(mask)
        return x * mask

    emb = p["wte"][tokens]
    x = emb if numbers is None else emb * numbers[..., None]
    x = dropout(x + p["wpe"][:T])

    for i in range(cfg.n_layers):
        lc = {}
        lc["x1"] = x
        flat = x.reshape(-1, d)
        y1, mu1, rs1 = kernels.layer_norm_fwd(flat, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        lc["ln1"] = (flat, mu1, rs1)
        lc["y1"] = y1
        qkv = y1 @ p[f"h{i}.attn.w_qkv"] + p[f"h{i}.attn.b_qkv"]
        qkv = qkv.reshape(B, T, 3 * d)
        q = _split_heads(qkv[..., :d], cfg.n_heads)
        k = _split_heads(qkv[..., d:2 * d], cfg.n_heads)
        v = _split_heads(qkv[..., 2 * d:], cfg.n_heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        flat_scores = scores.reshape(B * cfg.n_heads, T, T)
        if causal:
            probs = kernels.causal_softmax(flat_scores)
        else:
            probs = _softmax_full(flat_scores)
        probs4 = probs.reshape(B, cfg.n_heads, T, T)
        ctx = _merge_heads(probs4 @ v)
        lc.update(q=q, k=k, v=v, probs=probs4, ctx=ctx)
        attn_out = dropout((ctx.reshape(-1, d) @ p[f"h{i}.attn.w_o"] + p[f"h{i}.attn.b_o"]).reshape(B, T, d))
        x = x + attn_out

        lc["x2"] = x
        flat2 = x.reshape(-1, d)
        y2, mu2, rs2 = kernels.layer_norm_fwd(flat2, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        lc["ln2"] = (flat2, mu2, rs2)
        lc["y2"] = y2
        hpre = y2 @ p[f"h{i}.mlp.w_fc"] + p[f"h{i}.mlp.b_fc"]
        act = kernels.gelu_fwd(hpre)
        lc["hpre"] = hpre
        lc["act"] = act
        mlp_out = dropout((act @ p[f"h{i}.mlp.w_proj"] + p[f"h{i}.mlp.b_proj"]).reshape(B, T, d))
        x = x + mlp_out
        cache["layers"].append(lc)

    cache["x3"] = x
    flat3 = x.reshape(-1, d)
    yf, muf, rsf = kernels.layer_norm_fwd(flat3, p["lnf.g"], p["lnf.b"])
    cache["lnf"] = (flat3, muf, rsf)
    cache["yf"] = yf
    logits = (yf @ p["tok_head.w"] + p["tok_head.b"]).reshape(B, T, cfg.vocab_size)
    nums = (yf @ p["num_head.w"] + p["num_head.b"][0]).reshape(B, T)
    out = ForwardOutput(logits[0], nums[0]) if squeeze else ForwardOutput(logits, nums)
    if want_cache:
        return out, cache
    return out


def backward(model, cache, dlogits, dnumbers):
    """Backprop the gradients of a scalar loss wrt logits and number
    outputs down to every parameter. Returns a name->gradient dict."""
    cfg, p = model.config, model.params
    tokens = cache["tokens"]
    numbers = cache["numbers"]
    B, T = tokens.shape
    d = cfg.d_model
    hd = d // cfg.n_heads
    scale = 1.0 / np.sqrt(hd)
    dlogits = dlogits.reshape(B, T, cfg.vocab_size)
    dnumbers = dnumbers.reshape(B, T)
    if not (np.all(np.isfinite(dlogits)) and np.all(np.isfinite(dnumbers))):
        raise ModelError("non-finite loss gradient")

    grads = {}
    drop_masks = list(cache["dropout_masks"])

    def dropout_bwd(dx):
        if not drop_masks:
            return dx
        return dx * drop_masks.pop()

    yf = cache["yf"]
    flat_dlog = dlogits.reshape(-1, cfg.vocab_size)
    grads["tok_head.w"] = yf.T @ flat_dlog
    grads["tok_head.b"] = flat_dlog.sum(axis=0)
    flat_dnum = dnumbers.reshape(-1)
    grads["num_head.w"] = yf.T @ flat_dnum
    grads["num_head.b"] = np.array([flat_dnum.sum()])
    dyf = flat_dlog @ p["tok_head.w"].T + flat_dnum[:, None] * p["num_head.w"]

    flat3, muf, rsf = cache["lnf"]
    dx, dg, db = kernels.layer_norm_bwd(dyf, flat3, p["lnf.g"], muf, rsf)
    grads["lnf.g"], grads["lnf.b"] = dg, db
    dx = dx.reshape(B, T, d)

    for i in reversed(range(cfg.n_layers)):
        lc = cache["layers"][i]
        # mlp branch
        dmlp = dropout_bwd(dx).reshape(-1, d)
        grads[f"h{i}.mlp.w_proj"] = lc["act"].T @ dmlp
        grads[f"h{i}.mlp.b_proj"] = dmlp.sum(axis=0)
        dact = dmlp @ p[f"h{i}.mlp.w_proj"].T
        dh = kernels.gelu_bwd(dact, lc["hpre"])
        grads[f"h{i}.mlp.w_fc"] = lc["y2"].T @ dh
        grads[f"h{i}.mlp.b_fc"] = dh.sum(axis=0)
        dy2 = dh @ p[f"h{i}.mlp.w_fc"].T
        flat2, mu2, rs2 = lc["ln2"]
        dx2, dg2, db2 = kernels.layer_norm_bwd(dy2, flat2, p[f"h{i}.ln2.g"], mu2, rs2)
        grads[f"h{i}.ln2.g"], grads[f"h{i}.ln2.b"] = dg2, db2
        dx = dx + dx2.reshape(B, T, d)

        # attention branch
        dattn = dropout_bwd(dx).reshape(-1, d)
        grads[f"h{i}.attn.w_o"] = lc["ctx"].reshape(-1, d).T @ dattn
        grads[f"h{i}.attn.b_o"] = dattn.sum(axis=0)
        dctx = (dattn @ p[f"h{i}.attn.w_o"].T).reshape(B, T, d)
        dctx = _split_heads(dctx, cfg.n_heads)
        probs = lc["probs"]
        dprobs = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        flat_dp = dprobs.reshape(B * cfg.n_heads, T, T)
        flat_p = probs.reshape(B * cfg.n_heads, T, T)
        if cache["causal"]:
            dscores = kernels.causal_softmax_bwd(flat_dp, flat_p)
        else:
            dscores = flat_p * (flat_dp - (flat_dp * flat_p).sum(axis=-1, keepdims=True))
        dscores = dscores.reshape(B, cfg.n_heads, T, T) * scale
        dq = dscores @ lc["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ lc["q"]
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1
        ).reshape(-1, 3 * d)
        grads[f"h{i}.attn.w_qkv"] = lc["y1"].T @ dqkv
        grads[f"h{i}.attn.b_qkv"] = dqkv.sum(axis=0)
        dy1 = dqkv @ p[f"h{i}.attn.w_qkv"].T
        flat1, mu1, rs1 = lc["ln1"]
        dx1, dg1, db1 = kernels.layer_norm_bwd(dy1, flat1, p[f"h{i}.ln1.g"], mu1, rs1)
        grads[f"h{i}.ln1.g"], grads[f"h{i}.ln1.b"] = dg1, db1
        dx = dx + dx1.reshape(B, T, d)

    dx0 = dropout_bwd(dx)
    grads["wpe"] = np.zeros_like(p["wpe"])
    grads["wpe"][:T] = dx0.sum(axis=0)
    demb = dx0 if numbers is None else dx0 * numbers[..., None]
    grads["wte"] = np.zeros_like(p["wte"])
    np.add.at(grads["wte"], tokens.reshape(-1), demb.reshape(-1, d))
    return grads


def fuse_embeddings(model, tokens, numbers):
    """The multiplicative input fusion alone (before positional addition)."""
    tokens = np.asarray(tokens)
    return model.params["wte"][tokens] * np.asarray(numbers, dtype=np.float64)[..., None]


# ----------------------------------------------------------- likelihoods --


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_likelihood(model, tokens, numbers, span):
    """Sum of next-token log-probabilities over `span` = (start, end),
    half-open token index range; position t is predicted from t-1, so the
    span may not start at 0."""
    start, end = span
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ModelError("log_likelihood expects a single sequence")
    if start <= 0:
        raise ModelError("span may not start at position 0 (no prefix to condition on)")
    if not start < end <= len(tokens):
        raise ModelError(f"bad span {span} for length {len(tokens)}")
    out = forward(model, tokens, numbers)
    lp = log_softmax(out.logits[start - 1:end - 1])
    return float(lp[np.arange(end - start), tokens[start:end]].sum())


# ------------------------------------------------------------- generation --


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def _sample_rows(probs, rng):
    """One multinomial draw per row, via inverse CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    cdf[:, -1] = 1.0
    return np.array([int(np.searchsorted(cdf[i], u[i], side="right"))
                     for i in range(probs.shape[0])])


def generate_tokens(model, vocab, prefix, stop_token, max_new, temperature=1.0, rng=None):
    """Token-mode sampling: autoregressive multinomial draws from
    softmax(logits / temperature) until stop_token. Appended numbers are
    all exactly 1.0. temperature=0 selects argmax.

    Returns (sequence, completed); completed=False flags a sample that ran
    out of budget before emitting stop_token.
    """
    if temperature < 0:
        raise ModelError("temperature must be >= 0")
    rng = _as_rng(rng)
    stop_id = vocab.index[stop_token]
    ids = vocab.encode(prefix.tokens).astype(np.int64)
    numbers = prefix.numbers.copy()
    tokens = list(prefix.tokens)
    completed = False
    for _ in range(max_new):
        out = forward(model, ids, numbers)
        logits = out.logits[-1]
        if temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            probs = _softmax_full(logits / temperature)
            nxt = int(_sample_rows(probs[None, :], rng)[0])
        ids = np.append(ids, nxt)
        numbers = np.append(numbers, 1.0)
        tokens.append(vocab.tokens[nxt])
        if nxt == stop_id:
            completed = True
            break
    return ParallelSequence(tokens, numbers), completed


def sample_token_batch(model, vocab, prefix, batch, stop_token, max_new,
                       temperature=1.0, rng=None):
    """Batched token-mode sampling from one shared prefix.

    Returns a list of (sampled_tokens, completed) pairs; sampled_tokens
    excludes the prefix but includes the stop token when emitted. Rows are
    padded with [PAD] internally, which is harmless under causal attention.
    """
    if temperature < 0:
        raise ModelError("temperature must be >= 0")
    rng = _as_rng(rng)
    stop_id = vocab.index[stop_token]
    pad_id = vocab.index[PAD]
    prefix_ids = vocab.encode(prefix.tokens).astype(np.int64)
    t0 = len(prefix_ids)
    ids = np.full((batch, t0 + max_new), pad_id, dtype=np.int64)
    ids[:, :t0] = prefix_ids
    numbers = np.ones((batch, t0 + max_new))
    numbers[:, :t0] = prefix.numbers
    active = np.ones(batch, dtype=bool)
    lengths = np.full(batch, t0)
    for step in range(max_new):
        if not active.any():
            break
        cur = t0 + step
        out = forward(model, ids[:, :cur], numbers[:, :cur])
        logits = out.logits[:, -1, :]
        if temperature == 0.0:
            nxt = np.argmax(logits, axis=-1)
        else:
            nxt = _sample_rows(_softmax_full(logits / temperature), rng)
        for b in range(batch):
            if active[b]:
                ids[b, cur] = nxt[b]
                lengths[b] = cur + 1
                if nxt[b] == stop_id:
                    active[b] = False
    results = []
    for b in range(batch):
        sampled = [vocab.tokens[int(i)] for i in ids[b, t0:lengths[b]]]
        completed = lengths[b] > t0 and ids[b, lengths[b] - 1] == stop_id
        results.append((sampled, bool(completed)))
    return results


def generate_coordinates(model, vocab, prefix, atom_count):
    """Numerical-mode generation: append [LCS], then atom_count [x][y][z]
    triplets whose numbers come from the number head (no sampling), then
    [LCE]. The token channel is forced to this pattern regardless of
    logits; only tokens from {[x],[y],[z],[LCS],[LCE]} are emitted."""
    if atom_count <= 0:
        raise ModelError(f"atom_count must be positive, got {atom_count}")
    if not prefix.tokens or prefix.tokens[-1] != "[LE]":
        raise ModelError("prefix must end with a complete ligand SMILES section ([LE])")
    ids = vocab.encode(prefix.tokens).astype(np.int64)
    numbers = prefix.numbers.copy()
    tokens = list(prefix.tokens)

    def append(tok, val):
        nonlocal ids, numbers
        ids = np.append(ids, vocab.index[tok])
        numbers = np.append(numbers, val)
        tokens.append(tok)

    append("[LCS]", 1.0)
    for k in range(3 * atom_count):
        out = forward(model, ids, numbers)
        append(XYZ[k % 3], float(out.numbers[-1]))
    append("[LCE]", 1.0)
    return ParallelSequence(tokens, numbers)


def generate_coordinate_batch(model, vocab, prefixes, atom_counts):
    """Numerical-mode generation for several prefixes of varying length.

    Equivalent to calling generate_coordinates per prefix (rows are
    right-padded with [PAD]; causal attention keeps them independent) but
    batches the forward passes. Returns a list of (n_atoms, 3) arrays.
    """
    if not prefixes:
        return []
    pad_id = vocab.index[PAD]
    lcs_id, lce_id = vocab.index["[LCS]"], vocab.index["[LCE]"]
    xyz_ids = [vocab.index[t] for t in XYZ]
    B = len(prefixes)
    lens = np.array([len(p.tokens) for p in prefixes])
    need = 3 * np.asarray(atom_counts)
    if np.any(need <= 0):
        raise ModelError("atom counts must be positive")
    width = int((lens + need + 2).max())
    ids = np.full((B, width), pad_id, dtype=np.int64)
    numbers = np.ones((B, width))
    for b, p in enumerate(prefixes):
        if not p.tokens or p.tokens[-1] != "[LE]":
            raise ModelError("prefix must end with a complete ligand SMILES section ([LE])")
        ids[b, :lens[b]] = vocab.encode(p.tokens)
        numbers[b, :lens[b]] = p.numbers
        ids[b, lens[b]] = lcs_id
    cur = lens + 1
    values = [[] for _ in range(B)]
    for step in range(int(need.max())):
        todo = need > step
        if not todo.any():
            break
        out = forward(model, ids[:, :cur.max()], numbers[:, :cur.max()])
        for b in np.nonzero(todo)[0]:
            val = float(out.numbers[b, cur[b] - 1])
            ids[b, cur[b]] = xyz_ids[step % 3]
            numbers[b, cur[b]] = val
            values[b].append(val)
            cur[b] += 1
    for b in range(B):
        ids[b, cur[b]] = lce_id
    return [np.array(v).reshape(-1, 3) for v in values]


# ------------------------------------------------------------ checkpoints --


def save_checkpoint(path, model, vocab_hash, opt_state=None, extra=None):
    """Self-describing .npz: config + vocabulary hash + named tensors.
    Written atomically (temp file then rename)."""
    meta = {
        "config": model.config.to_dict(),
        "vocab_sha256": vocab_hash,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if opt_state is not None:
        arrays.update({f"opt_m/{k}": v for k, v in opt_state.m.items()})
        arrays.update({f"opt_v/{k}": v for k, v in opt_state.v.items()})
        meta["opt_t"] = opt_state.t
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        np.savez(f, meta=json.dumps(meta), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, expect_vocab_hash=None):
    """Returns (model, meta, opt_state_or_None); verifies tensor shapes
    against the stored config and, when given, the vocabulary hash."""
    from .train import AdamState

    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        cfg = ModelConfig(**meta["config"])
        if expect_vocab_hash is not None and meta["vocab_sha256"] != expect_vocab_hash:
            raise ModelError(
                "checkpoint was trained with a different vocabulary "
                f"({meta['vocab_sha256'][:12]}... != {expect_vocab_hash[:12]}...)"
            )
        params = {}
        m, v = {}, {}
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = z[key]
            elif key.startswith("opt_m/"):
                m[key[len("opt_m/"):]] = z[key]
            elif key.startswith("opt_v/"):
                v[key[len("opt_v/"):]] = z[key]
    expected = init_model(cfg, seed=0).params
    if set(params) != set(expected):
        raise ModelError("checkpoint tensors do not match the stored config")
    for k in expected:
        if params[k].shape != expected[k].shape:
            raise ModelError(
                f"tensor {k} has shape {params[k].shape}, expected {expected[k].shape}"
            )
    model = Model(cfg, params)
    opt_state = None
    if m:
        opt_state = AdamState(m=m, v=v, t=int(meta.get("opt_t", 0)))
    return model, meta, opt_state
