"""Toy sequence models: bidirectional encoder, cross-attention decoder, causal LM.

All three share one pre-norm transformer block vocabulary. The encoder and
decoder operate over the multilingual token space and share an embedding
table; the LM lives in its own smaller token space. Everything is built on
the 2-D tape in `tensor`, so freezing a model (requires_grad off) folds its
forward pass into plain numpy.
"""

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, params_digest, save_checkpoint, tokenizer_digest
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    TrainingError,
)
from .languages import INSTRUCT, TRANSLATE, EncTokenizer, LmTokenizer
from .optim import Adam, clip_global_norm
from .rng import RngState
from .tensor import (
    Tensor,
    add,
    add_const,
    concat_rows,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    scale,
    slice_rows,
    take_rows,
)

_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}
_MASK_CACHE: dict[int, np.ndarray] = {}

# forward-pass counters; the trainer reads deltas to prove which model
# paths a stage exercised (loss-schedule exclusivity)
CALLS = {"encode": 0, "lm_forward": 0, "decode_with_memory": 0, "greedy_generate": 0}

# additive pre-softmax penalty for masked positions; large but finite so
# softmax stays well-defined even for fully masked rows
MASK_NEG = -1e30


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table, rows 0..n-1."""
    key = (n, d)
    if key not in _POS_CACHE:
        pos = np.arange(n, dtype=np.float64)[:, None]
        idx = np.arange(d, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
        table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
        _POS_CACHE[key] = table
    return _POS_CACHE[key]


def causal_mask(n: int) -> np.ndarray:
    if n not in _MASK_CACHE:
        _MASK_CACHE[n] = np.triu(np.full((n, n), MASK_NEG), k=1)
    return _MASK_CACHE[n]


@dataclass(frozen=True)
class TransformerDims:
    d_model: int
    n_layers: int
    n_heads: int
    vocab_size: int
    max_len: int = 64

    def __post_init__(self):
        if self.d_model < 1 or self.n_layers < 1 or self.vocab_size < 2:
            raise ConfigError(f"degenerate dims {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"{self.n_heads} heads do not divide d={self.d_model}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


class _Model:
    kind = ""

    def __init__(self, dims: TransformerDims, params: dict[str, Tensor], tok_digest: int = 0):
        self.dims = dims
        self.params = params
        self.tok_digest = tok_digest
        self.history: dict | None = None

    def digest(self, names=None) -> int:
        return params_digest(self.params, names)

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def meta(self) -> dict:
        d = self.dims
        return {
            "d_model": d.d_model,
            "n_layers": d.n_layers,
            "n_heads": d.n_heads,
            "vocab_size": d.vocab_size,
            "max_len": d.max_len,
        }


class EncoderModel(_Model):
    kind = "encoder"


class DecoderModel(_Model):
    kind = "decoder"

    def __init__(self, dims, params, tok_digest=0, lang_token_start=0):
        super().__init__(dims, params, tok_digest)
        self.lang_token_start = lang_token_start

    def meta(self) -> dict:
        m = super().meta()
        m["lang_token_start"] = self.lang_token_start
        return m


class LmModel(_Model):
    kind = "lm"


def save_model(model: _Model, path: str) -> int:
    return save_checkpoint(path, model.kind, model.meta(), model.params, model.tok_digest)


def load_model(path: str):
    header, params = load_checkpoint(path)
    meta = header["meta"]
    dims = TransformerDims(
        d_model=meta["d_model"],
        n_layers=meta["n_layers"],
        n_heads=meta["n_heads"],
        vocab_size=meta["vocab_size"],
        max_len=meta["max_len"],
    )
    tok = int(header["tokenizer_digest"], 16)
    kind = header["kind"]
    if kind == "encoder":
        return EncoderModel(dims, params, tok)
    if kind == "decoder":
        return DecoderModel(dims, params, tok, meta["lang_token_start"])
    if kind == "lm":
        return LmModel(dims, params, tok)
    raise DomainError(f"unknown model kind {kind!r} in {path}")


def frozen_view(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Detached wrappers sharing the same buffers; used for tape-free eval."""
    return {k: t.detach() for k, t in params.items()}


# ---------------------------------------------------------------------------
# initialization

EMBED_STD = 1.0
PROJ_STD = 0.05


def _block_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, int]]:
    s = {
        f"{prefix}.ln1.g": (1, d),
        f"{prefix}.ln1.b": (1, d),
        f"{prefix}.ln2.g": (1, d),
        f"{prefix}.ln2.b": (1, d),
        f"{prefix}.ff.w1": (d, d_ff),
        f"{prefix}.ff.b1": (1, d_ff),
        f"{prefix}.ff.w2": (d_ff, d),
        f"{prefix}.ff.b2": (1, d),
    }
    for w in ("wq", "wk", "wv", "wo"):
        s[f"{prefix}.attn.{w}"] = (d, d)
    return s


def _dec_block_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, int]]:
    s = {}
    for ln in ("ln1", "ln2", "ln3"):
        s[f"{prefix}.{ln}.g"] = (1, d)
        s[f"{prefix}.{ln}.b"] = (1, d)
    for sub in ("self", "cross"):
        for w in ("wq", "wk", "wv", "wo"):
            s[f"{prefix}.{sub}.{w}"] = (d, d)
    s[f"{prefix}.ff.w1"] = (d, d_ff)
    s[f"{prefix}.ff.b1"] = (1, d_ff)
    s[f"{prefix}.ff.w2"] = (d_ff, d)
    s[f"{prefix}.ff.b2"] = (1, d)
    return s


def _init_params(rng: RngState, shapes: dict[str, tuple[int, int]]) -> dict[str, Tensor]:
    # drawn in sorted-name order so layout changes cannot silently reshuffle
    params = {}
    for name in sorted(shapes):
        r, c = shapes[name]
        last = name.split(".")[-1]
        if last == "g":
            data = np.ones((r, c))
        elif last.startswith("b"):
            data = np.zeros((r, c))
        elif last == "embed" or name == "embed":
            data = rng.normal(r, c) * EMBED_STD
        else:
            data = rng.normal(r, c) * PROJ_STD
        params[name] = Tensor(data, requires_grad=True)
    return params


def init_encdec(
    rng: RngState,
    tok: EncTokenizer,
    d_model: int = 64,
    n_layers: int = 2,
    n_heads: int = 4,
    max_len: int = 64,
) -> tuple[EncoderModel, DecoderModel]:
    """Fresh encoder-decoder pair with a shared embedding table."""
    dims = TransformerDims(d_model, n_layers, n_heads, tok.vocab_size, max_len)
    enc_shapes: dict[str, tuple[int, int]] = {"embed": (tok.vocab_size, d_model)}
    for i in range(n_layers):
        enc_shapes.update(_block_shapes(f"enc.l{i}", d_model, dims.d_ff))
    enc_shapes["enc.final_ln.g"] = (1, d_model)
    enc_shapes["enc.final_ln.b"] = (1, d_model)

    dec_shapes: dict[str, tuple[int, int]] = {}
    for i in range(n_layers):
        dec_shapes.update(_dec_block_shapes(f"dec.l{i}", d_model, dims.d_ff))
    dec_shapes["dec.final_ln.g"] = (1, d_model)
    dec_shapes["dec.final_ln.b"] = (1, d_model)
    dec_shapes["dec.out.w"] = (d_model, tok.vocab_size)
    dec_shapes["dec.out.b"] = (1, tok.vocab_size)

    td = tokenizer_digest(tok)
    enc_params = _init_params(rng.split("init.encoder"), enc_shapes)
    dec_params = _init_params(rng.split("init.decoder"), dec_shapes)
    dec_params["embed"] = enc_params["embed"]  # shared table, one gradient stream
    enc = EncoderModel(dims, enc_params, td)
    dec = DecoderModel(dims, dec_params, td, lang_token_start=tok.lang_token(0))
    return enc, dec


def init_lm(
    rng: RngState,
    tok: LmTokenizer,
    d_model: int = 96,
    n_layers: int = 3,
    n_heads: int = 4,
    max_len: int = 64,
) -> LmModel:
    dims = TransformerDims(d_model, n_layers, n_heads, tok.vocab_size, max_len)
    shapes: dict[str, tuple[int, int]] = {"lm.embed": (tok.vocab_size, d_model)}
    for i in range(n_layers):
        shapes.update(_block_shapes(f"lm.l{i}", d_model, dims.d_ff))
    shapes["lm.final_ln.g"] = (1, d_model)
    shapes["lm.final_ln.b"] = (1, d_model)
    shapes["lm.out.w"] = (d_model, tok.vocab_size)
    shapes["lm.out.b"] = (1, tok.vocab_size)
    params = _init_params(rng.split("init.lm"), shapes)
    return LmModel(dims, params, tokenizer_digest(tok))


# ---------------------------------------------------------------------------
# forward passes


def _attend(p, ln: str, attn: str, x: Tensor, n_heads: int, mask=None, memory=None):
    # pre-norm residual attention; cross-attention keys/values come from the
    # raw memory rows, only the queries are normalized
    h = layer_norm(x, p[f"{ln}.g"], p[f"{ln}.b"])
    src = h if memory is None else memory
    q = matmul(h, p[f"{attn}.wq"])
    k = matmul(src, p[f"{attn}.wk"])
    v = matmul(src, p[f"{attn}.wv"])
    ctx = multi_head_attention(q, k, v, n_heads, mask)
    return add(x, matmul(ctx, p[f"{attn}.wo"]))


def _feed_forward(p, ln: str, ff: str, x: Tensor) -> Tensor:
    h = layer_norm(x, p[f"{ln}.g"], p[f"{ln}.b"])
    u = gelu(linear(h, p[f"{ff}.w1"], p[f"{ff}.b1"]))
    return add(x, linear(u, p[f"{ff}.w2"], p[f"{ff}.b2"]))


def _check_len(n: int, dims: TransformerDims) -> None:
    if n > dims.max_len:
        raise DomainError(f"sequence length {n} exceeds max_len {dims.max_len}")


def encode(model: EncoderModel, ids) -> Tensor:
    """Bidirectional encoding: one output row per input id."""
    CALLS["encode"] += 1
    ids = list(ids)
    if not ids:
        raise DegenerateInputError("encode needs at least one id")
    _check_len(len(ids), model.dims)
    p = model.params
    x = take_rows(p["embed"], ids)
    x = add_const(x, sinusoid_positions(len(ids), model.dims.d_model))
    for i in range(model.dims.n_layers):
        x = _attend(p, f"enc.l{i}.ln1", f"enc.l{i}.attn", x, model.dims.n_heads)
        x = _feed_forward(p, f"enc.l{i}.ln2", f"enc.l{i}.ff", x)
    return layer_norm(x, p["enc.final_ln.g"], p["enc.final_ln.b"])


def lm_forward(model: LmModel, prefix, ids) -> tuple[Tensor, Tensor]:
    """Causal forward over [soft prefix rows] + [embedded ids].

    Prefix rows land ahead of the ids and never touch the embedding table.
    Returns (logits, penultimate) restricted to the id positions; the
    penultimate states are the residual stream entering the last layer.
    """
    CALLS["lm_forward"] += 1
    if isinstance(prefix, np.ndarray):
        prefix = Tensor(prefix)
    ids = list(ids)
    if not ids:
        raise DegenerateInputError("lm_forward needs at least one id position")
    d = model.dims.d_model
    n_prefix = prefix.rows if prefix.data.size else 0
    if n_prefix and prefix.cols != d:
        raise DimensionError(f"prefix cols {prefix.cols} != d_model {d}")
    total = n_prefix + len(ids)
    _check_len(total, model.dims)
    p = model.params
    emb = take_rows(p["lm.embed"], ids)
    x = concat_rows([prefix, emb]) if n_prefix else emb
    x = add_const(x, sinusoid_positions(total, d))
    mask = causal_mask(total)
    penultimate = x
    for i in range(model.dims.n_layers):
        if i == model.dims.n_layers - 1:
            penultimate = x
        x = _attend(p, f"lm.l{i}.ln1", f"lm.l{i}.attn", x, model.dims.n_heads, mask)
        x = _feed_forward(p, f"lm.l{i}.ln2", f"lm.l{i}.ff", x)
    x = layer_norm(x, p["lm.final_ln.g"], p["lm.final_ln.b"])
    logits = linear(x, p["lm.out.w"], p["lm.out.b"])
    return slice_rows(logits, n_prefix, total), slice_rows(penultimate, n_prefix, total)


def decode_with_memory(model: DecoderModel, memory, target_ids) -> Tensor:
    """Teacher-forced decoder logits; cross-attention reads `memory` rows."""
    CALLS["decode_with_memory"] += 1
    if isinstance(memory, np.ndarray):
        memory = Tensor(memory)
    if memory.data.size == 0:
        raise DegenerateInputError("cross-attention needs at least one memory row")
    d = model.dims.d_model
    if memory.cols != d:
        raise DimensionError(f"memory cols {memory.cols} != d_model {d}")
    ids = list(target_ids)
    if not ids:
        raise DegenerateInputError("decoder needs at least one input id")
    if not model.lang_token_start <= ids[0] < model.dims.vocab_size:
        raise DomainError(f"decoder input must start with a language token, got {ids[0]}")
    _check_len(len(ids), model.dims)
    p = model.params
    x = take_rows(p["embed"], ids)
    x = add_const(x, sinusoid_positions(len(ids), d))
    mask = causal_mask(len(ids))
    for i in range(model.dims.n_layers):
        x = _attend(p, f"dec.l{i}.ln1", f"dec.l{i}.self", x, model.dims.n_heads, mask)
        x = _attend(p, f"dec.l{i}.ln2", f"dec.l{i}.cross", x, model.dims.n_heads, memory=memory)
        x = _feed_forward(p, f"dec.l{i}.ln3", f"dec.l{i}.ff", x)
    x = layer_norm(x, p["dec.final_ln.g"], p["dec.final_ln.b"])
    return linear(x, p["dec.out.w"], p["dec.out.b"])


def greedy_generate(model, context, max_len: int, stop_token: int) -> list[int]:
    """Argmax decoding; ties break to the lowest id (argmax takes the first).

    For a DecoderModel, context is (memory, start ids); for an LmModel it is
    (prefix rows, prompt ids). Returns the generated ids, including the stop
    token when it was produced within the budget.
    """
    CALLS["greedy_generate"] += 1
    if max_len < 1:
        raise DomainError(f"max_len must be >= 1, got {max_len}")
    if isinstance(model, DecoderModel):
        memory, start = context
        ids = list(start)
        step = lambda: decode_with_memory(model, memory, ids)
    elif isinstance(model, LmModel):
        prefix, start = context
        ids = list(start)
        step = lambda: lm_forward(model, prefix, ids)[0]
    else:
        raise DomainError(f"greedy_generate cannot drive {type(model).__name__}")
    out: list[int] = []
    while len(out) < max_len:
        logits = step()
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        ids.append(nxt)
        if nxt == stop_token:
            break
    return out


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    # epochs at whose start the learning rate halves
    lr_halve_at: tuple[int, ...] = ()
    clip_norm: float = 1.0
    holdout: int = 200
    max_gen: int = 16


def _check_loss(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"loss diverged to {value} at epoch {epoch} step {step}")


def _epoch_batches(rng: RngState, n: int, batch_size: int):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield [int(j) for j in order[i : i + batch_size]]


def pretrain_encdec(
    rng: RngState,
    corpus,
    tok: EncTokenizer,
    config: PretrainConfig = PretrainConfig(),
) -> tuple[EncoderModel, DecoderModel]:
    """Joint encoder-decoder training on x -> <lang(y)> y with EOS endpoints.

    The encoder always sees x followed by EOS so the decoder has an
    end-of-source landmark to align against. Returns both models frozen,
    with a training history attached (epoch losses, held-out exact match).
    """
    corpus = list(corpus)
    if len(corpus) <= config.holdout:
        raise ConfigError(f"corpus of {len(corpus)} cannot spare {config.holdout} holdout")
    train = corpus[: len(corpus) - config.holdout] if config.holdout else corpus
    held = corpus[len(corpus) - config.holdout :] if config.holdout else []
    enc, dec = init_encdec(rng, tok)
    union = dict(enc.params)
    union.update(dec.params)  # "embed" collapses to the one shared tensor
    opt = Adam(union, lr=config.lr)
    epoch_losses = []
    for e in range(config.epochs):
        if e in config.lr_halve_at:
            opt.lr *= 0.5
        order_rng = rng.split(f"encdec.epoch{e}")
        total, seen = 0.0, 0
        for step, batch in enumerate(_epoch_batches(order_rng, len(train), config.batch_size)):
            for j in batch:
                ex = train[j]
                mem = encode(enc, list(ex.x) + [tok.eos_id])
                dec_in = [tok.lang_token(ex.tgt_lang)] + list(ex.y)
                logits = decode_with_memory(dec, mem, dec_in)
                loss = cross_entropy(logits, list(ex.y) + [tok.eos_id])
                _check_loss(loss.item(), e, step)
                total += loss.item()
                seen += 1
                scale(loss, 1.0 / len(batch)).backward()
            clip_global_norm(list(union.values()), config.clip_norm)
            opt.step()
            for p in union.values():
                p.zero_grad()
        epoch_losses.append(total / max(seen, 1))
    enc.freeze()
    dec.freeze()
    em = holdout_exact_match(enc, dec, tok, held, config.max_gen) if held else None
    history = {"epoch_losses": epoch_losses, "holdout_em": em}
    enc.history = history
    dec.history = history
    return enc, dec


def holdout_exact_match(enc, dec, tok, examples, max_gen: int = 16) -> float:
    """Greedy-decode exact match of y + EOS over a sample of examples."""
    if not examples:
        raise DegenerateInputError("exact match over empty sample")
    hits = 0
    for ex in examples:
        mem = encode(enc, list(ex.x) + [tok.eos_id])
        out = greedy_generate(
            dec, (mem, [tok.lang_token(ex.tgt_lang)]), max_gen, tok.eos_id
        )
        hits += out == list(ex.y) + [tok.eos_id]
    return hits / len(examples)


def lm_sequence(tok: LmTokenizer, example) -> tuple[list[int], int]:
    """Token layout [input] [inst] [SEP] [answer] [EOS]; returns (ids, sep pos)."""
    inp = tok.tokenize(example.inp)
    ans = tok.tokenize(example.answer)
    inst = tok.inst_echo_id if example.task == TRANSLATE else tok.inst_sort_id
    ids = inp + [inst, tok.sep_id] + ans + [tok.eos_id]
    return ids, len(inp) + 1


def pretrain_lm(
    rng: RngState,
    corpus,
    tok: LmTokenizer,
    config: PretrainConfig = PretrainConfig(),
) -> LmModel:
    """Causal LM training on Base-language echo and sort instruction data.

    Cross-entropy is restricted to the answer region (everything after SEP,
    plus the closing EOS). Returns the model frozen, with held-out accuracy
    per task in the history.
    """
    corpus = list(corpus)
    if len(corpus) <= config.holdout:
        raise ConfigError(f"corpus of {len(corpus)} cannot spare {config.holdout} holdout")
    train = corpus[: len(corpus) - config.holdout] if config.holdout else corpus
    held = corpus[len(corpus) - config.holdout :] if config.holdout else []
    model = init_lm(rng, tok)
    opt = Adam(model.params, lr=config.lr)
    params = list(model.params.values())
    empty = np.zeros((0, model.dims.d_model))
    epoch_losses = []
    for e in range(config.epochs):
        if e in config.lr_halve_at:
            opt.lr *= 0.5
        order_rng = rng.split(f"lm.epoch{e}")
        total, seen = 0.0, 0
        for step, batch in enumerate(_epoch_batches(order_rng, len(train), config.batch_size)):
            for j in batch:
                ids, sep_pos = lm_sequence(tok, train[j])
                logits, _ = lm_forward(model, empty, ids[:-1])
                region = slice_rows(logits, sep_pos, len(ids) - 1)
                loss = cross_entropy(region, ids[sep_pos + 1 :])
                _check_loss(loss.item(), e, step)
                total += loss.item()
                seen += 1
                scale(loss, 1.0 / len(batch)).backward()
            clip_global_norm(params, config.clip_norm)
            opt.step()
            for p in params:
                p.zero_grad()
        epoch_losses.append(total / max(seen, 1))
    model.freeze()
    history = {"epoch_losses": epoch_losses}
    if held:
        history.update(lm_holdout_accuracy(model, tok, held, config.max_gen))
    model.history = history
    return model


def answer_symbols(tok: LmTokenizer, ids) -> list[int] | None:
    """Symbols of a well-formed generated answer, or None.

    Well-formed means content or merged tokens closed by EOS. Scoring at the
    symbol level keeps merge segmentation out of the comparison: two token
    sequences that spell the same symbols are the same answer.
    """
    if not ids or ids[-1] != tok.eos_id:
        return None
    body = list(ids[:-1])
    limit = tok.V + tok.n_merges
    if any(not (0 <= t < limit) for t in body):
        return None
    return tok.detokenize(body)


def lm_holdout_accuracy(model: LmModel, tok: LmTokenizer, examples, max_gen: int = 16) -> dict:
    """Greedy answer accuracy split by task tag (symbol-level comparison)."""
    hits = {TRANSLATE: [0, 0], INSTRUCT: [0, 0]}
    empty = np.zeros((0, model.dims.d_model))
    for ex in examples:
        ids, sep_pos = lm_sequence(tok, ex)
        prompt = ids[: sep_pos + 1]
        want = tok.detokenize(ids[sep_pos + 1 : -1])  # answer region minus EOS
        got = greedy_generate(model, (empty, prompt), max_gen, tok.eos_id)
        bucket = hits[ex.task]
        bucket[0] += answer_symbols(tok, got) == want
        bucket[1] += 1
    out = {}
    e, s = hits[TRANSLATE], hits[INSTRUCT]
    out["echo_acc"] = e[0] / e[1] if e[1] else None
    out["sort_acc"] = s[0] / s[1] if s[1] else None
    return out
