"""Mappings between model spaces and the composed encoder-LM-decoder forward.

The composite pipeline runs a frozen encoder, a frozen causal LM, and a
frozen-bodied decoder, stitched together by two trainable row-wise MLPs:
`map_enc` lifts encoder states into the LM space (consumed as a soft
prefix), and `map_dec` projects the LM's penultimate states down into the
decoder's memory space for cross-attention. Everything here is expressed
through the public model ops, so training and evaluation share one code
path for each leg.
"""

import numpy as np

from .checkpoint import load_checkpoint, params_digest, save_checkpoint
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    IntegrityError,
)
from .languages import INSTRUCT, TRANSLATE, EncTokenizer, LmTokenizer
from .models import (
    DecoderModel,
    EncoderModel,
    LmModel,
    decode_with_memory,
    encode,
    frozen_view,
    greedy_generate,
    lm_forward,
)
from .rng import RngState
from .tensor import Tensor, gelu, linear, slice_rows

from .checkpoint import tokenizer_digest


class MappingEnc:
    """2-layer MLP, d_e -> d_l -> d_l, applied independently to each row."""

    def __init__(self, params: dict[str, Tensor], d_in: int, d_out: int):
        self.params = params
        self.d_in = d_in
        self.d_out = d_out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def digest(self) -> int:
        return params_digest(self.params)


class MappingDec(MappingEnc):
    """Two stacked 2-layer MLP blocks: d_l -> d_l, then d_l -> d_d."""


def _mlp_params(rng: RngState, prefix: str, widths: list[tuple[int, int]]):
    params = {}
    for i, (r, c) in enumerate(widths, start=1):
        params[f"{prefix}.w{i}"] = Tensor(rng.normal(r, c) * 0.05, requires_grad=True)
        params[f"{prefix}.b{i}"] = Tensor(np.zeros((1, c)), requires_grad=True)
    return params


def init_mapping_enc(rng: RngState, d_e: int = 64, d_l: int = 96) -> MappingEnc:
    params = _mlp_params(rng.split("init.map_enc"), "map_enc", [(d_e, d_l), (d_l, d_l)])
    return MappingEnc(params, d_e, d_l)


def init_mapping_dec(rng: RngState, d_l: int = 96, d_d: int = 64) -> MappingDec:
    widths = [(d_l, d_l), (d_l, d_l), (d_l, d_d), (d_d, d_d)]
    params = _mlp_params(rng.split("init.map_dec"), "map_dec", widths)
    return MappingDec(params, d_l, d_d)


def _as_tensor(H) -> Tensor:
    return H if isinstance(H, Tensor) else Tensor(H)


def map_enc(m: MappingEnc, H) -> Tensor:
    """Row-wise lift into the LM space."""
    H = _as_tensor(H)
    if H.cols != m.d_in:
        raise DimensionError(f"map_enc expects {m.d_in} cols, got {H.cols}")
    p = m.params
    return linear(gelu(linear(H, p["map_enc.w1"], p["map_enc.b1"])), p["map_enc.w2"], p["map_enc.b2"])


def map_dec(m: MappingDec, H) -> Tensor:
    """Row-wise projection into the decoder memory space."""
    H = _as_tensor(H)
    if H.cols != m.d_in:
        raise DimensionError(f"map_dec expects {m.d_in} cols, got {H.cols}")
    p = m.params
    h = linear(gelu(linear(H, p["map_dec.w1"], p["map_dec.b1"])), p["map_dec.w2"], p["map_dec.b2"])
    return linear(gelu(linear(h, p["map_dec.w3"], p["map_dec.b3"])), p["map_dec.w4"], p["map_dec.b4"])


def cross_attention_names(params: dict[str, Tensor]) -> list[str]:
    """Decoder parameters retrained alongside the bridge mappings.

    The group is each layer's cross-attention projections plus the layer
    norm feeding them (ln2): the norm is part of the same sublayer, and
    freezing it while retraining the projections would pin the query
    geometry to the pretraining solution.
    """
    return sorted(
        n for n in params
        if n.startswith("dec.l") and (".cross." in n or ".ln2." in n)
    )


def decoder_body_names(params: dict[str, Tensor]) -> list[str]:
    cross = set(cross_attention_names(params))
    return sorted(n for n in params if n not in cross)


class CompositeModel:
    """Frozen encoder + LM + decoder body, bridged by trainable mappings."""

    def __init__(
        self,
        encoder: EncoderModel,
        lm: LmModel,
        decoder: DecoderModel,
        mapping_enc: MappingEnc,
        mapping_dec: MappingDec,
        enc_tok: EncTokenizer,
        lm_tok: LmTokenizer,
    ):
        if mapping_enc.d_in != encoder.dims.d_model:
            raise ConfigError("mapping_enc input width must match the encoder")
        if mapping_enc.d_out != lm.dims.d_model:
            raise ConfigError("mapping_enc output width must match the LM")
        if mapping_dec.d_in != lm.dims.d_model:
            raise ConfigError("mapping_dec input width must match the LM")
        if mapping_dec.d_out != decoder.dims.d_model:
            raise ConfigError("mapping_dec output width must match the decoder")
        if encoder.tok_digest != tokenizer_digest(enc_tok):
            raise IntegrityError("encoder checkpoint was built for a different tokenizer")
        if lm.tok_digest != tokenizer_digest(lm_tok):
            raise IntegrityError("lm checkpoint was built for a different tokenizer")
        self.encoder = encoder
        self.lm = lm
        self.decoder = decoder
        self.mapping_enc = mapping_enc
        self.mapping_dec = mapping_dec
        self.enc_tok = enc_tok
        self.lm_tok = lm_tok
        self.templates: dict[str, tuple[int, ...]] = {
            TRANSLATE: (lm_tok.inst_echo_id,),
            INSTRUCT: (lm_tok.inst_sort_id,),
        }
        self.frozen_digests = self.compute_frozen_digests()

    def compute_frozen_digests(self) -> dict[str, int]:
        return {
            "encoder": self.encoder.digest(),
            "lm": self.lm.digest(),
            "decoder_body": params_digest(
                self.decoder.params, decoder_body_names(self.decoder.params)
            ),
        }

    def check_frozen(self) -> list[str]:
        """Names of frozen components whose bytes drifted since construction."""
        now = self.compute_frozen_digests()
        return sorted(k for k in now if now[k] != self.frozen_digests[k])

    def trainable_params(self) -> dict[str, Tensor]:
        out = dict(self.mapping_enc.params)
        out.update(self.mapping_dec.params)
        for n in cross_attention_names(self.decoder.params):
            out[n] = self.decoder.params[n]
        return out


def compose_understand(
    model: CompositeModel,
    x_ids,
    task: str = TRANSLATE,
    z_ids=None,
    max_gen: int = 16,
    train: bool = False,
    include_prompt_states: bool = False,
):
    """Encoder -> map_enc -> LM leg.

    With teacher ids (z includes its EOS), returns (logits, H_z') where both
    cover exactly the |z| positions that predict each z token: the SEP row
    and the first |z|-1 teacher rows. With z_ids=None, greedy-decodes z from
    the soft prefix and returns (z, H_z') for the same row convention, which
    makes teacher-forced scoring and generation bit-consistent.

    include_prompt_states widens H_z' to the instruction and SEP rows as
    well (soft-prefix rows are LM inputs, not states, and stay out); logits
    keep the |z| convention either way.
    """
    if task not in model.templates:
        raise DomainError(f"unknown task {task!r}")
    me = model.mapping_enc
    if not train:
        me = MappingEnc(frozen_view(me.params), me.d_in, me.d_out)
    H_x = encode(model.encoder, list(x_ids) + [model.enc_tok.eos_id])
    prefix = map_enc(me, H_x)
    inst = list(model.templates[task])
    tok = model.lm_tok
    generated = None
    if z_ids is None:
        generated = greedy_generate(
            model.lm, (prefix.data, inst + [tok.sep_id]), max_gen, tok.eos_id
        )
        z = generated
    else:
        z = list(z_ids)
    if not z:
        raise DegenerateInputError("teacher z must contain at least one token")
    ids = inst + [tok.sep_id] + z[:-1]
    logits_all, pen_all = lm_forward(model.lm, prefix, ids)
    lo, hi = len(inst), len(ids)
    logits = slice_rows(logits_all, lo, hi)
    H_zprime = slice_rows(pen_all, 0 if include_prompt_states else lo, hi)
    return (generated if generated is not None else logits), H_zprime


def compose_generate(
    model: CompositeModel,
    H_zprime,
    tgt_lang_id: int,
    y_ids=None,
    max_gen: int = 16,
    train: bool = False,
):
    """map_dec -> decoder leg: teacher-forced logits, or greedy y generation."""
    md = model.mapping_dec
    if not train:
        md = MappingDec(frozen_view(md.params), md.d_in, md.d_out)
    memory = map_dec(md, H_zprime)
    start = [model.enc_tok.lang_token(tgt_lang_id)]
    if y_ids is None:
        return greedy_generate(
            model.decoder, (memory.data, start), max_gen, model.enc_tok.eos_id
        )
    return decode_with_memory(model.decoder, memory, start + list(y_ids))


def end_to_end(
    model: CompositeModel,
    x_ids,
    tgt_lang_id: int,
    task: str = TRANSLATE,
    max_gen: int = 16,
) -> list[int]:
    """Full pipeline on one input; pure function of the frozen weights."""
    z, H_zprime = compose_understand(model, x_ids, task, max_gen=max_gen)
    return compose_generate(model, H_zprime.data, tgt_lang_id, max_gen=max_gen)


def pivot_encoder_states(model: CompositeModel, z_ids) -> np.ndarray:
    """Encoder states of the pivot sequence, the alignment target for map_dec.

    z arrives LM-tokenized; merge tokens are expanded back to symbols, which
    are Base-language encoder ids as-is. Special tokens (EOS in the gold
    teacher, anything a free-running LM emitted) are dropped first.
    """
    tok = model.lm_tok
    core = [t for t in z_ids if 0 <= t < tok.V + tok.n_merges]
    if not core:
        raise DegenerateInputError("pivot has no content tokens")
    symbols = tok.detokenize(core)
    H = encode(model.encoder, symbols + [model.enc_tok.eos_id])
    return H.data


# ---------------------------------------------------------------------------
# composite checkpointing: trainable tensors plus bindings to the frozen trio


def save_composite(model: CompositeModel, path: str) -> int:
    params = model.trainable_params()
    meta = {
        "d_e": model.encoder.dims.d_model,
        "d_l": model.lm.dims.d_model,
        "d_d": model.decoder.dims.d_model,
        "frozen": {k: f"{v:016x}" for k, v in model.frozen_digests.items()},
    }
    return save_checkpoint(path, "composite", meta, params)


def load_composite(
    path: str,
    encoder: EncoderModel,
    lm: LmModel,
    decoder: DecoderModel,
    enc_tok: EncTokenizer,
    lm_tok: LmTokenizer,
) -> CompositeModel:
    """Rebuild a composite around the given frozen models.

    The checkpoint's recorded digests must match the models supplied here;
    a mismatch means the trainables were tuned against different weights.
    """
    header, params = load_checkpoint(path)
    if header["kind"] != "composite":
        raise IntegrityError(f"expected a composite checkpoint, found {header['kind']!r}")
    meta = header["meta"]
    me = MappingEnc(
        {n: params[n] for n in params if n.startswith("map_enc.")},
        meta["d_e"], meta["d_l"],
    )
    md = MappingDec(
        {n: params[n] for n in params if n.startswith("map_dec.")},
        meta["d_l"], meta["d_d"],
    )
    for n in cross_attention_names(decoder.params):
        if n not in params:
            raise IntegrityError(f"composite checkpoint lacks {n}")
        if params[n].shape != decoder.params[n].shape:
            raise IntegrityError(f"shape drift for {n}")
        decoder.params[n].data = params[n].data
    model = CompositeModel(encoder, lm, decoder, me, md, enc_tok, lm_tok)
    recorded = {k: int(v, 16) for k, v in meta["frozen"].items()}
    if recorded != model.frozen_digests:
        raise IntegrityError(
            "frozen-model digests do not match the composite checkpoint"
        )
    return model
