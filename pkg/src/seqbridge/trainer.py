"""Staged bridge training: loss schedules, freezing sets, run management.

Three stages train different parameter groups against different loss
subsets. Everything outside the stage's trainable set must come out
bit-identical, and the run manifest records enough digests to prove it.

Loss terms are gated by both the stage plan and their weights: a term with
weight zero is never evaluated, so a zero-weight run is bit-identical to a
run with the term removed (the no_ot ablation relies on this).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import models as _models
from . import ot as _ot
from .bridge import (
    CompositeModel,
    compose_understand,
    cross_attention_names,
    init_mapping_enc,
    init_mapping_dec,
    map_dec,
    save_composite,
)
from .checkpoint import params_digest
from .config import PipelineConfig
from .errors import ConfigError, IntegrityError, TrainingError
from .languages import (
    EncTokenizer,
    LmTokenizer,
    gen_instruct_corpus,
    gen_lm_corpus,
    gen_translate_corpus,
    make_languages,
    make_merge_table,
    split_languages,
)
from .models import (
    DecoderModel,
    EncoderModel,
    LmModel,
    PretrainConfig,
    decode_with_memory,
    encode,
    greedy_generate,
    pretrain_encdec,
    pretrain_lm,
)
from .optim import Adam, clip_global_norm
from .rng import RngState
from .tensor import Tensor, add, cross_entropy, scale

GROUPS = ("mapping_enc", "mapping_dec", "decoder_cross_attention")
LOSSES = ("CE_LLM", "CE_Dec", "OT")
CORPORA = ("translate", "instruct")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the overall objective: lam1 CE_LLM + lam2 CE_Dec + lam3 OT."""

    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 6.0

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ConfigError("loss weights must be nonnegative")

    def of(self, loss: str) -> float:
        return {"CE_LLM": self.lam1, "CE_Dec": self.lam2, "OT": self.lam3}[loss]


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable: tuple[str, ...]
    losses: tuple[str, ...]
    corpus: str
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3

    def __post_init__(self):
        if not self.trainable or not set(self.trainable) <= set(GROUPS):
            raise ConfigError(f"bad trainable set {self.trainable}")
        if not self.losses or not set(self.losses) <= set(LOSSES):
            raise ConfigError(f"bad loss set {self.losses}")
        if self.corpus not in CORPORA:
            raise ConfigError(f"unknown corpus selector {self.corpus!r}")
        if self.stage < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("stage, epochs and batch size must be positive")


def canonical_plan(stage: int, epochs: int = 3, batch_size: int = 32, lr: float = 1e-3) -> StagePlan:
    """The standard three-stage schedule: which groups train, which losses fire."""
    table = {
        1: (("mapping_enc", "mapping_dec", "decoder_cross_attention"),
            ("CE_LLM", "CE_Dec", "OT"), "translate"),
        2: (("mapping_enc",), ("CE_LLM",), "instruct"),
        3: (("mapping_dec", "decoder_cross_attention"), ("CE_Dec", "OT"), "instruct"),
    }
    if stage not in table:
        raise ConfigError(f"no canonical stage {stage}")
    trainable, losses, corpus = table[stage]
    return StagePlan(stage, trainable, losses, corpus, epochs, batch_size, lr)


def plans_for(config: PipelineConfig) -> list[StagePlan]:
    """Stage schedule for a config, including its ablation variant."""
    e, b, lr = config.stage_epochs, config.batch_size, config.stage_lr
    if config.variant in ("full", "no_ot"):
        return [canonical_plan(s, e, b, lr) for s in (1, 2, 3)]
    if config.variant == "no_stage1":
        return [canonical_plan(s, e, b, lr) for s in (2, 3)]
    if config.variant == "no_decoder":
        # encoder-side augmentation only: the decoder leg never trains
        return [
            StagePlan(1, ("mapping_enc",), ("CE_LLM",), "translate", e, b, lr),
            StagePlan(2, ("mapping_enc",), ("CE_LLM",), "instruct", e, b, lr),
            StagePlan(3, ("mapping_enc",), ("CE_LLM",), "instruct", e, b, lr),
        ]
    if config.variant == "joint23":
        # one joint stage replaces stages 2 and 3 at equal total compute,
        # so the comparison isolates the schedule, not the budget
        merged = StagePlan(
            2,
            ("mapping_enc", "mapping_dec", "decoder_cross_attention"),
            ("CE_LLM", "CE_Dec", "OT"),
            "instruct",
            2 * e,
            b,
            lr,
        )
        return [canonical_plan(1, e, b, lr), merged]
    raise ConfigError(f"unknown variant {config.variant!r}")


def group_params(model: CompositeModel, groups) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for g in groups:
        if g == "mapping_enc":
            out.update(model.mapping_enc.params)
        elif g == "mapping_dec":
            out.update(model.mapping_dec.params)
        elif g == "decoder_cross_attention":
            for n in cross_attention_names(model.decoder.params):
                out[n] = model.decoder.params[n]
        else:
            raise ConfigError(f"unknown parameter group {g!r}")
    return out


def _group_digests(model: CompositeModel) -> dict[str, str]:
    cross = cross_attention_names(model.decoder.params)
    return {
        "mapping_enc": f"{params_digest(model.mapping_enc.params):016x}",
        "mapping_dec": f"{params_digest(model.mapping_dec.params):016x}",
        "decoder_cross_attention": f"{params_digest(model.decoder.params, cross):016x}",
    }


@dataclass
class StageReport:
    stage: int
    variant: str
    trainable: tuple[str, ...]
    losses: tuple[str, ...]
    corpus: str
    n_train: int
    curves: dict[str, list[float]] = field(default_factory=dict)
    total_curve: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    wall_seconds: float = 0.0
    counters: dict[str, int] = field(default_factory=dict)
    digests_before: dict[str, str] = field(default_factory=dict)
    digests_after: dict[str, str] = field(default_factory=dict)
    lm_mismatch_rate: float | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "stage": self.stage,
            "variant": self.variant,
            "trainable": list(self.trainable),
            "losses": list(self.losses),
            "corpus": self.corpus,
            "n_train": self.n_train,
            "curves": self.curves,
            "total_curve": self.total_curve,
            "final_loss": self.final_loss,
            "counters": self.counters,
            "digests_before": self.digests_before,
            "digests_after": self.digests_after,
            "lm_mismatch_rate": self.lm_mismatch_rate,
        }
        if include_timing:
            d["wall_seconds"] = self.wall_seconds
        return d


def _snapshot_counters() -> dict[str, int]:
    snap = {f"models.{k}": v for k, v in _models.CALLS.items()}
    snap.update({f"ot.{k}": v for k, v in _ot.CALLS.items()})
    return snap


def lm_echo_mismatch_rate(model: CompositeModel, corpus, limit: int = 200) -> float:
    """Fraction of pivots the frozen LM fails to reproduce under the echo task.

    The bridged pivot z is defined as "LM-generated, falling back to the gold
    pivot on mismatch", which is value-identical to the gold pivot throughout;
    this statistic records how often the fallback fires so the run report
    still reflects the LM's own competence.
    """
    tok = model.lm_tok
    empty = np.zeros((0, model.lm.dims.d_model))
    misses = 0
    sample = corpus[: min(limit, len(corpus))]
    for ex in sample:
        gold = tok.tokenize(list(ex.z)) + [tok.eos_id]
        prompt = tok.tokenize(list(ex.z)) + [tok.inst_echo_id, tok.sep_id]
        got = greedy_generate(model.lm, (empty, prompt), len(gold) + 4, tok.eos_id)
        misses += got != gold
    return misses / max(len(sample), 1)


def run_stage(
    model: CompositeModel,
    plan: StagePlan,
    weights: LossWeights,
    corpus,
    rng: RngState,
    variant: str = "full",
    z_source: str = "generated",
    include_prompt_states: bool = False,
) -> StageReport:
    """One training stage over a task corpus.

    Per example: teacher-forced compose_understand, then only the loss legs
    the plan activates (a zero weight deactivates a leg entirely). Gradients
    are accumulated per batch, clipped at global norm 1.0, and applied with
    Adam to the plan's trainable groups alone. Frozen-core digests and the
    per-batch gradient accumulators of everything else are verified.
    """
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("empty stage corpus")
    active = [l for l in plan.losses if weights.of(l) > 0]
    if not active:
        raise ConfigError(f"stage {plan.stage} has no active losses under these weights")
    trained = group_params(model, plan.trainable)
    frozen_named = {}
    for src in (model.encoder.params, model.lm.params, model.decoder.params):
        for n, p in src.items():
            if n not in trained or p is not trained.get(n):
                frozen_named.setdefault(n, p)
    for g in GROUPS:
        if g not in plan.trainable:
            for n, p in group_params(model, (g,)).items():
                frozen_named.setdefault(f"{g}:{n}", p)
    frozen_list = list(frozen_named.items())

    report = StageReport(
        stage=plan.stage,
        variant=variant,
        trainable=plan.trainable,
        losses=plan.losses,
        corpus=plan.corpus,
        n_train=len(corpus),
        digests_before=_group_digests(model),
    )
    if plan.corpus == "translate" and z_source == "generated":
        report.lm_mismatch_rate = lm_echo_mismatch_rate(model, corpus)

    counters_before = _snapshot_counters()
    t0 = time.time()
    enc_tok, lm_tok = model.enc_tok, model.lm_tok
    need_memory = bool({"CE_Dec", "OT"} & set(active))
    params = list(trained.values())
    # the whole bridge-parameter universe is stage-managed: exactly the
    # plan's groups require grad while training, nothing does afterwards
    universe = list(model.trainable_params().values())
    trained_ids = {id(p) for p in params}
    for p in universe:
        p.requires_grad = id(p) in trained_ids
        p.zero_grad()
    opt = Adam(trained, lr=plan.lr)
    try:
        curves: dict[str, list[float]] = {l: [] for l in active}
        for e in range(plan.epochs):
            order_rng = rng.split(f"stage{plan.stage}.epoch{e}")
            sums = {l: 0.0 for l in active}
            total_sum, seen = 0.0, 0
            for step, batch in enumerate(
                _models._epoch_batches(order_rng, len(corpus), plan.batch_size)
            ):
                for j in batch:
                    ex = corpus[j]
                    z_lm = lm_tok.tokenize(list(ex.z)) + [lm_tok.eos_id]
                    logits, H_z = compose_understand(
                        model,
                        ex.x,
                        ex.task,
                        z_ids=z_lm,
                        train=True,
                        include_prompt_states=include_prompt_states,
                    )
                    parts: dict[str, Tensor] = {}
                    if "CE_LLM" in active:
                        parts["CE_LLM"] = cross_entropy(logits, z_lm)
                    if need_memory:
                        memory = map_dec(model.mapping_dec, H_z)
                        if "CE_Dec" in active:
                            dec_in = [enc_tok.lang_token(ex.tgt_lang)] + list(ex.y)
                            dec_logits = decode_with_memory(model.decoder, memory, dec_in)
                            parts["CE_Dec"] = cross_entropy(
                                dec_logits, list(ex.y) + [enc_tok.eos_id]
                            )
                        if "OT" in active:
                            target = encode(
                                model.encoder, list(ex.z) + [enc_tok.eos_id]
                            ).data
                            parts["OT"] = _ot.ot_loss(target, memory)
                    loss = None
                    example_total = 0.0
                    for name, term in parts.items():
                        value = term.item()
                        if not np.isfinite(value):
                            raise TrainingError(
                                f"stage {plan.stage} epoch {e} batch {step}: "
                                f"{name} diverged to {value}"
                            )
                        sums[name] += value
                        example_total += weights.of(name) * value
                        weighted = scale(term, weights.of(name))
                        loss = weighted if loss is None else add(loss, weighted)
                    total_sum += example_total
                    seen += 1
                    scale(loss, 1.0 / len(batch)).backward()
                drifted = [n for n, p in frozen_list if p.grad is not None]
                if drifted:
                    raise IntegrityError(
                        f"frozen parameters accumulated gradient: {drifted[:4]}"
                    )
                frozen_checks += 1
                clip_global_norm(params, 1.0)
                opt.step()
                for p in params:
                    p.zero_grad()
            for l in active:
                curves[l].append(sums[l] / max(seen, 1))
            report.total_curve.append(total_sum / max(seen, 1))
        report.curves = curves
        report.final_loss = report.total_curve[-1]
    finally:
        for p in universe:
            p.requires_grad = False
            p.zero_grad()
    report.wall_seconds = time.time() - t0
    after = _snapshot_counters()
    report.counters = {k: after[k] - counters_before[k] for k in after}
    report.digests_after = _group_digests(model)
    for g in GROUPS:
        if g not in plan.trainable and report.digests_after[g] != report.digests_before[g]:
            raise IntegrityError(f"untrained group {g} changed during stage {plan.stage}")
    drifted_cores = model.check_frozen()
    if drifted_cores:
        raise IntegrityError(f"frozen cores drifted during stage {plan.stage}: {drifted_cores}")
    return report


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class RunManifest:
    """Reproducibility record: everything needed to audit a pipeline run."""

    config: dict
    config_digest: str
    variant: str
    data_seed: int
    model_seeds: dict[str, str]
    tuned_languages: list[int]
    untuned_languages: list[int]
    frozen_digests: dict[str, str]
    stage_reports: list[StageReport] = field(default_factory=list)
    pretrain: dict = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "config_digest": self.config_digest,
            "variant": self.variant,
            "data_seed": self.data_seed,
            "model_seeds": self.model_seeds,
            "tuned_languages": self.tuned_languages,
            "untuned_languages": self.untuned_languages,
            "frozen_digests": self.frozen_digests,
            "stage_reports": [r.to_dict(include_timing) for r in self.stage_reports],
            "pretrain": self.pretrain,
            "checkpoints": self.checkpoints,
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        else:
            # wall clocks are machine noise; drop them at both nesting levels
            # so repeat runs compare byte-equal
            d["pretrain"] = {
                k: (
                    {kk: vv for kk, vv in v.items() if kk != "wall_seconds"}
                    if isinstance(v, dict)
                    else v
                )
                for k, v in self.pretrain.items()
                if k != "wall_seconds"
            }
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2)


def build_world(config: PipelineConfig):
    """Language specs, tokenizers and the tuned/untuned split for a config."""
    rng = RngState(config.seed)
    langs = make_languages(rng.split("langs"), config.v, config.n_cipher)
    merges = make_merge_table(rng.split("merges"), config.v, config.n_merges)
    enc_tok = EncTokenizer(config.v, len(langs))
    lm_tok = LmTokenizer(config.v, merges)
    tuned, untuned = split_languages(langs, config.tuned_fraction)
    return langs, enc_tok, lm_tok, tuned, untuned


def pretrain_cores(config: PipelineConfig):
    """Train the frozen encoder-decoder and LM the pipeline composes.

    Returns (encoder, lm, decoder); each carries its pretraining history.
    """
    rng = RngState(config.seed)
    langs, enc_tok, lm_tok, _, _ = build_world(config)
    corpus = gen_translate_corpus(
        rng.split("encdec.data"), langs, config.encdec_corpus, config.length_range
    )
    t0 = time.time()
    enc, dec = pretrain_encdec(
        rng.split("encdec.train"),
        corpus,
        enc_tok,
        PretrainConfig(
            epochs=config.encdec_epochs,
            lr=config.encdec_lr,
            holdout=config.holdout,
            max_gen=config.max_gen,
        ),
    )
    enc.history["wall_seconds"] = time.time() - t0  # dec shares the dict
    t0 = time.time()
    lm_corpus = gen_lm_corpus(
        rng.split("lm.data"),
        config.v,
        config.lm_corpus,
        config.length_range,
        echo_fraction=config.lm_echo_fraction,
    )
    lm = pretrain_lm(
        rng.split("lm.train"),
        lm_corpus,
        lm_tok,
        PretrainConfig(
            epochs=config.lm_epochs,
            lr=config.lm_lr,
            lr_halve_at=tuple(config.lm_lr_halve_at),
            holdout=config.holdout,
            max_gen=config.max_gen,
        ),
    )
    lm.history["wall_seconds"] = time.time() - t0
    return enc, lm, dec


def clone_cores(cores):
    """Bit-exact private copies of the frozen trio.

    The pipeline trains decoder cross-attention in place, so a caller
    sharing one pretrained trio across several runs must not hand over the
    originals. Preserves the encoder-decoder embedding-table sharing.
    """
    enc, lm, dec = cores
    enc_p = {n: Tensor(p.data.copy()) for n, p in enc.params.items()}
    dec_p = {
        n: (enc_p["embed"] if n == "embed" and p is enc.params.get("embed") else Tensor(p.data.copy()))
        for n, p in dec.params.items()
    }
    lm_p = {n: Tensor(p.data.copy()) for n, p in lm.params.items()}
    out = (
        EncoderModel(enc.dims, enc_p, enc.tok_digest),
        LmModel(lm.dims, lm_p, lm.tok_digest),
        DecoderModel(dec.dims, dec_p, dec.tok_digest, dec.lang_token_start),
    )
    for fresh, old in zip(out, (enc, lm, dec)):
        fresh.freeze()
        fresh.history = old.history
    return out


def stage_corpus(config: PipelineConfig, plan: StagePlan, langs, tuned):
    """Deterministic stage corpus over Base plus the tuned cipher languages."""
    pool = [langs[0]] + [langs[i] for i in tuned]
    rng = RngState(config.seed).split(f"stage{plan.stage}.data")
    count = config.stage1_count if plan.stage == 1 else config.stage23_count
    if plan.corpus == "translate":
        return gen_translate_corpus(rng, pool, count, config.length_range)
    return gen_instruct_corpus(rng, pool, count, config.length_range)


def run_pipeline(
    config: PipelineConfig,
    cores=None,
    workdir: str | None = None,
) -> tuple[CompositeModel, RunManifest]:
    """Execute the config's stage schedule and return the bridged model.

    cores: optional (encoder, lm, decoder) triple of pretrained frozen
    models, so several runs (ablations, repeats) can share one pretraining.
    Without it the cores are pretrained here, per the config.
    """
    t_start = time.time()
    langs, enc_tok, lm_tok, tuned, untuned = build_world(config)
    pretrain_info: dict = {}
    if cores is None:
        t0 = time.time()
        encoder, lm, decoder = pretrain_cores(config)
        pretrain_info = {
            "encdec": encoder.history,
            "lm": lm.history,
            "wall_seconds": time.time() - t0,
        }
    else:
        encoder, lm, decoder = clone_cores(cores)
    rng = RngState(config.seed)
    model = CompositeModel(
        encoder,
        lm,
        decoder,
        init_mapping_enc(rng.split("mapping_enc")),
        init_mapping_dec(rng.split("mapping_dec")),
        enc_tok,
        lm_tok,
    )
    weights = LossWeights(config.lam1, config.lam2, config.lam3)
    manifest = RunManifest(
        config=json.loads(config.to_json()),
        config_digest=f"{config.digest():016x}",
        variant=config.variant,
        data_seed=config.seed,
        model_seeds={
            "mapping_enc": f"{RngState(config.seed).split('mapping_enc').seed:016x}",
            "mapping_dec": f"{RngState(config.seed).split('mapping_dec').seed:016x}",
        },
        tuned_languages=list(tuned),
        untuned_languages=list(untuned),
        frozen_digests={k: f"{v:016x}" for k, v in model.frozen_digests.items()},
        pretrain=pretrain_info,
    )
    for plan in plans_for(config):
        corpus = stage_corpus(config, plan, langs, tuned)
        report = run_stage(
            model,
            plan,
            weights,
            corpus,
            rng.split(f"stage{plan.stage}.train"),
            variant=config.variant,
            z_source=config.z_source,
            include_prompt_states=config.include_prompt_states,
        )
        manifest.stage_reports.append(report)
        manifest.wall_clock[f"stage{plan.stage}"] = report.wall_seconds
        if workdir is not None:
            os.makedirs(workdir, exist_ok=True)
            name = f"stage{plan.stage}.ckpt"
            save_composite(model, os.path.join(workdir, name))
            # basename only: manifests stay byte-comparable across workdirs
            manifest.checkpoints[f"stage{plan.stage}"] = name
    manifest.wall_clock["total"] = time.time() - t_start
    if workdir is not None:
        with open(os.path.join(workdir, "manifest.json"), "w") as f:
            f.write(manifest.to_json())
        with open(os.path.join(workdir, "config.json"), "w") as f:
            f.write(config.to_json())
    return model, manifest


def build_ablation(base: PipelineConfig, variant: str) -> PipelineConfig:
    """Derive an ablation config; `full` is the identity."""
    if variant == "full":
        return base.replace(variant="full")
    if variant == "no_ot":
        return base.replace(variant="no_ot", lam3=0.0)
    if variant in ("no_decoder", "no_stage1", "joint23"):
        return base.replace(variant=variant)
    raise ConfigError(f"unknown ablation variant {variant!r}")
