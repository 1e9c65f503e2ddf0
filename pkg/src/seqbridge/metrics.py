"""Metrics and experiment suites for the bridged pipeline.

Exact match is the headline metric throughout: synthetic references are
unique, so token equality is the faithful analogue of task accuracy.
bleu_lite exists for graded translation comparisons, language_identity for
the language-on-demand checks, and alignment_gap as a scalar stand-in for
representation-overlap pictures.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .bridge import CompositeModel, compose_understand, end_to_end, map_dec, pivot_encoder_states
from .errors import ConfigError, DegenerateInputError, DimensionError, IntegrityError
from .languages import (
    INSTRUCT,
    TRANSLATE,
    LanguageSpec,
    gen_pair_corpus,
    render,
)
from .models import answer_symbols, encode, greedy_generate
from .ot import ot_loss
from .rng import RngState

PASS, FAIL, MIXED = "pass", "fail", "mixed"


# ---------------------------------------------------------------------------
# core metrics


def exact_match(hypotheses, references, specials=()) -> float:
    """Fraction of pairs equal token-for-token after dropping `specials`."""
    hyps, refs = list(hypotheses), list(references)
    if len(hyps) != len(refs):
        raise DimensionError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise DegenerateInputError("exact match over empty lists")
    drop = set(specials)
    hits = 0
    for h, r in zip(hyps, refs):
        hits += [t for t in h if t not in drop] == [t for t in r if t not in drop]
    return hits / len(hyps)


def _ngrams(ids, n: int) -> Counter:
    return Counter(tuple(ids[i : i + n]) for i in range(len(ids) - n + 1))


def bleu_lite(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU with add-one smoothing on n >= 2 and a brevity penalty.

    Geometric mean of modified n-gram precisions; counts are pooled over the
    corpus before the ratio is taken, so long and short sentences weigh by
    their n-gram mass.
    """
    hyps, refs = [list(h) for h in hypotheses], [list(r) for r in references]
    if not hyps:
        raise DegenerateInputError("bleu over an empty hypothesis set")
    if len(hyps) != len(refs) or any(not r for r in refs):
        raise DimensionError("need one nonempty reference per hypothesis")
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched, total = 0, 0
        for h, r in zip(hyps, refs):
            hg, rg = _ngrams(h, n), _ngrams(r, n)
            matched += sum(min(c, rg[g]) for g, c in hg.items())
            total += max(len(h) - n + 1, 0)
        smooth = 1 if n >= 2 else 0
        p = (matched + smooth) / (total + smooth) if (total + smooth) else 0.0
        if p == 0.0:
            return 0.0
        log_sum += math.log(p)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / max_n)


def language_identity(ids, claimed_lang_id: int, tok) -> str:
    """Exact language check over content tokens; specials are ignored.

    Empty content passes vacuously: an output of pure specials asserts no
    language at all, and the accuracy metric will catch it separately.
    """
    langs = {tok.language_of(t) for t in ids if tok.is_content(t)}
    if not langs:
        return PASS
    if len(langs) > 1:
        return MIXED
    return PASS if langs == {claimed_lang_id} else FAIL


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-direction metric values plus the invariant-checked aggregate."""

    name: str
    config_digest: str = ""
    values: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        total = sum(self.values[k] * self.counts[k] for k in self.values)
        n = self.sample_count
        return total / n if n else float("nan")

    @property
    def sample_count(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "metric": self.name,
            "config_digest": self.config_digest,
            "values": self.values,
            "counts": self.counts,
            "aggregate": self.aggregate,
            "sample_count": self.sample_count,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        width = max((len(k) for k in self.values), default=4)
        lines = [f"{self.name}  (n={self.sample_count})"]
        for k in sorted(self.values):
            lines.append(f"  {k:<{width}}  {self.values[k]:.4f}  ({self.counts[k]})")
        lines.append(f"  {'aggregate':<{width}}  {self.aggregate:.4f}")
        return "\n".join(lines)


@dataclass
class OnDemandMatrix:
    """Accuracy by (input language, requested output language)."""

    input_langs: list[int]
    output_langs: list[int]
    cells: dict[tuple[int, int], float] = field(default_factory=dict)
    identity_rates: dict[tuple[int, int], float] = field(default_factory=dict)
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def row_spread(self, input_lang: int) -> float:
        row = [self.cells[(input_lang, o)] for o in self.output_langs]
        return max(row) - min(row)

    def to_csv(self) -> str:
        head = "input/output," + ",".join(str(o) for o in self.output_langs)
        rows = [head]
        for i in self.input_langs:
            cells = ",".join(f"{self.cells[(i, o)]:.4f}" for o in self.output_langs)
            rows.append(f"{i},{cells}")
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {
            "input_langs": self.input_langs,
            "output_langs": self.output_langs,
            "cells": {f"{i}->{o}": v for (i, o), v in sorted(self.cells.items())},
            "identity_rates": {
                f"{i}->{o}": v for (i, o), v in sorted(self.identity_rates.items())
            },
            "counts": {f"{i}->{o}": v for (i, o), v in sorted(self.counts.items())},
        }


# ---------------------------------------------------------------------------
# evaluation sets


def make_direction_sets(
    rng: RngState,
    languages,
    lang_ids,
    items: int,
    length_range,
    task: str = TRANSLATE,
) -> dict[tuple[int, int], list]:
    """Fresh eval items for each (X, Base) and (Base, X) direction."""
    by_id = {l.lang_id: l for l in languages}
    base = by_id[0]
    sets = {}
    for x in lang_ids:
        spec = by_id[x]
        sets[(x, 0)] = gen_pair_corpus(
            rng.split(f"eval.{task}.{x}.0"), spec, base, items, length_range, task
        )
        sets[(0, x)] = gen_pair_corpus(
            rng.split(f"eval.{task}.0.{x}"), base, spec, items, length_range, task
        )
    return sets


# ---------------------------------------------------------------------------
# pipeline evaluation suites


def composed_translate_em(model: CompositeModel, sets, max_gen: int = 16) -> MetricReport:
    """Decoder-side translation exact match of the bridged pipeline."""
    rep = MetricReport(name="composed_translate_em")
    tok = model.enc_tok
    specials = _enc_specials(tok)
    for (a, b), items in sorted(sets.items()):
        hyps = [end_to_end(model, ex.x, b, TRANSLATE, max_gen) for ex in items]
        refs = [list(ex.y) for ex in items]
        rep.values[f"{a}->{b}"] = exact_match(hyps, refs, specials)
        rep.counts[f"{a}->{b}"] = len(items)
    return rep


def encdec_translate_em(enc, dec, tok, sets, max_gen: int = 16) -> MetricReport:
    """The frozen encoder-decoder's own translation quality on the same sets."""
    rep = MetricReport(name="encdec_translate_em")
    specials = _enc_specials(tok)
    for (a, b), items in sorted(sets.items()):
        hyps = []
        for ex in items:
            mem = encode(enc, list(ex.x) + [tok.eos_id])
            hyps.append(greedy_generate(dec, (mem, [tok.lang_token(b)]), max_gen, tok.eos_id))
        refs = [list(ex.y) for ex in items]
        rep.values[f"{a}->{b}"] = exact_match(hyps, refs, specials)
        rep.counts[f"{a}->{b}"] = len(items)
    return rep


def instruct_accuracy(model: CompositeModel, sets, max_gen: int = 16) -> MetricReport:
    """Composed decoder-side and LM-side accuracy on the sort task.

    LM-side scores the understand leg alone: the z the frozen LM greedy-
    decodes from the soft prefix, against the LM-tokenized gold answer.
    """
    rep = MetricReport(name="instruct_accuracy")
    enc_specials = _enc_specials(model.enc_tok)
    lm_tok = model.lm_tok
    dec_items, dec_hits = 0, 0
    lm_items, lm_hits = 0, 0
    for (a, b), items in sorted(sets.items()):
        d_hyp, d_ref, l_hit = [], [], 0
        for ex in items:
            z_gen, _ = compose_understand(model, ex.x, INSTRUCT, max_gen=max_gen)
            # symbol-level: merge segmentation is an encoding detail
            l_hit += answer_symbols(lm_tok, z_gen) == list(ex.z)
            d_hyp.append(end_to_end(model, ex.x, b, INSTRUCT, max_gen))
            d_ref.append(list(ex.y))
        rep.values[f"dec:{a}->{b}"] = exact_match(d_hyp, d_ref, enc_specials)
        rep.counts[f"dec:{a}->{b}"] = len(items)
        dec_hits += round(rep.values[f"dec:{a}->{b}"] * len(items))
        dec_items += len(items)
        lm_hits += l_hit
        lm_items += len(items)
    rep.extras["decoder_side"] = dec_hits / max(dec_items, 1)
    rep.extras["lm_side"] = lm_hits / max(lm_items, 1)
    return rep


def eval_untuned(
    model: CompositeModel,
    untuned_ids,
    enc,
    dec,
    sets,
    manifest,
    max_gen: int = 16,
) -> MetricReport:
    """Untuned-language generalization: composed vs direct encoder-decoder.

    The contamination check is structural: any requested language that the
    run manifest lists as a bridge-training language is rejected.
    """
    trained = set(manifest.tuned_languages)
    bad = sorted(set(untuned_ids) & trained)
    if bad:
        raise IntegrityError(f"languages {bad} appeared in bridge training")
    composed = composed_translate_em(model, sets, max_gen)
    direct = encdec_translate_em(enc, dec, model.enc_tok, sets, max_gen)
    rep = MetricReport(name="untuned_generalization")
    for key in composed.values:
        rep.values[f"composed:{key}"] = composed.values[key]
        rep.counts[f"composed:{key}"] = composed.counts[key]
        rep.values[f"encdec:{key}"] = direct.values[key]
        rep.counts[f"encdec:{key}"] = direct.counts[key]
    gaps = {k: direct.values[k] - composed.values[k] for k in composed.values}
    rep.extras["gap_per_direction"] = gaps
    rep.extras["mean_gap"] = sum(gaps.values()) / len(gaps)
    en_x = [v for k, v in gaps.items() if k.startswith("0->")]
    rep.extras["mean_gap_base_to_x"] = sum(en_x) / len(en_x) if en_x else float("nan")
    return rep


def on_demand_matrix(
    model: CompositeModel,
    languages,
    lang_ids,
    rng: RngState,
    items: int = 50,
    length_range=(4, 10),
    max_gen: int = 16,
) -> OnDemandMatrix:
    """Accuracy grid over (input language, requested output language).

    Uses the sort task, so every cell demands real computation before the
    language switch; references are re-rendered into the requested language.
    """
    if items < 50:
        raise ConfigError(f"on-demand cells need >= 50 items, got {items}")
    by_id = {l.lang_id: l for l in languages}
    ids = list(lang_ids)
    m = OnDemandMatrix(input_langs=ids, output_langs=ids)
    specials = _enc_specials(model.enc_tok)
    for a in ids:
        base_items = gen_pair_corpus(
            rng.split(f"ondemand.{a}"), by_id[a], by_id[0], items, length_range, INSTRUCT
        )
        for b in ids:
            spec_b = by_id[b]
            hyps, refs, idents = [], [], 0
            for ex in base_items:
                out = end_to_end(model, ex.x, b, INSTRUCT, max_gen)
                hyps.append(out)
                refs.append(render(sorted(ex.z), spec_b))
                idents += language_identity(out, b, model.enc_tok) == PASS
            m.cells[(a, b)] = exact_match(hyps, refs, specials)
            m.identity_rates[(a, b)] = idents / len(base_items)
            m.counts[(a, b)] = len(base_items)
    return m


def alignment_gap(model: CompositeModel, sets) -> float:
    """Mean relaxed-transport distance between pivot encoder states and the
    mapped decoder-side states, teacher-forced on gold pivots. No gradients."""
    total, n = 0.0, 0
    tok = model.lm_tok
    for items in sets.values():
        for ex in items:
            z_lm = tok.tokenize(list(ex.z)) + [tok.eos_id]
            _, H_z = compose_understand(model, ex.x, ex.task, z_ids=z_lm)
            memory = map_dec(model.mapping_dec, H_z.data)
            target = pivot_encoder_states(model, z_lm)
            total += ot_loss(target, memory).item()
            n += 1
    if n == 0:
        raise DegenerateInputError("alignment gap over empty sets")
    return total / n


# ---------------------------------------------------------------------------
# ablation comparison


@dataclass
class AblationReport:
    rows: dict[str, dict]
    orderings: dict[str, bool]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "orderings": self.orderings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        cols = ["decoder_em", "lm_em", "alignment_gap"]
        lines = [f"{'variant':<12}" + "".join(f"{c:>15}" for c in cols)]
        for v in sorted(self.rows):
            row = self.rows[v]
            cells = "".join(
                f"{row[c]:>15.4f}" if c in row else f"{'-':>15}" for c in cols
            )
            lines.append(f"{v:<12}" + cells)
        lines.append("")
        for k in sorted(self.orderings):
            lines.append(f"{k}: {'ok' if self.orderings[k] else 'VIOLATED'}")
        return "\n".join(lines)


def ablation_report(results: dict[str, dict]) -> AblationReport:
    """Comparison table over ablation variants sharing one data seed.

    `results` maps variant id to {"manifest": RunManifest, "decoder_em":
    float | None, "lm_em": float, "alignment_gap": float | None}.
    """
    if not results:
        raise ConfigError("no ablation results")
    seeds = {v: r["manifest"].data_seed for v, r in results.items()}
    if len(set(seeds.values())) != 1:
        raise ConfigError(f"ablation runs disagree on data seed: {seeds}")
    rows = {}
    for v, r in results.items():
        row = {"lm_em": r["lm_em"]}
        if r.get("decoder_em") is not None:
            row["decoder_em"] = r["decoder_em"]
        if r.get("alignment_gap") is not None:
            row["alignment_gap"] = r["alignment_gap"]
        rows[v] = row
    orderings = {}
    def dec(v):
        return rows[v].get("decoder_em") if v in rows else None
    if dec("full") is not None and dec("no_ot") is not None:
        orderings["full_ge_no_ot_decoder"] = dec("full") >= dec("no_ot")
    if dec("full") is not None and dec("joint23") is not None:
        orderings["full_ge_joint23_decoder"] = dec("full") >= dec("joint23")
    if dec("full") is not None and dec("no_stage1") is not None:
        orderings["full_gt_no_stage1_decoder"] = dec("full") > dec("no_stage1")
    if "no_stage1" in rows and "full" in rows:
        orderings["full_ge_no_stage1_lm"] = rows["full"]["lm_em"] >= rows["no_stage1"]["lm_em"]
    if "alignment_gap" in rows.get("full", {}) and "alignment_gap" in rows.get("no_ot", {}):
        orderings["gap_full_lt_no_ot"] = (
            rows["full"]["alignment_gap"] < rows["no_ot"]["alignment_gap"]
        )
    return AblationReport(rows=rows, orderings=orderings)


def _enc_specials(tok) -> tuple:
    ids = [tok.pad_id, tok.bos_id, tok.eos_id]
    ids += [tok.lang_token(i) for i in range(tok.n_languages)]
    return tuple(ids)
