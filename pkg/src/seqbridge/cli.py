"""Operator surface: one binary, subcommands for each pipeline phase.

Exit codes are a stable contract: 0 success, 1 task failure (training,
integrity, IO, a failed property suite), 2 usage or configuration error.
Every subcommand writes its fully-resolved config next to its outputs
before doing any work, and all file writes go through write-then-rename.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from .bridge import load_composite
from .config import VARIANTS, PipelineConfig, config_from_json
from .errors import ConfigError, SeqBridgeError, UsageError
from .languages import (
    INSTRUCT,
    TRANSLATE,
    LmExample,
    TrilingualExample,
    gen_lm_corpus,
    gen_translate_corpus,
    language_config_to_json,
)
from .metrics import (
    alignment_gap,
    ablation_report,
    composed_translate_em,
    encdec_translate_em,
    eval_untuned,
    instruct_accuracy,
    make_direction_sets,
    on_demand_matrix,
)
from .models import PretrainConfig, load_model, pretrain_encdec, pretrain_lm, save_model
from .ot import (
    argmin_tie_gap,
    cosine_cost,
    exact_ot_oracle,
    independent_coupling_cost,
    l1_masses,
    ot_loss,
    relaxed_ot,
)
from .rng import RngState, hash_bytes
from .tensor import Tensor, gradcheck
from .trainer import build_ablation, build_world, run_pipeline, stage_corpus, plans_for

SUITES = ("translate", "instruct", "untuned", "on_demand", "alignment_gap")


# ---------------------------------------------------------------------------
# plumbing


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _load_config(args) -> PipelineConfig:
    if args.config is None:
        cfg = PipelineConfig()
    else:
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from e
        cfg = config_from_json(text)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "variant", None) is not None:
        cfg = build_ablation(cfg, args.variant)
    return cfg


def _prepare_out(args, cfg: PipelineConfig) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    _atomic_write(os.path.join(out, "config.resolved.json"), cfg.to_json())
    return out


def _say(args, msg: str) -> None:
    if getattr(args, "verbose", False):
        print(msg, file=sys.stderr)


def _example_to_doc(ex) -> dict:
    if isinstance(ex, TrilingualExample):
        return {
            "task": ex.task,
            "src_lang": ex.src_lang,
            "tgt_lang": ex.tgt_lang,
            "x": list(ex.x),
            "z": list(ex.z),
            "y": list(ex.y),
        }
    return {"task": ex.task, "inp": list(ex.inp), "answer": list(ex.answer)}


def _write_corpus(path: str, examples) -> None:
    buf = io.StringIO()
    for ex in examples:
        buf.write(json.dumps(_example_to_doc(ex), sort_keys=True))
        buf.write("\n")
    _atomic_write(path, buf.getvalue())


def _read_corpus(path: str):
    out = []
    with open(path) as f:
        for line in f:
            doc = json.loads(line)
            if "x" in doc:
                out.append(
                    TrilingualExample(
                        x=tuple(doc["x"]),
                        z=tuple(doc["z"]),
                        y=tuple(doc["y"]),
                        src_lang=doc["src_lang"],
                        tgt_lang=doc["tgt_lang"],
                        task=doc["task"],
                    )
                )
            else:
                out.append(
                    LmExample(inp=tuple(doc["inp"]), answer=tuple(doc["answer"]), task=doc["task"])
                )
    return out


def _file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return f"{hash_bytes(f.read()):016x}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    rng = RngState(cfg.seed)
    langs, enc_tok, lm_tok, tuned, untuned = build_world(cfg)

    encdec = gen_translate_corpus(
        rng.split("encdec.data"), langs, cfg.encdec_corpus, cfg.length_range
    )
    _write_corpus(os.path.join(out, "encdec_pretrain.jsonl"), encdec)
    lm = gen_lm_corpus(
        rng.split("lm.data"), cfg.v, cfg.lm_corpus, cfg.length_range, cfg.lm_echo_fraction
    )
    _write_corpus(os.path.join(out, "lm_pretrain.jsonl"), lm)
    for plan in plans_for(cfg):
        corpus = stage_corpus(cfg, plan, langs, tuned)
        _write_corpus(os.path.join(out, f"stage{plan.stage}_{plan.corpus}.jsonl"), corpus)

    merges = lm_tok.merges
    _atomic_write(
        os.path.join(out, "languages.json"),
        language_config_to_json(langs, merges, tuned, untuned),
    )
    _say(args, f"corpora written under {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    data = args.data or out
    rng = RngState(cfg.seed)
    _, enc_tok, lm_tok, _, _ = build_world(cfg)
    if args.which == "encdec":
        corpus = _read_corpus(os.path.join(data, "encdec_pretrain.jsonl"))
        enc, dec = pretrain_encdec(
            rng.split("encdec.train"),
            corpus,
            enc_tok,
            PretrainConfig(
                epochs=cfg.encdec_epochs,
                lr=cfg.encdec_lr,
                holdout=cfg.holdout,
                max_gen=cfg.max_gen,
            ),
        )
        d1 = save_model(enc, os.path.join(out, "encoder.ckpt"))
        d2 = save_model(dec, os.path.join(out, "decoder.ckpt"))
        print(f"encoder digest {d1:016x}")
        print(f"decoder digest {d2:016x}")
        print(f"holdout_em {enc.history['holdout_em']:.4f}")
    else:
        corpus = _read_corpus(os.path.join(data, "lm_pretrain.jsonl"))
        lm = pretrain_lm(
            rng.split("lm.train"),
            corpus,
            lm_tok,
            PretrainConfig(
                epochs=cfg.lm_epochs,
                lr=cfg.lm_lr,
                holdout=cfg.holdout,
                max_gen=cfg.max_gen,
            ),
        )
        d = save_model(lm, os.path.join(out, "lm.ckpt"))
        print(f"lm digest {d:016x}")
        print(f"echo_acc {lm.history['echo_acc']:.4f}")
        print(f"sort_acc {lm.history['sort_acc']:.4f}")
    return 0


def _load_cores(cores_dir: str):
    enc = load_model(os.path.join(cores_dir, "encoder.ckpt"))
    lm = load_model(os.path.join(cores_dir, "lm.ckpt"))
    dec = load_model(os.path.join(cores_dir, "decoder.ckpt"))
    return enc, lm, dec


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    cores = _load_cores(args.cores) if args.cores else None
    model, manifest = run_pipeline(cfg, cores=cores, workdir=out)
    for report in manifest.stage_reports:
        buf = io.StringIO()
        w = csv.writer(buf)
        names = list(report.curves)
        w.writerow(["epoch", *names, "total"])
        for e, total in enumerate(report.total_curve):
            w.writerow([e, *[f"{report.curves[n][e]:.6f}" for n in names], f"{total:.6f}"])
        _atomic_write(os.path.join(out, f"stage{report.stage}_losses.csv"), buf.getvalue())
    print(f"variant {manifest.variant}: {len(manifest.stage_reports)} stages")
    for name, ckpt in sorted(manifest.checkpoints.items()):
        print(f"{name} -> {ckpt} ({_file_digest(os.path.join(out, ckpt))})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    suites = [s.strip() for s in (args.suites or "").split(",") if s.strip()]
    if not suites:
        raise UsageError("no evaluation suites requested")
    unknown = sorted(set(suites) - set(SUITES))
    if unknown:
        raise UsageError(f"unknown suites: {', '.join(unknown)}")
    out = _prepare_out(args, cfg)
    langs, enc_tok, lm_tok, tuned, untuned = build_world(cfg)
    enc, lm, dec = _load_cores(args.cores)
    model = load_composite(args.checkpoint, enc, lm, dec, enc_tok, lm_tok)
    ckpt_digest = _file_digest(args.checkpoint)
    rng = RngState(cfg.seed)

    def finish(name: str, doc: dict) -> None:
        doc["checkpoint_digest"] = ckpt_digest
        doc["config_digest"] = f"{cfg.digest():016x}"
        _atomic_write(os.path.join(out, f"report_{name}.json"), json.dumps(doc, sort_keys=True, indent=2))

    for suite in suites:
        _say(args, f"suite {suite}")
        if suite == "translate":
            sets = make_direction_sets(
                rng.split("eval"), langs, tuned, cfg.eval_items, cfg.length_range, TRANSLATE
            )
            composed = composed_translate_em(model, sets, cfg.max_gen)
            direct = encdec_translate_em(enc, dec, enc_tok, sets, cfg.max_gen)
            finish("translate", {"composed": composed.to_dict(), "encdec": direct.to_dict()})
            print(f"translate composed {composed.aggregate:.4f} encdec {direct.aggregate:.4f}")
        elif suite == "instruct":
            sets = make_direction_sets(
                rng.split("eval"), langs, tuned, cfg.eval_items, cfg.length_range, INSTRUCT
            )
            rep = instruct_accuracy(model, sets, cfg.max_gen)
            finish("instruct", rep.to_dict())
            print(
                f"instruct decoder-side {rep.extras['decoder_side']:.4f} "
                f"lm-side {rep.extras['lm_side']:.4f}"
            )
        elif suite == "untuned":
            manifest_path = os.path.join(args.run or os.path.dirname(args.checkpoint), "manifest.json")
            with open(manifest_path) as f:
                doc = json.load(f)
            man = argparse.Namespace(
                tuned_languages=doc["tuned_languages"],
                untuned_languages=doc["untuned_languages"],
            )
            sets = make_direction_sets(
                rng.split("eval"), langs, untuned, cfg.eval_items, cfg.length_range, TRANSLATE
            )
            rep = eval_untuned(model, untuned, enc, dec, sets, man, cfg.max_gen)
            finish("untuned", rep.to_dict())
            print(f"untuned mean gap {rep.extras['mean_gap']:.4f}")
        elif suite == "on_demand":
            matrix = on_demand_matrix(
                model,
                langs,
                [l.lang_id for l in langs],
                rng.split("eval.on_demand"),
                cfg.on_demand_items,
                cfg.length_range,
                cfg.max_gen,
            )
            finish("on_demand", matrix.to_dict())
            _atomic_write(os.path.join(out, "report_on_demand.csv"), matrix.to_csv())
            accs = list(matrix.cells.values())
            print(f"on_demand cells {len(accs)} min {min(accs):.4f} max {max(accs):.4f}")
        elif suite == "alignment_gap":
            sets = make_direction_sets(
                rng.split("eval.gap"), langs, tuned, cfg.eval_items, cfg.length_range, TRANSLATE
            )
            value = alignment_gap(model, sets)
            n = sum(len(v) for v in sets.values())
            finish("alignment_gap", {"alignment_gap": value, "n": n})
            print(f"alignment_gap {value:.6f}")
    return 0


def cmd_ot_check(args) -> int:
    rng = RngState(args.seed if args.seed is not None else 2026)
    n_instances = args.instances
    tol = 1e-9
    report = {
        "instances": n_instances,
        "lower_bound": {"pass": True, "worst_slack": float("inf")},
        "upper_bound": {"pass": True, "worst_slack": float("inf")},
        "feasibility": {"pass": True, "worst_slack": float("inf")},
        "equivariance": {"pass": True, "worst_slack": float("inf")},
        "gradcheck": {"pass": True, "worst_rel_err": 0.0, "checked": 0},
    }

    def fold(key: str, slack: float) -> None:
        entry = report[key]
        entry["worst_slack"] = min(entry["worst_slack"], slack)
        if slack < -tol:
            entry["pass"] = False

    for i in range(n_instances):
        r = rng.split(f"inst{i}")
        k = int(r.randint(1, 7, 1)[0])
        m = int(r.randint(1, 7, 1)[0])
        d = int(r.randint(2, 7, 1)[0])
        A = r.split("A").normal(k, d)
        B = r.split("B").normal(m, d)
        relaxed, plan = relaxed_ot(A, B)
        ma, mb = l1_masses(A), l1_masses(B)
        exact, _ = exact_ot_oracle(A, B, ma, mb)
        coupling = independent_coupling_cost(A, B, ma, mb)
        fold("lower_bound", exact - relaxed)
        fold("upper_bound", coupling - exact)
        fold("feasibility", -abs(plan.sum(axis=1) - ma).max())
        # relabeling target rows must relabel the plan columns identically
        perm = r.split("perm").permutation(m)
        relaxed_p, plan_p = relaxed_ot(A, B[perm])
        # ties can legitimately resolve to a different column after the
        # permutation; compare distances, and plans only off ties
        fold("equivariance", -abs(relaxed_p - relaxed))
        if argmin_tie_gap(A, B) > 1e-9:
            fold("equivariance", -np.abs(plan_p - plan[:, perm]).max())
        if i % max(n_instances // 20, 1) == 0 and m >= 2 and argmin_tie_gap(A, B) > 1e-3:
            H = Tensor(B.copy(), requires_grad=True)
            res = gradcheck(lambda: ot_loss(A, H), {"H": H}, tolerance=1e-5, h=1e-6)
            report["gradcheck"]["checked"] += 1
            report["gradcheck"]["worst_rel_err"] = max(
                report["gradcheck"]["worst_rel_err"], res.max_rel_err
            )
            if not res.passed:
                report["gradcheck"]["pass"] = False

    ok = all(report[k]["pass"] for k in ("lower_bound", "upper_bound", "feasibility", "equivariance", "gradcheck"))
    report["all_pass"] = ok
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _atomic_write(os.path.join(args.out, "ot_check.json"), text)
    print(text)
    return 0 if ok else 1


def cmd_report(args) -> int:
    results = {}
    for run_dir in args.runs:
        with open(os.path.join(run_dir, "manifest.json")) as f:
            doc = json.load(f)
        variant = doc["variant"]
        man = argparse.Namespace(data_seed=doc["data_seed"], tuned_languages=doc["tuned_languages"])
        entry = {"manifest": man, "decoder_em": None, "lm_em": float("nan"), "alignment_gap": None}
        tr = os.path.join(run_dir, "report_translate.json")
        if os.path.exists(tr) and variant != "no_decoder":
            with open(tr) as f:
                entry["decoder_em"] = json.load(f)["composed"]["aggregate"]
        ins = os.path.join(run_dir, "report_instruct.json")
        if os.path.exists(ins):
            with open(ins) as f:
                entry["lm_em"] = json.load(f)["extras"]["lm_side"]
        gap = os.path.join(run_dir, "report_alignment_gap.json")
        if os.path.exists(gap) and variant != "no_decoder":
            with open(gap) as f:
                entry["alignment_gap"] = json.load(f)["alignment_gap"]
        results[variant] = entry
    rep = ablation_report(results)
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "ablation.json"), rep.to_json())
    _atomic_write(os.path.join(args.out, "ablation.txt"), rep.to_text() + "\n")
    print(rep.to_text())
    return 0


# ---------------------------------------------------------------------------
# argument surface


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqbridge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="pipeline config JSON (defaults apply if omitted)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("gen-data", help="emit corpora and the language/tokenizer record")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train one frozen core")
    common(sp)
    sp.add_argument("--which", choices=("encdec", "lm"), required=True)
    sp.add_argument("--data", help="corpus directory (default: --out)")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="run the staged bridge training")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS, help="ablation variant (default: config)")
    sp.add_argument("--cores", help="directory with encoder/lm/decoder checkpoints")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="score a composite checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cores", required=True)
    sp.add_argument("--run", help="run directory with manifest.json (default: checkpoint dir)")
    sp.add_argument("--suites", help=f"comma list of {', '.join(SUITES)}")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ot-check", help="transport property suite on random instances")
    sp.add_argument("--instances", type=int, default=1000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_ot_check)

    sp = sub.add_parser("report", help="assemble the ablation comparison from run directories")
    sp.add_argument("runs", nargs="+", help="run directories with manifests and eval reports")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SeqBridgeError as e:
        print(f"error: {e.__class__.__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
