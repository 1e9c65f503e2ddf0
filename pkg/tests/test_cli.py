import json
import os

import pytest

from seqbridge.cli import main
from seqbridge.config import PipelineConfig


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One micro workspace: config, corpora, pretrained cores, trained runs."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = PipelineConfig(
        seed=99,
        n_cipher=3,
        tuned_fraction=0.67,
        length_lo=3,
        length_hi=5,
        encdec_corpus=240,
        encdec_epochs=1,
        lm_corpus=240,
        lm_epochs=1,
        holdout=40,
        stage1_count=8,
        stage23_count=6,
        stage_epochs=1,
        batch_size=4,
        z_source="gold",
        eval_items=4,
        max_gen=8,
    )
    cfg_path = str(root / "config.json")
    with open(cfg_path, "w") as f:
        f.write(cfg.to_json())
    return {"root": root, "cfg": cfg, "cfg_path": cfg_path}


def run(argv):
    return main(argv)


def read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


class TestGenData:
    def test_gen_data_idempotent_and_counted(self, ws):
        out = str(ws["root"] / "data")
        assert run(["gen-data", "--config", ws["cfg_path"], "--out", out]) == 0
        names = [
            "encdec_pretrain.jsonl",
            "lm_pretrain.jsonl",
            "stage1_translate.jsonl",
            "stage2_instruct.jsonl",
            "stage3_instruct.jsonl",
            "languages.json",
            "config.resolved.json",
        ]
        for n in names:
            assert os.path.exists(os.path.join(out, n)), n
        counts = {
            "encdec_pretrain.jsonl": ws["cfg"].encdec_corpus,
            "lm_pretrain.jsonl": ws["cfg"].lm_corpus,
            "stage1_translate.jsonl": ws["cfg"].stage1_count,
            "stage2_instruct.jsonl": ws["cfg"].stage23_count,
            "stage3_instruct.jsonl": ws["cfg"].stage23_count,
        }
        for n, want in counts.items():
            with open(os.path.join(out, n)) as f:
                assert sum(1 for _ in f) == want, n
        before = {n: read(os.path.join(out, n)) for n in names}
        assert run(["gen-data", "--config", ws["cfg_path"], "--out", out]) == 0
        after = {n: read(os.path.join(out, n)) for n in names}
        assert before == after

    def test_missing_config_is_usage_error(self, ws, capsys):
        out = str(ws["root"] / "data2")
        code = run(["gen-data", "--config", "/nonexistent/config.json", "--out", out])
        assert code == 2
        assert "usage error" in capsys.readouterr().err

    def test_resolved_config_round_trips(self, ws):
        out = str(ws["root"] / "data")
        with open(os.path.join(out, "config.resolved.json")) as f:
            assert json.load(f)["seed"] == 99


class TestPretrain:
    def test_encdec_and_lm(self, ws, capsys):
        data = str(ws["root"] / "data")
        cores = str(ws["root"] / "cores")
        assert run([
            "pretrain", "--config", ws["cfg_path"], "--out", cores,
            "--data", data, "--which", "encdec",
        ]) == 0
        out1 = capsys.readouterr().out
        assert "encoder digest" in out1 and "holdout_em" in out1
        assert run([
            "pretrain", "--config", ws["cfg_path"], "--out", cores,
            "--data", data, "--which", "lm",
        ]) == 0
        out2 = capsys.readouterr().out
        assert "lm digest" in out2 and "sort_acc" in out2
        for n in ("encoder.ckpt", "decoder.ckpt", "lm.ckpt"):
            assert os.path.exists(os.path.join(cores, n))

    def test_checkpoint_round_trips(self, ws, tmp_path):
        from seqbridge.models import load_model, save_model

        src = os.path.join(str(ws["root"] / "cores"), "encoder.ckpt")
        model = load_model(src)
        dst = str(tmp_path / "again.ckpt")
        save_model(model, dst)
        assert read(src) == read(dst)

    def test_missing_corpus_is_io_error(self, ws, tmp_path, capsys):
        code = run([
            "pretrain", "--config", ws["cfg_path"], "--out", str(tmp_path / "o"),
            "--data", str(tmp_path), "--which", "lm",
        ])
        assert code == 1
        assert "io error" in capsys.readouterr().err


class TestTrain:
    def test_full_runs_three_stages(self, ws, capsys):
        cores = str(ws["root"] / "cores")
        rundir = str(ws["root"] / "run_full")
        assert run([
            "train", "--config", ws["cfg_path"], "--out", rundir, "--cores", cores,
        ]) == 0
        assert "3 stages" in capsys.readouterr().out
        man = json.load(open(os.path.join(rundir, "manifest.json")))
        assert [r["stage"] for r in man["stage_reports"]] == [1, 2, 3]
        for n in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage1_losses.csv"):
            assert os.path.exists(os.path.join(rundir, n)), n
        with open(os.path.join(rundir, "stage1_losses.csv")) as f:
            rows = f.read().strip().split("\n")
        assert rows[0].startswith("epoch,") and len(rows) == 1 + ws["cfg"].stage_epochs

    def test_manifest_digests_match_core_checkpoints(self, ws):
        from seqbridge.checkpoint import load_checkpoint

        rundir = str(ws["root"] / "run_full")
        cores = str(ws["root"] / "cores")
        man = json.load(open(os.path.join(rundir, "manifest.json")))
        for name, ckpt in (("encoder", "encoder.ckpt"), ("lm", "lm.ckpt")):
            header, _ = load_checkpoint(os.path.join(cores, ckpt))
            assert man["frozen_digests"][name] == header["digest"]

    def test_joint23_runs_two_stages(self, ws, capsys):
        cores = str(ws["root"] / "cores")
        rundir = str(ws["root"] / "run_joint")
        assert run([
            "train", "--config", ws["cfg_path"], "--out", rundir,
            "--cores", cores, "--variant", "joint23",
        ]) == 0
        assert "2 stages" in capsys.readouterr().out

    def test_no_ot_variant_for_report(self, ws):
        cores = str(ws["root"] / "cores")
        rundir = str(ws["root"] / "run_no_ot")
        assert run([
            "train", "--config", ws["cfg_path"], "--out", rundir,
            "--cores", cores, "--variant", "no_ot",
        ]) == 0
        man = json.load(open(os.path.join(rundir, "manifest.json")))
        assert man["variant"] == "no_ot"
        assert man["config"]["lam3"] == 0.0


class TestEval:
    def eval_run(self, ws, rundir, suites, out):
        return run([
            "eval", "--config", ws["cfg_path"], "--out", out,
            "--checkpoint", os.path.join(rundir, "stage3.ckpt"),
            "--cores", str(ws["root"] / "cores"),
            "--run", rundir,
            "--suites", suites,
        ])

    def test_suites_written_and_deterministic(self, ws):
        rundir = str(ws["root"] / "run_full")
        e1 = str(ws["root"] / "eval1")
        e2 = str(ws["root"] / "eval2")
        suites = "translate,instruct,untuned,alignment_gap"
        assert self.eval_run(ws, rundir, suites, e1) == 0
        assert self.eval_run(ws, rundir, suites, e2) == 0
        for n in (
            "report_translate.json",
            "report_instruct.json",
            "report_untuned.json",
            "report_alignment_gap.json",
        ):
            a, b = read(os.path.join(e1, n)), read(os.path.join(e2, n))
            assert a == b, n
        doc = json.load(open(os.path.join(e1, "report_translate.json")))
        assert 0.0 <= doc["composed"]["aggregate"] <= 1.0
        from seqbridge.rng import hash_bytes

        want = f"{hash_bytes(read(os.path.join(rundir, 'stage3.ckpt'))):016x}"
        assert doc["checkpoint_digest"] == want

    def test_empty_suites_usage_error(self, ws, capsys):
        rundir = str(ws["root"] / "run_full")
        assert self.eval_run(ws, rundir, "", str(ws["root"] / "e3")) == 2
        assert "usage error" in capsys.readouterr().err

    def test_unknown_suite_usage_error(self, ws, capsys):
        rundir = str(ws["root"] / "run_full")
        assert self.eval_run(ws, rundir, "translate,styling", str(ws["root"] / "e4")) == 2
        assert "styling" in capsys.readouterr().err


class TestReportAndOtCheck:
    def test_report_assembles_ablation(self, ws, capsys):
        # evaluate the no_ot run, then assemble full vs no_ot
        rundir_no = str(ws["root"] / "run_no_ot")
        e_no = str(ws["root"] / "eval_no_ot")
        assert TestEval().eval_run(ws, rundir_no, "translate,instruct,alignment_gap", e_no) == 0
        # reports must sit inside the run dirs for assembly
        for n in ("report_translate.json", "report_instruct.json", "report_alignment_gap.json"):
            os.replace(os.path.join(e_no, n), os.path.join(rundir_no, n))
            src = os.path.join(str(ws["root"] / "eval1"), n)
            with open(src, "rb") as f:
                data = f.read()
            with open(os.path.join(str(ws["root"] / "run_full"), n), "wb") as f:
                f.write(data)
        capsys.readouterr()
        out = str(ws["root"] / "ablation")
        assert run([
            "report", str(ws["root"] / "run_full"), rundir_no, "--out", out,
        ]) == 0
        text = capsys.readouterr().out
        assert "full" in text and "no_ot" in text
        doc = json.load(open(os.path.join(out, "ablation.json")))
        assert set(doc["rows"]) == {"full", "no_ot"}
        assert "gap_full_lt_no_ot" in doc["orderings"]

    def test_ot_check_passes_and_writes(self, ws, capsys):
        out = str(ws["root"] / "otreport")
        assert run(["ot-check", "--instances", "60", "--out", out]) == 0
        doc = json.load(open(os.path.join(out, "ot_check.json")))
        assert doc["all_pass"] is True
        assert doc["instances"] == 60
        assert doc["gradcheck"]["checked"] > 0
        capsys.readouterr()

    def test_ot_check_deterministic(self, ws, capsys):
        assert run(["ot-check", "--instances", "25", "--seed", "7"]) == 0
        a = capsys.readouterr().out
        assert run(["ot-check", "--instances", "25", "--seed", "7"]) == 0
        b = capsys.readouterr().out
        assert a == b
