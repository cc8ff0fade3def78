import json
import shutil
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsprompt.harness import experiment as ex
from vsprompt.harness.cli import main
from vsprompt.harness.config import (METHODS, ConfigError, defaults, dump_config, load_config,
                                     parse_config)
from vsprompt.harness.report import ReportError, collect, summarize, write_report
from vsprompt.model import build, parameter_count
from vsprompt.prompts import init_prompts

TINY = """
[corpus]
num_speakers = 4
classes = 4
samples_per_speaker = 12
[pretrain]
epochs = 1
batch_size = 16
warmup = 0
[adapt]
epochs = 1
batch_size = 8
[experiment]
methods = baseline, A
budgets = 2, 50%
seeds = 0
"""


# ---------------------------------------------------------------- config

def test_defaults_are_the_benchmark_settings():
    cfg = defaults()
    assert cfg["corpus"]["num_speakers"] == 10 and cfg["corpus"]["num_test_speakers"] == 2
    assert (cfg["adapt"]["lr_add"], cfg["adapt"]["lr_pad"], cfg["adapt"]["lr_cat"]) == (0.01, 0.01, 0.1)
    assert parse_config("") == cfg


@pytest.mark.parametrize("text, match", [
    ("[corpus]\nnum_speaker = 3\n", "unknown key corpus.num_speaker"),
    ("[corpora]\n", "unknown section"),
    ("[corpus]\nNum_speakers = 3\n", "unknown key"),
    ("[corpus]\nnum_speakers = three\n", "bad value for corpus.num_speakers"),
    ("[DEFAULT]\nseed = 1\n", "outside a section"),
    ("[experiment]\nmethods = A, FT-X\n", "unknown method"),
    ("[experiment]\nbudgets = 0\n", "bad value"),
    ("[experiment]\nbudgets = 150%\n", "bad value"),
    ("[model]\npreset = big\n", "unknown model preset"),
    ("[corpus]\nadapt_fraction = 1.0\n", "adapt_fraction"),
    ("[corpus]\nclasses = 3\nclasses = 4\n", "malformed"),
])
def test_strict_parsing(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")


@settings(max_examples=40, deadline=None)
@given(methods=st.lists(st.sampled_from(METHODS), min_size=1, max_size=4, unique=True),
       budgets=st.lists(st.one_of(st.integers(1, 50).map(str), st.integers(1, 100).map(lambda p: f"{p}%")),
                        min_size=1, max_size=3),
       seeds=st.lists(st.integers(0, 99), min_size=1, max_size=3),
       lr=st.floats(1e-6, 1.0, allow_nan=False), export=st.booleans())
def test_dump_parse_round_trip(methods, budgets, seeds, lr, export):
    cfg = (defaults().replace("experiment", methods=tuple(methods), budgets=tuple(budgets), seeds=tuple(seeds),
                              export_prompts=export)
           .replace("adapt", lr_cat=lr))
    back = parse_config(dump_config(cfg))
    assert back == cfg and back.digest() == cfg.digest()


def test_digest_ignores_output_dir_only():
    cfg = defaults()
    assert cfg.replace("experiment", output_dir="elsewhere").digest() == cfg.digest()
    assert cfg.replace("experiment", seeds=(1,)).digest() != cfg.digest()
    with pytest.raises(ConfigError):
        cfg.replace("corpus", speakers=3)


def test_output_dir_precedence(monkeypatch):
    cfg = defaults().replace("experiment", output_dir="from-config")
    monkeypatch.delenv(ex.OUT_ENV, raising=False)
    assert str(ex.output_dir(defaults())) == "runs"
    assert str(ex.output_dir(cfg)) == "from-config"
    monkeypatch.setenv(ex.OUT_ENV, "from-env")
    assert str(ex.output_dir(cfg)) == "from-env"
    assert str(ex.output_dir(cfg, "flag")) == "flag"


def test_mode_must_match_preset():
    with pytest.raises(ConfigError, match="corpus.mode"):
        ex.model_config(parse_config("[corpus]\nmode = word_classification\n"))
    assert ex.model_config(parse_config("[corpus]\nmode = word_classification\n[model]\npreset = lrw-tiny\n")
                           ).name == "lrw-tiny"


def test_plan_cells_expands_ablations_only_where_they_apply():
    cfg = parse_config("[adapt]\npad_layers = 1, all\ncat_lengths = 1, 3, 5\n"
                       "[experiment]\nmethods = baseline, A, P, C, P+C, FT-B\nbudgets = 10\n")
    cells = ex.plan_cells(cfg, [0], lambda s: [3])
    per = {m: sum(c.method == m for c in cells) for m in cfg.methods}
    assert per == {"baseline": 1, "A": 1, "P": 2, "C": 3, "P+C": 6, "FT-B": 1}
    assert len({c.run_id for c in cells}) == len(cells)


# ---------------------------------------------------------------- sweep

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = parse_config(TINY)
    path = ex.sweep_budgets(cfg, root / "a")
    return cfg, root, ex.read_csv(path)


def test_sweep_row_arithmetic(tiny):
    cfg, _, rows = tiny
    speakers = ex.make_store(cfg, 0).test_speakers
    per = [r for r in rows if r["row_kind"] == "speaker"]
    means = [r for r in rows if r["row_kind"] == "mean"]
    assert len(per) == 2 * 2 * len(speakers) and len(means) == 2 * 2
    assert {r["budget"] for r in per} == {"2", "3"}
    assert all(r["schema_version"] == str(ex.SCHEMA_VERSION) and r["config_digest"] == cfg.digest() for r in rows)
    assert all(0.0 <= float(r["ratio"]) <= 1.0 for r in rows)


def test_baseline_is_budget_independent(tiny):
    rows = [r for r in tiny[2] if r["method"] == "baseline" and r["row_kind"] == "speaker"]
    by_spk = {}
    for r in rows:
        by_spk.setdefault(r["speaker"], set()).add(r["accuracy"])
    assert all(len(v) == 1 for v in by_spk.values())
    assert all(r["accuracy"] == r["baseline_accuracy"] for r in rows)


def test_theta_untouched_and_counts_consistent(tiny):
    cfg, _, rows = tiny
    model = build(ex.model_config(cfg), 0)
    n_add = parameter_count(model, init_prompts(model.config, "A", 0))["prompt_total"]
    for r in rows:
        assert r["theta_digest_before"] == r["theta_digest_after"]
        assert int(r["trainable_params"]) == (n_add if r["method"] == "A" else 0)
        assert int(r["full_params"]) == parameter_count(model)["total"]


def test_rerun_and_parallel_sweeps_are_byte_identical(tiny):
    cfg, root, _ = tiny
    for name, jobs in (("b", 1), ("c", 2)):
        ex.sweep_budgets(cfg, root / name, jobs=jobs)
        for f in ("results.csv", "logs.csv"):
            assert (root / name / f).read_bytes() == (root / "a" / f).read_bytes()
    ex.sweep_budgets(cfg, root / "a")  # reuses the stored checkpoint
    assert (root / "b" / "checkpoints").exists()


def test_export_prompts(tiny, tmp_path):
    cfg, root, _ = tiny
    cfg = cfg.replace("experiment", export_prompts=True, methods=("A",), budgets=("2",))
    shutil.copytree(root / "a" / "checkpoints", tmp_path / "checkpoints")
    ex.sweep_budgets(cfg, tmp_path)
    assert len(list((tmp_path / "prompts").glob("*.vspt"))) == len(ex.make_store(cfg, 0).test_speakers)


class LoggedStore(ex.SplitStore):
    """Records every speaker whose data is requested."""

    def __init__(self, inner):
        super().__init__(inner.train(), inner.seen_test(), inner._held)
        self.touched = []

    def adaptation(self, speaker):
        self.touched.append(speaker)
        return super().adaptation(speaker)

    def test(self, speaker):
        self.touched.append(speaker)
        return super().test(speaker)

    def train(self):
        self.touched.append("train")
        return super().train()


@pytest.mark.parametrize("method", ["A", "FT-C", "baseline"])
def test_cell_reads_only_its_own_speaker(tiny, method):
    cfg, root, _ = tiny
    store = LoggedStore(ex.make_store(cfg, 0))
    spk = store.test_speakers[-1]
    ex.run_cell(cfg, ex.Cell(0, spk, method, "2"), ex.checkpoint_path(root / "a", 0), store)
    assert store.touched and set(store.touched) == {spk}


def test_unknown_speaker_and_oversized_budget(tiny):
    cfg, root, _ = tiny
    ckpt = ex.checkpoint_path(root / "a", 0)
    with pytest.raises(KeyError, match="not a held-out speaker"):
        ex.run_cell(cfg, ex.Cell(0, 99, "A", "2"), ckpt)
    with pytest.raises(ConfigError, match="exceeds"):
        ex.run_cell(cfg, ex.Cell(0, ex.make_store(cfg, 0).test_speakers[0], "A", "500"), ckpt)


# ---------------------------------------------------------------- report

def test_report_tables(tiny, tmp_path):
    _, root, rows = tiny
    tables = summarize(collect([root / "a"]))
    per = [r for r in rows if r["row_kind"] == "speaker"]
    for row in tables["per_speaker"]:
        vals = [float(r["accuracy"]) for r in per if (r["method"], r["budget_label"]) == (row["method"], row["budget"])]
        assert abs(float(row["mean"]) - statistics.fmean(vals)) < 0.005 + 1e-9
    for row in tables["summary"]:
        if row["method"] == "baseline":
            assert row["improvement"] == "0.00"
    assert {r["method"] for r in tables["params"]} == {"baseline", "A"}
    text = write_report([root / "a"], tmp_path).read_text()
    assert "== summary" in text and (tmp_path / "report_per_speaker.csv").exists()


def test_mean_rows_are_exact_means(tiny):
    rows = tiny[2]
    for m in (r for r in rows if r["row_kind"] == "mean"):
        group = [r for r in rows if r["row_kind"] == "speaker" and
                 (r["method"], r["budget_label"]) == (m["method"], m["budget_label"])]
        assert abs(float(m["accuracy"]) - np.mean([float(r["accuracy"]) for r in group])) < 1e-6


def test_report_rejects_mixed_configs(tiny, tmp_path):
    _, root, rows = tiny
    other = [dict(r, config_digest="0" * 16) for r in rows]
    ex.write_csv(tmp_path / "results-other.csv", ex.RESULT_FIELDS, other)
    with pytest.raises(ReportError, match="different configs"):
        collect([root / "a" / "results.csv", tmp_path / "results-other.csv"])
    ex.write_csv(tmp_path / "old" / "results.csv", ex.RESULT_FIELDS, [dict(rows[0], schema_version=0)])
    with pytest.raises(ReportError, match="schema version"):
        collect([tmp_path / "old"])
    (tmp_path / "empty").mkdir()
    with pytest.raises(ReportError, match="no results"):
        collect([tmp_path / "empty"])


# ---------------------------------------------------------------- CLI

def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_cli_usage_and_config_errors(capsys, tmp_path):
    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 2 and error_of(err)["error"] == "usage"
    bad = tmp_path / "bad.ini"
    bad.write_text("[corpus]\nspeakers = 3\n")
    code, _, err = run_cli(capsys, "params", "--config", str(bad))
    assert code == 2 and error_of(err) == {"error": "config", "message": "unknown key corpus.speakers"}


def test_cli_checkpoint_errors(capsys, tiny, tmp_path):
    _, root, _ = tiny
    cfg_path = tmp_path / "tiny.ini"
    cfg_path.write_text(TINY)
    code, _, err = run_cli(capsys, "eval", "--config", str(cfg_path), "--out", str(tmp_path / "none"))
    assert code == 3 and error_of(err)["error"] == "missing_checkpoint"
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("classes = 4", "classes = 5"))
    code, _, err = run_cli(capsys, "eval", "--config", str(other),
                           "--checkpoint", str(ex.checkpoint_path(root / "a", 0)))
    assert code == 4 and error_of(err)["error"] == "checkpoint"
    code, _, err = run_cli(capsys, "adapt", "--config", str(cfg_path), "--method", "A", "--budget", "2",
                           "--speaker", "99", "--checkpoint", str(ex.checkpoint_path(root / "a", 0)),
                           "--out", str(tmp_path))
    assert code == 6 and "speaker 99" in error_of(err)["message"]
    code, _, err = run_cli(capsys, "report", "--out", str(tmp_path / "empty"))
    assert code == 5 and error_of(err)["error"] == "report"


def test_cli_adapt_eval_report(capsys, tiny, tmp_path):
    _, root, _ = tiny
    cfg_path = tmp_path / "tiny.ini"
    cfg_path.write_text(TINY)
    ckpt = str(ex.checkpoint_path(root / "a", 0))
    code, out, _ = run_cli(capsys, "adapt", "--config", str(cfg_path), "--method", "A", "--budget", "2",
                           "--checkpoint", ckpt, "--out", str(tmp_path))
    assert code == 0 and out.count("accuracy") == 2
    prompt = sorted((tmp_path / "prompts").glob("*.vspt"))[0]
    code, out, _ = run_cli(capsys, "eval", "--config", str(cfg_path), "--checkpoint", ckpt,
                           "--prompts", str(prompt))
    assert code == 0 and len(json.loads(out)) == 2
    code, out, _ = run_cli(capsys, "report", "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "report.txt").exists()


def test_cli_params_matches_model_counts(capsys):
    code, out, _ = run_cli(capsys, "params")
    assert code == 0
    lines = out.splitlines()
    model = build(ex.model_config(defaults()), 0)
    assert lines[0] == f"model grid-tiny: {parameter_count(model)['total']} parameters"
    table = {l.split()[0]: l.split() for l in lines[2:]}
    assert set(table) == set(METHODS) - {"baseline"}
    for combo in ("A", "P", "C"):
        want = parameter_count(model, init_prompts(model.config, combo, 0))["prompt_total"]
        assert int(table[combo][4]) == want
    assert table["A+P+C"][4] == str(sum(int(table[c][4]) for c in ("A", "P", "C")))
    assert table["FT-F"][-1] == "100.000"


def test_cli_gen_data_pretrain_sweep(capsys, tmp_path, monkeypatch):
    cfg_path = tmp_path / "tiny.ini"
    cfg_path.write_text(TINY)
    monkeypatch.setenv(ex.OUT_ENV, str(tmp_path / "env-out"))
    code, out, _ = run_cli(capsys, "gen-data", "--config", str(cfg_path), "--seed", "1")
    assert code == 0 and out.strip().endswith("manifest.csv")
    assert (tmp_path / "env-out" / "data" / "seed1" / "train.vspt").is_file()
    code, out, _ = run_cli(capsys, "pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "flag-out"))
    assert code == 0 and (tmp_path / "flag-out" / "logs" / "pretrain-seed0.csv").is_file()
    assert out.strip() == str(ex.checkpoint_path(tmp_path / "flag-out", 0))
    code, out, _ = run_cli(capsys, "sweep", "--config", str(cfg_path), "--out", str(tmp_path / "flag-out"))
    assert code == 0 and len(ex.read_csv(out.strip())) == 12
