"""Corpus construction, pretraining cache, per-speaker adaptation cells and sweeps.

Result rows carry only deterministic values; wall-clock times go to a separate
timings file so ``results.csv`` is byte-identical across reruns.
"""
from __future__ import annotations

import csv
import logging
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .. import __version__, checkpoint
from ..adaptation import (AdaptationConfig, LogRow, TrainConfig, evaluate, finetune, pretrain,
                          trainable_count)
from ..adaptation import adapt as adapt_prompts
from ..model import ModelConfig, RecognizerModel, build, load_model, parameter_count, preset
from ..prompts import init_prompts, save_prompts
from ..synthdata import SpeakerCorpus, Split, budget_subset, fraction_budget, generate_corpus, \
    split_unseen_speakers
from .config import ConfigError, ExperimentConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESULT_FIELDS = (
    "schema_version", "code_version", "config_digest", "row_kind", "seed", "method", "speaker",
    "budget", "budget_label", "pad_layers", "cat_length", "accuracy", "wer", "baseline_accuracy",
    "adapt_accuracy", "trainable_params", "full_params", "ratio", "theta_digest_before",
    "theta_digest_after",
)
LOG_FIELDS = ("run_id", "phase", "step", "loss", "metric", "lr")
TIMING_FIELDS = ("run_id", "seconds")
OUT_ENV = "PROMPT_ADAPT_OUT"


class MissingCheckpoint(FileNotFoundError):
    pass


# ---------------------------------------------------------------- data access

class SplitStore:
    """The only route from a cell to corpus data; one speaker per request."""

    def __init__(self, train: Split, seen_test: Split, held: dict[int, tuple[Split, Split]]):
        self._train, self._seen, self._held = train, seen_test, held

    @property
    def test_speakers(self) -> list[int]:
        return sorted(self._held)

    def _pair(self, speaker: int) -> tuple[Split, Split]:
        if speaker not in self._held:
            raise KeyError(f"speaker {speaker} is not a held-out speaker (held out: {self.test_speakers})")
        return self._held[speaker]

    def adaptation(self, speaker: int) -> Split:
        return self._pair(speaker)[0]

    def test(self, speaker: int) -> Split:
        return self._pair(speaker)[1]

    def train(self) -> Split:
        return self._train

    def seen_test(self) -> Split:
        return self._seen


def make_corpus(cfg: ExperimentConfig, seed: int) -> SpeakerCorpus:
    c = cfg["corpus"]
    return generate_corpus(seed, c["num_speakers"], c["classes"], c["samples_per_speaker"], c["mode"],
                           frames=c["frames"], height=c["height"], width=c["width"],
                           word_frames=c["word_frames"], noise=c["noise"])


_STORES: dict[tuple[str, int], SplitStore] = {}


def make_store(cfg: ExperimentConfig, seed: int) -> SplitStore:
    """Corpus and splits for one seed, cached per process."""
    key = (cfg.digest(), seed)
    if key not in _STORES:
        corpus = make_corpus(cfg, seed)
        c = cfg["corpus"]
        train, seen, held = split_unseen_speakers(corpus, c["num_test_speakers"], c["adapt_fraction"])
        _STORES[key] = SplitStore(train, seen, held)
    return _STORES[key]


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    c = cfg["corpus"]
    mc = preset(cfg["model"]["preset"], **{"frames": c["frames"], "height": c["height"], "width": c["width"]},
                **({"vocab": c["classes"]} if cfg["model"]["preset"] == "grid-tiny" else {"classes": c["classes"]}))
    if mc.mode != c["mode"]:
        raise ConfigError(f"model preset {mc.name} is a {mc.mode} model but corpus.mode is {c['mode']}")
    return mc


# ---------------------------------------------------------------- pretraining

def checkpoint_path(out_dir, seed: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"pretrained-seed{seed}.vspt"


def pretrain_seed(cfg: ExperimentConfig, seed: int) -> tuple[RecognizerModel, list[LogRow]]:
    p = cfg["pretrain"]
    model = build(model_config(cfg), seed)
    tc = TrainConfig(epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"],
                     weight_decay=p["weight_decay"], warmup=p["warmup"], seed=seed)
    return pretrain(model, make_store(cfg, seed).train(), tc, run_id=f"pretrain-seed{seed}")


def load_pretrained(path, cfg: ExperimentConfig) -> RecognizerModel:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    model = load_model(path)
    want = model_config(cfg)
    if model.config.digest() != want.digest():
        raise checkpoint.CheckpointError(
            f"checkpoint {path} holds a {model.config.name} model whose config does not match the experiment")
    return model.freeze()


def ensure_pretrained(cfg: ExperimentConfig, seed: int, out_dir) -> Path:
    """Pretrain once per seed; later calls reuse the stored checkpoint."""
    path = checkpoint_path(out_dir, seed)
    if path.is_file():
        return path
    model, log = pretrain_seed(cfg, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    write_csv(Path(out_dir) / "logs" / f"pretrain-seed{seed}.csv", LOG_FIELDS, [vars(r) for r in log])
    return path


# ---------------------------------------------------------------- cells

@dataclass(frozen=True)
class Cell:
    seed: int
    speaker: int
    method: str
    budget_label: str
    pad_layers: str = "-"
    cat_length: str = "-"

    @property
    def run_id(self) -> str:
        return (f"seed{self.seed}-spk{self.speaker}-{self.method}-b{self.budget_label}"
                f"-pl{self.pad_layers}-np{self.cat_length}").replace("%", "pct")


def resolve_budget(label: str, adapt: Split) -> int:
    if label.endswith("%"):
        return fraction_budget(adapt, float(label[:-1]) / 100.0)
    n = int(label)
    if n > len(adapt):
        raise ConfigError(f"budget {n} exceeds the {len(adapt)} adaptation samples of {adapt.name}")
    return n


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_cell(cfg: ExperimentConfig, cell: Cell, ckpt: Path, store: SplitStore | None = None,
             prompt_dir: Path | None = None) -> tuple[dict, list[LogRow]]:
    """Adapt (or finetune) on one speaker's budgeted data and score its test split."""
    store = make_store(cfg, cell.seed) if store is None else store
    model = load_pretrained(ckpt, cfg)
    adapt_split = store.adaptation(cell.speaker)
    test_split = store.test(cell.speaker)
    budget = resolve_budget(cell.budget_label, adapt_split)
    sub = budget_subset(adapt_split, budget, cell.seed)
    a = cfg["adapt"]
    ac = AdaptationConfig(lr={"add": a["lr_add"], "pad": a["lr_pad"], "cat": a["lr_cat"]},
                          finetune_lr=a["finetune_lr"], epochs=a["epochs"], batch_size=a["batch_size"],
                          weight_decay=a["weight_decay"], seed=cell.seed)
    before = model.digest()
    base = evaluate(model, None, test_split)
    log: list[LogRow] = []
    full = parameter_count(model)["total"]
    if cell.method == "baseline":
        res, fit, n_train = base, evaluate(model, None, sub), 0
    elif cell.method.startswith("FT-"):
        tuned, log, n_train = finetune(model, sub, cell.method[-1], ac, run_id=cell.run_id)
        res, fit = evaluate(tuned, None, test_split), evaluate(tuned, None, sub)
    else:
        pl = None if cell.pad_layers in ("-", "all") else int(cell.pad_layers)
        np_ = 5 if cell.cat_length == "-" else int(cell.cat_length)
        ps = init_prompts(model.config, cell.method, cell.seed, pad_layers=pl, cat_length=np_,
                          speaker=str(cell.speaker))
        ps, log = adapt_prompts(model, ps, sub, ac, run_id=cell.run_id)
        res, fit = evaluate(model, ps, test_split), evaluate(model, ps, sub)
        n_train = trainable_count(model, cell.method, ps)
        if prompt_dir is not None:
            prompt_dir.mkdir(parents=True, exist_ok=True)
            save_prompts(ps, prompt_dir / f"{cell.run_id}.vspt", model.config)
    after = model.digest()
    row = {
        "schema_version": SCHEMA_VERSION, "code_version": __version__, "config_digest": cfg.digest(),
        "row_kind": "speaker", "seed": cell.seed, "method": cell.method, "speaker": cell.speaker,
        "budget": budget, "budget_label": cell.budget_label, "pad_layers": cell.pad_layers,
        "cat_length": cell.cat_length, "accuracy": _fmt(res["accuracy"]),
        "wer": _fmt(res["wer"]) if "wer" in res else "", "baseline_accuracy": _fmt(base["accuracy"]),
        "adapt_accuracy": _fmt(fit["accuracy"]), "trainable_params": n_train, "full_params": full,
        "ratio": _fmt(n_train / full), "theta_digest_before": before, "theta_digest_after": after,
    }
    return row, log


def plan_cells(cfg: ExperimentConfig, seeds, speakers_for) -> list[Cell]:
    """Every (seed, speaker, budget, method, ablation variant) in a fixed order."""
    cells = []
    for seed in seeds:
        for spk in speakers_for(seed):
            for b in cfg.budgets:
                for m in cfg.methods:
                    parts = set(m.split("+")) if not (m == "baseline" or m.startswith("FT-")) else set()
                    pls = cfg["adapt"]["pad_layers"] if "P" in parts else ("-",)
                    nps = [str(n) for n in cfg["adapt"]["cat_lengths"]] if "C" in parts else ["-"]
                    for pl in pls:
                        for n in nps:
                            cells.append(Cell(seed, spk, m, b, pl, n))
    return cells


def _cell_worker(args) -> tuple[str, float]:
    """Run one cell and write its row and log atomically under ``cells/``."""
    cfg, cell, ckpt, out, prompt_dir = args
    t0 = time.perf_counter()
    row, log = run_cell(cfg, cell, ckpt, prompt_dir=prompt_dir)
    write_csv(out / "cells" / f"{cell.run_id}.csv", RESULT_FIELDS, [row])
    write_csv(out / "cells" / f"{cell.run_id}.log.csv", LOG_FIELDS, [vars(r) for r in log])
    return cell.run_id, time.perf_counter() - t0


def mean_rows(rows: list[dict]) -> list[dict]:
    """Average the per-speaker rows of each (seed, method, budget, variant)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["seed"], r["method"], r["budget_label"], r["pad_layers"], r["cat_length"]),
                          []).append(r)
    out = []
    for key, rs in groups.items():
        m = dict(rs[0])
        m.update(row_kind="mean", speaker="mean", budget=rs[0]["budget"] if len({r["budget"] for r in rs}) == 1 else "")
        for f in ("accuracy", "wer", "baseline_accuracy", "adapt_accuracy"):
            vals = [float(r[f]) for r in rs if r[f] != ""]
            m[f] = _fmt(statistics.fmean(vals)) if vals else ""
        digests = {(r["theta_digest_before"], r["theta_digest_after"]) for r in rs}
        m["theta_digest_before"], m["theta_digest_after"] = (
            next(iter(digests)) if len(digests) == 1 else ("mixed", "mixed"))
        out.append(m)
    return out


def write_csv(path, fields, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    os.replace(tmp, path)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    out = override or os.environ.get(OUT_ENV) or cfg["experiment"]["output_dir"] or "runs"
    return Path(out)


def sweep_budgets(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, seeds=None) -> Path:
    """Run every configured cell; write results.csv, logs.csv and timings.csv.

    Checkpoints are pretrained (or reused) per seed first. Cells run in a
    process pool when ``jobs > 1``; rows are sorted before writing so the
    output does not depend on scheduling.
    """
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = output_dir(cfg, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.seeds if seeds is None else seeds)
    timings = []
    ckpts = {}
    for s in seeds:
        t0 = time.perf_counter()
        ckpts[s] = ensure_pretrained(cfg, s, out)
        timings.append({"run_id": f"pretrain-seed{s}", "seconds": f"{time.perf_counter() - t0:.3f}"})
    cells = plan_cells(cfg, seeds, lambda s: make_store(cfg, s).test_speakers)
    prompt_dir = out / "prompts" if cfg["experiment"]["export_prompts"] else None
    work = [(cfg, c, ckpts[c.seed], out, prompt_dir) for c in cells]
    if jobs == 1:
        done = [_cell_worker(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_cell_worker, work))
    # merge in plan order, independent of completion order
    rows, logs = [], []
    for cell, (run_id, secs) in zip(cells, done):
        row = read_csv(out / "cells" / f"{run_id}.csv")[0]
        rows.append(row)
        logs.extend(read_csv(out / "cells" / f"{run_id}.log.csv"))
        timings.append({"run_id": run_id, "seconds": f"{secs:.3f}"})
        logger.info("%s accuracy %s", run_id, row["accuracy"])
    rows = rows + mean_rows(rows)
    write_csv(out / "results.csv", RESULT_FIELDS, rows)
    write_csv(out / "logs.csv", LOG_FIELDS, logs)
    write_csv(out / "timings.csv", TIMING_FIELDS, timings)
    return out / "results.csv"
