"""Command-line entry point: ``python -m vsprompt <command> ...``.

Failures print one JSON object on stderr (``{"error": kind, "message": ...}``)
and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..autodiff import ShapeError
from ..checkpoint import CheckpointError
from ..model import analytic_parameter_count, analytic_prompt_count, parameter_count, build
from ..prompts import COMBINATIONS, init_prompts, load_prompts, pad_layer_subset
from ..synthdata import export_corpus, split_unseen_speakers
from ..adaptation import evaluate, trainable_count
from . import experiment as ex
from .config import ConfigError, ExperimentConfig, defaults, load_config
from .report import ReportError, write_report

EXIT_CODES = {"usage": 2, "config": 2, "missing_checkpoint": 3, "checkpoint": 4, "shape": 4,
              "report": 5, "invalid": 6, "internal": 1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else defaults()


def _seed(args, cfg) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _speakers(args, store) -> list[int]:
    return store.test_speakers if args.speaker is None else [args.speaker]


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    corpus = ex.make_corpus(cfg, seed)
    c = cfg["corpus"]
    split_unseen_speakers(corpus, c["num_test_speakers"], c["adapt_fraction"])
    manifest = export_corpus(corpus, ex.output_dir(cfg, args.out) / "data" / f"seed{seed}")
    print(manifest)


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = ex.output_dir(cfg, args.out)
    path = Path(args.checkpoint) if args.checkpoint else ex.checkpoint_path(out, seed)
    model, log = ex.pretrain_seed(cfg, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    ex.write_csv(out / "logs" / f"pretrain-seed{seed}.csv", ex.LOG_FIELDS, [vars(r) for r in log])
    print(path)


def _require_checkpoint(args, cfg, seed) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else ex.checkpoint_path(ex.output_dir(cfg, args.out), seed)
    if not path.is_file():
        raise ex.MissingCheckpoint(f"checkpoint not found: {path}")
    return path


def cmd_adapt(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    ckpt = _require_checkpoint(args, cfg, seed)
    out = ex.output_dir(cfg, args.out)
    store = ex.make_store(cfg, seed)
    a = cfg["adapt"]
    rows, logs = [], []
    for spk in _speakers(args, store):
        cell = ex.Cell(seed, spk, args.method, args.budget,
                       a["pad_layers"][0] if "P" in args.method.split("+") else "-",
                       str(a["cat_lengths"][0]) if "C" in args.method.split("+") else "-")
        row, log = ex.run_cell(cfg, cell, ckpt, store, prompt_dir=out / "prompts")
        rows.append(row)
        logs.extend(vars(r) for r in log)
    stem = f"adapt-{args.method}-b{args.budget}-seed{seed}".replace("%", "pct")
    ex.write_csv(out / "logs" / f"{stem}.csv", ex.LOG_FIELDS, logs)
    ex.write_csv(out / f"results-{stem}.csv", ex.RESULT_FIELDS, rows + ex.mean_rows(rows))
    for r in rows:
        print(f"speaker {r['speaker']} {r['method']} budget {r['budget']}: "
              f"accuracy {r['accuracy']} (baseline {r['baseline_accuracy']})")


def cmd_eval(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    model = ex.load_pretrained(_require_checkpoint(args, cfg, seed), cfg)
    prompts = load_prompts(args.prompts, model.config) if args.prompts else None
    store = ex.make_store(cfg, seed)
    res = {"seen": evaluate(model, None, store.seen_test())["accuracy"]} if prompts is None else {}
    for spk in _speakers(args, store):
        res[f"speaker_{spk}"] = evaluate(model, prompts, store.test(spk))["accuracy"]
    print(json.dumps({k: round(v, 6) for k, v in res.items()}))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    print(ex.sweep_budgets(cfg, args.out, jobs=args.jobs,
                           seeds=None if args.seed is None else [args.seed]))


def cmd_params(args) -> None:
    cfg = _config(args)
    mc = ex.model_config(cfg)
    model = build(mc, 0)
    full = parameter_count(model)["total"]
    if analytic_parameter_count(mc)["total"] != full:
        raise RuntimeError("analytic and tensor parameter counts disagree")
    pl = cfg["adapt"]["pad_layers"][0]
    n_layers = None if pl == "all" else int(pl)
    np_ = cfg["adapt"]["cat_lengths"][0]
    print(f"model {mc.name}: {full} parameters")
    print(f"{'method':8s} {'add':>7s} {'pad':>7s} {'cat':>7s} {'total':>8s} {'ratio_pct':>9s}")
    for combo in COMBINATIONS:
        ps = init_prompts(mc, combo, 0, pad_layers=n_layers, cat_length=np_)
        counted = parameter_count(model, ps)
        formula = analytic_prompt_count(mc, combo, pad_layer_subset(mc, n_layers), np_)
        if formula["prompt_total"] != counted["prompt_total"]:
            raise RuntimeError(f"{combo}: analytic and tensor prompt counts disagree")
        print(f"{combo:8s} {counted['add']:7d} {counted['pad']:7d} {counted['cat']:7d} "
              f"{counted['prompt_total']:8d} {100 * counted['ratio']:9.3f}")
    for m in ("FT-C", "FT-B", "FT-F"):
        n = trainable_count(model, m)
        print(f"{m:8s} {'':7s} {'':7s} {'':7s} {n:8d} {100 * n / full:9.3f}")


def cmd_report(args) -> None:
    out = Path(args.out) if args.out else ex.output_dir(defaults())
    print(write_report(args.inputs or [out], out))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsprompt", description="Prompt-based speaker adaptation on a synthetic lip-reading task.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False, seed=True):
        sp.add_argument("--config", help="experiment config file (defaults apply when omitted)")
        sp.add_argument("--out", help=f"output directory (else ${ex.OUT_ENV}, config output_dir, ./runs)")
        if seed:
            sp.add_argument("--seed", type=int, help="run seed (default: first configured seed)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="pretrained model checkpoint")

    common(sub.add_parser("gen-data", help="render the synthetic corpus and its splits"))
    common(sub.add_parser("pretrain", help="train the recognizer on the seen speakers"), checkpoint=True)
    sp = sub.add_parser("adapt", help="adapt prompts or finetune for held-out speakers")
    common(sp, checkpoint=True)
    sp.add_argument("--method", required=True, choices=list(COMBINATIONS) + ["FT-C", "FT-B", "FT-F", "baseline"])
    sp.add_argument("--budget", required=True, help="adaptation samples, or a percentage like 30%%")
    sp.add_argument("--speaker", type=int)
    sp = sub.add_parser("eval", help="score a checkpoint (optionally with prompts) per speaker")
    common(sp, checkpoint=True)
    sp.add_argument("--prompts")
    sp.add_argument("--speaker", type=int)
    sp = sub.add_parser("sweep", help="run every configured method, budget and seed")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    common(sub.add_parser("params", help="parameter counts and ratios per method"), seed=False)
    sp = sub.add_parser("report", help="aggregate results files into tables")
    sp.add_argument("--out", help="results directory; tables are written here")
    sp.add_argument("inputs", nargs="*", help="extra results files or directories")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "sweep": cmd_sweep, "params": cmd_params, "report": cmd_report}


def _fail(kind: str, exc: BaseException) -> int:
    text = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
    msg = " ".join(str(text).split()) or type(exc).__name__
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("usage", e)
    except ConfigError as e:
        return _fail("config", e)
    except ex.MissingCheckpoint as e:
        return _fail("missing_checkpoint", e)
    except CheckpointError as e:
        return _fail("checkpoint", e)
    except ShapeError as e:
        return _fail("shape", e)
    except ReportError as e:
        return _fail("report", e)
    except (ValueError, KeyError) as e:
        return _fail("invalid", e)
    except Exception as e:  # noqa: BLE001 - last-resort single-line report
        return _fail("internal", e)
    return 0
