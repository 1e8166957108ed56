"""Command-line interface: ``pvckit <command> [options]``.

Every command accepts ``--config FILE`` (JSON) whose keys are the long option
names with dashes replaced by underscores; explicit flags override the file.
Failures exit nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from pvckit.errors import ConfigError
from pvckit.fileio import load_checkpoint, read_volume, write_volume
from pvckit.losses import imbv
from pvckit.metrics import cohort_csv, cohort_table, metrics_csv, read_metrics_csv, summary_json
from pvckit.pvc import PsfModel, iy_correct, iy_mismatch_demo
from pvckit.volume import TemplateSet

log = logging.getLogger("pvckit")

SPECS = ("default", "small", "paper")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap (1 = deterministic)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvckit", description="Segmentation-free partial volume correction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic phantoms").add_subparsers(dest="action", required=True,
                                                                            parser_class=_Parser)
    gen = ph.add_parser("gen", help="generate a phantom cohort")
    _common(gen)
    gen.add_argument("--spec", choices=SPECS)
    gen.add_argument("--n", type=int)
    gen.add_argument("--jitter", type=float)
    gen.add_argument("--counts", type=float, help="counts per unit activity (0 = noiseless)")
    gen.add_argument("--fwhm", type=float, help="PSF FWHM in mm")

    iy = sub.add_parser("iy", help="iterative Yang correction").add_subparsers(dest="action", required=True,
                                                                              parser_class=_Parser)
    run = iy.add_parser("run", help="correct one volume")
    _common(run)
    run.add_argument("--in", dest="input")
    run.add_argument("--templates")
    run.add_argument("--iters", type=int)
    run.add_argument("--fwhm", type=float)
    demo = iy.add_parser("mismatch-demo", help="iY with shifted templates vs aligned")
    _common(demo)
    demo.add_argument("--case", help="case directory (observed, labels, case.json)")
    demo.add_argument("--in", dest="input")
    demo.add_argument("--templates")
    demo.add_argument("--iters", type=int)
    demo.add_argument("--shift", type=int, nargs=3, metavar=("DZ", "DY", "DX"))
    demo.add_argument("--fwhm", type=float)

    tr = sub.add_parser("train", help="train the network")
    _common(tr)
    tr.add_argument("--data", dest="data_dir")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--filters", type=int)
    tr.add_argument("--lambda-c", type=float)
    tr.add_argument("--resume")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(ev)
    ev.add_argument("--checkpoint")
    ev.add_argument("--data", dest="data_dir")
    ev.add_argument("--split", choices=("test", "val", "train", "all"))
    ev.add_argument("--all-slices", action="store_true", default=None)

    rp = sub.add_parser("report", help="cohort mean/SD table from a metrics CSV")
    _common(rp)
    rp.add_argument("--metrics")
    return parser


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Builtin defaults < config file < explicit flags."""
    opts = dict(defaults)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {args.config}: {e}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        opts.update(cfg)
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "action", "verbose"):
            opts[k] = v
    return opts


def _require(opts: dict, *keys: str):
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _emit(doc: dict):
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_phantom_gen(args) -> dict:
    from pvckit import phantom
    from pvckit.dataset import write_cohort

    o = _resolve(args, {"spec": "default", "n": 1, "seed": 0, "jitter": 0.15, "counts": 0.0, "fwhm": None})
    _require(o, "out")
    base = {"default": phantom.PhantomSpec, "small": phantom.small_spec, "paper": phantom.paper_scale_spec}[o["spec"]]()
    over = {"counts_scale": float(o["counts"])}
    if o["fwhm"] is not None:
        over["psf"] = PsfModel((float(o["fwhm"]),) * 3)
    base = replace(base, **over)
    specs = phantom.cohort_specs(base, int(o["n"]), int(o["seed"]), float(o["jitter"]))
    cases = [phantom.generate(s) for s in specs]
    out = write_cohort(o["out"], cases, {"spec_name": o["spec"], "seed": int(o["seed"]), "jitter": o["jitter"]})
    return {"out": str(out), "n_cases": len(cases)}


def _load_pair(o: dict):
    obs = read_volume(o["input"])
    tmpl = read_volume(o["templates"])
    if not isinstance(tmpl, TemplateSet):
        raise ConfigError(f"{o['templates']} is not a label map")
    return obs, tmpl


def cmd_iy_run(args) -> dict:
    o = _resolve(args, {"iters": 10, "fwhm": 10.0})
    _require(o, "input", "templates")
    obs, tmpl = _load_pair(o)
    corrected = iy_correct(obs, tmpl, PsfModel((float(o["fwhm"]),) * 3), int(o["iters"]))
    out = o.get("out") or str(Path(o["input"]).with_name("iy"))
    write_volume(out, corrected)
    return {"out": out, "imbv_observed": imbv(obs, tmpl), "imbv_corrected": imbv(corrected, tmpl)}


def cmd_iy_mismatch(args) -> dict:
    o = _resolve(args, {"iters": 10, "fwhm": 10.0, "shift": [0, 2, 0]})
    true_imbv = None
    if o.get("case"):
        case = Path(o["case"])
        o["input"] = o.get("input") or str(case / "observed")
        o["templates"] = o.get("templates") or str(case / "labels")
        meta = case / "case.json"
        if meta.exists():
            true_imbv = float(json.loads(meta.read_text())["true_imbv"])
    _require(o, "input", "templates")
    obs, tmpl = _load_pair(o)
    vol, report = iy_mismatch_demo(obs, tmpl, PsfModel((float(o["fwhm"]),) * 3), int(o["iters"]),
                                   tuple(int(s) for s in o["shift"]), true_imbv=true_imbv)
    doc = report.to_dict()
    if o.get("out"):
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_volume(out / "iy_mismatched", vol)
        (out / "mismatch.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def cmd_train(args) -> dict:
    from pvckit.train import TrainConfig, train

    o = _resolve(args, {})
    cfg = {k: v for k, v in o.items() if k not in ("threads", "resume", "filters", "lambda_c", "out")}
    cfg = TrainConfig.from_dict(cfg)
    if o.get("filters") is not None:
        cfg.network = replace(cfg.network, filters=int(o["filters"]))
    if o.get("lambda_c") is not None:
        try:
            cfg.weights = replace(cfg.weights, lambda_c=float(o["lambda_c"]))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if o.get("out") is not None:
        cfg.out_dir = o["out"]
    _require({"data_dir": cfg.data_dir, "out": cfg.out_dir}, "data_dir", "out")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(cfg, resume=o.get("resume"))
    last = result.history[-1] if result.history else {}
    return {"checkpoint": str(Path(cfg.out_dir) / "best.ckpt"), "best_epoch": result.best_epoch,
            "epochs_run": len(result.history), "final": last}


def cmd_eval(args) -> dict:
    from pvckit.train import TrainConfig, evaluate, load_samples, model_from_checkpoint

    o = _resolve(args, {"split": "test", "all_slices": False})
    _require(o, "checkpoint", "out")
    ckpt = load_checkpoint(o["checkpoint"])
    model = model_from_checkpoint(ckpt)
    train_cfg = TrainConfig.from_dict(ckpt.meta["train"])
    if o.get("data_dir"):
        train_cfg.data_dir = o["data_dir"]
    parts = load_samples(train_cfg)
    samples = parts["train"] + parts["val"] + parts["test"] if o["split"] == "all" else parts[o["split"]]
    result = evaluate(model, samples, heart_only=not o["all_slices"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.rows))
    table = cohort_table(result.rows)
    (out / "summary.json").write_text(summary_json(table, result.agreements) + "\n")
    return {"metrics": str(out / "metrics.csv"), "summary": str(out / "summary.json"), "n_cases": len(samples),
            "mean_imbv": {k: float(np.mean(v)) for k, v in result.imbv.items()}}


def cmd_report(args) -> dict:
    o = _resolve(args, {})
    _require(o, "metrics")
    rows = read_metrics_csv(Path(o["metrics"]).read_text())
    table = cohort_table(rows)
    if o.get("out"):
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "cohort.csv").write_text(cohort_csv(table))
        (out / "cohort.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return {ref: {m: {k: e["text"] for k, e in entry.items()} for m, entry in methods.items()}
            for ref, methods in table.items()}


COMMANDS = {
    ("phantom", "gen"): cmd_phantom_gen,
    ("iy", "run"): cmd_iy_run,
    ("iy", "mismatch-demo"): cmd_iy_mismatch,
    ("train", None): cmd_train,
    ("eval", None): cmd_eval,
    ("report", None): cmd_report,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        with threadpool_limits(limits=args.threads):
            doc = handler(args)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except ConfigError as e:
        return _fail("config", str(e), 2)
    except FileNotFoundError as e:
        return _fail("missing-file", str(e), 1)
    except Exception as e:  # noqa: BLE001 - reported as JSON, not a traceback
        return _fail(type(e).__name__, str(e), 1)
    _emit(doc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
