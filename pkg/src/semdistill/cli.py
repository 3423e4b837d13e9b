"""Command-line pipeline: synth -> fit-pca -> train -> score / eval / sweep.

Every subcommand resolves its parameters as defaults < --config JSON < flags
and writes the resolved set next to its outputs (``*.config.json``). Feeding
that snapshot back through --config reproduces the run byte for byte.

Errors go to stderr as one line, ``semdistill: <kind>: <message>``, with a
distinct exit code per kind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiments, mdn, metrics
from . import pca as pca_mod
from .errors import DimensionError, FormatError, LinkageError, TrainingError, UndefinedMetricError
from .gmm import log_density, mixture_mean, renyi2_entropy

log = logging.getLogger("semdistill")

EXIT_CODES = {
    "usage-error": 2,
    "missing-file": 3,
    "dimension-mismatch": 4,
    "format-error": 5,
    "pca-mismatch": 6,
    "undefined-metric": 7,
    "training-error": 8,
    "invalid-argument": 9,
}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage-error", message)


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


DEFAULTS = {
    "synth": {
        "n": 5000, "n_test": 1000, "dh": 32, "dz": 16, "samples": 32, "components": "2-5",
        "separation": 2.0, "scale_spread": 0.4, "component_scale": 0.3, "noise": 0.1,
        "label_slope": 4.0, "label_midpoint": None, "seed": 0, "out": None,
    },
    "fit-pca": {"dataset": None, "dpca": 16, "out": None},
    "train": {
        "dataset": None, "pca": None, "k": 5, "width": 128, "depth": 2, "seed": 0,
        "lr": 1e-3, "batch_size": 64, "max_epochs": 200, "patience": 10,
        "val_fraction": 0.1, "clip": 5.0, "out": None,
    },
    "score": {"model": None, "pca": None, "dataset": None, "mode": "entropy", "out": "-"},
    "eval": {
        "model": None, "pca": None, "dataset": None, "train_dataset": None,
        "suites": "hallucination,ood,fidelity,consensus", "resamples": 1000, "seed": 0,
        "out": None,
    },
    "sweep": {
        "train": None, "test": None, "dpca": "16", "k": "1,2,5,10", "width": "128",
        "depth": "2", "seed": 0, "lr": 1e-3, "batch_size": 64, "max_epochs": 200,
        "patience": 10, "out": None,
    },
}

REQUIRED = {
    "synth": ("out",),
    "fit-pca": ("dataset", "out"),
    "train": ("dataset", "out"),
    "score": ("model", "dataset"),
    "eval": ("model", "dataset", "out"),
    "sweep": ("train", "test", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", help="JSON file of parameters; flags override it")
        return sp

    sp = cmd("synth", "generate a synthetic-teacher dataset (train + test files)")
    sp.add_argument("--n", type=int, help="total prompts")
    sp.add_argument("--n-test", dest="n_test", type=int, help="prompts held out for test.ndjson")
    sp.add_argument("--dh", type=int)
    sp.add_argument("--dz", type=int)
    sp.add_argument("--samples", type=int, help="teacher samples per prompt (S)")
    sp.add_argument("--components", help="component count range, e.g. 2-5 or 3")
    sp.add_argument("--separation", type=float)
    sp.add_argument("--scale-spread", dest="scale_spread", type=float)
    sp.add_argument("--component-scale", dest="component_scale", type=float)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--label-slope", dest="label_slope", type=float)
    sp.add_argument("--label-midpoint", dest="label_midpoint", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output directory")

    sp = cmd("fit-pca", "fit the target PCA on a dataset's flattened samples")
    sp.add_argument("--dataset")
    sp.add_argument("--dpca", type=int)
    sp.add_argument("--out")

    sp = cmd("train", "train a student checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--pca")
    sp.add_argument("--k", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--max-epochs", dest="max_epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--val-fraction", dest="val_fraction", type=float)
    sp.add_argument("--clip", type=float)
    sp.add_argument("--out")

    sp = cmd("score", "per-prompt entropy, default-answer log-likelihood, or mixture mean")
    sp.add_argument("--model")
    sp.add_argument("--pca")
    sp.add_argument("--dataset")
    sp.add_argument("--mode", choices=("entropy", "likelihood", "mean"))
    sp.add_argument("--out", help="NDJSON output path, '-' for stdout")

    sp = cmd("eval", "run evaluation suites and write reports")
    sp.add_argument("--model")
    sp.add_argument("--pca")
    sp.add_argument("--dataset")
    sp.add_argument("--train-dataset", dest="train_dataset",
                    help="training data for the correctness-probe baseline")
    sp.add_argument("--suites")
    sp.add_argument("--resamples", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output directory")

    sp = cmd("sweep", "grid over PCA dimension, K, width and depth; writes CSV")
    sp.add_argument("--train")
    sp.add_argument("--test")
    sp.add_argument("--dpca")
    sp.add_argument("--k")
    sp.add_argument("--width")
    sp.add_argument("--depth")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--max-epochs", dest="max_epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--out", help="CSV output path")
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    path = getattr(ns, "config", None)
    if path:
        file_cfg = json.loads(_existing(path).read_text())
        file_cfg = file_cfg.get("params", file_cfg)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise CliError("usage-error", f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise CliError("usage-error", f"{command} requires --{missing[0].replace('_', '-')}")
    return cfg


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-file", f"{path} does not exist")
    return p


def _snapshot(command, cfg, path):
    text = json.dumps({"command": command, "params": cfg}, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def _load_pca(path):
    return pca_mod.load(_existing(path)) if path else None


def _load_model(path, pca):
    model, header = mdn.load_model(_existing(path))
    linked = header.get("pca_id")
    if linked and (pca is None or pca.id != linked):
        got = pca.id if pca is not None else "none"
        raise LinkageError(f"checkpoint was trained with PCA {linked}, got {got}")
    return model


def _components(text):
    parts = str(text).split("-")
    lo, hi = int(parts[0]), int(parts[-1])
    return lo, hi


def cmd_synth(cfg):
    lo, hi = _components(cfg["components"])
    tcfg = data.SyntheticTeacherConfig(
        n_prompts=cfg["n"], d_h=cfg["dh"], d_z=cfg["dz"], n_samples=cfg["samples"],
        min_components=lo, max_components=hi, separation=cfg["separation"],
        scale_spread=cfg["scale_spread"], component_scale=cfg["component_scale"],
        noise_scale=cfg["noise"], label_slope=cfg["label_slope"],
        label_midpoint=cfg["label_midpoint"], seed=cfg["seed"],
    )
    records = data.generate_synthetic(tcfg, split="p")
    train, test = data.split_records(records, cfg["n_test"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    note = f"synthetic teacher seed={cfg['seed']}"
    data.write_dataset(data.header_for(train, "train", note), train, out / "train.ndjson")
    if test:
        data.write_dataset(data.header_for(test, "test", note), test, out / "test.ndjson")
    _snapshot("synth", cfg, out / "synth.config.json")
    log.info("wrote %d train / %d test prompts to %s", len(train), len(test), out)


def cmd_fit_pca(cfg):
    _, records = data.read_dataset(_existing(cfg["dataset"]))
    flat = np.concatenate([r.samples for r in records])
    t = pca_mod.fit(flat, cfg["dpca"])
    pca_mod.save(t, cfg["out"])
    _snapshot("fit-pca", cfg, f"{cfg['out']}.config.json")
    log.info("PCA %s: %d -> %d dims, %.1f%% variance kept", t.id, t.d_raw, t.d_pca,
             100 * t.explained_variance.sum() / np.trace(np.cov(flat.T)))


def cmd_train(cfg):
    _, records = data.read_dataset(_existing(cfg["dataset"]))
    t = _load_pca(cfg["pca"])
    recs = experiments.project(records, t)
    d_z = t.d_pca if t is not None else np.shape(records[0].samples)[1]
    mcfg = mdn.MdnConfig(len(records[0].h), d_z, cfg["k"], cfg["width"], cfg["depth"], seed=cfg["seed"])
    tcfg = mdn.TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
        patience=cfg["patience"], validation_fraction=cfg["val_fraction"],
        clip_norm=cfg["clip"], seed=cfg["seed"],
    )
    model, tlog = mdn.train(recs, mcfg, tcfg)
    summary = {"best_epoch": tlog.best_epoch, "best_val_nll": tlog.best_val_nll,
               "epochs_run": len(tlog.epochs) - 1}
    mdn.save_model(model, cfg["out"], pca_id=t.id if t is not None else None, metrics=summary)
    Path(f"{cfg['out']}.log.json").write_text(json.dumps(tlog.to_dict(), indent=2, sort_keys=True) + "\n")
    _snapshot("train", cfg, f"{cfg['out']}.config.json")
    log.info("trained: best epoch %d, val NLL %.4f", tlog.best_epoch, tlog.best_val_nll)


def _json_vec(v):
    return [float(x) for x in np.asarray(v).ravel()]


def cmd_score(cfg):
    t = _load_pca(cfg["pca"])
    model = _load_model(cfg["model"], t)
    header, it = data.iter_dataset(_existing(cfg["dataset"]))
    buf = io.StringIO()
    for r in it:
        rp = experiments.project([r], t)[0]
        mixture = mdn.forward(model, rp.h)
        row = {"id": r.id, "label": int(r.label)}
        if cfg["mode"] == "entropy":
            row["score"] = renyi2_entropy(mixture)
        elif cfg["mode"] == "likelihood":
            row["score"] = log_density(mixture, rp.default_embedding)
        else:
            m = mixture_mean(mixture)
            row["mean"] = _json_vec(m)
            if t is not None:
                row["mean_raw"] = _json_vec(t.inverse_transform(m))
        buf.write(json.dumps(row) + "\n")
    if cfg["out"] in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(cfg["out"]).write_text(buf.getvalue())
        _snapshot("score", cfg, f"{cfg['out']}.config.json")


def cmd_eval(cfg):
    t = _load_pca(cfg["pca"])
    model = _load_model(cfg["model"], t)
    _, records = data.read_dataset(_existing(cfg["dataset"]))
    suites = [s.strip() for s in cfg["suites"].split(",") if s.strip()]
    unknown = set(suites) - {"hallucination", "ood", "fidelity", "consensus"}
    if unknown:
        raise CliError("usage-error", f"unknown suites {sorted(unknown)}")
    probe = None
    if cfg["train_dataset"] and "hallucination" in suites:
        _, train_recs = data.read_dataset(_existing(cfg["train_dataset"]))
        probe = metrics.train_probe(np.stack([r.h for r in train_recs]),
                                    1 - np.array([r.label for r in train_recs]), seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rs, seed = cfg["resamples"], cfg["seed"]
    results = []
    for s in suites:
        if s == "hallucination":
            results.append(experiments.run_hallucination_eval(model, t, records, rs, seed, probe=probe))
        elif s == "ood":
            results.append(experiments.run_ood_eval(model, t, records, rs, seed))
        elif s == "fidelity":
            results.append(experiments.run_fidelity(model, t, records))
        else:
            results.append(experiments.run_consensus_eval(model, t, records, rs, seed))
    payload = {r.name: r.to_dict() for r in results}
    (out / "reports.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text("\n\n".join(experiments.format_report(r) for r in results) + "\n")
    for r in results:
        for name, ss in r.scores.items():
            lines = [json.dumps({"id": i, "score": float(sc), "label": int(lb)})
                     for i, sc, lb in zip(r.ids, ss.scores, ss.labels)]
            (out / f"scores_{r.name}_{name}.ndjson").write_text("\n".join(lines) + "\n")
    _snapshot("eval", cfg, out / "eval.config.json")
    log.info("wrote %d suite reports to %s", len(results), out)


def cmd_sweep(cfg):
    _, train = data.read_dataset(_existing(cfg["train"]))
    _, test = data.read_dataset(_existing(cfg["test"]))
    tcfg = mdn.TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
                           max_epochs=cfg["max_epochs"], patience=cfg["patience"], seed=cfg["seed"])
    rows = experiments.run_sweep(
        train, test, d_pca=_ints(cfg["dpca"]), components=_ints(cfg["k"]),
        hidden_width=_ints(cfg["width"]), depth=_ints(cfg["depth"]), train_cfg=tcfg,
        seed=cfg["seed"],
    )
    with open(cfg["out"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=experiments.SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in row.items()})
    _snapshot("sweep", cfg, f"{cfg['out']}.config.json")


COMMANDS = {
    "synth": cmd_synth, "fit-pca": cmd_fit_pca, "train": cmd_train,
    "score": cmd_score, "eval": cmd_eval, "sweep": cmd_sweep,
}


def _kind(exc) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, DimensionError):
        return "dimension-mismatch"
    if isinstance(exc, FormatError):
        return "format-error"
    if isinstance(exc, LinkageError):
        return "pca-mismatch"
    if isinstance(exc, UndefinedMetricError):
        return "undefined-metric"
    if isinstance(exc, TrainingError):
        return "training-error"
    if isinstance(exc, (ValueError, KeyError, TypeError, json.JSONDecodeError)):
        return "invalid-argument"
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if ns.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if not ns.command:
            raise CliError("usage-error", "a subcommand is required")
        cfg = resolve(ns.command, ns)
        COMMANDS[ns.command](cfg)
    except Exception as exc:  # noqa: BLE001 -- mapped to exit codes below
        kind = _kind(exc)
        msg = " ".join(str(exc).split())
        print(f"semdistill: {kind}: {msg}", file=sys.stderr)
        return EXIT_CODES[kind]
    return 0


if __name__ == "__main__":
    sys.exit(main())
