"""Command-line front end: ``dualqa {synth,kmeans,train,eval,cascade,buckets}``.

Every subcommand writes into its own run directory (``--out``). Relative
``--out`` paths are placed under ``$DUALQA_RUN_ROOT`` when that variable is
set. Each run directory receives ``config.json`` with the merged effective
configuration, the seed and library versions. Settings come from built-in
defaults, then the JSON file given by ``--config``, then explicit flags.

Model code always runs with a single torch thread. ``--threads`` parallelises
k-means and unit encoding, whose reductions happen in a fixed order, so
reports are bitwise identical whatever its value.
"""
from __future__ import annotations

import argparse
import glob as globlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

import dualqa

RUN_ROOT_ENV = "DUALQA_RUN_ROOT"
log = logging.getLogger("dualqa")


class CliError(Exception):
    """A user-facing failure; reported as a structured message with exit code 1."""


# -- small I/O helpers ------------------------------------------------------


def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _write_jsonl(path: Path, records) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"report {p} does not exist")
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def _versions() -> dict:
    import torch

    return {"dualqa": dualqa.__version__, "numpy": np.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


def _run_dir(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _save_run_config(run: Path, command: str, cfg: dict) -> None:
    rec = {"command": command, "config": cfg, "seed": cfg.get("seed"), "versions": _versions()}
    _atomic_write(run / "config.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} {p} does not exist")
    return p


def _pin_torch():
    import torch

    torch.set_num_threads(1)


# -- subcommands ------------------------------------------------------------


def cmd_synth(cfg: dict, run: Path) -> dict:
    from dualqa.datakit import SynthConfig, gen_synthetic_task

    keys = {f.name for f in fields(SynthConfig)}
    sc = SynthConfig(**{k: v for k, v in cfg.items() if k in keys})
    splits = {"train": sc.n_examples, "dev": cfg["dev_examples"]}
    summary = {}
    for split, n in splits.items():
        if n <= 0:
            continue
        dest = run / split
        if dest.exists():
            raise CliError(f"{dest} already exists; choose a fresh --out")
        tmp = Path(tempfile.mkdtemp(dir=run, prefix=f".{split}."))
        try:
            task = gen_synthetic_task(SynthConfig(**{**asdict(sc), "n_examples": n}), tmp, split=split)
            os.replace(tmp, dest)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        summary[split] = {"manifest": str(dest / task.manifest.name), "n": n}
    return summary


def _feature_paths(cfg: dict) -> list[str]:
    paths: list[str] = []
    if cfg.get("features"):
        paths = sorted(globlib.glob(cfg["features"], recursive=True))
    if cfg.get("manifest"):
        from dualqa.datakit import read_manifest

        for rec in read_manifest(_need_file(cfg["manifest"], "manifest")):
            paths += [rec["question_feat"], rec["passage_feat"]]
    if not paths:
        raise CliError("no feature files: give --features GLOB or --manifest")
    return paths


def cmd_kmeans(cfg: dict, run: Path) -> dict:
    from dualqa.featio import read_features
    from dualqa.quantizer import train_codebook, write_codebook

    feats = [read_features(p) for p in _feature_paths(cfg)]
    cb = train_codebook(feats, cfg["K"], cfg["max_iters"], cfg["rel_tol"], cfg["seed"], cfg["n_init"], cfg["threads"])
    write_codebook(cb, run / "codebook.cdbk")
    hist = [{"iteration": i, "inertia": v} for i, v in enumerate(cb.inertia_history)]
    summary = {"summary": True, "K": cb.K, "dim": cb.dim, "inertia": cb.train_inertia,
               "iterations": len(cb.inertia_history), "n_files": len(feats),
               "n_frames": int(sum(f.n_frames for f in feats))}
    _write_jsonl(run / "kmeans.jsonl", hist + [summary])
    return summary


MODEL_KEYS = ("max_len", "layers", "model_dim", "heads", "ffn_dim", "local_window", "dropout")
TRAIN_KEYS = ("peak_lr", "warmup_steps", "total_steps", "batch_size", "seed", "weight_decay",
              "grad_clip", "eval_every", "max_answer_len")


def _load_examples(manifest, codebook):
    from dualqa.datakit import load_manifest

    return load_manifest(_need_file(manifest, "manifest"), codebook)


def cmd_train(cfg: dict, run: Path) -> dict:
    import torch

    from dualqa.datakit import prepare_all
    from dualqa.model import ModelConfig, build_model, load_model, save_tensors
    from dualqa.quantizer import read_codebook
    from dualqa.trainer import TrainConfig, train

    cb = read_codebook(_need_file(cfg["codebook"], "codebook"))
    mc = ModelConfig(n_units=cb.K, **{k: cfg[k] for k in MODEL_KEYS})
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    train_ex = _load_examples(cfg["manifest"], cb)
    dev_ex = _load_examples(cfg["dev_manifest"], cb) if cfg.get("dev_manifest") else None
    donor = None
    if cfg.get("donor"):
        donor, _ = load_model(_need_file(cfg["donor"], "donor checkpoint"))
    ranking = None
    if cfg.get("freq_ranking"):
        ranking = json.loads(_need_file(cfg["freq_ranking"], "frequency ranking").read_text())
    model = build_model(mc, seed=tc.seed, donor=donor, strategy=cfg["strategy"], freq_ranking=ranking)
    log_path = run / "train_log.jsonl"
    resume = cfg.get("resume")
    if not resume and log_path.exists():
        log_path.unlink()
    res = train(prepare_all(train_ex, mc), model, tc, dev=dev_ex, log_path=log_path,
                checkpoint_path=run / "state.ckpt", resume_from=resume, stop_after=cfg.get("stop_after"))
    tensors = dict(res.model.state_dict())
    tensors["codebook.centroids"] = torch.from_numpy(cb.centroids)
    meta = {"best_step": res.best_step, "best_ff1": res.best_ff1, "steps": res.steps_done,
            "n_train": len(train_ex)}
    save_tensors(run / "model.ckpt", tensors, mc.to_dict(), meta)
    return meta


def _score_plot(values, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(values, bins=np.linspace(0, 1, 21), color="#4a7ab5", edgecolor="white")
    ax.set_xlabel("FF1")
    ax.set_ylabel("examples")
    ax.set_title(title)
    fig.tight_layout()
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp, dpi=100, metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)


def _table(rows: list[dict], cols: list[str]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_eval(cfg: dict, run: Path) -> dict:
    from dualqa.model import SpanModel, ModelConfig, load_tensors
    from dualqa.quantizer import Codebook, read_codebook
    from dualqa.trainer import evaluate_model

    tensors, mconf, _ = load_tensors(_need_file(cfg["checkpoint"], "checkpoint"))
    if cfg.get("codebook"):
        cb = read_codebook(_need_file(cfg["codebook"], "codebook"))
    elif "codebook.centroids" in tensors:
        cb = Codebook(tensors["codebook.centroids"].numpy())
    else:
        raise CliError("checkpoint carries no codebook; pass --codebook")
    model = SpanModel(ModelConfig(**mconf))
    model.load_state_dict({k: tensors[k] for k in model.state_dict()})
    model.eval()
    if cb.K != model.config.n_units:
        raise CliError(f"codebook has {cb.K} units but the model expects {model.config.n_units}")
    examples = _load_examples(cfg["manifest"], cb)
    res = evaluate_model(model, examples, cfg["max_answer_len"])
    records = res.to_records()
    _write_jsonl(run / "eval.jsonl", records)
    if cfg["plot"]:
        _score_plot([r["ff1"] for r in res.per_example], run / "eval_ff1.png", "dev FF1 per example")
    print(_table([records[-1]], ["n", "ff1", "aos", "micro_ff1"]))
    return records[-1]


def cmd_cascade(cfg: dict, run: Path) -> dict:
    from dualqa.cascade_sim import NoiseSpec, TimedTranscript, corrupt, oracle_qa
    from dualqa.datakit import read_manifest
    from dualqa.metrics import aos, ff1, wer
    from dualqa.unitizer import TimeSpan

    recs = read_manifest(_need_file(cfg["manifest"], "manifest"))
    period = cfg["frame_period"]
    vocab = sorted({w["text"] for r in recs for w in r.get("transcript", [])})
    levels = [float(x) for x in cfg["wer_levels"]]
    out = []
    for r in recs:
        if "transcript" not in r or "answer_text" not in r:
            raise CliError(f"example {r['id']} lacks transcript/answer_text needed by the cascade")
        clean = TimedTranscript.from_records(r["transcript"])
        gold = TimeSpan(r["answer"]["start_sec"], r["answer"]["end_sec"])
        for j, level in enumerate(levels):
            seed = int(np.random.default_rng([cfg["seed"], j, len(out)]).integers(2**31))
            noisy = corrupt(clean, NoiseSpec(level, vocab, cfg["p_sub"], cfg["p_del"], cfg["p_ins"], seed))
            if not noisy.words:
                pred, f, a = None, 0.0, 0.0
            else:
                pred = oracle_qa(noisy, r["answer_text"])
                f, a = ff1(pred, gold, period), aos(pred, gold)
            out.append({"id": r["id"], "target_wer": level, "realized_wer": wer(clean.texts, noisy.texts),
                        "ff1": f, "aos": a,
                        "pred": None if pred is None else [pred.start, pred.end]})
    summary = {"summary": True, "n": len(out),
               "ff1": float(np.mean([x["ff1"] for x in out])) if out else 0.0,
               "aos": float(np.mean([x["aos"] for x in out])) if out else 0.0,
               "mean_wer": float(np.mean([x["realized_wer"] for x in out])) if out else 0.0}
    _write_jsonl(run / "cascade.jsonl", out + [summary])
    return summary


def _bucket_plot(buckets, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mids = [100 * (b.lo + b.hi) / 2 for b in buckets]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(mids, [b.ff1_cascade for b in buckets], "o-", label="cascade")
    ax.plot(mids, [b.ff1_dual for b in buckets], "s-", label="DUAL")
    ax.set_xlabel("WER bucket (%)")
    ax.set_ylabel("FF1")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp, dpi=100, metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)


def cmd_buckets(cfg: dict, run: Path) -> dict:
    from dualqa.cascade_sim import bucket_analysis

    dual = {r["id"]: r["ff1"] for r in _read_jsonl(cfg["dual_report"]) if not r.get("summary")}
    rows = []
    edges = [float(e) for e in cfg["edges"]]
    for r in _read_jsonl(cfg["cascade_report"]):
        if r.get("summary"):
            continue
        if r["id"] not in dual:
            raise CliError(f"example {r['id']} is missing from the DUAL report")
        if not edges[0] <= r["realized_wer"] < edges[-1]:
            continue
        rows.append({"id": r["id"], "realized_wer": r["realized_wer"], "ff1_cascade": r["ff1"], "ff1_dual": dual[r["id"]]})
    buckets = bucket_analysis(rows, edges)
    recs = [b.to_record() for b in buckets]
    crossing = next((b.lo for i, b in enumerate(buckets)
                     if all(c.ff1_dual > c.ff1_cascade for c in buckets[i:])), None)
    summary = {"summary": True, "n": len(rows), "buckets": len(buckets), "crossing_wer": crossing}
    _write_jsonl(run / "buckets.jsonl", recs + [summary])
    if cfg["plot"] and buckets:
        _bucket_plot(buckets, run / "buckets.png")
    print(_table(recs, ["lo", "hi", "n", "ff1_cascade", "ff1_dual"]))
    return summary


# -- argument parsing -------------------------------------------------------

DEFAULTS = {
    "synth": {"vocab_words": 50, "units_per_word": 3, "K": 64, "n_examples": 2000, "dev_examples": 200,
              "passage_words": 16, "question_words": 1, "repeat_range": [1, 4], "noise_sigma": 0.1,
              "dim": 16, "zipf_s": 1.0, "frame_period_us": 20000},
    "kmeans": {"features": None, "manifest": None, "K": 64, "max_iters": 100, "rel_tol": 1e-6, "n_init": 1},
    "train": {"manifest": None, "dev_manifest": None, "codebook": None, "max_len": 128, "layers": 3,
              "model_dim": 64, "heads": 4, "ffn_dim": 256, "local_window": 16, "dropout": 0.1,
              "peak_lr": 1e-3, "warmup_steps": 200, "total_steps": 2000, "batch_size": 16,
              "weight_decay": 0.01, "grad_clip": 1.0, "eval_every": 500, "max_answer_len": 64,
              "strategy": "scratch", "donor": None, "freq_ranking": None, "resume": None, "stop_after": None},
    "eval": {"manifest": None, "checkpoint": None, "codebook": None, "max_answer_len": 64, "plot": True},
    "cascade": {"manifest": None, "wer_levels": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                "p_sub": 0.6, "p_del": 0.2, "p_ins": 0.2, "frame_period": 0.02},
    "buckets": {"dual_report": None, "cascade_report": None, "edges": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
                "plot": True},
}
REQUIRED = {
    "train": ("manifest", "codebook"),
    "eval": ("manifest", "checkpoint"),
    "cascade": ("manifest",),
    "buckets": ("dual_report", "cascade_report"),
}
COMMANDS = {"synth": cmd_synth, "kmeans": cmd_kmeans, "train": cmd_train, "eval": cmd_eval,
            "cascade": cmd_cascade, "buckets": cmd_buckets}
HELP = {
    "synth": "generate a synthetic spoken-QA dataset (train and dev splits)",
    "kmeans": "train a k-means unit codebook on feature files",
    "train": "fine-tune the span model on a manifest",
    "eval": "score a checkpoint on a manifest (FF1/AOS report)",
    "cascade": "simulate the ASR + text-QA cascade at several WER levels",
    "buckets": "bucket DUAL and cascade FF1 by realized WER",
}


def _flag_type(value):
    if isinstance(value, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(value, list):
        return None
    if isinstance(value, (int, float)):
        return type(value)
    return str


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualqa", description="Textless span QA over discrete speech units.")
    parser.add_argument("--version", action="version", version=f"dualqa {dualqa.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=HELP[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--out", required=True, help=f"run directory (relative paths go under ${RUN_ROOT_ENV})")
        p.add_argument("--config", help="JSON file of settings; explicit flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads for k-means and encoding")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(value, list):
                p.add_argument(flag, dest=key, nargs="+", type=type(value[0]) if value else str)
            else:
                p.add_argument(flag, dest=key, type=_flag_type(value) or str)
    return parser


def merge_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {"seed": 0, "threads": 1, **DEFAULTS[command]}
    given = {k: v for k, v in vars(args).items() if k not in ("command", "out", "config", "verbose")}
    if getattr(args, "config", None):
        path = _need_file(args.config, "config file")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"{path}: invalid JSON ({e.msg})") from None
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError(f"{path}: unknown settings for {command}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    missing = [k for k in REQUIRED.get(command, ()) if not cfg.get(k)]
    if missing:
        raise CliError(f"{command}: missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if cfg["threads"] < 1:
        raise CliError("--threads must be >= 1")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = merge_config(args.command, args)
        _pin_torch()
        run = _run_dir(args.out)
        _save_run_config(run, args.command, cfg)
        result = COMMANDS[args.command](cfg, run)
        print(json.dumps({"status": "ok", "command": args.command, "out": str(run), "result": result}, sort_keys=True))
        return 0
    except Exception as e:  # every failure becomes a structured message and a nonzero exit
        if getattr(args, "verbose", False):
            log.exception("command failed")
        err = {"status": "error", "command": args.command, "error": type(e).__name__, "message": str(e)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
