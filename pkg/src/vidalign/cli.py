"""Command-line entry point: ``vidalign <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import analysis, genmetrics
from .featureio import (
    DatasetConfig,
    FeatureMap,
    TensorFileError,
    encoder_from_dict,
    encode,
    load_clip_dir,
    make_synthetic_dataset,
    read_array,
    read_manifest,
    write_dataset,
    write_manifest,
    write_tensor,
)
from .training import DivergenceError, TrainConfig, train

log = logging.getLogger("vidalign")


class ConfigError(Exception):
    """Bad flags, unreadable or invalid config -> exit 2."""


# ---------------------------------------------------------------- helpers

def _version() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{base}+{desc}" if desc else base


def load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc


def build(cls, d: dict, what: str):
    """Instantiate a dataclass from a dict, turning field/validation errors into ConfigError."""
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{what}: unknown fields {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def write_run_manifest(out_dir: Path, args, started: float, seed=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": " ".join(a for a in (args.command, getattr(args, "sub", None)) if a),
        "config": str(args.config) if getattr(args, "config", None) else None,
        "seed": seed,
        "out": str(out_dir),
        "version": _version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def load_feature_inputs(path) -> list[tuple[str, FeatureMap]]:
    """A single ``[T,h,w,c]`` TensorFile, or a directory with a manifest of them."""
    p = Path(path)
    if p.is_file():
        return [(p.stem, FeatureMap(read_array(p)))]
    if (p / "manifest.json").is_file():
        return [(Path(e["path"]).stem, FeatureMap(read_array(e["path"]))) for e in read_manifest(p / "manifest.json")]
    raise ConfigError(f"no feature TensorFile or manifest at {p}")


def parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------- commands

def cmd_dataset(args) -> int:
    cfg = build(DatasetConfig, load_json(args.config), "dataset config")
    try:
        clips, labels = make_synthetic_dataset(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(args.out, clips, labels)
    (Path(args.out) / "dataset_config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    return cfg.seed


def cmd_train(args) -> int:
    raw = load_json(args.config)
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from exc
    if not Path(args.data).is_dir():
        raise ConfigError(f"dataset directory not found: {args.data}")
    clips, labels = load_clip_dir(args.data)
    train(cfg, clips, labels, out_dir=args.out)
    return cfg.seed


def cmd_sample(args) -> int:
    from .sampling import SamplerConfig, generate_batch

    raw = dict(load_json(args.config))
    n = raw.pop("n", 16)
    classes = raw.pop("classes", None)
    sampler = build(SamplerConfig, raw, "sampler config")
    if not (Path(args.ckpt) / "header.json").is_file() and not Path(args.ckpt).name == "header.json":
        raise ConfigError(f"no checkpoint at {args.ckpt}")
    generate_batch(args.ckpt, sampler, int(n), args.out, classes)
    return sampler.seed


def cmd_encode(args) -> int:
    raw = load_json(args.config)
    specs = raw.get("encoders", [raw]) if raw else [{"kind": "lowpass"}]
    try:
        encoders = [encoder_from_dict(s) for s in specs]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"encoder config: {exc}") from exc
    clips, labels = load_clip_dir(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for enc in encoders:
        sub = out / enc.kind if len(encoders) > 1 else out
        sub.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (clip, lab) in enumerate(zip(clips, labels)):
            name = f"feat_{i:05d}.a4gt"
            write_tensor(sub / name, encode(enc, clip).values)
            entries.append({"path": name, "class_id": lab})
        write_manifest(sub / "manifest.json", entries)
    return encoders[0].seed


def cmd_analyze(args) -> int:
    inputs = load_feature_inputs(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sub == "iicr":
        ks = parse_ints(args.k)
        if not ks:
            raise ConfigError("--k needs at least one value")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        table = {(name, k): analysis.iicr(fm, k, args.seed) for name, fm in inputs for k in ks}
        if args.aggregate == "mean":
            # per-video ratios averaged over the inputs, one row per k
            w.writerow(["k", "iicr"])
            for k in ks:
                w.writerow([k, repr(float(np.mean([table[name, k] for name, _ in inputs])))])
        else:
            w.writerow(["input", "k", "iicr"])
            for name, _ in inputs:
                for k in ks:
                    w.writerow([name, k, repr(table[name, k])])
        (out / "iicr.csv").write_text(buf.getvalue())
    elif args.sub == "freq":
        report = {}
        for name, fm in inputs:
            rep = analysis.frequency_gap(fm)
            write_tensor(out / f"spectrum_{name}.a4gt", rep.spectrum_log)
            report[name] = {"delta_freq": rep.delta_freq, "dc_log": rep.dc_log, "hf_mean": rep.hf_mean,
                            "ring_size": rep.ring_size}
        (out / "freq.json").write_text(json.dumps(report, indent=2) + "\n")
    else:
        summary = {}
        for name, fm in inputs:
            res = analysis.pca_project(fm)
            target = out if len(inputs) == 1 else out / name
            analysis.export_pca(res, target)
            summary[name] = {"explained_variance_ratio": res.explained_variance_ratio.tolist()}
        (out / "pca.json").write_text(json.dumps(summary, indent=2) + "\n")
    return args.seed


def _load_vectors(d) -> list[np.ndarray]:
    p = Path(d)
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"no manifest.json in {p}")
    return [read_array(e["path"]) for e in read_manifest(p / "manifest.json")]


def cmd_eval(args) -> int:
    out = Path(args.out)
    if args.sub == "fvd":
        if not args.real:
            raise ConfigError("eval fvd needs --real")
        cfg = build(genmetrics.EvalConfig, load_json(args.config), "eval config")
        report = genmetrics.eval_protocol(args.real, args.fake, cfg)
        seed = cfg.seed
    elif args.sub == "is":
        probs = np.concatenate([np.atleast_2d(v) for v in _load_vectors(args.fake)])
        report = {"inception_score": genmetrics.inception_score(probs), "n": len(probs)}
        seed = None
    else:
        scores = [genmetrics.framewise_clip_similarity(v) for v in _load_vectors(args.fake)]
        if not scores:
            raise genmetrics.MetricError("no videos to score")
        report = {"clipsim": float(np.mean(scores)), "per_video": scores, "n": len(scores)}
        seed = None
    report.setdefault("seed", seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    return seed


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .experiments import ablation_depths, default_ablation_base, run_ablation

    raw = load_json(args.config)
    try:
        base = TrainConfig.from_dict(raw) if raw else default_ablation_base()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from exc
    depths = parse_ints(args.depths) if args.depths else ablation_depths(base.model.depth)
    if any(not 0 <= d < base.model.depth for d in depths):
        raise ConfigError(f"depths {depths} outside [0, {base.model.depth})")
    train_clips, _ = load_clip_dir(args.data)
    heldout = load_clip_dir(args.heldout)[0] if args.heldout else train_clips
    base = replace(base, align_depth=depths[0])
    run_ablation(base, depths, train_clips, heldout, out_dir=args.out)
    return base.seed


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "sample": cmd_sample, "encode": cmd_encode,
            "analyze": cmd_analyze, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vidalign", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sp = ap.add_subparsers(dest="command", required=True)

    p = sp.add_parser("dataset", help="generate a synthetic clip dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sp.add_parser("train", help="train a V-DiT with optional feature alignment")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--out", required=True)

    p = sp.add_parser("sample", help="generate clips from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sp.add_parser("encode", help="run oracle encoders over a clip directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config", help="encoder JSON, or {\"encoders\": [...]}")
    p.add_argument("--out", required=True)

    p = sp.add_parser("analyze", help="feature analysis: iicr, freq, pca")
    p.add_argument("sub", choices=["iicr", "freq", "pca"])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", default="2,4,8,16", help="comma-separated cluster counts (iicr)")
    p.add_argument("--aggregate", choices=["mean", "none"], default="mean",
                   help="iicr: average per-video ratios, or one row per video and k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sp.add_parser("eval", help="generation metrics: fvd, is, clipsim")
    p.add_argument("sub", choices=["fvd", "is", "clipsim"])
    p.add_argument("--real")
    p.add_argument("--fake", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sp.add_parser("ablate", help="depth x placement x objective grid")
    p.add_argument("--config", help="base train config (defaults to a 4-block toy model)")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout")
    p.add_argument("--depths", help="comma-separated block indices (default N//3,N//2)")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        seed = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"vidalign: config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"vidalign: training diverged: {exc}", file=sys.stderr)
        return 1
    except (genmetrics.MetricError, TensorFileError, ValueError, RuntimeError, OSError) as exc:
        print(f"vidalign: error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    write_run_manifest(out.parent if args.command == "eval" else out, args, started, seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
