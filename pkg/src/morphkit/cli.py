"""Command-line entry point: ``morphkit <command> [options]``.

Every command resolves its settings from defaults, an optional ``--config``
key=value file, explicit flags and ``--set key=value`` overrides (in that
order), rejects unknown keys, and writes ``<command>_config.txt`` with the
resolved settings and their hash into ``out_dir``.

Exit codes: 0 ok, 1 internal error, 2 bad input or config.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
from pathlib import Path

import torch

from . import experiments, metrics
from .denoiser.checkpoint import CheckpointError
from .denoiser.flow import TrainHyper
from .denoiser.model import DenoiserConfig
from .denoiser.prior import Corpus, Prior
from .io import format_shape, kv_hash, kv_text, parse_shape, read_kv, write_ply
from .morphing import MorphConfig, MorphError
from .shapes import build_corpus_specs, read_manifest, write_manifest

log = logging.getLogger("morphkit")


class UsageError(Exception):
    """Bad input or configuration (exit code 2)."""


TRAIN_KEYS = {
    "manifest": "corpus.txt",
    "checkpoint": "prior.mrph",
    "geom_batches": "5000",
    "tex_batches": "2000",
    "batch_size": "16",
    "lr": "0.001",
    "calib_seeds": "32",
    **{f.name: str(f.default) for f in dataclasses.fields(DenoiserConfig)},
}
MORPH_KEYS = {"checkpoint": "prior.mrph", "src": "torus", "tgt": "box", "cache_dir": "cache", **MorphConfig().to_kv()}
EVAL_KEYS = {"checkpoint": "prior.mrph", "pairs": "", "modes": "basic,af,af_tr,full", "cache_dir": "cache", **MorphConfig().to_kv()}
ABLATE_KEYS = {"checkpoint": "prior.mrph", "pair": "0", "pairs": "", "scales": "1,2,5,10", "cache_dir": "cache", **MorphConfig().to_kv()}
ANALYZE_KEYS = {"checkpoint": "prior.mrph", "n_seeds": "4", "scale": "1.2", "lfe_omega0": repr(0.1 * math.pi)}
CORPUS_KEYS = {"manifest": "corpus.txt", "per_family": "256"}
COMMON = {"seed": "0"}

COMMANDS = {
    "corpus": CORPUS_KEYS,
    "train": TRAIN_KEYS,
    "morph": MORPH_KEYS,
    "eval": EVAL_KEYS,
    "ablate": ABLATE_KEYS,
    "analyze": ANALYZE_KEYS,
}


def _parse_angle(text: str) -> str:
    t = text.strip().lower().replace(" ", "")
    if t.endswith("pi"):
        coef = t[:-2].rstrip("*") or "1"
        return repr(float(coef) * math.pi)
    return repr(float(t))


def resolve(command: str, args) -> dict[str, str]:
    allowed = {**COMMON, **COMMANDS[command]}
    cfg = dict(allowed)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for k, v in read_kv(path).items():
            if k not in allowed:
                raise UsageError(f"unknown config key {k!r} in {path}")
            cfg[k] = v
    flags = {k: v for k, v in _flag_values(command, args).items() if v is not None}
    cfg.update(flags)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in allowed:
            raise UsageError(f"unknown config key {k!r}")
        cfg[k] = v
    return cfg


def _flag_values(command: str, args) -> dict:
    out = {"seed": args.seed}
    for name in ("manifest", "checkpoint", "src", "tgt", "cache_dir", "pairs"):
        if hasattr(args, name):
            out[name] = getattr(args, name)
    if command in ("morph", "eval", "ablate"):
        out["af"] = _bool(args.af)
        out["tr"] = _bool(args.tr)
        out["lfe"] = _bool(args.lfe)
        if args.af_geom_end is not None:
            out["af_geom_window"] = f"1-{args.af_geom_end}"
        out["lfe_scale"] = None if args.scale is None else repr(float(args.scale))
        out["lfe_omega0"] = None if args.omega0 is None else _parse_angle(args.omega0)
        out["n_frames"] = None if args.frames is None else str(args.frames)
    return out


def _bool(v):
    return None if v is None else ("true" if v else "false")


def morph_config(cfg: dict) -> MorphConfig:
    keys = set(MorphConfig().to_kv())
    try:
        return MorphConfig.from_kv({k: v for k, v in cfg.items() if k in keys})
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad morph config: {exc}") from None


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path(out: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else out / p


def write_resolved(out: Path, command: str, cfg: dict) -> None:
    (out / f"{command}_config.txt").write_text(kv_text(cfg) + f"# hash={kv_hash(cfg)}\n")


def load_prior(out: Path, cfg: dict) -> Prior:
    path = _path(out, cfg["checkpoint"])
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return Prior.load(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_corpus(args, cfg, out):
    specs = build_corpus_specs(int(cfg["per_family"]), seed=int(cfg["seed"]))
    write_manifest(_path(out, cfg["manifest"]), specs)
    print(f"wrote {len(specs)} records to {_path(out, cfg['manifest'])}")


def cmd_train(args, cfg, out):
    manifest = _path(out, cfg["manifest"])
    if not manifest.exists():
        raise UsageError(f"corpus manifest not found: {manifest}")
    try:
        specs = read_manifest(manifest)
        dcfg = DenoiserConfig(**{f.name: int(cfg[f.name]) for f in dataclasses.fields(DenoiserConfig)})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = int(cfg["seed"])
    corpus = Corpus.from_specs(specs, dcfg.M)
    prior = Prior(dcfg, seed=seed)
    common = dict(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]))
    g = prior.fit_geometry(corpus, TrainHyper(batches=int(cfg["geom_batches"]), seed=seed, **common))
    t = prior.fit_texture(corpus, TrainHyper(batches=int(cfg["tex_batches"]), seed=seed + 1, **common))
    prior.save(_path(out, cfg["checkpoint"]))
    for name, res in (("geom", g), ("tex", t)):
        lines = ["step,loss"] + [f"{i + 1},{v:.9g}" for i, v in enumerate(res.losses)]
        (out / f"loss_{name}.csv").write_text("\n".join(lines) + "\n")
    n = int(cfg["calib_seeds"])
    if n > 0:
        cal = experiments.calibrate(prior, corpus, n)
        (out / "calibration.txt").write_text(cal.to_text())
        print(f"tau_rec={cal.tau_rec:.6f}")
    print(f"wrote {_path(out, cfg['checkpoint'])}")


def cmd_morph(args, cfg, out):
    prior = load_prior(out, cfg)
    mcfg = morph_config(cfg)
    try:
        src, tgt = parse_shape(cfg["src"]).build(prior.cfg.M), parse_shape(cfg["tgt"]).build(prior.cfg.M)
        mcfg.validate(prior.cfg.steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seq, rep = experiments.run_pair(prior, src, tgt, mcfg, int(cfg["seed"]), _path(out, cfg["cache_dir"]))
    for i, f in enumerate(seq.frames):
        write_ply(out / f"frame_{i:02d}_{f.alpha:.4f}.ply", f.points, f.colors)
    rep.extra["src"] = cfg["src"]
    rep.extra["tgt"] = cfg["tgt"]
    (out / "report.txt").write_text(rep.to_text())
    print(f"{len(seq.frames)} frames, ppl={rep.ppl:.6f} pdv={rep.pdv:.6g}")


def cmd_eval(args, cfg, out):
    prior = load_prior(out, cfg)
    base = morph_config(cfg)
    pairs = experiments.load_benchmark(prior, cfg["pairs"] or None)
    modes = [m for m in cfg["modes"].split(",") if m]
    for m in modes:
        if m not in experiments.MODES:
            raise UsageError(f"unknown mode {m!r}")
    rows = experiments.run_suite(prior, pairs, base, modes, int(cfg["seed"]), _path(out, cfg["cache_dir"]))
    (out / "eval_table.csv").write_text(experiments.rows_csv(rows, experiments.SUITE_COLUMNS))
    summary = experiments.suite_summary(rows)
    (out / "eval_summary.txt").write_text(metrics.REPORT_HEADER + "\n" + kv_text({k: _fmtv(v) for k, v in summary.items()}))
    for k, v in summary.items():
        print(f"{k}={_fmtv(v)}")


def cmd_ablate(args, cfg, out):
    prior = load_prior(out, cfg)
    base = morph_config(cfg)
    pairs = experiments.load_benchmark(prior, cfg["pairs"] or None)
    src, tgt = pairs[int(cfg["pair"])]
    scales = [float(s) for s in cfg["scales"].split(",") if s]
    scale_rows, mech_rows = experiments.run_ablation(prior, src, tgt, base, scales, int(cfg["seed"]), _path(out, cfg["cache_dir"]))
    (out / "ablate_scale.csv").write_text(experiments.rows_csv(scale_rows, experiments.ABLATE_COLUMNS))
    (out / "ablate_mechanisms.csv").write_text(experiments.rows_csv(mech_rows, experiments.SUITE_COLUMNS))
    for r in scale_rows:
        print(f"{r['setting']}: ppl={r['ppl']:.6f} pdv={r['pdv']:.6g}")


def cmd_analyze(args, cfg, out):
    prior = load_prior(out, cfg)
    files, summary = experiments.run_analysis(
        prior, int(cfg["n_seeds"]), float(cfg["scale"]), float(cfg["lfe_omega0"]), int(cfg["seed"])
    )
    for name, text in files.items():
        (out / name).write_text(text)
    (out / "analysis_summary.txt").write_text(kv_text({k: _fmtv(v) for k, v in summary.items()}))
    for k, v in summary.items():
        print(f"{k}={_fmtv(v)}")


def _fmtv(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


HANDLERS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "morph": cmd_morph,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphkit", description="Regenerative 3D point-cloud morphing with a toy flow-matching prior.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "corpus": "write a procedural corpus manifest",
        "train": "train the geometry and texture models, then calibrate tau_rec",
        "morph": "morph one source/target pair and write PLY frames + report",
        "eval": "run the fixed benchmark pairs under each mechanism setting",
        "ablate": "sweep the low-frequency enhancement scale on one pair",
        "analyze": "write token-distance and frequency-band traces",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--out-dir", default=".", help="directory for all outputs; relative paths resolve against it")
        sp.add_argument("--config", help="key=value file with settings")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        sp.add_argument("--seed", type=int)
        if name in ("corpus", "train"):
            sp.add_argument("--manifest", help="corpus manifest path")
        if name in ("train", "morph", "eval", "ablate", "analyze"):
            sp.add_argument("--checkpoint", help="model checkpoint path (MRPH)")
        if name == "morph":
            sp.add_argument("--src", help="source shape family[:params[:seed]], e.g. torus:0.6,0.2:0")
            sp.add_argument("--tgt", help="target shape, same format")
        if name in ("morph", "eval", "ablate"):
            sp.add_argument("--cache-dir", dest="cache_dir", help="where finetuned endpoints are cached")
            sp.add_argument("--af", dest="af", action="store_true", default=None, help="enable attention fusion (default)")
            sp.add_argument("--no-af", dest="af", action="store_false")
            sp.add_argument("--tr", dest="tr", action="store_true", default=None, help="enable token reordering (default)")
            sp.add_argument("--no-tr", dest="tr", action="store_false")
            sp.add_argument("--lfe", dest="lfe", action="store_true", default=None, help="enable low-frequency enhancement (default)")
            sp.add_argument("--no-lfe", dest="lfe", action="store_false")
            sp.add_argument("--af-geom-end", type=int, help="last geometry step with attention fusion (default 150)")
            sp.add_argument("--scale", type=float, help="low-frequency enhancement scale (default 5)")
            sp.add_argument("--omega0", help="low-band cutoff in radians/sample, e.g. 0.1pi (default)")
            sp.add_argument("--frames", type=int, help="number of Beta-sampled interpolation weights (default 10)")
        if name in ("eval", "ablate"):
            sp.add_argument("--pairs", help="benchmark pair list (default: the shipped suite)")
    return p


def configure_threads() -> None:
    n = os.environ.get("MORPHKIT_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    configure_threads()
    try:
        cfg = resolve(args.command, args)
        out = _out(args)
        write_resolved(out, args.command, cfg)
        start = time.time()
        HANDLERS[args.command](args, cfg, out)
        log.info("%s finished in %.1fs", args.command, time.time() - start)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MorphError as exc:
        print(f"morph failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error in {args.command}: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
