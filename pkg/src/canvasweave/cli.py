"""Command-line entry point.

Every subcommand writes ``run.json`` next to its outputs with the parsed
arguments, the resolved configs and the list of key output files, so
``canvasweave reproduce DIR`` can rerun it and diff the results.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical abort, 5 matrix with failed pairs, 6 reproduce mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .canvas import write_png
from .dataset import ManifestEntry, SplitManifest, derive_seed
from .errors import CanvasWeaveError, CheckpointError, ConfigError, DataError, NumericalError
from .model import EncoderSpec, load_checkpoint, save_checkpoint
from .preprocess import PreprocessConfig
from .presets import DEFAULT_SPLITS, PRESETS, FabricClass, render_classes
from .similarity import SimilarityConfig, SimilarityMatrix, similarity_matrix, symmetric_indicator
from .store import content_hash, load_entries, prepared, select
from .training import TrainConfig, train

log = logging.getLogger("canvasweave")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_PARTIAL, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6
DATA_ROOT_ENV = "CANVASWEAVE_DATA_ROOT"


# --- helpers -----------------------------------------------------------------


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.data_root) / p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _run_record(args, out: Path, configs: dict, key_outputs: Sequence[str], **extra) -> None:
    record = {
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "data_root": str(Path(args.data_root).resolve()),
        "argv": args.argv,
        "configs": configs,
        "key_outputs": sorted(key_outputs),
    }
    record.update(extra)
    _write_json(out / "run.json", record)


def _preprocess_cfg(args, fallback: Optional[dict] = None) -> PreprocessConfig:
    base = dict(fallback or {})
    for f in fields(PreprocessConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    cfg = PreprocessConfig(**base)
    cfg.validate()
    return cfg


def _similarity_cfg(args) -> SimilarityConfig:
    cfg = SimilarityConfig(N=args.N, K=args.K, t=args.t, u=args.u, seed=args.seed, variant=args.variant)
    cfg.validate()
    return cfg


def _checkpoint_file(path: Path) -> Path:
    if path.is_dir():
        for cand in (path / "best" / "model.pt", path / "model.pt"):
            if cand.exists():
                return cand
        raise CheckpointError(f"{path}: no checkpoint found (expected best/model.pt or model.pt)")
    return path


def _load_model(args):
    path = _checkpoint_file(_path(args, args.checkpoint))
    model = load_checkpoint(path)
    return model, path


def _manifest(args) -> SplitManifest:
    path = _path(args, args.manifest)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return SplitManifest.read(path)


def _cache_dir(args) -> Path:
    return _path(args, args.cache_dir) if args.cache_dir else Path(args.data_root) / ".canvasweave-cache"


def _deterministic_mode() -> str:
    torch.use_deterministic_algorithms(True)
    return f"torch deterministic algorithms, cpu threads={torch.get_num_threads()}"


# --- synth -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _path(args, args.out)
    if args.classes:
        raw = json.loads(_path(args, args.classes).read_text())
        classes = [FabricClass.from_dict(d) for d in raw]
    else:
        classes = list(PRESETS[args.preset])
    for fc in classes:
        fc.spec.validate()
    splits = args.splits or DEFAULT_SPLITS
    rendered = render_classes(classes, args.seed, splits, tuple(args.size_cm))

    entries, outputs = [], []
    for rc in rendered:
        rel = f"images/{rc.image.canvas_id}.png"
        write_png(out / rel, rc.image.pixels)
        extra = {k: repr(v) if isinstance(v, float) else str(v) for k, v in rc.spec.to_dict().items()}
        extra["class_name"] = rc.class_name
        entries.append(ManifestEntry(rel, rc.image.canvas_id, rc.image.class_label, rc.split, rc.image.resolution, extra))
        outputs.append(rel)
    SplitManifest(entries, out).write(out / "manifest.csv")
    outputs.append("manifest.csv")
    _write_json(out / "classes.json", [fc.to_dict() for fc in classes])
    _run_record(args, out, {"classes": [fc.to_dict() for fc in classes], "splits": list(splits), "size_cm": list(args.size_cm)}, outputs)
    log.info("wrote %d canvases to %s", len(entries), out)
    print(out / "manifest.csv")
    return EXIT_OK


# --- preprocess ----------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    manifest = _manifest(args)
    cfg = _preprocess_cfg(args)
    out = _path(args, args.out)
    digest = cfg.digest()
    entries, outputs = [], []
    for e in manifest.entries:
        src = manifest.resolve(e)
        if not src.exists():
            raise DataError(f"canvas {e.canvas_id!r}: file not found: {src}")
        # Content plus config hash: identical inputs are processed once.
        img = prepared(manifest, e, cfg, out / "images")
        rel = f"images/{content_hash(src)}_{digest}.png"
        if not (out / rel).exists():
            write_png(out / rel, img.pixels, bits=16)
        extra = dict(e.extra, preprocess_hash=digest, source=str(src))
        entries.append(ManifestEntry(rel, e.canvas_id, e.class_label, e.split, cfg.target_resolution, extra))
        outputs.append(rel)
    SplitManifest(entries, out).write(out / "manifest.csv")
    _run_record(args, out, {"preprocess": asdict(cfg), "preprocess_hash": digest}, outputs + ["manifest.csv"])
    print(out / "manifest.csv")
    return EXIT_OK


# --- train --------------------------------------------------------------------------


def _train_cfg(args, seed: int) -> TrainConfig:
    cfg = TrainConfig(
        margin=args.margin,
        batch_size=args.batch_size,
        lr0=args.lr0,
        lr_decay_factor=args.lr_decay_factor,
        lr_decay_every=args.lr_decay_every,
        early_stop_patience=args.patience,
        momentum=args.momentum,
        p_same=args.p_same,
        M=args.M,
        seed=seed,
        batches_per_epoch=args.batches_per_epoch,
        max_epochs=args.max_epochs,
        val_pairs=args.val_pairs,
        augment=not args.no_augment,
        frozen=args.frozen,
    )
    cfg.validate()
    return cfg


def _encoder_spec(args) -> EncoderSpec:
    spec = EncoderSpec(
        stage_filters=args.stage_filters,
        conv_filters=args.conv_filters,
        fc_widths=args.fc_widths,
        embedding_dim=args.embedding_dim,
    )
    if len(spec.stage_filters) == 0 or spec.final_side() < 1:
        raise ConfigError(f"encoder with stages {spec.stage_filters} leaves no spatial extent")
    return spec


def cmd_train(args) -> int:
    if args.restarts < 1:
        raise ConfigError("--restarts must be >= 1")
    manifest = _manifest(args)
    pcfg = _preprocess_cfg(args)
    spec = _encoder_spec(args)
    mode = _deterministic_mode()
    cache = _cache_dir(args)
    tr = load_entries(manifest, manifest.split("train"), pcfg, cache)
    va = load_entries(manifest, manifest.split("validation"), pcfg, cache)
    if not tr or not va:
        raise DataError("manifest needs both train and validation canvases")

    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, outputs = [], []
    for k in range(args.restarts):
        seed_k = derive_seed(args.seed, "restart", k) % 2**31
        cfg = _train_cfg(args, seed_k)
        log.info("restart %d/%d (seed %d)", k + 1, args.restarts, seed_k)
        model, report = train(tr, va, spec, cfg)
        model.metadata["preprocess_config"] = asdict(pcfg)
        rdir = out / f"restart_{k:02d}"
        save_checkpoint(model, rdir / "model.pt", model.metadata)
        report.write_csv(rdir / "report.csv")
        _write_json(rdir / "summary.json", dict(report.summary(), restart=k))
        results.append((report.best_val_loss, k))
        outputs.append(f"restart_{k:02d}/report.csv")

    best_loss, best_k = min(results)
    link = out / "best"
    if link.is_symlink() or link.exists():
        link.unlink()
    link.symlink_to(f"restart_{best_k:02d}", target_is_directory=True)
    _write_json(out / "best.json", {"restart": best_k, "path": f"restart_{best_k:02d}", "best_val_loss": best_loss})
    _run_record(
        args,
        out,
        {"train": asdict(_train_cfg(args, 0)) | {"seed": "per restart"}, "encoder": spec.to_dict(), "preprocess": asdict(pcfg)},
        outputs + ["best.json"],
        restart_seeds=[derive_seed(args.seed, "restart", k) % 2**31 for k in range(args.restarts)],
        determinism=mode,
    )
    print(json.dumps({"best_restart": best_k, "best_val_loss": best_loss}))
    return EXIT_OK


# --- compare / matrix ----------------------------------------------------------------


def _eval_canvases(args, model, ids=None, split=None):
    manifest = _manifest(args)
    pcfg = _preprocess_cfg(args, model.metadata.get("preprocess_config"))
    entries = select(manifest, split, ids)
    return load_entries(manifest, entries, pcfg, _cache_dir(args)), pcfg


def cmd_compare(args) -> int:
    cfg = _similarity_cfg(args)
    model, ckpt = _load_model(args)
    (a, b), _ = _eval_canvases(args, model, ids=[args.canvas_a, args.canvas_b])
    sc = symmetric_indicator(model, a, b, cfg)
    record = {
        "canvas_a": sc.canvas_a,
        "canvas_b": sc.canvas_b,
        "j_ab": sc.j_ab,
        "j_ba": sc.j_ba,
        "s": sc.s,
        "s_raw": sc.s_raw,
        "u": cfg.u,
        "verdict": "match" if sc.is_match(cfg.u) else "no match",
    }
    if args.out:
        out = _path(args, args.out)
        _write_json(out / "compare.json", record)
        _run_record(args, out, {"similarity": cfg.to_dict(), "checkpoint": str(ckpt)}, ["compare.json"])
    print(json.dumps(record))
    return EXIT_OK


def render_grid(values: np.ndarray, u: float, cell_px: int) -> np.ndarray:
    """Grayscale grid, darker = more similar; clipped cells are white.

    Missing entries are drawn as a pixel checkerboard so they cannot be
    mistaken for any score.
    """
    n = values.shape[0]
    gray = np.where(np.isnan(values), 0.0, np.clip(values / u, 0.0, 1.0))
    img = np.kron(gray, np.ones((cell_px, cell_px)))
    missing = np.kron(np.isnan(values), np.ones((cell_px, cell_px), dtype=bool))
    yy, xx = np.indices((n * cell_px, n * cell_px))
    img[missing] = ((yy + xx) % 2)[missing]
    return img


def write_matrix_csv(path: Path, sm) -> None:
    n = len(sm.canvas_ids)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["canvas_i", "canvas_j", "j_ab", "j_ba", "s", "status"])
        for i in range(n):
            for j in range(i, n):
                sc = sm.scores.get((i, j))
                if sc is None:
                    wr.writerow([sm.canvas_ids[i], sm.canvas_ids[j], "", "", "", "failed"])
                else:
                    wr.writerow([sc.canvas_a, sc.canvas_b, repr(sc.j_ab), repr(sc.j_ba), repr(sc.s), "ok"])


def _matrix_with_unloadable(model, loaded, bad: dict, order: list[str], cfg) -> SimilarityMatrix:
    """Score the loadable canvases; canvases that failed to load become NaN rows."""
    if len(loaded) >= 2:
        inner = similarity_matrix(model, loaded, cfg)
    else:
        inner = SimilarityMatrix([c.canvas_id for c in loaded], np.full((len(loaded),) * 2, np.nan), cfg.u)
    pos = {cid: k for k, cid in enumerate(order)}
    n = len(order)
    values = np.full((n, n), np.nan)
    scores, failures = {}, {}
    remap = [pos[cid] for cid in inner.canvas_ids]
    for (i, j), sc in inner.scores.items():
        a, b = sorted((remap[i], remap[j]))
        scores[(a, b)] = sc
        values[a, b] = values[b, a] = sc.s
    for (i, j), msg in inner.failures.items():
        failures[tuple(sorted((remap[i], remap[j])))] = msg
    for cid, msg in bad.items():
        k = pos[cid]
        for other in range(n):
            failures[tuple(sorted((k, other)))] = f"canvas {cid!r} could not be loaded: {msg}"
    return SimilarityMatrix(list(order), values, cfg.u, scores, failures)


def cmd_matrix(args) -> int:
    cfg = _similarity_cfg(args)
    if args.cell_px < 1:
        raise ConfigError("--cell-px must be >= 1")
    mode = _deterministic_mode()
    model, ckpt = _load_model(args)
    manifest = _manifest(args)
    pcfg = _preprocess_cfg(args, model.metadata.get("preprocess_config"))
    entries = select(manifest, args.split, args.ids)
    if len(entries) < 2:
        raise ConfigError(f"a similarity matrix needs at least two canvases, got {len(entries)}")
    loaded, bad = [], {}
    for e in entries:
        try:
            loaded.append(prepared(manifest, e, pcfg, _cache_dir(args)))
        except (DataError, ConfigError) as exc:
            # Per-canvas problems (unreadable file, too small for the
            # normalization window) fail that canvas's pairs only.
            log.error("canvas %s skipped: %s", e.canvas_id, exc)
            bad[e.canvas_id] = str(exc)
    t0 = time.perf_counter()
    sm = _matrix_with_unloadable(model, loaded, bad, [e.canvas_id for e in entries], cfg)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "matrix.csv", sm)
    write_png(out / "matrix.png", render_grid(sm.values, sm.u, args.cell_px))
    _run_record(
        args,
        out,
        {"similarity": cfg.to_dict(), "preprocess": asdict(pcfg), "checkpoint": str(ckpt)},
        ["matrix.csv", "matrix.png"],
        canvas_ids=sm.canvas_ids,
        failures={f"{sm.canvas_ids[i]},{sm.canvas_ids[j]}": msg for (i, j), msg in sorted(sm.failures.items())},
        determinism=mode,
        wall_clock_s=time.perf_counter() - t0,
    )
    n = len(entries)
    log.info("matrix %dx%d: %d pairs, %d failed (%s)", n, n, n * (n + 1) // 2, len(sm.failures), mode)
    print(out / "matrix.csv")
    return EXIT_PARTIAL if sm.failures else EXIT_OK


# --- reproduce ------------------------------------------------------------------------


def _replace_out(argv: list[str], new_out: str) -> list[str]:
    argv = list(argv)
    for i, tok in enumerate(argv):
        if tok == "--out":
            argv[i + 1] = new_out
            return argv
        if tok.startswith("--out="):
            argv[i] = f"--out={new_out}"
            return argv
    raise ConfigError("run record has no --out argument to redirect")


def cmd_reproduce(args) -> int:
    run_dir = _path(args, args.run_dir)
    rec_path = run_dir / "run.json"
    if not rec_path.exists():
        raise DataError(f"{rec_path} not found")
    rec = json.loads(rec_path.read_text())
    with tempfile.TemporaryDirectory(prefix="canvasweave-repro-") as tmp:
        argv = ["--seed", str(rec["seed"]), "--data-root", rec["data_root"]] + _replace_out(rec["argv"], tmp)
        code = main(argv)
        if code not in (EXIT_OK, EXIT_PARTIAL):
            log.error("rerun exited with code %d", code)
            return code
        diffs = []
        for rel in rec["key_outputs"]:
            a, b = run_dir / rel, Path(tmp) / rel
            same = a.exists() and b.exists() and a.read_bytes() == b.read_bytes()
            print(f"{'same' if same else 'DIFF'} {rel}")
            if not same:
                diffs.append(rel)
    return EXIT_MISMATCH if diffs else EXIT_OK


# --- parser -----------------------------------------------------------------------------


def _add_preprocess_flags(p):
    g = p.add_argument_group("preprocessing")
    g.add_argument("--target-resolution", type=float, default=None, help="px/cm after resampling (default 200)")
    g.add_argument("--norm-window-cm", type=float, default=None, help="local normalization window (default 0.5)")
    g.add_argument("--equalize-bins", type=int, default=None, help="histogram equalization bins (default 256)")
    g.add_argument("--cache-dir", default=None, help="preprocessing cache (default <data-root>/.canvasweave-cache)")


def _add_similarity_flags(p):
    d = SimilarityConfig()
    g = p.add_argument_group("similarity")
    g.add_argument("--N", type=int, default=d.N, help="crop pairs per outcome vector")
    g.add_argument("--K", type=int, default=d.K, help="histogram bins")
    g.add_argument("--t", type=float, default=d.t, help="histogram support (0, t]")
    g.add_argument("--u", type=float, default=d.u, help="clip ceiling and match threshold")
    g.add_argument("--variant", choices=("jsd", "literal"), default=d.variant)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canvasweave", description="Canvas fabric similarity with a Siamese encoder.")
    p.add_argument("--seed", type=int, default=0, help="global seed; every random stream derives from it")
    p.add_argument("--data-root", default=os.environ.get(DATA_ROOT_ENV, "."), help=f"base for relative paths (env {DATA_ROOT_ENV})")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render synthetic canvases and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    s.add_argument("--classes", help="JSON list of {name, spec} objects; overrides --preset")
    s.add_argument("--splits", type=_names, default=None, help=f"split per canvas within a class (default {','.join(DEFAULT_SPLITS)})")
    s.add_argument("--size-cm", type=float, nargs=2, default=(4.0, 4.0), metavar=("H", "W"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resample, normalize and equalize every manifest entry")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    _add_preprocess_flags(s)
    s.set_defaults(func=cmd_preprocess)

    d, e = TrainConfig(), EncoderSpec()
    s = sub.add_parser("train", help="train R restarts and point 'best' at the lowest validation loss")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--restarts", type=int, default=10)
    s.add_argument("--lr0", type=float, default=d.lr0)
    s.add_argument("--lr-decay-factor", type=float, default=d.lr_decay_factor)
    s.add_argument("--lr-decay-every", type=int, default=d.lr_decay_every)
    s.add_argument("--patience", type=int, default=d.early_stop_patience)
    s.add_argument("--momentum", type=float, default=d.momentum)
    s.add_argument("--margin", type=float, default=d.margin)
    s.add_argument("--p-same", type=float, default=d.p_same)
    s.add_argument("--M", type=int, default=d.M, help="samples per training canvas")
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--batches-per-epoch", type=int, default=d.batches_per_epoch)
    s.add_argument("--max-epochs", type=int, default=d.max_epochs)
    s.add_argument("--val-pairs", type=int, default=d.val_pairs)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--frozen", action="store_true", help="dry run: forward passes only")
    s.add_argument("--stage-filters", type=_ints, default=e.stage_filters)
    s.add_argument("--conv-filters", type=int, default=e.conv_filters)
    s.add_argument("--fc-widths", type=_ints, default=e.fc_widths)
    s.add_argument("--embedding-dim", type=int, default=e.embedding_dim)
    _add_preprocess_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compare", help="score one pair of canvases")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True, help="model.pt or a train output directory")
    s.add_argument("--out", default=None)
    s.add_argument("canvas_a")
    s.add_argument("canvas_b")
    _add_similarity_flags(s)
    _add_preprocess_flags(s)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("matrix", help="similarity matrix over a manifest subset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", help="manifest split to compare (ignored with --ids)")
    s.add_argument("--ids", type=_names, default=None, help="comma-separated canvas ids")
    s.add_argument("--cell-px", type=int, default=16)
    _add_similarity_flags(s)
    _add_preprocess_flags(s)
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("reproduce", help="rerun a recorded command and diff its key outputs")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    # Subcommand arguments only; the global flags are re-added on replay.
    args.argv = argv[argv.index(args.command) :]
    level = logging.WARNING - 10 * min(args.verbose, 1)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except CanvasWeaveError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
