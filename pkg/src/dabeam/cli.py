"""``dabeam`` command line: simulate, build-dataset, train, beamform, evaluate.

Each subcommand is a separate process that reads its inputs from the data and
output roots and validates them against the stored manifests.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training fault.

Layout under the data root::

    run_config.json
    frames/<frame_id>.bin
    manifests/{train,validation,test}.json
    rois.json
    datasets/{source_train,target_train}.{f32,json,index.bin}

and under the output root::

    checkpoints/{da,baseline}.ckpt
    logs/{da,baseline}.jsonl
    beamformed/<method>/<frame_id>.{bin,pgm,json,raw.bin}
    evaluation/{source,target}_metrics.csv, montage_{source,target}.png
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .acoustics import DOMAINS
from .aperture import PixelGrid
from .beamformers import envelope_logcompress
from .config import DATA_ROOT_ENV, PROFILES, RunConfig
from .errors import DabeamError, DataError
from .evaluation import RoiPair, evaluate_method, format_table
from .models import load_checkpoint, save_checkpoint
from .training import TrainConfig, ValidationFrame, train

log = logging.getLogger("dabeam")

CHECKPOINT_FOR = {"dnn": "baseline", "dadnn": "da"}


# -- config resolution ----------------------------------------------------------
def resolve_config(args) -> RunConfig:
    """``--config`` file, else the stored run config, else the chosen profile.

    Path flags override the file; the data-root environment variable
    overrides the config but not an explicit ``--data-root``.
    """
    profile = PROFILES["small" if args.small else "default"]()
    override = args.data_root or os.environ.get(DATA_ROOT_ENV)
    stored = Path(override or profile.data_root) / "run_config.json"
    if args.config:
        run = RunConfig.load(args.config)
    elif stored.exists() and not args.small:
        run = RunConfig.load(stored)
    else:
        run = profile
    changes = {"data_root": str(override or run.data_root)}
    if args.output_root:
        changes["output_root"] = args.output_root
    elif args.config is None and args.small:
        changes["output_root"] = profile.output_root
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deterministic:
        changes["training"] = TrainConfig.from_dict(dict(run.training.to_dict(), deterministic=True))
    return run.replace(**changes)


def _stored_config(run: RunConfig) -> dict:
    path = Path(run.data_root) / "run_config.json"
    if not path.exists():
        raise DataError(f"{path} not found; run `dabeam simulate` first")
    return json.loads(path.read_text())


def _comparable(d: dict) -> dict:
    return {k: v for k, v in d.items() if k not in ("data_root", "output_root", "training")}


def check_against_store(run: RunConfig):
    """Refuse to mix a config with data simulated from a different one."""
    stored = _stored_config(run)
    if _comparable(stored) != _comparable(run.to_dict()):
        raise DataError("config does not match the simulated data under the data root (use --force on simulate)")


DATA_ENTRIES = ("frames", "manifests", "datasets", "rois.json", "run_config.json")


def _prepare_data_root(path: Path, force: bool):
    """Clear previous simulation outputs; anything else under ``path`` is left alone."""
    present = [path / e for e in DATA_ENTRIES if (path / e).exists()]
    if present and not force:
        raise DataError(f"{path} already holds simulated data; pass --force to overwrite")
    for p in present:
        shutil.rmtree(p) if p.is_dir() else p.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _manifest_members(run: RunConfig):
    root = Path(run.data_root)
    members = {s: [] for s in io.SPLITS}
    for m in (io.read_manifest(root / "manifests" / f"{s}.json") for s in io.SPLITS):
        for member in m["members"]:
            members[member["split"]].append(member)
    expected = {r.frame_id for r in pipeline.frame_records(run)}
    found = {m["id"] for ms in members.values() for m in ms}
    if expected != found:
        raise DataError(f"manifest frames do not match the config ({len(found)} listed, {len(expected)} expected)")
    return members


def _records_by_id(run):
    return {r.frame_id: r for r in pipeline.frame_records(run)}


def _load_tensor(run, member, grid):
    frame = io.load_frame(Path(run.data_root) / member["path"])
    if frame.domain_tag != member["domain"]:
        raise DataError(f"frame {member['id']} is tagged {frame.domain_tag}, manifest says {member['domain']}")
    return pipeline.focus_frame(run, frame, grid)


def _load_rois(run) -> dict:
    path = Path(run.data_root) / "rois.json"
    if not path.exists():
        raise DataError(f"ROI manifest {path} not found")
    return {e["frame_id"]: RoiPair.from_dict(e) for e in json.loads(path.read_text())}


# -- subcommands -------------------------------------------------------------------
def cmd_simulate(run: RunConfig, args):
    root = Path(run.data_root)
    _prepare_data_root(root, args.force)
    run.save(root / "run_config.json")
    members = {s: [] for s in io.SPLITS}
    rois = []
    for rec in pipeline.frame_records(run):
        frame = pipeline.simulate_record(run, rec)
        rel = f"frames/{rec.frame_id}.bin"
        io.save_frame(root / rel, frame)
        members[rec.manifest_split].append(
            {"id": rec.frame_id, "path": rel, "split": rec.manifest_split, "domain": rec.domain,
             "group": rec.split, "phantom_seed": rec.phantom.rng_seed, "snr_db": rec.snr_db}
        )
        if rec.manifest_split != "train":
            rois.append({"frame_id": rec.frame_id, **pipeline.frame_roi(rec).to_dict()})
        log.info("simulated %s (%s)", rec.frame_id, rec.domain)
    for split, ms in members.items():
        io.write_manifest(root / "manifests" / f"{split}.json", ms, split=split, profile=run.profile)
    (root / "rois.json").write_text(json.dumps(rois, indent=1, sort_keys=True))
    counts = {s: len(m) for s, m in members.items()}
    print(f"simulated {sum(counts.values())} frames under {root}: {counts}")


def cmd_build_dataset(run: RunConfig, args):
    check_against_store(run)
    members = _manifest_members(run)
    root = Path(run.data_root)
    out = root / "datasets"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} already exists; pass --force to overwrite")
    grid = pipeline.image_grid(run)
    recs = _records_by_id(run)
    tensors = {m["id"]: _load_tensor(run, m, grid) for m in members["train"]}
    source, target = pipeline.build_datasets(run, tensors, [recs[i] for i in tensors])
    io.save_dataset(out / "source_train", source, kernel_depths_config=run.pipeline.kernel_depths)
    msg = f"source: {len(source)} pairs {source.counts}, d={source.dim}"
    if target is not None:
        io.save_dataset(out / "target_train", target)
        msg += f"; target: {len(target)} unlabeled"
    print(msg)


def _validation(run, grid):
    members = _manifest_members(run)
    rois = _load_rois(run)
    frames = []
    for m in members["validation"]:
        frames.append(ValidationFrame(_load_tensor(run, m, grid), rois[m["id"]], m["id"]))
    return frames


def cmd_train(run: RunConfig, args):
    check_against_store(run)
    root = Path(run.data_root) / "datasets"
    if not (root / "source_train.json").exists():
        raise DataError("datasets not found; run `dabeam build-dataset` first")
    source = io.load_dataset(root / "source_train")
    target = io.load_dataset(root / "target_train") if (root / "target_train.json").exists() else None
    tc = pipeline.training_config(run, args.mode)
    if args.max_steps is not None:
        tc = TrainConfig.from_dict(dict(tc.to_dict(), max_steps=args.max_steps))
    val = _validation(run, pipeline.image_grid(run))
    result = train(tc, source, target if args.mode == "da" else None, val)
    out = Path(run.output_root)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints" / f"{args.mode}.ckpt"
    save_checkpoint(
        ckpt,
        result.models.named_components() if args.mode == "da" else {"F": result.regressor},
        mode=args.mode,
        best_step=result.best_step,
        best_val_cnr=result.best_val_cnr,
        kernel_depths=source.kernel_depths,
        training=tc.to_dict(),
    )
    result.write_log(out / "logs" / f"{args.mode}.jsonl")
    print(f"{args.mode}: best step {result.best_step}, validation CNR {result.best_val_cnr}; wrote {ckpt}")


def _load_regressor(run, method):
    path = Path(run.output_root) / "checkpoints" / f"{CHECKPOINT_FOR[method]}.ckpt"
    if not path.exists():
        raise DataError(f"method {method} needs {path}; run `dabeam train --mode {CHECKPOINT_FOR[method]}`")
    _, modules = load_checkpoint(path)
    return modules["F"]


def cmd_beamform(run: RunConfig, args):
    check_against_store(run)
    members = _manifest_members(run)
    chosen = members[args.split]
    if args.frames:
        wanted = set(args.frames)
        chosen = [m for m in chosen if m["id"] in wanted]
        missing = wanted - {m["id"] for m in chosen}
        if missing:
            raise DataError(f"frames not in the {args.split} manifest: {sorted(missing)}")
    regressor = _load_regressor(run, args.method) if args.method in CHECKPOINT_FOR else None
    grid = pipeline.image_grid(run)
    out = Path(run.output_root) / "beamformed" / args.method
    out.mkdir(parents=True, exist_ok=True)
    for m in chosen:
        tensor = _load_tensor(run, m, grid)
        image = pipeline.beamform(run, tensor, args.method, regressor)
        bmode = envelope_logcompress(image, run.pipeline.dynamic_range, grid)
        io.save_bmode(out / m["id"], bmode, method=args.method, frame_id=m["id"], domain=m["domain"])
        raw = np.stack([image.real, image.imag], axis=-1)
        io.write_container(out / f"{m['id']}.raw.bin", raw, {"kind": "complex_image", "grid": grid.to_dict(),
                                                             "layout": "depth,lateral,re_im", "domain": m["domain"]})
    print(f"{args.method}: beamformed {len(chosen)} frames into {out}")


def _load_raw(path):
    data, header = io.read_container(path)
    return data[..., 0].astype(np.float64) + 1j * data[..., 1], PixelGrid.from_dict(header["grid"]), header["domain"]


def cmd_evaluate(run: RunConfig, args):
    check_against_store(run)
    members = _manifest_members(run)
    rois = _load_rois(run)
    test_ids = [m["id"] for m in members["test"]]
    base = Path(run.output_root) / "beamformed"
    methods = [m for m in pipeline.METHODS if (base / m).is_dir()]
    if not methods:
        raise DataError(f"no beamformed outputs under {base}; run `dabeam beamform` first")
    out = Path(run.output_root) / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    for domain in DOMAINS:
        envs, grids = {}, {}
        for method in methods:
            frames = {}
            for fid in test_ids:
                path = base / method / f"{fid}.raw.bin"
                if not path.exists():
                    continue
                image, grid, dom = _load_raw(path)
                if dom == domain:
                    frames[fid], grids[fid] = np.abs(image), grid
            if frames:
                envs[method] = frames
        if not envs:
            continue
        ids = [set(f) for f in envs.values()]
        if any(s != ids[0] for s in ids):
            raise DataError(f"{domain}: methods were beamformed on different frame sets")
        rows, per_frame = evaluate_method(envs, grids, rois)
        table = format_table(rows)
        (out / f"{domain}_metrics.csv").write_text(table)
        print(f"[{domain}]")
        print(table, end="")
        first = sorted(ids[0])[0]
        montage(out / f"montage_{domain}.png", {m: envs[m][first] for m in envs}, grids[first],
                {m: per_frame[(m, first)] for m in envs}, run.pipeline.dynamic_range, title=first)


def montage(path, envelopes: dict, grid: PixelGrid, metrics: dict, dynamic_range=60.0, title=""):
    """Side-by-side B-mode panels, each scaled to its own maximum."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(envelopes)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.9), squeeze=False)
    extent = [grid.x[0] * 1e3, grid.x[-1] * 1e3, grid.z[-1] * 1e3, grid.z[0] * 1e3]
    for ax, (method, env) in zip(axes[0], envelopes.items()):
        img = envelope_logcompress(env, dynamic_range, grid).intensity_db
        ax.imshow(img, cmap="gray", vmin=-dynamic_range, vmax=0, extent=extent, aspect="equal")
        m = metrics[method]
        ax.set_title(f"{method.upper()}\nCNR {m['cnr']:.2f} dB  CR {m['cr']:.2f} dB", fontsize=9)
        ax.set_xlabel("lateral (mm)")
    axes[0][0].set_ylabel("depth (mm)")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


COMMANDS = {
    "simulate": cmd_simulate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "beamform": cmd_beamform,
    "evaluate": cmd_evaluate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (default: stored config or bundled profile)")
    common.add_argument("--small", action="store_true", help="16-element, 4-depth-kernel CPU profile")
    common.add_argument("--data-root", help=f"data directory (env: {DATA_ROOT_ENV})")
    common.add_argument("--output-root", help="directory for checkpoints, images and tables")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dabeam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate source and target channel frames")
    sub.add_parser("build-dataset", parents=[common], help="extract aperture-domain training samples")
    p = sub.add_parser("train", parents=[common], help="train the DA-DNN or the baseline DNN")
    p.add_argument("--mode", choices=("da", "baseline"), default="da")
    p.add_argument("--max-steps", type=int, help="cap on optimizer steps")
    p = sub.add_parser("beamform", parents=[common], help="beamform frames with one method")
    p.add_argument("--method", choices=pipeline.METHODS, required=True)
    p.add_argument("--split", choices=io.SPLITS, default="test")
    p.add_argument("--frames", nargs="*", help="frame ids (default: whole split)")
    sub.add_parser("evaluate", parents=[common], help="CNR/CR tables and comparison montage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = resolve_config(args)
        if run.training.deterministic:
            import torch

            torch.set_num_threads(1)
        COMMANDS[args.command](run, args)
    except DabeamError as exc:
        print(f"dabeam {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
