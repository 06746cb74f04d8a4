"""Batch front door: rooms, synth, train, eval, report.

Config files are versioned JSON; command-line flags override file fields.
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 pipeline
assertion failure. All commands are idempotent over completed outputs and
draw every random choice from the single config seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import binaural, model, motion, rooms, scenes, wavio
from .evaluate import evaluate_dataset, summarize, write_reports, MetricsRecord, CSV_HEADER
from .rng import Rng

log = logging.getLogger("classroomsep")

CONFIG_VERSION = 1
RING_DIRECTIONS = 72
FRONTAL_DIRECTIONS = 37


class ConfigError(Exception):
    pass


class PipelineError(Exception):
    pass


DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "out": "runs/out",
    "rooms": {
        "count": 2,
        "distances": [1.0],
        "t60_choices": list(rooms.T60_CHOICES),
        "max_order": 12,
        "hrir": "synthetic",
        "head_radius": 0.07,
    },
    "dataset": {
        "counts": {"train": 8, "val": 2, "test": 4},
        "pair_ratios": {"child-child": 0.5, "child-adult": 0.5},
        "babble": False,
        "snr_range_db": [0.0, 5.0],
        "babble_snr_range_db": [-2.5, 15.0],
        "babble_sources": [3, 8],
        "distances": {"train": [1.0], "val": [1.0], "test": [1.0]},
        "speech_manifest": None,
        "babble_manifest": None,
    },
    "train": {
        "strategy": "classroom",
        "epochs": 4,
        "batch_size": 4,
        "lr": 1e-3,
        "finetune_fraction": 0.5,
        "checkpoint": None,
        "max_scenes": None,
        "model": {},
    },
    "eval": {
        "split": "test",
        "estimator": "passthrough",
        "checkpoint": None,
    },
}


def _merge(base: dict, override: dict, depth: int = 2) -> dict:
    """Merge config sections; below section level, values replace wholesale
    (a user-supplied dataset.counts is taken as-is, not unioned with the
    defaults)."""
    out = dict(base)
    for key, value in override.items():
        if depth > 1 and isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, depth - 1)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)  # callers may freely mutate their copy
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        cfg = _merge(cfg, raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {cfg.get('version')}")
    r = cfg["rooms"]
    if r["count"] < 1:
        raise ConfigError("rooms.count: must be >= 1")
    for t in r["t60_choices"]:
        if not any(abs(t - ok) < 1e-9 for ok in rooms.T60_CHOICES):
            raise ConfigError(f"rooms.t60_choices: {t} not one of {rooms.T60_CHOICES}")
    for d in r["distances"]:
        if not any(abs(d - ok) < 1e-9 for ok in rooms.RING_RADII):
            raise ConfigError(f"rooms.distances: {d} not one of {rooms.RING_RADII}")
    if not 0.05 <= r["head_radius"] <= 0.12:
        raise ConfigError(f"rooms.head_radius: {r['head_radius']} outside [0.05, 0.12]")
    ds = cfg["dataset"]
    if abs(sum(ds["pair_ratios"].values()) - 1.0) > 1e-9:
        raise ConfigError("dataset.pair_ratios: must sum to 1")
    for pt in ds["pair_ratios"]:
        if pt not in scenes.PAIR_TYPES:
            raise ConfigError(f"dataset.pair_ratios: unknown pair type {pt!r}")
    for split, dists in ds["distances"].items():
        for d in dists:
            if not any(abs(d - ok) < 1e-9 for ok in rooms.RING_RADII):
                raise ConfigError(f"dataset.distances.{split}: {d} not one of {rooms.RING_RADII}")
    tr = cfg["train"]
    if tr["strategy"] not in ("adult", "classroom", "finetune"):
        raise ConfigError(f"train.strategy: {tr['strategy']!r} not one of adult/classroom/finetune")
    if not 0.0 < tr["finetune_fraction"] <= 1.0:
        raise ConfigError("train.finetune_fraction: must be in (0, 1]")
    ev = cfg["eval"]
    if ev["estimator"] not in ("checkpoint", "passthrough", "oracle"):
        raise ConfigError(f"eval.estimator: {ev['estimator']!r} unknown")


# --- planning (validated job counts, no execution) ----------------------------

def plan_rooms(cfg: dict) -> dict:
    r = cfg["rooms"]
    n_rooms, n_dist = r["count"], len(r["distances"])
    return {
        "rooms": n_rooms,
        "distances": r["distances"],
        "rir_jobs_per_distance": n_rooms * RING_DIRECTIONS,
        "rir_jobs_total": n_rooms * RING_DIRECTIONS * n_dist,
        "brirs_per_distance": n_rooms * FRONTAL_DIRECTIONS,
        "brirs_total": n_rooms * FRONTAL_DIRECTIONS * n_dist,
    }


def plan_dataset(cfg: dict) -> dict:
    ds = cfg["dataset"]
    return {
        "counts": dict(ds["counts"]),
        "scenes_total": sum(ds["counts"].values()),
        "babble": ds["babble"],
    }


# --- rooms command -------------------------------------------------------------

def _load_hrirs(rooms_cfg: dict) -> binaural.HrirSet:
    if rooms_cfg["hrir"] == "synthetic":
        return binaural.synthetic_hrir_set(rooms_cfg["head_radius"])
    pack = Path(rooms_cfg["hrir"])
    if not pack.exists():
        raise ConfigError(f"rooms.hrir: pack path {pack} does not exist")
    return binaural.load_hrir_pack(pack)


def _room_geometry(cfg: dict) -> list:
    """Deterministic rooms and listener positions from the config seed."""
    r = cfg["rooms"]
    rng = Rng(cfg["seed"], "rooms")
    clearance = max(r["distances"]) + 0.2
    out = []
    for i in range(r["count"]):
        room = rooms.sample_room(rng.substream("room", i), room_id=i,
                                 t60_choices=tuple(r["t60_choices"]))
        listener = rooms.sample_listener_position(room, rng.substream("listener", i), clearance)
        out.append({"room": room.to_dict(), "listener": listener.tolist()})
    return out


def _rir_brir_job(job, out_root, hrirs, max_order, seed):
    """One (room, distance, azimuth) unit: simulate, cache, render if frontal."""
    room_dict, listener, distance, ring_pos = job
    room = rooms.RoomSpec.from_dict(room_dict)
    listener = np.asarray(listener)
    az = ring_pos["azimuth_deg"]
    rir_path = rooms.rir_cache_path(out_root, room.room_id, distance, az)
    signed = rooms.signed_azimuth(az)
    frontal = abs(signed) <= 90
    brir_file = motion.brir_path(out_root, room.room_id, distance, int(signed)) if frontal else None
    if rir_path.exists() and (brir_file is None or brir_file.exists()):
        return "skipped"
    if not ring_pos["in_room"]:
        return "flagged"
    rng = Rng(seed, f"rir/{room.room_id}/{distance}/{az}")
    rir = rooms.simulate_rir(
        room, np.asarray(ring_pos["position"]), listener,
        rng=rng.substream("tail"), max_order=max_order,
    )
    rooms.save_rir(rir_path, rir, room, az, seed)
    if frontal:
        track = binaural.sdm_analyze(rir)
        brir = binaural.render_brir(rir, track, hrirs, rng.substream("diffuse"))
        brir = binaural.with_room_id(brir, room.room_id)
        wavio.write_wav(brir_file, brir.samples, rate=brir.rate)
    return "done"


def cmd_rooms(cfg: dict, jobs: int = 1, plan_only: bool = False) -> int:
    plan = plan_rooms(cfg)
    log.info(
        "rooms plan: %d rooms x %d directions x %d distance(s) = %d RIR jobs (%d per distance), %d frontal BRIRs",
        plan["rooms"], RING_DIRECTIONS, len(plan["distances"]),
        plan["rir_jobs_total"], plan["rir_jobs_per_distance"], plan["brirs_total"],
    )
    if plan_only:
        print(json.dumps(plan, indent=1))
        return 0
    out_root = Path(cfg["out"])
    out_root.mkdir(parents=True, exist_ok=True)
    hrirs = _load_hrirs(cfg["rooms"])
    geometry = _room_geometry(cfg)
    (out_root / "geometry.json").write_text(json.dumps(geometry, indent=1))
    job_list = []
    for entry in geometry:
        room = rooms.RoomSpec.from_dict(entry["room"])
        for distance in cfg["rooms"]["distances"]:
            ring = rooms.talker_ring_positions(np.asarray(entry["listener"]), distance, room)
            for pos in ring:
                job_list.append(
                    (
                        entry["room"], entry["listener"], distance,
                        {"azimuth_deg": pos.azimuth_deg, "position": pos.position.tolist(),
                         "in_room": pos.in_room},
                    )
                )
    worker = partial(
        _rir_brir_job, out_root=out_root, hrirs=hrirs,
        max_order=cfg["rooms"]["max_order"], seed=cfg["seed"],
    )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(worker, job_list, chunksize=4))
    else:
        results = [worker(j) for j in job_list]
    done = results.count("done")
    skipped = results.count("skipped")
    flagged = results.count("flagged")
    for entry in geometry:
        room_id = entry["room"]["room_id"]
        for distance in cfg["rooms"]["distances"]:
            bank_meta = {
                "room_id": room_id, "distance": distance, "rate": 16000,
                "listener_position": entry["listener"],
            }
            meta_path = motion.brir_path(out_root, room_id, distance, 0).parent / "bank.json"
            meta_path.write_text(json.dumps(bank_meta, indent=1))
            motion.load_brir_bank(out_root, room_id, distance)  # completeness check
    log.info("rooms: %d jobs attempted, %d built, %d cached, %d flagged out-of-room",
             len(job_list), done, skipped, flagged)
    print(f"rooms: {len(job_list)} RIR jobs, {plan['brirs_total']} frontal BRIRs, "
          f"{done} built, {skipped} already cached, {flagged} flagged")
    return 0


# --- synth command -------------------------------------------------------------

def _dataset_spec(cfg: dict) -> scenes.DatasetSpec:
    ds = cfg["dataset"]
    return scenes.DatasetSpec(
        counts={k: int(v) for k, v in ds["counts"].items()},
        pair_ratios=dict(ds["pair_ratios"]),
        babble=bool(ds["babble"]),
        snr_range_db=tuple(ds["snr_range_db"]),
        babble_snr_range_db=tuple(ds["babble_snr_range_db"]),
        babble_sources=tuple(ds["babble_sources"]),
        distances={k: list(v) for k, v in ds["distances"].items()},
        seed=int(cfg["seed"]),
    )


def _load_banks(cfg: dict) -> dict:
    out_root = Path(cfg["out"])
    geo_path = out_root / "geometry.json"
    if not geo_path.exists():
        raise FileNotFoundError(f"no geometry.json under {out_root}; run `rooms` first")
    geometry = json.loads(geo_path.read_text())
    needed = sorted({d for dists in cfg["dataset"]["distances"].values() for d in dists})
    banks = {}
    for entry in geometry:
        room_id = entry["room"]["room_id"]
        for distance in needed:
            banks[(room_id, distance)] = motion.load_brir_bank(out_root, room_id, distance)
    return banks


def _load_pools(cfg: dict) -> scenes.ScenePools:
    ds = cfg["dataset"]
    if not ds["speech_manifest"]:
        raise ConfigError("dataset.speech_manifest: required for synth/train")
    speech = scenes.ingest_corpus(ds["speech_manifest"])
    babble = None
    if ds["babble"]:
        if not ds["babble_manifest"]:
            raise ConfigError("dataset.babble_manifest: required when dataset.babble is on")
        babble = scenes.ingest_corpus(ds["babble_manifest"], min_duration=0.0)
    return scenes.ScenePools(speech, babble)


def cmd_synth(cfg: dict, jobs: int = 1, plan_only: bool = False) -> int:
    plan = plan_dataset(cfg)
    log.info("synth plan: %s scenes (%s)", plan["scenes_total"], plan["counts"])
    if plan_only:
        print(json.dumps(plan, indent=1))
        return 0
    spec = _dataset_spec(cfg)
    pools = _load_pools(cfg)
    banks = _load_banks(cfg)
    dataset_dir = Path(cfg["out"]) / "dataset"
    index = scenes.generate_dataset(spec, pools, banks, dataset_dir)
    mean_snrs = {
        split: float(np.mean([
            json.loads((dataset_dir / split / s["scene_id"] / "manifest.json").read_text())["mixture_snr_db"]
            for s in index["scenes"] if s["split"] == split
        ]))
        for split in spec.counts if spec.counts[split]
    }
    print(f"synth: {len(index['scenes'])} scenes, mean pair SNR by split "
          f"{json.dumps({k: round(v, 2) for k, v in mean_snrs.items()})}, "
          f"index hash {index['index_hash']}")
    return 0


# --- train command -------------------------------------------------------------

class _TrainScene:
    __slots__ = ("mixture", "references", "trajectories")

    def __init__(self, mixture, references, trajectories):
        self.mixture = mixture
        self.references = references
        self.trajectories = trajectories


def _load_split_scenes(dataset_dir: Path, split: str, limit: int | None = None) -> list:
    index = json.loads((dataset_dir / "index.json").read_text())
    ids = sorted(s["scene_id"] for s in index["scenes"] if s["split"] == split)
    if limit is not None:
        ids = ids[:limit]
    out = []
    for scene_id in ids:
        mixture, refs, _, manifest = scenes.load_scene(dataset_dir / split / scene_id)
        trajs = tuple(motion.Trajectory.from_dict(d) for d in manifest.trajectories)
        out.append(_TrainScene(mixture, refs, trajs))
    return out


def cmd_train(cfg: dict) -> int:
    tr = cfg["train"]
    dataset_dir = Path(cfg["out"]) / "dataset"
    if not (dataset_dir / "index.json").exists():
        raise FileNotFoundError(f"no dataset under {dataset_dir}; run `synth` first")
    mcfg = model.ModelConfig.from_dict({**model.ModelConfig().to_dict(), **tr["model"]})
    train_scenes = _load_split_scenes(dataset_dir, "train", tr["max_scenes"])
    val_scenes = _load_split_scenes(dataset_dir, "val", tr["max_scenes"])
    init = None
    finetune = tr["strategy"] == "finetune"
    if finetune:
        if not tr["checkpoint"]:
            raise ConfigError("train.checkpoint: required for the finetune strategy")
        ck_cfg, init = model.load_checkpoint(tr["checkpoint"])
        if ck_cfg != mcfg:
            raise ConfigError("train.model: configuration differs from the checkpoint's")
        keep = int(round(len(train_scenes) * tr["finetune_fraction"]))
        order = Rng(cfg["seed"], "finetune-subset").shuffled(range(len(train_scenes)))
        train_scenes = [train_scenes[i] for i in sorted(order[:keep])]
    log.info("training scenes: %d (val %d), strategy %s", len(train_scenes), len(val_scenes), tr["strategy"])
    tcfg = model.TrainConfig(
        epochs=int(tr["epochs"]), batch_size=int(tr["batch_size"]), lr=float(tr["lr"]),
        finetune=finetune, init=init, seed=int(cfg["seed"]),
    )
    params, history = model.train_micro(mcfg, train_scenes, val_scenes, tcfg)
    ckpt_dir = Path(cfg["out"]) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / f"{tr['strategy']}.ckpt"
    model.save_checkpoint(ckpt_path, mcfg, params)
    history.save_csv(ckpt_dir / f"{tr['strategy']}-history.csv")
    last = history.rows[-1] if history.rows else ("-",) * 5
    print(f"train: {len(train_scenes)} scenes, {tcfg.epochs} epochs, "
          f"final {last[0]} loss {last[3]:.3f}, checkpoint {ckpt_path}")
    return 0


# --- eval / report commands ----------------------------------------------------

def _write_estimates(cfg: dict, dataset_dir: Path, split: str, est_root: Path) -> None:
    estimator = cfg["eval"]["estimator"]
    params = mcfg = None
    if estimator == "checkpoint":
        ckpt = cfg["eval"]["checkpoint"]
        if not ckpt:
            raise ConfigError("eval.checkpoint: required for the checkpoint estimator")
        mcfg, params = model.load_checkpoint(ckpt)
    index = json.loads((dataset_dir / "index.json").read_text())
    for entry in index["scenes"]:
        if entry["split"] != split:
            continue
        scene_dir = dataset_dir / split / entry["scene_id"]
        est_dir = est_root / entry["scene_id"]
        if (est_dir / "est1.wav").exists() and (est_dir / "est2.wav").exists():
            continue
        mixture, refs, _, _ = scenes.load_scene(scene_dir)
        if estimator == "passthrough":
            ests = (mixture, mixture)
        elif estimator == "oracle":
            ests = refs
        else:
            out = model.forward(params, mcfg, mixture)
            ests = out.estimates
        wavio.write_wav(est_dir / "est1.wav", ests[0])
        wavio.write_wav(est_dir / "est2.wav", ests[1])


def cmd_eval(cfg: dict) -> int:
    dataset_dir = Path(cfg["out"]) / "dataset"
    split = cfg["eval"]["split"]
    if not (dataset_dir / "index.json").exists():
        raise FileNotFoundError(f"no dataset under {dataset_dir}; run `synth` first")
    est_root = Path(cfg["out"]) / "estimates" / cfg["eval"]["estimator"] / split
    _write_estimates(cfg, dataset_dir, split, est_root)
    records, summary = evaluate_dataset(dataset_dir, est_root, split=split)
    if not records:
        raise PipelineError("evaluation produced no records")
    report_dir = Path(cfg["out"]) / "reports" / cfg["eval"]["estimator"]
    write_reports(records, summary, report_dir)
    print(f"eval[{cfg['eval']['estimator']}/{split}]: mean SNRi "
          f"{summary['overall']['snri_mean_db']:.2f} dB, mean DoA error "
          f"{summary['overall']['doa_mean_deg']:.2f} deg, reports in {report_dir}")
    return 0


def _records_from_csv(path: Path) -> list:
    import csv as _csv

    records = []
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise PipelineError(f"unexpected metrics.csv header in {path}")
        for row in reader:
            records.append(
                MetricsRecord(
                    scene_id=row[0], talker=int(row[1]), snri_db=float(row[2]),
                    doa_error_deg=float(row[3]),
                    permutation=(int(row[4][0]), int(row[4][1])),
                    pair_type=row[5], babble=bool(int(row[6])), distance=float(row[7]),
                )
            )
    return records


def cmd_report(cfg: dict) -> int:
    report_dir = Path(cfg["out"]) / "reports" / cfg["eval"]["estimator"]
    metrics_path = report_dir / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics.csv under {report_dir}; run `eval` first")
    records = _records_from_csv(metrics_path)
    if not records:
        raise PipelineError(f"metrics.csv under {report_dir} holds no records")
    summary = summarize(records)
    write_reports(records, summary, report_dir)
    print(f"report: {len(records)} records, mean SNRi "
          f"{summary['overall']['snri_mean_db']:.2f} dB, outputs in {report_dir}")
    return 0


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classroomsep",
        description="Binaural classroom-scene synthesis and evaluation pipeline",
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("rooms", "simulate RIR and BRIR caches"),
        ("synth", "synthesize the scene dataset"),
        ("train", "train the micro separation model"),
        ("eval", "run an estimator and score it"),
        ("report", "re-aggregate metrics into reports"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--hrir", default=None, help="HRIR pack path or 'synthetic'")
        p.add_argument("--plan", action="store_true", help="validate and print job counts only")
        if name == "train":
            p.add_argument("--strategy", choices=("adult", "classroom", "finetune"), default=None)
            p.add_argument("--finetune-fraction", type=float, default=None)
            p.add_argument("--checkpoint", default=None)
        if name in ("eval", "report"):
            p.add_argument("--estimator", choices=("checkpoint", "passthrough", "oracle"), default=None)
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--split", default=None)
        if name in ("rooms", "synth"):
            p.add_argument("--distance", type=float, action="append", default=None,
                           help="restrict to this distance (repeatable)")
    return parser


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.hrir is not None:
        cfg["rooms"]["hrir"] = args.hrir
    if getattr(args, "distance", None):
        cfg["rooms"]["distances"] = args.distance
    if getattr(args, "strategy", None):
        cfg["train"]["strategy"] = args.strategy
    if getattr(args, "finetune_fraction", None) is not None:
        cfg["train"]["finetune_fraction"] = args.finetune_fraction
    if getattr(args, "checkpoint", None):
        cfg["train"]["checkpoint"] = args.checkpoint
        cfg["eval"]["checkpoint"] = args.checkpoint
    if getattr(args, "estimator", None):
        cfg["eval"]["estimator"] = args.estimator
    if getattr(args, "split", None):
        cfg["eval"]["split"] = args.split
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "rooms":
            return cmd_rooms(cfg, jobs=args.jobs, plan_only=args.plan)
        if args.command == "synth":
            return cmd_synth(cfg, jobs=args.jobs, plan_only=args.plan)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (OSError, FileNotFoundError) as exc:
        log.error("I/O error: %s", exc)
        return 3
    except (PipelineError, AssertionError, scenes.PartialDatasetError,
            motion.MissingAzimuthError, model.NonFiniteError) as exc:
        log.error("pipeline failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
