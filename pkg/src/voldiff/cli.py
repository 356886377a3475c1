"""Command-line entry point: ``voldiff <command> --config run.json [--seed N] [--out DIR]``.

Every command reads a JSON config (merged over the defaults below), writes its outputs
and a copy of the resolved config into the output directory, and is bitwise
reproducible from (config, seed). Exit codes: 0 success, 2 validation error, 1 runtime
error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import anomaly, inpaint, inverse, metrics, phantom, sampler, tiler
from .condition import ChannelLayout, crop_condition, make_condition
from .denoiser import (AnalyticGaussianDenoiser, ControlAdapter, TorchDenoiser, ToyNetConfig, ToyUNet, TrainingCase, fit,
                       load_checkpoint, save_checkpoint)
from .errors import InvalidArgument, VoldiffValueError
from .schedule import cosine_schedule, skip_subsequence
from .voxgrid import RegionClass, Volume, read_vvol, write_vvol

log = logging.getLogger("voldiff")

DEFAULTS = {
    "schedule": {"T": 1000},
    "model": {"base_channels": 16, "time_dim": 32, "prediction": "v", "frequencies": 6, "num_labels": 8},
    "tiling": {"window": 16, "stride": 8},
    "train": {"steps": 2000, "patch": 16, "batch_size": 8, "lr": 1e-4, "accumulate": 1},
    "denoise": {"sigma_n": 0.15, "lam": 10.0, "zeta": 0.3, "nfe": None},
    "sr": {"sigma_n": 1.0, "lam": 1.0, "zeta": 0.3, "nfe": 100, "sf": 5},
    "sample": {"nfe": None, "clip_x0": 1.0},
    "inpaint": {"nfe": None, "clip_x0": 1.0},
    "anomaly": {"t_fixed": None, "threshold": 0.5, "score": "max", "roi_labels": None},
    "phantom": {"n": 10, "recipe": {}},
}

SECTIONS = {
    "phantom": ("phantom",),
    "train": ("schedule", "model", "train"),
    "finetune": ("train",),
    "sample": ("tiling", "sample"),
    "denoise": ("tiling", "denoise"),
    "sr": ("tiling", "sr"),
    "inpaint": ("tiling", "inpaint"),
    "anomaly": ("tiling", "anomaly"),
    "eval": (),
    "slice": (),
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, command: str) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise InvalidArgument(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise InvalidArgument("config must be a JSON object")
    base = {k: DEFAULTS[k] for k in SECTIONS[command]}
    return deep_merge(base, user)


def _need(cfg: dict, key: str):
    if cfg.get(key) is None:
        raise InvalidArgument(f"config is missing {key!r}")
    return cfg[key]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# dataset access

def load_manifest(dataset) -> tuple[Path, dict]:
    root = Path(dataset)
    try:
        with open(root / "manifest.json") as fh:
            return root, json.load(fh)
    except FileNotFoundError as exc:
        raise InvalidArgument(f"no manifest.json under {root}") from exc


def select_cases(manifest: dict, split) -> list[dict]:
    cases = manifest["cases"]
    if split in (None, "all"):
        return cases
    return [c for c in cases if c["split"] == split]


def load_case(root: Path, case: dict):
    image = read_vvol(root / case["files"]["image"])
    anatomy = np.rint(read_vvol(root / case["files"]["anatomy"]).data).astype(np.int64)
    lesion = np.rint(read_vvol(root / case["files"]["lesion"]).data).astype(np.uint8)
    return image, anatomy, lesion


# model plumbing

def model_from_config(cfg: dict):
    m, s = cfg["model"], cosine_schedule(int(cfg["schedule"]["T"]))
    layout = ChannelLayout(int(m["frequencies"]), int(m["num_labels"]))
    net_cfg = ToyNetConfig(int(m["base_channels"]), int(m["time_dim"]), prediction=m["prediction"])
    return ToyUNet(1 + layout.condition_channels, net_cfg, s.alpha_bar), layout, s


class Runner:
    """Shared state for one CLI invocation: seed, output directory and worker pool."""

    def __init__(self, cfg: dict, seed: int, out: Path, threads: int, no_tiling: bool):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.threads = threads
        self.no_tiling = no_tiling
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def rng(self, *keys) -> np.random.Generator:
        # independent stream per (seed, case index, ...) so outputs do not depend on order
        return np.random.default_rng([self.seed, *keys])

    def load_denoiser(self):
        if self.cfg.get("analytic") is not None:
            # closed-form Gaussian prior instead of a trained network (oracle runs)
            a = self.cfg["analytic"]
            s = cosine_schedule(int(a.get("T", DEFAULTS["schedule"]["T"])))
            d = AnalyticGaussianDenoiser(float(a["mu"]), float(a["var"]), s, float(a.get("var_shared", 0.0)))
            return d, ChannelLayout(), s, {"kind": "analytic"}
        path = _need(self.cfg, "checkpoint")
        model, layout, s, header = load_checkpoint(path)
        return TorchDenoiser(model, layout), layout, s, header

    def plan(self, shape):
        if self.no_tiling:
            return tiler.plan_windows(shape, shape)
        t = self.cfg["tiling"]
        window = tuple(min(int(w), n) for w, n in zip(np.broadcast_to(t["window"], (3,)), shape))
        stride = tuple(min(int(st), w) for st, w in zip(np.broadcast_to(t["stride"], (3,)), window))
        return tiler.plan_windows(shape, window, stride)

    def cond_factory(self, region, anatomy, layout: ChannelLayout, target=None):
        def make(origin, size):
            return crop_condition(region, anatomy, origin, size, frequencies=layout.frequencies,
                                  num_labels=layout.num_labels, target_volume=target)
        return make

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _steps(s, nfe):
    if nfe is None:
        return None
    return skip_subsequence(s, min(int(nfe), s.T), s.T)


# commands

def cmd_phantom(r: Runner) -> int:
    cfg = r.cfg["phantom"]
    manifest = phantom.build_dataset(int(cfg["n"]), phantom.Recipe.from_json(cfg["recipe"]), r.seed, r.out)
    counts = {k: sum(c["split"] == k for c in manifest["cases"]) for k in ("train", "val", "test")}
    print(f"wrote {manifest['n']} cases to {r.out} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def _training_cases(r: Runner, target_kind=None):
    root, manifest = load_manifest(_need(r.cfg, "dataset"))
    cases = []
    for case in select_cases(manifest, r.cfg.get("split", "train")):
        image, anatomy, lesion = load_case(root, case)
        target = None
        if target_kind == "lesion":
            target = lesion.astype(np.float64)
        elif target_kind == "lr":
            lr, _ = phantom.simulate_thick_slice(image, int(r.cfg.get("sf", DEFAULTS["sr"]["sf"])))
            target = np.repeat(lr.data, int(r.cfg.get("sf", DEFAULTS["sr"]["sf"])), axis=0)[:image.shape[0]]
        elif target_kind is not None:
            raise InvalidArgument(f"unknown target condition {target_kind!r}")
        cases.append(TrainingCase(np.asarray(image.data, np.float64), anatomy, image.region, target))
    if not cases:
        raise InvalidArgument("no training cases in the selected split")
    return cases


def _fit(r: Runner, model, cases, layout, s):
    t = r.cfg["train"]
    losses = fit(model, cases, s, layout, steps=int(t["steps"]), patch=(int(t["patch"]),) * 3,
                 batch_size=int(t["batch_size"]), lr=float(t["lr"]), accumulate=int(t["accumulate"]),
                 seed=r.seed)
    write_json(r.out / "losses.json", [float(v) for v in losses])
    if losses:
        print(f"trained {len(losses)} steps, final loss {losses[-1]:.4f}")
    return losses


def cmd_train(r: Runner) -> int:
    torch.manual_seed(r.seed)
    model, layout, s = model_from_config(r.cfg)
    cases = _training_cases(r)
    _fit(r, model, cases, layout, s)
    save_checkpoint(r.out / "model.vdck", model, layout, s, {"command": "train", "seed": r.seed})
    return 0


def cmd_finetune(r: Runner) -> int:
    torch.manual_seed(r.seed)
    base, layout, s, _ = load_checkpoint(_need(r.cfg, "checkpoint"))
    if isinstance(base, ControlAdapter):
        raise InvalidArgument("finetune expects a base model checkpoint")
    adapter = ControlAdapter(base)
    target_kind = r.cfg.get("target", "lesion")
    cases = _training_cases(r, target_kind)
    _fit(r, adapter, cases, layout, s)
    save_checkpoint(r.out / "adapter.vdck", adapter, layout, s,
                    {"command": "finetune", "target": target_kind, "seed": r.seed})
    return 0


def _anatomy_for_sample(r: Runner, layout: ChannelLayout):
    cfg = r.cfg
    if cfg.get("anatomy"):
        vol = read_vvol(cfg["anatomy"])
        anatomy = np.rint(vol.data).astype(np.int64)
        region = RegionClass.parse(cfg.get("region", vol.region))
    else:
        shape = tuple(int(n) for n in _need(cfg, "shape"))
        anatomy = np.zeros(shape, dtype=np.int64)
        region = RegionClass.parse(_need(cfg, "region"))
    return region, anatomy


def cmd_sample(r: Runner) -> int:
    d, layout, s, _ = r.load_denoiser()
    region, anatomy = _anatomy_for_sample(r, layout)
    opts = r.cfg["sample"]
    steps = _steps(s, opts["nfe"])
    clip = opts["clip_x0"]
    count = int(r.cfg.get("count", 1))
    for i in range(count):
        rng = r.rng(i)
        if r.no_tiling:
            cond = make_condition(region, anatomy, frequencies=layout.frequencies, num_labels=layout.num_labels)
            x = sampler.generate(d, cond, anatomy.shape, s, rng, steps=steps, clip_x0=clip)
        else:
            x = tiler.tiled_generate(d, r.cond_factory(region, anatomy, layout), anatomy.shape, s, rng,
                                     plan=r.plan(anatomy.shape), steps=steps, executor=r.pool, clip_x0=clip)
        write_vvol(r.out / f"sample_{i:03d}.vvol", Volume(x, region=region))
        print(f"sample {i}: mean {x.mean():.4f}")
    return 0


def _task_cases(r: Runner):
    root, manifest = load_manifest(_need(r.cfg, "dataset"))
    cases = select_cases(manifest, r.cfg.get("split", "test"))
    if not cases:
        raise InvalidArgument("no cases in the selected split")
    return root, cases


def cmd_denoise(r: Runner) -> int:
    d, layout, s, _ = r.load_denoiser()
    opts = r.cfg["denoise"]
    ops = inverse.DegradationOps("denoise", sigma_n=float(opts["sigma_n"]), lam=float(opts["lam"]))
    root, cases = _task_cases(r)
    records, gains = [], []
    for i, case in enumerate(cases):
        image, anatomy, _ = load_case(root, case)
        x = np.asarray(image.data, np.float64)
        rng = r.rng(i)
        y = phantom.simulate_low_dose(image, ops.sigma_n, rng).data.astype(np.float64)
        out = tiler.tiled_restore(d, r.cond_factory(image.region, anatomy, layout), y, ops, s,
                                  r.plan(x.shape), nfe=opts["nfe"], zeta=float(opts["zeta"]), rng=rng,
                                  executor=r.pool)
        write_vvol(r.out / f"{case['id']}_noisy.vvol", image.with_data(y))
        write_vvol(r.out / f"{case['id']}_denoised.vvol", image.with_data(out))
        before, after = metrics.psnr(x, y, 2.0), metrics.psnr(x, out, 2.0)
        gains.append(after - before)
        records += [metrics.metric_record("psnr_noisy", before, case["id"]),
                    metrics.metric_record("psnr_denoised", after, case["id"])]
    metrics.write_report(r.out / "metrics.json", records)
    print(f"mean PSNR gain {np.mean(gains):.3f} dB over {len(gains)} cases")
    return 0


def cmd_sr(r: Runner) -> int:
    d, layout, s, header = r.load_denoiser()
    opts = r.cfg["sr"]
    sf = int(opts["sf"])
    ops = inverse.DegradationOps("sr", sf=sf, sigma_n=float(opts["sigma_n"]), lam=float(opts["lam"]))
    root, cases = _task_cases(r)
    records = []
    for i, case in enumerate(cases):
        image, anatomy, _ = load_case(root, case)
        depth = image.shape[0]
        lr, padded = phantom.simulate_thick_slice(image, sf)
        y = np.asarray(lr.data, np.float64)
        hr_depth = y.shape[0] * sf
        anatomy_hr = np.pad(anatomy, ((0, hr_depth - depth), (0, 0), (0, 0)), mode="edge")
        target = np.repeat(y, sf, axis=0) if header["kind"] == "control" else None
        factory = r.cond_factory(image.region, anatomy_hr, layout, target)
        out = tiler.tiled_restore(d, factory, y, ops, s, r.plan(anatomy_hr.shape), nfe=opts["nfe"],
                                  zeta=float(opts["zeta"]), rng=r.rng(i), executor=r.pool)[:depth]
        write_vvol(r.out / f"{case['id']}_lr.vvol", lr)
        write_vvol(r.out / f"{case['id']}_sr.vvol", image.with_data(out))
        records.append(metrics.metric_record("psnr", metrics.psnr(image.data, out, 2.0), case["id"],
                                             sf=sf, padded=padded))
    metrics.write_report(r.out / "metrics.json", records)
    print(f"mean SR PSNR {np.mean([rec['value'] for rec in records]):.3f} dB over {len(records)} cases")
    return 0


def cmd_inpaint(r: Runner) -> int:
    d, layout, s, header = r.load_denoiser()
    opts = r.cfg["inpaint"]
    steps = _steps(s, opts["nfe"])
    root, cases = _task_cases(r)
    for i, case in enumerate(cases):
        image, anatomy, lesion = load_case(root, case)
        x = np.asarray(image.data, np.float64)
        target = lesion.astype(np.float64) if header["kind"] == "control" else None
        plan = r.plan(x.shape)
        eps_fn = tiler.fused_noise_fn(d, plan, r.cond_factory(image.region, anatomy, layout, target), r.pool)
        out = inpaint.inpaint_volume(d, None, x, lesion, s, r.rng(i), steps=steps, eps_fn=eps_fn,
                                     clip_x0=opts["clip_x0"])
        write_vvol(r.out / f"{case['id']}_inpainted.vvol", image.with_data(out))
        print(f"{case['id']}: inpainted {int(lesion.sum())} voxels")
    return 0


def cmd_anomaly(r: Runner) -> int:
    d, layout, s, _ = r.load_denoiser()
    opts = r.cfg["anomaly"]
    t_fixed = anomaly.default_t_fixed(s.T) if opts["t_fixed"] is None else int(opts["t_fixed"])
    root, cases = _task_cases(r)
    scores, labels, maps, masks, records = [], [], [], [], []
    for i, case in enumerate(cases):
        image, anatomy, lesion = load_case(root, case)
        x = np.asarray(image.data, np.float64)
        roi = np.ones(x.shape, bool) if opts["roi_labels"] is None else np.isin(anatomy, opts["roi_labels"])
        plan = r.plan(x.shape)
        eps_fn = tiler.fused_noise_fn(d, plan, r.cond_factory(image.region, anatomy, layout), r.pool)
        res = anomaly.detect(d, x, roi, None, t_fixed, float(opts["threshold"]), s, r.rng(i),
                             score=opts["score"], eps_fn=eps_fn)
        write_vvol(r.out / f"{case['id']}_map.vvol", image.with_data(res.map))
        write_vvol(r.out / f"{case['id']}_mask.vvol", image.with_data(res.mask.astype(np.float32)))
        scores.append(res.score)
        labels.append(int(lesion.any()))
        maps.append(res.abs_map)
        masks.append(lesion & roi)
        records.append(metrics.metric_record("score", res.score, case["id"], t_fixed=t_fixed))
        if lesion.any():
            pred = anomaly.normalize_map(res.abs_map, roi) >= 0.5
            records.append(metrics.metric_record("dice@0.5", metrics.dice(pred, lesion & roi), case["id"]))
    if 0 < sum(labels) < len(labels):
        auc = metrics.auroc(scores, labels)
        records.append(metrics.metric_record("image_auroc", auc, "all"))
        print(f"image AUROC {auc:.4f}")
    if any(m.any() for m in masks):
        flat = np.concatenate([m.ravel() for m in maps])
        gt = np.concatenate([m.ravel() for m in masks]).astype(np.uint8)
        records.append(metrics.metric_record("pixel_auroc", metrics.auroc(flat, gt), "all"))
        records.append(metrics.metric_record("pro", metrics.pro(maps, [m.astype(np.uint8) for m in masks]), "all"))
    metrics.write_report(r.out / "metrics.json", records)
    print(f"scored {len(cases)} cases at t_fixed={t_fixed}")
    return 0


def cmd_eval(r: Runner) -> int:
    root, cases = _task_cases(r)
    pred_dir = Path(_need(r.cfg, "predictions"))
    pattern = r.cfg.get("pattern", "{id}_denoised.vvol")
    wanted = r.cfg.get("metrics", ["psnr", "ssim", "ms_ssim"])
    fns = {"psnr": metrics.psnr, "ssim": metrics.ssim3d, "ms_ssim": metrics.ms_ssim3d}
    unknown = set(wanted) - set(fns)
    if unknown:
        raise InvalidArgument(f"unknown metrics {sorted(unknown)}")
    records = []
    for case in cases:
        image, _, _ = load_case(root, case)
        pred = read_vvol(pred_dir / pattern.format(id=case["id"]))
        for name in wanted:
            records.append(metrics.metric_record(name, fns[name](image.data, pred.data, 2.0), case["id"]))
    metrics.write_report(r.out / "metrics.json", records)
    for name in wanted:
        vals = [rec["value"] for rec in records if rec["metric"] == name]
        print(f"{name}: mean {np.mean(vals):.4f} over {len(vals)} cases")
    return 0


def write_pgm(path, image2d: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    scaled = np.clip((np.asarray(image2d, np.float64) - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.rint(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_slice(r: Runner) -> int:
    vol = read_vvol(_need(r.cfg, "input"))
    axis = int(r.cfg.get("axis", 0))
    if axis not in (0, 1, 2):
        raise InvalidArgument(f"axis must be 0, 1 or 2, got {axis}")
    index = r.cfg.get("index")
    index = vol.shape[axis] // 2 if index is None else int(index)
    if not 0 <= index < vol.shape[axis]:
        raise InvalidArgument(f"slice index {index} outside [0, {vol.shape[axis]})")
    lo, hi = r.cfg.get("range", [-1.0, 1.0])
    name = f"{Path(r.cfg['input']).stem}_axis{axis}_{index:03d}.pgm"
    write_pgm(r.out / name, np.take(vol.data, index, axis=axis), lo, hi)
    print(f"wrote {r.out / name}")
    return 0


COMMANDS = {
    "phantom": cmd_phantom, "train": cmd_train, "finetune": cmd_finetune, "sample": cmd_sample,
    "denoise": cmd_denoise, "sr": cmd_sr, "inpaint": cmd_inpaint, "anomaly": cmd_anomaly,
    "eval": cmd_eval, "slice": cmd_slice,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voldiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides config 'seed' (default 0)")
        p.add_argument("--out", default=None, help="output directory (overrides config 'out')")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for window evaluation (env VOLDIFF_THREADS)")
        if name == "sample":
            p.add_argument("--no-tiling", action="store_true", help="denoise the whole volume as one window")
    return parser


@contextmanager
def _single_thread_torch():
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(before)


def resolve_threads(flag) -> int:
    if flag is None:
        env = os.environ.get("VOLDIFF_THREADS")
        try:
            flag = int(env) if env else 1
        except ValueError as exc:
            raise InvalidArgument(f"VOLDIFF_THREADS must be an integer, got {env!r}") from exc
    if flag < 1:
        raise InvalidArgument(f"--threads must be >= 1, got {flag}")
    return int(flag)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    runner = None
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        cfg.setdefault("seed", 0)
        out = Path(_need(cfg, "out"))
        threads = resolve_threads(args.threads)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg)
        runner = Runner(cfg, int(cfg["seed"]), out, threads, bool(getattr(args, "no_tiling", False)))
        with _single_thread_torch():
            return COMMANDS[args.command](runner)
    except (VoldiffValueError, KeyError) as exc:
        print(f"voldiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"voldiff {args.command}: runtime error: {exc}", file=sys.stderr)
        return 1
    finally:
        if runner is not None:
            runner.close()


if __name__ == "__main__":
    sys.exit(main())
