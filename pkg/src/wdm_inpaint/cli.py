"""Command-line entry point: ``wdm-inpaint <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Progress goes to stderr; machine-readable results go to files or stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, PipelineConfig, desk_preset, load_config
from .phantom import InconsistentGeometryError

log = logging.getLogger("wdm_inpaint")

SEED_ENV = "TROCH_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _log_artifacts(kind: str, paths) -> None:
    for p in paths:
        p = Path(p)
        if p.exists():
            log.info("%s %s sha256=%s", kind, p, sha256(p))


def resolve_seed(cli_seed: int | None, fallback: int = 0) -> int:
    """``--seed`` wins, then ``$TROCH_SEED``, then the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(fallback)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_preset()
    log.info("resolved config:\n%s", cfg.to_json())
    return cfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, default=float) + "\n")


# subcommands


def cmd_preprocess(args) -> int:
    from .volume import preprocess

    cfg = _config(args)
    v = io.load_any(args.input)
    _log_artifacts("input", [args.input])
    out = preprocess(v, cfg.preprocess.build())
    io.save_raw(args.out, out)
    _log_artifacts("output", [args.out])
    _emit({"dims": list(out.dims), "spacing_mm": list(out.spacing)})
    return 0


def cmd_mask(args) -> int:
    from .masking import make_inpainting_mask, segment_background

    cfg = _config(args)
    v = io.load_any(args.input)
    labels = io.load_raw(args.labels) if args.labels else None
    _log_artifacts("input", [p for p in (args.input, args.labels) if p])
    result = {}
    if args.cleaned:
        fg, cleaned = segment_background(v, cfg.mask.otsu_bins, cfg.mask.structuring_element())
        io.save_raw(args.cleaned, cleaned)
        result["foreground_voxels"] = fg.count
        v = cleaned
    m, found = make_inpainting_mask(v, labels, cfg.mask.build())
    io.save_raw(args.out, m.to_volume(), dtype="u8")
    _log_artifacts("output", [args.out])
    result.update({"patella_found": found, "mask_voxels": m.count})
    _emit(result)
    return 0


def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec, sample_specs, save_phantom, spec_from_dict

    out_dir = Path(args.out)
    if args.count:
        seed = resolve_seed(args.seed)
        log.info("seed %d", seed)
        specs = sample_specs(args.count, tuple(args.sa_range), np.random.default_rng(seed), noise_sigma=args.noise)
        names = [f"{args.name}_{i:03d}" for i in range(args.count)]
    else:
        if args.spec:
            spec = spec_from_dict(json.loads(Path(args.spec).read_text()))
        else:
            kw = {"noise_sigma": args.noise}
            if args.sa is not None:
                kw["sulcus_angle_deg"] = args.sa
            if args.tgd is not None:
                kw["groove_depth_mm"] = args.tgd
            if args.seed is not None or SEED_ENV in os.environ:
                kw["seed"] = resolve_seed(args.seed)
            spec = PhantomSpec(**kw)
        specs, names = [spec], [args.name]
    written = []
    for spec, name in zip(specs, names):
        paths = save_phantom(out_dir, spec, name)
        written.append({k: str(p) for k, p in paths.items()})
        _log_artifacts("output", paths.values())
    _emit(written if args.count else written[0])
    return 0


def _training_set(args, cfg: PipelineConfig):
    from .denoiser import TrainingSample
    from .masking import make_inpainting_mask
    from .phantom import generate_phantom, sample_specs

    spec = cfg.mask.build()
    samples = []
    if args.data:
        label_files = sorted(Path(args.data).glob("*_labels.vol"))
        if not label_files:
            raise ConfigError(f"no '*_labels.vol' files in {args.data}")
        for lf in label_files:
            img_path = lf.with_name(lf.name.replace("_labels.vol", ".vol"))
            img, labels = io.load_raw(img_path), io.load_raw(lf)
            m, _ = make_inpainting_mask(img, labels, spec)
            samples.append(TrainingSample(img, [m]))
        _log_artifacts("input", label_files)
    else:
        rng = np.random.default_rng(resolve_seed(args.seed, cfg.train.seed) + 1)
        for ps in sample_specs(args.phantoms, tuple(args.sa_range), rng):
            img, labels, _ = generate_phantom(ps)
            m, _ = make_inpainting_mask(img, labels, spec)
            samples.append(TrainingSample(img, [m]))
    return samples


def cmd_train(args) -> int:
    from .denoiser import DenoiserNet, train

    cfg = _config(args)
    cfg = cfg.override(
        {"train.iterations": args.iterations, "train.lambda_reg": args.lambda_reg, "train.learning_rate": args.lr}
    )
    seed = resolve_seed(args.seed, cfg.train.seed)
    log.info("seed %d", seed)
    data = _training_set(args, cfg)
    net = DenoiserNet(cfg.model.build(), seed=seed)
    result = train(net, data, cfg.train_config(seed), cfg.diffusion.build())
    net.save(args.checkpoint, iterations=cfg.train.iterations, seed=seed)
    if args.loss_trace:
        np.savetxt(args.loss_trace, result.losses, fmt="%.9g")
    _log_artifacts("output", [args.checkpoint, args.loss_trace] if args.loss_trace else [args.checkpoint])
    sm = result.smoothed(min(100, max(1, len(result.losses))))
    _emit(
        {
            "iterations": int(len(result.losses)),
            "initial_loss": float(result.losses[0]) if len(result.losses) else None,
            "final_smoothed_loss": float(sm[-1]) if len(sm) else None,
            "checkpoint": str(args.checkpoint),
        }
    )
    return 0


def _inpaint_one(job) -> str:
    from .denoiser import DenoiserNet
    from .diffusion import inpaint

    cfg, ckpt, inp, mask_path, out, seed, snapshot_dir = job
    net, _ = DenoiserNet.load(ckpt)
    v = io.load_raw(inp)
    m = io.load_mask(mask_path)
    d = cfg.diffusion
    res = inpaint(
        v,
        m,
        net,
        d.build(),
        np.random.default_rng(seed),
        clip_x0=tuple(d.clip_x0) if d.clip_x0 else None,
        snapshot_every=d.snapshot_every,
        snapshot_dir=snapshot_dir,
    )
    io.save_raw(out, res)
    return out


def _run_jobs(fn, jobs, n_jobs: int):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def _pair_up(inputs, masks, what="mask"):
    if len(masks) == 1:
        return list(zip(inputs, masks * len(inputs)))
    if len(masks) != len(inputs):
        raise ConfigError(f"need one {what} or one per input ({len(inputs)}), got {len(masks)}")
    return list(zip(inputs, masks))


def cmd_inpaint(args) -> int:
    cfg = _config(args)
    seed = resolve_seed(args.seed, cfg.train.seed)
    pairs = _pair_up(args.input, args.mask)
    if len(pairs) == 1 and args.out:
        outs = [args.out]
    elif args.out_dir:
        outs = [str(Path(args.out_dir) / Path(p).name) for p, _ in pairs]
    else:
        raise ConfigError("give --out for a single input or --out-dir for several")
    _log_artifacts("input", [args.checkpoint] + [p for pair in pairs for p in pair])
    jobs = []
    for i, ((inp, mp), out) in enumerate(zip(pairs, outs)):
        log.info("inpaint %s seed %d", inp, seed + i)
        snap = str(Path(args.snapshot_dir) / Path(inp).stem) if args.snapshot_dir else None
        jobs.append((cfg, args.checkpoint, inp, mp, out, seed + i, snap))
    done = _run_jobs(_inpaint_one, jobs, args.jobs)
    _log_artifacts("output", done)
    _emit({"outputs": done, "seeds": [seed + i for i in range(len(jobs))]})
    return 0


def cmd_measure(args) -> int:
    from .phantom import measure_sulcus_angle, patella_slice

    v = io.load_raw(args.input)
    _log_artifacts("input", [args.input])
    if args.slice is not None:
        slices = [args.slice]
    elif args.labels:
        slices = [patella_slice(io.load_raw(args.labels))]
    elif args.all_slices:
        slices = list(range(v.data.shape[0]))
    else:
        slices = [v.data.shape[0] // 2]
    res = [measure_sulcus_angle(v, z).to_dict() for z in slices]
    _emit(res[0] if len(res) == 1 else res)
    return 0


def _evaluate_one(job):
    from .metrics import evaluate

    pred, ref, mask, ssim_cfg = job
    return evaluate(io.load_raw(pred), io.load_raw(ref), io.load_mask(mask), name=str(pred), ssim_cfg=ssim_cfg)


def cmd_evaluate(args) -> int:
    from .metrics import aggregate, write_jsonl

    cfg = _config(args)
    if len(args.pred) != len(args.ref):
        raise ConfigError("--pred and --ref need the same number of files")
    masks = _pair_up(args.pred, args.mask)
    ssim_cfg = cfg.metrics.build()
    jobs = [(p, r, m, ssim_cfg) for (p, m), r in zip(masks, args.ref)]
    _log_artifacts("input", [f for j in jobs for f in j[:3]])
    reports = _run_jobs(_evaluate_one, jobs, args.jobs)
    if args.report:
        write_jsonl(args.report, reports)
        _log_artifacts("output", [args.report])
    _emit({"reports": [r.to_dict() for r in reports], "aggregate": aggregate(reports)})
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(seed=resolve_seed(args.seed))
    for name, ok, detail in results:
        sys.stdout.write(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}\n")
    failed = sum(not ok for _, ok, _ in results)
    sys.stdout.write(f"{len(results) - failed}/{len(results)} checks passed\n")
    return 0 if failed == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wdm-inpaint", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("preprocess", cmd_preprocess, "resample, crop/pad and normalise a volume")
    sp.add_argument("--config")
    sp.add_argument("--input", required=True, help=".vol (with .json sidecar) or .nii")
    sp.add_argument("--out", required=True)

    sp = add("mask", cmd_mask, "build the peri-patellar inpainting mask")
    sp.add_argument("--config")
    sp.add_argument("--input", required=True)
    sp.add_argument("--labels", help="bone label map (.vol, u8); fallback ellipsoid when absent")
    sp.add_argument("--cleaned", help="also remove the background and write the cleaned volume here")
    sp.add_argument("--out", required=True)

    sp = add("phantom", cmd_phantom, "generate synthetic knee phantoms")
    sp.add_argument("--sa", type=float, help="sulcus angle (deg)")
    sp.add_argument("--tgd", type=float, help="trochlear groove depth (mm)")
    sp.add_argument("--spec", help="phantom spec JSON")
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--count", type=int, default=0, help="generate this many random phantoms")
    sp.add_argument("--sa-range", type=float, nargs=2, default=(140.0, 148.0))
    sp.add_argument("--name", default="phantom")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("train", cmd_train, "train the denoiser")
    sp.add_argument("--config")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--data", help="directory of <name>.vol + <name>_labels.vol pairs")
    src.add_argument("--phantoms", type=int, default=50, help="generate this many healthy phantoms")
    sp.add_argument("--sa-range", type=float, nargs=2, default=(140.0, 148.0))
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lambda-reg", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--loss-trace", help="write per-iteration losses (text, one per line)")

    sp = add("inpaint", cmd_inpaint, "inpaint the masked region with a trained denoiser")
    sp.add_argument("--config")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--mask", nargs="+", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--out-dir")
    sp.add_argument("--snapshot-dir", help="dump x_t coefficients every diffusion.snapshot_every steps")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("measure", cmd_measure, "automated sulcus angle / groove depth")
    sp.add_argument("--input", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--slice", type=int)
    g.add_argument("--labels", help="measure on the slice with the largest patella cross-section")
    g.add_argument("--all-slices", action="store_true")

    sp = add("evaluate", cmd_evaluate, "masked MSE / PSNR / SSIM")
    sp.add_argument("--config")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--ref", nargs="+", required=True)
    sp.add_argument("--mask", nargs="+", required=True)
    sp.add_argument("--report", help="JSON-lines file, one report per volume")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("selftest", cmd_selftest, "run the built-in oracle checks")
    sp.add_argument("--seed", type=int)
    return p


_VALIDATION_ERRORS = (UsageError, ConfigError, io.VolumeFormatError, InconsistentGeometryError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:
        log.error("runtime failure: %s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
