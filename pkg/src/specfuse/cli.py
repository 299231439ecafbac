"""Command-line front end.

Verbs: synth, degrade, fuse, eval, gradcheck, sweep. Options come from
defaults, then an optional flat `key = value` config file, then explicit
flags (highest precedence). SPECFUSE_SEED is the seed fallback.

Exit codes: 0 success, 1 check failure, 2 input/contract error,
3 numerical abort.
"""

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import hsicube, mdnnet, qmetrics, trainer
from .errors import ParseError, SpecfuseError, TrainingAbort
from .numgrad import grad_check

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ABORT = 3


@dataclass
class RunConfig:
    seed: int = 0
    # scene
    width: int = 64
    height: int = 64
    bands: int = 31
    endmembers: int = 4
    blur_radius: int = 2
    # degradation
    sr: int = 32
    rotate_deg: float = 0.0
    crop_frac: float = 0.0
    msi_bands: int = 3
    srf_path: str = ""
    interpolation: str = "bilinear"
    # training
    lambda_mi: float = 1e-5
    mu_decay: float = 1e-4
    learning_rate: float = 1e-3
    max_steps: int = 20000
    patience: int = 200
    l21_epsilon: float = 1e-8
    stick_mode: str = "paper"
    kumaraswamy_mode: str = "standard"
    optimizer: str = "adam"
    batch_pixels: int = 0

    def train_config(self):
        return trainer.TrainConfig(
            lambda_mi=self.lambda_mi,
            mu_decay=self.mu_decay,
            learning_rate=self.learning_rate,
            max_steps=self.max_steps,
            patience=self.patience,
            l21_epsilon=self.l21_epsilon,
            seed=self.seed,
            stick_mode=self.stick_mode,
            kumaraswamy_mode=self.kumaraswamy_mode,
            optimizer=self.optimizer,
            batch_pixels=self.batch_pixels,
        )


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text):
    """Parse flat `key = value` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_TYPES:
            raise ParseError(f"line {lineno}: unknown key '{key}'")
        typ = _CONFIG_TYPES[key]
        try:
            out[key] = typ(value)
        except ValueError:
            raise ParseError(
                f"line {lineno}: cannot parse '{value}' as {typ.__name__} for key '{key}'"
            ) from None
    return out


def dump_config(config):
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(RunConfig))


def build_config(args):
    """defaults < config file < explicit CLI flags; SPECFUSE_SEED fallback."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            values.update(parse_config_text(f.read()))
    for f in fields(RunConfig):
        cli_val = getattr(args, f.name, None)
        if cli_val is not None:
            values[f.name] = cli_val
    if "seed" not in values and os.environ.get("SPECFUSE_SEED"):
        values["seed"] = int(os.environ["SPECFUSE_SEED"])
    return RunConfig(**values)


def _add_config_options(p, names):
    p.add_argument("--config", help="flat key = value config file")
    for name in names:
        typ = _CONFIG_TYPES[name]
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


_SCENE_KEYS = ["seed", "width", "height", "bands", "endmembers", "blur_radius"]
_DEGRADE_KEYS = ["sr", "rotate_deg", "crop_frac", "msi_bands", "srf_path", "interpolation"]
_TRAIN_KEYS = [
    "seed", "lambda_mi", "mu_decay", "learning_rate", "max_steps", "patience",
    "l21_epsilon", "stick_mode", "kumaraswamy_mode", "optimizer", "batch_pixels",
]


def _resolve_srf(config, hsi_bands):
    if config.srf_path:
        if not os.path.exists(config.srf_path):
            raise ParseError(f"spectral response file not found: {config.srf_path}")
        return hsicube.load_srf(config.srf_path)
    return hsicube.make_gaussian_srf(hsi_bands, config.msi_bands)


def cmd_synth(args):
    config = build_config(args)
    if config.width <= 0 or config.height <= 0:
        raise ParseError(f"scene dims must be positive, got {config.width}x{config.height}")
    D = hsicube.make_endmembers(config.endmembers, config.bands, seed=config.seed)
    spec = hsicube.SceneSpec(
        width=config.width,
        height=config.height,
        endmembers=D,
        blur_radius=config.blur_radius,
        seed=config.seed,
    )
    cube, abund = hsicube.synth_scene(spec)
    hsicube.store_cube(cube, args.out)
    if args.abundance_out:
        hsicube.store_cube(hsicube.fold(abund), args.abundance_out)
    print(f"synth: {cube.width}x{cube.height}x{cube.bands} seed={config.seed} -> {args.out}")
    return EXIT_OK


def cmd_degrade(args):
    config = build_config(args)
    truth = hsicube.load_cube(args.truth)
    srf = _resolve_srf(config, truth.bands)
    lr = hsicube.block_downsample(truth, config.sr)
    if config.rotate_deg != 0 or config.crop_frac != 0:
        lr = hsicube.rotate_crop(
            lr, config.rotate_deg, config.crop_frac, config.interpolation
        )
    msi = hsicube.fold(hsicube.apply_srf(hsicube.unfold(truth), srf))
    hsicube.store_cube(lr, args.lr_out)
    hsicube.store_cube(msi, args.msi_out)
    if args.srf_out:
        hsicube.store_srf(srf, args.srf_out)
    print(
        f"degrade: LR {lr.width}x{lr.height}x{lr.bands} -> {args.lr_out}; "
        f"MSI {msi.width}x{msi.height}x{msi.bands} -> {args.msi_out}"
    )
    return EXIT_OK


def cmd_fuse(args):
    config = build_config(args)
    y_h = hsicube.load_cube(args.lr)
    y_m = hsicube.load_cube(args.msi)
    if not os.path.exists(args.srf):
        raise ParseError(f"spectral response file not found: {args.srf}")
    srf = hsicube.load_srf(args.srf)
    model, trace = trainer.train(y_h, y_m, srf, config.train_config())
    cm = hsicube.unfold(y_m).values - model.msi_mean
    fused = mdnnet.fuse(cm, model) + model.hsi_mean
    cube = hsicube.fold(hsicube.PixelMatrix(fused, y_m.width, y_m.height))
    hsicube.store_cube(cube, args.out)
    mdnnet.save_checkpoint(model, args.checkpoint)
    trace.to_csv(args.trace)
    print(
        f"fuse: {len(trace.records)} iterations, stop={trace.stop_reason}, "
        f"output {cube.width}x{cube.height}x{cube.bands} -> {args.out}"
    )
    return EXIT_OK


def _write_pgm(path, plane):
    lo, hi = plane.min(), plane.max()
    scale = hi - lo
    scaled = np.zeros_like(plane) if scale == 0 else (plane - lo) / scale
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode())
        f.write(pixels.tobytes())
    return lo, hi


def cmd_eval(args):
    truth = hsicube.load_cube(args.truth)
    fused = hsicube.load_cube(args.fused)
    report = qmetrics.evaluate(truth, fused, args.sr)
    with open(args.report_out, "w") as f:
        f.write("ergas,psnr_mean,sam_global\n")
        f.write(report.csv_row() + "\n")
    if args.per_band_psnr_out:
        with open(args.per_band_psnr_out, "w") as f:
            f.write("band,psnr\n")
            for i, v in enumerate(report.psnr_per_band):
                f.write(f"{i},{v:.9g}\n")
    if args.sam_map_out:
        sam_map = np.nan_to_num(report.sam_per_pixel)[None, :, :]
        cube = hsicube.HyperCube(truth.width, truth.height, 1, sam_map)
        hsicube.store_cube(cube, args.sam_map_out)
    if args.diff_dir:
        os.makedirs(args.diff_dir, exist_ok=True)
        with open(os.path.join(args.diff_dir, "scales.txt"), "w") as sidecar:
            for b in range(truth.bands):
                diff = np.abs(truth.data[b] - fused.data[b])
                lo, hi = _write_pgm(os.path.join(args.diff_dir, f"band{b:03d}.pgm"), diff)
                sidecar.write(f"band{b:03d}.pgm min={lo:.9g} max={hi:.9g}\n")
    print(report.csv_row())
    return EXIT_OK


def cmd_gradcheck(args):
    config = build_config(args)
    worst_overall = 0.0
    for stick_mode in mdnnet.STICK_MODES:
        for kmode in mdnnet.KUMARASWAMY_MODES:
            fn, params = trainer.build_gradcheck_problem(
                seed=config.seed,
                stick_mode=stick_mode,
                kumaraswamy_mode=kmode,
                corrupt=args.corrupt_analytic,
            )
            blocks = {}
            worst = grad_check(fn, params, step=1e-5, per_block_errors=blocks)
            worst_overall = max(worst_overall, worst)
            print(f"modes=({stick_mode},{kmode}) max rel err = {worst:.3e}")
            for name in sorted(blocks, key=blocks.get, reverse=True)[:5]:
                print(f"  {name}: {blocks[name]:.3e}")
    ok = worst_overall < 1e-4
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max rel err {worst_overall:.3e}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


LAMBDA_SETTINGS = (0.0, 1e-6, 1e-5, 1e-4)
ROTATION_SETTINGS = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


def cmd_sweep(args):
    config = build_config(args)
    truth = hsicube.load_cube(args.truth)
    srf = _resolve_srf(config, truth.bands)
    settings = LAMBDA_SETTINGS if args.kind == "lambda" else ROTATION_SETTINGS
    rows = []
    for idx, setting in enumerate(settings):
        run = RunConfig(**{f.name: getattr(config, f.name) for f in fields(RunConfig)})
        run.seed = config.seed + idx
        if args.kind == "lambda":
            run.lambda_mi = setting
        else:
            run.rotate_deg = setting
            run.crop_frac = max(
                config.crop_frac, hsicube.min_crop_fraction(setting)
            )
        try:
            lr = hsicube.block_downsample(truth, run.sr)
            if run.rotate_deg != 0 or run.crop_frac != 0:
                lr = hsicube.rotate_crop(lr, run.rotate_deg, run.crop_frac, run.interpolation)
            msi = hsicube.fold(hsicube.apply_srf(hsicube.unfold(truth), srf))
            model, _ = trainer.train(lr, msi, srf, run.train_config())
            cm = hsicube.unfold(msi).values - model.msi_mean
            fused = mdnnet.fuse(cm, model) + model.hsi_mean
            cube = hsicube.fold(hsicube.PixelMatrix(fused, msi.width, msi.height))
            report = qmetrics.evaluate(truth, cube, run.sr)
            rows.append((setting, report.sam_global, report.psnr_mean, report.ergas, "ok"))
        except SpecfuseError as exc:
            rows.append((setting, float("nan"), float("nan"), float("nan"), f"failed: {exc}"))
    with open(args.out, "w") as f:
        f.write("setting,sam,psnr,ergas,status\n")
        for setting, s, p, e, status in rows:
            f.write(f"{setting:.9g},{s:.9g},{p:.9g},{e:.9g},{status}\n")
    print(f"sweep {args.kind}: {len(rows)} settings -> {args.out}")
    return EXIT_OK


def make_parser():
    parser = argparse.ArgumentParser(
        prog="specfuse",
        description="Registration-free hyperspectral/multispectral fusion toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic linear-mixing scene")
    _add_config_options(p, _SCENE_KEYS)
    p.add_argument("--out", required=True)
    p.add_argument("--abundance-out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="derive the LR HSI / HR MSI pair")
    _add_config_options(p, _DEGRADE_KEYS)
    p.add_argument("--truth", required=True)
    p.add_argument("--lr-out", required=True)
    p.add_argument("--msi-out", required=True)
    p.add_argument("--srf-out", default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("fuse", help="train and emit the fused HR HSI")
    _add_config_options(p, _TRAIN_KEYS)
    p.add_argument("--lr", required=True)
    p.add_argument("--msi", required=True)
    p.add_argument("--srf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="compute metrics against the truth cube")
    p.add_argument("--truth", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--sr", type=int, required=True)
    p.add_argument("--report-out", required=True)
    p.add_argument("--per-band-psnr-out", default=None)
    p.add_argument("--sam-map-out", default=None)
    p.add_argument("--diff-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    _add_config_options(p, ["seed"])
    p.add_argument("--corrupt-analytic", action="store_true",
                   help="self-test hook: corrupt one backward rule")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="lambda or rotation sweep with metrics CSV")
    _add_config_options(p, sorted(set(_TRAIN_KEYS + _DEGRADE_KEYS)))
    p.add_argument("--kind", choices=("lambda", "rotation"), required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"error: {exc} (last record: {exc.last_record})", file=sys.stderr)
        return EXIT_NUMERICAL_ABORT
    except (SpecfuseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
