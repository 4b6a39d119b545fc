"""Command-line surface: encode, decode, render, train, eval, gradcheck,
and the neighbor-query timing benchmark.

Every command is deterministic given its flags; --seed is the only entropy
source.  ROPCAC_THREADS caps BLAS parallelism and must be applied before
numpy initializes, hence the early environment block.
"""

import os

_threads = os.environ.get("ROPCAC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import glob
import sys
import time

import numpy as np

from . import autodiff as ad
from . import entropy as ent
from . import formats as fm
from . import pipeline as pl
from . import sparse as sp
from .render import (
    RasterSettings,
    auto_distance,
    composite_op,
    default_settings,
    make_camera,
    rasterize,
    recenter,
    render,
)

GRADCHECK_TOL = 1e-3
EVAL_CSV_COLUMNS = ("cloud", "lambda", "bpp", "psnr_y", "psnr_yuv611", "ms_ssim")


def load_cloud(path, resolution: int = fm.VOXEL_RESOLUTION) -> fm.VoxelCloud:
    """PLY to voxel cloud.  Integer-valued coordinates already on the grid
    pass through unchanged so encode/decode agree on geometry byte for byte;
    anything else is voxelized at the requested resolution."""
    points, colors_u8 = fm.read_ply(path)
    colors = fm.colors_from_u8(colors_u8)
    rounded = np.rint(points)
    integral = bool(np.abs(points - rounded).max(initial=0.0) < 1e-9)
    if integral and points.shape[0]:
        v = rounded.astype(np.int64)
        in_range = v.min() >= 0 and v.max() < fm.VOXEL_RESOLUTION
        unique = len(np.unique(v, axis=0)) == len(v)
        if in_range and unique:
            return fm.VoxelCloud(v.astype(np.int32), colors)
    return fm.voxelize(points, colors, resolution)


# ---------------------------------------------------------------------------
# subcommands


def cmd_encode(args) -> int:
    codec, _ = pl.Codec.load(args.model)
    cloud = load_cloud(args.input, args.resolution)
    bs, stats = pl.encode(cloud, codec, lam=args.lam)
    fm.write_bitstream(bs, args.output)
    total_bytes = os.path.getsize(args.output)
    rel = (stats["actual_bits"] - stats["estimated_bits"]) / max(
        stats["estimated_bits"], 1e-12)
    print(f"encoded {cloud.n_points} points to {args.output}: "
          f"{total_bytes} bytes, {stats['bpp']:.3f} bpp")
    print(f"estimated {stats['estimated_bits']:.1f} bits, "
          f"actual {stats['actual_bits']:.0f} bits ({rel:+.2%})")
    return 0


def cmd_decode(args) -> int:
    codec, _ = pl.Codec.load(args.model)
    geo = load_cloud(args.geometry, args.resolution)
    bs = fm.read_bitstream(args.bitstream)
    cloud = pl.decode(bs, geo.coords, codec)
    fm.write_ply(cloud.coords.astype(np.float64), cloud.colors, args.output,
                 binary=args.binary)
    print(f"decoded {cloud.n_points} points to {args.output}")
    return 0


def _parse_auto(text: str, what: str) -> float | None:
    if text == "auto":
        return None
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"--{what} must be a number or 'auto'")
    if v <= 0:
        raise ValueError(f"--{what} must be positive")
    return v


def cmd_render(args) -> int:
    points, colors_u8 = fm.read_ply(args.input)
    colors = fm.colors_from_u8(colors_u8)
    points = recenter(points)
    distance = _parse_auto(args.distance, "distance")
    if distance is None:
        distance = auto_distance(points, args.fov)
    cam = make_camera(distance, args.elevation, args.azimuth, args.fov,
                      args.width, args.height)
    radius = _parse_auto(args.radius, "radius")
    background = (1.0, 1.0, 1.0) if args.background == "white" else (0.0, 0.0, 0.0)
    if radius is None:
        settings = default_settings(args.width, args.height, background, args.k)
    else:
        settings = RasterSettings(radius=radius, k=args.k, background=background)
    img = render(points, colors, cam, settings)
    fm.write_image(img, args.output)
    print(f"rendered {len(points)} points to {args.output} "
          f"({args.width}x{args.height}, distance {distance:.3f})")
    return 0


def cmd_train(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.data, "*.ply")))
    if not paths:
        raise ValueError(f"no .ply files under {args.data!r}")
    clouds = [load_cloud(p, args.resolution) for p in paths]
    manifest = pl.RunManifest(
        seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        lam=args.lam, rig=args.rig, image_size=args.image_size,
        distortion=args.distortion, data=args.data, checkpoint=args.out)
    codec, history = pl.train(clouds, manifest, total_steps=args.steps,
                              log_every=args.log_every)
    print(f"trained {len(history)} steps on {len(clouds)} clouds: "
          f"J {history[0]:.2f} -> {history[-1]:.2f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ref = load_cloud(args.ref, args.resolution)
    recon = load_cloud(args.recon, args.resolution)
    views = pl.parse_rig(args.rig)
    scores = pl.compare_clouds(ref, recon, views, image_size=args.image_size)
    row = {
        "cloud": os.path.splitext(os.path.basename(args.ref))[0],
        "lambda": "" if args.lam is None else repr(args.lam),
        "bpp": "" if args.bpp is None else repr(args.bpp),
        "psnr_y": f"{scores['psnr_y']:.4f}",
        "psnr_yuv611": f"{scores['psnr_yuv611']:.4f}",
        "ms_ssim": f"{scores['ms_ssim']:.6f}",
    }
    write_header = not (os.path.exists(args.csv) and os.path.getsize(args.csv))
    with open(args.csv, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_CSV_COLUMNS)
        if write_header:
            writer.writeheader()
        writer.writerow(row)
    print(f"psnr_y {row['psnr_y']} dB, yuv611 {row['psnr_yuv611']} dB, "
          f"ms_ssim {row['ms_ssim']} -> {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck suites (32-bit forward vs 64-bit central differences)


def _grad_cloud(rng, n, span=10):
    coords = np.unique(rng.integers(0, span, size=(n * 2, 3)), axis=0)[:n]
    order = sp.lex_order(coords.astype(np.int32))
    return coords[order].astype(np.int32)


def _check_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    coords = _grad_cloud(rng, 60)
    pyr = sp.GeometryPyramid(coords, 0)
    plan = pyr.plan_same(0, 3)
    n = len(coords)
    store = ad.ParamStore()
    w = store.create("w", (rng.standard_normal((27, 3, 4)) * 0.2).astype(np.float32))
    b = store.create("b", (rng.standard_normal(4) * 0.1).astype(np.float32))
    x32 = ad.Param(rng.random((n, 3)).astype(np.float32))
    w64, b64 = ad.Node(w.value.astype(np.float64)), ad.Node(b.value.astype(np.float64))
    x64 = ad.Node(x32.value.astype(np.float64))

    def loss(weight, bias, xn):
        def f(tape):
            out = sp.conv_apply(tape, xn, weight, bias, plan, n)
            return ad.sum_all(tape, ad.mul(tape, out, out))
        return f

    return ad.finite_difference_check(
        loss(w, b, x32), {"w": w, "b": b, "x": x32}, rng=rng, max_probes=5,
        fd_eval=loss(w64, b64, x64), fd_wiggle={"w": w64, "b": b64, "x": x64})


def _check_attention(seed: int) -> float:
    from ropcac.attention import AttentionParams, MLP, create_attention_params, sp_trans_apply

    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(-2, 3, size=(16, 3)), axis=0)[:10]
    coords = coords.astype(np.int32)
    coords = coords[sp.lex_order(coords)]
    pairs = sp.window_pairs(coords, sp.VoxelHash(coords), 1, 5)
    store = ad.ParamStore()
    params = create_attention_params(store, "att", 4, rng, window=5)
    x32 = ad.Param(rng.normal(size=(len(coords), 4)).astype(np.float32))
    nodes = {name: ad.Node(p.value.astype(np.float64)) for name, p in store.items()}
    twin = AttentionParams(
        *(MLP(nodes[f"att.{proj}.w1"], nodes[f"att.{proj}.b1"],
              nodes[f"att.{proj}.w2"], nodes[f"att.{proj}.b2"])
          for proj in ("theta", "alpha", "lam", "delta")), 5)
    x64 = ad.Node(x32.value.astype(np.float64))

    def loss(p, xn):
        def f(tape):
            out = sp_trans_apply(tape, xn, p, pairs)
            return ad.sum_all(tape, ad.mul(tape, out, out))
        return f

    probes = ["att.theta.w1", "att.alpha.w2", "att.lam.w1", "att.delta.b1"]
    wiggle32 = {"x": x32, **{k: store[k] for k in probes}}
    wiggle64 = {"x": x64, **{k: nodes[k] for k in probes}}
    # small step keeps the central difference off the MLP ReLU kinks
    return ad.finite_difference_check(
        loss(params, x32), wiggle32, rng=rng, max_probes=5, h_scale=1e-4,
        fd_eval=loss(twin, x64), fd_wiggle=wiggle64)


def _check_gaussian(seed: int) -> float:
    rng = np.random.default_rng(seed)
    mu0 = rng.standard_normal((10, 4)) * 2
    sg0 = rng.uniform(0.3, 1.5, (10, 4))
    # stay within 4 sigma of the mean so no bin mass sits on the floor clip
    y0 = mu0 + sg0 * rng.uniform(-4.0, 4.0, (10, 4))
    y32, mu32, sg32 = (ad.Param(a.astype(np.float32)) for a in (y0, mu0, sg0))
    y64, mu64, sg64 = (ad.Node(a.copy()) for a in (y0, mu0, sg0))

    def loss(y, mu, sg):
        def f(tape):
            return ent.rate_bits(tape, ent.gaussian_mass(tape, y, mu, sg))
        return f

    return ad.finite_difference_check(
        loss(y32, mu32, sg32), {"y": y32, "mu": mu32, "sigma": sg32},
        rng=rng, max_probes=6,
        fd_eval=loss(y64, mu64, sg64), fd_wiggle={"y": y64, "mu": mu64, "sigma": sg64})


def _check_factorized(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    model = ent.FactorizedModel.create(store, "f", 4, rng)
    twin = model.mirror(np.float64)
    z32 = ad.Param((rng.standard_normal((8, 4)) * 4).astype(np.float32))
    z64 = ad.Node(z32.value.astype(np.float64))

    def loss(m, z):
        def f(tape):
            return ent.rate_bits(tape, ent.factorized_mass(tape, z, m))
        return f

    names = ["f.h1", "f.b1", "f.a1", "f.h2", "f.b3"]
    wiggle32 = {"z": z32, **{k: store[k] for k in names}}
    wiggle64 = {"z": z64}
    for k in names:
        wiggle64[k] = getattr(twin, k.split(".", 1)[1])
    return ad.finite_difference_check(
        loss(model, z32), wiggle32, rng=rng, max_probes=6,
        fd_eval=loss(twin, z64), fd_wiggle=wiggle64)


def _check_composite(seed: int) -> float:
    rng = np.random.default_rng(seed)
    points = rng.uniform(-1, 1, (40, 3))
    cam = make_camera(3.0, 15.0, 30.0, 60.0, 12, 12)
    settings = default_settings(12, 12)
    frags = rasterize(points, cam, settings)
    c32 = ad.Param(rng.random((40, 3)).astype(np.float32))
    c64 = ad.Node(c32.value.astype(np.float64))

    def loss(colors):
        def f(tape):
            img = composite_op(tape, frags, colors, settings)
            return ad.sum_all(tape, ad.mul(tape, img, img))
        return f

    return ad.finite_difference_check(
        loss(c32), {"colors": c32}, rng=rng, max_probes=5,
        fd_eval=loss(c64), fd_wiggle={"colors": c64})


def _check_loss(seed: int) -> float:
    from ropcac.network import CodecConfig

    rng = np.random.default_rng(seed)
    cfg = CodecConfig(attr_channels=3, width_a=3, width_b=4, latent=4, hyper=3,
                      stages=2, sp_trans=1, window=3)
    coords = _grad_cloud(rng, 50, span=8)
    colors = rng.random((len(coords), 3))
    cloud = fm.VoxelCloud(coords, colors)
    codec = pl.Codec(cfg, seed=seed)
    twin = codec.mirror(np.float64)
    pyr = sp.GeometryPyramid(cloud.coords, cfg.hyper_level)
    counts = pyr.counts()
    noise_y = rng.uniform(-0.5, 0.5, (counts[2], cfg.latent)).astype(np.float32)
    noise_z = rng.uniform(-0.5, 0.5, (counts[3], cfg.hyper)).astype(np.float32)
    size = 12
    cams = [make_camera(2.5, 20.0, az, 60.0, size, size) for az in (0.0, 120.0)]
    settings = default_settings(size, size)
    points = recenter(cloud.coords.astype(np.float64))
    frags = [rasterize(points, c, settings) for c in cams]
    gts = [render(points, cloud.colors, c, settings) for c in cams]
    loss_cfg = pl.LossConfig(50.0, cams, settings)
    x32 = ad.Param(cloud.colors.astype(np.float32))
    x64 = ad.Node(cloud.colors.astype(np.float64))

    def make_loss(like, xn):
        def f(tape):
            y = like.model.analysis(tape, pyr, xn)
            z = like.model.hyper_encoder(tape, pyr, y)
            z_hat = ad.add(tape, z, noise_z)
            mu, sigma = like.model.hyper_decoder(tape, pyr, z_hat)
            y_hat = ad.add(tape, y, noise_y)
            r_y = ent.rate_bits(tape, ent.gaussian_mass(tape, y_hat, mu, sigma))
            r_z = ent.rate_bits(tape, ent.factorized_mass(tape, z_hat, like.factorized))
            recon = like.model.synthesis(tape, pyr, y_hat, clamp=False)
            views = [composite_op(tape, fr, recon, settings) for fr in frags]
            return pl.rd_loss(tape, r_y, r_z, gts, views, loss_cfg)
        return f

    probes = ["ana.conv0.w", "syn.out.w", "hyp.dec_out.w", "fz.h1"]
    wiggle32 = {"x": x32, **{k: codec.store[k] for k in probes}}
    wiggle64 = {"x": x64, **{k: twin.mirror_nodes[k] for k in probes}}
    return ad.finite_difference_check(
        make_loss(codec, x32), wiggle32, rng=rng, max_probes=4, h_scale=1e-5,
        fd_eval=make_loss(twin, x64), fd_wiggle=wiggle64)


GRADCHECK_SUITES = {
    "conv": _check_conv,
    "attention": _check_attention,
    "gaussian": _check_gaussian,
    "factorized": _check_factorized,
    "composite": _check_composite,
    "loss": _check_loss,
}


def cmd_gradcheck(args) -> int:
    names = list(GRADCHECK_SUITES) if args.module == "all" else [args.module]
    failed = False
    for name in names:
        worst = 0.0
        for s in range(args.seeds):
            worst = max(worst, GRADCHECK_SUITES[name](args.seed + s))
        ok = worst <= GRADCHECK_TOL
        failed |= not ok
        print(f"gradcheck {name}: worst rel err {worst:.3e} "
              f"(tol {GRADCHECK_TOL:.0e}) {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# neighbor benchmark


def bench_cloud(rng, n: int) -> np.ndarray:
    """~1/8 occupancy at every size, so density stays fixed as N grows."""
    span = max(2, round((8 * n) ** (1.0 / 3.0)))
    coords = rng.integers(0, span, size=(3 * n, 3))
    coords = np.unique(coords, axis=0)
    while len(coords) < n:
        extra = rng.integers(0, span, size=(n, 3))
        coords = np.unique(np.concatenate([coords, extra]), axis=0)
    sel = rng.choice(len(coords), size=n, replace=False)
    coords = coords[np.sort(sel)].astype(np.int32)
    return coords[sp.lex_order(coords)]


def time_neighbors(coords: np.ndarray, window: int = 5, repeats: int = 3) -> float:
    """Best wall time for the full batched neighbor query (hash + lookups)."""
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        index = sp.VoxelHash(coords)
        sp.window_pairs(coords, index, 1, window)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench_neighbors(args) -> int:
    sizes = [int(v) for v in args.n.split(",") if v.strip()]
    if not sizes:
        raise ValueError("--n must list at least one size")
    rng = np.random.default_rng(args.seed)
    print("n,seconds")
    prev = None
    for n in sizes:
        coords = bench_cloud(rng, n)
        t = time_neighbors(coords, window=args.window, repeats=args.repeats)
        line = f"{n},{t:.6f}"
        if prev is not None:
            line += f"  # x{t / prev:.2f} for x{n / prev_n:.0f} points"
        print(line)
        prev, prev_n = t, n
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ropcac",
        description="rendering-oriented point cloud attribute codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a cloud's colors")
    p.add_argument("--input", required=True, help="input PLY")
    p.add_argument("--model", required=True, help="codec checkpoint (.ropw)")
    p.add_argument("--output", required=True, help="output bitstream (.roc)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="rate-distortion weight recorded in the stream header")
    p.add_argument("--resolution", type=int, default=fm.VOXEL_RESOLUTION)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct colors onto known geometry")
    p.add_argument("--geometry", required=True, help="geometry PLY")
    p.add_argument("--bitstream", required=True, help="input bitstream (.roc)")
    p.add_argument("--model", required=True, help="codec checkpoint (.ropw)")
    p.add_argument("--output", required=True, help="output PLY")
    p.add_argument("--binary", action="store_true", help="write binary PLY")
    p.add_argument("--resolution", type=int, default=fm.VOXEL_RESOLUTION)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render a cloud to a PPM image")
    p.add_argument("--input", required=True, help="input PLY")
    p.add_argument("--azimuth", type=float, required=True, help="degrees")
    p.add_argument("--elevation", type=float, required=True, help="degrees")
    p.add_argument("--distance", default="auto",
                   help="camera distance or 'auto' for the bounding-sphere fit")
    p.add_argument("--fov", type=float, default=60.0, help="vertical fov, degrees")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--radius", default="auto", help="splat radius in NDC or 'auto'")
    p.add_argument("--k", type=int, default=10, help="fragments kept per pixel")
    p.add_argument("--background", choices=("white", "black"), default="white")
    p.add_argument("--output", required=True, help="output PPM")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="fit the codec on a directory of clouds")
    p.add_argument("--data", required=True, help="directory of .ply files")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (.ropw)")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--rig", default=pl.DEFAULT_TRAIN_RIG)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--distortion", choices=("mse", "ms_ssim"), default="mse")
    p.add_argument("--steps", type=int, default=None,
                   help="stop after this many steps regardless of epochs")
    p.add_argument("--resolution", type=int, default=fm.VOXEL_RESOLUTION)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare two clouds over a view rig")
    p.add_argument("--ref", required=True, help="reference PLY")
    p.add_argument("--recon", required=True, help="reconstruction PLY")
    p.add_argument("--rig", default=pl.DEFAULT_TEST_RIG,
                   help="view layout 'elev:az,az,...;elev:...'")
    p.add_argument("--csv", required=True, help="append one row here")
    p.add_argument("--image-size", type=int, default=pl.DEFAULT_EVAL_SIZE)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="recorded in the CSV row")
    p.add_argument("--bpp", type=float, default=None, help="recorded in the CSV row")
    p.add_argument("--resolution", type=int, default=fm.VOXEL_RESOLUTION)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", choices=("all",) + tuple(GRADCHECK_SUITES),
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3, help="seeds per suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-neighbors", help="neighbor query timing CSV")
    p.add_argument("--n", required=True, help="comma-separated point counts")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_neighbors)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
