"""End-to-end codec: rate-distortion loss, encode/decode against the range
coder, the training loop, multiview rigs, and cloud-vs-cloud evaluation.

Geometry travels out of band.  Both codec ends rebuild the identical
coordinate pyramid from it, so the bitstream only carries the two latent
streams (hyper z first, then y under the Gaussian tables z parameterizes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import entropy as ent
from . import rangecoder as rc
from .autodiff import Tape, value_of
from .formats import Bitstream, VoxelCloud, geometry_hash
from .network import CodecConfig, CodecModel
from .render import (
    CameraParams,
    RasterSettings,
    auto_distance,
    composite_op,
    default_settings,
    make_camera,
    rasterize,
    recenter,
    render,
)
from .sparse import GeometryPyramid, SparseTensor, lex_order

LAMBDA_MENU = (25000.0, 4000.0, 800.0, 250.0, 85.0)
CUSTOM_LAMBDA_ID = 255
PATCH_BLOCK = 128
FACTORIZED_PREFIX = "fz"

# latent symbol windows: y uses 255 bins centered on round(mu), z a fixed
# symmetric window; values outside go through the escape symbol as raw bits
Y_BINS = 255
Y_HALF = (Y_BINS - 1) // 2
Z_BOUND = 127
Z_BINS = 2 * Z_BOUND + 1
ESCAPE_MASS_FLOOR = 1e-6
RAW_BOUND = 2 ** 31 - 1

DEFAULT_TRAIN_RIG = "0:0,60,120,180,240,300;90:0;270:0"
DEFAULT_TEST_RIG = "0:30,90,150,210,270,330"
DEFAULT_EVAL_SIZE = 384
DEFAULT_FOV_DEG = 60.0


class Codec:
    """Transforms plus the factorized hyper prior, sharing one ParamStore."""

    def __init__(self, config: CodecConfig | None = None, seed: int = 0):
        self.model = CodecModel(config, seed=seed)
        self.config = self.model.config
        self.store = self.model.store
        self.factorized = ent.FactorizedModel.create(
            self.store, FACTORIZED_PREFIX, self.config.hyper,
            np.random.default_rng(seed + 1),
        )

    def mirror(self, dtype=np.float64) -> "Codec":
        twin = object.__new__(Codec)
        twin.config = self.config
        twin.store = None
        twin.model = self.model.mirror(dtype)
        twin.factorized = self.factorized.mirror(dtype)
        nodes = dict(twin.model.mirror_nodes)
        for name in ("h1", "b1", "a1", "h2", "b2", "a2", "h3", "b3"):
            nodes[f"{FACTORIZED_PREFIX}.{name}"] = getattr(twin.factorized, name)
        twin.mirror_nodes = nodes
        return twin

    def save(self, path, extra_header: dict[str, str] | None = None) -> None:
        header = self.config.to_header()
        header.update(extra_header or {})
        ad.save_checkpoint(path, self.store, header)

    @classmethod
    def load(cls, path) -> tuple["Codec", dict[str, str]]:
        header, tensors = ad.load_checkpoint(path)
        codec = cls(CodecConfig.from_header(header))
        codec.store.load_arrays(tensors)
        return codec, header


def lambda_id(lam: float) -> int:
    for i, v in enumerate(LAMBDA_MENU):
        if lam == v:
            return i
    return CUSTOM_LAMBDA_ID


def lambda_from_id(lam_id: int) -> float | None:
    if 0 <= lam_id < len(LAMBDA_MENU):
        return LAMBDA_MENU[lam_id]
    return None


# ---------------------------------------------------------------------------
# view rigs


def parse_rig(rig: str) -> list[tuple[float, float]]:
    """'elev:az,az,...' groups joined by ';' -> list of (elevation, azimuth)."""
    views = []
    for group in rig.split(";"):
        group = group.strip()
        if not group:
            continue
        head, sep, tail = group.partition(":")
        if not sep:
            raise ValueError(f"rig group {group!r} lacks 'elev:azimuths'")
        try:
            elev = float(head)
            azims = [float(a) for a in tail.split(",") if a.strip() != ""]
        except ValueError:
            raise ValueError(f"rig group {group!r} is not numeric")
        if not azims:
            raise ValueError(f"rig group {group!r} lists no azimuths")
        views.extend((elev, az) for az in azims)
    if not views:
        raise ValueError(f"rig string {rig!r} contains no views")
    return views


def rig_cameras(
    views,
    points: np.ndarray,
    image_size: int,
    fov_deg: float = DEFAULT_FOV_DEG,
    distance: float | None = None,
) -> list[CameraParams]:
    if distance is None:
        distance = auto_distance(points, fov_deg)
    return [
        make_camera(distance, elev, az, fov_deg, image_size, image_size)
        for elev, az in views
    ]


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossConfig:
    lam: float
    cameras: list
    settings: RasterSettings
    distortion: str = "mse"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not self.cameras:
            raise ValueError("view rig must be non-empty")
        if self.distortion not in ("mse", "ms_ssim"):
            raise ValueError(f"unknown distortion kind {self.distortion!r}")


def rd_loss(tape, r_y, r_z, gt_images, recon_images, cfg: LossConfig):
    """J = R_y + R_z + lambda * mean distortion over views and pixels."""
    if len(gt_images) != len(recon_images):
        raise ValueError(
            f"{len(gt_images)} ground-truth views vs {len(recon_images)} renders"
        )
    if len(gt_images) != len(cfg.cameras):
        raise ValueError("image sets do not match the rig size")
    dist = None
    for gt, im in zip(gt_images, recon_images):
        if cfg.distortion == "mse":
            e = ad.sub(tape, im, np.asarray(gt))
            d = ad.mean_all(tape, ad.mul(tape, e, e))
        else:
            from .metrics import ms_ssim_op

            d = ad.sadd(tape, ad.smul(tape, ms_ssim_op(tape, im, np.asarray(gt)), -1.0), 1.0)
        dist = d if dist is None else ad.add(tape, dist, d)
    dist = ad.smul(tape, dist, 1.0 / len(gt_images))
    rate = ad.add(tape, r_y, r_z)
    return ad.add(tape, rate, ad.smul(tape, dist, cfg.lam))


# ---------------------------------------------------------------------------
# scenes (cached per-cloud state for training and evaluation)


def canonical_cloud(cloud: VoxelCloud) -> VoxelCloud:
    order = lex_order(cloud.coords)
    if np.array_equal(order, np.arange(len(order))):
        return cloud
    return VoxelCloud(cloud.coords[order], cloud.colors[order])


@dataclass
class Scene:
    cloud: VoxelCloud
    tensor: SparseTensor
    pyr: GeometryPyramid
    points: np.ndarray
    cameras: list
    settings: RasterSettings
    frags: list
    gt_images: list


def build_scene(
    cloud: VoxelCloud,
    views,
    image_size: int,
    codec_config: CodecConfig,
    fov_deg: float = DEFAULT_FOV_DEG,
    settings: RasterSettings | None = None,
) -> Scene:
    cloud = canonical_cloud(cloud)
    if cloud.n_points == 0:
        raise ValueError("cannot build a scene from an empty cloud")
    feats = cloud.colors.astype(np.float32)
    tensor = SparseTensor(cloud.coords, feats, 1, presorted=True)
    pyr = GeometryPyramid(cloud.coords, codec_config.hyper_level)
    points = recenter(cloud.coords.astype(np.float64))
    cameras = rig_cameras(views, points, image_size, fov_deg)
    if settings is None:
        settings = default_settings(image_size, image_size)
    frags = [rasterize(points, cam, settings) for cam in cameras]
    gt_images = [
        np.asarray(renderered)
        for renderered in (render(points, cloud.colors, cam, settings) for cam in cameras)
    ]
    return Scene(cloud, tensor, pyr, points, cameras, settings, frags, gt_images)


def scene_forward(tape, codec: Codec, scene: Scene, cfg: LossConfig,
                  rng: np.random.Generator):
    """Training forward pass with noise quantization; returns (J, stats)."""
    y = codec.model.analysis(tape, scene.pyr, scene.tensor.feats)
    z = codec.model.hyper_encoder(tape, scene.pyr, y)
    z_hat = ent.quantize_noise(tape, z, rng)
    mu, sigma = codec.model.hyper_decoder(tape, scene.pyr, z_hat)
    y_hat = ent.quantize_noise(tape, y, rng)
    r_y = ent.rate_bits(tape, ent.gaussian_mass(tape, y_hat, mu, sigma))
    r_z = ent.rate_bits(tape, ent.factorized_mass(tape, z_hat, codec.factorized))
    recon = codec.model.synthesis(tape, scene.pyr, y_hat, clamp=False)
    recon_views = [
        composite_op(tape, fr, recon, scene.settings) for fr in scene.frags
    ]
    loss = rd_loss(tape, r_y, r_z, scene.gt_images, recon_views, cfg)
    stats = {
        "bits_y": float(value_of(r_y)),
        "bits_z": float(value_of(r_z)),
        "j": float(value_of(loss)),
    }
    return loss, stats


# ---------------------------------------------------------------------------
# entropy coding of the latent tensors


def _zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v) << 1) - 1


def _unzigzag(u: int) -> int:
    return (u >> 1) if (u & 1) == 0 else -((u + 1) >> 1)


def _with_escape(masses: np.ndarray) -> np.ndarray:
    """Append the leftover tail mass as the escape symbol's bin."""
    esc = np.maximum(1.0 - masses.sum(axis=-1, keepdims=True), ESCAPE_MASS_FLOOR)
    return np.concatenate([masses, esc], axis=-1)


def _z_tables(codec: Codec) -> list[rc.CdfTable]:
    masses = _with_escape(ent.factorized_bin_masses(codec.factorized, -Z_BOUND, Z_BOUND))
    return [rc.quantize_cdf(masses[c], escape=Z_BINS) for c in range(masses.shape[0])]


def _encode_z(enc: rc.RangeEncoder, z_hat: np.ndarray, tables) -> None:
    rows, channels = z_hat.shape
    for i in range(rows):
        for c in range(channels):
            v = int(z_hat[i, c])
            if -Z_BOUND <= v <= Z_BOUND:
                enc.encode_symbol(tables[c], v + Z_BOUND)
            else:
                enc.encode_symbol(tables[c], Z_BINS)
                enc.encode_raw_u32(_zigzag(_clamp_raw(v)))


def _decode_z(dec: rc.RangeDecoder, rows: int, tables) -> np.ndarray:
    channels = len(tables)
    out = np.empty((rows, channels), dtype=np.int64)
    for i in range(rows):
        for c in range(channels):
            sym = dec.decode_symbol(tables[c])
            if sym == Z_BINS:
                out[i, c] = _unzigzag(dec.decode_raw_u32())
            else:
                out[i, c] = sym - Z_BOUND
    return out


def _clamp_raw(v: int) -> int:
    return max(-RAW_BOUND, min(RAW_BOUND, v))


def _y_bases(mu: np.ndarray) -> np.ndarray:
    return ent.quantize(np.asarray(mu, dtype=np.float64).reshape(-1), "eval").astype(
        np.int64
    ) - Y_HALF


_Y_CHUNK = 4096


def _y_table_chunks(mu: np.ndarray, sigma: np.ndarray):
    """Yield (start, bases, list-of-CdfTable) blocks for the flat y elements."""
    mu_flat = np.asarray(mu, dtype=np.float64).reshape(-1)
    sg_flat = np.asarray(sigma, dtype=np.float64).reshape(-1)
    bases = _y_bases(mu_flat)
    for start in range(0, mu_flat.size, _Y_CHUNK):
        end = min(start + _Y_CHUNK, mu_flat.size)
        masses = _with_escape(
            ent.gaussian_bin_masses(mu_flat[start:end], sg_flat[start:end],
                                    bases[start:end], Y_BINS)
        )
        counts = rc.quantize_cdf_rows(masses)
        tables = [rc.CdfTable(counts[i], escape=Y_BINS) for i in range(end - start)]
        yield start, bases[start:end], tables


def _encode_y(enc: rc.RangeEncoder, y_hat: np.ndarray, mu, sigma) -> None:
    flat = y_hat.reshape(-1)
    for start, bases, tables in _y_table_chunks(mu, sigma):
        for k, table in enumerate(tables):
            v = int(flat[start + k])
            off = v - int(bases[k])
            if 0 <= off < Y_BINS:
                enc.encode_symbol(table, off)
            else:
                enc.encode_symbol(table, Y_BINS)
                enc.encode_raw_u32(_zigzag(_clamp_raw(v)))


def _decode_y(dec: rc.RangeDecoder, shape, mu, sigma) -> np.ndarray:
    out = np.empty(int(np.prod(shape)), dtype=np.int64)
    for start, bases, tables in _y_table_chunks(mu, sigma):
        for k, table in enumerate(tables):
            sym = dec.decode_symbol(table)
            if sym == Y_BINS:
                out[start + k] = _unzigzag(dec.decode_raw_u32())
            else:
                out[start + k] = sym + int(bases[k])
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# encode / decode


def encode(cloud: VoxelCloud, codec: Codec, lam: float | None = None):
    """Compress colors; returns (Bitstream, stats with estimated/actual bits)."""
    cloud = canonical_cloud(cloud)
    if cloud.n_points == 0:
        raise ValueError("cannot encode an empty cloud")
    pyr = GeometryPyramid(cloud.coords, codec.config.hyper_level)
    feats = cloud.colors.astype(np.float32)
    y = codec.model.analysis(None, pyr, feats).value
    z = codec.model.hyper_encoder(None, pyr, y).value
    z_hat = ent.quantize(z.astype(np.float64), "eval").astype(np.int64)
    mu, sigma = codec.model.hyper_decoder(None, pyr, z_hat.astype(np.float32))
    mu, sigma = mu.value, sigma.value
    y_hat = ent.quantize(y.astype(np.float64), "eval").astype(np.int64)

    z_enc = rc.RangeEncoder()
    _encode_z(z_enc, z_hat, _z_tables(codec))
    z_stream = z_enc.finish()
    y_enc = rc.RangeEncoder()
    _encode_y(y_enc, y_hat, mu, sigma)
    y_stream = y_enc.finish()

    est_y = ent.estimate_rate(
        ent.gaussian_mass(None, y_hat.astype(np.float64), mu, sigma).value
    )
    est_z = ent.estimate_rate(
        ent.factorized_mass(None, z_hat.astype(np.float64), codec.factorized).value
    )
    bs = Bitstream(
        lambda_id=lambda_id(lam) if lam is not None else CUSTOM_LAMBDA_ID,
        geometry_hash=geometry_hash(cloud.coords),
        n_points=cloud.n_points,
        z_stream=z_stream,
        y_stream=y_stream,
    )
    actual_bits = 8 * (len(z_stream) + len(y_stream))
    stats = {
        "estimated_bits": est_y + est_z,
        "actual_bits": float(actual_bits),
        "bpp": actual_bits / cloud.n_points,
        "y_rows": int(y_hat.shape[0]),
        "z_rows": int(z_hat.shape[0]),
    }
    return bs, stats


def decode(bs: Bitstream, coords: np.ndarray, codec: Codec) -> VoxelCloud:
    """Rebuild colors on the given geometry; validates the geometry hash."""
    coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
    coords = coords[lex_order(coords)]
    if geometry_hash(coords) != bs.geometry_hash:
        raise ValueError("geometry hash mismatch: wrong geometry for this bitstream")
    if len(coords) != bs.n_points:
        raise ValueError(
            f"geometry has {len(coords)} points, bitstream says {bs.n_points}"
        )
    pyr = GeometryPyramid(coords, codec.config.hyper_level)
    counts = pyr.counts()
    z_rows = counts[codec.config.hyper_level]
    y_rows = counts[codec.config.stages]

    z_dec = rc.RangeDecoder(bs.z_stream)
    z_hat = _decode_z(z_dec, z_rows, _z_tables(codec))
    mu, sigma = codec.model.hyper_decoder(None, pyr, z_hat.astype(np.float32))
    mu, sigma = mu.value, sigma.value
    y_dec = rc.RangeDecoder(bs.y_stream)
    y_hat = _decode_y(y_dec, (y_rows, codec.config.latent), mu, sigma)

    colors = codec.model.synthesis(None, pyr, y_hat.astype(np.float32), clamp=True).value
    return VoxelCloud(coords, colors.astype(np.float64))


# ---------------------------------------------------------------------------
# patches


@dataclass
class Patch:
    cloud: VoxelCloud
    offset: np.ndarray


def patch_cloud(cloud: VoxelCloud, block: int = PATCH_BLOCK) -> list[Patch]:
    """Split into axis-aligned block^3 tiles in local coordinates."""
    keys = (cloud.coords // block) * block
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    patches = []
    for i in range(len(uniq)):
        sel = inverse == i
        local = cloud.coords[sel] - uniq[i]
        patches.append(Patch(VoxelCloud(local, cloud.colors[sel]), uniq[i].copy()))
    return patches


# ---------------------------------------------------------------------------
# training


@dataclass
class RunManifest:
    seed: int = 0
    epochs: int = 1
    batch_size: int = 1
    lr_schedule: str = "step"
    lam: float = 800.0
    rig: str = DEFAULT_TRAIN_RIG
    image_size: int = 128
    distortion: str = "mse"
    data: str = ""
    checkpoint: str = ""
    extra: dict = field(default_factory=dict)

    _INT_FIELDS = ("seed", "epochs", "batch_size", "image_size")
    _FLOAT_FIELDS = ("lam",)
    _STR_FIELDS = ("lr_schedule", "rig", "distortion", "data", "checkpoint")

    def save(self, path) -> None:
        lines = []
        for name in self._INT_FIELDS + self._FLOAT_FIELDS + self._STR_FIELDS:
            lines.append(f"{name}={getattr(self, name)}\n")
        for key in sorted(self.extra):
            lines.append(f"{key}={self.extra[key]}\n")
        with open(path, "w") as fh:
            fh.write("".join(lines))

    @classmethod
    def load(cls, path) -> "RunManifest":
        manifest = cls()
        with open(path) as fh:
            for ln, raw in enumerate(fh, start=1):
                raw = raw.strip()
                if not raw or raw.startswith("#"):
                    continue
                key, sep, val = raw.partition("=")
                if not sep:
                    raise ValueError(f"manifest line {ln}: expected key=value")
                if key in cls._INT_FIELDS:
                    setattr(manifest, key, int(val))
                elif key in cls._FLOAT_FIELDS:
                    setattr(manifest, key, float(val))
                elif key in cls._STR_FIELDS:
                    setattr(manifest, key, val)
                else:
                    manifest.extra[key] = val
        return manifest


def _abort(manifest: RunManifest, reason: str):
    manifest.extra["status"] = f"aborted: {reason}"
    if manifest.checkpoint:
        manifest.save(manifest.checkpoint + ".manifest")
    raise RuntimeError(reason)


def train(
    clouds,
    manifest: RunManifest,
    codec: Codec | None = None,
    total_steps: int | None = None,
    log_every: int = 0,
) -> tuple[Codec, list[float]]:
    """Adam training over patch scenes; deterministic given the manifest seed.

    ``total_steps`` overrides epochs * steps_per_epoch when given (the toy
    acceptance run counts steps, not epochs).  Returns the codec and the
    per-step J history.
    """
    if codec is None:
        codec = Codec(seed=manifest.seed)
    patches = []
    for cloud in clouds:
        patches.extend(p.cloud for p in patch_cloud(cloud))
    if not patches:
        raise ValueError("no non-empty patches in the training set")
    views = parse_rig(manifest.rig)
    scenes = [
        build_scene(p, views, manifest.image_size, codec.config) for p in patches
    ]
    cfgs = [
        LossConfig(manifest.lam, s.cameras, s.settings, manifest.distortion)
        for s in scenes
    ]
    rng = np.random.default_rng(manifest.seed)
    steps_per_epoch = max(1, math.ceil(len(scenes) / manifest.batch_size))
    if total_steps is None:
        total_steps = manifest.epochs * steps_per_epoch
    history = []
    for step in range(total_steps):
        epoch = step // steps_per_epoch
        lr = ad.lr_schedule(epoch)
        batch = rng.choice(len(scenes), size=min(manifest.batch_size, len(scenes)),
                           replace=False)
        tape = Tape()
        total = None
        for idx in batch:
            loss, _ = scene_forward(tape, codec, scenes[int(idx)], cfgs[int(idx)], rng)
            total = loss if total is None else ad.add(tape, total, loss)
        total = ad.smul(tape, total, 1.0 / len(batch))
        j = float(total.value)
        if not np.isfinite(j):
            _abort(manifest, f"non-finite loss at step {step}")
        history.append(j)
        codec.store.zero_grads()
        tape.backward(total)
        if not np.isfinite(codec.store.grad_norm()):
            _abort(manifest, f"non-finite gradient at step {step}")
        codec.store.adam_step(lr)
        if log_every and step % log_every == 0:
            print(f"step {step}: J={j:.3f} lr={lr:.2e}")
        if manifest.checkpoint and (step + 1) % steps_per_epoch == 0:
            codec.save(manifest.checkpoint, {"epoch": str(epoch)})
    if manifest.checkpoint:
        codec.save(manifest.checkpoint, {"steps": str(total_steps)})
        manifest.extra["status"] = "completed"
        manifest.save(manifest.checkpoint + ".manifest")
    return codec, history


# ---------------------------------------------------------------------------
# evaluation


def compare_clouds(
    ref: VoxelCloud,
    recon: VoxelCloud,
    views,
    image_size: int = DEFAULT_EVAL_SIZE,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> dict:
    """Render both clouds with the identical rig and average the metrics."""
    from . import metrics as mx

    ref = canonical_cloud(ref)
    recon = canonical_cloud(recon)
    if not np.array_equal(ref.coords, recon.coords):
        raise ValueError("clouds disagree on geometry")
    points = recenter(ref.coords.astype(np.float64))
    cameras = rig_cameras(views, points, image_size, fov_deg)
    settings = default_settings(image_size, image_size)
    scores = {"psnr_y": 0.0, "psnr_yuv611": 0.0, "ms_ssim": 0.0}
    for cam in cameras:
        frags = rasterize(points, cam, settings)
        from .render import composite

        gt = composite(frags, ref.colors, settings)
        im = composite(frags, recon.colors, settings)
        scores["psnr_y"] += mx.psnr_y(gt, im)
        scores["psnr_yuv611"] += mx.yuv_psnr_611(gt, im)
        scores["ms_ssim"] += mx.ms_ssim(gt, im)
    return {k: v / len(cameras) for k, v in scores.items()}
