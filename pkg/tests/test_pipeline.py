import numpy as np
import pytest

from ropcac import autodiff as ad
from ropcac import entropy as ent
from ropcac import pipeline as pl
from ropcac import rangecoder as rc
from ropcac.formats import Bitstream, VoxelCloud, geometry_hash
from ropcac.network import CodecConfig
from ropcac.render import default_settings, make_camera
from ropcac.sparse import GeometryPyramid, lex_order

TINY = CodecConfig(attr_channels=3, width_a=3, width_b=4, latent=4, hyper=3,
                   stages=2, sp_trans=1, window=3)


def make_cloud(rng, n, span=24):
    coords = np.unique(rng.integers(0, span, size=(n * 2, 3)), axis=0)[:n]
    colors = rng.random((len(coords), 3))
    return VoxelCloud(coords.astype(np.int32), colors)


# ---------------------------------------------------------------------------
# loss


def two_view_cfg(lam, size=8, distortion="mse"):
    cams = [make_camera(2.0, 0.0, az, 60.0, size, size) for az in (0.0, 180.0)]
    return pl.LossConfig(lam, cams, default_settings(size, size), distortion)


def test_rd_loss_arithmetic():
    cfg = two_view_cfg(800.0)
    gt = [np.zeros((8, 8, 3)), np.zeros((8, 8, 3))]
    recon = [ad.Node(np.full((8, 8, 3), 0.25)), ad.Node(np.full((8, 8, 3), 0.5))]
    j = pl.rd_loss(None, ad.Node(np.float64(60.0)), ad.Node(np.float64(40.0)),
                   gt, recon, cfg)
    # mean MSE over views = (0.0625 + 0.25) / 2, all exact in binary
    assert j.value == 100.0 + 800.0 * 0.15625


def test_rd_loss_zero_for_identical_images_counts_only_rate():
    cfg = two_view_cfg(1000.0)
    rng = np.random.default_rng(0)
    imgs = [rng.random((8, 8, 3)) for _ in range(2)]
    j = pl.rd_loss(None, ad.Node(np.float64(7.0)), ad.Node(np.float64(3.0)),
                   imgs, [ad.Node(v.copy()) for v in imgs], cfg)
    assert j.value == 10.0


def test_rd_loss_ms_ssim_distortion():
    cfg = two_view_cfg(500.0, size=16, distortion="ms_ssim")
    rng = np.random.default_rng(1)
    imgs = [rng.random((16, 16, 3)) for _ in range(2)]
    j = pl.rd_loss(None, ad.Node(np.float64(5.0)), ad.Node(np.float64(5.0)),
                   imgs, [ad.Node(v.copy()) for v in imgs], cfg)
    # identical images: 1 - MS-SSIM == 0, only the rate remains
    assert abs(j.value - 10.0) < 1e-9


def test_rd_loss_view_count_mismatch():
    cfg = two_view_cfg(800.0)
    gt = [np.zeros((8, 8, 3)), np.zeros((8, 8, 3))]
    with pytest.raises(ValueError):
        pl.rd_loss(None, ad.Node(np.float64(1.0)), ad.Node(np.float64(1.0)),
                   gt, [ad.Node(np.zeros((8, 8, 3)))], cfg)


def test_loss_config_validation():
    cams = [make_camera(2.0, 0.0, 0.0, 60.0, 8, 8)]
    st = default_settings(8, 8)
    with pytest.raises(ValueError):
        pl.LossConfig(0.0, cams, st)
    with pytest.raises(ValueError):
        pl.LossConfig(1.0, [], st)
    with pytest.raises(ValueError):
        pl.LossConfig(1.0, cams, st, "l1")


def test_rd_loss_gradient_check():
    rng = np.random.default_rng(5)
    cloud = pl.canonical_cloud(make_cloud(rng, 50, span=8))
    codec = pl.Codec(TINY, seed=9)
    twin = codec.mirror(np.float64)
    pyr = GeometryPyramid(cloud.coords, TINY.hyper_level)
    counts = pyr.counts()
    noise_y = rng.uniform(-0.5, 0.5, (counts[2], TINY.latent)).astype(np.float32)
    noise_z = rng.uniform(-0.5, 0.5, (counts[3], TINY.hyper)).astype(np.float32)
    size = 12
    cams = [make_camera(2.5, 20.0, az, 60.0, size, size) for az in (0.0, 120.0)]
    settings = default_settings(size, size)
    from ropcac.render import rasterize, recenter, render

    points = recenter(cloud.coords.astype(np.float64))
    frags = [rasterize(points, c, settings) for c in cams]
    gts = [render(points, cloud.colors, c, settings) for c in cams]
    cfg = pl.LossConfig(50.0, cams, settings)
    x32 = ad.Param(cloud.colors.astype(np.float32))
    x64 = ad.Node(cloud.colors.astype(np.float64))

    def make_loss(like, xn):
        def loss(tape):
            y = like.model.analysis(tape, pyr, xn)
            z = like.model.hyper_encoder(tape, pyr, y)
            z_hat = ad.add(tape, z, noise_z)
            mu, sigma = like.model.hyper_decoder(tape, pyr, z_hat)
            y_hat = ad.add(tape, y, noise_y)
            r_y = ent.rate_bits(tape, ent.gaussian_mass(tape, y_hat, mu, sigma))
            r_z = ent.rate_bits(tape, ent.factorized_mass(tape, z_hat, like.factorized))
            recon = like.model.synthesis(tape, pyr, y_hat, clamp=False)
            views = [pl.composite_op(tape, fr, recon, settings) for fr in frags]
            return pl.rd_loss(tape, r_y, r_z, gts, views, cfg)
        return loss

    probe_names = ["ana.conv0.w", "ana.out.b", "syn.out.w", "hyp.dec_out.w",
                   "fz.h1", "fz.a1", "fz.b3"]
    wiggle32 = {"x": x32}
    wiggle64 = {"x": x64}
    for name in probe_names:
        wiggle32[name] = codec.store[name]
        wiggle64[name] = twin.mirror_nodes[name]
    worst = ad.finite_difference_check(
        make_loss(codec, x32), wiggle32, rng=rng, max_probes=4, h_scale=1e-5,
        fd_eval=make_loss(twin, x64), fd_wiggle=wiggle64)
    assert worst <= 1e-3


# ---------------------------------------------------------------------------
# latent coding


def latents_for(cloud, codec):
    cloud = pl.canonical_cloud(cloud)
    pyr = GeometryPyramid(cloud.coords, codec.config.hyper_level)
    y = codec.model.analysis(None, pyr, cloud.colors.astype(np.float32)).value
    z = codec.model.hyper_encoder(None, pyr, y).value
    z_hat = ent.quantize(z.astype(np.float64), "eval").astype(np.int64)
    mu, sigma = codec.model.hyper_decoder(None, pyr, z_hat.astype(np.float32))
    y_hat = ent.quantize(y.astype(np.float64), "eval").astype(np.int64)
    return z_hat, y_hat, mu.value, sigma.value


def test_latent_streams_bit_exact():
    rng = np.random.default_rng(11)
    codec = pl.Codec(TINY, seed=1)
    cloud = make_cloud(rng, 150, span=32)
    z_hat, y_hat, mu, sigma = latents_for(cloud, codec)
    # perturb away from all zeros so the tables see varied symbols
    z_hat = z_hat + rng.integers(-5, 6, z_hat.shape)
    y_hat = y_hat + rng.integers(-9, 10, y_hat.shape)

    enc = rc.RangeEncoder()
    pl._encode_z(enc, z_hat, pl._z_tables(codec))
    z_back = pl._decode_z(rc.RangeDecoder(enc.finish()), z_hat.shape[0],
                          pl._z_tables(codec))
    assert np.array_equal(z_hat, z_back)

    enc = rc.RangeEncoder()
    pl._encode_y(enc, y_hat, mu, sigma)
    y_back = pl._decode_y(rc.RangeDecoder(enc.finish()), y_hat.shape, mu, sigma)
    assert np.array_equal(y_hat, y_back)


def test_latent_escape_paths_round_trip():
    rng = np.random.default_rng(12)
    codec = pl.Codec(TINY, seed=2)
    cloud = make_cloud(rng, 100, span=24)
    z_hat, y_hat, mu, sigma = latents_for(cloud, codec)
    z_hat[0, 0] = 4000
    z_hat[1, 1] = -90000
    y_hat[0, 0] = 100000
    y_hat[2, 3] = -7777

    enc = rc.RangeEncoder()
    pl._encode_z(enc, z_hat, pl._z_tables(codec))
    z_back = pl._decode_z(rc.RangeDecoder(enc.finish()), z_hat.shape[0],
                          pl._z_tables(codec))
    assert np.array_equal(z_hat, z_back)

    enc = rc.RangeEncoder()
    pl._encode_y(enc, y_hat, mu, sigma)
    y_back = pl._decode_y(rc.RangeDecoder(enc.finish()), y_hat.shape, mu, sigma)
    assert np.array_equal(y_hat, y_back)


def test_zigzag_round_trip():
    for v in (0, 1, -1, 17, -17, 2 ** 30, -(2 ** 30)):
        u = pl._zigzag(v)
        assert u >= 0
        assert pl._unzigzag(u) == v


# ---------------------------------------------------------------------------
# encode / decode


def test_encode_decode_round_trip():
    rng = np.random.default_rng(20)
    codec = pl.Codec(TINY, seed=4)
    cloud = make_cloud(rng, 200, span=32)
    bs, stats = pl.encode(cloud, codec, lam=800.0)
    assert bs.lambda_id == pl.lambda_id(800.0)
    assert bs.n_points == cloud.n_points
    assert stats["actual_bits"] == 8 * (len(bs.z_stream) + len(bs.y_stream))
    rec = pl.decode(bs, cloud.coords, codec)
    assert rec.n_points == cloud.n_points
    srt = cloud.coords[lex_order(cloud.coords)]
    assert np.array_equal(rec.coords, srt)
    assert rec.colors.min() >= 0.0 and rec.colors.max() <= 1.0


def test_encode_deterministic_and_order_invariant():
    rng = np.random.default_rng(21)
    codec = pl.Codec(TINY, seed=5)
    cloud = make_cloud(rng, 180, span=28)
    bs1, _ = pl.encode(cloud, codec)
    bs2, _ = pl.encode(cloud, codec)
    perm = rng.permutation(cloud.n_points)
    bs3, _ = pl.encode(VoxelCloud(cloud.coords[perm], cloud.colors[perm]), codec)
    for other in (bs2, bs3):
        assert other.z_stream == bs1.z_stream
        assert other.y_stream == bs1.y_stream
        assert other.geometry_hash == bs1.geometry_hash


def test_decode_rejects_wrong_geometry():
    rng = np.random.default_rng(22)
    codec = pl.Codec(TINY, seed=6)
    cloud = make_cloud(rng, 120, span=24)
    bs, _ = pl.encode(cloud, codec)
    wrong = cloud.coords.copy()
    wrong[0] += 1
    if len(np.unique(wrong, axis=0)) == len(wrong):
        with pytest.raises(ValueError, match="hash"):
            pl.decode(bs, wrong, codec)
    tampered = Bitstream(bs.lambda_id, bs.geometry_hash, bs.n_points + 1,
                         bs.z_stream, bs.y_stream)
    with pytest.raises(ValueError):
        pl.decode(tampered, cloud.coords, codec)


def test_estimated_rate_close_to_actual():
    rng = np.random.default_rng(23)
    codec = pl.Codec(TINY, seed=7)
    for trial in range(3):
        cloud = make_cloud(rng, 150 + 60 * trial, span=32)
        _, stats = pl.encode(cloud, codec)
        slack = 0.02 * stats["estimated_bits"] + 64 * 8
        assert abs(stats["actual_bits"] - stats["estimated_bits"]) <= slack


def test_encode_rejects_empty():
    codec = pl.Codec(TINY, seed=8)
    empty = VoxelCloud(np.zeros((0, 3), np.int32), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        pl.encode(empty, codec)


# ---------------------------------------------------------------------------
# patches


def test_patch_cloud_single_block():
    rng = np.random.default_rng(30)
    cloud = make_cloud(rng, 100, span=100)
    patches = pl.patch_cloud(cloud)
    assert len(patches) == 1
    assert np.array_equal(patches[0].offset, np.zeros(3, dtype=np.int64))
    assert patches[0].cloud.n_points == cloud.n_points


def test_patch_cloud_union_recovers_cloud():
    rng = np.random.default_rng(31)
    coords = rng.integers(0, 300, size=(500, 3))
    coords = np.unique(coords, axis=0).astype(np.int32)
    colors = rng.random((len(coords), 3))
    cloud = VoxelCloud(coords, colors)
    patches = pl.patch_cloud(cloud)
    assert len(patches) > 1
    rebuilt = []
    rebuilt_colors = []
    for p in patches:
        assert p.cloud.coords.min() >= 0
        assert p.cloud.coords.max() < pl.PATCH_BLOCK
        rebuilt.append(p.cloud.coords + p.offset)
        rebuilt_colors.append(p.cloud.colors)
    rebuilt = np.concatenate(rebuilt)
    rebuilt_colors = np.concatenate(rebuilt_colors)
    order = lex_order(rebuilt.astype(np.int32))
    ref_order = lex_order(coords)
    assert np.array_equal(rebuilt[order], coords[ref_order])
    assert np.array_equal(rebuilt_colors[order], colors[ref_order])


# ---------------------------------------------------------------------------
# rigs and manifest


def test_parse_rig_default_train():
    views = pl.parse_rig(pl.DEFAULT_TRAIN_RIG)
    assert len(views) == 8
    assert views[:2] == [(0.0, 0.0), (0.0, 60.0)]
    assert (90.0, 0.0) in views and (270.0, 0.0) in views


def test_parse_rig_errors():
    for bad in ("", "abc", "5", "0:", "x:1,2"):
        with pytest.raises(ValueError):
            pl.parse_rig(bad)


def test_rig_cameras_shapes():
    views = pl.parse_rig(pl.DEFAULT_TEST_RIG)
    pts = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    cams = pl.rig_cameras(views, pts, 64)
    assert len(cams) == 6
    assert all(c.width == 64 and c.height == 64 for c in cams)


def test_manifest_round_trip(tmp_path):
    man = pl.RunManifest(seed=3, epochs=7, batch_size=2, lam=250.0,
                         rig="0:10,20", image_size=96, distortion="ms_ssim",
                         data="clouds/", checkpoint="run.ropw")
    man.extra["note"] = "overnight"
    path = tmp_path / "run.manifest"
    man.save(path)
    back = pl.RunManifest.load(path)
    for name in ("seed", "epochs", "batch_size", "lam", "rig", "image_size",
                 "distortion", "data", "checkpoint"):
        assert getattr(back, name) == getattr(man, name)
    assert back.extra["note"] == "overnight"


def test_manifest_rejects_bad_line(tmp_path):
    path = tmp_path / "bad.manifest"
    path.write_text("seed=1\nnonsense\n")
    with pytest.raises(ValueError, match="line 2"):
        pl.RunManifest.load(path)


def test_lambda_menu_ids():
    for i, lam in enumerate(pl.LAMBDA_MENU):
        assert pl.lambda_id(lam) == i
        assert pl.lambda_from_id(i) == lam
    assert pl.lambda_id(123.0) == pl.CUSTOM_LAMBDA_ID
    assert pl.lambda_from_id(pl.CUSTOM_LAMBDA_ID) is None


# ---------------------------------------------------------------------------
# training


def test_train_smoke_decreases_loss(tmp_path):
    rng = np.random.default_rng(40)
    cloud = make_cloud(rng, 200, span=20)
    ckpt = tmp_path / "toy.ropw"
    man = pl.RunManifest(seed=7, lam=800.0, rig="0:0,180", image_size=24,
                         batch_size=1, checkpoint=str(ckpt))
    codec = pl.Codec(TINY, seed=7)
    codec, hist = pl.train([cloud], man, codec=codec, total_steps=8)
    assert len(hist) == 8
    assert all(np.isfinite(hist))
    assert hist[-1] < hist[0]
    loaded, header = pl.Codec.load(ckpt)
    assert loaded.config == codec.config
    for name, p in codec.store.items():
        assert np.array_equal(loaded.store[name].value, p.value)
    back = pl.RunManifest.load(str(ckpt) + ".manifest")
    assert back.extra["status"] == "completed"


def test_train_deterministic_given_seed():
    rng = np.random.default_rng(41)
    cloud = make_cloud(rng, 120, span=16)
    man = pl.RunManifest(seed=11, lam=800.0, rig="0:90", image_size=16,
                         batch_size=1)
    _, h1 = pl.train([cloud], man, codec=pl.Codec(TINY, seed=11), total_steps=4)
    _, h2 = pl.train([cloud], man, codec=pl.Codec(TINY, seed=11), total_steps=4)
    assert h1 == h2


def test_train_aborts_on_non_finite():
    rng = np.random.default_rng(42)
    cloud = make_cloud(rng, 80, span=12)
    man = pl.RunManifest(seed=1, lam=800.0, rig="0:0", image_size=16,
                         batch_size=1)
    codec = pl.Codec(TINY, seed=1)
    name = codec.store.names()[0]
    codec.store[name].value[...] = np.nan
    with pytest.raises(RuntimeError, match="non-finite"):
        pl.train([cloud], man, codec=codec, total_steps=2)
    assert "aborted" in man.extra["status"]


def test_scene_forward_stats():
    rng = np.random.default_rng(43)
    cloud = make_cloud(rng, 100, span=16)
    codec = pl.Codec(TINY, seed=2)
    views = pl.parse_rig("0:0,180")
    scene = pl.build_scene(cloud, views, 16, codec.config)
    cfg = pl.LossConfig(800.0, scene.cameras, scene.settings)
    tape = ad.Tape()
    loss, stats = pl.scene_forward(tape, codec, scene, cfg, np.random.default_rng(0))
    assert np.isfinite(stats["j"])
    assert stats["bits_y"] > 0 and stats["bits_z"] > 0
    assert stats["j"] >= stats["bits_y"] + stats["bits_z"]


# ---------------------------------------------------------------------------
# evaluation helpers


def test_canonical_cloud_sorts():
    rng = np.random.default_rng(50)
    cloud = make_cloud(rng, 60, span=16)
    perm = rng.permutation(cloud.n_points)
    shuffled = VoxelCloud(cloud.coords[perm], cloud.colors[perm])
    canon = pl.canonical_cloud(shuffled)
    order = lex_order(cloud.coords)
    assert np.array_equal(canon.coords, cloud.coords[order])
    assert np.array_equal(canon.colors, cloud.colors[order])


def test_compare_clouds_identical_hits_caps():
    rng = np.random.default_rng(51)
    cloud = make_cloud(rng, 150, span=16)
    views = pl.parse_rig("0:45")
    scores = pl.compare_clouds(cloud, cloud, views, image_size=48)
    assert scores["psnr_y"] == 99.0
    assert scores["psnr_yuv611"] == 99.0
    assert scores["ms_ssim"] == 1.0


def test_compare_clouds_geometry_mismatch():
    rng = np.random.default_rng(52)
    cloud = make_cloud(rng, 60, span=16)
    other = VoxelCloud(cloud.coords + 1, cloud.colors)
    with pytest.raises(ValueError, match="geometry"):
        pl.compare_clouds(cloud, other, pl.parse_rig("0:0"))


def test_codec_save_load_round_trip(tmp_path):
    codec = pl.Codec(TINY, seed=13)
    path = tmp_path / "codec.ropw"
    codec.save(path, {"lam": "800.0"})
    loaded, header = pl.Codec.load(path)
    assert header["lam"] == "800.0"
    assert loaded.config == TINY
    assert set(loaded.store.names()) == set(codec.store.names())
    for name, p in codec.store.items():
        assert np.array_equal(loaded.store[name].value, p.value)
