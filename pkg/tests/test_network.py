import numpy as np
import pytest

from ropcac import autodiff as ad
from ropcac import sparse as sp
from ropcac.network import CodecConfig, CodecModel

SMALL = CodecConfig(attr_channels=3, width_a=4, width_b=6, latent=6, hyper=4,
                    stages=2, sp_trans=1, window=3)


def make_cloud(rng, n, span=16):
    coords = np.unique(rng.integers(0, span, size=(n * 2, 3)), axis=0)[:n]
    feats = rng.random((len(coords), 3)).astype(np.float32)
    return coords.astype(np.int32), feats


def canonical(coords, feats):
    order = sp.lex_order(coords)
    return coords[order], feats[order]


def test_analysis_structure():
    rng = np.random.default_rng(0)
    coords, feats = make_cloud(rng, 120)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 3)
    model = CodecModel(SMALL, seed=1)
    y = model.analysis(None, pyr, feats)
    assert y.value.shape == (len(pyr.levels[2]), SMALL.latent)
    assert len(pyr.levels[2]) <= len(coords)
    assert np.isfinite(y.value).all()


def test_analysis_requires_depth():
    rng = np.random.default_rng(1)
    coords, feats = make_cloud(rng, 40)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 1)
    model = CodecModel(SMALL, seed=1)
    with pytest.raises(ValueError):
        model.analysis(None, pyr, feats)


def test_analysis_rejects_wrong_width():
    rng = np.random.default_rng(2)
    coords, feats = make_cloud(rng, 40)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 2)
    model = CodecModel(SMALL, seed=1)
    with pytest.raises(ValueError):
        model.analysis(None, pyr, feats[:, :2])


def test_zero_weight_network_constant_output():
    rng = np.random.default_rng(3)
    coords, feats = make_cloud(rng, 80)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 3)
    model = CodecModel(SMALL, seed=1)
    for _, p in model.store.items():
        p.value[...] = 0.0
    y = model.analysis(None, pyr, feats)
    assert np.isfinite(y.value).all()
    assert np.allclose(y.value, y.value[0])
    recon = model.synthesis(None, pyr, y.value, clamp=False)
    assert np.allclose(recon.value, recon.value[0])


def test_synthesis_structure_and_clamp():
    rng = np.random.default_rng(4)
    coords, feats = make_cloud(rng, 100)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 2)
    model = CodecModel(SMALL, seed=2)
    y = model.analysis(None, pyr, feats)
    recon = model.synthesis(None, pyr, y.value)
    assert recon.value.shape == (len(coords), 3)
    assert recon.value.min() >= 0.0 and recon.value.max() <= 1.0
    un = model.synthesis(None, pyr, y.value, clamp=False)
    tape = ad.Tape()
    trained = model.synthesis(tape, pyr, y.value)
    assert np.allclose(trained.value, un.value)


def test_synthesis_rejects_wrong_rows():
    rng = np.random.default_rng(5)
    coords, feats = make_cloud(rng, 60)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 2)
    model = CodecModel(SMALL, seed=2)
    bad = np.zeros((len(pyr.levels[2]) + 1, SMALL.latent), dtype=np.float32)
    with pytest.raises(ValueError):
        model.synthesis(None, pyr, bad)


def test_hyper_path_structure():
    rng = np.random.default_rng(6)
    coords, feats = make_cloud(rng, 150)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 3)
    model = CodecModel(SMALL, seed=3)
    y = model.analysis(None, pyr, feats)
    z = model.hyper_encoder(None, pyr, y.value)
    assert z.value.shape == (len(pyr.levels[3]), SMALL.hyper)
    mu, sigma = model.hyper_decoder(None, pyr, z.value)
    assert mu.value.shape == (len(pyr.levels[2]), SMALL.latent)
    assert sigma.value.shape == mu.value.shape
    assert sigma.value.min() >= 1e-6

    shallow = sp.GeometryPyramid(coords, 2)
    with pytest.raises(ValueError):
        model.hyper_encoder(None, shallow, y.value)


def test_sigma_floor_extreme_raw():
    rng = np.random.default_rng(7)
    coords, feats = make_cloud(rng, 60)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 3)
    model = CodecModel(SMALL, seed=4)
    # drive sigma_raw to -1e6 via the final bias, zero weights on that layer
    model.store["hyp.dec_out.w"].value[...] = 0.0
    model.store["hyp.dec_out.b"].value[SMALL.latent:] = -1e6
    z = np.zeros((len(pyr.levels[3]), SMALL.hyper), dtype=np.float32)
    _, sigma = model.hyper_decoder(None, pyr, z)
    assert np.isfinite(sigma.value).all()
    assert (sigma.value >= 1e-6).all()
    assert sigma.value.max() == pytest.approx(1e-6)


def test_end_to_end_permutation_invariance():
    rng = np.random.default_rng(8)
    coords, feats = make_cloud(rng, 90)
    model = CodecModel(SMALL, seed=5)

    def run(c, f):
        c2, f2 = canonical(c, f)
        pyr = sp.GeometryPyramid(c2, 2)
        y = model.analysis(None, pyr, f2)
        r = model.synthesis(None, pyr, y.value)
        return pyr.levels[0], r.value

    perm = rng.permutation(len(coords))
    ca, ra = run(coords, feats)
    cb, rb = run(coords[perm], feats[perm])
    assert np.array_equal(ca, cb)
    assert np.abs(ra - rb).max() <= 1e-5


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    coords, feats = make_cloud(rng, 70)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 2)
    model = CodecModel(SMALL, seed=6)
    path = tmp_path / "codec.ropw"
    model.save(str(path), {"lambda": "800"})
    loaded, header = CodecModel.load(str(path))
    assert header["lambda"] == "800"
    assert loaded.config == SMALL
    ya = model.analysis(None, pyr, feats)
    yb = loaded.analysis(None, pyr, feats)
    assert np.array_equal(ya.value, yb.value)


def test_full_network_gradient_check():
    rng = np.random.default_rng(10)
    cfg = CodecConfig(attr_channels=3, width_a=3, width_b=4, latent=4, hyper=3,
                      stages=2, sp_trans=1, window=3)
    coords, feats = make_cloud(rng, 60, span=8)
    coords, feats = canonical(coords, feats)
    pyr = sp.GeometryPyramid(coords, 3)
    model = CodecModel(cfg, seed=7)
    twin = model.mirror(np.float64)
    x32 = ad.Param(feats.copy())
    x64 = ad.Node(feats.astype(np.float64))

    def make_loss(m, xn):
        def loss(tape):
            y = m.analysis(tape, pyr, xn)
            z = m.hyper_encoder(tape, pyr, y)
            mu, sigma = m.hyper_decoder(tape, pyr, z)
            recon = m.synthesis(tape, pyr, y, clamp=False)
            a = ad.sum_all(tape, ad.mul(tape, recon, recon))
            b = ad.sum_all(tape, ad.mul(tape, mu, sigma))
            return ad.add(tape, a, b)
        return loss

    probe_names = ["ana.conv0.w", "ana.down0.w", "ana.att0.theta.w2",
                   "ana.att0.delta.b2", "ana.out.b", "syn.up1.w",
                   "syn.att0.lam.w1", "syn.out.w", "hyp.enc1.w", "hyp.dec_out.w"]
    wiggle32 = {"x": x32}
    wiggle64 = {"x": x64}
    for name in probe_names:
        wiggle32[name] = model.store[name]
        wiggle64[name] = twin.mirror_nodes[name]
    # deep composition: smaller float64 step keeps clear of ReLU kinks
    worst = ad.finite_difference_check(
        make_loss(model, x32), wiggle32, rng=rng, max_probes=4, h_scale=1e-5,
        fd_eval=make_loss(twin, x64), fd_wiggle=wiggle64)
    assert worst <= 1e-3
