"""Analysis and synthesis transforms with the hyperprior sub-network.

The analysis transform maps colors at full resolution to latents two
pyramid levels down; synthesis mirrors it back up.  A second, smaller
encoder/decoder pair produces the side information that conditions the
latent entropy model.  All layers live in one ParamStore so training,
checkpointing, and the float64 gradient-check mirror share one namespace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (AttentionParams, MLP, create_attention_params,
                        fan_in_uniform, sp_trans_apply)
from .autodiff import Node, Tape
from .sparse import ConvLayer, GeometryPyramid, SparseTensor, conv_apply

SIGMA_FLOOR = 1e-6


@dataclass
class CodecConfig:
    attr_channels: int = 3
    width_a: int = 64
    width_b: int = 128
    latent: int = 128
    hyper: int = 64
    stages: int = 2
    sp_trans: int = 2
    window: int = 5

    def to_header(self) -> dict[str, str]:
        return {k: str(getattr(self, k)) for k in (
            "attr_channels", "width_a", "width_b", "latent", "hyper",
            "stages", "sp_trans", "window")}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "CodecConfig":
        cfg = cls()
        for k in cfg.to_header():
            if k in header:
                setattr(cfg, k, int(header[k]))
        return cfg

    @property
    def hyper_level(self) -> int:
        return self.stages + 1


def _conv_init(rng, ksize, c_in, c_out, scale=1.0):
    fan_in = ksize ** 3 * c_in
    w = fan_in_uniform(rng, (ksize ** 3, c_in, c_out), fan_in, scale)
    b = fan_in_uniform(rng, (c_out,), fan_in, scale)
    return w, b


class CodecModel:
    """All learnable pieces of the codec, keyed by stable parameter names."""

    def __init__(self, config: CodecConfig | None = None, seed: int = 0):
        self.config = config or CodecConfig()
        self.store = ad.ParamStore()
        rng = np.random.default_rng(seed)
        self.layers: dict[str, ConvLayer] = {}
        self.atts: dict[str, AttentionParams] = {}
        self._build(rng, self._store_conv, self._store_att)

    def _store_conv(self, rng, name, c_in, c_out, stride, scale=1.0):
        w, b = _conv_init(rng, 3, c_in, c_out, scale)
        self.layers[name] = ConvLayer(
            self.store.create(f"{name}.w", w), self.store.create(f"{name}.b", b),
            ksize=3, stride=stride)

    def _store_att(self, rng, name, channels):
        self.atts[name] = create_attention_params(
            self.store, name, channels, rng, self.config.window)

    def _build(self, rng, make_conv, make_att):
        cfg = self.config
        make_conv(rng, "ana.conv0", cfg.attr_channels, cfg.width_a, 1)
        make_conv(rng, "ana.conv1", cfg.width_a, cfg.width_b, 1)
        for i in range(cfg.stages):
            make_conv(rng, f"ana.res{i}.conv1", cfg.width_b, cfg.width_b, 1)
            make_conv(rng, f"ana.res{i}.conv2", cfg.width_b, cfg.width_b, 1)
            make_conv(rng, f"ana.down{i}", cfg.width_b, cfg.width_b, 2)
        for k in range(cfg.sp_trans):
            make_att(rng, f"ana.att{k}", cfg.width_b)
        # small initial latents keep the first rate estimates in range
        make_conv(rng, "ana.out", cfg.width_b, cfg.latent, 1, scale=0.1)

        make_conv(rng, "syn.in", cfg.latent, cfg.width_b, 1)
        for k in range(cfg.sp_trans):
            make_att(rng, f"syn.att{k}", cfg.width_b)
        for i in range(cfg.stages):
            make_conv(rng, f"syn.up{i}", cfg.width_b, cfg.width_b, 2)
            make_conv(rng, f"syn.res{i}.conv1", cfg.width_b, cfg.width_b, 1)
            make_conv(rng, f"syn.res{i}.conv2", cfg.width_b, cfg.width_b, 1)
        make_conv(rng, "syn.conv_a", cfg.width_b, cfg.width_a, 1)
        make_conv(rng, "syn.out", cfg.width_a, cfg.attr_channels, 1)

        make_conv(rng, "hyp.enc0", cfg.latent, cfg.latent, 1)
        make_conv(rng, "hyp.enc1", cfg.latent, cfg.hyper, 2)
        make_conv(rng, "hyp.dec_up", cfg.hyper, cfg.width_b, 2)
        make_conv(rng, "hyp.dec_out", cfg.width_b, 2 * cfg.latent, 1)

    def mirror(self, dtype=np.float64) -> "CodecModel":
        """Same topology with untracked casts of the current weights."""
        twin = object.__new__(CodecModel)
        twin.config = self.config
        twin.store = None
        twin.layers = {}
        twin.atts = {}
        nodes = {name: Node(p.value.astype(dtype)) for name, p in self.store.items()}

        def make_conv(rng, name, c_in, c_out, stride, scale=1.0):
            twin.layers[name] = ConvLayer(nodes[f"{name}.w"], nodes[f"{name}.b"],
                                          ksize=3, stride=stride)

        def make_att(rng, name, channels):
            twin.atts[name] = AttentionParams(
                *(MLP(nodes[f"{name}.{proj}.w1"], nodes[f"{name}.{proj}.b1"],
                      nodes[f"{name}.{proj}.w2"], nodes[f"{name}.{proj}.b2"])
                  for proj in ("theta", "alpha", "lam", "delta")),
                self.config.window)

        twin._build(np.random.default_rng(0), make_conv, make_att)
        twin.mirror_nodes = nodes
        return twin

    # ------------------------------------------------------------------
    # forward passes (feats are Nodes or ndarrays aligned to pyramid levels)

    def _conv(self, tape, name, feats, plan, n_out, act: bool):
        layer = self.layers[name]
        out = conv_apply(tape, feats, layer.weight, layer.bias, plan, n_out)
        return ad.relu(tape, out) if act else out

    def _res(self, tape, name, feats, plan, n):
        h = self._conv(tape, f"{name}.conv1", feats, plan, n, act=True)
        h = self._conv(tape, f"{name}.conv2", h, plan, n, act=False)
        return ad.add(tape, feats, h)

    def _check_width(self, feats, want, what):
        got = ad.value_of(feats).shape[1]
        if got != want:
            raise ValueError(f"{what}: feature width {got}, expected {want}")

    def analysis(self, tape: Tape | None, pyr: GeometryPyramid, feats) -> Node:
        cfg = self.config
        if pyr.depth < cfg.stages:
            raise ValueError(f"pyramid depth {pyr.depth} < {cfg.stages} stages")
        self._check_width(feats, cfg.attr_channels, "analysis input")
        if ad.value_of(feats).shape[0] != len(pyr.levels[0]):
            raise ValueError("analysis input rows do not match pyramid level 0")
        counts = pyr.counts()
        x = self._conv(tape, "ana.conv0", feats, pyr.plan_same(0, 3), counts[0], True)
        x = self._conv(tape, "ana.conv1", x, pyr.plan_same(0, 3), counts[0], True)
        for i in range(cfg.stages):
            x = self._res(tape, f"ana.res{i}", x, pyr.plan_same(i, 3), counts[i])
            x = self._conv(tape, f"ana.down{i}", x, pyr.plan_down(i, 3),
                           counts[i + 1], True)
        pairs = pyr.window_pairs(cfg.stages, cfg.window)
        for k in range(cfg.sp_trans):
            x = sp_trans_apply(tape, x, self.atts[f"ana.att{k}"], pairs)
        return self._conv(tape, "ana.out", x, pyr.plan_same(cfg.stages, 3),
                          counts[cfg.stages], False)

    def synthesis(self, tape: Tape | None, pyr: GeometryPyramid, y,
                  clamp: bool | None = None) -> Node:
        cfg = self.config
        if pyr.depth < cfg.stages:
            raise ValueError(f"pyramid depth {pyr.depth} < {cfg.stages} stages")
        self._check_width(y, cfg.latent, "synthesis input")
        counts = pyr.counts()
        if ad.value_of(y).shape[0] != counts[cfg.stages]:
            raise ValueError("latent rows do not match the pyramid's latent level")
        x = self._conv(tape, "syn.in", y, pyr.plan_same(cfg.stages, 3),
                       counts[cfg.stages], False)
        pairs = pyr.window_pairs(cfg.stages, cfg.window)
        for k in range(cfg.sp_trans):
            x = sp_trans_apply(tape, x, self.atts[f"syn.att{k}"], pairs)
        for i in range(cfg.stages):
            level = cfg.stages - 1 - i
            x = self._conv(tape, f"syn.up{i}", x, pyr.plan_up(level, 3),
                           counts[level], True)
            x = self._res(tape, f"syn.res{i}", x, pyr.plan_same(level, 3), counts[level])
        x = self._conv(tape, "syn.conv_a", x, pyr.plan_same(0, 3), counts[0], True)
        x = self._conv(tape, "syn.out", x, pyr.plan_same(0, 3), counts[0], False)
        if clamp is None:
            clamp = tape is None
        if clamp:
            x = Node(np.clip(x.value, 0.0, 1.0))
        return x

    def hyper_encoder(self, tape: Tape | None, pyr: GeometryPyramid, y) -> Node:
        cfg = self.config
        if pyr.depth < cfg.hyper_level:
            raise ValueError(f"pyramid depth {pyr.depth} < hyper level {cfg.hyper_level}")
        self._check_width(y, cfg.latent, "hyper encoder input")
        counts = pyr.counts()
        x = self._conv(tape, "hyp.enc0", y, pyr.plan_same(cfg.stages, 3),
                       counts[cfg.stages], True)
        return self._conv(tape, "hyp.enc1", x, pyr.plan_down(cfg.stages, 3),
                          counts[cfg.hyper_level], False)

    def hyper_decoder(self, tape: Tape | None, pyr: GeometryPyramid, z):
        cfg = self.config
        if pyr.depth < cfg.hyper_level:
            raise ValueError(f"pyramid depth {pyr.depth} < hyper level {cfg.hyper_level}")
        self._check_width(z, cfg.hyper, "hyper decoder input")
        counts = pyr.counts()
        x = self._conv(tape, "hyp.dec_up", z, pyr.plan_up(cfg.stages, 3),
                       counts[cfg.stages], True)
        x = self._conv(tape, "hyp.dec_out", x, pyr.plan_same(cfg.stages, 3),
                       counts[cfg.stages], False)
        mu = ad.slice_cols(tape, x, 0, cfg.latent)
        sigma_raw = ad.slice_cols(tape, x, cfg.latent, 2 * cfg.latent)
        sigma = ad.sadd(tape, ad.softplus(tape, sigma_raw), SIGMA_FLOOR)
        return mu, sigma

    # ------------------------------------------------------------------
    # SparseTensor conveniences (evaluation paths)

    def analysis_tensor(self, t: SparseTensor, pyr: GeometryPyramid) -> SparseTensor:
        if not np.array_equal(t.coords, pyr.levels[0]):
            raise ValueError("input coordinates do not match pyramid level 0")
        y = self.analysis(None, pyr, t.feats)
        return SparseTensor(pyr.levels[self.config.stages], y.value,
                            pyr.strides[self.config.stages], presorted=True)

    def synthesis_tensor(self, y_t: SparseTensor, pyr: GeometryPyramid) -> SparseTensor:
        if not np.array_equal(y_t.coords, pyr.levels[self.config.stages]):
            raise ValueError("latent coordinates do not match the pyramid")
        x = self.synthesis(None, pyr, y_t.feats, clamp=True)
        return SparseTensor(pyr.levels[0], x.value, 1, presorted=True)

    # ------------------------------------------------------------------

    def save(self, path: str, extra_header: dict[str, str] | None = None) -> None:
        header = self.config.to_header()
        header.update(extra_header or {})
        ad.save_checkpoint(path, self.store, header)

    @classmethod
    def load(cls, path: str) -> tuple["CodecModel", dict[str, str]]:
        header, tensors = ad.load_checkpoint(path)
        model = cls(CodecConfig.from_header(header))
        model.store.load_arrays(tensors)
        return model, header
