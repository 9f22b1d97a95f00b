"""Central finite-difference checks for every differentiable op and for the
full generator + discriminator objective, in float64."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor, backward
from .gan import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, LossWeights,
                  Sample, _pointwise, discriminator_objective, generator_objective, loss_cgan,
                  loss_fm, loss_l1)
from .grid import SparseVoxelGrid

# single ops use the textbook step; the full graph uses a smaller one because
# its leaky-ReLU kinks are dense enough that 1e-4 steps straddle some of them
OPS_EPS = 1e-4
GRAPH_EPS = 1e-5
GRAD_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """max |a - n| over probed entries, divided by the gradient scale.

    The scale is the largest of ``scale`` (typically max |analytic| over the
    whole tensor), the probed magnitudes and a tiny floor, so probes that
    happen to land on near-zero entries do not inflate the ratio.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(scale, float(np.max(np.abs(n))), float(np.max(np.abs(a))), GRAD_FLOOR)
    return float(np.max(np.abs(a - n)) / denom)


def check(build, inputs: list[Tensor], rng: np.random.Generator, max_entries: int = 64,
          eps: float = OPS_EPS) -> float:
    """Compare backward() against central differences for scalar ``build()``.

    At most ``max_entries`` randomly chosen entries are probed per input.
    """
    for t in inputs:
        t.grad = None
    backward(build())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        size = t.value.size
        idx = np.arange(size) if size <= max_entries else np.sort(
            rng.choice(size, max_entries, replace=False))
        with ad.no_grad():
            numeric = ad.numerical_grad(lambda: float(build().value), t.value, eps, idx)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric,
                                          float(np.max(np.abs(analytic)))))
    return worst


def _p(rng, *shape, scale=1.0):
    return Parameter(rng.normal(0.0, scale, size=shape))


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    return ad.total(ad.mul(out, r))


def _random_sparse(rng, dims, density=0.3, channels=2):
    keys = np.flatnonzero(rng.random(int(np.prod(dims))) < density)
    if len(keys) == 0:
        keys = np.array([0])
    coords = np.stack(np.unravel_index(keys, dims), axis=1)
    return nn.SparseFeatureMap(coords, _p(rng, len(coords), channels), dims)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (build, inputs); every input is at most 6^3 per channel."""
    cases = {}

    def unary(name, fn, shape=(3, 4), scale=1.0, shift=0.0):
        x = Parameter(rng.normal(shift, scale, size=shape))
        r = rng.normal(size=fn(x).shape)
        cases[name] = (lambda: _proj(fn(x), r), [x])

    unary("absolute", ad.absolute)
    unary("leaky_relu", lambda x: ad.leaky_relu(x, 0.2))
    unary("sigmoid", ad.sigmoid, scale=3.0)
    unary("softplus", ad.softplus, scale=3.0)
    unary("minimum", lambda x: ad.minimum(x, 0.5), scale=2.0)
    unary("square", ad.square)
    unary("total", ad.total)
    unary("mean", ad.mean)
    unary("reshape", lambda x: ad.reshape(x, (4, 3)))

    a, b = _p(rng, 3, 4), _p(rng, 4)
    r = rng.normal(size=(3, 4))
    cases["add_broadcast"] = (lambda: _proj(ad.add(a, b), r), [a, b])
    cases["sub_broadcast"] = (lambda: _proj(ad.sub(a, b), r), [a, b])
    cases["mul_broadcast"] = (lambda: _proj(ad.mul(a, b), r), [a, b])
    s1, s2, s3 = _p(rng), _p(rng), _p(rng)
    cases["stack_sum"] = (lambda: ad.stack_sum([ad.square(s1), s2, ad.mul(s3, s1)]),
                          [s1, s2, s3])
    c1, c2 = _p(rng, 2, 3, 2), _p(rng, 2, 3, 1)
    rc = rng.normal(size=(2, 3, 3))
    cases["concat"] = (lambda: _proj(ad.concat([c1, c2], -1), rc), [c1, c2])
    g = _p(rng, 5, 3)
    gi = rng.integers(0, 5, size=8)
    gv = rng.random(8) < 0.7
    rg = rng.normal(size=(8, 3))
    cases["gather_rows"] = (lambda: _proj(ad.gather_rows(g, gi, gv), rg), [g])

    for stride in (1, 2):
        x = _p(rng, 5, 6, 4, 2)
        w, bias = _p(rng, 3, 3, 3, 2, 3, scale=0.3), _p(rng, 3)
        out_shape = nn.dense_conv3d(x, w, bias, stride=stride).shape
        rr = rng.normal(size=out_shape)
        cases[f"dense_conv3d_s{stride}"] = (
            lambda x=x, w=w, bias=bias, stride=stride, rr=rr:
            _proj(nn.dense_conv3d(x, w, bias, stride=stride), rr), [x, w, bias])
    x = _p(rng, 3, 2, 3, 2)
    w, bias = _p(rng, 3, 3, 3, 2, 2, scale=0.3), _p(rng, 2)
    ru = rng.normal(size=(6, 4, 6, 2))
    cases["upsample_nearest"] = (lambda: _proj(nn.upsample_nearest(x, 2), ru), [x])
    cases["upsample_conv3d"] = (lambda: _proj(nn.upsample_conv3d(x, w, bias), ru), [x, w, bias])
    xp = _p(rng, 6, 4, 2, 3)
    rp = rng.normal(size=(3, 2, 1, 3))
    cases["avg_pool3d"] = (lambda: _proj(nn.avg_pool3d(xp, 2), rp), [xp])

    sp = _random_sparse(rng, (6, 6, 6))
    ws, bs = _p(rng, 3, 3, 3, 2, 3, scale=0.3), _p(rng, 3)
    rb2 = nn.sparse_rulebook(sp.coords, sp.dims, 3, 2)
    rs2 = rng.normal(size=(len(rb2.out_coords), 3))
    cases["sparse_conv3d_s2"] = (
        lambda: _proj(nn.sparse_conv3d(sp, ws, bs, stride=2, rulebook=rb2).features, rs2),
        [sp.features, ws, bs])
    rs1 = rng.normal(size=(len(sp), 3))
    cases["submanifold_conv3d"] = (
        lambda: _proj(nn.submanifold_conv3d(sp, ws, bs).features, rs1), [sp.features, ws, bs])
    rd = rng.normal(size=(6, 6, 6, 2))
    cases["scatter_dense"] = (lambda: _proj(sp.to_dense(), rd), [sp.features])
    coarse = _random_sparse(rng, (3, 3, 3), density=0.5)
    ru2 = rng.normal(size=(len(sp), 2))
    cases["sparse_upsample_to"] = (
        lambda: _proj(nn.sparse_upsample_to(coarse, sp.coords, sp.dims), ru2), [coarse.features])
    wpt, bpt = _p(rng, 1, 1, 1, 2, 3), _p(rng, 3)
    cases["pointwise"] = (lambda: _proj(_pointwise(sp.features, wpt, bpt), rs1),
                          [sp.features, wpt, bpt])

    sr, sf = _p(rng, 2, 2, 1, 1, scale=2.0), _p(rng, 2, 2, 1, 1, scale=2.0)
    for form in ("log_form", "least_squares"):
        cases[f"cgan_disc_{form}"] = (
            lambda form=form: loss_cgan(sr, sf, "discriminator", form), [sr, sf])
        cases[f"cgan_gen_{form}"] = (lambda form=form: loss_cgan(None, sf, "generator", form),
                                     [sf])
    fr = [[Tensor(rng.normal(size=(2, 2, 1, 3))), Tensor(rng.normal(size=(1, 1, 1, 3)))]]
    ff = [[_p(rng, 2, 2, 1, 3), _p(rng, 1, 1, 1, 3)]]
    cases["loss_fm"] = (lambda: loss_fm(fr, ff), ff[0])
    pa, pb = Parameter(rng.random((4, 4, 2, 1))), Tensor(rng.random((4, 4, 2, 1)))
    cases["loss_l1"] = (lambda: loss_l1(pa, pb), [pa])
    return cases


def check_ops(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check(build, inputs, rng) for name, (build, inputs) in op_cases(rng).items()}


def tiny_sample(rng: np.random.Generator, in_channels: int = 3) -> Sample:
    """4^3 LiDAR grid at 0.1 m with a 2^3 radar target at 0.2 m."""
    dims = (4, 4, 4)
    keys = np.flatnonzero(rng.random(64) < 0.4)
    coords = np.stack(np.unravel_index(keys, dims), axis=1).astype(np.int64)
    feats = rng.normal(size=(len(coords), in_channels))
    svg = SparseVoxelGrid(np.zeros(3), 0.1, dims, coords, feats,
                          tuple(f"c{i}" for i in range(in_channels)))
    cond = rng.normal(size=(2, 2, 2, in_channels))
    target = rng.random((2, 2, 2, 1))
    return Sample(svg, cond, target, "tiny")


def _jitter_biases(module, rng) -> None:
    # zero biases put padded-only windows exactly on the leaky-ReLU kink
    for name, p in module.params.items():
        if name.endswith(".bias"):
            p.value = rng.normal(0.0, 0.1, size=p.shape)


def tiny_models(seed: int, in_channels: int = 3, decoder: str = "dense"):
    rng = np.random.default_rng(seed + 1000)
    gcfg = GeneratorConfig(encoder_stages=2, decoder_stages=1, base_channels=2, r_in=0.1,
                           r_out=0.2, decoder=decoder)
    G = Generator(gcfg, in_channels, seed=seed, dtype=np.float64)
    D = Discriminator(DiscriminatorConfig(base_channels=2, scales=2), in_channels + 1,
                      seed=seed + 1, dtype=np.float64)
    _jitter_biases(G, rng)
    _jitter_biases(D, rng)
    return G, D


def check_full_graph(seed: int, max_entries: int = 6) -> dict[str, float]:
    """The generator objective w.r.t. G, the adversarial part w.r.t. D, and the
    discriminator objective w.r.t. D.

    The feature-matching term treats real-branch taps as constants, so its
    derivative w.r.t. D parameters is not the derivative of the re-evaluated
    objective; D is probed with the feature term switched off (and the L1
    term, which does not depend on D, dropped to keep round-off small).
    """
    rng = np.random.default_rng(seed)
    sample = tiny_sample(rng)
    G, D = tiny_models(seed)
    g_params, d_params = list(G.params.values()), list(D.params.values())
    out = {}

    def probe(build, params):
        return check(build, params, rng, max_entries, GRAPH_EPS)

    for form in ("log_form", "least_squares"):
        w = LossWeights(adversarial=form)
        out[f"generator_objective_{form}"] = probe(
            lambda: generator_objective(G, D, sample, w)[0], g_params)
        w_adv = LossWeights(lambda_fm=0.0, lambda_l1=0.0, adversarial=form)
        out[f"generator_adversarial_wrt_D_{form}"] = probe(
            lambda: generator_objective(G, D, sample, w_adv)[0], d_params)
        with ad.no_grad():
            fake = G(sample.svg).value
        out[f"discriminator_objective_{form}"] = probe(
            lambda: discriminator_objective(D, sample, fake, form), d_params)
    Gs, _ = tiny_models(seed, decoder="sparse")
    out["generator_sparse_decoder_l1"] = probe(
        lambda: loss_l1(Gs(sample.svg), Tensor(sample.target)), list(Gs.params.values()))
    return out


def run(seeds=range(20)) -> dict[str, float]:
    """Worst relative error per check over all seeds."""
    worst: dict[str, float] = {}
    for s in seeds:
        for name, err in {**check_ops(s), **check_full_graph(s)}.items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
