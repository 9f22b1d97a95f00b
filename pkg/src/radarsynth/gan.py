"""Sparse-encoder / dense-decoder generator, multi-scale 3D discriminator,
the adversarial + feature-matching + L1 objective, and the training loop."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .grid import SparseVoxelGrid
from .io import dumps_line, write_checkpoint
from .metrics import bev_scores
from .nn import (Adam, SparseFeatureMap, avg_pool3d, dense_conv3d, init_conv, scatter_dense,
                 sparse_conv3d, sparse_rulebook, sparse_upsample_to, submanifold_conv3d,
                 submanifold_rulebook, upsample_conv3d)

LOG_CLAMP = -math.log(1e-12)


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    encoder_stages: int = 4
    decoder_stages: int = 1
    base_channels: int = 16
    r_in: float = 0.05
    r_out: float = 0.4
    kernel: int = 3
    slope: float = 0.2
    decoder: str = "dense"

    def __post_init__(self):
        if self.encoder_stages < 1 or not 1 <= self.decoder_stages <= self.encoder_stages:
            raise ConfigError("need 1 <= decoder_stages <= encoder_stages")
        if self.base_channels < 1 or self.kernel % 2 == 0:
            raise ConfigError("base_channels must be positive and kernel odd")
        expected = self.r_in * 2 ** (self.encoder_stages - self.decoder_stages)
        if not math.isclose(expected, self.r_out, rel_tol=1e-9):
            raise ConfigError(
                f"r_in * 2^(E-D) = {expected} does not equal r_out = {self.r_out}")
        if self.decoder not in ("dense", "sparse"):
            raise ConfigError("decoder must be 'dense' or 'sparse'")

    @property
    def factor(self) -> int:
        return 2 ** (self.encoder_stages - self.decoder_stages)

    def stage_channels(self, e: int) -> int:
        return self.base_channels * 2 ** e


@dataclass
class DiscriminatorConfig:
    base_channels: int = 8
    scales: int = 3
    kernel: int = 3
    slope: float = 0.2


@dataclass
class LossWeights:
    lambda_fm: float = 10.0
    lambda_l1: float = 100.0
    adversarial: str = "log_form"
    lambda_gan: float = 1.0

    def __post_init__(self):
        if min(self.lambda_fm, self.lambda_l1, self.lambda_gan) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.adversarial not in ("log_form", "least_squares"):
            raise ConfigError("adversarial must be 'log_form' or 'least_squares'")

    @property
    def uses_discriminator(self) -> bool:
        return self.lambda_gan > 0 or self.lambda_fm > 0


class Module:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_conv(self, rng, name, k, cin, cout, dtype):
        w, b = init_conv(rng, k, cin, cout, name, dtype)
        self.params[w.name], self.params[b.name] = w, b
        return w, b

    def conv(self, name):
        return self.params[name + ".weight"], self.params[name + ".bias"]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for n, p in self.params.items():
            if n not in state:
                raise ConfigError(f"missing parameter {n}")
            if tuple(state[n].shape) != p.shape:
                raise ConfigError(f"parameter {n} has shape {state[n].shape}, expected {p.shape}")
            p.value = np.asarray(state[n], dtype=p.dtype).copy()


class Generator(Module):
    """Sparse encoder (strided sparse conv + submanifold conv per stage), dense or
    sparse decoder with encoder skips, 1x1x1 conv + sigmoid head."""

    def __init__(self, cfg: GeneratorConfig, in_channels: int, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.cfg, self.in_channels, self.dtype = cfg, in_channels, dtype
        rng = np.random.default_rng(seed)
        k, E = cfg.kernel, cfg.encoder_stages
        cin = in_channels
        for e in range(E):
            c = cfg.stage_channels(e)
            self.add_conv(rng, f"enc{e}.down", k, cin, c, dtype)
            self.add_conv(rng, f"enc{e}.subm", k, c, c, dtype)
            cin = c
        for j in range(1, cfg.decoder_stages + 1):
            s = E - 1 - j
            cs = cfg.stage_channels(s) if s >= 0 else in_channels
            cout = max(cs, 1)
            self.add_conv(rng, f"dec{j}.up", k, cin, cout, dtype)
            self.add_conv(rng, f"dec{j}.fuse", k, cout + cs, cout, dtype)
            cin = cout
        self.add_conv(rng, "head", 1, cin, 1, dtype)
        self._rulebooks: dict = {}

    def _cached(self, key, build):
        rb = self._rulebooks.get(key)
        if rb is None:
            if len(self._rulebooks) > 512:
                self._rulebooks.clear()
            rb = self._rulebooks[key] = build()
        return rb

    def encode(self, svg: SparseVoxelGrid) -> list[SparseFeatureMap]:
        cfg = self.cfg
        if any(d % (2 ** cfg.encoder_stages) for d in svg.dims):
            raise ConfigError(f"input dims {svg.dims} not divisible by 2^{cfg.encoder_stages}")
        if not math.isclose(svg.resolution, cfg.r_in, rel_tol=1e-6):
            raise ConfigError(f"input resolution {svg.resolution} != r_in {cfg.r_in}")
        if svg.features.shape[1] != self.in_channels:
            raise ConfigError(f"input has {svg.features.shape[1]} channels, "
                              f"generator expects {self.in_channels}")
        x = SparseFeatureMap(svg.coords, Tensor(svg.features.astype(self.dtype)), svg.dims,
                             svg.resolution, svg.origin)
        base = _coords_key(svg)
        maps = [x]
        for e in range(cfg.encoder_stages):
            rb = self._cached(base + ("down", e), lambda: sparse_rulebook(
                x.coords, x.dims, cfg.kernel, 2))
            x = sparse_conv3d(x, *self.conv(f"enc{e}.down"), stride=2, rulebook=rb)
            x = x.with_features(ad.leaky_relu(x.features, cfg.slope))
            rb = self._cached(base + ("subm", e), lambda: submanifold_rulebook(
                x.coords, x.dims, cfg.kernel))
            x = submanifold_conv3d(x, *self.conv(f"enc{e}.subm"), rulebook=rb)
            x = x.with_features(ad.leaky_relu(x.features, cfg.slope))
            maps.append(x)
        return maps

    def forward(self, svg: SparseVoxelGrid) -> Tensor:
        """Log-normalized radar estimate, shape (X, Y, Z, 1), values in [0, 1]."""
        cfg = self.cfg
        maps = self.encode(svg)
        E = cfg.encoder_stages
        if cfg.decoder == "dense":
            h = maps[E].to_dense()
            for j in range(1, cfg.decoder_stages + 1):
                skip = maps[E - j]
                up = ad.leaky_relu(upsample_conv3d(h, *self.conv(f"dec{j}.up")), cfg.slope)
                cat = ad.concat([up, skip.to_dense()], axis=-1)
                h = ad.leaky_relu(dense_conv3d(cat, *self.conv(f"dec{j}.fuse")), cfg.slope)
            return ad.sigmoid(dense_conv3d(h, *self.conv("head")))
        h = maps[E]
        base = _coords_key(svg)
        for j in range(1, cfg.decoder_stages + 1):
            skip = maps[E - j]
            rb = self._cached(base + ("dec", j), lambda: submanifold_rulebook(
                skip.coords, skip.dims, cfg.kernel))
            up = skip.with_features(sparse_upsample_to(h, skip.coords, skip.dims))
            up = submanifold_conv3d(up, *self.conv(f"dec{j}.up"), rulebook=rb)
            cat = skip.with_features(ad.concat(
                [ad.leaky_relu(up.features, cfg.slope), skip.features], axis=-1))
            h = submanifold_conv3d(cat, *self.conv(f"dec{j}.fuse"), rulebook=rb)
            h = h.with_features(ad.leaky_relu(h.features, cfg.slope))
        w, b = self.conv("head")
        out = ad.sigmoid(_pointwise(h.features, w, b))
        return scatter_dense(out, h.coords, h.dims)

    __call__ = forward


def _coords_key(svg) -> tuple:
    return (hashlib.sha1(np.ascontiguousarray(svg.coords).tobytes()).hexdigest(), svg.dims)


def _pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1x1 convolution on a row matrix."""
    wv = w.value.reshape(w.shape[3], w.shape[4])
    out = x.value @ wv + b.value

    def back(g):
        return (g @ wv.T, (x.value.T @ g).reshape(w.shape), g.sum(axis=0))

    return ad.make(out, (x, w, b), back, "pointwise")


class Discriminator(Module):
    """``scales`` conditional critics on progressively 2x average-pooled inputs.

    Each critic: three stride-2 conv + leaky-ReLU blocks, one stride-1 conv +
    leaky-ReLU block, and a 1-channel stride-1 score conv.  The four block
    outputs are the feature taps.
    """

    def __init__(self, cfg: DiscriminatorConfig, in_channels: int, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.cfg, self.in_channels, self.dtype = cfg, in_channels, dtype
        rng = np.random.default_rng(seed)
        c0, k = cfg.base_channels, cfg.kernel
        widths = [c0, 2 * c0, 4 * c0, 4 * c0]
        for s in range(cfg.scales):
            cin = in_channels
            for i, c in enumerate(widths):
                self.add_conv(rng, f"d{s}.b{i}", k, cin, c, dtype)
                cin = c
            self.add_conv(rng, f"d{s}.score", k, cin, 1, dtype)

    @property
    def taps(self) -> int:
        return 4

    def forward(self, condition, radar) -> list[tuple[Tensor, list[Tensor]]]:
        cond = ad.as_tensor(np.asarray(condition, dtype=self.dtype)
                            if not isinstance(condition, Tensor) else condition)
        radar = ad.as_tensor(radar)
        if cond.shape[:3] != radar.shape[:3]:
            raise ConfigError(f"condition dims {cond.shape[:3]} != radar dims {radar.shape[:3]}")
        x = ad.concat([cond, radar], axis=-1)
        out = []
        for s in range(self.cfg.scales):
            if s:
                x = avg_pool3d(x, 2)
            h, taps = x, []
            for i in range(4):
                h = dense_conv3d(h, *self.conv(f"d{s}.b{i}"), stride=2 if i < 3 else 1)
                h = ad.leaky_relu(h, self.cfg.slope)
                taps.append(h)
            out.append((dense_conv3d(h, *self.conv(f"d{s}.score")), taps))
        return out

    __call__ = forward


# ---------------------------------------------------------------------------
# losses


def _real_term(s: Tensor, form: str) -> Tensor:
    if form == "least_squares":
        return ad.mean(ad.square(ad.sub(s, 1.0)))
    # -log(clamp(sigmoid(s), 1e-12)) computed as a clamped softplus
    return ad.mean(ad.minimum(ad.softplus(ad.mul(s, -1.0)), LOG_CLAMP))


def _fake_term(s: Tensor, form: str) -> Tensor:
    if form == "least_squares":
        return ad.mean(ad.square(s))
    return ad.mean(ad.minimum(ad.softplus(s), LOG_CLAMP))


def loss_cgan(scores_real, scores_fake, role: str, form: str = "log_form") -> Tensor:
    """Adversarial loss for one critic scale.

    role ``discriminator``: -E[log D(x,y)] - E[log(1 - D(x,G(x)))].
    role ``generator``: the non-saturating -E[log D(x,G(x))].
    """
    if role == "discriminator":
        return ad.add(_real_term(ad.as_tensor(scores_real), form),
                      _fake_term(ad.as_tensor(scores_fake), form))
    if role == "generator":
        return _real_term(ad.as_tensor(scores_fake), form)
    raise ValueError(f"unknown role {role!r}")


def loss_fm(real_feats, fake_feats) -> Tensor:
    """Sum over scales and taps of the mean absolute feature difference.

    Real-branch features are treated as constants.
    """
    if len(real_feats) != len(fake_feats) or any(
            len(r) != len(f) for r, f in zip(real_feats, fake_feats)):
        raise ValueError("feature tap structure mismatch")
    terms = []
    for rs, fs in zip(real_feats, fake_feats):
        for r, f in zip(rs, fs):
            r = r.detach() if isinstance(r, Tensor) else Tensor(np.asarray(r))
            f = ad.as_tensor(f)
            if r.shape != f.shape:
                raise ValueError(f"tap shape mismatch {r.shape} vs {f.shape}")
            terms.append(ad.mean(ad.absolute(ad.sub(f, r))))
    return ad.stack_sum(terms)


def loss_l1(fake, real) -> Tensor:
    fake, real = ad.as_tensor(fake), ad.as_tensor(real)
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch {fake.shape} vs {real.shape}")
    return ad.mean(ad.absolute(ad.sub(fake, real)))


def total_objective(cgan_terms, fm, l1, weights: LossWeights) -> Tensor:
    """sum_k L_cGAN(G, D_k) + lambda_FM * L_FM + lambda_L1 * L_L1."""
    parts = [ad.mul(t, weights.lambda_gan) for t in cgan_terms]
    parts.append(ad.mul(fm, weights.lambda_fm))
    parts.append(ad.mul(l1, weights.lambda_l1))
    return ad.stack_sum(parts)


def generator_objective(G, D, sample, weights: LossWeights):
    """Full generator loss on one sample; returns (loss, fake, parts dict)."""
    fake = G(sample.svg)
    target = Tensor(sample.target)
    l1 = loss_l1(fake, target)
    if not weights.uses_discriminator:
        zero = Tensor(np.asarray(0.0))
        return ad.mul(l1, weights.lambda_l1), fake, {"gan": zero, "fm": zero, "l1": l1}
    out_fake = D(sample.condition, fake)
    with no_grad():
        out_real = D(sample.condition, target)
    gan = [loss_cgan(None, s, "generator", weights.adversarial) for s, _ in out_fake]
    fm = loss_fm([t for _, t in out_real], [t for _, t in out_fake])
    return total_objective(gan, fm, l1, weights), fake, {"gan": ad.stack_sum(gan), "fm": fm,
                                                          "l1": l1}


def discriminator_objective(D, sample, fake: np.ndarray, form: str) -> Tensor:
    out_real = D(sample.condition, Tensor(sample.target))
    out_fake = D(sample.condition, Tensor(fake))
    return ad.stack_sum([loss_cgan(r, f, "discriminator", form)
                         for (r, _), (f, _) in zip(out_real, out_fake)])


# ---------------------------------------------------------------------------
# training


@dataclass
class Sample:
    """One training pair: sparse LiDAR voxels, dense condition, log-normalized target."""

    svg: SparseVoxelGrid
    condition: np.ndarray
    target: np.ndarray
    name: str = ""


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator | None
    history: list[dict]


def evaluate(G: Generator, samples) -> dict:
    """Mean BEV PSNR / SSIM of generator outputs against targets."""
    ps, ss = [], []
    for s in samples:
        with no_grad():
            p, q = bev_scores(G(s.svg).value, s.target)
        ps.append(p)
        ss.append(q)
    return {"val_psnr": float(np.mean(ps)) if ps else None,
            "val_ssim": float(np.mean(ss)) if ss else None}


def train(samples, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig | None = None,
          weights: LossWeights | None = None, opt: OptimizerConfig | None = None,
          epochs: int = 40, seed: int = 0, val_samples=(), out_dir=None, meta=None,
          max_steps: int | None = None, log=None, stop_when=None) -> TrainResult:
    """Alternating discriminator / generator Adam steps, batch size 1.

    The sample order of each epoch is a permutation drawn from ``seed``.
    When ``out_dir`` is given, ``train_log.jsonl`` and one checkpoint per epoch
    are written there. ``stop_when(row, generator)`` returning True ends
    training after that epoch.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("training needs at least one sample")
    disc_cfg = disc_cfg or DiscriminatorConfig()
    weights = weights or LossWeights()
    opt = opt or OptimizerConfig()
    in_ch = samples[0].svg.features.shape[1]
    for s in samples:
        if not math.isclose(s.svg.resolution, gen_cfg.r_in, rel_tol=1e-6):
            raise ConfigError(f"sample {s.name!r} resolution {s.svg.resolution} != r_in")
    G = Generator(gen_cfg, in_ch, seed=seed)
    D = None
    if weights.uses_discriminator:
        D = Discriminator(disc_cfg, samples[0].condition.shape[-1] + 1, seed=seed + 1)
    opt_g = Adam(G.params, opt.lr, opt.beta1, opt.beta2, opt.eps)
    opt_d = Adam(D.params, opt.lr, opt.beta1, opt.beta2, opt.eps) if D else None
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_log.jsonl").write_text("")
    history, steps = [], 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        sums = {"loss_d": 0.0, "loss_g": 0.0, "gan": 0.0, "fm": 0.0, "l1": 0.0}
        n = 0
        for i in order:
            s = samples[i]
            if D is not None:
                with no_grad():
                    fake = G(s.svg).value
                opt_d.zero_grad()
                loss_d = discriminator_objective(D, s, fake, weights.adversarial)
                backward(loss_d)
                opt_d.step()
                sums["loss_d"] += float(loss_d.value)
            opt_g.zero_grad()
            loss_g, _, parts = generator_objective(G, D, s, weights)
            backward(loss_g)
            opt_g.step()
            if D is not None:
                opt_d.zero_grad()
            sums["loss_g"] += float(loss_g.value)
            for k in ("gan", "fm", "l1"):
                sums[k] += float(parts[k].value)
            n += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        row = {"epoch": epoch, "steps": steps, **{k: v / n for k, v in sums.items()}}
        row.update(evaluate(G, val_samples) if val_samples else {"val_psnr": None,
                                                                  "val_ssim": None})
        history.append(row)
        if log:
            log(row)
        if out_dir:
            with open(out_dir / "train_log.jsonl", "a") as fh:
                fh.write(dumps_line(row) + "\n")
            save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckp", G, D, opt_g, opt_d,
                            gen_cfg, disc_cfg, meta)
        if max_steps is not None and steps >= max_steps:
            break
        if stop_when is not None and stop_when(row, G):
            break
    return TrainResult(G, D, history)


def save_checkpoint(path, G, D, opt_g, opt_d, gen_cfg, disc_cfg, meta=None) -> None:
    params = {f"generator.{n}": v for n, v in G.state_dict().items()}
    adam = {"step": opt_g.step_count,
            "m": {f"generator.{n}": v for n, v in opt_g.m.items()},
            "v": {f"generator.{n}": v for n, v in opt_g.v.items()}}
    if D is not None:
        params.update({f"discriminator.{n}": v for n, v in D.state_dict().items()})
        adam["m"].update({f"discriminator.{n}": v for n, v in opt_d.m.items()})
        adam["v"].update({f"discriminator.{n}": v for n, v in opt_d.v.items()})
    info = {"generator": asdict(gen_cfg), "discriminator": asdict(disc_cfg),
            "in_channels": G.in_channels, **(meta or {})}
    write_checkpoint(path, params, adam, info)


def load_generator(params: dict, meta: dict) -> Generator:
    cfg = GeneratorConfig(**meta["generator"])
    G = Generator(cfg, int(meta["in_channels"]))
    prefix = "generator."
    G.load_state_dict({n[len(prefix):]: v for n, v in params.items() if n.startswith(prefix)})
    return G
