"""Beta-VAE over level grids.

Encoder: a stack of 3x3 convolutions over the one-hot grid (a graph
convolution on the grid graph reduces to this) followed by two dense layers.
Decoder: three dense layers feeding three heads, a per-cell categorical over
[Empty, Moss, Lava, Wall] and one categorical over cells each for the start
and the goal. Decoding masks the start/goal heads so every output is valid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import nn_core
from .grid_env import LevelParams, TileType

# decoder layout classes, in head order
LAYOUT_TILES = np.array([TileType.EMPTY, TileType.MOSS, TileType.LAVA, TileType.WALL], dtype=np.int8)
_TILE_TO_CLASS = np.full(len(TileType), -1, dtype=np.int64)
_TILE_TO_CLASS[LAYOUT_TILES] = np.arange(4)
_NAVIGABLE_CLASS = np.array([True, True, False, False])
N_INPUT_TILES = 6  # Empty..Start


class NoNavigableCell(RuntimeError):
    pass


@dataclass
class LatentCode:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma shapes differ")
        if not (self.sigma > 0).all():
            raise ValueError("sigma must be positive")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal(self.mu.shape)


class VaeNet(nn.Module):
    def __init__(self, height, width, latent_dim=64, conv_layers=4, conv_width=12,
                 enc_width=2048, bottleneck=256, dec_layers=3, dec_width=256):
        super().__init__()
        self.height, self.width = height, width
        cells = height * width
        convs, ch = [], N_INPUT_TILES
        for _ in range(conv_layers):
            convs += [nn.Conv2d(ch, conv_width, 3, padding=1), nn.ReLU()]
            ch = conv_width
        self.conv = nn.Sequential(*convs)
        self.enc = nn.Sequential(nn.Linear(ch * cells, enc_width), nn.ReLU(),
                                 nn.Linear(enc_width, bottleneck), nn.ReLU())
        self.mu = nn.Linear(bottleneck, latent_dim)
        self.log_sigma = nn.Linear(bottleneck, latent_dim)
        dec, d = [], latent_dim
        for _ in range(dec_layers):
            dec += [nn.Linear(d, dec_width), nn.ReLU()]
            d = dec_width
        self.dec = nn.Sequential(*dec)
        self.layout_head = nn.Linear(d, cells * 4)
        self.start_head = nn.Linear(d, cells)
        self.goal_head = nn.Linear(d, cells)

    def encode(self, grids: torch.Tensor):
        x = F.one_hot(grids.long(), N_INPUT_TILES).permute(0, 3, 1, 2).to(nn_core.DTYPE)
        e = self.enc(self.conv(x).flatten(1))
        return self.mu(e), self.log_sigma(e)

    def decode(self, z: torch.Tensor):
        d = self.dec(z)
        layout = self.layout_head(d).reshape(-1, self.height * self.width, 4)
        return layout, self.start_head(d), self.goal_head(d)


def _grids(levels) -> np.ndarray:
    levels = list(levels)
    shapes = {lv.grid.shape for lv in levels}
    if len(shapes) != 1:
        raise nn_core.ShapeMismatch(f"levels have mixed shapes {sorted(shapes)}")
    return np.stack([lv.grid for lv in levels]).astype(np.int64)


def layout_targets(grids: np.ndarray) -> np.ndarray:
    """Soft layout targets; Start/Goal cells get 1/2 Empty + 1/2 Moss."""
    flat = grids.reshape(len(grids), -1)
    tgt = np.zeros(flat.shape + (4,))
    cls = _TILE_TO_CLASS[np.clip(flat, 0, len(TileType) - 1)]
    plain = cls >= 0
    tgt[plain, cls[plain]] = 1.0
    sg = ~plain
    tgt[sg, 0] = 0.5
    tgt[sg, 1] = 0.5
    return tgt


def kl_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma) || N(0, I)) summed over the last axis."""
    return 0.5 * (mu**2 + torch.exp(2 * log_sigma) - 1.0 - 2 * log_sigma).sum(-1)


def reconstruction_terms(layout_logits, start_logits, goal_logits, grids: np.ndarray):
    """Per-level cross-entropies (layout summed over cells, start, goal)."""
    flat = grids.reshape(len(grids), -1)
    tgt = torch.from_numpy(layout_targets(grids))
    ce_layout = -(tgt * F.log_softmax(layout_logits, dim=-1)).sum(dim=(1, 2))
    start_idx = torch.from_numpy((flat == TileType.START).argmax(axis=1))
    goal_idx = torch.from_numpy((flat == TileType.GOAL).argmax(axis=1))
    ce_start = F.cross_entropy(start_logits, start_idx, reduction="none")
    ce_goal = F.cross_entropy(goal_logits, goal_idx, reduction="none")
    return ce_layout, ce_start, ce_goal


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation of directions with linearly interpolated norms."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return (1 - t) * a + t * b
    ua, ub = a / na, b / nb
    dot = float(np.clip(ua @ ub, -1.0, 1.0))
    norm = (1 - t) * na + t * nb
    if dot > 1 - 1e-12:
        return norm * ua
    if dot < -1 + 1e-12:
        # antipodal: rotate through a fixed orthogonal direction
        e = np.zeros_like(ua)
        e[int(np.argmin(np.abs(ua)))] = 1.0
        perp = e - (e @ ua) * ua
        perp /= np.linalg.norm(perp)
        return norm * (math.cos(math.pi * t) * ua + math.sin(math.pi * t) * perp)
    omega = math.acos(dot)
    so = math.sin(omega)
    u = (math.sin((1 - t) * omega) / so) * ua + (math.sin(t * omega) / so) * ub
    return norm * u / np.linalg.norm(u)


def interpolate_codes(a: LatentCode, b: LatentCode, K: int) -> list[LatentCode]:
    """K codes strictly between ``a`` and ``b`` at fractions k / (K + 1).

    Means follow slerp; sigmas interpolate linearly in log space.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    out = []
    for k in range(1, K + 1):
        t = k / (K + 1)
        mu = slerp(a.mu, b.mu, t)
        sigma = np.exp((1 - t) * np.log(a.sigma) + t * np.log(b.sigma))
        out.append(LatentCode(mu, sigma))
    return out


class LevelVAE(TransformerMixin, BaseEstimator):
    """sklearn-style wrapper: ``fit`` pre-trains, ``transform`` encodes to
    latent means, ``inverse_transform`` decodes valid levels."""

    def __init__(self, latent_dim=64, beta=0.0448, layout_coef=0.04, startgoal_coef=0.013,
                 variational_samples=1, lr=4e-4, epochs=200, batch_size=32, conv_layers=4,
                 conv_width=12, enc_width=2048, bottleneck=256, dec_layers=3, dec_width=256, seed=0):
        self.latent_dim = latent_dim
        self.beta = beta
        self.layout_coef = layout_coef
        self.startgoal_coef = startgoal_coef
        self.variational_samples = variational_samples
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.conv_layers = conv_layers
        self.conv_width = conv_width
        self.enc_width = enc_width
        self.bottleneck = bottleneck
        self.dec_layers = dec_layers
        self.dec_width = dec_width
        self.seed = seed

    # -- construction
    def init_network(self, height: int, width: int) -> "LevelVAE":
        for name in ("beta", "layout_coef", "startgoal_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.shape_ = (height, width)
        self.net_ = nn_core.build(lambda: VaeNet(height, width, self.latent_dim, self.conv_layers, self.conv_width,
                                                 self.enc_width, self.bottleneck, self.dec_layers, self.dec_width),
                                  self.seed)
        self.elbo_curve_ = []
        return self

    def _check_shape(self, grids):
        check_is_fitted(self, "net_")
        if grids.shape[1:] != self.shape_:
            raise nn_core.ShapeMismatch(f"expected {self.shape_} grids, got {grids.shape[1:]}")

    # -- objective
    def elbo_loss(self, levels, eps=None, seed=None):
        """Returns (loss, dict of mean reconstruction terms, mean KL).

        ``eps`` fixes the reparameterisation noise (shape (n, latent_dim));
        otherwise it is drawn from ``seed``.
        """
        grids = levels if isinstance(levels, np.ndarray) else _grids(levels)
        self._check_shape(grids)
        mu, log_sigma = self.net_.encode(torch.from_numpy(grids))
        if eps is None:
            eps = np.random.default_rng(seed).standard_normal(tuple(mu.shape))
        z = mu + torch.exp(log_sigma) * nn_core.as_tensor(eps)
        ce_layout, ce_start, ce_goal = reconstruction_terms(*self.net_.decode(z), grids)
        kl = kl_standard_normal(mu, log_sigma).mean()
        recon = {"layout": ce_layout.mean(), "start": ce_start.mean(), "goal": ce_goal.mean()}
        loss = (self.layout_coef * recon["layout"]
                + self.startgoal_coef * (recon["start"] + recon["goal"]) + self.beta * kl)
        if not torch.isfinite(loss):
            raise nn_core.NonFiniteValue(f"ELBO loss is {float(loss)}")
        return loss, recon, kl

    def fit(self, levels, y=None, epochs=None):
        levels = list(levels)
        if len(levels) < 2:
            raise ValueError("need at least 2 training levels")
        grids = _grids(levels)
        self.init_network(*grids.shape[1:])
        opt = nn_core.Adam(self.net_.parameters(), lr=self.lr, eps=1e-8)
        rng = np.random.default_rng(self.seed)
        n = len(grids)
        for _ in range(self.epochs if epochs is None else epochs):
            order = rng.permutation(n)
            total = 0.0
            for b0 in range(0, n, self.batch_size):
                idx = order[b0:b0 + self.batch_size]
                eps = rng.standard_normal((len(idx), self.latent_dim))
                loss = opt.minimize(lambda: self.elbo_loss(grids[idx], eps=eps)[0])
                total += loss * len(idx)
            self.elbo_curve_.append(-total / n)
        self.train_codes_ = self.encode(levels)
        return self

    # -- inference
    @torch.no_grad()
    def encode(self, levels) -> list[LatentCode]:
        grids = _grids(levels)
        self._check_shape(grids)
        mu, log_sigma = self.net_.encode(torch.from_numpy(grids))
        sig = torch.exp(log_sigma).numpy()
        return [LatentCode(m, s) for m, s in zip(mu.numpy(), sig)]

    def transform(self, levels) -> np.ndarray:
        return np.stack([c.mu for c in self.encode(levels)])

    @torch.no_grad()
    def decoder_probs(self, Z):
        check_is_fitted(self, "net_")
        layout, start, goal = self.net_.decode(nn_core.as_tensor(np.atleast_2d(Z)))
        return (F.softmax(layout, -1).numpy(), start.numpy(), goal.numpy())

    def _sample_valid(self, layout_p, start_logits, goal_logits, rng, max_tries=10) -> LevelParams:
        h, w = self.shape_
        cdf = np.cumsum(layout_p, axis=1)
        for _ in range(max_tries):
            u = rng.random(len(layout_p))
            cls = np.minimum((u[:, None] > cdf).sum(axis=1), 3)
            nav = _NAVIGABLE_CLASS[cls]
            if nav.sum() >= 2:
                break
        else:
            raise NoNavigableCell(f"no layout with two navigable cells after {max_tries} samples")
        grid = LAYOUT_TILES[cls].copy()
        start = _masked_choice(start_logits, nav, rng)
        nav_goal = nav.copy()
        nav_goal[start] = False
        goal = _masked_choice(goal_logits, nav_goal, rng)
        grid[start], grid[goal] = TileType.START, TileType.GOAL
        return LevelParams(grid.reshape(h, w))

    def decode_valid(self, z, seed) -> LevelParams:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        layout, start, goal = self.decoder_probs(z)
        return self._sample_valid(layout[0], start[0], goal[0], rng)

    def decode_valid_batch(self, Z, rng: np.random.Generator, skip_failures: bool = False) -> list:
        layout, start, goal = self.decoder_probs(Z)
        out = []
        for i in range(len(layout)):
            try:
                out.append(self._sample_valid(layout[i], start[i], goal[i], rng))
            except NoNavigableCell:
                if not skip_failures:
                    raise
                out.append(None)
        return out

    def inverse_transform(self, Z, seed=0) -> list:
        return self.decode_valid_batch(Z, np.random.default_rng(seed))

    def reconstruct(self, levels, seed=0) -> list:
        """Encode, draw one z per level from q(z|x), decode a valid level."""
        rng = np.random.default_rng(seed)
        codes = self.encode(levels)
        return self.decode_valid_batch(np.stack([c.sample(rng) for c in codes]), rng)

    @torch.no_grad()
    def reconstruction_accuracy(self, levels) -> float:
        """Argmax layout accuracy on cells other than Start/Goal, decoding from the means."""
        grids = _grids(levels)
        layout, _, _ = self.decoder_probs(self.transform(levels))
        pred = LAYOUT_TILES[layout.argmax(-1)]
        flat = grids.reshape(len(grids), -1)
        mask = (flat != TileType.START) & (flat != TileType.GOAL)
        return float((pred[mask] == flat[mask]).mean())

    # -- persistence
    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {"params": self.get_params(), "shape": list(self.shape_), "elbo_curve": list(self.elbo_curve_)}
        return nn_core.save_module(self.net_, path, meta)

    @classmethod
    def load(cls, path) -> "LevelVAE":
        _, meta = nn_core.load_arrays(path)
        vae = cls(**meta["params"]).init_network(*meta["shape"])
        nn_core.load_module(vae.net_, path)
        vae.elbo_curve_ = list(meta["elbo_curve"])
        return vae


def _masked_choice(logits: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> int:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))
