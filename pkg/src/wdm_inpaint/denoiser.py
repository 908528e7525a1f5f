"""Small 3D convolutional x0-predictor with hand-written backpropagation.

All weights live in one flat ``params`` vector and all gradients in a matching
``grads`` vector; layers hold views into both. Activations use the layout
``(N, C, Z, Y, X)`` in float64.

Architecture (per scale ``s`` with ``ch[s] = base_channels * channel_mult[s]``)::

    conv_in(24 -> ch[0])
    down:  ResBlock(-> ch[s]) ; skip_s ; avgpool2  (no pool after the last scale)
    up:    upsample2 ; concat(skip_s) ; ResBlock(-> ch[s])
    conv_out(ch[0] -> 8), zero-initialised

Each ResBlock adds a learned projection of a sinusoidal timestep embedding as a
per-channel bias after its first convolution.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import N_BANDS, N_INPUT_CHANNELS, ConditionedInput, NoiseSchedule, q_sample
from .masking import apply_mask
from .volume import BinaryMask, Volume
from .wavelet import BAND_INDEX, dwt3_array

log = logging.getLogger(__name__)

REG_BANDS = ("hhh", "hhl", "hlh", "lhh")
_ACTIVATIONS = {"silu", "identity"}
_REG_IDX = [BAND_INDEX[b] for b in REG_BANDS]


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    channel_mult: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    temb_dim: int = 16
    kernel_size: int = 3
    activation: str = "silu"
    in_channels: int = N_INPUT_CHANNELS
    out_channels: int = N_BANDS

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        if self.base_channels < 1 or not self.channel_mult or min(self.channel_mult) < 1:
            raise ValueError("channel counts must be positive")
        if self.num_res_blocks < 1:
            raise ValueError("need at least one residual block per scale")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @property
    def num_scales(self) -> int:
        return len(self.channel_mult)


# full-size published architecture; not used by tests
PAPER_NET = NetConfig(base_channels=64, channel_mult=(1, 2, 2, 4, 4), num_res_blocks=2, temb_dim=128)


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _act_forward(kind: str, x):
    if kind == "silu":
        y, s = _silu(x)
        return y, (x, s)
    return x, None


def _act_backward(kind: str, cache, dy):
    if kind == "silu":
        x, s = cache
        return dy * s * (1.0 + x * (1.0 - s))
    return dy


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape ``(len(t), dim)``: sines then cosines."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class _ParamSpec:
    """Collects named parameter shapes before the flat vector is allocated."""

    def __init__(self):
        self.shapes: list[tuple[str, tuple[int, ...]]] = []

    def add(self, name: str, shape: tuple[int, ...]) -> str:
        self.shapes.append((name, shape))
        return name


class Conv3d:
    def __init__(self, spec: _ParamSpec, name: str, cin: int, cout: int, k: int):
        self.cin, self.cout, self.k = cin, cout, k
        self.wname = spec.add(f"{name}.w", (cout, cin * k**3))
        self.bname = spec.add(f"{name}.b", (cout,))

    def bind(self, p: dict, g: dict):
        self.w, self.b = p[self.wname], p[self.bname]
        self.gw, self.gb = g[self.wname], g[self.bname]

    def _cols(self, x):
        n, c, Z, Y, X = x.shape
        k = self.k
        if k == 1:
            return x.reshape(n, c, Z * Y * X)
        r = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r), (r, r)))
        cols = np.empty((n, c, k**3, Z, Y, X))
        i = 0
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    cols[:, :, i] = xp[:, :, dz : dz + Z, dy : dy + Y, dx : dx + X]
                    i += 1
        return cols.reshape(n, c * k**3, Z * Y * X)

    def forward(self, x, cache: list | None):
        n, _, Z, Y, X = x.shape
        cols = self._cols(x)
        out = np.matmul(self.w, cols) + self.b[None, :, None]
        if cache is not None:
            cache.append((cols, x.shape))
        return out.reshape(n, self.cout, Z, Y, X)

    def backward(self, dy, cache: list):
        cols, xshape = cache.pop()
        n, _, Z, Y, X = xshape
        d = dy.reshape(n, self.cout, Z * Y * X)
        self.gw += np.tensordot(d, cols, axes=([0, 2], [0, 2]))
        self.gb += d.sum(axis=(0, 2))
        dcols = np.matmul(self.w.T, d)
        k = self.k
        if k == 1:
            return dcols.reshape(xshape)
        r = k // 2
        dcols = dcols.reshape(n, self.cin, k**3, Z, Y, X)
        dxp = np.zeros((n, self.cin, Z + 2 * r, Y + 2 * r, X + 2 * r))
        i = 0
        for dz in range(k):
            for dy_ in range(k):
                for dx in range(k):
                    dxp[:, :, dz : dz + Z, dy_ : dy_ + Y, dx : dx + X] += dcols[:, :, i]
                    i += 1
        return dxp[:, :, r : r + Z, r : r + Y, r : r + X]


class Dense:
    def __init__(self, spec: _ParamSpec, name: str, din: int, dout: int):
        self.wname = spec.add(f"{name}.w", (dout, din))
        self.bname = spec.add(f"{name}.b", (dout,))

    def bind(self, p: dict, g: dict):
        self.w, self.b = p[self.wname], p[self.bname]
        self.gw, self.gb = g[self.wname], g[self.bname]

    def forward(self, e):
        return e @ self.w.T + self.b

    def backward(self, dy, e):
        self.gw += dy.T @ e
        self.gb += dy.sum(axis=0)


class ResBlock:
    def __init__(self, spec: _ParamSpec, name: str, cin: int, cout: int, k: int, temb_dim: int, act: str):
        self.act = act
        self.conv1 = Conv3d(spec, f"{name}.conv1", cin, cout, k)
        self.temb = Dense(spec, f"{name}.temb", temb_dim, cout)
        self.conv2 = Conv3d(spec, f"{name}.conv2", cout, cout, k)
        self.skip = Conv3d(spec, f"{name}.skip", cin, cout, 1) if cin != cout else None

    def layers(self):
        return [l for l in (self.conv1, self.temb, self.conv2, self.skip) if l is not None]

    def forward(self, x, emb, cache: list | None):
        a1, ac1 = _act_forward(self.act, x)
        h = self.conv1.forward(a1, cache)
        h = h + self.temb.forward(emb)[:, :, None, None, None]
        a2, ac2 = _act_forward(self.act, h)
        h2 = self.conv2.forward(a2, cache)
        s = self.skip.forward(x, cache) if self.skip is not None else x
        if cache is not None:
            cache.append((ac1, ac2))
        return s + h2

    def backward(self, dy, emb, cache: list):
        ac1, ac2 = cache.pop()
        dx = self.skip.backward(dy, cache) if self.skip is not None else dy.copy()
        da2 = self.conv2.backward(dy, cache)
        dh = _act_backward(self.act, ac2, da2)
        self.temb.backward(dh.sum(axis=(2, 3, 4)), emb)
        da1 = self.conv1.backward(dh, cache)
        return dx + _act_backward(self.act, ac1, da1)


def _pool2(x):
    n, c, Z, Y, X = x.shape
    return x.reshape(n, c, Z // 2, 2, Y // 2, 2, X // 2, 2).mean(axis=(3, 5, 7))


def _pool2_backward(dy):
    return np.repeat(np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3), 2, axis=4) / 8.0


def _up2(x):
    return np.repeat(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), 2, axis=4)


def _up2_backward(dy):
    n, c, Z, Y, X = dy.shape
    return dy.reshape(n, c, Z // 2, 2, Y // 2, 2, X // 2, 2).sum(axis=(3, 5, 7))


class DenoiserNet:
    """x0-predictor mapping 24 conditioned channels to 8 wavelet bands."""

    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = cfg = config or NetConfig()
        self.in_channels = cfg.in_channels
        self.out_channels = cfg.out_channels
        spec = _ParamSpec()
        k, act = cfg.kernel_size, cfg.activation
        ch = [cfg.base_channels * m for m in cfg.channel_mult]

        self.conv_in = Conv3d(spec, "conv_in", cfg.in_channels, ch[0], k)
        self.down: list[list[ResBlock]] = []
        cin = ch[0]
        for s, c in enumerate(ch):
            blocks = []
            for j in range(cfg.num_res_blocks):
                blocks.append(ResBlock(spec, f"down{s}.{j}", cin, c, k, cfg.temb_dim, act))
                cin = c
            self.down.append(blocks)
        self.up: list[list[ResBlock]] = []
        for s in range(len(ch) - 2, -1, -1):
            blocks = []
            cin = ch[s + 1] + ch[s]
            for j in range(cfg.num_res_blocks):
                blocks.append(ResBlock(spec, f"up{s}.{j}", cin, ch[s], k, cfg.temb_dim, act))
                cin = ch[s]
            self.up.append(blocks)
        self.conv_out = Conv3d(spec, "conv_out", ch[0], cfg.out_channels, k)

        sizes = [int(np.prod(shape)) for _, shape in spec.shapes]
        self.params = np.zeros(sum(sizes))
        self.grads = np.zeros_like(self.params)
        self._slices: dict[str, slice] = {}
        pviews, gviews = {}, {}
        off = 0
        for (name, shape), size in zip(spec.shapes, sizes):
            self._slices[name] = slice(off, off + size)
            pviews[name] = self.params[off : off + size].reshape(shape)
            gviews[name] = self.grads[off : off + size].reshape(shape)
            off += size
        for layer in self._layers():
            layer.bind(pviews, gviews)
        self._init_params(np.random.default_rng(seed))
        self._cache: list | None = None

    def _blocks(self):
        for blocks in self.down + self.up:
            yield from blocks

    def _layers(self):
        yield self.conv_in
        for b in self._blocks():
            yield from b.layers()
        yield self.conv_out

    def _init_params(self, rng: np.random.Generator) -> None:
        for layer in self._layers():
            if isinstance(layer, Conv3d):
                fan_in = layer.w.shape[1]
                layer.w[...] = rng.standard_normal(layer.w.shape) * np.sqrt(1.0 / fan_in)
            else:
                layer.w[...] = rng.standard_normal(layer.w.shape) * np.sqrt(1.0 / layer.w.shape[1])
        for b in self._blocks():
            # residual branches start near identity
            b.conv2.w *= 0.1
        self.conv_out.w[...] = 0.0
        self.conv_out.b[...] = 0.0

    @property
    def num_params(self) -> int:
        return self.params.size

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {name: self.params[sl] for name, sl in self._slices.items()}

    def check_input(self, X: np.ndarray) -> None:
        if X.ndim != 5 or X.shape[1] != self.in_channels:
            raise ValueError(f"expected input (N, {self.in_channels}, Z, Y, X), got {X.shape}")
        f = 2 ** (self.config.num_scales - 1)
        if any(d % f for d in X.shape[2:]):
            raise ValueError(f"spatial dims {X.shape[2:]} must be divisible by {f}")

    def forward(self, X: np.ndarray, t, keep_cache: bool = True) -> np.ndarray:
        """Predict clean coefficients ``(N, 8, Z, Y, X)`` from stacked inputs ``(N, 24, Z, Y, X)``."""
        X = np.asarray(X, dtype=np.float64)
        self.check_input(X)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],))
        emb = timestep_embedding(t, self.config.temb_dim)
        cache: list | None = [] if keep_cache else None

        h = self.conv_in.forward(X, cache)
        skips = []
        for s, blocks in enumerate(self.down):
            for b in blocks:
                h = b.forward(h, emb, cache)
            if s < len(self.down) - 1:
                skips.append(h)
                h = _pool2(h)
        for blocks in self.up:
            skip = skips.pop()
            h = np.concatenate([_up2(h), skip], axis=1)
            for b in blocks:
                h = b.forward(h, emb, cache)
        a, ac = _act_forward(self.config.activation, h)
        out = self.conv_out.forward(a, cache)
        if cache is not None:
            cache.append(ac)
            self._cache = cache
            self._emb = emb
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for upstream gradient ``dout``; returns d/dX."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        cache, emb = self._cache, self._emb
        ac = cache.pop()
        dh = self.conv_out.backward(dout, cache)
        dh = _act_backward(self.config.activation, ac, dh)
        skip_grads = []
        for blocks in reversed(self.up):
            for b in reversed(blocks):
                dh = b.backward(dh, emb, cache)
            c_up = blocks[0].conv1.cin - self._skip_c(blocks)
            skip_grads.append(dh[:, c_up:])
            dh = _up2_backward(dh[:, :c_up])
        for s in range(len(self.down) - 1, -1, -1):
            if s < len(self.down) - 1:
                dh = _pool2_backward(dh) + skip_grads.pop()
            for b in reversed(self.down[s]):
                dh = b.backward(dh, emb, cache)
        dX = self.conv_in.backward(dh, cache)
        assert not cache, "unconsumed forward cache"
        self._cache = None
        return dX

    def _skip_c(self, blocks) -> int:
        # up blocks for scale s concatenate ch[s+1] (upsampled) with ch[s] (skip)
        return blocks[-1].conv2.cout

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def __call__(self, X: ConditionedInput) -> np.ndarray:
        stacked = X.stacked()[None]
        return self.forward(stacked, X.t, keep_cache=False)[0]

    # checkpoint: little-endian f32 parameter blob + JSON sidecar
    def save(self, path, **meta) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.params.astype("<f4").tofile(path)
        header = {"config": asdict(self.config), "num_params": self.num_params, **meta}
        path.with_suffix(".json").write_text(json.dumps(header, indent=2))
        return path

    @classmethod
    def load(cls, path) -> tuple["DenoiserNet", dict]:
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        net = cls(NetConfig(**header["config"]))
        blob = np.fromfile(path, dtype="<f4")
        if blob.size != net.num_params or header.get("num_params", blob.size) != blob.size:
            raise ValueError(f"checkpoint holds {blob.size} values, architecture needs {net.num_params}")
        net.params[...] = blob.astype(np.float64)
        return net, header


def loss_and_grad(x0_hat: np.ndarray, x0: np.ndarray, lambda_reg: float = 1.0) -> tuple[float, np.ndarray]:
    """Batch loss and its gradient with respect to ``x0_hat``.

    Per sample: mean squared error over all coefficients plus ``lambda_reg``
    times the summed absolute values of the predicted hhh, hhl, hlh and lhh
    bands. Batches (leading axis of a 5D array) average the per-sample loss.
    """
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch {x0_hat.shape} vs {x0.shape}")
    single = x0_hat.ndim == 4
    if single:
        x0_hat, x0 = x0_hat[None], x0[None]
    n = x0_hat.shape[0]
    diff = x0_hat - x0
    mse = float(np.mean(diff**2))
    hf = x0_hat[:, _REG_IDX]
    reg = float(np.abs(hf).sum()) / n
    grad = 2.0 * diff / diff.size
    grad[:, _REG_IDX] += lambda_reg * np.sign(hf) / n
    if single:
        grad = grad[0]
    return mse + lambda_reg * reg, grad


def loss(x0_hat, x0, lambda_reg: float = 1.0) -> float:
    return loss_and_grad(x0_hat, x0, lambda_reg)[0]


def backward(net: DenoiserNet, X: np.ndarray, t, x0: np.ndarray, lambda_reg: float = 1.0) -> tuple[float, np.ndarray]:
    """Forward + backward for one batch; returns (loss, copy of the gradient vector)."""
    net.zero_grad()
    pred = net.forward(X, t)
    value, dpred = loss_and_grad(pred, x0, lambda_reg)
    net.backward(dpred)
    return value, net.grads.copy()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 2000
    seed: int = 0
    lambda_reg: float = 1.0
    grad_clip: float | None = 1.0
    ellipsoid_prob: float = 0.25
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be positive and iterations non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainingSample:
    """A healthy preprocessed volume and the masks it may be trained with."""

    y0: Volume
    masks: list[BinaryMask] = field(default_factory=list)


@dataclass
class TrainResult:
    net: DenoiserNet
    losses: np.ndarray

    def smoothed(self, window: int = 100) -> np.ndarray:
        return smooth(self.losses, window)


def smooth(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def random_ellipsoid(shape_zyx, spacing, rng: np.random.Generator) -> BinaryMask:
    """Random axis-aligned ellipsoid covering roughly 5-25 % of each axis extent."""
    nz, ny, nx = shape_zyx
    ext = np.array([nx * spacing[0], ny * spacing[1], nz * spacing[2]])
    semi = ext * rng.uniform(0.12, 0.3, size=3)
    center = rng.uniform(0.25, 0.75, size=3) * (np.array([nx, ny, nz]) - 1)
    z, y, x = np.ogrid[:nz, :ny, :nx]
    inside = (
        ((x - center[0]) * spacing[0] / semi[0]) ** 2
        + ((y - center[1]) * spacing[1] / semi[1]) ** 2
        + ((z - center[2]) * spacing[2] / semi[2]) ** 2
    ) <= 1.0
    return BinaryMask(inside, spacing)


def _conditioned_batch(samples, x0s, idx, t, eps, masks, s):
    xs, c1s, c2s = [], [], []
    for i, ti, e, m in zip(idx, t, eps, masks):
        y0 = samples[i].y0
        m1 = apply_mask(y0, m)
        xs.append(q_sample(x0s[i], int(ti), e, s))
        c1s.append(dwt3_array(m1.data))
        c2s.append(dwt3_array(m.data.astype(np.float64)))
    X = np.concatenate([np.stack(xs), np.stack(c1s), np.stack(c2s)], axis=1)
    return X


def train(
    net: DenoiserNet,
    dataset: list[TrainingSample],
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    callback=None,
) -> TrainResult:
    """Stochastic gradient descent (with momentum) on the x0-prediction loss.

    Each iteration draws a batch of samples, a timestep per sample from
    ``U{1..T}``, a mask (one of the sample's masks or, with probability
    ``ellipsoid_prob``, a random ellipsoid) and Gaussian noise.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    x0s = [dwt3_array(smp.y0.data) for smp in dataset]
    velocity = np.zeros_like(net.params)
    losses = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + x0s[0].shape)
        masks = []
        for i in idx:
            smp = dataset[i]
            if not smp.masks or rng.random() < cfg.ellipsoid_prob:
                masks.append(random_ellipsoid(smp.y0.data.shape, smp.y0.spacing, rng))
            else:
                masks.append(smp.masks[rng.integers(len(smp.masks))])
        X = _conditioned_batch(dataset, x0s, idx, t, eps, masks, schedule)
        target = np.stack([x0s[i] for i in idx])

        value, _ = backward(net, X, t, target, cfg.lambda_reg)
        g = net.grads
        if cfg.grad_clip is not None:
            norm = float(np.linalg.norm(g))
            if norm > cfg.grad_clip:
                g = g * (cfg.grad_clip / norm)
        velocity = cfg.momentum * velocity - cfg.learning_rate * g
        net.params += velocity
        losses[it] = value
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("iter %d  loss %.5f  smoothed %.5f", it + 1, value, losses[max(0, it - cfg.log_every + 1) : it + 1].mean())
        if callback is not None:
            callback(it, value)
    return TrainResult(net, losses)
