"""A small FiLM-conditioned MLP noise predictor with hand-written backprop.

Network (scalar ``x`` and ``z``)::

    emb   = [sin(w s), cos(w s), z] @ W_emb + b_emb            (width H)
    h0    = [x / (1 + sigma(s)), z]
    h_l   = gelu(film_l(h_{l-1} @ W_l + c_l)),  l = 1 .. L-1
    film_l(u) = (emb @ A_l + a_l) * u + (emb @ B_l + b_l)
    eps   = h_{L-1} @ W_L + c_L

Trained on ``mean |eps(x0 + sigma(s) noise, z, s) - noise|^2``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .flows import ConditionalFlowField, as_points
from .schedules import LogLinearVE

__all__ = [
    "TrainingDivergedError",
    "Architecture",
    "TinyFlowNet",
    "TrainConfig",
    "AdamW",
    "cosine_lr",
    "train",
    "TinyFlowRegressor",
    "NetFlow",
    "save_model",
    "load_model",
    "read_model_header",
]

MAGIC = b"SDFLOW\x00\x00"
FORMAT_VERSION = 1
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration):
        super().__init__(f"non-finite training loss at iteration {iteration}")
        self.iteration = iteration


def gelu(u):
    return u * ndtr(u)


def gelu_grad(u):
    return ndtr(u) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


@dataclass(frozen=True)
class Architecture:
    width: int = 64
    n_layers: int = 5
    n_freq: int = 16
    freq_min: float = 1.0
    freq_max: float = 1000.0
    activation: str = "gelu"

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.activation != "gelu":
            raise ValueError("only the gelu activation is implemented")

    @property
    def frequencies(self):
        return np.geomspace(self.freq_min, self.freq_max, self.n_freq)

    def layout(self):
        H, L = self.width, self.n_layers
        spec = [("W_emb", (2 * self.n_freq + 1, H)), ("b_emb", (H,))]
        fan_in = 2
        for l in range(1, L):
            spec += [
                (f"W{l}", (fan_in, H)), (f"c{l}", (H,)),
                (f"A{l}", (H, H)), (f"a{l}", (H,)),
                (f"B{l}", (H, H)), (f"b{l}", (H,)),
            ]
            fan_in = H
        spec += [(f"W{L}", (H, 1)), (f"c{L}", (1,))]
        return spec


class TinyFlowNet:
    """Parameters live in one flat vector; ``params`` holds named views into it."""

    def __init__(self, arch: Architecture, schedule: LogLinearVE, theta: np.ndarray | None = None):
        self.arch = arch
        self.schedule = schedule
        self.layout = arch.layout()
        self.size = sum(int(np.prod(shape)) for _, shape in self.layout)
        self.theta = np.zeros(self.size) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {self.theta.shape}")
        self.params = self._views(self.theta)

    def _views(self, flat):
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = flat[i:i + n].reshape(shape)
            i += n
        return out

    @classmethod
    def initialize(cls, arch, schedule, rng, zero_final=True):
        net = cls(arch, schedule)
        p = net.params
        for name, shape in net.layout:
            if name.startswith("W") or name.startswith("A") or name.startswith("B"):
                scale = np.sqrt(1.0 / shape[0])
                if name[0] in "AB":
                    scale *= 0.1
                p[name][...] = scale * rng.standard_normal(shape)
            elif name.startswith("a"):
                p[name][...] = 1.0
        L = arch.n_layers
        if zero_final:
            p[f"W{L}"][...] = 0.0
            p[f"c{L}"][...] = 0.0
        return net

    def copy(self):
        return TinyFlowNet(self.arch, self.schedule, self.theta.copy())

    def _features(self, s, z):
        w = self.arch.frequencies
        ang = s[:, None] * w[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang), z[:, None]], axis=1)

    def _inputs(self, x, z, s):
        x = np.asarray(x, dtype=float).reshape(-1)
        n = x.shape[0]
        z = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1), (n,)) if np.size(z) in (1, n) else None
        if z is None:
            raise ValueError("z must be a scalar or match the batch size")
        s = np.broadcast_to(np.asarray(s, dtype=float).reshape(-1), (n,))
        return x, np.array(z), np.array(s)

    def forward(self, x, z, s, cache=False, film=True):
        """Noise prediction, shape ``(n,)``; ``film=False`` drops the modulation."""
        x, z, s = self._inputs(x, z, s)
        p = self.params
        L = self.arch.n_layers
        feats = self._features(s, z)
        emb = feats @ p["W_emb"] + p["b_emb"]
        h = np.stack([x / (1.0 + self.schedule.sigma(s)), z], axis=1)
        layers = []
        for l in range(1, L):
            pre = h @ p[f"W{l}"] + p[f"c{l}"]
            if film:
                gam = emb @ p[f"A{l}"] + p[f"a{l}"]
                bet = emb @ p[f"B{l}"] + p[f"b{l}"]
                m = gam * pre + bet
            else:
                gam = None
                m = pre
            layers.append((h, pre, gam, m))
            h = gelu(m)
        out = (h @ p[f"W{L}"] + p[f"c{L}"])[:, 0]
        if cache:
            return out, (feats, emb, layers, h)
        return out

    def backward(self, dout, cache) -> np.ndarray:
        """Gradient of ``sum(dout * out)`` w.r.t. the flat parameter vector."""
        feats, emb, layers, h_last = cache
        p = self.params
        L = self.arch.n_layers
        grad = np.zeros_like(self.theta)
        g = self._views(grad)
        dout = dout[:, None]
        g[f"W{L}"][...] = h_last.T @ dout
        g[f"c{L}"][...] = dout.sum(axis=0)
        dh = dout @ p[f"W{L}"].T
        demb = np.zeros_like(emb)
        for l in range(L - 1, 0, -1):
            h_in, pre, gam, m = layers[l - 1]
            dm = dh * gelu_grad(m)
            g[f"b{l}"][...] = dm.sum(axis=0)
            g[f"B{l}"][...] = emb.T @ dm
            dgam = dm * pre
            g[f"a{l}"][...] = dgam.sum(axis=0)
            g[f"A{l}"][...] = emb.T @ dgam
            demb += dm @ p[f"B{l}"].T + dgam @ p[f"A{l}"].T
            dpre = dm * gam
            g[f"W{l}"][...] = h_in.T @ dpre
            g[f"c{l}"][...] = dpre.sum(axis=0)
            dh = dpre @ p[f"W{l}"].T
        g["W_emb"][...] = feats.T @ demb
        g["b_emb"][...] = demb.sum(axis=0)
        return grad

    def loss_and_grad_at(self, x0, z, s, noise):
        """Loss and gradient for fixed times and noise draws."""
        sig = self.schedule.sigma(np.asarray(s, dtype=float))
        xs = np.asarray(x0, dtype=float) + sig * noise
        out, cache = self.forward(xs, z, s, cache=True)
        resid = out - noise
        loss = float(np.mean(resid**2))
        return loss, self.backward(2.0 * resid / resid.shape[0], cache)


def loss_and_grad(net: TinyFlowNet, x0, z, train_times, rng):
    """Sample a time per item from ``train_times`` and a fresh noise draw; return ``(loss, grad)``."""
    n = np.asarray(x0).shape[0]
    s = train_times[rng.integers(0, len(train_times), size=n)]
    noise = rng.standard_normal(n)
    return net.loss_and_grad_at(x0, z, s, noise)


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch: int = 128
    lr: float = 4e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_steps: int = 1024
    dataset_size: int = 100_000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        for name in ("iterations", "batch", "train_steps", "dataset_size", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")


def cosine_lr(base, it, total):
    return 0.5 * base * (1.0 + np.cos(np.pi * it / total))


class AdamW:
    """Adam with decoupled weight decay: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``."""

    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)
        return theta


def train(net: TinyFlowNet, data: np.ndarray, config: TrainConfig):
    """Train in place on rows ``(z, x)``; return ``(net, [(iteration, loss), ...])``."""
    data = np.asarray(data, dtype=float)
    rng = np.random.default_rng(config.seed)
    times = np.linspace(0.0, 1.0, config.train_steps)
    opt = AdamW(net.size, config.beta1, config.beta2, config.eps, config.weight_decay)
    curve = []
    window = []
    for it in range(config.iterations):
        idx = rng.integers(0, data.shape[0], size=config.batch)
        loss, grad = loss_and_grad(net, data[idx, 1], data[idx, 0], times, rng)
        if not np.isfinite(loss):
            raise TrainingDivergedError(it)
        opt.step(net.theta, grad, cosine_lr(config.lr, it, config.iterations))
        window.append(loss)
        if (it + 1) % config.log_every == 0 or it == 0:
            curve.append((it + 1 if it else 0, float(np.mean(window))))
            window = []
    return net, curve


class NetFlow(ConditionalFlowField):
    """A trained network seen as a conditional flow with ``velocity = sigma_dot * eps``."""

    def __init__(self, net: TinyFlowNet):
        super().__init__(net.schedule)
        self.net = net

    def epsilon(self, x, z, s):
        x = as_points(x)
        return self.net.forward(x[:, 0], z, s)[:, None]


class TinyFlowRegressor(BaseEstimator):
    """Estimator wrapper around ``TinyFlowNet``.

    ``fit(X)`` takes rows ``(z, x)``; ``predict(X, s)`` returns the noise
    prediction at the given rows ``(z, x_s)`` and time ``s``.
    """

    def __init__(self, width=64, n_layers=5, n_freq=16, sigma_min=8e-3, sigma_max=10.0,
                 iterations=10_000, batch_size=128, lr=4e-3, weight_decay=0.01,
                 train_steps=1024, random_state=0):
        self.width = width
        self.n_layers = n_layers
        self.n_freq = n_freq
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.train_steps = train_steps
        self.random_state = random_state

    def _train_config(self, n):
        return TrainConfig(iterations=self.iterations, batch=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, train_steps=self.train_steps,
                           dataset_size=n, seed=self.random_state)

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=2)
        if X.shape[1] != 2:
            raise ValueError("X must have two columns (z, x)")
        arch = Architecture(self.width, self.n_layers, self.n_freq)
        schedule = LogLinearVE(self.sigma_min, self.sigma_max)
        net = TinyFlowNet.initialize(arch, schedule, np.random.default_rng(self.random_state))
        self.net_, self.loss_curve_ = train(net, X, self._train_config(X.shape[0]))
        return self

    def predict(self, X, s):
        check_is_fitted(self, "net_")
        X = check_array(X)
        return self.net_.forward(X[:, 1], X[:, 0], s)

    def as_flow(self) -> NetFlow:
        check_is_fitted(self, "net_")
        return NetFlow(self.net_)


def save_model(net: TinyFlowNet, path, meta: dict | None = None) -> None:
    """Write magic, format version, JSON descriptor, then little-endian float64 parameters.

    ``meta`` (config echo, seed, loss log, ...) is stored in the descriptor.
    """
    header = json.dumps({
        "architecture": asdict(net.arch),
        "schedule": net.schedule.to_config(),
        "n_params": net.size,
        "meta": meta or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(net.theta.astype("<f8").tobytes())


def _split(path):
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    return json.loads(blob[16:16 + hlen]), blob[16 + hlen:]


def read_model_header(path) -> dict:
    return _split(path)[0]


def load_model(path) -> TinyFlowNet:
    header, payload = _split(path)
    if len(payload) != 8 * header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} parameters, file is truncated or padded")
    theta = np.frombuffer(payload, dtype="<f8").astype(float)
    sched = header["schedule"]
    net = TinyFlowNet(Architecture(**header["architecture"]),
                      LogLinearVE(sched["sigma_min"], sched["sigma_max"]), theta)
    return net
