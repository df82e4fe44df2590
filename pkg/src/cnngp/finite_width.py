"""Finite-width random CNNs drawn from the prior, and Monte-Carlo moment checks.

Two samplers produce outputs with the same distribution:

* :func:`sample_network` + :func:`forward` draws every filter and bias and
  runs an ordinary forward pass.
* the layerwise sampler used by :func:`empirical_moments` exploits that,
  given the post-activations of one layer, the next layer's pre-activations
  are an affine function of Gaussian weights and therefore exactly Gaussian,
  with a covariance that is an inner product of input patches.  Each output
  channel is then one draw from that Gaussian.  When a layer's fan-in is
  small compared to the number of (input, position) pairs the weights are
  drawn directly instead.

All randomness comes from Philox streams keyed by ``(seed, stream)``; draws
are grouped into fixed-size chunks, one stream per chunk, and chunk partial
sums are merged in stream order, so reports do not depend on the number of
workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import erf

from .architecture import ArchitectureSpec, FanInMode, Hyperparameters, LayerSpec, Nonlinearity
from .errors import ConfigError
from .kernel import kernel_layers, readout_layer

CHUNK = 1000


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def random_inputs(count: int, size: int, seed: int, channels: int = 1) -> np.ndarray:
    """``count`` images with i.i.d. standard-normal pixels, shape (count, channels, size, size)."""
    rng = rng_stream(seed, 2**32 - 1)  # a stream never used for network draws
    return rng.standard_normal((count, channels, size, size))


def _phi(arch: ArchitectureSpec):
    if arch.nonlinearity is Nonlinearity.ERF:
        return erf
    return lambda a: np.maximum(a, 0.0)


def _fan_in(hyper: Hyperparameters, channels: int, layer: LayerSpec) -> int:
    if hyper.fan_in_mode is FanInMode.CHANNELS_AND_FILTER:
        return channels * layer.filter_area
    return channels


def _layer_list(arch: ArchitectureSpec, input_shape) -> list[LayerSpec]:
    shapes = arch.shapes(tuple(input_shape[-2:]))
    return list(arch.layers) + [readout_layer(shapes[-1])]


@dataclass
class SampledNetwork:
    """Filters ``weights[k]`` of shape (C_out, C_in, fh, fw) and biases per layer.

    The last entry is the dense readout.
    """

    arch: ArchitectureSpec
    hyper: Hyperparameters
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shape: tuple[int, int, int]

    @property
    def channels(self) -> list[int]:
        return [self.input_shape[0]] + [w.shape[0] for w in self.weights]


def sample_network(
    arch: ArchitectureSpec,
    hyper: Hyperparameters,
    channels: int,
    seed: int,
    input_shape: tuple[int, int, int],
    readout_channels: int = 1,
) -> SampledNetwork:
    """Draw all filters and biases of a network with ``channels`` hidden channels."""
    if channels < 1 or readout_channels < 1:
        raise ConfigError("channel counts must be positive")
    rng = rng_stream(seed)
    layers = _layer_list(arch, input_shape)
    c_in = input_shape[0]
    weights, biases = [], []
    for k, layer in enumerate(layers):
        c_out = readout_channels if k == len(layers) - 1 else channels
        std = math.sqrt(hyper.sigma_w_sq / _fan_in(hyper, c_in, layer))
        weights.append(
            std * rng.standard_normal((c_out, c_in, layer.filter_height, layer.filter_width))
        )
        biases.append(math.sqrt(hyper.sigma_b_sq) * rng.standard_normal(c_out))
        c_in = c_out
    return SampledNetwork(arch, hyper, weights, biases, tuple(input_shape))


def _patches(a: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Zero-padded filter windows: (..., C, H, W) -> (..., C, fh, fw, Ho, Wo)."""
    in_hw = a.shape[-2:]
    ho, wo = layer.output_shape(in_hw)
    fh, fw, s = layer.filter_height, layer.filter_width, layer.stride
    pt, pl = layer.pads(in_hw)
    rows, cols = (ho - 1) * s + fh, (wo - 1) * s + fw
    padded = np.zeros(a.shape[:-2] + (rows, cols))
    h, w = min(in_hw[0], rows - pt), min(in_hw[1], cols - pl)
    padded[..., pt : pt + h, pl : pl + w] = a[..., :h, :w]
    win = sliding_window_view(padded, (fh, fw), axis=(-2, -1))[..., ::s, ::s, :, :]
    return np.moveaxis(win, (-2, -1), (-4, -3))


def _conv(a: np.ndarray, weight: np.ndarray, bias: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """(n, C_in, H, W) * (C_out, C_in, fh, fw) -> (n, C_out, Ho, Wo)."""
    p = _patches(a, layer)
    return np.einsum("ncijhw,ocij->nohw", p, weight, optimize=True) + bias[:, None, None]


def forward(net: SampledNetwork, x: np.ndarray) -> np.ndarray:
    """Network outputs for one image (C, H, W) or a batch (n, C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != tuple(net.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match network {net.input_shape}")
    phi = _phi(net.arch)
    layers = _layer_list(net.arch, net.input_shape)
    pre: dict[int, np.ndarray] = {}
    a = _conv(x, net.weights[0], net.biases[0], layers[0])
    pre[1] = a
    for k in range(2, len(layers) + 1):
        layer = layers[k - 1]
        a = _conv(phi(a), net.weights[k - 1], net.biases[k - 1], layer)
        if layer.skip_span is not None:
            a = a + pre[k - layer.skip_span]
        pre[k] = a
    out = a[:, :, 0, 0]
    return out[0] if single else out


# -- layerwise exact sampler ------------------------------------------------


class _LayerwiseSampler:
    """Draws network outputs for a fixed set of inputs, one batch of networks at a time."""

    # activations are carried in single precision; covariances, factors and
    # moment sums are double precision
    dtype = np.float32

    def __init__(self, arch, hyper, channels, inputs, readout_channels=1):
        self.arch, self.hyper = arch, hyper
        self.phi = _phi(arch)
        self.inputs = np.asarray(inputs, dtype=np.float64)
        n, c0, h, w = self.inputs.shape
        self.layers = _layer_list(arch, (c0, h, w))
        self.shapes = arch.shapes((h, w)) + [(1, 1)]
        self.channels = channels
        self.readout_channels = readout_channels
        self.keep = {k - l.skip_span for k, l in enumerate(self.layers, 1) if l.skip_span}
        self.plans = []
        c_in = c0
        for k, layer in enumerate(self.layers, start=1):
            c_out = readout_channels if k == len(self.layers) else channels
            self.plans.append(self._plan(k, layer, c_in, c_out))
            c_in = c_out
        first = self.plans[0]
        if first["mode"] == "gauss":
            x = self.inputs.transpose(1, 0, 2, 3)[None]
            first["fixed_factor"] = self._factor(self._covariance(x, first))[0].astype(self.dtype)

    def _plan(self, k, layer, c_in, c_out):
        in_hw, out_hw = self.shapes[k - 1], self.shapes[k]
        n = self.inputs.shape[0]
        m = n * out_hw[0] * out_hw[1]
        fan = c_in * layer.filter_area
        plan = {
            "layer": layer,
            "c_in": c_in,
            "c_out": c_out,
            "m": m,
            "coef": self.hyper.sigma_w_sq / _fan_in(self.hyper, c_in, layer),
            "mode": "gauss" if fan + 1 > m else "weights",
        }
        if plan["mode"] == "gauss":
            # flat index of the padded input cell read by each (filter offset, output cell)
            fh, fw, s = layer.filter_height, layer.filter_width, layer.stride
            rows, cols = (out_hw[0] - 1) * s + fh, (out_hw[1] - 1) * s + fw
            pt, pl = layer.pads(in_hw)
            src = -np.ones((n, rows, cols), dtype=np.int64)
            h, w = min(in_hw[0], rows - pt), min(in_hw[1], cols - pl)
            base = np.arange(n * in_hw[0] * in_hw[1]).reshape(n, *in_hw)
            src[:, pt : pt + h, pl : pl + w] = base[:, :h, :w]
            win = sliding_window_view(src, (fh, fw), axis=(1, 2))[:, ::s, ::s]
            idx = win.reshape(m, fh * fw).T
            # sparse map: flat input Gram (M*M) -> flat patch covariance (m*m)
            big = n * in_hw[0] * in_hw[1]
            rows_, cols_ = [], []
            for off in idx:
                ok = np.flatnonzero(off >= 0)
                r = (ok[:, None] * m + ok[None, :]).ravel()
                c = (off[ok][:, None] * big + off[ok][None, :]).ravel()
                rows_.append(r)
                cols_.append(c)
            r, c = np.concatenate(rows_), np.concatenate(cols_)
            plan["gather"] = sparse.csr_matrix(
                (np.full(r.size, plan["coef"]), (r, c)), shape=(m * m, big * big)
            )
        return plan

    def _covariance(self, post: np.ndarray, plan) -> np.ndarray:
        """Covariance of one output channel's pre-activations over (input, position).

        ``post`` has shape (d, C_in, n, H, W).
        """
        d, m = post.shape[0], plan["m"]
        flat = post.reshape(d, post.shape[1], -1)
        gram = np.matmul(flat.transpose(0, 2, 1), flat).reshape(d, -1).astype(np.float64)
        sigma = (plan["gather"] @ gram.T).T.reshape(d, m, m)
        sigma += self.hyper.sigma_b_sq
        return sigma

    @staticmethod
    def _factor(sigma: np.ndarray) -> np.ndarray:
        """Any ``L`` with ``L @ L.T == sigma`` (batched); Cholesky, else eigh."""
        try:
            return np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(sigma)
            return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]

    def draw(self, rng: np.random.Generator, d: int) -> np.ndarray:
        """Outputs of ``d`` independent networks: (d, n_inputs, readout_channels)."""
        n, dt = self.inputs.shape[0], self.dtype
        x = self.inputs.transpose(1, 0, 2, 3).astype(dt)
        post = np.broadcast_to(x[None], (d,) + x.shape)
        history: dict[int, np.ndarray] = {}
        for k, plan in enumerate(self.plans, start=1):
            layer, c_out = plan["layer"], plan["c_out"]
            out_hw = self.shapes[k]
            if plan["mode"] == "gauss":
                if k == 1:
                    factor = np.broadcast_to(plan["fixed_factor"], (d, plan["m"], plan["m"]))
                else:
                    factor = self._factor(self._covariance(post, plan)).astype(dt)
                z = rng.standard_normal((d, c_out, plan["m"]), dtype=dt)
                pre = np.matmul(z, factor.transpose(0, 2, 1))
            else:
                # (d, C, n, H, W) -> patches (d, n, C, fh, fw, Ho, Wo)
                p = _patches(post.transpose(0, 2, 1, 3, 4), layer)
                kdim = plan["c_in"] * layer.filter_area
                p = p.reshape(d, n, kdim, -1).transpose(0, 2, 1, 3).reshape(d, kdim, -1)
                u = rng.standard_normal((d, c_out, kdim), dtype=dt) * dt(math.sqrt(plan["coef"]))
                b = rng.standard_normal((d, c_out, 1), dtype=dt) * dt(math.sqrt(self.hyper.sigma_b_sq))
                pre = np.matmul(u, p) + b
            pre = pre.reshape(d, c_out, n, *out_hw)
            if layer.skip_span is not None:
                pre = pre + history[k - layer.skip_span]
            if k in self.keep:
                history[k] = pre
            post = self.phi(pre) if k < len(self.plans) else pre
        return post[:, :, :, 0, 0].transpose(0, 2, 1).astype(np.float64)


# -- moments ------------------------------------------------------------------


@dataclass
class MomentEntry:
    entry: str
    kind: str  # "mean", "moment" (E[A(X) A(X')]) or "cross" (different output channels)
    empirical: float
    kernel: float
    se: float

    @property
    def z(self) -> float:
        return (self.empirical - self.kernel) / self.se if self.se > 0 else math.inf


@dataclass
class MomentReport:
    entries: list[MomentEntry]
    samples: int
    channels: int
    seed: int
    meta: dict = field(default_factory=dict)

    def select(self, kind: str) -> list[MomentEntry]:
        return [e for e in self.entries if e.kind == kind]

    def fraction_within(self, bound: float = 3.0, kind: str = "moment") -> float:
        sel = self.select(kind)
        return sum(abs(e.z) < bound for e in sel) / len(sel) if sel else 1.0

    def max_abs_z(self, kind: str = "moment") -> float:
        return max(abs(e.z) for e in self.select(kind))

    def rescored(self, kernel: np.ndarray) -> "MomentReport":
        """Same samples, compared against a different kernel matrix over the inputs."""
        entries = []
        for e in self.entries:
            if e.kind == "moment":
                i, j = self.meta["pairs"][e.entry]
                e = MomentEntry(e.entry, e.kind, e.empirical, float(kernel[i, j]), e.se)
            entries.append(e)
        return MomentReport(entries, self.samples, self.channels, self.seed, dict(self.meta))

    def to_tsv(self, prefix: str = "", header: bool = True) -> str:
        lines = ["entry\tempirical\tkernel\tse\tz"] if header else []
        for e in self.entries:
            lines.append(
                f"{prefix}{e.entry}\t{e.empirical:.10g}\t{e.kernel:.10g}\t{e.se:.6g}\t{e.z:.4f}"
            )
        return "\n".join(lines) + "\n"


def kernel_predictions(inputs: np.ndarray, arch: ArchitectureSpec, hyper: Hyperparameters) -> np.ndarray:
    """Limiting output covariance matrix over a small list of inputs."""
    n = len(inputs)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            for _, t in kernel_layers(inputs[i], inputs[j], arch, hyper):
                pass
            out[i, j] = out[j, i] = float(t.kxy[0, 0])
    return out


def _chunk_sums(args):
    sampler, seed, stream, count, batch, literal = args
    rng = rng_stream(seed, stream)
    n, r = sampler.inputs.shape[0], sampler.readout_channels
    s1 = np.zeros((n, r))
    s2 = np.zeros((n, r))
    prod = np.zeros((n, n, r))
    prod2 = np.zeros((n, n, r))
    cross = np.zeros((n, r, r))
    cross2 = np.zeros((n, r, r))
    done = 0
    while done < count:
        d = min(batch, count - done)
        if literal:
            out = np.stack([_literal_draw(sampler, rng) for _ in range(d)])
        else:
            out = sampler.draw(rng, d)
        s1 += out.sum(0)
        s2 += (out**2).sum(0)
        p = out[:, :, None, :] * out[:, None, :, :]
        prod += p.sum(0)
        prod2 += (p**2).sum(0)
        c = out[:, :, :, None] * out[:, :, None, :]
        cross += c.sum(0)
        cross2 += (c**2).sum(0)
        done += d
    return s1, s2, prod, prod2, cross, cross2


def _literal_draw(sampler: _LayerwiseSampler, rng: np.random.Generator) -> np.ndarray:
    seed = int(rng.integers(0, 2**63))
    net = sample_network(
        sampler.arch, sampler.hyper, sampler.channels, seed,
        sampler.inputs.shape[1:], sampler.readout_channels,
    )
    return forward(net, sampler.inputs)


def _se(s: np.ndarray, s2: np.ndarray, n: int) -> np.ndarray:
    mean = s / n
    var = np.maximum(s2 / n - mean**2, 0.0) * n / (n - 1)
    return np.sqrt(var / n)


def empirical_moments(
    arch: ArchitectureSpec,
    hyper: Hyperparameters,
    channels: int,
    num_samples: int,
    inputs: np.ndarray,
    seed: int,
    readout_channels: int = 1,
    parallelism: int = 1,
    method: str = "layerwise",
    batch: int = 100,
) -> MomentReport:
    """Sample ``num_samples`` networks and compare output moments with the kernel.

    ``method`` is ``"layerwise"`` (exact conditional-Gaussian sampling) or
    ``"literal"`` (explicit filters and forward passes; slow).
    """
    if num_samples < 2:
        raise ConfigError("num_samples must be at least 2")
    if method not in ("layerwise", "literal"):
        raise ConfigError(f"unknown sampling method {method!r}")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[:, None]
    sampler = _LayerwiseSampler(arch, hyper, channels, inputs, readout_channels)
    jobs = [
        (sampler, seed, i, min(CHUNK, num_samples - start), batch, method == "literal")
        for i, start in enumerate(range(0, num_samples, CHUNK))
    ]
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(_chunk_sums, jobs))
    else:
        parts = [_chunk_sums(j) for j in jobs]
    s1, s2, prod, prod2, cross, cross2 = (sum(p[i] for p in parts) for i in range(6))

    n_in = inputs.shape[0]
    kern = kernel_predictions(inputs, arch, hyper)
    se_mean = _se(s1, s2, num_samples)
    se_prod = _se(prod, prod2, num_samples)
    se_cross = _se(cross, cross2, num_samples)
    entries, pairs = [], {}
    for c in range(readout_channels):
        for i in range(n_in):
            entries.append(MomentEntry(f"mean[{i}]/out{c}", "mean", s1[i, c] / num_samples, 0.0, se_mean[i, c]))
        for i in range(n_in):
            for j in range(i, n_in):
                name = f"cov[{i},{j}]/out{c}"
                pairs[name] = (i, j)
                entries.append(
                    MomentEntry(name, "moment", prod[i, j, c] / num_samples, kern[i, j], se_prod[i, j, c])
                )
    for i in range(n_in):
        for c in range(readout_channels):
            for c2 in range(c + 1, readout_channels):
                entries.append(
                    MomentEntry(
                        f"xchan[{i}]/out{c},out{c2}", "cross",
                        cross[i, c, c2] / num_samples, 0.0, se_cross[i, c, c2],
                    )
                )
    return MomentReport(
        entries, num_samples, channels, seed,
        meta={"pairs": pairs, "method": method, "kernel": kern},
    )
