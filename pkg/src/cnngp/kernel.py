"""ConvNet / ResNet Gaussian-process kernel.

The kernel between two images is obtained by propagating, layer by layer,
only the *diagonal* covariances of the activations: for every spatial
position ``mu`` the three numbers ``K_mu(X, X)``, ``K_mu(X, X')`` and
``K_mu(X', X')``.  Each layer then costs one nonlinearity expectation per
position and one all-ones convolution, so a kernel evaluation costs a small
constant times a forward pass of a one-filter-per-layer network.

Everything here works on arrays whose two trailing axes are spatial and
accepts arbitrary leading batch axes; ``cnngp._engine`` holds the compiled
pairwise loop used to assemble large Gram matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .architecture import (
    ArchitectureSpec,
    Hyperparameters,
    LayerSpec,
    Nonlinearity,
    Padding,
    ReluPrefactor,
)
from .errors import ConfigError

CS_TOL = 1e-9


@dataclass(frozen=True)
class KernelTriple:
    """Diagonal covariances ``K(X,X)``, ``K(X,X')``, ``K(X',X')`` at one layer.

    Arrays share a shape ``(..., H, W)``; positions are the trailing two axes.
    """

    kxx: np.ndarray
    kxy: np.ndarray
    kyy: np.ndarray

    @property
    def height(self) -> int:
        return self.kxy.shape[-2]

    @property
    def width(self) -> int:
        return self.kxy.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.kxy.shape[-2:]

    def map(self, fn) -> "KernelTriple":
        return KernelTriple(fn(self.kxx), fn(self.kxy), fn(self.kyy))

    def check(self, tol: float = CS_TOL) -> None:
        """Raise ``ValueError`` if the triple is not a valid set of covariances."""
        if not (self.kxx.shape == self.kxy.shape == self.kyy.shape):
            raise ValueError("kernel triple arrays differ in shape")
        if (self.kxx < 0).any() or (self.kyy < 0).any():
            raise ValueError("negative variance in kernel triple")
        if (np.abs(self.kxy) > np.sqrt(self.kxx * self.kyy) + tol).any():
            raise ValueError("kernel triple violates Cauchy-Schwarz")


def readout_layer(hw: tuple[int, int]) -> LayerSpec:
    """Dense readout as a Valid convolution whose filter covers the whole map."""
    return LayerSpec(hw[0], hw[1], 1, Padding.VALID)


def window_sum(v: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Sum of ``v`` over every filter window of ``layer`` (all-ones convolution).

    Out-of-range positions under Same padding contribute zero.  The sum is
    separable: first along the width, then along the height, each in a fixed
    order, so results do not depend on the batch shape.
    """
    in_hw = v.shape[-2:]
    ho, wo = layer.output_shape(in_hw)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"{layer.filter_height}x{layer.filter_width} filter with stride {layer.stride} "
            f"and {layer.padding.value} padding leaves no output on a {in_hw[0]}x{in_hw[1]} map"
        )
    fh, fw, s = layer.filter_height, layer.filter_width, layer.stride
    pt, pl = layer.pads(in_hw)
    rows, cols = (ho - 1) * s + fh, (wo - 1) * s + fw
    padded = np.zeros(v.shape[:-2] + (rows, cols))
    h, w = min(in_hw[0], rows - pt), min(in_hw[1], cols - pl)
    padded[..., pt : pt + h, pl : pl + w] = v[..., :h, :w]
    span_w = (wo - 1) * s + 1
    acc = padded[..., :, 0:span_w:s].copy()
    for dj in range(1, fw):
        acc += padded[..., :, dj : dj + span_w : s]
    span_h = (ho - 1) * s + 1
    out = acc[..., 0:span_h:s, :].copy()
    for di in range(1, fh):
        out += acc[..., di : di + span_h : s, :]
    return out


def input_kernel(
    x: np.ndarray, xp: np.ndarray, hyper: Hyperparameters, first_layer: LayerSpec
) -> KernelTriple:
    """First-layer diagonal covariances of two images of shape ``(C, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3:] != xp.shape[-3:]:
        raise ValueError(f"image shapes differ or lack a channel axis: {x.shape} vs {xp.shape}")
    if first_layer.padding is Padding.VALID and (
        first_layer.filter_height > x.shape[-2] or first_layer.filter_width > x.shape[-1]
    ):
        raise ConfigError("valid filter larger than the input image")
    return KernelTriple(
        _input_cov(x, x, hyper, first_layer),
        _input_cov(x, xp, hyper, first_layer),
        _input_cov(xp, xp, hyper, first_layer),
    )


def _input_cov(x, xp, hyper: Hyperparameters, layer: LayerSpec) -> np.ndarray:
    channels = x.shape[-3]
    fan_in = channels * hyper.filter_norm(layer.filter_area)
    prod = (x * xp).sum(axis=-3)
    return hyper.sigma_b_sq + (hyper.sigma_w_sq / fan_in) * window_sum(prod, layer)


def _relu_v(kxx, kxy, kyy, factor: float) -> np.ndarray:
    s = np.sqrt(kxx * kyy)
    pos = s > 0
    rho = np.divide(kxy, s, out=np.zeros_like(s), where=pos)
    theta = np.arccos(np.clip(rho, -1.0, 1.0))
    v = factor * s * (np.sin(theta) + (math.pi - theta) * np.cos(theta))
    return np.where(pos, v, 0.0)


def _erf_v(kxx, kxy, kyy) -> np.ndarray:
    denom = np.sqrt((1.0 + 2.0 * kxx) * (1.0 + 2.0 * kyy))
    return (2.0 / math.pi) * np.arcsin(np.clip(2.0 * kxy / denom, -1.0, 1.0))


def _check_variances(t: KernelTriple) -> None:
    if (t.kxx < 0).any() or (t.kyy < 0).any():
        raise ValueError("negative variance passed to a nonlinearity expectation")


def relu_expectation(
    triple: KernelTriple, prefactor: ReluPrefactor | str = ReluPrefactor.STANDARD
) -> np.ndarray:
    """``E[relu(a) relu(a')]`` for zero-mean Gaussians with the triple's covariances.

    ``standard`` uses the 1/(2 pi) arc-cosine prefactor; ``paper-literal``
    uses 1/pi, i.e. twice the Gaussian expectation.
    """
    _check_variances(triple)
    prefactor = ReluPrefactor(prefactor)
    factor = 1 / math.pi if prefactor is ReluPrefactor.PAPER_LITERAL else 0.5 / math.pi
    return _relu_v(triple.kxx, triple.kxy, triple.kyy, factor)


def erf_expectation(triple: KernelTriple) -> np.ndarray:
    """``E[erf(a) erf(a')]`` for zero-mean Gaussians with the triple's covariances."""
    _check_variances(triple)
    return _erf_v(triple.kxx, triple.kxy, triple.kyy)


def expectation(triple: KernelTriple, arch: ArchitectureSpec, hyper: Hyperparameters) -> KernelTriple:
    """Nonlinearity expectations for all three entries of ``triple``."""
    if arch.nonlinearity is Nonlinearity.ERF:
        fn = lambda a, b, c: _erf_v(a, b, c)
    else:
        factor = hyper.relu_factor
        fn = lambda a, b, c: _relu_v(a, b, c, factor)
    _check_variances(triple)
    return KernelTriple(
        fn(triple.kxx, triple.kxx, triple.kxx),
        fn(triple.kxx, triple.kxy, triple.kyy),
        fn(triple.kyy, triple.kyy, triple.kyy),
    )


def patch_sum_propagate(v: np.ndarray, layer: LayerSpec, hyper: Hyperparameters) -> np.ndarray:
    """Next-layer covariance ``sigma_b^2 + sigma_w^2 / norm * sum_{patch} V``."""
    norm = hyper.filter_norm(layer.filter_area)
    return hyper.sigma_b_sq + (hyper.sigma_w_sq / norm) * window_sum(np.asarray(v, float), layer)


def residual_combine(current: KernelTriple, skip: KernelTriple) -> KernelTriple:
    if current.kxy.shape != skip.kxy.shape:
        raise ValueError(
            f"residual shapes differ: {current.kxy.shape} vs {skip.kxy.shape}"
        )
    return KernelTriple(
        current.kxx + skip.kxx, current.kxy + skip.kxy, current.kyy + skip.kyy
    )


def _last_uses(arch: ArchitectureSpec) -> dict[int, int]:
    """For every layer index, the last layer that reads it as a skip source."""
    uses: dict[int, int] = {}
    for k, layer in enumerate(arch.layers, start=1):
        if layer.skip_span is not None:
            uses[k - layer.skip_span] = k
    return uses


def kernel_layers(
    x: np.ndarray,
    xp: np.ndarray,
    arch: ArchitectureSpec,
    hyper: Hyperparameters,
    zero_skips: bool = False,
):
    """Yield ``(index, KernelTriple)`` for layers 1..L and the readout ``L + 1``.

    Only triples still needed by a pending skip are kept in the history.
    With ``zero_skips`` every skip contribution is replaced by the zero
    triple, which must reproduce the same architecture without skips.
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    if x.shape[-3:] != xp.shape[-3:]:
        raise ValueError(f"image shapes differ: {x.shape} vs {xp.shape}")
    arch.validate(x.shape[-2:])
    layers = list(arch.layers)
    if not layers:
        yield 1, input_kernel(x, xp, hyper, readout_layer(x.shape[-2:]))
        return

    last_use = _last_uses(arch)
    history: dict[int, KernelTriple] = {}
    triple = input_kernel(x, xp, hyper, layers[0])
    yield 1, triple
    if 1 in last_use:
        history[1] = triple
    for k in range(2, len(layers) + 2):
        layer = layers[k - 1] if k <= len(layers) else readout_layer(triple.shape)
        v = expectation(triple, arch, hyper)
        triple = v.map(lambda a: patch_sum_propagate(a, layer, hyper))
        if layer.skip_span is not None:
            src = k - layer.skip_span
            skip = history[src]
            if zero_skips:
                skip = skip.map(np.zeros_like)
            triple = residual_combine(triple, skip)
            if last_use.get(src) == k:
                del history[src]
        if k in last_use:
            history[k] = triple
        yield k, triple


def kernel_triple(x, xp, arch: ArchitectureSpec, hyper: Hyperparameters, zero_skips=False):
    """Final (readout) triple for a pair of images; each entry has shape ``(..., 1, 1)``."""
    triple = None
    for _, triple in kernel_layers(x, xp, arch, hyper, zero_skips=zero_skips):
        pass
    return triple


def convnet_kernel(
    x: np.ndarray,
    xp: np.ndarray,
    arch: ArchitectureSpec,
    hyper: Hyperparameters,
    zero_skips: bool = False,
) -> float:
    """Scalar kernel ``k(X, X')`` for images of shape ``(C, H, W)``."""
    return float(kernel_triple(x, xp, arch, hyper, zero_skips).kxy[..., 0, 0])


def self_covariances(
    images: np.ndarray, arch: ArchitectureSpec, hyper: Hyperparameters
) -> list[np.ndarray]:
    """Per-image variance maps ``K^{(k)}(X, X)`` for k = 1..L+1, batched over images."""
    images = np.asarray(images, dtype=np.float64)
    return [t.kxy for _, t in kernel_layers(images, images, arch, hyper)]


def fc_nngp_kernel(
    x: float,
    xp: float,
    depth: int,
    sigma_b_sq: float,
    sigma_w_sq: float,
    nonlinearity: Nonlinearity | str = Nonlinearity.RELU,
    relu_factor: float = 0.5 / math.pi,
) -> float:
    """Scalar-input fully-connected NNGP recursion (no spatial structure).

    Used as an oracle: a ConvNet on 1x1 images with 1x1 filters must agree.
    """
    nonlinearity = Nonlinearity(nonlinearity)
    kxx = sigma_b_sq + sigma_w_sq * x * x
    kxy = sigma_b_sq + sigma_w_sq * x * xp
    kyy = sigma_b_sq + sigma_w_sq * xp * xp
    if nonlinearity is Nonlinearity.ERF:

        def v(a, b, c):
            r = 2 * b / math.sqrt((1 + 2 * a) * (1 + 2 * c))
            return 2 / math.pi * math.asin(max(-1.0, min(1.0, r)))

    else:

        def v(a, b, c):
            if a * c == 0:
                return 0.0
            t = math.acos(max(-1.0, min(1.0, b / math.sqrt(a * c))))
            return relu_factor * math.sqrt(a * c) * (math.sin(t) + (math.pi - t) * math.cos(t))

    for _ in range(depth):
        kxx, kxy, kyy = (
            sigma_b_sq + sigma_w_sq * v(kxx, kxx, kxx),
            sigma_b_sq + sigma_w_sq * v(kxx, kxy, kyy),
            sigma_b_sq + sigma_w_sq * v(kyy, kyy, kyy),
        )
    return kxy


def gram_matrix(
    a: np.ndarray,
    b: np.ndarray | None,
    arch: ArchitectureSpec,
    hyper: Hyperparameters,
    parallelism: int = 1,
    progress=None,
) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(a[i], b[j])`` for image stacks ``(N, C, H, W)``.

    With ``b is None`` the square Gram of ``a`` is built from its upper
    triangle and mirrored.  Work is split into fixed tiles so the result is
    bitwise independent of ``parallelism``.
    """
    from ._engine import assemble_gram

    return assemble_gram(a, b, arch, hyper, parallelism=parallelism, progress=progress)


__all__ = [
    "KernelTriple",
    "input_kernel",
    "relu_expectation",
    "erf_expectation",
    "patch_sum_propagate",
    "residual_combine",
    "kernel_layers",
    "kernel_triple",
    "convnet_kernel",
    "self_covariances",
    "fc_nngp_kernel",
    "gram_matrix",
    "window_sum",
    "readout_layer",
]
