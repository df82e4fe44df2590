"""Compiled pairwise kernel loop for Gram-matrix assembly.

For every image the variance maps ``K(X, X)`` are computed once (vectorised
NumPy, see :func:`cnngp.kernel.self_covariances`).  Each pair then only
propagates its cross-covariance map through the layers, fused into a single
compiled loop with O(H * W) scratch per retained layer.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numba
import numpy as np

from .architecture import ArchitectureSpec, Hyperparameters, Nonlinearity
from .errors import DataError
from .kernel import readout_layer, self_covariances

TILE = 32

# geometry columns
IN_H, IN_W, OUT_H, OUT_W, FH, FW, STRIDE, PAD_T, PAD_L, IN_SLOT, OUT_SLOT, SKIP_SLOT, SCALE_OFF = range(13)


@numba.njit(nogil=True, cache=True)
def _window(pad, ph, pw, out_h, out_w, fh, fw, s, tmp, slots, dst, skip, bias, coef):
    """``slots[dst] = bias + coef * window_sum + slots[skip]`` from a padded frame.

    ``pad`` holds the input map inside a zeroed ``ph x pw`` frame, row-major.
    """
    for r in range(ph):
        base = r * pw
        for j in range(out_w):
            c0 = base + j * s
            acc = 0.0
            for dj in range(fw):
                acc += pad[c0 + dj]
            tmp[r * out_w + j] = acc
    for i in range(out_h):
        for j in range(out_w):
            acc = 0.0
            q = i * s * out_w + j
            for di in range(fh):
                acc += tmp[q + di * out_w]
            val = bias + coef * acc
            if skip >= 0:
                val += slots[skip, i * out_w + j]
            slots[dst, i * out_w + j] = val


@numba.njit(nogil=True, cache=True)
def _fill_product(xa, ia, xb, ib, h_in, w_in, pad, pt, pl, pw):
    for ch in range(xa.shape[1]):
        for r in range(h_in):
            base = (r + pt) * pw + pl
            for c in range(w_in):
                pad[base + c] += xa[ia, ch, r, c] * xb[ib, ch, r, c]


@numba.njit(nogil=True, cache=True)
def _fill_relu(slots, src, sa, ia, sb, ib, off, in_w, h_in, w_in, pad, pt, pl, pw, factor, rho):
    for r in range(h_in):
        for c in range(w_in):
            p = r * in_w + c
            sc = sa[ia, off + p] * sb[ib, off + p]
            x = slots[src, p] / sc if sc > 0.0 else 0.0
            rho[p] = min(1.0, max(-1.0, x))
    for r in range(h_in):
        base = (r + pt) * pw + pl
        for c in range(w_in):
            p = r * in_w + c
            q = rho[p]
            sc = sa[ia, off + p] * sb[ib, off + p]
            pad[base + c] = factor * sc * (math.sqrt(1.0 - q * q) + (math.pi - math.acos(q)) * q)


@numba.njit(nogil=True, cache=True)
def _fill_erf(slots, src, sa, ia, sb, ib, off, in_w, h_in, w_in, pad, pt, pl, pw, rho):
    for r in range(h_in):
        for c in range(w_in):
            p = r * in_w + c
            x = 2.0 * slots[src, p] / (sa[ia, off + p] * sb[ib, off + p])
            rho[p] = min(1.0, max(-1.0, x))
    for r in range(h_in):
        base = (r + pt) * pw + pl
        for c in range(w_in):
            pad[base + c] = (2.0 / math.pi) * math.asin(rho[r * in_w + c])


@numba.njit(nogil=True, cache=True)
def _tile(xa, xb, sa, sb, geo, coef, n_slots, max_hw, max_pad, relu, factor, symmetric, i0, j0, out):
    na = xa.shape[0]
    nb = xb.shape[0]
    nsteps = geo.shape[0]
    result = n_slots
    slots = np.zeros((n_slots + 1, max_hw))
    pad = np.zeros(max_pad)
    tmp = np.empty(max_pad)
    rho = np.empty(max_hw)
    for ia in range(na):
        for ib in range(nb):
            if symmetric and j0 + ib < i0 + ia:
                continue
            for k in range(nsteps):
                in_h, in_w = geo[k, IN_H], geo[k, IN_W]
                out_h, out_w = geo[k, OUT_H], geo[k, OUT_W]
                fh, fw, st = geo[k, FH], geo[k, FW], geo[k, STRIDE]
                pt, pl = geo[k, PAD_T], geo[k, PAD_L]
                ph = (out_h - 1) * st + fh
                pw = (out_w - 1) * st + fw
                pad[: ph * pw] = 0.0
                h_in = min(in_h, ph - pt)
                w_in = min(in_w, pw - pl)
                if k == 0:
                    _fill_product(xa, ia, xb, ib, h_in, w_in, pad, pt, pl, pw)
                elif relu:
                    _fill_relu(
                        slots, geo[k, IN_SLOT], sa, ia, sb, ib, geo[k, SCALE_OFF], in_w,
                        h_in, w_in, pad, pt, pl, pw, factor, rho,
                    )
                else:
                    _fill_erf(
                        slots, geo[k, IN_SLOT], sa, ia, sb, ib, geo[k, SCALE_OFF], in_w,
                        h_in, w_in, pad, pt, pl, pw, rho,
                    )
                dst = result if k == nsteps - 1 else geo[k, OUT_SLOT]
                _window(
                    pad, ph, pw, out_h, out_w, fh, fw, st, tmp, slots, dst,
                    geo[k, SKIP_SLOT], coef[k, 0], coef[k, 1],
                )
            out[i0 + ia, j0 + ib] = slots[result, 0]


def _allocate_slots(arch: ArchitectureSpec) -> tuple[dict[int, int], int]:
    """Map layer index -> scratch slot, reusing slots once a layer is dead.

    Layer ``k`` is read by layer ``k + 1`` and by any layer skipping back to it.
    """
    n_layers = arch.depth
    last = {k: k + 1 for k in range(1, n_layers + 1)}
    for k, layer in enumerate(arch.layers, start=1):
        if layer.skip_span is not None:
            src = k - layer.skip_span
            last[src] = max(last[src], k)
    free: list[int] = []
    slot_of: dict[int, int] = {}
    active: dict[int, int] = {}
    n_slots = 0
    for k in range(1, n_layers + 1):
        for j in [j for j, end in active.items() if end < k]:
            free.append(slot_of[j])
            del active[j]
        if free:
            slot_of[k] = free.pop()
        else:
            slot_of[k] = n_slots
            n_slots += 1
        active[k] = last[k]
    return slot_of, max(n_slots, 1)


class PairPlan:
    """Geometry tables shared by all pairs of one architecture and input shape."""

    def __init__(self, arch: ArchitectureSpec, hyper: Hyperparameters, image_shape):
        channels, h, w = image_shape
        shapes = arch.shapes((h, w))
        slot_of, self.n_slots = _allocate_slots(arch)
        n = arch.depth
        geo = np.zeros((n + 1, 13), dtype=np.int64)
        coef = np.zeros((n + 1, 2))
        offsets = [0]
        for hw in shapes[1 : n + 1]:
            offsets.append(offsets[-1] + hw[0] * hw[1])
        self.scale_size = offsets[-1]
        for k in range(1, n + 2):
            layer = arch.layers[k - 1] if k <= n else readout_layer(shapes[n])
            in_hw = shapes[k - 1]
            out_hw = layer.output_shape(in_hw)
            pt, pl = layer.pads(in_hw)
            row = geo[k - 1]
            row[[IN_H, IN_W, OUT_H, OUT_W]] = in_hw[0], in_hw[1], out_hw[0], out_hw[1]
            row[[FH, FW, STRIDE, PAD_T, PAD_L]] = (
                layer.filter_height, layer.filter_width, layer.stride, pt, pl,
            )
            row[IN_SLOT] = slot_of.get(k - 1, -1)
            row[OUT_SLOT] = slot_of.get(k, -1)
            row[SKIP_SLOT] = slot_of[k - layer.skip_span] if layer.skip_span else -1
            row[SCALE_OFF] = offsets[k - 2] if k >= 2 else 0
            norm = hyper.filter_norm(layer.filter_area)
            fan = norm * channels if k == 1 else norm
            coef[k - 1] = hyper.sigma_b_sq, hyper.sigma_w_sq / fan
        self.geo, self.coef, self.shapes = geo, coef, shapes
        self.max_hw = max(max(a * b for a, b in shapes), 1)
        self.max_pad = int(max(
            ((r[OUT_H] - 1) * r[STRIDE] + r[FH]) * ((r[OUT_W] - 1) * r[STRIDE] + r[FW]) for r in geo
        ))
        self.relu = arch.nonlinearity is Nonlinearity.RELU
        self.factor = hyper.relu_factor
        self.arch, self.hyper = arch, hyper

    def scales(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Per-image ``sqrt(K)`` (ReLU) or ``sqrt(1 + 2K)`` (erf) maps, flattened."""
        n = self.arch.depth
        out = np.empty((images.shape[0], self.scale_size))
        if n == 0:
            return out
        for start in range(0, images.shape[0], batch):
            maps = self_covariances(images[start : start + batch], self.arch, self.hyper)[:n]
            flat = [m.reshape(m.shape[0], -1) for m in maps]
            cat = np.concatenate(flat, axis=1)
            out[start : start + batch] = np.sqrt(cat) if self.relu else np.sqrt(1.0 + 2.0 * cat)
        return out

    def run_tile(self, xa, xb, sa, sb, symmetric, i0, j0, out):
        _tile(
            xa, xb, sa, sb, self.geo, self.coef, self.n_slots, self.max_hw, self.max_pad,
            self.relu, self.factor, symmetric, i0, j0, out,
        )


def _as_images(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise DataError(f"expected images of shape (N, C, H, W), got {x.shape}")
    return x


def assemble_gram(a, b, arch, hyper, parallelism: int = 1, progress=None) -> np.ndarray:
    a = _as_images(a)
    symmetric = b is None
    b = a if symmetric else _as_images(b)
    if a.shape[1:] != b.shape[1:]:
        raise DataError(f"image shapes differ between datasets: {a.shape[1:]} vs {b.shape[1:]}")
    plan = PairPlan(arch, hyper, a.shape[1:])
    sa = plan.scales(a)
    sb = sa if symmetric else plan.scales(b)
    out = np.zeros((a.shape[0], b.shape[0]))
    tiles = [
        (i, j)
        for i in range(0, a.shape[0], TILE)
        for j in range(0, b.shape[0], TILE)
        if not symmetric or j + TILE > i
    ]

    def work(t):
        i, j = t
        plan.run_tile(
            a[i : i + TILE], b[j : j + TILE], sa[i : i + TILE], sb[j : j + TILE],
            symmetric, i, j, out,
        )
        return t

    if parallelism <= 1:
        for n, t in enumerate(tiles, 1):
            work(t)
            if progress:
                progress(n, len(tiles))
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for n, _ in enumerate(pool.map(work, tiles), 1):
                if progress:
                    progress(n, len(tiles))
    if symmetric:
        lower = np.tril_indices(a.shape[0], -1)
        out[lower] = out.T[lower]
    return out
