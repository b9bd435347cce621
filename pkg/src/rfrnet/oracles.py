"""Brute-force oracles: literal-loop re-implementations used to cross-check the fast paths.

Everything here is deliberately naive and single-threaded. The only shared
code with the main implementations is the numpy array container; convolution,
mask updates, merging, and attention are all re-derived as nested loops so the
two routes stay independent. Desk-scale inputs only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    """Outcome of one oracle comparison. pass iff max relative error <= tolerance."""

    case: str
    max_abs_err: float
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.case} max_abs={self.max_abs_err:.3e} "
            f"max_rel={self.max_rel_err:.3e} tol={self.tolerance:.1e}"
        )


# Magnitude floor for relative errors: entries smaller than this are compared
# absolutely (err/floor), so near-zero gradients aren't judged against noise.
REL_FLOOR = 1e-3


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((diff / denom).max()) if diff.size else 0.0


def compare(case: str, got, want, tolerance: float) -> OracleReport:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return OracleReport(case + f" (shape {got.shape} vs {want.shape})", math.inf, math.inf, tolerance)
    abs_err = float(np.abs(got - want).max()) if got.size else 0.0
    return OracleReport(case, abs_err, max_relative_error(got, want), tolerance)


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Six-nested-loop cross-correlation. x: (n,ci,h,w), w: (co,ci,k,k)."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for bi in range(n):
        for oc in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride - padding + ky
                                ix = ox * stride - padding + kx
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[bi, ic, iy, ix]) * float(w[oc, ic, ky, kx])
                    if b is not None:
                        acc += float(b[oc])
                    out[bi, oc, oy, ox] = acc
    return out


def naive_transposed_conv2d(x, w, b=None, stride=1, padding=0):
    """Scatter-add over input pixels, then crop the padding ring. w: (ci,co,k,k)."""
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    full = np.zeros((n, co, ho + 2 * padding, wo + 2 * padding), dtype=np.float64)
    for bi in range(n):
        for ic in range(ci):
            for iy in range(h):
                for ix in range(wd):
                    v = float(x[bi, ic, iy, ix])
                    for oc in range(co):
                        for ky in range(kh):
                            for kx in range(kw):
                                full[bi, oc, iy * stride + ky, ix * stride + kx] += v * float(
                                    w[ic, oc, ky, kx]
                                )
    out = full[:, :, padding : padding + ho, padding : padding + wo].copy()
    if b is not None:
        out += np.asarray(b, dtype=np.float64).reshape(1, co, 1, 1)
    return out


def naive_partial_conv(x, mask, w, b=None, stride=1, padding=0):
    """Literal per-window renormalized masked convolution plus mask update.

    mask: (n,1,h,w) binary, broadcast across input channels. The support count
    is k*k*ci and the valid count is (valid pixels in window)*ci.
    """
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    mout = np.zeros((n, 1, ho, wo), dtype=np.float64)
    sum_ones = kh * kw * ci
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                valid = 0
                for ky in range(kh):
                    for kx in range(kw):
                        iy = oy * stride - padding + ky
                        ix = ox * stride - padding + kx
                        if 0 <= iy < h and 0 <= ix < wd and mask[bi, 0, iy, ix] == 1.0:
                            valid += 1
                if valid == 0:
                    continue
                mout[bi, 0, oy, ox] = 1.0
                ratio = sum_ones / float(valid * ci)
                for oc in range(co):
                    acc = 0.0
                    for ic in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride - padding + ky
                                ix = ox * stride - padding + kx
                                if 0 <= iy < h and 0 <= ix < wd and mask[bi, 0, iy, ix] == 1.0:
                                    acc += float(x[bi, ic, iy, ix]) * float(w[oc, ic, ky, kx])
                    acc *= ratio
                    if b is not None:
                        acc += float(b[oc])
                    out[bi, oc, oy, ox] = acc
    return out, mout


def mask_dilation(mask, k, times=1):
    """Binary dilation of the valid set by a k*k structuring element, applied repeatedly."""
    assert k % 2 == 1, "same-size dilation needs odd k"
    m = np.asarray(mask, dtype=np.float64)
    n, _, h, w = m.shape
    r = k // 2
    for _ in range(times):
        out = np.zeros_like(m)
        for bi in range(n):
            for y in range(h):
                for x in range(w):
                    hit = False
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and m[bi, 0, yy, xx] == 1.0:
                                hit = True
                                break
                        if hit:
                            break
                    if hit:
                        out[bi, 0, y, x] = 1.0
        m = out
    return m


def naive_merge(features, masks, mode="adaptive"):
    """Per-location merge of per-recurrence feature maps.

    adaptive: average over the recurrences in which the location was valid
    (0 where never valid); average: plain mean; last_only: the final map.
    """
    if not features:
        raise ValueError("empty recurrence state")
    if mode == "last_only":
        return np.asarray(features[-1], dtype=np.float64).copy()
    n, c, h, w = features[0].shape
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for bi in range(n):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    if mode == "average":
                        acc = 0.0
                        for f in features:
                            acc += float(f[bi, ci, y, x])
                        out[bi, ci, y, x] = acc / len(features)
                    else:
                        num = 0.0
                        den = 0.0
                        for f, m in zip(features, masks):
                            if m[bi, 0, y, x] == 1.0:
                                num += float(f[bi, ci, y, x])
                                den += 1.0
                        out[bi, ci, y, x] = num / den if den > 0 else 0.0
    return out


def naive_attention(feats, prev_score=None, prev_valid=None, lambda_raw=0.0, window=3):
    """Literal-loop attention: pairwise cosine, query-neighborhood mean, scalar
    softmax, gated blend with the previous scores, and weighted reconstruction.

    feats: (n,c,h,w). Returns (score, rebuilt) with score[n, key_flat, qy, qx].
    """
    n, c, h, w = feats.shape
    hw = h * w
    r = window // 2
    norms = np.zeros((n, h, w), dtype=np.float64)
    for bi in range(n):
        for y in range(h):
            for x in range(w):
                s = 0.0
                for ci in range(c):
                    s += float(feats[bi, ci, y, x]) ** 2
                norms[bi, y, x] = max(math.sqrt(s), 1e-8)

    sim = np.zeros((n, hw, h, w), dtype=np.float64)
    for bi in range(n):
        for ky in range(h):
            for kx in range(w):
                kf = ky * w + kx
                for qy in range(h):
                    for qx in range(w):
                        dot = 0.0
                        for ci in range(c):
                            dot += float(feats[bi, ci, qy, qx]) * float(feats[bi, ci, ky, kx])
                        sim[bi, kf, qy, qx] = dot / (norms[bi, qy, qx] * norms[bi, ky, kx])

    smooth = np.zeros_like(sim)
    for bi in range(n):
        for kf in range(hw):
            for qy in range(h):
                for qx in range(w):
                    acc = 0.0
                    cnt = 0
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            yy, xx = qy + dy, qx + dx
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += sim[bi, kf, yy, xx]
                                cnt += 1
                    smooth[bi, kf, qy, qx] = acc / cnt

    score = np.zeros_like(sim)
    for bi in range(n):
        for qy in range(h):
            for qx in range(w):
                col = smooth[bi, :, qy, qx]
                e = np.exp(col - col.max())
                score[bi, :, qy, qx] = e / e.sum()

    if prev_score is not None:
        gate = 1.0 / (1.0 + math.exp(-lambda_raw))
        blended = score.copy()
        for bi in range(n):
            for qy in range(h):
                for qx in range(w):
                    if prev_valid[bi, 0, qy, qx] == 1.0:
                        blended[bi, :, qy, qx] = (
                            gate * score[bi, :, qy, qx] + (1.0 - gate) * prev_score[bi, :, qy, qx]
                        )
        score = blended

    rebuilt = np.zeros((n, c, h, w), dtype=np.float64)
    for bi in range(n):
        for ci in range(c):
            for qy in range(h):
                for qx in range(w):
                    acc = 0.0
                    for ky in range(h):
                        for kx in range(w):
                            acc += score[bi, ky * w + kx, qy, qx] * float(feats[bi, ci, ky, kx])
                    rebuilt[bi, ci, qy, qx] = acc
    return score, rebuilt


def finite_diff(f, param, eps=1e-4, sample=None, rng=None):
    """Central-difference gradient of scalar f() with respect to param's elements.

    Perturbs param.data in place and restores it. With sample=k, checks a
    seeded subset of coordinates and returns (flat_indices, grads); otherwise
    returns the full gradient array. Non-finite evaluations leave nan in the
    result so the caller can report and skip them.
    """
    flat = param.data.reshape(-1)
    if sample is None:
        indices = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=min(sample, flat.size), replace=False)
        indices.sort()
    grads = np.empty(len(indices), dtype=np.float64)
    for j, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = float(f())
        flat[idx] = orig - eps
        fm = float(f())
        flat[idx] = orig
        if math.isfinite(fp) and math.isfinite(fm):
            grads[j] = (fp - fm) / (2.0 * eps)
        else:
            grads[j] = math.nan
    if sample is None:
        return grads.reshape(param.data.shape)
    return indices, grads
