"""Preprocessing chain for raw VLF captures and waveform analytics.

DC removal, a Butterworth low-pass and a comb of 50 Hz harmonic notches,
each realised as second-order sections and applied forward-backward so the
net phase is zero.  Coefficients are designed here (bilinear transform with
prewarping); the per-sample recursion is delegated to ``scipy.signal.sosfilt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import sosfilt

from .config import ValidationError

SETTLE_LEVEL = 1e-9


@dataclass
class FilterSpec:
    sample_rate_hz: float = 131072.0
    lowpass_cutoff_hz: float = 30000.0
    lowpass_order: int = 4
    notch_base_hz: float = 50.0
    notch_harmonics: int = 20
    notch_q: float = 30.0

    def validate(self) -> None:
        nyq = self.sample_rate_hz / 2
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not 0 < self.lowpass_cutoff_hz < nyq:
            raise ValidationError(
                f"lowpass_cutoff_hz {self.lowpass_cutoff_hz} must lie in (0, {nyq})")
        if not isinstance(self.lowpass_order, int) or self.lowpass_order < 1:
            raise ValidationError(f"lowpass_order must be a positive integer, got {self.lowpass_order}")
        if self.notch_base_hz <= 0:
            raise ValidationError(f"notch_base_hz must be positive, got {self.notch_base_hz}")
        if not isinstance(self.notch_harmonics, int) or self.notch_harmonics < 0:
            raise ValidationError(f"notch_harmonics must be >= 0, got {self.notch_harmonics}")
        if self.notch_harmonics and self.notch_base_hz * self.notch_harmonics >= nyq:
            raise ValidationError(
                f"highest notch {self.notch_base_hz * self.notch_harmonics} Hz is not below {nyq} Hz")
        if self.notch_q <= 0:
            raise ValidationError(f"notch_q must be positive, got {self.notch_q}")


class BiquadCascade:
    """Ordered second-order sections, rows ``[b0, b1, b2, 1, a1, a2]``."""

    def __init__(self, sections):
        self.sos = np.atleast_2d(np.asarray(sections, dtype=np.float64))
        if self.sos.shape[1] != 6 or not np.allclose(self.sos[:, 3], 1.0):
            raise ValueError("sections must be rows of [b0, b1, b2, 1, a1, a2]")

    def __len__(self) -> int:
        return len(self.sos)

    def pole_radii(self) -> np.ndarray:
        return np.array([np.abs(np.roots([1.0, a1, a2])).max(initial=0.0)
                         for a1, a2 in self.sos[:, 4:]])

    def is_stable(self) -> bool:
        return bool(np.all(self.pole_radii() < 1.0))

    def settling_length(self) -> int:
        """Samples until the slowest section's pole envelope falls below ``SETTLE_LEVEL``."""
        r = self.pole_radii().max(initial=0.0)
        if r == 0.0:
            return 2
        return int(math.ceil(math.log(SETTLE_LEVEL) / math.log(r))) + 2

    def frequency_response(self, freqs_hz: np.ndarray, fs: float) -> np.ndarray:
        z = np.exp(-2j * np.pi * np.asarray(freqs_hz) / fs)
        h = np.ones_like(z)
        for b0, b1, b2, _, a1, a2 in self.sos:
            h *= (b0 + b1 * z + b2 * z * z) / (1 + a1 * z + a2 * z * z)
        return h

    def filter(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        """One causal pass from rest."""
        return sosfilt(self.sos, x, axis=axis)

    def __add__(self, other: BiquadCascade) -> BiquadCascade:
        return BiquadCascade(np.vstack([self.sos, other.sos]))


def butterworth_lowpass(cutoff_hz: float, fs: float, order: int) -> BiquadCascade:
    """Butterworth low-pass as biquads via the prewarped bilinear transform.

    Each conjugate pole pair of the analogue prototype becomes one section
    with quality factor ``1 / (2 cos theta_k)``; an odd order adds one
    first-order section.
    """
    w0 = 2 * math.pi * cutoff_hz / fs
    cw, sw = math.cos(w0), math.sin(w0)
    sections = []
    for k in range(order // 2):
        # angle of the k-th analogue pole pair from the negative real axis
        theta = abs(math.pi * (2 * k + order + 1) / (2 * order) - math.pi)
        alpha = sw / (2 * (1 / (2 * math.cos(theta))))
        a0 = 1 + alpha
        b = (1 - cw) / 2
        sections.append([b / a0, 2 * b / a0, b / a0, 1.0, -2 * cw / a0, (1 - alpha) / a0])
    if order % 2:
        k = math.tan(w0 / 2)
        sections.append([k / (1 + k), k / (1 + k), 0.0, 1.0, (k - 1) / (k + 1), 0.0])
    return BiquadCascade(sections)


def notch(freq_hz: float, fs: float, q: float) -> BiquadCascade:
    w0 = 2 * math.pi * freq_hz / fs
    alpha = math.sin(w0) / (2 * q)
    a0 = 1 + alpha
    c = -2 * math.cos(w0)
    return BiquadCascade([[1 / a0, c / a0, 1 / a0, 1.0, c / a0, (1 - alpha) / a0]])


def notch_cascade(spec: FilterSpec) -> BiquadCascade:
    rows = [notch(spec.notch_base_hz * k, spec.sample_rate_hz, spec.notch_q).sos[0]
            for k in range(1, spec.notch_harmonics + 1)]
    return BiquadCascade(rows) if rows else BiquadCascade(np.array([[1.0, 0, 0, 1.0, 0, 0]]))


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("empty signal")
    return x


def filtfilt_reflect(cascade: BiquadCascade, x, pad: int | None = None) -> np.ndarray:
    """Zero-phase application along the last axis.

    The signal is point-mirrored (odd reflection, continuous in value and
    slope) by three settling lengths on each side, run forward, reversed, run
    again and reversed back.
    """
    x = _as_samples(x)
    if pad is None:
        pad = 3 * cascade.settling_length()
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    if x.shape[-1] > 1:
        y = np.pad(x, widths, mode="reflect", reflect_type="odd")
    else:
        y = np.pad(x, widths, mode="edge")
    y = cascade.filter(y)
    y = cascade.filter(y[..., ::-1])[..., ::-1]
    return np.ascontiguousarray(y[..., pad:pad + x.shape[-1]])


def remove_dc(x) -> np.ndarray:
    x = _as_samples(x)
    return x - x.mean(axis=-1, keepdims=True)


def lowpass(x, spec: FilterSpec) -> np.ndarray:
    spec.validate()
    return filtfilt_reflect(
        butterworth_lowpass(spec.lowpass_cutoff_hz, spec.sample_rate_hz, spec.lowpass_order), x)


def notch_comb(x, spec: FilterSpec) -> np.ndarray:
    spec.validate()
    if spec.notch_harmonics == 0:
        return _as_samples(x).copy()
    return filtfilt_reflect(notch_cascade(spec), x)


def preprocess(x, spec: FilterSpec) -> np.ndarray:
    """DC removal, then low-pass, then the harmonic notch comb."""
    return notch_comb(lowpass(remove_dc(x), spec), spec)


def correlation_heatmap(x, window_len: int, stride: int) -> np.ndarray:
    """Pearson correlation between every pair of windows ``x[i*stride : i*stride+window_len]``.

    A zero-variance window correlates 1 with itself and 0 with everything else.
    """
    x = np.asarray(x, dtype=np.float64)
    if window_len < 1 or window_len > len(x):
        raise ValueError(f"window_len {window_len} must be in [1, {len(x)}]")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = (len(x) - window_len) // stride + 1
    idx = np.arange(n)[:, None] * stride + np.arange(window_len)
    w = x[idx]
    w = w - w.mean(axis=1, keepdims=True)
    norm = np.sqrt((w * w).sum(axis=1))
    flat = norm <= 1e-12 * max(1.0, np.abs(x).max())
    safe = np.where(flat, 1.0, norm)
    u = w / safe[:, None]
    u[flat] = 0.0
    m = np.clip(u @ u.T, -1.0, 1.0)
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m
