"""Parametric generator for ten lightning transient classes, plus splitting helpers.

Records are 1000 samples at 1 MSPS (one sample per microsecond) with the
event onset near sample 100, mimicking a 100 us pre-trigger window.  Every
waveform family and parameter range lives in :data:`CLASS_SPECS`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

SAMPLE_RATE_HZ = 1_000_000
INPUT_LEN = 1000
PRETRIGGER = 100
ONSET_JITTER = 50
AMPLITUDE_RANGE = (0.5, 2.0)
NOISE_FRACTION_RANGE = (0.01, 0.05)

CLASS_NAMES = ("-CG", "+CG", "-PBP", "+PBP", "-NBE", "+NBE", "NBE", "MP", "CG-IR", "SW")
N_CLASSES = len(CLASS_NAMES)


@dataclass(frozen=True)
class ClassSpec:
    index: int
    name: str
    family: str
    polarity: int  # -1 or +1 fixed, 0 drawn at random per record
    ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)


_CG = {"rise_us": (1.0, 4.0), "decay_us": (20.0, 60.0), "overshoot": (0.10, 0.25)}
_PBP = {"pulses": (3, 8), "gap_us": (20.0, 80.0), "width_us": (1.0, 2.5),
        "first_amp": (0.25, 0.5), "back_lobe": (0.25, 0.45)}
_NBE = {"width_us": (10.0, 30.0), "back_lobe": (0.3, 0.6)}

CLASS_SPECS: tuple[ClassSpec, ...] = (
    ClassSpec(0, "-CG", "cg", -1, _CG),
    ClassSpec(1, "+CG", "cg", +1, _CG),
    ClassSpec(2, "-PBP", "pbp", -1, _PBP),
    ClassSpec(3, "+PBP", "pbp", +1, _PBP),
    ClassSpec(4, "-NBE", "nbe", -1, _NBE),
    ClassSpec(5, "+NBE", "nbe", +1, _NBE),
    ClassSpec(6, "NBE", "nbe_ringing", 0,
              {**_NBE, "ring_khz": (40.0, 80.0), "ring_amp": (0.25, 0.5),
               "ring_decay_us": (20.0, 50.0)}),
    ClassSpec(7, "MP", "mp", 0,
              {"pulses": (2, 5), "rise_us": (1.0, 3.0), "decay_us": (8.0, 20.0),
               "min_gap_us": (60.0, 60.0), "span_us": (250.0, 650.0), "amp": (0.5, 1.0)}),
    ClassSpec(8, "CG-IR", "cg_ir", 0,
              {**_CG, "delay_us": (105.0, 295.0), "reflect_scale": (0.3, 0.7),
               "smooth_us": (3.0, 8.0)}),
    ClassSpec(9, "SW", "skywave", 0,
              {"rise_us": (30.0, 60.0), "decay_us": (80.0, 200.0), "start_khz": (5.0, 10.0),
               "end_khz": (15.0, 25.0), "sweep_us": (300.0, 300.0)}),
)


@dataclass
class SignalRecord:
    samples: np.ndarray
    label: int
    meta: dict[str, Any] = field(default_factory=dict)


@dataclass
class GeneratorConfig:
    per_class: int = 200
    test_per_class: int = 50
    seed: int = 0
    input_len: int = INPUT_LEN

    def validate(self) -> None:
        from .config import ValidationError
        if self.per_class < 1 or self.test_per_class < 0:
            raise ValidationError("per_class must be >= 1 and test_per_class >= 0")
        if self.input_len <= PRETRIGGER + ONSET_JITTER:
            raise ValidationError(f"input_len must exceed {PRETRIGGER + ONSET_JITTER}, "
                                  f"got {self.input_len}")


def _u(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    return float(rng.uniform(*lo_hi))


def _ui(rng: np.random.Generator, lo_hi: tuple[float, float]) -> int:
    return int(rng.integers(int(lo_hi[0]), int(lo_hi[1]) + 1))


def _unit(w: np.ndarray) -> np.ndarray:
    """Scale to unit peak magnitude; an all-zero component (cut off by a short record) stays zero."""
    peak = np.abs(w).max()
    return w / peak if peak > 0 else w


def _double_exp(t: np.ndarray, rise: float, decay: float) -> np.ndarray:
    tp = np.clip(t, 0.0, None)
    w = np.exp(-tp / decay) - np.exp(-tp / rise)
    w[t < 0] = 0.0
    return _unit(w)


def _cg(t, rng, r, p):
    rise, decay, os = _u(rng, r["rise_us"]), _u(rng, r["decay_us"]), _u(rng, r["overshoot"])
    main = _double_exp(t, rise, decay)
    slow = _double_exp(t, decay, 2 * decay)
    k = os
    for _ in range(4):  # rescale so the opposite-polarity trough is ``os`` of peak
        w = main - k * slow
        w = _unit(w)
        k *= os / max(-w.min(), 1e-6)
    w = main - k * slow
    p.update(rise_us=rise, decay_us=decay, overshoot=os)
    return _unit(w)


def _bipolar_pulselet(t, center, width, back):
    lead = np.exp(-0.5 * ((t - center) / width) ** 2)
    trail = np.exp(-0.5 * ((t - center - 2.5 * width) / (2 * width)) ** 2)
    return lead - back * trail


def _pbp(t, rng, r, p):
    n = _ui(rng, r["pulses"])
    width, back, a0 = _u(rng, r["width_us"]), _u(rng, r["back_lobe"]), _u(rng, r["first_amp"])
    gaps = rng.uniform(*r["gap_us"], size=n - 1)
    centers = 3 * width + np.concatenate([[0.0], np.cumsum(gaps)])
    amps = np.linspace(a0, 1.0, n)
    w = sum(a * _bipolar_pulselet(t, c, width, back) for a, c in zip(amps, centers))
    p.update(pulses=n, width_us=width, gaps_us=[float(g) for g in gaps])
    return _unit(w)


def _nbe_shape(t, width, back):
    w = np.sin(2 * np.pi * t / width)
    w[(t < 0) | (t >= width)] = 0.0
    w[t >= width / 2] *= back
    return w


def _nbe(t, rng, r, p):
    width, back = _u(rng, r["width_us"]), _u(rng, r["back_lobe"])
    p.update(width_us=width, back_lobe=back)
    return _nbe_shape(t, width, back)


def _nbe_ringing(t, rng, r, p):
    w = _nbe(t, rng, r, p)
    f, amp, tau = _u(rng, r["ring_khz"]), _u(rng, r["ring_amp"]), _u(rng, r["ring_decay_us"])
    start = p["width_us"]
    tt = t - start
    ring = amp * np.exp(-np.clip(tt, 0, None) / tau) * np.sin(2 * np.pi * f * 1e-3 * tt)
    ring[tt < 0] = 0.0
    p.update(ring_khz=f, ring_amp=amp, ring_decay_us=tau)
    w = w + ring
    return _unit(w)


def _mp(t, rng, r, p):
    n = _ui(rng, r["pulses"])
    span = _u(rng, r["span_us"])
    gap = r["min_gap_us"][0]
    # n starts in [0, span] with at least ``gap`` between them
    slack = max(span - gap * (n - 1), 0.0)
    starts = np.sort(rng.uniform(0, slack, size=n)) + gap * np.arange(n)
    starts[0] = 0.0
    w = np.zeros_like(t)
    for s in starts:
        w += _u(rng, r["amp"]) * _double_exp(t - s, _u(rng, r["rise_us"]), _u(rng, r["decay_us"]))
    p.update(pulses=n, starts_us=[float(s) for s in starts])
    return _unit(w)


def _cg_ir(t, rng, r, p):
    base = _cg(t, rng, r, p)
    delay, scale = _u(rng, r["delay_us"]), _u(rng, r["reflect_scale"])
    sigma = _u(rng, r["smooth_us"])
    replica = np.interp(t - delay, t, base, left=0.0, right=0.0)
    k = np.arange(-int(4 * sigma), int(4 * sigma) + 1)
    kern = np.exp(-0.5 * (k / sigma) ** 2)
    replica = np.convolve(replica, kern / kern.sum(), mode="same")
    p.update(delay_us=delay, reflect_scale=scale, smooth_us=sigma)
    w = base + scale * _unit(replica)
    return _unit(w)


def _skywave(t, rng, r, p):
    rise, decay = _u(rng, r["rise_us"]), _u(rng, r["decay_us"])
    f0, f1, sweep = _u(rng, r["start_khz"]), _u(rng, r["end_khz"]), r["sweep_us"][0]
    tp = np.clip(t, 0, None)
    env = (1 - np.exp(-(tp / rise) ** 2)) * np.exp(-tp / decay)
    k = (f1 - f0) / sweep
    phase = 2 * np.pi * 1e-3 * (f0 * tp + 0.5 * k * tp ** 2)
    w = env * np.sin(phase)
    w[t < 0] = 0.0
    p.update(rise_us=rise, decay_us=decay, start_khz=f0, end_khz=f1)
    return _unit(w)


_FAMILIES = {"cg": _cg, "pbp": _pbp, "nbe": _nbe, "nbe_ringing": _nbe_ringing, "mp": _mp,
             "cg_ir": _cg_ir, "skywave": _skywave}


def gen_waveform(class_idx: int, rng_seed: int, input_len: int = INPUT_LEN) -> SignalRecord:
    """One noisy record of class ``class_idx``; deterministic in ``rng_seed``."""
    if not isinstance(class_idx, (int, np.integer)) or not 0 <= class_idx < N_CLASSES:
        raise ValueError(f"class index must be in [0, {N_CLASSES - 1}], got {class_idx!r}")
    if input_len <= PRETRIGGER + ONSET_JITTER:
        raise ValueError(f"input_len must exceed {PRETRIGGER + ONSET_JITTER} so the onset "
                         f"falls inside the record, got {input_len}")
    spec = CLASS_SPECS[int(class_idx)]
    rng = np.random.default_rng(rng_seed)
    onset = PRETRIGGER + int(rng.integers(-ONSET_JITTER, ONSET_JITTER + 1))
    amplitude = _u(rng, AMPLITUDE_RANGE)
    sign = spec.polarity if spec.polarity else (1 if rng.random() < 0.5 else -1)
    meta: dict[str, Any] = {"onset": onset, "amplitude": amplitude, "seed": int(rng_seed),
                            "sign": sign}
    t = np.arange(input_len, dtype=np.float64) - onset
    shape = _FAMILIES[spec.family](t, rng, spec.ranges, meta)
    sigma = _u(rng, NOISE_FRACTION_RANGE) * amplitude
    meta["noise_sigma"] = sigma
    x = sign * amplitude * shape + rng.normal(0.0, sigma, size=input_len)
    return SignalRecord(samples=x, label=int(class_idx), meta=meta)


def record_seed(seed: int, class_idx: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, class_idx, index]).generate_state(1, np.uint64)[0])


def gen_dataset(per_class: int, seed: int, input_len: int = INPUT_LEN,
                offset: int = 0) -> list[SignalRecord]:
    """``per_class`` records of every class, shuffled deterministically.

    ``offset`` shifts the per-class record index so disjoint splits can be
    drawn from the same seed.
    """
    if per_class < 0:
        raise ValueError(f"per_class must be >= 0, got {per_class}")
    records = [gen_waveform(c, record_seed(seed, c, offset + i), input_len)
               for c in range(N_CLASSES) for i in range(per_class)]
    order = np.random.default_rng([seed, offset, 0x5EED]).permutation(len(records))
    return [records[i] for i in order]


def train_test_split(cfg: GeneratorConfig) -> tuple[list[SignalRecord], list[SignalRecord]]:
    train = gen_dataset(cfg.per_class, cfg.seed, cfg.input_len)
    test = gen_dataset(cfg.test_per_class, cfg.seed, cfg.input_len, offset=cfg.per_class)
    return train, test


def stack(records: list[SignalRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        return np.zeros((0, INPUT_LEN)), np.zeros(0, dtype=np.int64)
    x = np.stack([r.samples for r in records])
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, y


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def threshold_trigger(x, threshold: float) -> bool:
    """True when the record's peak magnitude reaches ``threshold`` (inclusive)."""
    x = np.asarray(x)
    return bool(x.size and np.abs(x).max() >= threshold)
