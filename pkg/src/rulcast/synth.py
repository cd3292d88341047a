"""Synthetic run-to-failure vibration fixture.

Generates bearing snapshot directories in the same text layout real
datasets use, so the whole pipeline can run without external data. Each
bearing's life has a healthy phase followed by a parametric degradation
ramp; snapshots mix a Gaussian noise floor, a fault tone and periodic
impulse bursts with a ringing decay, all scaled by the degradation
severity. Conditions differ in amplitude, noise, ramp shape and tone
frequency so that transfer across conditions is a real distribution shift.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SynthCondition:
    condition_id: str
    n_bearings: int
    amplitude: float
    noise: float
    onset_frac: float
    exponent: float
    tone_hz: float
    impulse_hz: float


@dataclass(frozen=True)
class SynthSpec:
    sampling_rate: float = 25600.0
    snapshot_interval: float = 10.0
    samples_per_snapshot: int = 512
    snapshots: int = 100
    conditions: tuple[SynthCondition, ...] = ()


def default_spec(snapshots: int = 100, samples: int = 512) -> SynthSpec:
    """Two conditions with shifted statistics: 6 source + 2 target bearings."""
    return SynthSpec(
        samples_per_snapshot=samples,
        snapshots=snapshots,
        conditions=(
            SynthCondition(
                condition_id="A", n_bearings=6, amplitude=1.0, noise=0.05,
                onset_frac=0.25, exponent=1.0, tone_hz=3200.0, impulse_hz=120.0,
            ),
            SynthCondition(
                condition_id="B", n_bearings=2, amplitude=2.2, noise=0.08,
                onset_frac=0.25, exponent=2.0, tone_hz=4800.0, impulse_hz=90.0,
            ),
        ),
    )


def _severity(progress: float, onset: float, exponent: float) -> float:
    if progress <= onset:
        return 0.0
    return ((progress - onset) / (1.0 - onset)) ** exponent


def _ring_kernel(rate: float, ring_hz: float, length: int = 64) -> np.ndarray:
    k = np.arange(length)
    return np.exp(-k / 16.0) * np.sin(2.0 * np.pi * ring_hz * k / rate)


def _snapshot_signal(
    rng: np.random.Generator,
    n: int,
    rate: float,
    severity: float,
    amplitude: float,
    cond: SynthCondition,
    channel_gain: float,
) -> np.ndarray:
    t = np.arange(n) / rate
    signal = rng.normal(0.0, cond.noise, n)
    if severity > 0.0:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        signal = signal + severity * amplitude * channel_gain * np.sin(
            2.0 * np.pi * cond.tone_hz * t + phase
        )
        period = max(1, int(rate / cond.impulse_hz))
        impulses = np.zeros(n)
        start = rng.integers(0, period)
        impulses[start::period] = severity * amplitude * channel_gain * 2.0
        ring = np.convolve(impulses, _ring_kernel(rate, cond.tone_hz * 1.5), mode="same")
        signal = signal + ring
    return signal


def generate(root, spec: SynthSpec | None = None, seed: int = 0) -> dict:
    """Write the fixture under ``root``; returns the fixture manifest dict.

    Layout: root/<condition>/<bearing>/acc_00001.csv ... with two columns
    (horizontal, vertical). A fixture.json manifest records every bearing's
    condition and life length.
    """
    spec = spec or default_spec()
    root = Path(root)
    rng = np.random.default_rng(seed)
    manifest: dict = {
        "seed": seed,
        "sampling_rate": spec.sampling_rate,
        "snapshot_interval": spec.snapshot_interval,
        "samples_per_snapshot": spec.samples_per_snapshot,
        "conditions": [asdict(c) for c in spec.conditions],
        "bearings": {},
    }
    for cond in spec.conditions:
        for b in range(1, cond.n_bearings + 1):
            bearing_id = f"{cond.condition_id}/{cond.condition_id.lower()}{b}"
            life = int(spec.snapshots + rng.integers(-spec.snapshots // 10, spec.snapshots // 10 + 1))
            onset = float(np.clip(cond.onset_frac + rng.uniform(-0.04, 0.04), 0.05, 0.9))
            amp = cond.amplitude * float(rng.uniform(0.9, 1.1))
            bearing_dir = root / bearing_id
            bearing_dir.mkdir(parents=True, exist_ok=True)
            for i in range(life):
                progress = i / (life - 1)
                sev = _severity(progress, onset, cond.exponent)
                columns = [
                    _snapshot_signal(
                        rng, spec.samples_per_snapshot, spec.sampling_rate, sev, amp, cond, gain
                    )
                    for gain in (1.0, 0.6)
                ]
                out = np.stack(columns, axis=1)
                np.savetxt(bearing_dir / f"acc_{i + 1:05d}.csv", out, fmt="%.6f", delimiter=",")
            manifest["bearings"][bearing_id] = {
                "condition": cond.condition_id,
                "life": life,
                "onset_frac": onset,
            }
    (root / "fixture.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def suggested_config(root, manifest: dict, out_dir: str = "runs/synth") -> dict:
    """A ready-to-run config for the generated fixture (tiny model)."""
    bearings = sorted(manifest["bearings"])
    source = [b for b in bearings if manifest["bearings"][b]["condition"] == "A"]
    target = [b for b in bearings if manifest["bearings"][b]["condition"] == "B"]
    return {
        "seed": manifest["seed"],
        "out_dir": str(Path(out_dir).resolve()),
        "datasets": {
            "synth": {
                "root": str(Path(root).resolve()),
                "schema": "synth",
                "sampling_rate": manifest["sampling_rate"],
                "snapshot_interval": manifest["snapshot_interval"],
            }
        },
        "features": {
            "frame_width_s": 0.02,
            "frame_stride_s": 0.01,
            "window": "hann",
            "d_out": 8,
            "fpt_enabled": True,
            "fpt_channel": "horizontal",
            "feature_channels": ["horizontal"],
        },
        "task": {
            "name": "synth-transfer",
            "sft_bearings": [["synth", b] for b in source],
            "prompt_bearings": [["synth", target[0]]] if target else [],
            "test_bearings": [["synth", b] for b in target[1:]] or [],
            "lookback": 16,
            "horizon": 4,
        },
        "model": {
            "hidden": 16,
            "blocks": 2,
            "heads": 2,
            "patch": 4,
            "patch_stride": 2,
            "dropout": 0.1,
            "epsilon": 1e-5,
        },
        "training": {
            "sft": {"epochs": 8, "learning_rate": 1e-3, "batch_size": 32},
            "pt": {"epochs": 8, "learning_rate": 1e-3, "batch_size": 16},
        },
    }
