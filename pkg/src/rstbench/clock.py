"""Reference-system-time accounting.

A CalibrationProfile maps (step kind, layer count) to seconds per
iteration on a designated reference configuration, with a least-squares
linear cost model t(l) = a + b*l per kind. A BudgetClock accumulates
charges against a fixed RST budget and is the single source of schedule
progress.

Charging uses the profile's times directly. Experiment runs normalize the
profile first (``normalize=True``): each charge becomes
t(kind, l) / t(full_step, anchor) * t_ref(anchor), where t_ref is the
committed reference line. A locally calibrated profile then contributes
only the *relative* costs of step kinds and depths, and the absolute RST
second is pinned to the reference system, so machines that differ by a
uniform speed factor produce bit-identical budget trajectories.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

PROFILE_VERSION = 1

# Committed reference line for full_step cost vs layer count (seconds/iter).
# Dyadic values so uniform profile rescalings cancel exactly in IEEE math.
REF_FULL_A = 0.0625
REF_FULL_B = 0.03125


def reference_full_step_seconds(layer_count: int) -> float:
    return REF_FULL_A + REF_FULL_B * layer_count


class StepKind(str, Enum):
    FULL_STEP = "full_step"
    FORWARD_ONLY = "forward_only"
    HESSIAN_STEP = "hessian_step"


@dataclass
class CalibrationProfile:
    system: str
    measurements: dict[tuple[str, int], float]   # (kind, layer_count) -> mean s/iter
    n_iters: int
    coeffs: dict[str, tuple[float, float]] = field(default_factory=dict)  # kind -> (a, b)
    normalize: bool = False
    version: int = PROFILE_VERSION

    def __post_init__(self):
        for (kind, l), t in self.measurements.items():
            if not (np.isfinite(t) and t > 0):
                raise ValueError(f"non-positive or non-finite time for ({kind}, {l}): {t}")
        if not self.coeffs:
            self.coeffs = {k: _fit_kind(self.measurements, k) for k in self._kinds()}
        self._check_fit()

    def _kinds(self):
        return sorted({k for k, _ in self.measurements})

    def _check_fit(self, max_rel: float = 0.10) -> None:
        for (kind, l), t in self.measurements.items():
            a, b = self.coeffs[kind]
            if abs((a + b * l) - t) / t > max_rel:
                raise ValueError(
                    f"cost-model fit residual over {max_rel:.0%} at ({kind}, {l}): "
                    f"fit {a + b * l:.6g} vs measured {t:.6g}")

    @property
    def anchor_layers(self) -> int:
        return max(l for k, l in self.measurements if k == StepKind.FULL_STEP.value)

    def raw_time(self, kind: StepKind | str, layer_count: int) -> float:
        """Measured mean when available, else the linear fit."""
        kind = StepKind(kind).value
        if kind not in self.coeffs:
            raise ValueError(f"profile does not cover step kind {kind!r}")
        exact = self.measurements.get((kind, layer_count))
        if exact is not None:
            return exact
        a, b = self.coeffs[kind]
        return a + b * layer_count

    def charge_time(self, kind: StepKind | str, layer_count: int) -> float:
        t = self.raw_time(kind, layer_count)
        if not self.normalize:
            return t
        anchor = self.anchor_layers
        # Ratio first: uniform profile rescalings cancel bit-exactly.
        return (t / self.raw_time(StepKind.FULL_STEP, anchor)) * reference_full_step_seconds(anchor)

    def normalized(self) -> "CalibrationProfile":
        return dataclasses.replace(self, normalize=True)

    # -- serialization: versioned JSON text -------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "system": self.system,
            "n_iters": self.n_iters,
            "measurements": [
                {"kind": k, "layer_count": l, "seconds": t}
                for (k, l), t in sorted(self.measurements.items())],
            "coeffs": {k: list(ab) for k, ab in self.coeffs.items()},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationProfile":
        doc = json.loads(text)
        if doc.get("version") != PROFILE_VERSION:
            raise ValueError(f"unsupported profile version {doc.get('version')}")
        return cls(
            system=doc["system"],
            measurements={(m["kind"], int(m["layer_count"])): float(m["seconds"])
                          for m in doc["measurements"]},
            n_iters=int(doc["n_iters"]),
            coeffs={k: (float(a), float(b)) for k, (a, b) in doc["coeffs"].items()},
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    @classmethod
    def synthetic(cls, lines: dict[str, tuple[float, float]],
                  layer_counts=(2, 4, 8), system: str = "synthetic") -> "CalibrationProfile":
        """Profile whose measurements lie exactly on the given (a, b) lines."""
        meas = {(k, l): a + b * l for k, (a, b) in lines.items() for l in layer_counts}
        return cls(system=system, measurements=meas, n_iters=0,
                   coeffs={k: tuple(ab) for k, ab in lines.items()})


def _fit_kind(measurements, kind: str) -> tuple[float, float]:
    pts = sorted((l, t) for (k, l), t in measurements.items() if k == kind)
    ls = np.array([l for l, _ in pts], dtype=np.float64)
    ts = np.array([t for _, t in pts], dtype=np.float64)
    if len(pts) == 1:
        return float(ts[0]), 0.0
    b, a = np.polyfit(ls, ts, 1)
    return float(a), float(b)


@dataclass(frozen=True)
class ChargeRecord:
    kind: str
    layer_count: int
    seconds: float


@dataclass
class BudgetClock:
    """Consumed vs budgeted RST seconds plus the full charge ledger."""

    budget: float
    consumed: float = 0.0
    ledger: list[ChargeRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")

    @property
    def exhausted(self) -> bool:
        return self.consumed >= self.budget

    def charge(self, profile: CalibrationProfile, kind: StepKind | str,
               layer_count: int, scale: float = 1.0, free: bool = False) -> bool:
        """Add one iteration's reference cost; returns True once exhausted.

        ``scale`` implements the mega-batch convention (B_M / B_m forward
        cost); ``free`` records the entry with charge 0 (uncounted-work
        ablations).
        """
        kind = StepKind(kind).value
        t = 0.0 if free else profile.charge_time(kind, layer_count) * scale
        self.consumed += t
        self.ledger.append(ChargeRecord(kind, layer_count, t))
        return self.exhausted

    def progress(self) -> float:
        if self.budget <= 0:
            raise ValueError("progress undefined for zero budget")
        return min(self.consumed / self.budget, 1.0)

    def ledger_sum(self) -> float:
        return sum(r.seconds for r in self.ledger)


# ---------------------------------------------------------------------------
# calibration on the current machine
# ---------------------------------------------------------------------------

def calibrate(config, layer_counts, n_iters: int, warmup_iters: int = 5,
              system: str = "", batch_size: int = 8,
              seed: int = 0) -> CalibrationProfile:
    """Time full, forward-only, and Hessian-estimate iterations per depth.

    Runs warmup then ``n_iters`` timed iterations for each (kind, layer
    count) on the current machine and fits t(l) = a + b*l per kind. Must
    run without concurrent load. Real profiles want n_iters >= 100; tests
    use CalibrationProfile.synthetic instead.
    """
    from . import data as data_mod
    from .model import LayerPlan, forward_mlm, init_model
    from .optim import OptHyper, OptimizerState, adamw_step, gnb_estimate
    from . import tensor as T

    if not system:
        import platform
        system = f"{platform.node()} {platform.machine()} python{platform.python_version()}"

    rng = np.random.default_rng(seed)
    vocab = config.vocab_size if config.vocab_size else 64
    measurements: dict[tuple[str, int], float] = {}

    for l in sorted(layer_counts):
        cfg = dataclasses.replace(config, num_layers=l, vocab_size=vocab)
        params = init_model(cfg, rng)
        state = OptimizerState.for_params(params)
        hyper = OptHyper()
        tokens = rng.integers(2, vocab, size=50 * cfg.seq_len)
        batch = data_mod.sample_masked_batch(tokens, batch_size, cfg.seq_len, 0.15, rng, vocab)
        plan = LayerPlan.all_keep(l)

        def full_iter():
            nonlocal state
            tape = T.Tape()
            loss, _ = forward_mlm(tape, params, batch, plan)
            grads_tid = T.backward(tape, loss, [p for _, p in params.named_parameters()])
            grads = {n: grads_tid[p.tid] for n, p in params.named_parameters()}
            state, _ = adamw_step(state, params, grads, hyper, 1e-4)

        def forward_iter():
            forward_mlm(None, params, batch, plan)

        def hessian_iter():
            gnb_estimate(params, batch, rng)

        for kind, fn in ((StepKind.FULL_STEP, full_iter),
                         (StepKind.FORWARD_ONLY, forward_iter),
                         (StepKind.HESSIAN_STEP, hessian_iter)):
            for _ in range(warmup_iters):
                fn()
            start = time.perf_counter()
            for _ in range(n_iters):
                fn()
            mean = (time.perf_counter() - start) / n_iters
            if not (np.isfinite(mean) and mean > 0):
                raise ValueError(f"non-finite timing for ({kind.value}, {l})")
            measurements[(kind.value, l)] = mean

    return CalibrationProfile(system=system, measurements=measurements, n_iters=n_iters)
