"""Inference timing: warm up, then time batches of single-image forward passes."""
import time
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ModelLoadFailure


@dataclass(frozen=True)
class BenchProtocol:
    warmup_inputs: int = 1000
    test_runs: int = 10
    inputs_per_run: int = 100
    image_size: int = 256

    def __post_init__(self):
        if min(self.warmup_inputs, self.test_runs, self.inputs_per_run, self.image_size) < 1:
            raise ValueError("benchmark counts must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class BenchResult:
    mean_ms: float
    sd_ms: float
    parameters: int
    run_ms: list

    def to_dict(self):
        return asdict(self)

    def row(self, name="GCN"):
        return f"{name}\t{self.mean_ms:.3f} +- {self.sd_ms:.3f} ms\t{self.parameters / 1e6:.3f} M"


def _load(model):
    if isinstance(model, str):
        from .gcn import GCNModel

        try:
            return GCNModel.load(model)
        except Exception as exc:  # any failure to read or build is a load failure
            raise ModelLoadFailure(f"{model}: {exc}") from exc
    if not hasattr(model, "forward"):
        raise ModelLoadFailure("object has no forward pass")
    return model


def bench_model(model, protocol=None, seed=0):
    """Mean and SD (over runs) of the per-input forward time in ms, plus parameter count.

    Inputs are generated up front so only the forward call is timed.
    """
    protocol = protocol or BenchProtocol()
    model = _load(model)
    rng = np.random.default_rng(seed)
    size = protocol.image_size
    dtype = getattr(model, "dtype", np.float32)
    warm = rng.random((protocol.warmup_inputs, size, size)).astype(dtype)
    for x in warm:
        model.forward(x[None])
    del warm
    runs = []
    for _ in range(protocol.test_runs):
        inputs = rng.random((protocol.inputs_per_run, size, size)).astype(dtype)
        t0 = time.perf_counter()
        for x in inputs:
            model.forward(x[None])
        runs.append((time.perf_counter() - t0) * 1000.0 / protocol.inputs_per_run)
    runs = np.asarray(runs)
    sd = float(runs.std(ddof=1)) if len(runs) > 1 else 0.0
    return BenchResult(float(runs.mean()), sd, int(model.parameter_count()), [float(r) for r in runs])
