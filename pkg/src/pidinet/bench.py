"""Complexity and throughput measurement."""
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .model import count_macs, count_params, layer_breakdown


@dataclass
class BenchReport:
    config: str
    height: int
    width: int
    params: int
    macs: int
    fps: float
    iters: int
    difference_form: bool = False
    layers: list = field(default_factory=list)

    def to_text(self):
        keys = ("config", "height", "width", "params", "macs", "fps", "iters", "difference_form")
        lines = [f"{k}={getattr(self, k)}" for k in keys]
        for row in self.layers:
            lines.append(f"layer.{row['name']}=params:{row['params']},macs:{row['macs']}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def time_forward(model, h, w, warmup=3, iters=10, difference=False, seed=0):
    """Seconds per single-image forward, averaged over ``iters`` warm runs."""
    dtype = model.params["init.weight"].dtype
    x = np.random.default_rng(seed).random((1, 3, h, w)).astype(dtype)
    for _ in range(warmup):
        model.forward(x, difference=difference)
    t0 = time.perf_counter()
    for _ in range(iters):
        model.forward(x, difference=difference)
    return (time.perf_counter() - t0) / iters


def benchmark(model, h=200, w=200, warmup=3, iters=50, difference=False, threads=1):
    """Params, MACs and frames per second at a fixed input size.

    Expects a converted model for deployment numbers; ``difference=True``
    instead times the unconverted difference-form forward.
    """
    with threadpool_limits(threads):
        sec = time_forward(model, h, w, warmup, iters, difference)
    return BenchReport(
        config=model.config.text, height=h, width=w,
        params=count_params(model), macs=count_macs(model, h, w),
        fps=1.0 / sec, iters=iters, difference_form=difference,
        layers=[dict(r) for r in layer_breakdown(model, h, w)],
    )
