"""Per-layer activation-variance profiling and weight-curve emission.

The profiler runs an eval-mode pass and, at each probed layer, records the
unbiased variance of every sample's unfolded activation, aggregating
average/max/min per layer. Probes are addressed by name so layer-counting
conventions never enter the picture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .losses import BiasLossConfig, batch_variances, bias_weight

PROFILE_HEADER = "layer,avg,max,min"
CURVE_HEADER = "alpha,beta,v,z_raw,z_clamped"


class ProbeError(ValueError):
    """Raised when a requested probe layer does not exist in the model."""


@dataclass
class LayerProbe:
    """Streaming accumulator for one layer's per-sample variances."""
    name: str
    count: int = 0
    total: float = 0.0
    max: float = float("-inf")
    min: float = float("inf")

    def update(self, variances):
        variances = np.asarray(variances, dtype=np.float64)
        self.count += variances.size
        self.total += float(variances.sum())
        self.max = max(self.max, float(variances.max()))
        self.min = min(self.min, float(variances.min()))

    def merge(self, other):
        """Combine two probes: count-weighted sum, global extrema."""
        if other.name != self.name:
            raise ProbeError(f"cannot merge {self.name} with {other.name}")
        out = LayerProbe(self.name, self.count + other.count,
                         self.total + other.total,
                         max(self.max, other.max), min(self.min, other.min))
        return out

    @property
    def avg(self):
        return self.total / self.count if self.count else float("nan")


@dataclass
class VarianceProfile:
    rows: list = field(default_factory=list)  # (layer, avg, max, min)
    model_id: str = ""
    dataset_id: str = ""
    loss_id: str = ""

    def row(self, layer):
        for r in self.rows:
            if r[0] == layer:
                return r
        raise ProbeError(f"layer {layer!r} not in profile")

    def to_csv(self):
        lines = [PROFILE_HEADER]
        for name, avg, mx, mn in self.rows:
            lines.append(f"{name},{avg!r},{mx!r},{mn!r}")
        return "\n".join(lines) + "\n"


def profile(model, dataset, layer_names=None, batch_size=256,
            normalize=None, loss_id=""):
    """Aggregate per-sample activation variances at the named layers.

    Probes read post-activation outputs (the same convention the loss's
    feature map uses). Layer order in the result follows network depth.
    """
    available = model.probe_names()
    if layer_names is None:
        layer_names = available
    unknown = [n for n in layer_names if n not in available]
    if unknown:
        raise ProbeError(f"unknown layers {unknown}; available: {available}")

    was_training = model.training
    model.eval()
    spec = datamod.AugmentSpec(hflip=False, rotate_deg=(0.0, 0.0),
                               normalize=normalize)
    probes = {name: LayerProbe(name) for name in layer_names}
    built = {}
    for b in datamod.batches(dataset, batch_size, shuffle=False,
                             augment_spec=spec):
        n = b.images.shape[0]
        out = built.get(n)
        if out is None:
            out = model.build(ad.leaf(b.images))
            built[n] = out
        else:
            out.input.set(b.images)
        fp = ad.ForwardPass()
        for name in layer_names:
            fp.run(out.probes[name])
            probes[name].update(batch_variances(out.probes[name].value))
    if was_training:
        model.train()

    ordered = [n for n in available if n in layer_names]
    rows = [(n, probes[n].avg, probes[n].max, probes[n].min) for n in ordered]
    model_id = f"{type(model).__name__}/{model.num_parameters()}p"
    return VarianceProfile(rows, model_id=model_id, dataset_id=dataset.name,
                           loss_id=loss_id)


def depth_trend(prof: VarianceProfile, early_layer, last_layer):
    """Whether average variance decays from the early to the last layer.

    Returns (verdict, ratio) with ratio = avg(early) / avg(last).
    """
    early = prof.row(early_layer)
    last = prof.row(last_layer)
    ratio = early[1] / last[1] if last[1] != 0 else float("inf")
    if early[1] == last[1]:
        ratio = 1.0
    return last[1] < early[1], ratio


def bias_curve(alphas, betas, samples=101, clamp_lo=0.5, clamp_hi=1.5):
    """Evaluate the weight function on a grid over scaled variance [0, 1].

    Yields (alpha, beta, v, z_raw, z_clamped) rows for external plotting.
    """
    vs = np.linspace(0.0, 1.0, int(samples))
    rows = []
    for a in alphas:
        for b in betas:
            cfg = BiasLossConfig(alpha=a, beta=b, clamp_lo=clamp_lo,
                                 clamp_hi=clamp_hi)
            raw = np.exp(a * vs) - b
            clamped = bias_weight(vs, cfg)
            for v, zr, zc in zip(vs, raw, clamped):
                rows.append((float(a), float(b), float(v), float(zr),
                             float(zc)))
    return rows


def curve_csv(rows):
    lines = [CURVE_HEADER]
    for a, b, v, zr, zc in rows:
        lines.append(f"{a!r},{b!r},{v!r},{zr!r},{zc!r}")
    return "\n".join(lines) + "\n"
