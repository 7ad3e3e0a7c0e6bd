"""GPU saturation scoring: aggregate telemetry series into per-component
and overall scores.

Utilization tells you how often a GPU was busy; saturation tells you how
hard its compute pipes, memory system, and interconnect were actually
loaded. The model here is a weighted linear combination chosen for
monotonicity and explainability:

    compute  = time-and-GPU average of max(SmActivity, TensorActivity)
    memory   = average of MemoryBandwidthUtilization
    network  = average of (NvlinkTx + NvlinkRx) / (2 * link_peak), clamped
    overall  = w_c * compute + w_m * memory + w_n * network

The compute pipes overlap, so the pointwise max (not the sum) keeps a
pure-tensor workload able to reach 1.0. Weights and the per-system link
peak are configuration; there is no portable way to auto-detect them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .probe import GpuGroup, GpuId, MetricField, MetricSample, Probe

__all__ = [
    "MetricSeries",
    "ScoreWeights",
    "SaturationScore",
    "MissingField",
    "DEFAULT_FIELDS",
    "DEFAULT_LINK_PEAK_GBPS",
    "collect",
    "group_samples",
    "score",
    "export_series",
    "read_series_json",
    "read_series_csv",
    "render_figures",
]

DEFAULT_FIELDS: tuple[MetricField, ...] = (
    MetricField.GpuUtilization,
    MetricField.SmActivity,
    MetricField.SmOccupancy,
    MetricField.TensorActivity,
    MetricField.MemoryBandwidthUtilization,
    MetricField.NvlinkTxBandwidth,
    MetricField.NvlinkRxBandwidth,
)

DEFAULT_LINK_PEAK_GBPS = 100.0

_COMPUTE_FIELDS = (MetricField.SmActivity, MetricField.TensorActivity)
_NETWORK_FIELDS = (MetricField.NvlinkTxBandwidth, MetricField.NvlinkRxBandwidth)


class MissingField(ValueError):
    """A score component has positive weight but no input series."""


@dataclass(frozen=True)
class MetricSeries:
    gpu: GpuId
    field: MetricField
    samples: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("series may not be empty")
        lo, hi = self.field.value_range
        previous = None
        for ts, value in self.samples:
            if previous is not None and ts <= previous:
                raise ValueError("series timestamps must be strictly increasing")
            previous = ts
            if not (lo <= value <= hi):
                raise ValueError(
                    f"{self.field.name} value {value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class ScoreWeights:
    compute: float = 0.5
    memory: float = 0.3
    network: float = 0.2

    def __post_init__(self) -> None:
        if min(self.compute, self.memory, self.network) < 0:
            raise ValueError("weights must be non-negative")
        if abs(self.compute + self.memory + self.network - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @classmethod
    def parse(cls, text: str) -> "ScoreWeights":
        parts = text.split(",")
        if len(parts) != 3:
            raise ValueError("weights must be three comma-separated numbers")
        return cls(*(float(p) for p in parts))


@dataclass(frozen=True)
class SaturationScore:
    compute: float
    memory: float
    network: float
    overall: float
    weights: ScoreWeights
    window: tuple[int, int]

    def __post_init__(self) -> None:
        expected = (self.weights.compute * self.compute
                    + self.weights.memory * self.memory
                    + self.weights.network * self.network)
        if abs(self.overall - expected) > 1e-9:
            raise ValueError("overall must equal the weighted component sum")

    def to_dict(self) -> dict:
        return {
            "compute": self.compute,
            "memory": self.memory,
            "network": self.network,
            "overall": self.overall,
            "weights": [self.weights.compute, self.weights.memory,
                        self.weights.network],
            "window_ms": list(self.window),
        }


def collect(
    group: GpuGroup,
    probe: Probe,
    interval_ms: int,
    duration_ms: int,
    extra_fields: tuple[MetricField, ...] = (),
) -> list[MetricSeries]:
    """One series per (gpu, field) for the default field set plus extras."""
    fields = tuple(dict.fromkeys(DEFAULT_FIELDS + tuple(extra_fields)))
    samples = probe.sample(group, set(fields), interval_ms, duration_ms)
    return group_samples(samples)


def group_samples(samples: list[MetricSample]) -> list[MetricSeries]:
    by_key: dict[tuple[GpuId, MetricField], list[tuple[int, float]]] = {}
    for sample in samples:
        by_key.setdefault((sample.gpu, sample.field), []).append(
            (sample.timestamp_ms, sample.value))
    series = []
    for (gpu, fld), points in sorted(
        by_key.items(), key=lambda kv: (kv[0][0], kv[0][1].name)
    ):
        series.append(MetricSeries(gpu=gpu, field=fld,
                                   samples=tuple(sorted(points))))
    return series


def _component_average(
    series: list[MetricSeries],
    fields: tuple[MetricField, ...],
    transform,
) -> float | None:
    """Average transform(values-at-timestamp) over every (gpu, timestamp).

    Values of the contributing fields are aligned per GPU by timestamp;
    a timestamp counts once it appears in at least one contributing
    series. Returns None when no contributing series exist.
    """
    per_gpu: dict[GpuId, dict[MetricField, dict[int, float]]] = {}
    for s in series:
        if s.field in fields:
            per_gpu.setdefault(s.gpu, {}).setdefault(s.field, {}).update(
                dict(s.samples))
    if not per_gpu:
        return None
    total = 0.0
    count = 0
    for field_maps in per_gpu.values():
        stamps = sorted({ts for m in field_maps.values() for ts in m})
        for ts in stamps:
            values = {f: m[ts] for f, m in field_maps.items() if ts in m}
            total += transform(values)
            count += 1
    return total / count if count else None


def score(
    series: list[MetricSeries],
    weights: ScoreWeights = ScoreWeights(),
    link_peak_gbps: float = DEFAULT_LINK_PEAK_GBPS,
) -> SaturationScore:
    """Aggregate series into component and overall saturation scores."""
    if not series:
        raise ValueError("score requires at least one series")
    if link_peak_gbps <= 0:
        raise ValueError("link_peak_gbps must be positive")

    compute = _component_average(
        series, _COMPUTE_FIELDS, lambda values: max(values.values()))
    memory = _component_average(
        series, (MetricField.MemoryBandwidthUtilization,),
        lambda values: next(iter(values.values())))
    network = _component_average(
        series, _NETWORK_FIELDS,
        lambda values: min(sum(values.values()) / (2.0 * link_peak_gbps), 1.0))

    resolved = {}
    for name, value, weight in (
        ("compute", compute, weights.compute),
        ("memory", memory, weights.memory),
        ("network", network, weights.network),
    ):
        if value is None:
            if weight > 0:
                raise MissingField(
                    f"no input series for the {name} component (weight {weight})")
            value = 0.0
        resolved[name] = value

    stamps = [ts for s in series for ts, _ in s.samples]
    overall = (weights.compute * resolved["compute"]
               + weights.memory * resolved["memory"]
               + weights.network * resolved["network"])
    return SaturationScore(
        compute=resolved["compute"],
        memory=resolved["memory"],
        network=resolved["network"],
        overall=overall,
        weights=weights,
        window=(min(stamps), max(stamps)),
    )


# --- export -------------------------------------------------------------------

def export_series(
    series: list[MetricSeries], fmt: str, out_dir: str | Path
) -> list[Path]:
    """Write one file per field; columns are timestamp, gpu, value."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unsupported export format {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_field: dict[MetricField, list[MetricSeries]] = {}
    for s in series:
        by_field.setdefault(s.field, []).append(s)

    written: list[Path] = []
    for fld in sorted(by_field, key=lambda f: f.name):
        rows = sorted(by_field[fld], key=lambda s: s.gpu)
        path = out_dir / f"{fld.name}.{fmt}"
        if fmt == "csv":
            with path.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(["timestamp", "gpu", "value"])
                for s in rows:
                    for ts, value in s.samples:
                        writer.writerow([ts, str(s.gpu), value])
        else:
            payload = {
                "field": fld.name,
                "series": [
                    {"gpu": str(s.gpu), "samples": [[ts, v] for ts, v in s.samples]}
                    for s in rows
                ],
            }
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
        written.append(path)
    return written


def read_series_json(path: str | Path) -> list[MetricSeries]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    fld = MetricField[data["field"]]
    return [
        MetricSeries(
            gpu=GpuId.parse(entry["gpu"]),
            field=fld,
            samples=tuple((int(ts), float(v)) for ts, v in entry["samples"]),
        )
        for entry in data["series"]
    ]


def read_series_csv(path: str | Path) -> list[MetricSeries]:
    path = Path(path)
    fld = MetricField[path.stem]
    points: dict[GpuId, list[tuple[int, float]]] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            points.setdefault(GpuId.parse(row["gpu"]), []).append(
                (int(row["timestamp"]), float(row["value"])))
    return [
        MetricSeries(gpu=gpu, field=fld, samples=tuple(sorted(pts)))
        for gpu, pts in sorted(points.items())
    ]


# --- figures ------------------------------------------------------------------

def render_figures(
    series: list[MetricSeries],
    result: SaturationScore | None,
    out_dir: str | Path,
) -> list[Path]:
    """Render per-field time-series plots plus the component aggregate."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_field: dict[MetricField, list[MetricSeries]] = {}
    for s in series:
        by_field.setdefault(s.field, []).append(s)

    written: list[Path] = []
    for fld in sorted(by_field, key=lambda f: f.name):
        fig, ax = plt.subplots(figsize=(8, 3.2))
        for s in sorted(by_field[fld], key=lambda s: s.gpu):
            xs = [ts / 1000.0 for ts, _ in s.samples]
            ys = [v for _, v in s.samples]
            ax.plot(xs, ys, linewidth=1.0, label=str(s.gpu))
        ax.set_xlabel("time [s]")
        lo, hi = fld.value_range
        if hi == 1.0:
            ax.set_ylim(-0.05, 1.05)
            ax.set_ylabel("fraction")
        else:
            ax.set_ylabel("GB/s" if "Bandwidth" in fld.name else "°C")
        ax.set_title(fld.name)
        if len(by_field[fld]) <= 8:
            ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        path = out_dir / f"{fld.name}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    if result is not None:
        fig, ax = plt.subplots(figsize=(6, 3.2))
        labels = [
            f"compute\n(w={result.weights.compute:g})",
            f"memory\n(w={result.weights.memory:g})",
            f"network\n(w={result.weights.network:g})",
            "overall",
        ]
        values = [result.compute, result.memory, result.network, result.overall]
        colors = ["#4c72b0", "#dd8452", "#55a868", "#555555"]
        ax.bar(labels, values, color=colors)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("saturation")
        ax.set_title("GPU saturation components")
        for i, value in enumerate(values):
            ax.text(i, value + 0.02, f"{value:.3f}", ha="center", fontsize=8)
        fig.tight_layout()
        path = out_dir / "saturation_components.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
