"""CSV exports of simulation results and their reader for the metrics command.

Tables are UTF-8 with LF line endings, rows ordered by time then link id,
values written with ``repr`` so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .network import Network
from .simulation import SimOutput

QUANTITY_FILES = ("density.csv", "flow.csv", "speed.csv")
HEADER = "time_s,link,lane_group,value"
COMPARISON_HEADER = "time_s,offramp,target,simulated,residual"


def _time(t: int, dt_seconds: float) -> str:
    s = f"{t * dt_seconds:.6f}".rstrip("0").rstrip(".")
    return s or "0"


def _write(path: Path, header: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        if lines:
            fh.write("\n".join(lines) + "\n")


def _table(values: np.ndarray, order: list[int], ids, groups, dt_seconds: float) -> list[str]:
    lines = []
    for t in range(values.shape[0]):
        ts = _time(t, dt_seconds)
        row = values[t]
        for k in order:
            lines.append(f"{ts},{ids[k]},{groups[k]},{float(row[k])!r}")
    return lines


def export_contours(output: SimOutput, network: Network, out_dir: str | Path,
                    targets: Optional[Mapping[str, object]] = None,
                    interval_minutes: float = 5.0) -> list[Path]:
    """Write density (veh/mi/lane), flow (veh/h/lane) and speed (mph) tables.

    Also writes ``offramp_comparison.csv`` (header only without targets),
    ``links.csv`` and ``run.yaml``, which ``read_results`` needs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    dt_s = output.dt * 3600.0
    ids = output.link_ids
    lanes = np.array([network.link(l).lanes for l in ids])
    groups = [network.link(l).lane_group.value for l in ids]
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    paths = []

    tables = {
        "density.csv": output.density.sum(axis=2) / lanes,
        "flow.csv": output.outflow.sum(axis=2) / lanes,
        "speed.csv": output.speed,
    }
    for name, values in tables.items():
        p = out / name
        _write(p, HEADER, _table(values, order, ids, groups, dt_s))
        paths.append(p)

    rows = []
    if targets:
        spi = int(round(interval_minutes * 60.0 / dt_s))
        T = output.horizon
        for o in sorted(targets):
            series = np.atleast_1d(np.asarray(targets[o], dtype=float))
            flow = output.offramp_flow(o)
            for k in range(int(np.ceil(T / spi))):
                seg = flow[k * spi: min((k + 1) * spi, T)]
                if k >= series.size or seg.size == 0:
                    break
                sim = float(seg.mean())
                tgt = float(series[k])
                rows.append((k * spi, o, tgt, sim, sim - tgt))
        rows.sort(key=lambda r: (r[0], r[1]))
    p = out / "offramp_comparison.csv"
    _write(p, COMPARISON_HEADER, [f"{_time(t, dt_s)},{o},{a!r},{b!r},{c!r}" for t, o, a, b, c in rows])
    paths.append(p)

    p = out / "links.csv"
    _write(p, "link,role,lane_group,length,lanes",
           [f"{l.id},{l.role.value},{l.lane_group.value},{l.length!r},{l.lanes!r}"
            for l in sorted(network.links, key=lambda l: l.id)])
    paths.append(p)
    p = out / "run.yaml"
    p.write_text(yaml.safe_dump({"dt_seconds": dt_s, "horizon": output.horizon,
                                 "classes": list(output.class_ids)}, sort_keys=True),
                 encoding="utf-8", newline="\n")
    paths.append(p)
    return paths


def read_results(results_dir: str | Path) -> tuple[SimOutput, dict[str, dict]]:
    """Rebuild a (class-aggregated) output from exported tables.

    Returns the output (one pseudo-class holding totals) and per-link
    attributes from ``links.csv``.
    """
    d = Path(results_dir)
    for name in (*QUANTITY_FILES, "links.csv", "run.yaml"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} not found; not a results directory")
    meta = yaml.safe_load((d / "run.yaml").read_text(encoding="utf-8"))
    with open(d / "links.csv", encoding="utf-8", newline="") as fh:
        links = {row["link"]: row for row in csv.DictReader(fh)}
    ids = tuple(links)
    index = {l: k for k, l in enumerate(ids)}
    T = int(meta["horizon"])

    def load(name: str, rows: int) -> np.ndarray:
        arr = np.zeros((rows, len(ids)))
        dt_s = float(meta["dt_seconds"])
        with open(d / name, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                t = int(round(float(row["time_s"]) / dt_s))
                arr[t, index[row["link"]]] = float(row["value"])
        return arr

    lanes = np.array([float(links[l]["lanes"]) for l in ids])
    density = load("density.csv", T + 1) * lanes
    speed = load("speed.csv", T)
    flow = load("flow.csv", T) * lanes
    out = SimOutput(
        link_ids=ids, class_ids=("all",), dt=float(meta["dt_seconds"]) / 3600.0,
        density=density[:, :, None], inflow=np.zeros((T, len(ids), 1)), outflow=flow[:, :, None],
        speed=speed, metastate=np.zeros((T + 1, len(ids)), dtype=np.int64),
    )
    return out, links
