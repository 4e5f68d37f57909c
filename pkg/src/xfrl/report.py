"""CSV and SVG emission for experiment reports, plus per-directory locking.

Floats are written with ``repr`` so files round-trip exactly and stay
byte-stable across reruns.
"""
from __future__ import annotations

import csv
import io
import os
from contextlib import contextmanager
from pathlib import Path

from .protocols import ExperimentReport

LOCK_NAME = ".xfrl.lock"


class ReportError(OSError):
    pass


class DirectoryLocked(ReportError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([_fmt(v) for v in row] for row in rows)
    return buf.getvalue().encode("utf-8")


def sweep_csv(report: ExperimentReport) -> bytes:
    """Rows ordered by ``k``; the scratch baseline is ``k = 0``."""
    rows = [[p.k, float(p.accuracy), float(p.relative_accuracy)] for p in sorted(report.sweep, key=lambda p: p.k)]
    return _csv_bytes(["k", "accuracy", "relative_accuracy"], rows)


def train_log_csv(report: ExperimentReport) -> bytes:
    layers = sorted({l for e in report.epochs for l in e.mmd})
    header = ["epoch", "phase", "loss_cls"] + [f"mmd_{l}" for l in layers] + ["loss_total", "test_acc"]
    rows = [
        [e.epoch, e.phase, e.loss_cls] + [e.mmd.get(l) for l in layers] + [e.loss_total, e.test_acc]
        for e in report.epochs
    ]
    return _csv_bytes(header, rows)


def sweep_svg(report: ExperimentReport, width: int = 420, height: int = 280) -> str:
    """Relative accuracy against k, with a zero baseline rule."""
    points = sorted((p.k, p.relative_accuracy) for p in report.sweep if p.k > 0)
    pad = 40
    ks = [k for k, _ in points] or [1]
    ys = [y for _, y in points] + [0.0]
    k0, k1 = min(ks), max(ks)
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.05, y1 + 0.05

    def sx(k):
        return pad + (width - 2 * pad) * ((k - k0) / (k1 - k0) if k1 > k0 else 0.5)

    def sy(y):
        return height - pad - (height - 2 * pad) * (y - y0) / (y1 - y0)

    poly = " ".join(f"{sx(k):.2f},{sy(y):.2f}" for k, y in points)
    marks = "".join(f'<circle cx="{sx(k):.2f}" cy="{sy(y):.2f}" r="3"/>' for k, y in points)
    ticks = "".join(
        f'<text x="{sx(k):.2f}" y="{height - pad + 16}" text-anchor="middle" font-size="11">{k}</text>' for k in ks
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">'
        f'<line x1="{pad}" y1="{sy(0.0):.2f}" x2="{width - pad}" y2="{sy(0.0):.2f}" stroke="black"/>'
        f'<polyline points="{poly}" fill="none" stroke="steelblue" stroke-width="2"/>'
        f'<g fill="steelblue">{marks}</g>{ticks}'
        f'<text x="{width / 2:.0f}" y="{height - 6}" text-anchor="middle" font-size="12">k (frozen layers)</text>'
        f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})"'
        f' text-anchor="middle">relative accuracy</text></svg>\n'
    )


def write_report(report: ExperimentReport, directory, svg: bool = False) -> list[Path]:
    """Write ``sweep.csv`` when the report has sweep points and
    ``train_log.csv`` when it has epochs. Returns the paths written."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        if report.sweep:
            written.append(_write(directory / "sweep.csv", sweep_csv(report)))
            if svg:
                written.append(_write(directory / "sweep.svg", sweep_svg(report).encode("utf-8")))
        if report.epochs:
            written.append(_write(directory / "train_log.csv", train_log_csv(report)))
    except OSError as e:
        raise ReportError(f"cannot write report to {directory}: {e.strerror or e}") from None
    return written


def _write(path: Path, data: bytes) -> Path:
    path.write_bytes(data)
    return path


@contextmanager
def locked_dir(directory):
    """Exclusive ownership of an output directory for one run."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create output directory {directory}: {e.strerror or e}") from None
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DirectoryLocked(f"{directory} is in use by another run (remove {lock} if stale)") from None
    except OSError as e:
        raise ReportError(f"cannot lock {directory}: {e.strerror or e}") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)
