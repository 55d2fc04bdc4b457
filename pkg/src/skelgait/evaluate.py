"""Gallery construction, nearest-neighbour identification and rank-1 reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DatasetProtocol, SkeletonSequence, _id_key, normalize_sequence
from .nn import GaitNet
from .tensor import no_grad


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GalleryIndex:
    labels: tuple[str, ...]
    embeddings: np.ndarray
    metadata: tuple[dict, ...] = ()

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise EvaluationError("a gallery needs at least one embedding")
        if emb.shape[0] != len(self.labels):
            raise EvaluationError("one label per gallery embedding is required")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", tuple(str(l) for l in self.labels))

    def __len__(self):
        return len(self.labels)


def embed_sequences(model: GaitNet, sequences: Sequence[SkeletonSequence]) -> np.ndarray:
    """Eval-mode, full-length embeddings, one row per sequence."""
    out = np.empty((len(sequences), model.units[-1].c_out))
    with no_grad():
        for k, seq in enumerate(sequences):
            x = normalize_sequence(seq, model.layout).to_network_input()[None]
            out[k] = model.forward(x.astype(model.dtype), training=False).data[0]
    return out


def build_gallery(model: GaitNet, sequences: Sequence[SkeletonSequence]) -> GalleryIndex:
    if not sequences:
        raise EvaluationError("gallery set is empty")
    emb = embed_sequences(model, sequences)
    meta = tuple(
        {"name": s.name, "condition": s.condition, "seq_index": s.seq_index, "view": s.view}
        for s in sequences
    )
    return GalleryIndex(tuple(s.identity for s in sequences), emb, meta)


def identify(index: GalleryIndex, probe: np.ndarray) -> tuple[str, float]:
    """Identity of the nearest gallery embedding; equal distances go to the smallest label."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != index.embeddings.shape[1:]:
        raise EvaluationError(
            f"probe has shape {probe.shape}, gallery embeddings {index.embeddings.shape[1:]}"
        )
    dist = np.sqrt(((index.embeddings - probe) ** 2).sum(axis=1))
    best = dist.min()
    winners = [index.labels[k] for k in np.flatnonzero(dist == best)]
    return min(winners, key=_id_key), float(best)


@dataclass
class AccuracyReport:
    """Rank-1 accuracy per (probe condition, view) cell."""

    conditions: list[str]
    views: list
    counts: dict = field(default_factory=dict)  # (condition, view) -> (correct, total)

    def accuracy(self, condition: str, view) -> float:
        correct, total = self.counts[(condition, view)]
        return correct / total

    def condition_mean(self, condition: str) -> float:
        return float(np.mean([self.accuracy(condition, v) for v in self.views]))

    def view_mean(self, view) -> float:
        return float(np.mean([self.accuracy(c, view) for c in self.conditions]))

    @property
    def average(self) -> float:
        """Unweighted mean of the per-condition means."""
        return float(np.mean([self.condition_mean(c) for c in self.conditions]))

    def to_dict(self) -> dict:
        return {
            "cells": {f"{c}@{v}": self.accuracy(c, v) for c in self.conditions for v in self.views},
            "means": {c: self.condition_mean(c) for c in self.conditions},
            "average": self.average,
        }


def evaluate(model: GaitNet, protocol: DatasetProtocol, gallery_as_probe: bool = False) -> AccuracyReport:
    """Single-view rank-1 identification of every probe against same-view gallery entries."""
    gallery = protocol.gallery
    if not gallery:
        raise EvaluationError("protocol has an empty gallery")
    probes = {"GALLERY": gallery} if gallery_as_probe else protocol.probes
    views = sorted({s.view for s in gallery}, key=str)
    gal_emb = embed_sequences(model, gallery)
    indexes = {}
    for v in views:
        rows = [k for k, s in enumerate(gallery) if s.view == v]
        indexes[v] = GalleryIndex(tuple(gallery[k].identity for k in rows), gal_emb[rows])
    report = AccuracyReport(list(probes), views)
    for cond, seqs in probes.items():
        stray = sorted({str(s.view) for s in seqs if s.view not in indexes})
        if stray:
            raise EvaluationError(f"{cond} probes at views {stray} have no gallery entries")
        emb = gal_emb if gallery_as_probe else embed_sequences(model, seqs)
        for v in views:
            rows = [k for k, s in enumerate(seqs) if s.view == v]
            if not rows:
                raise EvaluationError(f"no {cond} probes at view {v}")
            correct = sum(identify(indexes[v], emb[k])[0] == seqs[k].identity for k in rows)
            report.counts[(cond, v)] = (correct, len(rows))
    return report


def _view_header(v) -> str:
    return f"{v}°" if isinstance(v, (int, np.integer)) else str(v)


def render_report(report: AccuracyReport, fmt: str = "text") -> str:
    """Percentages with one decimal; rows are probe conditions plus an Average row."""
    header = [""] + [_view_header(v) for v in report.views] + ["Mean"]
    rows = []
    for c in report.conditions:
        rows.append([c] + [f"{100 * report.accuracy(c, v):.1f}" for v in report.views]
                    + [f"{100 * report.condition_mean(c):.1f}"])
    rows.append(["Average"] + [f"{100 * report.view_mean(v):.1f}" for v in report.views]
                + [f"{100 * report.average:.1f}"])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition"] + [str(v) for v in report.views] + ["Mean"])
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max(len(r[k]) for r in [header] + rows) for k in range(len(header))]
    lines = ["  ".join(cell.rjust(wd) if k else cell.ljust(wd) for k, (cell, wd) in enumerate(zip(r, widths)))
             for r in [header] + rows]
    return "\n".join(lines) + "\n"
