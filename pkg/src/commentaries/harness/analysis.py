"""Family-specific analyses of a learned commentary (CSV plus SVG)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..commentary import Augmentation, AttentionMask, AuxTarget, ExampleWeight, FreeParameters
from ..data import Dataset
from ..experiments import example_weights
from . import svg
from .artifact import CommentaryArtifact


class UnsupportedFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class WeightAnalysis:
    """Example weights against rotation angle over the course of training."""

    bins: list[tuple[float, float, int, float, int]]  # (low, high, iteration, mean weight, count)
    spearman: list[tuple[int, float]]  # (iteration, rho(|angle|, weight))
    angles: np.ndarray
    final_weights: np.ndarray


def _iterations(horizon: int, count: int) -> list[int]:
    return sorted({int(round(horizon * k / (count - 1))) for k in range(count)})


def analyze_weights(commentary: ExampleWeight, dataset: Dataset, horizon: int, split: str = "train",
                    bin_width: float = 5.0, snapshots: int = 5, series_points: int = 11) -> WeightAnalysis:
    batch = dataset.split(split)
    angles = dataset.split_metadata(split, "angle")
    edges = np.arange(np.floor(angles.min() / bin_width) * bin_width, angles.max() + bin_width, bin_width)
    bins = []
    for it in _iterations(horizon, snapshots):
        w = example_weights(commentary, batch.inputs, it, horizon)
        idx = np.clip(np.digitize(angles, edges) - 1, 0, len(edges) - 2)
        for b in range(len(edges) - 1):
            sel = idx == b
            if sel.any():
                bins.append((float(edges[b]), float(edges[b + 1]), it, float(w[sel].mean()), int(sel.sum())))
    series = []
    for it in _iterations(horizon, series_points):
        w = example_weights(commentary, batch.inputs, it, horizon)
        rho = spearmanr(np.abs(angles), w)[0]
        series.append((it, float(rho)))
    final = example_weights(commentary, batch.inputs, horizon, horizon)
    return WeightAnalysis(bins, series, angles, final)


def tercile_means(angles: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Mean weight of the smallest-|angle| and largest-|angle| terciles."""
    a = np.abs(angles)
    lo, hi = np.quantile(a, [1 / 3, 2 / 3])
    return float(weights[a <= lo].mean()), float(weights[a >= hi].mean())


def overlap_means(angles: np.ndarray, weights: np.ndarray, low: float = -5.0, high: float = 5.0) -> tuple[float, float]:
    inside = (angles >= low) & (angles <= high)
    return float(weights[inside].mean()), float(weights[~inside].mean())


def lambda_grid(commentary: Augmentation) -> np.ndarray:
    return commentary.lambdas().value.copy()


@dataclass(frozen=True)
class MaskAnalysis:
    centers: np.ndarray  # (n, 2) predicted (row, col)
    targets: np.ndarray  # (n, 2) label-determining object
    distractors: np.ndarray | None  # (n, 2) or None when the data has a single object

    @property
    def target_distance(self) -> np.ndarray:
        return np.linalg.norm(self.centers - self.targets, axis=1)

    @property
    def distractor_distance(self) -> np.ndarray | None:
        if self.distractors is None:
            return None
        return np.linalg.norm(self.centers - self.distractors, axis=1)

    def nearer_target_fraction(self) -> float:
        d = self.distractor_distance
        if d is None:
            raise ValueError("no distractor object in this dataset")
        return float(np.mean(self.target_distance < d))


def analyze_mask(commentary: AttentionMask, dataset: Dataset, split: str = "test") -> MaskAnalysis:
    batch = dataset.split(split)
    centers = commentary.centers(batch.inputs).value.copy()
    meta = dataset.metadata
    if "red_row" in meta:
        targets = np.stack([dataset.split_metadata(split, "red_row"), dataset.split_metadata(split, "red_col")], 1)
        distractors = np.stack([dataset.split_metadata(split, "blue_row"),
                                dataset.split_metadata(split, "blue_col")], 1)
    elif "object_row" in meta:
        targets = np.stack([dataset.split_metadata(split, "object_row"),
                            dataset.split_metadata(split, "object_col")], 1)
        distractors = None
    else:
        raise UnsupportedFamilyError("mask analysis needs object positions in the dataset metadata")
    return MaskAnalysis(centers, targets.astype(float), None if distractors is None else distractors.astype(float))


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def report_analysis(artifact: CommentaryArtifact, dataset: Dataset, out_dir) -> list[Path]:
    """Write the family's analysis files into ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    com = artifact.commentary
    if isinstance(com, ExampleWeight):
        if "angle" not in dataset.metadata:
            raise UnsupportedFamilyError("example-weight analysis needs rotation angles in the metadata")
        horizon = int(artifact.extra.get("horizon", 1))
        res = analyze_weights(com, dataset, horizon)
        p1 = _write_csv(out / "weights_by_angle.csv", ("angle_low", "angle_high", "iteration", "mean_weight", "count"),
                        res.bins)
        p2 = _write_csv(out / "rank_correlation.csv", ("iteration", "spearman_abs_angle_weight"), res.spearman)
        series = []
        iters = sorted({b[2] for b in res.bins})
        for k, it in enumerate(iters):
            pts = [((b[0] + b[1]) / 2, b[3]) for b in res.bins if b[2] == it]
            series.append({"label": f"iteration {it}", "points": pts, "color": svg.PALETTE[k % len(svg.PALETTE)],
                           "width": 1.5})
        p3 = svg.write_text(svg.line_chart(series, "example weight by rotation", "angle (degrees)", "mean weight"),
                            out / "weights_by_angle.svg")
        p4 = svg.write_text(svg.line_chart([{"label": "spearman", "points": res.spearman, "color": svg.PALETTE[0],
                                             "width": 2.0}], "rank correlation over training", "iteration",
                                           "spearman(|angle|, weight)"), out / "rank_correlation.svg")
        return [p1, p2, p3, p4]
    if isinstance(com, Augmentation):
        lam = lambda_grid(com)
        rows = [(i, j, float(lam[i, j])) for i in range(lam.shape[0]) for j in range(lam.shape[1])]
        p1 = _write_csv(out / "lambda_grid.csv", ("class_1", "class_2", "lambda"), rows)
        p2 = svg.write_text(svg.heatmap(lam, "blending proportion", "class of second image",
                                        "class of first image", 0.5, 1.0), out / "lambda_grid.svg")
        return [p1, p2]
    if isinstance(com, AttentionMask):
        res = analyze_mask(com, dataset)
        dd = res.distractor_distance
        rows = []
        for k in range(len(res.centers)):
            row = [k, float(res.centers[k, 0]), float(res.centers[k, 1]), float(res.target_distance[k])]
            if dd is not None:
                row.append(float(dd[k]))
            rows.append(row)
        header = ["index", "center_row", "center_col", "distance_to_red" if dd is not None else "distance_to_object"]
        if dd is not None:
            header.append("distance_to_blue")
        p1 = _write_csv(out / "mask_centers.csv", header, rows)
        srt = np.sort(res.target_distance)
        series = [{"label": header[3], "points": [(float(d), (k + 1) / len(srt)) for k, d in enumerate(srt)],
                   "color": svg.PALETTE[1], "width": 2.0}]
        if dd is not None:
            sd = np.sort(dd)
            series.append({"label": "distance_to_blue", "points": [(float(d), (k + 1) / len(sd))
                                                                    for k, d in enumerate(sd)],
                           "color": svg.PALETTE[0], "width": 2.0})
        p2 = svg.write_text(svg.line_chart(series, "mask centre distance (cumulative)", "distance (pixels)",
                                           "fraction of test images"), out / "mask_centers.svg")
        return [p1, p2]
    if isinstance(com, (AuxTarget, FreeParameters)):
        raise UnsupportedFamilyError(f"no analysis is defined for the {com.family} family")
    raise UnsupportedFamilyError(type(com).__name__)
