"""Quality metrics and the experiment harness.

PSNR, Bjøntegaard-delta rate, whole-frame filtering through overlapping
tiles, the variant comparison report, the cross-QP transfer matrix and
feature-map export.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .codec import CodedTriple, Frame, encode_frame, partition_mean_mask
from .formats import atomic_write, encode_pgm
from .model import FilterModel, Variant
from .tensor import Tensor, no_grad
from .trainer import normalize_planes

TILE = 64
TILE_OVERLAP = 8
PEAK = 255.0


class BDRateError(ValueError):
    """RD curves unusable for a Bjøntegaard comparison."""


class UnknownLayerError(KeyError):
    def __init__(self, layer: str, valid: Sequence[str]):
        super().__init__(f"unknown layer {layer!r}; valid layers: {', '.join(valid)}")
        self.layer = layer
        self.valid = list(valid)

    def __str__(self) -> str:
        return self.args[0]


# ---------------------------------------------------------------------------
# metrics


def mse(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    pa = a.plane if isinstance(a, Frame) else np.asarray(a)
    pb = b.plane if isinstance(b, Frame) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValueError(f"frame dimensions differ: {pa.shape} vs {pb.shape}")
    d = pa.astype(np.float64) - pb.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    """PSNR in dB for 8-bit planes; ``math.inf`` when they are identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


@dataclass(frozen=True)
class RDPoint:
    rate: float
    psnr: float


@dataclass
class RDCurve:
    label: str
    points: list

    def __post_init__(self):
        self.points = sorted(
            (p if isinstance(p, RDPoint) else RDPoint(*p) for p in self.points), key=lambda p: p.rate
        )

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points], dtype=np.float64)

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points], dtype=np.float64)

    def validate(self) -> None:
        if len(self.points) < 4:
            raise BDRateError(f"curve {self.label!r} has {len(self.points)} points; 4 are required")
        r, q = self.rates, self.psnrs
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(q))):
            raise BDRateError(f"curve {self.label!r} has non-finite points")
        if np.any(r <= 0):
            raise BDRateError(f"curve {self.label!r} has non-positive rates")
        if np.any(np.diff(q) <= 0):
            raise BDRateError(f"curve {self.label!r}: PSNR is not strictly increasing with rate")


def bd_log_offset(anchor: RDCurve, test: RDCurve) -> float:
    """Mean of log(rate_test) - log(rate_anchor) over the shared PSNR interval.

    Each curve's log-rate is fitted as a cubic polynomial in PSNR (an exact
    interpolant for four points) and integrated analytically.
    """
    anchor.validate()
    test.validate()
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    if hi <= lo:
        raise BDRateError(f"PSNR ranges of {anchor.label!r} and {test.label!r} do not overlap")
    integrals = []
    for curve in (anchor, test):
        poly = np.polyfit(curve.psnrs, np.log(curve.rates), 3)
        prim = np.polyint(poly)
        integrals.append(np.polyval(prim, hi) - np.polyval(prim, lo))
    return float((integrals[1] - integrals[0]) / (hi - lo))


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate difference of ``test`` vs ``anchor`` in percent (negative = saving)."""
    return (math.exp(bd_log_offset(anchor, test)) - 1.0) * 100.0


def read_rd_csv(path) -> RDCurve:
    """Read ``rate,psnr`` rows (header optional) into a curve labelled by the file stem."""
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                points.append(RDPoint(float(row[0]), float(row[1])))
            except ValueError:
                if points:
                    raise
                continue  # header
    return RDCurve(Path(path).stem, points)


# ---------------------------------------------------------------------------
# filtering


def _tile_starts(length: int, overlap: int) -> list:
    starts = list(range(0, length - TILE + 1, TILE - overlap))
    if starts[-1] != length - TILE:
        starts.append(length - TILE)
    return starts


def model_planes(model: FilterModel, triple: CodedTriple) -> list:
    """The normalized input planes ``model`` expects for ``triple``, in call order."""
    recon = triple.reconstruction.plane
    variant = model.config.variant
    if variant is Variant.RECON_ONLY_EDSR:
        return [normalize_planes(recon, triple.residual)["recon"]]
    if variant is Variant.PARTITION_RECON:
        mask = partition_mean_mask(triple.reconstruction, triple.partition).plane
        p = normalize_planes(recon, triple.residual, mask=mask)
        return [p["mask"], p["recon"]]
    p = normalize_planes(recon, triple.residual)
    return [p["residual"], p["recon"]]


def to_frame(plane: np.ndarray) -> Frame:
    """Denormalize, clip to [0, 255] and round (halves up) to 8-bit."""
    scaled = np.clip(np.asarray(plane, dtype=np.float64) * PEAK, 0.0, PEAK)
    return Frame(np.floor(scaled + 0.5).astype(np.uint8))


def filter_planes(
    model: FilterModel,
    planes: Sequence[np.ndarray],
    batch: int = 16,
    overlap: int = TILE_OVERLAP,
) -> np.ndarray:
    """Filter whole normalized planes through overlapping 64x64 tiles.

    Planes are edge-padded up to at least one tile; overlapping outputs are
    averaged uniformly.  Returns the normalized output plane, cropped.
    """
    h, w = planes[0].shape
    ph, pw = max(h, TILE), max(w, TILE)
    padded = [np.pad(p, ((0, ph - h), (0, pw - w)), mode="edge") for p in planes]
    origins = [(y, x) for y in _tile_starts(ph, overlap) for x in _tile_starts(pw, overlap)]
    acc = np.zeros((ph, pw), dtype=np.float64)
    count = np.zeros((ph, pw), dtype=np.float64)
    with no_grad():
        for i in range(0, len(origins), batch):
            chunk = origins[i : i + batch]
            inputs = [
                Tensor(np.stack([p[y : y + TILE, x : x + TILE] for y, x in chunk])[:, None])
                for p in padded
            ]
            out = model(*inputs).data
            for (y, x), tile in zip(chunk, out[:, 0]):
                acc[y : y + TILE, x : x + TILE] += tile
                count[y : y + TILE, x : x + TILE] += 1.0
    return (acc / count)[:h, :w]


def apply_filter(model: FilterModel, triple: CodedTriple, overlap: int = TILE_OVERLAP) -> Frame:
    """Run the in-loop filter on a coded frame in place of deblocking/SAO."""
    return to_frame(filter_planes(model, model_planes(model, triple), overlap=overlap))


# ---------------------------------------------------------------------------
# experiments


def encode_corpus(corpus: Mapping[str, Frame], qps: Sequence[int]) -> dict:
    """``{(name, qp): CodedTriple}`` for every image and qp."""
    return {(name, qp): encode_frame(frame, qp) for name, frame in corpus.items() for qp in qps}


def _mean_finite(values) -> tuple[float, int]:
    vals = [v for v in values if not math.isinf(v)]
    return (float(np.mean(vals)) if vals else math.nan), len(values) - len(vals)


@dataclass
class EvalReport:
    """Per-sequence PSNRs, gains and BD-rates of several filter variants.

    ``psnr[(seq, qp)]`` maps ``"anchor"`` and each variant label to a PSNR;
    ``bd_vs_anchor[seq][label]`` and ``bd_pairwise[seq][(test, ref)]`` hold
    BD-rates in percent (NaN where curves were unavailable); the ``"average"``
    pseudo-sequence holds means over sequences.
    """

    sequences: list
    variants: list
    qps: list
    rates: dict = field(default_factory=dict)
    psnr: dict = field(default_factory=dict)
    bd_vs_anchor: dict = field(default_factory=dict)
    bd_pairwise: dict = field(default_factory=dict)
    inf_excluded: int = 0

    def gain(self, seq: str, qp: int, label: str) -> float:
        return self.psnr[(seq, qp)][label] - self.psnr[(seq, qp)]["anchor"]

    def mean_gain(self, label: str, qp: int) -> float:
        vals = [self.gain(s, qp, label) for s in self.sequences]
        mean, _ = _mean_finite([v for v in vals if not math.isnan(v)])
        return mean

    # -- rendering ---------------------------------------------------------

    def bd_rows(self) -> list:
        rows = []
        for seq in self.sequences + ["average"]:
            rows.append([seq] + [self.bd_vs_anchor[seq].get(v, math.nan) for v in self.variants])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "sequence", "qp", "label", "reference", "value"])
        for (seq, qp), row in sorted(self.psnr.items()):
            w.writerow(["rate", seq, qp, "anchor", "", repr(self.rates[(seq, qp)])])
            for label, value in row.items():
                w.writerow(["psnr", seq, qp, label, "", format_psnr(value)])
        for qp in self.qps:
            for v in self.variants:
                w.writerow(["mean_gain_db", "average", qp, v, "anchor", f"{self.mean_gain(v, qp):.4f}"])
        for seq in self.sequences + ["average"]:
            for v in self.variants:
                w.writerow(["bd_rate", seq, "", v, "anchor", _fmt(self.bd_vs_anchor[seq].get(v))])
            for (t, r), value in self.bd_pairwise[seq].items():
                w.writerow(["bd_rate", seq, "", t, r, _fmt(value)])
        return buf.getvalue()

    def to_text(self) -> str:
        labels = ["sequence"] + [f"{v} vs anchor" for v in self.variants]
        rows = [[r[0]] + [_fmt(x) for x in r[1:]] for r in self.bd_rows()]
        out = ["BD-rate (%)", _aligned([labels] + rows), ""]
        head = ["qp"] + [f"{v} dPSNR" for v in self.variants]
        gain_rows = [[str(qp)] + [f"{self.mean_gain(v, qp):+.4f}" for v in self.variants] for qp in self.qps]
        out += ["mean PSNR gain over anchor (dB)", _aligned([head] + gain_rows), ""]
        if len(self.variants) > 1:
            head = ["test \\ ref"] + self.variants
            avg = self.bd_pairwise["average"]
            rows = [[t] + [_fmt(avg.get((t, r), math.nan)) for r in self.variants] for t in self.variants]
            out += ["pairwise BD-rate, averaged (%)", _aligned([head] + rows), ""]
        if self.inf_excluded:
            out.append(f"note: {self.inf_excluded} infinite PSNR value(s) excluded from averages")
        return "\n".join(out) + "\n"


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.2f}"


def _aligned(rows: list) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(wd) for c, wd in zip(r, widths)) for r in rows)


def _safe_bd(anchor: RDCurve, test: RDCurve) -> float:
    try:
        return bd_rate(anchor, test)
    except BDRateError:
        return math.nan


def ablation_report(
    corpus: Mapping[str, Frame],
    models: Mapping[tuple, FilterModel],
    qps: Sequence[int],
    variants: Sequence[str] | None = None,
    coded: dict | None = None,
    overlap: int = TILE_OVERLAP,
) -> EvalReport:
    """Compare filter variants against the unfiltered codec output.

    ``models`` maps ``(label, qp)`` to a trained model (labels are usually
    variant names).  Every label must have a model at every qp.
    """
    labels = list(variants) if variants is not None else sorted({lab for lab, _ in models})
    for lab in labels:
        for qp in qps:
            if (lab, qp) not in models:
                raise KeyError(f"missing weights for variant {lab} at qp {qp}")
    coded = coded if coded is not None else encode_corpus(corpus, qps)
    report = EvalReport(list(corpus), labels, list(qps))
    for seq in corpus:
        for qp in qps:
            triple = coded[(seq, qp)]
            row = {"anchor": psnr(triple.original, triple.reconstruction)}
            for lab in labels:
                row[lab] = psnr(triple.original, apply_filter(models[(lab, qp)], triple, overlap))
            report.psnr[(seq, qp)] = row
            report.rates[(seq, qp)] = triple.rate_proxy
            report.inf_excluded += sum(math.isinf(v) for v in row.values())

    def curve(seq, lab):
        return RDCurve(lab, [RDPoint(report.rates[(seq, qp)], report.psnr[(seq, qp)][lab]) for qp in qps])

    for seq in corpus:
        anchor = curve(seq, "anchor")
        report.bd_vs_anchor[seq] = {"anchor": _safe_bd(anchor, anchor)}
        report.bd_vs_anchor[seq].update({lab: _safe_bd(anchor, curve(seq, lab)) for lab in labels})
        report.bd_pairwise[seq] = {
            (t, r): _safe_bd(curve(seq, r), curve(seq, t)) for t in labels for r in labels if t != r
        }
    report.bd_vs_anchor["average"] = {
        lab: _nanmean([report.bd_vs_anchor[s][lab] for s in corpus]) for lab in ["anchor"] + labels
    }
    report.bd_pairwise["average"] = {
        key: _nanmean([report.bd_pairwise[s][key] for s in corpus]) for key in report.bd_pairwise[next(iter(corpus))]
    }
    return report


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def cross_qp_matrix(
    models: Mapping[int, FilterModel],
    corpus: Mapping[str, Frame],
    qps: Sequence[int],
    coded: dict | None = None,
    overlap: int = TILE_OVERLAP,
) -> np.ndarray:
    """ΔPSNR of applying the qp-``m`` model to qp-``q`` data vs the matched model.

    Entry ``[i, j]`` is the mean PSNR gain of ``models[qps[i]]`` on frames
    coded at ``qps[j]`` minus the gain of ``models[qps[j]]`` on the same
    frames, so the diagonal is zero.
    """
    for qp in qps:
        if qp not in models:
            raise KeyError(f"missing model for qp {qp}")
    coded = coded if coded is not None else encode_corpus(corpus, qps)
    n = len(qps)
    gain = np.zeros((n, n))
    for i, m in enumerate(qps):
        for j, q in enumerate(qps):
            vals = []
            for seq in corpus:
                t = coded[(seq, q)]
                filtered = apply_filter(models[m], t, overlap)
                vals.append(psnr(t.original, filtered) - psnr(t.original, t.reconstruction))
            gain[i, j] = float(np.mean(vals))
    matrix = gain - np.diag(gain)[None, :]
    np.fill_diagonal(matrix, 0.0)
    return matrix


def mean_abs_by_qp_gap(matrix: np.ndarray, qps: Sequence[int]) -> dict:
    """``{|ΔQP|: mean |entry|}`` over off-diagonal entries."""
    groups: dict = {}
    for i, a in enumerate(qps):
        for j, b in enumerate(qps):
            if i != j:
                groups.setdefault(abs(a - b), []).append(abs(matrix[i, j]))
    return {gap: float(np.mean(v)) for gap, v in sorted(groups.items())}


def write_matrix_csv(matrix: np.ndarray, qps: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_qp \\ data_qp"] + [str(q) for q in qps])
    for q, row in zip(qps, matrix):
        w.writerow([str(q)] + [f"{v:.4f}" for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# feature maps


def normalize_channel(act: np.ndarray) -> np.ndarray:
    """Min-max map to [0, 255]; a constant channel becomes mid-gray."""
    lo, hi = float(act.min()), float(act.max())
    if hi == lo:
        return np.full(act.shape, 128, dtype=np.uint8)
    scaled = (act.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_feature_maps(model: FilterModel, triple: CodedTriple, layer: str, out_dir) -> list:
    """Write one PGM per channel of ``layer``'s activation on the whole frame."""
    planes = model_planes(model, triple)
    h, w = planes[0].shape
    ph, pw = -h % 4, -w % 4
    padded = [np.pad(p, ((0, ph), (0, pw)), mode="edge") for p in planes]
    with no_grad():
        feats = model.features(*(Tensor(p[None, None]) for p in padded))
    if layer not in feats:
        raise UnknownLayerError(layer, list(feats))
    act = feats[layer].data[0]
    fh = math.ceil(h * act.shape[1] / (h + ph))
    fw = math.ceil(w * act.shape[2] / (w + pw))
    out_dir = Path(out_dir)
    paths = []
    for c in range(act.shape[0]):
        path = out_dir / f"{layer}.c{c:03d}.pgm"
        atomic_write(path, encode_pgm(normalize_channel(act[c, :fh, :fw])))
        paths.append(path)
    return paths
