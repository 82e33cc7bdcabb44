"""Parameter / FLOP accounting and the ablation grid runner."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import ModelConfig, ProjectionKind
from .preprocess import ChanDsConfig, PatchGeometry, pooling_plan

__all__ = [
    "FLOP_CONVENTION",
    "CostReport",
    "count_params",
    "count_flops",
    "DIM_SWEEPS",
    "calibrate_dim",
    "AblationCell",
    "AblationGrid",
    "cell_config",
    "run_ablation",
    "ablation_csv",
    "ABLATION_COLUMNS",
]

FLOP_CONVENTION = "2 FLOP per multiply-accumulate, batch 1"
DIM_SWEEPS = {
    "diat": (8, 16, 32, 64, 80),
    "ci4r": (8, 16, 32, 64, 80, 96, 128, 160),
    "uog20": (8, 16, 20, 24, 32),
}


@dataclass
class CostReport:
    """Per-layer costs; ``total`` is always the sum of the rows."""

    metric: str
    rows: list[tuple[str, int]]
    convention: str = ""

    @property
    def total(self) -> int:
        return int(sum(v for _, v in self.rows))

    def as_dict(self) -> dict:
        return {"metric": self.metric, "convention": self.convention, "rows": [{"name": n, "value": int(v)} for n, v in self.rows], "total": self.total}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"

    def format(self) -> str:
        w = max([len(n) for n, _ in self.rows] + [5])
        lines = [f"{n:<{w}}  {v:>14,d}" for n, v in self.rows]
        lines.append(f"{'total':<{w}}  {self.total:>14,d}")
        if self.convention:
            lines.append(f"({self.convention})")
        return "\n".join(lines)


# ----------------------------------------------------------------------------
# Parameter count from closed-form layer formulas


def _affine(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def _proj_params(kind: ProjectionKind, dim: int, k: int) -> int:
    if kind is ProjectionKind.CONV1D_K3:
        return dim * dim * k + dim
    if kind is ProjectionKind.LINEAR3 and k == 3:
        return 3 * _affine(dim, dim)
    return _affine(dim, dim)


def _ssm_params(dim: int, ds: int, r: int) -> int:
    # A_log, W_B, W_C: dim x ds each; D and dt_bias: dim each; dt factorisation
    return 3 * dim * ds + 2 * dim + 2 * dim * r


def count_params(cfg: ModelConfig) -> CostReport:
    """Exact learned-scalar count from the configuration alone."""
    cfg.validate()
    rows: list[tuple[str, int]] = []
    cd = cfg.chan_ds
    kh, kw = cd.kernel
    c_in = cfg.input_shape[0]
    for i in range(cd.n_blocks):
        rows.append((f"chan_ds.{i}", cd.channels * c_in * kh * kw + cd.channels + 2 * cd.channels))
        c_in = cd.channels
    C, H, W = cfg.fused_shape
    hs, ws = cfg.geometry.patch_size(H, W)
    d = cfg.dim
    rows.append(("embed", _affine(C * hs * ws, d)))
    for j in range(cfg.depth):
        p = f"blocks.{j}"
        rows.append((f"{p}.norm", 2 * d))
        rows.append((f"{p}.p1", _proj_params(cfg.projection, d, 3)))
        rows.append((f"{p}.p2", _proj_params(cfg.projection, d, 3)))
        rows.append((f"{p}.p3", _proj_params(cfg.projection, d, 1)))
        for br in ("fw", "bw"):
            rows.append((f"{p}.{br}", d * d + d + 2 * d + _ssm_params(d, cfg.d_state, cfg.dt_rank)))
    rows.append(("head", _affine(d, cfg.n_classes)))
    return CostReport("params", rows)


# ----------------------------------------------------------------------------
# FLOP count

LAYERNORM_FLOPS = 7  # mean, centre, square, variance, scale by rsqrt, gain, shift
SILU_FLOPS = 4


def count_flops(cfg: ModelConfig, strict: bool = False) -> CostReport:
    """FLOPs per single-sample inference.

    By default convolutions, affine maps, discretisation, the scan, gating and
    residual additions are counted.  ``strict=True`` adds normalisation,
    activations, pooling, the position encoding and the sequence mean.
    """
    cfg.validate()
    rows: list[tuple[str, int]] = []
    Cin, H, W = cfg.input_shape
    cd = cfg.chan_ds
    kh, kw = cd.kernel
    c = Cin
    for i in range(cd.n_blocks):
        f = 2 * cd.channels * c * kh * kw * H * W + cd.channels * H * W
        if strict:
            f += 2 * cd.channels * H * W
        rows.append((f"chan_ds.{i}", f))
        c = cd.channels
    if strict:
        f, h, w = 0, H, W
        for _, (ph, pw) in pooling_plan(cd):
            f += cd.channels * h * w
            h, w = h // ph, w // pw
        rows.append(("chan_ds.pool", f))
    C, Hc, Wc = cfg.fused_shape
    hs, ws = cfg.geometry.patch_size(Hc, Wc)
    N = (Hc // hs) * (Wc // ws)
    P = C * hs * ws
    d, s, r = cfg.dim, cfg.d_state, cfg.dt_rank
    rows.append(("embed", 2 * N * P * d + N * d + (N * d if strict else 0)))
    for j in range(cfg.depth):
        p = f"blocks.{j}"
        if strict:
            rows.append((f"{p}.norm", LAYERNORM_FLOPS * N * d))
        for name, k in (("p1", 3), ("p2", 3), ("p3", 1)):
            layers = 3 if cfg.projection is ProjectionKind.LINEAR3 and k == 3 else 1
            kk = k if cfg.projection is ProjectionKind.CONV1D_K3 else 1
            rows.append((f"{p}.{name}", layers * (2 * N * d * d * kk + N * d)))
        for br in ("fw", "bw"):
            f = 2 * N * d * d + N * d  # kernel-1 conv
            f += 2 * 2 * N * d * s  # B and C projections
            if r > 0:
                f += 2 * N * d * r + 2 * N * r * d + N * d
            f += 5 * N * d * s  # discretisation: delta*A, exp, expm1, divide, times B
            f += N * d * s  # Bbar * x
            f += 2 * N * d * s  # state update a*h + b
            f += 2 * N * d * s  # output contraction with C
            f += 2 * N * d  # skip D * x added
            if strict:
                f += LAYERNORM_FLOPS * N * d + 3 * N * d  # layernorm, softplus
            rows.append((f"{p}.{br}", f))
        gate = 3 * N * d + (SILU_FLOPS * N * d if strict else 0)
        rows.append((f"{p}.gate", gate))
        rows.append((f"{p}.residual", N * d))
    if strict:
        rows.append(("pool", N * d))
    rows.append(("head", 2 * d * cfg.n_classes + cfg.n_classes))
    tag = FLOP_CONVENTION + (", strict (all elementwise ops)" if strict else "")
    return CostReport("flops", rows, tag)


def calibrate_dim(cfg: ModelConfig, target_params: float, sweep: Sequence[int]) -> tuple[int, list[tuple[int, int]]]:
    """Sweep value whose parameter count is nearest ``target_params``.

    Ties go to the smaller dim.  Returns the chosen dim and the whole table.
    """
    table = []
    for d in sweep:
        table.append((int(d), count_params(cfg.replace(dim=int(d))).total))
    best = min(table, key=lambda t: (abs(t[1] - target_params), t[0]))
    return best[0], table


# ----------------------------------------------------------------------------
# Ablation grid

PATCH_LABELS = {"rectangular": "(H_seg, W_seg)", "time_aligned": "(1, W_cd)", "doppler_aligned": "(H_cd, 1)"}
PROJ_ORDER = (ProjectionKind.LINEAR1, ProjectionKind.LINEAR3, ProjectionKind.CONV1D_K3)
GEOM_ORDER = ("rectangular", "time_aligned", "doppler_aligned")


@dataclass(frozen=True)
class AblationCell:
    projection: ProjectionKind
    geometry: PatchGeometry
    factors: tuple[int, int]

    def label(self) -> str:
        return f"{self.projection.value}/{self.geometry.kind}/{self.factors[0]}x{self.factors[1]}"


@dataclass
class AblationGrid:
    """Projection kinds x patch geometries x reduction factors.

    ``rect_size`` is the tile used for the rectangular geometry; it must
    divide every fused extent in the grid.
    """

    projections: Sequence[ProjectionKind] = PROJ_ORDER
    geometries: Sequence[str] = GEOM_ORDER
    factors: Sequence[tuple[int, int]] = ((1, 1), (8, 2), (2, 32))
    seeds: Sequence[int] = (0, 1, 2, 3, 4, 5)
    rect_size: tuple[int, int] = (7, 7)
    reference_factors: tuple[int, int] | None = None

    def __post_init__(self):
        self.projections = tuple(ProjectionKind.parse(p) for p in self.projections)
        self.factors = tuple(tuple(int(v) for v in f) for f in self.factors)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.rect_size = tuple(self.rect_size)
        for g in self.geometries:
            if g not in GEOM_ORDER:
                raise ValueError(f"unknown geometry {g!r}")

    def geometry(self, kind: str) -> PatchGeometry:
        return PatchGeometry.rectangular(*self.rect_size) if kind == "rectangular" else PatchGeometry(kind)

    def cells(self) -> list[AblationCell]:
        return [AblationCell(p, self.geometry(g), f) for p in self.projections for g in self.geometries for f in self.factors]

    def row_number(self, cell: AblationCell) -> int | None:
        """1-based row in the full 3 x 3 x 3 layout, or ``None`` outside it."""
        slot = {(1, 1): 0, (8, 2): 1}.get(tuple(cell.factors), 2)
        return PROJ_ORDER.index(cell.projection) * 9 + GEOM_ORDER.index(cell.geometry.kind) * 3 + slot + 1

    def is_reference(self, cell: AblationCell) -> bool:
        ref = self.reference_factors or self.factors[-1]
        return cell.projection is ProjectionKind.CONV1D_K3 and cell.geometry.kind == "doppler_aligned" and cell.factors == tuple(ref)


def cell_config(base: ModelConfig, cell: AblationCell) -> ModelConfig:
    cd = base.chan_ds
    return base.replace(
        chan_ds=ChanDsConfig(cd.n_blocks, cd.channels, cd.kernel, cell.factors, cd.use_avgpool),
        geometry=cell.geometry,
        projection=cell.projection,
    ).validate()


ABLATION_COLUMNS = [
    "row",
    "projection",
    "patch",
    "downsample",
    "accuracy_mean",
    "accuracy_std",
    "params",
    "n_runs",
    "accuracies",
    "status",
    "reference",
]


def _run_cell(args):
    from .train import train

    cfg, train_ds, test_ds, tcfg, seed = args
    try:
        report, _ = train(cfg, train_ds, test_ds, tcfg, seed)
        return report.final_accuracy, None
    except Exception as e:  # recorded per cell; the grid keeps going
        return None, f"{type(e).__name__}: {e}"


def run_ablation(
    grid: AblationGrid,
    base: ModelConfig,
    train_ds,
    test_ds,
    tcfg,
    workers: int = 1,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train every cell over ``grid.seeds`` and summarise final test accuracy.

    Failures (invalid geometry, divergence) are recorded in ``status`` and
    the remaining cells still run.  Standard deviations use ``ddof=0``.
    """
    rows = []
    jobs = []
    for cell in grid.cells():
        try:
            cfg = cell_config(base, cell)
        except Exception as e:
            rows.append((cell, None, f"{type(e).__name__}: {e}"))
            continue
        rows.append((cell, cfg, None))
        jobs.extend((cell, (cfg, train_ds, test_ds, tcfg, s)) for s in grid.seeds)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, [a for _, a in jobs]))
    else:
        results = []
        for cell, a in jobs:
            results.append(_run_cell(a))
            if progress is not None:
                progress({"cell": cell.label(), "seed": a[-1], "accuracy": results[-1][0], "error": results[-1][1]})

    by_cell: dict[AblationCell, list] = {}
    for (cell, _), res in zip(jobs, results):
        by_cell.setdefault(cell, []).append(res)

    out = []
    for cell, cfg, err in rows:
        res = by_cell.get(cell, [])
        accs = [a for a, e in res if e is None]
        errs = [e for _, e in res if e is not None]
        status = err or ("ok" if not errs else f"{len(errs)} failed: {errs[0]}")
        out.append(
            {
                "row": grid.row_number(cell),
                "projection": cell.projection.value,
                "patch": PATCH_LABELS[cell.geometry.kind],
                "downsample": f"({cell.factors[0]}, {cell.factors[1]})",
                "accuracy_mean": float(np.mean(accs)) if accs else math.nan,
                "accuracy_std": float(np.std(accs)) if accs else math.nan,
                "params": count_params(cfg).total if cfg is not None else None,
                "n_runs": len(accs),
                "accuracies": accs,
                "status": status,
                "reference": grid.is_reference(cell),
            }
        )
    return out


def ablation_csv(rows: Sequence[Mapping], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow(
            [
                "" if r["row"] is None else r["row"],
                r["projection"],
                r["patch"],
                r["downsample"],
                f"{r['accuracy_mean']:.6f}",
                f"{r['accuracy_std']:.6f}",
                "" if r["params"] is None else r["params"],
                r["n_runs"],
                ";".join(f"{a:.6f}" for a in r["accuracies"]),
                r["status"],
                int(bool(r["reference"])),
            ]
        )
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
