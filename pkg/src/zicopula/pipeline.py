"""End-to-end batch run: ingest, fit, select, diagnose, predict, export."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .copula import DEFAULT_AGE_CUT, CopulaModel, fit_marginals
from .data import ObservationMatrix
from .glasso import DEFAULT_LAMBDA_GRID, DEFAULT_NU_GRID, score_table_text, select_model
from .inference import (
    REGIONS,
    binomial_region_test,
    chi2_pair_test,
    export_graph,
    prediction_records,
    qq_sum_data,
    summarize_predictions,
    to_dot,
)
from .io import ModelFile, fingerprint, ingest, ingest_report, save_model

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "train_test_split",
    "diagnostics_text",
    "predictions_text",
    "qq_text",
    "run_pipeline",
    "STALE_MARKER",
]

STALE_MARKER = "STALE"


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    data: Path
    out_dir: Path
    nu_grid: Sequence[float] = DEFAULT_NU_GRID
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID
    seed: int = 0
    holdout: float = 0.1
    age_column: str | None = None
    gender_column: str | None = None
    age_cut: int = DEFAULT_AGE_CUT
    workers: int = 1
    mvcdf_err: float = 1e-4
    score_rows: int = 400
    n_predictions: int = 400
    top_fraction: float = 0.05
    delimiter: str = ","
    artifacts: list[str] = field(default_factory=list)


def train_test_split(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in ``(seed, n)``; both parts come back sorted."""
    if not 0.0 < holdout < 1.0:
        raise ValueError("holdout must lie in (0, 1)")
    n_test = max(1, int(round(holdout * n)))
    if n_test >= n:
        raise ValueError(f"cannot hold out {n_test} of {n} rows")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), int(n)])).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def diagnostics_text(model: CopulaModel, data: ObservationMatrix, *, age_cut: int = DEFAULT_AGE_CUT,
                     level: float = 0.05, delimiter: str = "\t") -> str:
    """Binomial region tests and chi-square tests for every pair, then rejection rates."""
    d = model.dim
    lines = [delimiter.join(["test", "i", "j", "statistic", "p_value"])]
    rejected = {name: [0, 0] for name in (*REGIONS, "chi2")}

    def add(name, i, j, fn):
        try:
            res = fn()
        except ValueError as exc:
            lines.append(delimiter.join([name, model.labels[i], model.labels[j], "NA", f"NA ({exc})"]))
            return
        rejected[name][0] += res.p_value < level
        rejected[name][1] += 1
        lines.append(delimiter.join([name, model.labels[i], model.labels[j],
                                     repr(res.statistic), repr(res.p_value)]))

    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            if i < j:
                add("both_positive", i, j, lambda: binomial_region_test(model, data, "both_positive", (i, j)))
                add("chi2", i, j, lambda: chi2_pair_test(data, (i, j), age_cut=age_cut))
            add("first_zero_second_positive", i, j,
                lambda: binomial_region_test(model, data, "first_zero_second_positive", (i, j)))
    lines.append("")
    lines.append(delimiter.join(["summary", "rejected", "tested", "rate"]))
    for name, (r, m) in rejected.items():
        rate = f"{r / m:.6f}" if m else "NA"
        lines.append(delimiter.join([name, str(r), str(m), rate]))
    return "\n".join(lines) + "\n"


def predictions_text(records, labels, delimiter: str = "\t") -> str:
    s = summarize_predictions(records)
    lines = [delimiter.join(["row", "target", "p_model", "p_naive", "outcome"])]
    for r in records:
        lines.append(delimiter.join([str(r.row), labels[r.target], repr(r.p_model),
                                     repr(r.p_naive), str(int(r.outcome))]))
    lines.append("")
    lines.append(delimiter.join(["summary", "model", "naive"]))
    lines.append(delimiter.join(["negated_log_score", f"{s.model_score:.6f}", f"{s.naive_score:.6f}"]))
    lines.append(delimiter.join(["accuracy", f"{s.model_accuracy:.6f}", f"{s.naive_accuracy:.6f}"]))
    return "\n".join(lines) + "\n"


def qq_text(data_q, sim_q, delimiter: str = "\t") -> str:
    lines = [delimiter.join(["data_log1p", "model_log1p"])]
    lines += [delimiter.join([repr(float(a)), repr(float(b))]) for a, b in zip(data_q, sim_q)]
    return "\n".join(lines) + "\n"


def _provenance(cfg: PipelineConfig, data: ObservationMatrix, n_train: int, n_test: int) -> dict:
    prov = {
        "seed": cfg.seed,
        "data_sha256": fingerprint(data),
        "data_file": Path(cfg.data).name,
        "n_train": n_train,
        "n_test": n_test,
        "holdout": cfg.holdout,
        "nu_grid": [("inf" if math.isinf(v) else float(v)) for v in cfg.nu_grid],
        "lambda_grid": [float(v) for v in cfg.lambda_grid],
    }
    # wall-clock time would break byte-identical reruns; honour SOURCE_DATE_EPOCH instead
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    prov["created_epoch"] = int(epoch) if epoch and epoch.isdigit() else None
    return prov


def _write(cfg: PipelineConfig, name: str, text: str) -> Path:
    path = Path(cfg.out_dir) / name
    path.write_text(text)
    cfg.artifacts.append(name)
    return path


def run_pipeline(cfg: PipelineConfig, log=print) -> ModelFile:
    """Run every stage and write the artifacts into ``cfg.out_dir``.

    On failure a ``STALE`` marker listing the artifacts written so far is
    left in the output directory and :class:`PipelineError` is raised.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / STALE_MARKER
    if marker.exists():
        marker.unlink()
    cfg.artifacts = []
    stage = "ingest"
    try:
        data = ingest(cfg.data, age_column=cfg.age_column, gender_column=cfg.gender_column,
                      delimiter=cfg.delimiter)
        _write(cfg, "columns.tsv", ingest_report(data))
        tr_idx, te_idx = train_test_split(data.n, cfg.holdout, cfg.seed)
        train, test = data.take(tr_idx), data.take(te_idx)
        log(f"ingested {data.n} rows x {data.p} columns; {train.n} train / {test.n} test")

        stage = "fit-marginals"
        marginals = fit_marginals(train, seed=cfg.seed, workers=cfg.workers)

        stage = "select"
        sel = select_model(train, test, cfg.nu_grid, cfg.lambda_grid, marginals=marginals,
                           age_cut=cfg.age_cut, score_rows=cfg.score_rows,
                           target_err=cfg.mvcdf_err, seed=cfg.seed, workers=cfg.workers)
        _write(cfg, "scores.tsv", score_table_text(sel.table))
        c = sel.chosen
        log(f"selected nu={c.nu:g} lambda={c.lam:g} (l={c.full:.6f}, sparsity={c.sparsity:.3f})")
        mf = ModelFile(sel.model, sel.base_models[c.nu].sigma, sel.precision,
                       _provenance(cfg, data, train.n, test.n))
        save_model(mf, out / "model.json")
        cfg.artifacts.append("model.json")

        stage = "diagnose"
        _write(cfg, "diagnostics.tsv", diagnostics_text(sel.model, test, age_cut=cfg.age_cut))

        stage = "predict"
        recs = prediction_records(sel.model, sel.precision.theta, test, cfg.n_predictions,
                                  seed=cfg.seed, target_err=cfg.mvcdf_err)
        _write(cfg, "predictions.tsv", predictions_text(recs, sel.model.labels))

        stage = "export-graph"
        graph = export_graph(sel.precision.theta, sel.model.labels, cfg.top_fraction)
        _write(cfg, "graph.dot", to_dot(graph))

        stage = "qq"
        sites = data.site_indices()
        if sites:
            dq, sq = qq_sum_data(sel.model, test, sites, seed=cfg.seed)
            _write(cfg, "qq.tsv", qq_text(dq, sq))
        log(f"wrote {', '.join(cfg.artifacts)} to {out}")
        return mf
    except Exception as exc:
        marker.write_text(f"stage: {stage}\nerror: {exc}\nwritten: {' '.join(cfg.artifacts)}\n")
        raise PipelineError(f"{stage} failed: {exc}") from exc
