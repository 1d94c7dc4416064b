"""CSV ingestion and the JSON model file."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .copula import ColumnSpec, CopulaModel
from .data import ObservationMatrix, Role
from .dpiv import DPivFit, DPivParams, Variant
from .glasso import PrecisionEstimate
from .latent import LatentSpec

__all__ = [
    "IngestError",
    "ModelFileError",
    "ingest",
    "ingest_report",
    "write_csv",
    "fingerprint",
    "ModelFile",
    "save_model",
    "load_model",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
_INT = re.compile(r"[+-]?\d+")
_NUM = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")


class IngestError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


def _parse_cell(cell: str, row: int, label: str, role: Role) -> int:
    s = cell.strip()
    where = f"row {row}, column {label!r}"
    if role is Role.AGE and s.endswith("+"):
        # top-coded ages such as "65+"
        s = s[:-1]
    if _INT.fullmatch(s):
        v = int(s)
    elif _NUM.fullmatch(s):
        f = float(s)
        if f != math.floor(f):
            raise IngestError(f"{where}: fractional count {cell!r}")
        v = int(f)
    else:
        raise IngestError(f"{where}: malformed cell {cell!r}")
    if v < 0:
        raise IngestError(f"{where}: negative count {cell!r}")
    if role is Role.GENDER and v not in (0, 1):
        raise IngestError(f"{where}: gender must be 0 or 1, got {cell!r}")
    return v


def ingest(path, *, age_column: str | None = None, gender_column: str | None = None,
           delimiter: str = ",") -> ObservationMatrix:
    """Read a delimited table with a header row and one row per user.

    Every column is a site unless named as the age or gender column.  Labels
    are kept verbatim.  Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise IngestError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise IngestError(f"{path}: header labels must be nonempty and unique")
    if len(rows) == 1:
        raise IngestError(f"{path}: header but no data rows")
    roles = [Role.SITE] * len(header)
    for name, role in ((age_column, Role.AGE), (gender_column, Role.GENDER)):
        if name is None:
            continue
        if name not in header:
            raise IngestError(f"{path}: no column named {name!r}")
        roles[header.index(name)] = role
    values = np.empty((len(rows) - 1, len(header)), dtype=np.int64)
    for k, r in enumerate(rows[1:]):
        if len(r) != len(header):
            raise IngestError(f"row {k + 2}: expected {len(header)} cells, found {len(r)}")
        for j, cell in enumerate(r):
            values[k, j] = _parse_cell(cell, k + 2, header[j], roles[j])
    return ObservationMatrix(values, header, roles)


def write_csv(data: ObservationMatrix, path, delimiter: str = ",") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(data.labels)
        w.writerows(data.values.tolist())


def ingest_report(data: ObservationMatrix, delimiter: str = "\t") -> str:
    lines = [delimiter.join(["column", "role", "zero_rate", "positives"])]
    for j, (lab, role) in enumerate(zip(data.labels, data.roles)):
        x = data.column(j)
        lines.append(delimiter.join([lab, role.value, f"{np.mean(x == 0):.6f}", str(int(np.sum(x > 0)))]))
    return "\n".join(lines) + "\n"


def fingerprint(data: ObservationMatrix) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([data.labels, [r.value for r in data.roles]]).encode())
    h.update(np.ascontiguousarray(data.values, dtype="<i8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model file

# JSON has no infinity; non-finite floats are written as strings.
def _f(x):
    if x is None:
        return None
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def _uf(x):
    if x is None:
        return None
    return float(x)


def _mat(a):
    return None if a is None else [[_f(v) for v in row] for row in np.asarray(a)]


def _umat(a):
    return None if a is None else np.array([[_uf(v) for v in row] for row in a], dtype=float)


def _fit_to_dict(fit: DPivFit):
    p = fit.params
    return {
        "variant": p.variant.value,
        "xi": _f(p.xi), "sigma": _f(p.sigma), "beta": _f(p.beta), "mu": _f(p.mu),
        "loglik": _f(fit.loglik), "bic": _f(fit.bic), "n": fit.n,
        "stderr": [_f(s) for s in fit.stderr],
        "converged": fit.converged, "message": fit.message,
    }


def _fit_from_dict(d) -> DPivFit:
    p = DPivParams(_uf(d["xi"]), _uf(d["sigma"]), _uf(d["beta"]), _uf(d["mu"]), Variant(d["variant"]))
    return DPivFit(p, _uf(d["loglik"]), _uf(d["bic"]), int(d["n"]),
                   tuple(_uf(s) for s in d["stderr"]), bool(d["converged"]), d["message"])


def _col_to_dict(c: ColumnSpec):
    return {
        "role": c.role.value,
        "label": c.label,
        "threshold": _f(c.threshold),
        "marginal": None if c.marginal is None else _fit_to_dict(c.marginal),
        "table": [[v, _f(p)] for v, p in c.table],
        "age_cut": c.age_cut,
        "censored_value": c.censored_value,
    }


def _col_from_dict(d) -> ColumnSpec:
    return ColumnSpec(
        Role(d["role"]), d["label"], _uf(d["threshold"]),
        marginal=None if d["marginal"] is None else _fit_from_dict(d["marginal"]),
        table=tuple((int(v), _uf(p)) for v, p in d["table"]),
        age_cut=d["age_cut"], censored_value=d["censored_value"],
    )


@dataclass
class ModelFile:
    """Fitted model, the unpenalized pairwise correlation and the selected precision.

    ``model`` carries the correlation used for sampling and prediction (the
    rescaled inverse of the selected precision).
    """

    model: CopulaModel
    sigma_pairwise: np.ndarray
    precision: PrecisionEstimate | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        m = self.model
        out = {
            "format_version": FORMAT_VERSION,
            "nu": _f(m.nu),
            "columns": [_col_to_dict(c) for c in m.columns],
            "n_train": m.n_train,
            "sigma": _mat(m.sigma),
            "sigma_pairwise": _mat(self.sigma_pairwise),
            "sigma_stderr": _mat(m.sigma_stderr),
            "precision": None,
            "provenance": self.provenance,
        }
        if self.precision is not None:
            p = self.precision
            out["precision"] = {
                "lambda": _f(p.lam),
                "theta": _mat(p.theta),
                "sparsity": _f(p.sparsity),
                "kkt_residual": _f(p.kkt_residual),
                "penalize_diagonal": p.penalize_diagonal,
                "n_sweeps": p.n_sweeps,
            }
        return out

    @classmethod
    def from_dict(cls, d) -> "ModelFile":
        if d.get("format_version") != FORMAT_VERSION:
            raise ModelFileError(f"unsupported format version {d.get('format_version')!r}")
        try:
            cols = tuple(_col_from_dict(c) for c in d["columns"])
            spec = LatentSpec(_uf(d["nu"]), _umat(d["sigma"]))
            model = CopulaModel(spec, cols, int(d["n_train"]), _umat(d["sigma_stderr"]))
            prec = None
            if d["precision"] is not None:
                p = d["precision"]
                theta = _umat(p["theta"])
                prec = PrecisionEstimate(
                    theta, _uf(p["lambda"]), _uf(p["sparsity"]), _uf(p["kkt_residual"]),
                    np.linalg.inv(theta), int(p["n_sweeps"]), (), bool(p["penalize_diagonal"]),
                )
            return cls(model, _umat(d["sigma_pairwise"]), prec, dict(d["provenance"]))
        except (KeyError, TypeError) as exc:
            raise ModelFileError(f"malformed model file: {exc}") from exc


def save_model(mf: ModelFile, path) -> None:
    """Write ``mf`` as JSON.

    Floats use the shortest repr that round-trips, so loading restores every
    number bit for bit.  Output is a pure function of ``mf``.
    """
    text = json.dumps(mf.to_dict(), indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_model(path) -> ModelFile:
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"model file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    return ModelFile.from_dict(d)
