"""File formats: CSV/MatrixMarket matrices, the JSON fit artifact, and
the results TSV.

Counts are CSV with a header row of gene names and one row per sample,
or MatrixMarket coordinate format for sparse data.  The fit artifact is
a single versioned JSON document embedding the data, the family, every
estimated matrix (row-major with shape metadata), and diagnostics, so
that `gcate test` can run from the artifact alone.
"""

import csv
import datetime
import json

import numpy as np
from scipy.io import mmread

from .expfam import ExponentialFamily
from .model import FactorModelFit, GlmDataset

SCHEMA_VERSION = 1

RESULT_COLUMNS = (
    "gene", "beta_hat", "beta_debiased", "se", "z",
    "pvalue", "qvalue", "reject_alpha", "reject_fdr",
)


class ParseError(ValueError):
    pass


def _parse_csv_rows(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, [c.strip() for c in row]))
    if not rows:
        raise ParseError(f"{path}: empty file")
    return rows


def _rows_to_matrix(path, rows):
    width = len(rows[0][1])
    data = np.empty((len(rows), width))
    for i, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(
                f"{path}:{lineno}: expected {width} columns, found {len(row)}"
            )
        try:
            data[i] = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    return data


def _is_numeric_row(row):
    try:
        [float(c) for c in row]
        return True
    except ValueError:
        return False


def read_counts(path):
    """Counts matrix plus gene names from CSV or MatrixMarket."""
    path = str(path)
    if path.endswith((".mtx", ".mtx.gz")):
        M = mmread(path)
        Y = np.asarray(M.toarray() if hasattr(M, "toarray") else M, dtype=float)
        names = [f"gene_{j + 1:04d}" for j in range(Y.shape[1])]
        return Y, names
    rows = _parse_csv_rows(path)
    header_line, header = rows[0]
    if _is_numeric_row(header):
        raise ParseError(
            f"{path}:{header_line}: counts CSV needs a header row of gene names"
        )
    Y = _rows_to_matrix(path, rows[1:])
    if Y.shape[1] != len(header):
        raise ParseError(
            f"{path}: header has {len(header)} names but rows have {Y.shape[1]} columns"
        )
    return Y, list(header)


def read_design(path):
    """Design matrix from CSV; a non-numeric first row is treated as a header."""
    rows = _parse_csv_rows(str(path))
    if not _is_numeric_row(rows[0][1]):
        rows = rows[1:]
        if not rows:
            raise ParseError(f"{path}: no data rows")
    return _rows_to_matrix(str(path), rows)


def write_counts(path, Y, gene_names):
    Y = np.asarray(Y)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(gene_names)
        for row in Y:
            writer.writerow([_fmt(v) for v in row])


def write_design(path, X):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(X):
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    f = float(v)
    if f.is_integer() and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


# ---- JSON fit artifact ----------------------------------------------------


def _encode_matrix(M):
    if M is None:
        return None
    M = np.asarray(M, dtype=float)
    return {"shape": list(M.shape), "data": [float(v) for v in M.ravel()]}


def _decode_matrix(obj):
    if obj is None:
        return None
    return np.asarray(obj["data"], dtype=float).reshape(obj["shape"])


def save_fit(path, fit, dataset, extra=None):
    aux = fit.family.aux
    doc = {
        "schema": SCHEMA_VERSION,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "family": {
            "kind": fit.family.kind,
            "link": fit.family.link,
            "aux": [float(v) for v in np.atleast_1d(aux)] if aux is not None else None,
        },
        "r": int(fit.r),
        "lambda": float(fit.lam),
        "data": {
            "Y": _encode_matrix(dataset.Y),
            "X": _encode_matrix(dataset.X),
            "gene_names": list(dataset.gene_names),
            "oracle_Z": _encode_matrix(dataset.oracle_Z),
        },
        "estimates": {
            "F_hat": _encode_matrix(fit.F_hat),
            "W0_hat": _encode_matrix(fit.W0_hat),
            "Gamma0_hat": _encode_matrix(fit.Gamma0_hat),
            "W_hat": _encode_matrix(fit.W_hat),
            "Gamma_hat": _encode_matrix(fit.Gamma_hat),
            "B_hat": _encode_matrix(fit.B_hat),
            "Z_hat": _encode_matrix(fit.Z_hat),
            "Theta_hat": _encode_matrix(fit.Theta_hat),
        },
        "diagnostics": fit.diagnostics,
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_fit(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported fit artifact schema {doc.get('schema')!r}; "
            f"this reader handles schema {SCHEMA_VERSION}"
        )
    famdoc = doc["family"]
    aux = famdoc.get("aux")
    if aux is not None:
        aux = np.asarray(aux, dtype=float)
        if aux.size == 1:
            aux = float(aux[0])
    fam = ExponentialFamily(famdoc["kind"], aux, famdoc["link"])
    est = doc["estimates"]
    fit = FactorModelFit(
        family=fam,
        r=int(doc["r"]),
        F_hat=_decode_matrix(est["F_hat"]),
        W0_hat=_decode_matrix(est["W0_hat"]),
        Gamma0_hat=_decode_matrix(est["Gamma0_hat"]),
        W_hat=_decode_matrix(est["W_hat"]),
        Gamma_hat=_decode_matrix(est["Gamma_hat"]),
        B_hat=_decode_matrix(est["B_hat"]),
        Z_hat=_decode_matrix(est["Z_hat"]),
        Theta_hat=_decode_matrix(est["Theta_hat"]),
        lam=float(doc["lambda"]),
        diagnostics=doc.get("diagnostics", {}),
    )
    data = doc["data"]
    dataset = GlmDataset(
        _decode_matrix(data["Y"]),
        _decode_matrix(data["X"]),
        gene_names=list(data["gene_names"]),
        oracle_Z=_decode_matrix(data.get("oracle_Z")),
    )
    return fit, dataset


# ---- results ---------------------------------------------------------------


def write_results_tsv(path, result):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for i, gene in enumerate(result.gene_names):
            writer.writerow([
                gene,
                repr(float(result.b_hat[i])),
                repr(float(result.b_debiased[i])),
                repr(float(result.sigma_hat[i])),
                repr(float(result.z[i])),
                repr(float(result.pvalue[i])),
                repr(float(result.qvalue[i])),
                int(bool(result.reject_alpha[i])) if np.isfinite(result.pvalue[i]) else "",
                int(bool(result.reject_fdr[i])) if np.isfinite(result.qvalue[i]) else "",
            ])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.bool_,)):
        return bool(v)
    raise TypeError(f"not JSON serializable: {type(v)}")
