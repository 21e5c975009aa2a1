"""Delimited-text datasets, result tables and the versioned model archive."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .banded import BandedCholeskyFactor
from .ising import IsingParams
from .sde import GridSpec
from .state import FunctionalDataset, GaussianField, Hyperparams, InvGamma, LatentBatch, ModelState

__all__ = [
    "DataFormatError",
    "ModelFormatError",
    "DELIMITERS",
    "load_dataset",
    "save_dataset",
    "write_table",
    "save_model",
    "load_model",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
DELIMITERS = {"comma": ",", "tab": "\t"}
# fixed member timestamp so archives are byte-reproducible
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class DataFormatError(ValueError):
    """Malformed dataset file; the message names the offending row/column (1-based)."""


class ModelFormatError(ValueError):
    pass


def _delim(delimiter):
    return DELIMITERS.get(delimiter, delimiter)


def load_dataset(path, labeled: bool = True, delimiter: str = "comma", header: bool = False,
                 delta: float = 1.0) -> FunctionalDataset:
    """Parse one observation per line; with ``labeled`` the first column is the 0/1 label."""
    sep = _delim(delimiter)
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cells = line.split(sep)
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataFormatError(f"row {lineno}: expected {width} columns, found {len(cells)}")
            try:
                values = [float(c) for c in cells]
            except ValueError:
                for col, c in enumerate(cells, start=1):
                    try:
                        float(c)
                    except ValueError:
                        raise DataFormatError(f"row {lineno}, column {col}: non-numeric value {c!r}") from None
                raise
            for col, v in enumerate(values, start=1):
                if not np.isfinite(v):
                    raise DataFormatError(f"row {lineno}, column {col}: missing or non-finite value")
            if labeled and values[0] not in (0.0, 1.0):
                raise DataFormatError(f"row {lineno}, column 1: label must be 0 or 1, got {cells[0]!r}")
            rows.append(values)
    if not rows:
        raise DataFormatError("file contains no data rows")
    A = np.array(rows, dtype=np.float64)
    if labeled:
        y, X = A[:, 0].astype(np.int64), A[:, 1:]
    else:
        y, X = None, A
    if X.shape[1] < 2:
        raise DataFormatError("need at least two measurement columns")
    return FunctionalDataset(X, y, GridSpec(X.shape[1], float(delta)))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def save_dataset(path, data: FunctionalDataset, delimiter: str = "comma", header: bool = False):
    sep = _delim(delimiter)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            cols = (["label"] if data.y is not None else []) + [f"t{j}" for j in range(data.T)]
            fh.write(sep.join(cols) + "\n")
        for i in range(data.n):
            cells = [] if data.y is None else [str(int(data.y[i]))]
            cells += [repr(float(v)) for v in data.X[i]]
            fh.write(sep.join(cells) + "\n")


def write_table(path, columns: dict, delimiter: str = "comma"):
    """Write equal-length columns with a header row; floats use round-trip precision."""
    sep = _delim(delimiter)
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    length = {c.shape[0] for c in cols}
    if len(length) != 1:
        raise ValueError("table columns differ in length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(sep.join(names) + "\n")
        for i in range(length.pop()):
            fh.write(sep.join(_fmt(c[i]) if c.dtype.kind in "iuf" else str(c[i]) for c in cols) + "\n")


# ---------------------------------------------------------------------------
# model archive
# ---------------------------------------------------------------------------


def _field_arrays(prefix, f: GaussianField, out):
    out[f"{prefix}_mean"] = f.mean
    out[f"{prefix}_ldiag"] = f.factor.ldiag
    out[f"{prefix}_lsub"] = f.factor.lsub


def _field(prefix, arrs) -> GaussianField:
    return GaussianField(arrs[f"{prefix}_mean"], BandedCholeskyFactor(arrs[f"{prefix}_ldiag"], arrs[f"{prefix}_lsub"]))


def save_model(path, state: ModelState):
    arrs = {
        "format_version": np.array(FORMAT_VERSION),
        "grid": np.array([state.grid.T, state.grid.delta], dtype=np.float64),
        "class_counts": np.array(state.class_counts, dtype=np.int64),
        "w": state.w,
        "zeta": state.zeta,
        "scalars": np.array([state.lam, state.tau2, state.eta_tilde, state.lambda_tilde,
                             state.ising.alpha, state.ising.beta]),
        "tau_tilde": np.array([[q.a, q.b] for q in state.q_tau_tilde], dtype=np.float64),
        "sigma_a": np.asarray(state.q_sigma.a, dtype=np.float64),
        "sigma_b": np.asarray(state.q_sigma.b, dtype=np.float64),
        "tau": np.array([state.q_tau.a, state.q_tau.b], dtype=np.float64),
        "elbo_trace": np.array(state.elbo_trace, dtype=np.float64),
        "status": np.array([int(state.converged), state.n_sweeps], dtype=np.int64),
        "hyper": np.frombuffer(json.dumps(state.hyper.to_dict(), sort_keys=True).encode(), dtype=np.uint8),
        "notes": np.frombuffer(json.dumps(state.notes).encode(), dtype=np.uint8),
        "z_mean": state.q_z.mean,
        "z_ldiag": state.q_z.ldiag,
        "z_lsub": state.q_z.lsub,
    }
    for k in range(3):
        _field_arrays(f"mu{k}", state.q_mu[k], arrs)
        _field_arrays(f"nu{k}", state.q_nu[k], arrs)
    _field_arrays("R", state.q_R, arrs)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrs):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrs[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_model(path) -> ModelState:
    try:
        arrs = dict(np.load(path, allow_pickle=False))
    except (zipfile.BadZipFile, ValueError) as exc:
        raise ModelFormatError(f"{path}: not a model archive ({exc})") from None
    if "format_version" not in arrs:
        raise ModelFormatError(f"{path}: missing format_version")
    version = int(np.ravel(arrs["format_version"])[0])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version {version}")
    T, delta = arrs["grid"]
    grid = GridSpec(int(T), float(delta))
    hyper = Hyperparams(**json.loads(arrs["hyper"].tobytes().decode()))
    lam, tau2, eta, lt, alpha, beta = (float(v) for v in arrs["scalars"])
    z_ld, z_ls = arrs["z_ldiag"], arrs["z_lsub"]
    from .banded import sparse_inverse_subset_batch

    inv_d, inv_o = sparse_inverse_subset_batch(np.ascontiguousarray(z_ld), np.ascontiguousarray(z_ls))
    converged, n_sweeps = (int(v) for v in arrs["status"])
    return ModelState(
        grid=grid,
        hyper=hyper,
        class_counts=tuple(int(v) for v in arrs["class_counts"]),
        q_mu=[_field(f"mu{k}", arrs) for k in range(3)],
        q_nu=[_field(f"nu{k}", arrs) for k in range(3)],
        q_tau_tilde=[InvGamma(float(a), float(b)) for a, b in arrs["tau_tilde"]],
        q_sigma=InvGamma(arrs["sigma_a"], arrs["sigma_b"]),
        q_z=LatentBatch(arrs["z_mean"], z_ld, z_ls, inv_d, inv_o),
        q_tau=InvGamma(float(arrs["tau"][0]), float(arrs["tau"][1])),
        q_R=_field("R", arrs),
        w=arrs["w"],
        zeta=arrs["zeta"],
        lam=lam,
        tau2=tau2,
        eta_tilde=eta,
        lambda_tilde=lt,
        ising=IsingParams(alpha, beta),
        elbo_trace=[float(v) for v in arrs["elbo_trace"]],
        converged=bool(converged),
        n_sweeps=n_sweeps,
        notes=list(json.loads(arrs["notes"].tobytes().decode())),
    )
