"""Dataset bundles, artifact serialisation and run manifests.

Bundle layout (a directory of CSV files with header rows):

``nodes.csv``
    ``node_id`` plus optional ``year`` and ``imp`` columns, then one column
    per nodal covariate.
``dyads.csv`` (optional)
    ``node_i, node_j`` plus optional ``year``/``imp``, then dyadic covariates.
    A single row for an unordered pair is used for both directions; rows for
    both (i, j) and (j, i) give asymmetric values.
``ties.csv``
    ``node_i, node_j`` plus optional ``year`` and ``value`` (default 1).

An ``imp`` column holds M imputed replicates of the covariate tables.
"""
from __future__ import annotations

import hashlib
import io as _io
import json
import zipfile
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import ValidationError
from .gibbs import FitConfig, PosteriorDraws
from .model import CovariateSet, ImputedCovariates, ObservedNetwork

NODE_FILE = "nodes.csv"
DYAD_FILE = "dyads.csv"
TIE_FILE = "ties.csv"
MANIFEST_FILE = "manifest.json"
_RESERVED = {"node_id", "node_i", "node_j", "year", "imp", "value"}
# Fixed zip timestamp so draws files are byte-reproducible.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _read(path: Path, id_cols) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={c: str for c in id_cols}, float_precision="round_trip")
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path.name}: cannot parse ({exc})") from exc
    missing = [c for c in id_cols if c not in df.columns]
    if missing:
        raise ValidationError(f"{path.name}: missing required column(s) {missing}")
    return df


def _slice_year(df: pd.DataFrame, year, name: str) -> pd.DataFrame:
    if year is None or "year" not in df.columns:
        return df
    return df[df["year"].astype(str) == str(year)]


def bundle_inputs(data_dir) -> list:
    data_dir = Path(data_dir)
    return [data_dir / f for f in (NODE_FILE, DYAD_FILE, TIE_FILE)
            if (data_dir / f).exists()]


def list_years(data_dir) -> list:
    """Distinct years in the node table, sorted; ``[None]`` when unyeared."""
    nodes = _read(Path(data_dir) / NODE_FILE, ["node_id"])
    if "year" not in nodes.columns:
        return [None]
    return sorted(nodes["year"].astype(str).unique().tolist())


def load_bundle(data_dir, year=None, intercept: bool = True):
    """Build the observed network and covariate replicates for one year.

    Nodes are ordered lexicographically by id. With ``intercept`` a
    constant dyadic column named ``intercept`` is appended unless present.

    Returns ``(network, imputed_covariates)``.
    """
    data_dir = Path(data_dir)
    nodes = _slice_year(_read(data_dir / NODE_FILE, ["node_id"]), year, NODE_FILE)
    ties = _slice_year(_read(data_dir / TIE_FILE, ["node_i", "node_j"]), year, TIE_FILE)
    dyad_path = data_dir / DYAD_FILE
    dyads = (_slice_year(_read(dyad_path, ["node_i", "node_j"]), year, DYAD_FILE)
             if dyad_path.exists() else None)
    if nodes.empty:
        raise ValidationError(f"no nodes found for year {year}")

    ids = sorted(nodes["node_id"].unique().tolist())
    index = {nid: k for k, nid in enumerate(ids)}
    n = len(ids)

    def lookup(val, table):
        try:
            return index[val]
        except KeyError:
            raise ValidationError(f"{table}: unknown node id {val!r}") from None

    # ties
    y = np.zeros((n, n), dtype=np.int8)
    seen = {}
    values = ties["value"].astype(int) if "value" in ties.columns else pd.Series(1, index=ties.index)
    for a, b, val in zip(ties["node_i"], ties["node_j"], values):
        i, j = lookup(a, TIE_FILE), lookup(b, TIE_FILE)
        if i == j:
            raise ValidationError(f"{TIE_FILE}: self-tie for node {a!r}")
        key = (min(i, j), max(i, j))
        if key in seen and seen[key] != int(val):
            raise ValidationError(
                f"{TIE_FILE}: conflicting rows for pair ({ids[key[0]]!r}, {ids[key[1]]!r})")
        seen[key] = int(val)
        y[i, j] = y[j, i] = int(val != 0)
    net = ObservedNetwork(y, node_ids=ids)

    imps = sorted(nodes["imp"].unique().tolist()) if "imp" in nodes.columns else [None]
    node_cols = [c for c in nodes.columns if c not in _RESERVED]
    dyad_cols = [c for c in dyads.columns if c not in _RESERVED] if dyads is not None else []
    replicates = []
    for imp in imps:
        nd = nodes if imp is None else nodes[nodes["imp"] == imp]
        if nd["node_id"].duplicated().any():
            dup = nd["node_id"][nd["node_id"].duplicated()].iloc[0]
            raise ValidationError(f"{NODE_FILE}: duplicate node id {dup!r}")
        nd = nd.set_index("node_id").reindex(ids)
        node_x = nd[node_cols].to_numpy(dtype=float) if node_cols else np.zeros((n, 0))
        dyad_x = np.zeros((n, n, len(dyad_cols)))
        if dyads is not None and dyad_cols:
            dd = dyads
            if imp is not None and "imp" in dyads.columns:
                dd = dyads[dyads["imp"] == imp]
            filled = np.zeros((n, n), dtype=bool)
            explicit = np.zeros((n, n), dtype=bool)
            vals = dd[dyad_cols].to_numpy(dtype=float)
            for row, (a, b) in enumerate(zip(dd["node_i"], dd["node_j"])):
                i, j = lookup(a, DYAD_FILE), lookup(b, DYAD_FILE)
                dyad_x[i, j] = vals[row]
                explicit[i, j] = filled[i, j] = True
                if not explicit[j, i]:
                    dyad_x[j, i] = vals[row]
                    filled[j, i] = True
            np.fill_diagonal(filled, True)
            if not filled.all():
                i, j = np.argwhere(~filled)[0]
                raise ValidationError(
                    f"{DYAD_FILE}: no covariates for pair ({ids[i]!r}, {ids[j]!r})")
        names = list(dyad_cols)
        if intercept and "intercept" not in names:
            dyad_x = np.concatenate([dyad_x, np.ones((n, n, 1))], axis=2)
            names.append("intercept")
        off = ~np.eye(n, dtype=bool)
        if not (np.all(np.isfinite(node_x)) and np.all(np.isfinite(dyad_x[off]))):
            if len(imps) == 1:
                raise ValidationError(
                    "covariates contain missing or non-finite values; supply imputed "
                    "replicates (an 'imp' column) instead of incomplete data")
            raise ValidationError(f"imputed replicate {imp!r} is incomplete")
        replicates.append(CovariateSet(node_x, dyad_x, node_names=list(node_cols),
                                       dyad_names=names))
    return net, ImputedCovariates(replicates)


def write_bundle(out_dir, net: ObservedNetwork, cov: CovariateSet, year=None):
    """Write a single-year bundle (used for synthetic data)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [str(i) for i in net.node_ids]
    nodes = pd.DataFrame(cov.node_x, columns=cov.node_names)
    nodes.insert(0, "node_id", ids)
    dyn = [c for c in cov.dyad_names if c != "intercept"]
    keep = [k for k, c in enumerate(cov.dyad_names) if c != "intercept"]
    ii, jj = np.nonzero(~np.eye(net.n_nodes, dtype=bool))
    dyads = pd.DataFrame(cov.dyad_x[ii, jj][:, keep], columns=dyn)
    dyads.insert(0, "node_j", [ids[j] for j in jj])
    dyads.insert(0, "node_i", [ids[i] for i in ii])
    ti, tj = np.nonzero(np.triu(net.adjacency, 1))
    ties = pd.DataFrame({"node_i": [ids[i] for i in ti], "node_j": [ids[j] for j in tj]})
    if year is not None:
        for df in (nodes, dyads, ties):
            df.insert(1 if "node_id" in df.columns else 2, "year", year)
    nodes.to_csv(out_dir / NODE_FILE, index=False, float_format="%.17g")
    dyads.to_csv(out_dir / DYAD_FILE, index=False, float_format="%.17g")
    ties.to_csv(out_dir / TIE_FILE, index=False)


# ----------------------------------------------------------------------------
# draws


def write_draws(path, draws: PosteriorDraws):
    """Store draws as an ``.npz`` archive (one array per parameter plus a
    JSON ``meta`` entry) with fixed timestamps, so equal draws give equal
    bytes. Readable with :func:`numpy.load`."""
    meta = {
        "config": draws.config.to_dict(),
        "node_names": list(draws.node_names),
        "dyad_names": list(draws.dyad_names),
        "node_ids": [str(i) for i in draws.node_ids],
        "format": "pgbme-draws/1",
    }
    entries = dict(draws.arrays)
    entries["replicates_per_iteration"] = draws.replicates
    entries["meta"] = np.frombuffer(canonical_json(meta).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            buf = _io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(entries[name]),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE), buf.getvalue())


def read_draws(path) -> PosteriorDraws:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    reps = arrays.pop("replicates_per_iteration")
    return PosteriorDraws(FitConfig.from_dict(meta["config"]), arrays, reps,
                          meta["node_names"], meta["dyad_names"], meta["node_ids"])


# ----------------------------------------------------------------------------
# tables


def write_matrix_csv(path, mat: np.ndarray, ids):
    ids = [str(i) for i in ids]
    df = pd.DataFrame(mat, index=pd.Index(ids, name="node_id"), columns=ids)
    df.to_csv(path, float_format="%.17g")


def read_matrix_csv(path):
    df = pd.read_csv(path, index_col=0, dtype={"node_id": str},
                     float_precision="round_trip")
    return df.to_numpy(dtype=float), [str(i) for i in df.index]


def write_traces(path, draws: PosteriorDraws):
    df = pd.DataFrame(draws.traces(), columns=draws.trace_columns())
    df.insert(0, "replicate", draws.arrays["replicate"])
    df.insert(0, "iteration", draws.arrays["iteration"])
    df.to_csv(path, index=False, float_format="%.17g")


def coefficient_summary(draws: PosteriorDraws) -> dict:
    """Posterior mean, sd and 90%/95% credible intervals per coefficient."""
    out = {}
    for label, x in draws.coefficient_draws().items():
        q = np.quantile(x, [0.025, 0.05, 0.95, 0.975])
        out[label] = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                      "ci90": [float(q[1]), float(q[2])], "ci95": [float(q[0]), float(q[3])]}
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")


# ----------------------------------------------------------------------------
# manifest


def write_manifest(out_dir, command: str, config: dict, seed, inputs, extra=None):
    """Record config hash, seed, input and output digests for ``out_dir``.

    Input paths are stored as given; outputs are every other file in
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    outputs = {p.name: sha256_file(p) for p in sorted(out_dir.iterdir())
               if p.is_file() and p.name != MANIFEST_FILE}
    manifest = {
        "software_version": __version__,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": {str(Path(p).resolve()): sha256_file(p) for p in inputs},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    write_json(out_dir / MANIFEST_FILE, manifest)
    return manifest


def verify_manifest(out_dir) -> list:
    """Return a list of mismatch descriptions (empty when all digests match)."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / MANIFEST_FILE).read_text())
    problems = []
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        problems.append("config hash does not match recorded config")
    for group, base in (("inputs", None), ("outputs", out_dir)):
        for name, digest in manifest[group].items():
            p = Path(name) if base is None else base / name
            if not p.exists():
                problems.append(f"{group[:-1]} missing: {p}")
            elif sha256_file(p) != digest:
                problems.append(f"{group[:-1]} changed: {p}")
    return problems
