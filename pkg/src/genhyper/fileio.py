"""On-disk formats. Every write goes to a temp file in the target directory and is renamed into place."""
import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .dataset import Individual, Population
from .diffusion import DiffusionSchedule, ScoreNetwork, Standardizer
from .engine import DenseNet
from .errors import ParseError, ValidationError
from .fields import EigenBasis, ParameterField, TriMesh
from .mechanics import BiaxialCurve, LoadingProtocol, Protocol
from .node import NodeArch, PopulationFit

FORMAT_VERSION = 1
DATASET_HEADER = ["protocol", "lambda", "sigma_xx", "sigma_yy"]
MANIFEST = "manifest.json"


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1) + "\n")


def _csv_text(header, rows, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _float(text, where):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"{where}: expected a number, got {text!r}") from None
    if not np.isfinite(v):
        raise ParseError(f"{where}: non-finite value {text!r}")
    return v


def _read_csv(path, expect=None):
    """(header, [(line_no, row)]) skipping '#' comment lines."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc.strerror})") from None
    header, rows = None, []
    for no, row in enumerate(csv.reader(lines), start=1):
        if not row or row[0].startswith("#"):
            continue
        row = [c.strip() for c in row]
        if header is None:
            header = row
            if expect is not None and header[:len(expect)] != expect:
                raise ParseError(f"{path}:{no}: expected header {','.join(expect)}, got {','.join(row)}")
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{no}: expected {len(header)} fields, got {len(row)}")
        rows.append((no, row))
    if header is None:
        raise ParseError(f"{path}: missing header")
    return header, rows


def _load_json(path, kind):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict) or "version" not in d:
        raise ParseError(f"{path}: missing version field")
    if d["version"] != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {d['version']}")
    if d.get("kind") != kind:
        raise ParseError(f"{path}: expected a {kind} file, found {d.get('kind')!r}")
    return d


# -- dataset ------------------------------------------------------------------

def save_dataset(population, directory):
    directory = Path(directory)
    entries = []
    for ind in population:
        rows = []
        for c in ind.curves:
            rows += [(c.kind.value, lam, sx, sy) for lam, sx, sy in
                     zip(c.stretch.tolist(), np.asarray(c.sigma_xx).tolist(), np.asarray(c.sigma_yy).tolist())]
        fname = f"{ind.name}.csv"
        atomic_write_text(directory / fname, _csv_text(DATASET_HEADER, rows))
        entries.append({"name": ind.name, "file": fname, "params": {k: float(v) for k, v in ind.params.items()}})
    meta = getattr(population, "meta", {})
    atomic_write_json(directory / MANIFEST, {"version": FORMAT_VERSION, "kind": "dataset", "meta": meta,
                                             "individuals": entries})


def load_individual_csv(path, name=None):
    """One individual from a ``protocol,lambda,sigma_xx,sigma_yy`` file (the ingestion boundary)."""
    path = Path(path)
    _, rows = _read_csv(path, DATASET_HEADER)
    by_kind = {}
    for no, (proto, lam, sx, sy) in rows:
        where = f"{path}:{no}"
        try:
            kind = Protocol.parse(proto)
        except ValidationError as exc:
            raise ParseError(f"{where}: {exc}") from None
        by_kind.setdefault(kind, []).append((_float(lam, where), _float(sx, where), _float(sy, where)))
    curves = []
    for kind, pts in by_kind.items():
        a = np.array(pts)
        try:
            curves.append(BiaxialCurve(LoadingProtocol(kind, a[:, 0]), a[:, 1], a[:, 2]))
        except ValidationError as exc:
            raise ParseError(f"{path}: {kind.value} curve: {exc}") from None
    return Individual(name or path.stem, curves)


def load_dataset(directory):
    directory = Path(directory)
    manifest = directory / MANIFEST
    if manifest.exists():
        d = _load_json(manifest, "dataset")
        inds = []
        for e in d["individuals"]:
            ind = load_individual_csv(directory / e["file"], e["name"])
            ind.params = dict(e.get("params", {}))
            inds.append(ind)
        return Population(inds, d.get("meta", {}))
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise ParseError(f"{directory}: no manifest and no individual CSV files")
    return Population([load_individual_csv(f) for f in files], {"source": str(directory)})


# -- models -------------------------------------------------------------------

def shared_to_dict(shared):
    return {"nets": [n.to_dict() for n in shared["nets"]],
            "alpha_pre": np.asarray(shared["alpha_pre"]).tolist()}


def shared_from_dict(d):
    import jax.numpy as jnp
    return {"nets": [DenseNet.from_dict(n) for n in d["nets"]],
            "alpha_pre": jnp.asarray(d["alpha_pre"], dtype=jnp.float64)}


def fit_to_dict(fit):
    return {"version": FORMAT_VERSION, "kind": "model", "arch": fit.arch.to_dict(),
            "shared": shared_to_dict(fit.shared), "phis": np.asarray(fit.phis).tolist(),
            "names": list(fit.names), "mae": np.asarray(fit.mae).tolist(),
            "curve_rel_mae": np.asarray(fit.curve_rel_mae).tolist(),
            "loss_history": [[int(i), float(v)] for i, v in fit.loss_history], "config": fit.config}


def fit_from_dict(d):
    try:
        arch = NodeArch.from_dict(d["arch"])
        phis = np.asarray(d["phis"], dtype=float).reshape(-1, arch.n_phi)
        return PopulationFit(arch, shared_from_dict(d["shared"]), phis, list(d["names"]),
                             np.asarray(d["mae"], dtype=float), np.asarray(d["curve_rel_mae"], dtype=float),
                             [tuple(h) for h in d.get("loss_history", [])], d.get("config", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed model record: {exc!r}") from None


def save_fit(fit, path):
    atomic_write_json(path, fit_to_dict(fit))


def load_fit(path):
    return fit_from_dict(_load_json(path, "model"))


def load_model_any(path):
    """Fitted population from a model file or from the copy embedded in a score file."""
    path = Path(path)
    try:
        kind = json.loads(path.read_text()).get("kind")
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc.strerror})") from None
    except (json.JSONDecodeError, AttributeError):
        kind = None
    if kind == "score":
        fit = load_score(path)[2]
        if fit is None:
            raise ValidationError(f"{path}: score file carries no fitted model")
        return fit
    return load_fit(path)


def save_score(score, path, standardizer=None, fit=None, train_config=None):
    d = {"version": FORMAT_VERSION, "kind": "score", "dim": score.dim,
         "schedule": score.schedule.to_dict(), "net": score.net.to_dict(),
         "standardizer": None if standardizer is None else standardizer.to_dict(),
         "model": None if fit is None else fit_to_dict(fit), "train_config": train_config}
    atomic_write_json(path, d)


def load_score(path):
    """(ScoreNetwork, Standardizer or None, PopulationFit or None)."""
    d = _load_json(path, "score")
    try:
        score = ScoreNetwork(DenseNet.from_dict(d["net"]), DiffusionSchedule(**d["schedule"]), int(d["dim"]))
        st = None if d.get("standardizer") is None else Standardizer.from_dict(d["standardizer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed score record: {exc!r}") from None
    fit = None if d.get("model") is None else fit_from_dict(d["model"])
    return score, st, fit


# -- samples, QoIs, fields ----------------------------------------------------

def save_samples(values, path, prefix="phi"):
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[0] == 1 and np.ndim(values) == 1:
        v = v.T
    header = [f"{prefix}{j}" for j in range(v.shape[1])]
    atomic_write_text(path, _csv_text(header, v.tolist()))


def load_samples(path):
    path = Path(path)
    header, rows = _read_csv(path)
    out = np.array([[_float(x, f"{path}:{no}") for x in r] for no, r in rows]).reshape(len(rows), len(header))
    return out


def save_qoi(values, path, name="sigma_xx"):
    atomic_write_text(path, _csv_text([name], [[float(v)] for v in np.ravel(values)]))


def load_qoi(path):
    return load_samples(path)


def save_field(pf, path):
    n_fields, n_points, dim = pf.values.shape
    pts = np.asarray(pf.points, dtype=float).reshape(n_points, -1)
    coords = [f"x{j}" for j in range(pts.shape[1])]
    header = ["realization", "point", *coords, *[f"phi{j}" for j in range(dim)]]
    rows = [[r, i, *pts[i].tolist(), *pf.values[r, i].tolist()] for r in range(n_fields) for i in range(n_points)]
    atomic_write_text(path, _csv_text(header, rows, comment=json.dumps({"provenance": pf.provenance})))


def load_field(path):
    path = Path(path)
    text = path.read_text()
    first = text.split("\n", 1)[0]
    provenance = {}
    if first.startswith("# "):
        try:
            provenance = json.loads(first[2:]).get("provenance", {})
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:1:{exc.colno}: bad provenance header") from None
    header, rows = _read_csv(path)
    nd = sum(h.startswith("x") for h in header)
    dim = len(header) - 2 - nd
    data = np.array([[_float(x, f"{path}:{no}") for x in r] for no, r in rows])
    n_fields = int(data[:, 0].max()) + 1
    n_points = int(data[:, 1].max()) + 1
    if data.shape[0] != n_fields * n_points:
        raise ParseError(f"{path}: expected {n_fields * n_points} rows, got {data.shape[0]}")
    values = data[:, 2 + nd:].reshape(n_fields, n_points, dim)
    points = data[:n_points, 2:2 + nd]
    return ParameterField(values, points, provenance)


# -- meshes and bases ---------------------------------------------------------

def _read_table(path, ncol, cast):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read ({exc.strerror})") from None
    out = []
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in ncol:
            raise ParseError(f"{path}:{no}: expected {' or '.join(map(str, ncol))} columns, got {len(parts)}")
        try:
            out.append([cast(p) for p in parts])
        except ValueError:
            raise ParseError(f"{path}:{no}: cannot parse {line!r}") from None
    if not out:
        raise ParseError(f"{path}: empty file")
    if len({len(r) for r in out}) != 1:
        raise ParseError(f"{path}: inconsistent column counts")
    return np.array(out)


def load_mesh(nodes_path, tris_path):
    nodes = _read_table(nodes_path, (2, 3), float)
    tris = _read_table(tris_path, (3,), int)
    return TriMesh(nodes, tris)


def save_mesh(mesh, nodes_path, tris_path):
    atomic_write_text(nodes_path, "".join(" ".join(repr(float(v)) for v in p) + "\n" for p in mesh.nodes))
    atomic_write_text(tris_path, "".join(" ".join(str(int(v)) for v in t) + "\n" for t in mesh.tris))


def save_basis(basis, path):
    atomic_write_json(path, {"version": FORMAT_VERSION, "kind": "eigenbasis", **basis.to_dict()})


def load_basis(path):
    d = _load_json(path, "eigenbasis")
    return EigenBasis(np.asarray(d["values"], dtype=float), np.asarray(d["vectors"], dtype=float), None)


# -- observations -------------------------------------------------------------

def load_observations(path):
    """Parse an observation file.

    Returns ``("stress", [(protocol, lam, sxx, syy or None), ...])`` or
    ``("param", indices, values)``.
    """
    path = Path(path)
    header, rows = _read_csv(path)
    if header[:3] == ["param", "index", "value"]:
        idx, vals = [], []
        for no, r in rows:
            try:
                idx.append(int(r[1]))
            except ValueError:
                raise ParseError(f"{path}:{no}: index must be an integer") from None
            vals.append(_float(r[2], f"{path}:{no}"))
        if not rows:
            raise ParseError(f"{path}: no observations")
        return "param", np.array(idx), np.array(vals)
    if header[:3] == ["protocol", "lambda", "sigma_xx"]:
        has_yy = len(header) > 3 and header[3] == "sigma_yy"
        out = []
        for no, r in rows:
            where = f"{path}:{no}"
            try:
                kind = Protocol.parse(r[0])
            except ValidationError as exc:
                raise ParseError(f"{where}: {exc}") from None
            syy = _float(r[3], where) if has_yy and r[3] != "" else None
            out.append((kind, _float(r[1], where), _float(r[2], where), syy))
        if not out:
            raise ParseError(f"{path}: no observations")
        return "stress", out
    raise ParseError(f"{path}:1: header must start with protocol,lambda,sigma_xx or param,index,value")
