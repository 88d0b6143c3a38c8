"""JSON and CSV persistence.

Every JSON document carries ``schema`` and ``version`` keys; arrays are stored
flat in row-major order next to their shape. Floats are written in
shortest round-trip form (Python ``repr``), and non-finite values as the
strings ``"inf"``, ``"-inf"`` and ``"nan"``.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import FeatureMap
from .mdp import TabularMdp, TransitionDataset

SCHEMA_VERSION = 1
RUN_CSV_COLUMNS = ("run_id", "k", "tau", "error_sq", "rho_k", "weight_err", "in_basin")
PLOT_CSV_COLUMNS = ("arm", "iteration", "mean", "q25", "q75")


def clean(obj):
    """Make ``obj`` JSON-safe: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def dumps(doc):
    return json.dumps(clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def read_json(path, schema=None):
    doc = json.loads(Path(path).read_text())
    if schema is not None:
        check_header(doc, schema)
    return doc


def check_header(doc, schema):
    if doc.get("schema") != schema:
        raise ConfigError(f"expected schema {schema!r}, found {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported {schema} version {doc.get('version')!r}")


def _header(schema):
    return {"schema": schema, "version": SCHEMA_VERSION}


def mdp_to_json(mdp: TabularMdp):
    return _header("softfqi.mdp") | {
        "n_states": mdp.n_states, "n_actions": mdp.n_actions, "discount": mdp.discount,
        "transition": mdp.transition.ravel().tolist(), "reward": mdp.reward.ravel().tolist(),
    }


def mdp_from_json(doc):
    check_header(doc, "softfqi.mdp")
    S, A = doc["n_states"], doc["n_actions"]
    P = np.asarray(doc["transition"], dtype=float).reshape(S, A, S)
    r = np.asarray(doc["reward"], dtype=float).reshape(S, A)
    return TabularMdp(P, r, doc["discount"])


def dataset_to_json(ds: TransitionDataset):
    return _header("softfqi.dataset") | {
        "n": ds.n, "states": ds.states.tolist(), "actions": ds.actions.tolist(),
        "rewards": ds.rewards.tolist(), "next_states": ds.next_states.tolist(),
    }


def dataset_from_json(doc):
    check_header(doc, "softfqi.dataset")
    ds = TransitionDataset(doc["states"], doc["actions"], doc["rewards"], doc["next_states"])
    if ds.n != doc["n"]:
        raise ConfigError("dataset length does not match its 'n' field")
    return ds


def qtable_to_json(q, **meta):
    q = np.asarray(q, dtype=float)
    return _header("softfqi.qtable") | {
        "n_states": q.shape[0], "n_actions": q.shape[1], "values": q.ravel().tolist(),
    } | meta


def qtable_from_json(doc):
    check_header(doc, "softfqi.qtable")
    return np.asarray(doc["values"], dtype=float).reshape(doc["n_states"], doc["n_actions"])


def features_to_json(fm: FeatureMap):
    S, A, p = fm.features.shape
    return _header("softfqi.features") | {
        "name": fm.name, "ref": fm.ref, "n_states": S, "n_actions": A, "p": p,
        "rank": fm.rank, "features": fm.features.ravel().tolist(),
    }


def features_from_json(doc):
    check_header(doc, "softfqi.features")
    f = np.asarray(doc["features"], dtype=float).reshape(doc["n_states"], doc["n_actions"], doc["p"])
    return FeatureMap(f, name=doc["name"])


def fmt(value):
    """CSV cell: shortest round-trip floats, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_run_csv(path, record, run_id):
    return write_csv(path, RUN_CSV_COLUMNS, record.rows(run_id))
