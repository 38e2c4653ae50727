"""Run artifacts: per-generation checkpoints, the JSON-lines run log and front exports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from . import layers as L
from .config import config_from_dict, config_to_dict
from .errors import CheckpointError, ConfigError, ParseError
from .objectives import ObjectiveVector
from .search import _T_GEN, PopulationMember, SearchState
from .serialize import from_document, save, to_document

CHECKPOINT_VERSION = 1
_CKPT = re.compile(r"gen_(\d+)\.json$")


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def weights_bytes(weights) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **{f"{n}/{name}": np.asarray(v, dtype="<f8", order="C")
                     for n in sorted(weights) for name, v in sorted(weights[n].items())})
    return buf.getvalue()


def weights_from_bytes(raw: bytes):
    out = {}
    with np.load(io.BytesIO(raw)) as z:
        for k in z.files:
            n, name = k.split("/")
            out.setdefault(int(n), {})[name] = z[k].astype(np.float64)
    return out


# --------------------------------------------------------------------------- checkpoints


def _coordinator_state(seed, generation):
    rng = np.random.default_rng([seed, _T_GEN, generation + 1])
    return rng.bit_generator.state


def write_checkpoint(state: SearchState, cfg, out_dir) -> Path:
    """Write ``checkpoints/gen_NNNN.json``; member weights go once to ``members/``."""
    out = Path(out_dir)
    pop = []
    for m in state.population:
        wpath = out / "members" / f"member_{m.id:05d}.npz"
        raw = weights_bytes(m.weights)
        digest = hashlib.sha256(raw).hexdigest()
        if not wpath.exists() or hashlib.sha256(wpath.read_bytes()).hexdigest() != digest:
            atomic_write(wpath, raw)
        pop.append({
            "id": m.id, "parent_id": m.parent_id, "generation_born": m.generation_born,
            "operator_history": m.operator_history,
            "objectives": {"names": list(m.objectives.names),
                           "expensive": list(m.objectives.expensive),
                           "cheap": list(m.objectives.cheap)},
            "architecture": to_document(m.graph),
            "weights_file": str(wpath.relative_to(out)), "weights_sha256": digest,
        })
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "generation": state.generation,
        "rng": {"seed": cfg.seed,
                "scheme": "SeedSequence([seed, stream, ...]) per generation and per member",
                "coordinator": _coordinator_state(cfg.seed, state.generation)},
        "config": config_to_dict(cfg),
        "next_id": state.next_id,
        "f_exp_count": state.f_exp_count,
        "f_cheap_count": state.f_cheap_count,
        "population": pop,
        "history": state.history,
    }
    path = out / "checkpoints" / f"gen_{state.generation:04d}.json"
    atomic_write(path, json.dumps(doc, indent=1).encode())
    return path


def _check_shapes(graph, weights, where):
    for n, kind in graph.nodes.items():
        if n == graph.plan.input_node:
            continue
        ins = graph.in_shapes(n)
        want = {**L.param_shapes(kind, ins), **L.state_shapes(kind, ins)}
        got = {name: v.shape for name, v in weights.get(n, {}).items()}
        if got != {k: tuple(v) for k, v in want.items()}:
            raise CheckpointError(f"{where}: node {n} weights have shapes {got}, "
                                  f"architecture needs {want}")


def read_checkpoint(path):
    """Return ``(state, config)``; refuses other format versions and corrupt files."""
    path = Path(path)
    out = path.parent.parent
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        got = doc.get("format_version") if isinstance(doc, dict) else None
        raise CheckpointError(f"{path}: format_version {got!r}, this build reads "
                              f"{CHECKPOINT_VERSION}")
    try:
        cfg = config_from_dict(doc["config"])
        members = []
        for e in doc["population"]:
            raw = (out / e["weights_file"]).read_bytes()
            if hashlib.sha256(raw).hexdigest() != e["weights_sha256"]:
                raise CheckpointError(f"{e['weights_file']}: checksum mismatch")
            graph, _ = from_document(e["architecture"])
            weights = weights_from_bytes(raw)
            _check_shapes(graph, weights, e["weights_file"])
            o = e["objectives"]
            members.append(PopulationMember(
                e["id"], graph, weights,
                ObjectiveVector(o["expensive"], o["cheap"], o["names"]),
                e["parent_id"], e["generation_born"], e["operator_history"]))
        state = SearchState(doc["generation"], members, doc["next_id"], doc["f_exp_count"],
                            doc["f_cheap_count"], doc["history"])
    except (KeyError, TypeError, OSError, ValueError, ParseError, ConfigError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc!r})") from None
    if doc["rng"].get("coordinator") != _coordinator_state(cfg.seed, state.generation):
        raise CheckpointError(f"{path}: RNG state does not match the recorded seed")
    return state, cfg


def list_checkpoints(out_dir):
    ckpts = []
    for p in (Path(out_dir) / "checkpoints").glob("gen_*.json"):
        m = _CKPT.search(p.name)
        if m:
            ckpts.append((int(m.group(1)), p))
    return [p for _, p in sorted(ckpts)]


def latest_checkpoint(out_dir):
    ckpts = list_checkpoints(out_dir)
    if not ckpts:
        raise CheckpointError(f"no checkpoints under {out_dir}")
    return ckpts[-1]


# --------------------------------------------------------------------------- run log


class RunLog:
    """Append-only JSON lines, one per evaluated network."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def reset(self):
        self.path.unlink(missing_ok=True)

    def truncate_after(self, generation):
        """Drop records from generations past ``generation`` (used when resuming)."""
        if not self.path.exists():
            return
        keep = [line for line in self.path.read_text().splitlines()
                if line.strip() and json.loads(line)["generation"] <= generation]
        atomic_write(self.path, "".join(line + "\n" for line in keep).encode())

    def __call__(self, member: PopulationMember, generation):
        rec = {"generation": generation, "member_id": member.id, "parent_id": member.parent_id,
               "objectives": member.objectives.as_dict(), "param_count": member.param_count,
               "mac_count": member.mac_count, "operator_history": member.operator_history,
               "wall_time_s": member.eval_seconds}
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------- export


def front_rows(population):
    """Rows sorted by the first expensive objective, then by member id."""
    if not population:
        return [], []
    names = list(population[0].objectives.names)
    header = ["member_id", "generation_born", *names, "param_count", "mac_count", "n_operators"]
    rows = []
    for m in sorted(population, key=lambda m: (m.objectives.expensive[0], m.id)):
        if list(m.objectives.names) != names:
            raise ValueError("members disagree on objective names")
        rows.append([m.id, m.generation_born, *m.objectives.values, m.param_count, m.mac_count,
                     len(m.operator_history)])
    return header, rows


def export_front(population, path, fmt=None, architectures=True) -> Path:
    """Write the front as CSV or JSON plus one architecture file per member.

    Floats are written with ``repr`` so every value reads back bit-exactly. The
    architecture files (with weights) go to ``<stem>_architectures/`` next to ``path``.
    """
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    header, rows = front_rows(population)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
        data = buf.getvalue()
    elif fmt == "json":
        data = json.dumps([dict(zip(header, r)) for r in rows], indent=1) + "\n"
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    atomic_write(path, data.encode())
    if architectures:
        arch_dir = path.parent / f"{path.stem}_architectures"
        arch_dir.mkdir(parents=True, exist_ok=True)
        for m in population:
            save(arch_dir / f"member_{m.id:05d}.json", m.graph, m.weights)
    return path


def read_front_csv(path):
    with Path(path).open() as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]
