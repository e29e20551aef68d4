"""Loading, validation and persistence of the toolkit's data files.

File formats
------------
Expression matrix (TSV, UTF-8)::

    sample_id<TAB>patient_id<TAB>GENE_1<TAB>...<TAB>GENE_N
    S1<TAB>P1<TAB>0.5<TAB>...

Edge list (TSV)::

    # comment
    #@tau=0.85          (optional metadata lines: tau, absolute, isolated)
    GENE_A<TAB>GENE_B[<TAB>correlation]

Binary matrix (``.pkmx``): magic ``b"PKMX"``, version ``u16``, rows ``u64``,
cols ``u64``, then ``rows * cols`` little-endian float64 in row-major order.
Row labels, when needed, live in a sidecar text file ``<path>.ids`` with one
identifier per line.

Fold specification: sectionless ``key = value`` text, see :func:`save_folds`.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .coexpr import CoexpressionGraph

PKMX_MAGIC = b"PKMX"
PKMX_VERSION = 1
_HEADER = struct.Struct("<4sHQQ")

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ExpressionMatrix:
    sample_ids: tuple[str, ...]
    patient_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d matrix")
        if values.shape != (len(self.sample_ids), len(self.gene_ids)):
            raise ValueError(f"values shape {values.shape} does not match "
                             f"{len(self.sample_ids)} samples x {len(self.gene_ids)} genes")
        if len(self.patient_ids) != len(self.sample_ids):
            raise ValueError("patient_ids must align with sample_ids")
        _check_unique(self.sample_ids, "sample id")
        _check_unique(self.gene_ids, "gene id")
        if not np.all(np.isfinite(values)):
            raise ValueError("expression values must be finite")
        if np.any(values < 0):
            raise ValueError("expression values must be nonnegative")
        object.__setattr__(self, "values", _freeze(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def subset(self, rows: Sequence[int]) -> "ExpressionMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return ExpressionMatrix([self.sample_ids[i] for i in rows],
                                [self.patient_ids[i] for i in rows],
                                self.gene_ids, self.values[rows])


@dataclass(frozen=True)
class EmbeddingTable:
    sample_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.sample_ids):
            raise ValueError("vectors must be n_samples x dim")
        if vectors.shape[1] < 1:
            raise ValueError("embedding dimension must be positive")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding vectors must be finite")
        _check_unique(self.sample_ids, "sample id")
        object.__setattr__(self, "vectors", _freeze(vectors))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def aligned_to(self, sample_ids: Sequence[str]) -> np.ndarray:
        """Vectors reordered to follow ``sample_ids``."""
        index = {s: k for k, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in index]
        if missing:
            raise KeyError(f"no embedding for samples {missing[:5]}")
        return self.vectors[[index[s] for s in sample_ids]]


@dataclass(frozen=True)
class PatchSet:
    sample_id: str
    patches: np.ndarray

    def __post_init__(self):
        patches = np.array(self.patches, dtype=np.float64)
        if patches.ndim != 2 or patches.shape[0] < 1:
            raise ValueError(f"patch set {self.sample_id!r} needs at least one patch")
        if not np.all(np.isfinite(patches)):
            raise ValueError("patches must be finite")
        object.__setattr__(self, "patches", _freeze(patches))


@dataclass(frozen=True)
class FoldSpec:
    """Patient-level cross-validation assignment.

    ``assignments[f]`` maps each patient id to ``"train"``, ``"val"`` or
    ``"test"`` for fold ``f``.
    """

    n_folds: int
    assignments: tuple[dict, ...]
    seed: int

    def patients(self, fold: int, split: str) -> list[str]:
        return sorted(p for p, s in self.assignments[fold].items() if s == split)

    def sample_indices(self, fold: int, patient_ids: Sequence[str]) -> dict[str, np.ndarray]:
        """Sample row indices per split; samples inherit their patient's split."""
        table = self.assignments[fold]
        out = {s: [] for s in SPLITS}
        for k, p in enumerate(patient_ids):
            if p not in table:
                raise KeyError(f"patient {p!r} is not assigned in fold {fold}")
            out[table[p]].append(k)
        return {s: np.array(v, dtype=np.int64) for s, v in out.items()}


def _check_unique(ids: Sequence[str], what: str):
    seen = set()
    for x in ids:
        if x in seen:
            raise ValueError(f"duplicate {what} {x!r}")
        seen.add(x)


def _fmt(v: float) -> str:
    return repr(float(v))


# -- expression matrices ------------------------------------------------------

def load_expression_matrix(path) -> ExpressionMatrix:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "sample_id" or header[1] != "patient_id":
            raise FormatError(f"{path}:1: header must start with sample_id<TAB>patient_id")
        genes = header[2:]
        seen = set()
        for g in genes:
            if g in seen:
                raise ValueError(f"{path}: duplicate gene id {g!r}")
            seen.add(g)
        samples, patients, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(x) for x in row[2:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) and v >= 0 for v in vals):
                raise ValueError(f"{path}:{lineno}: values must be finite and nonnegative")
            samples.append(row[0])
            patients.append(row[1])
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(genes))
    return ExpressionMatrix(samples, patients, genes, values)


def save_expression_matrix(expr: ExpressionMatrix, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "patient_id", *expr.gene_ids])
        for s, p, row in zip(expr.sample_ids, expr.patient_ids, expr.values):
            w.writerow([s, p, *map(_fmt, row)])


# -- binary matrices ----------------------------------------------------------

def write_pkmx(path, matrix):
    a = np.asarray(matrix, dtype="<f8")
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError("only 2-d matrices can be written")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(PKMX_MAGIC, PKMX_VERSION, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a).tobytes(order="C"))


def read_pkmx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != PKMX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PKMX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise FormatError(f"{path}: expected {rows * cols * 8} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def write_ids(path, ids: Iterable[str]):
    ids = list(ids)
    for x in ids:
        if "\n" in x or "\r" in x:
            raise ValueError(f"identifier {x!r} contains a newline")
    Path(path).write_text("".join(f"{x}\n" for x in ids), encoding="utf-8")


def read_ids(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.splitlines()


def save_labeled_matrix(path, ids: Sequence[str], matrix):
    """PKMX matrix plus its ``.ids`` sidecar of row labels."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] != len(ids):
        raise ValueError("one id per matrix row is required")
    write_pkmx(path, matrix)
    write_ids(ids_path(path), ids)


def load_labeled_matrix(path) -> tuple[list[str], np.ndarray]:
    m = read_pkmx(path)
    ids = read_ids(ids_path(path))
    if len(ids) != m.shape[0]:
        raise FormatError(f"{path}: {len(ids)} ids for {m.shape[0]} rows")
    return ids, m


def save_embedding_table(table: EmbeddingTable, path):
    save_labeled_matrix(path, table.sample_ids, table.vectors)


def load_embedding_table(path) -> EmbeddingTable:
    ids, m = load_labeled_matrix(path)
    return EmbeddingTable(ids, m)


def save_patch_sets(patch_sets: Sequence[PatchSet], path):
    """All patches stacked in one matrix; the sidecar names each row's sample."""
    if not patch_sets:
        raise ValueError("no patch sets to save")
    dims = {ps.patches.shape[1] for ps in patch_sets}
    if len(dims) != 1:
        raise ValueError("patch dimension differs between samples")
    ids = [ps.sample_id for ps in patch_sets for _ in range(len(ps.patches))]
    save_labeled_matrix(path, ids, np.vstack([ps.patches for ps in patch_sets]))


def load_patch_sets(path) -> list[PatchSet]:
    ids, m = load_labeled_matrix(path)
    out, start = [], 0
    for k in range(1, len(ids) + 1):
        if k == len(ids) or ids[k] != ids[start]:
            out.append(PatchSet(ids[start], m[start:k]))
            start = k
    names = [ps.sample_id for ps in out]
    _check_unique(names, "patch-set sample id (rows must be grouped)")
    return out


# -- graphs -------------------------------------------------------------------

def load_graph_edgelist(path) -> CoexpressionGraph:
    pairs, weights = [], []
    has_weight = None
    meta = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if line.startswith("#@") and "=" in line:
                key, _, val = line[2:].partition("=")
                meta[key.strip()] = val.strip()
                continue
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not all(p.strip() for p in parts):
                raise FormatError(f"{path}:{lineno}: expected gene_a<TAB>gene_b[<TAB>correlation]")
            a, b = parts[0].strip(), parts[1].strip()
            if a == b:
                raise ValueError(f"{path}:{lineno}: self-loop on gene {a!r}")
            weighted = len(parts) == 3
            if has_weight is None:
                has_weight = weighted
            elif has_weight != weighted:
                raise FormatError(f"{path}:{lineno}: mixed weighted and unweighted lines")
            if weighted:
                try:
                    weights.append(float(parts[2]))
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad correlation {parts[2]!r}") from None
            pairs.append((a, b))
    extra = [g for g in meta.get("isolated", "").split(",") if g]
    tau = float(meta["tau"]) if "tau" in meta else None
    absolute = meta.get("absolute", "False") == "True"
    return CoexpressionGraph.from_named_edges(pairs, weights if has_weight else None,
                                              gene_ids=extra, tau=tau if has_weight else None,
                                              absolute=absolute)


def save_graph_edgelist(g: CoexpressionGraph, path, header: Optional[str] = None):
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    if g.tau is not None:
        lines.append(f"#@tau={g.tau!r}")
        lines.append(f"#@absolute={g.absolute}")
    isolated = [x for x, d in zip(g.gene_ids, g.degree()) if d == 0]
    if isolated:
        lines.append(f"#@isolated={','.join(isolated)}")
    for k, (a, b) in enumerate(g.named_edges()):
        if g.weights is not None:
            lines.append(f"{a}\t{b}\t{_fmt(g.weights[k])}")
        else:
            lines.append(f"{a}\t{b}")
    Path(path).write_text("".join(x + "\n" for x in lines), encoding="utf-8")


def align_gene_universe(graph: CoexpressionGraph, genes: Iterable[str]) -> CoexpressionGraph:
    """Subgraph induced on the genes that also appear in ``genes``."""
    universe = set(genes)
    keep = np.array([g in universe for g in graph.gene_ids], dtype=bool)
    new_ids = [g for g, k in zip(graph.gene_ids, keep) if k]
    remap = np.cumsum(keep) - 1
    if graph.n_edges:
        mask = keep[graph.edges[:, 0]] & keep[graph.edges[:, 1]]
        edges = remap[graph.edges[mask]]
        weights = None if graph.weights is None else graph.weights[mask]
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
        weights = None if graph.weights is None else np.zeros(0)
    return CoexpressionGraph(tuple(new_ids), edges, weights, tau=graph.tau, absolute=graph.absolute)


# -- folds --------------------------------------------------------------------

def make_folds(patient_ids: Sequence[str], n_folds: int = 5,
               ratios: tuple[float, float, float] = (0.72, 0.08, 0.20),
               seed: int = 0) -> FoldSpec:
    """Patient-level folds whose test splits partition the patients.

    Per fold the test split holds about ``ratios[2] * n`` patients (the
    partition fixes it to within one patient of ``n / n_folds``), validation
    ``round(ratios[1] * n)`` patients drawn from the rest, training the
    remainder.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three nonnegative fractions summing to 1")
    patients = sorted(set(patient_ids))
    n = len(patients)
    if n < n_folds:
        raise ValueError(f"{n} patients cannot fill {n_folds} folds")
    if abs(ratios[2] * n - n / n_folds) > 1.0:
        raise ValueError(f"test ratio {ratios[2]} is incompatible with {n_folds} disjoint test folds")
    rng = np.random.default_rng(seed)
    order = [patients[k] for k in rng.permutation(n)]
    test_chunks = np.array_split(np.arange(n), n_folds)
    assignments = []
    for f, chunk in enumerate(test_chunks):
        test = {order[k] for k in chunk}
        rest = [p for p in order if p not in test]
        n_val = _val_count(n, len(rest), ratios)
        if n_val > len(rest) - 1:
            raise ValueError("validation split leaves no training patients")
        pick = rng.permutation(len(rest))
        val = {rest[k] for k in pick[:n_val]}
        table = {}
        for p in patients:
            table[p] = "test" if p in test else ("val" if p in val else "train")
        assignments.append(table)
    return FoldSpec(n_folds, tuple(assignments), seed)


def _val_count(n: int, n_rest: int, ratios) -> int:
    """Validation size near ``ratios[1] * n`` keeping training near ``ratios[0] * n``."""
    target = ratios[1] * n
    options = sorted({math.floor(target), math.ceil(target)}, key=lambda v: abs(v - target))
    return min(options, key=lambda v: max(abs(v - target), abs(n_rest - v - ratios[0] * n)))


def save_folds(spec: FoldSpec, path):
    """Write a fold spec as ``key = value`` lines.

    Keys are ``seed``, ``n_folds`` and ``fold.<f>.<split>``; each split value
    is a comma-separated, sorted patient list.
    """
    lines = ["# patient-level cross-validation folds", f"seed = {spec.seed}",
             f"n_folds = {spec.n_folds}"]
    for f in range(spec.n_folds):
        for s in SPLITS:
            members = spec.patients(f, s)
            for p in members:
                if "," in p or p != p.strip() or not p:
                    raise ValueError(f"patient id {p!r} cannot be stored in a fold file")
            lines.append(f"fold.{f}.{s} = {','.join(members)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_folds(path) -> FoldSpec:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    cp.read_string("[folds]\n" + Path(path).read_text(encoding="utf-8"))
    sec = cp["folds"]
    try:
        seed = int(sec["seed"])
        n_folds = int(sec["n_folds"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from None
    assignments = []
    for f in range(n_folds):
        table = {}
        for s in SPLITS:
            raw = sec.get(f"fold.{f}.{s}", "").strip()
            for p in filter(None, (x.strip() for x in raw.split(","))):
                if p in table:
                    raise FormatError(f"{path}: patient {p!r} appears twice in fold {f}")
                table[p] = s
        assignments.append(table)
    return FoldSpec(n_folds, tuple(assignments), seed)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
