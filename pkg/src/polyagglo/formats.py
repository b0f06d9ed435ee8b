"""File formats: legacy ASCII VTK meshes, graph caches, checkpoints and CSV tables.

Every writer goes through a temporary file that is renamed on success, so a
failed write never leaves a partial file behind.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph
from .mesh import (HEXAHEDRON, POLYGON, PYRAMID, TETRAHEDRON, AgglomeratedMesh, Cell,
                   Mesh, boundary_loops)

VTK_TRIANGLE, VTK_QUAD, VTK_POLYGON = 5, 9, 7
VTK_TETRA, VTK_HEXAHEDRON, VTK_PYRAMID, VTK_POLYHEDRON = 10, 12, 14, 42
_SOLID_TYPES = {TETRAHEDRON: VTK_TETRA, HEXAHEDRON: VTK_HEXAHEDRON, PYRAMID: VTK_PYRAMID}
_TYPE_SOLIDS = {v: k for k, v in _SOLID_TYPES.items()}
SUPPORTED_TYPES = (VTK_TRIANGLE, VTK_QUAD, VTK_POLYGON, VTK_TETRA, VTK_HEXAHEDRON, VTK_PYRAMID, VTK_POLYHEDRON)

TAG_ARRAY, LABEL_ARRAY, HOLE_ARRAY = "physical_tag", "label", "hole"


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line


@contextlib.contextmanager
def atomic_write(path, mode: str = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        kwargs = {"newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------
# VTK

def _fmt(x: float) -> str:
    return repr(float(x))


def _cell_record(cell: Cell) -> tuple[int, list[int]]:
    if cell.kind == POLYGON:
        n = len(cell.vertex_ids)
        code = VTK_TRIANGLE if n == 3 else VTK_QUAD if n == 4 else VTK_POLYGON
        return code, [n, *cell.vertex_ids]
    if cell.kind in _SOLID_TYPES:
        return _SOLID_TYPES[cell.kind], [len(cell.vertex_ids), *cell.vertex_ids]
    stream = [len(cell.face_loops)]
    for loop in cell.face_loops:
        stream += [len(loop), *loop]
    return VTK_POLYHEDRON, [len(stream), *stream]


def vtk_text(mesh: Mesh, cell_data: dict | None = None, title: str = "polyagglo mesh") -> str:
    out = io.StringIO()
    out.write("# vtk DataFile Version 3.0\n")
    out.write(title.replace("\n", " ")[:255] + "\n")
    out.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    pts = mesh.vertices
    out.write(f"POINTS {len(pts)} double\n")
    for p in pts:
        coords = list(p) + [0.0] * (3 - len(p))
        out.write(" ".join(_fmt(c) for c in coords) + "\n")
    records = [_cell_record(c) for c in mesh.cells]
    size = sum(len(r) for _, r in records)
    out.write(f"CELLS {len(records)} {size}\n")
    for _, rec in records:
        out.write(" ".join(map(str, rec)) + "\n")
    out.write(f"CELL_TYPES {len(records)}\n")
    for code, _ in records:
        out.write(f"{code}\n")
    arrays = {}
    if mesh.physical_tags is not None:
        arrays[TAG_ARRAY] = ("double", mesh.physical_tags)
    for name, values in (cell_data or {}).items():
        values = np.asarray(values)
        if len(values) != mesh.n_cells:
            raise ValueError(f"cell data {name!r} has {len(values)} entries for {mesh.n_cells} cells")
        arrays[name] = ("int" if values.dtype.kind in "iub" else "double", values)
    if arrays:
        out.write(f"CELL_DATA {mesh.n_cells}\n")
        for name, (typ, values) in arrays.items():
            out.write(f"SCALARS {name} {typ} 1\nLOOKUP_TABLE default\n")
            fmt = str if typ == "int" else _fmt
            for v in values:
                out.write(fmt(int(v) if typ == "int" else v) + "\n")
    return out.getvalue()


def write_mesh(mesh: Mesh, path, labels=None, cell_data: dict | None = None) -> None:
    """Write ``mesh`` as legacy ASCII VTK; ``labels`` adds an integer cell array."""
    data = dict(cell_data or {})
    if labels is not None:
        data[LABEL_ARRAY] = np.asarray(labels, dtype=np.int64)
    text = vtk_text(mesh, data)
    with atomic_write(path) as fh:
        fh.write(text)


def agglomerated_to_vtk(agg: AgglomeratedMesh) -> tuple[Mesh, dict]:
    """One cell per element (3D polyhedra), or one polygon per boundary loop in
    2D with a ``hole`` flag for inner loops."""
    if agg.dim == 3:
        return agg.to_mesh(), {LABEL_ARRAY: np.arange(agg.n_elements)}
    cells, labels, holes, tags = [], [], [], []
    for k, el in enumerate(agg.elements):
        for loop, is_hole in boundary_loops(agg.vertices, el.boundary_faces):
            cells.append(Cell.polygon(loop))
            labels.append(k)
            holes.append(int(is_hole))
            if el.tags is not None:
                tags.append(float(np.mean(el.tags)))
    mesh = Mesh(agg.vertices, cells, tags if tags else None)
    return mesh, {LABEL_ARRAY: np.array(labels), HOLE_ARRAY: np.array(holes)}


def write_agglomerated(agg: AgglomeratedMesh, path) -> None:
    mesh, data = agglomerated_to_vtk(agg)
    with atomic_write(path) as fh:
        fh.write(vtk_text(mesh, data, "polyagglo agglomerated mesh"))


class _Tokens:
    def __init__(self, text: str, path=None):
        self.items = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            self.items.extend((tok, lineno) for tok in line.split())
        self.pos = 0
        self.path = path
        self.last_line = text.count("\n") + 1

    def error(self, msg: str, line: int | None = None) -> FormatError:
        if line is None:
            line = self.items[self.pos][1] if self.pos < len(self.items) else self.last_line
        return FormatError(msg, line, self.path)

    def next(self, what: str = "token") -> tuple[str, int]:
        if self.pos >= len(self.items):
            raise self.error(f"unexpected end of file while reading {what}")
        tok = self.items[self.pos]
        self.pos += 1
        return tok

    def int(self, what: str) -> int:
        tok, line = self.next(what)
        try:
            return int(tok)
        except ValueError:
            raise self.error(f"expected integer {what}, got {tok!r}", line) from None

    def float(self, what: str) -> float:
        tok, line = self.next(what)
        try:
            return float(tok)
        except ValueError:
            raise self.error(f"expected number {what}, got {tok!r}", line) from None

    def expect(self, word: str) -> int:
        tok, line = self.next(word)
        if tok.upper() != word:
            raise self.error(f"expected {word}, got {tok!r}", line)
        return line

    def done(self) -> bool:
        return self.pos >= len(self.items)


def read_vtk(path) -> tuple[Mesh, dict]:
    """Parse a legacy ASCII unstructured grid; returns the mesh and extra cell arrays."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read file: {exc}", path=path) from exc
    lines = text.splitlines()
    if len(lines) < 4 or not lines[0].startswith("# vtk DataFile"):
        raise FormatError("missing '# vtk DataFile' header", 1, path)
    if lines[2].strip().upper() != "ASCII":
        raise FormatError("only ASCII files are supported", 3, path)
    toks = _Tokens("\n".join(["", "", ""] + lines[3:]), path)
    toks.expect("DATASET")
    tok, line = toks.next("dataset type")
    if tok.upper() != "UNSTRUCTURED_GRID":
        raise toks.error(f"unsupported dataset {tok!r}", line)
    toks.expect("POINTS")
    n_pts = toks.int("point count")
    toks.next("point type")
    pts = np.array([toks.float("coordinate") for _ in range(3 * n_pts)]).reshape(n_pts, 3)

    toks.expect("CELLS")
    n_cells = toks.int("cell count")
    size = toks.int("cell list size")
    start = toks.pos
    raw = []
    for _ in range(n_cells):
        cline = toks.items[toks.pos][1] if not toks.done() else toks.last_line
        n = toks.int("cell size")
        raw.append(([toks.int("vertex index") for _ in range(n)], cline))
    if toks.pos - start != size:
        raise toks.error(f"CELLS size {size} does not match {toks.pos - start} values read")
    toks.expect("CELL_TYPES")
    if toks.int("cell type count") != n_cells:
        raise toks.error("CELL_TYPES count differs from CELLS count")
    types = [(toks.int("cell type"), toks.items[toks.pos - 1][1]) for _ in range(n_cells)]

    cells = []
    solid = False
    for (rec, cline), (code, tline) in zip(raw, types):
        if code not in SUPPORTED_TYPES:
            raise FormatError(f"unsupported cell type {code}", tline, path)
        if any(v < 0 or v >= n_pts for v in (rec if code != VTK_POLYHEDRON else [])):
            raise FormatError("vertex index out of range", cline, path)
        if code in (VTK_TRIANGLE, VTK_QUAD, VTK_POLYGON):
            cells.append(Cell.polygon(rec))
        elif code in _TYPE_SOLIDS:
            cells.append(Cell.solid(_TYPE_SOLIDS[code], rec))
            solid = True
        else:
            cells.append(Cell.polyhedron(_parse_face_stream(rec, n_pts, cline, path)))
            solid = True

    arrays = {}
    while not toks.done():
        tok, line = toks.next("section")
        word = tok.upper()
        if word == "CELL_DATA":
            if toks.int("cell data count") != n_cells:
                raise toks.error("CELL_DATA count differs from cell count", line)
        elif word == "SCALARS":
            name, _ = toks.next("array name")
            typ, _ = toks.next("array type")
            nxt, _ = toks.items[toks.pos] if not toks.done() else ("", 0)
            if nxt.isdigit():
                if toks.int("component count") != 1:
                    raise toks.error("only single-component arrays are supported", line)
            toks.expect("LOOKUP_TABLE")
            toks.next("lookup table name")
            if typ.lower() in ("int", "long", "short", "char", "unsigned_int", "unsigned_char"):
                arrays[name] = np.array([toks.int(name) for _ in range(n_cells)], dtype=np.int64)
            else:
                arrays[name] = np.array([toks.float(name) for _ in range(n_cells)])
        elif word in ("POINT_DATA", "FIELD"):
            raise toks.error(f"unsupported section {tok}", line)
        else:
            raise toks.error(f"unexpected token {tok!r}", line)

    dim = 3 if solid or np.any(pts[:, 2] != 0) else 2
    if solid and any(c.kind == POLYGON for c in cells):
        raise FormatError("mixed 2D and 3D cells", None, path)
    tags = arrays.pop(TAG_ARRAY, None)
    mesh = Mesh(pts[:, :dim], cells, tags)
    return mesh, arrays


def _parse_face_stream(rec, n_pts, line, path):
    try:
        n_faces = rec[0]
        faces, k = [], 1
        for _ in range(n_faces):
            m = rec[k]
            faces.append(rec[k + 1:k + 1 + m])
            if len(faces[-1]) != m:
                raise IndexError
            k += 1 + m
        if k != len(rec):
            raise IndexError
    except IndexError:
        raise FormatError("malformed polyhedron face stream", line, path) from None
    if any(v < 0 or v >= n_pts for f in faces for v in f):
        raise FormatError("vertex index out of range", line, path)
    return faces


def read_mesh(path) -> Mesh:
    return read_vtk(path)[0]


# ----------------------------------------------------------------------
# graph cache

GRAPH_MAGIC = b"PAGGRAPH"
GRAPH_VERSION = 1


def write_graph_cache(path, adjacency, centroids, measures, tags=None) -> None:
    a = sp.csr_matrix(adjacency, dtype=float)
    a.sort_indices()
    header = {"version": GRAPH_VERSION, "n": a.shape[0], "nnz": int(a.nnz),
              "dim": int(np.shape(centroids)[1]), "tags": tags is not None}
    blob = json.dumps(header, sort_keys=True).encode()
    with atomic_write(path, "wb") as fh:
        fh.write(GRAPH_MAGIC + struct.pack("<I", len(blob)) + blob)
        for arr, dt in ((a.indptr, "<i8"), (a.indices, "<i8"), (a.data, "<f8"),
                        (centroids, "<f8"), (measures, "<f8")) + (((tags, "<f8"),) if tags is not None else ()):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_graph_cache(path) -> Graph:
    raw = Path(path).read_bytes()
    if raw[:8] != GRAPH_MAGIC:
        raise FormatError("not a graph cache (bad magic)", path=path)
    (hlen,) = struct.unpack("<I", raw[8:12])
    h = json.loads(raw[12:12 + hlen])
    if h.get("version") != GRAPH_VERSION:
        raise FormatError(f"unsupported graph cache version {h.get('version')}", path=path)
    n, nnz, dim = h["n"], h["nnz"], h["dim"]
    off = 12 + hlen

    def take(count, dt):
        nonlocal off
        size = count * 8
        if off + size > len(raw):
            raise FormatError("truncated graph cache", path=path)
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).copy()
        off += size
        return arr

    indptr, indices, data = take(n + 1, "<i8"), take(nnz, "<i8"), take(nnz, "<f8")
    cen = take(n * dim, "<f8").reshape(n, dim)
    meas = take(n, "<f8")
    tags = take(n, "<f8") if h["tags"] else None
    return Graph(sp.csr_matrix((data, indices, indptr), shape=(n, n)), meas, cen, tags)


# ----------------------------------------------------------------------
# dataset index

INDEX_COLUMNS = ("kind", "seed", "n_cells", "mesh", "graph")


def write_index(records, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for r in records:
            w.writerow([r.kind, r.seed, r.n_cells, r.mesh_path, r.graph_path])


def read_index(path):
    from .generate import IndexRecord
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != INDEX_COLUMNS:
        raise FormatError(f"bad index header, expected {INDEX_COLUMNS}", 1, path)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(INDEX_COLUMNS):
            raise FormatError("wrong number of columns", lineno, path)
        try:
            out.append(IndexRecord(row[0], int(row[1]), int(row[2]), row[3], row[4]))
        except ValueError as exc:
            raise FormatError(str(exc), lineno, path) from None
    return out


def load_dataset(directory) -> list[Graph]:
    """Graphs of a dataset directory, in index order."""
    d = Path(directory)
    return [read_graph_cache(d / r.graph_path) for r in read_index(d / "index.tsv")]


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PAGGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(net, path) -> None:
    """Magic, version, JSON header (descriptor, seed, layer shapes), float64 LE blobs."""
    params = net.named_parameters()
    for name, p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError(f"parameter {name} is not finite")
    header = {"descriptor": net.descriptor(), "seed": int(getattr(net, "seed", 0)),
              "layers": [[name, list(p.data.shape)] for name, p in params]}
    blob = json.dumps(header, sort_keys=True).encode()
    with atomic_write(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, net=None):
    """Load into ``net`` (validated against its descriptor) or build a new one."""
    from .gnn import build_net
    from .rl import build_rl_net
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", path=path)
    if len(raw) < 16:
        raise FormatError("truncated checkpoint", path=path)
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path)
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError:
        raise FormatError("corrupted checkpoint header", path=path) from None
    desc = header["descriptor"]
    if net is None:
        builder = build_rl_net if desc["arch"].startswith("rl-") else build_net
        net = builder(desc, seed=header.get("seed", 0))
    elif net.descriptor() != desc:
        raise FormatError(f"architecture mismatch: checkpoint {desc} vs network {net.descriptor()}", path=path)
    params = net.named_parameters()
    expected = [[name, list(p.data.shape)] for name, p in params]
    if expected != header["layers"]:
        raise FormatError(f"layer layout mismatch: checkpoint {header['layers']} vs network {expected}", path=path)
    off = 16 + hlen
    for _, p in params:
        count = int(np.prod(p.data.shape))
        if off + 8 * count > len(raw):
            raise FormatError("truncated checkpoint", path=path)
        p.data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(p.data.shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise FormatError("trailing bytes in checkpoint", path=path)
    return net


# ----------------------------------------------------------------------
# CSV

def _g9(x) -> str:
    return f"{float(x):.9g}"


def write_table(path, header, rows) -> None:
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to write an empty table")
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else _g9(v) for v in row])


def write_metrics_csv(report, path) -> None:
    names = list(report.columns)
    rows = [[k] + [report.columns[c][k] for c in names] for k in range(report.n_elements)]
    write_table(path, ["element"] + names, rows)


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {name: data[:, k] for k, name in enumerate(header) if name != "element"}


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss")
REWARD_COLUMNS = ("episode", "return", "final_nc")


def write_history_csv(history, path, columns=HISTORY_COLUMNS) -> None:
    write_table(path, list(columns), [[int(r[0]), *r[1:]] for r in history])


def read_history_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), *map(float, r[1:])) for r in rows[1:]]
