"""
Tetrahedral mesh exchange: legacy ASCII VTK unstructured grids and Medit
.mesh files. Coordinates are written with 17 significant digits so a mesh
read back is bit-identical to the one written.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from src.exceptions import MeshIntegrityError, ParseError
from src.tetrahedralization import TetMesh

logger = logging.getLogger(__name__)

VTK_TETRA = 10
_FLOAT_FMT = "%.17g"


def write_vtk(
    path: Union[str, Path],
    mesh: TetMesh,
    cell_data: Optional[Dict[str, np.ndarray]] = None,
    title: str = "meshseed tetrahedral mesh",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = mesh.num_cells
    with open(path, "w", encoding="ascii") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(title.replace("\n", " ")[:255] + "\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.num_vertices} double\n")
        np.savetxt(f, mesh.vertices, fmt=_FLOAT_FMT)
        f.write(f"CELLS {m} {5 * m}\n")
        np.savetxt(f, np.hstack([np.full((m, 1), 4, dtype=np.int64), mesh.tets]), fmt="%d")
        f.write(f"CELL_TYPES {m}\n")
        np.savetxt(f, np.full(m, VTK_TETRA, dtype=np.int64), fmt="%d")
        if cell_data:
            f.write(f"CELL_DATA {m}\n")
            for name, values in cell_data.items():
                values = np.asarray(values).reshape(-1)
                if len(values) != m:
                    raise MeshIntegrityError(f"cell field {name!r} has {len(values)} values for {m} cells")
                kind = "int" if np.issubdtype(values.dtype, np.integer) else "double"
                f.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n")
                np.savetxt(f, values, fmt="%d" if kind == "int" else _FLOAT_FMT)
    return path


class _Tokens:
    def __init__(self, path: Path):
        self.path = path
        text = path.read_text(encoding="ascii", errors="replace")
        self.lines = text.splitlines()
        self.offsets = np.cumsum([0] + [len(l) + 1 for l in self.lines]).tolist()
        self.i = 0

    def next_line(self) -> str:
        while self.i < len(self.lines):
            line = self.lines[self.i].strip()
            self.i += 1
            if line and not line.startswith("#"):
                return line
        raise ParseError(f"{self.path.name}: unexpected end of file", offset=self.offsets[-1])

    def numbers(self, count: int, dtype) -> np.ndarray:
        values = []
        start = self.i
        while len(values) < count:
            values.extend(self.next_line().split())
        try:
            return np.asarray(values[:count], dtype=dtype)
        except ValueError as e:
            raise ParseError(f"{self.path.name}: bad numeric value ({e})", offset=self.offsets[start]) from e

    def error(self, message: str) -> ParseError:
        return ParseError(f"{self.path.name}: {message}", offset=self.offsets[max(0, self.i - 1)])


def read_vtk(path: Union[str, Path]) -> Tuple[TetMesh, Dict[str, np.ndarray]]:
    path = Path(path)
    tok = _Tokens(path)
    if not tok.lines or not tok.lines[0].startswith("# vtk DataFile"):
        raise ParseError(f"{path.name}: missing VTK header", offset=0)
    tok.i = 2
    if tok.next_line().upper() != "ASCII":
        raise tok.error("only ASCII legacy VTK is supported")
    if tok.next_line().upper() != "DATASET UNSTRUCTURED_GRID":
        raise tok.error("expected DATASET UNSTRUCTURED_GRID")

    vertices = tets = None
    fields: Dict[str, np.ndarray] = {}
    num_cells = 0
    while tok.i < len(tok.lines):
        try:
            header = tok.next_line().split()
        except ParseError:
            break
        key = header[0].upper()
        if key == "POINTS":
            n = int(header[1])
            vertices = tok.numbers(3 * n, np.float64).reshape(n, 3)
        elif key == "CELLS":
            num_cells = int(header[1])
            raw = tok.numbers(int(header[2]), np.int64)
            if np.any(raw[::5] != 4) or raw.size != 5 * num_cells:
                raise tok.error("only tetrahedral cells are supported")
            tets = raw.reshape(num_cells, 5)[:, 1:]
        elif key == "CELL_TYPES":
            types = tok.numbers(int(header[1]), np.int64)
            if np.any(types != VTK_TETRA):
                raise tok.error("cell types other than VTK_TETRA found")
        elif key == "CELL_DATA":
            continue
        elif key == "SCALARS":
            name = header[1]
            dtype = np.int64 if header[2] in ("int", "long") else np.float64
            lookup = tok.next_line()
            if not lookup.upper().startswith("LOOKUP_TABLE"):
                raise tok.error("SCALARS without LOOKUP_TABLE")
            fields[name] = tok.numbers(num_cells, dtype)
        else:
            raise tok.error(f"unsupported section {header[0]!r}")
    if vertices is None or tets is None:
        raise tok.error("mesh needs both POINTS and CELLS sections")
    return TetMesh(vertices, tets), fields


def write_medit(path: Union[str, Path], mesh: TetMesh, refs: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    refs = np.zeros(mesh.num_cells, dtype=np.int64) if refs is None else np.asarray(refs, dtype=np.int64)
    with open(path, "w", encoding="ascii") as f:
        f.write("MeshVersionFormatted 2\n\nDimension 3\n\n")
        f.write(f"Vertices\n{mesh.num_vertices}\n")
        np.savetxt(f, np.hstack([mesh.vertices, np.zeros((mesh.num_vertices, 1))]),
                   fmt=[_FLOAT_FMT, _FLOAT_FMT, _FLOAT_FMT, "%d"])
        f.write(f"\nTetrahedra\n{mesh.num_cells}\n")
        # Medit indices are 1-based
        np.savetxt(f, np.hstack([mesh.tets + 1, refs[:, None]]), fmt="%d")
        f.write("\nEnd\n")
    return path


def read_medit(path: Union[str, Path]) -> TetMesh:
    path = Path(path)
    tok = _Tokens(path)
    vertices = tets = None
    while tok.i < len(tok.lines):
        try:
            line = tok.next_line()
        except ParseError:
            break
        key = line.split()[0]
        if key == "MeshVersionFormatted":
            continue
        if key == "Dimension":
            dim = line.split()[1] if len(line.split()) > 1 else tok.next_line()
            if int(dim) != 3:
                raise tok.error(f"unsupported dimension {dim}")
        elif key == "Vertices":
            n = int(tok.next_line())
            vertices = tok.numbers(4 * n, np.float64).reshape(n, 4)[:, :3]
        elif key == "Tetrahedra":
            m = int(tok.next_line())
            tets = tok.numbers(5 * m, np.int64).reshape(m, 5)[:, :4] - 1
        elif key == "End":
            break
        elif key in ("Triangles", "Edges", "Corners", "Ridges", "RequiredVertices"):
            n = int(tok.next_line())
            width = {"Triangles": 4, "Edges": 3}.get(key, 1)
            tok.numbers(width * n, np.float64)
        else:
            raise tok.error(f"unsupported keyword {key!r}")
    if vertices is None or tets is None:
        raise tok.error("mesh needs both Vertices and Tetrahedra")
    return TetMesh(vertices, tets)
