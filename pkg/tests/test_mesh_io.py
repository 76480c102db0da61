import numpy as np
import pytest

from src.exceptions import MeshIntegrityError, ParseError
from src.mesh_io import read_medit, read_vtk, write_medit, write_vtk
from src.tetrahedralization import tetrahedralize


@pytest.fixture
def random_mesh(rng):
    return tetrahedralize(rng.uniform(-20.0, 20.0, size=(40, 3)), method="qhull")


def test_vtk_round_trip_is_exact(tmp_path, random_mesh):
    values = np.linspace(0.0, 1.0, random_mesh.num_cells) / 3.0
    refs = np.arange(random_mesh.num_cells)
    path = write_vtk(tmp_path / "mesh.vtk", random_mesh, {"mu": values, "ref": refs})
    mesh, fields = read_vtk(path)
    assert np.array_equal(mesh.vertices, random_mesh.vertices)
    assert np.array_equal(mesh.tets, random_mesh.tets)
    assert np.array_equal(fields["mu"], values)
    assert fields["ref"].dtype == np.int64
    assert fields["ref"].tolist() == refs.tolist()
    mesh.validate()


def test_vtk_header_layout(tmp_path, unit_tet_mesh):
    lines = write_vtk(tmp_path / "tet.vtk", unit_tet_mesh, title="unit\ntet").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[1] == "unit tet"
    assert lines[2:4] == ["ASCII", "DATASET UNSTRUCTURED_GRID"]
    assert "CELLS 1 5" in lines
    assert lines[-1] == "10"


def test_vtk_rejects_bad_cell_data(tmp_path, unit_tet_mesh):
    with pytest.raises(MeshIntegrityError):
        write_vtk(tmp_path / "tet.vtk", unit_tet_mesh, {"mu": [1.0, 2.0]})


def test_vtk_parse_errors(tmp_path, unit_tet_mesh):
    path = write_vtk(tmp_path / "tet.vtk", unit_tet_mesh)
    text = path.read_text()

    path.write_text("not a vtk file\n")
    with pytest.raises(ParseError):
        read_vtk(path)

    path.write_text(text.replace("ASCII", "BINARY"))
    with pytest.raises(ParseError):
        read_vtk(path)

    path.write_text(text.replace("CELL_TYPES 1\n10", "CELL_TYPES 1\n12"))
    with pytest.raises(ParseError):
        read_vtk(path)

    truncated = text[: text.index("CELLS")]
    path.write_text(truncated)
    with pytest.raises(ParseError):
        read_vtk(path)

    path.write_text(text.replace("0 0 1", "0 zero 1"))
    with pytest.raises(ParseError):
        read_vtk(path)


def test_medit_round_trip(tmp_path, random_mesh):
    path = write_medit(tmp_path / "mesh.mesh", random_mesh)
    text = path.read_text()
    assert text.startswith("MeshVersionFormatted 2")
    assert text.rstrip().endswith("End")
    mesh = read_medit(path)
    assert np.array_equal(mesh.vertices, random_mesh.vertices)
    assert np.array_equal(mesh.tets, random_mesh.tets)


def test_medit_indices_are_one_based(tmp_path, unit_tet_mesh):
    lines = write_medit(tmp_path / "tet.mesh", unit_tet_mesh).read_text().splitlines()
    row = lines[lines.index("Tetrahedra") + 2]
    assert row.split() == ["1", "2", "3", "4", "0"]


def test_medit_parse_errors(tmp_path, unit_tet_mesh):
    path = write_medit(tmp_path / "tet.mesh", unit_tet_mesh)
    text = path.read_text()
    path.write_text(text.replace("Dimension 3", "Dimension 2"))
    with pytest.raises(ParseError):
        read_medit(path)
    path.write_text(text.replace("Tetrahedra", "Hexahedra"))
    with pytest.raises(ParseError):
        read_medit(path)
    path.write_text(text[: text.index("Tetrahedra")])
    with pytest.raises(ParseError):
        read_medit(path)
