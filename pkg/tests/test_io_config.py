import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from puedgeformer.config import ConfigError, dump_config, load_config, parse_config
from puedgeformer.io import FormatError, format_xyz, read_mesh, read_points, read_ply, read_xyz, write_xyz
from puedgeformer.network import NetworkConfig
from puedgeformer.training import TrainConfig

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


# -- xyz ----------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=finite))
def test_xyz_round_trip_is_exact(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("xyz") / "p.xyz"
    write_xyz(path, pts)
    back = read_xyz(path).points
    # byte equality also covers signed zeros and subnormals
    assert back.tobytes() == pts.tobytes()


def test_xyz_extreme_values(tmp_path):
    pts = np.array([[5e-324, -0.0, 1.7976931348623157e308], [0.1, 1 / 3, -2.5e-300]])
    write_xyz(tmp_path / "e.xyz", pts)
    assert read_xyz(tmp_path / "e.xyz").points.tobytes() == pts.tobytes()


def test_xyz_skips_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# header\n\n1 2 3\n   \n# mid\n4 5 6\n")
    assert read_xyz(p).points.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_xyz_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 2\n")
    with pytest.raises(FormatError, match=r"bad\.xyz:2: expected 3 values, found 2") as info:
        read_xyz(p)
    assert info.value.line == 2
    p.write_text("0 0 zero\n")
    with pytest.raises(FormatError, match=":1: non-numeric"):
        read_xyz(p)
    p.write_text("# nothing\n")
    with pytest.raises(FormatError, match="no points"):
        read_xyz(p)
    p.write_text("0 0 nan\n")
    with pytest.raises(FormatError, match="non-finite"):
        read_xyz(p)


def test_format_xyz_text():
    assert format_xyz(np.array([[1.0, -0.5, 0.1]])) == "1.0 -0.5 0.1\n"


# -- ply ------------------------------------------------------------------------------

PLY = """ply
format ascii 1.0
comment a unit square
element vertex 4
property float x
property float y
property float z
property float nx
element face 1
property list uchar int vertex_indices
end_header
0 0 0 9
1 0 0 9
1 1 0 9
0 1 0 9
4 0 1 2 3
"""


def test_ply_reads_vertices_and_fan_triangulates(tmp_path):
    p = tmp_path / "sq.ply"
    p.write_text(PLY)
    verts, faces = read_ply(p)
    assert verts.tolist() == [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    assert faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    assert read_points(p).points.shape == (4, 3)
    mesh = read_mesh(p)
    assert mesh.distance(np.array([[0.5, 0.5, 2.0]]))[0] == 2.0


def test_ply_errors(tmp_path):
    p = tmp_path / "x.ply"
    p.write_text("nope\n")
    with pytest.raises(FormatError, match="ply"):
        read_ply(p)
    p.write_text(PLY.replace("ascii", "binary_little_endian"))
    with pytest.raises(FormatError, match="ASCII"):
        read_ply(p)
    p.write_text(PLY.replace("end_header\n", ""))
    with pytest.raises(FormatError):
        read_ply(p)
    p.write_text(PLY.replace("4 0 1 2 3", "2 0 1"))
    with pytest.raises(FormatError, match="at least 3"):
        read_ply(p)
    p.write_text(PLY.replace("element face 1", "element face 0").replace("4 0 1 2 3\n", ""))
    with pytest.raises(FormatError, match="no faces"):
        read_mesh(p)
    p.write_text(PLY.replace("1 1 0 9", "1 one 0 9"))
    with pytest.raises(FormatError, match=":14: malformed vertex"):
        read_ply(p)


# -- config -------------------------------------------------------------------------


def test_parse_config_values_and_defaults():
    cfg = parse_config("epochs = 3\nlr = 0.01  # faster\nsurfaces = torus,sphere\nk = 8\nattention_scaling = off\n")
    assert cfg.epochs == 3 and cfg.lr == 0.01
    assert cfg.surfaces == ("torus", "sphere")
    assert cfg.network.k == 8 and not cfg.network.attention_scaling
    assert cfg.network.init_seed == cfg.seed


def test_config_dump_round_trip(tmp_path):
    cfg = TrainConfig(epochs=7, lr=3e-4, seed=11, network=NetworkConfig(k=8, extension_dims=(64, 16), init_seed=2))
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    (tmp_path / "c.cfg").write_text(text)
    assert load_config(tmp_path / "c.cfg") == cfg
    assert dump_config(parse_config(text)) == text


def test_config_errors_name_the_problem(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("learning_rte = 0.1\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:1: unknown config key 'learning_rte'"):
        load_config(p)
    with pytest.raises(ConfigError, match="'epochs'"):
        parse_config("epochs = many")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("epochs 3")
    with pytest.raises(ConfigError, match="attention_scaling"):
        parse_config("attention_scaling = maybe")
    with pytest.raises(ConfigError, match="divisible"):
        parse_config("channels = 126")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")
