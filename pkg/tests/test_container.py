import numpy as np
import pytest

from voxsynth.container import (
    ContainerError,
    dump_container,
    load_container,
    read_container,
    write_container,
)


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    sections = {
        "codec/w": rng.standard_normal((3, 4, 5)),
        "codebook/entries": rng.standard_normal((16, 8)),
        "rcodes/training": rng.integers(0, 64, (2, 4, 4), dtype=np.uint32),
        "meta/scalars": np.array([1.5, -2.25]),
    }
    path = tmp_path / "m.vxs"
    write_container(path, sections)
    back = read_container(path)
    assert set(back) == set(sections)
    for name in sections:
        assert back[name].dtype == sections[name].dtype
        assert np.array_equal(back[name], sections[name])


def test_magic_and_version_checked():
    blob = dump_container({"meta/x": np.zeros(2)})
    with pytest.raises(ContainerError, match="magic"):
        load_container(b"XXXX" + blob[4:])


def test_crc_detects_corruption():
    blob = bytearray(dump_container({"meta/x": np.arange(10.0)}))
    blob[20] ^= 0xFF
    with pytest.raises(ContainerError, match="checksum"):
        load_container(bytes(blob))


def test_unknown_family_rejected_with_name():
    with pytest.raises(ContainerError, match="mystery"):
        dump_container({"mystery/x": np.zeros(1)})
    # also on load: craft a blob with a hostile name by bypassing dump checks
    import struct
    import zlib

    name = b"gremlin/x"
    body = struct.pack("<H", len(name)) + name + struct.pack("<BB", 0, 1)
    body += struct.pack("<I", 2) + np.zeros(2).tobytes()
    payload = struct.pack("<H", 1) + body
    blob = b"VXS1" + payload + struct.pack("<I", zlib.crc32(payload))
    with pytest.raises(ContainerError, match="gremlin"):
        load_container(blob)


def test_unsupported_dtype_rejected():
    with pytest.raises(ContainerError, match="dtype"):
        dump_container({"meta/x": np.zeros(3, dtype=np.float32)})


def test_duplicate_section_rejected():
    import struct
    import zlib

    name = b"meta/x"
    sec = struct.pack("<H", len(name)) + name + struct.pack("<BB", 0, 1)
    sec += struct.pack("<I", 1) + np.zeros(1).tobytes()
    payload = struct.pack("<H", 1) + sec + sec
    blob = b"VXS1" + payload + struct.pack("<I", zlib.crc32(payload))
    with pytest.raises(ContainerError, match="duplicate"):
        load_container(blob)


def test_dump_is_deterministic():
    sections = {"meta/a": np.arange(5.0), "glm/P": np.ones((2, 3))}
    assert dump_container(sections) == dump_container(sections)
