"""File formats: configs, CSV tables, binary snapshots, manifests."""

import json

import numpy as np
import pytest

from compflow.geometry import branching_config
from compflow.io import (RunManifest, config_hash, load_basis, load_config,
                         load_snapshot, read_csv, save_basis, save_config,
                         save_snapshot, write_convergence_log, write_csv,
                         write_mesh_csv, write_port_profile)
from compflow.rom import ReducedBasis


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = branching_config(Re=120.0)
        p = tmp_path / "net.json"
        save_config(cfg, p)
        again = load_config(p)
        assert again.to_dict() == cfg.to_dict()

    def test_malformed_reports_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"components": [,]}')
        with pytest.raises(ValueError, match="line 1"):
            load_config(p)

    def test_hash_stable(self):
        cfg = branching_config()
        h1 = config_hash(cfg)
        h2 = config_hash(branching_config())
        assert h1 == h2 and len(h1) == 16
        assert config_hash(branching_config(Re=101.0)) != h1

    def test_hash_key_order_invariant(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


class TestCsv:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal(5)
        p = tmp_path / "t.csv"
        write_csv(p, ["i", "v"], [(i, v) for i, v in enumerate(vals)])
        header, rows = read_csv(p)
        assert header == ["i", "v"]
        back = np.array([float(r[1]) for r in rows])
        assert np.array_equal(back, vals)  # repr() roundtrips exactly

    def test_crlf_line_endings(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["a"], [(1,), (2,)])
        raw = p.read_bytes()
        assert raw.count(b"\r\n") == 3
        assert b"\n" not in raw.replace(b"\r\n", b"")

    def test_deterministic_bytes(self, tmp_path):
        rows = [(i, float(i) / 3.0) for i in range(4)]
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(p1, ["i", "x"], rows)
        write_csv(p2, ["i", "x"], rows)
        assert p1.read_bytes() == p2.read_bytes()

    def test_convergence_log(self, tmp_path):
        p = tmp_path / "conv.csv"
        write_convergence_log(p, [(0, 1.0, 0.5, 0.1), (1, 0.1, 0.05, 0.01)])
        header, rows = read_csv(p)
        assert header == ["it", "objective", "jump", "increment"]
        assert len(rows) == 2

    def test_mesh_csv(self, tmp_path, channel_space):
        paths = write_mesh_csv(channel_space, tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["boundary.csv", "nodes.csv", "triangles.csv"]
        header, rows = read_csv(tmp_path / "nodes.csv")
        assert header == ["node", "x", "y"]
        assert len(rows) == channel_space.n_nodes
        header, rows = read_csv(tmp_path / "triangles.csv")
        assert len(rows) == channel_space.mesh.n_elements
        header, rows = read_csv(tmp_path / "boundary.csv")
        assert header == ["group", "end0", "mid", "end1"]

    def test_port_profile(self, tmp_path):
        xi = np.linspace(0, 1, 5)
        p = tmp_path / "port.csv"
        write_port_profile(p, xi, {"g_x": xi**2, "g_y": -xi})
        header, rows = read_csv(p)
        assert header == ["xi", "g_x", "g_y"]
        assert float(rows[-1][1]) == 1.0


class TestSnapshots:
    def test_roundtrip(self, tmp_path, rng):
        arr = rng.standard_normal((7, 3))
        p = tmp_path / "w.bin"
        save_snapshot(p, arr, {"kind": "state", "Re": 100.0})
        back, meta = load_snapshot(p)
        assert np.array_equal(back, arr)
        assert meta["kind"] == "state" and meta["Re"] == 100.0
        assert meta["shape"] == [7, 3]

    def test_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a snapshot"):
            load_snapshot(p)

    def test_rejects_future_version(self, tmp_path, rng):
        p = tmp_path / "w.bin"
        save_snapshot(p, rng.standard_normal(4), {})
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_snapshot(p)


class TestBases:
    def test_roundtrip_with_sidecar(self, tmp_path, rng):
        V = np.linalg.qr(rng.standard_normal((12, 4)))[0]
        basis = ReducedBasis(V=V, tag="ports", eigvals=np.array([4.0, 2.0, 1.0, 0.5]),
                             provenance={"n_snapshots": 9, "rank": 6})
        p = tmp_path / "ports.basis"
        save_basis(p, basis, norm="h1-port", extra={"m0": 4})
        assert (tmp_path / "ports.basis.json").exists()
        back, norm = load_basis(p)
        assert norm == "h1-port"
        assert np.array_equal(back.V, V)
        assert back.tag == "ports"
        assert np.allclose(back.eigvals, basis.eigvals)
        assert back.provenance["n_snapshots"] == 9
        side = json.loads((tmp_path / "ports.basis.json").read_text())
        assert side["dim"] == 4 and side["m0"] == 4


class TestManifest:
    def test_save_load(self, tmp_path):
        m = RunManifest(command="solve-dd", config_hash="abc", seed=7)
        m.record("solve")
        m.add_output(tmp_path / "x.csv")
        p = m.save(tmp_path)
        assert p.name == "manifest.json"
        d = RunManifest.load(tmp_path)
        assert d["command"] == "solve-dd"
        assert d["seed"] == 7
        assert "solve" in d["timings"]
        assert "numpy" in d["versions"] and "python" in d["versions"]
        assert d["outputs"][0].endswith("x.csv")
