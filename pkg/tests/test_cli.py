import json
import subprocess
import sys
from importlib import resources

from pgrid.cli import main

FOUR_NODE = str(resources.files("pgrid.data").joinpath("paper-sec3.json"))


def admin_table(*args, port, nodes=4):
    """Start the admin, read its domain table until every node is listed, stop it."""
    proc = subprocess.Popen([sys.executable, "-m", "pgrid.cli", "admin", "--listen", f"127.0.0.1:{port}", *args],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        lines, listed = [], 0
        while listed < nodes:
            line = proc.stdout.readline()
            if not line:
                break
            lines.append(line.rstrip("\n"))
            listed += len(line.split("\t")[1].split())
        return lines
    finally:
        proc.terminate()
        proc.wait(timeout=5)


class TestSim:
    def test_bundled_scenario(self, tmp_path, capsys):
        out = tmp_path / "m.json"
        assert main(["sim", "--scenario", "paper-sec3", "--metrics", str(out)]) == 0
        m = json.loads(out.read_text())
        external = [x for x in m["migration_log"] if x["tier"] == "EXTERNAL"]
        assert len(external) == 1 and m["migrations"]["succeeded"] == 1

    def test_same_seed_identical_files(self, tmp_path):
        paths = []
        for i in range(2):
            m, t = tmp_path / f"m{i}.json", tmp_path / f"t{i}.txt"
            assert main(["sim", "--scenario", FOUR_NODE, "--seed", "7", "--metrics", str(m), "--trace", str(t)]) == 0
            paths.append((m.read_bytes(), t.read_bytes()))
        assert paths[0] == paths[1]

    def test_missing_file(self, tmp_path, capsys):
        assert main(["sim", "--scenario", str(tmp_path / "nope.json")]) == 2
        assert "no such file" in capsys.readouterr().err

    def test_invalid_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"seed": 1}))
        assert main(["sim", "--scenario", str(bad)]) == 2
        assert "horizon" in capsys.readouterr().err

    def test_series_and_baseline(self, tmp_path):
        m, s = tmp_path / "m.json", tmp_path / "s.csv"
        assert main(["sim", "--scenario", "paper-sec3", "--metrics", str(m), "--series", str(s), "--baseline", "off"]) == 0
        assert json.loads(m.read_text())["flooding_messages_total"] is None
        assert s.read_text().startswith("time,cpu_stddev\n")

    def test_config_file_equals_flags(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        cfg.write_text(json.dumps({"sim": {"scenario": "paper-sec3", "seed": 9, "metrics": str(a)}}))
        assert main(["--config", str(cfg), "sim"]) == 0
        assert main(["sim", "--scenario", "paper-sec3", "--seed", "9", "--metrics", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        monkeypatch.setenv("PGRID_SEED", "11")
        assert main(["sim", "--scenario", "paper-sec3", "--metrics", str(a)]) == 0
        monkeypatch.delenv("PGRID_SEED")
        assert main(["sim", "--scenario", "paper-sec3", "--seed", "11", "--metrics", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"sim": {"bogus": 1}}))
        assert main(["--config", str(cfg), "sim"]) == 2

    def test_usage_error(self):
        assert main(["sim", "--seed", "notanint"]) == 2
        assert main([]) == 2


class TestAdmin:
    def test_bundled_grouping(self):
        lines = admin_table("--topology", FOUR_NODE, port=18471)
        assert lines == ["D1\t172.31.72.42:7401 172.31.72.43:7401", "D2\t172.31.77.41:7401 172.31.77.47:7401"]

    def test_threshold_one(self):
        lines = admin_table("--topology", FOUR_NODE, "--hop-threshold", "1", port=18472)
        assert [l.split("\t")[0] for l in lines] == ["D1", "D2", "D3", "D4"]

    def test_duplicate_endpoint(self, tmp_path, capsys):
        topo = tmp_path / "t.json"
        topo.write_text(json.dumps({"nodes": [{"endpoint": "10.0.0.1:7401"}, {"endpoint": "10.0.0.1:7401"}],
                                    "hop": [], "hop_threshold": 2}))
        assert main(["admin", "--topology", str(topo), "--listen", "127.0.0.1:18473"]) == 2
        assert "duplicate" in capsys.readouterr().err

    def test_missing_topology(self, tmp_path):
        assert main(["admin", "--topology", str(tmp_path / "none.json")]) == 2


class TestNode:
    def test_bad_listen(self):
        assert main(["node", "--listen", "nonsense", "--admin", "127.0.0.1:1"]) == 2

    def test_unreachable_admin_exits_nonzero(self, capsys, monkeypatch):
        # no admin listening: join retries then gives up
        import pgrid.udp as udp

        original = udp.request_join
        monkeypatch.setattr(udp, "request_join", lambda a, n, s: original(a, n, s, timeout=0.2, attempts=2))
        assert main(["node", "--listen", "127.0.0.1:18481", "--admin", "127.0.0.1:18489"]) == 1
        assert "admin" in capsys.readouterr().err


def test_lookup_without_answer(capsys):
    assert main(["lookup", "--via", "127.0.0.1:18491", "--timeout", "0.3", "S1"]) == 1
