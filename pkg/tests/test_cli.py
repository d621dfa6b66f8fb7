import hashlib
import json

import pytest

from rdslab.cli import ConfigError, EXPERIMENTS, main, report, resolve_config
from rdslab.rds_core import ValidationError

SMALL = {
    "verify-expansion": {"params": {"n0": 3, "G": 2, "D": 16}},
    "tempered": {"streams": 4, "params": {"n": 40}},
    "stable-dist": {"streams": 40, "params": {"n": 10, "bins": 32}},
    "lyapunov": {"params": {"n": 30}},
    "graph-transform": {"params": {"iterations": 5, "K": 51}},
    "fake-stable": {"params": {"n": 6}},
    "holonomy": {"params": {"n": 6, "sources": 3}},
    "recovery": {"streams": 20, "params": {"horizon": 40, "with_goodness": 2}},
    "couple": {"streams": 1, "params": {"coupling": {"horizon": 6}}},
    "mixing": {"streams": 3, "params": {"nmax": 6, "N": 64}},
}


def _run(tmp_path, kind, cfg, name="run", *extra):
    path = tmp_path / f"{name.replace('/', '_')}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    rc = main([kind, "--config", str(path), "--out", str(out), *extra])
    return rc, out


def _csv_digests(out):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.glob("*.csv"))}


def test_small_configs_cover_every_kind():
    assert set(SMALL) == set(EXPERIMENTS)


@pytest.mark.parametrize("kind", sorted(SMALL))
def test_every_experiment_runs(tmp_path, kind):
    rc, out = _run(tmp_path, kind, SMALL[kind])
    assert rc == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["experiment"] == kind
    assert {"config_hash", "version", "wall_time", "artifacts"} <= set(man)
    for a in man["artifacts"]:
        data = (out / a["path"]).read_bytes()
        assert a["bytes"] == len(data)
        assert a["sha256"] == hashlib.sha256(data).hexdigest()
    assert any(a["path"].endswith(".csv") for a in man["artifacts"])


def test_same_config_same_checksums(tmp_path):
    _, a = _run(tmp_path, "tempered", SMALL["tempered"], "a")
    _, b = _run(tmp_path, "tempered", SMALL["tempered"], "b")
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]
    assert ma["artifacts"] == mb["artifacts"]


def test_worker_count_does_not_change_csvs(tmp_path, monkeypatch):
    monkeypatch.setenv("RDSLAB_THREADS", "1")
    _, a = _run(tmp_path, "mixing", SMALL["mixing"], "one")
    monkeypatch.setenv("RDSLAB_THREADS", "2")
    _, b = _run(tmp_path, "mixing", SMALL["mixing"], "two")
    assert _csv_digests(a) == _csv_digests(b)
    assert _csv_digests(a)


def test_missing_out_dir_is_created(tmp_path):
    rc, out = _run(tmp_path, "verify-expansion", SMALL["verify-expansion"], "deep/nested/run")
    assert rc == 0 and (out / "manifest.json").is_file()


def test_unknown_field_exits_2_with_path(tmp_path, capsys):
    rc, _ = _run(tmp_path, "tempered", {"params": {"lamda": 0.5}})
    assert rc == 2
    assert "params.lamda" in capsys.readouterr().err


def test_unknown_tuple_family(tmp_path, capsys):
    rc, _ = _run(tmp_path, "tempered", {"tuple": {"family": "baker"}})
    assert rc == 2
    assert "tuple.family" in capsys.readouterr().err


def test_unknown_kind_exits_2():
    assert main(["no-such-kind"]) == 2
    with pytest.raises(ConfigError) as e:
        resolve_config(None, {"experiment": "no-such-kind"})
    assert e.value.path == "experiment"


def test_resolve_config_type_errors():
    with pytest.raises(ConfigError) as e:
        resolve_config("tempered", {"params": {"n": "many"}})
    assert e.value.path == "params.n"
    with pytest.raises(ConfigError) as e:
        resolve_config("tempered", {"seed": -1})
    assert e.value.path == "seed"
    with pytest.raises(ConfigError):
        resolve_config("tempered", {"experiment": "mixing"})
    with pytest.raises(ConfigError):
        resolve_config("graph-transform", {"tuple": "cat_pair"})


def test_resolve_config_overrides():
    cfg = resolve_config("tempered", {"seed": 3, "streams": 5}, seed=9, streams=7)
    assert cfg["seed"] == 9 and cfg["streams"] == 7
    assert cfg["tuple"] == {"family": "cat_pair", "params": {}}
    assert set(cfg) == {"experiment", "tuple", "seed", "streams", "params"}


def test_runtime_error_exits_1(tmp_path, capsys):
    rc, _ = _run(tmp_path, "mixing", {"streams": 0})
    assert rc == 2
    rc, _ = _run(tmp_path, "lyapunov", {"params": {"n": 30, "lambda_prime": 5.0}}, "bad")
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_report_summarizes(tmp_path, capsys):
    _run(tmp_path, "mixing", SMALL["mixing"], "m")
    _run(tmp_path, "recovery", SMALL["recovery"], "r")
    text = report(tmp_path)
    assert "## mixing (m)" in text and "## recovery (r)" in text
    assert "checksum mismatches: 0" in text
    assert main(["report", str(tmp_path)]) == 0
    assert "annealed_eta_hat" in capsys.readouterr().out


def test_report_flags_tampering(tmp_path):
    _, out = _run(tmp_path, "tempered", SMALL["tempered"])
    (out / "tempered.csv").write_text("x\n")
    assert "tempered.csv" in report(out)


def test_report_empty_dir_is_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValidationError):
        report(tmp_path / "empty")
    assert main(["report", str(tmp_path / "empty")]) == 1
