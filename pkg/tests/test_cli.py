import subprocess
import sys

import pytest
import yaml

from zvonkin_sde.cli import TEST_FUNCTIONS, list_presets, main, make_test_function, parse_config, shipped_config
from zvonkin_sde.errors import ConfigError


@pytest.fixture
def minimal():
    return yaml.safe_load(shipped_config("minimal").read_text())


def _write(tmp_path, cfg, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_minimal_run_exit_zero(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(shipped_config("minimal")), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "overall: PASS" in text
    for f in ("reports.csv", "summary.txt", "audit.csv", "map/manifest.json"):
        assert (out / f).exists()


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["--out", str(a), "run", str(shipped_config("minimal"))])
    main(["run", str(shipped_config("minimal")), "--out", str(b)])
    assert (a / "reports.csv").read_bytes() == (b / "reports.csv").read_bytes()
    assert (a / "summary.txt").read_bytes() == (b / "summary.txt").read_bytes()
    c = tmp_path / "c"
    main(["run", str(shipped_config("minimal")), "--out", str(c), "--seed", "2"])
    assert (a / "reports.csv").read_bytes() != (c / "reports.csv").read_bytes()


def test_summary_lists_each_estimator_once(tmp_path, minimal):
    out = tmp_path / "o"
    main(["run", _write(tmp_path, minimal), "--out", str(out)])
    text = (out / "summary.txt").read_text()
    for e in minimal["estimators"]:
        assert sum(line.startswith(e["name"] + ":") for line in text.splitlines()) == 1


def test_p1_not_above_d_rejected(tmp_path, minimal, capsys):
    minimal["params"]["p1"] = 1.0
    assert main(["validate", _write(tmp_path, minimal)]) == 2
    assert "p1 must exceed d" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["simulation"].update(dt=0.1), "simulation.dt"),
    (lambda c: c["coefficients"].update(preset="nope"), "coefficients.preset"),
    (lambda c: c["estimators"].append({"name": "krylov_check"}), "estimators"),
    (lambda c: c["estimators"][0].update(f="nope"), "f"),
])
def test_config_errors_name_field(minimal, mutate, field):
    mutate(minimal)
    with pytest.raises(ConfigError) as exc:
        parse_config(minimal)
    assert field in (exc.value.field or "") + str(exc.value)


def test_list_presets_deterministic():
    a = list_presets()
    assert a == list_presets()
    assert "preset\tou" in a and "estimator\tkrylov_check" in a
    r = subprocess.run([sys.executable, "-m", "zvonkin_sde.cli", "list-presets"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout == a


def test_validate_shipped():
    for name in ("minimal", "singular"):
        assert main(["validate", str(shipped_config(name))]) == 0


def test_test_functions_norms():
    import numpy as np
    for name in TEST_FUNCTIONS:
        f, norm = make_test_function({"f": name}, 1, 2.0)
        assert f(np.zeros((3, 1))).shape == (3,)
        assert norm is None or norm > 0  # the bump norm is left to the caller
