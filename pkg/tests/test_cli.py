"""End-to-end tests of the command line interface and its exit codes."""

import dataclasses
import filecmp
import json
import math
import os

import numpy as np
import pytest

from clocksim.atom import closed_form_onres, lamb_dicke
from clocksim.cli import EXIT_ABORT, EXIT_ERROR, EXIT_OK, main
from clocksim.config import (
    config_hash,
    dump_toml,
    load_config,
    reference_preset,
    validate_config,
)
from clocksim.logs import MANIFEST_FILE, SERIES_FILE, read_manifest


def _run_preset(tmp_path, name, extra=()):
    out = tmp_path / name
    rc = main(["run", "--preset", "--duration", "2.0", "--out", str(out), *extra])
    return rc, out


def test_run_preset_success(tmp_path, capsys):
    rc, out = _run_preset(tmp_path, "a")
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    assert f"out_dir: {out}" in stdout
    assert "config_hash: " in stdout
    assert "cycles: " in stdout
    manifest = read_manifest(str(out))
    assert manifest["aborted"] is False


def test_run_replay_byte_identical(tmp_path):
    rc1, out1 = _run_preset(tmp_path, "r1")
    rc2, out2 = _run_preset(tmp_path, "r2")
    assert rc1 == rc2 == EXIT_OK
    for name in sorted(os.listdir(out1)):
        assert filecmp.cmp(str(out1 / name), str(out2 / name), shallow=False), name


def test_run_seed_changes_outputs(tmp_path):
    _, out1 = _run_preset(tmp_path, "s1")
    rc, out2 = _run_preset(tmp_path, "s2", extra=["--seed", "777"])
    assert rc == EXIT_OK
    assert not filecmp.cmp(str(out1 / SERIES_FILE), str(out2 / SERIES_FILE), shallow=False)


def test_run_default_out_dir_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CLOCKSIM_OUT_DIR", str(tmp_path))
    rc = main(["run", "--preset", "--duration", "1.0"])
    assert rc == EXIT_OK
    capsys.readouterr()
    cfg = reference_preset()
    cfg = validate_config(
        cfg.species, cfg.sites, cfg.servo, dataclasses.replace(cfg.sim, duration=1.0)
    )
    expected = tmp_path / f"run-{config_hash(cfg)[:12]}"
    assert (expected / MANIFEST_FILE).exists()


def test_run_missing_config_exits_1(tmp_path, capsys):
    rc = main(["run", "--config", str(tmp_path / "nope.toml")])
    assert rc == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_run_invalid_override_exits_1(tmp_path, capsys):
    rc = main(["run", "--preset", "--seed", "-4", "--out", str(tmp_path / "x")])
    assert rc == EXIT_ERROR
    assert "sim.seed" in capsys.readouterr().err


def test_run_interlock_abort_exits_2(tmp_path, capsys):
    cfg0 = reference_preset()
    sim = dataclasses.replace(
        cfg0.sim, ion_lifetime=1e-4, load_latency_mean=1e9,
        interlock_timeout=0.5, duration=30.0,
    )
    cfg = validate_config(cfg0.species, cfg0.sites, cfg0.servo, sim)
    path = tmp_path / "doomed.toml"
    path.write_text(dump_toml(cfg))
    out = tmp_path / "doomed"
    rc = main(["run", "--config", str(path), "--out", str(out)])
    assert rc == EXIT_ABORT
    assert "aborted:" in capsys.readouterr().err
    manifest = read_manifest(str(out))
    assert manifest["aborted"] is True
    assert "interlock" in manifest["error"]


@pytest.fixture(scope="module")
def cli_run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    rc = main(["run", "--preset", "--duration", "25.0", "--out", str(out)])
    assert rc == EXIT_OK
    return out


def test_adev_json_output(cli_run_dir, capsys):
    capsys.readouterr()
    rc = main([
        "adev", str(cli_run_dir / SERIES_FILE), "--json", "--taus", "0.047,0.47,4.7",
    ])
    assert rc == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["mode"] == "single"
    assert len(payload["taus"]) == len(payload["sigmas"]) == 3
    assert all(s > 0 for s in payload["sigmas"])


def test_adev_table_output(cli_run_dir, capsys):
    capsys.readouterr()
    rc = main(["adev", str(cli_run_dir / SERIES_FILE), "--mode", "df1"])
    assert rc == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# mode: df1"
    assert lines[1] == "tau_s sigma sigma_err n_pairs"
    assert len(lines) > 2


def test_adev_detects_tampered_series(cli_run_dir, tmp_path, capsys):
    out = tmp_path / "tampered"
    rc = main(["run", "--preset", "--duration", "2.0", "--out", str(out)])
    assert rc == EXIT_OK
    series = out / SERIES_FILE
    text = series.read_text()
    series.write_text(text.replace(text.splitlines()[-1], "9.99,0.0,0.0"))
    capsys.readouterr()
    rc = main(["adev", str(series)])
    assert rc == EXIT_ABORT
    assert "sha256 mismatch" in capsys.readouterr().err
    # explicit opt-out still reads the numbers
    assert main(["adev", str(series), "--no-verify"]) == EXIT_OK


def test_adev_insufficient_data_exits_1(tmp_path, capsys):
    path = tmp_path / "tiny.csv"
    path.write_text("# nu_hz: 1e15\nt_s,df1_hz,df2_hz\n1.0,0.1,0.2\n2.0,0.3,0.1\n")
    rc = main(["adev", str(path), "--taus", "1000"])
    assert rc == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_fit_rabi_round_trip(tmp_path, capsys):
    cfg = reference_preset()
    eta = lamb_dicke(cfg.species)
    rng = np.random.default_rng(21)
    t = np.linspace(1e-5, 1.2e-3, 60)
    p = closed_form_onres(t, 0.80, 2.0 * math.pi * 5002.0, 28.0, 0.09, eta)
    counts = rng.binomial(500, p)
    path = tmp_path / "flop.csv"
    path.write_text(
        "t_s,p_hat,n_shots\n"
        + "".join(f"{float(ti)!r},{float(ki) / 500!r},500\n" for ti, ki in zip(t, counts))
    )
    rc = main(["fit-rabi", str(path), "--eta", repr(eta)])
    assert rc == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["eta"] == pytest.approx(eta)
    assert payload["rabi_hz"] == pytest.approx(5002.0, rel=0.02)
    assert 20.0 < payload["nbar"] < 40.0
    assert set(payload["errors"]) == {"contrast_A", "rabi_rad_s", "nbar", "bias_c"}


def test_fit_rabi_flat_data_exits_2(tmp_path, capsys):
    rng = np.random.default_rng(5)
    rows = "".join(f"{float(t)!r},{float(0.5 + rng.normal(0, 0.005))!r},200\n"
                   for t in np.linspace(1e-5, 6e-4, 40))
    path = tmp_path / "flat.csv"
    path.write_text(rows)
    rc = main(["fit-rabi", str(path), "--eta", "0.0777"])
    assert rc == EXIT_ABORT
    assert "fit failed" in capsys.readouterr().err


def test_shift_report_json(cli_run_dir, capsys):
    capsys.readouterr()
    rc = main(["shift-report", str(cli_run_dir), "--json"])
    assert rc == EXIT_OK
    groups = json.loads(capsys.readouterr().out)
    assert groups, "a 25 s preset run must yield at least one presence group"
    full = [g for g in groups if g["present"] == [1, 2, 3, 4]]
    assert full and all(g["n"] >= 1 for g in full)
    for g in groups:
        assert set(g) == {"site", "present", "n", "mean_hz", "sem_hz", "z"}


def test_shift_report_table(cli_run_dir, capsys):
    capsys.readouterr()
    rc = main(["shift-report", str(cli_run_dir)])
    assert rc == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "site present n mean_hz sem_hz z"
    assert len(lines) > 1


def test_preset_round_trip(tmp_path, capsys):
    path = tmp_path / "preset.toml"
    rc = main(["preset", "--out", str(path)])
    assert rc == EXIT_OK
    capsys.readouterr()
    loaded = load_config(str(path))
    assert config_hash(loaded) == config_hash(reference_preset())
    # stdout variant parses as the same configuration
    rc = main(["preset", "--seed", "99"])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    path2 = tmp_path / "preset99.toml"
    path2.write_text(text)
    assert config_hash(load_config(str(path2))) == config_hash(reference_preset(seed=99))
