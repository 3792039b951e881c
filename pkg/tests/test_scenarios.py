import math

import polars as pl
import pytest

from pyqme.cli import main
from pyqme.errors import ConfigurationError, PhotonCountError
from pyqme.scenarios import ScenarioFactory, get_scenario, parse_scenario, run_scenario
from pyqme.scenarios import runner
from pyqme.scenarios.config import MHZ, NS, US

BUILTINS = [
    "calibration",
    "fig3b-sim",
    "fig4-ideal",
    "ledger-decoherence",
    "ledger-ideal",
    "spectra-strong",
    "spectra-weak",
]

TINY = """\
[scenario]
name = tiny
tasks = spectra

[schedule]
drive_duration_us = 1.5
probe_duration_us = 0.5
record_us = 1.5

[sweep]
omega_mhz = 0, 2
n_ref = 0.05
"""


def _write(tmp_path, name: str, text: str):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class TestParse:

    def test_defaults_and_units(self):
        s = parse_scenario("[scenario]\nname = x\n")
        assert s.chi == pytest.approx(-4.0 * MHZ)
        assert s.kappa == pytest.approx(0.9 * MHZ)
        assert s.t1 == pytest.approx(13.5 * US)
        assert s.schedule.record_duration == pytest.approx(3 * US)
        assert s.dt == pytest.approx(1 * NS) and s.dt_c == pytest.approx(25 * NS)
        assert s.n_max is None
        assert s.preparations == ("+", "-")

    def test_unknown_key_reports_line(self):
        text = "[scenario]\nname = x\n\n[model]\nchi_mhz = -4\ngamma = 3\n"
        with pytest.raises(ConfigurationError) as e:
            parse_scenario(text)
        assert e.value.lineno == 6
        assert "gamma" in str(e.value)

    @pytest.mark.parametrize(
        "text",
        [
            "[scenario]\nname = x\n[sweep]\nomega_mhz =\n",
            "[scenario]\nname = x\n[sweep]\nn_ref =\n",
            "[scenario]\nname = x\n[sweep]\npreparations = +, g\n",
            "[scenario]\nname = x\ntasks = spectra, movies\n",
            "[scenario]\nname = x\n[model]\nn_max = many\n",
            "[scenario]\nname = x\n[model]\nkappa_mhz = fast\n",
            "[scenario]\nname = x\n[numerics]\nstrict = maybe\n",
            "[scenario]\nname = x\n[extra]\nkey = 1\n",
            "[scenario]\ndescription = nameless\n",
            "name = x\n",
        ],
    )
    def test_rejects(self, text):
        with pytest.raises(ConfigurationError):
            parse_scenario(text)

    def test_calibration_allows_empty_n_ref(self):
        s = parse_scenario("[scenario]\nname = x\ntasks = calibration\n[sweep]\nn_ref =\n")
        assert s.n_refs == ()
        assert s.validate() == []

    def test_base_chain(self):
        s = get_scenario("spectra-strong")
        assert s.name == "spectra-strong"
        assert s.n_refs == (3.4,)
        assert s.tasks == ("spectra", "photons")
        assert len(s.omegas) == 8

    @pytest.mark.parametrize("alias, target", [("fig3b-sim", "spectra-weak"), ("fig4-ideal", "ledger-ideal")])
    def test_alias_builtins(self, alias, target):
        a, t = get_scenario(alias), get_scenario(target)
        assert a.name == alias
        assert a.tasks == t.tasks and a.preparations == t.preparations
        assert a.n_refs == t.n_refs and a.omegas == t.omegas
        assert a.decoherence_enabled == t.decoherence_enabled and a.strict == t.strict

    def test_base_from_file(self, tmp_path):
        path = _write(tmp_path, "mine.ini", "[scenario]\nname = mine\nbase = ledger-decoherence\n[sweep]\nomega_mhz = 3\n")
        s = get_scenario(path)
        assert s.tasks == ("ledger",)
        assert s.decoherence_enabled and not s.strict
        assert s.omegas == (3 * MHZ,)

    def test_circular_base(self, tmp_path):
        _write(tmp_path, "a.ini", "[scenario]\nname = a\nbase = b\n")
        _write(tmp_path, "b.ini", "[scenario]\nname = b\nbase = a\n")
        with pytest.raises(ConfigurationError):
            get_scenario(tmp_path / "a.ini")

    def test_unknown_builtin(self):
        with pytest.raises(ConfigurationError):
            get_scenario("no-such-scenario")

    def test_unsupported_extension(self, tmp_path):
        with pytest.raises(ValueError):
            get_scenario(_write(tmp_path, "x.yaml", "name: x\n"))

    def test_canonical_text_parses_back(self):
        s = get_scenario("ledger-ideal")
        again = parse_scenario(s.to_ini())
        assert again.tasks == s.tasks and again.preparations == s.preparations
        assert again.n_refs == s.n_refs
        assert again.omegas == pytest.approx(s.omegas)
        assert again.kappa == pytest.approx(s.kappa, rel=1e-15)

    def test_overrides(self):
        s = get_scenario("spectra-weak")
        o = s.with_overrides(dt=0.5 * NS, dt_c=None)
        assert o.dt == 0.5 * NS and o.dt_c == s.dt_c
        assert s.dt == 1 * NS


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class TestValidate:

    @pytest.mark.parametrize("name", BUILTINS)
    def test_builtins_are_valid(self, name):
        assert get_scenario(name).validate() == []

    def test_builtin_names(self):
        assert ScenarioFactory.builtin_names() == BUILTINS

    def test_dephasing_bound(self):
        s = parse_scenario("[scenario]\nname = x\n[model]\nt1_us = 13.5\nt2_star_us = 40.5\n")
        problems = s.validate()
        assert problems and "gamma_phi" in problems[0]

    def test_dephasing_ignored_without_decoherence(self):
        text = "[scenario]\nname = x\n[model]\nt2_star_us = 40.5\ndecoherence = false\n"
        assert parse_scenario(text).validate() == []

    def test_nyquist(self):
        s = parse_scenario("[scenario]\nname = x\n[numerics]\ndtc_ns = 100\n")
        assert any("cannot resolve" in p for p in s.validate())

    def test_dtc_multiple_of_dt(self):
        s = parse_scenario("[scenario]\nname = x\n[numerics]\ndt_ns = 2\ndtc_ns = 25\n")
        assert any("multiple" in p for p in s.validate())

    def test_small_n_max(self):
        s = parse_scenario("[scenario]\nname = x\n[model]\nn_max = 2\n[sweep]\nn_ref = 3.4\n")
        assert any("n_max" in p for p in s.validate())

    def test_probe_outside_record(self):
        s = parse_scenario("[scenario]\nname = x\n[schedule]\nprobe_duration_us = 4\n")
        assert s.validate()

    def test_run_refuses_invalid(self, tmp_path):
        s = parse_scenario("[scenario]\nname = x\n[numerics]\ndtc_ns = 100\n")
        with pytest.raises(ConfigurationError):
            run_scenario(s, tmp_path)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


class TestRun:

    @pytest.fixture(scope="class")
    def scenario(self):
        return parse_scenario(TINY)

    @pytest.fixture(scope="class")
    def result(self, scenario, tmp_path_factory):
        return run_scenario(scenario, tmp_path_factory.mktemp("run"))

    def test_artifacts(self, result):
        names = set(result.artifacts)
        for omega in ("0", "2"):
            for prep in ("plus", "minus"):
                assert f"spectrum_nref0.05_omega{omega}MHz_{prep}.csv" in names
            assert f"difference_nref0.05_omega{omega}MHz.csv" in names
        assert not any(n.startswith("triplet_") and "omega0MHz" in n for n in names)
        for name, digest in result.artifacts.items():
            assert (result.out_dir / name).is_file()
            assert len(digest) == 64

    def test_spectrum_csv(self, result):
        frame = pl.read_csv(result.out_dir / "spectrum_nref0.05_omega2MHz_minus.csv")
        assert frame.shape[0] == 401
        assert frame["state_label"].unique().to_list() == ["-"]
        assert frame["omega_rads"][0] == pytest.approx(2 * MHZ)

    def test_manifest(self, result, scenario):
        text = result.manifest.read_text()
        assert "[calibrated]" in text and "epsilon_nref0.05 = " in text
        for name, digest in result.artifacts.items():
            assert f"{name} = sha256:{digest}" in text
        again = get_scenario(result.manifest)
        assert again.name == scenario.name
        assert again.n_refs == scenario.n_refs
        assert again.schedule == pytest.approx(scenario.schedule)
        assert again.validate() == []

    def test_deterministic(self, result, scenario, tmp_path):
        again = run_scenario(scenario, tmp_path)
        assert again.artifacts == result.artifacts

    def test_photon_count_breach_raises_when_strict(self, scenario, tmp_path, monkeypatch):
        monkeypatch.setattr(runner, "PHOTON_IDENTITY_TOL", -1.0)
        with pytest.raises(PhotonCountError):
            run_scenario(scenario, tmp_path)

    def test_photon_count_breach_recorded_when_lenient(self, tmp_path, monkeypatch):
        monkeypatch.setattr(runner, "PHOTON_IDENTITY_TOL", -1.0)
        lenient = parse_scenario(TINY + "\n[numerics]\nstrict = false\n")
        result = run_scenario(lenient, tmp_path)
        text = result.manifest.read_text()
        assert "[checks]" in text
        assert "photon_count_nref0.05_omega2MHz_minus = " in text
        assert get_scenario(result.manifest).validate() == []

    def test_workers_do_not_change_results(self, result, scenario, tmp_path, slow):
        again = run_scenario(scenario, tmp_path, workers=2)
        assert again.artifacts == result.artifacts

    def test_ledger_and_photons(self, tmp_path, slow):
        text = TINY.replace("tasks = spectra", "tasks = ledger, photons").replace("omega_mhz = 0, 2", "omega_mhz = 2")
        result = run_scenario(parse_scenario(text), tmp_path)
        ledger = pl.read_csv(result.out_dir / "ledger.csv")
        assert ledger.shape[0] == 1
        assert math.isfinite(ledger["residual"][0])
        assert pl.read_csv(result.out_dir / "ledger_preparations.csv").shape[0] == 2
        assert pl.read_csv(result.out_dir / "photons_vs_omega_nref0.05.csv").shape[0] == 2


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


class TestCli:

    def test_list(self, capsys):
        assert main(["list-scenarios"]) == 0
        out = capsys.readouterr().out
        for name in BUILTINS:
            assert name in out

    def test_validate_ok(self, capsys):
        assert main(["validate", "spectra-weak", "ledger-ideal"]) == 0
        assert capsys.readouterr().out.count(": OK") == 2

    def test_validate_failure(self, tmp_path, capsys):
        bad = _write(tmp_path, "bad.ini", "[scenario]\nname = bad\n[numerics]\ndtc_ns = 100\n")
        unknown = _write(tmp_path, "unknown.ini", "[scenario]\nname = u\n[model]\nfoo = 1\n")
        assert main(["validate", str(bad), str(unknown), "calibration"]) == 1
        out = capsys.readouterr().out
        assert "bad: 1 problem(s)" in out
        assert "foo" in out
        assert "calibration: OK" in out

    def test_run_rejects_workers(self, tmp_path):
        assert main(["run", "spectra-weak", "--workers", "0", "--out-dir", str(tmp_path)]) == 2

    def test_run_unknown_scenario(self, tmp_path):
        assert main(["run", "no-such-scenario", "--out-dir", str(tmp_path)]) == 1

    def test_run(self, tmp_path, capsys):
        config = _write(tmp_path, "tiny.ini", TINY.replace("omega_mhz = 0, 2", "omega_mhz = 2"))
        out_dir = tmp_path / "out"
        assert main(["run", str(config), "--out-dir", str(out_dir), "--dtc-ns", "50"]) == 0
        assert "tiny: " in capsys.readouterr().out
        assert get_scenario(out_dir / "manifest.ini").dt_c == pytest.approx(50 * NS)
