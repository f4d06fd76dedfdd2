import subprocess
import sys

import pytest

from optipool.errors import ConfigError
from optipool.harness import (
    OracleState, SuiteDivergence, TrialConfig, format_table, main, run_oracle_enumeration,
    run_suite, run_trial,
)

FAST = dict(preload_keys=600, key_space=900, ops=60, ssd_pages=1024)


def test_oracle_state_sees_only_commits():
    o = OracleState({b"a": b"1"})
    o.put(b"b", b"2")
    o.remove(b"a")
    assert o.view(b"a") is None and o.view(b"b") == b"2"
    o.discard()
    assert o.items() == [(b"a", b"1")]
    o.put(b"c", b"3")
    o.commit()
    assert o.items() == [(b"a", b"1"), (b"c", b"3")]


def test_no_crash_trial():
    rep = run_trial(TrialConfig(seed=1, crash_mode="none", **FAST))
    assert rep.passed and rep.recovery_microseconds == 0 and rep.crash_at == 0


def test_trial_is_deterministic():
    cfg = TrialConfig(seed=4, **FAST)
    a, b = run_trial(cfg), run_trial(cfg)
    assert a.to_records(timing=False) == b.to_records(timing=False)
    assert "recovery_microseconds" not in a.to_records(timing=False)


def test_report_records_format():
    rep = run_trial(TrialConfig(seed=2, **FAST))
    lines = rep.to_records().splitlines()
    assert lines[0] == "seed=2" and "verdict=pass" in lines
    assert any(line.startswith("restart summary ") for line in lines)


@pytest.mark.parametrize("bad", [
    dict(crash_mode="sometimes"), dict(restart_mode="lazy"), dict(consistency="relaxed"),
    dict(ops=0), dict(abort_rate=2.0), dict(insert_weight=0, delete_weight=0, lookup_weight=0),
    dict(preload_keys=10, key_space=5), dict(checksum_policy="every-k:0"), dict(page_size=1000),
    dict(crash_at=500), dict(value_min=10, value_max=5),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrialConfig(**bad).validate()


def test_suite_table():
    base = TrialConfig(seed=0, **FAST)
    res = run_suite(base, 2, {"dram_frames": [0, 8], "cleaner_period": [0, 4]})
    assert len(res) == 4 and all(s.pass_rate == 1.0 for s in res)
    table = format_table(res).splitlines()
    assert table[0].split("\t")[:3] == ["dram_frames", "cleaner_period", "trials"]
    assert len(table) == 5


def test_suite_aborts_with_reproduction(monkeypatch):
    import optipool.harness as h

    real = h.run_trial

    def flaky(cfg, dump_dir=None):
        rep = real(cfg, dump_dir)
        if cfg.seed == 1 and (cfg.crash_at == 0 or cfg.crash_at >= 3):
            rep.verdict, rep.error = "fail", "injected"
        return rep

    monkeypatch.setattr(h, "run_trial", flaky)
    with pytest.raises(SuiteDivergence) as exc:
        h.run_suite(TrialConfig(seed=0, **FAST), 3)
    natural = h._pick_crash(TrialConfig(seed=1, **FAST))
    assert exc.value.seed == 1 and exc.value.op_index == min(3, natural)


def test_enumeration_small():
    res = run_oracle_enumeration(histories=12, seed=3)
    assert res.passed and res.histories == 12 and res.images > 12
    with pytest.raises(ConfigError):
        run_oracle_enumeration(1, page_size=512)


def test_cli_exit_codes(tmp_path, capsys):
    report = tmp_path / "r.txt"
    assert main(["run-trial", "--seed", "3", "--preload-keys", "300", "--key-space", "500",
                 "--ops", "30", "--report-path", str(report)]) == 0
    assert "verdict=pass" in report.read_text()
    assert main(["run-trial", "--ops", "0"]) == 2
    assert main(["run-trial", "--checksum-policy", "bogus"]) == 2
    assert main(["oracle-enum", "--histories", "5"]) == 0
    assert main(["format-store", "--store-path", str(tmp_path / "s.img"), "--ssd-pages", "8"]) == 0
    assert (tmp_path / "s.img").stat().st_size == 8 * 4096
    assert main(["run-suite", "--trials", "1", "--ops", "20", "--preload-keys", "100",
                 "--sweep", "dram-frames=0,4", "--table-path", str(tmp_path / "t.tsv")]) == 0
    assert len((tmp_path / "t.tsv").read_text().splitlines()) == 3
    assert main(["run-suite", "--sweep", "nonsense=1"]) == 2
    capsys.readouterr()


def test_crash_images_reload_in_another_process(tmp_path):
    dump = tmp_path / "crash"
    args = ["--seed", "8", "--preload-keys", "400", "--key-space", "600", "--ops", "50"]
    run = subprocess.run([sys.executable, "-m", "optipool", "run-trial", *args, "--dump-dir", str(dump)],
                         capture_output=True, text=True)
    assert run.returncode == 0, run.stderr
    assert {p.name for p in dump.iterdir()} >= {"ssd.img", "nvm.img", "log.bin", "config.json", "oracle.json"}
    for mode in ("on_demand", "eager"):
        again = subprocess.run([sys.executable, "-m", "optipool", "run-trial", "--resume-from", str(dump),
                                "--restart-mode-override", mode], capture_output=True, text=True)
        assert again.returncode == 0, again.stdout + again.stderr
        assert "verdict=pass" in again.stdout


def test_dram_frames_zero_and_pessimistic_trials():
    for cfg in (TrialConfig(seed=5, dram_frames=0, **FAST),
                TrialConfig(seed=5, consistency="pessimistic", **FAST),
                TrialConfig(seed=5, restart_mode="eager", checksum_policy="per-fragment:4", **FAST),
                TrialConfig(seed=5, checksum_policy="every-k:4", admission="dram", **FAST)):
        assert run_trial(cfg).passed
