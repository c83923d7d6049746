import io
import struct
from pathlib import Path

import pytest

from parasink import (
    BenchSettings,
    ConfigurationError,
    FlushPolicy,
    OutputScenario,
    ProcessingConfig,
    Tier,
    compress_basket,
    run_config,
    save_profile,
    sweep,
    verify_container_file,
    write_container,
)
from parasink.bench import (
    OutputMode,
    ScalingRow,
    build_modules,
    files_byte_identical,
    scaling_chart_svg,
)
from parasink.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFICATION, main
from parasink.codec import Basket

from conftest import make_profile

SCENARIO = OutputScenario.from_name("reco-aod-mini")

FAST = BenchSettings(
    flush_policy=FlushPolicy(flush_every_n_events=4),
    codec_level=1,
    merge_threshold_events=8,
    merge_threshold_bytes=1 << 30,
    sample_period_ms=10.0,
    watchdog_s=120.0,
)


def small_buffers():
    return {Tier.RECO: 2, Tier.AOD: 2, Tier.MINIAOD: 1}


# --- configuration objects -----------------------------------------------------


def test_config_ids_map_to_modes():
    assert ProcessingConfig.from_id(1).mode is OutputMode.SINGLE_THREADED
    assert ProcessingConfig.from_id(2).mode is OutputMode.SINGLE_THREADED_IMT
    assert ProcessingConfig.from_id(3).mode is OutputMode.PARALLEL_MERGER_IMT
    assert ProcessingConfig.from_id(4).mode is OutputMode.DUMMY
    assert not ProcessingConfig.from_id(1).imt
    assert ProcessingConfig.from_id(3).imt


def test_config_3_requires_buffer_counts():
    with pytest.raises(ConfigurationError):
        ProcessingConfig(3, OutputMode.PARALLEL_MERGER_IMT, imt=True, merger_buffers=None)


def test_default_merger_buffers_match_tier_limits(tmp_path):
    profile = make_profile()
    mods = build_modules(SCENARIO, ProcessingConfig.from_id(3), profile, FAST, tmp_path)
    limits = {m.name: m.concurrency_limit for m in mods if m.name.startswith("write_")}
    assert limits == {"write_reco": 6, "write_aod": 6, "write_miniaod": 3}


def test_unknown_scenario_rejected():
    with pytest.raises(ConfigurationError):
        OutputScenario.from_name("everything")


def test_scenario_tiers():
    assert OutputScenario.from_name("aod-mini").tiers == (Tier.AOD, Tier.MINIAOD)


# --- run_config ------------------------------------------------------------------


@pytest.mark.parametrize("config_id", [1, 2, 3, 4])
def test_run_config_produces_artifacts(tmp_path, config_id):
    profile = make_profile(events_total=20, cpu_work=2)
    config = ProcessingConfig.from_id(config_id, small_buffers())
    result = run_config(SCENARIO, config, profile, 2, tmp_path, FAST)
    row = result.row
    assert row.config_id == config_id
    assert row.wall_time_s > 0
    assert row.events_per_s == pytest.approx(profile.events_total / row.wall_time_s)
    tag = f"c{config_id}_t2"
    assert (tmp_path / f"stall_{tag}.csv").exists()
    assert (tmp_path / f"stall_{tag}.svg").exists()
    assert (tmp_path / f"report_{tag}.csv").exists()
    if config_id == 4:
        assert result.output_files == {}
    else:
        assert sorted(p.name for p in tmp_path.glob("*.psnk")) == ["aod.psnk", "miniaod.psnk", "reco.psnk"]
        for path in result.output_files.values():
            assert verify_container_file(path, profile.events_total).ok
    if config_id == 3:
        assert (tmp_path / f"merges_{tag}.csv").exists()
        assert row.peak_buffer_bytes > 0


def test_dummy_is_fastest_at_equal_settings(tmp_path):
    profile = make_profile(events_total=30, reco=8, mean_bytes=4096, cpu_work=0)
    walls = {}
    for config_id in (1, 2, 3, 4):
        config = ProcessingConfig.from_id(config_id, small_buffers())
        result = run_config(SCENARIO, config, profile, 2, tmp_path / str(config_id), FAST)
        walls[config_id] = result.row.wall_time_s
    assert walls[4] == min(walls.values()), walls


def test_single_thread_multiset_identical_across_configs(tmp_path):
    profile = make_profile(events_total=15)
    for config_id in (1, 2, 3):
        config = ProcessingConfig.from_id(config_id, small_buffers())
        result = run_config(SCENARIO, config, profile, 1, tmp_path / str(config_id), FAST)
        for path in result.output_files.values():
            assert verify_container_file(path, profile.events_total).ok


def test_merger_single_buffer_matches_direct_path_bytes(tmp_path):
    profile = make_profile(events_total=21, cpu_work=1)
    ones = {Tier.RECO: 1, Tier.AOD: 1, Tier.MINIAOD: 1}
    r1 = run_config(SCENARIO, ProcessingConfig.from_id(1), profile, 1, tmp_path / "c1", FAST)
    r3 = run_config(SCENARIO, ProcessingConfig.from_id(3, ones), profile, 1, tmp_path / "c3", FAST)
    for tier in SCENARIO.tiers:
        assert files_byte_identical(r1.output_files[tier], r3.output_files[tier]), tier


# --- verification ----------------------------------------------------------------


def test_verify_empty_file_expecting_zero(tmp_path):
    path = tmp_path / "empty.psnk"
    with open(path, "wb") as fh:
        write_container(fh, [], total_events=0)
    assert verify_container_file(path, 0).ok


def test_verify_detects_dropped_basket(tmp_path):
    profile = make_profile(events_total=12)
    result = run_config(
        SCENARIO, ProcessingConfig.from_id(1), profile, 1, tmp_path, FAST, emit_artifacts=False
    )
    victim = Path(result.output_files[Tier.MINIAOD])
    from parasink import read_container

    baskets, trailer = read_container(str(victim))
    dropped_column = "mini_0"
    dropped_one = False
    kept = []
    for cb in baskets:
        if cb.column_name == dropped_column and not dropped_one:
            dropped_one = True
            continue
        kept.append(cb)
    assert dropped_one
    out = tmp_path / "tampered.psnk"
    with open(out, "wb") as fh:
        write_container(fh, kept, total_events=trailer.total_events)
    check = verify_container_file(out, profile.events_total)
    assert not check.ok
    assert any(dropped_column in err for err in check.column_errors)


def test_verify_detects_corrupt_payload(tmp_path):
    basket = Basket("col", 0, 1, b"payload" * 50, (350,))
    cb = compress_basket(basket, 6)
    bad = type(cb)(**{**cb.__dict__, "payload": cb.payload[:-1] + bytes([cb.payload[-1] ^ 1])})
    path = tmp_path / "bad.psnk"
    with open(path, "wb") as fh:
        write_container(fh, [bad], total_events=1)
    check = verify_container_file(path, 1)
    assert not check.ok
    assert any("col" in e for e in check.column_errors)


# --- sweep -----------------------------------------------------------------------


def test_sweep_emits_table_and_chart(tmp_path):
    profile = make_profile(events_total=10, cpu_work=1)
    configs = [ProcessingConfig.from_id(i, small_buffers()) for i in (1, 4)]
    rows = sweep(SCENARIO, configs, [1, 2], profile, tmp_path, FAST)
    assert len(rows) == 4
    table = (tmp_path / "scaling.csv").read_text().splitlines()
    assert table[0] == ScalingRow.csv_header()
    assert len(table) == 5
    svg = (tmp_path / "scaling.svg").read_text()
    assert svg.startswith("<svg") and "events/s" in svg


def test_sweep_records_partial_failures_and_continues(tmp_path, monkeypatch):
    profile = make_profile(events_total=6)
    import parasink.bench as bench_mod

    real = bench_mod.run_config

    def flaky(scenario, config, *args, **kwargs):
        if config.config_id == 1:
            raise RuntimeError("injected failure")
        return real(scenario, config, *args, **kwargs)

    monkeypatch.setattr(bench_mod, "run_config", flaky)
    rows = bench_mod.sweep(
        SCENARIO, [ProcessingConfig.from_id(1), ProcessingConfig.from_id(4)], [1], profile, tmp_path, FAST
    )
    assert [bool(r.error) for r in rows] == [True, False]
    assert "injected failure" in rows[0].error


def test_scaling_chart_handles_empty_rows():
    svg = scaling_chart_svg([])
    assert svg.startswith("<svg")


# --- CLI --------------------------------------------------------------------------


def cli_profile(tmp_path):
    profile = make_profile(events_total=10, cpu_work=1)
    path = tmp_path / "profile.conf"
    save_profile(profile, path)
    return profile, str(path)


def test_cli_run_and_verify_roundtrip(tmp_path, capsys):
    profile, profile_path = cli_profile(tmp_path)
    out = str(tmp_path / "out")
    code = main(
        [
            "run", "--config", "1", "--threads", "1", "--profile", profile_path,
            "--out", out, "--level", "1", "--flush-every", "4",
        ]
    )
    assert code == EXIT_OK
    assert "config 1" in capsys.readouterr().out
    assert main(["verify", "--dir", out, "--expect", str(profile.events_total)]) == EXIT_OK
    assert main(["verify", "--dir", out, "--expect", "999"]) == EXIT_VERIFICATION


def test_cli_bad_scenario_is_config_error(tmp_path):
    code = main(["run", "--config", "1", "--threads", "1", "--scenario", "nope", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG


def test_cli_bad_flag_is_config_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", "1", "--out", str(tmp_path)])  # missing --threads
    assert exc.value.code == EXIT_CONFIG


def test_cli_verify_empty_dir_is_config_error(tmp_path):
    assert main(["verify", "--dir", str(tmp_path), "--expect", "1"]) == EXIT_CONFIG


def test_cli_seed_env_override_changes_bytes(tmp_path, monkeypatch):
    _, profile_path = cli_profile(tmp_path)
    args = ["run", "--config", "1", "--threads", "1", "--profile", profile_path, "--level", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    monkeypatch.setenv("PARASINK_SEED", "999")
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "reco.psnk").read_bytes()
    b = (tmp_path / "b" / "reco.psnk").read_bytes()
    assert a != b


def test_cli_sweep_writes_scaling_table(tmp_path):
    _, profile_path = cli_profile(tmp_path)
    out = str(tmp_path / "sweepout")
    code = main(
        [
            "sweep", "--threads", "1", "--configs", "1,4", "--profile", profile_path,
            "--out", out, "--level", "1", "--flush-every", "4",
        ]
    )
    assert code == EXIT_OK
    assert (Path(out) / "scaling.csv").exists()
    assert (Path(out) / "scaling.svg").exists()
