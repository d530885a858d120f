import json

import pytest

from conftest import (
    SERVER_IP,
    TH_SYN,
    device_label,
    tcp_frame,
    udp_frame,
    write_frames,
    write_synthetic_capture,
)
from iotprint.cli import main
from iotprint.config import Config
from iotprint.storage import read_json, read_table

CLIENT = ("10.0.0.10", 40000)
SERVER = (SERVER_IP, 443)


def _config(path, hidden=8, **training):
    body = {"model": {"hidden_widths": [hidden]}, "training": {"batch_size": 20, **training}}
    path.write_text(json.dumps(body))
    return str(path)


@pytest.fixture
def small_capture(tmp_path):
    """Three devices with 30 sessions each, split and encoded."""
    paths, mac_map = write_synthetic_capture(tmp_path / "pcaps", devices=3, sessions=30)
    sessions, dataset = tmp_path / "sessions", tmp_path / "dataset"
    assert main(["split", *map(str, paths), "--mac-map", str(mac_map), "--out", str(sessions)]) == 0
    assert main(["encode", str(sessions), "--min-sessions", "10", "--out", str(dataset)]) == 0
    return tmp_path, dataset


# -------------------- SPLIT --------------------

def test_split_counts_sessions_and_udp_flows(tmp_path):
    pcap = write_frames(tmp_path / "a.pcap", [
        tcp_frame(CLIENT, SERVER, b"", flags=TH_SYN),
        tcp_frame(("10.0.0.11", 40001), SERVER, b"x", src_mac="02:00:00:00:00:02"),
        udp_frame(("10.0.0.10", 5353), (SERVER_IP, 53), b"q"),
        tcp_frame(SERVER, CLIENT, b"hi", src_mac="02:00:00:00:00:fe", dst_mac="02:00:00:00:00:01"),
    ])
    assert main(["split", str(pcap), "--out", str(tmp_path / "out")]) == 0
    manifest = read_json(tmp_path / "out" / "split_manifest.json")
    assert manifest["session_count"] == 2
    assert manifest["discarded_udp_flows"] == 1
    assert manifest["sessions_per_label"] == {"02:00:00:00:00:01": 1, "02:00:00:00:00:02": 1}
    assert len(read_table(tmp_path / "out" / "sessions.parquet")) == 2


def test_split_of_empty_capture_writes_an_empty_store(tmp_path):
    pcap = write_frames(tmp_path / "empty.pcap", [])
    assert main(["split", str(pcap), "--out", str(tmp_path / "out")]) == 0
    assert read_json(tmp_path / "out" / "split_manifest.json")["session_count"] == 0
    assert main(["encode", str(tmp_path / "out"), "--out", str(tmp_path / "ds")]) == 2


def test_split_is_deterministic(tmp_path):
    paths, mac_map = write_synthetic_capture(tmp_path / "pcaps", devices=2, sessions=5)
    for name in ("a", "b"):
        assert main(["split", *map(str, paths), "--mac-map", str(mac_map), "--pcaps", "--out", str(tmp_path / name)]) == 0
    assert read_table(tmp_path / "a" / "sessions.parquet") == read_table(tmp_path / "b" / "sessions.parquet")
    pcaps_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "sessions").rglob("*.pcap"))
    assert len(pcaps_a) == 10
    for rel in pcaps_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_split_defaults_to_the_data_dir(tmp_path):
    pcap = write_frames(tmp_path / "a.pcap", [tcp_frame(CLIENT, SERVER, b"x")])
    assert main(["split", str(pcap)]) == 0
    assert read_json(Config.DATA_DIR / "sessions" / "split_manifest.json")["session_count"] == 1


# -------------------- ENCODE --------------------

def _store(tmp_path, payloads):
    frames = [tcp_frame(("10.0.0.10", 40000 + i), SERVER, p) for i, p in enumerate(payloads)]
    pcap = write_frames(tmp_path / "in.pcap", frames)
    assert main(["split", str(pcap), "--out", str(tmp_path / "sessions")]) == 0
    return str(tmp_path / "sessions")


def test_encode_single_short_session(tmp_path):
    sessions = _store(tmp_path, [b"\x01\x02\x03"])
    assert main(["encode", sessions, "--min-sessions", "0", "--out", str(tmp_path / "ds")]) == 0
    images = (tmp_path / "ds" / "images-idx3-ubyte").read_bytes()
    assert len(images) == 800
    assert images[16:19] == b"\x01\x02\x03"
    assert images[19:] == bytes(781)


def test_encode_drops_duplicates_and_dumps_images(tmp_path):
    sessions = _store(tmp_path, [b"same", b"same", b"other"])
    out = tmp_path / "ds"
    assert main(["encode", sessions, "--min-sessions", "0", "--images", "--bins", "--out", str(out)]) == 0
    manifest = read_json(out / "dataset_manifest.json")
    assert manifest["count"] == 2
    assert len(list((out / "images").rglob("*.pgm"))) == 2
    assert len(list((out / "bins").rglob("*.bin"))) == 2


def test_encode_filter_removes_small_devices(tmp_path):
    sessions = _store(tmp_path, [b"a", b"b"])
    assert main(["encode", sessions, "--min-sessions", "2", "--out", str(tmp_path / "ds")]) == 2


# -------------------- EXIT CODES --------------------

def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["split"])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main(["bogus"])
    assert excinfo.value.code == 1


def test_config_errors_exit_1(tmp_path, small_capture):
    _, dataset = small_capture
    pcap = write_frames(tmp_path / "a.pcap", [tcp_frame(CLIENT, SERVER, b"x")])
    assert main(["split", str(pcap), "--mac-map", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", str(dataset), "--experiment", "2", "--out", str(tmp_path / "r")]) == 1
    assert main(["train", str(dataset), "--exclude", "device-0", "--out", str(tmp_path / "r")]) == 1
    assert main(["train", str(dataset), "--experiment", "2", "--exclude", "device-9", "--out", str(tmp_path / "r2")]) == 1
    assert not (tmp_path / "r2").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depth": 3}}))
    assert main(["train", str(dataset), "--config", str(bad), "--out", str(tmp_path / "r")]) == 1


def test_data_errors_exit_2(tmp_path):
    garbage = tmp_path / "garbage.pcap"
    garbage.write_bytes(b"\xde\xad\xbe\xef" * 10)
    assert main(["split", str(garbage), "--out", str(tmp_path / "o")]) == 2
    assert main(["split", str(tmp_path / "nope.pcap"), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", str(tmp_path / "no-run")]) == 2


# -------------------- TRAIN / EVAL --------------------

def test_train_then_eval_is_byte_identical(small_capture):
    root, dataset = small_capture
    run = root / "run"
    cfg = _config(root / "cfg.json")
    assert main(["train", str(dataset), "--config", cfg, "--epochs", "3", "--samples", "2", "--out", str(run)]) == 0
    for name in ("model.json", "report.json", "report.txt", "confusion.csv", "history.csv", "run_manifest.json"):
        assert (run / name).exists(), name
    assert (run / "splits" / "test-images-idx3-ubyte").exists()
    assert len(list((run / "samples").rglob("*.pgm"))) == 6
    manifest = read_json(run / "run_manifest.json")
    assert manifest["epochs"] == 3
    assert manifest["seeds"] == {"split": 0, "init": 0, "shuffle": 0}

    assert main(["eval", str(run)]) == 0
    assert (run / "eval" / "report.json").read_bytes() == (run / "report.json").read_bytes()


def test_training_is_reproducible_for_a_seed(small_capture):
    root, dataset = small_capture
    cfg = _config(root / "cfg.json")
    for name in ("a", "b", "c"):
        seed = "1" if name == "c" else "5"
        assert main(["train", str(dataset), "--config", cfg, "--seed", seed, "--epochs", "2", "--out", str(root / name)]) == 0
    assert (root / "a" / "model.json").read_bytes() == (root / "b" / "model.json").read_bytes()
    assert (root / "a" / "report.json").read_bytes() == (root / "b" / "report.json").read_bytes()
    assert (root / "a" / "model.json").read_bytes() != (root / "c" / "model.json").read_bytes()


def test_experiment2_and_detect_unknown(small_capture):
    root, dataset = small_capture
    run = root / "exp2"
    cfg = _config(root / "cfg.json")
    args = ["train", str(dataset), "--experiment", "2", "--exclude", "device-2", "--config", cfg, "--epochs", "3"]
    assert main([*args, "--out", str(run)]) == 0
    profile = read_json(run / "profile.json")
    assert profile["excluded_label"] == "device-2"
    assert 0 < profile["threshold"] < 1
    report = read_json(run / "report.json")
    assert report["class_names"][-1] == "device-2 (unknown)"
    assert report["threshold"]["value"] == profile["threshold"]

    assert main(["eval", str(run)]) == 0
    assert (run / "eval" / "report.json").read_bytes() == (run / "report.json").read_bytes()

    out = root / "verdicts"
    assert main(["detect-unknown", "--profile", str(run / "profile.json"), str(dataset), "--out", str(out)]) == 0
    verdicts = read_json(out / "verdicts.json")
    assert len(verdicts["verdicts"]) == 90
    allowed = {"device-0", "device-1", "unknown"}
    assert {v["decision"] for v in verdicts["verdicts"]} <= allowed
    assert (out / "verdicts.csv").exists()

    pcap = root / "pcaps" / f"{device_label(2)}.pcap"
    assert main(["detect-unknown", "--profile", str(run / "profile.json"), str(pcap), "--out", str(root / "v2")]) == 0
    assert len(read_json(root / "v2" / "verdicts.json")["verdicts"]) == 30

    tampered = dict(profile, model_ref="0" * 64)
    (run / "profile.json").write_text(json.dumps(tampered))
    assert main(["detect-unknown", "--profile", str(run / "profile.json"), str(pcap), "--out", str(root / "v3")]) == 2


def test_experiment2_sweep_writes_one_run_per_device(small_capture):
    root, dataset = small_capture
    cfg = _config(root / "cfg.json")
    run = root / "sweep"
    assert main(["train", str(dataset), "--experiment", "2", "--exclude", "all", "--config", cfg,
                 "--epochs", "2", "--out", str(run)]) == 0
    sweep = read_json(run / "sweep.json")
    assert set(sweep["accuracy"]) == {"device-0", "device-1", "device-2"}
    for label in sweep["accuracy"]:
        assert (run / label / "profile.json").exists()
        assert main(["eval", str(run / label)]) == 0


# -------------------- RUNNER --------------------

def test_runner_logs_its_summary_when_a_step_fails(tmp_path):
    garbage = tmp_path / "garbage.pcap"
    garbage.write_bytes(b"\xde\xad\xbe\xef" * 10)
    assert main(["run", str(garbage), "--out", str(tmp_path / "pipeline")]) == 2
    logs = list(Config.LOG_DIR.glob("pipeline_runner__*.log"))
    assert len(logs) == 1
    text = logs[0].read_text()
    assert "Pipeline Timing Summary" in text
    assert "split" in text.split("Pipeline Timing Summary")[1]


# -------------------- END TO END --------------------

@pytest.mark.slow
def test_pipeline_end_to_end_experiment1(synthetic_capture, tmp_path):
    paths, mac_map = synthetic_capture
    cfg = _config(tmp_path / "cfg.json", hidden=64, batch_size=100)
    out = tmp_path / "pipeline"
    assert main(["run", *map(str, paths), "--mac-map", str(mac_map), "--config", cfg,
                 "--epochs", "5", "--out", str(out)]) == 0
    report = read_json(out / "run" / "report.json")
    assert report["class_names"] == [device_label(k) for k in range(5)]
    assert report["accuracy"] >= 0.95
    assert (out / "run" / "eval" / "report.json").read_bytes() == (out / "run" / "report.json").read_bytes()
    assert list(Config.LOG_DIR.glob("pipeline_runner__*.log"))


@pytest.mark.slow
def test_pipeline_end_to_end_experiment2(synthetic_capture, tmp_path):
    paths, mac_map = synthetic_capture
    cfg = _config(tmp_path / "cfg.json", hidden=64, batch_size=100)
    out = tmp_path / "pipeline"
    assert main(["run", *map(str, paths), "--mac-map", str(mac_map), "--config", cfg, "--epochs", "5",
                 "--experiment", "2", "--exclude", device_label(4), "--out", str(out)]) == 0
    report = read_json(out / "run" / "report.json")
    assert report["class_names"][-1] == f"{device_label(4)} (unknown)"
    assert report["accuracy"] >= 0.75
    threshold = report["threshold"]["value"]
    assert round(threshold * 100) == pytest.approx(threshold * 100)
