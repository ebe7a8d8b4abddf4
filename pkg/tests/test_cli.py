import json
import os

import numpy as np
import pytest

from sinkquant.cli import main
from sinkquant.dumpio import ManifestEntry, write_dump, write_json, write_manifest


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    out = json.loads(captured.out) if captured.out.strip() else None
    err = json.loads(captured.err) if captured.err.strip() else None
    return code, out, err


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(0)
    h = rng.uniform(-1, 1, size=(32, 64))
    h[0, 7] = 2000.0
    h[14, 7] = -1800.0
    write_dump(str(tmp_path / "h.kvsd"), h)
    write_json(
        str(tmp_path / "profile.json"),
        {
            "model_name": "toy",
            "total_layers": 4,
            "emergence_layer": 1,
            "hidden_size": 64,
            "outlier_channels": [7],
        },
    )
    keys = rng.normal(size=(32, 16))
    values = rng.normal(size=(32, 16))
    queries = rng.normal(size=(32, 16))
    for name, arr in (("keys", keys), ("values", values), ("queries", queries)):
        write_dump(str(tmp_path / f"{name}.kvsd"), arr)
    write_json(str(tmp_path / "sinks.json"), {"indices": [0, 14], "k_requested": 5})
    write_json(
        str(tmp_path / "config.json"),
        {"num_layers": 4, "hidden": 32, "heads": 2, "ffn_hidden": 48, "seed": 1},
    )
    write_json(
        str(tmp_path / "plant.json"),
        {"targets": [[0, 11, 2000.0], [9, 11, -1500.0]], "emerge_layer": 1, "dissipate_layer": 3},
    )
    return tmp_path


class TestDetect:
    def test_happy_path(self, workspace, capsys):
        code, out, _ = run_cli(
            capsys,
            "detect",
            "--dump", str(workspace / "h.kvsd"),
            "--profile", str(workspace / "profile.json"),
            "--k", "5",
            "--ratio", "100",
        )
        assert code == 0
        assert out["sinks"]["indices"] == [0, 14]
        assert out["count"] == 2

    def test_registry_profile_by_name(self, workspace, capsys):
        rng = np.random.default_rng(1)
        big = rng.uniform(-1, 1, size=(8, 4096))
        big[3, 2533] = 999.0
        write_dump(str(workspace / "big.kvsd"), big)
        code, out, _ = run_cli(
            capsys,
            "detect",
            "--dump", str(workspace / "big.kvsd"),
            "--profile", "LLaMA2-7B",
            "--k", "1",
        )
        assert code == 0
        assert out["sinks"]["indices"] == [3]

    def test_missing_dump_is_format_error(self, workspace, capsys):
        code, _, err = run_cli(
            capsys,
            "detect",
            "--dump", str(workspace / "absent.kvsd"),
            "--profile", str(workspace / "profile.json"),
        )
        assert code == 3
        assert err["code"] == "format"
        # stable error schema: exactly these fields, context carries the path
        assert set(err) == {"code", "message", "context"}
        assert err["context"]["path"].endswith("absent.kvsd")

    def test_bad_flag_is_usage_error(self, workspace, capsys):
        code, _, err = run_cli(capsys, "detect", "--dump")
        assert code == 2
        assert err["code"] == "usage"


class TestQuantize:
    def test_writes_outputs_and_footprint(self, workspace, capsys):
        out_dir = workspace / "out"
        code, out, _ = run_cli(
            capsys,
            "quantize",
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--scheme", "pt_kv_static",
            "--bits", "4",
            "--group", "16",
            "--sinks", str(workspace / "sinks.json"),
            "--out", str(out_dir),
        )
        assert code == 0
        assert sorted(os.listdir(out_dir)) == ["keys.kvsq", "sinks.json", "values.kvsq"]
        assert out["footprint"]["quantized_bytes"] == 2 * 30 * 16 * 4 // 8
        assert out["sinks"]["indices"] == [0, 14]

    def test_pfn_flag(self, workspace, capsys):
        out_dir = workspace / "out2"
        code, out, _ = run_cli(
            capsys,
            "quantize",
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--scheme", "pt_kv_dynamic",
            "--pfn", "3",
            "--out", str(out_dir),
        )
        assert code == 0
        assert out["sinks"]["indices"] == [0, 1, 2]

    def test_sinks_and_pfn_conflict(self, workspace, capsys):
        code, _, err = run_cli(
            capsys,
            "quantize",
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--scheme", "pt_kv_dynamic",
            "--sinks", str(workspace / "sinks.json"),
            "--pfn", "3",
            "--out", str(workspace / "out3"),
        )
        assert code == 2 and err["code"] == "usage"

    def test_unknown_scheme_rejected_by_parser(self, workspace, capsys):
        code, _, err = run_cli(
            capsys,
            "quantize",
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--scheme", "bogus",
            "--out", str(workspace / "out4"),
        )
        assert code == 2 and err["code"] == "usage"

    def test_calibration_directory(self, workspace, capsys):
        rng = np.random.default_rng(5)
        for sub in ("keys", "values"):
            os.makedirs(workspace / "calib" / sub, exist_ok=True)
            for i in range(2):
                write_dump(str(workspace / "calib" / sub / f"s{i}.kvsd"), rng.normal(size=(16, 16)))
        code, out, _ = run_cli(
            capsys,
            "quantize",
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--scheme", "pc_key_pt_value_static",
            "--calib", str(workspace / "calib"),
            "--out", str(workspace / "out5"),
        )
        assert code == 0


class TestAnalyze:
    def test_error_report(self, workspace, capsys):
        csv_path = workspace / "err.csv"
        code, out, _ = run_cli(
            capsys,
            "analyze", "error",
            "--tensor", str(workspace / "keys.kvsd"),
            "--sinks", str(workspace / "sinks.json"),
            "--bits", "2,4",
            "--axes", "per_token,per_channel",
            "--modes", "dynamic,static",
            "--group", "8",
            "--csv", str(csv_path),
        )
        assert code == 0
        assert len(out["rows"]) == 8
        assert csv_path.exists()

    def test_display_scale(self, workspace, capsys):
        args = [
            "analyze", "error",
            "--tensor", str(workspace / "keys.kvsd"),
            "--sinks", str(workspace / "sinks.json"),
            "--bits", "2",
        ]
        _, raw, _ = run_cli(capsys, *args)
        _, scaled, _ = run_cli(capsys, *args, "--display-scale", "100")
        assert scaled["rows"][0]["overall"] == pytest.approx(100 * raw["rows"][0]["overall"])

    def test_bias_report(self, workspace, capsys):
        rng = np.random.default_rng(2)
        attn = np.tril(rng.uniform(size=(2, 8, 8))) + 1e-9
        attn = np.tril(attn)
        attn /= attn.sum(axis=2, keepdims=True)
        write_dump(str(workspace / "attn.kvsd"), attn)
        write_dump(str(workspace / "vheads.kvsd"), rng.normal(size=(2, 8, 4)))
        code, out, _ = run_cli(
            capsys,
            "analyze", "bias",
            "--attention", str(workspace / "attn.kvsd"),
            "--values", str(workspace / "vheads.kvsd"),
            "--pfn", "2",
        )
        assert code == 0
        assert [r["head"] for r in out["rows"]] == [0, 1]

    def test_disruption_report(self, workspace, capsys):
        code, out, _ = run_cli(
            capsys,
            "analyze", "disruption",
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--queries", str(workspace / "queries.kvsd"),
            "--sinks", str(workspace / "sinks.json"),
            "--bits", "2,8",
            "--heads", "2",
        )
        assert code == 0
        assert out["rows"][0]["bits"] == 2
        assert out["rows"][0]["bias_l2_delta"] >= out["rows"][1]["bias_l2_delta"]

    def test_qk_report(self, workspace, capsys):
        code, out, _ = run_cli(
            capsys,
            "analyze", "qk",
            "--queries", str(workspace / "queries.kvsd"),
            "--keys", str(workspace / "keys.kvsd"),
            "--values", str(workspace / "values.kvsd"),
            "--sinks", str(workspace / "sinks.json"),
        )
        assert code == 0
        assert "v_norm_ratio" in out["rows"][0]

    def test_stages_via_manifest(self, workspace, capsys):
        from sinkquant.decoder import DecoderConfig, decoder_forward, synthesize_sink_model

        cfg = DecoderConfig(num_layers=6, hidden=64, heads=2, ffn_hidden=96, seed=4)
        weights, hooks = synthesize_sink_model(cfg, [(0, 9, 1800.0)], 1, 4)
        h0 = np.random.default_rng(5).normal(size=(16, 64))
        _, dumps = decoder_forward(h0, weights, cfg, hooks=hooks, capture=("H", "H_prime", "X_d_in", "X_d_out"))
        entries = []
        for kind in ("H", "H_prime", "X_d_in", "X_d_out"):
            for layer, arr in enumerate(dumps[kind]):
                fn = f"{kind}_{layer}.kvsd"
                write_dump(str(workspace / fn), arr)
                entries.append(
                    ManifestEntry("toy", layer, kind, arr.shape[0], arr.shape[1], fn)
                )
        write_manifest(entries, str(workspace / "manifest.json"))
        write_json(
            str(workspace / "stage_profile.json"),
            {
                "model_name": "toy",
                "total_layers": 6,
                "emergence_layer": 1,
                "hidden_size": 64,
                "outlier_channels": [9],
            },
        )
        code, out, _ = run_cli(
            capsys,
            "analyze", "stages",
            "--manifest", str(workspace / "manifest.json"),
            "--profile", str(workspace / "stage_profile.json"),
        )
        assert code == 0
        stages = [row["stage"] for row in out["layers"]]
        assert stages[1] == "emergence" and stages[4] == "dissipation"


class TestSimulate:
    def args(self, workspace, out_name, *extra):
        return [
            "simulate",
            "--config", str(workspace / "config.json"),
            "--plant", str(workspace / "plant.json"),
            "--mode", "kvsink",
            "--scheme", "pt_kv_static",
            "--bits", "2",
            "--k", "5",
            "--tokens", "24",
            "--seed", "3",
            "--out", str(workspace / out_name),
            *extra,
        ]

    def test_end_to_end(self, workspace, capsys):
        code, out, _ = run_cli(capsys, *self.args(workspace, "sim"))
        assert code == 0
        assert out["sinks"]["indices"] == [0, 9]
        assert out["h_l2_delta"] > 0
        assert (workspace / "sim" / "h_last.kvsd").exists()
        assert (workspace / "sim" / "snapshot" / "snapshot.json").exists()

    def test_seeded_runs_are_bit_identical(self, workspace, capsys):
        run_cli(capsys, *self.args(workspace, "sim_a"))
        run_cli(capsys, *self.args(workspace, "sim_b"))
        a = (workspace / "sim_a" / "h_last.kvsd").read_bytes()
        b = (workspace / "sim_b" / "h_last.kvsd").read_bytes()
        assert a == b

    def test_kvsink_without_profile_or_plant(self, workspace, capsys):
        code, _, err = run_cli(
            capsys,
            "simulate",
            "--config", str(workspace / "config.json"),
            "--mode", "kvsink",
            "--out", str(workspace / "sim_c"),
        )
        assert code == 2 and err["code"] == "config"

    def test_numeric_failure_exit_code(self, workspace, capsys):
        write_json(
            str(workspace / "inf_plant.json"),
            {"targets": [[0, 1, float("inf")]], "emerge_layer": 1, "dissipate_layer": 3},
        )
        code, _, err = run_cli(
            capsys,
            "simulate",
            "--config", str(workspace / "config.json"),
            "--plant", str(workspace / "inf_plant.json"),
            "--mode", "none",
            "--out", str(workspace / "sim_d"),
        )
        assert code == 4 and err["code"] == "numeric"


class TestBench:
    def test_quick_run(self, workspace, capsys):
        code, out, _ = run_cli(
            capsys,
            "bench", "--tokens", "128", "--repeat", "2", "--bits", "2",
        )
        assert code == 0
        assert out["prefill_ms"] > 0
        assert out["detect_ms"] >= 0
        assert out["footprint"]["quantized_bytes"] > 0

    def test_zero_repeat_is_usage_error(self, workspace, capsys):
        code, _, err = run_cli(capsys, "bench", "--repeat", "0", "--tokens", "64")
        assert code == 2 and err["code"] == "usage"

    def test_custom_config(self, workspace, capsys):
        code, out, _ = run_cli(
            capsys,
            "bench",
            "--config", str(workspace / "config.json"),
            "--tokens", "64",
            "--repeat", "1",
        )
        assert code == 0
        assert out["config"]["num_layers"] == 4
