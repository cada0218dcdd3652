"""CLI tests: subcommand wiring, exit-code discipline, file outputs."""

import json
import os

import numpy as np
import pytest

from vidcap.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    rc = main(["synth", "--out", str(root), "--clips", "10", "--seed", "4"])
    assert rc == 0
    return root


class TestSynth:
    def test_manifest_line_per_clip(self, tmp_path):
        rc = main(["synth", "--out", str(tmp_path / "d"), "--clips", "6", "--seed", "1"])
        assert rc == 0
        lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 6

    def test_same_seed_reproduces_files(self, tmp_path):
        for tag in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / tag), "--clips", "5", "--seed", "9"]) == 0
        for name in sorted(os.listdir(tmp_path / "a" / "clips")):
            assert (tmp_path / "a" / "clips" / name).read_bytes() == (
                tmp_path / "b" / "clips" / name
            ).read_bytes()
        assert (tmp_path / "a" / "manifest.jsonl").read_text() == (
            tmp_path / "b" / "manifest.jsonl"
        ).read_text()

    def test_unwritable_output_path_exits_2(self, tmp_path):
        # A regular file in the way of the output directory; permission
        # bits are useless here because the suite may run as root.
        blocker = tmp_path / "blocker"
        blocker.write_text("in the way")
        rc = main(["synth", "--out", str(blocker / "data"), "--clips", "2", "--seed", "0"])
        assert rc == 2


class TestTrain:
    def test_short_toy_run_writes_artifacts(self, dataset, tmp_path):
        out = tmp_path / "run"
        rc = main(
            ["train", "--data", str(dataset), "--out", str(out), "--max-steps", "3", "--seed", "1"]
        )
        assert rc == 0
        assert (out / "final" / "manifest.json").exists()
        assert (out / "loss_curve.png").exists()
        log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == [1, 2, 3]

    def test_invalid_mask_rate_is_validation_error(self, dataset, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"preset": "toy", "mask_rate": 1.5}))
        rc = main(
            ["train", "--config", str(config), "--data", str(dataset), "--out", str(tmp_path / "x")]
        )
        assert rc == 2

    def test_config_errors_reported_all_at_once(self, dataset, tmp_path, capsys):
        config = tmp_path / "bad2.json"
        config.write_text(json.dumps({"preset": "toy", "mask_rate": 1.5, "beam_size": 0}))
        rc = main(
            ["train", "--config", str(config), "--data", str(dataset), "--out", str(tmp_path / "y")]
        )
        captured = capsys.readouterr().err
        assert rc == 2
        assert "mask_rate" in captured and "beam_size" in captured

    def test_resume_continues_step_count(self, dataset, tmp_path, capsys):
        out = tmp_path / "resumable"
        assert main(["train", "--data", str(dataset), "--out", str(out), "--max-steps", "2", "--seed", "2"]) == 0
        capsys.readouterr()
        rc = main(
            [
                "train",
                "--data", str(dataset),
                "--out", str(out),
                "--resume", str(out / "final"),
                "--max-steps", "4",
            ]
        )
        assert rc == 0
        assert "resumed" in capsys.readouterr().out
        log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == [1, 2, 3, 4]


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--max-steps", "3", "--seed", "5"]) == 0
    return out


class TestGenerateAndEval:
    def test_one_prediction_line_per_test_clip(self, dataset, run_dir, tmp_path):
        preds = tmp_path / "preds.jsonl"
        rc = main(
            [
                "generate",
                "--checkpoint", str(run_dir / "final"),
                "--data", str(dataset),
                "--split", "test",
                "--out", str(preds),
            ]
        )
        assert rc == 0
        manifest = [json.loads(l) for l in (dataset / "manifest.jsonl").read_text().splitlines()]
        n_test = sum(1 for e in manifest if e["split"] == "test")
        lines = [json.loads(l) for l in preds.read_text().splitlines()]
        assert len(lines) == n_test
        assert all(set(l) == {"video_id", "caption"} for l in lines)

    def test_generation_deterministic_across_reruns(self, dataset, run_dir, tmp_path):
        outs = []
        for tag in ("p1", "p2"):
            path = tmp_path / f"{tag}.jsonl"
            assert main(
                [
                    "generate",
                    "--checkpoint", str(run_dir / "final"),
                    "--data", str(dataset),
                    "--split", "val",
                    "--out", str(path),
                ]
            ) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_exits_2(self, dataset, tmp_path):
        rc = main(
            [
                "generate",
                "--checkpoint", str(tmp_path / "nope"),
                "--data", str(dataset),
                "--out", str(tmp_path / "p.jsonl"),
            ]
        )
        assert rc == 2

    def test_self_evaluation_scores_100(self, dataset, tmp_path, capsys):
        # References evaluated as predictions: BLEU-4 must print as 100.0.
        manifest = [json.loads(l) for l in (dataset / "manifest.jsonl").read_text().splitlines()]
        preds = tmp_path / "self.jsonl"
        preds.write_text(
            "\n".join(
                json.dumps({"video_id": e["video_id"], "caption": e["captions"][0]})
                for e in manifest
            )
            + "\n"
        )
        rc = main(["eval", "--pred", str(preds), "--refs", str(dataset / "manifest.jsonl")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "BLEU-4" in out and "100.0" in out

    def test_eval_writes_report_and_figure(self, dataset, tmp_path):
        manifest = [json.loads(l) for l in (dataset / "manifest.jsonl").read_text().splitlines()]
        preds = tmp_path / "p.jsonl"
        preds.write_text(
            json.dumps({"video_id": manifest[0]["video_id"], "caption": "a red square moves right"})
            + "\n"
        )
        report_path = tmp_path / "report.json"
        rc = main(
            ["eval", "--pred", str(preds), "--refs", str(dataset / "manifest.jsonl"), "--out", str(report_path)]
        )
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert set(report["scaled"]) == {"bleu4", "meteor", "rouge_l", "cider"}
        assert (tmp_path / "report.png").exists()

    def test_id_mismatch_exits_2_naming_id(self, dataset, tmp_path, capsys):
        preds = tmp_path / "bad.jsonl"
        preds.write_text(json.dumps({"video_id": "phantom", "caption": "a"}) + "\n")
        rc = main(["eval", "--pred", str(preds), "--refs", str(dataset / "manifest.jsonl")])
        assert rc == 2
        assert "phantom" in capsys.readouterr().err


class TestRegions:
    def test_reference_grid_prints_32_with_note(self, capsys):
        rc = main(["regions", "--grid", "7x7", "--delta", "2", "--g", "4", "--threshold", "0.3"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.startswith("32 regions")
        assert "note:" in out

    def test_zero_threshold_prints_zero(self, capsys):
        rc = main(["regions", "--grid", "7x7", "--delta", "2", "--g", "4", "--threshold", "0"])
        assert rc == 0
        assert capsys.readouterr().out.startswith("0 regions")

    def test_histogram_bins_sum_to_count(self, capsys):
        rc = main(["regions", "--grid", "9x9", "--delta", "1", "--g", "2", "--threshold", "0.4"])
        out = capsys.readouterr().out
        assert rc == 0
        total = int(out.split()[0])
        bins = [
            int(line.rsplit("(", 1)[1].rstrip(")"))
            for line in out.splitlines()
            if line.startswith("  area")
        ]
        assert sum(bins) == total

    def test_csv_and_figure_outputs(self, tmp_path):
        rc = main(
            ["regions", "--grid", "7x7", "--delta", "2", "--g", "4", "--threshold", "0.3",
             "--out", str(tmp_path)]
        )
        assert rc == 0
        rows = (tmp_path / "regions.csv").read_text().splitlines()
        assert len(rows) == 33  # header + 32 regions
        assert (tmp_path / "region_areas.png").exists()

    def test_malformed_grid_exits_2(self):
        assert main(["regions", "--grid", "7by7"]) == 2


class TestGradcheckCommand:
    def test_toy_preset_passes(self, capsys):
        rc = main(["gradcheck", "--preset", "toy", "--samples", "1"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out

    def test_unreachable_tolerance_fails_with_exit_1(self, capsys):
        rc = main(["gradcheck", "--preset", "toy", "--samples", "1", "--tolerance", "1e-18"])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out


class TestHelp:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for name in ("synth", "train", "generate", "eval", "regions", "gradcheck"):
            assert name in out

    def test_subcommand_help_shows_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["regions", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "0.3" in out and "default" in out

    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
