import subprocess
import sys

import numpy as np
import pytest

from shakedrop.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, SUMMARY_HEADER, main
from shakedrop.config import SCHEMA, ConfigError, ExperimentConfig, parse_text
from shakedrop.metrics import read_metrics_csv
from shakedrop.regularizers import Coefficient, Granularity, RegularizerKind

FAST = [
    "data.n=16", "data.eval_n=8", "data.image_size=4", "data.classes=2",
    "arch.base_width=4", "optimizer.batch_size=8", "schedule.total_epochs=2", "schedule.milestones=1",
]


def sets(*pairs):
    out = []
    for p in list(FAST) + list(pairs):
        out += ["--set", p]
    return out


def cli(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig.load()
        assert cfg["bn.eps"] == 1e-5 and cfg["bn.momentum"] == 0.1
        assert cfg["optimizer.weight_decay"] == 1e-4 and cfg["optimizer.nesterov"] is True
        assert cfg["schedule.milestones"] == (30, 45) and cfg["schedule.total_epochs"] == 60

    def test_parse_text(self):
        raw = parse_text("# comment\n optimizer.base_lr = 0.05 # trailing\n\nreg.kind=shakedrop\n")
        assert raw == {"optimizer.base_lr": "0.05", "reg.kind": "shakedrop"}

    @pytest.mark.parametrize("text", ["novalue\n", "a=1\na=2\n", "=3\n"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_text(text)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            ExperimentConfig.load(overrides=["arch.colour=red"])

    @pytest.mark.parametrize("item", ["reg.p_L=1.3", "optimizer.momentum=1", "optimizer.base_lr=nan",
                                      "arch.depth=9", "reg.granularity=voxel", "reg.alpha=1:0",
                                      "optimizer.batch_size=5000", "schedule.milestones=50,40"])
    def test_invalid_values(self, item):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(overrides=[item])

    def test_preset_expansion(self):
        cfg = ExperimentConfig.load(overrides=["reg.kind=shakedrop", "reg.preset=shakedrop-bn-end"])
        spec = cfg.coefficient_spec()
        assert spec.alpha == Coefficient.uniform(-1, 1) and spec.beta == Coefficient.uniform(0, 1)
        with pytest.raises(ConfigError):
            ExperimentConfig.load(overrides=["reg.preset=shakedrop-original", "reg.alpha=0.5"])

    def test_pool(self):
        cfg = ExperimentConfig.load(overrides=["reg.kind=shakedrop", "reg.pool=1:1,-1:0"])
        assert cfg.coefficient_spec().pool == ((1.0, 1.0), (-1.0, 0.0))

    def test_resolved_round_trip(self):
        cfg = ExperimentConfig.load(overrides=["reg.kind=shakedrop", "reg.preset=shakedrop-original",
                                               "reg.p_L=0.9", "arch.depth=20", "augment.mixup=0.2"])
        again = ExperimentConfig.from_mapping(parse_text(cfg.resolved()))
        assert again.values == cfg.values
        assert again.resolved() == cfg.resolved()
        assert set(parse_text(cfg.resolved())) == set(SCHEMA)

    def test_derived_objects(self):
        cfg = ExperimentConfig.load(overrides=["reg.kind=randomdrop", "reg.granularity=channel",
                                               "data.classes=3", "data.image_size=6", "data.channels=2"])
        reg = cfg.regularizer()
        assert reg.kind is RegularizerKind.RANDOMDROP and reg.granularity is Granularity.CHANNEL
        arch = cfg.architecture()
        assert arch.num_classes == 3 and arch.input_shape == (2, 6, 6)


class TestCliTrain:
    def test_train_writes_outputs_and_is_deterministic(self, capsys, tmp_path):
        args = sets("reg.kind=shakedrop", "reg.preset=shakedrop-original", "reg.p_L=0.5")
        code, out, _ = cli(capsys, "train", *args, "--out", str(tmp_path / "a"), "--seed", "3")
        assert code == 0 and out.startswith("trained epochs=2")
        cli(capsys, "train", *args, "--out", str(tmp_path / "b"), "--seed", "3")
        a, b = tmp_path / "a", tmp_path / "b"
        assert len(read_metrics_csv(a / "metrics.csv")) == 2
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "params.bin").read_bytes() == (b / "params.bin").read_bytes()
        assert (a / "config.resolved").read_text().replace("/a\n", "/b\n") == (b / "config.resolved").read_text()

    def test_resolved_config_reproduces_run(self, capsys, tmp_path):
        cli(capsys, "train", *sets("reg.kind=shakedrop"), "--out", str(tmp_path / "a"))
        code, _, _ = cli(capsys, "train", "--config", str(tmp_path / "a" / "config.resolved"),
                         "--out", str(tmp_path / "b"))
        assert code == 0
        assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()

    def test_eval_matches_training_metrics(self, capsys, tmp_path):
        out = str(tmp_path / "run")
        cli(capsys, "train", *sets(), "--out", out)
        code, text, _ = cli(capsys, "eval", *sets(), "--out", out)
        assert code == 0
        last = read_metrics_csv(tmp_path / "run" / "metrics.csv")[-1]
        fields = dict(kv.split("=") for kv in text.split())
        assert float(fields["eval_top1"]) == pytest.approx(last.eval_top1_error, rel=1e-5)

    def test_p_L_out_of_range_fails_before_compute(self, capsys, tmp_path):
        code, out, err = cli(capsys, "train", *sets("reg.p_L=1.3"), "--out", str(tmp_path / "x"))
        assert code == EXIT_CONFIG
        assert err.startswith("error: config:") and err.count("\n") == 1
        assert not (tmp_path / "x").exists()

    def test_divergence_exit(self, capsys, tmp_path):
        code, _, err = cli(capsys, "train", *sets("optimizer.base_lr=1e30"), "--out", str(tmp_path / "d"))
        assert code == EXIT_DIVERGED and err.startswith("error: diverged:")
        assert (tmp_path / "d" / "metrics.csv").exists()

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = cli(capsys, "train", "--config", str(tmp_path / "nope.cfg"))
        assert code == EXIT_IO and err.startswith("error: io:")

    def test_usage_error_is_one_line(self, capsys):
        code, _, err = cli(capsys, "train", "--bogus")
        assert code == EXIT_CONFIG and err.startswith("error: usage:") and err.count("\n") == 1

    def test_bad_log_level(self, capsys, monkeypatch):
        monkeypatch.setenv("SHAKEDROP_LOG", "loud")
        assert cli(capsys, "gradcheck")[0] == EXIT_CONFIG

    def test_dataset_file_not_mutated(self, capsys, tmp_path):
        path = tmp_path / "tiny.bin"
        rng = np.random.default_rng(0)
        rows = np.concatenate([rng.integers(0, 10, (8, 1)), rng.integers(0, 256, (8, 3072))], axis=1)
        rows.astype(np.uint8).tofile(path)
        before = path.read_bytes()
        code, _, _ = cli(capsys, "train", "--set", f"data.source={path}", "--set", "data.eval_source=",
                         "--set", "optimizer.batch_size=4", "--set", "schedule.total_epochs=1",
                         "--set", "schedule.milestones=", "--set", "arch.base_width=2",
                         "--out", str(tmp_path / "c"))
        assert code == 0
        assert path.read_bytes() == before

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "shakedrop", "train", "--set", "reg.p_L=2"],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_CONFIG
        assert proc.stderr.startswith("error: config:")


class TestCliChecks:
    def test_gradcheck_reports_ratio(self, capsys):
        code, out, _ = cli(capsys, "gradcheck", "--set", "gradcheck.max_elements=16")
        assert code == 0
        lines = out.strip().splitlines()
        assert any(l.startswith("block_vanilla ") and "status=ok" in l for l in lines)
        assert any(l.startswith("block_shakedrop_b0_coupled ") and "status=ok" in l for l in lines)
        ratio = [l for l in lines if l.startswith("shakedrop_frozen_b0")][0]
        fields = dict(kv.split("=") for kv in ratio.split()[1:])
        assert abs(float(fields["branch_grad_ratio"]) - 4.0) <= 1e-9
        assert fields["status"] == "intentional-mismatch"

    def test_gradcheck_tolerance_breach(self, capsys):
        code, _, err = cli(capsys, "gradcheck", "--set", "gradcheck.max_elements=4",
                           "--set", "gradcheck.tolerance=1e-30")
        assert code == EXIT_CHECK and err.startswith("error: gradcheck:")

    @pytest.mark.parametrize("items,coef", [
        (["reg.kind=shakedrop", "reg.preset=shakedrop-bn-end", "reg.p_L=0.5"], 0.5),
        (["reg.kind=shakedrop", "reg.preset=shakedrop-original", "reg.p_L=0.5", "expect.L=2"], 0.75),
        (["reg.kind=randomdrop", "reg.p_L=0.3", "expect.L=4", "expect.l=2"], 0.65),
    ])
    def test_expectation_coefficient(self, capsys, items, coef):
        argv = ["expectation-test", "--set", "expect.draws=2000"]
        for item in items:
            argv += ["--set", item]
        code, out, _ = cli(capsys, *argv)
        fields = dict(kv.split("=") for kv in out.split())
        assert code == 0
        assert float(fields["eval_coefficient"]) == pytest.approx(coef, rel=1e-12)
        assert float(fields["max_z"]) <= 5.0

    def test_expectation_needs_regularizer(self, capsys):
        assert cli(capsys, "expectation-test")[0] == EXIT_CONFIG


class TestCliSweep:
    def run(self, capsys, tmp_path, name, *extra):
        out = tmp_path / name
        code, _, _ = cli(capsys, "sweep", *sets("reg.kind=shakedrop", "schedule.total_epochs=1",
                                                "schedule.milestones=", *extra), "--out", str(out))
        return code, (out / "summary.csv").read_text()

    def test_four_cells_and_deterministic(self, capsys, tmp_path):
        code, a = self.run(capsys, tmp_path, "a", "sweep.p_L=0.5,0.9", "sweep.depths=8,14")
        _, b = self.run(capsys, tmp_path, "b", "sweep.p_L=0.5,0.9", "sweep.depths=8,14")
        assert code == 0
        lines = a.splitlines()
        assert lines[0] == SUMMARY_HEADER and len(lines) == 5
        assert [l.split(",")[:2] for l in lines[1:]] == [["8", "0.5"], ["14", "0.5"], ["8", "0.9"], ["14", "0.9"]]
        assert a == b

    def test_empty_grid(self, capsys, tmp_path):
        code, text = self.run(capsys, tmp_path, "e", "sweep.p_L=")
        assert code == 0 and text == SUMMARY_HEADER + "\n"

    def test_parallel_matches_sequential(self, capsys, tmp_path):
        _, seq = self.run(capsys, tmp_path, "s", "sweep.p_L=0.5,0.9", "sweep.depths=8")
        _, par = self.run(capsys, tmp_path, "p", "sweep.p_L=0.5,0.9", "sweep.depths=8", "sweep.processes=2")
        assert seq == par
