"""
Unit tests for run configuration loading and the command-line surface.
"""

import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from diffprompt.cli import COMMANDS, build_parser, main
from diffprompt.core.exceptions import ConfigurationError, ErrorCode
from diffprompt.schemas.config import RunConfig
from tests.conftest import TINY_CONFIG, make_config


def _write_config(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


class TestRunConfig:
    """Tests for RunConfig loading and hashing."""

    def test_defaults_validate(self):
        """Test that the default configuration is consistent."""
        cfg = RunConfig(out_dir="runs/x")
        assert cfg.diffusion.T_forward % cfg.diffusion.T_sample == 0
        assert cfg.prompt.depth <= cfg.grounder.depth

    def test_load_applies_overrides(self, tmp_path: Path):
        """Test that CLI overrides replace file values and None is ignored."""
        path = _write_config(tmp_path / "cfg.json", TINY_CONFIG)
        cfg = RunConfig.load(path, seed=11, out_dir=str(tmp_path / "out"), device=None)
        assert cfg.seed == 11
        assert cfg.out_dir == str(tmp_path / "out")
        assert cfg.device == "cpu"
        assert cfg.grounder.width == TINY_CONFIG["grounder"]["width"]

    def test_unreadable_file(self, tmp_path: Path):
        """Test that a missing or malformed file is a configuration error."""
        with pytest.raises(ConfigurationError):
            RunConfig.load(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            RunConfig.load(bad)

    def test_unknown_field_rejected(self):
        """Test that typos in the config are rejected."""
        with pytest.raises(ConfigurationError) as exc_info:
            RunConfig.parse_dict({"grounder": {"widht": 32}})
        assert exc_info.value.details["errors"]

    def test_schema_range_rejected(self):
        """Test that out-of-range fields are configuration errors."""
        with pytest.raises(ConfigurationError):
            make_config(grounder={"width": 18, "num_heads": 4})
        with pytest.raises(ConfigurationError):
            make_config(diffusion={"T_forward": 20, "T_sample": 3})
        with pytest.raises(ConfigurationError):
            make_config(vae={"kl_weight": -1.0})

    def test_config_is_immutable(self):
        """Test that a validated config cannot be mutated in place."""
        cfg = make_config()
        with pytest.raises(ValidationError):
            cfg.seed = 3

    def test_hash_tracks_defining_fields(self):
        """Test that seed changes the hash and equal configs share it."""
        assert make_config().config_hash() == make_config().config_hash()
        assert make_config().config_hash() != make_config(seed=8).config_hash()

    def test_section_hash_scope(self):
        """Test that a section hash ignores other sections."""
        base = make_config()
        other = base.updated(dit={"depth": 2})
        assert base.section_hash("corpus") == other.section_hash("corpus")
        assert base.section_hash("dit") != other.section_hash("dit")


class TestParser:
    """Tests for the argument parser."""

    def test_every_command_registered(self):
        """Test that each pipeline command parses with common options."""
        parser = build_parser()
        for command in COMMANDS:
            argv = [command, "--seed", "3", "--out", "o"]
            if command == "ablate":
                argv.insert(1, "depth")
            args = parser.parse_args(argv)
            assert args.command == command
            assert args.seed == 3

    def test_ablate_depths(self):
        """Test the depth list of the depth sweep."""
        args = build_parser().parse_args(["ablate", "depth", "--depths", "1", "2"])
        assert args.kind == "depth"
        assert args.depths == [1, 2]

    def test_evaluate_options(self):
        """Test split selection and saliency dumping."""
        args = build_parser().parse_args(["evaluate", "--split", "test", "--dump-saliency"])
        assert args.split == "test"
        assert args.dump_saliency

    def test_unknown_ablation(self):
        """Test that argparse rejects an unknown ablation kind."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["ablate", "everything"])


class TestMain:
    """Tests for exit codes of the entry point."""

    def test_bad_config_exits_2(self, tmp_path: Path, capsys):
        """Test that an invalid config exits 2 with a JSON error."""
        path = _write_config(tmp_path / "cfg.json", {"seed": -1})
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["success"] is False
        assert payload["error"]["code"] == ErrorCode.CONFIG_INVALID.value

    def test_unexpected_error_exits_1(self, tmp_path: Path, mocker, capsys):
        """Test that an unexpected exception is reported with a correlation id."""
        mocker.patch("diffprompt.cli.run_command", side_effect=RuntimeError("boom"))
        path = _write_config(tmp_path / "cfg.json", TINY_CONFIG)
        assert main(["report", "--config", str(path), "--out", str(tmp_path / "run")]) == 1
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert payload["error"]["code"] == ErrorCode.INTERNAL_UNEXPECTED.value
        assert payload["error"]["correlation_id"]

    def test_missing_upstream_exits_3(self, tmp_path: Path):
        """Test that a stage whose inputs are absent exits 3."""
        path = _write_config(tmp_path / "cfg.json", TINY_CONFIG)
        assert main(["pretrain", "--config", str(path), "--out", str(tmp_path / "run")]) == 3

    def test_gen_data_exits_0(self, tmp_path: Path):
        """Test that gen-data writes every split."""
        path = _write_config(tmp_path / "cfg.json", TINY_CONFIG)
        out = tmp_path / "run"
        assert main(["gen-data", "--config", str(path), "--out", str(out), "--log-level", "WARNING"]) == 0
        for split in ("train", "val", "test"):
            assert (out / "data" / f"{split}.dpds").exists()
