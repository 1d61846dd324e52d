import pytest

from relocgan.config import OUTPUT_ROOT_ENV, RunConfig, parse_flat
from relocgan.networks import ArchConfig, ConfigError

SAMPLE = """
# transfer run
seed = 3
output_dir = runs/sketch
[arch]
channels = 64, 64, 32, 32
[mode]
name = constant+perp
freeze_d = 2
[loss_weights]
lambda_perp = 0.0001
use_pl = false
"""


class TestParsing:
    def test_sections_and_types(self):
        cfg = RunConfig.from_text(SAMPLE)
        assert cfg.seed == 3
        assert cfg.arch == ArchConfig(channels=(64, 64, 32, 32))
        assert cfg.mode.name == "constant+perp" and cfg.mode.freeze_d == 2
        assert cfg.loss_weights.lambda_perp == 1e-4 and cfg.loss_weights.use_pl is False

    def test_dotted_keys_equal_sections(self):
        dotted = "mode.name = unified\nbudget.kimg = 10\n"
        sectioned = "[mode]\nname = unified\n[budget]\nkimg = 10\n"
        assert RunConfig.from_text(dotted) == RunConfig.from_text(sectioned)

    def test_text_round_trip(self):
        cfg = RunConfig.from_text(SAMPLE)
        assert RunConfig.from_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize("text", ["arch.typo = 1", "bogus = 2", "[nope]\nx = 1", "seed.x = 1", "arch = 3"])
    def test_unknown_keys_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    @pytest.mark.parametrize("text", ["seed = abc", "loss_weights.use_pl = maybe", "mode.name = sideways",
                                      "mode.freeze_d = -1", "arch.resolutions = 8, 16"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    def test_syntax_errors(self):
        with pytest.raises(ConfigError):
            parse_flat("just words")
        with pytest.raises(ConfigError):
            parse_flat("seed = 1\nseed = 2")


class TestHash:
    def test_output_dir_not_hashed(self):
        a = RunConfig.from_text(SAMPLE)
        b = a.with_overrides(output_dir="elsewhere")
        assert a.config_hash() == b.config_hash()
        assert len(a.config_hash()) == 16

    def test_any_setting_changes_hash(self):
        a = RunConfig.from_text(SAMPLE)
        assert a.config_hash() != a.with_overrides(seed=4).config_hash()
        assert a.config_hash() != a.with_overrides(loss_weights__lambda_cl=0.25).config_hash()

    def test_stable_across_processes(self):
        # the hash is a pure function of the text form
        assert RunConfig().config_hash() == RunConfig.from_text(RunConfig().to_text()).config_hash()


class TestRunDir:
    def test_env_override(self, monkeypatch, tmp_path):
        cfg = RunConfig.from_text(SAMPLE)
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert str(cfg.run_dir()) == "runs/sketch"
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert cfg.run_dir() == tmp_path / "runs/sketch"

    def test_absolute_output_dir_wins(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, "/elsewhere")
        cfg = RunConfig().with_overrides(output_dir=str(tmp_path))
        assert cfg.run_dir() == tmp_path
